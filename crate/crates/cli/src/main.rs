use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igroupss::data::{hsif, HsiCube};
use igroupss::network::{checkpoint, count_flops, Model};
use igroupss::train::pipeline::{prepare, run_trial, split_for, Summary, TrialResult};
use igroupss::train::{evaluate, render_map, RunConfig, PALETTE};
use igroupss::{Error, Result};

const EXIT_INPUT: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_COMPAT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "igroupss",
    version,
    about = "Hyperspectral classification with interval-group selective scans"
)]
struct Cli {
    /// Worker threads for the numeric kernels (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print scene dimensions and per-class labeled counts.
    Inspect {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train one model per seed and write checkpoints and metrics.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on the test split for a seed.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a classification map of every labeled pixel as PPM.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Parameter and FLOP counts for a config and its ungrouped variant.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file (a run manifest works too).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    /// Pooling window and stride as `m,s`.
    #[arg(long)]
    downsample: Option<String>,
    /// interval, adjacent or all.
    #[arg(long)]
    grouping: Option<String>,
    /// cascade, spatial or spectral.
    #[arg(long)]
    operators: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// indian_pines, pavia_university, houston2013, fraction:x or counts:a,b,...
    #[arg(long)]
    split: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("trials", self.trials.map(|v| v.to_string()));
        put("patch", self.patch.map(|v| v.to_string()));
        put("pca", self.pca.map(|v| v.to_string()));
        put("embed_dim", self.embed_dim.map(|v| v.to_string()));
        put("stages", self.stages.map(|v| v.to_string()));
        put("downsample", self.downsample.clone());
        put("grouping", self.grouping.clone());
        put("operators", self.operators.clone());
        put("classes", self.classes.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("split", self.split.clone());
        o
    }

    /// True when the user said anything about the model or run.
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides().is_empty()
    }

    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_INPUT,
        Error::Config(_) => EXIT_CONFIG,
        Error::Compat(_) => EXIT_COMPAT,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Inspect { dataset } => inspect(&dataset),
        Command::Train {
            dataset,
            out,
            config,
        } => train(&dataset, &out, &config),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            config,
        } => eval(&checkpoint, &dataset, out.as_deref(), &config),
        Command::Map {
            checkpoint,
            dataset,
            out,
            config,
        } => map(&checkpoint, &dataset, &out, &config),
        Command::Report { config } => report(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn inspect(path: &Path) -> Result<()> {
    let cube = hsif::load(path)?;
    println!("{}", path.display());
    println!(
        "  height {}  width {}  bands {}",
        cube.height, cube.width, cube.bands
    );
    println!(
        "  classes {}  labeled pixels {}",
        cube.num_classes(),
        cube.labeled_count()
    );
    for (i, (name, n)) in cube.class_names.iter().zip(cube.class_counts()).enumerate() {
        println!("  {:>3} {:<28} {n:>7}", i + 1, name);
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn manifest(cfg: &RunConfig, dataset: &Path, crc: u32, out: &Path) -> String {
    let seeds: Vec<String> = cfg.seeds().iter().map(u64::to_string).collect();
    format!(
        "# run manifest\ndataset={}\ndataset_crc32={crc:08x}\nconfig_hash={}\nseeds={}\nout={}\n{}",
        dataset.display(),
        cfg.hash(),
        seeds.join(","),
        out.display(),
        cfg.to_text()
    )
}

fn train(dataset: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve(RunConfig::default())?;
    let cube = hsif::load(dataset)?;
    let crc = hsif::file_crc(dataset)?;
    let patches = prepare(&cube, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_file(
        &out.join("manifest.txt"),
        manifest(&cfg, dataset, crc, out).as_bytes(),
    )?;

    let mut results = Vec::new();
    for seed in cfg.seeds() {
        let dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let log_path = dir.join("loss.tsv");
        let mut log = fs::File::create(&log_path).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let _ = writeln!(log, "epoch\tloss\ttrain_acc");
        let trial = run_trial(&patches, &cfg, seed, |e| {
            let _ = writeln!(log, "{}\t{:.6}\t{:.4}", e.epoch, e.loss, e.accuracy);
            eprintln!(
                "seed {seed} epoch {:>3}  loss {:.4}  train acc {:.4}",
                e.epoch, e.loss, e.accuracy
            );
        })?;
        checkpoint::save(&trial.model, &dir.join("checkpoint.igsm"))?;
        write_file(&dir.join("metrics.json"), trial.result.to_json().as_bytes())?;
        println!(
            "seed {seed}: OA {:.2}%  AA {:.2}%  Kappa {:.4}",
            trial.result.oa * 100.0,
            trial.result.aa * 100.0,
            trial.result.kappa
        );
        results.push(trial.result);
    }
    let summary = Summary::from_trials(&results)?;
    write_file(&out.join("summary.json"), summary.to_json().as_bytes())?;
    println!(
        "mean over {} seed(s): OA {:.2} ± {:.2}  AA {:.2} ± {:.2}  Kappa {:.4} ± {:.4}",
        results.len(),
        summary.oa.mean * 100.0,
        summary.oa.std * 100.0,
        summary.aa.mean * 100.0,
        summary.aa.std * 100.0,
        summary.kappa.mean,
        summary.kappa.std
    );
    Ok(())
}

/// Loads the checkpoint and reconciles it with any config the user gave.
fn load_run(ckpt: &Path, args: &ConfigArgs) -> Result<(Model<f32>, RunConfig)> {
    let model = checkpoint::load(ckpt)?;
    let base = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    if !args.given() {
        return Ok((model, base));
    }
    let cfg = args.resolve(base.clone())?;
    let stored = RunConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    if stored.hash() != cfg.hash() {
        return Err(Error::Compat(format!(
            "checkpoint {} was built for config {} but the requested config hashes to {}",
            ckpt.display(),
            stored.hash(),
            cfg.hash()
        )));
    }
    Ok((model, cfg))
}

fn check_dataset(cube: &HsiCube, cfg: &RunConfig) -> Result<()> {
    if cube.num_classes() != cfg.model.num_classes {
        return Err(Error::Compat(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            cfg.model.num_classes,
            cube.num_classes()
        )));
    }
    if cube.bands < cfg.model.pca_dim {
        return Err(Error::Compat(format!(
            "checkpoint expects {} PCA bands but the dataset has only {}",
            cfg.model.pca_dim, cube.bands
        )));
    }
    Ok(())
}

fn eval(ckpt: &Path, dataset: &Path, out: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let (model, cfg) = load_run(ckpt, args)?;
    let cube = hsif::load(dataset)?;
    check_dataset(&cube, &cfg)?;
    let patches = prepare(&cube, &cfg)?;
    let seed = cfg.train.seed;
    let split = split_for(&patches, &cfg, seed)?;
    let metrics = evaluate(&model, &patches, &split.test, cfg.train.batch_size)?;
    eprint!("{}", metrics.report(&cube.class_names));
    let json = TrialResult::new(seed, cfg.hash(), metrics).to_json();
    match out {
        Some(p) => write_file(p, json.as_bytes()),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn map(ckpt: &Path, dataset: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let (model, cfg) = load_run(ckpt, args)?;
    let cube = hsif::load(dataset)?;
    check_dataset(&cube, &cfg)?;
    let patches = prepare(&cube, &cfg)?;
    let image = render_map(&model, &patches, &PALETTE, cfg.train.batch_size)?;
    image.write_ppm(out)?;
    println!(
        "wrote {}x{} map to {}",
        image.width,
        image.height,
        out.display()
    );
    Ok(())
}

fn report(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve(RunConfig::default())?;
    let mut ungrouped = cfg.model.clone();
    ungrouped.grouping = igroupss::igsm::Grouping::All;
    let rows = [
        (cfg.model.grouping.to_string(), cfg.model.clone()),
        ("all".to_string(), ungrouped),
    ];
    println!(
        "{:<10} {:>10} {:>14} {:>14} {:>14}",
        "grouping", "params", "flops (MAC)", "scan proj", "scan recur"
    );
    for (name, m) in rows {
        let params = Model::<f32>::new(&m, 0)?.count_params();
        let f = count_flops(&m)?;
        println!(
            "{name:<10} {params:>10} {:>14} {:>14} {:>14}",
            f.total(),
            f.scan_projection,
            f.scan_recurrence
        );
    }
    Ok(())
}
