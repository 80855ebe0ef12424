use igroupss::data::synth::synthetic_scene;
use igroupss::data::{extract_patches, pca_reduce};
use igroupss::network::{Model, ModelConfig};
use igroupss::train::pipeline::{mean_std, prepare, run_trial, Summary};
use igroupss::train::render::{paint, reference_map};
use igroupss::train::{
    adam_step, evaluate, predict, render_map, AdamConfig, AdamState, Metrics, RunConfig, PALETTE,
};
use igroupss::{Error, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_minimizes_a_parabola() {
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut x = vec![0.0f64];
    let mut st = AdamState::new(1);
    let mut reached = None;
    for t in 1..=2000 {
        let g = 2.0 * (x[0] - 3.0);
        adam_step(&mut x, &[g], &mut st, &cfg, t).unwrap();
        if (x[0] - 3.0).abs() < 1e-3 {
            reached = Some(t);
            break;
        }
    }
    assert!(reached.is_some(), "x = {}", x[0]);
}

#[test]
fn adam_on_a_store_skips_buffers() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add_buffer("b", Tensor::full(&[2], 1.0)).unwrap();
    store.get_mut(p).grad = Tensor::full(&[2], 1.0);
    store.get_mut(b).grad = Tensor::full(&[2], 1.0);
    let mut adam = igroupss::train::Adam::new(&store, AdamConfig::default());
    adam.step(&mut store).unwrap();
    assert!(store
        .get(p)
        .value
        .data()
        .iter()
        .all(|&v| (v - 0.999).abs() < 1e-9));
    assert_eq!(store.get(b).value.data(), &[1.0, 1.0]);
}

#[test]
fn cross_entropy_closed_forms() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::zeros(&[3, 16]));
    let loss = t.cross_entropy(l, &[0, 5, 15]).unwrap();
    assert!((t.value(loss).item() - 16f64.ln()).abs() < 1e-12);
    let l = t.constant(Tensor::from_fn(&[1, 4], |i| if i == 2 { 1e4 } else { 0.0 }));
    let loss = t.cross_entropy(l, &[2]).unwrap();
    assert!(t.value(loss).item().abs() < 1e-12);
    let l = t.constant(Tensor::zeros(&[1, 4]));
    assert!(t.cross_entropy(l, &[4]).is_err());
}

#[test]
fn metrics_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let m = Metrics::from_predictions(&truth, &pred, 5).unwrap();
        assert!((0.0..=1.0).contains(&m.oa) && (0.0..=1.0).contains(&m.aa));
        assert!((-1.0..=1.0).contains(&m.kappa));
        for c in 0..5 {
            let rows: u64 = m.confusion[c].iter().sum();
            assert_eq!(rows as usize, truth.iter().filter(|&&t| t == c).count());
        }
    }
    let m = Metrics::from_confusion(vec![vec![2, 0], vec![1, 1]]).unwrap();
    assert!(
        (m.oa - 0.75).abs() < 1e-15 && (m.aa - 0.75).abs() < 1e-15 && (m.kappa - 0.5).abs() < 1e-15
    );
    let m = Metrics::from_predictions(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
    assert_eq!(m.kappa, 0.0);
}

fn small_run() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            patch_size: 5,
            pca_dim: 6,
            embed_dim: 8,
            num_stages: 2,
            ssm_state: 4,
            num_classes: 3,
            classifier_hidden: 16,
            ..ModelConfig::default()
        },
        split: igroupss::data::SplitSpec::Fraction(0.2),
        ..RunConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg
}

#[test]
fn map_pixels_match_evaluate_predictions() {
    let cube = synthetic_scene(14, 12, 10, 3, 2);
    let cfg = small_run();
    let patches = prepare(&cube, &cfg).unwrap();
    let model = Model::<f32>::new(&cfg.model, 3).unwrap();
    let img = render_map(&model, &patches, &PALETTE, 32).unwrap();
    assert_eq!((img.height, img.width), (cube.height, cube.width));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let picks: Vec<usize> = (0..100).map(|_| rng.gen_range(0..patches.len())).collect();
    let pred = predict(&model, &patches, &picks, 7).unwrap();
    for (&i, &p) in picks.iter().zip(&pred) {
        let (r, c) = patches.coords[i];
        assert_eq!(img.pixel(r, c), PALETTE[p]);
    }
    for r in 0..cube.height {
        for c in 0..cube.width {
            if cube.label(r, c) == 0 {
                assert_eq!(img.pixel(r, c), [0, 0, 0]);
            }
        }
    }
    let ppm = img.to_ppm();
    let header = format!("P6\n{} {}\n255\n", cube.width, cube.height);
    assert!(ppm.starts_with(header.as_bytes()));
    assert_eq!(ppm.len(), header.len() + 3 * cube.width * cube.height);
}

#[test]
fn correct_predictions_reproduce_reference_map() {
    let cube = synthetic_scene(6, 6, 4, 3, 5);
    let (reduced, _) = pca_reduce(&cube, 4).unwrap();
    let patches = extract_patches(&reduced, 3).unwrap();
    let mut classes = vec![None; 36];
    for (&(r, c), &l) in patches.coords.iter().zip(&patches.labels) {
        classes[r * 6 + c] = Some(l - 1);
    }
    assert_eq!(
        paint(6, 6, &classes, &PALETTE),
        reference_map(&patches, &PALETTE)
    );
}

#[test]
fn empty_test_set_is_rejected() {
    let cube = synthetic_scene(6, 6, 6, 3, 6);
    let cfg = small_run();
    let patches = prepare(&cube, &cfg).unwrap();
    let model = Model::<f32>::new(&cfg.model, 0).unwrap();
    assert!(matches!(
        evaluate(&model, &patches, &[], 8),
        Err(Error::Contract(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let cube = synthetic_scene(12, 12, 8, 3, 7);
    let cfg = small_run();
    let patches = prepare(&cube, &cfg).unwrap();
    let a = run_trial(&patches, &cfg, 5, |_| {}).unwrap();
    let b = run_trial(&patches, &cfg, 5, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.result.to_json(), b.result.to_json());
    assert_eq!(a.split, b.split);
    let c = run_trial(&patches, &cfg, 6, |_| {}).unwrap();
    assert_ne!(a.log, c.log);
    let s = Summary::from_trials(&[a.result, c.result]).unwrap();
    assert_eq!(s.seeds, vec![5, 6]);
    assert!(s.oa.std >= 0.0);
}

#[test]
fn mean_and_population_std() {
    let m = mean_std(&[0.9, 0.95, 1.0]);
    assert!((m.mean - 0.95).abs() < 1e-12);
    assert!((m.std - (0.05f64 * 0.05 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
}

/// 64 uniform-random 13×13×30 patches with balanced random labels over 4
/// classes, trained full-batch with the default model.
#[test]
fn overfit_smoke() {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| {
        let start = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        let x = Tensor::from_fn(&[64, 13, 13, 30], |_| rng.gen_range(0.0..1.0f32));
        let mut targets: Vec<usize> = (0..64).map(|i| i % 4).collect();
        for i in (1..64).rev() {
            targets.swap(i, rng.gen_range(0..=i));
        }
        let cfg = ModelConfig {
            num_classes: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::<f32>::new(&cfg, 0).unwrap();
        let mut adam = igroupss::train::Adam::new(&model.store, AdamConfig::default());
        let mut losses = Vec::new();
        let mut solved_at = None;
        for step in 1..=300 {
            let (loss, correct) =
                igroupss::train::train_step(&mut model, &mut adam, x.clone(), &targets).unwrap();
            losses.push(loss);
            if correct == 64 {
                solved_at = Some(step);
                break;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        eprintln!(
            "overfit: 100% at step {solved_at:?}, {} steps, {elapsed:.1}s",
            losses.len()
        );
        assert!(
            solved_at.is_some(),
            "train accuracy below 100% after 300 steps"
        );
        assert!(elapsed < 600.0);
        if losses.len() >= 20 {
            let median = |s: &[f32]| {
                let mut v = s.to_vec();
                v.sort_by(f32::total_cmp);
                v[v.len() / 2]
            };
            assert!(median(&losses[losses.len() - 10..]) < median(&losses[..10]));
        }
    });
}
