use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{BlockSpec, Igssb};
use super::config::ModelConfig;
use super::layers::{BatchNorm, Conv3d, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// 3D convolution, batch norm, ReLU, then a per-pixel linear map.
#[derive(Clone, Debug)]
pub struct PixelEmbed {
    pub conv: Conv3d,
    pub bn: BatchNorm,
    pub proj: Linear,
}

impl PixelEmbed {
    /// `x [b, B, B, L]` → `[b, B, B, d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        let y = tape.relu(y)?;
        let features = tape.shape(y)[4];
        let y = tape.reshape(y, &[s[0], s[1], s[2], s[3] * features])?;
        self.proj.forward(tape, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Average pooling followed by a linear embedding; absent in stage 1.
    pub downsample: Option<Linear>,
    pub blocks: Vec<Igssb>,
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: PixelEmbed,
    pub stages: Vec<Stage>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let sides = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let f = config.conv_features;
        let embed = PixelEmbed {
            conv: Conv3d::new(&mut store, &mut rng, "embed.conv", f)?,
            bn: BatchNorm::new(&mut store, "embed.bn", f)?,
            proj: Linear::new(
                &mut store,
                &mut rng,
                "embed.proj",
                config.pca_dim * f,
                d,
                true,
            )?,
        };
        let mut stages = Vec::with_capacity(config.num_stages);
        for (i, &side) in sides.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            let downsample = if i == 0 {
                None
            } else {
                Some(Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.down"),
                    d,
                    d,
                    true,
                )?)
            };
            let spec = BlockSpec {
                side,
                dim: d,
                inner: config.inner_dim(),
                state: config.ssm_state,
                ffn_hidden: d * config.ffn_ratio,
                grouping: config.grouping,
                operators: config.operators,
            };
            let blocks = (0..config.blocks_per_stage)
                .map(|j| Igssb::new(&mut store, &mut rng, &format!("{prefix}.igssb{j}"), &spec))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                downsample,
                blocks,
                side,
            });
        }
        let head_hidden = Linear::new(
            &mut store,
            &mut rng,
            "head.fc1",
            d,
            config.classifier_hidden,
            true,
        )?;
        let head_out = Linear::new(
            &mut store,
            &mut rng,
            "head.fc2",
            config.classifier_hidden,
            config.num_classes,
            true,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            embed,
            stages,
            head_hidden,
            head_out,
        })
    }

    /// Same architecture, values converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            stages: self.stages.clone(),
            head_hidden: self.head_hidden,
            head_out: self.head_out,
        }
    }

    /// Trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.count_trainable()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.patch_size, c.patch_size, c.pca_dim];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Config(format!(
                "input patch shape {:?} does not match the model's [batch, {}, {}, {}]",
                shape, want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Runs the stage stack on `x [b, B, B, L]`, returning the final feature
    /// map and the spatial side observed after each stage.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<usize>)> {
        self.check_input(tape.shape(x))?;
        let store = &self.store;
        let mut f = self.embed.forward(tape, store, x)?;
        let mut trace = Vec::with_capacity(self.stages.len());
        let (m, s) = self.config.downsample;
        for stage in &self.stages {
            if let Some(down) = &stage.downsample {
                f = tape.avg_pool(f, m, s)?;
                f = down.forward(tape, store, f)?;
            }
            for block in &stage.blocks {
                f = block.forward(tape, store, f)?;
            }
            trace.push(tape.shape(f)[1]);
        }
        Ok((f, trace))
    }

    /// Spatial average of a `[b, p, p, d]` feature map, then the classifier.
    pub fn classify(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let flat = tape.reshape(f, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean(flat, 1)?;
        let pooled = tape.reshape(pooled, &[s[0], s[3]])?;
        let h = self.head_hidden.forward(tape, &self.store, pooled)?;
        let h = tape.silu(h)?;
        self.head_out.forward(tape, &self.store, h)
    }

    /// Logits `[b, classes]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (f, _) = self.features(tape, x)?;
        self.classify(tape, f)
    }

    /// Inference-mode logits for a batch of patches.
    pub fn predict_logits(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Arg-max class (0-based) per patch.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.predict_logits(batch)?;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}
