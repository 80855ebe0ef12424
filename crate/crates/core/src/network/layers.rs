//! Parameterized building blocks. Each layer holds parameter handles only;
//! values live in a [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = store.add_uniform(format!("{prefix}.w"), &[inp, out], bound, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{prefix}.b"), &[out], bound, rng)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[ch]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[ch]))?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::lit(NORM_EPS))
    }
}

/// Batch normalization over the last axis with running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[ch]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[ch]))?,
            running_mean: store
                .add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[ch]))?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[ch]))?,
        })
    }

    /// Training tapes normalize with batch statistics and stage a running
    /// statistics update; inference tapes use the running statistics.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let eps = T::lit(NORM_EPS);
        let rm = &store.get(self.running_mean).value;
        let rv = &store.get(self.running_var).value;
        if tape.is_training() {
            let (y, mean, var) = tape.batch_norm_train(x, g, b, eps)?;
            let mom = T::lit(BN_MOMENTUM);
            let keep = T::one() - mom;
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_fn(old.shape(), |i| keep * old.data()[i] + mom * new[i])
            };
            let (nm, nv) = (blend(rm, &mean), blend(rv, &var));
            tape.stage_buffer_update(self.running_mean, nm);
            tape.stage_buffer_update(self.running_var, nv);
            Ok(y)
        } else {
            let (rm, rv) = (rm.data().to_vec(), rv.data().to_vec());
            tape.batch_norm_frozen(x, g, b, &rm, &rv, eps)
        }
    }
}

/// Depth-wise 3×3 same-padded convolution over `[b, p, p, ch]`.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl DepthwiseConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        ch: usize,
    ) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            w: store.add_uniform(format!("{prefix}.w"), &[9, ch], bound, rng)?,
            b: store.add_uniform(format!("{prefix}.b"), &[ch], bound, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dwconv(x, w, b)
    }
}

/// Single-input-channel 3×3×3 convolution producing `features` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        features: usize,
    ) -> Result<Self> {
        let bound = 1.0 / 27f64.sqrt();
        Ok(Self {
            w: store.add_uniform(format!("{prefix}.w"), &[27, features], bound, rng)?,
            b: store.add_uniform(format!("{prefix}.b"), &[features], bound, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3d(x, w, b)
    }
}
