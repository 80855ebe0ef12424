//! Spatial/spectral operators and the IGSSB block.

use rand_chacha::ChaCha8Rng;

use super::config::OperatorMode;
use super::layers::{DepthwiseConv, LayerNorm, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::igsm::{Domain, Grouping, Igsm};
use crate::params::ParamStore;
use crate::tensor::Real;

/// `f + out(LN(IGSM(SiLU(DWConv(in_x(LN f))))) ⊙ SiLU(in_z(LN f)))`.
#[derive(Clone, Debug)]
pub struct Operator {
    pub norm_in: LayerNorm,
    pub in_z: Linear,
    pub in_x: Linear,
    pub dwconv: DepthwiseConv,
    pub igsm: Igsm,
    pub norm_out: LayerNorm,
    pub out: Linear,
}

impl Operator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        domain: Domain,
        grouping: Grouping,
        side: usize,
        dim: usize,
        inner: usize,
        state: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_in: LayerNorm::new(store, &format!("{prefix}.norm_in"), dim)?,
            in_z: Linear::new(store, rng, &format!("{prefix}.in_z"), dim, inner, true)?,
            in_x: Linear::new(store, rng, &format!("{prefix}.in_x"), dim, inner, true)?,
            dwconv: DepthwiseConv::new(store, rng, &format!("{prefix}.dwconv"), inner)?,
            igsm: Igsm::new(
                store,
                rng,
                &format!("{prefix}.igsm"),
                domain,
                grouping,
                side,
                inner,
                state,
            )?,
            norm_out: LayerNorm::new(store, &format!("{prefix}.norm_out"), inner)?,
            out: Linear::new(store, rng, &format!("{prefix}.out"), inner, dim, true)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let n = self.norm_in.forward(tape, store, f)?;
        let z = self.in_z.forward(tape, store, n)?;
        let z = tape.silu(z)?;
        let x = self.in_x.forward(tape, store, n)?;
        let x = self.dwconv.forward(tape, store, x)?;
        let x = tape.silu(x)?;
        let y = self.igsm.forward(tape, store, x)?;
        let y = self.norm_out.forward(tape, store, y)?;
        let y = tape.mul(y, z)?;
        let y = self.out.forward(tape, store, y)?;
        tape.add(f, y)
    }
}

/// Two-layer feed-forward with SiLU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Spatial operator, then spectral operator, then a residual FFN.
#[derive(Clone, Debug)]
pub struct Igssb {
    pub spatial: Option<Operator>,
    pub spectral: Option<Operator>,
    pub ffn: FeedForward,
}

pub struct BlockSpec {
    pub side: usize,
    pub dim: usize,
    pub inner: usize,
    pub state: usize,
    pub ffn_hidden: usize,
    pub grouping: Grouping,
    pub operators: OperatorMode,
}

impl Igssb {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        spec: &BlockSpec,
    ) -> Result<Self> {
        let mut op = |name: &str, domain| {
            Operator::new(
                store,
                rng,
                &format!("{prefix}.{name}"),
                domain,
                spec.grouping,
                spec.side,
                spec.dim,
                spec.inner,
                spec.state,
            )
        };
        let spatial = spec
            .operators
            .has_spatial()
            .then(|| op("spa", Domain::Spatial))
            .transpose()?;
        let spectral = spec
            .operators
            .has_spectral()
            .then(|| op("spe", Domain::Spectral))
            .transpose()?;
        let ffn = FeedForward::new(
            store,
            rng,
            &format!("{prefix}.ffn"),
            spec.dim,
            spec.ffn_hidden,
        )?;
        Ok(Self {
            spatial,
            spectral,
            ffn,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let mut h = f;
        if let Some(op) = &self.spatial {
            h = op.forward(tape, store, h)?;
        }
        if let Some(op) = &self.spectral {
            h = op.forward(tape, store, h)?;
        }
        let y = self.ffn.forward(tape, store, h)?;
        tape.add(h, y)
    }
}
