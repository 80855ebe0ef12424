//! Selective state-space scan.
//!
//! The recurrence per channel `d` and state `n`:
//!
//! ```text
//! Ā = exp(Δ_t[d] · A[d,n])      B̄ = Δ_t[d] · B_t[n]
//! h_t[d,n] = Ā · h_{t-1}[d,n] + B̄ · x_t[d]
//! y_t[d]   = Σ_n C_t[n] · h_t[d,n] + D[d] · x_t[d]
//! ```
//!
//! `B_t`, `C_t` and `Δ_t` are projected from the input sequence itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Default state size per channel.
pub const STATE_DIM: usize = 16;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub width: usize,
    pub state: usize,
}

/// Hidden states saved by the forward pass, `[seqs, len, width, state]`.
/// Empty when the forward ran without gradient tracking.
pub struct ScanCache<T> {
    h: Vec<T>,
}

pub(crate) struct ScanGrads<T> {
    pub dx: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd_skip: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward_kernel<T: Real>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: ScanDims,
    y: &mut [T],
    record: bool,
) -> ScanCache<T> {
    let ScanDims {
        seqs,
        len,
        width,
        state,
    } = dims;
    let seq_x = len * width;
    let seq_s = len * state;
    let seq_h = len * width * state;
    let mut h_all = if record {
        vec![T::zero(); seqs * seq_h]
    } else {
        Vec::new()
    };

    let run = |s: usize, ys: &mut [T], hs: Option<&mut [T]>| {
        let mut h = vec![T::zero(); width * state];
        let xs = &x[s * seq_x..][..seq_x];
        let ds = &delta[s * seq_x..][..seq_x];
        let bs = &b[s * seq_s..][..seq_s];
        let cs = &c[s * seq_s..][..seq_s];
        let mut hs = hs;
        for t in 0..len {
            let bt = &bs[t * state..][..state];
            let ct = &cs[t * state..][..state];
            for d in 0..width {
                let xv = xs[t * width + d];
                let dl = ds[t * width + d];
                let hd = &mut h[d * state..][..state];
                let ad = &a[d * state..][..state];
                let mut acc = T::zero();
                for n in 0..state {
                    let v = (dl * ad[n]).exp() * hd[n] + dl * bt[n] * xv;
                    hd[n] = v;
                    acc += ct[n] * v;
                }
                ys[t * width + d] = acc + d_skip[d] * xv;
            }
            if let Some(hs) = hs.as_deref_mut() {
                hs[t * width * state..][..width * state].copy_from_slice(&h);
            }
        }
    };

    let work = seqs * seq_h;
    if record {
        if work >= kernels::PAR_THRESHOLD {
            y.par_chunks_mut(seq_x)
                .zip(h_all.par_chunks_mut(seq_h))
                .enumerate()
                .for_each(|(s, (ys, hs))| run(s, ys, Some(hs)));
        } else {
            for (s, (ys, hs)) in y.chunks_mut(seq_x).zip(h_all.chunks_mut(seq_h)).enumerate() {
                run(s, ys, Some(hs));
            }
        }
    } else if work >= kernels::PAR_THRESHOLD {
        y.par_chunks_mut(seq_x)
            .enumerate()
            .for_each(|(s, ys)| run(s, ys, None));
    } else {
        for (s, ys) in y.chunks_mut(seq_x).enumerate() {
            run(s, ys, None);
        }
    }
    ScanCache { h: h_all }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward_kernel<T: Real>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: ScanDims,
    cache: &ScanCache<T>,
    dy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        seqs,
        len,
        width,
        state,
    } = dims;
    assert_eq!(
        cache.h.len(),
        seqs * len * width * state,
        "scan backward without recorded states"
    );
    let seq_x = len * width;
    let seq_s = len * state;
    let seq_h = len * width * state;
    let ws = width * state;

    let mut dx = vec![T::zero(); x.len()];
    let mut ddelta = vec![T::zero(); x.len()];
    let mut db = vec![T::zero(); b.len()];
    let mut dc = vec![T::zero(); c.len()];

    // Per-sequence partials for the shared A and D; reduced in sequence order.
    let one = |s: usize, dxs: &mut [T], dds: &mut [T], dbs: &mut [T], dcs: &mut [T]| {
        let mut da = vec![T::zero(); ws];
        let mut dd = vec![T::zero(); width];
        let mut dh = vec![T::zero(); ws];
        let zeros = vec![T::zero(); ws];
        let xs = &x[s * seq_x..][..seq_x];
        let ds = &delta[s * seq_x..][..seq_x];
        let bs = &b[s * seq_s..][..seq_s];
        let cs = &c[s * seq_s..][..seq_s];
        let gs = &dy[s * seq_x..][..seq_x];
        let hs = &cache.h[s * seq_h..][..seq_h];
        for t in (0..len).rev() {
            let ht = &hs[t * ws..][..ws];
            let hp = if t == 0 {
                &zeros[..]
            } else {
                &hs[(t - 1) * ws..][..ws]
            };
            let bt = &bs[t * state..][..state];
            let ct = &cs[t * state..][..state];
            let dbt = &mut dbs[t * state..][..state];
            let dct = &mut dcs[t * state..][..state];
            for d in 0..width {
                let i = t * width + d;
                let (xv, dl, gy) = (xs[i], ds[i], gs[i]);
                dd[d] += gy * xv;
                let mut dxv = gy * d_skip[d];
                let mut ddl = T::zero();
                for n in 0..state {
                    let j = d * state + n;
                    let an = a[j];
                    let dec = (dl * an).exp();
                    dct[n] += gy * ht[j];
                    let g = dh[j] + gy * ct[n];
                    let gp = g * hp[j] * dec;
                    ddl += gp * an + g * bt[n] * xv;
                    da[j] += gp * dl;
                    dbt[n] += g * dl * xv;
                    dxv += g * dl * bt[n];
                    dh[j] = g * dec;
                }
                dxs[i] += dxv;
                dds[i] += ddl;
            }
        }
        (da, dd)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if seqs * seq_h >= kernels::PAR_THRESHOLD {
        dx.par_chunks_mut(seq_x)
            .zip(ddelta.par_chunks_mut(seq_x))
            .zip(db.par_chunks_mut(seq_s))
            .zip(dc.par_chunks_mut(seq_s))
            .enumerate()
            .map(|(s, (((dxs, dds), dbs), dcs))| one(s, dxs, dds, dbs, dcs))
            .collect()
    } else {
        dx.chunks_mut(seq_x)
            .zip(ddelta.chunks_mut(seq_x))
            .zip(db.chunks_mut(seq_s))
            .zip(dc.chunks_mut(seq_s))
            .enumerate()
            .map(|(s, (((dxs, dds), dbs), dcs))| one(s, dxs, dds, dbs, dcs))
            .collect()
    };
    let mut da = vec![T::zero(); ws];
    let mut dd_skip = vec![T::zero(); width];
    for (pa, pd) in &partials {
        kernels::add_into(&mut da, pa);
        kernels::add_into(&mut dd_skip, pd);
    }
    ScanGrads {
        dx,
        ddelta,
        da,
        db,
        dc,
        dd_skip,
    }
}

/// Zero-order-hold discretization with the simplified input matrix
/// `B̄ = Δ·B`. Shapes: `a [D, N]`, `b_t [N]`, `delta_t [D]`.
pub fn discretize<T: Real>(
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    delta_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.rank() != 2 || a.shape()[0] != delta_t.len() || a.shape()[1] != b_t.len() {
        return Err(Error::shape(
            "discretize",
            a.shape(),
            &[delta_t.len(), b_t.len()],
        ));
    }
    if let Some(bad) = delta_t.data().iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Contract(format!(
            "step size must be positive, got {bad}"
        )));
    }
    let n = b_t.len();
    let a_bar = Tensor::from_fn(a.shape(), |i| (delta_t.data()[i / n] * a.data()[i]).exp());
    let b_bar = Tensor::from_fn(a.shape(), |i| delta_t.data()[i / n] * b_t.data()[i % n]);
    Ok((a_bar, b_bar))
}

/// Explicit per-step scan inputs for one sequence of length `L`.
#[derive(Clone, Debug)]
pub struct ScanInputs<T: Real = f32> {
    /// `[L, D]`, positive.
    pub delta: Tensor<T>,
    /// `[D, N]`, the continuous (negative) state matrix.
    pub a: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
    /// `[D]`
    pub d_skip: Tensor<T>,
}

impl<T: Real> ScanInputs<T> {
    fn check(&self, x: &Tensor<T>) -> Result<ScanDims> {
        if x.rank() != 2 {
            return Err(Error::shape("scan x", x.shape(), &[2]));
        }
        let (len, width) = (x.shape()[0], x.shape()[1]);
        if self.a.rank() != 2 || self.a.shape()[0] != width {
            return Err(Error::shape("scan A", x.shape(), self.a.shape()));
        }
        let state = self.a.shape()[1];
        for (name, t, want) in [
            ("scan delta", &self.delta, vec![len, width]),
            ("scan B", &self.b, vec![len, state]),
            ("scan C", &self.c, vec![len, state]),
            ("scan D", &self.d_skip, vec![width]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(name, t.shape(), &want));
            }
        }
        if let Some(bad) = self.delta.data().iter().find(|&&d| !(d > T::zero())) {
            return Err(Error::Contract(format!(
                "step size must be positive, got {bad}"
            )));
        }
        Ok(ScanDims {
            seqs: 1,
            len,
            width,
            state,
        })
    }

    /// True when Δ, B and C are identical at every step.
    pub fn is_time_invariant(&self) -> bool {
        fn rows_equal<T: Real>(t: &Tensor<T>) -> bool {
            let w = t.shape()[1];
            let first = &t.data()[..w];
            t.data().chunks(w).all(|r| r == first)
        }
        rows_equal(&self.delta) && rows_equal(&self.b) && rows_equal(&self.c)
    }
}

/// Runs the recurrence over `x [L, D]` with explicit per-step inputs.
pub fn scan_with_inputs<T: Real>(x: &Tensor<T>, inputs: &ScanInputs<T>) -> Result<Tensor<T>> {
    let dims = inputs.check(x)?;
    let mut y = vec![T::zero(); x.len()];
    scan_forward_kernel(
        x.data(),
        inputs.delta.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.d_skip.data(),
        dims,
        &mut y,
        false,
    );
    Tensor::new(x.shape(), y)
}

/// Convolution form for time-invariant inputs: `y = x ∗ K + D·x` with
/// `K_j[d] = Σ_n C[n] · Ā[d,n]^j · B̄[d,n]`.
pub fn kernel_convolve<T: Real>(x: &Tensor<T>, inputs: &ScanInputs<T>) -> Result<Tensor<T>> {
    let ScanDims {
        len, width, state, ..
    } = inputs.check(x)?;
    if !inputs.is_time_invariant() {
        return Err(Error::Contract(
            "kernel_convolve requires step size, B and C constant across steps".into(),
        ));
    }
    let delta = Tensor::new(&[width], inputs.delta.data()[..width].to_vec())?;
    let b = Tensor::new(&[state], inputs.b.data()[..state].to_vec())?;
    let c = &inputs.c.data()[..state];
    let (a_bar, b_bar) = discretize(&inputs.a, &b, &delta)?;

    let mut kernel = vec![T::zero(); len * width];
    for j in 0..len {
        for d in 0..width {
            kernel[j * width + d] = (0..state)
                .map(|n| {
                    c[n] * a_bar.data()[d * state + n].powi(j as i32) * b_bar.data()[d * state + n]
                })
                .sum();
        }
    }
    let xd = x.data();
    let y = Tensor::from_fn(x.shape(), |i| {
        let (t, d) = (i / width, i % width);
        let conv: T = (0..=t)
            .map(|j| kernel[j * width + d] * xd[(t - j) * width + d])
            .sum();
        conv + inputs.d_skip.data()[d] * xd[i]
    });
    Ok(y)
}

/// Learned selective-scan parameters for a single direction.
#[derive(Clone, Debug)]
pub struct SsmParams<T: Real = f32> {
    /// `log(-A)`, `[D, N]`.
    pub a_log: Tensor<T>,
    /// `[D, D]`
    pub dt_weight: Tensor<T>,
    /// `[D]`
    pub dt_bias: Tensor<T>,
    /// `[D, N]`
    pub b_weight: Tensor<T>,
    /// `[D, N]`
    pub c_weight: Tensor<T>,
    /// `[D]`
    pub d_skip: Tensor<T>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Real> SsmParams<T> {
    pub fn init(width: usize, state: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut uni =
            |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        let dt_weight = uni(&[width, width]);
        let b_weight = uni(&[width, state]);
        let c_weight = uni(&[width, state]);
        let dt_bias = Tensor::from_fn(&[width], |_| {
            T::lit(inverse_softplus(rng.gen_range(DT_MIN..=DT_MAX)))
        });
        Self {
            a_log: Tensor::from_fn(&[width, state], |i| T::lit(((i % state) as f64 + 1.0).ln())),
            dt_weight,
            dt_bias,
            b_weight,
            c_weight,
            d_skip: Tensor::ones(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Input-dependent Δ, B, C for the sequence `x [L, D]`.
    pub fn project(&self, x: &Tensor<T>) -> Result<ScanInputs<T>> {
        let mut pre = x.matmul(&self.dt_weight)?;
        let w = self.width();
        for row in pre.data_mut().chunks_mut(w) {
            kernels::add_into(row, self.dt_bias.data());
        }
        Ok(ScanInputs {
            delta: pre.map(kernels::softplus),
            a: self.a(),
            b: x.matmul(&self.b_weight)?,
            c: x.matmul(&self.c_weight)?,
            d_skip: self.d_skip.clone(),
        })
    }

    /// Registers every field in `store` under `prefix`.
    pub fn register(self, store: &mut ParamStore<T>, prefix: &str) -> Result<SsmLayer> {
        Ok(SsmLayer {
            a_log: store.add(format!("{prefix}.A_log"), self.a_log)?,
            dt_weight: store.add(format!("{prefix}.dt_proj.w"), self.dt_weight)?,
            dt_bias: store.add(format!("{prefix}.dt_proj.b"), self.dt_bias)?,
            b_weight: store.add(format!("{prefix}.B_proj.w"), self.b_weight)?,
            c_weight: store.add(format!("{prefix}.C_proj.w"), self.c_weight)?,
            d_skip: store.add(format!("{prefix}.D"), self.d_skip)?,
        })
    }
}

/// Selective scan over one sequence `x [L, D]` with input-dependent Δ, B, C.
pub fn selective_scan_recurrent<T: Real>(
    x: &Tensor<T>,
    params: &SsmParams<T>,
) -> Result<Tensor<T>> {
    let inputs = params.project(x)?;
    scan_with_inputs(x, &inputs)
}

/// [`SsmParams`] bound to a parameter store for training.
#[derive(Clone, Copy, Debug)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
    pub b_weight: ParamId,
    pub c_weight: ParamId,
    pub d_skip: ParamId,
}

impl SsmLayer {
    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> SsmParams<T> {
        let v = |id| store.get(id).value.clone();
        SsmParams {
            a_log: v(self.a_log),
            dt_weight: v(self.dt_weight),
            dt_bias: v(self.dt_bias),
            b_weight: v(self.b_weight),
            c_weight: v(self.c_weight),
            d_skip: v(self.d_skip),
        }
    }

    /// Scans every sequence of `x [S, L, D]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let a_log = tape.param(store, self.a_log);
        let dt_w = tape.param(store, self.dt_weight);
        let dt_b = tape.param(store, self.dt_bias);
        let b_w = tape.param(store, self.b_weight);
        let c_w = tape.param(store, self.c_weight);
        let d = tape.param(store, self.d_skip);
        let pre = tape.linear(x, dt_w, Some(dt_b))?;
        let delta = tape.softplus(pre)?;
        let b = tape.linear(x, b_w, None)?;
        let c = tape.linear(x, c_w, None)?;
        let ea = tape.exp(a_log)?;
        let a = tape.neg(ea)?;
        tape.selective_scan(x, delta, a, b, c, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn scalar_case(x: &[f64]) -> (Tensor<f64>, ScanInputs<f64>) {
        let l = x.len();
        // Δ = 1, A = ln 0.5 gives Ā = 0.5; B = 1 gives B̄ = 1.
        let inputs = ScanInputs {
            delta: Tensor::ones(&[l, 1]),
            a: t(&[1, 1], &[0.5f64.ln()]),
            b: Tensor::ones(&[l, 1]),
            c: Tensor::ones(&[l, 1]),
            d_skip: Tensor::zeros(&[1]),
        };
        (t(&[l, 1], x), inputs)
    }

    #[test]
    fn discretize_zero_a() {
        let (ab, bb) = discretize(&t(&[1, 1], &[0.0]), &t(&[1], &[2.0]), &t(&[1], &[0.5])).unwrap();
        assert_eq!(ab.item(), 1.0);
        assert_eq!(bb.item(), 1.0);
    }

    #[test]
    fn discretize_simplified_input_matrix() {
        let (ab, bb) =
            discretize(&t(&[1, 1], &[-1.0]), &t(&[1], &[1.0]), &t(&[1], &[1.0])).unwrap();
        assert!((ab.item() - 0.36788).abs() < 1e-5);
        assert_eq!(bb.item(), 1.0);
    }

    #[test]
    fn discretize_small_step_limit() {
        let (ab, bb) =
            discretize(&t(&[1, 1], &[-3.0]), &t(&[1], &[2.0]), &t(&[1], &[1e-300])).unwrap();
        assert_eq!(ab.item(), 1.0);
        assert!(bb.item().abs() < 1e-299);
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let r = discretize(&t(&[1, 1], &[-1.0]), &t(&[1], &[1.0]), &t(&[1], &[0.0]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        let (x, inputs) = scalar_case(&[1.0, 0.0, 0.0]);
        let y = scan_with_inputs(&x, &inputs).unwrap();
        for (got, want) in y.data().iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
        let yc = kernel_convolve(&x, &inputs).unwrap();
        assert!(yc.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn single_step_kernel() {
        let (x, mut inputs) = scalar_case(&[3.0]);
        inputs.c = t(&[1, 1], &[0.7]);
        inputs.d_skip = t(&[1], &[0.2]);
        let y = kernel_convolve(&x, &inputs).unwrap();
        assert!((y.item() - (0.7 * 1.0 * 3.0 + 0.2 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_input_and_pure_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SsmParams::<f64>::init(3, 4, &mut rng);
        let y = selective_scan_recurrent(&Tensor::zeros(&[5, 3]), &p).unwrap();
        assert_eq!(y.max_abs(), 0.0);

        let x = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin());
        let mut inputs = p.project(&x).unwrap();
        inputs.c = Tensor::zeros(&[5, 4]);
        inputs.d_skip = Tensor::ones(&[3]);
        assert_eq!(scan_with_inputs(&x, &inputs).unwrap(), x);
    }

    #[test]
    fn time_varying_inputs_rejected_by_kernel_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SsmParams::<f64>::init(2, 3, &mut rng);
        let x = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1 - 0.3);
        let inputs = p.project(&x).unwrap();
        assert!(matches!(
            kernel_convolve(&x, &inputs),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn init_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SsmParams::<f64>::init(4, STATE_DIM, &mut rng);
        let a = p.a();
        for d in 0..4 {
            for n in 0..STATE_DIM {
                assert!((a.at(&[d, n]) + (n as f64 + 1.0)).abs() < 1e-12);
            }
        }
        for &b in p.dt_bias.data() {
            let dt = kernels::softplus(b);
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt), "{dt}");
        }
        assert!(p.d_skip.data().iter().all(|&v| v == 1.0));
    }
}
