//! Interval-group scanning.
//!
//! A `[p, p, k]` feature is split into four channel groups, each group is
//! flattened into a sequence along its own direction (LR, RL, TB, BT) and
//! scanned by an independent selective scan, then the groups are interleaved
//! back into their original channel positions and reweighted by a
//! channel-attention vector computed from the input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{SsmLayer, SsmParams};
use crate::tensor::{Real, Tensor};

pub const GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    LeftRight,
    RightLeft,
    TopBottom,
    BottomTop,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftRight,
        Direction::RightLeft,
        Direction::TopBottom,
        Direction::BottomTop,
    ];

    /// Direction assigned to group `g`.
    pub fn for_group(g: usize) -> Self {
        Self::ALL[g]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Tokens are pixels; the sequence walks the `p×p` grid.
    Spatial,
    /// Tokens are image rows; the sequence walks the (column, band) grid.
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Grouping {
    #[default]
    Interval,
    Adjacent,
    /// No grouping: four full-width scans, averaged.
    All,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::Interval => "interval",
            Grouping::Adjacent => "adjacent",
            Grouping::All => "all",
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interval" => Ok(Grouping::Interval),
            "adjacent" => Ok(Grouping::Adjacent),
            "all" => Ok(Grouping::All),
            _ => Err(Error::Config(format!(
                "unknown grouping {s:?} (expected interval, adjacent or all)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanOrder {
    pub direction: Direction,
    pub domain: Domain,
}

impl ScanOrder {
    pub fn new(direction: Direction, domain: Domain) -> Self {
        Self { direction, domain }
    }

    /// Visit order over a `rows × cols` grid. LR is row-major, TB is
    /// column-major; RL and BT are their reversals.
    pub fn positions(rows: usize, cols: usize, direction: Direction) -> Vec<(usize, usize)> {
        let row_major = || (0..rows).flat_map(move |r| (0..cols).map(move |c| (r, c)));
        let col_major = || (0..cols).flat_map(move |c| (0..rows).map(move |r| (r, c)));
        match direction {
            Direction::LeftRight => row_major().collect(),
            Direction::RightLeft => {
                let mut v: Vec<_> = row_major().collect();
                v.reverse();
                v
            }
            Direction::TopBottom => col_major().collect(),
            Direction::BottomTop => {
                let mut v: Vec<_> = col_major().collect();
                v.reverse();
                v
            }
        }
    }

    /// `(sequence length, token width)` for a `[p, p, c]` group.
    pub fn seq_shape(self, p: usize, c: usize) -> (usize, usize) {
        match self.domain {
            Domain::Spatial => (p * p, c),
            Domain::Spectral => (p * c, p),
        }
    }

    /// For each sequence element (row-major over `[len, width]`), the flat
    /// index into the `[p, p, c]` group it reads from.
    pub fn index(self, p: usize, c: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(p * p * c);
        match self.domain {
            Domain::Spatial => {
                for (r, col) in Self::positions(p, p, self.direction) {
                    out.extend((0..c).map(|j| (r * p + col) * c + j));
                }
            }
            Domain::Spectral => {
                for (u, v) in Self::positions(p, c, self.direction) {
                    out.extend((0..p).map(|r| (r * p + u) * c + v));
                }
            }
        }
        out
    }
}

/// Original channel indices held by each group.
pub fn group_channels(k: usize, mode: Grouping) -> Result<Vec<Vec<usize>>> {
    if k == 0 || !k.is_multiple_of(GROUPS) {
        return Err(Error::Config(format!(
            "channel count {k} is not divisible by {GROUPS}"
        )));
    }
    let c = k / GROUPS;
    Ok(match mode {
        Grouping::Interval => (0..GROUPS)
            .map(|g| (0..c).map(|j| g + j * GROUPS).collect())
            .collect(),
        Grouping::Adjacent => (0..GROUPS)
            .map(|g| (g * c..(g + 1) * c).collect())
            .collect(),
        Grouping::All => vec![(0..k).collect(); GROUPS],
    })
}

#[derive(Clone, Debug)]
pub struct GroupSplit<T: Real = f32> {
    /// Four `[p, p, c]` tensors.
    pub groups: Vec<Tensor<T>>,
    pub mode: Grouping,
    pub source_channels: Vec<Vec<usize>>,
}

fn check_grid<T: Real>(f: &Tensor<T>) -> Result<(usize, usize)> {
    let s = f.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::shape("grid", s, &[0, 0, 0]));
    }
    Ok((s[0], s[2]))
}

/// Splits a `[p, p, k]` feature into four channel groups.
pub fn interval_split<T: Real>(f: &Tensor<T>, mode: Grouping) -> Result<GroupSplit<T>> {
    let (p, k) = check_grid(f)?;
    let channels = group_channels(k, mode)?;
    let groups = channels
        .iter()
        .map(|chs| {
            let c = chs.len();
            Tensor::from_fn(&[p, p, c], |i| f.data()[(i / c) * k + chs[i % c]])
        })
        .collect();
    Ok(GroupSplit {
        groups,
        mode,
        source_channels: channels,
    })
}

/// Writes every group back to its source channels, scaled by the
/// per-channel `weights` (unit weights when `None`). Groups that share
/// channels (the ungrouped mode) are averaged.
pub fn interval_concat<T: Real>(split: &GroupSplit<T>, weights: Option<&[T]>) -> Result<Tensor<T>> {
    let g0 = split
        .groups
        .first()
        .ok_or_else(|| Error::Contract("empty group split".into()))?;
    let p = g0.shape()[0];
    let k: usize = match split.mode {
        Grouping::All => g0.shape()[2],
        _ => split.groups.iter().map(|g| g.shape()[2]).sum(),
    };
    let mut out = vec![T::zero(); p * p * k];
    let mut hits = vec![0usize; k];
    for (g, chs) in split.groups.iter().zip(&split.source_channels) {
        let c = chs.len();
        for (i, &v) in g.data().iter().enumerate() {
            out[(i / c) * k + chs[i % c]] += v;
        }
        for &ch in chs {
            hits[ch] += 1;
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        let ch = i % k;
        let w = weights.map_or(T::one(), |w| w[ch]);
        *v = *v * w / T::lit(hits[ch] as f64);
    }
    Tensor::new(&[p, p, k], out)
}

/// Flattens a `[p, p, c]` group into a `[len, width]` sequence.
pub fn flatten_for_scan<T: Real>(g: &Tensor<T>, order: ScanOrder) -> Result<Tensor<T>> {
    let (p, c) = check_grid(g)?;
    let (len, width) = order.seq_shape(p, c);
    let idx = order.index(p, c);
    Tensor::new(&[len, width], idx.iter().map(|&i| g.data()[i]).collect())
}

/// Inverse of [`flatten_for_scan`].
pub fn unflatten<T: Real>(
    seq: &Tensor<T>,
    order: ScanOrder,
    p: usize,
    c: usize,
) -> Result<Tensor<T>> {
    let (len, width) = order.seq_shape(p, c);
    if seq.shape() != [len, width] {
        return Err(Error::shape("unflatten", seq.shape(), &[len, width]));
    }
    let mut out = vec![T::zero(); p * p * c];
    for (e, i) in order.index(p, c).into_iter().enumerate() {
        out[i] = seq.data()[e];
    }
    Tensor::new(&[p, p, c], out)
}

/// Channel attention: mean-pool, `k → k/4`, SiLU, `k/4 → k`, sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        k: usize,
    ) -> Result<Self> {
        let h = (k / GROUPS).max(1);
        let (b1, b2) = (1.0 / (k as f64).sqrt(), 1.0 / (h as f64).sqrt());
        Ok(Self {
            w1: store.add_uniform(format!("{prefix}.fc1.w"), &[k, h], b1, rng)?,
            b1: store.add_uniform(format!("{prefix}.fc1.b"), &[h], b1, rng)?,
            w2: store.add_uniform(format!("{prefix}.fc2.w"), &[h, k], b2, rng)?,
            b2: store.add_uniform(format!("{prefix}.fc2.b"), &[k], b2, rng)?,
        })
    }

    /// `f [b, p, p, k]` → weights `[b, k]` in `(0, 1)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let flat = tape.reshape(f, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean(flat, 1)?;
        let pooled = tape.reshape(pooled, &[s[0], s[3]])?;
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
        );
        let h = tape.linear(pooled, w1, Some(b1))?;
        let h = tape.silu(h)?;
        let o = tape.linear(h, w2, Some(b2))?;
        tape.sigmoid(o)
    }
}

/// Interval-group scanning module for one domain.
#[derive(Clone, Debug)]
pub struct Igsm {
    pub domain: Domain,
    pub mode: Grouping,
    pub side: usize,
    pub channels: usize,
    pub scans: Vec<SsmLayer>,
    pub attention: ChannelAttention,
}

impl Igsm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        domain: Domain,
        mode: Grouping,
        side: usize,
        channels: usize,
        state: usize,
    ) -> Result<Self> {
        let groups = group_channels(channels, mode)?;
        let (_, width) =
            ScanOrder::new(Direction::LeftRight, domain).seq_shape(side, groups[0].len());
        let scans = (0..GROUPS)
            .map(|g| {
                SsmParams::<T>::init(width, state, rng).register(store, &format!("{prefix}.g{g}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = ChannelAttention::new(store, rng, &format!("{prefix}.atten"), channels)?;
        Ok(Self {
            domain,
            mode,
            side,
            channels,
            scans,
            attention,
        })
    }

    fn order(&self, g: usize) -> ScanOrder {
        ScanOrder::new(Direction::for_group(g), self.domain)
    }

    /// Gather index from `f [b, p, p, k]` into group `g`'s `[b, len, width]` sequence.
    fn batch_index(&self, batch: usize, g: usize, chs: &[usize]) -> Vec<usize> {
        let (p, k, c) = (self.side, self.channels, chs.len());
        let local: Vec<usize> = self
            .order(g)
            .index(p, c)
            .into_iter()
            .map(|i| (i / c) * k + chs[i % c])
            .collect();
        let per = p * p * k;
        (0..batch)
            .flat_map(|b| local.iter().map(move |&i| b * per + i))
            .collect()
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, f: Var) -> Result<usize> {
        let s = tape.shape(f);
        if s.len() != 4 || s[1] != self.side || s[2] != self.side || s[3] != self.channels {
            return Err(Error::shape(
                "igsm",
                s,
                &[0, self.side, self.side, self.channels],
            ));
        }
        Ok(s[0])
    }

    /// Scan outputs per group, each unflattened back into `[b, p, p, c]`.
    pub fn group_outputs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Vec<Var>> {
        let batch = self.check_input(tape, f)?;
        let groups = group_channels(self.channels, self.mode)?;
        let p = self.side;
        let mut out = Vec::with_capacity(GROUPS);
        for (g, chs) in groups.iter().enumerate() {
            let c = chs.len();
            let (y, _) = self.scan_group(tape, store, f, batch, g, chs)?;
            let local = self.order(g).index(p, c);
            let mut inv = vec![0; local.len()];
            for (e, &i) in local.iter().enumerate() {
                inv[i] = e;
            }
            let per = local.len();
            let index = (0..batch)
                .flat_map(|b| inv.iter().map(move |&e| b * per + e))
                .collect();
            out.push(tape.gather(y, index, &[batch, p, p, c])?);
        }
        Ok(out)
    }

    fn scan_group<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
        batch: usize,
        g: usize,
        chs: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let (len, width) = self.order(g).seq_shape(self.side, chs.len());
        let index = self.batch_index(batch, g, chs);
        let seq = tape.gather(f, index.clone(), &[batch, len, width])?;
        let y = self.scans[g].forward(tape, store, seq)?;
        Ok((y, index))
    }

    /// `f [b, p, p, k]` → `[b, p, p, k]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let batch = self.check_input(tape, f)?;
        let groups = group_channels(self.channels, self.mode)?;
        let total = batch * self.side * self.side * self.channels;

        let mut ys = Vec::with_capacity(GROUPS);
        let mut inv_parts = Vec::with_capacity(GROUPS);
        for (g, chs) in groups.iter().enumerate() {
            let (y, index) = self.scan_group(tape, store, f, batch, g, chs)?;
            ys.push(y);
            inv_parts.push(index);
        }
        let cat = tape.concat(&ys)?;
        let shape = [batch, self.side, self.side, self.channels];
        let merged = if self.mode == Grouping::All {
            // Each direction covers every position; unscramble each and average.
            let mut acc: Option<Var> = None;
            let mut off = 0;
            for index in &inv_parts {
                let mut inv = vec![0; total];
                for (e, &dst) in index.iter().enumerate() {
                    inv[dst] = off + e;
                }
                off += index.len();
                let part = tape.gather(cat, inv, &shape)?;
                acc = Some(match acc {
                    None => part,
                    Some(a) => tape.add(a, part)?,
                });
            }
            tape.scale(acc.unwrap(), T::lit(1.0 / GROUPS as f64))?
        } else {
            let mut inv = vec![0; total];
            let mut off = 0;
            for index in &inv_parts {
                for (e, &dst) in index.iter().enumerate() {
                    inv[dst] = off + e;
                }
                off += index.len();
            }
            tape.gather(cat, inv, &shape)?
        };
        let w = self.attention.forward(tape, store, f)?;
        tape.channel_scale(merged, w)
    }
}

/// Uniform `[-1, 1]` tensor.
pub fn random_feature<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..=1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn interval_groups_for_eight_channels() {
        let g = group_channels(8, Grouping::Interval).unwrap();
        assert_eq!(g, vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
        let a = group_channels(8, Grouping::Adjacent).unwrap();
        assert_eq!(a, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        assert!(matches!(
            group_channels(6, Grouping::Interval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_labels_channels() {
        let f = Tensor::<f64>::from_fn(&[1, 1, 8], |i| (i + 1) as f64);
        let s = interval_split(&f, Grouping::Interval).unwrap();
        let got: Vec<Vec<f64>> = s.groups.iter().map(|g| g.data().to_vec()).collect();
        assert_eq!(
            got,
            vec![vec![1., 5.], vec![2., 6.], vec![3., 7.], vec![4., 8.]]
        );
        let s = interval_split(&f, Grouping::Adjacent).unwrap();
        assert_eq!(s.groups[0].data(), &[1., 2.]);
        assert_eq!(s.groups[1].data(), &[3., 4.]);
    }

    #[test]
    fn lr_visits_row_major() {
        assert_eq!(
            ScanOrder::positions(2, 2, Direction::LeftRight),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(
            ScanOrder::positions(2, 2, Direction::TopBottom),
            vec![(0, 0), (1, 0), (0, 1), (1, 1)]
        );
    }

    #[test]
    fn spectral_sequence_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_feature::<f64>(&[3, 3, 2], &mut rng);
        let o = ScanOrder::new(Direction::LeftRight, Domain::Spectral);
        let s = flatten_for_scan(&g, o).unwrap();
        assert_eq!(s.shape(), &[6, 3]);
        // First token: column 0, band 0, read down the rows.
        assert_eq!(
            s.data()[..3],
            [g.at(&[0, 0, 0]), g.at(&[1, 0, 0]), g.at(&[2, 0, 0])]
        );
        let o = ScanOrder::new(Direction::LeftRight, Domain::Spatial);
        assert_eq!(flatten_for_scan(&g, o).unwrap().shape(), &[9, 2]);
    }
}
