//! Analytic multiply-add counts for one forward pass of one patch.
//!
//! Counts cover matrix products, convolutions and the scan recurrence.
//! Element-wise activations, normalization and pooling are ignored.

use super::config::ModelConfig;
use crate::error::Result;
use crate::igsm::{group_channels, Direction, Domain, Grouping, ScanOrder, GROUPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub embed: u64,
    /// Operator input/output projections, depth-wise convs, attention, FFN,
    /// downsampling and the classifier.
    pub dense: u64,
    /// Δ, B and C projections inside every scan.
    pub scan_projection: u64,
    /// State update and read-out inside every scan.
    pub scan_recurrence: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.embed + self.dense + self.scan_projection + self.scan_recurrence
    }

    /// Scan-only subtotal.
    pub fn scan(&self) -> u64 {
        self.scan_projection + self.scan_recurrence
    }
}

fn linear(rows: usize, inp: usize, out: usize) -> u64 {
    (rows * inp * out) as u64
}

/// One scan over a `[len, width]` sequence with `state` states per channel.
pub fn scan_macs(len: usize, width: usize, state: usize) -> (u64, u64) {
    let projection = linear(len, width, width + 2 * state);
    // Ā·h + B̄·x and the C·h read-out, per (channel, state).
    let recurrence = (len * width * state * 3) as u64;
    (projection, recurrence)
}

/// Scan cost of one IGSM module.
pub fn igsm_macs(
    domain: Domain,
    grouping: Grouping,
    side: usize,
    channels: usize,
    state: usize,
) -> Result<(u64, u64)> {
    let groups = group_channels(channels, grouping)?;
    let mut proj = 0;
    let mut rec = 0;
    for (g, chs) in groups.iter().enumerate() {
        let (len, width) =
            ScanOrder::new(Direction::for_group(g), domain).seq_shape(side, chs.len());
        let (p, r) = scan_macs(len, width, state);
        proj += p;
        rec += r;
    }
    Ok((proj, rec))
}

pub fn count_flops(config: &ModelConfig) -> Result<FlopCount> {
    let sides = config.validate()?;
    let b = config.patch_size;
    let d = config.embed_dim;
    let e = config.inner_dim();
    let f = config.conv_features;
    let mut c = FlopCount {
        embed: (b * b * config.pca_dim * 27 * f) as u64 + linear(b * b, config.pca_dim * f, d),
        ..Default::default()
    };
    for (i, &p) in sides.iter().enumerate() {
        let px = p * p;
        if i > 0 {
            c.dense += linear(px, d, d);
        }
        for _ in 0..config.blocks_per_stage {
            let mut domains = Vec::new();
            if config.operators.has_spatial() {
                domains.push(Domain::Spatial);
            }
            if config.operators.has_spectral() {
                domains.push(Domain::Spectral);
            }
            for domain in domains {
                c.dense += 2 * linear(px, d, e) + (px * e * 9) as u64 + linear(px, e, d);
                c.dense += 2 * linear(1, e, e / GROUPS);
                let (proj, rec) = igsm_macs(domain, config.grouping, p, e, config.ssm_state)?;
                c.scan_projection += proj;
                c.scan_recurrence += rec;
            }
            c.dense += linear(px, d, d * config.ffn_ratio) * 2;
        }
    }
    c.dense += linear(1, d, config.classifier_hidden)
        + linear(1, config.classifier_hidden, config.num_classes);
    Ok(c)
}
