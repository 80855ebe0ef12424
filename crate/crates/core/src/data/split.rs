use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-class training counts for Indian Pines. Every remaining labeled pixel
/// is a test sample.
pub const INDIAN_PINES_TRAIN: [usize; 16] = [
    5, 143, 83, 24, 48, 73, 3, 48, 2, 97, 245, 59, 20, 126, 39, 9,
];
pub const PAVIA_UNIVERSITY_TRAIN: [usize; 9] = [332, 932, 105, 153, 67, 251, 67, 184, 47];
pub const HOUSTON_2013_TRAIN: [usize; 15] = [
    125, 125, 70, 124, 124, 33, 127, 124, 125, 123, 123, 123, 47, 43, 66,
];

/// How many samples of each class go to training.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Exact per-class training counts, index 0 = class 1.
    Counts(Vec<usize>),
    /// Fraction of each class, rounded, at least one sample per class.
    Fraction(f64),
}

impl SplitSpec {
    pub fn preset(name: &str) -> Option<Self> {
        Some(SplitSpec::Counts(match name {
            "indian_pines" => INDIAN_PINES_TRAIN.to_vec(),
            "pavia_university" => PAVIA_UNIVERSITY_TRAIN.to_vec(),
            "houston2013" => HOUSTON_2013_TRAIN.to_vec(),
            _ => return None,
        }))
    }

    /// Training count per class given the available counts.
    pub fn train_counts(&self, available: &[usize]) -> Result<Vec<usize>> {
        let counts = match self {
            SplitSpec::Counts(c) => {
                if c.len() != available.len() {
                    return Err(Error::Config(format!(
                        "split lists {} classes, dataset has {}",
                        c.len(),
                        available.len()
                    )));
                }
                c.clone()
            }
            SplitSpec::Fraction(f) => {
                if !(*f > 0.0 && *f < 1.0) {
                    return Err(Error::Config(format!(
                        "split fraction {f} must be in (0, 1)"
                    )));
                }
                available
                    .iter()
                    .map(|&n| {
                        ((n as f64 * f).round() as usize).clamp(1, n.saturating_sub(1).max(1))
                    })
                    .collect()
            }
        };
        let bad: Vec<String> = counts
            .iter()
            .zip(available)
            .enumerate()
            .filter(|(_, (&want, &have))| want >= have)
            .map(|(i, (want, have))| {
                format!("class {} wants {want} training samples of {have}", i + 1)
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "infeasible split: {}",
                bad.join("; ")
            )));
        }
        Ok(counts)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Counts(c) => {
                let s: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                write!(f, "counts:{}", s.join(","))
            }
            SplitSpec::Fraction(x) => write!(f, "fraction:{x}"),
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// `indian_pines`, `pavia_university`, `houston2013`, `fraction:0.1` or
    /// `counts:5,143,…`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = SplitSpec::preset(s) {
            return Ok(p);
        }
        if let Some(x) = s.strip_prefix("fraction:") {
            return x
                .parse()
                .map(SplitSpec::Fraction)
                .map_err(|_| Error::Config(format!("bad split fraction {x:?}")));
        }
        if let Some(x) = s.strip_prefix("counts:") {
            return x
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(SplitSpec::Counts)
                .map_err(|_| Error::Config(format!("bad split counts {x:?}")));
        }
        Err(Error::Config(format!(
            "unknown split {s:?} (expected indian_pines, pavia_university, houston2013, fraction:x or counts:a,b,…)"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Per-class uniform draw without replacement using ChaCha8 seeded with
/// `seed`. `labels` are `1..=classes`; returned indices are sorted.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Split> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || l > classes {
            return Err(Error::Contract(format!("label {l} outside 1..={classes}")));
        }
        by_class[l - 1].push(i);
    }
    let available: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = spec.train_counts(&available)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, &k) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_totals() {
        assert_eq!(INDIAN_PINES_TRAIN.iter().sum::<usize>(), 1024);
        assert_eq!(PAVIA_UNIVERSITY_TRAIN.iter().sum::<usize>(), 2138);
        assert_eq!(HOUSTON_2013_TRAIN.iter().sum::<usize>(), 1502);
        assert_eq!(INDIAN_PINES_TRAIN[0], 5);
    }

    #[test]
    fn parse_forms() {
        assert_eq!(
            "fraction:0.1".parse::<SplitSpec>().unwrap(),
            SplitSpec::Fraction(0.1)
        );
        assert_eq!(
            "counts:1,2".parse::<SplitSpec>().unwrap(),
            SplitSpec::Counts(vec![1, 2])
        );
        assert!("bogus".parse::<SplitSpec>().is_err());
        let s = SplitSpec::Counts(vec![3, 4]);
        assert_eq!(s.to_string().parse::<SplitSpec>().unwrap(), s);
    }

    #[test]
    fn infeasible_names_class() {
        let labels = vec![1, 1, 2];
        let err = stratified_split(&labels, 2, &SplitSpec::Counts(vec![1, 1]), 0).unwrap_err();
        assert!(err.to_string().contains("class 2"), "{err}");
    }
}
