use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `NaN`-free: classes without test samples get 0 and
    /// are left out of `aa`.
    pub per_class: Vec<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    /// Scores 0-based `(truth, prediction)` pairs over `classes` classes.
    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty test set".into()));
        }
        if truth.len() != pred.len() {
            return Err(Error::shape("metrics", &[truth.len()], &[pred.len()]));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::Contract(format!(
                    "class index out of range: {t}, {p}"
                )));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("cannot evaluate an empty test set".into()));
        }
        let n = total as f64;
        let diag: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let oa = diag as f64 / n;
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..c)
            .map(|j| confusion.iter().map(|r| r[j]).sum())
            .collect();
        let per_class: Vec<f64> = (0..c)
            .map(|i| {
                if rows[i] > 0 {
                    confusion[i][i] as f64 / rows[i] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let present: Vec<f64> = (0..c)
            .filter(|&i| rows[i] > 0)
            .map(|i| per_class[i])
            .collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        let pe: f64 = (0..c).map(|i| rows[i] as f64 * cols[i] as f64).sum::<f64>() / (n * n);
        // All mass on one class gives p_e = 1; agreement beyond chance is 0.
        let kappa = if (1.0 - pe).abs() < 1e-15 {
            0.0
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Self {
            oa,
            aa,
            kappa,
            per_class,
            confusion,
        })
    }

    /// Human-readable summary.
    pub fn report(&self, class_names: &[String]) -> String {
        let mut s = format!(
            "OA {:.2}%  AA {:.2}%  Kappa {:.4}\n",
            self.oa * 100.0,
            self.aa * 100.0,
            self.kappa
        );
        for (i, acc) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).map_or("?", String::as_str);
            let n: u64 = self.confusion[i].iter().sum();
            s.push_str(&format!(
                "  {:>2} {:<28} {:>7.2}%  (n={n})\n",
                i + 1,
                name,
                acc * 100.0
            ));
        }
        s
    }
}
