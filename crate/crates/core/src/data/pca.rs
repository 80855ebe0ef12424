use nalgebra::{DMatrix, SymmetricEigen};

use super::HsiCube;
use crate::error::{Error, Result};

/// Principal components of a `[n, V]` sample matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[V, L]`, column `j` is component `j`.
    pub components: DMatrix<f64>,
    /// All `V` eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits on row-major samples `x [n, dim]`, keeping `keep` components.
    /// Each component's largest-magnitude loading is made positive.
    pub fn fit(x: &[f64], dim: usize, keep: usize) -> Result<Self> {
        if keep == 0 || keep > dim {
            return Err(Error::Config(format!(
                "cannot keep {keep} principal components of {dim} bands"
            )));
        }
        let n = x.len() / dim;
        if n == 0 || !x.len().is_multiple_of(dim) {
            return Err(Error::shape("pca", &[x.len()], &[dim]));
        }
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&mean) {
                *c = v - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = DMatrix::<f64>::zeros(dim, keep);
        for (j, &src) in order.iter().take(keep).enumerate() {
            let col = eig.eigenvectors.column(src);
            let pivot = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, &v)| {
                    if v.abs() > best.1.abs() {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..dim {
                components[(i, j)] = sign * col[i];
            }
        }
        Ok(Self {
            mean,
            components,
            eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn keep(&self) -> usize {
        self.components.ncols()
    }

    /// Projects one sample.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.keep())
            .map(|j| {
                (0..self.dim())
                    .map(|i| (x[i] - self.mean[i]) * self.components[(i, j)])
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                self.mean[i]
                    + (0..self.keep())
                        .map(|j| z[j] * self.components[(i, j)])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Projects every pixel onto the top `keep` principal components, fitted
/// on all pixels of the scene.
pub fn pca_reduce(cube: &HsiCube, keep: usize) -> Result<(HsiCube, Pca)> {
    if keep > cube.bands {
        return Err(Error::Config(format!(
            "PCA dimension {keep} exceeds the scene's {} bands",
            cube.bands
        )));
    }
    let x: Vec<f64> = cube.values.iter().map(|&v| v as f64).collect();
    let pca = Pca::fit(&x, cube.bands, keep)?;
    let mut values = Vec::with_capacity(cube.height * cube.width * keep);
    for row in x.chunks(cube.bands) {
        values.extend(pca.project(row).into_iter().map(|v| v as f32));
    }
    let out = HsiCube {
        bands: keep,
        values,
        ..cube.clone()
    };
    Ok((out, pca))
}

/// Maps each band's minimum to 0 and maximum to 1. Constant bands become 0.
pub fn normalize_bands(cube: &mut HsiCube) {
    let v = cube.bands;
    let mut lo = vec![f32::INFINITY; v];
    let mut hi = vec![f32::NEG_INFINITY; v];
    for px in cube.values.chunks(v) {
        for b in 0..v {
            lo[b] = lo[b].min(px[b]);
            hi[b] = hi[b].max(px[b]);
        }
    }
    for px in cube.values.chunks_mut(v) {
        for b in 0..v {
            let range = hi[b] - lo[b];
            px[b] = if range > 0.0 {
                (px[b] - lo[b]) / range
            } else {
                0.0
            };
        }
    }
}
