use rayon::prelude::*;

use super::{normalize_bands, HsiCube};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index with the edge sample repeated (`…, 1, 0 | 0, 1, …`),
/// periodic with period `2n` so any offset is valid.
pub fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// One `B×B×L` patch per labeled pixel, read lazily from the normalized cube.
#[derive(Clone, Debug)]
pub struct PatchSet {
    cube: HsiCube,
    pub patch_size: usize,
    /// Source `(row, col)` of each patch.
    pub coords: Vec<(usize, usize)>,
    /// Class per patch, `1..=C`.
    pub labels: Vec<usize>,
}

/// Normalizes the cube band-wise to `[0, 1]` once, then indexes every
/// labeled pixel as a patch center.
pub fn extract_patches(cube: &HsiCube, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "patch size {patch_size} must be odd"
        )));
    }
    let mut cube = cube.clone();
    normalize_bands(&mut cube);
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for r in 0..cube.height {
        for c in 0..cube.width {
            let l = cube.label(r, c);
            if l > 0 {
                coords.push((r, c));
                labels.push(l as usize);
            }
        }
    }
    Ok(PatchSet {
        cube,
        patch_size,
        coords,
        labels,
    })
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.cube.bands
    }

    pub fn num_classes(&self) -> usize {
        self.cube.num_classes()
    }

    /// The normalized scene patches are cut from.
    pub fn cube(&self) -> &HsiCube {
        &self.cube
    }

    /// Writes the window centered at `(r, c)` into `out [B, B, L]`.
    pub fn window_into(&self, r: usize, c: usize, out: &mut [f32]) {
        let b = self.patch_size;
        let half = (b / 2) as isize;
        let v = self.cube.bands;
        for i in 0..b {
            let rr = mirror(r as isize + i as isize - half, self.cube.height);
            for j in 0..b {
                let cc = mirror(c as isize + j as isize - half, self.cube.width);
                out[(i * b + j) * v..][..v].copy_from_slice(self.cube.pixel(rr, cc));
            }
        }
    }

    pub fn patch(&self, index: usize) -> Tensor<f32> {
        let b = self.patch_size;
        let mut data = vec![0f32; b * b * self.bands()];
        let (r, c) = self.coords[index];
        self.window_into(r, c, &mut data);
        Tensor::new(&[b, b, self.bands()], data).expect("patch shape")
    }

    /// Stacks patches into `[n, B, B, L]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let coords: Vec<_> = indices.iter().map(|&i| self.coords[i]).collect();
        self.batch_at(&coords)
    }

    /// Stacks windows centered at arbitrary pixels.
    pub fn batch_at(&self, coords: &[(usize, usize)]) -> Tensor<f32> {
        let b = self.patch_size;
        let per = b * b * self.bands();
        let mut data = vec![0f32; coords.len() * per];
        data.par_chunks_mut(per)
            .zip(coords.par_iter())
            .for_each(|(out, &(r, c))| self.window_into(r, c, out));
        Tensor::new(&[coords.len(), b, b, self.bands()], data).expect("batch shape")
    }
}
