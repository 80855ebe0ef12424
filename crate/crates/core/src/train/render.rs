use std::io::Write;
use std::path::Path;

use super::trainer::predict;
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::network::Model;

pub type Rgb = [u8; 3];

/// Distinct colors for up to 16 classes; wraps beyond that.
pub const PALETTE: [Rgb; 16] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [176, 48, 96],
    [46, 139, 87],
    [160, 32, 240],
    [255, 127, 80],
    [127, 255, 212],
    [218, 112, 214],
    [160, 82, 45],
    [127, 255, 0],
    [216, 191, 216],
    [238, 0, 0],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, r: usize, c: usize) -> Rgb {
        let o = (r * self.width + c) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn color(palette: &[Rgb], class0: usize) -> Rgb {
    palette[class0 % palette.len()]
}

/// Colors each 0-based class map entry; `None` is black.
pub fn paint(height: usize, width: usize, classes: &[Option<usize>], palette: &[Rgb]) -> Image {
    let mut rgb = vec![0u8; height * width * 3];
    for (i, c) in classes.iter().enumerate() {
        if let Some(c) = c {
            rgb[i * 3..i * 3 + 3].copy_from_slice(&color(palette, *c));
        }
    }
    Image { width, height, rgb }
}

/// Predicts every labeled pixel and colors it; unlabeled pixels stay black.
pub fn render_map(
    model: &Model<f32>,
    patches: &PatchSet,
    palette: &[Rgb],
    batch_size: usize,
) -> Result<Image> {
    let cube = patches.cube();
    let all: Vec<usize> = (0..patches.len()).collect();
    let pred = predict(model, patches, &all, batch_size)?;
    let mut classes = vec![None; cube.height * cube.width];
    for (&(r, c), p) in patches.coords.iter().zip(pred) {
        classes[r * cube.width + c] = Some(p);
    }
    Ok(paint(cube.height, cube.width, &classes, palette))
}

/// The reference label map in the same colors.
pub fn reference_map(patches: &PatchSet, palette: &[Rgb]) -> Image {
    let cube = patches.cube();
    let classes: Vec<Option<usize>> = cube
        .labels
        .iter()
        .map(|&l| (l > 0).then(|| l as usize - 1))
        .collect();
    paint(cube.height, cube.width, &classes, palette)
}
