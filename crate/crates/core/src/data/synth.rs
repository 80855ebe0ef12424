//! Small synthetic scenes for tests, smoke runs and determinism checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HsiCube;

/// The 2×2×3 two-class fixture: value `((r·W + c)·V + v) / 10`, labels
/// `[[1, 2], [2, 0]]`, classes `alpha` and `beta`.
pub fn golden_fixture() -> HsiCube {
    let (h, w, v) = (2, 2, 3);
    let values = (0..h * w * v).map(|i| i as f32 / 10.0).collect();
    HsiCube::new(
        h,
        w,
        v,
        values,
        vec![1, 2, 2, 0],
        vec!["alpha".into(), "beta".into()],
    )
    .expect("fixture is valid")
}

/// Vertical class stripes with a distinct smooth spectrum per class plus
/// uniform noise; about one pixel in ten is left unlabeled.
pub fn synthetic_scene(
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    seed: u64,
) -> HsiCube {
    assert!(
        classes >= 1 && width >= classes,
        "need at least one column per class"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let (a, f, p) = (
                rng.gen_range(0.2..1.0f32),
                rng.gen_range(0.5..3.0f32),
                rng.gen_range(0.0..std::f32::consts::TAU),
            );
            (0..bands)
                .map(|b| {
                    0.5 + 0.4 * a * (f * b as f32 / bands as f32 * std::f32::consts::TAU + p).sin()
                })
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(height * width * bands);
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let class = c * classes / width;
            let first_of_stripe = r == 0 && (c == 0 || (c - 1) * classes / width != class);
            let labeled = first_of_stripe || rng.gen_range(0.0..1.0) >= 0.1;
            labels.push(if labeled { class as u16 + 1 } else { 0 });
            for b in 0..bands {
                values.push(signatures[class][b] + rng.gen_range(-0.05..0.05f32));
            }
        }
    }
    let names = (1..=classes).map(|k| format!("class{k}")).collect();
    HsiCube::new(height, width, bands, values, labels, names).expect("synthetic scene is valid")
}
