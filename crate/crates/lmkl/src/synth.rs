//! Seeded two-dimensional synthetic datasets for demos and tests.
//!
//! Three shapes with increasing need for localized kernels: two separated
//! Gaussian blobs (linearly separable), a four-blob XOR layout (needs a
//! nonlinear boundary), and two concentric rings (needs a radial one).
//! Labels are raw `-1`/`+1` and classes alternate example-by-example, so
//! any prefix of a generated set is balanced to within one example.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::dataio::LabeledExample;

/// Which synthetic shape to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Two unit-variance Gaussian blobs centered at (-2, 0) and (+2, 0).
    Gauss2,
    /// Four tight blobs at (±2, ±2); the label is the sign of the product
    /// of the center coordinates, the classic XOR arrangement.
    Xor4,
    /// Two concentric rings of radius 1 and 3 with radial noise 0.2.
    Rings,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gauss2" => Ok(SynthKind::Gauss2),
            "xor4" => Ok(SynthKind::Xor4),
            "rings" => Ok(SynthKind::Rings),
            other => Err(format!(
                "unknown synthetic kind `{other}` (expected gauss2, xor4, or rings)"
            )),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Gauss2 => "gauss2",
            SynthKind::Xor4 => "xor4",
            SynthKind::Rings => "rings",
        })
    }
}

fn example(x: f64, y: f64, label: i64) -> LabeledExample {
    LabeledExample {
        label,
        features: vec![(0, x), (1, y)],
    }
}

fn draw(kind: SynthKind, i: usize, rng: &mut ChaCha8Rng) -> LabeledExample {
    match kind {
        SynthKind::Gauss2 => {
            let unit = Normal::new(0.0, 1.0).expect("valid std");
            let (center, label) = if i.is_multiple_of(2) { (-2.0, -1) } else { (2.0, 1) };
            example(center + unit.sample(rng), unit.sample(rng), label)
        }
        SynthKind::Xor4 => {
            let tight = Normal::new(0.0, 0.5).expect("valid std");
            let (cx, cy) = match i % 4 {
                0 => (2.0, 2.0),
                1 => (2.0, -2.0),
                2 => (-2.0, -2.0),
                _ => (-2.0, 2.0),
            };
            let label = if cx * cy > 0.0 { 1 } else { -1 };
            example(cx + tight.sample(rng), cy + tight.sample(rng), label)
        }
        SynthKind::Rings => {
            let angle = Uniform::new(0.0, std::f64::consts::TAU).sample(rng);
            let noise = Normal::new(0.0, 0.2).expect("valid std").sample(rng);
            let (radius, label) = if i.is_multiple_of(2) { (1.0, -1) } else { (3.0, 1) };
            let r = radius + noise;
            example(r * angle.cos(), r * angle.sin(), label)
        }
    }
}

/// Generate `n_train + n_test` examples from one seeded stream and split
/// them. Using a single stream keeps the test set dependent only on
/// `(kind, n_train, n_test, seed)` with no second seed to plumb around.
pub fn train_test(
    kind: SynthKind,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<LabeledExample> = (0..n_train + n_test)
        .map(|i| draw(kind, i, &mut rng))
        .collect();
    let test = all.split_off(n_train);
    (all, test)
}

/// Generate `n` examples.
pub fn generate(kind: SynthKind, n: usize, seed: u64) -> Vec<LabeledExample> {
    train_test(kind, n, 0, seed).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(e: &LabeledExample) -> (f64, f64) {
        let x = e.features.iter().find(|f| f.0 == 0).map_or(0.0, |f| f.1);
        let y = e.features.iter().find(|f| f.0 == 1).map_or(0.0, |f| f.1);
        (x, y)
    }

    #[test]
    fn generation_is_seeded() {
        for kind in [SynthKind::Gauss2, SynthKind::Xor4, SynthKind::Rings] {
            let a = generate(kind, 50, 9);
            let b = generate(kind, 50, 9);
            assert_eq!(a, b);
            let c = generate(kind, 50, 10);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn labels_are_balanced_signs() {
        for kind in [SynthKind::Gauss2, SynthKind::Xor4, SynthKind::Rings] {
            let data = generate(kind, 101, 3);
            assert!(data.iter().all(|e| e.label == -1 || e.label == 1));
            let pos = data.iter().filter(|e| e.label == 1).count();
            let neg = data.len() - pos;
            assert!((pos as i64 - neg as i64).abs() <= 1, "{kind}: {pos} vs {neg}");
        }
    }

    #[test]
    fn train_test_split_extends_one_stream() {
        let (train, test) = train_test(SynthKind::Gauss2, 30, 20, 4);
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 20);
        // the split is a prefix/suffix of one generation
        let all = generate(SynthKind::Gauss2, 50, 4);
        assert_eq!(&all[..30], &train[..]);
        assert_eq!(&all[30..], &test[..]);
    }

    #[test]
    fn gauss2_blobs_sit_on_opposite_sides() {
        let data = generate(SynthKind::Gauss2, 400, 0);
        let mean_x = |sign: i64| {
            let pts: Vec<f64> = data
                .iter()
                .filter(|e| e.label == sign)
                .map(|e| coords(e).0)
                .collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        assert!(mean_x(-1) < -1.5, "negative blob at {}", mean_x(-1));
        assert!(mean_x(1) > 1.5, "positive blob at {}", mean_x(1));
    }

    #[test]
    fn xor4_label_matches_quadrant_product() {
        let data = generate(SynthKind::Xor4, 400, 1);
        // blobs are tight (std 0.5 at distance 2), so almost every point
        // stays in its center's quadrant
        let consistent = data
            .iter()
            .filter(|e| {
                let (x, y) = coords(e);
                (x * y > 0.0) == (e.label == 1)
            })
            .count();
        assert!(consistent >= 380, "only {consistent}/400 consistent");
        // all four quadrants are populated
        for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let hits = data
                .iter()
                .filter(|e| {
                    let (x, y) = coords(e);
                    x * sx > 0.0 && y * sy > 0.0
                })
                .count();
            assert!(hits > 50, "quadrant ({sx},{sy}) has {hits} points");
        }
    }

    #[test]
    fn rings_have_distinct_radii() {
        let data = generate(SynthKind::Rings, 400, 2);
        for e in &data {
            let (x, y) = coords(e);
            let r = x.hypot(y);
            if e.label == -1 {
                assert!((r - 1.0).abs() < 1.0, "inner point at radius {r}");
            } else {
                assert!((r - 3.0).abs() < 1.0, "outer point at radius {r}");
            }
        }
    }
}
