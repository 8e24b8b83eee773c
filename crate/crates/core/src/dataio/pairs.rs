//! Paired-digit detection task: a 28×56 canvas holding two MNIST digits,
//! with target 100 when one of them is a 0–3 and 0 otherwise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, IdxDataset};
use crate::network::{Example, PIXEL_HIGH, PIXEL_LOW};
use crate::tensor::Tensor;

pub const DIGIT_SIDE: usize = 28;
pub const CANVAS_ROWS: usize = 28;
pub const CANVAS_COLS: usize = 56;
pub const POSITIVE_TARGET: f64 = 100.0;

/// Where each digit came from and how far it was shifted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairMeta {
    pub left_label: u8,
    pub right_label: u8,
    /// `(row, col)` shift of each digit.
    pub left_offset: (i32, i32),
    pub right_offset: (i32, i32),
}

impl PairMeta {
    pub fn is_positive(&self) -> bool {
        is_target_class(self.left_label) || is_target_class(self.right_label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// `[28, 56]`, values in `[-0.5, 1.5]`.
    pub image: Tensor,
    pub target: f64,
    pub meta: PairMeta,
}

impl Example for PairedSample {
    fn input(&self) -> &Tensor {
        &self.image
    }
    fn target(&self) -> f64 {
        self.target
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    pub count: usize,
    pub seed: u64,
    pub translate: bool,
    /// Largest shift (pixels, per axis) when `translate` is set.
    pub max_shift: i32,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            seed: 0,
            translate: true,
            max_shift: 2,
        }
    }
}

pub fn is_target_class(label: u8) -> bool {
    label <= 3
}

/// `[0, 1]` raw intensity to the `[-0.5, 1.5]` input coding.
pub fn remap_pixel(raw: f64) -> f64 {
    (PIXEL_HIGH - PIXEL_LOW) * raw + PIXEL_LOW
}

/// Builds `cfg.count` samples, alternating positive and negative. Sample `i`
/// draws from its own RNG stream, so the output does not depend on how the
/// work is scheduled.
pub fn synthesize_pairs(dataset: &IdxDataset, cfg: &PairConfig) -> Result<Vec<PairedSample>, DataError> {
    if dataset.image_dims() != (DIGIT_SIDE, DIGIT_SIDE) {
        return Err(DataError::UnsupportedImageSize(dataset.image_dims()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if (0..=3).all(|c| by_class[c].is_empty()) {
        return Err(DataError::EmptyClassGroup("0-3"));
    }
    let distractors: Vec<u8> = (4..=9).filter(|&c| !by_class[c as usize].is_empty()).collect();
    if distractors.len() < 2 {
        return Err(DataError::EmptyClassGroup("4-9 (needs two distinct classes)"));
    }
    let targets: Vec<u8> = (0..=3).filter(|&c| !by_class[c as usize].is_empty()).collect();

    let samples = (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let positive = i % 2 == 0;
            let (a, b) = if positive {
                (
                    *targets.choose(&mut rng).expect("nonempty"),
                    *distractors.choose(&mut rng).expect("nonempty"),
                )
            } else {
                let mut two = distractors.choose_multiple(&mut rng, 2);
                (*two.next().expect("two"), *two.next().expect("two"))
            };
            let (left_label, right_label) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            let mut shift = || {
                if cfg.translate && cfg.max_shift > 0 {
                    (
                        rng.gen_range(-cfg.max_shift..=cfg.max_shift),
                        rng.gen_range(-cfg.max_shift..=cfg.max_shift),
                    )
                } else {
                    (0, 0)
                }
            };
            let left_offset = shift();
            let right_offset = shift();
            let left = *by_class[left_label as usize].choose(&mut rng).expect("nonempty");
            let right = *by_class[right_label as usize].choose(&mut rng).expect("nonempty");

            let mut canvas = vec![0.0; CANVAS_ROWS * CANVAS_COLS];
            paste(&mut canvas, dataset.image(left), 0, left_offset);
            paste(&mut canvas, dataset.image(right), DIGIT_SIDE as i32, right_offset);
            let image = Tensor::new(
                vec![CANVAS_ROWS, CANVAS_COLS],
                canvas.into_iter().map(remap_pixel).collect(),
            )?;
            let meta = PairMeta {
                left_label,
                right_label,
                left_offset,
                right_offset,
            };
            Ok(PairedSample {
                image,
                target: if meta.is_positive() { POSITIVE_TARGET } else { 0.0 },
                meta,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(samples)
}

/// Pastes a 28×28 digit at column `col0`, shifted by `offset`; pixels that
/// fall off the canvas are dropped, overlaps keep the brighter value.
fn paste(canvas: &mut [f64], digit: &[f64], col0: i32, offset: (i32, i32)) {
    for r in 0..DIGIT_SIDE as i32 {
        let rr = r + offset.0;
        if !(0..CANVAS_ROWS as i32).contains(&rr) {
            continue;
        }
        for c in 0..DIGIT_SIDE as i32 {
            let cc = col0 + c + offset.1;
            if !(0..CANVAS_COLS as i32).contains(&cc) {
                continue;
            }
            let v = digit[(r as usize) * DIGIT_SIDE + c as usize];
            let dst = &mut canvas[rr as usize * CANVAS_COLS + cc as usize];
            *dst = dst.max(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ten images, one per class; image `c` has every pixel set to `c / 9`
    /// except that class 0 uses a single lit pixel in the corner.
    pub(crate) fn toy_dataset() -> IdxDataset {
        let mut pixels = Vec::new();
        for c in 0..10u8 {
            for p in 0..784 {
                pixels.push(if c == 0 {
                    f64::from(u8::from(p == 0))
                } else {
                    f64::from(c) / 9.0
                });
            }
        }
        IdxDataset {
            images: Tensor::new(vec![10, 28, 28], pixels).unwrap(),
            labels: (0..10).collect(),
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = toy_dataset();
        let cfg = PairConfig {
            count: 10,
            seed: 42,
            ..PairConfig::default()
        };
        let a = synthesize_pairs(&ds, &cfg).unwrap();
        let b = synthesize_pairs(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_targets_follow_construction() {
        let ds = toy_dataset();
        let samples = synthesize_pairs(
            &ds,
            &PairConfig {
                count: 200,
                seed: 1,
                ..PairConfig::default()
            },
        )
        .unwrap();
        let mut positives = 0;
        for s in &samples {
            let m = s.meta;
            let hits = [m.left_label, m.right_label]
                .iter()
                .filter(|&&l| is_target_class(l))
                .count();
            if s.target == POSITIVE_TARGET {
                positives += 1;
                assert_eq!(hits, 1);
            } else {
                assert_eq!(s.target, 0.0);
                assert_eq!(hits, 0);
                assert_ne!(m.left_label, m.right_label);
            }
            for off in [m.left_offset, m.right_offset] {
                assert!(off.0.abs() <= 2 && off.1.abs() <= 2);
            }
            assert!(s.image.data().iter().all(|&v| (PIXEL_LOW..=PIXEL_HIGH).contains(&v)));
        }
        assert_eq!(positives, 100);
    }

    #[test]
    fn untranslated_digits_sit_in_their_halves() {
        let ds = toy_dataset();
        let samples = synthesize_pairs(
            &ds,
            &PairConfig {
                count: 20,
                seed: 3,
                translate: false,
                ..PairConfig::default()
            },
        )
        .unwrap();
        for s in samples {
            assert_eq!(s.meta.left_offset, (0, 0));
            let img = s.image.data();
            for (label, col0) in [(s.meta.left_label, 0), (s.meta.right_label, 28)] {
                for r in 0..28 {
                    for c in 0..28 {
                        let raw = ds.image(label as usize)[r * 28 + c];
                        assert_eq!(img[r * 56 + col0 + c], remap_pixel(raw));
                    }
                }
            }
        }
    }

    #[test]
    fn remap_endpoints() {
        assert_eq!(remap_pixel(0.0), -0.5);
        assert_eq!(remap_pixel(1.0), 1.5);
    }

    #[test]
    fn missing_class_groups_are_errors() {
        let mut ds = toy_dataset();
        // Relabel every 0–3 digit as a 5.
        for l in ds.labels.iter_mut().take(4) {
            *l = 5;
        }
        let cfg = PairConfig::default();
        assert!(matches!(
            synthesize_pairs(&ds, &cfg),
            Err(DataError::EmptyClassGroup(_))
        ));
        let mut ds = toy_dataset();
        for l in ds.labels.iter_mut().skip(4) {
            *l = 4;
        }
        assert!(matches!(
            synthesize_pairs(&ds, &cfg),
            Err(DataError::EmptyClassGroup(_))
        ));
    }
}
