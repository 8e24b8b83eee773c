//! Heatmap files: 8-bit PGM image, scaling sidecar and raw CSV.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use deep_taylor::tensor::Tensor;

/// Linear map from gray level `v` back to relevance: `min + v · step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrayScale {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GrayScale {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
        Self {
            min,
            max,
            step: (max - min) / 255.0,
        }
    }

    pub fn level(&self, v: f64) -> u8 {
        if self.step > 0.0 {
            ((v - self.min) / self.step).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }
}

/// Rows and columns of the image drawn for an input of this shape.
pub fn image_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [rows, cols] => (*rows, *cols),
        _ => (1, shape.iter().product()),
    }
}

pub fn write_pgm(path: &Path, relevance: &Tensor) -> io::Result<GrayScale> {
    let (rows, cols) = image_dims(relevance.shape());
    let scale = GrayScale::fit(relevance.data());
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(relevance.data().iter().map(|&v| scale.level(v)));
    fs::write(path, bytes)?;
    Ok(scale)
}

pub fn write_sidecar(path: &Path, scale: &GrayScale) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "min={:e}", scale.min)?;
    writeln!(f, "max={:e}", scale.max)?;
    writeln!(f, "step={:e}", scale.step)
}

/// `row,col,relevance` in row-major order.
pub fn write_relevance_csv(path: &Path, relevance: &Tensor) -> io::Result<()> {
    let (_, cols) = image_dims(relevance.shape());
    let mut out = String::from("row,col,relevance\n");
    for (i, v) in relevance.data().iter().enumerate() {
        out.push_str(&format!("{},{},{:e}\n", i / cols, i % cols, v));
    }
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    impl GrayScale {
        fn value(&self, level: u8) -> f64 {
            self.min + f64::from(level) * self.step
        }
    }

    #[test]
    fn gray_levels_reconstruct_to_half_a_step() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 3.0 - 0.5).collect();
        let s = GrayScale::fit(&data);
        assert_eq!(s.level(s.min), 0);
        assert_eq!(s.level(s.max), 255);
        for &v in &data {
            assert!((s.value(s.level(v)) - v).abs() <= 0.5 * s.step + 1e-12);
        }
    }

    #[test]
    fn constant_heatmap_is_black() {
        let s = GrayScale::fit(&[0.0; 4]);
        assert_eq!((s.level(0.0), s.value(0)), (0, 0.0));
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        let r = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_pgm(&p, &r).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }
}
