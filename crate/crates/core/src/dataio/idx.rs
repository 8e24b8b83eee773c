//! MNIST IDX reader and writer. Files ending in `.gz` (or starting with the
//! gzip magic) are decompressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::DataError;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]` and their digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    /// `[n, rows, cols]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[1], s[2])
    }

    /// Pixels of image `index`, row-major.
    pub fn image(&self, index: usize) -> &[f64] {
        let (r, c) = self.image_dims();
        &self.images.data()[index * r * c..(index + 1) * r * c]
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header {
    dims: Vec<usize>,
    data_offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32) -> Result<Header, DataError> {
    let word = |offset: usize| -> Result<u32, DataError> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| DataError::Truncated {
                path: path.to_path_buf(),
                offset,
                needed: offset + 4,
                available: bytes.len(),
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
            found,
            expected: magic,
        });
    }
    // Third byte of the magic is the element type (0x08 = u8), fourth the rank.
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let data_offset = 4 + 4 * rank;
    let payload: usize = dims.iter().product();
    let expected = data_offset + payload;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: expected,
            available: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    Ok(Header { dims, data_offset })
}

/// Loads an image file and its label file, scaling pixels by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxDataset, DataError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let img_bytes = read_bytes(images_path)?;
    let img = parse_header(images_path, &img_bytes, IMAGES_MAGIC)?;
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Malformed {
            path: images_path.to_path_buf(),
            reason: format!("empty extents {:?}", img.dims),
        });
    }

    let lbl_bytes = read_bytes(labels_path)?;
    let lbl = parse_header(labels_path, &lbl_bytes, LABELS_MAGIC)?;
    if lbl.dims[0] != n {
        return Err(DataError::CountMismatch {
            images_path: images_path.to_path_buf(),
            images: n,
            labels_path: labels_path.to_path_buf(),
            labels: lbl.dims[0],
        });
    }
    let labels = lbl_bytes[lbl.data_offset..].to_vec();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::Malformed {
            path: labels_path.to_path_buf(),
            reason: format!("label {l} at offset {} is not a digit", lbl.data_offset + i),
        });
    }

    let pixels = img_bytes[img.data_offset..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(IdxDataset {
        images: Tensor::new(vec![n, rows, cols], pixels)?,
        labels,
    })
}

/// Writes raw `u8` images (`[n, rows, cols]`) and labels as IDX files,
/// gzipped when the path ends in `.gz`.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    dims: (usize, usize, usize),
    labels: &[u8],
) -> Result<(), DataError> {
    let (n, rows, cols) = dims;
    if pixels.len() != n * rows * cols || labels.len() != n {
        return Err(DataError::Malformed {
            path: images_path.as_ref().to_path_buf(),
            reason: format!(
                "{} pixels and {} labels do not match dims {dims:?}",
                pixels.len(),
                labels.len()
            ),
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + n);
    for w in [LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&w.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lbl)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let out = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io)?;
        enc.finish().map_err(io)?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(io)
}

/// Looks for `images-idx3-ubyte` / `labels-idx1-ubyte` (optionally gzipped,
/// or with the original `train-` prefix) inside `dir`.
pub fn find_idx_pair(dir: impl AsRef<Path>) -> Option<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let stems = [
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ];
    for (img, lbl) in stems {
        for ext in ["", ".gz"] {
            let i = dir.join(format!("{img}{ext}"));
            let l = dir.join(format!("{lbl}{ext}"));
            if i.is_file() && l.is_file() {
                return Some((i, l));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, n: usize, fill: u8, labels: &[u8]) -> (PathBuf, PathBuf) {
        let i = dir.join("img");
        let l = dir.join("lbl");
        write_idx(&i, &l, &vec![fill; n * 28 * 28], (n, 28, 28), labels).unwrap();
        (i, l)
    }

    #[test]
    fn all_zero_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), 1, 0, &[7]);
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.images.shape(), &[1, 28, 28]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), 2, 255, &[1, 2]);
        let ds = load_idx(&i, &l).unwrap();
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let i = dir.path().join("a.gz");
        let l = dir.path().join("b.gz");
        let pixels: Vec<u8> = (0..2 * 4 * 3).map(|v| v as u8 * 10).collect();
        write_idx(&i, &l, &pixels, (2, 4, 3), &[3, 9]).unwrap();
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.image_dims(), (4, 3));
        assert_eq!(ds.image(1)[0], 120.0 / 255.0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), 1, 0, &[0]);
        let mut bytes = fs::read(&i).unwrap();
        bytes[..4].copy_from_slice(&[0, 0, 0, 0]);
        fs::write(&i, bytes).unwrap();
        match load_idx(&i, &l) {
            Err(DataError::BadMagic { found: 0, path, .. }) => assert_eq!(path, i),
            other => panic!("{other:?}"),
        }
        // A label file passed as the image file is also a magic error.
        assert!(matches!(load_idx(&l, &l), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncated_and_oversized_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), 2, 0, &[0, 1]);
        let bytes = fs::read(&i).unwrap();
        fs::write(&i, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));
        fs::write(&i, &bytes[..10]).unwrap();
        assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { offset: 8, .. })));
        let mut long = bytes.clone();
        long.push(0);
        fs::write(&i, long).unwrap();
        assert!(matches!(load_idx(&i, &l), Err(DataError::TrailingBytes { .. })));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, _) = write_pair(dir.path(), 2, 0, &[0, 1]);
        let l3 = dir.path().join("l3");
        let i3 = dir.path().join("i3");
        write_idx(&i3, &l3, &vec![0; 3 * 784], (3, 28, 28), &[0, 1, 2]).unwrap();
        assert!(matches!(
            load_idx(&i, &l3),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 3,
                ..
            })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_idx("/nonexistent/images", "/nonexistent/labels").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/images"), "{err}");
    }
}
