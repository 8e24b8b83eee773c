//! Little-endian binary container for trained networks, min-max models and
//! synthesized pair datasets.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes  "DTAYLOR\0"
//! version   u32      ARCHIVE_VERSION
//! kind      u32      1 = model, 2 = pair dataset
//! n_meta    u32
//!   key     u32 length + UTF-8 bytes
//!   value   u32 length + UTF-8 bytes
//! n_tensor  u32
//!   name    u32 length + UTF-8 bytes
//!   rank    u32
//!   dims    rank × u64
//!   data    prod(dims) × f64
//! sha256    32 bytes over everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, PairMeta, PairedSample};
use crate::network::{BoundsPolicy, DetectionLayer, Layer, Network, PixelBounds, PoolingLayer};
use crate::relevance::MinMaxModel;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: [u8; 8] = *b"DTAYLOR\0";
pub const ARCHIVE_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchiveKind {
    Model = 1,
    Pairs = 2,
}

/// A network together with an optional fitted min-max model and free-form
/// training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub network: Network,
    pub minmax: Option<MinMaxModel>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelArchive {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            minmax: None,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairArchive {
    pub samples: Vec<PairedSample>,
    pub metadata: BTreeMap<String, String>,
}

/// Raw decoded archive.
struct Container {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode(kind: ArchiveKind, c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    put_u32(&mut out, ARCHIVE_VERSION);
    put_u32(&mut out, kind as u32);
    put_u32(&mut out, c.metadata.len() as u32);
    for (k, v) in &c.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, c.tensors.len() as u32);
    for (name, t) in &c.tensors {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    /// Reported as the file length in truncation errors.
    file_len: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        match self.pos.checked_add(n).filter(|&end| end <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: self.pos.saturating_add(n),
                available: self.file_len,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, DataError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| DataError::Malformed {
            path: self.path.to_path_buf(),
            reason: format!("invalid UTF-8 string at offset {at}"),
        })
    }
}

fn decode(path: &Path, bytes: &[u8], kind: ArchiveKind) -> Result<Container, DataError> {
    let truncated = |needed: usize| DataError::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed,
        available: bytes.len(),
    };
    if bytes.len() < ARCHIVE_MAGIC.len() {
        return Err(truncated(ARCHIVE_MAGIC.len()));
    }
    if bytes[..8] != ARCHIVE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
            found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
            expected: u32::from_be_bytes(ARCHIVE_MAGIC[..4].try_into().expect("4 bytes")),
        });
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(truncated(HEADER_LEN + DIGEST_LEN));
    }
    let found_kind = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if found_kind != kind as u32 {
        return Err(DataError::WrongKind {
            path: path.to_path_buf(),
            found: found_kind,
            expected: kind as u32,
        });
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let mut r = Reader {
        path,
        bytes: &bytes[..body_end],
        pos: HEADER_LEN,
        file_len: bytes.len(),
    };
    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        metadata.insert(k, v);
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let at = r.pos;
        let raw = match count.and_then(|c| c.checked_mul(8)) {
            Some(n) => r.take(n)?,
            None => {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    reason: format!("tensor {name:?} at offset {at} has overflowing extents {dims:?}"),
                })
            }
        };
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("tensor {name:?} at offset {at}: {e}"),
        })?;
        tensors.insert(name, t);
    }
    if r.pos != body_end {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            offset: r.pos,
            extra: body_end - r.pos,
        });
    }
    if Sha256::digest(&bytes[..body_end])[..] != bytes[body_end..] {
        return Err(DataError::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    Ok(Container { metadata, tensors })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Container {
    fn tensor(&mut self, path: &Path, name: &str) -> Result<Tensor, DataError> {
        self.tensors.remove(name).ok_or_else(|| DataError::MissingEntry {
            path: path.to_path_buf(),
            name: name.to_string(),
        })
    }

    fn meta(&mut self, path: &Path, key: &str) -> Result<String, DataError> {
        self.metadata.remove(key).ok_or_else(|| DataError::MissingEntry {
            path: path.to_path_buf(),
            name: key.to_string(),
        })
    }
}

// Reserved metadata keys; everything else is user metadata.
const KEY_LAYERS: &str = "arch.layers";
const KEY_INPUT_SHAPE: &str = "arch.input_shape";
const KEY_BOUNDS_POLICY: &str = "arch.bounds_policy";
const KEY_MINMAX: &str = "minmax.layout";

fn malformed(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_usize_list(path: &Path, s: &str) -> Result<Vec<usize>, DataError> {
    s.split('x')
        .map(|p| p.parse().map_err(|_| malformed(path, format!("bad extent list {s:?}"))))
        .collect()
}

fn policy_name(p: BoundsPolicy) -> &'static str {
    match p {
        BoundsPolicy::Ignore => "ignore",
        BoundsPolicy::Warn => "warn",
        BoundsPolicy::Error => "error",
    }
}

pub fn save_model(archive: &ModelArchive, path: impl AsRef<Path>) -> Result<(), DataError> {
    let net = &archive.network;
    let mut c = Container {
        metadata: archive.metadata.clone(),
        tensors: BTreeMap::new(),
    };
    let mut descriptors = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Detection(d) => {
                descriptors.push(format!(
                    "D:{}:{}:{}",
                    d.input_dim(),
                    d.output_dim(),
                    u8::from(d.constrains_bias())
                ));
                c.tensors.insert(format!("layer{i}.weights"), d.weights().clone());
                c.tensors.insert(format!("layer{i}.biases"), d.biases().clone());
            }
            Layer::Pooling(p) => descriptors.push(format!("P:{}:{}", p.group_size(), p.exponent())),
        }
    }
    c.metadata.insert(KEY_LAYERS.into(), descriptors.join(";"));
    c.metadata.insert(KEY_INPUT_SHAPE.into(), join_usize(net.input_shape()));
    c.metadata
        .insert(KEY_BOUNDS_POLICY.into(), policy_name(net.bounds_policy()).into());
    if let Some(b) = net.bounds() {
        c.tensors.insert("bounds.low".into(), b.low().clone());
        c.tensors.insert("bounds.high".into(), b.high().clone());
    }
    if let Some(m) = &archive.minmax {
        c.metadata
            .insert(KEY_MINMAX.into(), format!("{}:{}", m.block(), m.group_size()));
        c.tensors.insert("minmax.bottom".into(), m.bottom().clone());
        c.tensors.insert("minmax.top".into(), m.top().clone());
        c.tensors.insert("minmax.offset".into(), m.offset().clone());
    }
    write_file(path.as_ref(), &encode(ArchiveKind::Model, &c))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArchive, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut c = decode(path, &bytes, ArchiveKind::Model)?;

    let input_shape = parse_usize_list(path, &c.meta(path, KEY_INPUT_SHAPE)?)?;
    let policy = match c.meta(path, KEY_BOUNDS_POLICY)?.as_str() {
        "ignore" => BoundsPolicy::Ignore,
        "warn" => BoundsPolicy::Warn,
        "error" => BoundsPolicy::Error,
        other => return Err(malformed(path, format!("unknown bounds policy {other:?}"))),
    };
    let mut layers = Vec::new();
    for (i, desc) in c.meta(path, KEY_LAYERS)?.split(';').enumerate() {
        let parts: Vec<&str> = desc.split(':').collect();
        let bad = || malformed(path, format!("bad layer descriptor {desc:?}"));
        let layer = match parts.as_slice() {
            ["D", d_in, d_out, constrain] => {
                let w = c.tensor(path, &format!("layer{i}.weights"))?;
                let b = c.tensor(path, &format!("layer{i}.biases"))?;
                let d_in: usize = d_in.parse().map_err(|_| bad())?;
                let d_out: usize = d_out.parse().map_err(|_| bad())?;
                if w.shape() != [d_in, d_out] {
                    return Err(malformed(
                        path,
                        format!(
                            "layer {i} weights have shape {:?}, descriptor says {d_in}x{d_out}",
                            w.shape()
                        ),
                    ));
                }
                Layer::Detection(DetectionLayer::new(w, b, *constrain == "1")?)
            }
            ["P", g, p] => Layer::Pooling(PoolingLayer::new(
                g.parse().map_err(|_| bad())?,
                p.parse().map_err(|_| bad())?,
            )?),
            _ => return Err(bad()),
        };
        layers.push(layer);
    }
    let bounds = match (c.tensors.remove("bounds.low"), c.tensors.remove("bounds.high")) {
        (Some(l), Some(h)) => Some(PixelBounds::new(l, h)?),
        (None, None) => None,
        _ => return Err(malformed(path, "only one of bounds.low / bounds.high present")),
    };
    let network = Network::new(input_shape, layers, bounds)?.with_bounds_policy(policy);

    let minmax = match c.metadata.remove(KEY_MINMAX) {
        None => None,
        Some(layout) => {
            let (block, group) = layout
                .split_once(':')
                .and_then(|(b, g)| Some((b.parse().ok()?, g.parse().ok()?)))
                .ok_or_else(|| malformed(path, format!("bad min-max layout {layout:?}")))?;
            let bottom = c.tensor(path, "minmax.bottom")?;
            let top = c.tensor(path, "minmax.top")?;
            let offset = c.tensor(path, "minmax.offset")?;
            Some(
                MinMaxModel::new(block, bottom, top, offset, group)
                    .map_err(|e| malformed(path, format!("min-max model: {e}")))?,
            )
        }
    };
    Ok(ModelArchive {
        network,
        minmax,
        metadata: c.metadata,
    })
}

pub fn save_pairs(archive: &PairArchive, path: impl AsRef<Path>) -> Result<(), DataError> {
    let n = archive.samples.len();
    let mut images = Vec::new();
    let mut targets = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n * 6);
    for s in &archive.samples {
        images.extend_from_slice(s.image.data());
        targets.push(s.target);
        let m = s.meta;
        meta.extend([
            f64::from(m.left_label),
            f64::from(m.right_label),
            f64::from(m.left_offset.0),
            f64::from(m.left_offset.1),
            f64::from(m.right_offset.0),
            f64::from(m.right_offset.1),
        ]);
    }
    let mut c = Container {
        metadata: archive.metadata.clone(),
        tensors: BTreeMap::new(),
    };
    let (rows, cols) = (super::CANVAS_ROWS, super::CANVAS_COLS);
    c.tensors
        .insert("images".into(), Tensor::new(vec![n, rows, cols], images)?);
    c.tensors.insert("targets".into(), Tensor::new(vec![n], targets)?);
    c.tensors.insert("meta".into(), Tensor::new(vec![n, 6], meta)?);
    write_file(path.as_ref(), &encode(ArchiveKind::Pairs, &c))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<PairArchive, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut c = decode(path, &bytes, ArchiveKind::Pairs)?;
    let images = c.tensor(path, "images")?;
    let targets = c.tensor(path, "targets")?;
    let meta = c.tensor(path, "meta")?;
    let n = targets.len();
    let (rows, cols) = (super::CANVAS_ROWS, super::CANVAS_COLS);
    if images.shape() != [n, rows, cols] || meta.shape() != [n, 6] {
        return Err(malformed(
            path,
            format!(
                "inconsistent pair tensors: images {:?}, targets {:?}, meta {:?}",
                images.shape(),
                targets.shape(),
                meta.shape()
            ),
        ));
    }
    let samples = (0..n)
        .map(|i| {
            let m = &meta.data()[i * 6..(i + 1) * 6];
            Ok(PairedSample {
                image: Tensor::new(
                    vec![rows, cols],
                    images.data()[i * rows * cols..(i + 1) * rows * cols].to_vec(),
                )?,
                target: targets.data()[i],
                meta: PairMeta {
                    left_label: m[0] as u8,
                    right_label: m[1] as u8,
                    left_offset: (m[2] as i32, m[3] as i32),
                    right_offset: (m[4] as i32, m[5] as i32),
                },
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(PairArchive {
        samples,
        metadata: c.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Preset;

    fn small_net() -> Network {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        Network::from_blocks(
            vec![2, 3],
            vec![
                (
                    DetectionLayer::random(6, 8, 0.3, &mut rng).unwrap(),
                    PoolingLayer::new(2, 2.0).unwrap(),
                ),
                (
                    DetectionLayer::random(4, 3, 0.3, &mut rng).unwrap(),
                    PoolingLayer::new(3, f64::INFINITY).unwrap(),
                ),
            ],
            Some(PixelBounds::uniform(6, -0.5, 1.5).unwrap()),
        )
        .unwrap()
        .with_bounds_policy(BoundsPolicy::Error)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dta");
        let mut archive = ModelArchive::new(small_net());
        archive.metadata.insert("train.final_mse".into(), "0.25".into());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        archive.minmax = Some(MinMaxModel::random(0, 6, 3, 8, 2, 0.05, &mut rng).unwrap());
        save_model(&archive, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, archive);
        for (a, b) in archive.network.layers().iter().zip(back.network.layers()) {
            if let (Layer::Detection(a), Layer::Detection(b)) = (a, b) {
                for (x, y) in a.weights().data().iter().zip(b.weights().data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn preset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dta");
        let archive = ModelArchive::new(Network::preset(Preset::MnistTwoLayer, 0.05, 3).unwrap());
        save_model(&archive, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), archive);
    }

    #[test]
    fn version_truncation_and_checksum_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dta");
        save_model(&ModelArchive::new(small_net()), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[8] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(DataError::UnsupportedVersion { found: 7, .. })
        ));

        for cut in [1, 31, 32, 100, good.len() - 20] {
            fs::write(&path, &good[..good.len() - cut]).unwrap();
            assert!(
                matches!(load_model(&path), Err(DataError::Truncated { .. })),
                "cut {cut}: {:?}",
                load_model(&path)
            );
        }

        let mut flipped = good.clone();
        let i = good.len() - DIGEST_LEN - 3;
        flipped[i] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_model(&path), Err(DataError::ChecksumMismatch { .. })));

        let mut magic = good;
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        assert!(matches!(load_model(&path), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn pairs_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dta");
        let image = Tensor::new(vec![28, 56], (0..28 * 56).map(|v| v as f64 / 1000.0 - 0.5).collect()).unwrap();
        let archive = PairArchive {
            samples: vec![PairedSample {
                image,
                target: 100.0,
                meta: PairMeta {
                    left_label: 2,
                    right_label: 7,
                    left_offset: (-2, 1),
                    right_offset: (0, 2),
                },
            }],
            metadata: BTreeMap::from([("seed".to_string(), "9".to_string())]),
        };
        save_pairs(&archive, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), archive);
        assert!(matches!(load_model(&path), Err(DataError::WrongKind { found: 2, .. })));
    }
}
