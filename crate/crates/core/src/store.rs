//! `CAMR` little-endian binary files for models, anchors and embedding galleries.
//!
//! Every file starts with the magic `CAMR`, a `u16` format version and a `u8`
//! payload kind, followed by a kind-specific header and `f64` payload:
//!
//! | kind | header | payload |
//! |------|--------|---------|
//! | 1 model | activation `u8`, size count `u32`, sizes `u32…` | per layer: weights (row-major), bias |
//! | 2 anchors | `t: u32`, `n: u32`, margin `f64`, min norm `f64` | `t·n` values |
//! | 3 embeddings | count `u64`, `n: u32` | per record: id `u64`, label `u32`, `n` values |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, Dense, EncoderModel};
use crate::error::{Error, Result};
use crate::loss::AnchorSet;
use crate::numeric::Matrix;

pub const MAGIC: &[u8; 4] = b"CAMR";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the kind-specific header.
pub const PREAMBLE_LEN: usize = 7;
pub const ANCHOR_HEADER_LEN: usize = PREAMBLE_LEN + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PayloadKind {
    Model = 1,
    Anchors = 2,
    Embeddings = 3,
}

/// Labeled embeddings with stable item ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub embeddings: Matrix,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<u64>, labels: Vec<usize>, embeddings: Matrix) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::dims(embeddings.rows(), ids.len()));
        }
        if labels.len() != embeddings.rows() {
            return Err(Error::dims(embeddings.rows(), labels.len()));
        }
        Ok(Self { ids, labels, embeddings })
    }

    /// Ids `0..N` in row order.
    pub fn sequential(labels: Vec<usize>, embeddings: Matrix) -> Result<Self> {
        let ids = (0..embeddings.rows() as u64).collect();
        Self::new(ids, labels, embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: PayloadKind) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(kind as u8);
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], kind: PayloadKind) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN || &bytes[..4] != MAGIC {
            return Err(Error::UnrecognizedFile("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnrecognizedFile(format!("unsupported version {version}")));
        }
        if bytes[6] != kind as u8 {
            return Err(Error::UnrecognizedFile(format!(
                "payload kind {} where {} was expected",
                bytes[6], kind as u8
            )));
        }
        Ok(Self {
            bytes,
            pos: PREAMBLE_LEN,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes_needed = n.checked_mul(8).ok_or_else(|| Error::Truncated("payload size overflow".into()))?;
        let raw = self.take(bytes_needed)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::UnrecognizedFile(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_model(model: &EncoderModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(PayloadKind::Model);
    w.u8(model.activation().tag());
    w.u32(model.layer_sizes().len())?;
    for &s in model.layer_sizes() {
        w.u32(s)?;
    }
    for layer in model.layers() {
        w.f64s(layer.weights.as_slice());
        w.f64s(&layer.bias);
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = Reader::open(bytes, PayloadKind::Model)?;
    let tag = r.u8()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::UnrecognizedFile(format!("activation tag {tag}")))?;
    let count = r.u32()?;
    if count < 2 {
        return Err(Error::UnrecognizedFile(format!("{count} layer sizes")));
    }
    let sizes = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = Matrix::from_vec(fan_out, fan_in, r.f64s(fan_in * fan_out)?)?;
        let bias = r.f64s(fan_out)?;
        layers.push(Dense { weights, bias });
    }
    r.finish()?;
    EncoderModel::from_layers(activation, layers)
}

pub fn encode_anchors(anchors: &AnchorSet) -> Result<Vec<u8>> {
    let mut w = Writer::new(PayloadKind::Anchors);
    w.u32(anchors.num_classes())?;
    w.u32(anchors.dim())?;
    w.f64s(&[anchors.margin(), anchors.min_norm()]);
    w.f64s(anchors.matrix().as_slice());
    Ok(w.buf)
}

pub fn decode_anchors(bytes: &[u8]) -> Result<AnchorSet> {
    let mut r = Reader::open(bytes, PayloadKind::Anchors)?;
    let t = r.u32()?;
    let n = r.u32()?;
    let margin = r.f64()?;
    let min_norm = r.f64()?;
    let data = r.f64s(t * n)?;
    r.finish()?;
    AnchorSet::new(Matrix::from_vec(t, n, data)?, margin, min_norm)
}

pub fn encode_embeddings(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let mut w = Writer::new(PayloadKind::Embeddings);
    w.u64(store.len() as u64);
    w.u32(store.dim())?;
    for (i, row) in store.embeddings.iter_rows().enumerate() {
        w.u64(store.ids[i]);
        w.u32(store.labels[i])?;
        w.f64s(row);
    }
    Ok(w.buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut r = Reader::open(bytes, PayloadKind::Embeddings)?;
    let count = usize::try_from(r.u64()?).map_err(|_| Error::UnrecognizedFile("record count".into()))?;
    let n = r.u32()?;
    let record = 12usize.saturating_add(n.saturating_mul(8));
    if count.saturating_mul(record) > bytes.len() {
        return Err(Error::Truncated(format!("header announces {count} records")));
    }
    let mut ids = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * n);
    for _ in 0..count {
        ids.push(r.u64()?);
        labels.push(r.u32()?);
        data.extend(r.f64s(n)?);
    }
    r.finish()?;
    EmbeddingStore::new(ids, labels, Matrix::from_vec(count, n, data)?)
}

pub fn save_model(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_model(model)?)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EncoderModel> {
    decode_model(&fs::read(path)?)
}

pub fn save_anchors(anchors: &AnchorSet, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_anchors(anchors)?)?)
}

pub fn load_anchors(path: impl AsRef<Path>) -> Result<AnchorSet> {
    decode_anchors(&fs::read(path)?)
}

pub fn save_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_embeddings(store)?)?)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    decode_embeddings(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::numeric::{RngSeed, SeededRng};
    use proptest::prelude::*;

    fn anchors(t: usize, n: usize) -> AnchorSet {
        let data = SeededRng::new(RngSeed(t as u64)).gaussians(t * n);
        AnchorSet::new(Matrix::from_vec(t, n, data).unwrap(), 2.0, 1.0).unwrap()
    }

    #[test]
    fn model_round_trip_preserves_outputs() {
        let m = init_encoder(&[6, 4, 3], Activation::Relu, RngSeed(1)).unwrap();
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = [0.1, -0.4, 2.0, 0.0, 1.5, -3.0];
        let (a, b) = (m.embed(&x).unwrap(), back.embed(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn anchor_payload_size() {
        let bytes = encode_anchors(&anchors(10, 8)).unwrap();
        assert_eq!(bytes.len() - ANCHOR_HEADER_LEN, 10 * 8 * 8);
        assert_eq!(&bytes[..4], b"CAMR");
        assert_eq!(bytes[6], 2);
    }

    #[test]
    fn wrong_kind_is_unrecognized() {
        let bytes = encode_model(&init_encoder(&[2, 2], Activation::Tanh, RngSeed(0)).unwrap()).unwrap();
        let err = decode_anchors(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("unrecognized file"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_anchors(&anchors(2, 2)).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_anchors(&bytes), Err(Error::UnrecognizedFile(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_anchors(&bytes), Err(Error::UnrecognizedFile(_))));
        assert!(matches!(decode_anchors(b"CA"), Err(Error::UnrecognizedFile(_))));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_anchors(&anchors(3, 4)).unwrap();
        assert!(matches!(decode_anchors(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let store = EmbeddingStore::sequential(vec![0, 1], Matrix::zeros(2, 3)).unwrap();
        let bytes = encode_embeddings(&store).unwrap();
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 5]), Err(Error::Truncated(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = anchors(4, 3);
        save_anchors(&a, dir.path().join("a.bin")).unwrap();
        assert_eq!(load_anchors(dir.path().join("a.bin")).unwrap(), a);
        let m = init_encoder(&[3, 2], Activation::Tanh, RngSeed(5)).unwrap();
        save_model(&m, dir.path().join("m.bin")).unwrap();
        assert_eq!(load_model(dir.path().join("m.bin")).unwrap(), m);
    }

    proptest! {
        #[test]
        fn embeddings_round_trip_bitwise(
            rows in prop::collection::vec((any::<u64>(), 0usize..1000, prop::collection::vec(any::<f64>(), 3)), 0..20)
        ) {
            let ids = rows.iter().map(|r| r.0).collect();
            let labels = rows.iter().map(|r| r.1).collect();
            let data: Vec<f64> = rows.iter().flat_map(|r| r.2.clone()).collect();
            let store = EmbeddingStore::new(ids, labels, Matrix::from_vec(rows.len(), 3, data).unwrap()).unwrap();
            let bytes = encode_embeddings(&store).unwrap();
            let back = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(&back.ids, &store.ids);
            prop_assert_eq!(&back.labels, &store.labels);
            prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        }
    }
}
