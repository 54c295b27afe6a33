//! Binary tensor and checkpoint files, PGM heatmaps and CSV tables.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | field                              |
//! |--------------|------------------------------------|
//! | 4            | magic `SGET`                       |
//! | 2            | version `u16` (= 1)                |
//! | 1            | rank `u8`                          |
//! | 4 x rank     | dims, `u32` each                   |
//! | 4 x prod(dims) | row-major `f32` payload          |
//!
//! Checkpoint layout: magic `SGEC`, version `u16`, a `u32`-length-prefixed
//! UTF-8 JSON header (input shape, layer specs, metadata), a `u32` tensor
//! count, then one tensor block per parameter in declaration order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_model, LayerSpec, Model};
use crate::tensor::{FeatureMap, Shape};

pub const TENSOR_MAGIC: [u8; 4] = *b"SGET";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGEC";
pub const FORMAT_VERSION: u16 = 1;

/// An `f32` array of arbitrary rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn header(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::TruncatedHeader { offset: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.header(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.header(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        if self.header(4)? != expected {
            return Err(Error::BadMagic { offset: at });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let found = self.u16()?;
        if found != FORMAT_VERSION {
            return Err(Error::BadVersion { offset: at, found });
        }
        Ok(())
    }
}

impl TensorFile {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected = volume(&dims).ok_or(Error::InvalidParams("tensor volume overflows".into()))?;
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidParams(format!("rank {} exceeds 255", dims.len())));
        }
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(TensorFile { dims, data })
    }

    pub fn from_feature_map(fm: &FeatureMap<f32>) -> Self {
        let dims = fm.shape().dims().iter().map(|&d| d as u32).collect();
        TensorFile {
            dims,
            data: fm.as_slice().to_vec(),
        }
    }

    /// Requires rank 4 with positive dimensions and finite values.
    pub fn to_feature_map(&self) -> Result<FeatureMap<f32>> {
        if self.dims.len() != 4 {
            return Err(Error::InvalidParams(format!(
                "feature maps are rank 4, file has rank {}",
                self.dims.len()
            )));
        }
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        FeatureMap::new(Shape::new(d[0], d[1], d[2], d[3])?, self.data.clone())
    }

    pub fn encoded_len(&self) -> usize {
        4 + 2 + 1 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes a whole buffer; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, end) = Self::decode_at(bytes, 0)?;
        if end != bytes.len() {
            return Err(Error::TrailingBytes { offset: end });
        }
        Ok(t)
    }

    /// Decodes one tensor block starting at `offset`; returns it and the
    /// offset just past it. Error offsets are absolute.
    pub fn decode_at(bytes: &[u8], offset: usize) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: offset };
        r.magic(&TENSOR_MAGIC)?;
        r.version()?;
        let rank = r.header(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = volume(&dims).ok_or(Error::MalformedCheckpoint {
            offset: r.pos,
            reason: "tensor volume overflows".into(),
        })?;
        let payload = count
            .checked_mul(4)
            .ok_or(Error::TruncatedPayload { offset: bytes.len(), needed: usize::MAX })?;
        let available = bytes.len() - r.pos;
        if available < payload {
            return Err(Error::TruncatedPayload {
                offset: bytes.len(),
                needed: payload - available,
            });
        }
        let data = bytes[r.pos..r.pos + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((TensorFile { dims, data }, r.pos + payload))
    }
}

fn volume(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

pub fn write_tensor(path: impl AsRef<Path>, fm: &FeatureMap<f32>) -> Result<()> {
    std::fs::write(path, TensorFile::from_feature_map(fm).encode())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    TensorFile::decode(&std::fs::read(path)?)?.to_feature_map()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    meta: BTreeMap<String, String>,
}

/// A model's architecture, parameters and the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub input_chw: (usize, usize, usize),
    pub specs: Vec<LayerSpec>,
    /// Seeds and the resolved configuration.
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<TensorFile>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, metadata: BTreeMap<String, String>) -> Self {
        let params = model
            .param_info()
            .iter()
            .zip(model.params())
            .map(|(info, values)| TensorFile {
                dims: info.dims.iter().map(|&d| d as u32).collect(),
                data: values.to_vec(),
            })
            .collect();
        Checkpoint {
            input_chw: model.input_chw(),
            specs: model.specs().to_vec(),
            metadata,
            params,
        }
    }

    /// Rebuilds the model; every tensor must match its parameter's shape.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(&self.specs, self.input_chw, 0)?;
        let info = model.param_info();
        if info.len() != self.params.len() {
            return Err(Error::MalformedCheckpoint {
                offset: 0,
                reason: format!("{} tensors for {} parameters", self.params.len(), info.len()),
            });
        }
        for (pi, t) in info.iter().zip(&self.params) {
            let dims: Vec<u32> = pi.dims.iter().map(|&d| d as u32).collect();
            if dims != t.dims {
                return Err(Error::MalformedCheckpoint {
                    offset: 0,
                    reason: format!("{} has dims {:?}, file has {:?}", pi.name, dims, t.dims),
                });
            }
        }
        let values: Vec<Vec<f32>> = self.params.iter().map(|t| t.data.clone()).collect();
        model.load_params(&values)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            input: [self.input_chw.0, self.input_chw.1, self.input_chw.2],
            layers: self.specs.clone(),
            meta: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidParams(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            p.encode_into(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(&CHECKPOINT_MAGIC)?;
        r.version()?;
        let len = r.u32()? as usize;
        let json_at = r.pos;
        let json = r.header(len)?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::MalformedCheckpoint {
            offset: json_at,
            reason: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        let mut pos = r.pos;
        for _ in 0..count {
            let (t, next) = TensorFile::decode_at(bytes, pos)?;
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::MalformedCheckpoint {
                    offset: pos,
                    reason: format!("non-finite parameter value at index {i}"),
                });
            }
            params.push(t);
            pos = next;
        }
        if pos != bytes.len() {
            return Err(Error::TrailingBytes { offset: pos });
        }
        let [c, h, w] = header.input;
        Ok(Checkpoint {
            input_chw: (c, h, w),
            specs: header.layers,
            metadata: header.meta,
            params,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Binary 8-bit PGM of an `height x width` map with values in `[0, 1]`,
/// each pixel repeated `scale x scale` times. Pixels are `floor(255 v + 0.5)`.
pub fn encode_pgm(values: &[f64], width: usize, height: usize, scale: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::LengthMismatch {
            expected: width * height,
            found: values.len(),
        });
    }
    if width == 0 || height == 0 || scale == 0 {
        return Err(Error::InvalidParams("heatmap dimensions and scale must be positive".into()));
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::OutOfRange { index, value });
    }
    let (w, h) = (width * scale, height * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / scale) * width + x / scale];
            out.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    Ok(out)
}

pub fn write_heatmap(
    values: &[f64],
    width: usize,
    height: usize,
    scale: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_pgm(values, width, height, scale)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes `# key=value` comment lines followed by a CSV table.
pub fn write_csv(
    path: impl AsRef<Path>,
    metadata: &[(String, String)],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    for (k, v) in metadata {
        writeln!(file, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`], skipping comment lines.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_feature_map_size() {
        // magic + version + rank + four u32 dims + one f32
        let fm = FeatureMap::<f32>::from_dims([1, 1, 1, 1], vec![0.0]).unwrap();
        let bytes = TensorFile::from_feature_map(&fm).encode();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 16 + 4);
        assert_eq!(&bytes[..4], b"SGET");
        // a rank-1 single value is 15 bytes
        assert_eq!(TensorFile::new(vec![1], vec![0.0]).unwrap().encode().len(), 15);
    }

    #[test]
    fn truncation_and_corruption() {
        let fm = FeatureMap::<f32>::from_dims([1, 1, 1, 1], vec![0.0]).unwrap();
        let bytes = TensorFile::from_feature_map(&fm).encode();
        match TensorFile::decode(&bytes[..bytes.len() - 1]) {
            Err(Error::TruncatedPayload { offset, needed }) => {
                assert_eq!(offset, 26);
                assert_eq!(needed, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            TensorFile::decode(&bytes[..5]),
            Err(Error::TruncatedHeader { offset: 5 })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::decode(&bad), Err(Error::BadMagic { offset: 0 })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            TensorFile::decode(&bad),
            Err(Error::BadVersion { offset: 4, found: 9 })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(TensorFile::decode(&long), Err(Error::TrailingBytes { offset: 27 })));
    }

    #[test]
    fn little_endian_layout() {
        let t = TensorFile::new(vec![2], vec![1.0, -2.5]).unwrap();
        let b = t.encode();
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..11], &[2, 0, 0, 0]);
        assert_eq!(&b[11..15], &1.0f32.to_le_bytes());
        assert_eq!(&b[15..19], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn feature_map_conversion_validates() {
        let t = TensorFile::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(t.to_feature_map().is_err());
        let t = TensorFile::new(vec![1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(t.to_feature_map(), Err(Error::NonFiniteInput { index: 1 })));
    }

    #[test]
    fn pgm_pixels() {
        let b = encode_pgm(&[0.0, 1.0], 2, 1, 1).unwrap();
        assert_eq!(b, b"P5\n2 1\n255\n\x00\xff");
        let b = encode_pgm(&[0.5], 1, 1, 1).unwrap();
        assert_eq!(*b.last().unwrap(), 128);
        assert!(matches!(
            encode_pgm(&[0.2, 1.5], 2, 1, 1),
            Err(Error::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn pgm_upscales_nearest_neighbor() {
        let b = encode_pgm(&[0.0, 1.0], 2, 1, 3).unwrap();
        let header = b"P5\n6 3\n255\n";
        assert_eq!(&b[..header.len()], header);
        let px = &b[header.len()..];
        assert_eq!(px.len(), 18);
        for row in px.chunks(6) {
            assert_eq!(row, &[0, 0, 0, 255, 255, 255]);
        }
    }
}
