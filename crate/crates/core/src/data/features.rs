use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RTFX";
const HEADER_LEN: usize = 12;

/// `frames × dim` matrix of 32-bit features, one row per 10 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if frames * dim != data.len() {
            return Err(Error::Shape {
                op: "feature sequence",
                lhs: vec![frames, dim],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            frames: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Per-utterance mean and variance normalisation of every dimension.
    pub fn cmvn(&mut self) {
        if self.frames == 0 {
            return;
        }
        let n = self.frames as f64;
        for j in 0..self.dim {
            let col = (0..self.frames).map(|t| self.data[t * self.dim + j] as f64);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + 1e-10).sqrt();
            for t in 0..self.frames {
                let v = &mut self.data[t * self.dim + j];
                *v = ((*v as f64 - mean) * rstd) as f32;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an RTFX buffer; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected RTFX".into()));
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fail(8, "feature dimension is zero".into()));
        }
        let want = frames * dim;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != want * 4 {
            let have = payload.len() / 4;
            let kind = if payload.len() < want * 4 { "truncated" } else { "trailing bytes in" };
            return Err(fail(
                bytes.len(),
                format!("{kind} payload: header says {frames}x{dim} = {want} floats, found {have}"),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { frames, dim, data })
    }
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let seq = FeatureSequence::new(3, 2, vec![0.1, -2.5, f32::MIN_POSITIVE, 7.0, 1e30, -0.0]).unwrap();
        let back = FeatureSequence::from_bytes(&seq.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   seq.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn format_errors() {
        assert!(matches!(FeatureSequence::from_bytes(&[], Path::new("e")), Err(Error::Format { .. })));
        let mut b = FeatureSequence::new(3, 2, vec![0.0; 6]).unwrap().to_bytes();
        b.truncate(b.len() - 4);
        match FeatureSequence::from_bytes(&b, Path::new("t")) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 32);
                assert!(msg.contains("found 5"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        b[0] = b'X';
        assert!(matches!(
            FeatureSequence::from_bytes(&b, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn cmvn_normalises_columns() {
        let mut s = FeatureSequence::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.cmvn();
        let mean: f32 = s.data().iter().sum::<f32>() / 4.0;
        let var: f32 = s.data().iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
