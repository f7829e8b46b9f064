//! Binary predictor checkpoints (`ECKV`) and channel-score sidecars (`ECKS`).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! ECKV | u32 version=1 | u32 n_layers, S, D_local, d_kv, n_kv_heads, d_head
//!      | per compressed layer, ascending: w_key, w_value as row-major f32
//!        of shape [(d_kv − D_local) × (d_kv + D_local)]
//!
//! ECKS | u32 version=1 | u32 n_layers, d_kv | per layer: d_kv × f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::echo::config::EchoConfig;
use crate::echo::predictor::{BankGeometry, Predictor, PredictorBank};
use crate::error::{ensure, Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKV";
pub const SCORES_MAGIC: &[u8; 4] = b"ECKS";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit a u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let got = self.take(4)?;
        if got != magic {
            return Err(format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(format!("unsupported version {version}"));
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

pub fn encode_bank(bank: &PredictorBank) -> Result<Vec<u8>> {
    let g = bank.geometry();
    let mut out = Vec::with_capacity(32 + bank.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for field in [g.n_layers, g.group_size, g.local_dim, g.d_kv, g.n_kv_heads, g.d_head] {
        put_u32(&mut out, field)?;
    }
    for p in bank.predictors() {
        put_f32s(&mut out, p.w_key.as_slice());
        put_f32s(&mut out, p.w_value.as_slice());
    }
    Ok(out)
}

/// Decodes a checkpoint. Sink/window sizes are not part of the format and
/// take the defaults; callers override them from their run config.
pub fn decode_bank(bytes: &[u8], path: &Path) -> Result<PredictorBank> {
    let fmt_err = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC).map_err(fmt_err)?;
    let mut f = [0usize; 6];
    for slot in &mut f {
        *slot = r.u32().map_err(fmt_err)?;
    }
    let geometry =
        BankGeometry { n_layers: f[0], group_size: f[1], local_dim: f[2], d_kv: f[3], n_kv_heads: f[4], d_head: f[5] };
    geometry.validate().map_err(|e| fmt_err(e.to_string()))?;
    let echo = EchoConfig::new(geometry.group_size, geometry.local_dim, geometry.d_kv);
    let (rows, cols) = (echo.output_dim(), echo.input_dim());
    let layout = crate::echo::partition_layers(geometry.n_layers, geometry.group_size)?;
    let mut predictors = Vec::new();
    for layer in layout.compressed() {
        let w_key = Matrix::from_vec(rows, cols, r.f32s(rows * cols).map_err(fmt_err)?)?;
        let w_value = Matrix::from_vec(rows, cols, r.f32s(rows * cols).map_err(fmt_err)?)?;
        predictors.push(Predictor { layer, w_key, w_value });
    }
    r.finish().map_err(fmt_err)?;
    PredictorBank::from_predictors(geometry, echo, predictors)
}

pub fn save_bank(bank: &PredictorBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bank(bank)?;
    std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PredictorBank> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes, path)
}

/// Loads a checkpoint and rejects it unless its geometry equals `expected`.
pub fn load_bank_for(path: impl AsRef<Path>, expected: &BankGeometry) -> Result<PredictorBank> {
    let bank = load_bank(path.as_ref())?;
    ensure!(
        bank.geometry() == expected,
        Config,
        "checkpoint {} has geometry {:?}, expected {expected:?}",
        path.as_ref().display(),
        bank.geometry()
    );
    Ok(bank)
}

pub fn encode_scores(scores: &[Vec<f32>]) -> Result<Vec<u8>> {
    let d_kv = scores.first().map_or(0, Vec::len);
    ensure!(scores.iter().all(|s| s.len() == d_kv), Dimension, "score vectors of unequal length");
    let mut out = Vec::new();
    out.extend_from_slice(SCORES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, scores.len())?;
    put_u32(&mut out, d_kv)?;
    for s in scores {
        put_f32s(&mut out, s);
    }
    Ok(out)
}

pub fn decode_scores(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f32>>> {
    let fmt_err = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(SCORES_MAGIC).map_err(fmt_err)?;
    let n_layers = r.u32().map_err(fmt_err)?;
    let d_kv = r.u32().map_err(fmt_err)?;
    let scores = (0..n_layers).map(|_| r.f32s(d_kv)).collect::<std::result::Result<Vec<_>, _>>().map_err(fmt_err)?;
    r.finish().map_err(fmt_err)?;
    Ok(scores)
}

pub fn save_scores(scores: &[Vec<f32>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_scores(scores)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scores(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> PredictorBank {
        let g = BankGeometry { n_layers: 4, group_size: 2, local_dim: 4, d_kv: 8, n_kv_heads: 2, d_head: 4 };
        PredictorBank::random(g, EchoConfig::new(2, 4, 8), 3).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_bank(&bank()).unwrap();
        assert_eq!(&bytes[..4], b"ECKV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let fields: Vec<u32> =
            bytes[8..32].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(fields, vec![4, 2, 4, 8, 2, 4]);
        // Two compressed layers × (key + value) × 4×12 weights.
        assert_eq!(bytes.len(), 32 + 2 * 2 * 48 * 4);
        // First weight of layer 1's key map follows the header.
        let first = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
        assert_eq!(first, bank().predictor(1).unwrap().w_key.get(0, 0));
    }

    #[test]
    fn decode_rejects_corruption() {
        let p = Path::new("mem");
        let good = encode_bank(&bank()).unwrap();
        assert_eq!(decode_bank(&good, p).unwrap(), bank());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_bank(&bad_magic, p), Err(Error::Format { .. })));
        assert!(decode_bank(&good[..good.len() - 1], p).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_bank(&extra, p).is_err());
        let mut bad_version = good;
        bad_version[4] = 2;
        assert!(decode_bank(&bad_version, p).is_err());
    }

    #[test]
    fn scores_layout() {
        let scores = vec![vec![1.0f32, 2.0], vec![0.5, 0.25]];
        let bytes = encode_scores(&scores).unwrap();
        assert_eq!(&bytes[..4], b"ECKS");
        assert_eq!(bytes.len(), 16 + 4 * 4);
        assert_eq!(decode_scores(&bytes, Path::new("mem")).unwrap(), scores);
    }
}
