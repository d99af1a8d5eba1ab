//! Binary model checkpoints.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u32` flags, then a
//! sequence of tensors, each written as `u64` rows, `u64` cols and
//! `rows · cols` `f64` values in row-major order. Tensors appear in the
//! order `W0`, `W1`, then `M` and `α` (as a `1 × len` tensor) when the
//! pairwise flag is set. Flags: bit 0 marks pairwise parameters, bits 1–2
//! hold the coefficient mode.

use std::path::Path;

use crate::backbone::GcnParams;
use crate::error::{Error, Result};
use crate::mrf::{CoefficientMode, PairwiseParams};
use crate::numerics::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"EPFGNNCK";
pub const VERSION: u32 = 1;

const FLAG_PAIRWISE: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gcn: GcnParams,
    pub pairwise: Option<PairwiseParams>,
}

fn mode_bits(mode: CoefficientMode) -> u32 {
    match mode {
        CoefficientMode::Edge => 0,
        CoefficientMode::Layer => 1,
        CoefficientMode::None => 2,
    }
}

fn put_tensor(out: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) {
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = match &model.pairwise {
        Some(pp) => FLAG_PAIRWISE | (mode_bits(pp.mode) << 1),
        None => 0,
    };
    out.extend_from_slice(&flags.to_le_bytes());
    for w in [&model.gcn.w0, &model.gcn.w1] {
        put_tensor(&mut out, w.rows(), w.cols(), w.as_slice());
    }
    if let Some(pp) = &model.pairwise {
        put_tensor(&mut out, pp.raw.rows(), pp.raw.cols(), pp.raw.as_slice());
        put_tensor(&mut out, 1, pp.alpha.len(), &pp.alpha);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<DenseMatrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {rows}x{cols} exceeds the file")))?;
        let raw = self.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        DenseMatrix::from_vec(rows, cols, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    let w0 = r.tensor()?;
    let w1 = r.tensor()?;
    if w0.cols() != w1.rows() {
        return Err(Error::Checkpoint("W0 and W1 disagree on the hidden width".into()));
    }
    let pairwise = if flags & FLAG_PAIRWISE != 0 {
        let mode = match (flags >> 1) & 3 {
            0 => CoefficientMode::Edge,
            1 => CoefficientMode::Layer,
            2 => CoefficientMode::None,
            b => return Err(Error::Checkpoint(format!("unknown coefficient mode {b}"))),
        };
        let raw = r.tensor()?;
        let alpha = r.tensor()?.into_vec();
        if raw.shape() != (w1.cols(), w1.cols()) {
            return Err(Error::Checkpoint("compatibility matrix does not match the class count".into()));
        }
        Some(PairwiseParams { raw, alpha, mode })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Model {
        gcn: GcnParams { w0, w1 },
        pairwise,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
