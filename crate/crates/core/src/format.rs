//! Binary tensor and bundle files, plus atomic file writes.
//!
//! Tensor record:
//!
//! ```text
//! "NBCT" | version u8 = 1 | dtype u8 | ndim u8 | pad u8 | ndim × u64 LE | payload LE
//! ```
//!
//! dtype: 0 = f32, 1 = f64, 2 = f16, 3 = i8.
//!
//! Bundle:
//!
//! ```text
//! "NBCB" | version u8 = 1 | count u16 LE
//! per block: index u16 LE | kind u8 | N f64 LE | storage u8 | W | b | [scales]
//! ```
//!
//! kind: 0 = identity, 1 = blt, 2 = asinh, 3 = tanh, 4 = sigmoid. storage
//! uses the dtype codes of the weight record. The bias is f16 under f16 and
//! i8 storage; i8 modules append their per-row scales as an f32 record.

use std::io::Write;
use std::path::Path;

use half::f16;

use crate::compensation::{CompensationModule, I8Weight, Storage, StoredWeight};
use crate::error::{FormatError, NbcError, Result};
use crate::numerics::Tensor;
use crate::transform::TransformKind;

pub const TENSOR_MAGIC: [u8; 4] = *b"NBCT";
pub const BUNDLE_MAGIC: [u8; 4] = *b"NBCB";
pub const VERSION: u8 = 1;

const TENSOR_HEADER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    F16 = 2,
    I8 = 3,
}

impl Dtype {
    pub fn from_byte(b: u8) -> std::result::Result<Self, FormatError> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::F16),
            3 => Ok(Dtype::I8),
            other => Err(FormatError::BadDtype(other)),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::F16 => 2,
            Dtype::I8 => 1,
        }
    }
}

/// Encodes `t` at `dtype`. Every value must be exactly representable, so
/// that decoding gives back the same tensor bit for bit.
pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(TENSOR_HEADER + 8 * t.rank() + t.len() * dtype.size());
    write_tensor_record(&mut out, t.dims(), dtype, t.data())?;
    Ok(out)
}

fn write_tensor_record(out: &mut Vec<u8>, dims: &[usize], dtype: Dtype, data: &[f64]) -> Result<()> {
    if dims.len() > u8::MAX as usize {
        return Err(FormatError::BadExtents(format!("rank {} too large", dims.len())).into());
    }
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&[VERSION, dtype as u8, dims.len() as u8, 0]);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (i, &v) in data.iter().enumerate() {
        let inexact = || NbcError::InvalidParams(format!("value {v} at index {i} not representable as {dtype:?}"));
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => {
                let w = v as f32;
                if w as f64 != v {
                    return Err(inexact());
                }
                out.extend_from_slice(&w.to_le_bytes());
            }
            Dtype::F16 => {
                let w = f16::from_f64(v);
                if w.to_f64() != v {
                    return Err(inexact());
                }
                out.extend_from_slice(&w.to_le_bytes());
            }
            Dtype::I8 => {
                if v.fract() != 0.0 || !(-128.0..=127.0).contains(&v) {
                    return Err(inexact());
                }
                out.push(v as i8 as u8);
            }
        }
    }
    Ok(())
}

/// Decodes a tensor record that must fill `bytes` exactly.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    let (t, dtype, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - used).into());
    }
    Ok((t, dtype))
}

/// Decodes the tensor record at the start of `bytes`, returning how many
/// bytes it occupied.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, Dtype, usize)> {
    need(bytes, TENSOR_HEADER)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes[4] != VERSION {
        return Err(FormatError::BadVersion(bytes[4]).into());
    }
    let dtype = Dtype::from_byte(bytes[5])?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(FormatError::BadExtents("rank 0".into()).into());
    }
    let ext_end = TENSOR_HEADER + 8 * ndim;
    need(bytes, ext_end)?;
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let off = TENSOR_HEADER + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| FormatError::BadExtents(format!("extent {d}")))?;
        if d == 0 {
            return Err(FormatError::BadExtents("zero extent".into()).into());
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| FormatError::BadExtents("element count overflows".into()))?;
        dims.push(d);
    }
    let payload = count
        .checked_mul(dtype.size())
        .ok_or_else(|| FormatError::BadExtents("payload size overflows".into()))?;
    let end = ext_end
        .checked_add(payload)
        .ok_or_else(|| FormatError::BadExtents("payload size overflows".into()))?;
    need(bytes, end)?;
    let body = &bytes[ext_end..end];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F16 => body
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f64())
            .collect(),
        Dtype::I8 => body.iter().map(|&b| b as i8 as f64).collect(),
    };
    Ok((Tensor::new(dims, data)?, dtype, end))
}

fn need(bytes: &[u8], expected: usize) -> std::result::Result<(), FormatError> {
    if bytes.len() < expected {
        Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| NbcError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| NbcError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| NbcError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| NbcError::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    atomic_write(path, &encode_tensor(t, dtype)?)
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, Dtype)> {
    let bytes = std::fs::read(path).map_err(|e| NbcError::io(path, e))?;
    decode_tensor(&bytes)
}

fn kind_byte(kind: TransformKind) -> u8 {
    match kind {
        TransformKind::Identity => 0,
        TransformKind::Blt(_) => 1,
        TransformKind::Asinh => 2,
        TransformKind::TanhExperimental => 3,
        TransformKind::SigmoidExperimental => 4,
    }
}

fn kind_from(byte: u8, n_exp: f64) -> Result<TransformKind> {
    Ok(match byte {
        0 => TransformKind::Identity,
        1 => {
            if !n_exp.is_finite() {
                return Err(FormatError::BadExtents(format!("BLT exponent {n_exp}")).into());
            }
            TransformKind::blt(n_exp)
        }
        2 => TransformKind::Asinh,
        3 => TransformKind::TanhExperimental,
        4 => TransformKind::SigmoidExperimental,
        other => {
            return Err(FormatError::BadTag {
                what: "kind",
                value: other,
            }
            .into())
        }
    })
}

fn bias_dtype(storage: Storage) -> Dtype {
    match storage {
        Storage::F32 => Dtype::F32,
        Storage::F64 => Dtype::F64,
        Storage::F16 | Storage::I8PerChannel => Dtype::F16,
    }
}

pub fn encode_bundle(modules: &[CompensationModule]) -> Result<Vec<u8>> {
    let count = u16::try_from(modules.len())
        .map_err(|_| NbcError::InvalidParams(format!("{} blocks exceed the bundle limit", modules.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for (i, m) in modules.iter().enumerate() {
        out.extend_from_slice(&(i as u16).to_le_bytes());
        out.push(kind_byte(m.kind()));
        out.extend_from_slice(&m.kind().n_exp().unwrap_or(0.0).to_le_bytes());
        out.push(m.storage() as u8);
        match m.stored_weight() {
            StoredWeight::Dense(w) => {
                let dtype = Dtype::from_byte(m.storage() as u8).expect("storage codes are dtypes");
                write_tensor_record(&mut out, w.dims(), dtype, w.data())?;
                write_tensor_record(&mut out, &[m.d_out()], bias_dtype(m.storage()), m.bias().data())?;
            }
            StoredWeight::I8(q) => {
                let codes: Vec<f64> = q.codes().iter().map(|&c| c as f64).collect();
                let (r, c) = q.shape();
                write_tensor_record(&mut out, &[r, c], Dtype::I8, &codes)?;
                write_tensor_record(&mut out, &[m.d_out()], Dtype::F16, m.bias().data())?;
                write_tensor_record(&mut out, &[r], Dtype::F32, q.scales())?;
            }
        }
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Vec<CompensationModule>> {
    need(bytes, 7)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != BUNDLE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: BUNDLE_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes[4] != VERSION {
        return Err(FormatError::BadVersion(bytes[4]).into());
    }
    let count = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let mut pos = 7;
    let mut modules = Vec::with_capacity(count);
    for expected_index in 0..count {
        let head = &bytes[pos..];
        need(head, 12).map_err(|_| FormatError::Truncated {
            expected: pos + 12,
            actual: bytes.len(),
        })?;
        let index = u16::from_le_bytes([head[0], head[1]]) as usize;
        if index != expected_index {
            return Err(FormatError::BadExtents(format!("block index {index}, expected {expected_index}")).into());
        }
        let n_exp = f64::from_le_bytes(head[3..11].try_into().expect("8 bytes"));
        let kind = kind_from(head[2], n_exp)?;
        let storage = Storage::from_byte(head[11]).ok_or(FormatError::BadTag {
            what: "storage",
            value: head[11],
        })?;
        pos += 12;

        let mut next = |what_dtype: Dtype| -> Result<Tensor> {
            let (t, dtype, used) = decode_tensor_prefix(&bytes[pos..]).map_err(|e| shift_truncation(e, pos))?;
            if dtype != what_dtype {
                return Err(FormatError::BadTag {
                    what: "tensor dtype",
                    value: dtype as u8,
                }
                .into());
            }
            pos += used;
            Ok(t)
        };
        let module = match storage {
            Storage::I8PerChannel => {
                let codes = next(Dtype::I8)?;
                let bias = next(Dtype::F16)?;
                let scales = next(Dtype::F32)?;
                let (r, c) = codes.shape2()?;
                let q = I8Weight::new(
                    r,
                    c,
                    codes.data().iter().map(|&v| v as i8).collect(),
                    scales.into_data(),
                )?;
                CompensationModule::from_stored(kind, StoredWeight::I8(q), bias, storage)?
            }
            dense => {
                let w = next(Dtype::from_byte(dense as u8).expect("storage codes are dtypes"))?;
                w.shape2()?;
                let bias = next(bias_dtype(dense))?;
                CompensationModule::from_stored(kind, StoredWeight::Dense(w), bias, storage)?
            }
        };
        modules.push(module);
    }
    if pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - pos).into());
    }
    Ok(modules)
}

/// Truncation offsets inside an embedded record are reported relative to
/// the whole bundle.
fn shift_truncation(e: NbcError, offset: usize) -> NbcError {
    match e {
        NbcError::Format(FormatError::Truncated { expected, actual }) => FormatError::Truncated {
            expected: expected + offset,
            actual: actual + offset,
        }
        .into(),
        other => other,
    }
}

pub fn write_bundle(path: &Path, modules: &[CompensationModule]) -> Result<()> {
    atomic_write(path, &encode_bundle(modules)?)
}

pub fn read_bundle(path: &Path) -> Result<Vec<CompensationModule>> {
    let bytes = std::fs::read(path).map_err(|e| NbcError::io(path, e))?;
    decode_bundle(&bytes)
}
