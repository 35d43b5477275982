//! Blockwise quantization-error compensation.
//!
//! A module predicts the residual `y - y_q` of one block from the block's
//! quantized-path input `x_q`:
//!
//! * linear: `y_q + W·x_q + b`
//! * nonlinear (NBC): `y_q + f⁻¹(W·f(x_q) + b)`
//!
//! Both are fitted in closed form by least squares, the nonlinear one on
//! `(f(x_q), f(y - y_q))`.

use crate::error::{NbcError, Result};
use crate::numerics::{encode_f16_roundtrip, encode_f32_roundtrip, matmul_transposed, solve_least_squares, Tensor};
use crate::transform::{apply_kind_forward, TransformKind};

/// Inputs and outputs of one block over `T` calibration rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    x_q: Tensor,
    y: Tensor,
    y_q: Tensor,
}

impl CalibrationRecord {
    pub fn new(x_q: Tensor, y: Tensor, y_q: Tensor) -> Result<Self> {
        let (t, _) = x_q.shape2()?;
        let (ty, dy) = y.shape2()?;
        let (tq, dq) = y_q.shape2()?;
        if t != ty || t != tq || dy != dq {
            return Err(NbcError::dims(
                "CalibrationRecord",
                format!("x_q {:?}, y {:?}, y_q {:?}", x_q.dims(), y.dims(), y_q.dims()),
            ));
        }
        Ok(CalibrationRecord { x_q, y, y_q })
    }

    pub fn x_q(&self) -> &Tensor {
        &self.x_q
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn y_q(&self) -> &Tensor {
        &self.y_q
    }

    pub fn rows(&self) -> usize {
        self.x_q.rows()
    }

    pub fn d_in(&self) -> usize {
        self.x_q.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.y.dims()[1]
    }

    /// `y - y_q`
    pub fn residual(&self) -> Tensor {
        self.y.sub(&self.y_q).expect("record dims checked at construction")
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        CalibrationRecord::new(
            self.x_q.select_rows(idx)?,
            self.y.select_rows(idx)?,
            self.y_q.select_rows(idx)?,
        )
    }

    fn check_fittable(&self) -> Result<()> {
        let needed = self.d_in() + 1;
        if self.rows() < needed {
            return Err(NbcError::InsufficientRows {
                needed,
                got: self.rows(),
            });
        }
        Ok(())
    }
}

/// Precision the compensation parameters are held in.
///
/// The discriminants double as the dtype byte of the stored weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Storage {
    F32 = 0,
    F64 = 1,
    F16 = 2,
    /// Symmetric per-output-row int8 weight; bias kept in f16.
    I8PerChannel = 3,
}

impl Storage {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Storage::F32),
            1 => Some(Storage::F64),
            2 => Some(Storage::F16),
            3 => Some(Storage::I8PerChannel),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Storage::F32 => "f32",
            Storage::F64 => "f64",
            Storage::F16 => "f16",
            Storage::I8PerChannel => "i8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Storage::F32),
            "f64" => Some(Storage::F64),
            "f16" => Some(Storage::F16),
            "i8" | "int8" => Some(Storage::I8PerChannel),
            _ => None,
        }
    }
}

/// Symmetric int8 codes with one scale per output row.
#[derive(Debug, Clone, PartialEq)]
pub struct I8Weight {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f64>,
}

impl I8Weight {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, scales: Vec<f64>) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != rows {
            return Err(NbcError::dims(
                "I8Weight",
                format!(
                    "{rows}x{cols} needs {} codes and {rows} scales, got {} and {}",
                    rows * cols,
                    codes.len(),
                    scales.len()
                ),
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(NbcError::InvalidParams(format!("row scale {s}")));
        }
        Ok(I8Weight {
            rows,
            cols,
            codes,
            scales,
        })
    }

    /// Quantizes each row with `scale = max|row| / 127`, the scale itself
    /// rounded to f32 so it survives serialization unchanged.
    pub fn quantize(w: &Tensor) -> Result<Self> {
        let (rows, cols) = w.shape2()?;
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = w.row(r);
            let amax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = (amax / 127.0) as f32 as f64;
            if scale == 0.0 {
                codes.extend(std::iter::repeat_n(0i8, cols));
            } else {
                codes.extend(row.iter().map(|&v| (v / scale).round().clamp(-128.0, 127.0) as i8));
            }
            scales.push(scale);
        }
        Ok(I8Weight {
            rows,
            cols,
            codes,
            scales,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * self.scales[i / self.cols])
            .collect();
        Tensor::matrix(self.rows, self.cols, data).expect("dims checked")
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredWeight {
    Dense(Tensor),
    I8(I8Weight),
}

impl StoredWeight {
    pub fn to_dense(&self) -> Tensor {
        match self {
            StoredWeight::Dense(t) => t.clone(),
            StoredWeight::I8(q) => q.dequantize(),
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            StoredWeight::Dense(t) => t.shape2().expect("weights are rank 2"),
            StoredWeight::I8(q) => q.shape(),
        }
    }
}

/// Solver diagnostics kept alongside a fitted module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitInfo {
    pub ridge_used: f64,
    /// RMS residual in the space the regression was solved in.
    pub residual_rms: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationModule {
    kind: TransformKind,
    weight: StoredWeight,
    bias: Tensor,
    storage: Storage,
    fit: Option<FitInfo>,
}

impl CompensationModule {
    /// Module from explicit parameters held in working precision.
    pub fn new(kind: TransformKind, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d_out, _) = weight.shape2()?;
        if bias.dims() != [d_out] {
            return Err(NbcError::dims(
                "CompensationModule::new",
                format!("weight {:?} with bias {:?}", weight.dims(), bias.dims()),
            ));
        }
        Ok(CompensationModule {
            kind,
            weight: StoredWeight::Dense(weight),
            bias,
            storage: Storage::F64,
            fit: None,
        })
    }

    /// Reassembles a module read back from storage.
    pub fn from_stored(kind: TransformKind, weight: StoredWeight, bias: Tensor, storage: Storage) -> Result<Self> {
        let (d_out, _) = weight.shape();
        if bias.dims() != [d_out] {
            return Err(NbcError::dims(
                "CompensationModule::from_stored",
                format!("{d_out} output rows with bias {:?}", bias.dims()),
            ));
        }
        if matches!(weight, StoredWeight::I8(_)) != (storage == Storage::I8PerChannel) {
            return Err(NbcError::InvalidParams(format!(
                "storage {} does not match weight representation",
                storage.name()
            )));
        }
        Ok(CompensationModule {
            kind,
            weight,
            bias,
            storage,
            fit: None,
        })
    }

    /// All-zero module: applying it returns `y_q` unchanged.
    pub fn zero(kind: TransformKind, d_in: usize, d_out: usize) -> Self {
        CompensationModule {
            kind,
            weight: StoredWeight::Dense(Tensor::zeros(&[d_out, d_in])),
            bias: Tensor::zeros(&[d_out]),
            storage: Storage::F64,
            fit: None,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn stored_weight(&self) -> &StoredWeight {
        &self.weight
    }

    /// Effective (dequantized) weight.
    pub fn weight(&self) -> Tensor {
        self.weight.to_dense()
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn fit_info(&self) -> Option<FitInfo> {
        self.fit
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape().1
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape().0
    }

    /// The additive correction `f⁻¹(W·f(x_q) + b)` for each row of `x_q`.
    pub fn correction(&self, x_q: &Tensor) -> Result<Tensor> {
        let (_, d_in) = x_q.shape2()?;
        if d_in != self.d_in() {
            return Err(NbcError::dims(
                "apply",
                format!("module expects {} inputs, got {d_in}", self.d_in()),
            ));
        }
        let w = self.weight();
        let fx = apply_kind_forward(x_q, self.kind);
        let pred = matmul_transposed(&fx, &w)?.add_row_vector(self.bias.data())?;
        Ok(match self.kind {
            TransformKind::Identity => pred,
            kind => pred.map(|v| kind.inverse_clamped(v)),
        })
    }

    /// `y_q + f⁻¹(W·f(x_q) + b)`.
    pub fn apply(&self, x_q: &Tensor, y_q: &Tensor) -> Result<Tensor> {
        let (t, d_out) = y_q.shape2()?;
        if d_out != self.d_out() || t != x_q.rows() {
            return Err(NbcError::dims(
                "apply",
                format!(
                    "module {}x{}, x_q {:?}, y_q {:?}",
                    self.d_out(),
                    self.d_in(),
                    x_q.dims(),
                    y_q.dims()
                ),
            ));
        }
        y_q.add(&self.correction(x_q)?)
    }
}

/// Least-squares fit of `y - y_q ≈ W·x_q + b`.
pub fn fit_linear(rec: &CalibrationRecord, ridge: f64) -> Result<CompensationModule> {
    fit_in_space(rec, TransformKind::Identity, ridge)
}

/// Least-squares fit of `f(y - y_q) ≈ W·f(x_q) + b`.
pub fn fit_nbc(rec: &CalibrationRecord, kind: TransformKind, ridge: f64) -> Result<CompensationModule> {
    fit_in_space(rec, kind, ridge)
}

fn fit_in_space(rec: &CalibrationRecord, kind: TransformKind, ridge: f64) -> Result<CompensationModule> {
    rec.check_fittable()?;
    let design = apply_kind_forward(rec.x_q(), kind);
    let targets = apply_kind_forward(&rec.residual(), kind);
    if kind.is_experimental() {
        if let Some(&v) = targets.data().iter().find(|v| !kind.in_invertible_range(**v)) {
            return Err(NbcError::Domain {
                kind: kind.name(),
                value: v,
            });
        }
    }
    let sol = solve_least_squares(&design, &targets, ridge)?;
    Ok(CompensationModule {
        kind,
        weight: StoredWeight::Dense(sol.weight),
        bias: sol.bias,
        storage: Storage::F64,
        fit: Some(FitInfo {
            ridge_used: sol.ridge_used,
            residual_rms: sol.residual_rms,
            rows: rec.rows(),
        }),
    })
}

/// Re-encodes the parameters at the requested precision. Storage is applied
/// to the effective weights, so converting an int8 module back to f16 works.
pub fn store_params(module: &CompensationModule, precision: Storage) -> Result<CompensationModule> {
    let w = module.weight();
    let (weight, bias) = match precision {
        Storage::F64 => (StoredWeight::Dense(w), module.bias.clone()),
        Storage::F32 => (
            StoredWeight::Dense(encode_f32_roundtrip(&w)),
            encode_f32_roundtrip(&module.bias),
        ),
        Storage::F16 => (
            StoredWeight::Dense(encode_f16_roundtrip(&w)?),
            encode_f16_roundtrip(&module.bias)?,
        ),
        Storage::I8PerChannel => (
            StoredWeight::I8(I8Weight::quantize(&w)?),
            encode_f16_roundtrip(&module.bias)?,
        ),
    };
    Ok(CompensationModule {
        kind: module.kind,
        weight,
        bias,
        storage: precision,
        fit: module.fit,
    })
}
