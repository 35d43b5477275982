//! Uniform affine quantization.
//!
//! `code = clip(round(x / s) + z, 0, 2^b - 1)` and `x̂ = s · (code - z)`,
//! with `s` and `z` calibrated from the min/max of a tensor. Rounding is
//! half away from zero throughout. Activations use one parameter set per
//! tensor, weights one per output row.

use crate::error::{NbcError, Result};
use crate::numerics::Tensor;

/// Lower bound on the scale so a constant calibration tensor stays finite.
pub const SCALE_FLOOR: f64 = 1e-12;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    bits: u32,
    scale: f64,
    zero_point: i64,
}

impl QuantParams {
    pub fn new(bits: u32, scale: f64, zero_point: i64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(NbcError::InvalidParams(format!("scale {scale} must be finite and > 0")));
        }
        let qmax = qmax(bits);
        if zero_point < 0 || zero_point > qmax {
            return Err(NbcError::InvalidParams(format!(
                "zero point {zero_point} outside [0, {qmax}]"
            )));
        }
        Ok(QuantParams {
            bits,
            scale,
            zero_point,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    pub fn qmax(&self) -> i64 {
        qmax(self.bits)
    }

    pub fn quantize_value(&self, x: f64) -> u8 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        // NaN maps to 0 under the clamp-then-cast below; inputs are finite by contract.
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    pub fn dequantize_code(&self, code: u8) -> f64 {
        self.scale * (code as i64 - self.zero_point) as f64
    }

    /// Quantize then dequantize a single value.
    pub fn fake_quantize(&self, x: f64) -> f64 {
        self.dequantize_code(self.quantize_value(x))
    }
}

fn qmax(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(NbcError::InvalidBits(bits))
    }
}

/// Min-max calibration over the whole tensor.
pub fn calibrate_params(x: &Tensor, bits: u32) -> Result<QuantParams> {
    calibrate_slice(x.data(), bits)
}

fn calibrate_slice(x: &[f64], bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(NbcError::Empty("calibrate_params"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x {
        if !v.is_finite() {
            return Err(NbcError::InvalidParams(format!("non-finite calibration value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let qmax = qmax(bits);
    let scale = ((hi - lo) / qmax as f64).max(SCALE_FLOOR);
    let zero_point = (-lo / scale).round().clamp(0.0, qmax as f64) as i64;
    QuantParams::new(bits, scale, zero_point)
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantScheme {
    PerTensor(QuantParams),
    /// One entry per leading-axis row (output channel).
    PerChannel(Vec<QuantParams>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    codes: Vec<u8>,
    scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    /// Parameters governing the flat element `i`.
    fn params_at(&self, i: usize) -> &QuantParams {
        match &self.scheme {
            QuantScheme::PerTensor(p) => p,
            QuantScheme::PerChannel(ps) => {
                let w: usize = self.dims[1..].iter().product();
                &ps[i / w]
            }
        }
    }
}

pub fn quantize(x: &Tensor, p: QuantParams) -> QuantizedTensor {
    QuantizedTensor {
        dims: x.dims().to_vec(),
        codes: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
        scheme: QuantScheme::PerTensor(p),
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| q.params_at(i).dequantize_code(c))
        .collect();
    Tensor::new(q.dims.clone(), data).expect("quantized tensor dims are valid")
}

/// Row-wise min-max quantization of a `d_out × d_in` weight.
pub fn quantize_per_channel(w: &Tensor, bits: u32) -> Result<QuantizedTensor> {
    let (rows, _) = w.shape2()?;
    let mut params = Vec::with_capacity(rows);
    let mut codes = Vec::with_capacity(w.len());
    for r in 0..rows {
        let row = w.row(r);
        let p = calibrate_slice(row, bits)?;
        codes.extend(row.iter().map(|&v| p.quantize_value(v)));
        params.push(p);
    }
    Ok(QuantizedTensor {
        dims: w.dims().to_vec(),
        codes,
        scheme: QuantScheme::PerChannel(params),
    })
}

/// Quantize and immediately dequantize with fixed parameters.
pub fn fake_quantize(x: &Tensor, p: QuantParams) -> Tensor {
    x.map(|v| p.fake_quantize(v))
}
