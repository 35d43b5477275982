//! Bipolar logarithmic transformation (BLT) and the alternate
//! nonlinearities used for comparison.
//!
//! ```text
//! f(x) =  log2(x) + N + 1      x >  2^-N
//!         2^N · x              |x| <= 2^-N
//!        -log2(-x) - N - 1     x < -2^-N
//! ```
//!
//! `f` maps `[-2^-N, 2^-N]` onto `[-1, 1]` and the two exteriors onto
//! `(1, ∞)` and `(-∞, -1)`; it is continuous but has a kink at both seams.
//! Negative inputs are handled by mirroring the positive branch, so
//! `f(-x) == -f(x)` holds bit for bit.

use std::fmt;

use crate::error::{NbcError, Result};
use crate::numerics::Tensor;

/// Search range admitted for the threshold exponent.
pub const N_RANGE: (f64, f64) = (-10.0, 10.0);

/// Distance from the open-range boundary that tanh/sigmoid inverses clamp to.
pub const SATURATION_MARGIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BltTransform {
    n_exp: f64,
    scale: f64,
}

impl BltTransform {
    pub fn new(n_exp: f64) -> Self {
        assert!(n_exp.is_finite(), "BLT exponent must be finite, got {n_exp}");
        BltTransform {
            n_exp,
            scale: n_exp.exp2(),
        }
    }

    pub fn n_exp(&self) -> f64 {
        self.n_exp
    }

    /// Half-width `2^-N` of the central linear region.
    pub fn threshold(&self) -> f64 {
        (-self.n_exp).exp2()
    }

    pub fn forward(&self, x: f64) -> f64 {
        if x < 0.0 {
            -self.forward_nonneg(-x)
        } else {
            self.forward_nonneg(x)
        }
    }

    fn forward_nonneg(&self, x: f64) -> f64 {
        let scaled = x * self.scale;
        if scaled <= 1.0 {
            return scaled;
        }
        // log2(x·2^N) + 1 == log2(x) + N + 1, but stays accurate next to the seam.
        if scaled.is_finite() {
            scaled.log2() + 1.0
        } else {
            x.log2() + self.n_exp + 1.0
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        if v < 0.0 {
            -self.inverse_nonneg(-v)
        } else {
            self.inverse_nonneg(v)
        }
    }

    fn inverse_nonneg(&self, v: f64) -> f64 {
        if v <= 1.0 {
            v / self.scale
        } else {
            (v - self.n_exp - 1.0).exp2()
        }
    }

    pub fn forward_tensor(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.forward(v))
    }

    pub fn inverse_tensor(&self, v: &Tensor) -> Tensor {
        v.map(|u| self.inverse(u))
    }
}

/// Nonlinearity applied on both sides of the compensation regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformKind {
    Blt(BltTransform),
    Asinh,
    TanhExperimental,
    SigmoidExperimental,
    /// Only meaningful for checking equivalence with plain linear compensation.
    Identity,
}

impl TransformKind {
    pub fn blt(n_exp: f64) -> Self {
        TransformKind::Blt(BltTransform::new(n_exp))
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Blt(_) => "blt",
            TransformKind::Asinh => "asinh",
            TransformKind::TanhExperimental => "tanh",
            TransformKind::SigmoidExperimental => "sigmoid",
            TransformKind::Identity => "identity",
        }
    }

    pub fn n_exp(&self) -> Option<f64> {
        match self {
            TransformKind::Blt(t) => Some(t.n_exp()),
            _ => None,
        }
    }

    pub fn is_experimental(&self) -> bool {
        matches!(
            self,
            TransformKind::TanhExperimental | TransformKind::SigmoidExperimental
        )
    }

    /// Open range of the forward map, when bounded.
    fn open_range(&self) -> Option<(f64, f64)> {
        match self {
            TransformKind::TanhExperimental => Some((-1.0, 1.0)),
            TransformKind::SigmoidExperimental => Some((0.0, 1.0)),
            _ => None,
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        match self {
            TransformKind::Blt(t) => t.forward(x),
            TransformKind::Asinh => x.asinh(),
            TransformKind::TanhExperimental => x.tanh(),
            TransformKind::SigmoidExperimental => 1.0 / (1.0 + (-x).exp()),
            TransformKind::Identity => x,
        }
    }

    /// Strict inverse. Bounded kinds accept values inside the open range and
    /// clamp those within [`SATURATION_MARGIN`] of a boundary.
    pub fn inverse(&self, v: f64) -> Result<f64> {
        match self {
            TransformKind::Blt(t) => Ok(t.inverse(v)),
            TransformKind::Asinh => Ok(v.sinh()),
            TransformKind::Identity => Ok(v),
            TransformKind::TanhExperimental | TransformKind::SigmoidExperimental => {
                let (lo, hi) = self.open_range().unwrap();
                if !(v > lo && v < hi) {
                    return Err(NbcError::Domain {
                        kind: self.name(),
                        value: v,
                    });
                }
                Ok(self.bounded_inverse(v))
            }
        }
    }

    /// Inverse that first clamps into the open range; total for every kind.
    pub fn inverse_clamped(&self, v: f64) -> f64 {
        match self.open_range() {
            None => self.inverse(v).expect("unbounded kinds have total inverses"),
            Some(_) => self.bounded_inverse(v),
        }
    }

    fn bounded_inverse(&self, v: f64) -> f64 {
        let (lo, hi) = self.open_range().expect("bounded kind");
        let v = v.clamp(lo + SATURATION_MARGIN, hi - SATURATION_MARGIN);
        match self {
            TransformKind::TanhExperimental => v.atanh(),
            TransformKind::SigmoidExperimental => (v / (1.0 - v)).ln(),
            _ => unreachable!(),
        }
    }

    /// True when `v` is a value the forward map can actually produce with an
    /// invertible result (strictly inside the open range for bounded kinds).
    pub fn in_invertible_range(&self, v: f64) -> bool {
        match self.open_range() {
            None => v.is_finite(),
            Some((lo, hi)) => v > lo && v < hi,
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Blt(t) => write!(f, "blt(N={})", t.n_exp()),
            other => f.write_str(other.name()),
        }
    }
}

pub fn apply_kind_forward(x: &Tensor, kind: TransformKind) -> Tensor {
    match kind {
        TransformKind::Identity => x.clone(),
        _ => x.map(|v| kind.forward(v)),
    }
}

pub fn apply_kind_inverse(v: &Tensor, kind: TransformKind) -> Result<Tensor> {
    match kind {
        TransformKind::Identity => Ok(v.clone()),
        _ => v.try_map(|u| kind.inverse(u)),
    }
}
