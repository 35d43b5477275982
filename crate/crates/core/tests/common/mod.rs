//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerics.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-amp..amp)).collect()
}

/// Textbook triple loop, `a` is `m × k`, `b` is `k × n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Least squares with an intercept through the pseudo-inverse of the
/// augmented design, built from a Householder QR as `A⁺ = R⁻¹Qᵀ` (valid for
/// full column rank). Returns `(W, b)` with `W` stored `q × p` row-major.
/// nalgebra's SVD stops at a loose tolerance and is off by up to 1e-8 here,
/// so it is not used.
pub fn pinv_lstsq(x: &[f64], y: &[f64], rows: usize, p: usize, q: usize) -> (Vec<f64>, Vec<f64>) {
    let a = DMatrix::from_fn(rows, p + 1, |i, j| if j < p { x[i * p + j] } else { 1.0 });
    let t = DMatrix::from_fn(rows, q, |i, j| y[i * q + j]);
    let qr = a.qr();
    let pinv = qr
        .r()
        .solve_upper_triangular(&qr.q().transpose())
        .expect("full column rank");
    let theta = pinv * t;
    let mut w = vec![0.0; q * p];
    for o in 0..q {
        for j in 0..p {
            w[o * p + j] = theta[(j, o)];
        }
    }
    let b = (0..q).map(|o| theta[(p, o)]).collect();
    (w, b)
}

/// The bipolar log map written directly from its piecewise definition.
pub fn blt_ref(x: f64, n: f64) -> f64 {
    let t = (-n).exp2();
    if x.abs() <= t {
        x * n.exp2()
    } else {
        x.signum() * (x.abs().log2() + n + 1.0)
    }
}

pub fn blt_ref_inv(v: f64, n: f64) -> f64 {
    if v.abs() <= 1.0 {
        v / n.exp2()
    } else {
        v.signum() * (v.abs() - n - 1.0).exp2()
    }
}

/// Round-to-nearest-even binary16 quantization derived from the bit layout
/// (10 stored mantissa bits, minimum normal exponent −14). `None` on overflow.
pub fn f16_round(x: f64) -> Option<f64> {
    if x == 0.0 || x.is_nan() {
        return Some(x);
    }
    let a = x.abs();
    let ulp = if a >= 2f64.powi(-14) {
        let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        2f64.powi(e - 10)
    } else {
        2f64.powi(-24)
    };
    let q = a / ulp;
    let mut r = q.floor();
    let frac = q - r;
    if frac > 0.5 || (frac == 0.5 && r % 2.0 == 1.0) {
        r += 1.0;
    }
    let v = r * ulp;
    if v > 65504.0 {
        return None;
    }
    Some(v.copysign(x))
}

/// Minimizes `Σ (r_i − w·x_i)²` by scanning a uniform grid for the sign
/// change of the pointwise derivative and zooming into that cell. Comparing
/// loss values directly stalls near sqrt(eps) because the loss is flat at
/// the minimum; the derivative crosses zero transversally.
pub fn brute_force_slope(x: &[f64], r: &[f64]) -> f64 {
    let grad = |w: f64| -> f64 { x.iter().zip(r).map(|(a, b)| a * (w * a - b)).sum() };
    let bound = r.iter().map(|v| v.abs()).fold(0.0, f64::max)
        / x.iter()
            .map(|v| v.abs())
            .filter(|v| *v > 0.0)
            .fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
    let pts = 64;
    for _ in 0..400 {
        let h = (hi - lo) / pts as f64;
        let cell = (0..pts)
            .find(|&i| grad(lo + h * (i + 1) as f64) >= 0.0)
            .unwrap_or(pts - 1);
        let (nlo, nhi) = (lo + h * cell as f64, lo + h * (cell + 1) as f64);
        if !(nhi - nlo < hi - lo) || nhi <= nlo {
            break;
        }
        lo = nlo;
        hi = nhi;
    }
    0.5 * (lo + hi)
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
