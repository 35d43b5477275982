//! Dense row-major tensors and the normal-equation least-squares solver.
//!
//! Everything is computed in `f64`; narrower types only appear when
//! parameters are written to disk or pushed through a storage round trip.

use std::fmt;

use half::f16;

use crate::error::{NbcError, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} more)", self.data.len() - SHOWN)?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(NbcError::dims("Tensor::new", format!("zero extent in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NbcError::dims(
                "Tensor::new",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != c {
                return Err(NbcError::dims(
                    "Tensor::from_rows",
                    format!("row {i} has {} values, expected {c}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NbcError::dims(
                "shape2",
                format!("expected rank 2, got dims {:?}", self.dims),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Number of values per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn try_map<E>(&self, f: impl Fn(f64) -> Result<f64, E>) -> Result<Tensor, E> {
        let data = self.data.iter().map(|&v| f(v)).collect::<Result<Vec<_>, E>>()?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(NbcError::dims(
                "zip_map",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Gathers leading-axis rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(NbcError::Empty("select_rows"));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.rows() {
                return Err(NbcError::dims(
                    "select_rows",
                    format!("row {i} out of range for {} rows", self.rows()),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Tensor::new(dims, data)
    }

    /// Column `j` of a rank-2 tensor.
    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        let (r, c) = self.shape2()?;
        if j >= c {
            return Err(NbcError::dims("column", format!("column {j} of {c}")));
        }
        Ok((0..r).map(|i| self.data[i * c + j]).collect())
    }

    /// Adds `v` to every row of a rank-2 tensor.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Tensor> {
        let (r, c) = self.shape2()?;
        if v.len() != c {
            return Err(NbcError::dims(
                "add_row_vector",
                format!("vector of {} for {c} columns", v.len()),
            ));
        }
        let mut data = self.data.clone();
        for i in 0..r {
            for (x, b) in data[i * c..(i + 1) * c].iter_mut().zip(v) {
                *x += b;
            }
        }
        Tensor::matrix(r, c, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(NbcError::dims("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ`; used for `x · Wᵀ`.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape2()?;
    let (n, k2) = b.shape2()?;
    if k != k2 {
        return Err(NbcError::dims("matmul_transposed", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    // The row-axpy loop in `matmul` vectorizes; a dot-product loop does not.
    matmul(a, &b.transpose()?)
}

/// Fitted affine map `targets ≈ design · weightᵀ + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstsqSolution {
    /// `q × p`
    pub weight: Tensor,
    /// length `q`
    pub bias: Tensor,
    pub residual_rms: f64,
    /// Ridge actually applied, after any automatic fallback.
    pub ridge_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstsqOptions {
    pub ridge: f64,
    /// Retry with a tiny trace-scaled ridge when the factorization fails.
    pub fallback: bool,
}

impl Default for LstsqOptions {
    fn default() -> Self {
        LstsqOptions {
            ridge: 0.0,
            fallback: true,
        }
    }
}

/// Relative fallback ridge, multiplied by `trace(XᵀX) / p`.
pub const FALLBACK_RIDGE_FACTOR: f64 = 1e-10;

// A Cholesky pivot at or below this fraction of the largest Gram diagonal
// entry counts as a factorization failure.
const PIVOT_TOLERANCE: f64 = 1e-13;

/// Least squares with bias via the normal equations of the design
/// augmented by a constant column. The ridge penalty covers the weights
/// only, never the bias.
pub fn solve_least_squares(design: &Tensor, targets: &Tensor, ridge: f64) -> Result<LstsqSolution> {
    solve_least_squares_with(design, targets, LstsqOptions { ridge, fallback: true })
}

pub fn solve_least_squares_with(design: &Tensor, targets: &Tensor, opts: LstsqOptions) -> Result<LstsqSolution> {
    let (n, p) = design.shape2()?;
    let (n2, q) = targets.shape2()?;
    if n != n2 {
        return Err(NbcError::dims(
            "solve_least_squares",
            format!("design has {n} rows, targets {n2}"),
        ));
    }
    if !(opts.ridge >= 0.0 && opts.ridge.is_finite()) {
        return Err(NbcError::InvalidParams(format!("ridge {} must be >= 0", opts.ridge)));
    }
    if n < p + 1 {
        return Err(NbcError::InsufficientRows { needed: p + 1, got: n });
    }

    let pa = p + 1;
    let x = design.data();
    let y = targets.data();

    // Gram of the augmented design and its product with the targets.
    let mut gram = vec![0.0; pa * pa];
    let mut rhs = vec![0.0; pa * q];
    for r in 0..n {
        let xr = &x[r * p..(r + 1) * p];
        let yr = &y[r * q..(r + 1) * q];
        for i in 0..pa {
            let xi = if i < p { xr[i] } else { 1.0 };
            if xi == 0.0 {
                continue;
            }
            for j in i..pa {
                let xj = if j < p { xr[j] } else { 1.0 };
                gram[i * pa + j] += xi * xj;
            }
            for (k, &yk) in yr.iter().enumerate() {
                rhs[i * q + k] += xi * yk;
            }
        }
    }
    for i in 0..pa {
        for j in 0..i {
            gram[i * pa + j] = gram[j * pa + i];
        }
    }

    let mut ridge = opts.ridge;
    let factor = match cholesky_with_ridge(&gram, pa, p, ridge) {
        Some(l) => l,
        None if opts.fallback => {
            let trace: f64 = (0..p).map(|i| gram[i * pa + i]).sum();
            let avg = if p > 0 { trace / p as f64 } else { 0.0 };
            ridge = opts.ridge + FALLBACK_RIDGE_FACTOR * avg.max(1.0);
            log::debug!("normal equations singular, retrying with ridge {ridge:e}");
            cholesky_with_ridge(&gram, pa, p, ridge).ok_or(NbcError::Singular { rows: n, cols: pa })?
        }
        None => return Err(NbcError::Singular { rows: n, cols: pa }),
    };

    // Solve L Lᵀ β = rhs column by column; β is pa × q.
    let mut beta = rhs;
    for k in 0..q {
        for i in 0..pa {
            let mut s = beta[i * q + k];
            for j in 0..i {
                s -= factor[i * pa + j] * beta[j * q + k];
            }
            beta[i * q + k] = s / factor[i * pa + i];
        }
        for i in (0..pa).rev() {
            let mut s = beta[i * q + k];
            for j in i + 1..pa {
                s -= factor[j * pa + i] * beta[j * q + k];
            }
            beta[i * q + k] = s / factor[i * pa + i];
        }
    }

    let mut weight = vec![0.0; q * p];
    let mut bias = vec![0.0; q];
    for k in 0..q {
        for i in 0..p {
            weight[k * p + i] = beta[i * q + k];
        }
        bias[k] = beta[p * q + k];
    }

    let mut sq = 0.0;
    for r in 0..n {
        let xr = &x[r * p..(r + 1) * p];
        for k in 0..q {
            let pred: f64 = bias[k]
                + weight[k * p..(k + 1) * p]
                    .iter()
                    .zip(xr)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
            let e = y[r * q + k] - pred;
            sq += e * e;
        }
    }
    let residual_rms = (sq / (n * q) as f64).sqrt();

    Ok(LstsqSolution {
        weight: Tensor::matrix(q, p, weight)?,
        bias: Tensor::vector(bias),
        residual_rms,
        ridge_used: ridge,
    })
}

/// Lower Cholesky factor of `gram + ridge·diag(1,…,1,0)` or `None` when a
/// pivot collapses.
fn cholesky_with_ridge(gram: &[f64], pa: usize, p: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut a = gram.to_vec();
    for i in 0..p {
        a[i * pa + i] += ridge;
    }
    let max_diag = (0..pa).map(|i| a[i * pa + i]).fold(0.0, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; pa * pa];
    for j in 0..pa {
        let mut d = a[j * pa + j];
        for k in 0..j {
            d -= l[j * pa + k] * l[j * pa + k];
        }
        if !(d > tol) {
            return None;
        }
        let djj = d.sqrt();
        l[j * pa + j] = djj;
        for i in j + 1..pa {
            let mut s = a[i * pa + j];
            for k in 0..j {
                s -= l[i * pa + k] * l[j * pa + k];
            }
            l[i * pa + j] = s / djj;
        }
    }
    Some(l)
}

/// Rounds every value to the nearest binary16 (ties to even) and widens back.
pub fn encode_f16_roundtrip(t: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.len());
    for (index, &value) in t.data().iter().enumerate() {
        let h = f16::from_f64(value);
        if h.is_infinite() && value.is_finite() {
            return Err(NbcError::F16Overflow { index, value });
        }
        data.push(h.to_f64());
    }
    Tensor::new(t.dims().to_vec(), data)
}

/// Rounds every value to the nearest `f32` and widens back.
pub fn encode_f32_roundtrip(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
