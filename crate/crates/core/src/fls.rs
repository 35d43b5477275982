//! Feature-loss local search for the global BLT exponent `N`.
//!
//! The search walks outward from `n_init` one grid step at a time on each
//! side, stopping expansion once a strict local minimum has been bracketed.
//! Candidates already queued are still evaluated after that point.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NbcError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlsConfig {
    pub n_init: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub step: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for FlsConfig {
    fn default() -> Self {
        FlsConfig {
            n_init: 2.0,
            n_min: -10.0,
            n_max: 10.0,
            step: 1.0,
            holdout_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Slack when snapping bounds onto the grid, relative to the step.
const GRID_EPS: f64 = 1e-9;

impl FlsConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.n_init, self.n_min, self.n_max, self.step]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(NbcError::InvalidConfig("non-finite search parameter".into()));
        }
        if !(self.step > 0.0) {
            return Err(NbcError::InvalidConfig(format!("step {} must be > 0", self.step)));
        }
        if !(self.n_min <= self.n_init && self.n_init <= self.n_max) {
            return Err(NbcError::InvalidConfig(format!(
                "need n_min <= n_init <= n_max, got {} / {} / {}",
                self.n_min, self.n_init, self.n_max
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(NbcError::InvalidConfig(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    /// Inclusive range of grid offsets `k` with `n_init + k·step` in bounds.
    pub fn grid_bounds(&self) -> (i64, i64) {
        let lo = ((self.n_min - self.n_init) / self.step - GRID_EPS).ceil() as i64;
        let hi = ((self.n_max - self.n_init) / self.step + GRID_EPS).floor() as i64;
        (lo, hi)
    }

    pub fn grid_point(&self, k: i64) -> f64 {
        self.n_init + k as f64 * self.step
    }

    /// Number of grid points inside the bounds.
    pub fn grid_cardinality(&self) -> usize {
        let (lo, hi) = self.grid_bounds();
        (hi - lo + 1) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    LocalMinimum,
    BoundsExhausted,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::LocalMinimum => "local_minimum",
            Termination::BoundsExhausted => "bounds_exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlsResult {
    pub chosen_n: f64,
    /// `(N, loss)` in the order the candidates were evaluated.
    pub history: Vec<(f64, f64)>,
    pub evaluations: usize,
    pub terminated_by: Termination,
}

impl FlsResult {
    pub fn explored(&self) -> Vec<f64> {
        self.history.iter().map(|&(n, _)| n).collect()
    }

    /// History ordered by `N`.
    pub fn sorted_history(&self) -> Vec<(f64, f64)> {
        let mut h = self.history.clone();
        h.sort_by(|a, b| a.0.total_cmp(&b.0));
        h
    }

    pub fn loss_at(&self, n: f64) -> Option<f64> {
        self.history.iter().find(|&&(m, _)| m == n).map(|&(_, l)| l)
    }

    pub fn chosen_loss(&self) -> f64 {
        self.loss_at(self.chosen_n).expect("chosen N is in history")
    }
}

/// `(1 / T·D) Σ (F - F^q)²`
pub fn compute_feature_loss(f_full: &Tensor, f_quant: &Tensor) -> Result<f64> {
    if f_full.dims() != f_quant.dims() {
        return Err(NbcError::dims(
            "compute_feature_loss",
            format!("{:?} vs {:?}", f_full.dims(), f_quant.dims()),
        ));
    }
    let sum: f64 = f_full
        .data()
        .iter()
        .zip(f_quant.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / f_full.len() as f64)
}

/// Seeded partition into `(fit, holdout)` with
/// `max(1, floor(n · holdout_fraction))` hold-out items. Both halves keep the
/// input order.
pub fn holdout_split<T: Clone>(items: &[T], cfg: &FlsConfig) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(NbcError::TooFewRecords(items.len()));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(NbcError::InvalidConfig(format!(
            "holdout fraction {} outside (0, 1)",
            cfg.holdout_fraction
        )));
    }
    let n = items.len();
    let n_hold = ((n as f64 * cfg.holdout_fraction).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut hold = vec![false; n];
    for &i in &idx[..n_hold] {
        hold[i] = true;
    }
    let mut fit = Vec::with_capacity(n - n_hold);
    let mut out = Vec::with_capacity(n_hold);
    for (i, item) in items.iter().enumerate() {
        if hold[i] {
            out.push(item.clone());
        } else {
            fit.push(item.clone());
        }
    }
    Ok((fit, out))
}

/// Runs the local search. `evaluator` maps a candidate `N` to its loss;
/// failures come back wrapped with the offending `N`.
pub fn fls_search<F>(cfg: &FlsConfig, mut evaluator: F) -> Result<FlsResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let (k_min, k_max) = cfg.grid_bounds();

    let mut h: HashMap<i64, f64> = HashMap::new();
    let mut order: Vec<i64> = Vec::new();
    let mut queue = VecDeque::from([0i64]);
    if 1 <= k_max {
        queue.push_back(1);
    }
    if -1 >= k_min {
        queue.push_back(-1);
    }

    let is_local_min = |h: &HashMap<i64, f64>, k: i64| match (h.get(&k), h.get(&(k - 1)), h.get(&(k + 1))) {
        (Some(c), Some(l), Some(r)) => c < l && c < r,
        _ => false,
    };

    let mut found = false;
    while let Some(k) = queue.pop_front() {
        if h.contains_key(&k) {
            continue;
        }
        let n = cfg.grid_point(k);
        let loss = evaluator(n).map_err(|e| NbcError::Evaluator { n, source: Box::new(e) })?;
        log::debug!("fls: N = {n} loss = {loss:e}");
        h.insert(k, loss);
        order.push(k);

        if k > 1 && is_local_min(&h, k - 1) {
            found = true;
        }
        if k < 0 && is_local_min(&h, k + 1) {
            found = true;
        }
        if !found {
            if k > 0 && k < k_max {
                queue.push_back(k + 1);
            } else if k < 0 && k > k_min {
                queue.push_back(k - 1);
            }
        }
    }

    // Earliest-explored wins ties; NaN losses never win.
    let mut best = order[0];
    for &k in &order[1..] {
        if h[&k] < h[&best] || h[&best].is_nan() {
            best = k;
        }
    }
    Ok(FlsResult {
        chosen_n: cfg.grid_point(best),
        history: order.iter().map(|&k| (cfg.grid_point(k), h[&k])).collect(),
        evaluations: order.len(),
        terminated_by: if found {
            Termination::LocalMinimum
        } else {
            Termination::BoundsExhausted
        },
    })
}

/// Something that can refit compensation for a candidate `N` and score it.
pub trait CompensationPipeline {
    type Sample: Clone;
    type Fitted;

    fn fit(&self, samples: &[Self::Sample], n_exp: f64) -> Result<Self::Fitted>;

    /// Feature loss of the fitted pipeline on `samples`.
    fn loss(&self, fitted: &Self::Fitted, samples: &[Self::Sample]) -> Result<f64>;
}

/// Hold-out protocol: fit on the fit split, score on the hold-out split for
/// every candidate, then refit the chosen `N` on all samples.
pub fn search_n_for_pipeline<P: CompensationPipeline>(
    samples: &[P::Sample],
    cfg: &FlsConfig,
    pipeline: &P,
) -> Result<(FlsResult, P::Fitted)> {
    let (fit_set, holdout) = holdout_split(samples, cfg)?;
    let result = fls_search(cfg, |n| {
        let fitted = pipeline.fit(&fit_set, n)?;
        pipeline.loss(&fitted, &holdout)
    })?;
    let refit = pipeline.fit(samples, result.chosen_n)?;
    Ok((result, refit))
}
