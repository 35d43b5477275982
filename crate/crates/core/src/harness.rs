//! Synthetic desk-scale experiments.
//!
//! The toy model is a stack of residual blocks
//!
//! ```text
//! y = x + gelu(rms(x) · W1ᵀ) · W2ᵀ
//! ```
//!
//! where `rms` is a parameter-free RMS normalization. The quantized twin
//! quantizes `W1`, `W2` per output row and the two matmul inputs per tensor.
//! A small fraction of calibration tokens carries a large-magnitude value in
//! the heavy channel; its weights in `W2` are scaled by `heavy_gain`, so the
//! outlier tokens also dominate that channel's quantization error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::compensation::{fit_linear, fit_nbc, store_params, CalibrationRecord, CompensationModule, Storage};
use crate::error::{NbcError, Result};
use crate::fls::{compute_feature_loss, search_n_for_pipeline, CompensationPipeline, FlsConfig, FlsResult};
use crate::numerics::{matmul_transposed, Tensor};
use crate::quantizer::{calibrate_params, dequantize, fake_quantize, quantize_per_channel, QuantParams};
use crate::transform::{BltTransform, TransformKind};

/// `sqrt(2/π)` and the cubic coefficient of the tanh GELU approximation.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;
pub const RMS_EPS: f64 = 1e-6;

/// Magnitude above which an activation counts as an outlier.
pub const DEFAULT_THRESHOLD: f64 = 10.0;

pub const DEFAULT_HEAVY_GAIN: f64 = 2.0;

/// Per-token inlier magnitude: `INLIER_SIGMA · N(0,1) · 2^U(-INLIER_SPAN, INLIER_SPAN)`.
const INLIER_SIGMA: f64 = 0.6;
const INLIER_SPAN: f64 = 1.5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Row-wise `x / sqrt(mean(x²) + eps)`.
pub fn rms_normalize(x: &Tensor) -> Tensor {
    let d = x.row_len();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.dims().to_vec(), out).expect("same dims")
}

/// Independent random stream `stream` derived from `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_MODEL: u64 = 1;
const STREAM_CALIB: u64 = 2;
const STREAM_EVAL: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    /// `h × d`
    pub w1: Tensor,
    /// `d × h`
    pub w2: Tensor,
}

impl ToyBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = matmul_transposed(&rms_normalize(x), &self.w1)?.map(gelu);
        x.add(&matmul_transposed(&hidden, &self.w2)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    d: usize,
    h: usize,
    blocks: Vec<ToyBlock>,
    seed: u64,
    heavy_channel: usize,
    heavy_gain: f64,
}

pub fn build_toy_model(d: usize, h: usize, n_blocks: usize, seed: u64) -> Result<ToyModel> {
    build_toy_model_with_gain(d, h, n_blocks, seed, DEFAULT_HEAVY_GAIN)
}

/// `W1 ~ N(0, 1/d)`, `W2 ~ N(0, 1/h)`, with row 0 of every `W2` scaled by
/// `heavy_gain`.
pub fn build_toy_model_with_gain(d: usize, h: usize, n_blocks: usize, seed: u64, heavy_gain: f64) -> Result<ToyModel> {
    if d == 0 || h == 0 || n_blocks == 0 {
        return Err(NbcError::InvalidParams(format!(
            "toy model needs d, h, n_blocks >= 1, got {d}, {h}, {n_blocks}"
        )));
    }
    if !(heavy_gain.is_finite() && heavy_gain > 0.0) {
        return Err(NbcError::InvalidParams(format!("heavy gain {heavy_gain}")));
    }
    let mut rng = rng_for(seed, STREAM_MODEL);
    let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("positive std");
    let blocks = (0..n_blocks)
        .map(|_| {
            let w1: Vec<f64> = (0..h * d).map(|_| n1.sample(&mut rng)).collect();
            let mut w2: Vec<f64> = (0..d * h).map(|_| n2.sample(&mut rng)).collect();
            w2[..h].iter_mut().for_each(|v| *v *= heavy_gain);
            ToyBlock {
                w1: Tensor::matrix(h, d, w1).expect("dims"),
                w2: Tensor::matrix(d, h, w2).expect("dims"),
            }
        })
        .collect();
    Ok(ToyModel {
        d,
        h,
        blocks,
        seed,
        heavy_channel: 0,
        heavy_gain,
    })
}

impl ToyModel {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn heavy_channel(&self) -> usize {
        self.heavy_channel
    }

    pub fn heavy_gain(&self) -> f64 {
        self.heavy_gain
    }

    pub fn blocks(&self) -> &[ToyBlock] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Activations at every block boundary: `[x, block₀(x), …]`.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = vec![x.clone()];
        for b in &self.blocks {
            let next = b.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_all(x)?.pop().expect("non-empty"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierSpec {
    /// Share of tokens that carry an outlier, in `[0, 0.2]`.
    pub fraction: f64,
    /// Smallest outlier magnitude relative to the typical inlier scale.
    pub scale: f64,
    /// Outlier magnitudes spread log-uniformly over `scale · [1, 2^octaves]`.
    pub octaves: f64,
    pub threshold: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            fraction: 0.2,
            scale: 16.0,
            octaves: 5.0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl OutlierSpec {
    pub fn none() -> Self {
        OutlierSpec {
            fraction: 0.0,
            ..OutlierSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.2).contains(&self.fraction) {
            return Err(NbcError::InvalidParams(format!(
                "outlier fraction {} outside [0, 0.2]",
                self.fraction
            )));
        }
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(NbcError::InvalidParams(format!("outlier scale {} < 1", self.scale)));
        }
        if !(self.octaves >= 0.0 && self.octaves.is_finite()) {
            return Err(NbcError::InvalidParams(format!("outlier octaves {}", self.octaves)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(NbcError::InvalidParams(format!("threshold {}", self.threshold)));
        }
        Ok(())
    }
}

/// Token matrix `(n_samples · tokens_per_sample) × d`, rows grouped by sample.
pub fn sample_inputs(
    d: usize,
    n_samples: usize,
    tokens_per_sample: usize,
    spec: &OutlierSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    spec.validate()?;
    let rows = n_samples * tokens_per_sample;
    if rows == 0 || d == 0 {
        return Err(NbcError::Empty("sample_inputs"));
    }
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let mag = INLIER_SIGMA * (INLIER_SPAN * rng.random_range(-1.0..1.0f64)).exp2();
        let start = data.len();
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            data.push(mag * z);
        }
        if spec.fraction > 0.0 && rng.random::<f64>() < spec.fraction {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let spread = (spec.octaves * rng.random::<f64>()).exp2();
            data[start] = sign * spec.scale * spread;
        }
    }
    Tensor::matrix(rows, d, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    /// Dequantized per-row weights.
    pub w1: Tensor,
    pub w2: Tensor,
    /// Per-tensor parameters for `rms(x)` and for the hidden activation.
    pub input_params: QuantParams,
    pub hidden_params: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedToyModel {
    bits_w: u32,
    bits_a: u32,
    blocks: Vec<QuantizedBlock>,
}

impl QuantizedToyModel {
    /// Quantizes the weights and calibrates activation ranges on the
    /// full-precision activations of `calib`.
    pub fn calibrate(model: &ToyModel, calib: &Tensor, bits_w: u32, bits_a: u32) -> Result<Self> {
        let acts = model.forward_all(calib)?;
        let mut blocks = Vec::with_capacity(model.n_blocks());
        for (b, x) in model.blocks.iter().zip(&acts) {
            let xn = rms_normalize(x);
            let hidden = matmul_transposed(&xn, &b.w1)?.map(gelu);
            blocks.push(QuantizedBlock {
                w1: dequantize(&quantize_per_channel(&b.w1, bits_w)?),
                w2: dequantize(&quantize_per_channel(&b.w2, bits_w)?),
                input_params: calibrate_params(&xn, bits_a)?,
                hidden_params: calibrate_params(&hidden, bits_a)?,
            });
        }
        Ok(QuantizedToyModel { bits_w, bits_a, blocks })
    }

    pub fn bits(&self) -> (u32, u32) {
        (self.bits_w, self.bits_a)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[QuantizedBlock] {
        &self.blocks
    }

    /// Quantized block `i` applied to `x`; the residual path stays in full
    /// precision.
    pub fn block(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let b = &self.blocks[i];
        let xq = fake_quantize(&rms_normalize(x), b.input_params);
        let hidden = matmul_transposed(&xq, &b.w1)?.map(gelu);
        let hq = fake_quantize(&hidden, b.hidden_params);
        x.add(&matmul_transposed(&hq, &b.w2)?)
    }
}

/// One pass of the quantized path.
#[derive(Debug, Clone)]
pub struct PathTrace {
    /// Per block: path input, full-precision output, quantized output.
    pub records: Vec<CalibrationRecord>,
    /// Per block: output after compensation (equals `y_q` when uncompensated).
    pub outputs: Vec<Tensor>,
    pub modules: Vec<CompensationModule>,
}

impl PathTrace {
    pub fn final_output(&self) -> &Tensor {
        self.outputs.last().expect("at least one block")
    }
}

/// How each block is compensated while walking the path.
pub enum Compensate<'a> {
    None,
    /// Fit a module on the block's record, store it and apply it.
    Fit(&'a dyn Fn(&CalibrationRecord) -> Result<CompensationModule>),
    Given(&'a [CompensationModule]),
}

/// Walks the quantized path block by block. Each block sees the compensated
/// output of the previous one; `y` always comes from the full-precision
/// forward on the same inputs.
pub fn propagate(
    qmodel: &QuantizedToyModel,
    inputs: &Tensor,
    fp_acts: &[Tensor],
    comp: Compensate<'_>,
) -> Result<PathTrace> {
    let nb = qmodel.n_blocks();
    if fp_acts.len() != nb + 1 {
        return Err(NbcError::dims(
            "propagate",
            format!("{} activations for {nb} blocks", fp_acts.len()),
        ));
    }
    if let Compensate::Given(mods) = &comp {
        if mods.len() != nb {
            return Err(NbcError::dims(
                "propagate",
                format!("{} modules for {nb} blocks", mods.len()),
            ));
        }
    }
    let mut cur = inputs.clone();
    let mut trace = PathTrace {
        records: Vec::with_capacity(nb),
        outputs: Vec::with_capacity(nb),
        modules: Vec::new(),
    };
    for i in 0..nb {
        let y_q = qmodel.block(i, &cur)?;
        let rec = CalibrationRecord::new(cur, fp_acts[i + 1].clone(), y_q)?;
        let out = match &comp {
            Compensate::None => rec.y_q().clone(),
            Compensate::Fit(fit) => {
                let m = fit(&rec)?;
                let out = m.apply(rec.x_q(), rec.y_q())?;
                trace.modules.push(m);
                out
            }
            Compensate::Given(mods) => mods[i].apply(rec.x_q(), rec.y_q())?,
        };
        cur = out.clone();
        trace.records.push(rec);
        trace.outputs.push(out);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub d: usize,
    pub h: usize,
    pub n_blocks: usize,
    pub n_samples: usize,
    pub tokens_per_sample: usize,
    /// Evaluation set size as a multiple of the calibration set.
    pub eval_multiplier: usize,
    pub outliers: OutlierSpec,
    pub heavy_gain: f64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            d: 64,
            h: 128,
            n_blocks: 4,
            n_samples: 512,
            tokens_per_sample: 4,
            eval_multiplier: 4,
            outliers: OutlierSpec::default(),
            heavy_gain: DEFAULT_HEAVY_GAIN,
            seed: 0,
        }
    }
}

/// A toy model together with its seeded calibration and evaluation inputs
/// and their cached full-precision activations.
#[derive(Debug, Clone)]
pub struct Workload {
    pub config: HarnessConfig,
    pub model: ToyModel,
    pub calib: Tensor,
    pub calib_acts: Vec<Tensor>,
    pub eval: Tensor,
    pub eval_acts: Vec<Tensor>,
}

impl Workload {
    pub fn generate(cfg: &HarnessConfig) -> Result<Self> {
        if cfg.n_samples * cfg.tokens_per_sample < cfg.d + 2 {
            return Err(NbcError::InsufficientRows {
                needed: cfg.d + 2,
                got: cfg.n_samples * cfg.tokens_per_sample,
            });
        }
        if cfg.eval_multiplier == 0 {
            return Err(NbcError::InvalidParams("eval multiplier must be >= 1".into()));
        }
        let model = build_toy_model_with_gain(cfg.d, cfg.h, cfg.n_blocks, cfg.seed, cfg.heavy_gain)?;
        let calib = sample_inputs(
            cfg.d,
            cfg.n_samples,
            cfg.tokens_per_sample,
            &cfg.outliers,
            &mut rng_for(cfg.seed, STREAM_CALIB),
        )?;
        let eval = sample_inputs(
            cfg.d,
            cfg.n_samples * cfg.eval_multiplier,
            cfg.tokens_per_sample,
            &cfg.outliers,
            &mut rng_for(cfg.seed, STREAM_EVAL),
        )?;
        let calib_acts = model.forward_all(&calib)?;
        let eval_acts = model.forward_all(&eval)?;
        Ok(Workload {
            config: *cfg,
            model,
            calib,
            calib_acts,
            eval,
            eval_acts,
        })
    }

    pub fn quantize(&self, bits_w: u32, bits_a: u32) -> Result<QuantizedToyModel> {
        QuantizedToyModel::calibrate(&self.model, &self.calib, bits_w, bits_a)
    }

    /// Row indices belonging to the given calibration samples.
    fn sample_rows(&self, samples: &[usize]) -> Vec<usize> {
        let t = self.config.tokens_per_sample;
        samples.iter().flat_map(|&s| s * t..(s + 1) * t).collect()
    }

    /// Calibration inputs and activations restricted to some samples.
    fn calib_subset(&self, samples: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let rows = self.sample_rows(samples);
        let acts = self
            .calib_acts
            .iter()
            .map(|a| a.select_rows(&rows))
            .collect::<Result<Vec<_>>>()?;
        Ok((acts[0].clone(), acts))
    }
}

/// Uncompensated per-block records `(x_q, y, y_q)` on the calibration set.
pub fn generate_calibration(workload: &Workload, qmodel: &QuantizedToyModel) -> Result<Vec<CalibrationRecord>> {
    Ok(propagate(qmodel, &workload.calib, &workload.calib_acts, Compensate::None)?.records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    None,
    Linear,
    Nbc,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Linear => "linear",
            Mode::Nbc => "nbc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Mode::None),
            "linear" | "qwt" => Some(Mode::Linear),
            "nbc" => Some(Mode::Nbc),
            _ => None,
        }
    }
}

/// Transform family used in `Mode::Nbc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformChoice {
    Blt,
    Asinh,
    Tanh,
    Sigmoid,
}

impl TransformChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blt" => Some(TransformChoice::Blt),
            "asinh" => Some(TransformChoice::Asinh),
            "tanh" => Some(TransformChoice::Tanh),
            "sigmoid" => Some(TransformChoice::Sigmoid),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformChoice::Blt => "blt",
            TransformChoice::Asinh => "asinh",
            TransformChoice::Tanh => "tanh",
            TransformChoice::Sigmoid => "sigmoid",
        }
    }

    pub fn kind(&self, n_exp: f64) -> TransformKind {
        match self {
            TransformChoice::Blt => TransformKind::blt(n_exp),
            TransformChoice::Asinh => TransformKind::Asinh,
            TransformChoice::Tanh => TransformKind::TanhExperimental,
            TransformChoice::Sigmoid => TransformKind::SigmoidExperimental,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub transform: TransformChoice,
    /// Skip the search and use this exponent.
    pub fixed_n: Option<f64>,
    pub bits_w: u32,
    pub bits_a: u32,
    pub fls: FlsConfig,
    pub storage: Storage,
    pub ridge: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Nbc,
            transform: TransformChoice::Blt,
            fixed_n: None,
            bits_w: 4,
            bits_a: 4,
            fls: FlsConfig::default(),
            storage: Storage::F16,
            ridge: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: Mode) -> Self {
        PipelineConfig {
            mode,
            ..PipelineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    /// Exponent used by BLT modules, when any.
    pub n_exp: Option<f64>,
    /// Final-block feature loss on the evaluation set.
    pub feature_loss: f64,
    /// Same on the calibration set the modules were fitted on.
    pub fit_feature_loss: f64,
    /// Absent when no position crosses the threshold.
    pub mae_outlier: Option<f64>,
    pub mae_inlier: Option<f64>,
    pub slope_gap_before: Option<f64>,
    pub slope_gap_after: Option<f64>,
    /// `(block, channel)` the slope gaps were measured on.
    pub slope_channel: Option<(usize, usize)>,
    pub per_block_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub modules: Vec<CompensationModule>,
    pub fls: Option<FlsResult>,
}

fn fit_one(
    rec: &CalibrationRecord,
    kind: Option<TransformKind>,
    ridge: f64,
    storage: Storage,
) -> Result<CompensationModule> {
    let m = match kind {
        None => fit_linear(rec, ridge)?,
        Some(k) => fit_nbc(rec, k, ridge)?,
    };
    store_params(&m, storage)
}

/// Fits one module per block, sequentially, on the calibration samples.
pub fn fit_modules(
    workload: &Workload,
    qmodel: &QuantizedToyModel,
    samples: Option<&[usize]>,
    kind: Option<TransformKind>,
    ridge: f64,
    storage: Storage,
) -> Result<Vec<CompensationModule>> {
    let fit = |rec: &CalibrationRecord| fit_one(rec, kind, ridge, storage);
    let trace = match samples {
        None => propagate(qmodel, &workload.calib, &workload.calib_acts, Compensate::Fit(&fit))?,
        Some(s) => {
            let (x, acts) = workload.calib_subset(s)?;
            propagate(qmodel, &x, &acts, Compensate::Fit(&fit))?
        }
    };
    Ok(trace.modules)
}

/// Hold-out search over `N` for BLT modules, sample-level split.
struct BltSearch<'a> {
    workload: &'a Workload,
    qmodel: &'a QuantizedToyModel,
    ridge: f64,
    storage: Storage,
}

impl CompensationPipeline for BltSearch<'_> {
    type Sample = usize;
    type Fitted = Vec<CompensationModule>;

    fn fit(&self, samples: &[usize], n_exp: f64) -> Result<Self::Fitted> {
        fit_modules(
            self.workload,
            self.qmodel,
            Some(samples),
            Some(TransformKind::blt(n_exp)),
            self.ridge,
            self.storage,
        )
    }

    fn loss(&self, fitted: &Self::Fitted, samples: &[usize]) -> Result<f64> {
        let (x, acts) = self.workload.calib_subset(samples)?;
        let trace = propagate(self.qmodel, &x, &acts, Compensate::Given(fitted))?;
        compute_feature_loss(acts.last().expect("activations"), trace.final_output())
    }
}

/// Searches `N` with the hold-out protocol and returns the search result
/// together with modules refitted on the whole calibration set.
pub fn search_n(
    workload: &Workload,
    qmodel: &QuantizedToyModel,
    fls: &FlsConfig,
    ridge: f64,
    storage: Storage,
) -> Result<(FlsResult, Vec<CompensationModule>)> {
    let samples: Vec<usize> = (0..workload.config.n_samples).collect();
    let pipeline = BltSearch {
        workload,
        qmodel,
        ridge,
        storage,
    };
    search_n_for_pipeline(&samples, fls, &pipeline)
}

/// Quantize, fit the selected compensation per block (searching `N` for
/// BLT unless fixed), and evaluate on the held-out evaluation set.
pub fn run_pipeline(workload: &Workload, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let qmodel = workload.quantize(cfg.bits_w, cfg.bits_a)?;
    let d = workload.config.d;
    let mut fls = None;
    let modules = match cfg.mode {
        Mode::None => (0..qmodel.n_blocks())
            .map(|_| CompensationModule::zero(TransformKind::Identity, d, d))
            .collect(),
        Mode::Linear => fit_modules(workload, &qmodel, None, None, cfg.ridge, cfg.storage)?,
        Mode::Nbc => match (cfg.transform, cfg.fixed_n) {
            (TransformChoice::Blt, None) => {
                let (res, mods) = search_n(workload, &qmodel, &cfg.fls, cfg.ridge, cfg.storage)?;
                fls = Some(res);
                mods
            }
            (t, n) => {
                let kind = t.kind(n.unwrap_or(cfg.fls.n_init));
                fit_modules(workload, &qmodel, None, Some(kind), cfg.ridge, cfg.storage)?
            }
        },
    };
    let slope_n = match (cfg.mode, cfg.transform) {
        (Mode::Nbc, TransformChoice::Blt) => modules[0].kind().n_exp().unwrap_or(cfg.fls.n_init),
        _ => cfg.fls.n_init,
    };
    let report = evaluate(workload, &qmodel, cfg.mode, &modules, slope_n)?;
    Ok(PipelineRun { report, modules, fls })
}

/// Evaluates fixed modules on the calibration and evaluation sets.
/// `slope_n` is the BLT exponent for the slope-gap analysis.
pub fn evaluate(
    workload: &Workload,
    qmodel: &QuantizedToyModel,
    mode: Mode,
    modules: &[CompensationModule],
    slope_n: f64,
) -> Result<EvalReport> {
    let threshold = workload.config.outliers.threshold;
    let eval = propagate(qmodel, &workload.eval, &workload.eval_acts, Compensate::Given(modules))?;
    let fit = propagate(
        qmodel,
        &workload.calib,
        &workload.calib_acts,
        Compensate::Given(modules),
    )?;
    let plain = propagate(qmodel, &workload.calib, &workload.calib_acts, Compensate::None)?;

    let feature_loss = compute_feature_loss(workload.eval_acts.last().expect("acts"), eval.final_output())?;
    let fit_feature_loss = compute_feature_loss(workload.calib_acts.last().expect("acts"), fit.final_output())?;
    let per_block_loss = eval
        .records
        .iter()
        .zip(&eval.outputs)
        .map(|(rec, out)| compute_feature_loss(rec.y(), out))
        .collect::<Result<Vec<_>>>()?;

    let mut acc = MaeAccumulator::default();
    for (rec, out) in eval.records.iter().zip(&eval.outputs) {
        acc.add(rec.y(), out, rec.x_q(), threshold)?;
    }
    let (mae_outlier, mae_inlier) = acc.finish();

    let (slope_channel, gaps) = match select_kurtosis_channel(&plain.records) {
        Some((b, c)) => {
            let rec = &plain.records[b];
            let x = rec.x_q().column(c)?;
            let r = rec.residual().column(c)?;
            match slope_gap_analysis(&x, &r, threshold, &BltTransform::new(slope_n)) {
                Ok(g) => (Some((b, c)), Some(g)),
                Err(NbcError::EmptySubset(_)) => (Some((b, c)), None),
                Err(e) => return Err(e),
            }
        }
        None => (None, None),
    };

    let n_exp = modules.iter().find_map(|m| m.kind().n_exp());
    Ok(EvalReport {
        mode,
        n_exp,
        feature_loss,
        fit_feature_loss,
        mae_outlier,
        mae_inlier,
        slope_gap_before: gaps.map(|g| g.0),
        slope_gap_after: gaps.map(|g| g.1),
        slope_channel,
        per_block_loss,
    })
}

#[derive(Debug, Default, Clone, Copy)]
struct MaeAccumulator {
    out_sum: f64,
    out_n: usize,
    in_sum: f64,
    in_n: usize,
}

impl MaeAccumulator {
    fn add(&mut self, y: &Tensor, y_hat: &Tensor, x_q: &Tensor, threshold: f64) -> Result<()> {
        if y.dims() != y_hat.dims() || y.dims() != x_q.dims() {
            return Err(NbcError::dims(
                "split_error_metrics",
                format!("y {:?}, y_hat {:?}, x_q {:?}", y.dims(), y_hat.dims(), x_q.dims()),
            ));
        }
        for ((a, b), x) in y.data().iter().zip(y_hat.data()).zip(x_q.data()) {
            let e = (a - b).abs();
            if x.abs() > threshold {
                self.out_sum += e;
                self.out_n += 1;
            } else {
                self.in_sum += e;
                self.in_n += 1;
            }
        }
        Ok(())
    }

    fn finish(&self) -> (Option<f64>, Option<f64>) {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        (mean(self.out_sum, self.out_n), mean(self.in_sum, self.in_n))
    }
}

/// Mean `|y - y_hat|` over positions where `|x_q|` is above / not above the
/// threshold. A partition with no positions is reported as `None`.
pub fn split_error_metrics(
    y: &Tensor,
    y_hat: &Tensor,
    x_q: &Tensor,
    threshold: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut acc = MaeAccumulator::default();
    acc.add(y, y_hat, x_q, threshold)?;
    Ok(acc.finish())
}

/// Scalar least squares with intercept; returns `(slope, intercept)`.
pub fn scalar_ols(x: &[f64], r: &[f64]) -> Result<(f64, f64)> {
    if x.len() != r.len() {
        return Err(NbcError::dims("scalar_ols", format!("{} vs {}", x.len(), r.len())));
    }
    if x.len() < 2 {
        return Err(NbcError::InsufficientRows {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mr = r.iter().sum::<f64>() / n;
    let (mut sxx, mut sxr) = (0.0, 0.0);
    for (a, b) in x.iter().zip(r) {
        sxx += (a - mx) * (a - mx);
        sxr += (a - mx) * (b - mr);
    }
    if sxx == 0.0 {
        return Err(NbcError::Singular { rows: x.len(), cols: 2 });
    }
    let slope = sxr / sxx;
    Ok((slope, mr - slope * mx))
}

/// Slope gap `|slope(all) - slope(inliers)|` in the original space and
/// after mapping both axes through `t`. Inliers are `|x| <= threshold`.
pub fn slope_gap_analysis(x: &[f64], r: &[f64], threshold: f64, t: &BltTransform) -> Result<(f64, f64)> {
    if x.len() != r.len() {
        return Err(NbcError::dims(
            "slope_gap_analysis",
            format!("{} vs {}", x.len(), r.len()),
        ));
    }
    let inlier: Vec<usize> = (0..x.len()).filter(|&i| x[i].abs() <= threshold).collect();
    if inlier.is_empty() {
        return Err(NbcError::EmptySubset("inlier"));
    }
    if inlier.len() == x.len() {
        return Err(NbcError::EmptySubset("outlier"));
    }
    let gap = |xs: &[f64], rs: &[f64]| -> Result<f64> {
        let xi: Vec<f64> = inlier.iter().map(|&i| xs[i]).collect();
        let ri: Vec<f64> = inlier.iter().map(|&i| rs[i]).collect();
        Ok((scalar_ols(xs, rs)?.0 - scalar_ols(&xi, &ri)?.0).abs())
    };
    let before = gap(x, r)?;
    let fx: Vec<f64> = x.iter().map(|&v| t.forward(v)).collect();
    let fr: Vec<f64> = r.iter().map(|&v| t.forward(v)).collect();
    Ok((before, gap(&fx, &fr)?))
}

/// No-intercept OLS slope for `k` outliers at `|x| = big_m` with mean
/// residual `r_out` and `n - k` inliers at `|x| = small_m` with mean `r_in`.
pub fn ols_scalar_bias(k: usize, n: usize, big_m: f64, small_m: f64, r_out: f64, r_in: f64) -> Result<f64> {
    if !(n > k) || !(small_m > 0.0 && big_m >= small_m) {
        return Err(NbcError::InvalidParams(format!(
            "need n > k >= 0 and M >= m > 0, got k={k}, n={n}, M={big_m}, m={small_m}"
        )));
    }
    let (k, rest) = (k as f64, (n - k) as f64);
    let num = k * big_m * r_out + rest * small_m * r_in;
    let den = k * big_m * big_m + rest * small_m * small_m;
    Ok(num / den)
}

/// Excess kurtosis `m4 / m2² - 3`; `None` for a constant column.
pub fn excess_kurtosis(v: &[f64]) -> Option<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in v {
        let c = (x - mean) * (x - mean);
        m2 += c;
        m4 += c * c;
    }
    m2 /= n;
    m4 /= n;
    (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0)
}

/// `(block, channel)` whose path input has the largest excess kurtosis.
pub fn select_kurtosis_channel(records: &[CalibrationRecord]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (b, rec) in records.iter().enumerate() {
        for c in 0..rec.d_in() {
            let col = rec.x_q().column(c).ok()?;
            if let Some(k) = excess_kurtosis(&col) {
                if best.is_none_or(|(_, bk)| k > bk) {
                    best = Some(((b, c), k));
                }
            }
        }
    }
    best.map(|(bc, _)| bc)
}
