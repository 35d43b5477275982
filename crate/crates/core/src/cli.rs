//! Command-line surface: run configuration, the batch commands and their
//! text outputs.
//!
//! Config files are `key = value` lines; `#` starts a comment. Unknown keys
//! are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::compensation::Storage;
use crate::error::{ConfigError, NbcError, Result};
use crate::fls::FlsResult;
use crate::format::{atomic_write, read_bundle, write_bundle, write_tensor, Dtype};
use crate::harness::{
    evaluate, generate_calibration, ols_scalar_bias, run_pipeline, search_n, select_kurtosis_channel,
    slope_gap_analysis, EvalReport, HarnessConfig, Mode, PipelineConfig, TransformChoice, Workload,
};
use crate::transform::BltTransform;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub harness: HarnessConfig,
    pub pipeline: PipelineConfig,
    /// Seeds swept by `analyze-outliers`; defaults to the single run seed.
    pub seeds: Option<Vec<u64>>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "transform",
    "bits_w",
    "bits_a",
    "storage",
    "ridge",
    "fixed_n",
    "n_init",
    "n_min",
    "n_max",
    "step",
    "holdout_fraction",
    "seed",
    "seeds",
    "d",
    "h",
    "n_blocks",
    "n_samples",
    "tokens_per_sample",
    "eval_multiplier",
    "outlier_fraction",
    "outlier_scale",
    "outlier_octaves",
    "threshold",
    "heavy_gain",
];

impl RunConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: line_no });
            }
            cfg.set(line_no, key, value)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|_| ConfigError::Missing(path.to_path_buf()))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> std::result::Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> std::result::Result<T, ConfigError> {
            v.parse().map_err(|_| bad())
        }
        let real = |v: &str| -> std::result::Result<f64, ConfigError> {
            let x: f64 = num(v, bad)?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(bad())
            }
        };
        let p = &mut self.pipeline;
        let h = &mut self.harness;
        match key {
            "mode" => p.mode = Mode::parse(value).ok_or_else(bad)?,
            "transform" => p.transform = TransformChoice::parse(value).ok_or_else(bad)?,
            "bits_w" => p.bits_w = num(value, bad)?,
            "bits_a" => p.bits_a = num(value, bad)?,
            "storage" => p.storage = Storage::parse(value).ok_or_else(bad)?,
            "ridge" => p.ridge = real(value)?,
            "fixed_n" => {
                p.fixed_n = match value {
                    "none" | "" => None,
                    v => Some(real(v)?),
                }
            }
            "n_init" => p.fls.n_init = real(value)?,
            "n_min" => p.fls.n_min = real(value)?,
            "n_max" => p.fls.n_max = real(value)?,
            "step" => p.fls.step = real(value)?,
            "holdout_fraction" => p.fls.holdout_fraction = real(value)?,
            "seed" => {
                let s = num(value, bad)?;
                h.seed = s;
                p.fls.seed = s;
            }
            "seeds" => {
                let list = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if list.is_empty() {
                    return Err(bad());
                }
                self.seeds = Some(list);
            }
            "d" => h.d = num(value, bad)?,
            "h" => h.h = num(value, bad)?,
            "n_blocks" => h.n_blocks = num(value, bad)?,
            "n_samples" => h.n_samples = num(value, bad)?,
            "tokens_per_sample" => h.tokens_per_sample = num(value, bad)?,
            "eval_multiplier" => h.eval_multiplier = num(value, bad)?,
            "outlier_fraction" => h.outliers.fraction = real(value)?,
            "outlier_scale" => h.outliers.scale = real(value)?,
            "outlier_octaves" => h.outliers.octaves = real(value)?,
            "threshold" => h.outliers.threshold = real(value)?,
            "heavy_gain" => h.heavy_gain = real(value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Cross-field validation that does not need any computation.
    fn check(&self) -> std::result::Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let p = &self.pipeline;
        for (name, b) in [("bits_w", p.bits_w), ("bits_a", p.bits_a)] {
            if !(2..=8).contains(&b) {
                return invalid(format!("{name} = {b} outside [2, 8]"));
            }
        }
        if p.ridge < 0.0 {
            return invalid(format!("ridge = {} must be >= 0", p.ridge));
        }
        if let Err(e) = p.fls.validate() {
            return invalid(e.to_string());
        }
        let h = &self.harness;
        if h.d == 0 || h.h == 0 || h.n_blocks == 0 || h.n_samples == 0 || h.tokens_per_sample == 0 {
            return invalid("d, h, n_blocks, n_samples and tokens_per_sample must be >= 1".into());
        }
        if h.n_blocks > u16::MAX as usize {
            return invalid(format!("n_blocks = {} exceeds {}", h.n_blocks, u16::MAX));
        }
        if let Err(e) = h.outliers.validate() {
            return invalid(e.to_string());
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.harness.seed = seed;
        self.pipeline.fls.seed = seed;
        self
    }
}

#[derive(Debug, Parser)]
#[command(name = "nbc", version, about = "Blockwise quantization-error compensation toolkit")]
pub struct Cli {
    /// Run configuration file (`key = value` lines)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file (or directory for `analyze-outliers` and `export`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit compensation modules on the calibration set and write a bundle
    Calibrate,
    /// Run the feature-loss local search for N and print the explored map
    SearchN,
    /// Evaluate a bundle (or a fresh pipeline run) on the evaluation set
    Eval {
        /// Bundle produced by `calibrate`; when omitted the pipeline is refitted
        bundle: Option<PathBuf>,
    },
    /// Slope-gap and closed-form bias sweeps as CSV
    AnalyzeOutliers,
    /// Write each block's effective W and b as tensor files
    Export {
        bundle: PathBuf,
        /// Tensor dtype of the exported files
        #[arg(long, default_value = "f64")]
        dtype: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("--config <path> is required".into()))?;
    let cfg = RunConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => atomic_write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv_header(n_blocks: usize) -> String {
    let mut h = String::from(
        "mode,n_exp,feature_loss,fit_feature_loss,mae_outlier,mae_inlier,slope_gap_before,slope_gap_after,slope_block,slope_channel",
    );
    for i in 0..n_blocks {
        let _ = write!(h, ",block{i}_loss");
    }
    h
}

pub fn report_csv_row(r: &EvalReport) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.mode.name(),
        fmt_opt(r.n_exp),
        r.feature_loss,
        r.fit_feature_loss,
        fmt_opt(r.mae_outlier),
        fmt_opt(r.mae_inlier),
        fmt_opt(r.slope_gap_before),
        fmt_opt(r.slope_gap_after),
        r.slope_channel.map(|c| c.0.to_string()).unwrap_or_default(),
        r.slope_channel.map(|c| c.1.to_string()).unwrap_or_default(),
    );
    for l in &r.per_block_loss {
        let _ = write!(row, ",{l}");
    }
    row
}

/// Flat `key = value` rendering of a report.
pub fn report_kv(r: &EvalReport) -> String {
    let header = report_csv_header(r.per_block_loss.len());
    let row = report_csv_row(r);
    header
        .split(',')
        .zip(row.split(','))
        .map(|(k, v)| format!("{k} = {}\n", if v.is_empty() { "NA" } else { v }))
        .collect()
}

pub fn search_n_table(res: &FlsResult) -> String {
    let mut s = String::new();
    for (n, loss) in res.sorted_history() {
        let _ = writeln!(s, "{n}\t{loss}");
    }
    let _ = writeln!(s, "chosen\t{}", res.chosen_n);
    s
}

pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let workload = Workload::generate(&cfg.harness)?;
    let run = run_pipeline(&workload, &cfg.pipeline)?;
    write_bundle(out, &run.modules)?;
    let mut s = String::from("block\tkind\tn_exp\tstorage\tridge_used\tresidual_rms\n");
    for (i, m) in run.modules.iter().enumerate() {
        let info = m.fit_info();
        let _ = writeln!(
            s,
            "{i}\t{}\t{}\t{}\t{}\t{}",
            m.kind().name(),
            fmt_opt(m.kind().n_exp()),
            m.storage().name(),
            fmt_opt(info.map(|f| f.ridge_used)),
            fmt_opt(info.map(|f| f.residual_rms)),
        );
    }
    Ok(s)
}

pub fn cmd_search_n(cfg: &RunConfig) -> Result<FlsResult> {
    let workload = Workload::generate(&cfg.harness)?;
    let qmodel = workload.quantize(cfg.pipeline.bits_w, cfg.pipeline.bits_a)?;
    let (res, _) = search_n(
        &workload,
        &qmodel,
        &cfg.pipeline.fls,
        cfg.pipeline.ridge,
        cfg.pipeline.storage,
    )?;
    log::info!(
        "search-n: {} evaluations, terminated by {}",
        res.evaluations,
        res.terminated_by.name()
    );
    Ok(res)
}

pub fn cmd_eval(cfg: &RunConfig, bundle: Option<&Path>) -> Result<String> {
    let workload = Workload::generate(&cfg.harness)?;
    let report = match bundle {
        None => run_pipeline(&workload, &cfg.pipeline)?.report,
        Some(path) => {
            let modules = read_bundle(path)?;
            let qmodel = workload.quantize(cfg.pipeline.bits_w, cfg.pipeline.bits_a)?;
            let identity = modules.iter().all(|m| m.kind().name() == "identity");
            let zero = modules
                .iter()
                .all(|m| m.weight().max_abs() == 0.0 && m.bias().max_abs() == 0.0);
            let mode = match (identity, zero) {
                (true, true) => Mode::None,
                (true, false) => Mode::Linear,
                _ => Mode::Nbc,
            };
            let slope_n = modules
                .iter()
                .find_map(|m| m.kind().n_exp())
                .unwrap_or(cfg.pipeline.fls.n_init);
            evaluate(&workload, &qmodel, mode, &modules, slope_n)?
        }
    };
    Ok(format!(
        "{}\n{}\n",
        report_csv_header(report.per_block_loss.len()),
        report_csv_row(&report)
    ))
}

/// Returns `(slope_gap_csv, w_star_sweep_csv)`.
pub fn cmd_analyze_outliers(cfg: &RunConfig) -> Result<(String, String)> {
    let seeds = cfg.seeds.clone().unwrap_or_else(|| vec![cfg.harness.seed]);
    let mut gaps = String::from("seed,block,channel,n_exp,gap_before,gap_after\n");
    for seed in seeds {
        let run_cfg = cfg.clone().with_seed(seed);
        let workload = Workload::generate(&run_cfg.harness)?;
        let p = &run_cfg.pipeline;
        let qmodel = workload.quantize(p.bits_w, p.bits_a)?;
        let n_exp = match p.fixed_n {
            Some(n) => n,
            None => search_n(&workload, &qmodel, &p.fls, p.ridge, p.storage)?.0.chosen_n,
        };
        let records = generate_calibration(&workload, &qmodel)?;
        let Some((b, c)) = select_kurtosis_channel(&records) else {
            continue;
        };
        let x = records[b].x_q().column(c)?;
        let r = records[b].residual().column(c)?;
        match slope_gap_analysis(&x, &r, workload.config.outliers.threshold, &BltTransform::new(n_exp)) {
            Ok((before, after)) => {
                let _ = writeln!(gaps, "{seed},{b},{c},{n_exp},{before},{after}");
            }
            Err(NbcError::EmptySubset(which)) => log::info!("seed {seed}: {which} subset empty, skipped"),
            Err(e) => return Err(e),
        }
    }

    let mut sweep = String::from("k,n,big_m,small_m,r_out,r_in,w_star,inlier_slope,gap\n");
    let (n, small_m, r_out, r_in) = (4usize, 1.0, 0.0, 1.0);
    for k in 1..n {
        for big_m in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0] {
            let w = ols_scalar_bias(k, n, big_m, small_m, r_out, r_in)?;
            let inlier = r_in / small_m;
            let _ = writeln!(
                sweep,
                "{k},{n},{big_m},{small_m},{r_out},{r_in},{w},{inlier},{}",
                (w - inlier).abs()
            );
        }
    }
    Ok((gaps, sweep))
}

/// Writes `block{i}_weight.nbct` / `block{i}_bias.nbct` and a manifest.
pub fn cmd_export(bundle: &Path, out_dir: &Path, dtype: Dtype) -> Result<String> {
    let modules = read_bundle(bundle)?;
    std::fs::create_dir_all(out_dir).map_err(|e| NbcError::io(out_dir, e))?;
    let mut manifest = String::from("block,kind,n_exp,storage,d_out,d_in,weight_file,bias_file\n");
    for (i, m) in modules.iter().enumerate() {
        let wf = format!("block{i}_weight.nbct");
        let bf = format!("block{i}_bias.nbct");
        write_tensor(&out_dir.join(&wf), &m.weight(), dtype)?;
        write_tensor(&out_dir.join(&bf), m.bias(), dtype)?;
        let _ = writeln!(
            manifest,
            "{i},{},{},{},{},{},{wf},{bf}",
            m.kind().name(),
            fmt_opt(m.kind().n_exp()),
            m.storage().name(),
            m.d_out(),
            m.d_in()
        );
    }
    atomic_write(&out_dir.join("manifest.csv"), manifest.as_bytes())?;
    Ok(manifest)
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        "f16" => Ok(Dtype::F16),
        other => Err(ConfigError::Invalid(format!("unsupported export dtype `{other}`")).into()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Calibrate => {
            let cfg = load_config(cli)?;
            let out = out.ok_or_else(|| ConfigError::Invalid("calibrate needs --out <bundle>".into()))?;
            print!("{}", cmd_calibrate(&cfg, out)?);
        }
        Command::SearchN => {
            let cfg = load_config(cli)?;
            emit(out, &search_n_table(&cmd_search_n(&cfg)?))?;
        }
        Command::Eval { bundle } => {
            let cfg = load_config(cli)?;
            emit(out, &cmd_eval(&cfg, bundle.as_deref())?)?;
        }
        Command::AnalyzeOutliers => {
            let cfg = load_config(cli)?;
            let (gaps, sweep) = cmd_analyze_outliers(&cfg)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| NbcError::io(dir, e))?;
                    atomic_write(&dir.join("slope_gap.csv"), gaps.as_bytes())?;
                    atomic_write(&dir.join("w_star_sweep.csv"), sweep.as_bytes())?;
                }
                None => print!("{gaps}\n{sweep}"),
            }
        }
        Command::Export { bundle, dtype } => {
            let dtype = parse_dtype(dtype)?;
            let out = out.ok_or_else(|| ConfigError::Invalid("export needs --out <dir>".into()))?;
            print!("{}", cmd_export(bundle, out, dtype)?);
        }
    }
    Ok(())
}

/// Sets up logging from `NBC_LOG` (error, info or debug; default error).
pub fn init_logging() -> std::result::Result<(), ConfigError> {
    let level = std::env::var("NBC_LOG").unwrap_or_else(|_| "error".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => {
            return Err(ConfigError::Invalid(format!(
                "NBC_LOG must be error, info or debug, got `{other}`"
            )))
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .target(env_logger::Target::Stderr)
        .try_init();
    Ok(())
}

/// Single-line error for stderr.
pub fn error_line(e: &NbcError) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.kind())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# run\nmode = linear\nbits_w = 8 # weights\n\nstorage=i8\nseeds = 1, 2,3\nfixed_n = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.mode, Mode::Linear);
        assert_eq!(cfg.pipeline.bits_w, 8);
        assert_eq!(cfg.pipeline.storage, Storage::I8PerChannel);
        assert_eq!(cfg.seeds, Some(vec![1, 2, 3]));
        assert_eq!(cfg.pipeline.fixed_n, Some(2.5));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("mode = nbc\nlearning_rate = 3\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 2,
                key: "learning_rate".into()
            }
        );
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn bad_values_and_syntax() {
        assert!(matches!(
            RunConfig::parse("bits_w = four"),
            Err(ConfigError::BadValue { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("just words"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(RunConfig::parse("bits_a = 12"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("step = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            RunConfig::parse("ridge = nan"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for key in CONFIG_KEYS {
            let value = match *key {
                "mode" => "nbc",
                "transform" => "asinh",
                "storage" => "f16",
                "seeds" => "4",
                "outlier_fraction" => "0.1",
                "holdout_fraction" => "0.25",
                "n_min" => "-10",
                "n_max" => "10",
                "n_init" => "2",
                "ridge" | "fixed_n" => "0",
                _ => "8",
            };
            RunConfig::parse(&format!("{key} = {value}")).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn error_lines_are_single_line() {
        let e: NbcError = ConfigError::Missing(PathBuf::from("/no/such.cfg")).into();
        let line = error_line(&e);
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error[config]:"));
        assert!(line.contains("/no/such.cfg"));
        assert_eq!(e.exit_code(), 2);
    }
}
