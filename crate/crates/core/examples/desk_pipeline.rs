//! The full desk-scale comparison: no compensation, linear, and bipolar-log
//! compensation at W4A4 over a few seeds.

use nbc::harness::{run_pipeline, HarnessConfig, Mode, PipelineConfig, Workload};

fn main() -> nbc::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    println!("seed  mode    N     feature_loss  mae_outlier  mae_inlier");
    for seed in 0..seeds {
        let workload = Workload::generate(&HarnessConfig {
            seed,
            ..HarnessConfig::default()
        })?;
        for mode in [Mode::None, Mode::Linear, Mode::Nbc] {
            let run = run_pipeline(&workload, &PipelineConfig::with_mode(mode))?;
            let r = &run.report;
            println!(
                "{seed:<5} {:<7} {:<5} {:<13.6} {:<12.4} {:.4}",
                mode.name(),
                r.n_exp.map_or("-".into(), |n| n.to_string()),
                r.feature_loss,
                r.mae_outlier.unwrap_or(f64::NAN),
                r.mae_inlier.unwrap_or(f64::NAN),
            );
        }
    }
    Ok(())
}
