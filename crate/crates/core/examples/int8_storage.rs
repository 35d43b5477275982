//! Storing compensation weights as per-row int8 instead of f16.

use nbc::compensation::Storage;
use nbc::format::encode_bundle;
use nbc::harness::{run_pipeline, HarnessConfig, Mode, PipelineConfig, Workload};

fn main() -> nbc::Result<()> {
    let workload = Workload::generate(&HarnessConfig::default())?;
    for storage in [Storage::F32, Storage::F16, Storage::I8PerChannel] {
        let cfg = PipelineConfig {
            storage,
            ..PipelineConfig::with_mode(Mode::Nbc)
        };
        let run = run_pipeline(&workload, &cfg)?;
        let bytes = encode_bundle(&run.modules)?.len();
        println!(
            "{:>4}: bundle {bytes:>6} bytes, eval feature loss {:.6}, N = {:?}",
            storage.name(),
            run.report.feature_loss,
            run.report.n_exp
        );
    }
    Ok(())
}
