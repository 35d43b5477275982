//! Why outliers bias a least-squares slope, and how the log transform
//! narrows the gap between the all-token and inlier-only fits.

use nbc::harness::{generate_calibration, ols_scalar_bias, select_kurtosis_channel, slope_gap_analysis};
use nbc::harness::{HarnessConfig, Workload};
use nbc::BltTransform;

fn main() -> nbc::Result<()> {
    // One outlier among four tokens, with zero error on the outlier.
    // The inliers alone would give a slope of 1.
    println!("k  M       w*");
    for big_m in [1.0, 3.0, 10.0, 30.0, 100.0] {
        let w = ols_scalar_bias(1, 4, big_m, 1.0, 0.0, 1.0)?;
        println!("1  {big_m:<6}  {w:.5}");
    }

    for seed in 0..3 {
        let workload = Workload::generate(&HarnessConfig {
            seed,
            ..HarnessConfig::default()
        })?;
        let qmodel = workload.quantize(4, 4)?;
        let records = generate_calibration(&workload, &qmodel)?;
        let Some((b, c)) = select_kurtosis_channel(&records) else {
            continue;
        };
        let x = records[b].x_q().column(c)?;
        let r = records[b].residual().column(c)?;
        let (before, after) = slope_gap_analysis(&x, &r, 10.0, &BltTransform::new(3.0))?;
        println!("seed {seed}: block {b} channel {c}: slope gap {before:.4} -> {after:.4}");
    }
    Ok(())
}
