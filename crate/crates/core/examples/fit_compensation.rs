//! Fit linear and bipolar-log compensation on one synthetic block record
//! where a few tokens carry large inputs and large errors.

use nbc::harness::split_error_metrics;
use nbc::{compute_feature_loss, fit_linear, fit_nbc, CalibrationRecord, Tensor, TransformKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nbc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rows, d) = (400, 4);
    let mut x = Vec::with_capacity(rows * d);
    let mut y = Vec::with_capacity(rows * d);
    let mut y_q = Vec::with_capacity(rows * d);
    for i in 0..rows {
        let outlier = i % 20 == 0;
        for j in 0..d {
            let v: f64 = if outlier && j == 0 {
                40.0 * rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-1.0..1.0)
            };
            // Quantization error grows sublinearly with the input magnitude.
            let err = 0.05 * v.signum() * v.abs().sqrt() + rng.random_range(-0.01..0.01);
            let out = 0.5 * v;
            x.push(v);
            y.push(out);
            y_q.push(out - err);
        }
    }
    let rec = CalibrationRecord::new(
        Tensor::matrix(rows, d, x)?,
        Tensor::matrix(rows, d, y)?,
        Tensor::matrix(rows, d, y_q)?,
    )?;

    let base = compute_feature_loss(rec.y(), rec.y_q())?;
    println!("uncompensated feature loss {base:.6}");
    let linear = fit_linear(&rec, 0.0)?;
    let candidates = [
        ("linear", linear),
        ("nbc N=2", fit_nbc(&rec, TransformKind::blt(2.0), 0.0)?),
    ];
    for (name, m) in candidates {
        let out = m.apply(rec.x_q(), rec.y_q())?;
        let loss = compute_feature_loss(rec.y(), &out)?;
        let (mae_out, mae_in) = split_error_metrics(rec.y(), &out, rec.x_q(), 10.0)?;
        println!(
            "{name:>8}: feature loss {loss:.6}, mae outlier {:.4}, mae inlier {:.4}, ridge {}",
            mae_out.unwrap_or(f64::NAN),
            mae_in.unwrap_or(f64::NAN),
            m.fit_info().map_or(0.0, |f| f.ridge_used)
        );
    }
    Ok(())
}
