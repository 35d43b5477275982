//! Uniform affine quantization, per tensor for activations and per output
//! row for weights.

use nbc::quantizer::fake_quantize;
use nbc::{calibrate_params, dequantize, quantize, quantize_per_channel, Tensor};

fn main() -> nbc::Result<()> {
    let x = Tensor::vector(vec![-1.3, -0.2, 0.0, 0.37, 0.9, 2.4]);
    for bits in [2, 4, 8] {
        let p = calibrate_params(&x, bits)?;
        let q = quantize(&x, p);
        let back = dequantize(&q);
        let worst = x.sub(&back)?.max_abs();
        println!(
            "{bits} bits: scale {:.4}, zero point {}, codes {:?}, max error {worst:.4} (bound {:.4})",
            p.scale(),
            p.zero_point(),
            q.codes(),
            p.scale() / 2.0
        );
    }

    // Inputs outside the calibration range clip to the end codes.
    let p = calibrate_params(&x, 4)?;
    println!(
        "clipped: {:?}",
        fake_quantize(&Tensor::vector(vec![-10.0, 10.0]), p).data()
    );

    let w = Tensor::from_rows(&[[0.02, -0.01, 0.03], [4.0, -2.0, 1.0]])?;
    let wq = dequantize(&quantize_per_channel(&w, 4)?);
    for i in 0..2 {
        println!("row {i}: {:?} -> {:?}", w.row(i), wq.row(i));
    }
    Ok(())
}
