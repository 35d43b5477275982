//! The bipolar log transform: linear on [-2^-N, 2^-N], logarithmic outside.

use nbc::{BltTransform, TransformKind};

fn main() {
    for n in [-2.0, 0.0, 2.0, 5.0] {
        let t = BltTransform::new(n);
        println!(
            "N = {n:>4}: linear region [-{:.5}, {:.5}]",
            t.threshold(),
            t.threshold()
        );
        for x in [0.01, 0.5, 1.0, 16.0, 500.0, -500.0] {
            let v = t.forward(x);
            println!("  f({x:>7}) = {v:>9.4}   f^-1(f(x)) = {}", t.inverse(v));
        }
    }

    // Outliers get compressed, small values keep their ordering and spacing.
    let t = BltTransform::new(2.0);
    let xs = [0.1, 0.2, 10.0, 1000.0];
    let fx: Vec<String> = xs.iter().map(|&x| format!("{:.3}", t.forward(x))).collect();
    println!("spread {xs:?} -> [{}]", fx.join(", "));

    // The same interface covers the ablation transforms.
    for kind in [
        TransformKind::Asinh,
        TransformKind::TanhExperimental,
        TransformKind::blt(3.0),
    ] {
        let v = kind.forward(4.0);
        println!("{kind}: f(4) = {v:.4}, inverse {:?}", kind.inverse(v).ok());
    }
}
