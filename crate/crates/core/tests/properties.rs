mod common;

use std::collections::HashSet;

use common::{blt_ref, brute_force_slope};
use nbc::compensation::Storage;
use nbc::format::{decode_bundle, decode_tensor, encode_bundle, encode_tensor, Dtype};
use nbc::harness::ols_scalar_bias;
use nbc::numerics::encode_f16_roundtrip;
use nbc::{
    calibrate_params, compute_feature_loss, dequantize, fit_linear, fit_nbc, fls_search, holdout_split, matmul,
    quantize, solve_least_squares, store_params, BltTransform, CalibrationRecord, FlsConfig, Tensor, Termination,
    TransformKind,
};
use proptest::prelude::*;

fn augmented_residual_products(x: &Tensor, y: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, p) = x.shape2().unwrap();
    let q = y.row_len();
    let mut out = vec![0.0; (p + 1) * q];
    for i in 0..n {
        for o in 0..q {
            let pred: f64 = (0..p).map(|j| w.get2(o, j) * x.get2(i, j)).sum::<f64>() + b.data()[o];
            let res = y.get2(i, o) - pred;
            for j in 0..p {
                out[j * q + o] += x.get2(i, j) * res;
            }
            out[p * q + o] += res;
        }
    }
    out
}

fn dims3() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..7, 1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative((m, k, n, p) in dims3(), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a = Tensor::matrix(m, k, common::random_matrix(&mut r, m, k, 2.0)).unwrap();
        let b = Tensor::matrix(k, n, common::random_matrix(&mut r, k, n, 2.0)).unwrap();
        let c = Tensor::matrix(n, p, common::random_matrix(&mut r, n, p, 2.0)).unwrap();
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn lstsq_residual_is_orthogonal_to_design(p in 1usize..6, q in 1usize..4, extra in 2usize..40, seed in any::<u64>()) {
        let rows = p + extra;
        let mut r = common::rng(seed);
        let x = Tensor::matrix(rows, p, common::random_matrix(&mut r, rows, p, 3.0)).unwrap();
        let y = Tensor::matrix(rows, q, common::random_matrix(&mut r, rows, q, 3.0)).unwrap();
        let sol = solve_least_squares(&x, &y, 0.0).unwrap();
        for v in augmented_residual_products(&x, &y, &sol.weight, &sol.bias) {
            prop_assert!(v.abs() <= 1e-8, "{v}");
        }
    }

    #[test]
    fn lstsq_is_exact_on_consistent_systems(p in 1usize..6, q in 1usize..4, extra in 2usize..40, seed in any::<u64>()) {
        let rows = p + extra;
        let mut r = common::rng(seed);
        let x = Tensor::matrix(rows, p, common::random_matrix(&mut r, rows, p, 3.0)).unwrap();
        let w = common::random_matrix(&mut r, q, p, 2.0);
        let b = common::random_matrix(&mut r, 1, q, 2.0);
        let mut y = vec![0.0; rows * q];
        for i in 0..rows {
            for o in 0..q {
                y[i * q + o] = (0..p).map(|j| w[o * p + j] * x.get2(i, j)).sum::<f64>() + b[o];
            }
        }
        let sol = solve_least_squares(&x, &Tensor::matrix(rows, q, y).unwrap(), 0.0).unwrap();
        prop_assert!(sol.residual_rms <= 1e-10);
        prop_assert!(common::max_abs_diff(sol.weight.data(), &w) < 1e-8);
    }

    #[test]
    fn f16_roundtrip_is_idempotent(v in prop::collection::vec(-6.0e4..6.0e4f64, 1..64)) {
        let t = Tensor::vector(v);
        let once = encode_f16_roundtrip(&t).unwrap();
        let twice = encode_f16_roundtrip(&once).unwrap();
        let a: Vec<u64> = once.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = twice.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantizer_roundtrip_error_is_half_a_step(
        bits in 2u32..=8,
        lo in -100.0..0.0f64,
        hi in 0.0..100.0f64,
        inner in prop::collection::vec(0.0..1.0f64, 1..50),
    ) {
        // Ranges that contain zero keep the zero point inside the code range.
        let mut xs: Vec<f64> = inner.iter().map(|u| lo + u * (hi - lo)).collect();
        xs.push(lo);
        xs.push(hi);
        let t = Tensor::vector(xs.clone());
        let p = calibrate_params(&t, bits).unwrap();
        let back = dequantize(&quantize(&t, p));
        for (x, y) in xs.iter().zip(back.data()) {
            prop_assert!((x - y).abs() <= p.scale() / 2.0 + 1e-12, "x={x} y={y} s={}", p.scale());
        }
    }

    #[test]
    fn quantizer_codes_are_idempotent_monotone_and_in_range(
        bits in 2u32..=8,
        calib in prop::collection::vec(-50.0..50.0f64, 2..30),
        probes in prop::collection::vec(prop_oneof![-1e300..1e300f64, -100.0..100.0f64], 2..40),
    ) {
        let p = calibrate_params(&Tensor::vector(calib), bits).unwrap();
        let qmax = (1u32 << bits) - 1;
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        let q = quantize(&Tensor::vector(sorted), p);
        let codes = q.codes().to_vec();
        prop_assert!(codes.iter().all(|&c| c as u32 <= qmax));
        prop_assert!(codes.windows(2).all(|w| w[0] <= w[1]));
        let again = quantize(&dequantize(&q), p);
        prop_assert_eq!(again.codes(), &codes[..]);
    }

    #[test]
    fn blt_is_an_odd_monotone_bijection(n in -10.0..10.0f64, a in -1e6..1e6f64, b in -1e6..1e6f64) {
        let t = BltTransform::new(n);
        for x in [a, b, a * 1e-6, b * 1e-9] {
            let back = t.inverse(t.forward(x));
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
            prop_assert_eq!(t.forward(-x).to_bits(), (-t.forward(x)).to_bits());
        }
        if a < b {
            prop_assert!(t.forward(a) < t.forward(b));
        }
    }

    #[test]
    fn blt_partitions_its_range(n in -10.0..10.0f64, u in -1.0..1.0f64, g in 1.0001..1e4f64) {
        let t = BltTransform::new(n);
        let th = t.threshold();
        let inside = t.forward(u * th);
        prop_assert!((-1.0..=1.0).contains(&inside));
        prop_assert!(t.forward(g * th) > 1.0);
        prop_assert!(t.forward(-g * th) < -1.0);
        prop_assert!((t.forward(th) - 1.0).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn nbc_equals_linear_inside_the_linear_region(
        n in -6.0..6.0f64,
        d_in in 1usize..6,
        d_out in 1usize..6,
        extra in 2usize..30,
        seed in any::<u64>(),
    ) {
        let rows = d_in + extra;
        let th = (-n).exp2();
        let mut r = common::rng(seed);
        let x = common::random_matrix(&mut r, rows, d_in, th);
        let y = common::random_matrix(&mut r, rows, d_out, th / 2.0);
        let yq = common::random_matrix(&mut r, rows, d_out, th / 2.0);
        let rec = CalibrationRecord::new(
            Tensor::matrix(rows, d_in, x).unwrap(),
            Tensor::matrix(rows, d_out, y).unwrap(),
            Tensor::matrix(rows, d_out, yq).unwrap(),
        ).unwrap();
        let lin = fit_linear(&rec, 0.0).unwrap().apply(rec.x_q(), rec.y_q()).unwrap();
        let nbc = fit_nbc(&rec, TransformKind::blt(n), 0.0).unwrap().apply(rec.x_q(), rec.y_q()).unwrap();
        prop_assert!(common::max_abs_diff(lin.data(), nbc.data()) <= 1e-9);
    }

    #[test]
    fn fits_satisfy_normal_equations_and_never_worsen(
        d_in in 1usize..6,
        d_out in 1usize..6,
        extra in 2usize..40,
        n in -3.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let rows = d_in + extra;
        let mut r = common::rng(seed);
        let x = Tensor::matrix(rows, d_in, common::random_matrix(&mut r, rows, d_in, 10.0)).unwrap();
        let y = Tensor::matrix(rows, d_out, common::random_matrix(&mut r, rows, d_out, 4.0)).unwrap();
        let yq = Tensor::matrix(rows, d_out, common::random_matrix(&mut r, rows, d_out, 4.0)).unwrap();
        let rec = CalibrationRecord::new(x.clone(), y.clone(), yq.clone()).unwrap();

        let lin = fit_linear(&rec, 0.0).unwrap();
        for v in augmented_residual_products(&x, &rec.residual(), &lin.weight(), lin.bias()) {
            prop_assert!(v.abs() <= 1e-8);
        }
        let base = compute_feature_loss(&y, &yq).unwrap();
        let after = compute_feature_loss(&y, &lin.apply(&x, &yq).unwrap()).unwrap();
        prop_assert!(after <= base + 1e-12);

        // NBC minimizes in the transformed space, so the guarantee holds there.
        let kind = TransformKind::blt(n);
        let m = fit_nbc(&rec, kind, 0.0).unwrap();
        let fx = x.map(|v| blt_ref(v, n));
        let fr = rec.residual().map(|v| blt_ref(v, n));
        for v in augmented_residual_products(&fx, &fr, &m.weight(), m.bias()) {
            prop_assert!(v.abs() <= 1e-8 * fr.max_abs().max(1.0) * fx.max_abs().max(1.0));
        }
        let zero = Tensor::zeros(&[rows, d_out]);
        let pred = matmul(&fx, &m.weight().transpose().unwrap()).unwrap().add_row_vector(m.bias().data()).unwrap();
        prop_assert!(compute_feature_loss(&fr, &pred).unwrap() <= compute_feature_loss(&fr, &zero).unwrap() + 1e-12);
    }

    #[test]
    fn scalar_bias_formula_matches_fitted_slope(
        n in 2usize..80,
        kf in 0.0..1.0f64,
        small in 0.01..3.0f64,
        ratio in 1.0..1000.0f64,
        ro in -10.0..10.0f64,
        rn in -10.0..10.0f64,
    ) {
        let k = ((n as f64) * kf) as usize;
        let big = small * ratio;
        let formula = ols_scalar_bias(k, n, big, small, ro, rn).unwrap();
        let mut x = Vec::new();
        let mut res = Vec::new();
        for i in 0..n {
            let (m, v) = if i < k { (big, ro) } else { (small, rn) };
            x.push(m);
            res.push(v);
        }
        prop_assert!((formula - brute_force_slope(&x, &res)).abs() <= 1e-10);

        // Mirroring every point centres the data, so the fitted intercept
        // vanishes and the fitted slope is the no-bias slope.
        let mut xm = x.clone();
        let mut rm = res.clone();
        xm.extend(x.iter().map(|v| -v));
        rm.extend(res.iter().map(|v| -v));
        let rows = xm.len();
        let sol = solve_least_squares(
            &Tensor::matrix(rows, 1, xm).unwrap(),
            &Tensor::matrix(rows, 1, rm).unwrap(),
            0.0,
        ).unwrap();
        prop_assert!((sol.weight.data()[0] - formula).abs() <= 1e-10 * formula.abs().max(1.0));
    }

    #[test]
    fn fls_respects_grid_and_certifies_its_minimum(
        k_init in -8i64..8,
        step in prop_oneof![Just(0.25), Just(0.5), Just(1.0), Just(1.5), Just(2.0)],
        table in prop::collection::vec(0.0..10.0f64, 200),
    ) {
        let cfg = FlsConfig { n_init: step * k_init as f64 / 2.0, step, ..FlsConfig::default() };
        prop_assume!(cfg.validate().is_ok());
        let (k_lo, k_hi) = cfg.grid_bounds();
        let key = |n: f64| ((n - cfg.n_init) / step).round() as i64;
        let res = fls_search(&cfg, |n| Ok(table[(key(n) - k_lo) as usize])).unwrap();

        let mut seen = HashSet::new();
        for &(n, _) in &res.history {
            let k = key(n);
            prop_assert!((k_lo..=k_hi).contains(&k));
            prop_assert_eq!(n, cfg.grid_point(k));
            prop_assert!(n >= cfg.n_min - 1e-9 && n <= cfg.n_max + 1e-9);
            prop_assert!(seen.insert(k), "N = {} evaluated twice", n);
        }
        prop_assert!(res.evaluations <= cfg.grid_cardinality());
        prop_assert_eq!(res.evaluations, res.history.len());

        let loss = |k: i64| res.loss_at(cfg.grid_point(k));
        if res.terminated_by == Termination::LocalMinimum {
            let certified = res.history.iter().any(|&(n, l)| {
                let k = key(n);
                matches!((loss(k - 1), loss(k + 1)), (Some(a), Some(b)) if l < a && l < b)
            });
            prop_assert!(certified);
        }
        let global = (k_lo..=k_hi).map(|k| table[(k - k_lo) as usize]).fold(f64::INFINITY, f64::min);
        prop_assert!(res.chosen_loss() >= global);
        let best_seen = res.history.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(res.chosen_loss(), best_seen);
    }

    #[test]
    fn holdout_split_partitions_in_order(n in 2usize..300, frac in 0.01..0.99f64, seed in any::<u64>()) {
        let cfg = FlsConfig { holdout_fraction: frac, seed, ..FlsConfig::default() };
        let items: Vec<usize> = (0..n).collect();
        let (fit, hold) = holdout_split(&items, &cfg).unwrap();
        let want = ((n as f64 * frac).floor() as usize).clamp(1, n - 1);
        prop_assert_eq!(hold.len(), want);
        prop_assert_eq!(fit.len() + hold.len(), n);
        prop_assert!(fit.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(hold.windows(2).all(|w| w[0] < w[1]));
        let all: HashSet<usize> = fit.iter().chain(&hold).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(holdout_split(&items, &cfg).unwrap(), (fit, hold));
    }

    #[test]
    fn tensor_files_roundtrip_bit_exactly(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let v = common::random_matrix(&mut r, rows, cols, 1e3);
        let t = Tensor::matrix(rows, cols, v).unwrap();
        let bytes = encode_tensor(&t, Dtype::F64).unwrap();
        let (back, dt) = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(dt, Dtype::F64);
        prop_assert_eq!(back.dims(), t.dims());
        let a: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);

        let h = encode_f16_roundtrip(&t.scale(1e-2)).unwrap();
        let (back16, _) = decode_tensor(&encode_tensor(&h, Dtype::F16).unwrap()).unwrap();
        prop_assert_eq!(back16, h);
    }

    #[test]
    fn bundles_roundtrip_for_every_storage(d in 1usize..6, blocks in 1usize..4, n in -4.0..4.0f64, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        for storage in [Storage::F64, Storage::F32, Storage::F16, Storage::I8PerChannel] {
            let mods: Vec<_> = (0..blocks).map(|i| {
                let kind = if i % 2 == 0 { TransformKind::blt(n) } else { TransformKind::Identity };
                let w = Tensor::matrix(d, d, common::random_matrix(&mut r, d, d, 1.0)).unwrap();
                let b = Tensor::vector(common::random_matrix(&mut r, 1, d, 1.0));
                store_params(&nbc::CompensationModule::new(kind, w, b).unwrap(), storage).unwrap()
            }).collect();
            let bytes = encode_bundle(&mods).unwrap();
            let back = decode_bundle(&bytes).unwrap();
            prop_assert_eq!(&back, &mods);
            prop_assert_eq!(encode_bundle(&back).unwrap(), bytes);
        }
    }
}
