use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbc::cli::report_csv_header;
use nbc::format::{decode_bundle, encode_tensor, read_tensor, Dtype, BUNDLE_MAGIC};
use nbc::{FormatError, NbcError, Tensor};
use sha2::{Digest, Sha256};

const SMALL: &str = "\
# small desk run
d = 16
h = 32
n_samples = 96
seed = 7
";

fn nbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbc"))
        .args(args)
        .env_remove("NBC_LOG")
        .output()
        .expect("spawn nbc")
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(bytes: &[u8]) -> Vec<u8> {
    Sha256::digest(bytes).to_vec()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn calibrate_and_eval_are_reproducible() {
    let (dir, cfg) = setup("");
    let mut digests = Vec::new();
    for run in 0..2 {
        let bundle = dir.path().join(format!("b{run}.nbcb"));
        let cal = nbc(&["calibrate", "--config", s(&cfg), "--out", s(&bundle)]);
        assert!(cal.status.success(), "{}", stderr(&cal));
        assert!(stdout(&cal).starts_with("block\tkind\tn_exp\tstorage\tridge_used\tresidual_rms\n"));
        let bytes = std::fs::read(&bundle).unwrap();
        assert_eq!(&bytes[..4], &BUNDLE_MAGIC);
        assert_eq!(decode_bundle(&bytes).unwrap().len(), 4);

        let ev = nbc(&["eval", s(&bundle), "--config", s(&cfg)]);
        assert!(ev.status.success(), "{}", stderr(&ev));
        let text = stdout(&ev);
        assert_eq!(text.lines().next().unwrap(), report_csv_header(4));
        assert!(text.lines().nth(1).unwrap().starts_with("nbc,"));
        let mut all = bytes.clone();
        all.extend(ev.stdout);
        all.extend(cal.stdout);
        digests.push(digest(&all));
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn eval_writes_to_out_and_infers_linear_bundles() {
    let (dir, cfg) = setup("mode = linear\n");
    let bundle = dir.path().join("lin.nbcb");
    assert!(nbc(&["calibrate", "--config", s(&cfg), "--out", s(&bundle)])
        .status
        .success());
    let csv = dir.path().join("report.csv");
    let ev = nbc(&["eval", s(&bundle), "--config", s(&cfg), "--out", s(&csv)]);
    assert!(ev.status.success());
    assert!(ev.stdout.is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("linear,"));
}

#[test]
fn search_n_prints_sorted_map_and_choice() {
    let (_dir, cfg) = setup("");
    let out = nbc(&["search-n", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    let (last, map) = lines.split_last().unwrap();
    let ns: Vec<f64> = map
        .iter()
        .map(|l| {
            let (n, loss) = l.split_once('\t').unwrap();
            assert!(loss.parse::<f64>().unwrap() >= 0.0);
            n.parse().unwrap()
        })
        .collect();
    assert!(ns.len() >= 3);
    assert!(ns.windows(2).all(|w| w[0] < w[1]));
    let chosen: f64 = last.strip_prefix("chosen\t").unwrap().parse().unwrap();
    assert!(ns.contains(&chosen));
}

#[test]
fn analyze_outliers_writes_two_csvs() {
    let (dir, cfg) = setup("seeds = 7, 8\nfixed_n = 3\n");
    let out_dir = dir.path().join("analysis");
    let out = nbc(&["analyze-outliers", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let gaps = std::fs::read_to_string(out_dir.join("slope_gap.csv")).unwrap();
    assert_eq!(
        gaps.lines().next().unwrap(),
        "seed,block,channel,n_exp,gap_before,gap_after"
    );
    let sweep = std::fs::read_to_string(out_dir.join("w_star_sweep.csv")).unwrap();
    let row = sweep.lines().find(|l| l.starts_with("1,4,10,")).unwrap();
    let w: f64 = row.split(',').nth(6).unwrap().parse().unwrap();
    assert!((w - 3.0 / 103.0).abs() < 1e-15);
}

#[test]
fn export_writes_readable_tensors() {
    let (dir, cfg) = setup("storage = i8\n");
    let bundle = dir.path().join("q.nbcb");
    assert!(nbc(&["calibrate", "--config", s(&cfg), "--out", s(&bundle)])
        .status
        .success());
    let out_dir = dir.path().join("export");
    let out = nbc(&["export", s(&bundle), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let modules = decode_bundle(&std::fs::read(&bundle).unwrap()).unwrap();
    for (i, m) in modules.iter().enumerate() {
        let (w, dt) = read_tensor(&out_dir.join(format!("block{i}_weight.nbct"))).unwrap();
        assert_eq!(dt, Dtype::F64);
        assert_eq!(w, m.weight());
    }
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
}

#[test]
fn config_and_usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = nbc(&["calibrate", "--config", s(&missing), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error[config]:") && err.contains("nope.cfg"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let (_d, cfg) = setup("learning_rate = 0.1\n");
    let out = nbc(&["eval", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));

    let (_d, cfg) = setup("bits_w = 16\n");
    assert_eq!(nbc(&["eval", "--config", s(&cfg)]).status.code(), Some(2));

    assert_eq!(nbc(&["frobnicate"]).status.code(), Some(2));

    let (_d, cfg) = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_nbc"))
        .args(["search-n", "--config", s(&cfg)])
        .env("NBC_LOG", "verbose")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_bundles_fail_with_a_named_error() {
    let (dir, cfg) = setup("");
    let bundle = dir.path().join("b.nbcb");
    assert!(nbc(&["calibrate", "--config", s(&cfg), "--out", s(&bundle)])
        .status
        .success());
    let bytes = std::fs::read(&bundle).unwrap();

    let edit = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        f(&mut b);
        b
    };
    let cases = [
        (edit(&|b| b[..4].copy_from_slice(b"XXXX")), "bad-magic"),
        (edit(&|b| b[4] = 9), "bad-version"),
        (edit(&|b| b.truncate(b.len() - 3)), "truncated"),
        (edit(&|b| b.push(0)), "trailing-bytes"),
    ];
    for (data, kind) in cases {
        let path = dir.path().join("corrupt.nbcb");
        std::fs::write(&path, data).unwrap();
        let out = nbc(&["eval", s(&path), "--config", s(&cfg)]);
        assert_eq!(out.status.code(), Some(1), "{kind}");
        assert!(stderr(&out).starts_with(&format!("error[{kind}]")), "{}", stderr(&out));
    }
}

#[test]
fn tensor_decoding_rejects_corruption() {
    let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let good = encode_tensor(&t, Dtype::F32).unwrap();
    assert_eq!(nbc::format::decode_tensor(&good).unwrap(), (t, Dtype::F32));

    let check = |bytes: &[u8], want: FormatError| match nbc::format::decode_tensor(bytes) {
        Err(NbcError::Format(e)) => assert_eq!(e, want),
        other => panic!("expected {want:?}, got {other:?}"),
    };
    let mut b = good.clone();
    b[..4].copy_from_slice(b"XXXX");
    check(
        &b,
        FormatError::BadMagic {
            expected: *b"NBCT",
            found: *b"XXXX",
        },
    );
    let mut b = good.clone();
    b[5] = 7;
    check(&b, FormatError::BadDtype(7));
    let header = 8 + 2 * 8;
    check(
        &good[..good.len() - 1],
        FormatError::Truncated {
            expected: header + 24,
            actual: header + 23,
        },
    );
}
