use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array3;
use num_complex::Complex64;

use qmt_core::container::{load, save};
use qmt_core::data::{KSpaceSet, ParamMaps};
use qmt_core::metrics::nrmse;
use qmt_core::net::{init_params, NetSpec};
use qmt_core::phantom::KNEE_TE_MS;
use qmt_core::report::EvalReport;
use qmt_core::sampling::MaskSet;

fn qmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn qmt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qmt(dir, args);
    assert!(
        out.status.success(),
        "qmt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn phantom_is_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["phantom", "--ny", "64", "--nx", "64", "--seed", "7", "--out", "a.qmt"]);
    ok(p, &["phantom", "--ny", "64", "--nx", "64", "--seed", "7", "--out", "b.qmt"]);
    assert_eq!(std::fs::read(p.join("a.qmt")).unwrap(), std::fs::read(p.join("b.qmt")).unwrap());
    // Config echoes differ only in the output path they record.
    let a = std::fs::read_to_string(p.join("a.qmt.config.json")).unwrap();
    let b = std::fs::read_to_string(p.join("b.qmt.config.json")).unwrap();
    assert_eq!(a.replace("a.qmt", "b.qmt"), b);

    ok(p, &["phantom", "--ny", "64", "--nx", "64", "--seed", "8", "--out", "c.qmt"]);
    assert_ne!(std::fs::read(p.join("a.qmt")).unwrap(), std::fs::read(p.join("c.qmt")).unwrap());
}

fn simulate(p: &Path, r: &str) {
    ok(p, &["phantom", "--ny", "32", "--nx", "32", "--seed", "3", "--out", "truth.qmt"]);
    ok(p, &["mask", "--ny", "32", "--r", r, "--center-frac", "0.1", "--seed", "4", "--out", "masks.qmt"]);
    ok(p, &[
        "simulate", "--maps", "truth.qmt", "--masks", "masks.qmt", "--seed", "5", "--out", "k.qmt", "--out-full", "full.qmt",
    ]);
    ok(p, &["fit", "--echoes", "full.qmt", "--labels", "truth.qmt", "--out", "ref.qmt"]);
}

#[test]
fn simulate_recon_fit_eval_chain() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    simulate(p, "4");
    ok(p, &["recon", "--kspace", "k.qmt", "--method", "zf", "--out", "zf.qmt"]);
    ok(p, &["recon", "--kspace", "k.qmt", "--method", "llr", "--iters", "5", "--out", "llr.qmt"]);
    ok(p, &["fit", "--echoes", "zf.qmt", "--out", "zf_maps.qmt"]);
    ok(p, &["fit", "--echoes", "llr.qmt", "--out", "llr_maps.qmt"]);
    let printed = ok(p, &[
        "eval", "--reference", "ref.qmt", "--estimate", "zf@4=zf_maps.qmt", "--estimate", "llr@4=llr_maps.qmt", "--out",
        "report.csv", "--previews", "prev",
    ]);
    let report = EvalReport::load_csv(p.join("report.csv")).unwrap();
    for m in ["zf", "llr"] {
        let row = report.get(m, 4.0, "nrmse", "all").unwrap();
        assert!(row.value.is_finite() && row.value > 0.0);
        // The summary line shows the same percentage as the report.
        let line = printed.lines().find(|l| l.starts_with(m)).unwrap();
        assert!(line.contains(&format!("{:.2}%", row.value)), "{line} vs {}", row.value);
    }
    assert!(p.join("prev/eval_zf_r4_t2.pgm").exists());
    assert!(p.join("report.csv.config.json").exists());
    for f in ["truth.qmt", "masks.qmt", "k.qmt", "zf.qmt", "llr.qmt", "zf_maps.qmt"] {
        assert!(p.join(format!("{f}.config.json")).exists(), "{f}");
    }
}

#[test]
fn glr_without_penalty_at_full_sampling_matches_reference() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    simulate(p, "1");
    ok(p, &["recon", "--kspace", "k.qmt", "--method", "glr", "--lambda", "0", "--out", "glr.qmt"]);
    ok(p, &["fit", "--echoes", "glr.qmt", "--labels", "truth.qmt", "--out", "glr_maps.qmt"]);
    let est: ParamMaps = load(p.join("glr_maps.qmt")).unwrap();
    let reference: ParamMaps = load(p.join("ref.qmt")).unwrap();
    let e = nrmse(est.t2_ms(), reference.t2_ms(), reference.roi_labels()).unwrap();
    assert!(e < 1e-3, "nRMSE {e}");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(qmt(p, &["phantom", "--bogus"]).status.code(), Some(2));
    assert_eq!(qmt(p, &["recon", "--kspace", "k.qmt", "--method", "fista"]).status.code(), Some(2));
    assert_eq!(qmt(p, &["mask", "--ny", "32", "--r", "0.5"]).status.code(), Some(2));
    assert_eq!(qmt(p, &["fit", "--echoes", "missing.qmt"]).status.code(), Some(3));
    std::fs::write(p.join("junk.qmt"), b"not a container").unwrap();
    assert_eq!(qmt(p, &["fit", "--echoes", "junk.qmt"]).status.code(), Some(3));
    assert_eq!(qmt(p, &["--help"]).status.code(), Some(0));

    ok(p, &["phantom", "--ny", "32", "--nx", "32", "--out", "a.qmt"]);
    ok(p, &["phantom", "--ny", "16", "--nx", "16", "--out", "b.qmt"]);
    assert_eq!(qmt(p, &["eval", "--reference", "a.qmt", "--estimate", "x=b.qmt"]).status.code(), Some(2));

    // All-zero k-space has no peak to normalize by.
    let zeros = Array3::<Complex64>::zeros((8, 16, 16));
    save(p.join("zero_k.qmt"), &KSpaceSet::new(KNEE_TE_MS.to_vec(), zeros, MaskSet::full(16, 8)).unwrap()).unwrap();
    let net = init_params(&NetSpec::new(8).with_levels(2).with_base_filters(2), 1).unwrap();
    save(p.join("tiny.qmt"), &net).unwrap();
    assert_eq!(qmt(p, &["infer", "--params", "tiny.qmt", "--kspace", "zero_k.qmt"]).status.code(), Some(4));

    let bad = Command::new(env!("CARGO_BIN_EXE_qmt"))
        .current_dir(p)
        .env("QMT_THREADS", "zero")
        .args(["phantom", "--out", "t.qmt"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn thread_cap_does_not_change_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    simulate(p, "4");
    for (threads, out) in [("1", "a.qmt"), ("3", "b.qmt")] {
        let o = Command::new(env!("CARGO_BIN_EXE_qmt"))
            .current_dir(p)
            .env("QMT_THREADS", threads)
            .args(["recon", "--kspace", "k.qmt", "--method", "llr", "--iters", "3", "--out", out])
            .output()
            .unwrap();
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(p.join("a.qmt")).unwrap(), std::fs::read(p.join("b.qmt")).unwrap());
}

#[test]
fn train_then_infer() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let args = [
        "train", "--ny", "32", "--nx", "32", "--n-train", "3", "--n-val", "1", "--epochs", "2", "--levels", "2",
        "--base-filters", "4", "--library-size", "4", "--center-frac", "0.1", "--seed", "9",
    ];
    let mut a = args.to_vec();
    a.extend(["--out", "net_a.qmt"]);
    ok(p, &a);
    let mut b = args.to_vec();
    b.extend(["--out", "net_b.qmt"]);
    ok(p, &b);
    assert_eq!(std::fs::read(p.join("net_a.qmt")).unwrap(), std::fs::read(p.join("net_b.qmt")).unwrap());
    assert_eq!(
        std::fs::read(p.join("net_a.qmt.history.csv")).unwrap(),
        std::fs::read(p.join("net_b.qmt.history.csv")).unwrap()
    );

    simulate(p, "5");
    ok(p, &["infer", "--params", "net_a.qmt", "--kspace", "k.qmt", "--labels", "truth.qmt", "--out", "cnn.qmt"]);
    let est: ParamMaps = load(p.join("cnn.qmt")).unwrap();
    assert_eq!(est.dim(), (32, 32));
    assert!(est.t2_ms().iter().all(|t| t.is_finite()));

    // A net trained for 32x32 inputs with 2 levels cannot take odd sizes.
    ok(p, &["phantom", "--ny", "31", "--nx", "31", "--out", "t31.qmt"]);
    ok(p, &["mask", "--ny", "31", "--r", "3", "--center-frac", "0.1", "--out", "m31.qmt"]);
    ok(p, &["simulate", "--maps", "t31.qmt", "--masks", "m31.qmt", "--out", "k31.qmt"]);
    assert_eq!(qmt(p, &["infer", "--params", "net_a.qmt", "--kspace", "k31.qmt"]).status.code(), Some(2));
}
