//! End-to-end runs of the `bdps` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blind_dps::cli::manifest::Manifest;
use serde_json::Value;

fn bdps(dir: &Path, args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bdps"));
    cmd.current_dir(dir).args(args);
    match threads {
        Some(n) => cmd.env("BDPS_THREADS", n.to_string()),
        None => cmd.env_remove("BDPS_THREADS"),
    };
    cmd.output().expect("spawn bdps")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bdps(dir, args, None);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not a JSON error record ({e}): {text}"))
}

fn manifest(path: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const STEPS: &str = "schedule.n_steps=40";

/// Dataset, two small models, a kernel and a measurement.
fn prepare(dir: &Path) {
    ok(dir, &["gen-dataset", "--kind", "mixed", "--size", "8", "--count", "64", "--seed", "1", "--out", "imgs"]);
    ok(
        dir,
        &["gen-dataset", "--kind", "motion-kernel", "--size", "5", "--count", "64", "--seed", "2", "--out", "kers"],
    );
    for (data, model) in [("imgs", "img.bin"), ("kers", "ker.bin")] {
        ok(
            dir,
            &[
                "train-score",
                "--dataset",
                data,
                "--out",
                model,
                "--set",
                STEPS,
                "--set",
                "train.epochs=1",
                "--set",
                "train.hidden=[16]",
            ],
        );
    }
    ok(dir, &["gen-kernel", "--kind", "motion", "--size", "5", "--seed", "3", "--out", "k.pfm"]);
    ok(dir, &["degrade", "--image", "imgs/item_00000.pfm", "--kernel", "k.pfm", "--seed", "4", "--out", "y.pfm"]);
}

fn solve(dir: &Path, out: &str, threads: usize) {
    let res = bdps(
        dir,
        &[
            "solve",
            "--method",
            "blind-deblur",
            "--measurement",
            "y.pfm",
            "--image-model",
            "img.bin",
            "--kernel-model",
            "ker.bin",
            "--truth-image",
            "imgs/item_00000.pfm",
            "--truth-kernel",
            "k.pfm",
            "--seeds",
            "0..4",
            "--set",
            STEPS,
            "--out",
            out,
        ],
        Some(threads),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

fn output_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = manifest(&dir.join("manifest.json"))
        .outputs
        .into_iter()
        .map(|a| (Path::new(&a.path).file_name().unwrap().to_string_lossy().into_owned(), a.sha256))
        .collect();
    v.sort();
    v
}

#[test]
fn solve_is_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    solve(dir, "a", 1);
    solve(dir, "b", 4);
    solve(dir, "c", 4);
    for seed in 0..4 {
        let s = format!("seed_{seed}");
        let a = output_hashes(&dir.join("a").join(&s));
        assert_eq!(a, output_hashes(&dir.join("b").join(&s)), "{s}");
        assert_eq!(a, output_hashes(&dir.join("c").join(&s)), "{s}");
        assert!(a.iter().any(|(n, _)| n == "x0.pfm") && a.iter().any(|(n, _)| n == "k0.pfm"));
    }
    let (s0, s1) = (output_hashes(&dir.join("a/seed_0")), output_hashes(&dir.join("a/seed_1")));
    assert_ne!(s0, s1, "different seeds gave identical outputs");
}

#[test]
fn manifests_hash_what_is_on_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    solve(dir, "run", 2);
    let m = manifest(&dir.join("run/seed_2/manifest.json"));
    assert_eq!(m.command, "solve");
    assert_eq!(m.seed, Some(2));
    assert!(!m.inputs.is_empty() && !m.outputs.is_empty());
    for art in m.inputs.iter().chain(&m.outputs) {
        let fresh = blind_dps::cli::manifest::Artifact::of(&dir.join(&art.path)).unwrap();
        assert_eq!(fresh.sha256, art.sha256, "{}", art.path);
        assert_eq!(fresh.bytes, art.bytes);
    }
    assert_eq!(m.config["schedule"]["n_steps"], 40);

    let top = manifest(&dir.join("run/manifest.json"));
    assert_eq!(top.outputs.len(), 4);
    let ds = manifest(&dir.join("imgs/manifest.json"));
    assert_eq!(ds.outputs.len(), 64);
    let train = manifest(&dir.join("img.bin.manifest.json"));
    assert_eq!(train.inputs.len(), 64);
    assert_eq!(train.extra["loss_history"].as_array().unwrap().len(), 1);
}

#[test]
fn evaluate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    solve(dir, "run", 2);
    let eval = |out: &str| {
        ok(
            dir,
            &[
                "evaluate",
                "--run",
                "run/seed_0",
                "--truth-image",
                "imgs/item_00000.pfm",
                "--truth-kernel",
                "k.pfm",
                "--out",
                out,
            ],
        );
        std::fs::read(dir.join(out)).unwrap()
    };
    let (a, b) = (eval("m1.json"), eval("m2.json"));
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    for key in ["psnr", "mnc", "mse_kernel", "final_residual", "argmin_kernel_mse_step", "config_hash"] {
        assert!(!v[key].is_null(), "{key} missing");
    }
    let mnc = v["mnc"].as_f64().unwrap();
    assert!((0.0..=1.0 + 1e-12).contains(&mnc));
}

#[test]
fn tilt_pipeline_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    ok(dir, &["gen-tilt", "--height", "8", "--width", "8", "--grid-n", "4", "--seed", "5", "--out", "t/phi"]);
    assert!(dir.join("t/phi_dx.pfm").exists() && dir.join("t/phi_dy.pfm").exists());
    ok(dir, &["degrade", "--image", "imgs/item_00001.pfm", "--kernel", "k.pfm", "--tilt", "t/phi", "--out", "yt.pfm"]);
    ok(
        dir,
        &[
            "solve",
            "--method",
            "blind-turbulence",
            "--measurement",
            "yt.pfm",
            "--image-model",
            "img.bin",
            "--kernel-model",
            "ker.bin",
            "--tilt",
            "t/phi",
            "--seeds",
            "0",
            "--set",
            STEPS,
            "--out",
            "tr",
        ],
    );
    assert!(dir.join("tr/seed_0/phi0_dx.pfm").exists());
}

#[test]
fn analyze_gap_writes_one_row_per_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "analyze-gap",
            "--sigmas",
            "0.5,1",
            "--steps",
            "5,20,40",
            "--n-mc",
            "200",
            "--set",
            STEPS,
            "--out",
            "gap.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.join("gap.csv")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], blind_dps::analysis::GAP_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 6);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 10);
        assert!(l.split(',').all(|f| f.parse::<f64>().is_ok()), "{l}");
    }
}

fn write_json(path: PathBuf, v: Value) {
    std::fs::write(path, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let usage = bdps(dir, &["solve", "--bogus"], None);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_record(&usage)["error"]["class"], "usage");

    let bad_override = bdps(dir, &["analyze-gap", "--out", "g.csv", "--set", "schedule.nope=1"], None);
    assert_eq!(bad_override.status.code(), Some(2));
    assert_eq!(error_record(&bad_override)["error"]["class"], "config");

    let missing = bdps(dir, &["degrade", "--image", "absent.pfm", "--kernel", "k.pfm", "--out", "y.pfm"], None);
    assert_eq!(missing.status.code(), Some(3));
    let rec = error_record(&missing);
    assert_eq!(rec["error"]["exit_code"], 3);
    assert!(rec["error"]["message"].as_str().unwrap().contains("absent.pfm"));

    let gauss = serde_json::json!({"kind": "gaussian", "shape": [2, 2], "mean": vec![0.0; 4], "var": vec![1.0; 4]});
    let gmm = serde_json::json!({"kind": "gmm", "shape": [2, 2], "components": [
        {"weight": 1.0, "mean": vec![0.0; 4], "var": vec![1.0; 4]}
    ]});
    write_json(dir.join("g.json"), gauss);
    write_json(dir.join("m.json"), gmm);
    let cap = bdps(
        dir,
        &["analyze-gap", "--image-prior", "m.json", "--kernel-prior", "g.json", "--steps", "5", "--out", "g.csv"],
        None,
    );
    assert_eq!(cap.status.code(), Some(5), "{}", String::from_utf8_lossy(&cap.stderr));
    assert_eq!(error_record(&cap)["error"]["class"], "capability");

    // A huge measurement and step size drive the chain to infinity.
    write_json(
        dir.join("big.json"),
        serde_json::json!({"kind": "gaussian", "shape": [4, 4], "mean": vec![0.0; 16], "var": vec![1.0; 16]}),
    );
    let y = blind_dps::SignalGrid::filled(&[4, 4], 3e38);
    blind_dps::forward::pfm::save_pfm(&y, &dir.join("huge.pfm")).unwrap();
    ok(dir, &["gen-kernel", "--kind", "gaussian", "--size", "3", "--std", "0.7", "--out", "k.pfm"]);
    let div = bdps(
        dir,
        &[
            "solve",
            "--method",
            "dps",
            "--measurement",
            "huge.pfm",
            "--image-model",
            "big.json",
            "--kernel",
            "k.pfm",
            "--set",
            "schedule.n_steps=10",
            "--set",
            "guidance.fidelity=squared_norm",
            "--set",
            "guidance.step_size=1e30",
            "--out",
            "d",
        ],
        None,
    );
    assert_eq!(div.status.code(), Some(4), "{}", String::from_utf8_lossy(&div.stderr));
    assert_eq!(error_record(&div)["error"]["class"], "divergence");

    let threads = bdps(
        dir,
        &[
            "solve",
            "--method",
            "dps",
            "--measurement",
            "huge.pfm",
            "--image-model",
            "big.json",
            "--kernel",
            "k.pfm",
            "--out",
            "d",
        ],
        Some(0),
    );
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bdps(tmp.path(), &["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-kernel", "solve", "evaluate", "analyze-gap", "sample-prior"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
