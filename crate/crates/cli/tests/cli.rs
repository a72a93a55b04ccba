use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use zippy_core::homeval::hpatches::{synthetic_sequence, write_sequence};
use zippy_core::homeval::AugmentationConfig;
use zippy_core::imageio::write_image;
use zippy_core::matcher::MatchResult;
use zippy_core::mpsearch::SearchTrace;
use zippy_core::netgraph::fixtures::noise_image;
use zippy_core::netgraph::{read_detection, DescriptorPayload, NetworkSpec};

fn zippy(args: &[&str]) -> Output {
    zippy_env(args, &[])
}

fn zippy_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zippy"));
    cmd.args(args).env_remove("ZIPPY_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("zippy runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small random network; `dim` descriptor bits.
fn weights(dir: &Path, name: &str, dim: usize) -> PathBuf {
    let out = dir.join(name);
    ok(zippy(&[
        "init-weights",
        "--out",
        s(&out),
        "--channels",
        "8,16,16,32",
        "--head-width",
        "32",
        "--descriptor-dim",
        &dim.to_string(),
        "--seed",
        "3",
    ]));
    out
}

fn image(dir: &Path, w: usize, h: usize) -> PathBuf {
    let p = dir.join(format!("img_{w}x{h}.ppm"));
    write_image(&p, &noise_image(w, h, 11)).unwrap();
    p
}

#[test]
fn missing_weights_is_io_error_naming_path() {
    let dir = TempDir::new().unwrap();
    let img = image(dir.path(), 32, 32);
    let missing = dir.path().join("absent.zpw");
    let o = zippy(&["extract", "--weights", s(&missing), "--image", s(&img), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.zpw"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_4_and_help_succeeds() {
    assert_eq!(code(&zippy(&["extract", "--bogus"])), 4);
    assert_eq!(code(&zippy(&[])), 4);
    for sub in ["extract", "match", "eval", "bench", "bench-match", "search", "init-weights", "synth-dataset"] {
        let o = ok(zippy(&[sub, "--help"]));
        assert!(String::from_utf8_lossy(&o.stdout).contains("--threads"), "{sub}");
    }
    let o = zippy_env(&["bench-match", "--n", "4", "--m", "4", "--reps", "1"], &[("ZIPPY_THREADS", "0")]);
    assert_eq!(code(&o), 4);
    let o = zippy_env(&["bench-match", "--n", "4", "--m", "4", "--reps", "1"], &[("ZIPPY_THREADS", "two")]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("ZIPPY_THREADS"));
}

#[test]
fn extract_round_trip_at_240x320() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w.zpw", 64);
    let img = image(dir.path(), 320, 240);
    let out = dir.path().join("det.zpd");
    let rep = dir.path().join("det.json");
    ok(zippy(&["extract", "--weights", s(&w), "--image", s(&img), "--out", s(&out), "--report", s(&rep)]));
    let det = read_detection(&out).unwrap();
    assert_eq!((det.width, det.height, det.descriptor_dim, det.k), (320, 240, 64, 32));
    assert!(!det.is_empty() && det.len() <= 1000);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(report["keypoints"], det.len());

    let soft = dir.path().join("soft.zpd");
    ok(zippy(&["extract", "--weights", s(&w), "--image", s(&img), "--out", s(&soft), "--soft", "--max-kp", "10"]));
    let det = read_detection(&soft).unwrap();
    let DescriptorPayload::Soft(v) = &det.descriptors else { panic!("expected soft") };
    assert_eq!(v.len(), det.len() * 64);
    for row in v.chunks(64) {
        assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 32.0).abs() < 1e-3);
    }
}

#[test]
fn binary_k_300_has_constant_popcount() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w512.zpw", 512);
    let img = image(dir.path(), 96, 64);
    let out = dir.path().join("det.zpd");
    ok(zippy(&["extract", "--weights", s(&w), "--image", s(&img), "--out", s(&out), "--k", "300", "--binary"]));
    let det = read_detection(&out).unwrap();
    let DescriptorPayload::Binary(set) = &det.descriptors else { panic!("expected binary") };
    assert!(!set.is_empty());
    for i in 0..set.len() {
        assert_eq!(set.row(i).iter().map(|w| w.count_ones()).sum::<u32>(), 300);
    }
    let o = zippy(&["extract", "--weights", s(&w), "--image", s(&img), "--out", s(&out), "--k", "512"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn matching_self_is_identity_and_dim_mismatch_exits_3() {
    let dir = TempDir::new().unwrap();
    let img = image(dir.path(), 96, 64);
    let (w64, w128) = (weights(dir.path(), "a.zpw", 64), weights(dir.path(), "b.zpw", 128));
    let (d64, d128) = (dir.path().join("a.zpd"), dir.path().join("b.zpd"));
    ok(zippy(&["extract", "--weights", s(&w64), "--image", s(&img), "--out", s(&d64)]));
    ok(zippy(&["extract", "--weights", s(&w128), "--image", s(&img), "--out", s(&d128)]));

    let out = dir.path().join("m.json");
    ok(zippy(&["match", "--query", s(&d64), "--ref", s(&d64), "--out", s(&out)]));
    let m: MatchResult = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let n = read_detection(&d64).unwrap().len();
    assert_eq!(m.pairs.len(), n);
    assert!(m.pairs.iter().enumerate().all(|(i, p)| p.query == i && p.reference == i && p.distance == 0));

    let o = zippy(&["match", "--query", s(&d64), "--ref", s(&d128), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("mismatch"));

    std::fs::write(dir.path().join("junk.zpd"), b"ZPDT\x01").unwrap();
    let o = zippy(&["match", "--query", s(&dir.path().join("junk.zpd")), "--ref", s(&d64), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("junk.zpd"));
}

fn dataset(root: &Path, identity: bool) -> PathBuf {
    let args = ["synth-dataset", "--out", s(root), "--sequences", "3", "--width", "96", "--height", "64", "--views", "3"];
    let mut args = args.to_vec();
    if identity {
        args.push("--identity");
    }
    ok(zippy(&args));
    root.to_path_buf()
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w.zpw", 64);
    let img = image(dir.path(), 96, 64);
    let ds = dataset(&dir.path().join("ds"), false);
    let mut outputs: Vec<[Vec<u8>; 3]> = Vec::new();
    for threads in ["1", "8", "1"] {
        let (det, m, r) = (dir.path().join("d.zpd"), dir.path().join("m.json"), dir.path().join("r.json"));
        ok(zippy(&["--threads", threads, "extract", "--weights", s(&w), "--image", s(&img), "--out", s(&det)]));
        ok(zippy(&["match", "--threads", threads, "--query", s(&det), "--ref", s(&det), "--out", s(&m)]));
        ok(zippy_env(
            &["eval", "--dataset-dir", s(&ds), "--weights", s(&w), "--report", s(&r)],
            &[("ZIPPY_THREADS", threads)],
        ));
        outputs.push([det, m, r].map(|p| std::fs::read(p).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn eval_reports_finite_metrics_and_lists_failures() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w.zpw", 64);
    let ds = dataset(&dir.path().join("ds"), false);
    let broken = ds.join("zz_broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("1.ppm"), b"P6\n4 4\n255\n").unwrap();
    let r = dir.path().join("r.json");
    ok(zippy(&["eval", "--dataset-dir", s(&ds), "--weights", s(&w), "--report", s(&r)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(v["evaluated"], 3);
    assert_eq!(v["failed"], 1);
    let seqs = v["sequences"].as_array().unwrap();
    assert_eq!(seqs[3]["name"], "zz_broken");
    assert_eq!(seqs[3]["status"], "failed");
    assert!(seqs[3]["error"].as_str().unwrap().contains("1.ppm"));
    for key in ["repeatability", "localization_error", "matching_score", "cor3"] {
        assert!(v["aggregate"][key].as_f64().unwrap().is_finite(), "{key}");
    }

    let only_broken = dir.path().join("bad");
    std::fs::create_dir_all(only_broken.join("s")).unwrap();
    let o = zippy(&["eval", "--dataset-dir", s(&only_broken), "--weights", s(&w), "--report", s(&r)]);
    assert_ne!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(v["failed"], 1);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = zippy(&["eval", "--dataset-dir", s(&empty), "--weights", s(&w), "--report", s(&r)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn identity_pairs_with_float_reference_repeat_exactly() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w.zpw", 64);
    let ds = dir.path().join("ds");
    let seq = synthetic_sequence("ident", 128, 96, 2, &AugmentationConfig::identity(5)).unwrap();
    write_sequence(&ds, &seq).unwrap();
    let r = dir.path().join("r.json");
    ok(zippy(&["eval", "--dataset-dir", s(&ds), "--weights", s(&w), "--report", s(&r), "--float-reference"]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(v["aggregate"]["repeatability"].as_f64(), Some(1.0));
    assert_eq!(v["aggregate"]["localization_error"].as_f64(), Some(0.0));
}

#[test]
fn replay_search_reaches_final_configuration() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("trace.json");
    let o = ok(zippy(&["search", "--evaluator", "replay", "--trace-out", s(&out)]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("exhaustive product 120"));
    let trace = SearchTrace::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(trace.complete);
    assert_eq!(trace.evaluations, 14);
    assert_eq!(trace.final_spec, NetworkSpec::mixed_precision());
}

#[test]
fn latency_search_evaluates_candidate_sum() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("trace.json");
    ok(zippy(&[
        "search",
        "--evaluator",
        "latency",
        "--image-size",
        "32x32",
        "--reps",
        "1",
        "--trace-out",
        s(&out),
    ]));
    let trace = SearchTrace::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(trace.evaluations, 14);
    assert_eq!(trace.decisions.iter().map(|d| d.evaluations.len()).collect::<Vec<_>>(), [2, 3, 5, 2, 2]);
}

#[test]
fn malformed_space_exits_4_with_line() {
    let dir = TempDir::new().unwrap();
    let space = dir.path().join("space.txt");
    std::fs::write(&space, "# blocks\nfirst_conv: FP Int8\nencoder: Int8 Bogus\n").unwrap();
    let o = zippy(&["search", "--space-config", s(&space), "--trace-out", s(&dir.path().join("t.json"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn bench_reports_samples_and_work_scaling() {
    let dir = TempDir::new().unwrap();
    let w = weights(dir.path(), "w.zpw", 64);
    let r = dir.path().join("bench.json");
    ok(zippy(&[
        "bench",
        "--weights",
        s(&w),
        "--image-size",
        "48x64",
        "--image-size",
        "96x128",
        "--reps",
        "1",
        "--report",
        s(&r),
    ]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    let sizes = v["sizes"].as_array().unwrap();
    assert_eq!(sizes[0]["quantized"]["samples_ms"].as_array().unwrap().len(), 1);
    assert_eq!(sizes[0]["float_reference"]["samples_ms"].as_array().unwrap().len(), 1);
    assert_eq!(sizes[1]["macs"].as_u64().unwrap(), 4 * sizes[0]["macs"].as_u64().unwrap());

    let r = dir.path().join("bm.json");
    ok(zippy(&["bench-match", "--n", "50", "--m", "60", "--reps", "1", "--bit-loop", "--report", s(&r)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(v["word_parallel"]["latencies_ms"].as_array().unwrap().len(), 1);
    assert_eq!(v["word_parallel"]["matches"], v["bit_loop"]["matches"]);
}
