//! End-to-end runs of the `primelab` binary on temporary files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn primelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primelab"))
        .args(args)
        .current_dir(dir)
        .env_remove("PRIMELAB_BUDGET")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = primelab(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = primelab(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn subtok_build_encode_decode_info() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let info = ok(d, &["subtok", "build", "--vocab", "8", "--ell", "3", "--strategy", "random", "--seed", "42", "--out", "st.json"]);
    assert_eq!(info["b"], 2);
    assert_eq!(info["strategy"], "random");
    let file: Value = serde_json::from_str(&fs::read_to_string(d.join("st.json")).unwrap()).unwrap();
    assert_eq!(file["V"], 8);

    let enc = ok(d, &["subtok", "encode", "--st", "st.json", "--tokens", "0,3,7"]);
    let codes: Vec<Vec<usize>> = serde_json::from_value(enc["codes"].clone()).unwrap();
    let arg = codes.iter().map(|c| c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join(";");
    let dec = ok(d, &["subtok", "decode", "--st", "st.json", "--codes", &arg]);
    assert_eq!(dec["tokens"], serde_json::json!([0, 3, 7]));

    let info2 = ok(d, &["subtok", "info", "--st", "st.json"]);
    assert_eq!(info, info2);
}

#[test]
fn subtok_greedy_uses_counts() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.tsv", "0\t50\n1\t20\n2\t20\n3\t10\n");
    let info = ok(d, &["subtok", "build", "--vocab", "4", "--ell", "2", "--strategy", "greedy", "--counts", "c.tsv", "--out", "g.json"]);
    assert_eq!(info["strategy"], "greedy");
    let (c, err) = code(d, &["subtok", "build", "--vocab", "4", "--ell", "2", "--strategy", "greedy", "--out", "g.json"]);
    assert_eq!(c, 2);
    assert!(err.contains("counts"));
}

#[test]
fn corrupt_subtokenizer_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["subtok", "build", "--vocab", "8", "--ell", "3", "--out", "st.json"]);
    let text = fs::read_to_string(d.join("st.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["perm"][0] = 1.into();
    v["perm"][1] = 0.into();
    write(d, "st.json", &v.to_string());
    let (c, err) = code(d, &["subtok", "info", "--st", "st.json"]);
    assert_eq!(c, 3);
    assert!(!err.is_empty());
    let (c, _) = code(d, &["subtok", "info", "--st", "missing.json"]);
    assert_eq!(c, 3);
}

#[test]
fn kernels_mask_and_sample() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["subtok", "build", "--vocab", "16", "--ell", "4", "--out", "st.json"]);
    let none = ok(d, &["kernels", "mask", "--st", "st.json", "--tokens", "1,2,3", "--t", "0"]);
    assert_eq!(none["masked"], 0);
    let all = ok(d, &["kernels", "mask", "--st", "st.json", "--tokens", "1,2,3", "--t", "1", "--schedule", "power:2"]);
    assert_eq!(all["masked"], 12);
    let s = ok(d, &["kernels", "sample", "--st", "st.json", "--len", "3", "--count", "4", "--seed", "5"]);
    let samples: Vec<Vec<usize>> = serde_json::from_value(s["samples"].clone()).unwrap();
    assert_eq!(samples.len(), 4);
    assert!(samples.iter().all(|x| x.len() == 3 && x.iter().all(|&t| t < 16)));
    let (c, _) = code(d, &["kernels", "mask", "--st", "st.json", "--tokens", "1", "--t", "0.5", "--schedule", "power:-1"]);
    assert_eq!(c, 2);
    let (c, _) = code(d, &["kernels", "mask", "--st", "st.json", "--tokens", "99", "--t", "0.5"]);
    assert_eq!(c, 2);
}

#[test]
fn oracle_verify_all_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let r = ok(d, &["oracle", "verify", "--suite", "all", "--budget", "4096", "--report", "out.json"]);
    assert_eq!(r["failed"], 0);
    let file: Value = serde_json::from_str(&fs::read_to_string(d.join("out.json")).unwrap()).unwrap();
    let checks = file["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["pass"] == true));
}

#[test]
fn oracle_verify_over_budget_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (c, err) = code(tmp.path(), &["oracle", "verify", "--suite", "routes", "--budget", "2"]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(tmp.path(), &["oracle", "verify", "--suite", "nonsense"]);
    assert_eq!(c, 2);
}

#[test]
fn budget_env_var_is_honoured() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_primelab"))
        .args(["oracle", "nelbo", "--zipf", "8", "--len", "2", "--ell", "3"])
        .env("PRIMELAB_BUDGET", "4")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    ok(tmp.path(), &["oracle", "nelbo", "--zipf", "8", "--len", "2", "--ell", "3"]);
}

#[test]
fn oracle_nelbo_profile_best_perm() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let n = ok(d, &["oracle", "nelbo", "--probs", "0.5,0.25,0.25,0", "--len", "1", "--ell", "1"]);
    assert!((n["value"].as_f64().unwrap() - 1.5 * std::f64::consts::LN_2).abs() < 1e-10);
    assert!((n["route_decomposition"].as_f64().unwrap() - n["route_posterior"].as_f64().unwrap()).abs() < 1e-8);

    let p = ok(d, &["oracle", "profile", "--uniform", "4", "--ell", "2", "--points", "5"]);
    let v: Vec<f64> = serde_json::from_value(p["expected_log_posterior"].clone()).unwrap();
    assert_eq!(v.len(), 5);
    assert_eq!(v[0], 0.0);
    assert!((v[4] + 4f64.ln()).abs() < 1e-12);

    let b = ok(d, &["oracle", "best-perm", "--zipf", "8", "--ell", "3"]);
    let perm: Vec<usize> = serde_json::from_value(b["perm"].clone()).unwrap();
    let mut sorted = perm.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());

    let (c, _) = code(d, &["oracle", "nelbo", "--probs", "0.5,0.4", "--ell", "1"]);
    assert_eq!(c, 2);
}

#[test]
fn corpus_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "ids.txt", "0\n1\n1\n2\n2\n2\n3\n3\n3\n3\n");
    let r = ok(d, &["corpus", "count", "--vocab", "4", "--input", "ids.txt", "--out", "c.tsv"]);
    assert_eq!(r["total"], 10);
    let cdf = ok(d, &["corpus", "cdf", "--counts", "c.tsv", "--vocab", "4"]);
    let cdf: Vec<f64> = serde_json::from_value(cdf["cdf"].clone()).unwrap();
    assert!((cdf[3] - 1.0).abs() < 1e-12);
    let e = ok(d, &["corpus", "entropy", "--counts", "c.tsv", "--vocab", "4", "--ell", "2"]);
    assert!(e["average"].as_f64().unwrap() <= 1.0 + 1e-12);
    let rep = ok(d, &["corpus", "report", "--counts", "c.tsv", "--vocab", "4", "--ell", "2", "--seeds", "1,2"]);
    let names: Vec<&str> = rep.as_array().unwrap().iter().map(|r| r["strategy"].as_str().unwrap()).collect();
    assert_eq!(names, ["identity", "random", "random", "greedy", "maximum"]);

    let z = ok(d, &["corpus", "count", "--vocab", "100", "--zipf-samples", "5000", "--seed", "3", "--out", "z.tsv"]);
    assert_eq!(z["total"], 5000);

    write(d, "bad.txt", "0\n7\n");
    let (c, err) = code(d, &["corpus", "count", "--vocab", "4", "--input", "bad.txt", "--out", "x.tsv"]);
    assert_eq!(c, 2);
    assert!(!err.is_empty());
    assert!(!d.join("x.tsv").exists());
}

#[test]
fn corpus_report_csv() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.tsv", "0\t5\n1\t3\n2\t1\n3\t1\n");
    let out = primelab(d, &["corpus", "report", "--counts", "c.tsv", "--vocab", "4", "--ell", "2", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("strategy,seed,average_bits\n"));
    assert_eq!(text.lines().count(), 1 + 6);
}

#[test]
fn scaling_commands() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let (e, a, b, al, be) = (1.7, 400.0, 2000.0, 0.34, 0.28);
    let mut csv = String::from("N,D,loss\n");
    for i in 0..6 {
        for j in 0..4 {
            let n = 1e7 * 10f64.powf(i as f64 * 0.6);
            let dd = 1e9 * 10f64.powi(j);
            csv += &format!("{n},{dd},{}\n", e + a / n.powf(al) + b / dd.powf(be));
        }
    }
    write(d, "pts.csv", &csv);
    let fit = ok(d, &["scaling", "fit", "--input", "pts.csv", "--report", "fit.json"]);
    assert!((fit["fit"]["alphaN"].as_f64().unwrap() - al).abs() < 1e-4);
    let p = ok(d, &["scaling", "predict", "--fit", "fit.json", "--n", "1e9", "--d", "1e11"]);
    let want = e + a / 1e9f64.powf(al) + b / 1e11f64.powf(be);
    assert!((p["loss"].as_f64().unwrap() - want).abs() < 1e-4);
    let o = ok(d, &["scaling", "optimal", "--fit", "fit.json", "--compute", "1e20,1e22"]);
    for row in o.as_array().unwrap() {
        let c = row["compute"].as_f64().unwrap();
        let nd = row["n_opt"].as_f64().unwrap() * row["d_opt"].as_f64().unwrap();
        assert!((nd - c / 6.0).abs() / (c / 6.0) < 1e-12);
    }
    let iso = ok(d, &["scaling", "optimal", "--fit", "fit.json", "--compute", "1e20", "--iso-loss", "2.5,3"]);
    assert!(!iso.as_array().unwrap().is_empty());

    let x = ok(d, &["scaling", "exponents", "--alpha", "0.37", "--beta", "0.26"]);
    assert_eq!(x["a_hat"], 0.4127);
    assert_eq!(x["b_hat"], 0.5873);

    write(d, "neg.csv", "N,D,loss\n-1,10,2\n");
    let (c, _) = code(d, &["scaling", "fit", "--input", "neg.csv"]);
    assert_eq!(c, 2);
}

#[test]
fn train_run_eval_gradcheck_and_spectra() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let r = ok(d, &["train", "run", "--steps", "30", "--batch", "8", "--out", "m.json", "--history", "h.csv", "--seed", "2"]);
    assert!(r["final_loss"].as_f64().unwrap().is_finite());
    let hist = fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 31);

    let e = ok(d, &["train", "eval", "--model", "m.json", "--samples", "500"]);
    let (v, se, opt) = (e["value"].as_f64().unwrap(), e["std_error"].as_f64().unwrap(), e["optimum"].as_f64().unwrap());
    assert!(v + 4.0 * se >= opt);

    let g = ok(d, &["train", "gradcheck", "--count", "20"]);
    assert!(g["max_rel_err"].as_f64().unwrap() < 1e-4);
    let g = ok(d, &["train", "gradcheck", "--model", "m.json", "--count", "5"]);
    assert_eq!(g["checks"].as_array().unwrap().len(), 5);

    let s = ok(d, &["spectra", "svd", "--model", "m.json", "--block", "W1"]);
    assert_eq!(s["singular_values"].as_array().unwrap().len(), 32);
    let s = ok(d, &["spectra", "stable-rank", "--model", "m.json", "--block", "W2.1"]);
    assert!(s["stable_rank"].as_f64().unwrap() >= 1.0);

    let (c, _) = code(d, &["train", "eval", "--model", "m.json", "--vocab", "8"]);
    assert_eq!(c, 2);
    let (c, _) = code(d, &["train", "run", "--steps", "0", "--out", "z.json"]);
    assert_eq!(c, 2);
}

#[test]
fn spectra_on_csv_matrix() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "i.csv", "1,0,0\n0,1,0\n0,0,1\n");
    let s = ok(d, &["spectra", "stable-rank", "--matrix", "i.csv"]);
    assert!((s["stable_rank"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    write(d, "r1.csv", "1,2\n2,4\n3,6\n");
    let s = ok(d, &["spectra", "svd", "--matrix", "r1.csv"]);
    let sv: Vec<f64> = serde_json::from_value(s["singular_values"].clone()).unwrap();
    assert!((sv[0] * sv[0] - 70.0).abs() < 1e-9);
    assert!(sv[1].abs() < 1e-9);
    write(d, "z.csv", "0,0\n0,0\n");
    let (c, _) = code(d, &["spectra", "stable-rank", "--matrix", "z.csv"]);
    assert_eq!(c, 2);
    write(d, "ragged.csv", "1,2\n3\n");
    let (c, _) = code(d, &["spectra", "svd", "--matrix", "ragged.csv"]);
    assert_ne!(c, 0);
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let (c, err) = code(d, &["frobnicate"]);
    assert_eq!(c, 2);
    assert!(err.contains("Usage"));
    let (c, _) = code(d, &["subtok", "build", "--vocab", "8"]);
    assert_eq!(c, 2);
    let (c, _) = code(d, &["subtok", "build", "--vocab", "1", "--ell", "1", "--out", "x.json"]);
    assert_eq!(c, 2);
    let (c, _) = code(d, &["--format", "xml", "subtok", "info", "--st", "x"]);
    assert_eq!(c, 2);
    assert_eq!(code(d, &["--help"]).0, 0);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let runs: &[&[&str]] = &[
        &["subtok", "build", "--vocab", "50", "--ell", "2", "--strategy", "random", "--seed", "9", "--out", "OUT"],
        &["corpus", "count", "--vocab", "30", "--zipf-samples", "2000", "--seed", "4", "--out", "OUT"],
        &["train", "run", "--steps", "10", "--batch", "4", "--seed", "1", "--out", "OUT"],
        &["oracle", "verify", "--suite", "lemmas", "--report", "OUT"],
        &["kernels", "sample", "--st", "st.json", "--count", "3", "--seed", "8", "--report", "OUT"],
    ];
    ok(d, &["subtok", "build", "--vocab", "16", "--ell", "2", "--out", "st.json"]);
    for args in runs {
        let mut bytes = Vec::new();
        for k in 0..2 {
            let name = format!("out{k}");
            let a: Vec<&str> = args.iter().map(|s| if *s == "OUT" { name.as_str() } else { s }).collect();
            let out = primelab(d, &a);
            assert_eq!(out.status.code(), Some(0), "{a:?}");
            bytes.push((out.stdout, fs::read(d.join(&name)).unwrap()));
        }
        assert_eq!(bytes[0], bytes[1], "{args:?}");
    }
    let leftovers: Vec<_> = fs::read_dir(d).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().contains(".tmp")).collect();
    assert!(leftovers.is_empty());
}
