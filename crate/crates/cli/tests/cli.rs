use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kvbudget(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvbudget"))
        .args(args)
        .current_dir(dir)
        .env_remove("KVBUDGET_OUT_DIR")
        .output()
        .unwrap()
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Parsed stderr error object and exit code.
fn failure(out: &Output) -> (Value, i32) {
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    (err["error"].clone(), out.status.code().unwrap())
}

#[test]
fn mga_example_saturates_every_pruned_layer() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "layer,value\n0,100\n1,4\n2,1\n3,1\n4,1\n").unwrap();
    let plan = json_stdout(&kvbudget(
        dir.path(),
        &["allocate", "--strategy", "mga", "--layers", "5", "--rho", "0.56", "--metric", "m.csv"],
    ));
    let ratios: Vec<f64> = plan["ratios"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(ratios, [0.0, 0.7, 0.7, 0.7, 0.7]);
    assert_eq!(plan["L"], 5);
    assert_eq!(plan["protected"], serde_json::json!([0]));
    let counts: u64 = plan["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, (2048.0f64 * (5.0 - 2.8)).round() as u64);
}

#[test]
fn constant_table_has_unit_p_value() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.csv"), "a,b,c\n3,3,3\n3,3,3\n3,3,3\n").unwrap();
    let r = json_stdout(&kvbudget(dir.path(), &["stats", "perm", "--table", "t.csv", "--n-perm", "10000", "--seed", "1"]));
    assert_eq!(r["p_value"], 1.0);
    assert_eq!(r["n_perm"], 10000);
    assert_eq!(r["seed"], 1);
}

#[test]
fn full_budget_keeps_every_token() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(kvbudget(d, &["gen-trace", "--layers", "4", "--heads", "2", "--seq-len", "30", "--seed", "3", "-o", "t.dkvt"]).status.success());
    for strategy in ["uniform", "mlp"] {
        let r = json_stdout(&kvbudget(d, &["prune-sim", "--trace", "t.dkvt", "--strategy", strategy, "--rho", "0", "--chunk-size", "8"]));
        for layer in r["report"]["per_layer"].as_array().unwrap() {
            let kept: Vec<u64> = layer["retained"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
            assert_eq!(kept, (0..30).collect::<Vec<u64>>());
        }
    }
}

#[test]
fn plan_file_round_trips_through_prune_sim() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(kvbudget(d, &["gen-trace", "--layers", "4", "--heads", "1", "--seq-len", "24", "-o", "t.dkvt"]).status.success());
    assert!(kvbudget(d, &["allocate", "--strategy", "uniform", "--layers", "4", "--rho", "0.5", "--seq-len", "24", "-o", "p.json"]).status.success());
    let from_file = kvbudget(d, &["prune-sim", "--trace", "t.dkvt", "--plan", "p.json", "--chunk-size", "5"]);
    let inline = kvbudget(d, &["prune-sim", "--trace", "t.dkvt", "--strategy", "uniform", "--rho", "0.5", "--chunk-size", "5"]);
    assert_eq!(json_stdout(&from_file), json_stdout(&inline));

    fs::write(d.join("bad.json"), "{\"strategy\": \"uniform\"}").unwrap();
    let (err, code) = failure(&kvbudget(d, &["prune-sim", "--trace", "t.dkvt", "--plan", "bad.json"]));
    assert_eq!((err["kind"].as_str(), err["flag"].as_str(), code), (Some("malformed"), Some("--plan"), 9));
    assert_eq!(err["file"], "bad.json");
}

#[test]
fn metrics_report_feeds_allocation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ["gen-snapshot", "--layers", "4", "--stages", "post-attention,post-mlp", "--seq-len", "10", "--hidden-dim", "5", "--samples", "3", "-o", "s"];
    assert!(kvbudget(d, &gen).status.success());
    let originals = ["s/sample_000.dkvr", "s/sample_001.dkvr", "s/sample_002.dkvr"];
    for format in ["csv", "json"] {
        let out = format!("metrics.{format}");
        let mut args = vec!["metrics", "--originals"];
        args.extend(originals);
        args.extend(["--bootstrap", "50", "--format", format, "-o", &out]);
        assert!(kvbudget(d, &args).status.success());
        let plan = json_stdout(&kvbudget(
            d,
            &["allocate", "--strategy", "mga", "--layers", "4", "--rho", "0.3", "--metric", &out, "--metric-stage", "post-mlp"],
        ));
        let sum: f64 = plan["ratios"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.2).abs() < 1e-9);

        // Two stages in the report and none chosen.
        let (err, code) = failure(&kvbudget(d, &["allocate", "--strategy", "mga", "--layers", "4", "--metric", &out]));
        assert_eq!((err["flag"].as_str(), code), (Some("--metric-stage"), 3));
    }
}

#[test]
fn errors_name_the_flag_and_use_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("garbage.dkvt"), b"NOPE0000000000000000000000000000").unwrap();
    fs::write(d.join("short.csv"), "layer,value\n0,1\n1,2\n").unwrap();
    fs::write(d.join("bad.csv"), "a,b\n1,x\n").unwrap();
    assert!(kvbudget(d, &["gen-trace", "--layers", "2", "--heads", "1", "--seq-len", "4", "-o", "t.dkvt"]).status.success());
    let bytes = fs::read(d.join("t.dkvt")).unwrap();
    fs::write(d.join("cut.dkvt"), &bytes[..bytes.len() - 3]).unwrap();

    let cases: [(&[&str], &str, Option<&str>, i32); 9] = [
        (&["allocate", "--strategy", "nope", "--layers", "4"], "usage", Some("--strategy"), 2),
        (&["allocate", "--strategy", "uniform", "--layers", "4", "--rho", "1.2"], "invalid_argument", Some("--rho"), 3),
        (&["allocate", "--strategy", "mlp", "--layers", "8", "--rho", "0.7"], "infeasible", Some("--rho"), 4),
        (&["importance", "--trace", "missing.dkvt"], "io", Some("--trace"), 5),
        (&["importance", "--trace", "garbage.dkvt"], "bad_magic", Some("--trace"), 6),
        (&["importance", "--trace", "cut.dkvt"], "truncated", Some("--trace"), 8),
        (&["stats", "perm", "--table", "bad.csv"], "csv", Some("--table"), 10),
        (&["allocate", "--strategy", "mga", "--layers", "4", "--metric", "short.csv"], "shape_mismatch", Some("--metric"), 12),
        (&["stats", "zscore", "--values", "2,2,2"], "degenerate", Some("--values"), 14),
    ];
    for (args, kind, flag, code) in cases {
        let (err, got) = failure(&kvbudget(d, args));
        assert_eq!(err["kind"].as_str(), Some(kind), "{args:?}");
        assert_eq!(err["flag"].as_str(), flag, "{args:?}");
        assert_eq!(got, code, "{args:?}");
        assert_eq!(err["code"], code);
        assert!(!err["message"].as_str().unwrap().is_empty());
    }
    let (err, _) = failure(&kvbudget(d, &["importance", "--trace", "garbage.dkvt"]));
    assert_eq!(err["file"], "garbage.dkvt");
}

#[test]
fn binary_artifacts_need_a_destination() {
    let dir = tempfile::tempdir().unwrap();
    let (err, code) = failure(&kvbudget(dir.path(), &["gen-trace", "--layers", "1", "--heads", "1", "--seq-len", "2"]));
    assert_eq!((err["flag"].as_str(), code), (Some("--output"), 3));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_kvbudget"))
            .args(args)
            .current_dir(dir.path())
            .env("KVBUDGET_OUT_DIR", &out)
            .output()
            .unwrap()
    };
    assert!(run(&["gen-trace", "--layers", "2", "--heads", "1", "--seq-len", "6"]).status.success());
    assert!(out.join("trace.dkvt").is_file());
    let yap = run(&["stats", "yap", "--length", "600", "--baseline", "500", "--format", "csv"]);
    assert!(yap.status.success() && yap.stdout.is_empty());
    assert_eq!(fs::read_to_string(out.join("yap.csv")).unwrap(), "length,baseline,yapscore\n600,500,100\n");
    // Relative outputs land under the directory; the flag overrides the variable.
    assert!(run(&["stats", "yap", "--length", "1", "--baseline", "5", "-o", "nested/y.json"]).status.success());
    assert!(out.join("nested/y.json").is_file());
    let other = dir.path().join("elsewhere");
    let flagged = run(&["--out-dir", other.to_str().unwrap(), "stats", "zscore", "--values", "1,3"]);
    assert!(flagged.status.success());
    assert!(other.join("zscore.json").is_file());
}

#[test]
fn compare_reports_equal_footprints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.csv"), "layer,value\n0,1\n1,2\n2,3\n3,1\n4,5\n5,2\n6,4\n7,3\n").unwrap();
    assert!(kvbudget(d, &["gen-trace", "--layers", "8", "--heads", "2", "--seq-len", "48", "-o", "t.dkvt"]).status.success());
    let r = json_stdout(&kvbudget(
        d,
        &["compare", "--trace", "t.dkvt", "--metric", "m.csv", "--strategies", "uniform,mga,mlp,mlma-2", "--rho", "0.4", "--chunk-size", "16"],
    ));
    let plans = r["plans"].as_array().unwrap();
    assert_eq!(plans.len(), 4);
    let fp: Vec<&Value> = plans.iter().map(|p| &p["report"]["footprint_entries"]).collect();
    assert!(fp.iter().all(|f| *f == fp[0]));
    for p in plans {
        let j = p["mean_jaccard"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&j));
    }
    let csv = kvbudget(d, &["compare", "--trace", "t.dkvt", "--metric", "m.csv", "--rho", "0.4", "--strategies", "uniform,mlp", "--format", "csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("plan,layer,ratio,budget,retained,score_min,score_max,score_mean,jaccard_vs_full\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 8);
}

#[test]
fn importance_csv_marks_retained_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(kvbudget(d, &["gen-trace", "--layers", "2", "--heads", "2", "--seq-len", "12", "-o", "t.dkvt"]).status.success());
    let out = kvbudget(d, &["importance", "--trace", "t.dkvt", "--layer", "1", "--budget", "4", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,token_index,score,retained");
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[1..].iter().filter(|l| l.ends_with(",1")).count(), 4);
    let (err, code) = failure(&kvbudget(d, &["importance", "--trace", "t.dkvt", "--layer", "2"]));
    assert_eq!((err["flag"].as_str(), code), (Some("--layer"), 3));
}
