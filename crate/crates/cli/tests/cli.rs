use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn aaud(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aaud"));
    cmd.args(args).env_remove("AAUD_THREADS");
    if let Some(t) = threads {
        cmd.env("AAUD_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, suite: &str, count: usize) -> PathBuf {
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        format!(r#"{{"suite": "{suite}", "count": {count}, "seed": 4}}"#),
    )
    .unwrap();
    let out = dir.join("suite");
    ok(aaud(
        &["synth", "--config", p(&cfg), "--out", p(&out)],
        None,
    ));
    out
}

fn inputs(suite: &Path, out: &Path) -> Vec<String> {
    [
        "--manifest",
        p(&suite.join("manifest.json")),
        "--dump",
        p(&suite.join("dump.aaud")),
        "--out",
        p(out),
    ]
    .map(String::from)
    .to_vec()
}

fn run_all(suite: &Path, out: &Path, threads: &str) {
    let base = inputs(suite, out);
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(base.iter().map(String::as_str));
        args.extend(extra);
        ok(aaud(&args, Some(threads)));
    };
    with("audit", &[]);
    with("intervene", &["--trials", "2", "--seed", "9"]);
    with("gac", &["--alpha", "0.2"]);
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth(dir.path(), "har_like", 30);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&suite, &a, "1");
    run_all(&suite, &b, "3");
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    // synthesis itself is reproducible
    let again = tempfile::tempdir().unwrap();
    let suite2 = synth(again.path(), "har_like", 30);
    for f in ["dump.aaud", "manifest.json", "ground_truth.json"] {
        assert_eq!(
            fs::read(suite.join(f)).unwrap(),
            fs::read(suite2.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sidecar_matches_audit_rows() {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth(dir.path(), "casas_like", 25);
    let out = dir.path().join("r");
    let mut args = vec!["audit"];
    let base = inputs(&suite, &out);
    args.extend(base.iter().map(String::as_str));
    args.extend(["--format", "json"]);
    ok(aaud(&args, None));
    assert!(!out.join("audit_rows.csv").exists());
    let truth = json(&suite.join("ground_truth.json"));
    let report = json(&out.join("audit.json"));
    let rows = report["rows"].as_array().unwrap();
    let entries = truth["instances"].as_array().unwrap();
    assert_eq!(rows.len(), entries.len());
    for (row, entry) in rows.iter().zip(entries) {
        assert_eq!(row["instance_id"], entry["truth"]["instance_id"]);
        for (r, m) in [
            ("aai", "aai"),
            ("force_sensor", "force_sensor"),
            ("cir_u", "cir_u"),
        ] {
            let (x, y) = (
                row[r].as_f64().unwrap(),
                entry["measured"][m].as_f64().unwrap(),
            );
            assert!((x - y).abs() <= 1e-6, "{r}: {x} vs {y}");
        }
    }
}

#[test]
fn null_ablation_never_flips() {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth(dir.path(), "inversion", 40);
    let out = dir.path().join("r");
    let mut args = vec!["intervene"];
    let base = inputs(&suite, &out);
    args.extend(base.iter().map(String::as_str));
    args.extend(["--kinds", "ablate_null,inject_theory", "--format", "json"]);
    ok(aaud(&args, None));
    let report = json(&out.join("interventions.json"));
    let summaries = report["summaries"].as_array().unwrap();
    let find = |k: &str| summaries.iter().find(|s| s["kind"] == k).unwrap();
    assert_eq!(find("ablate_null")["flips"], 0);
    assert_eq!(find("inject_theory")["flip_rate"].as_f64(), Some(1.0));
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth(dir.path(), "har_like", 3);
    let out = dir.path().join("r");

    let mut manifest = json(&suite.join("manifest.json"));
    manifest["instances"] = Value::Array(vec![]);
    let empty = dir.path().join("empty.json");
    fs::write(&empty, manifest.to_string()).unwrap();
    let code = |args: &[&str]| aaud(args, None).status.code();
    let dump = suite.join("dump.aaud");
    assert_eq!(
        code(&[
            "audit",
            "--manifest",
            p(&empty),
            "--dump",
            p(&dump),
            "--out",
            p(&out)
        ]),
        Some(3)
    );

    let mut bytes = fs::read(&dump).unwrap();
    bytes[0] = b'Z';
    let bad = dir.path().join("bad.aaud");
    fs::write(&bad, bytes).unwrap();
    let real = suite.join("manifest.json");
    assert_eq!(
        code(&[
            "audit",
            "--manifest",
            p(&real),
            "--dump",
            p(&bad),
            "--out",
            p(&out)
        ]),
        Some(3)
    );

    let missing = dir.path().join("missing.aaud");
    assert_eq!(
        code(&[
            "audit",
            "--manifest",
            p(&real),
            "--dump",
            p(&missing),
            "--out",
            p(&out)
        ]),
        Some(5)
    );
    assert_eq!(code(&["audit", "--manifest", p(&real)]), Some(2));
    assert_eq!(
        code(&[
            "gac",
            "--manifest",
            p(&real),
            "--dump",
            p(&dump),
            "--out",
            p(&out),
            "--alpha",
            "2"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "intervene",
            "--manifest",
            p(&real),
            "--dump",
            p(&dump),
            "--out",
            p(&out),
            "--kinds",
            "zap"
        ]),
        Some(3)
    );

    let cfg = dir.path().join("bad_cfg.json");
    fs::write(&cfg, r#"{"suite": "har_like", "count": 3, "colour": 1}"#).unwrap();
    assert_eq!(
        code(&["synth", "--config", p(&cfg), "--out", p(&out)]),
        Some(3)
    );
    assert_eq!(
        aaud(
            &[
                "synth",
                "--config",
                p(&dir.path().join("cfg.json")),
                "--out",
                p(&out)
            ],
            Some("0")
        )
        .status
        .code(),
        Some(3)
    );
}
