use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_swinpg");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("every stdout line is JSON"))
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SMOKE: &str = r#"{"model":{"input_size":32},"training":{"epochs":5,"batch_size":4,"seed":0},"data":{"n_pairs":4},
    "output":{"checkpoint_path":"model.swpg"}}"#;

#[test]
fn smoke_training_lowers_l1() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", SMOKE);
    let out = run(dir.path(), &["train", "--config", "c.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 5);
    let l1 = |v: &Value| v["l1"].as_f64().unwrap();
    assert!(l1(&lines[4]) < l1(&lines[0]), "{lines:?}");
    assert!(lines.iter().all(|v| v["loss_d"].is_number() && v["loss_g"].is_number()));
    assert!(dir.path().join("model.swpg").is_file());
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = |epochs: u32, ckpt: &str| {
        format!(
            r#"{{"model":{{"input_size":32}},"training":{{"epochs":{epochs},"batch_size":2}},"data":{{"n_pairs":3}},
                "output":{{"checkpoint_path":"{ckpt}"}}}}"#
        )
    };
    write(p, "full.json", &cfg(3, "full.swpg"));
    write(p, "part.json", &cfg(1, "part.swpg"));
    write(p, "rest.json", &cfg(3, "rest.swpg"));
    for args in [
        &["train", "--config", "full.json"][..],
        &["train", "--config", "part.json"],
        &["train", "--config", "rest.json", "--resume", "part.swpg"],
    ] {
        let out = run(p, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    assert_eq!(
        std::fs::read(p.join("full.swpg")).unwrap(),
        std::fs::read(p.join("rest.swpg")).unwrap()
    );
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(
        p,
        "c.json",
        r#"{"model":{"input_size":32},"training":{"epochs":1,"batch_size":2},"data":{"n_pairs":2},"output":{"checkpoint_path":"m.swpg"}}"#,
    );
    write(
        p,
        "other.json",
        r#"{"model":{"input_size":32,"embed_dim":16},"data":{"n_pairs":2}}"#,
    );
    assert_eq!(code(&run(p, &["train", "--config", "c.json"])), 0);
    assert_eq!(code(&run(p, &["simulate", "--config", "c.json", "--out", "sim"])), 0);
    let args = [
        "enhance",
        "--ckpt",
        "m.swpg",
        "--input",
        "sim/sim0_00000_A.ppm",
        "--output",
        "o.ppm",
    ];
    let mut with_cfg = args.to_vec();
    with_cfg.extend(["--config", "other.json"]);
    let out = run(p, &with_cfg);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("embed_dim") && err.lines().count() == 1, "{err}");
    let out = run(p, &["evaluate", "--ckpt", "m.swpg", "--config", "other.json"]);
    assert_eq!(code(&out), 2);
    let out = run(p, &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(json_lines(&out)[0]["size"], 32);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "typo.json", r#"{"training":{"learning_rate":0.1}}"#);
    write(p, "ok.json", r#"{"model":{"input_size":32},"data":{"n_pairs":2}}"#);
    write(p, "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
    write(p, "fake.swpg", "not a checkpoint");
    let cases: &[(&[&str], i32)] = &[
        (&[], 1),
        (&["frobnicate"], 1),
        (&["train"], 1),
        (&["gradcheck", "--op", "no_such_op"], 1),
        (&["train", "--config", "typo.json"], 2),
        (&["evaluate", "--config", "ok.json"], 2),
        (&["train", "--config", "missing.json"], 3),
        (
            &[
                "enhance",
                "--ckpt",
                "fake.swpg",
                "--input",
                "bad.ppm",
                "--output",
                "o.ppm",
            ],
            3,
        ),
        (
            &[
                "evaluate",
                "--config",
                "ok.json",
                "--baseline",
                "histeq",
                "--report",
                "no/such/dir/r.json",
            ],
            3,
        ),
    ];
    for (args, want) in cases {
        let out = run(p, args);
        assert_eq!(code(&out), *want, "{args:?}: {}", stderr(&out));
        assert!(out.stdout.is_empty(), "{args:?}");
        assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn baselines_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "c.json", r#"{"model":{"input_size":32},"data":{"n_pairs":3}}"#);
    for baseline in ["identity", "histeq"] {
        let report = format!("{baseline}.json");
        let out = run(
            p,
            &[
                "evaluate",
                "--config",
                "c.json",
                "--baseline",
                baseline,
                "--report",
                &report,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(p.join(&report)).unwrap()).unwrap();
        assert_eq!(v["baseline"], baseline);
        assert_eq!(v["images"].as_array().unwrap().len(), 3);
        assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
        assert_eq!(json_lines(&out)[0]["baseline"], baseline);
    }
}

#[test]
fn gradcheck_reports_one_line_per_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--op", "softmax"]);
    assert_eq!(code(&out), 0);
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["op"], "softmax");
    assert_eq!(lines[0]["passed"], true);
    // the full discriminator misses its tolerance at eps 1e-3
    let out = run(dir.path(), &["gradcheck", "--op", "discriminator"]);
    assert_eq!(code(&out), 4);
    assert_eq!(json_lines(&out)[0]["passed"], false);
}
