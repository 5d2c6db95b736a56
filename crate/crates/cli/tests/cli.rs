use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gridread(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridread"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gridread(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        files.push((
            entry.strip_prefix(dir).unwrap().display().to_string(),
            fs::read(&entry).unwrap(),
        ));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "synth",
            "--pages",
            "5",
            "--layout",
            "sine",
            "--seed",
            "7",
            "--out",
            p(dir),
        ]);
    }
    let fa = read_dir_bytes(&a);
    assert_eq!(fa.len(), 3 + 5);
    assert_eq!(fa, read_dir_bytes(&b));

    let other = tmp.path().join("c");
    ok(&[
        "synth",
        "--pages",
        "5",
        "--layout",
        "sine",
        "--seed",
        "8",
        "--out",
        p(&other),
    ]);
    assert_ne!(fa, read_dir_bytes(&other));

    let stdout_a = ok(&["synth", "--pages", "2", "--seed", "3"]).stdout;
    assert_eq!(stdout_a, ok(&["synth", "--pages", "2", "--seed", "3"]).stdout);
}

#[test]
fn zero_noise_decode_then_eval_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    ok(&[
        "synth",
        "--pages",
        "4",
        "--layout",
        "rot90",
        "--seed",
        "1",
        "--out",
        p(&dir),
    ]);
    let results = tmp.path().join("results.jsonl");
    ok(&["decode", p(&dir.join("maps")), "--out", p(&results)]);
    let report = json(&ok(&[
        "eval",
        "--results",
        p(&results),
        "--annotations",
        p(&dir.join("annotations.jsonl")),
    ]));
    assert_eq!(report["ar_star"], 1.0);
    assert_eq!(report["cr_star"], 1.0);
    for key in ["det_only", "det_cls"] {
        for m in ["p", "r", "f"] {
            assert_eq!(report[key][m], 1.0, "{key}.{m}");
        }
    }
    assert_eq!(report["per_page"].as_array().unwrap().len(), 4);

    // parallel decoding yields the same bytes
    let parallel = tmp.path().join("parallel.jsonl");
    ok(&[
        "decode",
        p(&dir.join("maps")),
        "--deterministic",
        "false",
        "--out",
        p(&parallel),
    ]);
    assert_eq!(fs::read(&results).unwrap(), fs::read(&parallel).unwrap());

    // rescoring with an LM built from the transcripts changes nothing here
    let rescored = ok(&[
        "decode",
        p(&dir.join("maps")),
        "--lm-corpus",
        p(&dir.join("transcripts.jsonl")),
    ]);
    let plain = ok(&["decode", p(&dir.join("maps"))]);
    let transcripts = |o: &Output| -> Vec<Value> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                v["lines"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|line| {
                        line["chars"]
                            .as_array()
                            .unwrap()
                            .iter()
                            .map(|c| c["cls"].clone())
                            .collect::<Value>()
                    })
                    .collect()
            })
            .collect()
    };
    assert_eq!(transcripts(&rescored), transcripts(&plain));
}

fn record(page_id: &str, lines: &[&[u32]]) -> String {
    let lines: Vec<Value> = lines
        .iter()
        .enumerate()
        .map(|(row, cls)| {
            let chars: Vec<Value> = cls
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    serde_json::json!({"i": k + 1, "j": row + 1, "x": 0.1, "y": 0.1, "w": 0.05, "h": 0.05, "cls": c, "score": 1.0})
                })
                .collect();
            serde_json::json!({"chars": chars, "sol_conf": 1.0, "eol_conf": 1.0})
        })
        .collect();
    serde_json::json!({"page_id": page_id, "lines": lines}).to_string()
}

#[test]
fn eval_hand_built_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("r.jsonl");
    let annots = tmp.path().join("a.jsonl");
    // "abc", "de" against "abc"
    fs::write(&results, record("p", &[&[1, 2, 3], &[4, 5]]) + "\n").unwrap();
    fs::write(&annots, r#"{"page_id": "p", "lines": [[1, 2, 3]]}"#).unwrap();
    let report = json(&ok(&["eval", "--results", p(&results), "--annotations", p(&annots)]));
    assert!((report["ar_star"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(report["cr_star"], 1.0);
    assert_eq!(report["per_page"][0]["n_ie"], 2);
    assert!(report["det_only"].is_null());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gridread(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(gridread(&["synth", "--layout", "diagonal"]).status.code(), Some(1));
    assert_eq!(gridread(&["decode", "--nms-iou", "2", "x.pgnm"]).status.code(), Some(1));
    assert_eq!(gridread(&["--help"]).status.code(), Some(0));

    let missing = tmp.path().join("missing.pgnm");
    assert_eq!(gridread(&["decode", p(&missing)]).status.code(), Some(2));
    let garbage = tmp.path().join("bad.pgnm");
    fs::write(&garbage, b"PGNM\x07garbage").unwrap();
    assert_eq!(gridread(&["decode", p(&garbage)]).status.code(), Some(2));

    let results = tmp.path().join("r.jsonl");
    let annots = tmp.path().join("a.jsonl");
    fs::write(&results, record("stray", &[&[1]]) + "\n").unwrap();
    fs::write(&annots, r#"{"page_id": "p", "lines": [[1]]}"#).unwrap();
    assert_eq!(
        gridread(&["eval", "--results", p(&results), "--annotations", p(&annots)])
            .status
            .code(),
        Some(2)
    );
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(gridread(&["synth", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn train_sim_and_export_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
[synth]
n_lines = 3
chars_per_line = [4, 6]

[train]
real_pages = 3
synthetic_pages = 1

[[train.stages]]
stage = "initialize"
n_passes = 1

[[train.stages]]
stage = "train"
n_passes = 3
halve_every = 1
[train.stages.noise]
jitter_sigma = 0.1
label_swap_p = 0.05
"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let summary = json(&ok(&[
            "train-sim",
            "--config",
            p(&cfg),
            "--seed",
            "5",
            "--out",
            p(&out),
        ]));
        (out, summary)
    };
    let (a, summary) = run("a");
    let (b, _) = run("b");
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    assert_eq!(fs::read_to_string(a.join("passes.jsonl")).unwrap().lines().count(), 4);
    assert!(summary["quality"]["coverage"].as_f64().unwrap() > 0.9);

    let export = json(&ok(&[
        "export-labels",
        "--store",
        p(&a.join("store.jsonl")),
        "--pages",
        p(&a.join("pages.jsonl")),
    ]));
    let written: Value = serde_json::from_slice(&fs::read(a.join("labels.json")).unwrap()).unwrap();
    assert_eq!(export, written);

    assert_eq!(gridread(&["train-sim", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn viz_renders_each_page() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    ok(&["synth", "--pages", "2", "--seed", "2", "--out", p(&dir)]);
    let results = tmp.path().join("results.jsonl");
    ok(&["decode", p(&dir.join("maps")), "--out", p(&results)]);

    let svg = String::from_utf8(
        ok(&[
            "viz",
            "--results",
            p(&results),
            "--annotations",
            p(&dir.join("annotations.jsonl")),
            "--page",
            "page-0001",
        ])
        .stdout,
    )
    .unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 5);
    assert_eq!(svg.matches(r#"class="char""#).count(), 50);

    let svgs = tmp.path().join("svg");
    ok(&["viz", "--results", p(&results), "--out", p(&svgs)]);
    assert!(svgs.join("page-0000.svg").exists() && svgs.join("page-0001.svg").exists());
    assert_eq!(gridread(&["viz", "--results", p(&results)]).status.code(), Some(1));
}
