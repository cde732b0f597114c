use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn medlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: TempDir,
}

const WORDS: &[&str] = &[
    "thrombin", "converts", "fibrinogen", "into", "fibrin", "the", "patient", "received",
    "heparin", "for", "deep", "vein", "thrombosis", "and", "aspirin", "daily", "insulin",
    "pancreas", "makes",
];

impl Work {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let mut lines = Vec::new();
        for i in 0..60 {
            let line: Vec<&str> = (0..25).map(|j| WORDS[(i * 7 + j * j * 3 + j) % WORDS.len()]).collect();
            lines.push(line.join(" "));
        }
        fs::write(w.path("corpus.txt"), lines.join("\n")).unwrap();
        fs::write(
            w.path("small.json"),
            r#"{"model":{"hidden_size":16,"heads":2,"layers":1,"vocab_size":320,"max_sequence":64},
                "train":{"tokens_per_batch":128,"sequence_length":32,"total_steps":6,"warmup_steps":2,"eval_interval":2},
                "optimizer":{"peak_lr":0.001}}"#,
        )
        .unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn tokenizer(&self) -> PathBuf {
        let tok = self.path("tok.json");
        if !tok.exists() {
            let out = medlm(&[
                "tokenizer", "train", "--corpus", s(&self.path("corpus.txt")), "--vocab-size", "300",
                "--out", s(&tok),
            ]);
            json(&out);
        }
        tok
    }

    fn pretrained(&self) -> PathBuf {
        let ckpt = self.path("base.ckpt");
        if !ckpt.exists() {
            let tok = self.tokenizer();
            json(&medlm(&[
                "pretrain", "--corpus", s(&self.path("corpus.txt")), "--tokenizer", s(&tok),
                "--config", s(&self.path("small.json")), "--seed", "3", "--out", s(&ckpt),
            ]));
        }
        ckpt
    }
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = medlm(&[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_invocations_are_usage_errors() {
    assert_eq!(code(&medlm(&["bogus"])), 2);
    assert_eq!(code(&medlm(&["inspect", "--nope"])), 2);
    assert_eq!(code(&medlm(&["eval", "--task", "essay", "--dataset", "x"])), 2);
    assert_eq!(code(&medlm(&["inspect"])), 2);
    assert_eq!(code(&medlm(&["eval", "--task", "mcq", "--dataset", "appendix_fixture"])), 2);
    assert_eq!(code(&medlm(&["--threads", "0", "inspect"])), 2);
    let w = Work::new();
    let out = medlm(&["tokenizer", "train", "--corpus", s(&w.path("corpus.txt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(code(&medlm(&["--help"])), 0);
}

#[test]
fn oracle_scores_the_appendix_fixture_perfectly() {
    for task in ["mcq", "cls"] {
        let r = json(&medlm(&["eval", "--task", task, "--dataset", "appendix_fixture", "--model", "oracle"]));
        assert_eq!(r["accuracy"], 1.0, "{task}");
        assert_eq!(r["failed"], 0);
    }
}

#[test]
fn constant_backend_scores_the_base_rate() {
    let r = json(&medlm(&[
        "eval", "--task", "mcq", "--dataset", "appendix_fixture", "--model", "constant", "--constant", "A",
    ]));
    let golds: Vec<&str> = r["items"].as_array().unwrap().iter().map(|i| i["gold"].as_str().unwrap()).collect();
    assert_eq!(golds, ["D", "C", "A", "A"]);
    assert_eq!(r["accuracy"], 0.5);
    let r = json(&medlm(&["eval", "--task", "mcq", "--dataset", "medmcqa", "--model", "constant", "--constant", "3"]));
    assert_eq!(r["accuracy"], 0.5);
    let r = json(&medlm(&["eval", "--task", "cls", "--dataset", "bioasq", "--model", "constant", "--constant", "no"]));
    assert_eq!(r["accuracy"], 0.0);
}

#[test]
fn inspect_reports_the_desk_parameter_count() {
    let w = Work::new();
    let tok = w.tokenizer();
    let ckpt = w.path("fresh.ckpt");
    json(&medlm(&[
        "pretrain", "--corpus", s(&w.path("corpus.txt")), "--tokenizer", s(&tok), "--steps", "0",
        "--out", s(&ckpt),
    ]));
    let info = json(&medlm(&["inspect", "--checkpoint", s(&ckpt)]));
    assert_eq!(info["parameter_count"], 141_056);
    assert_eq!(info["step"], 0);
    let info = json(&medlm(&["inspect", "--tokenizer", s(&tok)]));
    assert_eq!(info["vocab_size"], 300);
}

#[test]
fn tokenizer_commands_roundtrip_and_compare() {
    let w = Work::new();
    let tok = w.tokenizer();
    let text = "heparin for deep vein thrombosis, 5 mg";
    let out = medlm(&["tokenizer", "encode", "--model", s(&tok), "--text", text]);
    let ids = String::from_utf8(json_free(&out)).unwrap();
    let back = medlm(&["tokenizer", "decode", "--model", s(&tok), "--ids", ids.trim()]);
    assert_eq!(String::from_utf8(json_free(&back)).unwrap(), text);

    let bytes = w.path("bytes.json");
    json(&medlm(&[
        "tokenizer", "train", "--corpus", s(&w.path("corpus.txt")), "--vocab-size", "257",
        "--out", s(&bytes),
    ]));
    fs::write(w.path("terms.txt"), "thrombin\nfibrinogen\n").unwrap();
    let report = json(&medlm(&[
        "tokenizer", "compare", "--a", s(&tok), "--b", s(&bytes), "--terms", s(&w.path("terms.txt")),
    ]));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows[0]["count_b"], 8);
    assert!(rows[0]["count_a"].as_u64().unwrap() < 8);
    assert_eq!(rows[1]["count_b"], 10);

    assert_eq!(code(&medlm(&["tokenizer", "decode", "--model", s(&tok), "--ids", "99999"])), 1);
    assert_eq!(code(&medlm(&["tokenizer", "decode", "--model", s(&tok), "--ids", "x"])), 1);
}

fn json_free(out: &Output) -> Vec<u8> {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout.clone()
}

#[test]
fn replaying_a_manifest_reproduces_the_checkpoint() {
    let w = Work::new();
    let first = w.pretrained();
    let manifest = PathBuf::from(format!("{}.manifest.json", s(&first)));
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "pretrain");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["train"]["total_steps"], 6);
    assert_eq!(m["inputs"]["corpus"]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["finished_unix_ms"].as_u64().unwrap() >= m["started_unix_ms"].as_u64().unwrap());

    let again = w.path("again.ckpt");
    json(&medlm(&[
        "pretrain", "--corpus", s(&w.path("corpus.txt")), "--tokenizer", s(&w.tokenizer()),
        "--config", s(&manifest), "--out", s(&again),
    ]));
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());

    let other = w.path("other.ckpt");
    json(&medlm(&[
        "pretrain", "--corpus", s(&w.path("corpus.txt")), "--tokenizer", s(&w.tokenizer()),
        "--config", s(&manifest), "--seed", "4", "--out", s(&other), "--threads", "3",
    ]));
    assert_ne!(fs::read(&first).unwrap(), fs::read(&other).unwrap());

    let wrong = medlm(&[
        "finetune", "--task", "mcq", "--data", s(&w.path("corpus.txt")), "--checkpoint", s(&first),
        "--tokenizer", s(&w.tokenizer()), "--config", s(&manifest), "--out", s(&w.path("x.ckpt")),
    ]);
    assert_eq!(code(&wrong), 1);
}

#[test]
fn damaged_or_mismatched_inputs_are_data_errors() {
    let w = Work::new();
    let ckpt = w.pretrained();
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let bad = w.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = medlm(&["inspect", "--checkpoint", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(out.stdout.is_empty());

    let other_tok = w.path("other.json");
    json(&medlm(&[
        "tokenizer", "train", "--corpus", s(&w.path("corpus.txt")), "--vocab-size", "280",
        "--out", s(&other_tok),
    ]));
    let out = medlm(&[
        "eval", "--task", "mcq", "--dataset", "medqa", "--model", "checkpoint", "--checkpoint", s(&ckpt),
        "--tokenizer", s(&other_tok),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokenizer"));
}

fn mcq_lines() -> String {
    let rows = [
        ("q1", "What does thrombin make?", ["fibrin", "insulin"], 0),
        ("q2", "What does the pancreas make?", ["fibrin", "insulin"], 1),
        ("q3", "Which drug thins blood?", ["heparin", "insulin"], 0),
    ];
    rows.iter()
        .map(|(id, q, o, g)| {
            serde_json::json!({"id": id, "question": q, "options": o, "gold": g}).to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn strictness_controls_malformed_records() {
    let w = Work::new();
    let data = w.path("mcq.jsonl");
    fs::write(&data, mcq_lines() + "\n{\"id\": \"q4\", \"question\": \"?\"}\n").unwrap();
    let out = medlm(&["eval", "--task", "mcq", "--dataset", s(&data), "--model", "oracle"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
    let r = json(&medlm(&["eval", "--task", "mcq", "--dataset", s(&data), "--model", "oracle", "--permissive"]));
    assert_eq!(r["n"], 3);
    assert_eq!(
        code(&medlm(&["eval", "--task", "mcq", "--dataset", s(&w.path("missing.jsonl")), "--model", "oracle"])),
        1
    );
}

#[test]
fn finetune_then_evaluate_each_task() {
    let w = Work::new();
    let base = w.pretrained();
    let tok = w.tokenizer();

    let mcq = w.path("mcq.jsonl");
    fs::write(&mcq, mcq_lines()).unwrap();
    let mc = w.path("mc.ckpt");
    let r = json(&medlm(&[
        "finetune", "--task", "mcq", "--data", s(&mcq), "--checkpoint", s(&base), "--tokenizer", s(&tok),
        "--epochs", "2", "--batch-size", "2", "--out", s(&mc),
    ]));
    assert_eq!(r["task"], "multiple_choice");
    assert_eq!(r["steps_run"], 4);
    let report_path = w.path("report.json");
    let out = medlm(&[
        "eval", "--task", "mcq", "--dataset", s(&mcq), "--checkpoint", s(&mc), "--tokenizer", s(&tok),
        "--out", s(&report_path),
    ]);
    assert!(json_free(&out).is_empty());
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n"], 3);
    assert!(report["checkpoint_hash"].is_string());
    assert!(PathBuf::from(format!("{}.manifest.json", s(&report_path))).exists());

    let cls = w.path("cls.jsonl");
    fs::write(
        &cls,
        "{\"id\":\"c1\",\"context\":\"heparin thins blood\",\"question\":\"does heparin thin blood?\",\"gold\":\"yes\"}\n\
         {\"id\":\"c2\",\"context\":\"insulin lowers glucose\",\"question\":\"does insulin make fibrin?\",\"gold\":\"no\"}\n",
    )
    .unwrap();
    let cl = w.path("cl.ckpt");
    let r = json(&medlm(&[
        "finetune", "--task", "cls", "--data", s(&cls), "--checkpoint", s(&base), "--tokenizer", s(&tok),
        "--labels", "yes,no", "--epochs", "1", "--out", s(&cl),
    ]));
    let cls_tok = r["tokenizer"].as_str().unwrap().to_string();
    let r = json(&medlm(&[
        "eval", "--task", "cls", "--dataset", s(&cls), "--labels", "yes,no", "--checkpoint", s(&cl),
        "--tokenizer", &cls_tok,
    ]));
    assert_eq!(r["n"], 2);
    assert_eq!(r["labels"], serde_json::json!(["yes", "no"]));

    let gen = w.path("gen.jsonl");
    fs::write(&gen, "{\"id\":\"g1\",\"question\":\"What makes insulin?\",\"answer\":\"the pancreas\"}\n").unwrap();
    let gm = w.path("gm.ckpt");
    json(&medlm(&[
        "finetune", "--task", "gen", "--data", s(&gen), "--checkpoint", s(&base), "--tokenizer", s(&tok),
        "--epochs", "1", "--out", s(&gm),
    ]));
    let t1 = json(&medlm(&[
        "generate", "--dataset", s(&gen), "--checkpoint", s(&gm), "--tokenizer", s(&tok),
        "--max-new-tokens", "5", "--temperature", "1.0", "--seed", "9",
    ]));
    let t2 = json(&medlm(&[
        "generate", "--dataset", s(&gen), "--checkpoint", s(&gm), "--tokenizer", s(&tok),
        "--max-new-tokens", "5", "--temperature", "1.0", "--seed", "9",
    ]));
    assert_eq!(t1["entries"], t2["entries"]);
    assert_eq!(t1["entries"][0]["reference"], "the pancreas");
    let one = json(&medlm(&[
        "generate", "--question", "What makes insulin?", "--checkpoint", s(&gm), "--tokenizer", s(&tok),
        "--max-new-tokens", "3",
    ]));
    assert!(one["entries"][0]["generated"].is_string());
}
