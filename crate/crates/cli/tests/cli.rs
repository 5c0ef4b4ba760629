use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pkg_core::corpus::write_dataset;
use pkg_core::template::render_answer_prompt;
use pkg_core::{TaskKind, TaskRecord};
use serde_json::{json, Value};

const BACKGROUND: &str = "Fixture background sentence.";

fn fact(id: &str, claim: &str, gold: &str) -> TaskRecord {
    TaskRecord {
        id: id.into(),
        task_kind: TaskKind::FactCheck,
        question: claim.into(),
        options: vec![],
        context: None,
        gold_answer: gold.into(),
        gold_background: Some(format!("Evidence about {claim}.")),
        gold_table: None,
        image_feature_ref: None,
        categories: BTreeMap::new(),
    }
}

fn test_records() -> Vec<TaskRecord> {
    vec![
        fact("t1", "Paris is in France", "true"),
        fact("t2", "The moon is made of cheese", "false"),
        fact("t3", "Water boils at 100 C at sea level", "true"),
    ]
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Three train and three test records; the answering stub says "true" unless
    /// the prompt carries the knowledge-module background for `t2`.
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let train = vec![
            fact("a", "Rust is a language", "true"),
            fact("b", "Cats are reptiles", "false"),
            fact("c", "Snow is cold", "true"),
        ];
        write_dataset(&root.join("train.jsonl"), &train).unwrap();
        write_dataset(&root.join("test.jsonl"), &test_records()).unwrap();
        let passages = [
            ("d1", "Paris is the capital of France."),
            ("d2", "The moon is a rocky body orbiting Earth."),
            ("d3", "Water boils at 100 degrees at sea level."),
        ]
        .iter()
        .map(|(id, t)| json!({"doc_id": id, "text": t}).to_string())
        .collect::<Vec<_>>()
        .join("\n");
        fs::write(root.join("passages.jsonl"), passages + "\n").unwrap();

        let t2 = &test_records()[1];
        let guided_t2 = render_answer_prompt(BACKGROUND, t2).unwrap().text;
        let cfg = json!({
            "task_kind": "FactCheck",
            "datasets": {"train": "train.jsonl", "test": "test.jsonl"},
            "passages": "passages.jsonl",
            "cache_path": "cache/responses.log",
            "output_dir": "runs",
            "max_in_flight": 2,
            "pkg_backend": {"model_name": "pkg-stub", "stub": {"default": BACKGROUND}},
            "llm_backend": {"model_name": "llm-stub", "stub": {"default": "True.", "replies": {guided_t2: "False."}}}
        });
        fs::write(root.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Fixture { _tmp: tmp, root }
    }

    fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    fn pkg(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pkg"))
            .arg("--config")
            .arg(self.config())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.pkg(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn edit_config(&self, f: impl FnOnce(&mut Value)) {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(self.config()).unwrap()).unwrap();
        f(&mut v);
        fs::write(self.config(), v.to_string()).unwrap();
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn prepare_exports_one_triple_per_record() {
    let fx = Fixture::new();
    fx.edit_config(|v| {
        v.as_object_mut().unwrap().remove("passages");
    });
    let stdout = fx.ok(&["prepare"]);
    assert!(stdout.contains("exported 3 triples"), "{stdout}");
    let path = fx.runs().join("prepare-latest/training.json");
    let triples: Vec<Value> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(triples.len(), 3);
    assert_eq!(triples[0]["input"], "Statement: Rust is a language");
    let m: Value = serde_json::from_str(&fs::read_to_string(fx.runs().join("prepare-latest/training.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["batch_size"], 64);
}

#[test]
fn direct_run_writes_one_line_per_record() {
    let fx = Fixture::new();
    fx.ok(&["run"]);
    let text = fs::read_to_string(fx.runs().join("latest/predictions.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(manifest(&fx.runs().join("direct-latest"))["llm_network_calls"], 3);
}

#[test]
fn full_workflow_produces_the_comparison_table() {
    let fx = Fixture::new();
    fx.ok(&["prepare"]);
    let stdout = fx.ok(&["index"]);
    assert!(stdout.contains("indexed 3 passages"), "{stdout}");
    fx.ok(&["run", "--strategy", "direct"]);
    fx.ok(&["eval"]);
    fx.ok(&["run", "--strategy", "pkg"]);
    fx.ok(&["eval"]);
    let table = fx.ok(&["report"]);
    let golden = "| Method | FM2 |\n|---|---|\n| Direct | 66.7 |\n| Pkg | 100.0 |\n";
    assert_eq!(table, golden);
    assert_eq!(fs::read_to_string(fx.runs().join("report-latest/comparison.md")).unwrap(), golden);
    for ext in ["json", "csv", "md"] {
        assert!(fx.runs().join(format!("pkg-latest/report.{ext}")).exists());
    }
    let m = manifest(&fx.runs().join("pkg-latest"));
    assert_eq!((m["pkg_network_calls"].as_u64(), m["llm_network_calls"].as_u64()), (Some(3), Some(3)));

    fx.ok(&["run", "--strategy", "retrieval"]);
    let preds = fs::read_to_string(fx.runs().join("retrieval-latest/predictions.jsonl")).unwrap();
    let first: Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    assert_eq!(first["background_text"], "Paris is the capital of France.");
}

#[test]
fn rerun_with_warm_cache_and_resume_make_no_network_calls() {
    let fx = Fixture::new();
    fx.ok(&["run", "--strategy", "pkg"]);
    let first = fs::read(fx.runs().join("pkg-latest/predictions.jsonl")).unwrap();

    fx.ok(&["run", "--strategy", "pkg"]);
    let m = manifest(&fx.runs().join("pkg-latest"));
    assert_eq!((m["pkg_network_calls"].as_u64(), m["llm_network_calls"].as_u64()), (Some(0), Some(0)));
    assert_eq!(m["llm_cache_hits"], 3);
    assert_eq!(fs::read(fx.runs().join("pkg-latest/predictions.jsonl")).unwrap(), first);

    let stdout = fx.ok(&["run", "--strategy", "pkg", "--resume"]);
    assert!(stdout.contains("0 records run, 3 reused"), "{stdout}");
    assert_eq!(fs::read(fx.runs().join("pkg-latest/predictions.jsonl")).unwrap(), first);
}

#[test]
fn config_errors_exit_2_without_outputs() {
    let fx = Fixture::new();
    fx.edit_config(|v| v["datasets"]["test"] = json!("missing.jsonl"));
    for args in [&["run"][..], &["eval"], &["prepare", "--templates", "nope.json"]] {
        assert_eq!(fx.pkg(args).status.code(), Some(2), "{args:?}");
    }
    assert!(!fx.runs().exists());

    let fx = Fixture::new();
    fx.edit_config(|v| {
        v.as_object_mut().unwrap().remove("pkg_backend");
    });
    assert_eq!(fx.pkg(&["run", "--strategy", "pkg"]).status.code(), Some(2));
    assert_eq!(fx.pkg(&["run", "--strategy", "retrieval"]).status.code(), Some(2));
    assert_eq!(fx.pkg(&["run", "--max-in-flight", "0"]).status.code(), Some(2));
    assert!(!fx.runs().exists());

    let out = Command::new(env!("CARGO_BIN_EXE_pkg")).arg("run").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_backend_exceeds_the_failure_budget() {
    let fx = Fixture::new();
    fx.edit_config(|v| {
        v["llm_backend"] = json!({"model_name": "m", "endpoint_url": "http://127.0.0.1:9/v1", "timeout_secs": 2, "max_retries": 0, "rate_limit": 1000})
    });
    let out = fx.pkg(&["run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = fs::read_to_string(fx.runs().join("direct-latest/predictions.jsonl")).unwrap();
    assert!(preds.lines().all(|l| l.contains("\"error\"")));
}

#[test]
fn scoring_errors_exit_4() {
    let fx = Fixture::new();
    fx.ok(&["run"]);
    let path = fx.runs().join("latest/predictions.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let partial: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(&path, &partial).unwrap();
    assert_eq!(fx.pkg(&["eval"]).status.code(), Some(4));
    assert_eq!(fx.pkg(&["eval", "--allow-partial"]).status.code(), Some(0));

    fs::write(&path, partial.replace("\"t1\"", "\"zz\"")).unwrap();
    assert_eq!(fx.pkg(&["eval", "--allow-partial"]).status.code(), Some(4));
}
