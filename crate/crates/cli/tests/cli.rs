//! End-to-end tests that drive the `qtod` binary.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};
use tempfile::TempDir;

use qtod_core::data::{load_dialogues, LoadOptions};

fn qtod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtod"))
        .args(args)
        .env_remove("QTOD_BACKEND_URL")
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let output = qtod(args);
    assert!(
        output.status.success(),
        "qtod {args:?} failed: {}",
        stderr(&output)
    );
    stdout(&output)
}

/// The path printed as `wrote <path>` whose file name is `name`.
fn written(out: &str, name: &str) -> PathBuf {
    out.lines()
        .filter_map(|l| l.strip_prefix("wrote "))
        .map(|p| PathBuf::from(p.split(" (").next().unwrap()))
        .find(|p| p.file_name().is_some_and(|f| f == name))
        .unwrap_or_else(|| panic!("no {name} in output:\n{out}"))
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &TempDir, dialogues: &str) -> PathBuf {
    let data = dir.path().join("synth");
    ok(&[
        "synth",
        "--dialogues",
        dialogues,
        "--seed",
        "3",
        "--pool-size",
        "64",
        "--out",
        s(&data),
    ]);
    data
}

fn report(out: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(written(out, "report.json")).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_lines(path: &Path, rows: &[Value]) {
    let mut file = fs::File::create(path).unwrap();
    for row in rows {
        writeln!(file, "{row}").unwrap();
    }
}

#[test]
fn synth_run_eval_reproduces_gold() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "60");
    let runs = dir.path().join("runs");
    let run = ok(&[
        "run",
        "--dataset",
        s(&data),
        "--backend",
        "rule",
        "--out",
        s(&runs),
    ]);
    let results = written(&run, "results.jsonl");
    let metadata: Value =
        serde_json::from_str(&fs::read_to_string(results.with_file_name("metadata.json")).unwrap())
            .unwrap();
    assert_eq!(metadata["command"], "run");
    assert_eq!(metadata["config"]["top_n"], 3);
    assert!(metadata["run_id"]
        .as_str()
        .unwrap()
        .ends_with(metadata["config_hash"].as_str().unwrap()));

    let eval = ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--results",
        s(&results),
        "--out",
        s(&runs),
    ]);
    assert!(eval.contains("entity_f1"), "console table printed");
    let r = report(&eval);
    assert_eq!(r["entity_f1"], 1.0);
    assert_eq!(r["recall_at_n"], 1.0);
    let csv = fs::read_to_string(written(&eval, "report.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nentity_f1,1.000000\n"));

    let gold: HashMap<(String, u64), String> =
        load_dialogues(data.join("test.jsonl"), LoadOptions::lenient())
            .unwrap()
            .iter()
            .flat_map(|d| {
                d.user_turns()
                    .into_iter()
                    .map(|t| {
                        (
                            (d.session_id.clone(), t.index as u64),
                            t.gold_response.unwrap().to_string(),
                        )
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    let mut rows = read_lines(&results);
    for row in &mut rows {
        let key = (
            row["session_id"].as_str().unwrap().to_string(),
            row["turn"].as_u64().unwrap(),
        );
        row["response"] = json!(gold[&key]);
    }
    rows.reverse();
    let oracle = dir.path().join("gold.jsonl");
    write_lines(&oracle, &rows);
    let r = report(&ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--results",
        s(&oracle),
        "--out",
        s(&runs),
    ]));
    assert_eq!(r["entity_f1"], 1.0);
    assert_eq!(r["bleu"], 1.0);
}

#[test]
fn eval_without_results_runs_the_pipeline() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "30");
    let out = ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--mode",
        "identity",
        "--out",
        s(&dir.path().join("runs")),
    ]);
    assert!(written(&out, "results.jsonl").exists());
    assert!(report(&out)["entity_f1"].as_f64().unwrap() <= 1.0);
}

#[test]
fn misaligned_results_are_rejected() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "30");
    let runs = dir.path().join("runs");
    let results = written(
        &ok(&["run", "--dataset", s(&data), "--out", s(&runs)]),
        "results.jsonl",
    );
    let mut rows = read_lines(&results);
    let dropped = rows.remove(0)["session_id"].as_str().unwrap().to_string();
    let partial = dir.path().join("partial.jsonl");
    write_lines(&partial, &rows);
    let output = qtod(&[
        "eval",
        "--dataset",
        s(&data),
        "--results",
        s(&partial),
        "--out",
        s(&runs),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains(&dropped), "{}", stderr(&output));

    rows.push(rows[0].clone());
    write_lines(&partial, &rows);
    let output = qtod(&[
        "eval",
        "--dataset",
        s(&data),
        "--results",
        s(&partial),
        "--out",
        s(&runs),
    ]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn unreachable_remote_exits_with_transport_code() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "10");
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let url = format!("http://127.0.0.1:{port}");
    let output = qtod(&[
        "run",
        "--dataset",
        s(&data),
        "--backend",
        "remote",
        "--backend-url",
        &url,
        "--max-retries",
        "0",
        "--out",
        s(&dir.path().join("runs")),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(
        stderr(&output).contains("query stage failed"),
        "{}",
        stderr(&output)
    );
}

#[test]
fn backend_url_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "10");
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let output = Command::new(env!("CARGO_BIN_EXE_qtod"))
        .args([
            "run",
            "--dataset",
            s(&data),
            "--backend",
            "remote",
            "--max-retries",
            "0",
        ])
        .args(["--out", s(&dir.path().join("runs"))])
        .env("QTOD_BACKEND_URL", format!("http://127.0.0.1:{port}"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    let missing = qtod(&["run", "--dataset", s(&data), "--backend", "remote"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_with_code_one() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "10");
    let runs = dir.path().join("runs");
    assert_eq!(
        qtod(&["run", "--dataset", s(&data), "--top-n", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        qtod(&["run", "--dataset", s(&data), "--split", "bogus"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        qtod(&[
            "run",
            "--dataset",
            s(&dir.path().join("missing")),
            "--out",
            s(&runs)
        ])
        .status
        .code(),
        Some(1)
    );
    let output = qtod(&[
        "run",
        "--dataset",
        s(&data),
        "--mode",
        "oracle",
        "--out",
        s(&runs),
    ]);
    assert!(
        output.status.success(),
        "synthetic turns carry gold records"
    );
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "30");
    let config = dir.path().join("run.toml");
    fs::write(&config, "top_n = 1\nmode = \"identity\"\n").unwrap();
    let runs = dir.path().join("runs");
    let out = ok(&[
        "run",
        "--dataset",
        s(&data),
        "--config",
        s(&config),
        "--out",
        s(&runs),
    ]);
    let rows = read_lines(&written(&out, "results.jsonl"));
    assert!(rows.iter().all(|r| r["mode"] == "identity_query"));
    assert!(rows
        .iter()
        .all(|r| r["retrieved"]["entries"].as_array().unwrap().len() <= 1));

    let out = ok(&[
        "run",
        "--dataset",
        s(&data),
        "--config",
        s(&config),
        "--mode",
        "qtod",
        "--out",
        s(&runs),
    ]);
    let rows = read_lines(&written(&out, "results.jsonl"));
    assert!(rows.iter().all(|r| r["mode"] == "qtod"));
}

#[test]
fn runs_are_deterministic_and_never_overwrite() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "30");
    let runs = dir.path().join("runs");
    let args = [
        "run",
        "--dataset",
        s(&data),
        "--jobs",
        "2",
        "--out",
        s(&runs),
    ];
    let a = written(&ok(&args), "results.jsonl");
    let b = written(&ok(&args), "results.jsonl");
    assert_ne!(a, b);
    let strip = |p: &Path| {
        read_lines(p)
            .into_iter()
            .map(|mut r| {
                r["timings"] = Value::Null;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    let keys: Vec<(String, u64)> = strip(&a)
        .iter()
        .map(|r| {
            (
                r["session_id"].as_str().unwrap().to_string(),
                r["turn"].as_u64().unwrap(),
            )
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn chat_answers_and_quits() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "10");
    let session =
        load_dialogues(data.join("train.jsonl"), LoadOptions::lenient()).unwrap()[0].clone();
    let request = session
        .turns
        .iter()
        .find(|t| t.text.starts_with("i need") || t.text.contains(' '))
        .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_qtod"))
        .args([
            "chat",
            "--dataset",
            s(&data),
            "--session",
            &session.session_id,
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let input = format!("{}\n/reset\n/quit\nnever read\n", request.text);
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    let output = child.wait_with_output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("query: "), "{text}");
    assert!(text.contains("system: "), "{text}");
    assert!(text.contains("context cleared"));
    assert_eq!(text.matches("query: ").count(), 1);

    let output = qtod(&["chat", "--kb", s(&data.join("pool.json"))]);
    assert!(output.status.success(), "end of input ends the chat");
    assert_eq!(qtod(&["chat"]).status.code(), Some(1));
}

#[test]
fn benchmarks_write_tables() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "30");
    let runs = dir.path().join("runs");
    let pool = data.join("pool.json");
    let out = ok(&[
        "bench-kb",
        "--dataset",
        s(&data),
        "--pool",
        s(&pool),
        "--min-exp",
        "3",
        "--max-exp",
        "6",
        "--out",
        s(&runs),
    ]);
    let csv = fs::read_to_string(written(&out, "scaling.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kb_size,metric,latency_ms");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("8,1.000000,"));
    assert!(lines[4].starts_with("64,1.000000,"));

    let out = ok(&[
        "bench-kb",
        "--dataset",
        s(&data),
        "--sizes",
        "8,16",
        "--metric",
        "recall",
        "--out",
        s(&runs),
    ]);
    assert!(fs::read_to_string(written(&out, "scaling.csv"))
        .unwrap()
        .contains("16,1.000000,"));

    let out = ok(&[
        "topn",
        "--dataset",
        s(&data),
        "--n-values",
        "1,3",
        "--out",
        s(&runs),
    ]);
    let csv = fs::read_to_string(written(&out, "topn.csv")).unwrap();
    assert!(csv.starts_with("n,entity_f1,precision,recall,bleu,recall_at_n\n1,"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(
        qtod(&["topn", "--dataset", s(&data), "--n-values", "0"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn dataset_tools_compose() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "300");
    let stats: Value = serde_json::from_str(&ok(&["stats", "--dataset", s(&data)])).unwrap();
    assert_eq!(stats["all"]["dialogues"], 300);
    assert_eq!(stats["train"]["dialogues"], 240);

    let recipe = dir.path().join("recipe.json");
    let slot = |domain: &str| json!({"options": [{"source": "syn", "domain": domain}]});
    fs::write(
        &recipe,
        json!({"slots": [slot("restaurant"), slot("hotel")]}).to_string(),
    )
    .unwrap();
    let merged = dir.path().join("merged");
    let source = format!("syn={}", s(&data));
    let build = [
        "build-crossdomain",
        "--source",
        &source,
        "--recipe",
        s(&recipe),
        "--count",
        "60",
        "--ratio",
        "4,1,1",
        "--seed",
        "7",
        "--out",
        s(&merged),
    ];
    assert!(ok(&build).contains("train 40 / validation 10 / test 10"));
    let first = fs::read_to_string(merged.join("test.jsonl")).unwrap();
    ok(&build);
    assert_eq!(
        fs::read_to_string(merged.join("test.jsonl")).unwrap(),
        first,
        "seeded"
    );
    let merged_test = load_dialogues(merged.join("test.jsonl"), LoadOptions::lenient()).unwrap();
    assert!(merged_test.iter().all(|d| d.session_id.contains('+')));
    let out = ok(&[
        "eval",
        "--dataset",
        s(&merged),
        "--out",
        s(&dir.path().join("runs")),
    ]);
    assert_eq!(report(&out)["recall_at_n"], 1.0);

    let too_many = qtod(&[
        "build-crossdomain",
        "--source",
        &source,
        "--recipe",
        s(&recipe),
        "--count",
        "1000",
        "--out",
        s(&merged),
    ]);
    assert_eq!(too_many.status.code(), Some(1));

    let few = dir.path().join("few");
    assert!(ok(&[
        "fewshot",
        "--dataset",
        s(&data),
        "--fraction",
        "0.05",
        "--seed",
        "1",
        "--out",
        s(&few)
    ])
    .contains("train 12 of 240"));
    let few_test = fs::read_to_string(few.join("test.jsonl")).unwrap();
    assert_eq!(
        few_test,
        fs::read_to_string(data.join("test.jsonl")).unwrap()
    );
    assert_eq!(
        qtod(&[
            "fewshot",
            "--dataset",
            s(&data),
            "--fraction",
            "1.5",
            "--out",
            s(&few)
        ])
        .status
        .code(),
        Some(1)
    );

    let pairs = dir.path().join("pairs.jsonl");
    ok(&["export-training", "--dataset", s(&data), "--out", s(&pairs)]);
    let rows = read_lines(&pairs);
    assert!(rows.iter().any(|r| r["task"] == "query"
        && r["prompt"]
            .as_str()
            .unwrap()
            .starts_with("translate dialogue context to query: user: ")));
    assert!(rows.iter().any(|r| r["task"] == "response"
        && r["prompt"].as_str().unwrap().starts_with(
            "generate system response based on knowledge and dialogue context: knowledge: "
        )));
}

#[test]
fn convert_writes_loadable_dialogues() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("kvret.json");
    let value = json!([{
        "dialogue": [
            {"turn": "driver", "data": {"end_dialogue": false, "utterance": "where is the nearest gas station", "query": "gas station"}},
            {"turn": "assistant", "data": {"utterance": "valero is 4 miles away", "requested": {}, "slots": {}}}
        ],
        "scenario": {
            "kb": {"column_names": ["poi", "distance", "poi_type"], "items": [
                {"poi": "valero", "distance": "4 miles", "poi_type": "gas station"}
            ]},
            "task": {"intent": "navigate"},
            "uuid": "abc"
        }
    }]);
    fs::write(&raw, value.to_string()).unwrap();
    let out = dir.path().join("smd.jsonl");
    ok(&[
        "convert",
        "--format",
        "smd",
        "--input",
        s(&raw),
        "--out",
        s(&out),
    ]);
    let loaded = load_dialogues(&out, LoadOptions::default()).unwrap();
    assert_eq!(loaded[0].session_id, "abc");
    let output = qtod(&[
        "convert",
        "--format",
        "smd",
        "--input",
        s(&dir.path().join("nope.json")),
        "--out",
        s(&out),
    ]);
    assert_ne!(output.status.code(), Some(0));
}
