use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ragtag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragtag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ragtag(args);
    assert!(
        out.status.success(),
        "ragtag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic corpus with contexts.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "synth",
            "--out",
            s(&root.join("data")),
            "--seed",
            "5",
            "--labeled",
            "240",
            "--dev-size",
            "80",
            "--unlabeled-size",
            "60",
            "--names-per-type",
            "20",
        ]);
        let f = Fixture { _dir: dir, root };
        ok(&[
            "rerank",
            "--out",
            s(&f.root.join("ctx")),
            "--train",
            s(&f.data("train.conll")),
            "--dev",
            s(&f.data("dev.conll")),
            "--unlabeled",
            s(&f.data("unlabeled.conll")),
            "--retrieval-fixture",
            s(&f.data("search_cache.jsonl")),
            "--scorer",
            "fuzzy",
        ]);
        f
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn contexts(&self) -> PathBuf {
        self.root.join("ctx").join("contexts.jsonl")
    }

    fn train(&self, out: &str, mode: &str) -> PathBuf {
        let dir = self.root.join(out);
        ok(&[
            "train",
            "--out",
            s(&dir),
            "--train",
            s(&self.data("train.conll")),
            "--dev",
            s(&self.data("dev.conll")),
            "--contexts",
            s(&self.contexts()),
            "--mode",
            mode,
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--encoder-lr",
            "0.01",
            "--hidden",
            "8",
            "--hash-dims",
            "4096",
        ]);
        dir
    }
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn training_twice_gives_identical_bytes() {
    let f = Fixture::new();
    let a = f.train("a", "cl_both");
    let b = f.train("b", "cl_both");
    for name in ["metrics.jsonl", "checkpoint.bin"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs between runs");
    }
    let log = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn reranking_twice_gives_identical_contexts() {
    let f = Fixture::new();
    let again = f.root.join("ctx2");
    ok(&[
        "rerank",
        "--out",
        s(&again),
        "--train",
        s(&f.data("train.conll")),
        "--dev",
        s(&f.data("dev.conll")),
        "--unlabeled",
        s(&f.data("unlabeled.conll")),
        "--retrieval-fixture",
        s(&f.data("search_cache.jsonl")),
        "--scorer",
        "fuzzy",
    ]);
    assert_eq!(
        std::fs::read(f.contexts()).unwrap(),
        std::fs::read(again.join("contexts.jsonl")).unwrap()
    );
    let header: Value = serde_json::from_str(
        std::fs::read_to_string(f.contexts()).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    assert_eq!(header["k"], 20);
    assert_eq!(header["l"], 6);
    assert_eq!(header["sep_token"], "[SEP]");
}

#[test]
fn predict_then_score_matches_direct_eval() {
    let f = Fixture::new();
    let run = f.train("m", "cl_kl");
    let ck = run.join("checkpoint.bin");
    for view in ["original", "retrieval"] {
        let direct = json(&ok(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--dev",
            s(&f.data("dev.conll")),
            "--view",
            view,
            "--contexts",
            s(&f.contexts()),
        ]));
        let pred_dir = f.root.join(format!("pred-{view}"));
        ok(&[
            "predict",
            "--out",
            s(&pred_dir),
            "--checkpoint",
            s(&ck),
            "--dev",
            s(&f.data("dev.conll")),
            "--view",
            view,
            "--contexts",
            s(&f.contexts()),
        ]);
        let predictions = pred_dir.join("predictions.conll");
        let text = std::fs::read_to_string(&predictions).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first.split_whitespace().count(), 3, "{first}");
        let scored = json(&ok(&["eval", "--predictions", s(&predictions)]));
        assert_eq!(direct["f1"], scored["f1"], "{view}");
        assert_eq!(direct["precision"], scored["precision"]);
        assert_eq!(scored["sentences"], 80);
    }
}

#[test]
fn original_view_needs_no_contexts() {
    let f = Fixture::new();
    let run = f.train("m", "cl_kl");
    let out = json(&ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--dev",
        s(&f.data("dev.conll")),
        "--view",
        "wo_context",
    ]));
    assert_eq!(out["view"], "original");
    assert!(out["f1"].as_f64().unwrap() > 0.0);

    let out = ragtag(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--dev",
        s(&f.data("dev.conll")),
        "--view",
        "w_context",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ragtag retrieve"));
}

#[test]
fn context_modes_without_contexts_point_to_retrieve() {
    let f = Fixture::new();
    let out = ragtag(&["train", "--train", s(&f.data("train.conll")), "--mode", "cl_l2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ragtag retrieve"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ragtag(&["--help"]).status.code(), Some(0));
    assert_eq!(ragtag(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ragtag(&["train", "--epochs", "many"]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(ragtag(&["--config", s(&bad), "train"]).status.code(), Some(1));

    let missing = dir.path().join("missing.conll");
    let out = ragtag(&["train", "--train", s(&missing), "--mode", "wo_context"]);
    assert_eq!(out.status.code(), Some(2));

    let broken = dir.path().join("broken.conll");
    std::fs::write(&broken, "Rome B-LOC\nis\n").unwrap();
    let out = ragtag(&["train", "--train", s(&broken), "--mode", "wo_context"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let data = dir.path().join("d.conll");
    std::fs::write(&data, "Rome B-LOC\nis O\nfar O\n\nAda B-PER\nwrote O\n").unwrap();
    let out = ragtag(&["retrieve", "--out", s(dir.path()), "--train", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2 queries failed"), "{err}");
    assert!(err.contains("\"Rome is far\"") && err.contains("\"Ada wrote\""), "{err}");
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let f = Fixture::new();
    let config = f.root.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 9\n[data]\ntrain = {:?}\ndev = {:?}\n[rerank]\ncontexts = {:?}\n[encoder]\nhidden = 8\nhash_dims = 4096\n[train]\nmode = \"w_context\"\nepochs = 3\nbatch_size = 8\n",
            s(&f.data("train.conll")),
            s(&f.data("dev.conll")),
            s(&f.contexts()),
        ),
    )
    .unwrap();
    let out = f.root.join("cfg");
    ok(&["--config", s(&config), "train", "--out", s(&out), "--epochs", "1"]);
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["loss_components"]["nll"], 0.0);
    assert!(records[0]["loss_components"]["nll_ext"].as_f64().unwrap() > 0.0);
}

#[test]
fn alternative_context_sources_are_deterministic() {
    let f = Fixture::new();
    for source in ["document", "random-retrieved", "random-data"] {
        let mut bytes = Vec::new();
        for run in 0..2 {
            let out = f.root.join(format!("{source}-{run}"));
            ok(&[
                "rerank",
                "--out",
                s(&out),
                "--train",
                s(&f.data("train.conll")),
                "--retrieval-fixture",
                s(&f.data("search_cache.jsonl")),
                "--context-source",
                source,
                "--seed",
                "11",
            ]);
            bytes.push(std::fs::read(out.join("contexts.jsonl")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1], "{source}");
        let text = String::from_utf8(bytes.pop().unwrap()).unwrap();
        let record: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let n = record["contexts"].as_array().unwrap().len();
        // Document contexts fill the length budget; random ones stop at l.
        let cap = if source == "document" { usize::MAX } else { 6 };
        assert!(n >= 1 && n <= cap, "{source}: {n}");
    }
}

#[test]
fn matrix_prints_a_six_by_two_grid() {
    let f = Fixture::new();
    let out = f.root.join("matrix");
    let stdout = ok(&[
        "matrix",
        "--preset",
        "table5",
        "--out",
        s(&out),
        "--train",
        s(&f.data("train.conll")),
        "--dev",
        s(&f.data("dev.conll")),
        "--contexts",
        s(&f.contexts()),
        "--epochs",
        "1",
        "--hidden",
        "8",
        "--hash-dims",
        "4096",
    ])
    .stdout;
    let grid = String::from_utf8(stdout).unwrap();
    let rows: Vec<&str> = grid.lines().skip(1).collect();
    let modes: Vec<&str> = rows.iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    assert_eq!(modes, ["wo_context", "w_context", "joint_no_cl", "cl_both", "cl_l2", "cl_kl"]);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 3));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("matrix.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}

/// Answers every request with one hit echoing the query, counting requests.
fn echo_server() -> (String, std::sync::Arc<std::sync::atomic::AtomicUsize>) {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/search", listener.local_addr().unwrap());
    let count = std::sync::Arc::new(AtomicUsize::new(0));
    let seen = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            reader.read_line(&mut request).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            seen.fetch_add(1, Ordering::SeqCst);
            let body = r#"[{"title":"Rome","snippet":"Rome is a city in Italy"}]"#;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, count)
}

#[test]
fn live_results_are_cached_for_later_runs() {
    use std::sync::atomic::Ordering;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.conll");
    std::fs::write(&data, "Rome B-LOC\nis O\nfar O\n\nAda B-PER\nwrote O\n").unwrap();
    let cache = dir.path().join("cache.jsonl");
    let (url, count) = echo_server();
    let live = dir.path().join("live");
    ok(&[
        "retrieve",
        "--out",
        s(&live),
        "--train",
        s(&data),
        "--endpoint",
        &url,
        "--retrieval-fixture",
        s(&cache),
        "--scorer",
        "bertscore",
    ]);
    assert_eq!(count.load(Ordering::SeqCst), 2);
    assert_eq!(std::fs::read_to_string(&cache).unwrap().lines().count(), 2);

    let cached = dir.path().join("cached");
    ok(&[
        "rerank",
        "--out",
        s(&cached),
        "--train",
        s(&data),
        "--retrieval-fixture",
        s(&cache),
        "--scorer",
        "bertscore",
    ]);
    assert_eq!(count.load(Ordering::SeqCst), 2);
    assert_eq!(
        std::fs::read(live.join("contexts.jsonl")).unwrap(),
        std::fs::read(cached.join("contexts.jsonl")).unwrap()
    );
}
