use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pcnn::data::{EmbeddingRecord, EmbeddingSet};

fn pcnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Tiny two-class data: 3 views of 16x16, 3 training and 2 test models per class.
fn small_data(dir: &Path) {
    let o = pcnn(
        dir,
        &["gen-data", "--classes", "sphere,box", "--per-class", "3", "--test-per-class", "2", "--views", "3", "--res", "16", "--out", "data"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const SMALL_CFG: &str = "# small network for the tests\npatchconv.k = 4\ntrain.epochs = 2\ntrain.batch_size = 4\n";

fn toy_embeddings(path: &Path) {
    let rec = |id, label, pred, e: [f32; 2]| EmbeddingRecord {
        model_id: id,
        label,
        predicted_class: pred,
        embedding: e.to_vec(),
    };
    EmbeddingSet {
        dim: 2,
        records: vec![
            rec(0, 0, 0, [1.0, 0.0]),
            rec(1, 0, 0, [0.9, 0.1]),
            rec(2, 1, 1, [0.0, 1.0]),
            rec(3, 1, 1, [0.1, 0.9]),
        ],
    }
    .save(path)
    .unwrap();
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let first: Vec<Vec<u8>> = ["train.mvi", "test.mvi", "train.json"]
        .iter()
        .map(|f| fs::read(dir.path().join("data").join(f)).unwrap())
        .collect();
    small_data(dir.path());
    for (f, bytes) in ["train.mvi", "test.mvi", "train.json"].iter().zip(first) {
        assert_eq!(fs::read(dir.path().join("data").join(f)).unwrap(), bytes, "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("data/test.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_models"], 4);
    assert_eq!(manifest["split"], "test");
    assert_eq!(manifest["classes"], serde_json::json!(["sphere", "box"]));
}

#[test]
fn gen_data_rejects_unknown_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcnn(dir.path(), &["gen-data", "--classes", "sphere,blob"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("blob"));
}

#[test]
fn train_embed_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("run.cfg"), SMALL_CFG).unwrap();
    let o = pcnn(d, &["train", "--config", "run.cfg", "--ablation", "full", "--loss", "discrimination", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.pck", "best.pck", "trace.csv", "config.txt"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(d.join("run/trace.csv")).unwrap();
    assert!(trace.starts_with("step,epoch,l_model,l_views,l_dis,neg_wvl_count\n"));
    assert_eq!(trace.lines().count(), 1 + 4);
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(echo.contains("model.num_classes = 2\n") && echo.contains("patchconv.k = 4\n"));

    let o = pcnn(d, &["embed", "--config", "run/config.txt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let set = EmbeddingSet::load(d.join("run/embeddings.emb")).unwrap();
    assert_eq!((set.records.len(), set.dim), (4, 35));

    let o = pcnn(d, &["eval", "--embeddings", "run/embeddings.emb"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("map="));
    assert_eq!(fs::read_to_string(d.join("run/pr.csv")).unwrap().lines().count(), 102);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("run.cfg"), SMALL_CFG).unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&pcnn(d, &["train", "--config", "run.cfg", "--seed", "5", "--out", out])), 0);
    }
    for f in ["trace.csv", "final.pck", "best.pck", "config.txt"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        if f == "config.txt" {
            // only the output paths differ
            let strip = |v: Vec<u8>| String::from_utf8(v).unwrap().lines().filter(|l| !l.starts_with("paths.")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(a), strip(b));
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
}

#[test]
fn loss_and_ablation_flags_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("run.cfg"), "train.max_steps = 1\n").unwrap();
    let o = pcnn(d, &["train", "--config", "run.cfg", "--ablation", "mvcnn-baseline", "--loss", "ml", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    for line in ["loss.gamma = 0", "loss.view_mode = none", "patchconv.enabled = false", "awv.enabled = false"] {
        assert!(echo.lines().any(|l| l == line), "missing {line:?} in\n{echo}");
    }
    let trace = fs::read_to_string(d.join("run/trace.csv")).unwrap();
    let row: Vec<&str> = trace.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), row[2].parse::<f64>().unwrap() * 0.5);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "train.epochz = 3\n").unwrap();
    let o = pcnn(d, &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochz"));
    assert_eq!(code(&pcnn(d, &["train", "--ablation", "everything"])), 2);
    assert_eq!(code(&pcnn(d, &["no-such-command"])), 2);
}

#[test]
fn embed_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcnn(dir.path(), &["embed", "--checkpoint", "missing.pck"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.pck"));
}

#[test]
fn eval_on_clustered_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_embeddings(&d.join("toy.emb"));
    let o = pcnn(d, &["eval", "--embeddings", "toy.emb", "--out", "ev"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().next(), Some("map=1.000000"));
    assert_eq!(fs::read_to_string(d.join("ev/metrics.json")).unwrap().trim(), r#"{"excluded":0,"map":1.0,"queries":4}"#);
    let pr = fs::read_to_string(d.join("ev/pr.csv")).unwrap();
    assert_eq!(pr.lines().count(), 102);
    assert!(pr.lines().skip(1).all(|l| l.ends_with(",1")));
}

#[test]
fn rerank_flag_changes_the_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rec = |id, pred, e: [f32; 2]| EmbeddingRecord {
        model_id: id,
        label: 0,
        predicted_class: pred,
        embedding: e.to_vec(),
    };
    // the nearest neighbour of model 0 is predicted in another class
    EmbeddingSet {
        dim: 2,
        records: vec![rec(0, 0, [1.0, 0.0]), rec(1, 1, [1.0, 0.05]), rec(2, 0, [1.0, 0.5])],
    }
    .save(d.join("e.emb"))
    .unwrap();
    let first_hit = |args: &[&str]| {
        assert_eq!(code(&pcnn(d, args)), 0);
        let csv = fs::read_to_string(d.join("r.csv")).unwrap();
        csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().to_string()
    };
    assert_eq!(first_hit(&["retrieve", "--embeddings", "e.emb", "--out", "r.csv"]), "1");
    assert_eq!(first_hit(&["retrieve", "--embeddings", "e.emb", "--out", "r.csv", "--rerank"]), "2");
}

#[test]
fn gradcheck_scope_and_fault_injection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = pcnn(d, &["gradcheck", "--op", "cosine_similarity", "--seeds", "10"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("cosine_similarity") && !out.contains("matmul"));

    let o = pcnn(d, &["gradcheck", "--op", "softmax", "--op", "mul", "--seeds", "3", "--corrupt", "mul"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("FAILED mul"), "{out}");
    assert!(!out.contains("FAILED softmax"));

    assert_eq!(code(&pcnn(d, &["gradcheck", "--op", "no_such_op"])), 2);
}
