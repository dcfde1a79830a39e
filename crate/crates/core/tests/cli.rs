mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::small_config;
use fewshot_core::cli::{EXIT_CHECK, EXIT_CONFIG, EXIT_IO, FEATURES_HEADER};
use fewshot_core::gradcheck::checks;
use fewshot_core::{Checkpoint, Dataset, MetricsReport};

fn fewshot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.cfg"), small_config(0).to_text()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", "small.cfg"];
        full.extend_from_slice(args);
        fewshot(self.dir.path(), &full)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }

    fn trained(&self) -> &Self {
        ok(self.run(&["gen-data", "--out", "data.bin"]));
        ok(self.run(&["train", "--stage", "1", "--data", "data.bin", "--out", "s1.ckpt", "--log", "s1.jsonl"]));
        ok(self.run(&["train", "--stage", "2", "--data", "data.bin", "--ckpt", "s1.ckpt", "--out", "s2.ckpt"]));
        self
    }
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let ws = Workspace::new();
    let out = ok(ws.run(&["gen-data", "--out", "a.bin"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("base 12"));
    ok(ws.run(&["gen-data", "--out", "b.bin"]));
    assert_eq!(ws.read("a.bin"), ws.read("b.bin"));
    let d = Dataset::load(&ws.path("a.bin")).unwrap();
    assert_eq!(d.split.base.len(), 12);
    ok(ws.run(&["gen-data", "--out", "c.bin", "--seed", "1"]));
    assert_ne!(ws.read("a.bin"), ws.read("c.bin"));
}

#[test]
fn invalid_config_key_is_named() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.cfg"), "n_base = 10\nlearning_rat = 0.1\n").unwrap();
    let out = fewshot(ws.dir.path(), &["--config", "bad.cfg", "gen-data", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
    assert!(!ws.path("x.bin").exists());

    let out = ws.run(&["gen-data", "--out", "x.bin", "--n-bsae", "3"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("n-bsae"), "{}", stderr(&out));
}

#[test]
fn stage_two_requires_a_checkpoint() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--stage", "2", "--out", "s2.ckpt"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("--ckpt"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_fails() {
    let ws = Workspace::new();
    let out = ws.run(&["eval", "--ckpt", "nope.ckpt"]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
    let out = ws.run(&["train", "--stage", "2", "--ckpt", "nope.ckpt", "--out", "s2.ckpt"]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
}

#[test]
fn train_then_eval_one_and_five_shot() {
    let ws = Workspace::new();
    ws.trained();
    assert_eq!(Checkpoint::load(&ws.path("s1.ckpt")).unwrap().stage, 1);
    let s2 = Checkpoint::load(&ws.path("s2.ckpt")).unwrap();
    assert_eq!(s2.stage, 2);
    let log = String::from_utf8(ws.read("s1.jsonl")).unwrap();
    assert_eq!(log.lines().count(), small_config(0).train.s1_epochs);

    for shots in ["1", "5"] {
        let a = format!("r{shots}a.json");
        let b = format!("r{shots}b.json");
        ok(ws.run(&["eval", "--data", "data.bin", "--ckpt", "s2.ckpt", "--shots", shots, "--out", &a]));
        ok(ws.run(&["eval", "--data", "data.bin", "--ckpt", "s2.ckpt", "--shots", shots, "--out", &b]));
        assert_eq!(ws.read(&a), ws.read(&b));
        let r = MetricsReport::from_json(&String::from_utf8(ws.read(&a)).unwrap()).unwrap();
        assert_eq!(r.shots.to_string(), shots);
        assert_eq!(r.generator, "avg_plus_attention");
        assert!(r.novel_acc.is_some() && r.base_acc.is_some() && r.both_acc.is_some());
    }
    let stdout = ok(ws.run(&["eval", "--data", "data.bin", "--ckpt", "s2.ckpt", "--shots", "1"])).stdout;
    assert_eq!(stdout, ws.read("r1a.json"));
}

#[test]
fn ablation_flags_select_head_relu_and_generator() {
    let ws = Workspace::new();
    ok(ws.run(&["gen-data", "--out", "data.bin"]));
    ok(ws.run(&[
        "train", "--stage", "1", "--data", "data.bin", "--out", "dot.ckpt", "--head", "dot", "--final-relu", "true",
    ]));
    ok(ws.run(&[
        "train", "--stage", "2", "--data", "data.bin", "--ckpt", "dot.ckpt", "--out", "dot2.ckpt", "--generator",
        "avg_only",
    ]));
    let c = Checkpoint::load(&ws.path("dot2.ckpt")).unwrap();
    assert_eq!(c.model.head().to_string(), "dot");
    assert!(c.model.extractor.config.use_final_relu);
    assert_eq!(c.model.generator.mode.to_string(), "avg_only");
}

#[test]
fn grad_check_lists_every_check_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(fewshot(dir.path(), &["grad-check"]));
    let text = String::from_utf8(out.stdout).unwrap();
    for (name, _) in checks() {
        assert!(
            text.lines().any(|l| l.starts_with("ok") && l.split_whitespace().nth(1) == Some(name)),
            "{name} missing:\n{text}"
        );
    }
    let out = fewshot(dir.path(), &["grad-check", "--corrupt-adjoint", "softmax", "--only", "softmax"]);
    assert_eq!(out.status.code(), Some(EXIT_CHECK));
    let out = fewshot(dir.path(), &["grad-check", "--corrupt-adjoint", "nonsense"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

fn parse_dump(text: &str) -> (String, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(FEATURES_HEADER));
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split_whitespace().skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn dumped_features_are_normalized_for_cosine_only() {
    let ws = Workspace::new();
    ws.trained();
    let d = Dataset::load(&ws.path("data.bin")).unwrap();
    let expected: usize = d.split.test_novel.iter().map(|&c| d.count(c)).sum();

    ok(ws.run(&["dump-features", "--data", "data.bin", "--ckpt", "s2.ckpt", "--split", "test", "--out", "f.txt"]));
    let (header, rows) = parse_dump(&String::from_utf8(ws.read("f.txt")).unwrap());
    assert!(header.contains("normalized=true"), "{header}");
    assert_eq!(rows.len(), expected);
    for r in &rows {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }

    ok(ws.run(&["train", "--stage", "1", "--data", "data.bin", "--out", "dot.ckpt", "--head", "dot"]));
    ok(ws.run(&["dump-features", "--data", "data.bin", "--ckpt", "dot.ckpt", "--split", "test", "--out", "g.txt"]));
    let (header, rows) = parse_dump(&String::from_utf8(ws.read("g.txt")).unwrap());
    assert!(header.contains("normalized=false"));
    assert_eq!(rows.len(), expected);
    assert!(rows.iter().any(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() > 1e-3));
}
