use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chips_core::datastore::manifest::read_manifest;
use chips_core::datastore::read_shard;

const BIN: &str = env!("CARGO_BIN_EXE_chips");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut args = vec!["synth", "--out", p(&root)];
        args.extend_from_slice(extra);
        ok(&args);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn score(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, pool, eval, params, traj, out) = (
            self.path("config.toml"),
            self.path("pool.chfs"),
            self.path("eval.chfs"),
            self.path("params.chep"),
            self.path("trajectory.chtj"),
            self.path(out),
        );
        let mut args = vec![
            "score", "--config", p(&cfg), "--pool", p(&pool), "--eval", p(&eval), "--params", p(&params),
            "--trajectory", p(&traj), "--out", p(&out),
        ];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn select(&self, scores: &str, out: &str, r: &str) -> Vec<u64> {
        let (s, o) = (self.path(scores), self.path(out));
        ok(&["select", "--scores", p(&s), "--out", p(&o), "--retention", r]);
        read_manifest(&o).unwrap().ids
    }
}

#[test]
fn synth_replays_byte_for_byte() {
    let a = Fixture::new(&["--seed", "3", "--pool-size", "200"]);
    let b = Fixture::new(&["--seed", "3", "--pool-size", "200"]);
    for f in ["pool.chfs", "eval.chfs", "params.chep", "trajectory.chtj", "config.toml"] {
        assert_eq!(std::fs::read(a.path(f)).unwrap(), std::fs::read(b.path(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_synth_pool_is_a_valid_shard() {
    let f = Fixture::new(&["--pool-size", "0"]);
    let (header, records) = read_shard(f.path("pool.chfs")).unwrap();
    assert_eq!(header.count, 0);
    assert!(records.is_empty());
}

#[test]
fn empty_eval_is_a_config_error() {
    let f = Fixture::new(&["--pool-size", "100", "--eval-size", "0"]);
    let out = f.score("s.chsc", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("s.chsc").exists());
}

#[test]
fn retention_counts_and_replay() {
    let f = Fixture::new(&[]);
    assert!(f.score("s.chsc", &["--workers", "2"]).status.success());
    assert_eq!(f.select("s.chsc", "all.txt", "1").len(), 1000);
    let tenth = f.select("s.chsc", "m1.txt", "0.1");
    assert_eq!(tenth.len(), 100);
    assert_eq!(f.select("s.chsc", "m2.txt", "0.1"), tenth);
    assert_eq!(std::fs::read(f.path("m1.txt")).unwrap(), std::fs::read(f.path("m2.txt")).unwrap());
}

#[test]
fn text_scores_select_like_binary() {
    let f = Fixture::new(&["--pool-size", "300"]);
    assert!(f.score("s.chsc", &[]).status.success());
    assert!(f.score("s.csv", &["--text"]).status.success());
    assert_eq!(f.select("s.chsc", "a.txt", "0.2"), f.select("s.csv", "b.txt", "0.2"));
}

#[test]
fn every_method_scores_from_the_command_line() {
    let f = Fixture::new(&["--pool-size", "150", "--eval-size", "40"]);
    for m in ["chips", "dot", "tracin", "trak", "clipscore", "random", "concept-filter", "concept-balance"] {
        let out = f.score(&format!("{m}.chsc"), &["--method", m]);
        assert!(out.status.success(), "{m}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(f.path(&format!("{m}.chcv")).exists(), m == "chips" || m == "trak", "{m}");
    }
}

#[test]
fn corrupt_shard_is_a_format_error() {
    let f = Fixture::new(&["--pool-size", "50"]);
    let mut bytes = std::fs::read(f.path("pool.chfs")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(f.path("pool.chfs"), bytes).unwrap();
    assert_eq!(f.score("s.chsc", &[]).status.code(), Some(3));
}

#[test]
fn glob_patterns_expand() {
    let f = Fixture::new(&["--pool-size", "80"]);
    let pattern = f.root.join("po*.chfs");
    let (cfg, eval, params, out) = (f.path("config.toml"), f.path("eval.chfs"), f.path("params.chep"), f.path("g.chsc"));
    ok(&[
        "score", "--config", p(&cfg), "--pool", p(&pattern), "--eval", p(&eval), "--params", p(&params), "--out",
        p(&out),
    ]);
    let missing = f.root.join("nothing*.chfs");
    let bad = run(&[
        "score", "--config", p(&cfg), "--pool", p(&missing), "--eval", p(&eval), "--params", p(&params), "--out",
        p(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_emits_json_lines() {
    let out = ok(&["verify", "--check", "flops", "--check", "oracles", "--quick"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        assert!(l.starts_with('{') && l.contains("\"passed\":true"), "{l}");
    }
    assert_eq!(run(&["verify", "--check", "nope"]).status.code(), Some(2));
}

#[test]
fn flops_prints_the_totals() {
    let text = String::from_utf8(ok(&["flops"]).stdout).unwrap();
    for want in ["5.258869e16", "5.094585e16", "5.094747e16", "4.294967296e10"] {
        assert!(text.contains(want), "{want}");
    }
}
