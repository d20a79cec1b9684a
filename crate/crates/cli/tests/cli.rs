//! End-to-end runs of the `pgprec` binary, including every exit status.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "lr=0.01\nd=8\nn_layers=1\nmax_epochs=3\npatience=2\nbatch_size=256\nn_users=60\nn_source_items=80\nn_target_items=80\ndensity=0.08\n";

fn pgprec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgprec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.txt"), CONFIG).unwrap();
        Run { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn ok(&self, args: &[&str]) -> String {
        let mut full = vec!["--config", "cfg.txt"];
        full.extend_from_slice(args);
        let o = pgprec(self.dir.path(), &full);
        assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    }

    fn status(&self, args: &[&str]) -> (i32, String) {
        let mut full = vec!["--config", "cfg.txt"];
        full.extend_from_slice(args);
        let o = pgprec(self.dir.path(), &full);
        (code(&o), stderr(&o))
    }

    fn pipeline(&self) {
        self.ok(&["synth", "--out", "data"]);
        self.ok(&[
            "pretrain",
            "--source",
            "data/source.tsv",
            "--target",
            "data/target.tsv",
            "--out",
            "pre",
        ]);
        for (mode, out) in [("prompt", "pt"), ("finetune", "ft")] {
            self.ok(&[
                "tune",
                "--source",
                "data/source.tsv",
                "--target",
                "data/target.tsv",
                "--relations",
                "data/relations.tsv",
                "--checkpoint",
                "pre/checkpoint.pgpr",
                "--mode",
                mode,
                "--out",
                out,
            ]);
        }
    }

    fn read(&self, p: &str) -> Vec<u8> {
        std::fs::read(self.path(p)).unwrap()
    }
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let run = Run::new();
    run.pipeline();
    for f in ["data/source.tsv", "data/target.tsv", "data/relations.tsv"] {
        assert!(run.path(f).is_file(), "{f}");
    }
    assert_eq!(&run.read("pre/checkpoint.pgpr")[..4], b"PGPR");
    for dir in ["data", "pre", "pt", "ft"] {
        let m = String::from_utf8(run.read(&format!("{dir}/manifest.txt"))).unwrap();
        assert!(m.starts_with("command="), "{dir}");
        assert!(m.contains("seed.base=0"), "{dir}");
    }
    let manifest = String::from_utf8(run.read("pre/manifest.txt")).unwrap();
    assert!(manifest.contains("input=data/source.tsv\tsha256="));

    let pt_params = String::from_utf8(run.read("pt/params.csv")).unwrap();
    for group in ["hard_embeddings", "soft_embeddings", "p_v"] {
        assert!(pt_params.contains(group), "{group}");
    }
    let ft_params = String::from_utf8(run.read("ft/params.csv")).unwrap();
    assert!(ft_params.contains("ratio,1\n"), "{ft_params}");

    let summary = run.ok(&[
        "eval",
        "--model",
        "pt/model.pgpr",
        "--model",
        "ft/model.pgpr",
        "--split",
        "pt/target_split.tsv",
        "--timing",
        "pt/epochs.csv",
        "ft/epochs.csv",
        "--out",
        "ev",
    ]);
    assert!(summary.contains("recall@10="), "{summary}");
    assert!(summary.contains("cold\t") && summary.contains("regular\t"));
    let stats = String::from_utf8(run.read("ev/stats.csv")).unwrap();
    assert!(stats.starts_with("comparison,test,stat,p_raw,p_adj,decision\n"));
    assert!(stats.contains(",paired_t,") && stats.contains(",tost,"));
    let metrics = String::from_utf8(run.read("ev/metrics_0.csv")).unwrap();
    assert!(metrics.starts_with("user,group,recall10,ndcg10\n"));

    let out = run.ok(&[
        "stats",
        "--first",
        "ev/metrics_0.csv",
        "--second",
        "ev/metrics_1.csv",
        "--out",
        "st",
    ]);
    assert_eq!(out.lines().count(), 5);
    let out = run.ok(&["params", "--model", "pt/model.pgpr", "--out", "pa"]);
    assert!(out.starts_with("group,count\n"));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (Run::new(), Run::new());
    a.pipeline();
    b.pipeline();
    for f in [
        "data/source.tsv",
        "data/target.tsv",
        "data/relations.tsv",
        "pre/checkpoint.pgpr",
        "pre/source_split.tsv",
        "pt/model.pgpr",
        "ft/model.pgpr",
        "pt/target_split.tsv",
    ] {
        assert_eq!(a.read(f), b.read(f), "{f}");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let run = Run::new();
    let (c, msg) = run.status(&[
        "pretrain",
        "--source",
        "missing.tsv",
        "--target",
        "missing.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 2);
    assert!(msg.contains("missing.tsv"), "{msg}");
    assert_eq!(
        run.status(&["synth", "--set", "density=0", "--out", "x"]).0,
        2
    );
    assert_eq!(
        run.status(&["synth", "--set", "colour=red", "--out", "x"])
            .0,
        2
    );
    assert_eq!(run.status(&["synth", "--set", "lr=0.5", "--out", "x"]).0, 0);
    assert_eq!(
        run.status(&["params", "--set", "lr=0.5", "--model", "m", "--out", "x"])
            .0,
        2
    );
    assert_eq!(run.status(&["nonsense"]).0, 2);
    run.pipeline();
    let (c, _) = run.status(&[
        "tune",
        "--source",
        "data/source.tsv",
        "--target",
        "data/target.tsv",
        "--relations",
        "data/relations.tsv",
        "--checkpoint",
        "pre/checkpoint.pgpr",
        "--mode",
        "bogus",
    ]);
    assert_eq!(c, 2);
}

#[test]
fn checkpoint_mismatch_exits_3() {
    let run = Run::new();
    run.pipeline();
    let (c, msg) = run.status(&[
        "tune",
        "--set",
        "d=16",
        "--source",
        "data/source.tsv",
        "--target",
        "data/target.tsv",
        "--relations",
        "data/relations.tsv",
        "--checkpoint",
        "pre/checkpoint.pgpr",
        "--mode",
        "prompt",
        "--out",
        "x",
    ]);
    assert_eq!(c, 3, "{msg}");
    std::fs::write(run.path("bad.pgpr"), b"NOPE").unwrap();
    assert_eq!(
        run.status(&["params", "--model", "bad.pgpr", "--out", "x"])
            .0,
        3
    );
    // A source-domain checkpoint does not fit the target split.
    let (c, _) = run.status(&[
        "eval",
        "--model",
        "pre/checkpoint.pgpr",
        "--split",
        "pt/target_split.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 3);
}

#[test]
fn data_errors_exit_4() {
    let run = Run::new();
    run.pipeline();
    let split = String::from_utf8(run.read("pt/target_split.tsv")).unwrap();
    let no_test: String = split
        .lines()
        .filter(|l| !l.ends_with("\ttest"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(run.path("no_test.tsv"), no_test).unwrap();
    let (c, msg) = run.status(&[
        "eval",
        "--model",
        "pt/model.pgpr",
        "--split",
        "no_test.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 4, "{msg}");
    std::fs::write(run.path("broken.tsv"), "u1\ti1\n").unwrap();
    let (c, msg) = run.status(&[
        "pretrain",
        "--source",
        "broken.tsv",
        "--target",
        "data/target.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 4);
    assert!(msg.contains("line 1"), "{msg}");
}

#[test]
fn numeric_failure_exits_5() {
    let run = Run::new();
    run.pipeline();
    let original = run.read("pt/model.pgpr");
    // Embedding tables follow the 24-byte header; scale them so scores overflow.
    let field = |at: usize| u32::from_le_bytes(original[at..at + 4].try_into().unwrap()) as usize;
    let (d, n_users, n_items) = (field(8), field(16), field(20));
    let mut huge = original.clone();
    for k in 0..(n_users + n_items) * d {
        huge[24 + 8 * k..32 + 8 * k].copy_from_slice(&1e200f64.to_le_bytes());
    }
    std::fs::write(run.path("huge.pgpr"), huge).unwrap();
    let (c, msg) = run.status(&[
        "eval",
        "--model",
        "huge.pgpr",
        "--split",
        "pt/target_split.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 5, "{msg}");
    // Non-finite values stored in a file are rejected as a corrupt checkpoint.
    let mut nan = original;
    nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(run.path("nan.pgpr"), nan).unwrap();
    let (c, _) = run.status(&[
        "eval",
        "--model",
        "nan.pgpr",
        "--split",
        "pt/target_split.tsv",
        "--out",
        "x",
    ]);
    assert_eq!(c, 3);
}
