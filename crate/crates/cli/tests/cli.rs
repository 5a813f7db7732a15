use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvarec_core::aggregator::{param_count, AggregatorKind};
use cvarec_core::trainloop::ModelConfig;

fn cvarec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvarec")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Small synthetic benchmark plus cleaned sequences, shared by several tests.
fn small_bench(dir: &Path) -> (PathBuf, PathBuf) {
    let o = cvarec(dir, &["synth", "--out", "s", "--n-videos", "200", "--n-users", "40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cvarec(dir, &["prep", "--log", "s/interactions.tsv", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (dir.join("s/features.cvaf"), dir.join("p/sequences.tsv"))
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cvarec(d.path(), &["--help"])), 0);
    assert_eq!(code(&cvarec(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&cvarec(d.path(), &["prep"])), 1);
    assert_eq!(code(&cvarec(d.path(), &["prep", "--log", "x.tsv"])), 1, "missing --out");
    assert_eq!(code(&cvarec(d.path(), &["gradcheck", "--threads", "0"])), 1);
}

const FIXTURE: &str = "user_id\tvideo_id\texposed_time
A\tv1\t10
A\tv2\t20
A\tv3\t30
A\tv4\t40
A\tv5\t50
A\tv9\t60
B\tv5\t5
B\tv4\t15
B\tv3\t15
B\tv2\t25
B\tv1\t35
C\tv8\t1
";

#[test]
fn prep_reproduces_the_cleaning_fixture() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("log.tsv"), FIXTURE).unwrap();
    let o = cvarec(d.path(), &["prep", "--log", "log.tsv", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // v9 and v8 are seen once, C then has nothing; ties at t=15 break by id
    assert_eq!(read(d.path().join("a/sequences.tsv")), b"A\tv1,v2,v3,v4,v5\nB\tv5,v3,v4,v2,v1\n");
    let stats = String::from_utf8(read(d.path().join("a/stats.csv"))).unwrap();
    assert!(stats.contains("users,2\n") && stats.contains("interactions,10\n"), "{stats}");

    let o = cvarec(d.path(), &["prep", "--log", "log.tsv", "--out", "b"]);
    assert_eq!(code(&o), 0);
    for f in ["sequences.tsv", "stats.csv", "config.txt"] {
        assert_eq!(read(d.path().join("a").join(f)), read(d.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn missing_input_leaves_no_output() {
    let d = tempfile::tempdir().unwrap();
    let o = cvarec(d.path(), &["prep", "--log", "nope.tsv", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("o").exists());
}

#[test]
fn resample_policies() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("frames.tsv"), "a\t100\nb\t7\n").unwrap();
    let o = cvarec(d.path(), &["resample", "--frames", "frames.tsv", "--policy", "mid5", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(d.path().join("m/manifest.tsv")), b"a\t47\t48\t49\t50\t51\nb\t1\t2\t3\t4\t5\n");

    let run = |out: &str, seed: &str| {
        let o = cvarec(d.path(), &["resample", "--frames", "frames.tsv", "--policy", "random", "--n", "5", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        read(d.path().join(out).join("manifest.tsv"))
    };
    assert_eq!(run("r1", "42"), run("r2", "42"));
    assert_ne!(run("r1", "42"), run("r3", "7"));

    // semantic selection needs scores
    let o = cvarec(d.path(), &["resample", "--frames", "frames.tsv", "--out", "s"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn semantic_resample_keeps_top_scored_frames() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("frames.tsv"), "a\t6\n").unwrap();
    fs::write(d.path().join("sim.tsv"), "a\t0:0.1\t1:0.9\t2:0.3\t3:0.8\t4:0.2\t5:0.85\n").unwrap();
    let o = cvarec(d.path(), &["resample", "--frames", "frames.tsv", "--similarity", "sim.tsv", "--n", "3", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // scores sorted descending: 1, 5, 3; reported in time order
    assert_eq!(read(d.path().join("o/manifest.tsv")), b"a\t1\t3\t5\n");
}

#[test]
fn synth_is_reproducible_and_labelled() {
    let d = tempfile::tempdir().unwrap();
    for out in ["x", "y"] {
        let o = cvarec(d.path(), &["synth", "--out", out, "--n-videos", "50", "--n-users", "20"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["features.cvaf", "interactions.tsv", "similarity.tsv", "labels.tsv", "config.txt"] {
        assert_eq!(read(d.path().join("x").join(f)), read(d.path().join("y").join(f)), "{f}");
    }
    let labels = String::from_utf8(read(d.path().join("x/labels.tsv"))).unwrap();
    assert_eq!(labels.lines().count(), 51);
    let stats = cvarec(d.path(), &["stats", "--cache", "x/features.cvaf"]);
    assert_eq!(code(&stats), 0);
    assert!(String::from_utf8_lossy(&stats.stdout).starts_with("videos,dim,bytes,bytes_per_video,ratio\n50,64,"));
}

#[test]
fn train_then_eval() {
    let d = tempfile::tempdir().unwrap();
    let (cache, seqs) = small_bench(d.path());
    let (cache, seqs) = (cache.to_str().unwrap(), seqs.to_str().unwrap());
    let o = cvarec(d.path(), &["train", "--cache", cache, "--sequences", seqs, "--set", "eval.n_negatives=50", "--epochs", "2", "--batch-size", "16", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8(read(d.path().join("t/summary.txt"))).unwrap();
    let expected = param_count(AggregatorKind::Cva, &ModelConfig::default().cva);
    assert!(summary.contains(&format!("params.aggregator = {expected}\n")), "{summary}");
    let log = String::from_utf8(read(d.path().join("t/train_log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(read(d.path().join("t/timing.csv")).starts_with(b"epoch,seconds\n"));

    let o = cvarec(d.path(), &["eval", "--cache", cache, "--sequences", seqs, "--checkpoint", "t/model.cvak", "--n-negatives", "100", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(read(d.path().join("e/report.csv"))).unwrap();
    assert!(report.starts_with("metric,name,value\ncases,all,"), "{report}");
    assert!(report.contains("config,eval.n_negatives,100\n") && report.contains("config,model.aggregator,cva\n"));

    let o = cvarec(d.path(), &["eval", "--cache", cache, "--sequences", seqs, "--checkpoint", "t/model.cvak", "--full-ranking", "--out", "f"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = cvarec(d.path(), &["eval", "--cache", cache, "--sequences", seqs, "--checkpoint", "t/summary.txt", "--out", "g"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_learning_rate_gives_a_flat_loss() {
    let d = tempfile::tempdir().unwrap();
    let (cache, seqs) = small_bench(d.path());
    let (cache, seqs) = (cache.to_str().unwrap(), seqs.to_str().unwrap());
    // one batch holds every user, so each epoch sees the same batch
    let o = cvarec(d.path(), &["train", "--cache", cache, "--sequences", seqs, "--set", "eval.n_negatives=50", "--epochs", "3", "--lr", "0", "--batch-size", "64", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8(read(d.path().join("t/train_log.csv"))).unwrap();
    let losses: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| *l == losses[0]), "{log}");
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let d = tempfile::tempdir().unwrap();
    let (cache, seqs) = small_bench(d.path());
    let (cache, seqs) = (cache.to_str().unwrap(), seqs.to_str().unwrap());
    for (out, threads) in [("a", "1"), ("b", "4")] {
        let o = cvarec(d.path(), &["train", "--cache", cache, "--sequences", seqs, "--set", "eval.n_negatives=50", "--epochs", "1", "--threads", threads, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.cvak", "train_log.csv", "config.txt"] {
        assert_eq!(read(d.path().join("a").join(f)), read(d.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn gradcheck_exit_status() {
    let d = tempfile::tempdir().unwrap();
    let ok = cvarec(d.path(), &["gradcheck", "--out", "g"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(read(d.path().join("g/gradcheck.txt")).starts_with(b"check"));
    let bad = cvarec(d.path(), &["gradcheck", "--inject-fault", "softmax_rows"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn config_file_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.cfg"), "# comment\nsynth.n_videos = 30\nsynth.n_users = 10\nsynth.n_users = 12\n").unwrap();
    let o = cvarec(d.path(), &["synth", "--config", "run.cfg", "--set", "synth.dim=16", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = String::from_utf8(read(d.path().join("o/config.txt"))).unwrap();
    assert!(cfg.contains("synth.n_users = 12\n") && cfg.contains("synth.dim = 16\n") && cfg.contains("synth.n_videos = 30\n"), "{cfg}");

    fs::write(d.path().join("bad.cfg"), "synth.bogus = 1\n").unwrap();
    assert_eq!(code(&cvarec(d.path(), &["synth", "--config", "bad.cfg", "--out", "b"])), 2);
}
