//! `cvarec`: reproducible runs of the cached-feature recommendation pipeline.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use cvarec_core::config::{ConfigError, KeyValues, RunConfig};
use cvarec_core::dataprep::{self, clean, parse_log, parse_sequences, to_records, write_log, write_sequences, ParseOptions, PrepError};
use cvarec_core::featstore::{cache_stats, read_cache, write_cache_to, CacheError};
use cvarec_core::gradsuite::run_suite;
use cvarec_core::numkern::Real;
use cvarec_core::pipeline::{apply_selection, config_echo, echo, select_frames, synthesize, Dataset, PipelineError};
use cvarec_core::resample::{parse_manifest, parse_similarity_tsv, write_manifest, write_similarity_tsv, ResampleError, SimilarityTable};
use cvarec_core::trainloop::{evaluate_model, train, Model, Precision, Target, TrainError};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Pipeline(e) if e.is_numeric() => 3,
            Self::Numeric(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Pipeline(e.into())
            }
        }
    )*};
}
via_pipeline!(ConfigError, CacheError, ResampleError, PrepError, TrainError);

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "cvarec", version, about = "Video-aggregating sequential recommender on cached frame embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration: `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Nothing is written elsewhere.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results never depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse and clean an interaction log into user sequences.
    Prep {
        #[arg(long)]
        log: PathBuf,
    },
    /// Choose frames per video and write a selection manifest.
    Resample {
        /// Feature cache; frame counts come from its timestamps.
        #[arg(long, conflicts_with = "frames")]
        cache: Option<PathBuf>,
        /// `video_id<TAB>frame_count` lines, instead of a cache.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Frame-to-title similarity table (needed by `semantic`).
        #[arg(long)]
        similarity: Option<PathBuf>,
        /// semantic, uniform, random, mid_k or midN (e.g. mid5).
        #[arg(long)]
        policy: Option<String>,
        /// Frames to keep per video.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Generate a synthetic benchmark: cache, log, similarity and labels.
    Synth {
        #[arg(long)]
        n_videos: Option<usize>,
        #[arg(long)]
        n_users: Option<usize>,
    },
    /// Train a model and write checkpoints and the training log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// cva, pool, pool_linear or mlp.
        #[arg(long)]
        aggregator: Option<String>,
        /// f32 or f64.
        #[arg(long)]
        precision: Option<String>,
    },
    /// Score a checkpoint on the held-out targets.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rank against every unseen item instead of sampled negatives.
        #[arg(long)]
        full_ranking: bool,
        #[arg(long)]
        n_negatives: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Score the validation targets instead of the test targets.
        #[arg(long)]
        validation: bool,
    },
    /// Finite-difference check of every differentiable kernel.
    Gradcheck {
        /// Break the backward pass of one kernel, to see it caught.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Dataset statistics of a log or sequence file, or cache statistics.
    Stats {
        #[arg(long, group = "input")]
        log: Option<PathBuf>,
        #[arg(long, group = "input")]
        sequences: Option<PathBuf>,
        #[arg(long, group = "input")]
        cache: Option<PathBuf>,
        /// Raw frame height and width for the cache compression estimate.
        #[arg(long, num_args = 2, default_values_t = [224, 224])]
        raw_hw: Vec<usize>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    sequences: PathBuf,
    /// Frame selection manifest; without it every cached frame is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Files to write, collected in memory so a failed command leaves nothing behind.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn text(&mut self, name: &str, body: impl Into<String>) {
        self.files.push((name.to_string(), body.into().into_bytes()));
    }

    fn bytes(&mut self, name: &str, body: Vec<u8>) {
        self.files.push((name.to_string(), body));
    }

    fn flush(self, dir: &Path) -> Result<()> {
        let io = |source| CliError::Io { path: dir.to_path_buf(), source };
        fs::create_dir_all(dir).map_err(io)?;
        for (name, body) in self.files {
            let path = dir.join(&name);
            fs::write(&path, body).map_err(|source| CliError::Io { path, source })?;
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn build_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_text(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    let mut kv = KeyValues::default();
    if let Some(seed) = common.seed {
        kv.set("run.seed", seed);
    }
    for (key, value) in flags {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    cfg.apply(&kv)?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| CliError::Usage("this command needs --out DIR".into()))
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn load_dataset(data: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    let mut features = read_cache(&data.cache, None)?;
    if let Some(m) = &data.manifest {
        let manifest = parse_manifest(&read_text(m)?)?;
        features = apply_selection(&features, &manifest)?;
    }
    let seqs = parse_sequences(&read_text(&data.sequences)?)?;
    Ok(Dataset::new(features, &seqs, cfg.model.seq.max_seq_len)?)
}

fn cmd_prep(common: &Common, log: &Path) -> Result<Outputs> {
    let cfg = build_config(common, &[])?;
    let parsed = parse_log(log, &ParseOptions::default())?;
    let seqs = clean(&parsed.records)?;
    let mut out = Outputs::default();
    out.text("sequences.tsv", write_sequences(&seqs));
    let mut st = dataprep::stats(&to_records(&seqs)).to_csv();
    st.push_str(&format!("raw_lines,{}\nraw_records,{}\nmalformed_lines,{}\n", parsed.lines, parsed.records.len(), parsed.malformed));
    out.text("stats.csv", st);
    out.text("config.txt", cfg.to_text());
    Ok(out)
}

fn cmd_resample(
    common: &Common,
    cache: &Option<PathBuf>,
    frames: &Option<PathBuf>,
    similarity: &Option<PathBuf>,
    flags: [(&str, Option<String>); 3],
) -> Result<Outputs> {
    let cfg = build_config(common, &flags)?;
    let policy = cfg.sample_policy()?;
    let tables: Vec<SimilarityTable> = match similarity {
        Some(p) => parse_similarity_tsv(&read_text(p)?)?,
        None => Vec::new(),
    };
    let mut out = Outputs::default();
    let manifest = match (cache, frames) {
        (Some(c), _) => {
            let matrices = read_cache(c, None)?;
            let manifest = select_frames(&matrices, &tables, &policy)?;
            let mut buf = Vec::new();
            write_cache_to(&mut buf, &apply_selection(&matrices, &manifest)?)?;
            out.bytes("selected.cvaf", buf);
            manifest
        }
        (None, Some(f)) => {
            let by_id: HashMap<&str, &SimilarityTable> = tables.iter().map(|t| (t.video_id.as_str(), t)).collect();
            let text = read_text(f)?;
            let mut rows = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let bad = || ResampleError::Parse { line: n + 1, msg: "expected video_id<TAB>frame_count".into() };
                let (id, count) = line.split_once('\t').ok_or_else(bad)?;
                let count: usize = count.trim().parse().map_err(|_| bad())?;
                rows.push((id.to_string(), policy.select(count, by_id.get(id).copied(), id)?));
            }
            rows
        }
        (None, None) => return Err(CliError::Usage("resample needs --cache or --frames".into())),
    };
    out.text("manifest.tsv", write_manifest(&manifest));
    out.text("config.txt", cfg.to_text());
    Ok(out)
}

fn cmd_synth(common: &Common, flags: [(&str, Option<String>); 2]) -> Result<Outputs> {
    let cfg = build_config(common, &flags)?;
    let art = synthesize(&cfg)?;
    let mut cache = Vec::new();
    write_cache_to(&mut cache, &art.videos.matrices)?;
    let mut labels = String::from("video_id\ttopic\tsignal_frames\n");
    for ((m, topic), flags) in art.videos.matrices.iter().zip(&art.videos.topics).zip(&art.videos.signal) {
        let bits: String = flags.iter().map(|&b| if b { '1' } else { '0' }).collect();
        labels.push_str(&format!("{}\t{topic}\t{bits}\n", m.video_id));
    }
    let mut out = Outputs::default();
    out.bytes("features.cvaf", cache);
    out.text("interactions.tsv", write_log(&art.log));
    out.text("similarity.tsv", write_similarity_tsv(&art.similarity));
    out.text("labels.tsv", labels);
    out.text("config.txt", cfg.to_text());
    Ok(out)
}

fn run_train<T: Real>(cfg: &RunConfig, data: &Dataset, out: &mut Outputs) -> Result<()> {
    let mut model = Model::<T>::new(&cfg.model, cfg.init_seed())?;
    let outcome = train(&mut model, &cfg.train, &cfg.eval, &data.train_data(), |e| {
        eprintln!("epoch {:>3}  loss {:.6}  {:.1}s", e.epoch, e.loss, e.seconds);
    })?;
    let stats = &outcome.stats;
    out.bytes("model.cvak", outcome.best.to_checkpoint());
    out.bytes("model_final.cvak", model.to_checkpoint());
    out.text("train_log.csv", stats.log_csv());
    out.text("timing.csv", stats.timing_csv());
    let summary: String = echo(cfg, stats).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    out.text("summary.txt", summary);
    Ok(())
}

fn cmd_train(common: &Common, data: &DataArgs, flags: [(&str, Option<String>); 5]) -> Result<Outputs> {
    let cfg = build_config(common, &flags)?;
    let dataset = load_dataset(data, &cfg)?;
    let mut out = Outputs::default();
    out.text("config.txt", cfg.to_text());
    match cfg.train.precision {
        Precision::F32 => run_train::<f32>(&cfg, &dataset, &mut out)?,
        Precision::F64 => run_train::<f64>(&cfg, &dataset, &mut out)?,
    }
    Ok(out)
}

fn run_eval<T: Real>(bytes: &[u8], cfg: &mut RunConfig, data: &Dataset, target: Target) -> Result<cvarec_core::evalkit::EvalReport> {
    let model = Model::<T>::from_checkpoint(bytes)?;
    cfg.model = model.config.clone();
    let mut report = evaluate_model(&model, &data.train_data(), target, &cfg.eval)?;
    report.echo = config_echo(cfg);
    Ok(report)
}

fn cmd_eval(common: &Common, data: &DataArgs, checkpoint: &Path, validation: bool, flags: [(&str, Option<String>); 3]) -> Result<Outputs> {
    let mut cfg = build_config(common, &flags)?;
    let bytes = fs::read(checkpoint).map_err(|source| CliError::Io { path: checkpoint.to_path_buf(), source })?;
    // the checkpoint's model config decides the sequence length used for the split
    let probe = Model::<f64>::from_checkpoint(&bytes)?;
    cfg.model = probe.config.clone();
    let dataset = load_dataset(data, &cfg)?;
    let target = if validation { Target::Validation } else { Target::Test };
    let width = bytes.get(8..12).map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")));
    let report = match width {
        Some(4) => run_eval::<f32>(&bytes, &mut cfg, &dataset, target)?,
        _ => run_eval::<f64>(&bytes, &mut cfg, &dataset, target)?,
    };
    let mut out = Outputs::default();
    out.text("report.csv", report.to_csv());
    out.text("report.txt", report.to_text());
    out.text("config.txt", cfg.to_text());
    Ok(out)
}

fn cmd_gradcheck(common: &Common, fault: &Option<String>) -> Result<(Outputs, bool)> {
    let cfg = build_config(common, &[])?;
    // kernel names are static strings inside the graph
    let fault: Option<&'static str> = fault.clone().map(|f| &*Box::leak(f.into_boxed_str()));
    let report = run_suite(fault, cfg.seed)?;
    let table = report.to_table();
    print!("{table}");
    let mut out = Outputs::default();
    out.text("gradcheck.txt", table);
    Ok((out, report.all_passed()))
}

fn cmd_stats(log: &Option<PathBuf>, sequences: &Option<PathBuf>, cache: &Option<PathBuf>, raw_hw: &[usize]) -> Result<Outputs> {
    let csv = match (log, sequences, cache) {
        (Some(p), _, _) => dataprep::stats(&parse_log(p, &ParseOptions::default())?.records).to_csv(),
        (_, Some(p), _) => dataprep::stats(&to_records(&parse_sequences(&read_text(p)?)?)).to_csv(),
        (_, _, Some(p)) => cache_stats(p, (raw_hw[0], raw_hw[1]))?.to_csv(),
        _ => return Err(CliError::Usage("stats needs --log, --sequences or --cache".into())),
    };
    print!("{csv}");
    let mut out = Outputs::default();
    out.text("stats.csv", csv);
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if c.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let out = match &cli.cmd {
        Cmd::Prep { log } => {
            let dir = out_dir(c)?;
            (cmd_prep(c, log)?, dir)
        }
        Cmd::Resample { cache, frames, similarity, policy, n, clips } => {
            let dir = out_dir(c)?;
            let flags = [("resample.policy", policy.clone()), ("resample.n_select", opt(n)), ("resample.n_clips", opt(clips))];
            (cmd_resample(c, cache, frames, similarity, flags)?, dir)
        }
        Cmd::Synth { n_videos, n_users } => {
            let dir = out_dir(c)?;
            (cmd_synth(c, [("synth.n_videos", opt(n_videos)), ("synth.n_users", opt(n_users))])?, dir)
        }
        Cmd::Train { data, epochs, lr, batch_size, aggregator, precision } => {
            let dir = out_dir(c)?;
            let flags = [
                ("train.epochs", opt(epochs)),
                ("train.lr", opt(lr)),
                ("train.batch_size", opt(batch_size)),
                ("model.aggregator", aggregator.clone()),
                ("train.precision", precision.clone()),
            ];
            (cmd_train(c, data, flags)?, dir)
        }
        Cmd::Eval { data, checkpoint, full_ranking, n_negatives, alpha, validation } => {
            let dir = out_dir(c)?;
            let flags = [
                ("eval.full_ranking", full_ranking.then(|| "true".to_string())),
                ("eval.n_negatives", opt(n_negatives)),
                ("eval.alpha", opt(alpha)),
            ];
            (cmd_eval(c, data, checkpoint, *validation, flags)?, dir)
        }
        Cmd::Gradcheck { inject_fault } => {
            let (outputs, ok) = cmd_gradcheck(c, inject_fault)?;
            if let Some(dir) = &c.out {
                outputs.flush(dir)?;
            }
            return if ok { Ok(()) } else { Err(CliError::Numeric("gradient check failed".into())) };
        }
        Cmd::Stats { log, sequences, cache, raw_hw } => {
            let outputs = cmd_stats(log, sequences, cache, raw_hw)?;
            if let Some(dir) = &c.out {
                outputs.flush(dir)?;
            }
            return Ok(());
        }
    };
    out.0.flush(out.1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
