//! `lipmi`: corpus generation, training, decoding, evaluation and the
//! diagnostic suites behind one binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lipmi_core::ablation::{ablation_suite, limit_per_speaker, table_rows, SuiteOptions};
use lipmi_core::attention::{averaged, averaged_csv, fusion_attention, raw_csv};
use lipmi_core::corpus::files::{export_corpus, ingest_manifest};
use lipmi_core::eval::{evaluate, to_jsonl};
use lipmi_core::mi::{gaussian_benchmark, GaussianBenchConfig};
use lipmi_core::trainer::{load_model, run_training};
use lipmi_core::{selftest, Checkpoint, Corpus, DataPlan, ModelRecognizer, SplitMode, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "lipmi", version, about = "Landmark-guided lip reading with max-min MI regularisation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config; built-in defaults when absent. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (the corpus seed for `generate`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct CorpusArgs {
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    samples_per_speaker: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated held-out speakers (unseen split)
    #[arg(long, value_delimiter = ',')]
    held_out: Option<Vec<usize>>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as landmark files plus a manifest
    Generate {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Train a model; checkpoints and metrics go to --out
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Ablation row label, e.g. "w/o MI"
        #[arg(long)]
        row: Option<String>,
        /// Train on a manifest written by `generate`
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a training checkpoint (its config is reused; --steps may extend it)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Beam-decode a split and write one JSON line per sample
    Decode(DecodeArgs),
    /// Decode a split and report the per-speaker WER
    Eval(DecodeArgs),
    /// Train and evaluate every ablation row
    Ablate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Comma-separated row labels; all rows when absent
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        /// Evaluate only the first n test samples of each speaker
        #[arg(long)]
        test_per_speaker: Option<usize>,
    },
    /// vCLUB on correlated Gaussians with known MI; --config takes a benchmark TOML
    MiBench {
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Number of seeds, counted from --seed or 0
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Write the fusion attention of one sample as CSV
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus index of the sample
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// CTC grid, gradient checks and MI closed forms
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Only the first n samples of each speaker
    #[arg(long)]
    per_speaker: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<lipmi_core::Error> for Failure {
    fn from(e: lipmi_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome<ExitCode> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    if let Some(path) = &g.config {
        if !path.exists() {
            return Err(usage(format!("config file not found: {}", path.display())));
        }
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match &cli.command {
        Command::Generate { corpus } => generate(g, corpus),
        Command::Train {
            corpus,
            schedule,
            row,
            manifest,
            resume,
        } => train(g, corpus, schedule, row.as_deref(), manifest.as_deref(), resume.as_deref()),
        Command::Decode(a) => decode(g, a, false),
        Command::Eval(a) => decode(g, a, true),
        Command::Ablate {
            corpus,
            schedule,
            rows,
            test_per_speaker,
        } => ablate(g, corpus, schedule, rows.clone(), *test_per_speaker),
        Command::MiBench {
            rho,
            steps,
            batch,
            seeds,
        } => mi_bench(g, *rho, *steps, *batch, *seeds),
        Command::DumpAttention {
            checkpoint,
            sample,
            manifest,
        } => dump_attention(g, checkpoint, *sample, manifest.as_deref()),
        Command::Selftest => run_selftest(),
    }
}

fn read_source(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))
}

/// The config file text (if any) and the effective config after overrides.
fn train_config(
    g: &Global,
    corpus: &CorpusArgs,
    schedule: Option<&ScheduleArgs>,
    seed_is_corpus: bool,
) -> Outcome<(Option<String>, TrainConfig)> {
    let source = g.config.as_deref().map(read_source).transpose()?;
    let mut cfg = match &source {
        Some(text) => TrainConfig::from_toml(text)
            .map_err(|e| usage(format!("{}: {e}", g.config.as_ref().expect("path").display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        if seed_is_corpus {
            cfg.corpus.seed = s;
        } else {
            cfg.seed = s;
        }
    }
    if let Some(n) = corpus.speakers {
        cfg.corpus.speakers = n;
    }
    if let Some(n) = corpus.samples_per_speaker {
        cfg.corpus.samples_per_speaker = n;
    }
    if let Some(n) = corpus.frames {
        cfg.corpus.frames = n;
    }
    if let Some(h) = &corpus.held_out {
        cfg.split = SplitMode::Unseen { held_out: h.clone() };
    }
    if let Some(sch) = schedule {
        if let Some(n) = sch.steps {
            cfg.total_steps = n;
        }
        if let Some(lr) = sch.lr {
            cfg.lr = lr;
        }
        if let Some(b) = sch.batch_size {
            cfg.batch_size = b;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((source, cfg))
}

fn require_out(g: &Global, command: &str) -> Outcome<PathBuf> {
    g.out.clone().ok_or_else(|| usage(format!("{command} needs --out")))
}

/// Creates `dir`, copies the config file verbatim to `config.source.toml`
/// and writes the effective config to `config.toml`.
fn echo_config(dir: &Path, source: Option<&str>, effective: &str) -> Outcome<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(text) = source {
        write(&dir.join("config.source.toml"), text)?;
    }
    write(&dir.join("config.toml"), effective)
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_corpus(cfg: &TrainConfig, manifest: Option<&Path>) -> Outcome<Corpus> {
    Ok(match manifest {
        Some(m) => ingest_manifest(&cfg.corpus, m)?,
        None => Corpus::generate(&cfg.corpus)?,
    })
}

fn generate(g: &Global, corpus_args: &CorpusArgs) -> Outcome<ExitCode> {
    let out = require_out(g, "generate")?;
    let (source, cfg) = train_config(g, corpus_args, None, true)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let plan = DataPlan::new(&corpus, &cfg.split, cfg.dev_per_speaker, cfg.seed).map_err(|e| usage(e.to_string()))?;
    echo_config(&out, source.as_deref(), &cfg.to_toml())?;
    let split_of = |i: usize| {
        let name = if plan.test.contains(&i) {
            "test"
        } else if plan.dev.contains(&i) {
            "dev"
        } else {
            "train"
        };
        name.to_string()
    };
    let records = export_corpus(&corpus, &out, &split_of)?;
    let rows: Vec<serde_json::Value> = corpus
        .entries
        .iter()
        .zip(&records)
        .map(|(e, r)| {
            serde_json::json!({
                "id": e.id,
                "speaker": e.speaker,
                "split": r.split,
                "transcript": e.transcript.text,
            })
        })
        .collect();
    write(&out.join("corpus.jsonl"), &to_jsonl(&rows))?;
    println!(
        "{} samples from {} speakers (train {}, dev {}, test {}) -> {}",
        corpus.len(),
        corpus.speaker_count(),
        plan.train.len(),
        plan.dev.len(),
        plan.test.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn apply_row(cfg: &mut TrainConfig, label: &str) -> Outcome<()> {
    let rows = table_rows();
    let row = rows.iter().find(|r| r.label == label).ok_or_else(|| {
        let known: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        usage(format!("unknown ablation row '{label}' (known: {})", known.join(", ")))
    })?;
    cfg.ablation = row.flags;
    Ok(())
}

fn train(
    g: &Global,
    corpus_args: &CorpusArgs,
    schedule: &ScheduleArgs,
    row: Option<&str>,
    manifest: Option<&Path>,
    resume: Option<&Path>,
) -> Outcome<ExitCode> {
    let out = require_out(g, "train")?;
    let (source, mut trainer, corpus) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let mut tr = Trainer::from_checkpoint(&ck)?;
            if let Some(n) = schedule.steps {
                tr.config.total_steps = n;
            }
            let corpus = load_corpus(&tr.config, manifest)?;
            (None, tr, corpus)
        }
        None => {
            let (source, mut cfg) = train_config(g, corpus_args, Some(schedule), false)?;
            if let Some(label) = row {
                apply_row(&mut cfg, label)?;
            }
            let corpus = load_corpus(&cfg, manifest)?;
            let tr = Trainer::new(cfg, &corpus)?;
            (source, tr, corpus)
        }
    };
    echo_config(&out, source.as_deref(), &trainer.config.to_toml())?;
    let report = run_training(&mut trainer, &corpus, Some(&out))?;
    for e in &report.epochs {
        println!(
            "epoch {:>3} step {:>5} {:?} dev spk acc {:.3} dev WER {:.2}",
            e.epoch, e.step, e.stage, e.dev_speaker_acc, e.dev_wer
        );
    }
    let json = serde_json::to_string_pretty(&report).context("serialising report")?;
    write(&out.join("report.json"), &json)?;
    println!(
        "trained {} steps (stage I {:?}), best dev WER {:?} -> {}",
        report.total_steps,
        report.stage1_steps,
        report.best_dev_wer,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn decode(g: &Global, a: &DecodeArgs, summarise: bool) -> Outcome<ExitCode> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let (model, store, cfg, plan) = load_model(&ck)?;
    let corpus = load_corpus(&cfg, a.manifest.as_deref())?;
    let indices = match a.split {
        SplitName::Train => &plan.train,
        SplitName::Dev => &plan.dev,
        SplitName::Test => &plan.test,
    };
    let indices = limit_per_speaker(&corpus, indices, a.per_speaker);
    let rec = ModelRecognizer {
        model: &model,
        store: &store,
        beam_width: a.beam.unwrap_or(cfg.beam_width),
        max_len: cfg.max_decode_len,
    };
    if rec.beam_width == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    let report = evaluate(&rec, &corpus, &indices)?;
    let lines = to_jsonl(&report.records);
    if let Some(out) = &g.out {
        echo_config(out, None, &cfg.to_toml())?;
        write(&out.join("decodes.jsonl"), &lines)?;
        if summarise {
            let json = serde_json::to_string_pretty(&report).context("serialising report")?;
            write(&out.join("eval.json"), &json)?;
        }
    } else if !summarise {
        print!("{lines}");
    }
    if summarise {
        println!("speaker | errors | words | WER (%)");
        for s in &report.per_speaker {
            println!("{:>7} | {:>6} | {:>5} | {:.2}", s.speaker, s.errors, s.words, s.wer);
        }
        println!("{:>7} | {:>6} | {:>5} | {:.2}", "all", report.errors, report.words, report.wer);
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(
    g: &Global,
    corpus_args: &CorpusArgs,
    schedule: &ScheduleArgs,
    rows: Option<Vec<String>>,
    test_per_speaker: Option<usize>,
) -> Outcome<ExitCode> {
    let (source, cfg) = train_config(g, corpus_args, Some(schedule), false)?;
    if let Some(rs) = &rows {
        let known: Vec<String> = table_rows().into_iter().map(|r| r.label).collect();
        if let Some(bad) = rs.iter().find(|r| !known.contains(r)) {
            return Err(usage(format!("unknown ablation row '{bad}' (known: {})", known.join(", "))));
        }
    }
    if let Some(out) = &g.out {
        echo_config(out, source.as_deref(), &cfg.to_toml())?;
    }
    let corpus = Corpus::generate(&cfg.corpus)?;
    let opts = SuiteOptions {
        test_per_speaker,
        only: rows,
    };
    let report = ablation_suite(&cfg, &corpus, &opts, g.out.as_deref())?;
    print!("{}", report.table());
    for r in &report.rows {
        let per: Vec<String> = r.per_speaker.iter().map(|s| format!("{}:{:.2}", s.speaker, s.wer)).collect();
        println!("{}: per speaker {}", r.label, per.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

fn mi_bench(
    g: &Global,
    rho: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    seeds: Option<u64>,
) -> Outcome<ExitCode> {
    let source = g.config.as_deref().map(read_source).transpose()?;
    let mut cfg = match &source {
        Some(text) => toml::from_str::<GaussianBenchConfig>(text)
            .map_err(|e| usage(format!("{}: {e}", g.config.as_ref().expect("path").display())))?,
        None => GaussianBenchConfig::default(),
    };
    if let Some(r) = rho {
        cfg.rho = r;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    if let Some(b) = batch {
        cfg.batch = b;
    }
    match (g.seed, seeds) {
        (first, Some(n)) => {
            let s0 = first.unwrap_or(0);
            cfg.seeds = (s0..s0 + n).collect();
        }
        (Some(s), None) => cfg.seeds = vec![s],
        (None, None) => {}
    }
    if cfg.rho.is_nan() || cfg.rho.abs() >= 1.0 {
        return Err(usage(format!("--rho {} must lie in (-1, 1)", cfg.rho)));
    }
    let results = gaussian_benchmark(&cfg)?;
    if let Some(out) = &g.out {
        echo_config(out, source.as_deref(), &toml::to_string(&cfg).context("serialising config")?)?;
        write(&out.join("mi_bench.jsonl"), &to_jsonl(&results))?;
    }
    println!("seed | true MI | vCLUB | vCLUB exact q | final log q");
    for r in &results {
        println!(
            "{:>4} | {:.4} | {:.4} | {:.4} | {:.4}",
            r.seed, r.true_mi, r.vclub, r.vclub_exact_q, r.final_log_likelihood
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_attention(g: &Global, checkpoint: &Path, sample: usize, manifest: Option<&Path>) -> Outcome<ExitCode> {
    let out = require_out(g, "dump-attention")?;
    let ck = Checkpoint::read(checkpoint)?;
    let (model, store, cfg, _) = load_model(&ck)?;
    let corpus = load_corpus(&cfg, manifest)?;
    if sample >= corpus.len() {
        return Err(usage(format!("--sample {sample} out of range (corpus has {})", corpus.len())));
    }
    let layers = fusion_attention(&model, &store, &corpus.sample(sample)?)?;
    let avg = averaged(&layers)?;
    echo_config(&out, None, &cfg.to_toml())?;
    write(&out.join("attention_raw.csv"), &raw_csv(&layers))?;
    write(&out.join("attention_avg.csv"), &averaged_csv(&avg))?;
    println!(
        "{}: {} layers of {:?} -> {}",
        corpus.entries[sample].id,
        layers.len(),
        layers[0].shape(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_selftest() -> Outcome<ExitCode> {
    let checks = selftest::run_all()?;
    let mut failed = 0;
    for c in &checks {
        println!("{}", c.line());
        failed += usize::from(!c.passed);
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
