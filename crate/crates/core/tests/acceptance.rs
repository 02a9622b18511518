//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a gated criterion fails.
//!
//! `LIPMI_ACCEPTANCE_SCALE=full` runs criteria 6 and 7 on the full desk
//! corpus from `configs/desk.toml` (about 2 h each); the default is a reduced
//! corpus and schedule that exercises the same harness in minutes.

use std::fs;
use std::path::Path;
use std::time::Instant;

use lipmi_core::ablation::{ablation_suite, table_rows, AblationReport, SuiteOptions};
use lipmi_core::attention::{averaged, fusion_attention};
use lipmi_core::corpus::{Corpus, CorpusConfig};
use lipmi_core::decoder::ctc::ctc_brute_force;
use lipmi_core::eval::{aggregate, edit_alignment, evaluate, DecodeRecord};
use lipmi_core::frontend::{motion_deltas, FrontendInput};
use lipmi_core::mi::{gaussian_benchmark, GaussianBenchConfig};
use lipmi_core::selftest::{self, CTC_TOLERANCE, GRAD_TOLERANCE};
use lipmi_core::trainer::{Ablation, DataPlan, TrainConfig, Trainer};
use lipmi_core::vocab::SOS;
use lipmi_core::{LipModel, ModelConfig, Session, SplitMode};

const CTC_BUDGET_S: f64 = 60.0;
const GRAD_BUDGET_S: f64 = 120.0;
const MI_BUDGET_S: f64 = 300.0;
const GAUSSIAN_WINDOW: (f64, f64) = (0.68, 1.33);
const OVERFIT_WER: f64 = 5.0;
const OVERFIT_MAX_STEPS: u64 = 2000;
const OVERFIT_BUDGET_S: f64 = 1200.0;
const DESK_BUDGET_S: f64 = 7200.0;
const ROW_SUM_TOLERANCE: f64 = 1e-6;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    gated: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let note = if self.gated || self.passed { "" } else { " [not gated]" };
        format!("{status} criterion {} {}: {}{note}", self.id, self.name, self.detail)
    }
}

fn report(o: &Outcome) {
    println!("{}", o.line());
}

fn criterion1() -> Outcome {
    Outcome {
        id: 1,
        name: "reproducibility statement",
        passed: true,
        gated: true,
        detail: "the published WERs (1.83% overlapped, 10.21% unseen, and the ablation table) need full GRID \
                 training and are not reproducible at desk scale; acceptance rests on criteria 2-8"
            .into(),
    }
}

fn criterion2() -> Outcome {
    let t = Instant::now();
    let stats = selftest::ctc_grid(50, 2).expect("grid runs");
    let secs = t.elapsed().as_secs_f64();
    // Spot check that the oracle itself sees the empty target correctly.
    let empty = ctc_brute_force(&[0.0; 6], 3, &[]).expect("brute force");
    let empty_ok = (empty - 2.0 * 3f64.ln()).abs() < 1e-12;
    Outcome {
        id: 2,
        name: "CTC oracle equivalence",
        passed: stats.max_abs_err <= CTC_TOLERANCE && secs <= CTC_BUDGET_S && empty_ok,
        gated: true,
        detail: format!(
            "{} cases ({} infeasible), max |err| {:.2e} (tol {CTC_TOLERANCE:.0e}), {secs:.1}s",
            stats.cases, stats.infeasible, stats.max_abs_err
        ),
    }
}

fn criterion3() -> Outcome {
    let t = Instant::now();
    let checks = selftest::gradient_checks().expect("checks run");
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let micro = checks.iter().any(|c| c.name == "micro_model");
    Outcome {
        id: 3,
        name: "gradient checks",
        passed: failed.is_empty() && micro && secs <= GRAD_BUDGET_S,
        gated: true,
        detail: format!(
            "{} checks, worst rel err {worst:.2e} (tol {GRAD_TOLERANCE:.0e}), failed {failed:?}, {secs:.1}s",
            checks.len()
        ),
    }
}

fn criterion4() -> Outcome {
    let t = Instant::now();
    let closed = selftest::mi_closed_forms().expect("closed forms run");
    let closed_ok = closed.iter().all(|c| c.passed);
    let bench = gaussian_benchmark(&GaussianBenchConfig::default()).expect("benchmark runs");
    let secs = t.elapsed().as_secs_f64();
    let (lo, hi) = GAUSSIAN_WINDOW;
    let in_window = bench.iter().all(|r| (lo..=hi).contains(&r.vclub));
    let est: Vec<String> = bench.iter().map(|r| format!("{:.3}", r.vclub)).collect();
    let exact: Vec<String> = bench.iter().map(|r| format!("{:.3}", r.vclub_exact_q)).collect();
    Outcome {
        id: 4,
        name: "MI closed forms and Gaussian benchmark",
        passed: closed_ok && in_window && secs <= MI_BUDGET_S,
        gated: false,
        detail: format!(
            "closed forms {}; vCLUB [{}] vs window [{lo}, {hi}] around {:.3}; exact-q vCLUB [{}]; {secs:.1}s",
            if closed_ok { "ok" } else { "broken" },
            est.join(", "),
            bench[0].true_mi,
            exact.join(", ")
        ),
    }
}

/// Training-set WER after memorising 20 samples of two speakers.
fn overfit(seed: u64) -> (u64, f64) {
    let corpus_cfg = CorpusConfig {
        seed,
        speakers: 2,
        samples_per_speaker: 10,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&corpus_cfg).expect("corpus");
    let cfg = TrainConfig {
        seed,
        lr: 2e-3,
        batch_size: 10,
        warmup_steps: 50,
        total_steps: OVERFIT_MAX_STEPS,
        stage1_cap: 1.0,
        corpus: corpus_cfg,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::with_plan(cfg, DataPlan::memorise(&corpus)).expect("trainer");
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut best = f64::INFINITY;
    while tr.state.step < OVERFIT_MAX_STEPS {
        tr.step(&corpus).expect("step");
        if tr.state.step.is_multiple_of(100) {
            let (_, greedy) = tr.dev_metrics(&corpus).expect("dev metrics");
            if greedy <= OVERFIT_WER {
                let wer = evaluate(&tr.recognizer(), &corpus, &all).expect("evaluate").wer;
                best = best.min(wer);
                if wer <= OVERFIT_WER {
                    return (tr.state.step, wer);
                }
            }
        }
    }
    (tr.state.step, best)
}

fn criterion5() -> Outcome {
    let t = Instant::now();
    let runs: Vec<(u64, u64, f64)> = (0..3)
        .map(|seed| {
            let (steps, wer) = overfit(seed);
            (seed, steps, wer)
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let all = runs.iter().all(|&(_, _, w)| w <= OVERFIT_WER);
    let parts: Vec<String> = runs
        .iter()
        .map(|(s, n, w)| format!("seed {s}: {w:.2}% at step {n}"))
        .collect();
    Outcome {
        id: 5,
        name: "overfit sanity",
        passed: all && secs <= OVERFIT_BUDGET_S,
        gated: true,
        detail: format!("{} (tol {OVERFIT_WER}% within {OVERFIT_MAX_STEPS} steps), {secs:.0}s", parts.join("; ")),
    }
}

struct DeskScale {
    config: TrainConfig,
    options: SuiteOptions,
    full: bool,
}

fn desk_scale() -> DeskScale {
    let full = std::env::var("LIPMI_ACCEPTANCE_SCALE").is_ok_and(|v| v == "full");
    if full {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        return DeskScale {
            config: TrainConfig::load(&path).expect("desk config"),
            options: SuiteOptions::default(),
            full,
        };
    }
    let config = TrainConfig {
        batch_size: 8,
        lr: 2e-3,
        warmup_steps: 4,
        total_steps: 24,
        plateau_patience: 1,
        dev_per_speaker: 1,
        beam_width: 3,
        max_decode_len: 40,
        corpus: CorpusConfig {
            seed: 0,
            speakers: 8,
            samples_per_speaker: 5,
            ..CorpusConfig::default()
        },
        split: SplitMode::Unseen { held_out: vec![6, 7] },
        ..TrainConfig::default()
    };
    DeskScale {
        config,
        options: SuiteOptions {
            test_per_speaker: Some(2),
            only: None,
        },
        full,
    }
}

fn criterion6(scale: &DeskScale, out: &Path) -> (Outcome, Option<AblationReport>) {
    let t = Instant::now();
    let corpus = Corpus::generate(&scale.config.corpus).expect("corpus");
    let report = ablation_suite(&scale.config, &corpus, &scale.options, Some(out));
    let secs = t.elapsed().as_secs_f64();
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            return (
                Outcome {
                    id: 6,
                    name: "cross-speaker harness",
                    passed: false,
                    gated: true,
                    detail: format!("suite failed: {e}"),
                },
                None,
            )
        }
    };
    let labels: Vec<String> = table_rows().into_iter().map(|r| r.label).collect();
    let shaped = report.rows.iter().map(|r| r.label.clone()).collect::<Vec<_>>() == labels;
    let both_stages = report
        .rows
        .iter()
        .all(|r| r.stage1_steps.is_some_and(|s| s < r.total_steps) && r.total_steps == scale.config.total_steps);
    let full = &report.rows[0];
    let held = match &scale.config.split {
        SplitMode::Unseen { held_out } => held_out.clone(),
        SplitMode::Overlapped { .. } => Vec::new(),
    };
    let per_speaker_ok = full.per_speaker.iter().map(|s| s.speaker).collect::<Vec<_>>() == held;
    let table_ok = out.join("ablation.txt").exists() && out.join("ablation.json").exists();
    let budget_ok = !scale.full || secs <= DESK_BUDGET_S;
    let per: Vec<String> = full.per_speaker.iter().map(|s| format!("{}: {:.2}%", s.speaker, s.wer)).collect();
    let delta = report.mi_delta.map_or("n/a".into(), |d| format!("{d:+.2}"));
    let outcome = Outcome {
        id: 6,
        name: "cross-speaker harness",
        passed: shaped && both_stages && full.wer.is_finite() && per_speaker_ok && table_ok && budget_ok,
        gated: true,
        detail: format!(
            "{} scale, {} rows, full-model unseen WER {:.2}% ({}), w/o MI minus full {delta} points, {secs:.0}s",
            if scale.full { "full" } else { "reduced" },
            report.rows.len(),
            full.wer,
            per.join(", ")
        ),
    };
    (outcome, Some(report))
}

const ROW_FILES: [&str; 7] = [
    "config.toml",
    "metrics.jsonl",
    "epochs.jsonl",
    "stage1.ckpt",
    "best.ckpt",
    "last.ckpt",
    "decodes.jsonl",
];

fn row_dirs(out: &Path) -> Vec<String> {
    let mut dirs: Vec<String> = fs::read_dir(out)
        .expect("suite output")
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    dirs
}

fn criterion7(scale: &DeskScale, first: &Path, first_report: Option<&AblationReport>, out: &Path) -> Outcome {
    let fail = |detail: String| Outcome {
        id: 7,
        name: "determinism",
        passed: false,
        gated: true,
        detail,
    };
    let Some(first_report) = first_report else {
        return fail("criterion 6 produced no report".into());
    };
    let corpus = Corpus::generate(&scale.config.corpus).expect("corpus");
    let report = match ablation_suite(&scale.config, &corpus, &scale.options, Some(out)) {
        Ok(r) => r,
        Err(e) => return fail(format!("repeat failed: {e}")),
    };
    let mut compared = 0;
    let mut differing = Vec::new();
    for dir in row_dirs(first) {
        for f in ROW_FILES {
            let (a, b) = (first.join(&dir).join(f), out.join(&dir).join(f));
            compared += 1;
            if fs::read(&a).ok() != fs::read(&b).ok() {
                differing.push(format!("{dir}/{f}"));
            }
        }
    }
    for f in ["ablation.json", "ablation.txt"] {
        compared += 1;
        if fs::read(first.join(f)).ok() != fs::read(out.join(f)).ok() {
            differing.push(f.to_string());
        }
    }
    Outcome {
        id: 7,
        name: "determinism",
        passed: differing.is_empty() && report == *first_report,
        gated: true,
        detail: format!("{compared} artefacts compared byte for byte, differing {differing:?}"),
    }
}

fn max_row_error(rows: &[f64], n: usize) -> f64 {
    rows.chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn criterion8() -> Outcome {
    let corpus = Corpus::generate(&CorpusConfig::default()).expect("corpus");
    let model_cfg = ModelConfig::desk(6);
    let pairs = model_cfg.frontend.lip_pairs.clone();
    let motion_ok = corpus.entries.iter().all(|e| {
        let d = motion_deltas(&e.track, &pairs, corpus.config.width);
        let w = d.shape()[1];
        d.data()[..w].iter().all(|&v| v == 0.0)
    });

    let (model, store) = LipModel::build(&model_cfg, 4).expect("model");
    let mut worst: f64 = 0.0;
    for i in [0, 377, 1199] {
        let sample = corpus.sample(i).expect("sample");
        for layer in fusion_attention(&model, &store, &sample).expect("attention") {
            worst = worst.max(max_row_error(layer.data(), layer.shape()[3]));
        }
        let layers = fusion_attention(&model, &store, &sample).expect("attention");
        let avg = averaged(&layers).expect("average");
        worst = worst.max(max_row_error(avg.data(), avg.shape()[2]));
        let cfg = &model.config.frontend;
        let input = FrontendInput::build(cfg, &[&sample], cfg.patch_size).expect("input");
        let s = Session::inference(&store);
        let enc = model.encode(&s, &input, false).expect("encode");
        for a in &enc.conformer_attention {
            let v = s.g.value(*a);
            worst = worst.max(max_row_error(v.data(), *v.shape().last().expect("rank")));
        }
        let dec = model.decoder.forward(&s, &[vec![SOS, 5, 9, 3]], enc.hlb).expect("decoder");
        for a in &dec.cross_attention {
            let v = s.g.value(*a);
            worst = worst.max(max_row_error(v.data(), *v.shape().last().expect("rank")));
        }
    }

    let audit_ok = stage2_audit();

    let toy = [
        ("bin blue at f two now", "bin blue at f two now"),
        ("set red by a nine soon", "set red by e nine soon"),
        ("lay green in z one again", "lay green in one please again"),
    ];
    let records: Vec<DecodeRecord> = toy
        .iter()
        .enumerate()
        .map(|(i, (r, h))| {
            let rw: Vec<&str> = r.split_whitespace().collect();
            let hw: Vec<&str> = h.split_whitespace().collect();
            DecodeRecord {
                id: format!("toy{i}"),
                speaker: i % 2,
                reference: r.to_string(),
                hypothesis: h.to_string(),
                wer: edit_alignment(&rw, &hw).expect("alignment"),
            }
        })
        .collect();
    // Hand count: sample 1 has one substitution; sample 2 deletes "z" and
    // inserts "please", 3 errors over 18 reference words.
    let toy_report = aggregate(records);
    let toy_ok = toy_report.errors == 3 && toy_report.words == 18 && (toy_report.wer - 300.0 / 18.0).abs() < 1e-12;

    Outcome {
        id: 8,
        name: "structural invariants",
        passed: motion_ok && worst <= ROW_SUM_TOLERANCE && audit_ok && toy_ok,
        gated: true,
        detail: format!(
            "first motion delta zero on {} samples: {motion_ok}; max attention row-sum error {worst:.1e} (tol \
             {ROW_SUM_TOLERANCE:.0e}); stage-II speaker-head audit: {audit_ok}; toy WER {:.4}% (hand 16.6667%)",
            corpus.len(),
            toy_report.wer
        ),
    }
}

fn stage2_audit() -> bool {
    let corpus_cfg = CorpusConfig {
        seed: 3,
        speakers: 3,
        samples_per_speaker: 4,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&corpus_cfg).expect("corpus");
    let cfg = TrainConfig {
        batch_size: 4,
        warmup_steps: 1,
        total_steps: 6,
        dev_per_speaker: 1,
        corpus: corpus_cfg,
        split: SplitMode::Unseen { held_out: vec![2] },
        ablation: Ablation::default(),
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, &corpus).expect("trainer");
    tr.step(&corpus).expect("stage I step");
    tr.enter_stage2().expect("stage II");
    let before = tr.speaker_digest();
    for _ in 0..3 {
        tr.step(&corpus).expect("stage II step");
    }
    let unchanged = before == tr.speaker_digest() && tr.audit_speaker_head().is_ok();
    let mut tampered = tr.store.clone();
    let id = tr.model.speaker_ids(&tr.store)[0];
    tampered.get_mut(id).data_mut()[0] += 1.0;
    std::mem::swap(&mut tr.store, &mut tampered);
    unchanged && tr.audit_speaker_head().is_err()
}

fn main() {
    let scale = desk_scale();
    let work = tempfile::tempdir().expect("scratch dir");
    let first = work.path().join("run1");
    let second = work.path().join("run2");
    let mut outcomes = vec![criterion1()];
    report(&outcomes[0]);
    for f in [criterion2, criterion3, criterion4, criterion5] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    let (o6, rep) = criterion6(&scale, &first);
    report(&o6);
    outcomes.push(o6);
    let o7 = criterion7(&scale, &first, rep.as_ref(), &second);
    report(&o7);
    outcomes.push(o7);
    let o8 = criterion8();
    report(&o8);
    outcomes.push(o8);

    let gated_failures: Vec<u32> = outcomes.iter().filter(|o| o.gated && !o.passed).map(|o| o.id).collect();
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if !gated_failures.is_empty() {
        println!("gated criteria failed: {gated_failures:?}");
        std::process::exit(1);
    }
}
