//! The unseen-speaker ablation table: every on/off combination of relative
//! positions, lip motion and MI regularisation, plus the 2D-patch and
//! mouth-crop variants.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate, to_jsonl, SpeakerWer};
use crate::trainer::{run_training, Ablation, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: Ablation,
}

fn without(names: &[&str]) -> String {
    format!("w/o {}", names.join("&"))
}

/// Rows in table order; the first is the full model.
pub fn table_rows() -> Vec<AblationRow> {
    let full = Ablation::default();
    let mut rows = vec![AblationRow {
        label: "Ours".into(),
        flags: full,
    }];
    let combos: [(&[&str], bool, bool, bool); 7] = [
        (&["RelPos"], false, true, true),
        (&["Motion"], true, false, true),
        (&["MI"], true, true, false),
        (&["RelPos", "Motion"], false, false, true),
        (&["RelPos", "MI"], false, true, false),
        (&["Motion", "MI"], true, false, false),
        (&["RelPos", "Motion", "MI"], false, false, false),
    ];
    for (names, relpos, motion, mi) in combos {
        rows.push(AblationRow {
            label: without(names),
            flags: Ablation {
                relpos,
                motion,
                mi,
                ..full
            },
        });
    }
    rows.push(AblationRow {
        label: "Replacing 3D patch with 2D patch".into(),
        flags: Ablation {
            two_d_patch: true,
            ..full
        },
    });
    rows.push(AblationRow {
        label: "Using mouth-centered crops".into(),
        flags: Ablation {
            mouth_crop: true,
            ..full
        },
    });
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub flags: Ablation,
    pub wer: f64,
    pub per_speaker: Vec<SpeakerWer>,
    pub test_samples: usize,
    pub stage1_steps: Option<u64>,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationResult>,
    /// WER of the row without MI minus WER of the full model; positive
    /// means the MI terms helped.
    pub mi_delta: Option<f64>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$} | WER (%)\n{}\n", "Method", "-".repeat(width + 10));
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$} | {:.2}", r.label, r.wer);
        }
        if let Some(d) = self.mi_delta {
            let _ = writeln!(s, "\nw/o MI minus Ours: {d:+.2} WER points");
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    /// Evaluate only the first n test samples of each held-out speaker.
    pub test_per_speaker: Option<usize>,
    /// Restrict to rows whose label is listed.
    pub only: Option<Vec<String>>,
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// Trains and evaluates every row. With `out`, each row gets its own
/// directory holding the training artefacts and `decodes.jsonl`, and the
/// report is written as `ablation.json` and `ablation.txt`.
pub fn ablation_suite(
    base: &TrainConfig,
    corpus: &Corpus,
    opts: &SuiteOptions,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for row in table_rows() {
        if opts.only.as_ref().is_some_and(|o| !o.contains(&row.label)) {
            continue;
        }
        let cfg = TrainConfig {
            ablation: row.flags,
            ..base.clone()
        };
        let dir = out.map(|d| d.join(slug(&row.label)));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            fs::write(d.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(d, e))?;
        }
        let mut tr = Trainer::new(cfg, corpus)?;
        let report = run_training(&mut tr, corpus, dir.as_deref())?;
        let test = limit_per_speaker(corpus, &tr.plan.test, opts.test_per_speaker);
        let eval = evaluate(&tr.recognizer(), corpus, &test)?;
        if let Some(d) = &dir {
            let p = d.join("decodes.jsonl");
            fs::write(&p, to_jsonl(&eval.records)).map_err(|e| Error::io(p, e))?;
        }
        rows.push(AblationResult {
            label: row.label,
            flags: row.flags,
            wer: eval.wer,
            per_speaker: eval.per_speaker,
            test_samples: test.len(),
            stage1_steps: report.stage1_steps,
            total_steps: report.total_steps,
        });
    }
    let find = |l: &str| rows.iter().find(|r| r.label == l).map(|r| r.wer);
    let mi_delta = match (find("Ours"), find("w/o MI")) {
        (Some(full), Some(no_mi)) => Some(no_mi - full),
        _ => None,
    };
    let report = AblationReport { rows, mi_delta };
    if let Some(d) = out {
        let p = d.join("ablation.json");
        let json = serde_json::to_string_pretty(&report).expect("serialisable report");
        fs::write(&p, json).map_err(|e| Error::io(p, e))?;
        let p = d.join("ablation.txt");
        fs::write(&p, report.table()).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

/// The first `n` indices of each speaker, order preserved.
pub fn limit_per_speaker(corpus: &Corpus, indices: &[usize], n: Option<usize>) -> Vec<usize> {
    let Some(n) = n else {
        return indices.to_vec();
    };
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    indices
        .iter()
        .copied()
        .filter(|&i| {
            let c = seen.entry(corpus.entries[i].speaker).or_default();
            *c += 1;
            *c <= n
        })
        .collect()
}
