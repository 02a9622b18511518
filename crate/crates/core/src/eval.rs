//! Word error rate, dataset evaluation and per-speaker breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample};
use crate::decoder::{beam_search, Hypothesis};
use crate::error::{Error, Result};
use crate::frontend::FrontendInput;
use crate::model::LipModel;
use crate::nn::{ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// Percentage.
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(s: usize, d: usize, i: usize, n: usize) -> Self {
        WerBreakdown {
            substitutions: s,
            deletions: d,
            insertions: i,
            reference_words: n,
            wer: 100.0 * (s + d + i) as f64 / n as f64,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Move {
    Diagonal,
    Insert,
    Delete,
}

/// Minimal word-level edit alignment. Among equal-cost alignments the trace
/// prefers a substitution (or match), then an insertion, then a deletion.
pub fn edit_alignment(reference: &[&str], hypothesis: &[&str]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::arg("reference must contain at least one word"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        let mv = if i > 0
            && j > 0
            && d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) == here
        {
            Move::Diagonal
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            Move::Insert
        } else {
            Move::Delete
        };
        match mv {
            Move::Diagonal => {
                s += usize::from(reference[i - 1] != hypothesis[j - 1]);
                i -= 1;
                j -= 1;
            }
            Move::Insert => {
                ins += 1;
                j -= 1;
            }
            Move::Delete => {
                del += 1;
                i -= 1;
            }
        }
    }
    Ok(WerBreakdown::from_counts(s, del, ins, n))
}

pub fn wer_of_text(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_alignment(&r, &h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub speaker: usize,
    pub reference: String,
    pub hypothesis: String,
    pub wer: WerBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerWer {
    pub speaker: usize,
    pub errors: usize,
    pub words: usize,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<DecodeRecord>,
    pub per_speaker: Vec<SpeakerWer>,
    pub errors: usize,
    pub words: usize,
    /// Total errors over total reference words, as a percentage.
    pub wer: f64,
}

/// Corpus WER as Σ errors / Σ reference words, plus the per-speaker split.
pub fn aggregate(records: Vec<DecodeRecord>) -> EvalReport {
    let mut by: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut errors, mut words) = (0, 0);
    for r in &records {
        let e = by.entry(r.speaker).or_default();
        e.0 += r.wer.errors();
        e.1 += r.wer.reference_words;
        errors += r.wer.errors();
        words += r.wer.reference_words;
    }
    let per_speaker = by
        .into_iter()
        .map(|(speaker, (errors, words))| SpeakerWer {
            speaker,
            errors,
            words,
            wer: 100.0 * errors as f64 / words.max(1) as f64,
        })
        .collect();
    EvalReport {
        records,
        per_speaker,
        errors,
        words,
        wer: 100.0 * errors as f64 / words.max(1) as f64,
    }
}

/// Anything that maps a sample to a transcript.
pub trait Recognizer {
    fn recognize(&self, sample: &Sample) -> Result<String>;
}

/// Inference with a trained model: running batch-norm statistics, fixed
/// patch size, attention-only beam search. The speaker head and the MI
/// estimators are never evaluated.
pub struct ModelRecognizer<'a> {
    pub model: &'a LipModel,
    pub store: &'a ParamStore,
    pub beam_width: usize,
    pub max_len: usize,
}

impl ModelRecognizer<'_> {
    pub fn hypothesis(&self, sample: &Sample) -> Result<Hypothesis> {
        let cfg = &self.model.config.frontend;
        let input = FrontendInput::build(cfg, &[sample], cfg.patch_size)?;
        let memory = {
            let s = Session::inference(self.store);
            let enc = self.model.encode(&s, &input, false)?;
            let v = s.g.value(enc.hlb);
            let sh = v.shape().to_vec();
            (*v).clone().reshape(&sh[1..])?
        };
        beam_search(&self.model.decoder, self.store, &memory, self.beam_width, self.max_len)
    }
}

impl Recognizer for ModelRecognizer<'_> {
    fn recognize(&self, sample: &Sample) -> Result<String> {
        Ok(self.hypothesis(sample)?.utterance().text)
    }
}

/// Parameters touched by one inference pass (encoder plus one decoder step).
pub fn inference_bound_params(model: &LipModel, store: &ParamStore, sample: &Sample) -> Result<Vec<ParamId>> {
    let cfg = &model.config.frontend;
    let input = FrontendInput::build(cfg, &[sample], cfg.patch_size)?;
    let s = Session::inference(store);
    let enc = model.encode(&s, &input, false)?;
    model.decoder.forward(&s, &[vec![crate::vocab::SOS]], enc.hlb)?;
    Ok(s.bound_ids())
}

/// Decodes `indices` of `corpus` and aggregates the word error rate.
pub fn evaluate(rec: &dyn Recognizer, corpus: &Corpus, indices: &[usize]) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = corpus.sample(i)?;
        let hyp = rec.recognize(&sample)?;
        let wer = wer_of_text(&sample.transcript.text, &hyp)?;
        records.push(DecodeRecord {
            id: corpus.entries[i].id.clone(),
            speaker: sample.speaker,
            reference: sample.transcript.text.clone(),
            hypothesis: hyp,
            wer,
        });
    }
    Ok(aggregate(records))
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serialisable row") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn alignment_examples() {
        let r = words("bin blue at a one again");
        assert_eq!(edit_alignment(&r, &r).unwrap().wer, 0.0);
        let one = edit_alignment(&r, &words("bin blue at b one again")).unwrap();
        assert_eq!((one.substitutions, one.deletions, one.insertions), (1, 0, 0));
        assert!((one.wer - 100.0 / 6.0).abs() < 1e-12);
        let empty = edit_alignment(&r, &[]).unwrap();
        assert_eq!((empty.deletions, empty.wer), (6, 100.0));
        assert!(edit_alignment(&[], &r).is_err());
    }

    #[test]
    fn tie_prefers_substitution() {
        // "a b" → "b c": two substitutions or delete-match-insert, both cost 2
        let w = edit_alignment(&["a", "b"], &["b", "c"]).unwrap();
        assert_eq!((w.substitutions, w.deletions, w.insertions), (2, 0, 0));
    }

    fn rec(speaker: usize, reference: &str, hyp: &str) -> DecodeRecord {
        DecodeRecord {
            id: String::new(),
            speaker,
            reference: reference.into(),
            hypothesis: hyp.into(),
            wer: wer_of_text(reference, hyp).unwrap(),
        }
    }

    #[test]
    fn toy_report_aggregation() {
        let report = aggregate(vec![
            rec(0, "set red by c two now", "set red by c two now"),
            rec(0, "lay green in d five soon", "lay green d five soon"),
            rec(1, "bin blue at e six please", "bin blue at at e nine please"),
        ]);
        // errors 0 + 1 + 2 over 18 words
        assert_eq!((report.errors, report.words), (3, 18));
        assert!((report.wer - 100.0 * 3.0 / 18.0).abs() < 1e-12);
        let weighted: f64 = report
            .per_speaker
            .iter()
            .map(|s| s.wer * s.words as f64)
            .sum::<f64>()
            / report.words as f64;
        assert!((weighted - report.wer).abs() < 1e-12);
        assert_eq!(report.per_speaker[0].errors, 1);
        assert_eq!(report.per_speaker[1].errors, 2);
    }

    #[test]
    fn corpus_rate_is_word_weighted() {
        let report = aggregate(vec![rec(0, "a", "b"), rec(0, "a b c d", "a b c d")]);
        // per-sample mean would be 50%
        assert!((report.wer - 20.0).abs() < 1e-12);
    }
}
