//! Benchmark fixtures shared by the criterion targets.

use lipmi_core::corpus::{Corpus, CorpusConfig};
use lipmi_core::trainer::{TrainConfig, Trainer};

/// Desk model over a small corpus, ready to step.
pub fn desk_trainer(batch_size: usize) -> (Trainer, Corpus) {
    let corpus_cfg = CorpusConfig {
        speakers: 4,
        samples_per_speaker: 12,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&corpus_cfg).expect("corpus");
    let cfg = TrainConfig {
        batch_size,
        warmup_steps: 10,
        total_steps: 1000,
        dev_per_speaker: 2,
        corpus: corpus_cfg,
        split: lipmi_core::SplitMode::Unseen { held_out: vec![3] },
        ..TrainConfig::default()
    };
    let tr = Trainer::new(cfg, &corpus).expect("trainer");
    (tr, corpus)
}
