//! Two-stage optimisation: stage I trains recognition and speaker
//! identification jointly, stage II freezes the speaker head and adds the
//! mutual-information terms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Corpus, CorpusConfig, Sample, SplitMode};
use crate::decoder::{ce_loss, ctc_loss_batch, greedy_decode, vsr_loss_var, TeacherBatch};
use crate::error::{Error, Result};
use crate::eval::{wer_of_text, ModelRecognizer};
use crate::frontend::FrontendInput;
use crate::mi::{fit_score_step, fit_variational_step, mi_loss};
use crate::model::{LipModel, ModelConfig};
use crate::nn::{
    apply_bn_observations, clip_global_norm, lr_schedule, Adam, Checkpoint, ParamId, ParamStore, Session,
    BN_MOMENTUM,
};
use crate::rng::{derive_seed, stream};
use crate::speaker::{accuracy, speaker_loss};
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

const EPOCH_TAG: u64 = 0x4550_4f43;
const FPS_TAG: u64 = 0x4650_5353;
const DEV_TAG: u64 = 0x4445_5653;
const ESTIMATOR_TAG: u64 = 0x4553_5449;
const SPLIT_TAG: u64 = 0x5350_4c49;

/// Mechanism switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub relpos: bool,
    pub motion: bool,
    pub mi: bool,
    /// Temporal kernel depth 1 in the tubelet encoder.
    pub two_d_patch: bool,
    pub mouth_crop: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            relpos: true,
            motion: true,
            mi: true,
            two_d_patch: false,
            mouth_crop: false,
        }
    }
}

impl Ablation {
    pub fn apply(&self, model: &mut ModelConfig) {
        let f = &mut model.frontend;
        f.relpos = self.relpos;
        f.motion = self.motion;
        f.mouth_crop = self.mouth_crop;
        if self.two_d_patch {
            f.temporal_kernel = 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Constant step size of both estimator optimisers.
    pub estimator_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
    pub grad_clip: f64,
    /// Minimum gain in dev speaker accuracy that resets the plateau count.
    pub plateau_delta: f64,
    pub plateau_patience: usize,
    /// Fraction of `total_steps` after which stage I ends regardless.
    pub stage1_cap: f64,
    /// Held-in samples per training speaker kept out of training.
    pub dev_per_speaker: usize,
    pub beam_width: usize,
    pub max_decode_len: usize,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub split: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 0,
            batch_size: 16,
            lr: 3e-4,
            estimator_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 4000,
            alpha1: 0.2,
            alpha2: 0.2,
            lambda: 0.1,
            grad_clip: 5.0,
            plateau_delta: 0.005,
            plateau_patience: 3,
            stage1_cap: 0.4,
            dev_per_speaker: 4,
            beam_width: 10,
            max_decode_len: 48,
            ablation: Ablation::default(),
            model: ModelConfig::desk(8),
            corpus: CorpusConfig::default(),
            split: SplitMode::Unseen { held_out: vec![6, 7] },
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.estimator_lr > 0.0 && self.grad_clip > 0.0) {
            return bad("learning rates and grad_clip must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.stage1_cap) {
            return bad(format!("stage1_cap {} outside [0, 1]", self.stage1_cap));
        }
        if self.beam_width == 0 || self.max_decode_len == 0 {
            return bad("beam_width and max_decode_len must be positive".into());
        }
        let mut m = self.model.clone();
        self.ablation.apply(&mut m);
        m.validate()
    }

    /// Model configuration after the ablation switches, sized for `classes`
    /// training speakers.
    pub fn effective_model(&self, classes: usize) -> ModelConfig {
        let mut m = self.model.clone();
        self.ablation.apply(&mut m);
        m.speakers = classes;
        m
    }

    fn stage1_cap_steps(&self) -> u64 {
        (self.stage1_cap * self.total_steps as f64).ceil() as u64
    }
}

/// Which corpus entries feed training, dev monitoring and testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPlan {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    /// Corpus speaker id of each classifier class.
    pub classes: Vec<usize>,
}

impl DataPlan {
    pub fn new(corpus: &Corpus, split: &SplitMode, dev_per_speaker: usize, seed: u64) -> Result<Self> {
        let speakers: Vec<usize> = corpus.entries.iter().map(|e| e.speaker).collect();
        let sp = split_dataset(&speakers, split, derive_seed(seed, &[SPLIT_TAG]))?;
        let mut classes: Vec<usize> = sp.train.iter().map(|&i| speakers[i]).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for &c in &classes {
            let mut idx: Vec<usize> = sp.train.iter().copied().filter(|&i| speakers[i] == c).collect();
            if idx.len() <= dev_per_speaker {
                return Err(Error::arg(format!(
                    "speaker {c} has {} training samples, cannot hold {dev_per_speaker} for dev",
                    idx.len()
                )));
            }
            idx.shuffle(&mut stream(seed, &[DEV_TAG, c as u64]));
            dev.extend_from_slice(&idx[..dev_per_speaker]);
            train.extend_from_slice(&idx[dev_per_speaker..]);
        }
        train.sort_unstable();
        dev.sort_unstable();
        Ok(DataPlan {
            train,
            dev,
            test: sp.test,
            classes,
        })
    }

    /// Every sample trains; dev and test are the training set itself.
    pub fn memorise(corpus: &Corpus) -> Self {
        let all: Vec<usize> = (0..corpus.len()).collect();
        let mut classes: Vec<usize> = corpus.entries.iter().map(|e| e.speaker).collect();
        classes.sort_unstable();
        classes.dedup();
        DataPlan {
            train: all.clone(),
            dev: all.clone(),
            test: all,
            classes,
        }
    }

    pub fn class_of(&self, speaker: usize) -> Option<usize> {
        self.classes.binary_search(&speaker).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Position of the next batch within the current epoch.
    pub batch_in_epoch: usize,
    pub stage: Stage,
    pub best_dev_acc: Option<f64>,
    pub stale_epochs: usize,
    pub stage1_steps: Option<u64>,
    pub best_dev_wer: Option<f64>,
    /// Digest of the frozen speaker head, recorded when stage II begins.
    pub speaker_digest: Option<String>,
}

impl TrainState {
    /// Plateau bookkeeping: an epoch counts as stale unless accuracy beats
    /// the best so far by more than `delta`.
    pub fn observe_dev_accuracy(&mut self, acc: f64, delta: f64) {
        if self.best_dev_acc.is_none_or(|b| acc > b + delta) {
            self.best_dev_acc = Some(acc);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            stage: Stage::One,
            best_dev_acc: None,
            stale_epochs: 0,
            stage1_steps: None,
            best_dev_wer: None,
            speaker_digest: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub stage: Stage,
    pub lr: f64,
    pub window: usize,
    pub l_ctc: f64,
    pub l_ce: f64,
    pub l_vsr: f64,
    pub l_id: Option<f64>,
    pub l_min_mi: Option<f64>,
    /// Unclipped vCLUB estimate behind `l_min_mi`.
    pub vclub: Option<f64>,
    pub l_max_mi: Option<f64>,
    pub loss: f64,
    pub spk_acc: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    pub stage: Stage,
    pub dev_speaker_acc: f64,
    /// Greedy-decoded dev WER.
    pub dev_wer: f64,
    pub switched_stage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub stage1_steps: Option<u64>,
    pub total_steps: u64,
    pub best_dev_wer: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: LipModel,
    pub store: ParamStore,
    pub state: TrainState,
    pub plan: DataPlan,
    adam: Adam,
    club_adam: Adam,
    score_adam: Adam,
    /// Rendered samples kept between steps, at most `CACHE_SAMPLES`.
    cache: RefCell<HashMap<usize, Sample>>,
}

const CACHE_SAMPLES: usize = 64;

struct Batch {
    samples: Vec<Sample>,
    labels: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let plan = DataPlan::new(corpus, &config.split, config.dev_per_speaker, config.seed)?;
        Self::with_plan(config, plan)
    }

    pub fn with_plan(config: TrainConfig, plan: DataPlan) -> Result<Self> {
        config.validate()?;
        if plan.train.len() < 2 {
            return Err(Error::arg("training needs at least 2 samples"));
        }
        let (model, store) = LipModel::build(&config.effective_model(plan.classes.len()), config.seed)?;
        Ok(Trainer {
            config,
            model,
            store,
            state: TrainState::default(),
            plan,
            adam: Adam::default(),
            club_adam: Adam::default(),
            score_adam: Adam::default(),
            cache: RefCell::new(HashMap::new()),
        })
    }

    /// Full batches plus a trailing partial batch when it holds ≥ 2 samples.
    pub fn batches_per_epoch(&self) -> usize {
        let (n, b) = (self.plan.train.len(), self.config.batch_size.min(self.plan.train.len()));
        n / b + usize::from(n % b >= 2)
    }

    /// Training indices of the next batch.
    pub fn next_batch(&self) -> Vec<usize> {
        let mut order = self.plan.train.clone();
        order.shuffle(&mut stream(self.config.seed, &[EPOCH_TAG, self.state.epoch]));
        let b = self.config.batch_size.min(order.len());
        let start = self.state.batch_in_epoch * b;
        order[start..(start + b).min(order.len())].to_vec()
    }

    /// Patch window drawn for a given step.
    pub fn window_for(&self, step: u64) -> usize {
        let set = &self.model.config.frontend.fps_set;
        set[stream(self.config.seed, &[FPS_TAG, step]).random_range(0..set.len())]
    }

    fn sample(&self, corpus: &Corpus, i: usize) -> Result<Sample> {
        if let Some(s) = self.cache.borrow().get(&i) {
            return Ok(s.clone());
        }
        let s = corpus.sample(i)?;
        let mut cache = self.cache.borrow_mut();
        if cache.len() < CACHE_SAMPLES {
            cache.insert(i, s.clone());
        }
        Ok(s)
    }

    fn load_batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
        let samples = indices.iter().map(|&i| self.sample(corpus, i)).collect::<Result<Vec<_>>>()?;
        let labels = samples
            .iter()
            .map(|s| {
                self.plan
                    .class_of(s.speaker)
                    .ok_or_else(|| Error::arg(format!("speaker {} is not a training speaker", s.speaker)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { samples, labels })
    }

    fn frozen_ids(&self) -> Vec<ParamId> {
        let mut ids = self.model.estimator_ids(&self.store);
        if self.state.stage == Stage::Two {
            ids.extend(self.model.speaker_ids(&self.store));
            ids.sort();
        }
        ids
    }

    fn lr(&self) -> f64 {
        lr_schedule(self.state.step, self.config.warmup_steps, self.config.total_steps, self.config.lr)
    }

    /// Joint recognition and speaker-identification update on `indices`.
    pub fn stage1_step(&mut self, corpus: &Corpus, indices: &[usize]) -> Result<StepMetrics> {
        if self.state.stage != Stage::One {
            return Err(Error::arg("stage1_step called in stage II"));
        }
        let batch = self.load_batch(corpus, indices)?;
        let window = self.window_for(self.state.step);
        let lr = self.lr();
        let cfg = &self.config;
        let refs: Vec<&Sample> = batch.samples.iter().collect();
        let input = FrontendInput::build(&self.model.config.frontend, &refs, window)?;
        let frozen = self.frozen_ids();
        let (mut m, mut grads, obs) = {
            let s = Session::with_frozen(&self.store, &frozen);
            let enc = self.model.encode(&s, &input, true)?;
            let (l_ctc, l_ce, l_vsr) = vsr_terms(&s, &self.model, &refs, enc.hlb, cfg.lambda)?;
            let spk = self.model.speaker.forward(&s, enc.h0, true)?;
            let l_id = speaker_loss(&s, spk.logits, &batch.labels)?;
            let loss = s.g.add(l_vsr, s.g.scale(l_id, cfg.alpha1))?;
            let v = |x| s.g.value(x).item();
            let m = StepMetrics {
                step: self.state.step,
                epoch: self.state.epoch,
                stage: Stage::One,
                lr,
                window,
                l_ctc: v(l_ctc),
                l_ce: v(l_ce),
                l_vsr: v(l_vsr),
                l_id: Some(v(l_id)),
                l_min_mi: None,
                vclub: None,
                l_max_mi: None,
                loss: v(loss),
                spk_acc: Some(accuracy(s.g.value(spk.logits).data(), self.plan.classes.len(), &batch.labels)),
                grad_norm: 0.0,
            };
            check_finite(&m)?;
            let g = s.g.backward(loss)?;
            (m, s.param_grads(&g), s.take_bn_observations())
        };
        m.grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        self.adam.step(&mut self.store, &grads, lr);
        apply_bn_observations(&mut self.store, &obs, BN_MOMENTUM);
        self.state.step += 1;
        Ok(m)
    }

    /// Estimator fitting followed by the recognition update with the MI
    /// terms; the speaker head stays frozen with running statistics.
    pub fn stage2_step(&mut self, corpus: &Corpus, indices: &[usize]) -> Result<StepMetrics> {
        if self.state.stage != Stage::Two {
            return Err(Error::arg("stage2_step called in stage I"));
        }
        let batch = self.load_batch(corpus, indices)?;
        let window = self.window_for(self.state.step);
        let lr = self.lr();
        let cfg = self.config.clone();
        let refs: Vec<&Sample> = batch.samples.iter().collect();
        let input = FrontendInput::build(&self.model.config.frontend, &refs, window)?;
        let frozen = self.frozen_ids();
        let club_ids = self.model.club_ids(&self.store);
        let score_ids = self.model.score_ids(&self.store);
        let mut fitted: Option<ParamStore> = None;
        let (mut m, mut grads, obs) = {
            let s = Session::with_frozen(&self.store, &frozen);
            let enc = self.model.encode(&s, &input, true)?;
            let (l_ctc, l_ce, l_vsr) = vsr_terms(&s, &self.model, &refs, enc.hlb, cfg.lambda)?;
            let v = |x| s.g.value(x).item();
            let mut m = StepMetrics {
                step: self.state.step,
                epoch: self.state.epoch,
                stage: Stage::Two,
                lr,
                window,
                l_ctc: v(l_ctc),
                l_ce: v(l_ce),
                l_vsr: v(l_vsr),
                l_id: None,
                l_min_mi: None,
                vclub: None,
                l_max_mi: None,
                loss: v(l_vsr),
                spk_acc: None,
                grad_norm: 0.0,
            };
            let mut loss = l_vsr;
            if cfg.ablation.mi {
                let spk = self.model.speaker.forward(&s, enc.h0, false)?;
                let l_id = speaker_loss(&s, spk.logits, &batch.labels)?;
                m.l_id = Some(v(l_id));
                m.spk_acc = Some(accuracy(s.g.value(spk.logits).data(), self.plan.classes.len(), &batch.labels));
                let h0p = s.g.mean_axis(enc.h0, 1)?;
                let hlbp = s.g.mean_axis(enc.hlb, 1)?;
                let (hid_v, h0_v, hlb_v) = (
                    (*s.g.value(spk.h_id)).clone(),
                    (*s.g.value(h0p)).clone(),
                    (*s.g.value(hlbp)).clone(),
                );
                let mut est = self.store.clone();
                fit_variational_step(
                    &self.model.club,
                    &mut est,
                    &club_ids,
                    &mut self.club_adam,
                    &hid_v,
                    &hlb_v,
                    cfg.estimator_lr,
                )?;
                fit_score_step(&self.model.score, &mut est, &score_ids, &mut self.score_adam, &h0_v, &hlb_v, cfg.estimator_lr)?;
                for &id in club_ids.iter().chain(&score_ids) {
                    s.bind_value(id, est.get(id).clone());
                }
                let terms = mi_loss(&s, &self.model.club, &self.model.score, spk.h_id, h0p, hlbp)?;
                m.l_min_mi = Some(v(terms.min_mi));
                m.vclub = Some(v(terms.vclub));
                m.l_max_mi = Some(v(terms.max_mi));
                loss = s.g.add(l_vsr, s.g.scale(terms.total, cfg.alpha2))?;
                m.loss = v(loss);
                fitted = Some(est);
            }
            check_finite(&m)?;
            let g = s.g.backward(loss)?;
            (m, s.param_grads(&g), s.take_bn_observations())
        };
        if let Some(est) = fitted {
            for &id in club_ids.iter().chain(&score_ids) {
                self.store.set(id, est.get(id).clone())?;
            }
        }
        m.grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        self.adam.step(&mut self.store, &grads, lr);
        apply_bn_observations(&mut self.store, &obs, BN_MOMENTUM);
        self.state.step += 1;
        Ok(m)
    }

    /// Whether stage I has used up its share of the step budget.
    pub fn stage1_cap_reached(&self) -> bool {
        self.state.stage == Stage::One && self.state.step >= self.config.stage1_cap_steps()
    }

    /// Freezes the speaker head, re-draws both estimators and records the
    /// head digest for later audits.
    pub fn enter_stage2(&mut self) -> Result<()> {
        if self.state.stage == Stage::Two {
            return Ok(());
        }
        self.model
            .reinit_estimators(&mut self.store, derive_seed(self.config.seed, &[ESTIMATOR_TAG]))?;
        self.club_adam = Adam::default();
        self.score_adam = Adam::default();
        self.state.stage = Stage::Two;
        self.state.stage1_steps = Some(self.state.step);
        self.state.speaker_digest = Some(self.speaker_digest());
        Ok(())
    }

    pub fn speaker_digest(&self) -> String {
        self.store.digest(self.model.speaker_ids(&self.store))
    }

    /// Errors when the speaker head changed since stage II began.
    pub fn audit_speaker_head(&self) -> Result<()> {
        match &self.state.speaker_digest {
            Some(d) if *d != self.speaker_digest() => Err(Error::Checkpoint(format!(
                "speaker head modified during stage II at step {}",
                self.state.step
            ))),
            _ => Ok(()),
        }
    }

    /// Runs the next scheduled step and advances the batch position.
    /// Returns the metrics and whether the step closed an epoch.
    pub fn step(&mut self, corpus: &Corpus) -> Result<(StepMetrics, bool)> {
        let batch = self.next_batch();
        let m = match self.state.stage {
            Stage::One => self.stage1_step(corpus, &batch)?,
            Stage::Two => self.stage2_step(corpus, &batch)?,
        };
        self.state.batch_in_epoch += 1;
        let closed = self.state.batch_in_epoch >= self.batches_per_epoch();
        if closed {
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
        }
        Ok((m, closed))
    }

    /// Dev monitoring, the plateau rule and the speaker-head audit.
    pub fn end_epoch(&mut self, corpus: &Corpus) -> Result<EpochReport> {
        self.audit_speaker_head()?;
        let (acc, wer) = self.dev_metrics(corpus)?;
        let mut switched = false;
        if self.state.stage == Stage::One {
            self.state.observe_dev_accuracy(acc, self.config.plateau_delta);
            if self.state.stale_epochs >= self.config.plateau_patience {
                self.enter_stage2()?;
                switched = true;
            }
        }
        Ok(EpochReport {
            epoch: self.state.epoch,
            step: self.state.step,
            stage: self.state.stage,
            dev_speaker_acc: acc,
            dev_wer: wer,
            switched_stage: switched,
        })
    }

    /// Speaker accuracy and greedy WER on the dev slice, inference mode.
    pub fn dev_metrics(&self, corpus: &Corpus) -> Result<(f64, f64)> {
        let (mut hits, mut errors, mut words) = (0.0, 0, 0);
        let cfg = &self.model.config.frontend;
        for chunk in self.plan.dev.chunks(self.config.batch_size) {
            let batch = self.load_batch(corpus, chunk)?;
            let refs: Vec<&Sample> = batch.samples.iter().collect();
            let input = FrontendInput::build(cfg, &refs, cfg.patch_size)?;
            let s = Session::inference(&self.store);
            let enc = self.model.encode(&s, &input, false)?;
            let spk = self.model.speaker.forward(&s, enc.h0, false)?;
            let acc = accuracy(s.g.value(spk.logits).data(), self.plan.classes.len(), &batch.labels);
            hits += acc * chunk.len() as f64;
            let hlb = s.g.value(enc.hlb);
            let sh = hlb.shape().to_vec();
            let per = sh[1] * sh[2];
            for (b, sample) in batch.samples.iter().enumerate() {
                let mem = Tensor::new(&sh[1..], hlb.data()[b * per..(b + 1) * per].to_vec())?;
                let hyp = greedy_decode(&self.model.decoder, &self.store, &mem, self.config.max_decode_len)?;
                let w = wer_of_text(&sample.transcript.text, &hyp.utterance().text)?;
                errors += w.errors();
                words += w.reference_words;
            }
        }
        let n = self.plan.dev.len().max(1) as f64;
        Ok((hits / n, 100.0 * errors as f64 / words.max(1) as f64))
    }

    pub fn recognizer(&self) -> ModelRecognizer<'_> {
        ModelRecognizer {
            model: &self.model,
            store: &self.store,
            beam_width: self.config.beam_width,
            max_len: self.config.max_decode_len,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .entries()
            .iter()
            .map(|e| (format!("param/{}", e.name), e.value.clone()))
            .collect();
        for (tag, adam) in [("adam", &self.adam), ("club_adam", &self.club_adam), ("score_adam", &self.score_adam)] {
            for (i, mo) in adam.moments.iter().enumerate() {
                if let Some((m, v)) = mo {
                    let e = &self.store.entries()[i];
                    let shape = e.value.shape();
                    let t = |d: &Vec<f64>| Tensor::new(shape, d.clone()).expect("moment shape");
                    tensors.push((format!("{tag}/m/{}", e.name), t(m)));
                    tensors.push((format!("{tag}/v/{}", e.name), t(v)));
                }
            }
        }
        let meta = serde_json::json!({
            "kind": "lipmi-train",
            "config": self.config,
            "state": self.state,
            "plan": self.plan,
            "adam_t": [self.adam.t, self.club_adam.t, self.score_adam.t],
        });
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("meta lacks '{k}'")))
        };
        let parse = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: TrainConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let plan: DataPlan = serde_json::from_value(field("plan")?).map_err(parse)?;
        let state: TrainState = serde_json::from_value(field("state")?).map_err(parse)?;
        let ts: [u64; 3] = serde_json::from_value(field("adam_t")?).map_err(parse)?;
        let mut tr = Trainer::with_plan(config, plan)?;
        tr.state = state;
        for id in tr.store.ids().collect::<Vec<_>>() {
            let name = format!("param/{}", tr.store.entry(id).name);
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            tr.store.set(id, t.clone())?;
        }
        let n = tr.store.len();
        let names: Vec<String> = tr.store.entries().iter().map(|e| e.name.clone()).collect();
        for (tag, t, adam) in [
            ("adam", ts[0], &mut tr.adam),
            ("club_adam", ts[1], &mut tr.club_adam),
            ("score_adam", ts[2], &mut tr.score_adam),
        ] {
            adam.t = t;
            adam.moments = vec![None; n];
            for (i, name) in names.iter().enumerate() {
                if let (Some(m), Some(v)) = (ck.tensor(&format!("{tag}/m/{name}")), ck.tensor(&format!("{tag}/v/{name}"))) {
                    adam.moments[i] = Some((m.data().to_vec(), v.data().to_vec()));
                }
            }
        }
        Ok(tr)
    }

    /// A model-only checkpoint for decoding.
    pub fn model_checkpoint(&self) -> Checkpoint {
        let mut ck = self.to_checkpoint();
        ck.tensors.retain(|(n, _)| n.starts_with("param/"));
        ck
    }
}

/// Loads the model half of a training checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(LipModel, ParamStore, TrainConfig, DataPlan)> {
    let tr = Trainer::from_checkpoint(&Checkpoint {
        meta: ck.meta.clone(),
        tensors: ck.tensors.clone(),
    })?;
    Ok((tr.model, tr.store, tr.config, tr.plan))
}

fn vsr_terms(
    s: &Session,
    model: &LipModel,
    samples: &[&Sample],
    hlb: crate::tensor::Var,
    lambda: f64,
) -> Result<(crate::tensor::Var, crate::tensor::Var, crate::tensor::Var)> {
    let targets: Vec<&[usize]> = samples.iter().map(|s| s.transcript.tokens.as_slice()).collect();
    let l_ctc = ctc_loss_batch(&s.g, model.ctc_logits(s, hlb)?, &targets)?;
    let utts: Vec<_> = samples.iter().map(|s| &s.transcript).collect();
    let tb = TeacherBatch::new(&utts);
    let dec = model.decoder.forward(s, &tb.inputs, hlb)?;
    let l_ce = ce_loss(s, dec.logits, &tb.targets, &tb.mask)?;
    let l_vsr = vsr_loss_var(s, l_ctc, l_ce, lambda)?;
    Ok((l_ctc, l_ce, l_vsr))
}

fn check_finite(m: &StepMetrics) -> Result<()> {
    let terms = [
        ("l_ctc", Some(m.l_ctc)),
        ("l_ce", Some(m.l_ce)),
        ("l_id", m.l_id),
        ("l_min_mi", m.l_min_mi),
        ("l_max_mi", m.l_max_mi),
        ("loss", Some(m.loss)),
    ];
    let bad: Vec<String> = terms
        .iter()
        .filter_map(|(n, v)| v.filter(|x| !x.is_finite()).map(|x| format!("{n}={x}")))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: m.step,
            detail: bad.join(", "),
        })
    }
}

/// Line-delimited JSON sink; `None` discards.
pub struct JsonlSink {
    file: Option<(PathBuf, fs::File)>,
}

impl JsonlSink {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some((p.to_path_buf(), fs::File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        Ok(JsonlSink { file })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonlSink {
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        if let Some((p, f)) = &mut self.file {
            let line = serde_json::to_string(row).expect("serialisable row");
            writeln!(f, "{line}").map_err(|e| Error::io(p.clone(), e))?;
        }
        Ok(())
    }
}

/// Trains until `total_steps`. With an output directory, writes
/// `metrics.jsonl`, `epochs.jsonl`, `stage1.ckpt`, `best.ckpt` and
/// `last.ckpt` there.
pub fn run_training(trainer: &mut Trainer, corpus: &Corpus, out: Option<&Path>) -> Result<TrainReport> {
    let resumed = trainer.state.step > 0;
    let open = |name: &str| -> Result<JsonlSink> {
        match out {
            Some(d) if resumed => JsonlSink::append(&d.join(name)),
            Some(d) => JsonlSink::create(Some(&d.join(name))),
            None => JsonlSink::create(None),
        }
    };
    let mut metrics = open("metrics.jsonl")?;
    let mut epochs_log = open("epochs.jsonl")?;
    let mut epochs = Vec::new();
    let save = |tr: &Trainer, name: &str| -> Result<()> {
        if let Some(d) = out {
            tr.to_checkpoint().write(&d.join(name))?;
        }
        Ok(())
    };
    while trainer.state.step < trainer.config.total_steps {
        if trainer.stage1_cap_reached() {
            trainer.enter_stage2()?;
            save(trainer, "stage1.ckpt")?;
        }
        let (m, closed) = trainer.step(corpus)?;
        metrics.write(&m)?;
        if closed || trainer.state.step >= trainer.config.total_steps {
            let rep = trainer.end_epoch(corpus)?;
            if rep.switched_stage {
                save(trainer, "stage1.ckpt")?;
            }
            if trainer.state.best_dev_wer.is_none_or(|b| rep.dev_wer < b) {
                trainer.state.best_dev_wer = Some(rep.dev_wer);
                save(trainer, "best.ckpt")?;
            }
            epochs_log.write(&rep)?;
            epochs.push(rep);
            save(trainer, "last.ckpt")?;
        }
    }
    Ok(TrainReport {
        epochs,
        stage1_steps: trainer.state.stage1_steps,
        total_steps: trainer.state.step,
        best_dev_wer: trainer.state.best_dev_wer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (TrainConfig, Corpus) {
        let mut model = ModelConfig::desk(2);
        model.frontend.channels = [2, 2, 4];
        model.frontend.fusion_heads = 1;
        model.frontend.fusion_ff = 8;
        model.frontend.relpos_hidden = 4;
        model.frontend.motion_dim = 4;
        model.frontend.output_dim = 8;
        model.frontend.fps_set = vec![10, 12];
        model.backend.model_dim = 8;
        model.backend.ff_dim = 8;
        model.backend.heads = 2;
        model.backend.depthwise_kernel = 3;
        model.decoder.model_dim = 8;
        model.decoder.ff_dim = 8;
        model.decoder.heads = 2;
        model.id_dim = 4;
        model.club_hidden = 4;
        model.score_hidden = 4;
        let corpus = CorpusConfig {
            seed: 5,
            speakers: 3,
            samples_per_speaker: 4,
            ..CorpusConfig::default()
        };
        let cfg = TrainConfig {
            seed: 11,
            batch_size: 3,
            lr: 1e-3,
            warmup_steps: 2,
            total_steps: 20,
            dev_per_speaker: 1,
            max_decode_len: 4,
            model,
            corpus: corpus.clone(),
            split: SplitMode::Unseen { held_out: vec![2] },
            ..TrainConfig::default()
        };
        (cfg, Corpus::generate(&corpus).unwrap())
    }

    fn vsr_digest(tr: &Trainer) -> String {
        tr.store.digest(tr.model.vsr_ids(&tr.store))
    }

    #[test]
    fn config_round_trips_and_rejects_bad_values() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let bad = |edit: &dyn Fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            edit(&mut c);
            assert!(matches!(TrainConfig::from_toml(&c.to_toml()), Err(Error::Config(_))));
        };
        bad(&|c| c.alpha1 = 1.5);
        bad(&|c| c.lambda = -0.1);
        bad(&|c| c.warmup_steps = c.total_steps);
        bad(&|c| c.version = 99);
        assert!(TrainConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        let partial = TrainConfig::from_toml("seed = 9\n[split]\nmode = \"overlapped\"\ntest_per_speaker = 5\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.split, SplitMode::Overlapped { test_per_speaker: 5 });
    }

    #[test]
    fn plan_keeps_held_out_speakers_apart() {
        let (cfg, corpus) = tiny();
        let plan = DataPlan::new(&corpus, &cfg.split, 1, 0).unwrap();
        assert_eq!(plan.classes, vec![0, 1]);
        assert_eq!((plan.train.len(), plan.dev.len(), plan.test.len()), (6, 2, 4));
        assert!(plan.test.iter().all(|&i| corpus.entries[i].speaker == 2));
        assert!(plan.train.iter().all(|i| !plan.dev.contains(i)));
    }

    #[test]
    fn epoch_batches_cover_the_training_set() {
        let (cfg, corpus) = tiny();
        let mut tr = Trainer::new(cfg, &corpus).unwrap();
        assert_eq!(tr.batches_per_epoch(), 2);
        let mut seen = Vec::new();
        for b in 0..2 {
            tr.state.batch_in_epoch = b;
            seen.extend(tr.next_batch());
        }
        seen.sort_unstable();
        assert_eq!(seen, tr.plan.train);
    }

    #[test]
    fn logged_terms_compose_exactly() {
        let (cfg, corpus) = tiny();
        let (a1, lam) = (cfg.alpha1, cfg.lambda);
        let mut tr = Trainer::new(cfg, &corpus).unwrap();
        let (m, _) = tr.step(&corpus).unwrap();
        assert_eq!(m.l_vsr, lam * m.l_ctc + (1.0 - lam) * m.l_ce);
        assert_eq!(m.loss, m.l_vsr + a1 * m.l_id.unwrap());
        tr.enter_stage2().unwrap();
        let (m, _) = tr.step(&corpus).unwrap();
        let mi = m.l_min_mi.unwrap() + m.l_max_mi.unwrap();
        assert_eq!(m.loss, m.l_vsr + tr.config.alpha2 * mi);
    }

    #[test]
    fn zero_alpha1_matches_a_pure_recognition_update() {
        let (cfg, corpus) = tiny();
        let mut a = Trainer::new(TrainConfig { alpha1: 0.0, ..cfg.clone() }, &corpus).unwrap();
        let spk = a.speaker_digest();
        let mut b = Trainer::new(
            TrainConfig {
                ablation: Ablation { mi: false, ..Ablation::default() },
                ..cfg
            },
            &corpus,
        )
        .unwrap();
        b.enter_stage2().unwrap();
        let batch = a.next_batch();
        a.stage1_step(&corpus, &batch).unwrap();
        b.stage2_step(&corpus, &batch).unwrap();
        assert_eq!(vsr_digest(&a), vsr_digest(&b));
        let weights: Vec<ParamId> = a
            .model
            .speaker_ids(&a.store)
            .into_iter()
            .filter(|&id| a.store.entry(id).kind == crate::nn::ParamKind::Weight)
            .collect();
        let (_, fresh) = LipModel::build(&a.model.config, a.config.seed).unwrap();
        assert_eq!(a.store.digest(weights.clone()), fresh.digest(weights));
        assert_ne!(spk, a.speaker_digest(), "running statistics still move");
    }

    #[test]
    fn stage2_freezes_the_speaker_head_and_fits_the_estimators() {
        let (cfg, corpus) = tiny();
        let mut tr = Trainer::new(cfg.clone(), &corpus).unwrap();
        tr.step(&corpus).unwrap();
        tr.enter_stage2().unwrap();
        let spk = tr.speaker_digest();
        let est = tr.store.digest(tr.model.estimator_ids(&tr.store));
        for _ in 0..2 {
            tr.step(&corpus).unwrap();
        }
        assert_eq!(spk, tr.speaker_digest());
        tr.audit_speaker_head().unwrap();
        assert_ne!(est, tr.store.digest(tr.model.estimator_ids(&tr.store)));

        let mut off = Trainer::new(
            TrainConfig {
                ablation: Ablation { mi: false, ..Ablation::default() },
                ..cfg
            },
            &corpus,
        )
        .unwrap();
        off.enter_stage2().unwrap();
        let est = off.store.digest(off.model.estimator_ids(&off.store));
        let (m, _) = off.step(&corpus).unwrap();
        assert!(m.l_min_mi.is_none() && m.l_max_mi.is_none() && m.l_id.is_none());
        assert_eq!(m.loss, m.l_vsr);
        assert_eq!(est, off.store.digest(off.model.estimator_ids(&off.store)));
    }

    #[test]
    fn tampering_with_the_head_fails_the_audit() {
        let (cfg, corpus) = tiny();
        let mut tr = Trainer::new(cfg, &corpus).unwrap();
        tr.enter_stage2().unwrap();
        let id = tr.model.speaker_ids(&tr.store)[0];
        tr.store.get_mut(id).data_mut()[0] += 1.0;
        assert!(tr.audit_speaker_head().is_err());
    }

    #[test]
    fn zero_alpha2_reduces_to_recognition_only() {
        let (cfg, corpus) = tiny();
        let mut a = Trainer::new(TrainConfig { alpha2: 0.0, ..cfg.clone() }, &corpus).unwrap();
        let mut b = Trainer::new(
            TrainConfig {
                ablation: Ablation { mi: false, ..Ablation::default() },
                ..cfg
            },
            &corpus,
        )
        .unwrap();
        a.enter_stage2().unwrap();
        b.enter_stage2().unwrap();
        a.step(&corpus).unwrap();
        b.step(&corpus).unwrap();
        assert_eq!(vsr_digest(&a), vsr_digest(&b));
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let (cfg, corpus) = tiny();
        for stage2 in [false, true] {
            let mut tr = Trainer::new(cfg.clone(), &corpus).unwrap();
            tr.step(&corpus).unwrap();
            if stage2 {
                tr.enter_stage2().unwrap();
                tr.step(&corpus).unwrap();
            }
            let bytes = tr.to_checkpoint().to_bytes();
            let (m1, _) = tr.step(&corpus).unwrap();
            let mut back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            let (m2, _) = back.step(&corpus).unwrap();
            assert_eq!(m1, m2);
            assert_eq!(tr.to_checkpoint().to_bytes(), back.to_checkpoint().to_bytes());
        }
    }

    #[test]
    fn identical_configs_give_identical_checkpoints() {
        let (cfg, corpus) = tiny();
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), &corpus).unwrap();
            tr.step(&corpus).unwrap();
            tr.step(&corpus).unwrap();
            tr.to_checkpoint().to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_counts_stale_epochs() {
        let mut st = TrainState::default();
        for acc in [0.5, 0.6, 0.603, 0.604, 0.62, 0.621] {
            st.observe_dev_accuracy(acc, 0.005);
        }
        assert_eq!(st.best_dev_acc, Some(0.62));
        assert_eq!(st.stale_epochs, 1);
    }

    #[test]
    fn non_finite_terms_abort_with_their_names() {
        let m = StepMetrics {
            step: 7,
            epoch: 0,
            stage: Stage::One,
            lr: 0.0,
            window: 12,
            l_ctc: 1.0,
            l_ce: f64::NAN,
            l_vsr: 1.0,
            l_id: Some(f64::INFINITY),
            l_min_mi: None,
            vclub: None,
            l_max_mi: None,
            loss: 1.0,
            spk_acc: None,
            grad_norm: 0.0,
        };
        let e = check_finite(&m).unwrap_err().to_string();
        assert!(e.contains("step 7") && e.contains("l_ce") && e.contains("l_id"), "{e}");
    }

    #[test]
    fn short_run_writes_its_artefacts() {
        let (cfg, corpus) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(TrainConfig { total_steps: 5, ..cfg }, &corpus).unwrap();
        let report = run_training(&mut tr, &corpus, Some(dir.path())).unwrap();
        assert_eq!(report.total_steps, 5);
        assert_eq!(report.stage1_steps, Some(2));
        for f in ["metrics.jsonl", "epochs.jsonl", "stage1.ckpt", "best.ckpt", "last.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 5);
        assert!(report.epochs.iter().all(|e| e.dev_wer.is_finite()));
    }
}
