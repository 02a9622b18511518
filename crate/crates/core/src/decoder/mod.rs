//! Hybrid CTC/attention output head: CTC on encoder frames, an
//! autoregressive transformer decoder with cross-attention, and beam search.

pub mod ctc;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use ctc::{ctc_brute_force, ctc_loss, ctc_loss_batch, ctc_loss_with_grad, min_frames};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal, Activation, Attention, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::vocab::{Utterance, BLANK, EOS, SOS, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn reference_scale() -> Self {
        DecoderConfig {
            layers: 3,
            model_dim: 256,
            ff_dim: 1024,
            heads: 8,
        }
    }

    pub fn desk() -> Self {
        DecoderConfig {
            layers: 1,
            model_dim: 32,
            ff_dim: 64,
            heads: 4,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Post-norm block: masked self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
struct DecoderBlock {
    self_att: Attention,
    ln1: LayerNorm,
    cross_att: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

impl DecoderBlock {
    fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(DecoderBlock {
            self_att: Attention::new(&mut pb.sub("self_att"), d, cfg.heads)?,
            ln1: LayerNorm::new(&mut pb.sub("ln1"), d),
            cross_att: Attention::new(&mut pb.sub("cross_att"), d, cfg.heads)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), d),
            ff: FeedForward::new(&mut pb.sub("ff"), d, cfg.ff_dim, d, Activation::Relu),
            ln3: LayerNorm::new(&mut pb.sub("ln3"), d),
        })
    }

    fn forward(&self, s: &Session, x: Var, memory: Var, mask: &Tensor) -> Result<(Var, Var)> {
        let (a, _) = self.self_att.forward(s, x, x, Some(mask))?;
        let x = self.ln1.forward(s, s.g.add(x, a)?)?;
        let (c, cross) = self.cross_att.forward(s, x, memory, None)?;
        let x = self.ln2.forward(s, s.g.add(x, c)?)?;
        let f = self.ff.forward(s, x)?;
        Ok((self.ln3.forward(s, s.g.add(x, f)?)?, cross))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// [B, N, V].
    pub logits: Var,
    /// Per layer: [B, heads, N, T].
    pub cross_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub config: DecoderConfig,
    embed: ParamId,
    blocks: Vec<DecoderBlock>,
    out: Linear,
}

impl TransformerDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| DecoderBlock::new(&mut pb.sub(&format!("block{l}")), cfg))
            .collect::<Result<_>>()?;
        Ok(TransformerDecoder {
            config: cfg.clone(),
            embed: pb.uniform("embed", &[VOCAB_SIZE, cfg.model_dim], cfg.model_dim),
            blocks,
            out: Linear::new(&mut pb.sub("out"), cfg.model_dim, VOCAB_SIZE, true),
        })
    }

    /// `prefixes`: B sequences of equal length N, each starting with sos;
    /// `memory`: [B, T, d].
    pub fn forward(&self, s: &Session, prefixes: &[Vec<usize>], memory: Var) -> Result<DecoderOutput> {
        let b = prefixes.len();
        let n = prefixes.first().map_or(0, Vec::len);
        if n == 0 || prefixes.iter().any(|p| p.len() != n || p[0] != SOS) {
            return Err(Error::arg("decoder prefixes must be non-empty, equal-length and start with sos"));
        }
        let d = self.config.model_dim;
        let ms = s.g.shape(memory);
        if ms.len() != 3 || ms[0] != b || ms[2] != d {
            return Err(Error::dim(format!("decoder memory must be [{b}, T, {d}], got {ms:?}")));
        }
        let idx: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let e = s.g.gather_rows(s.p(self.embed), &idx)?;
        let e = s.g.reshape(e, &[b, n, d])?;
        let mut x = s.g.add(e, s.g.constant(sinusoidal(n, d)))?;
        let mask = causal_mask(n);
        let mut cross_attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(s, x, memory, &mask)?;
            x = y;
            cross_attention.push(c);
        }
        Ok(DecoderOutput {
            logits: self.out.forward(s, x)?,
            cross_attention,
        })
    }
}

/// Teacher-forcing batch: padded decoder inputs plus targets and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

impl TeacherBatch {
    pub fn new(utterances: &[&Utterance]) -> Self {
        let n = utterances.iter().map(|u| u.len() + 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(utterances.len());
        let mut targets = Vec::with_capacity(utterances.len() * n);
        let mut mask = Vec::with_capacity(utterances.len() * n);
        for u in utterances {
            let mut inp = u.decoder_input();
            let mut tgt = u.decoder_target();
            let real = tgt.len();
            inp.resize(n, EOS);
            tgt.resize(n, EOS);
            mask.extend((0..n).map(|i| if i < real { 1.0 } else { 0.0 }));
            inputs.push(inp);
            targets.extend(tgt);
        }
        TeacherBatch { inputs, targets, mask }
    }
}

/// Mean token-level cross-entropy over positions with a non-zero mask.
pub fn ce_loss(s: &Session, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    let rows = s.g.value(logits).numel() / VOCAB_SIZE;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "cross-entropy over {rows} positions got {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count: f64 = mask.iter().sum();
    if count <= 0.0 {
        return Err(Error::arg("cross-entropy mask selects no positions"));
    }
    let lp = s.g.log_softmax(logits);
    let picked = s.g.pick(lp, targets)?;
    let masked = s.g.mul(picked, s.g.constant(Tensor::from_vec(mask.to_vec())))?;
    Ok(s.g.scale(s.g.sum(masked), -1.0 / count))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// λ·CTC + (1−λ)·CE.
pub fn vsr_loss(l_ctc: f64, l_ce: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_ctc + (1.0 - lambda) * l_ce)
}

pub fn vsr_loss_var(s: &Session, l_ctc: Var, l_ce: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    s.g.add(s.g.scale(l_ctc, lambda), s.g.scale(l_ce, 1.0 - lambda))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, excluding sos, including eos when it was produced.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob` divided by the number of emitted tokens.
    pub score: f64,
}

impl Hypothesis {
    pub fn utterance(&self) -> Utterance {
        Utterance::from_tokens(&self.tokens)
    }
}

/// Length-normalised beam search over one encoder output `memory` [T, d].
/// Each step expands every live hypothesis with every token except blank and
/// sos and keeps the `width` best by total log-probability; ties go to the
/// earlier hypothesis, then the lower token index. Hypotheses ending in eos
/// leave the beam; live ones are closed at `max_len`.
pub fn beam_search(
    dec: &TransformerDecoder,
    store: &ParamStore,
    memory: &Tensor,
    width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::arg("beam width must be at least 1"));
    }
    let ms = memory.shape();
    if ms.len() != 2 {
        return Err(Error::dim(format!("beam search memory must be [T, d], got {ms:?}")));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    let finish = |tokens: &[usize], lp: f64| {
        let len = (tokens.len() - 1).max(1);
        Hypothesis {
            tokens: tokens[1..].to_vec(),
            log_prob: lp,
            score: lp / len as f64,
        }
    };
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let s = Session::inference(store);
        let b = live.len();
        let mut rep = Vec::with_capacity(b * memory.numel());
        for _ in 0..b {
            rep.extend_from_slice(memory.data());
        }
        let mem = s.g.constant(Tensor::new(&[b, ms[0], ms[1]], rep)?);
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(t, _)| t.clone()).collect();
        let out = dec.forward(&s, &prefixes, mem)?;
        let lp = s.g.value(s.g.log_softmax(out.logits));
        let n = prefixes[0].len();
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(b * VOCAB_SIZE);
        for (r, (_, base)) in live.iter().enumerate() {
            let row = &lp.data()[(r * n + n - 1) * VOCAB_SIZE..(r * n + n) * VOCAB_SIZE];
            for (k, &l) in row.iter().enumerate() {
                if k != BLANK && k != SOS {
                    cands.push((base + l, r, k));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, r, k) in cands.iter().take(width) {
            let mut tokens = live[r].0.clone();
            tokens.push(k);
            if k == EOS {
                done.push(finish(&tokens, score));
            } else {
                next.push((tokens, score));
            }
        }
        live = next;
    }
    done.extend(live.iter().map(|(t, lp)| finish(t, *lp)));
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::arg("max_len 0 yields no hypothesis"))
}

/// Argmax decoding, equivalent to a beam of width one.
pub fn greedy_decode(
    dec: &TransformerDecoder,
    store: &ParamStore,
    memory: &Tensor,
    max_len: usize,
) -> Result<Hypothesis> {
    let ms = memory.shape();
    let mut tokens = vec![SOS];
    let mut lp_total = 0.0;
    for _ in 0..max_len {
        let s = Session::inference(store);
        let mem = s.g.constant(memory.clone().reshape(&[1, ms[0], ms[1]])?);
        let out = dec.forward(&s, std::slice::from_ref(&tokens), mem)?;
        let lp = s.g.value(s.g.log_softmax(out.logits));
        let row = &lp.data()[(tokens.len() - 1) * VOCAB_SIZE..tokens.len() * VOCAB_SIZE];
        let (k, l) = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != BLANK && *k != SOS)
            .fold((0, f64::NEG_INFINITY), |acc, (k, &l)| if l > acc.1 { (k, l) } else { acc });
        tokens.push(k);
        lp_total += l;
        if k == EOS {
            break;
        }
    }
    let len = (tokens.len() - 1).max(1);
    Ok(Hypothesis {
        tokens: tokens[1..].to_vec(),
        log_prob: lp_total,
        score: lp_total / len as f64,
    })
}
