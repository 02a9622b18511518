//! Built-in oracle checks: CTC against path enumeration, finite-difference
//! gradients for every layer and a micro model, and the closed forms of the
//! MI estimators.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backend::{ConformerBlock, ConformerConfig};
use crate::corpus::{FrameClip, LandmarkTrack, Sample};
use crate::decoder::{ce_loss, ctc_brute_force, ctc_loss, ctc_loss_batch, DecoderConfig, TeacherBatch, TransformerDecoder};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig, FrontendInput, TubeletEncoder};
use crate::mi::{jsd_estimate, vclub_estimate, ScoreNet, VariationalNet};
use crate::model::{LipModel, ModelConfig};
use crate::nn::{
    causal_mask, Activation, Attention, BatchNorm, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId, ParamKind,
    ParamStore, Session,
};
use crate::rng::stream;
use crate::speaker::{speaker_loss, SpeakerHead};
use crate::tensor::{ConvSpec, PoolSpec, Tensor, Var};
use crate::vocab::Utterance;

pub const CTC_TOLERANCE: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const MI_TOLERANCE: f64 = 1e-9;
pub const GRAD_EPS: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms; central
/// differences cannot resolve them further in double precision.
pub const GRAD_FLOOR: f64 = 1e-6;

const CTC_TAG: u64 = 0x4354_4347;
const GRAD_TAG: u64 = 0x4752_4144;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} (tol {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CtcGridStats {
    pub cases: usize,
    pub infeasible: usize,
    pub max_abs_err: f64,
}

/// Every T in 1..=5, V in 2..=4 and target length 0..=3, `draws` random
/// logit matrices each with a fresh random target. Infeasible targets must
/// be rejected by the forward algorithm and have zero enumerated mass.
pub fn ctc_grid(draws: usize, seed: u64) -> Result<CtcGridStats> {
    let mut stats = CtcGridStats::default();
    for t in 1..=5usize {
        for v in 2..=4usize {
            for len in 0..=3usize {
                let mut rng = stream(seed, &[CTC_TAG, t as u64, v as u64, len as u64]);
                for _ in 0..draws {
                    let logits: Vec<f64> = (0..t * v).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                    let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
                    let brute = ctc_brute_force(&logits, v, &target)?;
                    stats.cases += 1;
                    match ctc_loss(&logits, v, &target) {
                        Ok(l) => stats.max_abs_err = stats.max_abs_err.max((l - brute).abs()),
                        Err(Error::InfeasibleAlignment(_)) if brute == f64::INFINITY => stats.infeasible += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Largest relative error, `|a − n| / max(|a|, |n|, floor)`, between the
/// autodiff gradient of `loss` and five-point central differences, over
/// every coordinate of every trainable parameter the loss touches.
pub fn param_grad_check<F>(store: &ParamStore, loss: F, eps: f64, floor: f64) -> Result<GradReport>
where
    F: Fn(&Session) -> Result<Var>,
{
    let analytic = {
        let s = Session::train(store);
        let l = loss(&s)?;
        let g = s.g.backward(l)?;
        s.param_grads(&g)
    };
    let mut probe = store.clone();
    let mut eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + delta;
        let v = {
            let s = Session::inference(&probe);
            let l = loss(&s)?;
            s.g.value(l).item()
        };
        probe.get_mut(id).data_mut()[i] = orig;
        Ok(v)
    };
    let mut report = GradReport::default();
    for (id, grad) in &analytic {
        for (i, &a) in grad.iter().enumerate() {
            let d1 = eval(*id, i, eps)? - eval(*id, i, -eps)?;
            let d2 = eval(*id, i, 2.0 * eps)? - eval(*id, i, -2.0 * eps)?;
            let n = (8.0 * d1 - d2) / (12.0 * eps);
            let denom = a.abs().max(n.abs()).max(floor);
            let err = (a - n).abs() / denom;
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{i}]", store.entry(*id).name);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

/// A store holding `input` as a trainable tensor so input gradients are
/// checked together with the layer weights.
struct Bench {
    store: ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl Bench {
    fn new(tag: u64) -> Self {
        Bench {
            store: ParamStore::new(),
            rng: stream(0, &[GRAD_TAG, tag]),
        }
    }

    fn builder(&mut self) -> ParamBuilder<'_> {
        ParamBuilder::new(&mut self.store, &mut self.rng)
    }

    fn normal(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = self.normal(shape, 1.0);
        self.store.insert(name, t, ParamKind::Weight)
    }
}

/// Σ w ⊙ y with fixed weights so no output direction is invisible.
fn project(s: &Session, y: Var, w: &Tensor) -> Result<Var> {
    Ok(s.g.sum(s.g.mul(y, s.g.constant(w.clone()))?))
}

fn grad_case(name: &str, bench: &Bench, loss: impl Fn(&Session) -> Result<Var>) -> Result<Check> {
    let r = param_grad_check(&bench.store, loss, GRAD_EPS, GRAD_FLOOR)?;
    Ok(grad_result(name, &r))
}

fn grad_result(name: &str, r: &GradReport) -> Check {
    Check::within(
        name,
        r.max_rel_err,
        GRAD_TOLERANCE,
        format!(
            "{} coordinates, worst {} ({:.3e} vs {:.3e})",
            r.coordinates, r.worst_param, r.analytic, r.numeric
        ),
    )
}

fn micro_frontend() -> FrontendConfig {
    FrontendConfig {
        landmarks: 4,
        patch_size: 8,
        fps_set: vec![8],
        channels: [2, 2, 4],
        temporal_kernel: 3,
        relpos_hidden: 3,
        fusion_layers: 1,
        fusion_heads: 2,
        fusion_ff: 4,
        motion_dim: 3,
        output_dim: 4,
        lip_pairs: vec![(0, 2), (1, 3)],
        ..FrontendConfig::desk()
    }
}

/// Model with T = 3 frames, K = 4 landmarks and every width at most 4.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        frontend: micro_frontend(),
        backend: ConformerConfig {
            blocks: 1,
            model_dim: 4,
            ff_dim: 4,
            heads: 2,
            depthwise_kernel: 3,
        },
        decoder: DecoderConfig {
            layers: 1,
            model_dim: 4,
            ff_dim: 4,
            heads: 2,
        },
        speakers: 2,
        id_dim: 3,
        club_hidden: 3,
        score_hidden: 3,
    }
}

/// Two smooth random clips of 3 frames with 4 landmarks each.
pub fn micro_samples(seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, &[GRAD_TAG, 0x5350]);
    let texts = ["a", "b"];
    (0..2)
        .map(|k| {
            let (t, h, w) = (3, 20, 20);
            let phase: f64 = rng.random::<f64>() * 6.0;
            let data = (0..t * h * w)
                .map(|i| {
                    let (f, y, x) = (i / (h * w), (i / w) % h, i % w);
                    (0.5 + 0.4 * (0.3 * x as f64 + 0.2 * y as f64 + 0.7 * f as f64 + phase).sin()) as f32
                })
                .collect();
            let mut pts = Vec::with_capacity(t * 8);
            for _ in 0..t {
                for (bx, by) in [(6.0, 10.0), (10.0, 8.0), (14.0, 10.0), (10.0, 12.0)] {
                    pts.push(bx + rng.random_range(-1.0f32..1.0));
                    pts.push(by + rng.random_range(-1.0f32..1.0));
                }
            }
            Sample {
                clip: FrameClip::new(t, h, w, data).expect("consistent clip"),
                track: LandmarkTrack::new(t, 4, pts).expect("consistent track"),
                transcript: Utterance::new(texts[k]).expect("vocabulary letters"),
                speaker: k,
            }
        })
        .collect()
}

/// Stage-II objective of the micro model: VSR + α₁·ID + α₂·(vCLUB − JSD)
/// with batch statistics everywhere.
pub fn micro_model_loss(s: &Session, model: &LipModel, samples: &[Sample]) -> Result<Var> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = &model.config.frontend;
    let input = FrontendInput::build(cfg, &refs, cfg.patch_size)?;
    let enc = model.encode(s, &input, true)?;
    let targets: Vec<&[usize]> = samples.iter().map(|x| x.transcript.tokens.as_slice()).collect();
    let l_ctc = ctc_loss_batch(&s.g, model.ctc_logits(s, enc.hlb)?, &targets)?;
    let utts: Vec<&Utterance> = samples.iter().map(|x| &x.transcript).collect();
    let tb = TeacherBatch::new(&utts);
    let dec = model.decoder.forward(s, &tb.inputs, enc.hlb)?;
    let l_ce = ce_loss(s, dec.logits, &tb.targets, &tb.mask)?;
    let l_vsr = s.g.add(s.g.scale(l_ctc, 0.1), s.g.scale(l_ce, 0.9))?;
    let spk = model.speaker.forward(s, enc.h0, true)?;
    let labels: Vec<usize> = samples.iter().map(|x| x.speaker).collect();
    let l_id = speaker_loss(s, spk.logits, &labels)?;
    let h0p = s.g.mean_axis(enc.h0, 1)?;
    let hlbp = s.g.mean_axis(enc.hlb, 1)?;
    let mi = crate::mi::mi_loss(s, &model.club, &model.score, spk.h_id, h0p, hlbp)?;
    let l = s.g.add(l_vsr, s.g.scale(l_id, 0.2))?;
    s.g.add(l, s.g.scale(mi.total, 0.2))
}

/// Finite-difference checks of every layer type and the micro model.
pub fn gradient_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();

    let mut b = Bench::new(1);
    let lin = Linear::new(&mut b.builder().sub("lin"), 3, 4, true);
    let x = b.input("x", &[2, 3, 3]);
    let w = b.normal(&[2, 3, 4], 1.0);
    out.push(grad_case("linear", &b, |s| project(s, lin.forward(s, s.p(x))?, &w))?);

    let mut b = Bench::new(2);
    let ln = LayerNorm::new(&mut b.builder().sub("ln"), 5);
    let x = b.input("x", &[3, 5]);
    let w = b.normal(&[3, 5], 1.0);
    out.push(grad_case("layer_norm", &b, |s| project(s, ln.forward(s, s.p(x))?, &w))?);

    let mut b = Bench::new(3);
    let bn = BatchNorm::new(&mut b.builder().sub("bn"), 3);
    let x = b.input("x", &[2, 3, 2, 2, 1]);
    let w = b.normal(&[2, 3, 2, 2, 1], 1.0);
    out.push(grad_case("batch_norm", &b, |s| project(s, bn.forward(s, s.p(x), true)?, &w))?);

    let mut b = Bench::new(4);
    let ff = FeedForward::new(&mut b.builder().sub("ff"), 3, 5, 3, Activation::Swish);
    let x = b.input("x", &[4, 3]);
    let w = b.normal(&[4, 3], 1.0);
    out.push(grad_case("feed_forward", &b, |s| project(s, ff.forward(s, s.p(x))?, &w))?);

    let mut b = Bench::new(5);
    let att = Attention::new(&mut b.builder().sub("att"), 4, 2)?;
    let q = b.input("q", &[2, 3, 4]);
    let kv = b.input("kv", &[2, 5, 4]);
    let w1 = b.normal(&[2, 3, 4], 1.0);
    let w2 = b.normal(&[2, 3, 4], 1.0);
    out.push(grad_case("attention", &b, |s| {
        let (cross, _) = att.forward(s, s.p(q), s.p(kv), None)?;
        let (selfa, _) = att.forward(s, s.p(q), s.p(q), Some(&causal_mask(3)))?;
        s.g.add(project(s, cross, &w1)?, project(s, selfa, &w2)?)
    })?);

    let mut b = Bench::new(6);
    let x = b.input("x", &[2, 2, 3, 5, 5]);
    let k = b.input("k", &[3, 2, 3, 3, 3]);
    let dw = b.input("dw", &[2, 1, 3, 1, 1]);
    let w1 = b.normal(&[2, 3, 3, 3, 3], 1.0);
    let w2 = b.normal(&[2, 2, 3, 5, 5], 1.0);
    out.push(grad_case("conv3d", &b, |s| {
        let y = s.g.conv3d(s.p(x), s.p(k), ConvSpec::new([1, 2, 2], [1, 1, 1]))?;
        let z = s.g.conv3d(s.p(x), s.p(dw), ConvSpec::new([1, 1, 1], [1, 0, 0]).grouped(2))?;
        s.g.add(project(s, y, &w1)?, project(s, z, &w2)?)
    })?);

    let mut b = Bench::new(7);
    let x = b.input("x", &[1, 2, 2, 5, 5]);
    let w = b.normal(&[1, 2, 2, 3, 3], 1.0);
    let pool = PoolSpec {
        kernel: [1, 3, 3],
        stride: [1, 2, 2],
        padding: [0, 1, 1],
    };
    out.push(grad_case("max_pool3d", &b, |s| project(s, s.g.max_pool3d(s.p(x), pool)?, &w))?);

    let cfg = micro_frontend();
    let mut b = Bench::new(8);
    let tub = TubeletEncoder::new(&mut b.builder().sub("tubelet"), &cfg);
    let x = b.input("x", &[3, 1, 3, 8, 8]);
    let w = b.normal(&[3, 4, 3], 1.0);
    out.push(grad_case("tubelet_encoder", &b, |s| project(s, tub.forward(s, s.p(x), true)?, &w))?);

    let mut b = Bench::new(9);
    let fe = Frontend::new(&mut b.builder().sub("frontend"), &cfg)?;
    let u = b.input("u", &[3, 4, 4]);
    let w = b.normal(&[3, 4], 1.0);
    out.push(grad_case("attentive_fusion", &b, |s| project(s, fe.attentive_fusion(s, s.p(u))?.0, &w))?);

    let samples = micro_samples(1);
    let refs: Vec<&Sample> = samples.iter().collect();
    let input = FrontendInput::build(&cfg, &refs, 8)?;
    let w_rp = b.normal(&[2, 3, 4, 4], 1.0);
    let w_m = b.normal(&[2, 3, 3], 1.0);
    let w_h = b.normal(&[2, 3, 4], 1.0);
    out.push(grad_case("relpos_and_motion", &b, |s| {
        let r = project(s, fe.relpos_encode(s, &input.relpos)?, &w_rp)?;
        let m = project(s, fe.motion_features(s, &input.deltas)?, &w_m)?;
        s.g.add(r, m)
    })?);
    out.push(grad_case("frontend", &b, |s| project(s, fe.forward(s, &input, true)?.h0, &w_h))?);

    let mut b = Bench::new(10);
    let block = ConformerBlock::new(
        &mut b.builder().sub("block"),
        &ConformerConfig {
            blocks: 1,
            model_dim: 4,
            ff_dim: 6,
            heads: 2,
            depthwise_kernel: 3,
        },
    )?;
    let x = b.input("x", &[2, 4, 4]);
    let w = b.normal(&[2, 4, 4], 1.0);
    out.push(grad_case("conformer_block", &b, |s| project(s, block.forward(s, s.p(x), true)?.0, &w))?);

    let mut b = Bench::new(11);
    let dec = TransformerDecoder::new(
        &mut b.builder().sub("decoder"),
        &DecoderConfig {
            layers: 1,
            model_dim: 4,
            ff_dim: 6,
            heads: 2,
        },
    )?;
    let mem = b.input("memory", &[2, 3, 4]);
    let utts = [Utterance::new("ab")?, Utterance::new("c")?];
    let tb = TeacherBatch::new(&utts.iter().collect::<Vec<_>>());
    out.push(grad_case("decoder_ce", &b, |s| {
        let o = dec.forward(s, &tb.inputs, s.p(mem))?;
        ce_loss(s, o.logits, &tb.targets, &tb.mask)
    })?);

    let mut b = Bench::new(12);
    let logits = b.input("logits", &[2, 4, 6]);
    out.push(grad_case("ctc", &b, |s| ctc_loss_batch(&s.g, s.p(logits), &[&[1, 2], &[3, 3]]))?);

    let mut b = Bench::new(13);
    let head = SpeakerHead::new(&mut b.builder().sub("speaker"), 4, 3, 3);
    let h0 = b.input("h0", &[3, 2, 4]);
    out.push(grad_case("speaker_head", &b, |s| {
        let o = head.forward(s, s.p(h0), true)?;
        speaker_loss(s, o.logits, &[0, 2, 1])
    })?);

    let mut b = Bench::new(14);
    let qn = VariationalNet::new(&mut b.builder().sub("club"), 3, 4, 2);
    let f = ScoreNet::new(&mut b.builder().sub("score"), 3, 2, 4);
    let x = b.input("x", &[4, 3]);
    let y = b.input("y", &[4, 2]);
    out.push(grad_case("vclub", &b, |s| vclub_estimate(s, &qn, s.p(x), s.p(y)))?);
    out.push(grad_case("variational_likelihood", &b, |s| qn.log_likelihood(s, s.p(x), s.p(y)))?);
    out.push(grad_case("jsd", &b, |s| jsd_estimate(s, &f, s.p(x), s.p(y)))?);

    let (model, store) = LipModel::build(&micro_model_config(), 21)?;
    let samples = micro_samples(2);
    let r = param_grad_check(&store, |s| micro_model_loss(s, &model, &samples), GRAD_EPS, GRAD_FLOOR)?;
    out.push(grad_result("micro_model", &r));
    Ok(out)
}

/// JSD at a zero critic, vCLUB with an input-blind q, and vCLUB with
/// identical targets.
pub fn mi_closed_forms() -> Result<Vec<Check>> {
    let mut store = ParamStore::new();
    let mut rng = stream(0, &[GRAD_TAG, 0x4d49]);
    let (q, f) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        (
            VariationalNet::new(&mut pb.sub("club"), 3, 6, 2),
            ScoreNet::new(&mut pb.sub("score"), 3, 2, 6),
        )
    };
    let x = Tensor::from_fn(&[6, 3], |_| rng.sample(StandardNormal));
    let y = Tensor::from_fn(&[6, 2], |_| rng.sample(StandardNormal));
    for name in ["score.l3.w", "score.l3.b", "club.mu1.w", "club.lv1.w"] {
        let id = store.id(name).expect("estimator parameter");
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape))?;
    }
    let s = Session::inference(&store);
    let (xv, yv) = (s.g.constant(x), s.g.constant(y));
    let jsd = s.g.value(jsd_estimate(&s, &f, xv, yv)?).item();
    let club = s.g.value(vclub_estimate(&s, &q, xv, yv)?).item();
    Ok(vec![
        Check::within(
            "jsd_zero_critic",
            (jsd + 2.0 * std::f64::consts::LN_2).abs(),
            MI_TOLERANCE,
            format!("estimate {jsd:.12}"),
        ),
        Check::within("vclub_blind_q", club.abs(), MI_TOLERANCE, format!("estimate {club:.3e}")),
    ])
}

/// Everything `selftest` runs.
pub fn run_all() -> Result<Vec<Check>> {
    let stats = ctc_grid(50, 0)?;
    let mut out = vec![Check::within(
        "ctc_grid",
        stats.max_abs_err,
        CTC_TOLERANCE,
        format!("{} cases, {} infeasible", stats.cases, stats.infeasible),
    )];
    out.extend(gradient_checks()?);
    out.extend(mi_closed_forms()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_every_cell() {
        let s = ctc_grid(2, 3).unwrap();
        assert_eq!(s.cases, 5 * 3 * 4 * 2);
        assert!(s.infeasible > 0);
        assert!(s.max_abs_err <= CTC_TOLERANCE);
    }

    #[test]
    fn param_check_sees_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::from_vec(vec![0.5, -1.5]), ParamKind::Weight);
        let good = param_grad_check(&store, |s| Ok(s.g.sum(s.g.square(s.p(id)))), 1e-5, 1e-8).unwrap();
        assert!(good.max_rel_err < 1e-8);
        assert_eq!(good.coordinates, 2);
        // detach hides the dependence from autodiff, not from differencing
        let bad = param_grad_check(
            &store,
            |s| {
                let v = s.p(id);
                s.g.add(s.g.sum(v), s.g.sum(s.g.square(s.g.detach(v))))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.5);
    }

    #[test]
    fn micro_samples_have_feasible_ctc() {
        for s in micro_samples(0) {
            assert!(crate::decoder::min_frames(&s.transcript.tokens) <= s.track.frames());
        }
    }
}
