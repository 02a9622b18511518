//! Landmark-guided visual front-end: tubelets around each lip landmark,
//! relative-position features, attentive fusion across landmarks and
//! inter-frame motion features, combined into one vector per frame.

use serde::{Deserialize, Serialize};

use crate::corpus::{FrameClip, LandmarkTrack, Sample, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::nn::{Activation, Attention, BatchNorm, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{ConvSpec, PoolSpec, Tensor, Var};

/// Outer/inner lip width and height in 68-point numbering.
pub const LIP_PAIRS: [(usize, usize); 4] = [(49, 55), (52, 58), (61, 65), (63, 67)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub landmarks: usize,
    /// Patch resolution fed to the encoder, also the inference window.
    pub patch_size: usize,
    /// Training-time window sizes, resized to `patch_size`.
    pub fps_set: Vec<usize>,
    /// Output channels of the three tubelet convolutions; the last is the
    /// embedding width.
    pub channels: [usize; 3],
    /// Temporal depth of the first convolution (1 gives 2D patches).
    pub temporal_kernel: usize,
    pub relpos_hidden: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_ff: usize,
    pub motion_dim: usize,
    pub output_dim: usize,
    /// Landmark index pairs (0-based within the lip set) measured as distances.
    pub lip_pairs: Vec<(usize, usize)>,
    pub relpos: bool,
    pub motion: bool,
    /// Replace per-landmark patches with one crop around the lip centroid.
    pub mouth_crop: bool,
    pub mouth_window: usize,
}

impl FrontendConfig {
    pub fn reference_scale() -> Self {
        FrontendConfig {
            landmarks: NUM_LANDMARKS,
            patch_size: 24,
            fps_set: vec![20, 22, 24, 26, 28, 30, 32],
            channels: [64, 128, 256],
            temporal_kernel: 5,
            relpos_hidden: 128,
            fusion_layers: 3,
            fusion_heads: 8,
            fusion_ff: 1024,
            motion_dim: 64,
            output_dim: 256,
            lip_pairs: LIP_PAIRS.iter().map(|&(a, b)| (a - 49, b - 49)).collect(),
            relpos: true,
            motion: true,
            mouth_crop: false,
            mouth_window: 64,
        }
    }

    pub fn desk() -> Self {
        FrontendConfig {
            patch_size: 12,
            fps_set: vec![8, 10, 12, 14, 16],
            channels: [4, 8, 16],
            relpos_hidden: 16,
            fusion_layers: 1,
            fusion_heads: 2,
            fusion_ff: 32,
            motion_dim: 16,
            output_dim: 32,
            mouth_window: 48,
            ..Self::reference_scale()
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.channels[2]
    }

    /// Tokens fused per frame.
    pub fn tokens(&self) -> usize {
        if self.mouth_crop {
            1
        } else {
            self.landmarks
        }
    }

    pub fn geometry_dim(&self) -> usize {
        2 * self.landmarks + self.lip_pairs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.landmarks < 2 {
            return bad(format!("need at least 2 landmarks, got {}", self.landmarks));
        }
        if self.patch_size < 8 || !self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size must be even and ≥ 8, got {}", self.patch_size));
        }
        if self.fps_set.is_empty() || self.fps_set.iter().any(|w| *w == 0 || w % 2 != 0) {
            return bad(format!("fps_set must hold positive even sizes, got {:?}", self.fps_set));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel.is_multiple_of(2) {
            return bad(format!("temporal_kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.channels.contains(&0) || self.fusion_heads == 0 {
            return bad("channel and head counts must be positive".into());
        }
        if !self.embed_dim().is_multiple_of(self.fusion_heads) {
            return bad(format!(
                "embedding width {} not divisible by {} heads",
                self.embed_dim(),
                self.fusion_heads
            ));
        }
        if self.lip_pairs.iter().any(|&(a, b)| a >= self.landmarks || b >= self.landmarks) {
            return bad(format!("lip pair out of range for {} landmarks", self.landmarks));
        }
        if self.motion_dim == 0 || self.output_dim == 0 || self.relpos_hidden == 0 {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Pixel value, zero outside the frame.
fn frame_at(clip: &FrameClip, t: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y as usize >= clip.height() || x as usize >= clip.width() {
        0.0
    } else {
        clip.pixel(t, y as usize, x as usize) as f64
    }
}

/// Writes the `w×w` crop centred at `(cx, cy)` of frame `t`, resized to
/// `res×res` with corner-aligned bilinear sampling, into `out`.
fn crop_resized(clip: &FrameClip, t: usize, cx: f64, cy: f64, w: usize, res: usize, out: &mut [f64]) {
    let x0 = cx.round() as isize - (w / 2) as isize;
    let y0 = cy.round() as isize - (w / 2) as isize;
    if w == res {
        for r in 0..w {
            for c in 0..w {
                out[r * w + c] = frame_at(clip, t, y0 + r as isize, x0 + c as isize);
            }
        }
        return;
    }
    let step = if res > 1 { (w - 1) as f64 / (res - 1) as f64 } else { 0.0 };
    for r in 0..res {
        let sy = r as f64 * step;
        let (iy, fy) = (sy.floor() as isize, sy - sy.floor());
        for c in 0..res {
            let sx = c as f64 * step;
            let (ix, fx) = (sx.floor() as isize, sx - sx.floor());
            let p = |dy: isize, dx: isize| frame_at(clip, t, y0 + iy + dy, x0 + ix + dx);
            let top = p(0, 0) * (1.0 - fx) + if fx > 0.0 { p(0, 1) * fx } else { 0.0 };
            let v = if fy > 0.0 {
                let bot = p(1, 0) * (1.0 - fx) + if fx > 0.0 { p(1, 1) * fx } else { 0.0 };
                top * (1.0 - fy) + bot * fy
            } else {
                top
            };
            out[r * res + c] = v;
        }
    }
}

/// Patches of width `w` centred on every landmark, resized to `res`:
/// [T, K, res, res].
pub fn extract_patches(clip: &FrameClip, track: &LandmarkTrack, w: usize, res: usize) -> Result<Tensor> {
    if clip.frames() != track.frames() {
        return Err(Error::dim("clip and track frame counts differ"));
    }
    if w == 0 || w > clip.height().min(clip.width()) {
        return Err(Error::arg(format!("window {w} exceeds the frame")));
    }
    let (t_n, k_n) = (track.frames(), track.landmarks());
    let mut data = vec![0.0; t_n * k_n * res * res];
    for t in 0..t_n {
        for k in 0..k_n {
            let (x, y) = track.point(t, k);
            let o = (t * k_n + k) * res * res;
            crop_resized(clip, t, x, y, w, res, &mut data[o..o + res * res]);
        }
    }
    Tensor::new(&[t_n, k_n, res, res], data)
}

/// Single crop of width `w` at the lip centroid per frame: [T, 1, res, res].
pub fn extract_mouth_crop(clip: &FrameClip, track: &LandmarkTrack, w: usize, res: usize) -> Result<Tensor> {
    let w = w.min(clip.height().min(clip.width()));
    let (t_n, k_n) = (track.frames(), track.landmarks());
    let mut data = vec![0.0; t_n * res * res];
    for t in 0..t_n {
        let (mut sx, mut sy) = (0.0, 0.0);
        for k in 0..k_n {
            let (x, y) = track.point(t, k);
            sx += x;
            sy += y;
        }
        let (cx, cy) = (sx / k_n as f64, sy / k_n as f64);
        crop_resized(clip, t, cx, cy, w, res, &mut data[t * res * res..(t + 1) * res * res]);
    }
    Tensor::new(&[t_n, 1, res, res], data)
}

/// Ordered differences p_i − p_j over j ≠ i (ascending j), divided by the
/// frame width: [T, K, 2(K−1)].
pub fn relpos_inputs(track: &LandmarkTrack, frame_width: usize) -> Tensor {
    let (t_n, k_n) = (track.frames(), track.landmarks());
    let d = 2 * (k_n - 1);
    let norm = 1.0 / frame_width as f64;
    let mut data = Vec::with_capacity(t_n * k_n * d);
    for t in 0..t_n {
        for i in 0..k_n {
            let (xi, yi) = track.point(t, i);
            for j in (0..k_n).filter(|&j| j != i) {
                let (xj, yj) = track.point(t, j);
                data.push((xi - xj) * norm);
                data.push((yi - yj) * norm);
            }
        }
    }
    Tensor::new(&[t_n, k_n, d], data).expect("consistent extents")
}

/// Per-frame geometry: normalised coordinates then the lip-pair distances.
pub fn lip_geometry(track: &LandmarkTrack, pairs: &[(usize, usize)], frame_width: usize) -> Tensor {
    let (t_n, k_n) = (track.frames(), track.landmarks());
    let g = 2 * k_n + pairs.len();
    let norm = 1.0 / frame_width as f64;
    let mut data = Vec::with_capacity(t_n * g);
    for t in 0..t_n {
        for k in 0..k_n {
            let (x, y) = track.point(t, k);
            data.push(x * norm);
            data.push(y * norm);
        }
        for &(a, b) in pairs {
            let (xa, ya) = track.point(t, a);
            let (xb, yb) = track.point(t, b);
            data.push((xa - xb).hypot(ya - yb) * norm);
        }
    }
    Tensor::new(&[t_n, g], data).expect("consistent extents")
}

/// Frame-to-frame geometry differences with the first row zero: [T, G].
pub fn motion_deltas(track: &LandmarkTrack, pairs: &[(usize, usize)], frame_width: usize) -> Tensor {
    let geo = lip_geometry(track, pairs, frame_width);
    let g = geo.shape()[1];
    let d = geo.data();
    let mut out = vec![0.0; d.len()];
    for i in g..d.len() {
        out[i] = d[i] - d[i - g];
    }
    Tensor::new(geo.shape(), out).expect("same shape")
}

/// Host-side inputs for one batch; all samples must share T.
#[derive(Clone, Debug)]
pub struct FrontendInput {
    pub batch: usize,
    pub frames: usize,
    /// [B·tokens, 1, T, P, P] ordered (sample, token).
    pub patches: Tensor,
    /// [B, T, K, 2(K−1)].
    pub relpos: Tensor,
    /// [B, G, T, 1, 1].
    pub deltas: Tensor,
}

impl FrontendInput {
    pub fn build(cfg: &FrontendConfig, samples: &[&Sample], window: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::arg("empty batch"))?;
        let t_n = first.track.frames();
        let (k_n, p, tok) = (cfg.landmarks, cfg.patch_size, cfg.tokens());
        let g_n = cfg.geometry_dim();
        let mut patches = Vec::with_capacity(samples.len() * tok * t_n * p * p);
        let mut relpos = Vec::with_capacity(samples.len() * t_n * k_n * 2 * (k_n - 1));
        let mut deltas = Vec::with_capacity(samples.len() * g_n * t_n);
        for s in samples {
            if s.track.frames() != t_n || s.track.landmarks() != k_n {
                return Err(Error::dim(format!(
                    "batch samples must share {t_n} frames and {k_n} landmarks"
                )));
            }
            let raw = if cfg.mouth_crop {
                extract_mouth_crop(&s.clip, &s.track, cfg.mouth_window, p)?
            } else {
                extract_patches(&s.clip, &s.track, window, p)?
            };
            // [T, tok, P, P] → [tok, T, P, P]
            let pp = p * p;
            for k in 0..tok {
                for t in 0..t_n {
                    let o = (t * tok + k) * pp;
                    patches.extend_from_slice(&raw.data()[o..o + pp]);
                }
            }
            relpos.extend_from_slice(relpos_inputs(&s.track, s.clip.width()).data());
            let dl = motion_deltas(&s.track, &cfg.lip_pairs, s.clip.width());
            for g in 0..g_n {
                for t in 0..t_n {
                    deltas.push(dl.data()[t * g_n + g]);
                }
            }
        }
        let b = samples.len();
        Ok(FrontendInput {
            batch: b,
            frames: t_n,
            patches: Tensor::new(&[b * tok, 1, t_n, p, p], patches)?,
            relpos: Tensor::new(&[b, t_n, k_n, 2 * (k_n - 1)], relpos)?,
            deltas: Tensor::new(&[b, g_n, t_n, 1, 1], deltas)?,
        })
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    bn: BatchNorm,
    spec: ConvSpec,
}

impl ConvBn {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: [usize; 3], spec: ConvSpec) -> Self {
        let fan_in = cin * k[0] * k[1] * k[2];
        ConvBn {
            w: pb.uniform("w", &[cout, cin, k[0], k[1], k[2]], fan_in),
            bn: BatchNorm::new(&mut pb.sub("bn"), cout),
            spec,
        }
    }

    fn forward(&self, s: &Session, x: Var, batch_stats: bool) -> Result<Var> {
        let y = s.g.conv3d(x, s.p(self.w), self.spec)?;
        let y = self.bn.forward(s, y, batch_stats)?;
        Ok(s.g.swish(y))
    }
}

/// 3D patch encoder: conv/BN/Swish, max-pool, two strided per-frame
/// conv/BN/Swish stages, spatial average.
#[derive(Clone, Debug)]
pub struct TubeletEncoder {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    pool: PoolSpec,
}

impl TubeletEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &FrontendConfig) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let d = cfg.temporal_kernel;
        let frame = ConvSpec::new([1, 2, 2], [0, 1, 1]);
        TubeletEncoder {
            conv1: ConvBn::new(&mut pb.sub("conv1"), 1, c1, [d, 3, 3], ConvSpec::new([1, 2, 2], [d / 2, 1, 1])),
            conv2: ConvBn::new(&mut pb.sub("conv2"), c1, c2, [1, 3, 3], frame),
            conv3: ConvBn::new(&mut pb.sub("conv3"), c2, c3, [1, 3, 3], frame),
            pool: PoolSpec {
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                padding: [0, 1, 1],
            },
        }
    }

    /// [N, 1, T, P, P] → [N, C, T].
    pub fn forward(&self, s: &Session, x: Var, batch_stats: bool) -> Result<Var> {
        let y = self.conv1.forward(s, x, batch_stats)?;
        let y = s.g.max_pool3d(y, self.pool)?;
        let y = self.conv2.forward(s, y, batch_stats)?;
        let y = self.conv3.forward(s, y, batch_stats)?;
        let sh = s.g.shape(y);
        let y = s.g.reshape(y, &[sh[0], sh[1], sh[2], sh[3] * sh[4]])?;
        s.g.mean_axis(y, 3)
    }
}

/// Pre-norm self-attention block over the landmark tokens of one frame.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    ln1: LayerNorm,
    att: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl FusionBlock {
    fn new(pb: &mut ParamBuilder, cfg: &FrontendConfig) -> Result<Self> {
        let d = cfg.embed_dim();
        Ok(FusionBlock {
            ln1: LayerNorm::new(&mut pb.sub("ln1"), d),
            att: Attention::new(&mut pb.sub("att"), d, cfg.fusion_heads)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), d),
            ff: FeedForward::new(&mut pb.sub("ff"), d, cfg.fusion_ff, d, Activation::Swish),
        })
    }

    fn forward(&self, s: &Session, z: Var) -> Result<(Var, Var)> {
        let n = self.ln1.forward(s, z)?;
        let (a, probs) = self.att.forward(s, n, n, None)?;
        let y = s.g.add(a, z)?;
        let n = self.ln2.forward(s, y)?;
        Ok((s.g.add(self.ff.forward(s, n)?, y)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct FrontendOutput {
    /// [B, T, output_dim].
    pub h0: Var,
    /// Per fusion layer: [B·T, heads, tokens, tokens].
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub config: FrontendConfig,
    pub tubelet: TubeletEncoder,
    relpos1: Linear,
    relpos2: Linear,
    fusion: Vec<FusionBlock>,
    motion_w: ParamId,
    motion_b: ParamId,
    project: Linear,
}

impl Frontend {
    pub fn new(pb: &mut ParamBuilder, cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let rp_in = 2 * (cfg.landmarks - 1);
        let g = cfg.geometry_dim();
        let fusion = (0..cfg.fusion_layers)
            .map(|l| FusionBlock::new(&mut pb.sub(&format!("fusion{l}")), cfg))
            .collect::<Result<_>>()?;
        let proj_in = d + if cfg.motion { cfg.motion_dim } else { 0 };
        Ok(Frontend {
            config: cfg.clone(),
            tubelet: TubeletEncoder::new(&mut pb.sub("tubelet"), cfg),
            relpos1: Linear::new(&mut pb.sub("relpos1"), rp_in, cfg.relpos_hidden, true),
            relpos2: Linear::new(&mut pb.sub("relpos2"), cfg.relpos_hidden, d, true),
            fusion,
            motion_w: pb.uniform("motion.w", &[cfg.motion_dim, g, 3, 1, 1], 3 * g),
            motion_b: pb.uniform("motion.b", &[1, cfg.motion_dim, 1, 1, 1], 3 * g),
            project: Linear::new(&mut pb.sub("project"), proj_in, cfg.output_dim, true),
        })
    }

    /// Tubelet embeddings v: [B, T, tokens, d].
    pub fn tubelet_encode(&self, s: &Session, input: &FrontendInput, batch_stats: bool) -> Result<Var> {
        let x = s.g.constant(input.patches.clone());
        let y = self.tubelet.forward(s, x, batch_stats)?;
        let (b, t, tok, d) = (input.batch, input.frames, self.config.tokens(), self.config.embed_dim());
        let y = s.g.reshape(y, &[b, tok, d, t])?;
        s.g.permute(y, &[0, 3, 1, 2])
    }

    /// Relative-position vectors r: [B, T, K, d].
    pub fn relpos_encode(&self, s: &Session, relpos: &Tensor) -> Result<Var> {
        let x = s.g.constant(relpos.clone());
        let h = s.g.swish(self.relpos1.forward(s, x)?);
        self.relpos2.forward(s, h)
    }

    /// u: [N, tokens, d] → pooled f: [N, d] and per-layer attention.
    pub fn attentive_fusion(&self, s: &Session, u: Var) -> Result<(Var, Vec<Var>)> {
        let mut z = u;
        let mut attn = Vec::with_capacity(self.fusion.len());
        for block in &self.fusion {
            let (next, p) = block.forward(s, z)?;
            z = next;
            attn.push(p);
        }
        Ok((s.g.mean_axis(z, 1)?, attn))
    }

    /// Motion features m: [B, T, motion_dim].
    pub fn motion_features(&self, s: &Session, deltas: &Tensor) -> Result<Var> {
        let x = s.g.constant(deltas.clone());
        let y = s.g.conv3d(x, s.p(self.motion_w), ConvSpec::new([1, 1, 1], [1, 0, 0]))?;
        let y = s.g.swish(s.g.add(y, s.p(self.motion_b))?);
        let sh = s.g.shape(y);
        let y = s.g.reshape(y, &[sh[0], sh[1], sh[2]])?;
        s.g.permute(y, &[0, 2, 1])
    }

    pub fn forward(&self, s: &Session, input: &FrontendInput, batch_stats: bool) -> Result<FrontendOutput> {
        let cfg = &self.config;
        let (b, t, tok, d) = (input.batch, input.frames, cfg.tokens(), cfg.embed_dim());
        let mut u = self.tubelet_encode(s, input, batch_stats)?;
        if cfg.relpos && !cfg.mouth_crop {
            u = s.g.add(u, self.relpos_encode(s, &input.relpos)?)?;
        }
        let u = s.g.reshape(u, &[b * t, tok, d])?;
        let (f, attention) = self.attentive_fusion(s, u)?;
        let mut h = s.g.reshape(f, &[b, t, d])?;
        if cfg.motion {
            let m = self.motion_features(s, &input.deltas)?;
            h = s.g.concat(&[h, m], 2)?;
        }
        Ok(FrontendOutput {
            h0: self.project.forward(s, h)?,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::stream;

    fn ramp_clip(t: usize, h: usize, w: usize) -> FrameClip {
        let data = (0..t * h * w).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        FrameClip::new(t, h, w, data).unwrap()
    }

    fn track_at(t: usize, pts: &[(f32, f32)]) -> LandmarkTrack {
        let data = (0..t).flat_map(|_| pts.iter().flat_map(|&(x, y)| [x, y])).collect();
        LandmarkTrack::new(t, pts.len(), data).unwrap()
    }

    #[test]
    fn centred_crop_is_central_block() {
        let clip = ramp_clip(1, 96, 96);
        let track = track_at(1, &[(48.0, 48.0)]);
        let p = extract_patches(&clip, &track, 24, 24).unwrap();
        for r in 0..24 {
            for c in 0..24 {
                assert_eq!(p.data()[r * 24 + c], clip.pixel(0, 36 + r, 36 + c) as f64);
            }
        }
    }

    #[test]
    fn corner_crop_is_three_quarters_padding() {
        let clip = FrameClip::constant(1, 96, 96, 1.0);
        let track = track_at(1, &[(0.0, 0.0)]);
        let p = extract_patches(&clip, &track, 24, 24).unwrap();
        let zeros = p.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 24 * 24 * 3 / 4);
    }

    #[test]
    fn resize_preserves_constants() {
        let clip = FrameClip::constant(2, 96, 96, 0.375);
        let track = track_at(2, &[(50.0, 40.0), (30.0, 60.0)]);
        let p = extract_patches(&clip, &track, 32, 24).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.375).abs() < 1e-12));
    }

    #[test]
    fn relpos_order_and_translation() {
        let track = track_at(1, &[(1.0, 2.0), (4.0, 6.0), (0.0, 0.0)]);
        let r = relpos_inputs(&track, 10);
        for (a, b) in r.data()[..4].iter().zip([-0.3, -0.4, 0.1, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        let moved = relpos_inputs(&track.translated(5.0, -3.0), 10);
        assert_eq!(r, moved);
    }

    #[test]
    fn first_delta_is_zero_and_translation_cancels() {
        let track = LandmarkTrack::new(3, 2, vec![0.0, 0.0, 3.0, 4.0, 1.0, 0.0, 3.0, 4.0, 1.0, 1.0, 4.0, 5.0]).unwrap();
        let d = motion_deltas(&track, &[(0, 1)], 1);
        assert!(d.data()[..5].iter().all(|&v| v == 0.0));
        assert_eq!(&d.data()[5..9], &[1.0, 0.0, 0.0, 0.0]);
        let moved = motion_deltas(&track.translated(2.0, 2.0), &[(0, 1)], 1);
        assert_eq!(d, moved);
    }

    fn micro() -> FrontendConfig {
        FrontendConfig {
            landmarks: 4,
            patch_size: 8,
            fps_set: vec![8],
            channels: [2, 2, 4],
            temporal_kernel: 3,
            relpos_hidden: 4,
            fusion_layers: 1,
            fusion_heads: 2,
            fusion_ff: 4,
            motion_dim: 3,
            output_dim: 5,
            lip_pairs: vec![(0, 2), (1, 3)],
            ..FrontendConfig::desk()
        }
    }

    #[test]
    fn output_shape_and_stochastic_attention() {
        let cfg = micro();
        let mut store = ParamStore::new();
        let mut rng = stream(4, &[]);
        let fe = Frontend::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let sample = Sample {
            clip: ramp_clip(3, 24, 24),
            track: track_at(3, &[(8.0, 8.0), (12.0, 9.0), (16.0, 8.0), (12.0, 14.0)]),
            transcript: crate::vocab::Utterance::new("a").unwrap(),
            speaker: 0,
        };
        let input = FrontendInput::build(&cfg, &[&sample, &sample], 8).unwrap();
        let s = Session::train(&store);
        let out = fe.forward(&s, &input, true).unwrap();
        assert_eq!(s.g.shape(out.h0), vec![2, 3, 5]);
        let p = s.g.value(out.attention[0]);
        assert_eq!(p.shape(), &[6, 2, 4, 4]);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_clip_gives_zero_tubelets() {
        let cfg = micro();
        let mut store = ParamStore::new();
        let mut rng = stream(5, &[]);
        let fe = Frontend::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let sample = Sample {
            clip: FrameClip::constant(4, 24, 24, 0.0),
            track: track_at(4, &[(8.0, 8.0), (12.0, 9.0), (16.0, 8.0), (12.0, 14.0)]),
            transcript: crate::vocab::Utterance::new("a").unwrap(),
            speaker: 0,
        };
        let input = FrontendInput::build(&cfg, &[&sample], 8).unwrap();
        let s = Session::train(&store);
        let v = fe.tubelet_encode(&s, &input, true).unwrap();
        assert_eq!(s.g.shape(v), vec![1, 4, 4, 4]);
        assert!(s.g.value(v).data().iter().all(|&x| x == 0.0));
    }
}
