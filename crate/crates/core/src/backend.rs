//! Conformer encoder over the front-end feature sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Activation, Attention, BatchNorm, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{ConvSpec, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformerConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub depthwise_kernel: usize,
}

impl ConformerConfig {
    pub fn reference_scale() -> Self {
        ConformerConfig {
            blocks: 3,
            model_dim: 256,
            ff_dim: 1024,
            heads: 8,
            depthwise_kernel: 31,
        }
    }

    pub fn desk() -> Self {
        ConformerConfig {
            blocks: 1,
            model_dim: 32,
            ff_dim: 64,
            heads: 4,
            depthwise_kernel: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.depthwise_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise_kernel must be odd, got {}",
                self.depthwise_kernel
            )));
        }
        Ok(())
    }
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Pointwise → GLU → depthwise → BN → Swish → pointwise.
#[derive(Clone, Debug)]
struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw: ParamId,
    bn: BatchNorm,
    pw2: Linear,
    kernel: usize,
}

impl ConvModule {
    fn new(pb: &mut ParamBuilder, d: usize, kernel: usize) -> Self {
        ConvModule {
            ln: LayerNorm::new(&mut pb.sub("ln"), d),
            pw1: Linear::new(&mut pb.sub("pw1"), d, 2 * d, true),
            dw: pb.uniform("dw", &[d, 1, kernel, 1, 1], kernel),
            bn: BatchNorm::new(&mut pb.sub("bn"), d),
            pw2: Linear::new(&mut pb.sub("pw2"), d, d, true),
            kernel,
        }
    }

    fn forward(&self, s: &Session, x: Var, batch_stats: bool) -> Result<Var> {
        let sh = s.g.shape(x);
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let h = self.pw1.forward(s, self.ln.forward(s, x)?)?;
        let a = s.g.slice(h, 2, 0, d)?;
        let gate = s.g.sigmoid(s.g.slice(h, 2, d, d)?);
        let h = s.g.mul(a, gate)?;
        let h = s.g.permute(h, &[0, 2, 1])?;
        let h = s.g.reshape(h, &[b, d, t, 1, 1])?;
        let spec = ConvSpec::new([1, 1, 1], [self.kernel / 2, 0, 0]).grouped(d);
        let h = s.g.conv3d(h, s.p(self.dw), spec)?;
        let h = s.g.swish(self.bn.forward(s, h, batch_stats)?);
        let h = s.g.reshape(h, &[b, d, t])?;
        let h = s.g.permute(h, &[0, 2, 1])?;
        self.pw2.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ff1_ln: LayerNorm,
    ff1: FeedForward,
    att_ln: LayerNorm,
    att: Attention,
    conv: ConvModule,
    ff2_ln: LayerNorm,
    ff2: FeedForward,
    out_ln: LayerNorm,
}

impl ConformerBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(ConformerBlock {
            ff1_ln: LayerNorm::new(&mut pb.sub("ff1_ln"), d),
            ff1: FeedForward::new(&mut pb.sub("ff1"), d, cfg.ff_dim, d, Activation::Swish),
            att_ln: LayerNorm::new(&mut pb.sub("att_ln"), d),
            att: Attention::new(&mut pb.sub("att"), d, cfg.heads)?,
            conv: ConvModule::new(&mut pb.sub("conv"), d, cfg.depthwise_kernel),
            ff2_ln: LayerNorm::new(&mut pb.sub("ff2_ln"), d),
            ff2: FeedForward::new(&mut pb.sub("ff2"), d, cfg.ff_dim, d, Activation::Swish),
            out_ln: LayerNorm::new(&mut pb.sub("out_ln"), d),
        })
    }

    /// [B, T, d] → ([B, T, d], attention [B, heads, T, T]).
    pub fn forward(&self, s: &Session, x: Var, batch_stats: bool) -> Result<(Var, Var)> {
        let half = |ln: &LayerNorm, ff: &FeedForward, x: Var| -> Result<Var> {
            let y = ff.forward(s, ln.forward(s, x)?)?;
            s.g.add(x, s.g.scale(y, 0.5))
        };
        let x = half(&self.ff1_ln, &self.ff1, x)?;
        let n = self.att_ln.forward(s, x)?;
        let (a, probs) = self.att.forward(s, n, n, None)?;
        let x = s.g.add(x, a)?;
        let x = s.g.add(x, self.conv.forward(s, x, batch_stats)?)?;
        let x = half(&self.ff2_ln, &self.ff2, x)?;
        Ok((self.out_ln.forward(s, x)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct BackendOutput {
    pub hlb: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Conformer {
    pub config: ConformerConfig,
    blocks: Vec<ConformerBlock>,
}

impl Conformer {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|l| ConformerBlock::new(&mut pb.sub(&format!("block{l}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Conformer {
            config: cfg.clone(),
            blocks,
        })
    }

    /// Adds the sinusoidal position table and runs every block. With no
    /// blocks the input is returned untouched.
    pub fn forward(&self, s: &Session, h0: Var, batch_stats: bool) -> Result<BackendOutput> {
        let sh = s.g.shape(h0);
        if sh.len() != 3 || sh[2] != self.config.model_dim {
            return Err(Error::dim(format!(
                "conformer expects [B, T, {}], got {sh:?}",
                self.config.model_dim
            )));
        }
        if self.blocks.is_empty() {
            return Ok(BackendOutput {
                hlb: h0,
                attention: Vec::new(),
            });
        }
        let pe = s.g.constant(sinusoidal(sh[1], sh[2]));
        let mut x = s.g.add(h0, pe)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, p) = block.forward(s, x, batch_stats)?;
            x = y;
            attention.push(p);
        }
        Ok(BackendOutput { hlb: x, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn build(blocks: usize) -> (ParamStore, Conformer) {
        let cfg = ConformerConfig {
            blocks,
            model_dim: 8,
            ff_dim: 12,
            heads: 2,
            depthwise_kernel: 3,
        };
        let mut store = ParamStore::new();
        let mut rng = stream(6, &[]);
        let c = Conformer::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        (store, c)
    }

    fn input(t: usize, bump: f64) -> Tensor {
        let mut x = Tensor::from_fn(&[2, t, 8], |i| ((i * 31 % 17) as f64 - 8.0) / 5.0);
        let n = x.numel();
        x.data_mut()[n - 1] += bump;
        x
    }

    #[test]
    fn shape_preserved_and_rows_stochastic() {
        let (store, c) = build(2);
        let s = Session::train(&store);
        let out = c.forward(&s, s.g.constant(input(5, 0.0)), true).unwrap();
        assert_eq!(s.g.shape(out.hlb), vec![2, 5, 8]);
        for p in &out.attention {
            for row in s.g.value(*p).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_blocks_is_identity_and_width_checked() {
        let (store, c) = build(0);
        let s = Session::train(&store);
        let x = s.g.constant(input(4, 0.0));
        assert_eq!(c.forward(&s, x, true).unwrap().hlb, x);
        let bad = s.g.constant(Tensor::zeros(&[1, 4, 6]));
        assert!(matches!(c.forward(&s, bad, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_frame_is_valid() {
        let (store, c) = build(1);
        let s = Session::train(&store);
        let x = s.g.constant(Tensor::from_fn(&[3, 1, 8], |i| i as f64 * 0.1));
        let out = c.forward(&s, x, true).unwrap();
        assert!(s.g.value(out.hlb).is_finite());
    }

    #[test]
    fn encoder_is_bidirectional() {
        let (store, c) = build(1);
        let run = |bump| {
            let s = Session::inference(&store);
            let out = c.forward(&s, s.g.constant(input(6, bump)), false).unwrap();
            s.g.value(out.hlb).data()[48..56].to_vec()
        };
        assert_ne!(run(0.0), run(1.0));
    }
}
