//! Parameterised layers shared by every network in the model.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

use super::params::{BnObservation, ParamBuilder, ParamId, Session};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

impl Activation {
    pub fn apply(self, s: &Session, x: Var) -> Var {
        match self {
            Activation::Swish => s.g.swish(x),
            Activation::Relu => s.g.relu(x),
        }
    }
}

/// Affine map over the last axis; weight stored as [din, dout].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, din: usize, dout: usize, bias: bool) -> Self {
        let w = pb.uniform("w", &[din, dout], din);
        let b = bias.then(|| pb.uniform("b", &[dout], din));
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let shape = s.g.shape(x);
        if shape.last() != Some(&self.din) {
            return Err(Error::dim(format!(
                "linear expects last axis {}, got {shape:?}",
                self.din
            )));
        }
        let rows = shape.iter().product::<usize>() / self.din;
        let flat = s.g.reshape(x, &[rows, self.din])?;
        let mut y = s.g.matmul(flat, s.p(self.w))?;
        if let Some(b) = self.b {
            y = s.g.add(y, s.p(b))?;
        }
        let mut out = shape;
        *out.last_mut().expect("rank ≥ 1") = self.dout;
        s.g.reshape(y, &out)
    }
}

/// Last-axis layer normalisation with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, d: usize) -> Self {
        LayerNorm {
            gamma: pb.constant("gamma", &[d], 1.0),
            beta: pb.constant("beta", &[d], 0.0),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let y = s.g.layer_norm(x, NORM_EPS)?;
        let y = s.g.mul(y, s.p(self.gamma))?;
        s.g.add(y, s.p(self.beta))
    }
}

/// Channel normalisation over axis 1 of [N, C, ...].
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        BatchNorm {
            gamma: pb.constant("gamma", &[channels], 1.0),
            beta: pb.constant("beta", &[channels], 0.0),
            running_mean: pb.buffer("running_mean", &[channels], 0.0),
            running_var: pb.buffer("running_var", &[channels], 1.0),
            channels,
        }
    }

    /// `batch_stats` selects per-batch statistics (recorded for the running
    /// averages) over the stored running ones.
    pub fn forward(&self, s: &Session, x: Var, batch_stats: bool) -> Result<Var> {
        let shape = s.g.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "batch norm expects [N, {}, ...], got {shape:?}",
                self.channels
            )));
        }
        let mut bshape = vec![1; shape.len()];
        bshape[1] = self.channels;
        let normed = if batch_stats {
            let (y, mean, var) = s.g.batch_norm(x, NORM_EPS)?;
            s.observe_bn(BnObservation {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
                count: shape.iter().product::<usize>() / self.channels,
            });
            y
        } else {
            let store = s.store();
            let mean = store.get(self.running_mean).data();
            let var = store.get(self.running_var).data();
            let shift: Vec<f64> = mean.iter().map(|m| -m).collect();
            let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift = s.g.constant(Tensor::new(&bshape, shift)?);
            let scale = s.g.constant(Tensor::new(&bshape, scale)?);
            s.g.mul(s.g.add(x, shift)?, scale)?
        };
        let gamma = s.g.reshape(s.p(self.gamma), &bshape)?;
        let beta = s.g.reshape(s.p(self.beta), &bshape)?;
        s.g.add(s.g.mul(normed, gamma)?, beta)
    }
}

/// Two affine maps with an activation in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, d: usize, hidden: usize, dout: usize, act: Activation) -> Self {
        FeedForward {
            l1: Linear::new(&mut pb.sub("l1"), d, hidden, true),
            l2: Linear::new(&mut pb.sub("l2"), hidden, dout, true),
            act,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = self.act.apply(s, h);
        self.l2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Upper-triangular additive mask hiding future positions.
pub fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { MASKED } else { 0.0 })
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(&mut pb.sub("q"), d, d, true),
            k: Linear::new(&mut pb.sub("k"), d, d, true),
            v: Linear::new(&mut pb.sub("v"), d, d, true),
            o: Linear::new(&mut pb.sub("o"), d, d, true),
            heads,
            d,
        })
    }

    fn split_heads(&self, s: &Session, x: Var) -> Result<Var> {
        let sh = s.g.shape(x);
        let (b, n) = (sh[0], sh[1]);
        let x = s.g.reshape(x, &[b, n, self.heads, self.d / self.heads])?;
        s.g.permute(x, &[0, 2, 1, 3])
    }

    /// `xq`: [B, Nq, d], `xkv`: [B, Nk, d]; `mask` is additive [Nq, Nk].
    /// Returns the output [B, Nq, d] and the weights [B, heads, Nq, Nk].
    pub fn forward(
        &self,
        s: &Session,
        xq: Var,
        xkv: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let qs = s.g.shape(xq);
        if qs.len() != 3 || s.g.shape(xkv).len() != 3 {
            return Err(Error::dim("attention expects [B, N, d] inputs"));
        }
        let (b, nq) = (qs[0], qs[1]);
        let q = self.split_heads(s, self.q.forward(s, xq)?)?;
        let k = self.split_heads(s, self.k.forward(s, xkv)?)?;
        let v = self.split_heads(s, self.v.forward(s, xkv)?)?;
        let dh = (self.d / self.heads) as f64;
        let mut scores = s.g.scale(s.g.matmul_t(q, k, false, true)?, 1.0 / dh.sqrt());
        if let Some(m) = mask {
            scores = s.g.add(scores, s.g.constant(m.clone()))?;
        }
        let probs = s.g.softmax(scores);
        let ctx = s.g.matmul(probs, v)?;
        let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.g.reshape(ctx, &[b, nq, self.d])?;
        Ok((self.o.forward(s, ctx)?, probs))
    }
}

/// Fixed sinusoidal position table [n, d].
pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{apply_bn_observations, ParamStore};
    use crate::rng::stream;

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, &[]);
        let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 1, true);
        store.set(lin.w, Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        store.set(lin.b.unwrap(), Tensor::scalar(0.5)).unwrap();
        let s = Session::inference(&store);
        let x = s.g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 3.0, 4.0]).unwrap());
        let y = lin.forward(&s, x).unwrap();
        assert_eq!(s.g.value(y).data(), &[3.5, 11.5]);
        assert_eq!(s.g.shape(y), vec![1, 2, 1]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, &[]);
        let att = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2).unwrap();
        let s = Session::inference(&store);
        let x = s.g.constant(Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.37).sin()));
        let (_, p) = att.forward(&s, x, x, Some(&causal_mask(5))).unwrap();
        let p = s.g.value(p);
        for (r, row) in p.data().chunks(5).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let qi = r % 5;
            assert!(row[qi + 1..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn batch_norm_modes_and_running_update() {
        let mut store = ParamStore::new();
        let mut rng = stream(3, &[]);
        let bn = BatchNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 1);
        let s = Session::train(&store);
        let x = s.g.constant(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = bn.forward(&s, x, true).unwrap();
        let m = s.g.value(y).data().iter().sum::<f64>();
        assert!(m.abs() < 1e-12);
        let obs = s.take_bn_observations();
        drop(s);
        apply_bn_observations(&mut store, &obs, BN_MOMENTUM);
        assert!((store.get(bn.running_mean).data()[0] - 0.3).abs() < 1e-12);
        // population var 3.5, unbiased 14/3
        let want = 0.9 + 0.1 * 14.0 / 3.0;
        assert!((store.get(bn.running_var).data()[0] - want).abs() < 1e-12);
        let s = Session::inference(&store);
        let x = s.g.constant(Tensor::new(&[1, 1, 1], vec![0.3]).unwrap());
        let y = bn.forward(&s, x, false).unwrap();
        assert!(s.g.value(y).data()[0].abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_first_row() {
        let t = sinusoidal(3, 4);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.data()[4] - 1f64.sin()).abs() < 1e-15);
    }
}
