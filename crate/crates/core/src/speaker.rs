//! Speaker-identification branch, used during training only.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct SpeakerHead {
    bn: BatchNorm,
    fc: Linear,
    classifier: Linear,
    pub id_dim: usize,
    pub speakers: usize,
}

#[derive(Clone, Debug)]
pub struct SpeakerOutput {
    /// Identity features [B, id_dim].
    pub h_id: Var,
    /// Class scores [B, C].
    pub logits: Var,
}

impl SpeakerHead {
    pub fn new(pb: &mut ParamBuilder, input_dim: usize, id_dim: usize, speakers: usize) -> Self {
        SpeakerHead {
            bn: BatchNorm::new(&mut pb.sub("bn"), input_dim),
            fc: Linear::new(&mut pb.sub("fc"), input_dim, id_dim, true),
            classifier: Linear::new(&mut pb.sub("classifier"), id_dim, speakers, true),
            id_dim,
            speakers,
        }
    }

    /// Time-pooled H0 [B, T, D] → BN → ReLU → FC → h_id, then the classifier.
    pub fn forward(&self, s: &Session, h0: Var, batch_stats: bool) -> Result<SpeakerOutput> {
        let pooled = s.g.mean_axis(h0, 1)?;
        let x = s.g.relu(self.bn.forward(s, pooled, batch_stats)?);
        let h_id = self.fc.forward(s, x)?;
        Ok(SpeakerOutput {
            h_id,
            logits: self.classifier.forward(s, h_id)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.bn.gamma,
            self.bn.beta,
            self.bn.running_mean,
            self.bn.running_var,
            self.fc.w,
            self.classifier.w,
        ];
        ids.extend(self.fc.b);
        ids.extend(self.classifier.b);
        ids.sort();
        ids
    }
}

/// Mean −log p(true speaker) over the batch.
pub fn speaker_loss(s: &Session, logits: Var, speakers: &[usize]) -> Result<Var> {
    let c = *s.g.shape(logits).last().expect("rank ≥ 1");
    if let Some(&bad) = speakers.iter().find(|&&id| id >= c) {
        return Err(Error::arg(format!("speaker id {bad} outside {c} classes")));
    }
    let lp = s.g.log_softmax(logits);
    let picked = s.g.pick(lp, speakers)?;
    Ok(s.g.scale(s.g.mean(picked), -1.0))
}

/// −log p_c from a probability vector.
pub fn speaker_loss_value(probs: &[f64], speaker: usize) -> Result<f64> {
    probs
        .get(speaker)
        .map(|p| -p.ln())
        .ok_or_else(|| Error::arg(format!("speaker id {speaker} outside {} classes", probs.len())))
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn head() -> (ParamStore, SpeakerHead) {
        let mut store = ParamStore::new();
        let mut rng = stream(8, &[]);
        let h = SpeakerHead::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 4, 8);
        (store, h)
    }

    #[test]
    fn probabilities_and_frame_permutation() {
        let (store, h) = head();
        let x = Tensor::from_fn(&[3, 5, 6], |i| ((i * 17 % 11) as f64 - 5.0) * 0.3);
        let mut perm = x.clone();
        for b in 0..3 {
            for t in 0..5 {
                let src = &x.data()[(b * 5 + (4 - t)) * 6..(b * 5 + 5 - t) * 6];
                perm.data_mut()[(b * 5 + t) * 6..(b * 5 + t + 1) * 6].copy_from_slice(src);
            }
        }
        let run = |x: &Tensor| {
            let s = Session::train(&store);
            let out = h.forward(&s, s.g.constant(x.clone()), true).unwrap();
            let p = s.g.value(s.g.softmax(out.logits));
            for row in p.data().chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            p.data().to_vec()
        };
        let (a, b) = (run(&x), run(&perm));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let store = ParamStore::new();
        let s = Session::inference(&store);
        let uniform = s.g.constant(Tensor::zeros(&[2, 8]));
        let l = speaker_loss(&s, uniform, &[3, 7]).unwrap();
        assert!((s.g.value(l).item() - 8f64.ln()).abs() < 1e-12);
        assert!(speaker_loss(&s, uniform, &[8, 0]).is_err());
        assert_eq!(speaker_loss_value(&[0.0, 1.0], 1).unwrap(), 0.0);
        let p = [0.1f64, 0.6, 0.3];
        let sum_form: f64 = p.iter().enumerate().map(|(c, q)| -(if c == 2 { 1.0 } else { 0.0 }) * q.ln()).sum();
        assert!((speaker_loss_value(&p, 2).unwrap() - sum_form).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_argmax() {
        assert_eq!(accuracy(&[0.1, 0.9, 0.8, 0.2], 2, &[1, 1]), 0.5);
    }
}
