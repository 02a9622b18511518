//! Export of the landmark self-attention maps of the fusion blocks.

use std::fmt::Write as _;

use crate::corpus::{Sample, FIRST_LIP_INDEX};
use crate::error::{Error, Result};
use crate::frontend::FrontendInput;
use crate::model::LipModel;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

/// Fusion attention of one sample, one tensor [T, heads, K, K] per layer.
pub fn fusion_attention(model: &LipModel, store: &ParamStore, sample: &Sample) -> Result<Vec<Tensor>> {
    let cfg = &model.config.frontend;
    if cfg.mouth_crop {
        return Err(Error::arg("mouth-crop models have no landmark attention"));
    }
    let input = FrontendInput::build(cfg, &[sample], cfg.patch_size)?;
    let s = Session::inference(store);
    let out = model.frontend.forward(&s, &input, false)?;
    Ok(out.attention.iter().map(|&a| (*s.g.value(a)).clone()).collect())
}

/// Mean over layers and heads: [T, K, K].
pub fn averaged(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers.first().ok_or_else(|| Error::arg("no attention layers"))?;
    let sh = first.shape();
    if sh.len() != 4 || layers.iter().any(|l| l.shape() != sh) {
        return Err(Error::dim(format!("attention layers must share a [T, h, K, K] shape, got {sh:?}")));
    }
    let (t, h, k) = (sh[0], sh[1], sh[2]);
    let mut out = vec![0.0; t * k * k];
    let scale = 1.0 / (layers.len() * h) as f64;
    for l in layers {
        for ti in 0..t {
            for hi in 0..h {
                let src = &l.data()[(ti * h + hi) * k * k..(ti * h + hi + 1) * k * k];
                for (o, v) in out[ti * k * k..(ti + 1) * k * k].iter_mut().zip(src) {
                    *o += v * scale;
                }
            }
        }
    }
    Tensor::new(&[t, k, k], out)
}

fn label(i: usize) -> usize {
    FIRST_LIP_INDEX + i
}

/// `layer,head,frame,query_landmark,key_landmark,weight`.
pub fn raw_csv(layers: &[Tensor]) -> String {
    let mut s = String::from("layer,head,frame,query_landmark,key_landmark,weight\n");
    for (li, l) in layers.iter().enumerate() {
        let sh = l.shape();
        let (t, h, k) = (sh[0], sh[1], sh[2]);
        for ti in 0..t {
            for hi in 0..h {
                for q in 0..k {
                    for kk in 0..k {
                        let w = l.data()[((ti * h + hi) * k + q) * k + kk];
                        let _ = writeln!(s, "{li},{hi},{ti},{},{},{w:.9}", label(q), label(kk));
                    }
                }
            }
        }
    }
    s
}

/// `frame,query_landmark,key_landmark,weight` from [`averaged`].
pub fn averaged_csv(avg: &Tensor) -> String {
    let sh = avg.shape();
    let (t, k) = (sh[0], sh[1]);
    let mut s = String::from("frame,query_landmark,key_landmark,weight\n");
    for ti in 0..t {
        for q in 0..k {
            for kk in 0..k {
                let w = avg.data()[(ti * k + q) * k + kk];
                let _ = writeln!(s, "{ti},{},{},{w:.9}", label(q), label(kk));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusConfig};
    use crate::model::ModelConfig;

    #[test]
    fn averaged_rows_are_stochastic_and_labels_span_the_lips() {
        let corpus = Corpus::generate(&CorpusConfig {
            speakers: 1,
            samples_per_speaker: 1,
            frames: 64,
            ..CorpusConfig::default()
        })
        .unwrap();
        let (model, store) = LipModel::build(&ModelConfig::desk(2), 3).unwrap();
        let sample = corpus.sample(0).unwrap();
        let layers = fusion_attention(&model, &store, &sample).unwrap();
        let avg = averaged(&layers).unwrap();
        for row in avg.data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let csv = averaged_csv(&avg);
        let labels: std::collections::BTreeSet<usize> = csv
            .lines()
            .skip(1)
            .flat_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                [f[1].parse().unwrap(), f[2].parse().unwrap()]
            })
            .collect();
        assert_eq!(labels, (49..=68).collect());
        assert_eq!(csv, averaged_csv(&averaged(&fusion_attention(&model, &store, &sample).unwrap()).unwrap()));
    }
}
