//! Connectionist temporal classification loss.

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Graph, Var};
use crate::vocab::BLANK;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Fewest frames that can emit `target`: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame logits [T×V] and its
/// gradient with respect to the logits.
pub fn ctc_loss_with_grad(logits: &[f64], v: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if v < 2 || logits.is_empty() || !logits.len().is_multiple_of(v) {
        return Err(Error::dim(format!("ctc logits of length {} not divisible by V={v}", logits.len())));
    }
    let t_n = logits.len() / v;
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= v) {
        return Err(Error::arg(format!("target label {bad} is blank or outside V={v}")));
    }
    if min_frames(target) > t_n {
        return Err(Error::InfeasibleAlignment(format!(
            "target of length {} needs {} frames, have {t_n}",
            target.len(),
            min_frames(target)
        )));
    }
    let lp: Vec<f64> = logits.chunks(v).flat_map(log_softmax).collect();
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    let s_n = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_n * s_n];
    alpha[0] = lp[ext[0]];
    if s_n > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_n {
        for s in 0..s_n {
            let prev = &alpha[(t - 1) * s_n..t * s_n];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_n + s] = a + lp[t * v + ext[s]];
        }
    }
    let last = &alpha[(t_n - 1) * s_n..];
    let log_p = if s_n > 1 { log_add(last[s_n - 1], last[s_n - 2]) } else { last[0] };

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_n * s_n];
    beta[(t_n - 1) * s_n + s_n - 1] = 0.0;
    if s_n > 1 {
        beta[(t_n - 1) * s_n + s_n - 2] = 0.0;
    }
    for t in (0..t_n - 1).rev() {
        for s in 0..s_n {
            let next = |s2: usize| beta[(t + 1) * s_n + s2] + lp[(t + 1) * v + ext[s2]];
            let mut b = next(s);
            if s + 1 < s_n {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < s_n && skip(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * s_n + s] = b;
        }
    }

    let mut grad = softmax_rows(logits, v);
    for t in 0..t_n {
        for s in 0..s_n {
            let occ = alpha[t * s_n + s] + beta[t * s_n + s] - log_p;
            if occ > ninf {
                grad[t * v + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(logits: &[f64], v: usize, target: &[usize]) -> Result<f64> {
    ctc_loss_with_grad(logits, v, target).map(|(l, _)| l)
}

/// Exhaustive reference: sums the probability of every length-T label
/// sequence whose collapse equals `target`.
pub fn ctc_brute_force(logits: &[f64], v: usize, target: &[usize]) -> Result<f64> {
    let t_n = logits.len() / v;
    let total = (v as f64).powi(t_n as i32);
    if total > 1e6 {
        return Err(Error::Capacity(format!("{v}^{t_n} paths exceed the enumeration guard")));
    }
    let lp: Vec<f64> = logits.chunks(v).flat_map(log_softmax).collect();
    let mut path = vec![0usize; t_n];
    let mut acc = f64::NEG_INFINITY;
    let mut collapsed = Vec::with_capacity(t_n);
    for _ in 0..total as usize {
        collapsed.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != BLANK {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            let l: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * v + k]).sum();
            acc = log_add(acc, l);
        }
        for d in path.iter_mut().rev() {
            *d += 1;
            if *d < v {
                break;
            }
            *d = 0;
        }
    }
    Ok(-acc)
}

/// Mean CTC loss over a batch of logits [B, T, V], differentiable.
pub fn ctc_loss_batch(g: &Graph, logits: Var, targets: &[&[usize]]) -> Result<Var> {
    let value = g.value(logits);
    let sh = value.shape();
    if sh.len() != 3 || sh[0] != targets.len() {
        return Err(Error::dim(format!("ctc expects [B, T, V] for {} targets, got {sh:?}", targets.len())));
    }
    let v = sh[2];
    let per = sh[1] * v;
    let mut losses = Vec::with_capacity(targets.len());
    let mut grad = Vec::with_capacity(value.numel());
    for (row, target) in value.data().chunks(per).zip(targets) {
        let (l, gr) = ctc_loss_with_grad(row, v, target)?;
        losses.push(l);
        grad.extend(gr);
    }
    let fused = g.fused_rows(logits, losses, grad)?;
    Ok(g.mean(fused))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_uniform() {
        let l = ctc_loss(&[0.0; 3], 3, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform() {
        let l = ctc_loss(&[0.0; 6], 3, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&[0.0; 6], 3, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator() {
        assert!(matches!(
            ctc_loss(&[0.0; 6], 3, &[1, 1]),
            Err(Error::InfeasibleAlignment(_))
        ));
        assert!(ctc_loss(&[0.0; 9], 3, &[1, 1]).is_ok());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = [0.3, -0.2, 1.0, 0.5, 0.0, -1.0];
        let l = ctc_loss(&logits, 3, &[]).unwrap();
        let lp0 = log_softmax(&logits[..3])[0] + log_softmax(&logits[3..])[0];
        assert!((l + lp0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_logits() {
        let mut logits = vec![-1e3; 9];
        for (t, k) in [1usize, 0, 2].iter().enumerate() {
            logits[t * 3 + k] = 0.0;
        }
        assert!(ctc_loss(&logits, 3, &[1, 2]).unwrap().abs() < 1e-9);
        assert!(ctc_loss(&logits, 3, &[2, 1]).unwrap() > 100.0);
    }

    #[test]
    fn brute_force_guard() {
        assert!(matches!(ctc_brute_force(&[0.0; 40], 4, &[1]), Err(Error::Capacity(_))));
    }
}
