//! Adam with bias correction, global-norm clipping and the learning-rate schedule.

use std::f64::consts::PI;

use super::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First and second moments indexed by parameter id.
    pub moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= c);
    }
    norm
}

/// Linear warm-up to `lr0`, then half-cosine decay to zero at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, lr0: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    lr0 * 0.5 * (1.0 + (PI * p).cos())
}
