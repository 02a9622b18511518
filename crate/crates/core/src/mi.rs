//! Mutual-information estimators: a variational contrastive log-ratio upper
//! bound (minimised between identity and content features) and a
//! Jensen–Shannon lower bound (maximised between front-end and back-end
//! features).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, ParamBuilder, ParamId, ParamStore, Session};
use crate::rng::stream;
use crate::tensor::{Tensor, Var};

pub const LOGVAR_BOUND: f64 = 10.0;

/// Diagonal Gaussian q(y | x) with MLP mean and log-variance.
#[derive(Clone, Debug)]
pub struct VariationalNet {
    mu1: Linear,
    mu2: Linear,
    lv1: Linear,
    lv2: Linear,
}

impl VariationalNet {
    pub fn new(pb: &mut ParamBuilder, x_dim: usize, hidden: usize, y_dim: usize) -> Self {
        VariationalNet {
            mu1: Linear::new(&mut pb.sub("mu1"), x_dim, hidden, true),
            mu2: Linear::new(&mut pb.sub("mu2"), hidden, y_dim, true),
            lv1: Linear::new(&mut pb.sub("lv1"), x_dim, hidden, true),
            lv2: Linear::new(&mut pb.sub("lv2"), hidden, y_dim, true),
        }
    }

    /// Mean and clamped log-variance, each [B, y_dim].
    pub fn forward(&self, s: &Session, x: Var) -> Result<(Var, Var)> {
        let mu = self.mu2.forward(s, s.g.relu(self.mu1.forward(s, x)?))?;
        let lv = self.lv2.forward(s, s.g.relu(self.lv1.forward(s, x)?))?;
        Ok((mu, s.g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)))
    }

    /// Mean log q(y_i | x_i) including normalising constants.
    pub fn log_likelihood(&self, s: &Session, x: Var, y: Var) -> Result<Var> {
        let (mu, lv) = self.forward(s, x)?;
        let diff = s.g.sub(y, mu)?;
        let maha = s.g.mul(s.g.square(diff), s.g.exp(s.g.scale(lv, -1.0)))?;
        let per = s.g.add_scalar(s.g.add(maha, lv)?, (2.0 * std::f64::consts::PI).ln());
        let b = s.g.shape(x)[0] as f64;
        Ok(s.g.scale(s.g.sum(per), -0.5 / b))
    }
}

/// Critic F(x, y) → scalar.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ScoreNet {
    pub fn new(pb: &mut ParamBuilder, x_dim: usize, y_dim: usize, hidden: usize) -> Self {
        ScoreNet {
            l1: Linear::new(&mut pb.sub("l1"), x_dim + y_dim, hidden, true),
            l2: Linear::new(&mut pb.sub("l2"), hidden, hidden, true),
            l3: Linear::new(&mut pb.sub("l3"), hidden, 1, true),
        }
    }

    /// Scores [B] for row-paired x [B, dx] and y [B, dy].
    pub fn forward(&self, s: &Session, x: Var, y: Var) -> Result<Var> {
        let h = s.g.concat(&[x, y], 1)?;
        let h = s.g.relu(self.l1.forward(s, h)?);
        let h = s.g.relu(self.l2.forward(s, h)?);
        let out = self.l3.forward(s, h)?;
        let b = s.g.shape(out)[0];
        s.g.reshape(out, &[b])
    }
}

fn batch_of(s: &Session, x: Var, y: Var) -> Result<usize> {
    let (xs, ys) = (s.g.shape(x), s.g.shape(y));
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
        return Err(Error::dim(format!("estimator expects paired [B, d] batches, got {xs:?} and {ys:?}")));
    }
    if xs[0] < 2 {
        return Err(Error::arg("estimator needs a batch of at least 2"));
    }
    Ok(xs[0])
}

/// (1/B) Σᵢ log q(yᵢ|xᵢ) − (1/B²) Σᵢ Σⱼ log q(yⱼ|xᵢ). Terms common to
/// both sums (log-variance, 2π) cancel and are left out, so the estimate is
/// identically zero whenever q ignores x.
pub fn vclub_estimate(s: &Session, q: &VariationalNet, x: Var, y: Var) -> Result<Var> {
    let b = batch_of(s, x, y)?;
    let (mu, lv) = q.forward(s, x)?;
    let dy = s.g.shape(y)[1];
    let mu3 = s.g.reshape(mu, &[b, 1, dy])?;
    let inv3 = s.g.reshape(s.g.exp(s.g.scale(lv, -1.0)), &[b, 1, dy])?;
    let y3 = s.g.reshape(y, &[1, b, dy])?;
    // m[i, j] = Σ_d (y_j − μ_i)² / σ_i²
    let m = s.g.mul(s.g.square(s.g.sub(y3, mu3)?), inv3)?;
    let m = s.g.sum_axis(m, 2)?;
    let diag = s.g.pick(m, &(0..b).collect::<Vec<_>>())?;
    let positive = s.g.scale(s.g.mean(diag), -0.5);
    let negative = s.g.scale(s.g.mean(m), -0.5);
    s.g.sub(positive, negative)
}

/// Cyclic shift by one row: row i holds y_{(i+1) mod B}.
fn shifted(s: &Session, y: Var, b: usize) -> Result<Var> {
    let head = s.g.slice(y, 0, 1, b - 1)?;
    let tail = s.g.slice(y, 0, 0, 1)?;
    s.g.concat(&[head, tail], 0)
}

/// (1/B) Σ −softplus(−F(xᵢ, yᵢ)) − (1/B) Σ softplus(F(xᵢ, y_{i+1})).
pub fn jsd_estimate(s: &Session, f: &ScoreNet, x: Var, y: Var) -> Result<Var> {
    let b = batch_of(s, x, y)?;
    let pos = f.forward(s, x, y)?;
    let neg = f.forward(s, x, shifted(s, y, b)?)?;
    jsd_from_scores(s, pos, neg)
}

pub fn jsd_from_scores(s: &Session, pos: Var, neg: Var) -> Result<Var> {
    let p = s.g.mean(s.g.softplus(s.g.scale(pos, -1.0)));
    let n = s.g.mean(s.g.softplus(neg));
    Ok(s.g.scale(s.g.add(p, n)?, -1.0))
}

#[derive(Clone, Debug)]
pub struct MiTerms {
    /// Raw vCLUB estimate.
    pub vclub: Var,
    /// max(vCLUB, 0), the term that enters the objective.
    pub min_mi: Var,
    pub max_mi: Var,
    pub total: Var,
}

/// max(vCLUB(h_id, pooled HLb), 0) − JSD(pooled H0, pooled HLb). Mutual
/// information is non-negative, so clipping an upper bound at zero keeps
/// it an upper bound while removing the unbounded descent direction a
/// lagging q offers the encoder.
pub fn mi_loss(
    s: &Session,
    q: &VariationalNet,
    f: &ScoreNet,
    h_id: Var,
    h0_pooled: Var,
    hlb_pooled: Var,
) -> Result<MiTerms> {
    let vclub = vclub_estimate(s, q, h_id, hlb_pooled)?;
    let min_mi = s.g.relu(vclub);
    let max_mi = s.g.scale(jsd_estimate(s, f, h0_pooled, hlb_pooled)?, -1.0);
    Ok(MiTerms {
        vclub,
        min_mi,
        max_mi,
        total: s.g.add(min_mi, max_mi)?,
    })
}

/// One gradient-ascent step on mean log q(yᵢ|xᵢ) for the parameters in
/// `ids`; returns the log-likelihood before the update.
pub fn fit_variational_step(
    q: &VariationalNet,
    store: &mut ParamStore,
    ids: &[ParamId],
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
) -> Result<f64> {
    let (ll, grads) = {
        let s = Session::with_frozen(store, &complement(store, ids));
        let ll = q.log_likelihood(&s, s.g.constant(x.clone()), s.g.constant(y.clone()))?;
        let loss = s.g.scale(ll, -1.0);
        let g = s.g.backward(loss)?;
        (s.g.value(ll).item(), s.param_grads(&g))
    };
    adam.step(store, &grads, lr);
    Ok(ll)
}

/// Repeats [`fit_variational_step`] `steps` times on fixed pairs.
#[allow(clippy::too_many_arguments)]
pub fn fit_variational_net(
    q: &VariationalNet,
    store: &mut ParamStore,
    ids: &[ParamId],
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    (0..steps)
        .map(|_| fit_variational_step(q, store, ids, adam, x, y, lr))
        .collect()
}

/// One gradient-ascent step on the JSD estimate for the critic.
pub fn fit_score_step(
    f: &ScoreNet,
    store: &mut ParamStore,
    ids: &[ParamId],
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
) -> Result<f64> {
    let (est, grads) = {
        let s = Session::with_frozen(store, &complement(store, ids));
        let est = jsd_estimate(&s, f, s.g.constant(x.clone()), s.g.constant(y.clone()))?;
        let g = s.g.backward(s.g.scale(est, -1.0))?;
        (s.g.value(est).item(), s.param_grads(&g))
    };
    adam.step(store, &grads, lr);
    Ok(est)
}

/// Every parameter id not in `keep`.
pub fn complement(store: &ParamStore, keep: &[ParamId]) -> Vec<ParamId> {
    store.ids().filter(|id| !keep.contains(id)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianBenchConfig {
    pub rho: f64,
    pub batch: usize,
    pub steps: usize,
    pub hidden: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

impl Default for GaussianBenchConfig {
    fn default() -> Self {
        GaussianBenchConfig {
            rho: 0.9,
            batch: 512,
            steps: 500,
            hidden: 16,
            lr: 5e-3,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBenchResult {
    pub seed: u64,
    pub true_mi: f64,
    pub vclub: f64,
    /// vCLUB evaluated with the exact conditional density.
    pub vclub_exact_q: f64,
    pub final_log_likelihood: f64,
}

/// Pairs (x, ρx + √(1−ρ²)ε) with standard-normal x and ε.
pub fn gaussian_pairs<R: Rng + ?Sized>(rng: &mut R, rho: f64, n: usize) -> (Tensor, Tensor) {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(rho * x + (1.0 - rho * rho).sqrt() * e);
    }
    (
        Tensor::new(&[n, 1], xs).expect("n > 0"),
        Tensor::new(&[n, 1], ys).expect("n > 0"),
    )
}

/// −½ ln(1 − ρ²).
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// vCLUB with q(y|x) = N(ρx, 1 − ρ²), computed directly.
pub fn vclub_with_exact_conditional(x: &Tensor, y: &Tensor, rho: f64) -> f64 {
    let (xs, ys) = (x.data(), y.data());
    let b = xs.len() as f64;
    let var = 1.0 - rho * rho;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (i, xi) in xs.iter().enumerate() {
        for (j, yj) in ys.iter().enumerate() {
            let l = -(yj - rho * xi).powi(2) / (2.0 * var);
            neg += l;
            if i == j {
                pos += l;
            }
        }
    }
    pos / b - neg / (b * b)
}

/// Fits q on fresh correlated batches for `steps` steps per seed, then
/// reports vCLUB on a held-out batch.
pub fn gaussian_benchmark(cfg: &GaussianBenchConfig) -> Result<Vec<GaussianBenchResult>> {
    if cfg.batch < 2 || !(-1.0..1.0).contains(&cfg.rho) {
        return Err(Error::arg("benchmark needs batch ≥ 2 and |rho| < 1"));
    }
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut store = ParamStore::new();
            let mut init = stream(seed, &[0x434c_5542]);
            let q = VariationalNet::new(&mut ParamBuilder::new(&mut store, &mut init), 1, cfg.hidden, 1);
            let ids: Vec<ParamId> = store.ids().collect();
            let mut adam = Adam::default();
            let mut data = stream(seed, &[0x4441_5441]);
            let mut ll = f64::NAN;
            for _ in 0..cfg.steps {
                let (x, y) = gaussian_pairs(&mut data, cfg.rho, cfg.batch);
                ll = fit_variational_step(&q, &mut store, &ids, &mut adam, &x, &y, cfg.lr)?;
            }
            let (x, y) = gaussian_pairs(&mut data, cfg.rho, cfg.batch);
            let s = Session::inference(&store);
            let est = vclub_estimate(&s, &q, s.g.constant(x.clone()), s.g.constant(y.clone()))?;
            Ok(GaussianBenchResult {
                seed,
                true_mi: gaussian_mi(cfg.rho),
                vclub: s.g.value(est).item(),
                vclub_exact_q: vclub_with_exact_conditional(&x, &y, cfg.rho),
                final_log_likelihood: ll,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nets(seed: u64) -> (ParamStore, VariationalNet, ScoreNet) {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[]);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let q = VariationalNet::new(&mut pb.sub("q"), 3, 5, 2);
        let f = ScoreNet::new(&mut pb.sub("f"), 3, 2, 4);
        (store, q, f)
    }

    fn xy() -> (Tensor, Tensor) {
        (
            Tensor::from_fn(&[4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.5),
            Tensor::from_fn(&[4, 2], |i| ((i * 3 % 7) as f64 - 3.0) * 0.4),
        )
    }

    #[test]
    fn vclub_vanishes_for_identical_ys() {
        let (store, q, _) = nets(1);
        let s = Session::inference(&store);
        let x = s.g.constant(xy().0);
        let y = s.g.constant(Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 0.3 } else { -1.2 }));
        let est = vclub_estimate(&s, &q, x, y).unwrap();
        assert!(s.g.value(est).item().abs() < 1e-15);
    }

    #[test]
    fn vclub_vanishes_when_q_ignores_x() {
        let (mut store, q, _) = nets(2);
        for name in ["q.mu1.w", "q.lv1.w"] {
            let id = store.id(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let s = Session::inference(&store);
        let (x, y) = xy();
        let est = vclub_estimate(&s, &q, s.g.constant(x), s.g.constant(y)).unwrap();
        assert!(s.g.value(est).item().abs() < 1e-14);
    }

    #[test]
    fn jsd_at_zero_critic() {
        let (mut store, _, f) = nets(3);
        let id = store.id("f.l3.w").unwrap();
        store.set(id, Tensor::zeros(&[4, 1])).unwrap();
        let b = store.id("f.l3.b").unwrap();
        store.set(b, Tensor::zeros(&[1])).unwrap();
        let s = Session::inference(&store);
        let (x, y) = xy();
        let est = jsd_estimate(&s, &f, s.g.constant(x), s.g.constant(y)).unwrap();
        assert!((s.g.value(est).item() + 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (store, q, f) = nets(4);
        let s = Session::inference(&store);
        let x = s.g.constant(Tensor::zeros(&[1, 3]));
        let y = s.g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(vclub_estimate(&s, &q, x, y), Err(Error::Argument(_))));
        assert!(matches!(jsd_estimate(&s, &f, x, y), Err(Error::Argument(_))));
    }

    #[test]
    fn fitting_zero_steps_leaves_q_and_increases_likelihood() {
        let (mut store, q, _) = nets(5);
        let ids: Vec<ParamId> = store.ids_with_prefix("q.").collect();
        let before = store.digest(ids.clone());
        let (x, y) = xy();
        let mut adam = Adam::default();
        assert!(fit_variational_net(&q, &mut store, &ids, &mut adam, &x, &y, 0, 1e-2).unwrap().is_empty());
        assert_eq!(before, store.digest(ids.clone()));
        let lls = fit_variational_net(&q, &mut store, &ids, &mut adam, &x, &y, 50, 1e-2).unwrap();
        assert!(lls[49] > lls[0]);
    }

    #[test]
    fn exact_conditional_oracle() {
        let mut rng = stream(9, &[]);
        let (x, y) = gaussian_pairs(&mut rng, 0.9, 2000);
        let v = vclub_with_exact_conditional(&x, &y, 0.9);
        let closed = 0.81 / 0.19;
        assert!((v - closed).abs() < 0.5, "{v}");
    }
}
