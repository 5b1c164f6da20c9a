//! Neural mutual-information estimation between slide representations and
//! cohort identity.
//!
//! The score network `T(z, c)` has a `z` branch, a `c` branch (both one tanh
//! layer of width `h`) and a joint head over the concatenated branch outputs.
//! Positive pairs are `(z_i, c_i)`; negatives are every off-diagonal pair
//! `(z_i, c_j)`, `i ≠ j`. The clipped estimator is
//!
//! ```text
//! I = mean_i T(z_i, c_i) − ln mean_{i≠j} clip(exp T(z_i, c_j), e^−τ, e^τ)
//! ```
//!
//! and `τ = ∞` gives the unclipped (MINE) form.

use serde::{Deserialize, Serialize};

use crate::cohort_attention::CohortId;
use crate::diffcore::{ordered_sum, Adam, AdamConfig, Bound, Graph, NodeId, ParamStore, Tensor};
use crate::error::{ModelError, Result};
use crate::init::{fan_in, rng};

/// Sign applied to the estimate when it is used as the model's loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiSign {
    /// `L_MI = +I`: descending the total loss lowers the MI estimate.
    #[default]
    Minimize,
    /// `L_MI = −I`, the literal reading; descending raises the estimate.
    Literal,
}

impl MiSign {
    pub fn factor(self) -> f64 {
        match self {
            MiSign::Minimize => 1.0,
            MiSign::Literal => -1.0,
        }
    }
}

/// Gradient used for the score network's ascent step. The reported value
/// is always the clipped estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticObjective {
    /// Ascend the Jensen-Shannon bound
    /// `mean_pos −softplus(−T) − mean_neg softplus(T)`, whose optimum is the
    /// log density ratio. Ascending the clipped bound directly is unbounded:
    /// once every score exceeds `τ` the negative term saturates and a
    /// constant shift of `T` raises the estimate without limit.
    #[default]
    JensenShannon,
    /// Ascend the clipped estimate itself.
    Clipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub hidden: usize,
    /// Clip exponent; `f64::INFINITY` disables clipping.
    pub tau: f64,
    pub adam: AdamConfig,
    pub sign: MiSign,
    #[serde(default)]
    pub critic: CriticObjective,
    /// Ascent steps the trainer takes per mini-batch.
    #[serde(default = "one")]
    pub ascent_steps: usize,
}

fn one() -> usize {
    1
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            tau: 5.0,
            adam: AdamConfig::default(),
            sign: MiSign::Minimize,
            critic: CriticObjective::JensenShannon,
            ascent_steps: 1,
        }
    }
}

/// Score network weights plus optimizer state.
#[derive(Clone, Debug)]
pub struct MiEstimator {
    pub config: MiConfig,
    pub d_z: usize,
    pub d_c: usize,
    pub store: ParamStore,
    pub adam: Adam,
}

impl MiEstimator {
    /// `d_c` is the width of the second argument: the cohort count for
    /// one-hot cohorts, or any width for continuous variables.
    pub fn init(d_z: usize, d_c: usize, config: MiConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || d_z == 0 || d_c == 0 {
            return Err(ModelError::Config("score network widths must be positive".into()));
        }
        if config.ascent_steps == 0 {
            return Err(ModelError::Config("ascent_steps must be positive".into()));
        }
        if config.tau.is_nan() || config.tau <= 0.0 {
            return Err(ModelError::Config(format!("tau must be positive, got {}", config.tau)));
        }
        let h = config.hidden;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        store.insert("mi.z.w", fan_in(&mut r, d_z, h));
        store.insert("mi.z.b", Tensor::zeros(&[1, h]));
        store.insert("mi.c.w", fan_in(&mut r, d_c, h));
        store.insert("mi.c.b", Tensor::zeros(&[1, h]));
        // joint first layer acts on [h_z, h_c]; split into the two halves
        let scale = 1.0 / ((2 * h) as f64).sqrt();
        let w1 = crate::init::uniform(&mut r, &[2 * h, h], scale);
        store.insert("mi.j.w1z", Tensor::matrix(h, h, w1.data()[..h * h].to_vec()));
        store.insert("mi.j.w1c", Tensor::matrix(h, h, w1.data()[h * h..].to_vec()));
        store.insert("mi.j.b1", Tensor::zeros(&[1, h]));
        store.insert("mi.j.w2", fan_in(&mut r, h, 1));
        store.insert("mi.j.b2", Tensor::zeros(&[1, 1]));
        Ok(Self {
            adam: Adam::new(config.adam),
            config,
            d_z,
            d_c,
            store,
        })
    }

    fn check(&self, zs: &Tensor, cs: &Tensor) -> Result<usize> {
        let b = zs.rows();
        if zs.cols() != self.d_z || cs.cols() != self.d_c || cs.rows() != b {
            return Err(ModelError::Dimension(format!(
                "score network expects [B, {}] and [B, {}], got {:?} and {:?}",
                self.d_z,
                self.d_c,
                zs.shape(),
                cs.shape()
            )));
        }
        Ok(b)
    }

    /// Branch outputs after the joint first-layer projection: `A = h_z·W1z`,
    /// `C = h_c·W1c`, so the joint pre-activation of `(i, j)` is
    /// `A_i + C_j + b1`.
    fn projected(&self, zs: &Tensor, cs: &Tensor) -> (Tensor, Tensor) {
        let p = |n: &str| self.store.get(n).expect("score network parameter");
        let branch = |x: &Tensor, w: &str, b: &str, w1: &str| {
            let mut h = x.matmul(p(w));
            let bias = p(b).data();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v = (*v + bias[i % bias.len()]).tanh();
            }
            h.matmul(p(w1))
        };
        (
            branch(zs, "mi.z.w", "mi.z.b", "mi.j.w1z"),
            branch(cs, "mi.c.w", "mi.c.b", "mi.j.w1c"),
        )
    }

    /// `T[i, j] = T(z_i, c_j)` for every pair, `[B, B]`.
    pub fn pair_scores(&self, zs: &Tensor, cs: &Tensor) -> Result<Tensor> {
        let b = self.check(zs, cs)?;
        let (a, c) = self.projected(zs, cs);
        let h = self.config.hidden;
        let b1 = self.store.get("mi.j.b1").expect("b1").data();
        let w2 = self.store.get("mi.j.w2").expect("w2").data();
        let b2 = self.store.get("mi.j.b2").expect("b2").item();
        let mut out = Tensor::zeros(&[b, b]);
        for i in 0..b {
            let ai = a.row(i);
            for j in 0..b {
                let cj = c.row(j);
                let mut s = b2;
                for t in 0..h {
                    s += (ai[t] + cj[t] + b1[t]).tanh() * w2[t];
                }
                out.set(i, j, s);
            }
        }
        Ok(out)
    }

    /// Score of a single pair.
    pub fn score(&self, z: &[f64], c: &[f64]) -> Result<f64> {
        Ok(self
            .pair_scores(&Tensor::row_vector(z), &Tensor::row_vector(c))?
            .item())
    }

    /// Clipped estimate with the configured `τ`.
    pub fn smile_estimate(&self, zs: &Tensor, cs: &Tensor) -> Result<f64> {
        self.estimate_with_tau(zs, cs, self.config.tau)
    }

    /// Unclipped estimate; fails when `exp(T)` overflows.
    pub fn mine_estimate(&self, zs: &Tensor, cs: &Tensor) -> Result<f64> {
        self.estimate_with_tau(zs, cs, f64::INFINITY)
    }

    pub fn estimate_with_tau(&self, zs: &Tensor, cs: &Tensor, tau: f64) -> Result<f64> {
        if zs.rows() < 2 {
            return Err(ModelError::BatchTooSmall(zs.rows()));
        }
        let t = self.pair_scores(zs, cs)?;
        estimate_from_scores(&t, tau)
    }

    /// One Adam ascent step w.r.t. the score network only, driven by the
    /// configured [`CriticObjective`]. `zs` are plain values, so nothing
    /// upstream receives gradient. Returns the clipped estimate before the
    /// step.
    pub fn adversary_update(&mut self, zs: &Tensor, cs: &Tensor) -> Result<f64> {
        self.check(zs, cs)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g)?;
        let z = g.constant(zs.clone())?;
        let c = g.constant(cs.clone())?;
        let (pos, neg) = pair_nodes(&mut g, z, c, &bound)?;
        let est = smile_from_scores(&mut g, pos, neg, self.config.tau)?;
        let value = g.value(est).item();
        if !value.is_finite() {
            return Err(ModelError::NonFinite("MI estimate".into()));
        }
        let objective = match self.config.critic {
            CriticObjective::Clipped => est,
            CriticObjective::JensenShannon => js_from_scores(&mut g, pos, neg)?,
        };
        let neg = g.scale(objective, -1.0)?;
        let grads = g.backward_scalar(neg)?;
        let grads = self.store.collect_grads(&grads, &bound);
        self.adam.step(&mut self.store, &grads);
        Ok(value)
    }

    /// Records `L_MI` (signed estimate) into `g` with the score network
    /// frozen: gradient reaches `z` but never the network weights.
    pub fn mi_loss(&self, g: &mut Graph, z: NodeId, cs: &Tensor) -> Result<NodeId> {
        self.check(g.value(z), cs)?;
        let bound = self.store.bind_frozen(g)?;
        let c = g.constant(cs.clone())?;
        let est = smile_graph(g, z, c, &bound, self.config.tau)?;
        Ok(g.scale(est, self.config.sign.factor())?)
    }

    /// Trains the score network for `steps` ascent steps on random batches of
    /// `batch` rows drawn from `(zs, cs)`; returns the estimate per step.
    pub fn fit(&mut self, zs: &Tensor, cs: &Tensor, steps: usize, batch: usize, seed: u64) -> Result<Vec<f64>> {
        use rand::seq::index::sample;
        let n = self.check(zs, cs)?;
        if batch < 2 || batch > n {
            return Err(ModelError::Config(format!("batch {batch} invalid for {n} samples")));
        }
        let mut r = rng(seed);
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sample(&mut r, n, batch).into_vec();
            let zb = gather(zs, &idx);
            let cb = gather(cs, &idx);
            curve.push(self.adversary_update(&zb, &cb)?);
        }
        Ok(curve)
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Estimate from a `[B, B]` pair-score matrix.
pub fn estimate_from_scores(t: &Tensor, tau: f64) -> Result<f64> {
    let b = t.rows();
    if b < 2 {
        return Err(ModelError::BatchTooSmall(b));
    }
    let mut pos: Vec<f64> = (0..b).map(|i| t.get(i, i)).collect();
    let mut neg = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if i != j {
                neg.push(t.get(i, j).clamp(-tau, tau).exp());
            }
        }
    }
    if neg.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("exp(T) overflowed".into()));
    }
    let pos_mean = ordered_sum(&mut pos) / b as f64;
    let neg_mean = ordered_sum(&mut neg) / neg.len() as f64;
    let est = pos_mean - neg_mean.ln();
    if !est.is_finite() {
        return Err(ModelError::NonFinite("MI estimate".into()));
    }
    Ok(est)
}

/// Records the pair scores of `(z_i, c_j)` for the given index pairs as an
/// `[P, 1]` column.
fn pair_scores_graph(
    g: &mut Graph,
    z: NodeId,
    c: NodeId,
    p: &Bound,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    let hz = g.matmul(z, p.id("mi.z.w"))?;
    let hz = g.add_row(hz, p.id("mi.z.b"))?;
    let hz = g.tanh(hz)?;
    let a = g.matmul(hz, p.id("mi.j.w1z"))?;
    let hc = g.matmul(c, p.id("mi.c.w"))?;
    let hc = g.add_row(hc, p.id("mi.c.b"))?;
    let hc = g.tanh(hc)?;
    let cc = g.matmul(hc, p.id("mi.j.w1c"))?;
    let ai = g.gather_rows(a, pairs.iter().map(|&(i, _)| i).collect())?;
    let cj = g.gather_rows(cc, pairs.iter().map(|&(_, j)| j).collect())?;
    let pre = g.add(ai, cj)?;
    let pre = g.add_row(pre, p.id("mi.j.b1"))?;
    let h = g.tanh(pre)?;
    let s = g.matmul(h, p.id("mi.j.w2"))?;
    Ok(g.add_row(s, p.id("mi.j.b2"))?)
}

fn off_diagonal(b: usize) -> Vec<(usize, usize)> {
    (0..b)
        .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Positive `[B, 1]` and off-diagonal negative `[B(B−1), 1]` score columns.
fn pair_nodes(g: &mut Graph, z: NodeId, c: NodeId, params: &Bound) -> Result<(NodeId, NodeId)> {
    let b = g.value(z).rows();
    if b < 2 {
        return Err(ModelError::BatchTooSmall(b));
    }
    let pos_pairs: Vec<_> = (0..b).map(|i| (i, i)).collect();
    let pos = pair_scores_graph(g, z, c, params, &pos_pairs)?;
    let neg = pair_scores_graph(g, z, c, params, &off_diagonal(b))?;
    Ok((pos, neg))
}

/// Jensen-Shannon bound from score columns. `−softplus(x)` is taken as the
/// first column of `log_softmax([0, x])`, which never overflows.
fn js_from_scores(g: &mut Graph, pos: NodeId, neg: NodeId) -> Result<NodeId> {
    let mut neg_softplus = |x: NodeId, flip: bool| -> Result<NodeId> {
        let n = g.value(x).rows();
        let zero = g.constant(Tensor::zeros(&[n, 1]))?;
        let x = if flip { g.scale(x, -1.0)? } else { x };
        let pair = g.concat_cols(&[zero, x])?;
        let ls = g.log_softmax_rows(pair)?;
        Ok(g.slice_cols(ls, 0, 1)?)
    };
    let pos_term = neg_softplus(pos, true)?;
    let neg_term = neg_softplus(neg, false)?;
    let pos_mean = g.mean_all(pos_term)?;
    let neg_mean = g.mean_all(neg_term)?;
    Ok(g.add(pos_mean, neg_mean)?)
}

/// Clipped estimate from score columns.
fn smile_from_scores(g: &mut Graph, pos: NodeId, neg: NodeId, tau: f64) -> Result<NodeId> {
    let pos_mean = g.mean_all(pos)?;
    // clip(exp T, e^-τ, e^τ) == exp(clip(T, -τ, τ)), without overflow
    let neg = g.clip(neg, -tau, tau)?;
    let neg = g.exp(neg)?;
    let neg_mean = g.mean_all(neg)?;
    let log_neg = g.log(neg_mean)?;
    Ok(g.sub(pos_mean, log_neg)?)
}

/// Records the Jensen-Shannon bound `mean_pos −softplus(−T) − mean_neg softplus(T)`.
pub fn js_graph(g: &mut Graph, z: NodeId, c: NodeId, params: &Bound) -> Result<NodeId> {
    let (pos, neg) = pair_nodes(g, z, c, params)?;
    js_from_scores(g, pos, neg)
}

/// Records the clipped estimate for a batch of `z` rows and `c` rows.
pub fn smile_graph(g: &mut Graph, z: NodeId, c: NodeId, params: &Bound, tau: f64) -> Result<NodeId> {
    let (pos, neg) = pair_nodes(g, z, c, params)?;
    smile_from_scores(g, pos, neg, tau)
}

/// `[B, k]` one-hot rows.
pub fn one_hot(cohorts: &[CohortId], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[cohorts.len(), k]);
    for (i, c) in cohorts.iter().enumerate() {
        if c.0 >= k {
            return Err(ModelError::InvalidCohort { id: c.0, cohorts: k });
        }
        t.set(i, c.0, 1.0);
    }
    Ok(t)
}

/// True when at least two distinct cohorts are present.
pub fn has_multiple_cohorts(cohorts: &[CohortId]) -> bool {
    cohorts.iter().any(|c| *c != cohorts[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, relative_error, GraphError};
    use crate::init::uniform;
    use rand_distr::{Distribution, StandardNormal};

    fn small(seed: u64) -> MiEstimator {
        let config = MiConfig { hidden: 6, ..Default::default() };
        MiEstimator::init(3, 2, config, seed).unwrap()
    }

    fn batch(seed: u64, b: usize) -> (Tensor, Tensor) {
        let z = uniform(&mut rng(seed), &[b, 3], 1.0);
        let ids: Vec<CohortId> = (0..b).map(|i| CohortId(i % 2)).collect();
        (z, one_hot(&ids, 2).unwrap())
    }

    #[test]
    fn zero_head_scores_zero_and_estimates_zero() {
        let mut est = small(0);
        est.store.insert("mi.j.w2", Tensor::zeros(&[6, 1]));
        let (z, c) = batch(1, 5);
        assert_eq!(est.score(z.row(0), c.row(0)).unwrap(), 0.0);
        assert_eq!(est.smile_estimate(&z, &c).unwrap(), 0.0);
        assert_eq!(est.mine_estimate(&z, &c).unwrap(), 0.0);
    }

    #[test]
    fn constant_score_cancels() {
        let mut est = small(0);
        est.store.insert("mi.j.w2", Tensor::zeros(&[6, 1]));
        est.store.insert("mi.j.b2", Tensor::scalar(2.5).reshape(vec![1, 1]).unwrap());
        let (z, c) = batch(2, 4);
        assert!(est.smile_estimate(&z, &c).unwrap().abs() < 1e-15);
    }

    #[test]
    fn score_is_deterministic_and_cohort_sensitive() {
        let est = small(3);
        let z = [0.2, -0.5, 0.9];
        let a = est.score(&z, &[1.0, 0.0]).unwrap();
        assert_eq!(a, est.score(&z, &[1.0, 0.0]).unwrap());
        assert_ne!(a, est.score(&z, &[0.0, 1.0]).unwrap());
    }

    #[test]
    fn unclipped_equals_mine() {
        let est = small(4);
        let (z, c) = batch(5, 6);
        let a = est.estimate_with_tau(&z, &c, f64::INFINITY).unwrap();
        let b = est.mine_estimate(&z, &c).unwrap();
        assert!((a - b).abs() < 1e-12);
        let s = est.smile_estimate(&z, &c).unwrap();
        assert!((s - b).abs() < 1e-12, "scores are far inside the clip range");
    }

    #[test]
    fn clipping_bounds_large_scores() {
        let mut est = small(6);
        est.store.insert("mi.j.w2", Tensor::zeros(&[6, 1]));
        est.store.insert("mi.j.b2", Tensor::full(&[1, 1], 800.0));
        let (z, c) = batch(7, 4);
        let t = est.pair_scores(&z, &c).unwrap();
        assert!(t.max_abs() > 5.0);
        let smile = est.smile_estimate(&z, &c).unwrap();
        assert!(smile.is_finite());
        assert!(matches!(est.mine_estimate(&z, &c), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn batch_too_small() {
        let est = small(8);
        let (z, c) = batch(9, 1);
        assert_eq!(est.smile_estimate(&z, &c), Err(ModelError::BatchTooSmall(1)));
    }

    #[test]
    fn graph_matches_numeric_estimate() {
        let est = small(10);
        let (z, c) = batch(11, 5);
        for tau in [0.05, 5.0, f64::INFINITY] {
            let mut g = Graph::new();
            let bound = est.store.bind(&mut g).unwrap();
            let zi = g.constant(z.clone()).unwrap();
            let ci = g.constant(c.clone()).unwrap();
            let s = smile_graph(&mut g, zi, ci, &bound, tau).unwrap();
            let want = est.estimate_with_tau(&z, &c, tau).unwrap();
            assert!((g.value(s).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_permutation_leaves_estimate_unchanged() {
        let est = small(12);
        let (z, c) = batch(13, 6);
        let perm = [4, 2, 0, 5, 1, 3];
        let zp = gather(&z, &perm);
        let cp = gather(&c, &perm);
        assert_eq!(est.smile_estimate(&z, &c).unwrap(), est.smile_estimate(&zp, &cp).unwrap());
        assert_eq!(est.mine_estimate(&z, &c).unwrap(), est.mine_estimate(&zp, &cp).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_state() {
        let config = MiConfig {
            hidden: 6,
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        let mut est = MiEstimator::init(3, 2, config, 14).unwrap();
        let before = est.store.clone();
        let (z, c) = batch(15, 4);
        est.adversary_update(&z, &c).unwrap();
        assert!(est.store.bitwise_eq(&before));
    }

    #[test]
    fn ascent_raises_estimate_on_separated_clusters() {
        let mut est = MiEstimator::init(3, 2, MiConfig::default(), 16).unwrap();
        let mut r = rng(17);
        let ids: Vec<CohortId> = (0..32).map(|i| CohortId(i % 2)).collect();
        let mut z = uniform(&mut r, &[32, 3], 0.3);
        for (i, id) in ids.iter().enumerate() {
            let v = z.get(i, 0) + if id.0 == 0 { 2.0 } else { -2.0 };
            z.set(i, 0, v);
        }
        let c = one_hot(&ids, 2).unwrap();
        let start = est.smile_estimate(&z, &c).unwrap();
        for _ in 0..50 {
            est.adversary_update(&z, &c).unwrap();
        }
        let end = est.smile_estimate(&z, &c).unwrap();
        assert!(end > start + 0.1, "{start} -> {end}");
    }

    #[test]
    fn frozen_loss_routes_gradient_to_z_only() {
        let est = small(18);
        let (z, c) = batch(19, 5);
        let mut g = Graph::new();
        let zi = g.input("z", z.clone()).unwrap();
        let loss = est.mi_loss(&mut g, zi, &c).unwrap();
        let grads = g.backward_scalar(loss).unwrap();
        for name in est.store.names() {
            let id = g.id(name).unwrap();
            assert!(grads.wrt(id).data().iter().all(|v| v.to_bits() == 0), "{name}");
        }
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let zi = g.input("z", t.clone())?;
                let l = est.mi_loss(&mut g, zi, &c).map_err(to_graph)?;
                Ok(g.value(l).item())
            },
            &z,
            1e-5,
        )
        .unwrap();
        let analytic = grads.wrt(zi);
        assert!(analytic.max_abs() > 0.0);
        assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn literal_sign_flips_loss() {
        let mut est = small(20);
        let (z, c) = batch(21, 4);
        let value = |est: &MiEstimator| {
            let mut g = Graph::new();
            let zi = g.constant(z.clone()).unwrap();
            let l = est.mi_loss(&mut g, zi, &c).unwrap();
            g.value(l).item()
        };
        let plus = value(&est);
        est.config.sign = MiSign::Literal;
        assert_eq!(value(&est), -plus);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let est = small(22);
        let (z, c) = batch(23, 4);
        let run = |store: &ParamStore| -> std::result::Result<f64, GraphError> {
            let mut g = Graph::new();
            let bound = store.bind(&mut g)?;
            let zi = g.constant(z.clone())?;
            let ci = g.constant(c.clone())?;
            let s = smile_graph(&mut g, zi, ci, &bound, 0.3).map_err(to_graph)?;
            Ok(g.value(s).item())
        };
        let mut g = Graph::new();
        let bound = est.store.bind(&mut g).unwrap();
        let zi = g.constant(z.clone()).unwrap();
        let ci = g.constant(c.clone()).unwrap();
        let s = smile_graph(&mut g, zi, ci, &bound, 0.3).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        for (name, value) in est.store.iter() {
            let numeric = finite_diff_grad(
                |t| {
                    let mut st = est.store.clone();
                    st.insert(name.clone(), t.clone());
                    run(&st)
                },
                value,
                1e-5,
            )
            .unwrap();
            let err = relative_error(&grads.wrt(bound.id(name)), &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    fn to_graph(e: ModelError) -> GraphError {
        match e {
            ModelError::Graph(g) => g,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn independent_pairs_estimate_near_zero() {
        let mut r = rng(24);
        let n = 2048;
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let ids: Vec<CohortId> = (0..n).map(|i| CohortId((i * 7 + i / 3) % 2)).collect();
        let zs = Tensor::matrix(n, 1, z);
        let cs = one_hot(&ids, 2).unwrap();
        let mut est = MiEstimator::init(1, 2, MiConfig::default(), 25).unwrap();
        est.fit(&zs, &cs, 200, 64, 26).unwrap();
        let idx: Vec<usize> = (0..512).collect();
        let e = est.smile_estimate(&gather(&zs, &idx), &gather(&cs, &idx)).unwrap();
        assert!(e.abs() < 0.05, "{e}");
    }

    #[test]
    fn cohort_helpers() {
        assert!(one_hot(&[CohortId(2)], 2).is_err());
        assert!(!has_multiple_cohorts(&[CohortId(1), CohortId(1)]));
        assert!(has_multiple_cohorts(&[CohortId(1), CohortId(0)]));
    }
}
