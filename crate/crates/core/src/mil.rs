//! Multiple-instance aggregation and the slide-level head.
//!
//! A bag of `n × d` instance features is reduced to one `d`-dimensional slide
//! representation `z` by an aggregator; a linear head plus softmax turns `z`
//! into class probabilities. The task loss is weighted cross-entropy.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::cohort_attention::CohortId;
use crate::diffcore::{Bound, Graph, NodeId, ParamStore, Tensor};
use crate::error::{ModelError, Result};
use crate::init::{fan_in, uniform, ModelRng};

const LN_EPS: f64 = 1e-5;

/// One slide: instance features plus labels and its sample weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: CohortId,
    pub label: usize,
    /// `[n, d]`, `n ≥ 1`.
    pub features: Tensor,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Mean,
    Max,
    /// Gated attention pooling.
    Abmil,
    /// One self-attention block over instances, then learned-query pooling.
    #[default]
    Mha,
}

impl std::str::FromStr for AggregatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "abmil" => Ok(Self::Abmil),
            "mha" => Ok(Self::Mha),
            other => Err(format!("unknown aggregator `{other}` (mean, max, abmil, mha)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilConfig {
    pub kind: AggregatorKind,
    pub d: usize,
    pub classes: usize,
    /// Heads of the instance self-attention block (`mha` only).
    pub heads: usize,
    /// Hidden width of the gated attention (`abmil` only).
    pub attn_hidden: usize,
}

impl MilConfig {
    pub fn new(kind: AggregatorKind, d: usize, classes: usize) -> Self {
        Self {
            kind,
            d,
            classes,
            heads: 4,
            attn_hidden: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.classes < 2 {
            return Err(ModelError::Config(format!(
                "need d > 0 and at least 2 classes, got d = {}, m = {}",
                self.d, self.classes
            )));
        }
        if self.kind == AggregatorKind::Mha && (self.heads == 0 || self.d % self.heads != 0) {
            return Err(ModelError::Config(format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.kind == AggregatorKind::Abmil && self.attn_hidden == 0 {
            return Err(ModelError::Config("attention hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Aggregator (`agg.*`) and head (`head.*`) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MilParams {
    pub config: MilConfig,
    pub store: ParamStore,
}

impl MilParams {
    pub fn init(config: MilConfig, rng: &mut ModelRng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        match config.kind {
            AggregatorKind::Mean | AggregatorKind::Max => {}
            AggregatorKind::Abmil => {
                let h = config.attn_hidden;
                store.insert("agg.embed.w", fan_in(rng, d, d));
                store.insert("agg.embed.b", Tensor::zeros(&[1, d]));
                store.insert("agg.v", fan_in(rng, d, h));
                store.insert("agg.v_b", Tensor::zeros(&[1, h]));
                store.insert("agg.u", fan_in(rng, d, h));
                store.insert("agg.u_b", Tensor::zeros(&[1, h]));
                store.insert("agg.w", fan_in(rng, h, 1));
            }
            AggregatorKind::Mha => {
                let d_k = d / config.heads;
                for h in 0..config.heads {
                    for m in ["w_q", "w_k", "w_v"] {
                        store.insert(format!("agg.h{h}.{m}"), fan_in(rng, d, d_k));
                    }
                }
                store.insert("agg.w_o", fan_in(rng, d, d));
                store.insert("agg.b_o", Tensor::zeros(&[1, d]));
                store.insert("agg.ln.g", Tensor::full(&[1, d], 1.0));
                store.insert("agg.ln.b", Tensor::zeros(&[1, d]));
                store.insert("agg.pool.q", uniform(rng, &[1, d], 0.02));
                store.insert("agg.pool.w_k", fan_in(rng, d, d));
                store.insert("agg.pool.w_v", fan_in(rng, d, d));
                store.insert("agg.pool.b_v", Tensor::zeros(&[1, d]));
            }
        }
        store.insert("head.w", fan_in(rng, d, config.classes));
        store.insert("head.b", Tensor::zeros(&[1, config.classes]));
        Ok(Self { config, store })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<MilNodes> {
        Ok(MilNodes {
            config: self.config,
            bound: self.store.bind(g)?,
        })
    }
}

/// Parameter leaves of a [`MilParams`] inside one graph.
#[derive(Clone, Debug)]
pub struct MilNodes {
    pub config: MilConfig,
    pub bound: Bound,
}

impl MilNodes {
    fn id(&self, name: &str) -> NodeId {
        self.bound.id(name)
    }
}

/// Softmax down a column `[n, 1]`.
fn softmax_col(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let t = g.transpose(x)?;
    let s = g.softmax_rows(t)?;
    Ok(g.transpose(s)?)
}

/// Records `z = A(features)` as a `[1, d]` node.
pub fn aggregate_graph(g: &mut Graph, features: NodeId, nodes: &MilNodes) -> Result<NodeId> {
    let (n, d) = (g.value(features).rows(), g.value(features).cols());
    if n == 0 {
        return Err(ModelError::EmptyBag);
    }
    if d != nodes.config.d {
        return Err(ModelError::Dimension(format!(
            "bag features have {d} columns, aggregator expects {}",
            nodes.config.d
        )));
    }
    match nodes.config.kind {
        AggregatorKind::Mean => Ok(g.mean_rows(features)?),
        AggregatorKind::Max => Ok(g.max_rows(features)?),
        AggregatorKind::Abmil => {
            let h = g.matmul(features, nodes.id("agg.embed.w"))?;
            let h = g.add_row(h, nodes.id("agg.embed.b"))?;
            let h = g.relu(h)?;
            let v = g.matmul(h, nodes.id("agg.v"))?;
            let v = g.add_row(v, nodes.id("agg.v_b"))?;
            let v = g.tanh(v)?;
            let u = g.matmul(h, nodes.id("agg.u"))?;
            let u = g.add_row(u, nodes.id("agg.u_b"))?;
            let u = g.sigmoid(u)?;
            let gated = g.mul(v, u)?;
            let logits = g.matmul(gated, nodes.id("agg.w"))?;
            let a = softmax_col(g, logits)?;
            Ok(g.attn_pool(a, h)?)
        }
        AggregatorKind::Mha => {
            let heads = (0..nodes.config.heads)
                .map(|h| {
                    let q = g.matmul(features, nodes.id(&format!("agg.h{h}.w_q")))?;
                    let k = g.matmul(features, nodes.id(&format!("agg.h{h}.w_k")))?;
                    let v = g.matmul(features, nodes.id(&format!("agg.h{h}.w_v")))?;
                    let s = g.matmul_bt(q, k)?;
                    let d_k = g.value(q).cols() as f64;
                    let s = g.scale(s, 1.0 / d_k.sqrt())?;
                    let p = g.softmax_rows(s)?;
                    Ok(g.matmul(p, v)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let cat = g.concat_cols(&heads)?;
            let o = g.matmul(cat, nodes.id("agg.w_o"))?;
            let o = g.add_row(o, nodes.id("agg.b_o"))?;
            let x = g.add(features, o)?;
            let x = g.layer_norm_rows(x, LN_EPS)?;
            let x = g.mul_row(x, nodes.id("agg.ln.g"))?;
            let x = g.add_row(x, nodes.id("agg.ln.b"))?;

            let k = g.matmul(x, nodes.id("agg.pool.w_k"))?;
            let scores = g.matmul_bt(k, nodes.id("agg.pool.q"))?;
            let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
            let a = softmax_col(g, scores)?;
            let v = g.matmul(x, nodes.id("agg.pool.w_v"))?;
            let z = g.attn_pool(a, v)?;
            Ok(g.add_row(z, nodes.id("agg.pool.b_v"))?)
        }
    }
}

/// Records head logits `[B, m]` for stacked representations `[B, d]`.
pub fn head_logits(g: &mut Graph, z: NodeId, nodes: &MilNodes) -> Result<NodeId> {
    if g.value(z).cols() != nodes.config.d {
        return Err(ModelError::Dimension(format!(
            "representation width {} vs head input {}",
            g.value(z).cols(),
            nodes.config.d
        )));
    }
    let l = g.matmul(z, nodes.id("head.w"))?;
    Ok(g.add_row(l, nodes.id("head.b"))?)
}

/// Records `Σ w_i·CE_i / Σ w_i` from log-probabilities `[B, m]`.
pub fn mil_loss_graph(g: &mut Graph, log_probs: NodeId, labels: &[usize], weights: &[f64]) -> Result<NodeId> {
    let (b, m) = (g.value(log_probs).rows(), g.value(log_probs).cols());
    check_loss_inputs(b, m, labels, weights)?;
    let total: f64 = weights.iter().sum();
    let mut t = Tensor::zeros(&[b, m]);
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        t.set(i, y, -w / total);
    }
    let t = g.constant(t)?;
    let picked = g.mul(log_probs, t)?;
    Ok(g.sum_all(picked)?)
}

fn check_loss_inputs(b: usize, m: usize, labels: &[usize], weights: &[f64]) -> Result<()> {
    if labels.len() != b || weights.len() != b {
        return Err(ModelError::Dimension(format!(
            "{b} predictions, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(ModelError::Data(format!("label {y} out of range for {m} classes")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ModelError::Data("weights must be finite and nonnegative".into()));
    }
    if weights.iter().sum::<f64>() == 0.0 {
        return Err(ModelError::ZeroWeights);
    }
    Ok(())
}

/// Slide representation of one bag.
pub fn aggregate(features: &Tensor, params: &MilParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g)?;
    let f = g.constant(features.clone())?;
    let z = aggregate_graph(&mut g, f, &nodes)?;
    Ok(g.value(z).data().to_vec())
}

/// Class probabilities for one representation.
pub fn predict(z: &[f64], params: &MilParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g)?;
    let zi = g.constant(Tensor::row_vector(z))?;
    let l = head_logits(&mut g, zi, &nodes)?;
    let p = g.softmax_rows(l)?;
    Ok(g.value(p).data().to_vec())
}

/// `predict(aggregate(features))`.
pub fn predict_bag(features: &Tensor, params: &MilParams) -> Result<Vec<f64>> {
    predict(&aggregate(features, params)?, params)
}

/// Weighted cross-entropy on probability vectors.
pub fn mil_loss(probs: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let m = probs.first().map_or(0, Vec::len);
    if probs.iter().any(|p| p.len() != m) {
        return Err(ModelError::Dimension("ragged probability vectors".into()));
    }
    check_loss_inputs(probs.len(), m, labels, weights)?;
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for ((p, &y), &w) in probs.iter().zip(labels).zip(weights) {
        if w > 0.0 {
            acc += w * -p[y].ln();
        }
    }
    Ok(acc / total)
}

/// Row indices kept when a bag is capped at `n_max` instances: all rows if
/// the bag fits, otherwise a uniform subset in ascending order.
pub fn subsample_rows(n: usize, n_max: usize, rng: &mut ModelRng) -> Vec<usize> {
    if n <= n_max || n_max == 0 {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, n_max).into_vec();
    idx.sort_unstable();
    idx
}
