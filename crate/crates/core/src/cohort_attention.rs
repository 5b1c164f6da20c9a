//! Cohort-aware attention.
//!
//! Each head projects tokens into a dataset-wide query, a cohort-specific
//! query (one projection per cohort, only the sample's own cohort is used),
//! and shared keys and values. A small query-attention network scores both
//! queries per token; a two-way softmax over the scores mixes them into the
//! cohort-aware query that drives scaled dot-product attention.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Graph, NodeId, ParamStore, Tensor};
use crate::error::{ModelError, Result};
use crate::init::{fan_in, uniform, ModelRng};

/// Zero-based cohort index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CohortId(pub usize);

impl CohortId {
    pub fn new(value: usize, cohorts: usize) -> Result<Self> {
        if value < cohorts {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidCohort { id: value, cohorts })
        }
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// How the query of each head is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Mix dataset-wide and cohort queries through the QA network.
    #[default]
    CohortAware,
    /// Use the dataset-wide query alone (α_d ≡ 1): plain self-attention.
    DatasetOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub cohorts: usize,
    /// Hidden width of the QA network.
    pub qa_hidden: usize,
}

impl AttentionDims {
    pub fn new(d: usize, heads: usize, cohorts: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(ModelError::Config(format!("{heads} heads do not divide d = {d}")));
        }
        if cohorts == 0 {
            return Err(ModelError::Config("need at least one cohort".into()));
        }
        let d_k = d / heads;
        Ok(Self {
            d,
            heads,
            d_k,
            cohorts,
            qa_hidden: d_k,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.d_k != self.d {
            return Err(ModelError::Config(format!(
                "heads ({}) x d_k ({}) != d ({})",
                self.heads, self.d_k, self.d
            )));
        }
        if self.cohorts == 0 || self.qa_hidden == 0 {
            return Err(ModelError::Config("cohorts and qa_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Query, key and value projections of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortQueryBank {
    pub w_q_d: Tensor,
    pub w_q_c: Vec<Tensor>,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// The QA scorer: `d_k -> qa_hidden (tanh) -> 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryAttentionNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McaaParams {
    pub heads: Vec<(CohortQueryBank, QueryAttentionNet)>,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl CohortQueryBank {
    /// Fan-in init; cohort queries start as copies of the dataset query
    /// plus `U(-1e-3, 1e-3)` noise.
    pub fn init(dims: &AttentionDims, rng: &mut ModelRng) -> Self {
        let w_q_d = fan_in(rng, dims.d, dims.d_k);
        let w_q_c = (0..dims.cohorts)
            .map(|_| {
                let mut w = w_q_d.clone();
                w.add_scaled(&uniform(rng, &[dims.d, dims.d_k], 1e-3), 1.0);
                w
            })
            .collect();
        Self {
            w_q_d,
            w_q_c,
            w_k: fan_in(rng, dims.d, dims.d_k),
            w_v: fan_in(rng, dims.d, dims.d_k),
        }
    }
}

impl QueryAttentionNet {
    /// Output layer starts at zero so both queries begin with weight 0.5.
    pub fn init(dims: &AttentionDims, rng: &mut ModelRng) -> Self {
        Self {
            w1: fan_in(rng, dims.d_k, dims.qa_hidden),
            b1: Tensor::zeros(&[1, dims.qa_hidden]),
            w2: Tensor::zeros(&[dims.qa_hidden, 1]),
            b2: Tensor::zeros(&[1, 1]),
        }
    }
}

impl McaaParams {
    pub fn init(dims: &AttentionDims, rng: &mut ModelRng) -> Self {
        let heads = (0..dims.heads)
            .map(|_| (CohortQueryBank::init(dims, rng), QueryAttentionNet::init(dims, rng)))
            .collect();
        Self {
            heads,
            w_o: fan_in(rng, dims.d, dims.d),
            b_o: Tensor::zeros(&[1, dims.d]),
        }
    }

    /// Stores every tensor under `prefix` (e.g. `"blocks.0.attn."`).
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (h, (bank, qa)) in self.heads.iter().enumerate() {
            let p = format!("{prefix}h{h}.");
            store.insert(format!("{p}w_q_d"), bank.w_q_d.clone());
            for (c, w) in bank.w_q_c.iter().enumerate() {
                store.insert(format!("{p}w_q_c.{c}"), w.clone());
            }
            store.insert(format!("{p}w_k"), bank.w_k.clone());
            store.insert(format!("{p}w_v"), bank.w_v.clone());
            store.insert(format!("{p}qa.w1"), qa.w1.clone());
            store.insert(format!("{p}qa.b1"), qa.b1.clone());
            store.insert(format!("{p}qa.w2"), qa.w2.clone());
            store.insert(format!("{p}qa.b2"), qa.b2.clone());
        }
        store.insert(format!("{prefix}w_o"), self.w_o.clone());
        store.insert(format!("{prefix}b_o"), self.b_o.clone());
    }

    pub fn from_store(store: &ParamStore, prefix: &str, dims: &AttentionDims) -> Result<Self> {
        let get = |name: String| {
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
        };
        let mut heads = Vec::with_capacity(dims.heads);
        for h in 0..dims.heads {
            let p = format!("{prefix}h{h}.");
            let bank = CohortQueryBank {
                w_q_d: get(format!("{p}w_q_d"))?,
                w_q_c: (0..dims.cohorts)
                    .map(|c| get(format!("{p}w_q_c.{c}")))
                    .collect::<Result<_>>()?,
                w_k: get(format!("{p}w_k"))?,
                w_v: get(format!("{p}w_v"))?,
            };
            let qa = QueryAttentionNet {
                w1: get(format!("{p}qa.w1"))?,
                b1: get(format!("{p}qa.b1"))?,
                w2: get(format!("{p}qa.w2"))?,
                b2: get(format!("{p}qa.b2"))?,
            };
            heads.push((bank, qa));
        }
        Ok(Self {
            heads,
            w_o: get(format!("{prefix}w_o"))?,
            b_o: get(format!("{prefix}b_o"))?,
        })
    }
}

/// Graph handles for one head's projections.
#[derive(Clone, Debug)]
pub struct BankNodes {
    pub w_q_d: NodeId,
    pub w_q_c: Vec<NodeId>,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct QaNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Clone, Debug)]
pub struct McaaNodes {
    pub heads: Vec<(BankNodes, QaNodes)>,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

impl McaaNodes {
    /// Looks up the nodes of parameters stored by [`McaaParams::insert_into`].
    pub fn lookup(bound: &Bound, prefix: &str, dims: &AttentionDims) -> Self {
        let heads = (0..dims.heads)
            .map(|h| {
                let p = format!("{prefix}h{h}.");
                let bank = BankNodes {
                    w_q_d: bound.id(&format!("{p}w_q_d")),
                    w_q_c: (0..dims.cohorts)
                        .map(|c| bound.id(&format!("{p}w_q_c.{c}")))
                        .collect(),
                    w_k: bound.id(&format!("{p}w_k")),
                    w_v: bound.id(&format!("{p}w_v")),
                };
                let qa = QaNodes {
                    w1: bound.id(&format!("{p}qa.w1")),
                    b1: bound.id(&format!("{p}qa.b1")),
                    w2: bound.id(&format!("{p}qa.w2")),
                    b2: bound.id(&format!("{p}qa.b2")),
                };
                (bank, qa)
            })
            .collect();
        Self {
            heads,
            w_o: bound.id(&format!("{prefix}w_o")),
            b_o: bound.id(&format!("{prefix}b_o")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q_d: NodeId,
    pub q_c: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

fn check_cols(g: &Graph, x: NodeId, want: usize, what: &str) -> Result<()> {
    let got = g.value(x).cols();
    if got != want {
        return Err(ModelError::Dimension(format!("{what}: expected {want} columns, got {got}")));
    }
    Ok(())
}

/// `Q_d = X·W_Qd`, `Q_c = X·W_Qc[c]`, `K = X·W_K`, `V = X·W_V`.
///
/// Only the projection of cohort `c` enters the graph, so every other
/// cohort's query matrix receives an exactly-zero gradient.
pub fn project_qkv(g: &mut Graph, x: NodeId, cohort: CohortId, bank: &BankNodes) -> Result<Qkv> {
    let w_q_c = *bank.w_q_c.get(cohort.0).ok_or(ModelError::InvalidCohort {
        id: cohort.0,
        cohorts: bank.w_q_c.len(),
    })?;
    check_cols(g, x, g.value(bank.w_q_d).rows(), "project_qkv input")?;
    Ok(Qkv {
        q_d: g.matmul(x, bank.w_q_d)?,
        q_c: g.matmul(x, w_q_c)?,
        k: g.matmul(x, bank.w_k)?,
        v: g.matmul(x, bank.w_v)?,
    })
}

/// Raw per-token QA score, `[n, d_k] -> [n, 1]`.
pub fn query_attention_weights(g: &mut Graph, q: NodeId, qa: &QaNodes) -> Result<NodeId> {
    check_cols(g, q, g.value(qa.w1).rows(), "query_attention_weights input")?;
    let h = g.matmul(q, qa.w1)?;
    let h = g.add_row(h, qa.b1)?;
    let h = g.tanh(h)?;
    let s = g.matmul(h, qa.w2)?;
    Ok(g.add_row(s, qa.b2)?)
}

/// Output of [`cohort_aware_query`].
#[derive(Clone, Copy, Debug)]
pub struct MixedQuery {
    pub q_ca: NodeId,
    pub alpha_d: NodeId,
    pub alpha_c: NodeId,
}

/// Per-token two-way softmax over `(s_d, s_c)`, then
/// `q_ca[i] = α_d[i]·q_d[i] + α_c[i]·q_c[i]`.
pub fn cohort_aware_query(
    g: &mut Graph,
    q_d: NodeId,
    q_c: NodeId,
    s_d: NodeId,
    s_c: NodeId,
) -> Result<MixedQuery> {
    if g.value(q_d).shape() != g.value(q_c).shape() {
        return Err(ModelError::Dimension("q_d and q_c shapes differ".into()));
    }
    let n = g.value(q_d).rows();
    for s in [s_d, s_c] {
        if g.value(s).shape() != [n, 1] {
            return Err(ModelError::Dimension(format!(
                "query scores must be [{n}, 1], got {:?}",
                g.value(s).shape()
            )));
        }
    }
    let scores = g.concat_cols(&[s_d, s_c])?;
    let alpha = g.softmax_rows(scores)?;
    let alpha_d = g.slice_cols(alpha, 0, 1)?;
    let alpha_c = g.slice_cols(alpha, 1, 2)?;
    let a = g.mul_col(q_d, alpha_d)?;
    let b = g.mul_col(q_c, alpha_c)?;
    let q_ca = g.add(a, b)?;
    Ok(MixedQuery { q_ca, alpha_d, alpha_c })
}

/// `softmax(Q·Kᵀ/√d_k)·V`; returns the head output and the attention matrix.
pub fn scaled_dot_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let d_k = g.value(q).cols();
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let probs = g.softmax_rows(scores)?;
    Ok((g.matmul(probs, v)?, probs))
}

/// Query used by one head under `mode`.
pub fn head_query(
    g: &mut Graph,
    qkv: &Qkv,
    qa: &QaNodes,
    mode: QueryMode,
) -> Result<NodeId> {
    match mode {
        QueryMode::DatasetOnly => Ok(qkv.q_d),
        QueryMode::CohortAware => {
            let s_d = query_attention_weights(g, qkv.q_d, qa)?;
            let s_c = query_attention_weights(g, qkv.q_c, qa)?;
            Ok(cohort_aware_query(g, qkv.q_d, qkv.q_c, s_d, s_c)?.q_ca)
        }
    }
}

/// Output of one attention head, before the output projection.
pub fn caa_head(
    g: &mut Graph,
    x: NodeId,
    cohort: CohortId,
    bank: &BankNodes,
    qa: &QaNodes,
    mode: QueryMode,
) -> Result<NodeId> {
    let qkv = project_qkv(g, x, cohort, bank)?;
    let q = head_query(g, &qkv, qa, mode)?;
    Ok(scaled_dot_attention(g, q, qkv.k, qkv.v)?.0)
}

/// Multihead cohort-aware attention, `[n, d] -> [n, d]`.
pub fn caa_attention(
    g: &mut Graph,
    x: NodeId,
    cohort: CohortId,
    params: &McaaNodes,
    mode: QueryMode,
) -> Result<NodeId> {
    let d = g.value(params.w_o).rows();
    check_cols(g, x, d, "caa_attention input")?;
    let heads = params
        .heads
        .iter()
        .map(|(bank, qa)| caa_head(g, x, cohort, bank, qa, mode))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_cols(&heads)?;
    let out = g.matmul(cat, params.w_o)?;
    Ok(g.add_row(out, params.b_o)?)
}
