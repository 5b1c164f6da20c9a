//! Cohort-aware vision transformer tile encoder.
//!
//! Standard ViT front-end (non-overlapping patches, linear projection, class
//! token, learned positions) followed by post-norm blocks whose self-attention
//! is the multihead cohort-aware attention of [`crate::cohort_attention`].
//! The tile feature is the class-token row after the last block.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::balancing;
use crate::cohort_attention::{caa_attention, AttentionDims, CohortId, McaaNodes, McaaParams, QueryMode};
use crate::diffcore::{Adam, AdamConfig, Bound, Graph, NodeId, ParamStore, Tensor};
use crate::error::{ModelError, Result};
use crate::init::{fan_in, rng, uniform};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaVitConfig {
    pub channels: usize,
    pub side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cohorts: usize,
}

impl Default for CaVitConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            side: 16,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            cohorts: 3,
        }
    }
}

impl CaVitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.side % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "tile side {} not divisible by patch size {}",
                self.side, self.patch_size
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::Config("depth must be at least 1".into()));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("channels and mlp_ratio must be positive".into()));
        }
        self.attention_dims().map(|_| ())
    }

    pub fn attention_dims(&self) -> Result<AttentionDims> {
        AttentionDims::new(self.embed_dim, self.heads, self.cohorts)
    }

    pub fn num_patches(&self) -> usize {
        (self.side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn d_k(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// One tile with its cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct TileImage {
    /// `[channels, side, side]`.
    pub pixels: Tensor,
    pub cohort: CohortId,
}

/// Splits `[channels, side, side]` pixels into `[n, channels·p·p]` patch rows
/// (raster order over patches; channel, row, column within a patch).
pub fn patchify(pixels: &Tensor, config: &CaVitConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.side, config.patch_size);
    if pixels.shape() != [c, s, s] {
        return Err(ModelError::Dimension(format!(
            "tile shape {:?}, expected [{c}, {s}, {s}]",
            pixels.shape()
        )));
    }
    let per_side = s / p;
    let mut out = Vec::with_capacity(pixels.len());
    for py in 0..per_side {
        for px in 0..per_side {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (py * p + y) * s + px * p;
                    out.extend_from_slice(&pixels.data()[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::matrix(per_side * per_side, config.patch_dim(), out))
}

/// All encoder weights together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: CaVitConfig,
    pub mode: QueryMode,
    pub store: ParamStore,
}

impl EncoderParams {
    pub fn init(config: CaVitConfig, mode: QueryMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.attention_dims()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        store.insert("patch.w", fan_in(&mut r, config.patch_dim(), d));
        store.insert("patch.b", Tensor::zeros(&[1, d]));
        store.insert("cls", uniform(&mut r, &[1, d], 0.02));
        store.insert("pos", uniform(&mut r, &[config.num_patches() + 1, d], 0.02));
        for l in 0..config.depth {
            let p = format!("blocks.{l}.");
            McaaParams::init(&dims, &mut r).insert_into(&mut store, &format!("{p}attn."));
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{p}{ln}.g"), Tensor::full(&[1, d], 1.0));
                store.insert(format!("{p}{ln}.b"), Tensor::zeros(&[1, d]));
            }
            store.insert(format!("{p}mlp.w1"), fan_in(&mut r, d, hidden));
            store.insert(format!("{p}mlp.b1"), Tensor::zeros(&[1, hidden]));
            store.insert(format!("{p}mlp.w2"), fan_in(&mut r, hidden, d));
            store.insert(format!("{p}mlp.b2"), Tensor::zeros(&[1, d]));
        }
        Ok(Self { config, mode, store })
    }

    /// Same weights, different query mode.
    pub fn with_mode(&self, mode: QueryMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<EncoderNodes> {
        let bound = self.store.bind(g)?;
        EncoderNodes::lookup(&bound, &self.config)
    }
}

#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub attn: McaaNodes,
    pub ln1: (NodeId, NodeId),
    pub ln2: (NodeId, NodeId),
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub patch_w: NodeId,
    pub patch_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub bound: Bound,
}

impl EncoderNodes {
    pub fn lookup(bound: &Bound, config: &CaVitConfig) -> Result<Self> {
        let dims = config.attention_dims()?;
        let blocks = (0..config.depth)
            .map(|l| {
                let p = format!("blocks.{l}.");
                BlockNodes {
                    attn: McaaNodes::lookup(bound, &format!("{p}attn."), &dims),
                    ln1: (bound.id(&format!("{p}ln1.g")), bound.id(&format!("{p}ln1.b"))),
                    ln2: (bound.id(&format!("{p}ln2.g")), bound.id(&format!("{p}ln2.b"))),
                    mlp_w1: bound.id(&format!("{p}mlp.w1")),
                    mlp_b1: bound.id(&format!("{p}mlp.b1")),
                    mlp_w2: bound.id(&format!("{p}mlp.w2")),
                    mlp_b2: bound.id(&format!("{p}mlp.b2")),
                }
            })
            .collect();
        Ok(Self {
            patch_w: bound.id("patch.w"),
            patch_b: bound.id("patch.b"),
            cls: bound.id("cls"),
            pos: bound.id("pos"),
            blocks,
            bound: bound.clone(),
        })
    }
}

/// Patch rows `[n, patch_dim]` to tokens `[n+1, d]`: projection, class
/// token prepended, positions added.
pub fn patch_embed(g: &mut Graph, patches: NodeId, nodes: &EncoderNodes) -> Result<NodeId> {
    let want = g.value(nodes.pos).rows() - 1;
    if g.value(patches).rows() != want || g.value(patches).cols() != g.value(nodes.patch_w).rows() {
        return Err(ModelError::Dimension(format!(
            "patch matrix {:?} does not match encoder ({} patches of {})",
            g.value(patches).shape(),
            want,
            g.value(nodes.patch_w).rows()
        )));
    }
    let proj = g.matmul(patches, nodes.patch_w)?;
    let proj = g.add_row(proj, nodes.patch_b)?;
    let tokens = g.concat_rows(&[nodes.cls, proj])?;
    Ok(g.add(tokens, nodes.pos)?)
}

fn add_norm(g: &mut Graph, x: NodeId, branch: NodeId, ln: (NodeId, NodeId)) -> Result<NodeId> {
    let s = g.add(x, branch)?;
    let n = g.layer_norm_rows(s, LN_EPS)?;
    let n = g.mul_row(n, ln.0)?;
    Ok(g.add_row(n, ln.1)?)
}

/// `y = AddNorm(x, MCAA(x, c))`, `out = AddNorm(y, MLP(y))`.
pub fn cavit_block(
    g: &mut Graph,
    tokens: NodeId,
    cohort: CohortId,
    block: &BlockNodes,
    mode: QueryMode,
) -> Result<NodeId> {
    let attn = caa_attention(g, tokens, cohort, &block.attn, mode)?;
    let y = add_norm(g, tokens, attn, block.ln1)?;
    let h = g.matmul(y, block.mlp_w1)?;
    let h = g.add_row(h, block.mlp_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, block.mlp_w2)?;
    let h = g.add_row(h, block.mlp_b2)?;
    add_norm(g, y, h, block.ln2)
}

/// Class-token feature `[1, d]` of one tile, recorded into `g`.
pub fn encode_tile_graph(
    g: &mut Graph,
    patches: NodeId,
    cohort: CohortId,
    nodes: &EncoderNodes,
    mode: QueryMode,
) -> Result<NodeId> {
    let mut x = patch_embed(g, patches, nodes)?;
    for block in &nodes.blocks {
        x = cavit_block(g, x, cohort, block, mode)?;
    }
    Ok(g.slice_rows(x, 0, 1)?)
}

/// Encodes one tile to a `d`-vector. Depends only on the tile, its cohort
/// and the parameters.
pub fn encode_tile(tile: &TileImage, params: &EncoderParams) -> Result<Vec<f64>> {
    let mut enc = TileEncoder::new(params)?;
    enc.encode(tile)
}

/// Reuses one parameter binding across many forward passes.
pub struct TileEncoder<'a> {
    params: &'a EncoderParams,
    graph: Graph,
    nodes: EncoderNodes,
    base: usize,
}

impl<'a> TileEncoder<'a> {
    pub fn new(params: &'a EncoderParams) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = params.bind(&mut graph)?;
        let base = graph.len();
        Ok(Self {
            params,
            graph,
            nodes,
            base,
        })
    }

    pub fn encode(&mut self, tile: &TileImage) -> Result<Vec<f64>> {
        let patches = patchify(&tile.pixels, &self.params.config)?;
        self.encode_patches(&patches, tile.cohort)
    }

    pub fn encode_patches(&mut self, patches: &Tensor, cohort: CohortId) -> Result<Vec<f64>> {
        if cohort.0 >= self.params.config.cohorts {
            return Err(ModelError::InvalidCohort {
                id: cohort.0,
                cohorts: self.params.config.cohorts,
            });
        }
        self.graph.truncate(self.base);
        let p = self.graph.constant(patches.clone())?;
        let f = encode_tile_graph(&mut self.graph, p, cohort, &self.nodes, self.params.mode)?;
        Ok(self.graph.value(f).data().to_vec())
    }
}

/// One pretraining example: a patchified tile, its cohort, proxy label and
/// hierarchical weight.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub patches: Tensor,
    pub cohort: CohortId,
    pub label: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub num_labels: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            num_labels: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    /// Linear proxy-label head on the class token.
    pub head: ParamStore,
    /// Weighted mean loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Supervised proxy-label pretraining with weighted cross-entropy.
///
/// Sample weights are clipped at two standard deviations over the whole
/// sample list, then rescaled to unit mean inside each batch. Batches whose
/// weights are all zero are skipped without touching the optimizer.
pub fn pretrain_encoder(
    samples: &[PretrainSample],
    init: EncoderParams,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if samples.is_empty() {
        return Err(ModelError::Data("pretraining set is empty".into()));
    }
    let first = samples[0].label;
    if samples.iter().all(|s| s.label == first) {
        return Err(ModelError::Data("pretraining labels are all one class".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= config.num_labels) {
        return Err(ModelError::Data(format!("proxy label {} >= {}", s.label, config.num_labels)));
    }
    if config.batch_size == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let raw: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let clipped = if raw.len() >= 2 {
        balancing::clip_weights(&raw).map_err(|e| ModelError::Data(e.to_string()))?
    } else {
        raw
    };

    let d = init.config.embed_dim;
    let mut r = rng(config.seed);
    let mut head = ParamStore::new();
    head.insert("head.w", fan_in(&mut r, d, config.num_labels));
    head.insert("head.b", Tensor::zeros(&[1, config.num_labels]));
    let mut encoder = init;
    let mut enc_opt = Adam::new(config.adam);
    let mut head_opt = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let bw: Vec<f64> = batch.iter().map(|&i| clipped[i]).collect();
            let Ok(w) = balancing::batch_renormalize(&bw) else { continue };
            let mut g = Graph::new();
            let nodes = encoder.bind(&mut g)?;
            let hb = head.bind(&mut g)?;
            let mut feats = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let p = g.constant(s.patches.clone())?;
                feats.push(encode_tile_graph(&mut g, p, s.cohort, &nodes, encoder.mode)?);
            }
            let f = g.concat_rows(&feats)?;
            let logits = g.matmul(f, hb.id("head.w"))?;
            let logits = g.add_row(logits, hb.id("head.b"))?;
            let logp = g.log_softmax_rows(logits)?;
            let mut target = Tensor::zeros(&[batch.len(), config.num_labels]);
            for (row, &i) in batch.iter().enumerate() {
                target.set(row, samples[i].label, -w[row]);
            }
            let t = g.constant(target)?;
            let picked = g.mul(logp, t)?;
            let total = g.sum_all(picked)?;
            let loss = g.scale(total, 1.0 / batch.len() as f64)?;
            let value = g.value(loss).item();
            let grads = g.backward_scalar(loss)?;
            let enc_grads = encoder.store.collect_grads(&grads, &nodes.bound);
            let head_grads = head.collect_grads(&grads, &hb);
            enc_opt.step(&mut encoder.store, &enc_grads);
            head_opt.step(&mut head, &head_grads);
            let bsum: f64 = bw.iter().sum();
            loss_sum += value * bsum;
            weight_sum += bsum;
        }
        loss_curve.push(if weight_sum > 0.0 { loss_sum / weight_sum } else { f64::NAN });
    }
    Ok(PretrainOutcome {
        encoder,
        head,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, relative_error, GraphError};
    use crate::init::rng;

    fn small_config() -> CaVitConfig {
        CaVitConfig {
            channels: 1,
            side: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            cohorts: 2,
        }
    }

    fn tile(seed: u64, config: &CaVitConfig, cohort: usize) -> TileImage {
        TileImage {
            pixels: uniform(&mut rng(seed), &[config.channels, config.side, config.side], 1.0),
            cohort: CohortId(cohort),
        }
    }

    #[test]
    fn patch_count_for_desk_geometry() {
        let config = CaVitConfig::default();
        assert_eq!(config.num_patches(), 16);
        let params = EncoderParams::init(config, QueryMode::CohortAware, 0).unwrap();
        let mut g = Graph::new();
        let nodes = params.bind(&mut g).unwrap();
        let p = g.constant(patchify(&Tensor::zeros(&[1, 16, 16]), &config).unwrap()).unwrap();
        let tokens = patch_embed(&mut g, p, &nodes).unwrap();
        assert_eq!(g.value(tokens).shape(), &[17, 32]);
    }

    #[test]
    fn patchify_layout() {
        let config = CaVitConfig { side: 4, patch_size: 2, ..small_config() };
        let pixels = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&pixels, &config).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&Tensor::zeros(&[1, 5, 5]), &config).is_err());
    }

    #[test]
    fn side_must_divide_by_patch() {
        let bad = CaVitConfig { side: 10, ..small_config() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn zero_image_tokens_equal_projection_bias() {
        let config = small_config();
        let mut params = EncoderParams::init(config, QueryMode::CohortAware, 1).unwrap();
        params.store.insert("pos", Tensor::zeros(&[config.num_patches() + 1, 8]));
        let bias = uniform(&mut rng(2), &[1, 8], 1.0);
        params.store.insert("patch.b", bias.clone());
        let mut g = Graph::new();
        let nodes = params.bind(&mut g).unwrap();
        let p = g.constant(Tensor::zeros(&[config.num_patches(), config.patch_dim()])).unwrap();
        let tokens = patch_embed(&mut g, p, &nodes).unwrap();
        for i in 1..=config.num_patches() {
            assert_eq!(g.value(tokens).row(i), bias.data());
        }
    }

    #[test]
    fn one_changed_patch_changes_one_token() {
        let config = small_config();
        let params = EncoderParams::init(config, QueryMode::CohortAware, 1).unwrap();
        let a = tile(3, &config, 0);
        let mut b = a.clone();
        // pixel (0, 5) sits in patch 1 (top row, second column)
        b.pixels.data_mut()[5] += 1.0;
        let embed = |t: &TileImage| {
            let mut g = Graph::new();
            let nodes = params.bind(&mut g).unwrap();
            let p = g.constant(patchify(&t.pixels, &config).unwrap()).unwrap();
            let e = patch_embed(&mut g, p, &nodes).unwrap();
            g.value(e).clone()
        };
        let (ea, eb) = (embed(&a), embed(&b));
        for i in 0..=config.num_patches() {
            assert_eq!(ea.row(i) == eb.row(i), i != 2, "token {i}");
        }
    }

    fn zero_branches(params: &mut EncoderParams) {
        let names: Vec<String> = params
            .store
            .names()
            .filter(|n| n.contains(".attn.w_o") || n.contains(".attn.b_o") || n.contains(".mlp."))
            .cloned()
            .collect();
        for n in names {
            let shape = params.store.get(&n).unwrap().shape().to_vec();
            params.store.insert(n, Tensor::zeros(&shape));
        }
    }

    #[test]
    fn zero_branches_reduce_to_double_layer_norm() {
        let config = small_config();
        let mut params = EncoderParams::init(config, QueryMode::CohortAware, 4).unwrap();
        zero_branches(&mut params);
        let x = uniform(&mut rng(5), &[5, 8], 2.0);
        let mut g = Graph::new();
        let nodes = params.bind(&mut g).unwrap();
        let xi = g.input("x", x.clone()).unwrap();
        let y = cavit_block(&mut g, xi, CohortId(1), &nodes.blocks[0], QueryMode::CohortAware).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 8]);
        let ln = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|i| {
                    let r = t.row(i);
                    let m = r.iter().sum::<f64>() / r.len() as f64;
                    let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64;
                    r.iter().map(|x| (x - m) / (v + LN_EPS).sqrt()).collect()
                })
                .collect();
            Tensor::from_rows(&rows)
        };
        let want = ln(&ln(&x));
        assert!(relative_error(g.value(y), &want, 1.0) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        let config = small_config();
        let params = EncoderParams::init(config, QueryMode::CohortAware, 4).unwrap();
        for m in [1, 3, 9] {
            let mut g = Graph::new();
            let nodes = params.bind(&mut g).unwrap();
            let xi = g.input("x", uniform(&mut rng(m as u64), &[m, 8], 1.0)).unwrap();
            let y = cavit_block(&mut g, xi, CohortId(0), &nodes.blocks[1], QueryMode::CohortAware).unwrap();
            assert_eq!(g.value(y).shape(), &[m, 8]);
        }
    }

    /// d = 2, one head, one token: attention weight is 1, so the attention
    /// branch is `x·W_v·W_o + b_o`; everything is recomputed by hand here.
    #[test]
    fn single_token_block_by_hand() {
        let config = CaVitConfig {
            embed_dim: 2,
            heads: 1,
            mlp_ratio: 1,
            cohorts: 2,
            ..small_config()
        };
        let params = EncoderParams::init(config, QueryMode::CohortAware, 8).unwrap();
        let s = &params.store;
        let x = [0.7, -0.4];
        let mut g = Graph::new();
        let nodes = params.bind(&mut g).unwrap();
        let xi = g.input("x", Tensor::row_vector(&x)).unwrap();
        let y = cavit_block(&mut g, xi, CohortId(1), &nodes.blocks[0], QueryMode::CohortAware).unwrap();

        let mv = |v: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols()).map(|j| (0..v.len()).map(|i| v[i] * w.get(i, j)).sum()).collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let ln = |v: &[f64], gm: &Tensor, bt: &Tensor| -> Vec<f64> {
            let m = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
            (0..2)
                .map(|i| (v[i] - m) / (var + LN_EPS).sqrt() * gm.data()[i] + bt.data()[i])
                .collect()
        };
        let p = |n: &str| s.get(&format!("blocks.0.{n}")).unwrap();
        let attn = add(&mv(&mv(&x, p("attn.h0.w_v")), p("attn.w_o")), p("attn.b_o").data());
        let y1 = ln(&add(&x, &attn), p("ln1.g"), p("ln1.b"));
        let h: Vec<f64> = add(&mv(&y1, p("mlp.w1")), p("mlp.b1").data())
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044_715 * v * v * v)).tanh()))
            .collect();
        let mlp = add(&mv(&h, p("mlp.w2")), p("mlp.b2").data());
        let want = ln(&add(&y1, &mlp), p("ln2.g"), p("ln2.b"));
        for i in 0..2 {
            assert!((g.value(y).data()[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_tile_contract() {
        let config = small_config();
        let params = EncoderParams::init(config, QueryMode::CohortAware, 9).unwrap();
        let t = tile(10, &config, 1);
        let a = encode_tile(&t, &params).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.is_finite()));
        let b = encode_tile(&t, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cohorts_change_features_when_queries_diverge() {
        let config = small_config();
        let mut params = EncoderParams::init(config, QueryMode::CohortAware, 11).unwrap();
        let mut r = rng(12);
        for l in 0..config.depth {
            for h in 0..config.heads {
                params.store.insert(format!("blocks.{l}.attn.h{h}.w_q_c.1"), fan_in(&mut r, 8, 4));
                params.store.insert(format!("blocks.{l}.attn.h{h}.qa.w2"), uniform(&mut r, &[4, 1], 1.0));
            }
        }
        let t0 = tile(13, &config, 0);
        let t1 = TileImage { cohort: CohortId(1), ..t0.clone() };
        assert_ne!(encode_tile(&t0, &params).unwrap(), encode_tile(&t1, &params).unwrap());
    }

    #[test]
    fn tile_encoder_reuse_matches_fresh_graph() {
        let config = small_config();
        let params = EncoderParams::init(config, QueryMode::CohortAware, 14).unwrap();
        let mut enc = TileEncoder::new(&params).unwrap();
        let tiles: Vec<_> = (0..4).map(|i| tile(20 + i, &config, (i % 2) as usize)).collect();
        let reused: Vec<_> = tiles.iter().map(|t| enc.encode(t).unwrap()).collect();
        for (t, r) in tiles.iter().zip(&reused) {
            assert_eq!(&encode_tile(t, &params).unwrap(), r);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = small_config();
        let mut params = EncoderParams::init(config, QueryMode::CohortAware, 15).unwrap();
        let mut r = rng(16);
        for l in 0..config.depth {
            for h in 0..config.heads {
                params.store.insert(format!("blocks.{l}.attn.h{h}.qa.w2"), uniform(&mut r, &[4, 1], 1.0));
            }
        }
        let t = tile(17, &config, 1);
        let patches = patchify(&t.pixels, &config).unwrap();
        let proj = uniform(&mut r, &[1, 8], 1.0);
        let run = |store: &ParamStore| -> std::result::Result<(Graph, NodeId, EncoderNodes), GraphError> {
            let p = EncoderParams { store: store.clone(), ..params.clone() };
            let mut g = Graph::new();
            let nodes = p.bind(&mut g).map_err(unwrap_graph)?;
            let pn = g.constant(patches.clone())?;
            let f = encode_tile_graph(&mut g, pn, CohortId(1), &nodes, QueryMode::CohortAware).map_err(unwrap_graph)?;
            let c = g.constant(proj.clone())?;
            let m = g.mul(f, c)?;
            let s = g.sum_all(m)?;
            Ok((g, s, nodes))
        };
        let (g, s, nodes) = run(&params.store).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        for name in [
            "patch.w", "cls", "pos",
            "blocks.0.attn.h1.w_q_c.1", "blocks.0.attn.h0.qa.w1",
            "blocks.1.attn.h0.w_k", "blocks.0.ln1.g", "blocks.1.ln2.b", "blocks.0.mlp.w1", "blocks.1.mlp.b2",
        ] {
            let analytic = grads.wrt(nodes.bound.id(name));
            let numeric = finite_diff_grad(
                |t| {
                    let mut st = params.store.clone();
                    st.insert(name, t.clone());
                    let (g, s, _) = run(&st)?;
                    Ok(g.value(s).item())
                },
                params.store.get(name).unwrap(),
                1e-4,
            )
            .unwrap();
            let err = relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err} {} {}", analytic.max_abs(), numeric.max_abs());
        }
    }

    fn unwrap_graph(e: ModelError) -> GraphError {
        match e {
            ModelError::Graph(g) => g,
            other => panic!("{other}"),
        }
    }

    fn samples(config: &CaVitConfig, n: usize) -> Vec<PretrainSample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut px = uniform(&mut rng(100 + i as u64), &[1, config.side, config.side], 0.5);
                if label == 1 {
                    for v in px.data_mut().iter_mut().take(config.side * 2) {
                        *v += 1.5;
                    }
                }
                PretrainSample {
                    patches: patchify(&px, config).unwrap(),
                    cohort: CohortId(i % config.cohorts),
                    label,
                    weight: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn pretraining_reduces_loss() {
        let config = small_config();
        let init = EncoderParams::init(config, QueryMode::CohortAware, 30).unwrap();
        let cfg = PretrainConfig {
            epochs: 6,
            batch_size: 8,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            seed: 31,
            num_labels: 2,
        };
        let out = pretrain_encoder(&samples(&config, 48), init, &cfg).unwrap();
        assert_eq!(out.loss_curve.len(), 6);
        assert!(out.loss_curve[0] > *out.loss_curve.last().unwrap(), "{:?}", out.loss_curve);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let config = small_config();
        let init = EncoderParams::init(config, QueryMode::CohortAware, 32).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 8,
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            seed: 33,
            num_labels: 2,
        };
        let out = pretrain_encoder(&samples(&config, 16), init.clone(), &cfg).unwrap();
        assert!(out.encoder.store.bitwise_eq(&init.store));
    }

    #[test]
    fn zero_weights_keep_params() {
        let config = small_config();
        let init = EncoderParams::init(config, QueryMode::CohortAware, 34).unwrap();
        let mut s = samples(&config, 16);
        for x in &mut s {
            x.weight = 0.0;
        }
        let out = pretrain_encoder(&s, init.clone(), &PretrainConfig::default()).unwrap();
        assert!(out.encoder.store.bitwise_eq(&init.store));
    }

    #[test]
    fn pretraining_input_errors() {
        let config = small_config();
        let init = EncoderParams::init(config, QueryMode::CohortAware, 35).unwrap();
        assert!(matches!(
            pretrain_encoder(&[], init.clone(), &PretrainConfig::default()),
            Err(ModelError::Data(_))
        ));
        let mut s = samples(&config, 4);
        for x in &mut s {
            x.label = 0;
        }
        assert!(matches!(
            pretrain_encoder(&s, init, &PretrainConfig::default()),
            Err(ModelError::Data(_))
        ));
    }

    #[test]
    fn single_cohort_batch_leaves_other_cohort_queries_untouched() {
        let config = small_config();
        let params = EncoderParams::init(config, QueryMode::CohortAware, 36).unwrap();
        let mut g = Graph::new();
        let nodes = params.bind(&mut g).unwrap();
        let mut outs = Vec::new();
        for s in samples(&config, 6) {
            let p = g.constant(s.patches).unwrap();
            outs.push(encode_tile_graph(&mut g, p, CohortId(0), &nodes, QueryMode::CohortAware).unwrap());
        }
        let cat = g.concat_rows(&outs).unwrap();
        let sq = g.mul(cat, cat).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward_scalar(loss).unwrap();
        for l in 0..config.depth {
            for h in 0..config.heads {
                let z = grads.wrt(nodes.bound.id(&format!("blocks.{l}.attn.h{h}.w_q_c.1")));
                assert!(z.data().iter().all(|v| v.to_bits() == 0));
                let nz = grads.wrt(nodes.bound.id(&format!("blocks.{l}.attn.h{h}.w_q_c.0")));
                assert!(nz.max_abs() > 0.0);
            }
        }
    }
}
