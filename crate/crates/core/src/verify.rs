//! Self-checks run by `cohort-mil verify`: gradient checks against central
//! differences, exact routing and reduction properties, estimator
//! identities, weight sums, the Gaussian MI oracle, AUC and split checks.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::balancing::{batch_renormalize, clip_weights, mil_weights, pretrain_weights, SlideLabel, SlideTiles};
use crate::cavit::{encode_tile_graph, patchify, CaVitConfig, EncoderParams, TileEncoder};
use crate::cohort_attention::{caa_attention, AttentionDims, CohortId, McaaNodes, McaaParams, QueryMode};
use crate::dataset::{generate, stratified_patient_kfold, Fold, InstanceKind, SynthConfig};
use crate::diffcore::{finite_diff_grad, relative_error, AdamConfig, Bound, Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::error::ModelError;
use crate::init::{rng, uniform, ModelRng};
use crate::mi_adversary::{estimate_from_scores, smile_graph, MiConfig, MiEstimator};
use crate::mil::{aggregate_graph, head_logits, mil_loss_graph, AggregatorKind, MilConfig, MilParams};
use crate::trainer::metrics::auc;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;
pub const FD_INSTANCES: usize = 10;
/// Gradients below this magnitude are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

pub type SuiteFn = fn() -> Result<String, String>;

pub struct Suite {
    pub name: &'static str,
    pub run: SuiteFn,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Every suite, each listed once.
pub fn suites() -> Vec<Suite> {
    vec![
        Suite { name: "gradients.diffcore", run: || gradient_suite(&diffcore_cases()) },
        Suite { name: "gradients.cohort_attention", run: cohort_attention_gradients },
        Suite { name: "gradients.cavit", run: cavit_gradients },
        Suite { name: "gradients.mil", run: mil_gradients },
        Suite { name: "gradients.mi_adversary", run: mi_gradients },
        Suite { name: "routing.cohort_zero", run: routing_cohort_zero },
        Suite { name: "reduction.plain_vit", run: reduction_plain_vit },
        Suite { name: "estimators.identities", run: estimator_identities },
        Suite { name: "balancing.weights", run: balancing_weights },
        Suite { name: "mi.gaussian_oracle", run: gaussian_oracle },
        Suite { name: "metrics.auc", run: auc_oracle },
        Suite { name: "split.leakage", run: split_leakage },
    ]
}

pub fn run_suites(suites: &[Suite]) -> Vec<SuiteResult> {
    suites
        .iter()
        .map(|s| {
            let start = Instant::now();
            let out = (s.run)();
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match out {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult {
                name: s.name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn random(r: &mut ModelRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// One elementary operation under test: `build` maps the input `x` of shape
/// `[rows, cols]` to an output node.
pub struct OpCase {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub build: Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>>,
    /// Input values where the op is not differentiable.
    pub kinks: Vec<f64>,
    /// Whether near-ties within a column are a kink (column max).
    pub column_ties: bool,
}

impl OpCase {
    pub fn new(
        name: &'static str,
        rows: usize,
        cols: usize,
        build: impl Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError> + 'static,
    ) -> Self {
        Self {
            name,
            rows,
            cols,
            build: Box::new(build),
            kinks: Vec::new(),
            column_ties: false,
        }
    }

    pub fn with_kinks(mut self, kinks: &[f64]) -> Self {
        self.kinks = kinks.to_vec();
        self
    }

    pub fn with_column_ties(mut self) -> Self {
        self.column_ties = true;
        self
    }

    /// True when no input lies within [`KINK_MARGIN`] of a kink, so every
    /// central difference stays on one smooth piece.
    fn admits(&self, x: &Tensor) -> bool {
        let near = |v: f64| self.kinks.iter().any(|k| (v - k).abs() < KINK_MARGIN);
        if x.data().iter().any(|&v| near(v)) {
            return false;
        }
        !self.column_ties || columns_separated(x)
    }
}

/// Distance finite differences need from a kink: perturbing one input by
/// `FD_EPS` must not cross it.
pub const KINK_MARGIN: f64 = 10.0 * FD_EPS;

/// True when, in every column, the largest entry beats the runner-up by at
/// least [`KINK_MARGIN`].
fn columns_separated(x: &Tensor) -> bool {
    (0..x.cols()).all(|j| {
        let mut col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        col.len() < 2 || col[0] - col[1] >= KINK_MARGIN
    })
}

/// Worst relative error of one op over [`FD_INSTANCES`] random inputs. The
/// output is reduced to a scalar against a fixed random projection.
pub fn check_op(case: &OpCase, seed: u64) -> Result<f64, GraphError> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_INSTANCES {
        let x0 = loop {
            let x = random(&mut r, case.rows, case.cols);
            if case.admits(&x) {
                break x;
            }
        };
        let mut proj: Option<Tensor> = None;
        let mut scalar = |x: &Tensor| -> Result<(Graph, NodeId, NodeId), GraphError> {
            let mut g = Graph::new();
            let xi = g.input("x", x.clone())?;
            let y = (case.build)(&mut g, xi)?;
            let p = proj
                .get_or_insert_with(|| {
                    let shape = g.value(y).shape().to_vec();
                    let n = shape.iter().product();
                    let mut pr = rng(seed ^ 0x5eed);
                    Tensor::new(shape, (0..n).map(|_| pr.random_range(-1.0..1.0)).collect()).expect("shape")
                })
                .clone();
            let pn = g.constant(p)?;
            let m = g.mul(y, pn)?;
            let s = g.sum_all(m)?;
            Ok((g, xi, s))
        };
        let (g, xi, s) = scalar(&x0)?;
        let analytic = g.backward_scalar(s)?.wrt(xi);
        let numeric = finite_diff_grad(|t| Ok(g_value(scalar(t)?)), &x0, FD_EPS)?;
        worst = worst.max(relative_error(&analytic, &numeric, FD_FLOOR));
    }
    Ok(worst)
}

fn g_value((g, _, s): (Graph, NodeId, NodeId)) -> f64 {
    g.value(s).item()
}

/// Runs every case; fails on the first relative error at or above
/// [`FD_TOL`].
pub fn gradient_suite(cases: &[OpCase]) -> Result<String, String> {
    let mut worst: (f64, &str) = (0.0, "");
    for (i, case) in cases.iter().enumerate() {
        let err = check_op(case, 1000 + i as u64).map_err(|e| format!("{}: {e}", case.name))?;
        if err >= FD_TOL {
            return Err(format!("{}: relative error {err:.3e} >= {FD_TOL:.0e}", case.name));
        }
        if err > worst.0 {
            worst = (err, case.name);
        }
    }
    Ok(format!("{} ops, worst {:.2e} ({})", cases.len(), worst.0, worst.1))
}

/// Every differentiable graph operation. Inputs of kinked ops (relu, clip,
/// max) are redrawn until they sit clear of the kinks.
pub fn diffcore_cases() -> Vec<OpCase> {
    let mut r = rng(77);
    let w = random(&mut r, 4, 3);
    let w2 = w.clone();
    let b = random(&mut r, 5, 4);
    let m = random(&mut r, 3, 4);
    let (m1, m2, m3) = (m.clone(), m.clone(), m);
    let col = random(&mut r, 3, 1);
    vec![
        OpCase::new("matmul", 2, 4, move |g, x| {
            let c = g.constant(w.clone())?;
            g.matmul(x, c)
        }),
        OpCase::new("matmul_rhs", 3, 4, move |g, x| {
            let c = g.constant(w2.clone())?;
            g.matmul(c, x)
        }),
        OpCase::new("matmul_bt", 3, 4, move |g, x| {
            let c = g.constant(b.clone())?;
            let l = g.matmul_bt(x, c)?;
            let rr = g.matmul_bt(c, x)?;
            let lt = g.transpose(l)?;
            g.add(lt, rr)
        }),
        OpCase::new("transpose", 3, 2, |g, x| g.transpose(x)),
        OpCase::new("add_sub_mul", 3, 3, |g, x| {
            let y = g.mul(x, x)?;
            let z = g.add(y, x)?;
            g.sub(z, y)
        }),
        OpCase::new("scale_add_scalar", 2, 3, |g, x| {
            let y = g.scale(x, -2.5)?;
            g.add_scalar(y, 0.75)
        }),
        OpCase::new("add_row", 1, 4, move |g, row| {
            let a = g.constant(m1.clone())?;
            let y = g.add_row(a, row)?;
            g.mul(y, y)
        }),
        OpCase::new("mul_row", 1, 4, move |g, row| {
            let a = g.constant(m2.clone())?;
            g.mul_row(a, row)
        }),
        OpCase::new("mul_col", 3, 1, move |g, c| {
            let a = g.constant(m3.clone())?;
            g.mul_col(a, c)
        }),
        OpCase::new("mul_col_lhs", 3, 4, move |g, a| {
            let c = g.constant(col.clone())?;
            g.mul_col(a, c)
        }),
        OpCase::new("tanh", 3, 3, |g, x| g.tanh(x)),
        OpCase::new("sigmoid", 3, 3, |g, x| g.sigmoid(x)),
        OpCase::new("gelu", 3, 3, |g, x| g.gelu(x)),
        OpCase::new("exp", 3, 3, |g, x| g.exp(x)),
        OpCase::new("log", 3, 3, |g, x| {
            let e = g.exp(x)?;
            let s = g.add_scalar(e, 0.5)?;
            g.log(s)
        }),
        OpCase::new("relu", 3, 3, |g, x| g.relu(x)).with_kinks(&[0.0]),
        OpCase::new("clip", 4, 4, |g, x| g.clip(x, -0.5, 0.5)).with_kinks(&[-0.5, 0.5]),
        OpCase::new("softmax_rows", 3, 5, |g, x| g.softmax_rows(x)),
        OpCase::new("log_softmax_rows", 3, 5, |g, x| g.log_softmax_rows(x)),
        OpCase::new("layer_norm_rows", 3, 6, |g, x| g.layer_norm_rows(x, 1e-5)),
        OpCase::new("sum_all", 3, 4, |g, x| {
            let s = g.sum_all(x)?;
            g.mul(s, s)
        }),
        OpCase::new("mean_all", 3, 4, |g, x| {
            let s = g.mean_all(x)?;
            g.mul(s, s)
        }),
        OpCase::new("mean_rows", 4, 3, |g, x| g.mean_rows(x)),
        OpCase::new("max_rows", 5, 3, |g, x| g.max_rows(x)).with_column_ties(),
        OpCase::new("sum_cols", 4, 3, |g, x| g.sum_cols(x)),
        OpCase::new("attn_pool", 4, 3, |g, x| {
            let w = g.slice_cols(x, 0, 1)?;
            g.attn_pool(w, x)
        }),
        OpCase::new("concat_rows", 2, 3, |g, x| {
            let y = g.tanh(x)?;
            g.concat_rows(&[x, y, x])
        }),
        OpCase::new("concat_cols", 2, 3, |g, x| {
            let y = g.exp(x)?;
            g.concat_cols(&[y, x])
        }),
        OpCase::new("slice_rows", 4, 3, |g, x| g.slice_rows(x, 1, 3)),
        OpCase::new("slice_cols", 3, 4, |g, x| g.slice_cols(x, 1, 4)),
        OpCase::new("gather_rows", 3, 2, |g, x| g.gather_rows(x, vec![2, 0, 2, 1])),
    ]
}

/// Worst per-tensor relative error between backward and central differences
/// for every entry of `store`, with `f` recording a scalar loss.
pub fn param_gradcheck(
    store: &ParamStore,
    f: &dyn Fn(&mut Graph, &Bound) -> Result<NodeId, ModelError>,
) -> Result<(f64, String), String> {
    let run = |s: &ParamStore| -> Result<(Graph, Bound, NodeId), GraphError> {
        let mut g = Graph::new();
        let b = s.bind(&mut g)?;
        let out = f(&mut g, &b).map_err(|e| match e {
            ModelError::Graph(e) => e,
            other => GraphError::UnknownName(other.to_string()),
        })?;
        Ok((g, b, out))
    };
    let (g, b, out) = run(store).map_err(|e| e.to_string())?;
    let grads = g.backward_scalar(out).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    for (name, value) in store.iter() {
        let analytic = grads.wrt(b.id(name));
        let numeric = finite_diff_grad(
            |t| {
                let mut s = store.clone();
                s.insert(name.clone(), t.clone());
                let (g, _, out) = run(&s)?;
                Ok(g.value(out).item())
            },
            value,
            FD_EPS,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        let err = relative_error(&analytic, &numeric, FD_FLOOR);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}

fn projected(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId, ModelError> {
    let shape = g.value(y).shape().to_vec();
    let p = uniform(&mut rng(seed), &shape, 1.0);
    let pn = g.constant(p)?;
    let m = g.mul(y, pn)?;
    Ok(g.sum_all(m)?)
}

fn instance_suite(
    label: &str,
    mut make: impl FnMut(u64) -> Result<(ParamStore, Box<dyn Fn(&mut Graph, &Bound) -> Result<NodeId, ModelError>>), String>,
) -> Result<String, String> {
    let mut worst = (0.0f64, String::new());
    for i in 0..FD_INSTANCES as u64 {
        let (store, f) = make(i)?;
        let (err, name) = param_gradcheck(&store, f.as_ref())?;
        if err >= FD_TOL {
            return Err(format!("{label} instance {i}: {name} relative error {err:.3e}"));
        }
        if err > worst.0 {
            worst = (err, name);
        }
    }
    Ok(format!("{FD_INSTANCES} instances, worst {:.2e} ({})", worst.0, worst.1))
}

/// Gives every QA output layer nonzero weights so its gradient paths are
/// exercised (the default init zeroes them).
fn activate_qa(store: &mut ParamStore, r: &mut ModelRng) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with("qa.w2")).cloned().collect();
    for n in names {
        let shape = store.get(&n).expect("listed").shape().to_vec();
        store.insert(n, uniform(r, &shape, 1.0));
    }
}

fn cohort_attention_gradients() -> Result<String, String> {
    instance_suite("cohort_attention", |i| {
        let dims = AttentionDims::new(8, 2, 3).map_err(|e| e.to_string())?;
        let mut r = rng(200 + i);
        let mut store = ParamStore::new();
        McaaParams::init(&dims, &mut r).insert_into(&mut store, "attn.");
        activate_qa(&mut store, &mut r);
        store.insert("x", uniform(&mut r, &[5, 8], 1.0));
        let cohort = CohortId((i % 3) as usize);
        Ok((
            store,
            Box::new(move |g: &mut Graph, b: &Bound| {
                let nodes = McaaNodes::lookup(b, "attn.", &dims);
                let y = caa_attention(g, b.id("x"), cohort, &nodes, QueryMode::CohortAware)?;
                projected(g, y, 300 + i)
            }),
        ))
    })
}

fn small_cavit() -> CaVitConfig {
    CaVitConfig {
        channels: 1,
        side: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        cohorts: 3,
    }
}

fn cavit_gradients() -> Result<String, String> {
    instance_suite("cavit", |i| {
        let config = small_cavit();
        let mut params = EncoderParams::init(config, QueryMode::CohortAware, 400 + i).map_err(|e| e.to_string())?;
        let mut r = rng(500 + i);
        activate_qa(&mut params.store, &mut r);
        // the 0.02-scale token inits leave the class row nearly constant, so
        // its LayerNorm is steep enough to swamp a central difference
        let scale = 1.0 / (config.embed_dim as f64).sqrt();
        for name in ["cls", "pos"] {
            let shape = params.store.get(name).expect("token parameter").shape().to_vec();
            params.store.insert(name, uniform(&mut r, &shape, scale));
        }
        let pixels = uniform(&mut r, &[1, 8, 8], 1.0);
        let patches = patchify(&pixels, &config).map_err(|e| e.to_string())?;
        params.store.insert("input", patches);
        let cohort = CohortId((i % 3) as usize);
        Ok((
            params.store.clone(),
            Box::new(move |g: &mut Graph, b: &Bound| {
                let nodes = crate::cavit::EncoderNodes::lookup(b, &config)?;
                let f = encode_tile_graph(g, b.id("input"), cohort, &nodes, QueryMode::CohortAware)?;
                projected(g, f, 600 + i)
            }),
        ))
    })
}

fn mil_clear_of_kinks(kind: AggregatorKind, store: &ParamStore) -> bool {
    let bags = (0..3).map(|k| store.get(&format!("bag{k}")).expect("bag"));
    match kind {
        AggregatorKind::Max => bags.into_iter().all(columns_separated),
        AggregatorKind::Abmil => {
            let w = store.get("agg.embed.w").expect("embed");
            let b = store.get("agg.embed.b").expect("embed").data();
            bags.into_iter().all(|x| {
                let h = x.matmul(w);
                h.data().iter().enumerate().all(|(k, v)| (v + b[k % b.len()]).abs() >= KINK_MARGIN)
            })
        }
        AggregatorKind::Mean | AggregatorKind::Mha => true,
    }
}

fn mil_gradients() -> Result<String, String> {
    let mut out = Vec::new();
    for kind in [AggregatorKind::Mean, AggregatorKind::Max, AggregatorKind::Abmil, AggregatorKind::Mha] {
        let detail = instance_suite(&format!("mil.{kind:?}"), |i| {
            let config = MilConfig {
                heads: 2,
                ..MilConfig::new(kind, 4, 3)
            };
            // redraw until no ReLU input or column maximum sits at a kink
            let mut attempt = 0;
            let store = loop {
                let mut r = rng(700 + i + 1000 * attempt);
                attempt += 1;
                let mut store = MilParams::init(config, &mut r).map_err(|e| e.to_string())?.store;
                for (k, n) in [3usize, 5, 2].iter().enumerate() {
                    store.insert(format!("bag{k}"), uniform(&mut r, &[*n, 4], 1.0));
                }
                if mil_clear_of_kinks(kind, &store) {
                    break store;
                }
            };
            Ok((
                store,
                Box::new(move |g: &mut Graph, b: &Bound| {
                    let nodes = crate::mil::MilNodes {
                        config,
                        bound: b.clone(),
                    };
                    let zs = (0..3)
                        .map(|k| aggregate_graph(g, b.id(&format!("bag{k}")), &nodes))
                        .collect::<Result<Vec<_>, _>>()?;
                    let z = g.concat_rows(&zs)?;
                    let l = head_logits(g, z, &nodes)?;
                    let lp = g.log_softmax_rows(l)?;
                    mil_loss_graph(g, lp, &[0, 2, 1], &[0.5, 1.0, 2.0])
                }),
            ))
        })?;
        out.push(format!("{kind:?}: {detail}"));
    }
    Ok(out.join("; "))
}

fn mi_gradients() -> Result<String, String> {
    instance_suite("mi_adversary", |i| {
        let tau = if i % 2 == 0 { 5.0 } else { 0.3 };
        let est = MiEstimator::init(3, 2, MiConfig { hidden: 6, tau, ..Default::default() }, 800 + i)
            .map_err(|e| e.to_string())?;
        let mut store = est.store.clone();
        let mut r = rng(900 + i);
        store.insert("z", uniform(&mut r, &[4, 3], 1.0));
        store.insert("c", uniform(&mut r, &[4, 2], 1.0));
        Ok((
            store,
            Box::new(move |g: &mut Graph, b: &Bound| smile_graph(g, b.id("z"), b.id("c"), b, tau)),
        ))
    })
}

fn routing_cohort_zero() -> Result<String, String> {
    let config = small_cavit();
    let params = EncoderParams::init(config, QueryMode::CohortAware, 11).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g).map_err(|e| e.to_string())?;
    let mut feats = Vec::new();
    for k in 0..4 {
        let p = patchify(&uniform(&mut rng(k), &[1, 8, 8], 1.0), &config).map_err(|e| e.to_string())?;
        let pn = g.constant(p).map_err(|e| e.to_string())?;
        feats.push(encode_tile_graph(&mut g, pn, CohortId(0), &nodes, QueryMode::CohortAware).map_err(|e| e.to_string())?);
    }
    let cat = g.concat_rows(&feats).map_err(|e| e.to_string())?;
    let loss = projected(&mut g, cat, 3).map_err(|e| e.to_string())?;
    let grads = g.backward_scalar(loss).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for name in params.store.names() {
        if let Some(pos) = name.find("w_q_c.") {
            let c: usize = name[pos + 6..].parse().map_err(|_| format!("bad name {name}"))?;
            let gr = grads.wrt(nodes.bound.id(name));
            if c == 0 {
                ensure(gr.max_abs() > 0.0, || format!("{name} received no gradient"))?;
            } else {
                ensure(gr.data().iter().all(|&v| v == 0.0), || format!("{name} gradient is not exactly zero"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} foreign cohort query tensors exactly zero"))
}

fn reduction_plain_vit() -> Result<String, String> {
    let config = small_cavit();
    let plain = EncoderParams::init(config, QueryMode::DatasetOnly, 21).map_err(|e| e.to_string())?;
    let mut copied = plain.with_mode(QueryMode::CohortAware);
    let names: Vec<String> = copied.store.names().filter(|n| n.ends_with("w_q_d")).cloned().collect();
    for n in names {
        let w = copied.store.get(&n).expect("listed").clone();
        for c in 0..config.cohorts {
            copied.store.insert(n.replace("w_q_d", &format!("w_q_c.{c}")), w.clone());
        }
    }
    let mut a = TileEncoder::new(&plain).map_err(|e| e.to_string())?;
    let mut b = TileEncoder::new(&copied).map_err(|e| e.to_string())?;
    for k in 0..8u64 {
        let p = patchify(&uniform(&mut rng(50 + k), &[1, 8, 8], 2.0), &config).map_err(|e| e.to_string())?;
        let c = CohortId((k % 3) as usize);
        let x = a.encode_patches(&p, c).map_err(|e| e.to_string())?;
        let y = b.encode_patches(&p, c).map_err(|e| e.to_string())?;
        ensure(x.iter().zip(&y).all(|(u, v)| u.to_bits() == v.to_bits()), || {
            format!("tile {k}: outputs differ")
        })?;
    }
    Ok("8 tiles bitwise equal".into())
}

fn estimator_identities() -> Result<String, String> {
    let mut r = rng(31);
    let zero = Tensor::zeros(&[6, 6]);
    for tau in [5.0, f64::INFINITY] {
        let e = estimate_from_scores(&zero, tau).map_err(|e| e.to_string())?;
        ensure(e == 0.0, || format!("T = 0 gives {e} at tau {tau}"))?;
    }
    for _ in 0..10 {
        let t = uniform(&mut r, &[7, 7], 3.0);
        let a = estimate_from_scores(&t, f64::INFINITY).map_err(|e| e.to_string())?;
        let b = estimate_from_scores(&t, 1e300).map_err(|e| e.to_string())?;
        ensure((a - b).abs() <= 1e-12, || format!("unclipped {a} vs {b}"))?;
    }
    let est = MiEstimator::init(3, 2, MiConfig::default(), 4).map_err(|e| e.to_string())?;
    let z = uniform(&mut r, &[8, 3], 1.0);
    let c = uniform(&mut r, &[8, 2], 1.0);
    let s = est.estimate_with_tau(&z, &c, f64::INFINITY).map_err(|e| e.to_string())?;
    let m = est.mine_estimate(&z, &c).map_err(|e| e.to_string())?;
    ensure((s - m).abs() <= 1e-12, || format!("SMILE(tau=inf) {s} vs MINE {m}"))?;
    Ok("zero scores give 0; unclipped SMILE equals MINE".into())
}

fn balancing_weights() -> Result<String, String> {
    let mut r = rng(41);
    let slides: Vec<SlideTiles> = (0..20)
        .map(|i| SlideTiles {
            cohort: r.random_range(0..3),
            slide_id: format!("s{i}"),
            tiles: r.random_range(1..30),
        })
        .collect();
    let w = pretrain_weights(&slides).map_err(|e| e.to_string())?;
    let mut per = [0.0; 3];
    let mut total = 0.0;
    for (s, w) in slides.iter().zip(&w) {
        per[s.cohort] += w * s.tiles as f64;
        total += w * s.tiles as f64;
    }
    ensure((total - 1.0).abs() < 1e-12, || format!("tile weights sum to {total}"))?;
    let present: Vec<f64> = per.iter().copied().filter(|&v| v > 0.0).collect();
    ensure(present.iter().all(|v| (v - present[0]).abs() < 1e-12), || format!("cohort sums {per:?}"))?;
    let labels: Vec<SlideLabel> = (0..30)
        .map(|i| SlideLabel {
            cohort: i % 3,
            slide_id: format!("s{i}"),
            label: (i / 3) % 2,
        })
        .collect();
    let mw = mil_weights(&labels).map_err(|e| e.to_string())?;
    let mut combos = std::collections::BTreeMap::new();
    for (l, w) in labels.iter().zip(&mw) {
        *combos.entry((l.cohort, l.label)).or_insert(0.0) += w;
    }
    let first = *combos.values().next().expect("nonempty");
    ensure(combos.values().all(|v: &f64| (v - first).abs() < 1e-12), || format!("combination sums {combos:?}"))?;
    let mut example = vec![1.0; 9];
    example.push(20.0);
    let clipped = clip_weights(&example).map_err(|e| e.to_string())?;
    let mean = 2.9;
    let std = ((9.0 * 1.9f64.powi(2) + 17.1f64.powi(2)) / 10.0).sqrt();
    ensure((clipped[9] - (mean + 2.0 * std)).abs() < 1e-12, || format!("clipped max {}", clipped[9]))?;
    let b = batch_renormalize(&[0.2, 3.0, 0.0, 1.1]).map_err(|e| e.to_string())?;
    ensure((b.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12, || "batch mean is not 1".into())?;
    Ok("sums, clipping example and unit batch mean hold".into())
}

/// ρ = 0.8 bivariate Gaussian: true MI is −½·ln(1 − ρ²).
fn gaussian_oracle() -> Result<String, String> {
    let rho: f64 = 0.8;
    let truth = -0.5 * (1.0 - rho * rho).ln();
    let (z, c) = gaussian_pairs(rho, 10_000, 61);
    let config = MiConfig {
        hidden: 64,
        tau: 5.0,
        adam: AdamConfig { lr: 5e-3, ..Default::default() },
        ..Default::default()
    };
    let mut est = MiEstimator::init(1, 1, config, 62).map_err(|e| e.to_string())?;
    est.fit(&z, &c, 1000, 64, 63).map_err(|e| e.to_string())?;
    let value = mean_estimate(&est, &z, &c, 128, 40, 64)?;
    ensure((value - truth).abs() <= 0.1, || format!("estimate {value:.4}, truth {truth:.4}"))?;
    Ok(format!("estimate {value:.4}, truth {truth:.4}"))
}

/// `n` draws of `(z, c)` with unit variances and correlation `rho`.
pub fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let (mut z, mut c) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        z.push(a);
        c.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (Tensor::matrix(n, 1, z), Tensor::matrix(n, 1, c))
}

/// Mean SMILE estimate over `batches` random batches of `size` rows.
pub fn mean_estimate(est: &MiEstimator, z: &Tensor, c: &Tensor, size: usize, batches: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..batches {
        let idx = rand::seq::index::sample(&mut r, z.rows(), size).into_vec();
        let zb = Tensor::from_rows(&idx.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let cb = Tensor::from_rows(&idx.iter().map(|&i| c.row(i).to_vec()).collect::<Vec<_>>());
        total += est.smile_estimate(&zb, &cb).map_err(|e| e.to_string())?;
    }
    Ok(total / batches as f64)
}

/// Area under the empirical ROC by the trapezoid rule over distinct
/// thresholds.
fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // twice the area in units of one (1/n × 1/p) cell, kept integral
    let (mut tp, mut fp, mut area2) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] { tp += 1 } else { fp += 1 }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
    }
    Some(area2 as f64 / (2 * p * n) as f64)
}

fn auc_oracle() -> Result<String, String> {
    let mut r = rng(71);
    for case in 0..500 {
        let n = r.random_range(2..=20);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let a = auc(&scores, &pos);
        let b = trapezoid_auc(&scores, &pos);
        ensure(a == b, || format!("case {case}: pair counting {a:?} vs trapezoid {b:?}"))?;
    }
    Ok("500 cases with ties agree exactly".into())
}

fn split_leakage() -> Result<String, String> {
    let data = generate(&SynthConfig {
        instance: InstanceKind::Features { d: 2 },
        tiles_per_slide: [1, 2],
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let folds = stratified_patient_kfold(&data, 5, 3).map_err(|e| e.to_string())?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, f) in folds.iter().enumerate() {
        let tr = Fold::patients(&data, &f.train);
        let va = Fold::patients(&data, &f.val);
        let te = Fold::patients(&data, &f.test);
        ensure(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te), || {
            format!("fold {i}: patient leakage")
        })?;
        for p in te {
            ensure(seen.insert(p.clone()), || format!("patient {p:?} tested twice"))?;
        }
    }
    ensure(seen.len() == data.patients().len(), || "some patients never tested".into())?;
    Ok(format!("{} patients, 5 folds, no leakage", seen.len()))
}
