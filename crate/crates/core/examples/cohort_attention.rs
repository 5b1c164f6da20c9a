//! Cohort-aware attention on a handful of tokens.
//!
//! Shows the per-token mixing weights between the dataset-wide and the
//! cohort-specific query, and that a batch from one cohort leaves every
//! other cohort's query bank with an exactly-zero gradient.
//!
//! ```text
//! cargo run --release --example cohort_attention
//! ```

use cohort_mil::cohort_attention::{
    caa_attention, cohort_aware_query, project_qkv, query_attention_weights, AttentionDims, CohortId, McaaNodes,
    McaaParams, QueryMode,
};
use cohort_mil::diffcore::{Graph, ParamStore};
use cohort_mil::init::{rng, uniform};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = AttentionDims::new(8, 2, 3)?;
    let mut r = rng(7);
    let mut store = ParamStore::new();
    McaaParams::init(&dims, &mut r).insert_into(&mut store, "attn.");
    // at init the QA output layer is zero and every cohort query is a near
    // copy of the shared one, so the split is even; stand in for training by
    // perturbing both
    for h in 0..dims.heads {
        store.insert(format!("attn.h{h}.qa.w2"), uniform(&mut r, &[dims.qa_hidden, 1], 2.0));
        for c in 0..dims.cohorts {
            store.insert(format!("attn.h{h}.w_q_c.{c}"), uniform(&mut r, &[dims.d, dims.d_k], 1.0));
        }
    }
    let tokens = uniform(&mut r, &[5, dims.d], 1.0);

    for cohort in [CohortId(0), CohortId(2)] {
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let nodes = McaaNodes::lookup(&bound, "attn.", &dims);
        let x = g.constant(tokens.clone())?;

        let (bank, qa) = &nodes.heads[0];
        let qkv = project_qkv(&mut g, x, cohort, bank)?;
        let s_d = query_attention_weights(&mut g, qkv.q_d, qa)?;
        let s_c = query_attention_weights(&mut g, qkv.q_c, qa)?;
        let mixed = cohort_aware_query(&mut g, qkv.q_d, qkv.q_c, s_d, s_c)?;
        let alpha_d: Vec<String> = g.value(mixed.alpha_d).data().iter().map(|a| format!("{a:.3}")).collect();
        println!("cohort {}: head 0 alpha_d per token = [{}]", cohort.0, alpha_d.join(", "));

        let out = caa_attention(&mut g, x, cohort, &nodes, QueryMode::CohortAware)?;
        let loss = g.sum_all(out)?;
        let grads = g.backward_scalar(loss)?;
        for c in 0..dims.cohorts {
            let id = bound.id(&format!("attn.h0.w_q_c.{c}"));
            println!("  |grad w_q_c.{c}|_max = {:.3e}", grads.wrt(id).max_abs());
        }
    }
    Ok(())
}
