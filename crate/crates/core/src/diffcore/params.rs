use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, GraphError, NodeId, Tensor};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Parameter name to node id, for one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    /// Node for parameter `name`. Panics when the name was never bound,
    /// which is a programming error in the model code.
    pub fn id(&self, name: &str) -> NodeId {
        match self.ids.get(name) {
            Some(&id) => id,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { tensors }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound, GraphError> {
        let mut ids = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            ids.insert(name.clone(), g.param(name, t.clone())?);
        }
        Ok(Bound { ids })
    }

    /// Registers every tensor as a leaf behind a stop-gradient, so the
    /// returned ids carry values but never pass gradient to the leaves.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound, GraphError> {
        let mut ids = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let leaf = g.param(name, t.clone())?;
            ids.insert(name.clone(), g.stop_grad(leaf)?);
        }
        Ok(Bound { ids })
    }

    /// Gradient of every stored parameter; exact zeros where no path exists.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> GradMap {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let g = bound
                    .get(name)
                    .map(|id| grads.wrt(id))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn zero_grads(&self) -> GradMap {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Adds `src * scale` into `dst`, entry by entry.
pub fn accumulate(dst: &mut GradMap, src: &GradMap, scale: f64) {
    for (k, v) in src {
        match dst.get_mut(k) {
            Some(d) => d.add_scaled(v, scale),
            None => {
                let mut t = Tensor::zeros(v.shape());
                t.add_scaled(v, scale);
                dst.insert(k.clone(), t);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state over a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::matrix(1, 2, vec![0.3, -1.7]));
        let before = p.clone();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::matrix(1, 2, vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        adam.step(&mut p, &grads);
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn zero_grad_leaves_params_bitwise() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::matrix(1, 2, vec![0.3, -1.7]));
        let before = p.clone();
        let grads = p.zero_grads();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grads);
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(2.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let x = p.get("x").unwrap().item();
            let mut g = GradMap::new();
            g.insert("x".into(), Tensor::scalar(2.0 * x));
            adam.step(&mut p, &g);
        }
        assert!(p.get("x").unwrap().item().abs() < 1e-2);
    }
}
