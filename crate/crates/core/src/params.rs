//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

/// Ordered table of named weights. Ids are insertion indices and stay stable for the
/// lifetime of the store.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value: Arc::new(value) });
        ParamId(id)
    }

    /// Normal-initialised convolution kernel `[cout, cin, k, k]` with std `gain / sqrt(fan_in)`
    /// (`gain = sqrt(2)` is He initialisation).
    pub fn conv_kernel(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).unwrap();
        let shape = Shape::new(cout, cin, k, k);
        let data = (0..shape.numel()).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
        self.insert(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn zeros(&mut self, name: &str, shape: Shape) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored {} vs model {}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.value.as_ref()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter id.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Current learning rate after scheduling.
    pub lr: f64,
    pub step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, lr: config.lr, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let n = store.len();
        if self.first.len() < n {
            self.first.resize_with(n, || None);
            self.second.resize_with(n, || None);
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(eps);
        for (id, g) in grads {
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment buffers by parameter id, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> {
        self.first.iter().zip(&self.second).enumerate().filter_map(|(i, (m, v))| {
            Some((ParamId(i), m.as_ref()?, v.as_ref()?))
        })
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) {
        if self.first.len() <= id.0 {
            self.first.resize_with(id.0 + 1, || None);
            self.second.resize_with(id.0 + 1, || None);
        }
        self.first[id.0] = Some(m);
        self.second[id.0] = Some(v);
    }
}
