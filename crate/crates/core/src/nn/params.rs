//! Named, seeded parameter storage shared by every layer of a model.
//!
//! Parameters are candle [`Var`]s keyed by a dotted path. Each one is drawn
//! from its own RNG stream derived from the store seed and its path, so
//! initial values do not depend on construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Optimizer partition a trainable parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

#[derive(Default)]
struct Inner {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Var>,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
    dtype: DType,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .field("params", &inner.params.len())
            .field("buffers", &inner.buffers.len())
            .finish()
    }
}

fn path_hash(path: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner::default())),
            device,
            dtype,
            seed,
        }
    }

    pub fn cpu(dtype: DType, seed: u64) -> Self {
        Self::new(Device::Cpu, dtype, seed)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self, group: ParamGroup) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
            group,
        }
    }

    fn init_tensor(&self, path: &str, shape: &Shape, init: Init) -> Result<Tensor> {
        match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device),
            Init::Ones => Tensor::ones(shape, self.dtype, &self.device),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ path_hash(path));
                let values: Vec<f64> = (0..shape.elem_count())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)
            }
        }
    }

    fn param(&self, path: String, shape: Shape, init: Init, group: ParamGroup) -> Result<Tensor> {
        if let Some(p) = self.lock().params.get(&path) {
            if p.var.shape() != &shape {
                candle_core::bail!(
                    "parameter {path} already registered with shape {:?}, requested {:?}",
                    p.var.shape(),
                    shape
                );
            }
            return Ok(p.var.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.init_tensor(&path, &shape, init)?)?;
        let tensor = var.as_tensor().clone();
        self.lock().params.insert(path, Param { var, group });
        Ok(tensor)
    }

    fn buffer(&self, path: String, shape: Shape, init: Init) -> Result<Var> {
        if let Some(v) = self.lock().buffers.get(&path) {
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.init_tensor(&path, &shape, init)?)?;
        self.lock().buffers.insert(path, var.clone());
        Ok(var)
    }

    /// Trainable parameters in path order.
    pub fn params(&self) -> Vec<(String, Param)> {
        self.lock()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Non-trainable state (normalization running statistics) in path order.
    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get_param(&self, path: &str) -> Option<Param> {
        self.lock().params.get(path).cloned()
    }

    pub fn get_buffer(&self, path: &str) -> Option<Var> {
        self.lock().buffers.get(path).cloned()
    }

    /// Scalar count of trainable parameters whose path starts with `prefix`.
    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }
}

/// Scoped view into a [`ParamStore`] used while constructing layers.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store.clone(),
            prefix,
            group: self.group,
        }
    }

    pub fn with_group(&self, group: ParamGroup) -> Self {
        Self {
            group,
            ..self.clone()
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        self.store
            .param(self.path(name), shape.into(), init, self.group)
    }

    pub fn buffer<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Var> {
        self.store.buffer(self.path(name), shape.into(), init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::cpu(DType::F32, 3);
        let b = ParamStore::cpu(DType::F32, 3);
        let ra = a.root(ParamGroup::Rest);
        let rb = b.root(ParamGroup::Rest);
        let x1 = ra.get("x", (4, 4), Init::KaimingNormal { fan_in: 4 }).unwrap();
        let _y1 = ra.get("y", (4, 4), Init::KaimingNormal { fan_in: 4 }).unwrap();
        let _y2 = rb.get("y", (4, 4), Init::KaimingNormal { fan_in: 4 }).unwrap();
        let x2 = rb.get("x", (4, 4), Init::KaimingNormal { fan_in: 4 }).unwrap();
        let d = (x1 - x2).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn different_seeds_differ() {
        let a = ParamStore::cpu(DType::F64, 1).root(ParamGroup::Rest);
        let b = ParamStore::cpu(DType::F64, 2).root(ParamGroup::Rest);
        let x = a.get("w", 16, Init::KaimingNormal { fan_in: 1 }).unwrap();
        let y = b.get("w", 16, Init::KaimingNormal { fan_in: 1 }).unwrap();
        assert_ne!(x.to_vec1::<f64>().unwrap(), y.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn repeated_get_shares_storage_and_checks_shape() {
        let store = ParamStore::cpu(DType::F32, 0);
        let root = store.root(ParamGroup::Backbone).pp("block");
        let w = root.get("w", (2, 3), Init::Zeros).unwrap();
        assert!(root.get("w", (3, 2), Init::Zeros).is_err());
        let p = store.get_param("block.w").unwrap();
        assert_eq!(p.group, ParamGroup::Backbone);
        p.var.set(&Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(w.sum_all().unwrap().to_scalar::<f32>().unwrap(), 6.0);
        assert_eq!(store.parameter_count("block"), 6);
        assert_eq!(store.parameter_count("other"), 0);
    }
}
