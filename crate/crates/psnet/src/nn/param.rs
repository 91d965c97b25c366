//! Deterministic named-parameter registry.
//!
//! Every learnable tensor is created through a [`ParamStore`] scope so that
//! (a) initialization is a pure function of the store seed and the creation
//! order, (b) the optimizer and checkpointing see one flat, sorted name space,
//! and (c) stage-wise training can load sub-trees by name prefix.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization scheme for a parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { mean: f64, std: f64 },
    /// He initialization for layers followed by a rectifier.
    KaimingNormal { fan_in: usize },
    /// Symmetric uniform, the usual affine-layer default.
    UniformSym { bound: f64 },
}

struct StoreInner {
    params: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    device: Device,
    dtype: DType,
    seed: u64,
}

/// Shared parameter store; cloning yields a handle onto the same storage
/// with an extended name prefix.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<StoreInner>,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(StoreInner {
                params: Mutex::new(BTreeMap::new()),
                buffers: Mutex::new(BTreeMap::new()),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                device: Device::Cpu,
                dtype,
                seed,
            }),
            prefix: String::new(),
        }
    }

    pub fn scope(&self, name: &str) -> ParamStore {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamStore {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn draw(&self, count: usize, init: Init) -> Vec<f64> {
        let mut rng = self.inner.rng.lock().unwrap();
        match init {
            Init::Const(c) => vec![c; count],
            Init::Normal { mean, std } => (0..count)
                .map(|_| mean + std * gaussian(&mut rng))
                .collect(),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| std * gaussian(&mut rng)).collect()
            }
            Init::UniformSym { bound } => {
                (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        }
    }

    /// Creates (or fetches) a trainable parameter. Re-fetching an existing
    /// name must use the same shape.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut params = self.inner.params.lock().unwrap();
        if let Some(var) = params.get(&full) {
            if var.dims() != shape {
                return Err(Error::ShapeMismatch {
                    context: format!("parameter {full}"),
                    expected: format!("{:?}", var.dims()),
                    actual: format!("{shape:?}"),
                });
            }
            return Ok(var.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let data = self.draw(count, init);
        let t = Tensor::from_vec(data, shape, &self.inner.device)?
            .to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        params.insert(full, var);
        Ok(tensor)
    }

    /// Creates (or fetches) a non-trainable state buffer (e.g. running
    /// statistics). Buffers are checkpointed but never updated by the
    /// optimizer; the module mutates them through the returned `Var`.
    pub fn buffer(&self, name: &str, shape: &[usize], fill: f64) -> Result<Var> {
        let full = self.full_name(name);
        let mut buffers = self.inner.buffers.lock().unwrap();
        if let Some(var) = buffers.get(&full) {
            return Ok(var.clone());
        }
        let t = Tensor::full(fill, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        buffers.insert(full, var.clone());
        Ok(var)
    }

    /// All trainable parameters, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.inner
            .params
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// All state buffers, sorted by name.
    pub fn state_buffers(&self) -> Vec<(String, Var)> {
        self.inner
            .buffers
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn num_params(&self) -> usize {
        self.inner
            .params
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrites parameters and buffers from `values`. When `prefixes` is
    /// given, only names under one of the prefixes are loaded; otherwise
    /// every stored name must be present in `values`.
    pub fn load_values(
        &self,
        values: &BTreeMap<String, Tensor>,
        prefixes: Option<&[&str]>,
    ) -> Result<usize> {
        let mut loaded = 0;
        let wants = |name: &str| match prefixes {
            None => true,
            Some(ps) => ps.iter().any(|p| {
                name == *p || name.starts_with(&format!("{p}."))
            }),
        };
        for map in [&self.inner.params, &self.inner.buffers] {
            let guard = map.lock().unwrap();
            for (name, var) in guard.iter() {
                if !wants(name) {
                    continue;
                }
                let value = values.get(name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor '{name}' in checkpoint"))
                })?;
                if value.dims() != var.dims() {
                    return Err(Error::ShapeMismatch {
                        context: format!("checkpoint tensor {name}"),
                        expected: format!("{:?}", var.dims()),
                        actual: format!("{:?}", value.dims()),
                    });
                }
                var.set(&value.to_dtype(var.dtype())?)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Box-Muller transform; two uniform draws per call keeps the stream layout
/// independent of the rand_distr crate version.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
