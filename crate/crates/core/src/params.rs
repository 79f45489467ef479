//! Named, seeded trainable parameters.
//!
//! Candle's CPU device cannot be seeded, so every trainable tensor is drawn
//! from a ChaCha stream owned by the store. Construction order is part of the
//! model definition and therefore reproducible.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±1/sqrt(fan_in)`, the usual default for conv and linear layers.
    FanIn(usize),
    Uniform(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Builder handle with a name prefix; clones share one store.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<RefCell<Inner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.vars.contains_key(&full), "parameter {full} registered twice");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| inner.rng.gen_range(-bound..bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    pub fn into_store(self) -> ParamStore {
        let vars = self.inner.borrow().vars.clone();
        ParamStore { vars }
    }
}

/// Trainable parameters of a model instance, keyed by dotted name.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter; later updates do not affect it.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `state`; names and shapes must match exactly.
    pub fn load(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing: Vec<_> = self.vars.keys().filter(|k| !state.contains_key(*k)).cloned().collect();
        let extra: Vec<_> = state.keys().filter(|k| !self.vars.contains_key(*k)).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter names differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, var) in &self.vars {
            let t = &state[name];
            if t.shape() != var.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.copy()?)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

/// SHA-256 over names and little-endian `f64` values, in iteration order.
pub fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
