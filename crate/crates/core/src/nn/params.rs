use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
    trainable: bool,
}

/// Named parameter storage with name-seeded deterministic initialisation.
///
/// Every parameter is initialised from an RNG keyed on `(store seed, full name)`,
/// so construction order never changes the values.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                dtype,
                seed,
                trainable: true,
            })),
        }
    }

    /// A store whose parameters are handed out detached: gradients flow through
    /// them to the inputs but never accumulate on the weights.
    pub fn frozen(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let store = Self::new(dtype, 0);
        store.load(&tensors)?;
        store.inner.lock().unwrap().trainable = false;
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.lock().unwrap().trainable
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Overwrites (or inserts) parameters from a tensor map.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let dtype = inner.dtype;
        for (name, t) in tensors {
            let t = t.to_dtype(dtype)?;
            match inner.vars.get(name) {
                Some(v) => {
                    if v.dims() != t.dims() {
                        return Err(Error::shape("ParamStore::load", v.dims(), t.dims()));
                    }
                    v.set(&t)?;
                }
                None => {
                    inner.vars.insert(name.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        Ok(())
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.vars.values().map(|v| v.elem_count()).sum()
    }

    fn get_or_init(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != dims {
                return Err(Error::shape("ParamStore::get", dims, v.dims()));
            }
            return Ok(if inner.trainable {
                v.as_tensor().clone()
            } else {
                v.as_tensor().detach()
            });
        }
        if !inner.trainable {
            return Err(Error::Checkpoint(format!("frozen store has no parameter `{name}`")));
        }
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid("init", e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
}

impl Params {
    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, dims, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::new(DType::F32, 3);
        let b = ParamStore::new(DType::F32, 3);
        let a1 = a.root().get(&[4, 4], "x", Init::Normal(1.0)).unwrap();
        let _ = a.root().get(&[2], "y", Init::Normal(1.0)).unwrap();
        let _ = b.root().get(&[2], "y", Init::Normal(1.0)).unwrap();
        let b1 = b.root().get(&[4, 4], "x", Init::Normal(1.0)).unwrap();
        let d = (a1 - b1).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn frozen_store_rejects_unknown_names() {
        let s = ParamStore::new(DType::F32, 0);
        s.root().get(&[3], "w", Init::Ones).unwrap();
        let f = ParamStore::frozen(s.tensors(), DType::F32).unwrap();
        assert!(f.root().get(&[3], "w", Init::Zeros).is_ok());
        assert!(f.root().get(&[3], "other", Init::Zeros).is_err());
    }
}
