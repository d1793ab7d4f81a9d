//! Named, seeded parameter storage.
//!
//! Parameters are created on first request from a ChaCha stream owned by the
//! store, so construction order plus seed fully determines initial values.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// Glorot uniform over the first two dims.
    XavierUniform,
    /// Identity matrix for square 2D shapes.
    Identity,
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Owns every trainable tensor of a model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every variable with the value of the same name in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.vars() {
            let src = other
                .get(&name)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    fn get_or_init(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.shape() != &shape {
                candle_core::bail!(
                    "parameter {name} requested with shape {shape:?}, stored as {:?}",
                    v.shape()
                );
            }
            return Ok(v.as_tensor().clone());
        }
        let values = sample_init(&mut inner.rng, &shape, init)?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

fn sample_init(rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Result<Vec<f64>> {
    let n = shape.elem_count();
    let dims = shape.dims();
    Ok(match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        Init::Normal(std) => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::XavierUniform => {
            let (fan_in, fan_out) = match dims {
                [a, b, ..] => (*a, *b),
                [a] => (*a, *a),
                [] => (1, 1),
            };
            let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..=b)).collect()
        }
        Init::Identity => match dims {
            [r, c] if r == c => (0..n)
                .map(|i| if i / c == i % c { 1.0 } else { 0.0 })
                .collect(),
            _ => candle_core::bail!("identity init needs a square matrix, got {dims:?}"),
        },
    })
}

/// A view of a [`ParamStore`] under a dotted name prefix.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
}

impl Params {
    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        self.store.get_or_init(self.full_name(name), shape.into(), init)
    }

    /// The variable behind a tensor previously created with [`Params::get`].
    pub fn var(&self, name: &str) -> Option<Var> {
        self.store.get(&self.full_name(name))
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = ParamStore::new(DType::F64, 3);
        let b = ParamStore::new(DType::F64, 3);
        let ta = a.root().pp("x").get((4, 5), "w", Init::XavierUniform).unwrap();
        let tb = b.root().pp("x").get((4, 5), "w", Init::XavierUniform).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert_eq!(a.vars()[0].0, "x.w");
    }

    #[test]
    fn second_request_returns_the_same_var() {
        let s = ParamStore::new(DType::F32, 0);
        let t1 = s.root().get(3, "b", Init::Zeros).unwrap();
        let t2 = s.root().get(3, "b", Init::Const(9.0)).unwrap();
        assert_eq!(t1.id(), t2.id());
        assert!(s.root().get(4, "b", Init::Zeros).is_err());
    }

    #[test]
    fn identity_init() {
        let s = ParamStore::new(DType::F64, 0);
        let t = s.root().get((3, 3), "i", Init::Identity).unwrap();
        assert_eq!(
            t.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]
        );
    }
}
