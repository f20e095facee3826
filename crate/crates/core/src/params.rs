//! Named, seeded parameter storage for one network (or one optimizer group).

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// A flat, ordered collection of trainable variables.
///
/// Initial values are drawn from a private ChaCha stream, so two stores
/// built with the same seed and the same sequence of registrations hold
/// bit-identical weights.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: Shape) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Argument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Registers a parameter drawn from N(0, std²).
    pub fn normal<S: Into<Shape>>(&mut self, name: &str, shape: S, std: f64) -> Result<Tensor> {
        let shape = shape.into();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let values = (0..shape.elem_count())
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        self.register(name, values, shape)
    }

    /// Registers a parameter drawn from U(-bound, bound).
    pub fn uniform<S: Into<Shape>>(&mut self, name: &str, shape: S, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = (0..shape.elem_count())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, values, shape)
    }

    pub fn zeros<S: Into<Shape>>(&mut self, name: &str, shape: S) -> Result<Tensor> {
        let shape = shape.into();
        self.register(name, vec![0.0; shape.elem_count()], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites parameters in place from `values`; names and shapes must match exactly.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} does not match {:?}",
                    src.shape(),
                    var.shape()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Hash over the exact bit patterns of all parameters.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in &self.vars {
            name.hash(&mut h);
            let values: Vec<f64> = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1()?;
            for v in values {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }
}

/// Tensor of standard-normal draws from `rng`.
pub fn standard_normal<R: Rng + ?Sized, S: Into<Shape>>(
    rng: &mut R,
    shape: S,
    dtype: DType,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
