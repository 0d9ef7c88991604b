//! Named parameter storage, tape binding and checkpoint conversion.

use std::collections::HashMap;
use std::path::Path;

use gradkit::checkpoint::{load_tensors, save_tensors};
use gradkit::{Gradients, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered parameter list; order fixes checkpoint layout and Adam slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.position(name).is_some() {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        Ok(())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.params[i].tensor)
            .ok_or_else(|| Error::Lookup(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].tensor),
            None => Err(Error::Lookup(format!("no parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().filter(|p| p.trainable).map(|p| &mut p.tensor).collect()
    }

    /// Puts every parameter on `tape`; trainable ones as variables.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = if p.trainable {
                    tape.variable(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self.params.iter().map(|p| (p.name.clone(), tape.constant(p.tensor.clone()))).collect();
        Bound { vars }
    }

    /// Replaces each trainable parameter's gradient with the one in `grads`.
    pub fn load_gradients(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.tensor.zero_grad();
            grads.accumulate_into(bound.get(&p.name)?, &mut p.tensor)?;
        }
        Ok(())
    }

    /// Rounds every value to what the checkpoint stores (32-bit floats), so
    /// a model evaluates the same before saving and after loading.
    pub fn round_to_checkpoint(&mut self) {
        for p in &mut self.params {
            for v in p.tensor.data_mut() {
                *v = T::from_f64_lossy(v.as_f64() as f32 as f64);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
        Ok(save_tensors(path, &entries)?)
    }

    /// Overwrites every parameter from a checkpoint; names and shapes must
    /// match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = load_tensors::<T>(path)?;
        if entries.len() != self.params.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {} tensors, model expects {}", entries.len(), self.params.len()),
            ));
        }
        for (name, tensor) in entries {
            let i = self
                .position(&name)
                .ok_or_else(|| Error::format(path, format!("unexpected tensor `{name}`")))?;
            let slot = &mut self.params[i];
            if slot.tensor.shape() != tensor.shape() {
                return Err(Error::format(
                    path,
                    format!("`{name}` has shape {:?}, expected {:?}", tensor.shape(), slot.tensor.shape()),
                ));
            }
            let trainable = slot.trainable;
            slot.tensor = tensor.with_requires_grad(trainable);
        }
        Ok(())
    }

    /// SHA-256 over the names, shapes and values of the parameters whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| {
                let sq: f64 = p.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
                (p.name.clone(), sq.sqrt())
            })
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of one store on one tape, looked up by name.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn from_vars(vars: Vec<(String, Var<'t, T>)>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Lookup(format!("no parameter `{name}` bound")))
    }

    pub fn vars(&self) -> HashMap<&str, Var<'t, T>> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v)).collect()
    }
}

/// Uniform initialiser in `[-bound, bound]`.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

/// He-uniform bound for a layer followed by ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Bound giving unit-variance outputs for unit-variance inputs (no ReLU).
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}
