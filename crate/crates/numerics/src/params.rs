use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    version: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(
            name,
            Parameter {
                value: Arc::new(value),
                trainable,
            },
        );
        self.version += 1;
        Ok(())
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(NumericsError::Config(format!("duplicate parameter {name}")));
            }
            self.params.insert(name, p);
        }
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| NumericsError::Config(format!("missing parameter {name}")))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::Config(format!("missing parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::Shape {
                op: "set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        self.version += 1;
        Ok(())
    }

    /// Mutable access to a parameter's data for in-place updates.
    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::Config(format!("missing parameter {name}")))?;
        self.version += 1;
        Ok(Arc::make_mut(&mut p.value).data_mut())
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn numel(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf; trainable ones are tracked.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf_shared(Arc::clone(&p.value), p.trainable)))
            .collect();
        Bindings { vars }
    }
}

/// Tape handles for a bound [`ParameterStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients accumulated on `tape` for every tracked parameter.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.is_tracked(**v))
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Scope helper producing `prefix.name` keys.
#[derive(Clone, Copy, Debug)]
pub struct Scope<'a> {
    pub bindings: &'a Bindings,
    pub prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn new(bindings: &'a Bindings, prefix: &'a str) -> Self {
        Self { bindings, prefix }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.bindings.get(&format!("{}.{}", self.prefix, name))
    }
}
