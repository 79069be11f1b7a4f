use indexmap::IndexMap;

use super::{EngineError, Tensor};

/// One trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        Self {
            grad: Tensor::zeros_like(&value),
            m: Tensor::zeros_like(&value),
            v: Tensor::zeros_like(&value),
            value,
            t: 0,
        }
    }
}

/// Named parameters in insertion order.
///
/// Insertion order is the serialization order of checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), EngineError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(EngineError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param, EngineError> {
        self.params
            .get(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, EngineError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, EngineError> {
        self.get(name).map(|p| &p.value)
    }

    /// Overwrites a value; the shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), EngineError> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Copies every parameter of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<(), EngineError> {
        for (name, p) in other.iter() {
            self.insert(format!("{prefix}{name}"), p.value.clone())?;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.params
                    .insert(rest.to_string(), Param::new(p.value.clone()));
            }
        }
        out
    }
}
