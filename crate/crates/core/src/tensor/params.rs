use std::collections::BTreeMap;

use super::{axpy, dot, Tape, Tensor, TensorError, Var};

/// Named collection of learnable arrays.
///
/// Entries are kept in name order, so every traversal (and therefore every
/// floating-point reduction over the store) is deterministic. Snapshots are
/// plain clones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    fn check_compatible(&self, other: &Self) -> Result<(), TensorError> {
        for (k, v) in &self.entries {
            let o = other
                .entries
                .get(k)
                .ok_or_else(|| TensorError::MissingParam(k.clone()))?;
            if o.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "param_store",
                    lhs: v.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        if other.entries.len() != self.entries.len() {
            let extra = other
                .entries
                .keys()
                .find(|k| !self.entries.contains_key(*k))
                .cloned()
                .unwrap_or_default();
            return Err(TensorError::MissingParam(extra));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<(), TensorError> {
        self.check_compatible(other)?;
        for (k, v) in self.entries.iter_mut() {
            axpy(v.data_mut(), alpha, other.entries[k].data());
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.entries.values_mut() {
            for x in v.data_mut() {
                *x *= c;
            }
        }
    }

    /// Inner product over every scalar of both stores.
    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_compatible(other)?;
        Ok(self
            .entries
            .iter()
            .map(|(k, v)| dot(v.data(), other.entries[k].data()))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .map(|v| dot(v.data(), v.data()))
            .sum::<f64>()
            .sqrt()
    }

    /// All scalars flattened in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.entries.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Register every array as a trainable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k, v)))
                .collect(),
        }
    }

    /// Register every array as a constant (no gradient) on `tape`.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for the arrays of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in vals {
            s.insert(*k, Tensor::vector(v.clone()));
        }
        s
    }

    #[test]
    fn add_scaled_and_dot() {
        let mut a = store(&[("a", vec![1.0, 2.0]), ("b", vec![3.0])]);
        let b = store(&[("a", vec![1.0, 1.0]), ("b", vec![-1.0])]);
        assert_eq!(a.dot(&b).unwrap(), 0.0);
        a.add_scaled(2.0, &b).unwrap();
        assert_eq!(a.flatten(), vec![3.0, 4.0, 1.0]);
    }

    #[test]
    fn incompatible_stores_are_rejected() {
        let mut a = store(&[("a", vec![1.0, 2.0])]);
        let b = store(&[("a", vec![1.0])]);
        assert!(a.add_scaled(1.0, &b).is_err());
        let c = store(&[("z", vec![1.0, 2.0])]);
        assert!(matches!(a.dot(&c), Err(TensorError::MissingParam(_))));
    }
}
