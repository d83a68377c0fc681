use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tensor)>) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, t) in pairs {
            set.insert(name, t)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.map.insert(name, t);
        Ok(())
    }

    /// Replaces an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.map.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_owned()))?;
        if slot.shape() != t.shape() {
            return Err(AutodiffError::Shape {
                op: "set",
                detail: format!("`{name}`: {:?} vs {:?}", slot.shape(), t.shape()),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            map: self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Appends all entries of `other`.
    pub fn extend(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k, v.clone())?;
        }
        Ok(())
    }

    /// Fresh tracked leaves holding the same values.
    pub fn to_leaves(&self) -> ParamSet {
        self.map_tensors(|t| t.detach().into_leaf())
    }

    pub fn detach(&self) -> ParamSet {
        self.map_tensors(Tensor::detach)
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map_tensors(|t| Tensor::zeros(t.shape()))
    }

    fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> ParamSet {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), f(v))).collect() }
    }

    fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(AutodiffError::Invalid(format!("{} vs {} parameters", self.len(), other.len())));
        }
        for ((a, ta), (b, tb)) in self.map.iter().zip(other.map.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(AutodiffError::Shape {
                    op: "param-set",
                    detail: format!("`{a}` {:?} vs `{b}` {:?}", ta.shape(), tb.shape()),
                });
            }
        }
        Ok(())
    }

    /// One SGD step `p - lr * g` per entry, recorded as update nodes.
    pub fn sgd_step(&self, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        self.check_aligned(grads)?;
        let mut out = ParamSet::new();
        for ((k, p), (_, g)) in self.map.iter().zip(grads.map.iter()) {
            out.insert(k.clone(), p.sgd_update(g, lr)?)?;
        }
        Ok(out)
    }

    /// `self + s * other`, untracked.
    pub fn axpy(&self, s: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_aligned(other)?;
        let mut out = ParamSet::new();
        for ((k, a), (_, b)) in self.map.iter().zip(other.map.iter()) {
            let v = a.values().iter().zip(b.values()).map(|(x, y)| x + s * y).collect();
            out.insert(k.clone(), Tensor::new(a.shape(), v)?)?;
        }
        Ok(out)
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.map.iter().zip(other.map.iter()).all(|((a, ta), (b, tb))| a == b && ta.bit_eq(tb))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.map.iter().zip(other.map.iter()).map(|((_, a), (_, b))| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    pub fn to_flat(&self) -> FlatParams {
        FlatParams { entries: self.map.iter().map(|(k, t)| (k.clone(), t.shape().to_vec(), t.to_vec())).collect() }
    }
}

/// Plain-data parameter snapshot, safe to move across threads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl FlatParams {
    pub fn to_params(&self) -> Result<ParamSet> {
        ParamSet::from_pairs(
            self.entries
                .iter()
                .map(|(k, s, v)| Tensor::new(s, v.clone()).map(|t| (k.clone(), t)))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}
