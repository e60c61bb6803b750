use std::collections::HashSet;

use crate::error::{FamError, Result};
use crate::tensor::Tensor;

/// Whether a tensor takes part in pruning and sparsity counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub fn is_prunable(self) -> bool {
        matches!(self, Role::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Ordered, uniquely named collection of all trainable tensors of one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub nonzero: usize,
}

impl ParamCount {
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.nonzero as f64 / self.total as f64
        }
    }
}

impl ParameterSet {
    pub fn new(entries: Vec<Param>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &entries {
            if !seen.insert(p.name.as_str()) {
                return Err(FamError::Contract(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role.is_prunable())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// All values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for p in &self.entries {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Rebuilds a parameter set with `self`'s layout from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != self.total_count() {
            return Err(FamError::Dimension {
                op: "unflatten",
                left: vec![self.total_count()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let n = p.tensor.len();
            entries.push(Param {
                name: p.name.clone(),
                role: p.role,
                tensor: Tensor::from_vec(p.tensor.shape(), flat[offset..offset + n].to_vec())?,
            });
            offset += n;
        }
        Ok(ParameterSet { entries })
    }

    pub fn zeros_like(&self) -> ParameterSet {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    tensor: p.tensor.map(&f),
                })
                .collect(),
        }
    }

    /// Same names, roles and shapes in the same order.
    pub fn check_congruent(&self, other: &ParameterSet, op: &'static str) -> Result<()> {
        let same = self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.role == b.role && a.tensor.shape() == b.tensor.shape()
            });
        if same {
            Ok(())
        } else {
            Err(FamError::Dimension {
                op,
                left: self.entries.iter().map(|p| p.tensor.len()).collect(),
                right: other.entries.iter().map(|p| p.tensor.len()).collect(),
            })
        }
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &ParameterSet) -> Result<()> {
        self.check_congruent(other, "axpy")?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.tensor.data_mut().iter_mut().zip(b.tensor.data()) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.tensor.is_finite())
    }

    /// Exact bit patterns of every value, for bitwise comparisons.
    pub fn to_bits(&self) -> Vec<u64> {
        self.entries
            .iter()
            .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Total and nonzero entry counts over every tensor.
pub fn count_params(params: &ParameterSet) -> ParamCount {
    count_where(params, |_| true)
}

/// Counts restricted to prunable (weight) tensors.
pub fn count_prunable(params: &ParameterSet) -> ParamCount {
    count_where(params, |p| p.role.is_prunable())
}

fn count_where(params: &ParameterSet, keep: impl Fn(&Param) -> bool) -> ParamCount {
    let mut total = 0;
    let mut nonzero = 0;
    for p in params.iter().filter(|p| keep(p)) {
        total += p.tensor.len();
        nonzero += p.tensor.data().iter().filter(|&&v| v != 0.0).count();
    }
    ParamCount { total, nonzero }
}
