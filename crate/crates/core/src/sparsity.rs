//! Binary prune masks: prune-count arithmetic, global magnitude selection,
//! application and inversion.
//!
//! Masks are congruent with a full [`ParameterSet`], but only weight tensors
//! are ever pruned; bias entries are always 1.

use crate::error::{FamError, Result};
use crate::model::{ParameterSet, Role};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

/// `true` marks an active weight, `false` a pruned one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    entries: Vec<MaskEntry>,
}

impl PruneMask {
    pub fn new(entries: Vec<MaskEntry>) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.bits.len() {
                return Err(FamError::Dimension {
                    op: "mask",
                    left: e.shape.clone(),
                    right: vec![e.bits.len()],
                });
            }
        }
        Ok(PruneMask { entries })
    }

    fn filled(template: &ParameterSet, value: bool) -> Self {
        PruneMask {
            entries: template
                .iter()
                .map(|p| MaskEntry {
                    name: p.name.clone(),
                    role: p.role,
                    shape: p.tensor.shape().to_vec(),
                    bits: vec![value; p.tensor.len()],
                })
                .collect(),
        }
    }

    pub fn all_ones(template: &ParameterSet) -> Self {
        Self::filled(template, true)
    }

    pub fn all_zeros(template: &ParameterSet) -> Self {
        Self::filled(template, false)
    }

    /// Rebuilds a mask with `template`'s layout from concatenated bits.
    pub fn from_bits(template: &ParameterSet, bits: &[bool]) -> Result<Self> {
        if bits.len() != template.total_count() {
            return Err(FamError::Dimension {
                op: "mask_from_bits",
                left: vec![template.total_count()],
                right: vec![bits.len()],
            });
        }
        let mut offset = 0;
        let mut mask = Self::all_ones(template);
        for e in &mut mask.entries {
            let n = e.bits.len();
            e.bits.copy_from_slice(&bits[offset..offset + n]);
            offset += n;
        }
        Ok(mask)
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.entries.iter().flat_map(|e| e.bits.iter().copied())
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    pub fn ones_count(&self) -> usize {
        self.bits().filter(|&b| b).count()
    }

    pub fn zeros_count(&self) -> usize {
        self.total_count() - self.ones_count()
    }

    /// Fraction of pruned entries among weight tensors.
    pub fn prunable_sparsity(&self) -> f64 {
        let (mut total, mut zeros) = (0usize, 0usize);
        for e in self.entries.iter().filter(|e| e.role.is_prunable()) {
            total += e.bits.len();
            zeros += e.bits.iter().filter(|&&b| !b).count();
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    pub fn check_congruent(&self, params: &ParameterSet, op: &'static str) -> Result<()> {
        let ok = self.entries.len() == params.len()
            && self
                .entries
                .iter()
                .zip(params.iter())
                .all(|(e, p)| e.name == p.name && e.shape.as_slice() == p.tensor.shape());
        if ok {
            Ok(())
        } else {
            Err(FamError::Contract(format!(
                "{op}: mask layout does not match the parameter set"
            )))
        }
    }

    /// True when `params` is exactly zero wherever the mask is 0.
    pub fn covers_zeros_of(&self, params: &ParameterSet) -> bool {
        self.entries.iter().zip(params.iter()).all(|(e, p)| {
            e.bits
                .iter()
                .zip(p.tensor.data())
                .all(|(&keep, &v)| keep || v == 0.0)
        })
    }
}

/// Number of entries to drop: existing zeros plus `floor(rate · nonzero)`.
pub fn prune_count(total: usize, nonzero: usize, prune_rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&prune_rate) {
        return Err(FamError::Input(format!(
            "prune rate {prune_rate} outside [0, 1]"
        )));
    }
    if nonzero > total {
        return Err(FamError::Input(format!(
            "nonzero count {nonzero} exceeds total {total}"
        )));
    }
    Ok((total - nonzero) + (prune_rate * nonzero as f64).floor() as usize)
}

/// Global magnitude pruning over all weight tensors.
///
/// The `p` smallest-magnitude weights (ties ordered by tensor then flat
/// index) are masked out, where `p` comes from [`prune_count`]. Existing
/// zeros are always masked out.
pub fn sparsify(weights: &ParameterSet, prune_rate: f64) -> Result<PruneMask> {
    if !weights.is_finite() {
        return Err(FamError::Input("cannot sparsify non-finite weights".into()));
    }
    let mut mask = PruneMask::all_ones(weights);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (t, p) in weights.iter().enumerate() {
        if p.role.is_prunable() {
            for (i, &v) in p.tensor.data().iter().enumerate() {
                candidates.push((v.abs(), t, i));
            }
        }
    }
    let total = candidates.len();
    let zeros = candidates.iter().filter(|c| c.0 == 0.0).count();
    let p = prune_count(total, total - zeros, prune_rate)?;

    if p == zeros {
        // nothing beyond existing zeros: mask is the nonzero indicator
        for (e, w) in mask.entries.iter_mut().zip(weights.iter()) {
            if e.role.is_prunable() {
                for (b, &v) in e.bits.iter_mut().zip(w.tensor.data()) {
                    *b = v != 0.0;
                }
            }
        }
        return Ok(mask);
    }

    candidates.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, t, i) in &candidates[..p] {
        mask.entries[t].bits[i] = false;
    }
    Ok(mask)
}

/// Elementwise product: masked-out entries become exactly `0.0`, kept entries
/// are copied bit for bit.
pub fn apply_mask(params: &ParameterSet, mask: &PruneMask) -> Result<ParameterSet> {
    mask.check_congruent(params, "apply_mask")?;
    let mut out = params.clone();
    for (p, e) in out.entries_mut().iter_mut().zip(&mask.entries) {
        for (v, &keep) in p.tensor.data_mut().iter_mut().zip(&e.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn invert_mask(mask: &PruneMask) -> PruneMask {
    PruneMask {
        entries: mask
            .entries
            .iter()
            .map(|e| MaskEntry {
                bits: e.bits.iter().map(|b| !b).collect(),
                ..e.clone()
            })
            .collect(),
    }
}
