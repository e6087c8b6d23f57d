//! Observation modalities and bundles with a declared prioritization split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Proprio,
    VisionGrid,
    State,
}

/// One typed observation stream. `dim` is the per-frame dimension; bundle
/// values are flattened over the observation horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub kind: ModalityKind,
}

/// Per-modality observation vectors with a prioritization split: the first
/// `priority_k` modalities are the prioritized set y^{1:k}.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    specs: Vec<ModalitySpec>,
    values: Vec<Vec<f64>>,
    priority_k: usize,
    horizon: usize,
}

impl ObservationBundle {
    pub fn new(
        specs: Vec<ModalitySpec>,
        values: Vec<Vec<f64>>,
        priority_k: usize,
        horizon: usize,
    ) -> Result<Self> {
        let m = specs.len();
        if m < 2 {
            return Err(Error::invalid("bundle needs at least 2 modalities"));
        }
        if values.len() != m {
            return Err(Error::invalid("one value vector per modality required"));
        }
        if priority_k == 0 || priority_k >= m {
            return Err(Error::invalid(format!(
                "priority_k={priority_k} must be in [1, {m})"
            )));
        }
        for (spec, v) in specs.iter().zip(&values) {
            if spec.dim == 0 {
                return Err(Error::invalid(format!("modality {} has dim 0", spec.name)));
            }
            if v.len() != spec.dim * horizon {
                return Err(Error::invalid(format!(
                    "modality {}: value len {} != dim {} x horizon {horizon}",
                    spec.name,
                    v.len(),
                    spec.dim
                )));
            }
        }
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != m {
            return Err(Error::invalid("modality names must be unique"));
        }
        Ok(ObservationBundle {
            specs,
            values,
            priority_k,
            horizon,
        })
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn num_modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn priority_k(&self) -> usize {
        self.priority_k
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn value(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    /// All modality values, in declaration order.
    pub fn all_values(&self) -> Vec<&[f64]> {
        self.values.iter().map(|v| v.as_slice()).collect()
    }

    /// Values of the prioritized modalities y^{1:k}.
    pub fn prioritized_values(&self) -> Vec<&[f64]> {
        self.values[..self.priority_k]
            .iter()
            .map(|v| v.as_slice())
            .collect()
    }

    /// Flattened value dims per modality (dim x horizon).
    pub fn value_dims(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.dim * self.horizon).collect()
    }

    /// Replace the listed modalities with the given null tokens. Dropping a
    /// prioritized modality (index < k) is rejected: CFG training only ever
    /// switches out the weaker modalities.
    pub fn with_dropped(&self, indices: &[usize], null_tokens: &[Vec<f64>]) -> Result<Self> {
        let mut out = self.clone();
        for &m in indices {
            if m >= self.specs.len() {
                return Err(Error::invalid(format!("modality index {m} out of range")));
            }
            if m < self.priority_k {
                return Err(Error::invalid(format!(
                    "cannot drop prioritized modality {} (index {m} < k={})",
                    self.specs[m].name, self.priority_k
                )));
            }
            let token = null_tokens
                .get(m)
                .ok_or_else(|| Error::invalid(format!("no null token for modality {m}")))?;
            if token.len() != out.values[m].len() {
                return Err(Error::invalid(format!(
                    "null token len {} != value len {} for modality {m}",
                    token.len(),
                    out.values[m].len()
                )));
            }
            out.values[m] = token.clone();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ObservationBundle {
        ObservationBundle::new(
            vec![
                ModalitySpec { name: "prop".into(), dim: 2, kind: ModalityKind::Proprio },
                ModalitySpec { name: "vis".into(), dim: 3, kind: ModalityKind::VisionGrid },
            ],
            vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]],
            1,
            1,
        )
        .unwrap()
    }

    #[test]
    fn drop_empty_is_identity() {
        let b = bundle();
        let d = b.with_dropped(&[], &[]).unwrap();
        assert_eq!(b, d);
    }

    #[test]
    fn drop_weak_modality() {
        let b = bundle();
        let tokens = vec![vec![], vec![9.0, 9.0, 9.0]];
        let d = b.with_dropped(&[1], &tokens).unwrap();
        assert_eq!(d.value(1), &[9.0, 9.0, 9.0]);
        assert_eq!(d.value(0), b.value(0));
    }

    #[test]
    fn drop_prioritized_rejected() {
        let b = bundle();
        let tokens = vec![vec![0.0, 0.0], vec![0.0; 3]];
        assert!(b.with_dropped(&[0], &tokens).is_err());
    }

    #[test]
    fn bad_dims_rejected() {
        let specs = vec![
            ModalitySpec { name: "a".into(), dim: 2, kind: ModalityKind::State },
            ModalitySpec { name: "b".into(), dim: 1, kind: ModalityKind::State },
        ];
        assert!(ObservationBundle::new(specs, vec![vec![1.0], vec![1.0]], 1, 1).is_err());
    }
}
