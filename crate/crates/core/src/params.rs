//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered name → tensor table. Insertion order is the canonical order
/// used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// One graph leaf per parameter, indexed by [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Zero-filled tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }

    /// Replaces all values from `(name, tensor)` pairs in canonical order.
    /// The first name or shape that diverges is reported.
    pub fn assign(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        check_keys(&self.names, entries.iter().map(|(n, _)| n.as_str()))?;
        for (slot, (name, t)) in self.tensors.iter_mut().zip(entries) {
            if slot.shape() != t.shape() {
                return Err(Error::KeyMismatch {
                    expected: format!("{name}{:?}", slot.shape()),
                    found: format!("{name}{:?}", t.shape()),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Checks that `found` lists exactly `expected`, in order.
pub fn check_keys<'a>(
    expected: &[String],
    found: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let mut found = found.into_iter();
    for e in expected {
        match found.next() {
            Some(f) if f == e => {}
            Some(f) => {
                return Err(Error::KeyMismatch {
                    expected: e.clone(),
                    found: f.to_string(),
                })
            }
            None => {
                return Err(Error::KeyMismatch {
                    expected: e.clone(),
                    found: "<end of table>".into(),
                })
            }
        }
    }
    if let Some(extra) = found.next() {
        return Err(Error::KeyMismatch {
            expected: "<end of table>".into(),
            found: extra.to_string(),
        });
    }
    Ok(())
}

/// Normal samples with |x| ≤ 2·std, redrawn until inside the band.
pub fn truncated_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}
