//! Named parameter storage.
//!
//! A model's parameter layout is declared once, by a builder function that asks
//! a [`ParamSource`] for each tensor in a fixed order. At construction the
//! source is an [`Initializer`] that draws values; on every forward pass it is
//! a [`Binder`] that hands out graph leaves over the stored buffers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn census(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[index].value)
    }

    pub fn set(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let i = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        if value.len() != self.entries[i].numel() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has {} entries, got {}",
                self.entries[i].numel(),
                value.len()
            )));
        }
        self.entries[i].value = Arc::new(value);
        Ok(())
    }

    /// Graph leaves over the stored buffers, one per entry, in order.
    pub fn leaves(&self, requires_grad: bool) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::shared(&e.shape, e.value.clone(), requires_grad).expect("stored shapes are valid"))
            .collect()
    }

    pub(crate) fn from_entries(entries: Vec<ParamEntry>) -> Self {
        ParamStore { entries }
    }
}

/// Hands out parameter tensors in declaration order.
pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Draws fresh values: `Normal` entries from N(0, std²) in declaration order.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    store: ParamStore,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        Ok(Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
            store: ParamStore::default(),
        })
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

impl ParamSource for Initializer {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.get(name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let value: Vec<f64> = match init {
            Init::Normal => (0..n).map(|_| self.normal.sample(&mut self.rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let value = Arc::new(value);
        self.store.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: value.clone(),
        });
        Tensor::shared(shape, value, false)
    }
}

/// Replays a declaration against existing tensors, checking names and shapes.
pub struct Binder<'a> {
    names: &'a [ParamEntry],
    tensors: &'a [Tensor],
    cursor: usize,
}

impl<'a> Binder<'a> {
    pub fn new(names: &'a [ParamEntry], tensors: &'a [Tensor]) -> Self {
        Binder {
            names,
            tensors,
            cursor: 0,
        }
    }

    /// Fails unless every tensor was consumed.
    pub fn finish(self) -> Result<()> {
        if self.cursor != self.tensors.len() {
            return Err(Error::Contract(format!(
                "parameter layout consumed {} of {} tensors",
                self.cursor,
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

impl ParamSource for Binder<'_> {
    fn take(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let (Some(entry), Some(t)) = (self.names.get(self.cursor), self.tensors.get(self.cursor)) else {
            return Err(Error::Contract(format!("parameter `{name}` missing from store")));
        };
        if entry.name != name || t.shape() != shape {
            return Err(Error::Contract(format!(
                "parameter layout mismatch at #{}: expected `{name}` {shape:?}, found `{}` {:?}",
                self.cursor,
                entry.name,
                t.shape()
            )));
        }
        self.cursor += 1;
        Ok(t.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn declare(src: &mut impl ParamSource) -> Result<(Tensor, Tensor)> {
        Ok((src.take("a", &[2, 3], Init::Normal)?, src.take("b", &[3], Init::Ones)?))
    }

    #[test]
    fn initializer_then_binder_replays_layout() {
        let mut init = Initializer::new(7, 0.5).unwrap();
        declare(&mut init).unwrap();
        let store = init.finish();
        assert_eq!(store.census(), 9);
        assert_eq!(*store.get("b").unwrap().value, vec![1.0; 3]);

        let leaves = store.leaves(true);
        let mut binder = Binder::new(store.entries(), &leaves);
        let (a, _) = declare(&mut binder).unwrap();
        binder.finish().unwrap();
        assert!(a.requires_grad());
        assert_eq!(a.data(), &store.entries()[0].value[..]);
    }

    #[test]
    fn same_seed_same_values() {
        let draw = |seed| {
            let mut init = Initializer::new(seed, 0.02).unwrap();
            declare(&mut init).unwrap();
            init.finish().entries()[0].value.to_vec()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn binder_rejects_mismatched_layout() {
        let mut init = Initializer::new(0, 1.0).unwrap();
        init.take("x", &[2], Init::Zeros).unwrap();
        let store = init.finish();
        let leaves = store.leaves(false);
        let mut binder = Binder::new(store.entries(), &leaves);
        assert!(binder.take("y", &[2], Init::Zeros).is_err());
        assert!(binder.take("x", &[3], Init::Zeros).is_err());
    }
}
