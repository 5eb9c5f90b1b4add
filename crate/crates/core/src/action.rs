//! Multi-dimensional categorical actions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `D` dimensions with `M` categories each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpace {
    pub dims: usize,
    pub categories: usize,
}

impl ActionSpace {
    pub fn new(dims: usize, categories: usize) -> Self {
        assert!(dims >= 1 && categories >= 2, "action space needs D >= 1 and M >= 2");
        Self { dims, categories }
    }

    /// Width of the flattened `D x M` latent.
    pub fn latent_dim(&self) -> usize {
        self.dims * self.categories
    }

    /// `M^D`, saturating.
    pub fn size(&self) -> u128 {
        (self.categories as u128).saturating_pow(self.dims as u32)
    }

    /// `M^D` if it is at most `limit`.
    pub fn enumerable(&self, limit: u128) -> Result<usize> {
        let size = self.size();
        if size > limit {
            return Err(Error::Capacity { actions: size, limit });
        }
        Ok(size as usize)
    }

    /// Flat index with dimension 0 most significant.
    pub fn index_of(&self, action: &CategoricalAction) -> usize {
        action.0.iter().fold(0, |acc, &a| acc * self.categories + a)
    }

    pub fn action_at(&self, mut index: usize) -> CategoricalAction {
        let mut dims = vec![0; self.dims];
        for d in (0..self.dims).rev() {
            dims[d] = index % self.categories;
            index /= self.categories;
        }
        CategoricalAction(dims)
    }

    /// Every action in flat-index order. Panics past the enumeration limit.
    pub fn all_actions(&self) -> impl Iterator<Item = CategoricalAction> + '_ {
        let n = self.enumerable(crate::ENUMERATION_LIMIT).expect("action space too large to enumerate");
        (0..n).map(|i| self.action_at(i))
    }

    pub fn check(&self, action: &CategoricalAction) -> Result<()> {
        if action.0.len() != self.dims || action.0.iter().any(|&a| a >= self.categories) {
            return Err(Error::ActionOutOfRange {
                action: action.0.clone(),
                dims: self.dims,
                categories: self.categories,
            });
        }
        Ok(())
    }

    /// One-hot encoding of length `D*M`.
    pub fn one_hot(&self, action: &CategoricalAction) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim()];
        for (d, &a) in action.0.iter().enumerate() {
            out[d * self.categories + a] = 1.0;
        }
        out
    }
}

/// One index per dimension, each in `0..M`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoricalAction(pub Vec<usize>);

impl CategoricalAction {
    pub fn new(dims: Vec<usize>) -> Self {
        Self(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for CategoricalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<usize>> for CategoricalAction {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}
