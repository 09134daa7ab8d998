use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::NUM_PARTS;

/// Partition of the latent space into one contiguous subspace per part.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SubspaceLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl SubspaceLayout {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Config(format!("subspace dims must be positive and non-empty, got {dims:?}")));
        }
        let offsets = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        Ok(SubspaceLayout {
            dims: dims.to_vec(),
            offsets,
        })
    }

    /// Like [`SubspaceLayout::new`] but also requires one subspace per sprite part.
    pub fn for_parts(dims: &[usize]) -> Result<Self> {
        if dims.len() != NUM_PARTS {
            return Err(Error::Config(format!(
                "expected {NUM_PARTS} subspace dims (one per part), got {}",
                dims.len()
            )));
        }
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn count(&self) -> usize {
        self.dims.len()
    }

    pub fn total(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn d_max(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(0)
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.dims[i]
    }

    /// Subspace owning latent coordinate `k`.
    pub fn owner(&self, k: usize) -> Option<usize> {
        (0..self.count()).find(|&i| self.range(i).contains(&k))
    }
}

impl Default for SubspaceLayout {
    fn default() -> Self {
        SubspaceLayout::new(&[12, 8, 4, 4, 4]).expect("valid default layout")
    }
}

impl TryFrom<Vec<usize>> for SubspaceLayout {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        SubspaceLayout::new(&dims)
    }
}

impl From<SubspaceLayout> for Vec<usize> {
    fn from(l: SubspaceLayout) -> Self {
        l.dims
    }
}
