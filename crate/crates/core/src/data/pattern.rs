use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the cluster size for which all `2^m` patterns may be listed.
pub const DEFAULT_PATTERN_CAP: usize = 20;

/// A binary treatment vector over the units of one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct TreatmentPattern {
    bits: Vec<u8>,
}

impl TreatmentPattern {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidInput(format!("pattern entry {b} is not binary")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(m: usize) -> Self {
        Self { bits: vec![0; m] }
    }

    pub fn ones(m: usize) -> Self {
        Self { bits: vec![1; m] }
    }

    /// Pattern number `index` in lexicographic order; the first unit is the most significant bit.
    pub fn from_index(index: u64, m: usize) -> Self {
        Self {
            bits: (0..m).map(|i| bit_of(index, m, i)).collect(),
        }
    }

    /// Lexicographic position of this pattern. Only meaningful for `len() < 64`.
    pub fn index(&self) -> u64 {
        index_of(&self.bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn treated(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub(crate) fn check_len(&self, m: usize) -> Result<()> {
        if self.len() != m {
            return Err(Error::dim(format!("pattern of length {} applied to a cluster of {m} units", self.len())));
        }
        Ok(())
    }
}

impl TryFrom<Vec<u8>> for TreatmentPattern {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        TreatmentPattern::new(bits)
    }
}

impl From<TreatmentPattern> for Vec<u8> {
    fn from(p: TreatmentPattern) -> Self {
        p.bits
    }
}

#[inline]
pub(crate) fn bit_of(index: u64, m: usize, i: usize) -> u8 {
    ((index >> (m - 1 - i)) & 1) as u8
}

pub(crate) fn index_of(bits: &[u8]) -> u64 {
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
}

pub(crate) fn check_cap(m: usize, cap: usize) -> Result<()> {
    if m > cap || m >= 63 {
        return Err(Error::CapExceeded { size: m, cap });
    }
    Ok(())
}

/// All `2^m` patterns of a cluster of size `m`, in lexicographic order.
pub fn enumerate_patterns(m: usize, cap: usize) -> Result<Vec<TreatmentPattern>> {
    if m == 0 {
        return Err(Error::InvalidInput("cluster size must be at least 1".into()));
    }
    check_cap(m, cap)?;
    Ok((0..1u64 << m).map(|j| TreatmentPattern::from_index(j, m)).collect())
}
