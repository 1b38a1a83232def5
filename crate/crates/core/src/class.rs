//! The fixed six-class tissue vocabulary.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const CLASS_COUNT: usize = 6;

/// Tissue classes in their canonical order. The discriminant is the class
/// index used by every model artifact and probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TissueClass {
    Epithelium = 0,
    Stroma = 1,
    Lymphocytes = 2,
    Adipose = 3,
    Artifact = 4,
    Miscellaneous = 5,
}

impl TissueClass {
    pub const ALL: [TissueClass; CLASS_COUNT] = [
        TissueClass::Epithelium,
        TissueClass::Stroma,
        TissueClass::Lymphocytes,
        TissueClass::Adipose,
        TissueClass::Artifact,
        TissueClass::Miscellaneous,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Epithelium => "Epithelium",
            TissueClass::Stroma => "Stroma",
            TissueClass::Lymphocytes => "Lymphocytes",
            TissueClass::Adipose => "Adipose",
            TissueClass::Artifact => "Artifact",
            TissueClass::Miscellaneous => "Miscellaneous",
        }
    }

    /// Default display color (RGB) used by overlays and GeoJSON export.
    pub fn color(self) -> [u8; 3] {
        match self {
            TissueClass::Epithelium => [220, 40, 160],
            TissueClass::Stroma => [240, 150, 40],
            TissueClass::Lymphocytes => [40, 70, 220],
            TissueClass::Adipose => [250, 230, 60],
            TissueClass::Artifact => [30, 30, 30],
            TissueClass::Miscellaneous => [40, 190, 110],
        }
    }

    /// Keyboard binding used by the annotation console (1-6).
    pub fn shortcut(self) -> char {
        char::from(b'1' + self as u8)
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tissue class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for TissueClass {
    type Err = UnknownClass;

    /// Accepts the canonical name (case-insensitive) or the 1-based shortcut digit.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if let Ok(n) = trimmed.parse::<usize>() {
            if (1..=CLASS_COUNT).contains(&n) {
                return Ok(Self::ALL[n - 1]);
            }
        }
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

/// Per-class tallies, indexed by [`TissueClass`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [u64; CLASS_COUNT]);

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn add(&mut self, class: TissueClass) {
        self.0[class.index()] += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (TissueClass, u64)> + '_ {
        TissueClass::ALL.iter().map(move |&c| (c, self.0[c.index()]))
    }
}

impl Index<TissueClass> for ClassCounts {
    type Output = u64;
    fn index(&self, class: TissueClass) -> &u64 {
        &self.0[class.index()]
    }
}

impl IndexMut<TissueClass> for ClassCounts {
    fn index_mut(&mut self, class: TissueClass) -> &mut u64 {
        &mut self.0[class.index()]
    }
}

impl std::ops::AddAssign for ClassCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}
