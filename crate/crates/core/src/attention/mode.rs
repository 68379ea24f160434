use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Which similarity the attention layers use.
///
/// `Vicinity2D` is the full method; the others are ablations that share the
/// same parameter layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// ReLU kernel re-weighted by `cos(da) + cos(db)` on the 2D token grid.
    #[default]
    #[serde(alias = "vicinity")]
    Vicinity2D,
    /// ReLU kernel re-weighted by the cosine of the flattened index distance.
    #[serde(rename = "1dlocality", alias = "locality1d")]
    Locality1D,
    /// Plain ReLU-kernel linear attention.
    #[serde(rename = "nolocality")]
    NoLocality,
    /// Quadratic softmax attention.
    #[serde(rename = "softmax")]
    SoftmaxOracle,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Vicinity2D,
        AttentionMode::Locality1D,
        AttentionMode::NoLocality,
        AttentionMode::SoftmaxOracle,
    ];

    pub const LINEAR: [AttentionMode; 3] = [
        AttentionMode::Vicinity2D,
        AttentionMode::Locality1D,
        AttentionMode::NoLocality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Vicinity2D => "vicinity2d",
            AttentionMode::Locality1D => "1dlocality",
            AttentionMode::NoLocality => "nolocality",
            AttentionMode::SoftmaxOracle => "softmax",
        }
    }

    pub fn is_linear(self) -> bool {
        self != AttentionMode::SoftmaxOracle
    }

    /// Width multiplier of the angle expansion (`d' = factor * d`).
    pub fn expansion_factor(self) -> Option<usize> {
        match self {
            AttentionMode::Vicinity2D => Some(4),
            AttentionMode::Locality1D => Some(2),
            AttentionMode::NoLocality => Some(1),
            AttentionMode::SoftmaxOracle => None,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseModeError(pub String);

impl fmt::Display for ParseModeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown attention mode {:?} (expected vicinity2d, 1dlocality, nolocality or softmax)",
            self.0
        )
    }
}

impl std::error::Error for ParseModeError {}

impl FromStr for AttentionMode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vicinity2d" | "vicinity" => Ok(AttentionMode::Vicinity2D),
            "1dlocality" | "locality1d" => Ok(AttentionMode::Locality1D),
            "nolocality" | "none" => Ok(AttentionMode::NoLocality),
            "softmax" | "softmaxoracle" => Ok(AttentionMode::SoftmaxOracle),
            _ => Err(ParseModeError(s.to_string())),
        }
    }
}
