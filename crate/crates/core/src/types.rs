//! Labels and small value types shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary intent label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe,
    Unsafe,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Safe, Label::Unsafe];

    /// Class index: safe = 0, unsafe = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Safe => 0,
            Label::Unsafe => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Safe
        } else {
            Label::Unsafe
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Safe => Label::Unsafe,
            Label::Unsafe => Label::Safe,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Safe => "safe",
            Label::Unsafe => "unsafe",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "safe" => Ok(Label::Safe),
            "unsafe" => Ok(Label::Unsafe),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Provenance of a knowledge-base entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Seed,
    Feedback,
    Synthetic,
    Adversarial,
}

/// Hex-encoded SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
