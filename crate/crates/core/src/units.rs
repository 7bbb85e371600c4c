use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Logarithm base used for entropies, mutual information and the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

impl LogBase {
    /// Size of one bit in this unit (`ln 2` for nats).
    pub fn one_bit(self) -> f64 {
        match self {
            LogBase::Nats => std::f64::consts::LN_2,
            LogBase::Bits => 1.0,
        }
    }

    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            LogBase::Nats => nats,
            LogBase::Bits => nats / std::f64::consts::LN_2,
        }
    }

    pub fn to_nats(self, value: f64) -> f64 {
        match self {
            LogBase::Nats => value,
            LogBase::Bits => value * std::f64::consts::LN_2,
        }
    }
}

impl fmt::Display for LogBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogBase::Nats => "nats",
            LogBase::Bits => "bits",
        })
    }
}

impl FromStr for LogBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nats" => Ok(LogBase::Nats),
            "bits" => Ok(LogBase::Bits),
            other => Err(format!("unknown log base `{other}` (expected bits or nats)")),
        }
    }
}
