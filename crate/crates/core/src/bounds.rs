//! The positivity threshold β.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest usable β; "extreme probability" is meaningless at or above one half.
pub const BETA_CEILING: f64 = 0.5 - 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("sample size {0} too small for the Gruber bound (need n >= 2)")]
    TooSmall(usize),
    #[error("beta must lie in (0, 0.5), got {0}")]
    OutOfRange(f64),
    #[error("invalid beta '{0}': expected 'gruber' or a number in (0, 0.5)")]
    Unparsable(String),
}

/// Sample-size adaptive propensity truncation bound `5 / (sqrt(n) ln n)`.
pub fn gruber_bound(n: usize) -> Result<f64, BoundsError> {
    if n < 2 {
        return Err(BoundsError::TooSmall(n));
    }
    let n = n as f64;
    Ok(5.0 / (n.sqrt() * n.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpec {
    Fixed(f64),
    Gruber,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBeta {
    pub value: f64,
    pub warning: Option<String>,
}

impl BetaSpec {
    pub fn fixed(value: f64) -> Result<Self, BoundsError> {
        if value > 0.0 && value < 0.5 {
            Ok(BetaSpec::Fixed(value))
        } else {
            Err(BoundsError::OutOfRange(value))
        }
    }

    /// β for a subset of `n` rows. Gruber values at or above one half are
    /// clamped just below it, with a warning.
    pub fn resolve(&self, n: usize) -> Result<ResolvedBeta, BoundsError> {
        match *self {
            BetaSpec::Fixed(v) => {
                if v > 0.0 && v < 0.5 {
                    Ok(ResolvedBeta { value: v, warning: None })
                } else {
                    Err(BoundsError::OutOfRange(v))
                }
            }
            BetaSpec::Gruber => {
                let b = gruber_bound(n)?;
                if b >= 0.5 {
                    Ok(ResolvedBeta {
                        value: BETA_CEILING,
                        warning: Some(format!(
                            "Gruber bound {b:.3} for n={n} is not below 0.5; clamped to just under 0.5"
                        )),
                    })
                } else {
                    Ok(ResolvedBeta { value: b, warning: None })
                }
            }
        }
    }
}

impl FromStr for BetaSpec {
    type Err = BoundsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("gruber") {
            return Ok(BetaSpec::Gruber);
        }
        let v: f64 = s.parse().map_err(|_| BoundsError::Unparsable(s.to_string()))?;
        BetaSpec::fixed(v)
    }
}

impl fmt::Display for BetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSpec::Fixed(v) => write!(f, "{v}"),
            BetaSpec::Gruber => f.write_str("gruber"),
        }
    }
}
