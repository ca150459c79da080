//! Rule-based rewards for count answers.
//!
//! Two schemes are provided: a binary accuracy reward that pays 1 for any
//! prediction within 50% relative error, and the fuzzy reward that adds a
//! format term to a graded precision term, each weighted by a membership
//! degree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_lang::{extract_count, is_compliant, Token};

/// Relative error below which a prediction earns accuracy/precision credit.
pub const RELATIVE_ERROR_BAND: f64 = 0.5;

/// Precision reward at zero error.
pub const PRECISION_CEILING: f64 = 1.5;

fn check_truth(truth: u64) -> Result<()> {
    if truth < 1 {
        return Err(Error::Domain(format!("ground-truth count must be >= 1, got {truth}")));
    }
    Ok(())
}

fn relative_error(pred: u64, truth: u64) -> f64 {
    pred.abs_diff(truth) as f64 / truth as f64
}

/// 1 if the prediction lies strictly within the relative-error band, else 0.
pub fn binary_accuracy_reward(pred: Option<u64>, truth: u64) -> Result<f64> {
    check_truth(truth)?;
    Ok(match pred {
        Some(p) if relative_error(p, truth) < RELATIVE_ERROR_BAND => 1.0,
        _ => 0.0,
    })
}

/// `1.5 - |pred - truth| / truth` inside the band, 0 outside or when absent.
pub fn precision_reward(pred: Option<u64>, truth: u64) -> Result<f64> {
    check_truth(truth)?;
    Ok(match pred {
        Some(p) => {
            let rel = relative_error(p, truth);
            if rel < RELATIVE_ERROR_BAND {
                PRECISION_CEILING - rel
            } else {
                0.0
            }
        }
        None => 0.0,
    })
}

pub fn format_reward(seq: &[Token]) -> f64 {
    if is_compliant(seq) {
        1.0
    } else {
        0.0
    }
}

/// Membership degrees weighting the format and precision terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memberships {
    pub format: f64,
    pub precision: f64,
}

impl Default for Memberships {
    fn default() -> Self {
        Memberships {
            format: 1.0,
            precision: 1.0,
        }
    }
}

impl Memberships {
    pub fn validate(&self) -> Result<()> {
        for (name, mu) in [("format", self.format), ("precision", self.precision)] {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::Domain(format!("{name} membership {mu} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f: f64,
    pub r_p: f64,
    pub mu_f: f64,
    pub mu_p: f64,
    pub total: f64,
}

/// Fuzzy reward: `mu_f * r_f + mu_p * r_p`.
pub fn fgrpr_reward(seq: &[Token], truth: u64, mu: Memberships) -> Result<RewardBreakdown> {
    mu.validate()?;
    let r_f = format_reward(seq);
    let r_p = precision_reward(extract_count(seq), truth)?;
    Ok(RewardBreakdown {
        r_f,
        r_p,
        mu_f: mu.format,
        mu_p: mu.precision,
        total: mu.format * r_f + mu.precision * r_p,
    })
}
