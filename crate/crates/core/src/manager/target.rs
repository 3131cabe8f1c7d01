//! Target selection distributions built from per-worker losses and training volumes.

use serde::{Deserialize, Serialize};

use crate::error::{CatpError, Result};
use crate::scalar::{softmax, Scalar};

/// Losses are floored here before any division.
pub const LOSS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `Softmax(MaxL / L)`
    Simple,
    /// `Softmax(exp(−L / MaxL) + β (MaxV − V) / MaxV)`
    #[default]
    Regularized,
    /// `Softmax(MaxL / L + β (MaxV − V) / MaxV)`
    Unnormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TargetDistribution<T> {
    pub probs: Vec<T>,
    pub rule: TargetRule,
}

impl TargetRule {
    pub fn build<T: Scalar>(self, losses: &[T], volumes: &[f64], beta: f64) -> Result<TargetDistribution<T>> {
        match self {
            Self::Simple => target_distribution_simple(losses),
            Self::Regularized => target_distribution_regularized(losses, volumes, beta),
            Self::Unnormalized => target_distribution_unnormalized(losses, volumes, beta),
        }
    }
}

fn floored<T: Scalar>(losses: &[T]) -> Result<Vec<T>> {
    if losses.is_empty() {
        return Err(CatpError::invalid("no worker losses"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(CatpError::invalid("non-finite worker loss"));
    }
    let floor = T::lit(LOSS_FLOOR);
    Ok(losses.iter().map(|&l| l.max(floor)).collect())
}

/// `(MaxV − V) / MaxV`, or 1 for every worker while nothing has been trained.
fn volume_term<T: Scalar>(volumes: &[f64], k: usize, beta: f64) -> Result<Vec<T>> {
    if volumes.len() != k {
        return Err(CatpError::invalid(format!("{} volumes for {k} workers", volumes.len())));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(CatpError::invalid(format!("beta must be non-negative, got {beta}")));
    }
    if volumes.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(CatpError::invalid("training volumes must be non-negative"));
    }
    let max_v = volumes.iter().copied().fold(0.0, f64::max);
    Ok(volumes
        .iter()
        .map(|&v| {
            let reg = if max_v == 0.0 { 1.0 } else { (max_v - v) / max_v };
            T::lit(beta * reg)
        })
        .collect())
}

pub fn target_distribution_simple<T: Scalar>(losses: &[T]) -> Result<TargetDistribution<T>> {
    let l = floored(losses)?;
    let max_l = l.iter().copied().fold(T::zero(), T::max);
    let logits: Vec<T> = l.iter().map(|&x| max_l / x).collect();
    Ok(TargetDistribution {
        probs: softmax(&logits),
        rule: TargetRule::Simple,
    })
}

pub fn target_distribution_regularized<T: Scalar>(losses: &[T], volumes: &[f64], beta: f64) -> Result<TargetDistribution<T>> {
    let l = floored(losses)?;
    let reg = volume_term::<T>(volumes, l.len(), beta)?;
    let max_l = l.iter().copied().fold(T::zero(), T::max);
    let logits: Vec<T> = l.iter().zip(&reg).map(|(&x, &r)| (-x / max_l).exp() + r).collect();
    Ok(TargetDistribution {
        probs: softmax(&logits),
        rule: TargetRule::Regularized,
    })
}

pub fn target_distribution_unnormalized<T: Scalar>(losses: &[T], volumes: &[f64], beta: f64) -> Result<TargetDistribution<T>> {
    let l = floored(losses)?;
    let reg = volume_term::<T>(volumes, l.len(), beta)?;
    let max_l = l.iter().copied().fold(T::zero(), T::max);
    let logits: Vec<T> = l.iter().zip(&reg).map(|(&x, &r)| max_l / x + r).collect();
    Ok(TargetDistribution {
        probs: softmax(&logits),
        rule: TargetRule::Unnormalized,
    })
}
