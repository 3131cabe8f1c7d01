//! Distances between the manager's selection distribution and its target.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CatpError, Result};
use crate::scalar::Scalar;

use super::target::LOSS_FLOOR;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagerLoss {
    #[default]
    Wasserstein,
    CrossEntropy,
}

/// Ground metric on worker indices used by the Wasserstein loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WassersteinGround {
    /// `|i − j|`: the 1-D distance with unit index spacing.
    #[default]
    Index,
    /// `[i ≠ j]`: reduces to total-variation distance.
    Discrete,
}

impl ManagerLoss {
    pub fn eval<T: Scalar>(self, ground: WassersteinGround, p_hat: &[T], p: &[T]) -> Result<T> {
        match self {
            Self::Wasserstein => wasserstein_loss_with(ground, p_hat, p),
            Self::CrossEntropy => cross_entropy_loss(p_hat, p),
        }
    }

    /// Loss of the `1 × K` tape value `p_hat` against the constant target `p`.
    pub fn on_tape<T: Scalar>(self, ground: WassersteinGround, tape: &mut Tape<T>, p_hat: Var, p: Var) -> Var {
        match (self, ground) {
            (Self::Wasserstein, WassersteinGround::Index) => {
                let d = tape.sub(p_hat, p);
                let cdf = tape.cumsum_cols(d);
                let a = tape.abs(cdf);
                tape.sum(a)
            }
            (Self::Wasserstein, WassersteinGround::Discrete) => {
                let d = tape.sub(p_hat, p);
                let a = tape.abs(d);
                let s = tape.sum(a);
                tape.scale(s, T::lit(0.5))
            }
            (Self::CrossEntropy, _) => {
                let logp = tape.log(p_hat, T::lit(LOSS_FLOOR));
                let prod = tape.mul(logp, p);
                let s = tape.sum(prod);
                tape.scale(s, -T::one())
            }
        }
    }
}

fn check<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<()> {
    if p_hat.len() != p.len() {
        return Err(CatpError::invalid(format!("distribution lengths differ: {} vs {}", p_hat.len(), p.len())));
    }
    if p.is_empty() {
        return Err(CatpError::invalid("empty distribution"));
    }
    Ok(())
}

/// Order-1 Wasserstein distance between distributions over worker indices
/// with unit spacing: `Σ_j |CDF(p̂)_j − CDF(p)_j|`.
pub fn wasserstein_loss<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<T> {
    wasserstein_loss_with(WassersteinGround::Index, p_hat, p)
}

pub fn wasserstein_loss_with<T: Scalar>(ground: WassersteinGround, p_hat: &[T], p: &[T]) -> Result<T> {
    check(p_hat, p)?;
    Ok(match ground {
        WassersteinGround::Index => {
            let mut acc = T::zero();
            let mut total = T::zero();
            for (&a, &b) in p_hat.iter().zip(p) {
                acc = acc + a - b;
                total = total + acc.abs();
            }
            total
        }
        WassersteinGround::Discrete => total_variation(p_hat, p)?,
    })
}

/// `½ Σ |p̂_j − p_j|`
pub fn total_variation<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<T> {
    check(p_hat, p)?;
    Ok(p_hat.iter().zip(p).map(|(&a, &b)| (a - b).abs()).sum::<T>() * T::lit(0.5))
}

/// `−Σ p_j ln max(p̂_j, 1e−12)`
pub fn cross_entropy_loss<T: Scalar>(p_hat: &[T], p: &[T]) -> Result<T> {
    check(p_hat, p)?;
    let floor = T::lit(LOSS_FLOOR);
    Ok(-p_hat.iter().zip(p).map(|(&q, &t)| t * q.max(floor).ln()).sum::<T>())
}
