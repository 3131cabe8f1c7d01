//! Trajectory and series losses, both as plain functions and on the tape.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CatpError, Result};
use crate::sample::Point;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerLoss {
    #[default]
    Ade,
    Fde,
    Mse,
}

impl WorkerLoss {
    /// Loss between true and predicted trajectories.
    pub fn eval<T: Scalar>(self, ty: &[Point<T>], ty_hat: &[Point<T>]) -> Result<T> {
        match self {
            Self::Ade => ade(ty, ty_hat),
            Self::Fde => fde(ty, ty_hat),
            Self::Mse => {
                check_lengths(ty.len(), ty_hat.len())?;
                let a: Vec<T> = ty.iter().flatten().copied().collect();
                let b: Vec<T> = ty_hat.iter().flatten().copied().collect();
                mse(&a, &b)
            }
        }
    }

    /// Same loss on `LY × 2` tape values; returns a `1 × 1` variable.
    pub fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, ty: Var, ty_hat: Var) -> Var {
        let diff = tape.sub(ty_hat, ty);
        match self {
            Self::Ade => {
                let n = tape.row_norms(diff);
                tape.mean(n)
            }
            Self::Fde => {
                let rows = tape.value(diff).rows();
                let last = tape.slice_rows(diff, rows - 1, 1);
                let n = tape.row_norms(last);
                tape.sum(n)
            }
            Self::Mse => {
                let sq = tape.square(diff);
                tape.mean(sq)
            }
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CatpError::invalid(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(CatpError::invalid("empty trajectory"));
    }
    Ok(())
}

fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Average displacement error: mean Euclidean distance over aligned points.
pub fn ade<T: Scalar>(ty: &[Point<T>], ty_hat: &[Point<T>]) -> Result<T> {
    check_lengths(ty.len(), ty_hat.len())?;
    let total: T = ty.iter().zip(ty_hat).map(|(&a, &b)| dist(a, b)).sum();
    Ok(total / T::from_usize_lossy(ty.len()))
}

/// Final displacement error: distance between the last points.
pub fn fde<T: Scalar>(ty: &[Point<T>], ty_hat: &[Point<T>]) -> Result<T> {
    check_lengths(ty.len(), ty_hat.len())?;
    Ok(dist(ty[ty.len() - 1], ty_hat[ty_hat.len() - 1]))
}

/// Mean squared error over aligned scalar entries.
pub fn mse<T: Scalar>(series: &[T], series_hat: &[T]) -> Result<T> {
    check_lengths(series.len(), series_hat.len())?;
    let total: T = series.iter().zip(series_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(total / T::from_usize_lossy(series.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn ade_examples() {
        let ty = [[0.0f64, 0.0], [1.0, 0.0]];
        assert_eq!(ade(&ty, &ty).unwrap(), 0.0);
        assert_eq!(ade(&ty, &[[0.0, 1.0], [1.0, 1.0]]).unwrap(), 1.0);
        assert_eq!(ade(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        assert!(ade(&ty, &ty[..1]).is_err());
    }

    #[test]
    fn fde_examples() {
        let ty = [[0.0f64, 0.0], [1.0, 0.0]];
        assert_eq!(fde(&ty, &[[9.0, 9.0], [1.0, 0.0]]).unwrap(), 0.0);
        assert_eq!(fde(&ty, &[[0.0, 1.0], [1.0, 1.0]]).unwrap(), 1.0);
        let one = [[2.0f64, 2.0]];
        let hat = [[5.0, 6.0]];
        assert_eq!(fde(&one, &hat).unwrap(), ade(&one, &hat).unwrap());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0f64, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        let c = 1.5;
        let y = [0.3f64, -2.0, 7.0];
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert!((mse(&y, &shifted).unwrap() - c * c).abs() < 1e-12);
        assert!(mse::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let ty = [[0.0f64, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let hat = [[0.5f64, 1.0], [1.0, 3.5], [5.0, 0.0]];
        for kind in [WorkerLoss::Ade, WorkerLoss::Fde, WorkerLoss::Mse] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_vec(3, 2, ty.iter().flatten().copied().collect()));
            let b = tape.constant(Tensor::from_vec(3, 2, hat.iter().flatten().copied().collect()));
            let l = kind.on_tape(&mut tape, a, b);
            assert!((tape.scalar_value(l) - kind.eval(&ty, &hat).unwrap()).abs() < 1e-12);
        }
    }

    fn arb_traj(n: usize) -> impl Strategy<Value = Vec<Point<f64>>> {
        prop::collection::vec(prop::array::uniform2(-100.0..100.0f64), n)
    }

    proptest! {
        #[test]
        fn translation_invariance(a in arb_traj(6), b in arb_traj(6), sx in -50.0..50.0f64, sy in -50.0..50.0f64) {
            let shift = |t: &[Point<f64>]| t.iter().map(|p| [p[0] + sx, p[1] + sy]).collect::<Vec<_>>();
            let (a2, b2) = (shift(&a), shift(&b));
            prop_assert!((ade(&a, &b).unwrap() - ade(&a2, &b2).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&a, &b).unwrap() - fde(&a2, &b2).unwrap()).abs() < 1e-9);
            prop_assert!(ade(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(ade(&a, &a).unwrap(), 0.0);
        }
    }
}
