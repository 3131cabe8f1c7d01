//! Trajectories and data samples `(C, TX, TY)`.

use serde::{Deserialize, Serialize};

use crate::context::{ContextSpec, ContextWindow};
use crate::error::{CatpError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2D location in world units.
pub type Point<T> = [T; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Trajectory<T> {
    pub points: Vec<Point<T>>,
    /// Seconds between consecutive points.
    pub dt: f64,
    pub unit_id: String,
    /// Timestamp of the first point.
    #[serde(default)]
    pub start_time: f64,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(points: Vec<Point<T>>, dt: f64, unit_id: impl Into<String>, start_time: f64) -> Result<Self> {
        let t = Self {
            points,
            dt,
            unit_id: unit_id.into(),
            start_time,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(CatpError::invalid(format!("trajectory of '{}' is empty", self.unit_id)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CatpError::invalid(format!("trajectory dt must be positive, got {}", self.dt)));
        }
        if !self.points.iter().flatten().all(|c| c.is_finite()) {
            return Err(CatpError::invalid(format!("trajectory of '{}' has non-finite coordinates", self.unit_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Point<T> {
        *self.points.last().expect("validated trajectories are non-empty")
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.dt * (self.points.len() as f64 - 1.0)
    }

    /// `len × 2` coordinate matrix.
    pub fn to_matrix(&self) -> Tensor<T> {
        Tensor::from_vec(self.points.len(), 2, self.points.iter().flatten().copied().collect())
    }
}

/// Optional affine map applied to world coordinates; identity by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateScaler {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl Default for CoordinateScaler {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: [0.0, 0.0],
        }
    }
}

impl CoordinateScaler {
    pub fn apply<T: Scalar>(&self, p: Point<T>) -> Point<T> {
        [
            (p[0] - T::lit(self.offset[0])) * T::lit(self.scale),
            (p[1] - T::lit(self.offset[1])) * T::lit(self.scale),
        ]
    }

    pub fn invert<T: Scalar>(&self, p: Point<T>) -> Point<T> {
        [
            p[0] / T::lit(self.scale) + T::lit(self.offset[0]),
            p[1] / T::lit(self.scale) + T::lit(self.offset[1]),
        ]
    }
}

/// Declared window lengths and step of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub lc: usize,
    pub lx: usize,
    pub ly: usize,
}

/// One training or evaluation unit: context `C`, past trajectories `TX` of
/// every unit, future trajectory `TY` of the target unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DataSample<T> {
    pub context: ContextWindow,
    pub past: Vec<Trajectory<T>>,
    pub target: Trajectory<T>,
    /// Index into `past` of the unit whose future is `target`.
    pub target_id: usize,
    /// Ground-truth generating pattern; evaluation oracles only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<usize>,
}

impl<T: Scalar> DataSample<T> {
    pub fn units(&self) -> usize {
        self.past.len()
    }

    pub fn validate(&self, schema: &ContextSpec, shape: WindowShape) -> Result<()> {
        if self.context.frames.len() != shape.lc {
            return Err(CatpError::invalid(format!(
                "context has {} frames, expected {}",
                self.context.frames.len(),
                shape.lc
            )));
        }
        if let Some(bad) = self.context.frames.iter().find(|f| f.len() != schema.len()) {
            return Err(CatpError::invalid(format!(
                "context frame has {} states, schema declares {}",
                bad.len(),
                schema.len()
            )));
        }
        if self.past.is_empty() || self.target_id >= self.past.len() {
            return Err(CatpError::invalid("target unit is not among the past trajectories"));
        }
        for t in self.past.iter().chain(std::iter::once(&self.target)) {
            t.validate()?;
        }
        if let Some(t) = self.past.iter().find(|t| t.len() != shape.lx) {
            return Err(CatpError::invalid(format!("past trajectory of '{}' has {} points, expected {}", t.unit_id, t.len(), shape.lx)));
        }
        if self.target.len() != shape.ly {
            return Err(CatpError::invalid(format!("target has {} points, expected {}", self.target.len(), shape.ly)));
        }
        let own = &self.past[self.target_id];
        let gap = self.target.start_time - own.end_time();
        if (gap - own.dt).abs() > 1e-9 * own.dt.max(1.0) {
            return Err(CatpError::invalid(format!(
                "target starts {gap} s after the past ends, expected one step of {} s",
                own.dt
            )));
        }
        Ok(())
    }

    /// `TX` as an `LX × 2|U|` matrix (unit `u` in columns `2u, 2u+1`).
    pub fn past_matrix(&self) -> Tensor<T> {
        let lx = self.past[0].len();
        let units = self.past.len();
        let mut m = Tensor::zeros(lx, 2 * units);
        for (u, traj) in self.past.iter().enumerate() {
            for (r, p) in traj.points.iter().enumerate() {
                m.set(r, 2 * u, p[0]);
                m.set(r, 2 * u + 1, p[1]);
            }
        }
        m
    }

    /// `TY` as an `LY × 2` matrix.
    pub fn target_matrix(&self) -> Tensor<T> {
        self.target.to_matrix()
    }

    /// Last observed location of the target unit, `loc^o_t`.
    pub fn start_location(&self) -> Point<T> {
        self.past[self.target_id].last()
    }
}
