use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scalars in a pose vector: axis-angle, translation, jaw angle.
pub const POSE_DIM: usize = 7;

/// Rigid head pose plus jaw articulation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    /// Axis-angle rotation about the world origin; the norm is the angle in radians.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    /// Jaw opening in radians, within `[0, π/2]`.
    pub jaw: f64,
}

/// Expression coefficients and pose driving the morphable head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub beta_exp: Vec<f64>,
    pub pose: HeadPose,
}

impl HeadPose {
    pub fn to_vector(&self) -> [f64; POSE_DIM] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z, self.jaw]
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::param(format!("beta_pose must have {POSE_DIM} entries, got {}", v.len())));
        }
        Ok(Self { rotation: [v[0], v[1], v[2]], translation: [v[3], v[4], v[5]], jaw: v[6] })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        axis_angle_matrix(Vector3::from(self.rotation))
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3] && self.jaw == 0.0
    }
}

impl HeadParams {
    pub fn zeros(num_expressions: usize) -> Self {
        Self { beta_exp: vec![0.0; num_expressions], pose: HeadPose::default() }
    }

    pub fn is_zero(&self) -> bool {
        self.pose.is_identity() && self.beta_exp.iter().all(|&b| b == 0.0)
    }

    /// Checks finiteness, the jaw range, and that `beta_exp` has `num_expressions` entries.
    pub fn validate(&self, num_expressions: usize) -> Result<()> {
        if self.beta_exp.len() != num_expressions {
            return Err(Error::param(format!(
                "beta_exp has {} entries, model expects {num_expressions}",
                self.beta_exp.len()
            )));
        }
        if !self.beta_exp.iter().chain(self.pose.to_vector().iter()).all(|v| v.is_finite()) {
            return Err(Error::param("head parameters must be finite"));
        }
        if !(0.0..=FRAC_PI_2).contains(&self.pose.jaw) {
            return Err(Error::param(format!("jaw angle {} outside [0, pi/2]", self.pose.jaw)));
        }
        Ok(())
    }
}

/// Rodrigues rotation; a zero vector yields the exact identity.
pub fn axis_angle_matrix(v: Vector3<f64>) -> Matrix3<f64> {
    if v == Vector3::zeros() {
        return Matrix3::identity();
    }
    Rotation3::from_scaled_axis(v).into_inner()
}
