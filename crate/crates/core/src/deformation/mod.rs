//! Observation-to-canonical warping: the morphable-model deformation field,
//! the learned residual on top of it, and their sum.

mod encoding;
mod mmdef;
mod residual;

pub use encoding::{encode, encode_var, EncoderConfig};
pub use mmdef::{mmdef_vertex, FrameGeometry};
pub use residual::{ResidualMlp, ResidualShape, ResidualVars, DEFORM_CODE_DIM};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::headmodel::HeadParams;
use crate::nn::Binding;
use crate::radiance::ConditioningConfig;
use crate::rendering::Vec3;

/// Residual network output for a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualOutput {
    pub delta: [f64; 3],
    pub features: Vec<f64>,
}

/// Everything the full warp produces for one point.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformOutput {
    pub x_can: Vec3,
    pub features: Vec<f64>,
    pub delta: Vec3,
    pub mmdef: Vec3,
}

/// Flattened `[beta_exp…, axis-angle, translation, jaw]`.
pub fn param_vector(params: &HeadParams) -> Vec<f64> {
    let mut v = params.beta_exp.clone();
    v.extend_from_slice(&params.pose.to_vector());
    v
}

impl ResidualMlp {
    /// Single-point evaluation in `f32`, as used during training.
    pub fn eval_point(
        &self,
        weights: &ParamSet<f32>,
        aligned: &Vec3,
        conditioning: &[f64],
        omega: &[f64],
        alpha: f64,
    ) -> Result<ResidualOutput> {
        if conditioning.len() != self.shape.raw_conditioning_dim() {
            return Err(Error::param(format!(
                "conditioning input has {} entries, expected {}",
                conditioning.len(),
                self.shape.raw_conditioning_dim()
            )));
        }
        if omega.len() != self.shape.code_dim {
            return Err(Error::param(format!("deformation code has {} entries, expected {}", omega.len(), self.shape.code_dim)));
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(1, 3, aligned.as_slice()));
        let c = tape.constant(Tensor::from_f64(1, conditioning.len(), conditioning));
        let w = tape.constant(Tensor::from_f64(1, omega.len(), omega));
        let out = self.forward(&mut tape, weights, Binding::Frozen, x, c, w, alpha);
        let d = tape.value(out.delta).data();
        Ok(ResidualOutput {
            delta: [d[0] as f64, d[1] as f64, d[2] as f64],
            features: tape.value(out.features).data().iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Full warp of one world point into canonical space:
/// `x_can = x + field(x) + residual(R⁻¹(x - t), field(x), ω)`.
#[allow(clippy::too_many_arguments)]
pub fn deform_point(
    geometry: &FrameGeometry,
    residual: &ResidualMlp,
    weights: &ParamSet<f32>,
    params: &HeadParams,
    omega: &[f64],
    x: &Vec3,
    distance_scale: f64,
    alpha: f64,
) -> Result<DeformOutput> {
    if params.pose.to_vector().len() + params.beta_exp.len() != residual.shape.param_dim {
        return Err(Error::param("head parameter dimension does not match the network"));
    }
    let mmdef = geometry.mmdef_field(x, distance_scale)?;
    let aligned = geometry.align(x);
    let conditioning = match residual.shape.mode {
        ConditioningConfig::A => param_vector(params),
        _ => mmdef.as_slice().to_vec(),
    };
    let out = residual.eval_point(weights, &aligned, &conditioning, omega, alpha)?;
    let delta = Vec3::from(out.delta);
    Ok(DeformOutput { x_can: x + mmdef + delta, features: out.features, delta, mmdef })
}
