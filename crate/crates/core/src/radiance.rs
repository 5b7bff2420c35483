//! Color and density network evaluated at canonical points.
//!
//! Density comes from the position-only trunk. View direction, appearance code
//! and (in mode C) the head parameters and deformation features enter afterwards
//! through the color branch, so density never sees them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Real, Tape, Tensor, Var};
use crate::deformation::{encode_var, param_vector, EncoderConfig};
use crate::error::{Error, Result};
use crate::headmodel::HeadParams;
use crate::nn::{Binding, Dense, Init, Trunk};
use crate::rendering::Vec3;

/// Per-frame latent appearance code width.
pub const APPEAR_CODE_DIM: usize = 8;

/// Which signals condition the two networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningConfig {
    /// Deformation network sees raw expression/pose parameters; plain appearance.
    A,
    /// Deformation network sees the encoded morphable deformation; plain appearance.
    B,
    /// As B, and the color branch also sees parameters and deformation features.
    #[default]
    C,
}

impl std::str::FromStr for ConditioningConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            other => Err(format!("unknown conditioning config {other:?}, expected A, B or C")),
        }
    }
}

/// Color in `[0, 1]` and nonnegative density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceShape {
    pub depth: usize,
    pub width: usize,
    pub color_width: usize,
    pub position_bands: usize,
    pub direction_bands: usize,
    pub code_dim: usize,
    /// `E + 7`.
    pub param_dim: usize,
    /// Width of the deformation features consumed in mode C.
    pub feature_dim: usize,
    /// Trunk layer that re-reads the encoded position.
    pub skip: Option<usize>,
    /// Added to the raw density before the softplus.
    pub density_shift: f64,
    pub mode: ConditioningConfig,
}

impl RadianceShape {
    pub fn position_dim(&self) -> usize {
        EncoderConfig::open(self.position_bands).output_dim(3)
    }

    pub fn color_input_dim(&self) -> usize {
        let base = self.width + EncoderConfig::open(self.direction_bands).output_dim(3) + self.code_dim;
        match self.mode {
            ConditioningConfig::C => base + self.param_dim + self.feature_dim,
            _ => base,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RadianceVars {
    pub rgb: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceMlp {
    pub shape: RadianceShape,
    pub trunk: Trunk,
    pub sigma_head: Dense,
    pub bottleneck: Dense,
    pub color_hidden: Dense,
    pub color_head: Dense,
}

impl RadianceMlp {
    pub fn new(params: &mut ParamSet<f32>, shape: RadianceShape, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new(params, "radiance.trunk", shape.position_dim(), shape.width, shape.depth, shape.skip, rng);
        let sigma_head = Dense::new(params, "radiance.sigma", shape.width, 1, Init::Zero, rng);
        let bottleneck = Dense::new(params, "radiance.bottleneck", shape.width, shape.width, Init::Glorot, rng);
        let color_hidden = Dense::new(params, "radiance.color.0", shape.color_input_dim(), shape.color_width, Init::He, rng);
        let color_head = Dense::new(params, "radiance.color.head", shape.color_width, 3, Init::Glorot, rng);
        Self { shape, trunk, sigma_head, bottleneck, color_hidden, color_head }
    }

    /// `x_can`, `dirs`: n×3; `phi`: n×code_dim; `params`: n×(E+7); `features`: n×feature_dim.
    /// `params` and `features` are only read in mode C.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        weights: &ParamSet<T>,
        binding: Binding,
        x_can: Var,
        dirs: Var,
        phi: Var,
        params: Option<Var>,
        features: Option<Var>,
    ) -> RadianceVars {
        let pos = encode_var(tape, x_can, &EncoderConfig::open(self.shape.position_bands));
        let h = self.trunk.forward(tape, weights, binding, pos);
        let raw_sigma = self.sigma_head.forward(tape, weights, binding, h);
        let shifted = tape.add_scalar(raw_sigma, T::from_f64_lossy(self.shape.density_shift));
        let sigma = tape.softplus(shifted);

        let bottleneck = self.bottleneck.forward(tape, weights, binding, h);
        let dir_enc = encode_var(tape, dirs, &EncoderConfig::open(self.shape.direction_bands));
        let mut parts = vec![bottleneck, dir_enc, phi];
        if self.shape.mode == ConditioningConfig::C {
            parts.push(params.expect("mode C needs head parameters"));
            parts.push(features.expect("mode C needs deformation features"));
        }
        let color_in = tape.concat(&parts);
        let hidden = self.color_hidden.forward(tape, weights, binding, color_in);
        let hidden = tape.relu(hidden);
        let logits = self.color_head.forward(tape, weights, binding, hidden);
        let rgb = tape.sigmoid(logits);
        RadianceVars { rgb, sigma }
    }
}

impl RadianceMlp {
    /// Single-point evaluation. `features` and `params` are only read in mode C.
    pub fn eval_point(
        &self,
        weights: &ParamSet<f32>,
        x_can: &Vec3,
        d: &Vec3,
        phi: &[f64],
        features: &[f64],
        params: &HeadParams,
    ) -> Result<RadianceSample> {
        if !x_can.iter().all(|v| v.is_finite()) {
            return Err(Error::param("canonical point must be finite"));
        }
        if !((d.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::param(format!("view direction has norm {}, expected 1", d.norm())));
        }
        if phi.len() != self.shape.code_dim {
            return Err(Error::param(format!("appearance code has {} entries, expected {}", phi.len(), self.shape.code_dim)));
        }
        let mode_c = self.shape.mode == ConditioningConfig::C;
        let pv = param_vector(params);
        if mode_c && features.len() != self.shape.feature_dim {
            return Err(Error::param(format!("features have {} entries, expected {}", features.len(), self.shape.feature_dim)));
        }
        if mode_c && pv.len() != self.shape.param_dim {
            return Err(Error::param(format!("head parameters have {} entries, expected {}", pv.len(), self.shape.param_dim)));
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(1, 3, x_can.as_slice()));
        let dv = tape.constant(Tensor::from_f64(1, 3, d.as_slice()));
        let p = tape.constant(Tensor::from_f64(1, phi.len(), phi));
        let (b, f) = if mode_c {
            (
                Some(tape.constant(Tensor::from_f64(1, pv.len(), &pv))),
                Some(tape.constant(Tensor::from_f64(1, features.len(), features))),
            )
        } else {
            (None, None)
        };
        let out = self.forward(&mut tape, weights, Binding::Frozen, x, dv, p, b, f);
        let rgb = tape.value(out.rgb).data();
        Ok(RadianceSample {
            color: [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64],
            sigma: tape.value(out.sigma).data()[0] as f64,
        })
    }
}
