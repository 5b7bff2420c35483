//! The trainable portrait: deformation network, radiance network and the
//! per-frame code tables, all stored in one [`ParamSet`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::deformation::{param_vector, FrameGeometry, ResidualMlp, ResidualShape, ResidualVars, DEFORM_CODE_DIM};
use crate::error::{Error, Result};
use crate::headmodel::{HeadParams, POSE_DIM};
use crate::nn::Binding;
use crate::radiance::{ConditioningConfig, RadianceMlp, RadianceShape, APPEAR_CODE_DIM};
use crate::rendering::Vec3;

/// Architecture and field hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_expressions: usize,
    pub mode: ConditioningConfig,
    pub deform_depth: usize,
    pub deform_width: usize,
    pub deform_position_bands: usize,
    pub deform_mmdef_bands: usize,
    pub radiance_depth: usize,
    pub radiance_width: usize,
    pub color_width: usize,
    pub radiance_position_bands: usize,
    pub direction_bands: usize,
    pub skip_layer: Option<usize>,
    pub deform_code_dim: usize,
    pub appear_code_dim: usize,
    pub density_shift: f64,
    /// `s` in `exp(distance / s)`.
    pub distance_scale: f64,
}

impl NetworkConfig {
    /// Full-size networks: 8×128 deformation, 8×256 radiance.
    pub fn full(num_expressions: usize) -> Self {
        Self {
            num_expressions,
            mode: ConditioningConfig::C,
            deform_depth: 8,
            deform_width: 128,
            deform_position_bands: 10,
            deform_mmdef_bands: 2,
            radiance_depth: 8,
            radiance_width: 256,
            color_width: 128,
            radiance_position_bands: 10,
            direction_bands: 4,
            skip_layer: Some(5),
            deform_code_dim: DEFORM_CODE_DIM,
            appear_code_dim: APPEAR_CODE_DIM,
            density_shift: -2.0,
            distance_scale: 1.0,
        }
    }

    /// 4×64 deformation and 4×128 radiance networks, sized for single-machine runs.
    pub fn desk(num_expressions: usize) -> Self {
        Self {
            deform_depth: 4,
            deform_width: 64,
            radiance_depth: 4,
            radiance_width: 128,
            color_width: 64,
            skip_layer: None,
            ..Self::full(num_expressions)
        }
    }

    /// Two-layer networks of the given widths (used by gradient checks and smoke tests).
    pub fn tiny(num_expressions: usize, deform_width: usize, radiance_width: usize) -> Self {
        Self {
            deform_depth: 2,
            deform_width,
            radiance_depth: 2,
            radiance_width,
            color_width: radiance_width.min(64),
            skip_layer: None,
            ..Self::full(num_expressions)
        }
    }

    pub fn param_dim(&self) -> usize {
        self.num_expressions + POSE_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.deform_depth,
            self.deform_width,
            self.radiance_depth,
            self.radiance_width,
            self.color_width,
            self.deform_code_dim,
            self.appear_code_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::param("network depths, widths and code sizes must be positive"));
        }
        if !(self.distance_scale > 0.0) || !self.density_shift.is_finite() {
            return Err(Error::param("distance scale must be positive and density shift finite"));
        }
        Ok(())
    }

    fn residual_shape(&self) -> ResidualShape {
        ResidualShape {
            depth: self.deform_depth,
            width: self.deform_width,
            position_bands: self.deform_position_bands,
            deformation_bands: self.deform_mmdef_bands,
            code_dim: self.deform_code_dim,
            param_dim: self.param_dim(),
            mode: self.mode,
        }
    }

    fn radiance_shape(&self) -> RadianceShape {
        RadianceShape {
            depth: self.radiance_depth,
            width: self.radiance_width,
            color_width: self.color_width,
            position_bands: self.radiance_position_bands,
            direction_bands: self.direction_bands,
            code_dim: self.appear_code_dim,
            param_dim: self.param_dim(),
            feature_dim: self.deform_width,
            skip: self.skip_layer,
            density_shift: self.density_shift,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortraitModel {
    pub config: NetworkConfig,
    pub params: ParamSet<f32>,
    pub deform: ResidualMlp,
    pub radiance: RadianceMlp,
    /// `frames × deform_code_dim`.
    pub deform_codes: ParamId,
    /// `frames × appear_code_dim`.
    pub appear_codes: ParamId,
}

impl PortraitModel {
    pub fn new(config: NetworkConfig, num_frames: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_frames == 0 {
            return Err(Error::param("model needs at least one frame code"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let deform = ResidualMlp::new(&mut params, config.residual_shape(), &mut rng);
        let radiance = RadianceMlp::new(&mut params, config.radiance_shape(), &mut rng);
        let code = |dim: usize, rng: &mut ChaCha8Rng| {
            let data = (0..num_frames * dim).map(|_| rng.gen_range(-0.05f32..0.05)).collect();
            Tensor::from_vec(num_frames, dim, data)
        };
        let dc = code(config.deform_code_dim, &mut rng);
        let ac = code(config.appear_code_dim, &mut rng);
        let deform_codes = params.add("codes.deform", dc);
        let appear_codes = params.add("codes.appear", ac);
        Ok(Self { config, params, deform, radiance, deform_codes, appear_codes })
    }

    /// Rebuilds the structure for `config` and installs `params`, which must
    /// match the expected names and shapes exactly.
    pub fn from_params(config: NetworkConfig, num_frames: usize, params: ParamSet<f32>) -> Result<Self> {
        let mut model = Self::new(config, num_frames, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::param(format!("expected {} tensors, found {}", model.params.len(), params.len())));
        }
        for (id, name, t) in model.params.iter() {
            let other = params.get(id);
            if params.name(id) != name || other.shape() != t.shape() {
                return Err(Error::param(format!(
                    "tensor {} has name {:?} shape {:?}, expected {name:?} {:?}",
                    id.0,
                    params.name(id),
                    other.shape(),
                    t.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_frames(&self) -> usize {
        self.params.get(self.deform_codes).rows()
    }

    pub fn deform_code(&self, frame: usize) -> Vec<f64> {
        self.params.get(self.deform_codes).row(frame).iter().map(|&v| v as f64).collect()
    }

    pub fn appear_code(&self, frame: usize) -> Vec<f64> {
        self.params.get(self.appear_codes).row(frame).iter().map(|&v| v as f64).collect()
    }
}

/// Conditioning for one frame: its deformed geometry, parameters and latent codes.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub geometry: Arc<FrameGeometry>,
    pub params: HeadParams,
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
}

impl FrameInput {
    pub fn new(geometry: Arc<FrameGeometry>, params: HeadParams, omega: Vec<f64>, phi: Vec<f64>) -> Self {
        Self { geometry, params, omega, phi }
    }
}

/// Per-sample inputs computed outside the tape.
#[derive(Clone, Debug, Default)]
pub struct PreparedSamples {
    pub len: usize,
    /// `x + field(x)`, row-major n×3.
    pub warped: Vec<f64>,
    pub aligned: Vec<f64>,
    pub mmdef: Vec<f64>,
    pub dirs: Vec<f64>,
    /// n×(E+7).
    pub params: Vec<f64>,
    pub param_dim: usize,
}

impl PreparedSamples {
    /// Computes field values and alignment for samples of one frame.
    pub fn push_frame_samples(&mut self, frame: &FrameGeometry, params: &HeadParams, points: &[Vec3], dir: &Vec3, scale: f64) -> Result<()> {
        let pv = param_vector(params);
        if self.len == 0 {
            self.param_dim = pv.len();
        } else if self.param_dim != pv.len() {
            return Err(Error::param("mixed parameter dimensions in one batch"));
        }
        for x in points {
            let m = frame.mmdef_field(x, scale)?;
            let a = frame.align(x);
            let w = x + m;
            self.warped.extend_from_slice(w.as_slice());
            self.aligned.extend_from_slice(a.as_slice());
            self.mmdef.extend_from_slice(m.as_slice());
            self.dirs.extend_from_slice(dir.as_slice());
            self.params.extend_from_slice(&pv);
            self.len += 1;
        }
        Ok(())
    }
}

/// Tape outputs for a batch of samples.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub rgb: Var,
    pub sigma: Var,
    pub delta: Var,
}

impl PortraitModel {
    /// Records the deformation and radiance networks for `prep` on `tape`.
    /// `omega`/`phi` are n-row code variables aligned with the samples.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_samples<T: Real>(
        &self,
        tape: &mut Tape<T>,
        weights: &ParamSet<T>,
        binding: Binding,
        prep: &PreparedSamples,
        omega: Var,
        phi: Var,
        alpha: f64,
    ) -> SampleVars {
        let n = prep.len;
        let res = self.forward_residual(tape, weights, binding, prep, omega, alpha);
        let warped = tape.constant(Tensor::from_f64(n, 3, &prep.warped));
        let x_can = tape.add(warped, res.delta);
        let dirs = tape.constant(Tensor::from_f64(n, 3, &prep.dirs));
        let (beta, features) = if self.config.mode == ConditioningConfig::C {
            (Some(tape.constant(Tensor::from_f64(n, prep.param_dim, &prep.params))), Some(res.features))
        } else {
            (None, None)
        };
        let rad = self.radiance.forward(tape, weights, binding, x_can, dirs, phi, beta, features);
        SampleVars { rgb: rad.rgb, sigma: rad.sigma, delta: res.delta }
    }

    /// Records only the residual deformation network for `prep`.
    pub fn forward_residual<T: Real>(
        &self,
        tape: &mut Tape<T>,
        weights: &ParamSet<T>,
        binding: Binding,
        prep: &PreparedSamples,
        omega: Var,
        alpha: f64,
    ) -> ResidualVars {
        let n = prep.len;
        let aligned = tape.constant(Tensor::from_f64(n, 3, &prep.aligned));
        let cond = match self.config.mode {
            ConditioningConfig::A => tape.constant(Tensor::from_f64(n, prep.param_dim, &prep.params)),
            _ => tape.constant(Tensor::from_f64(n, 3, &prep.mmdef)),
        };
        self.deform.forward(tape, weights, binding, aligned, cond, omega, alpha)
    }

    /// Code rows for `n` samples of one frame given as explicit vectors (frozen).
    pub fn constant_codes<T: Real>(tape: &mut Tape<T>, code: &[f64], n: usize) -> Var {
        let data: Vec<f64> = (0..n).flat_map(|_| code.iter().copied()).collect();
        tape.constant(Tensor::from_f64(n, code.len(), &data))
    }
}
