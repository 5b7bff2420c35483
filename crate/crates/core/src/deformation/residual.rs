use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Real, Tape, Var};
use crate::nn::{Binding, Dense, Init, Trunk};
use crate::radiance::ConditioningConfig;

use super::encoding::{encode_var, EncoderConfig};

/// Per-frame latent deformation code width.
pub const DEFORM_CODE_DIM: usize = 8;

/// Shape of the residual deformation network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualShape {
    pub depth: usize,
    pub width: usize,
    /// Bands on the aligned position input.
    pub position_bands: usize,
    /// Bands on the morphable-model deformation input (modes B and C).
    pub deformation_bands: usize,
    pub code_dim: usize,
    /// `E + 7`; the raw parameter input used by mode A.
    pub param_dim: usize,
    pub mode: ConditioningConfig,
}

impl ResidualShape {
    pub fn conditioning_dim(&self) -> usize {
        match self.mode {
            ConditioningConfig::A => self.param_dim,
            ConditioningConfig::B | ConditioningConfig::C => EncoderConfig::open(self.deformation_bands).output_dim(3),
        }
    }

    /// Width of the conditioning input before encoding.
    pub fn raw_conditioning_dim(&self) -> usize {
        match self.mode {
            ConditioningConfig::A => self.param_dim,
            ConditioningConfig::B | ConditioningConfig::C => 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        EncoderConfig::open(self.position_bands).output_dim(3) + self.conditioning_dim() + self.code_dim
    }
}

/// Residual displacement and the penultimate activations of the network.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub delta: Var,
    pub features: Var,
}

/// The residual deformation MLP: rectified trunk plus a zero-initialized 3-wide head.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub shape: ResidualShape,
    pub trunk: Trunk,
    pub head: Dense,
}

impl ResidualMlp {
    pub fn new(params: &mut ParamSet<f32>, shape: ResidualShape, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new(params, "deform.trunk", shape.input_dim(), shape.width, shape.depth, None, rng);
        let head = Dense::new(params, "deform.head", shape.width, 3, Init::Zero, rng);
        Self { shape, trunk, head }
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.width
    }

    /// `aligned`: n×3 head-aligned positions. `conditioning`: n×3 morphable
    /// deformation (modes B, C) or n×(E+7) raw parameters (mode A). `omega`: n×code_dim.
    /// `alpha` is the coarse-to-fine window on the position encoding.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        binding: Binding,
        aligned: Var,
        conditioning: Var,
        omega: Var,
        alpha: f64,
    ) -> ResidualVars {
        let pos = encode_var(tape, aligned, &EncoderConfig { num_bands: self.shape.position_bands, window_alpha: alpha });
        let cond = match self.shape.mode {
            ConditioningConfig::A => conditioning,
            ConditioningConfig::B | ConditioningConfig::C => {
                encode_var(tape, conditioning, &EncoderConfig::open(self.shape.deformation_bands))
            }
        };
        let input = tape.concat(&[pos, cond, omega]);
        let features = self.trunk.forward(tape, params, binding, input);
        let delta = self.head.forward(tape, params, binding, features);
        ResidualVars { delta, features }
    }
}
