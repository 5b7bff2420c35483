use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};

/// Sinusoidal encoding with `num_bands` octaves and a coarse-to-fine window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_bands: usize,
    /// Window position in bands; `f64::INFINITY` opens every band.
    pub window_alpha: f64,
}

impl EncoderConfig {
    pub fn open(num_bands: usize) -> Self {
        Self { num_bands, window_alpha: f64::INFINITY }
    }

    pub fn with_alpha(self, window_alpha: f64) -> Self {
        Self { window_alpha, ..self }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (1 + 2 * self.num_bands)
    }

    /// Weight of band `j`: `(1 - cos(π·clamp(α - j, 0, 1))) / 2`.
    pub fn band_weight(&self, j: usize) -> f64 {
        let x = (self.window_alpha - j as f64).clamp(0.0, 1.0);
        (1.0 - (PI * x).cos()) / 2.0
    }
}

/// `(x, w_0 sin(x), w_0 cos(x), …, w_{m-1} sin(2^{m-1} x), w_{m-1} cos(2^{m-1} x))`.
pub fn encode(x: &[f64], cfg: &EncoderConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim(x.len()));
    out.extend_from_slice(x);
    for j in 0..cfg.num_bands {
        let w = cfg.band_weight(j);
        let freq = (1u64 << j) as f64;
        out.extend(x.iter().map(|v| w * (freq * v).sin()));
        out.extend(x.iter().map(|v| w * (freq * v).cos()));
    }
    out
}

/// Row-wise [`encode`] of an `n×k` tape variable.
pub fn encode_var<T: Real>(tape: &mut Tape<T>, x: Var, cfg: &EncoderConfig) -> Var {
    if cfg.num_bands == 0 {
        return x;
    }
    let (n, k) = (tape.value(x).rows(), tape.value(x).cols());
    let mut parts = vec![x];
    for j in 0..cfg.num_bands {
        let w = cfg.band_weight(j);
        if w == 0.0 {
            let zeros = tape.constant(Tensor::zeros(n, 2 * k));
            parts.push(zeros);
            continue;
        }
        let freq = T::from_f64_lossy((1u64 << j) as f64);
        let scaled = tape.scale(x, freq);
        let (mut s, mut c) = (tape.sin(scaled), tape.cos(scaled));
        if w != 1.0 {
            let wt = T::from_f64_lossy(w);
            s = tape.scale(s, wt);
            c = tape.scale(c, wt);
        }
        parts.push(s);
        parts.push(c);
    }
    tape.concat(&parts)
}
