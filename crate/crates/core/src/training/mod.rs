//! Objectives, the optimization loop, checkpoints, test-time code fitting and
//! image metrics.

mod checkpoint;
mod codeopt;
mod trainer;

#[cfg(test)]
mod loop_tests;

pub use checkpoint::{Checkpoint, CheckpointMeta, FrameMeta, CHECKPOINT_FILE, MODEL_FILE};
pub use codeopt::{optimize_deform_code, CodeOptConfig, CodeOptResult, ValidationFrame};
pub use trainer::{batch_loss, holdout_indices, train, LogRecord, RayBatch, TrainOutcome, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmodel::Mask;
use crate::model::NetworkConfig;
use crate::radiance::ConditioningConfig;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    /// Coarse plus fine samples per ray.
    pub samples_per_ray: usize,
    pub coarse_samples: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub lr1: f64,
    /// Steps over which the deformation encoding window opens; capped at `total_steps`.
    pub coarse_to_fine_steps: u64,
    /// Initial weight of the vertex residual penalty; decays to zero with the window.
    pub deform_reg_weight: f64,
    pub deform_reg_vertices: usize,
    pub mode: ConditioningConfig,
    /// Network shape. `num_expressions` and `mode` are taken from the dataset and `mode`.
    pub network: NetworkConfig,
    /// Frames excluded from training and used for evaluation.
    pub holdout: usize,
    /// Evaluate every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_rays: usize,
    /// Rays per gradient shard.
    pub shard_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 1550,
            samples_per_ray: 128,
            coarse_samples: 64,
            total_steps: 20_000,
            lr0: 5e-4,
            lr1: 5e-5,
            coarse_to_fine_steps: 40_000,
            deform_reg_weight: 1e-3,
            deform_reg_vertices: 64,
            mode: ConditioningConfig::C,
            network: NetworkConfig::full(0),
            holdout: 10,
            eval_every: 1000,
            eval_rays: 1024,
            shard_rays: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.total_steps == 0 || self.shard_rays == 0 {
            return Err(Error::param("ray, sample, step and shard counts must be positive"));
        }
        if self.coarse_samples == 0 || self.coarse_samples > self.samples_per_ray {
            return Err(Error::param("coarse samples must be in 1..=samples_per_ray"));
        }
        if !(self.lr0 > self.lr1 && self.lr1 > 0.0) {
            return Err(Error::param("learning rates must satisfy lr0 > lr1 > 0"));
        }
        if !(self.deform_reg_weight >= 0.0) {
            return Err(Error::param("deformation penalty weight must be nonnegative"));
        }
        Ok(())
    }

    pub fn fine_samples(&self) -> usize {
        self.samples_per_ray - self.coarse_samples
    }

    /// Network configuration for a dataset with `num_expressions` coefficients.
    pub fn network_for(&self, num_expressions: usize) -> NetworkConfig {
        NetworkConfig { num_expressions, mode: self.mode, ..self.network.clone() }
    }

    fn window_steps(&self) -> u64 {
        self.coarse_to_fine_steps.min(self.total_steps).max(1)
    }

    /// Fraction of the coarse-to-fine schedule completed at `step`.
    pub fn progress(&self, step: u64) -> f64 {
        (step as f64 / self.window_steps() as f64).min(1.0)
    }

    /// Encoding window position for the deformation network at `step`.
    pub fn window_alpha(&self, step: u64) -> f64 {
        self.network.deform_position_bands as f64 * self.progress(step)
    }

    pub fn deform_reg_weight_at(&self, step: u64) -> f64 {
        self.deform_reg_weight * (1.0 - self.progress(step))
    }
}

/// Mean squared error over all channels of all rays.
pub fn photometric_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::param("prediction and target must be nonempty and equal length"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared norm of residual displacements.
pub fn deform_reg(deltas: &[[f64; 3]]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::param("need at least one residual sample"));
    }
    Ok(deltas.iter().map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sum::<f64>() / deltas.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    /// `None` when the face mask is empty.
    pub face_mse: Option<f64>,
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Image metrics for row-major RGB buffers in `[0, 1]`.
pub fn metrics(pred: &[f32], gt: &[f32], mask: &Mask) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.len() != 3 * mask.data.len() || pred.is_empty() {
        return Err(Error::param("image and mask dimensions must match"));
    }
    let px_err: Vec<f64> = pred
        .chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>())
        .collect();
    let mse = px_err.iter().sum::<f64>() / pred.len() as f64;
    let n_face = mask.count();
    let face_mse = (n_face > 0).then(|| {
        px_err.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / (3 * n_face) as f64
    });
    Ok(Metrics { mse, psnr: psnr(mse), face_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn photometric_identities() {
        let a = [0.2, 0.4, 0.6, 0.1, 0.0, 1.0];
        assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((photometric_loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        assert!(photometric_loss(&a, &b[..3]).is_err());
    }

    #[test]
    fn photometric_matches_two_pass_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let diffs: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - b).collect();
        let mut total = 0.0;
        for d in &diffs {
            total += d * d;
        }
        assert!((photometric_loss(&p, &g).unwrap() - total / 300.0).abs() < 1e-15);
    }

    #[test]
    fn deform_reg_identities() {
        assert_eq!(deform_reg(&[[0.0; 3]; 4]).unwrap(), 0.0);
        assert_eq!(deform_reg(&[[3.0, 4.0, 0.0]]).unwrap(), 25.0);
        assert!(deform_reg(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let brute = d.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / 50.0;
        assert!((deform_reg(&d).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn metric_identities() {
        let mask = Mask { width: 2, height: 1, data: vec![true, false] };
        let img = [0.5f32; 6];
        let m = metrics(&img, &img, &mask).unwrap();
        assert_eq!((m.mse, m.psnr, m.face_mse), (0.0, PSNR_CAP, Some(0.0)));
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        let empty = Mask { width: 2, height: 1, data: vec![false, false] };
        assert_eq!(metrics(&img, &img, &empty).unwrap().face_mse, None);
    }

    #[test]
    fn face_mse_uses_only_masked_pixels() {
        // 2×2 image, left column masked; errors 0.1 inside and 0.3 outside
        let gt = [0.0f32; 12];
        let mut pred = [0.0f32; 12];
        for (i, px) in pred.chunks_mut(3).enumerate() {
            px.fill(if i % 2 == 0 { 0.1 } else { 0.3 });
        }
        let mask = Mask { width: 2, height: 2, data: vec![true, false, true, false] };
        let m = metrics(&pred, &gt, &mask).unwrap();
        let inside = 0.1f32 as f64 * 0.1f32 as f64;
        let outside = 0.3f32 as f64 * 0.3f32 as f64;
        assert!((m.face_mse.unwrap() - inside).abs() < 1e-12);
        assert!((m.mse - 0.5 * (inside + outside)).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let c = TrainConfig { total_steps: 20_000, ..Default::default() };
        assert_eq!(c.window_alpha(0), 0.0);
        assert_eq!(c.window_alpha(10_000), 5.0);
        assert_eq!(c.window_alpha(20_000), 10.0);
        assert_eq!(c.deform_reg_weight_at(0), 1e-3);
        assert_eq!(c.deform_reg_weight_at(20_000), 0.0);
        c.validate().unwrap();
        assert!(TrainConfig { lr1: 5e-4, ..c.clone() }.validate().is_err());
        assert_eq!(c.rays_per_batch, 1550);
        assert_eq!(c.samples_per_ray, 128);
    }
}
