use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamHyper, Grads, LrSchedule, OptimState, ParamSet, Tape, Tensor};
use crate::deformation::FrameGeometry;
use crate::error::{Error, Result};
use crate::headmodel::{BlendshapeModel, HeadParams, Mask};
use crate::model::{FrameInput, PortraitModel};
use crate::nn::Binding;
use crate::rendering::{render_image, sample_depths, Camera, RaySpec, RenderOptions};

use super::trainer::record_color_error;
use super::{metrics, Metrics};

/// An observed frame whose deformation code is unknown.
#[derive(Clone, Debug)]
pub struct ValidationFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub camera: Camera,
    pub params: HeadParams,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeOptConfig {
    pub iters: usize,
    pub lr: f64,
    /// Rays per iteration; the whole image when it has fewer pixels.
    pub rays_per_iter: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub shard_rays: usize,
    pub window_alpha: f64,
    pub seed: u64,
}

impl Default for CodeOptConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 1e-3,
            rays_per_iter: 1550,
            coarse_samples: 64,
            fine_samples: 64,
            shard_rays: 64,
            window_alpha: f64::INFINITY,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeOptResult {
    pub omega: Vec<f64>,
    /// Full-image metrics with the initial code.
    pub before: Metrics,
    pub after: Metrics,
    /// Batch loss at every iteration, before its update.
    pub losses: Vec<f64>,
}

fn full_render_metrics(
    model: &PortraitModel,
    frame: &FrameInput,
    v: &ValidationFrame,
    cfg: &CodeOptConfig,
) -> Result<Metrics> {
    let opts = RenderOptions {
        coarse_samples: cfg.coarse_samples,
        fine_samples: cfg.fine_samples,
        jitter: false,
        seed: cfg.seed,
        window_alpha: cfg.window_alpha,
        tile_size: 16,
    };
    let img = render_image(model, frame, &v.camera, v.width, v.height, &opts)?;
    metrics(&img.color, &v.image, &v.mask)
}

/// Fits the deformation code to one frame with every network weight and the
/// appearance code held fixed. The model is only borrowed, so nothing but the
/// returned code can change.
pub fn optimize_deform_code(
    model: &PortraitModel,
    head: &BlendshapeModel,
    v: &ValidationFrame,
    init_omega: &[f64],
    phi: &[f64],
    cfg: &CodeOptConfig,
) -> Result<CodeOptResult> {
    let c = &model.config;
    if init_omega.len() != c.deform_code_dim || phi.len() != c.appear_code_dim {
        return Err(Error::param("initial codes do not match the model code sizes"));
    }
    if v.width * v.height == 0 || v.image.len() != 3 * v.width * v.height || v.mask.data.len() != v.width * v.height {
        return Err(Error::param("validation image, mask and dimensions disagree"));
    }
    if cfg.rays_per_iter == 0 || cfg.coarse_samples == 0 || !(cfg.lr > 0.0) {
        return Err(Error::param("code optimization needs rays, samples and a positive rate"));
    }
    v.camera.validate()?;
    let geometry = Arc::new(FrameGeometry::from_model(head, &v.params)?);
    let mut frame = FrameInput::new(geometry, v.params.clone(), init_omega.to_vec(), phi.to_vec());
    let before = full_render_metrics(model, &frame, v, cfg)?;

    let mut codes = ParamSet::<f32>::new();
    let id = codes.add("omega", Tensor::from_f64(1, init_omega.len(), init_omega));
    let mut optim = OptimState::new(&codes, LrSchedule::constant(cfg.lr), AdamHyper::default());
    let n_px = v.width * v.height;
    let n_rays = cfg.rays_per_iter.min(n_px);
    // fixed depths keep the objective identical to the evaluation render
    let opts = RenderOptions {
        coarse_samples: cfg.coarse_samples,
        fine_samples: cfg.fine_samples,
        jitter: false,
        seed: cfg.seed,
        window_alpha: cfg.window_alpha,
        tile_size: 16,
    };
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        frame.omega = codes.get(id).data().iter().map(|&x| x as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64);
        let pixels: Vec<usize> = if n_rays == n_px {
            (0..n_px).collect()
        } else {
            (0..n_rays).map(|_| rng.gen_range(0..n_px)).collect()
        };
        let rays: Vec<RaySpec> = pixels
            .iter()
            .map(|&p| RaySpec {
                frame: 0,
                ray: v.camera.ray((p % v.width) as f64, (p / v.width) as f64),
                near: v.camera.near,
                far: v.camera.far,
            })
            .collect();
        let target: Vec<f32> = pixels.iter().flat_map(|&p| v.image[3 * p..3 * p + 3].iter().copied()).collect();
        let norm = 1.0 / (3 * n_rays) as f32;
        let frames = std::slice::from_ref(&frame);
        let shard = cfg.shard_rays.max(1);
        let parts: Vec<Result<(f64, Grads<f32>)>> = rays
            .par_chunks(shard)
            .zip(target.par_chunks(3 * shard))
            .enumerate()
            .map(|(s, (rays, target))| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((it as u64) << 20) | (1 << 19) | s as u64);
                let depths = sample_depths(model, frames, rays, &opts, &mut rng)?;
                let n = rays.len() * depths[0].len();
                let mut tape = Tape::new();
                let w = tape.param(&codes, id);
                let omega = tape.gather(w, vec![0; n]);
                let p = PortraitModel::constant_codes(&mut tape, phi, n);
                let err = record_color_error(&mut tape, model, Binding::Frozen, frames, rays, &depths, target, omega, p, cfg.window_alpha)?;
                let loss = tape.scale(err, norm);
                let mut grads = Grads::zeros_like(&codes);
                tape.backward(loss, &mut grads)?;
                Ok((tape.value(loss).data()[0] as f64, grads))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = Grads::zeros_like(&codes);
        for part in parts {
            let (l, g) = part?;
            loss += l;
            grads.accumulate(&g);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::param(format!("code optimization diverged at iteration {it}")));
        }
        losses.push(loss);
        optim.step(&mut codes, &grads);
    }
    frame.omega = codes.get(id).data().iter().map(|&x| x as f64).collect();
    let after = full_render_metrics(model, &frame, v, cfg)?;
    Ok(CodeOptResult { omega: frame.omega, before, after, losses })
}
