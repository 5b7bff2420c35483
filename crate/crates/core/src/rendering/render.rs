use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{FrameInput, PortraitModel, PreparedSamples};
use crate::nn::Binding;

use super::sampling::{edges_around, importance_samples, stratified_samples};
use super::volume::{composite, quadrature_weights, RenderedPixel};
use super::{Camera, Ray, Vec3};

/// Samples evaluated per tape when running the networks without gradients.
const EVAL_CHUNK: usize = 4096;
/// Added to coarse weights before the fine draw so empty rays still sample.
const WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub jitter: bool,
    pub seed: u64,
    /// Coarse-to-fine window used for the deformation encoding.
    pub window_alpha: f64,
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { coarse_samples: 64, fine_samples: 64, jitter: false, seed: 0, window_alpha: f64::INFINITY, tile_size: 16 }
    }
}

/// A ray tagged with the frame whose conditioning applies to it.
#[derive(Clone, Copy, Debug)]
pub struct RaySpec {
    pub frame: usize,
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
}

/// Network output at one observed-space sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldValue {
    pub color: [f64; 3],
    pub sigma: f64,
    pub delta: [f64; 3],
    pub mmdef: [f64; 3],
}

/// Evaluates the warp and radiance networks at `(frame, point, direction)` triples.
pub fn eval_field(
    model: &PortraitModel,
    frames: &[FrameInput],
    queries: &[(usize, Vec3, Vec3)],
    window_alpha: f64,
) -> Result<Vec<FieldValue>> {
    let scale = model.config.distance_scale;
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_CHUNK) {
        let mut prep = PreparedSamples::default();
        let mut omega = Vec::with_capacity(chunk.len() * model.config.deform_code_dim);
        let mut phi = Vec::with_capacity(chunk.len() * model.config.appear_code_dim);
        for (f, x, d) in chunk {
            let frame = frames.get(*f).ok_or_else(|| Error::param(format!("frame {f} out of range")))?;
            prep.push_frame_samples(&frame.geometry, &frame.params, std::slice::from_ref(x), d, scale)?;
            omega.extend_from_slice(&frame.omega);
            phi.extend_from_slice(&frame.phi);
        }
        if prep.param_dim != model.config.param_dim() {
            return Err(Error::param(format!(
                "frame has {} head parameters, model expects {}",
                prep.param_dim,
                model.config.param_dim()
            )));
        }
        let n = chunk.len();
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(crate::autodiff::Tensor::from_f64(n, model.config.deform_code_dim, &omega));
        let p = tape.constant(crate::autodiff::Tensor::from_f64(n, model.config.appear_code_dim, &phi));
        let vars = model.forward_samples(&mut tape, &model.params, Binding::Frozen, &prep, w, p, window_alpha);
        let rgb = tape.value(vars.rgb).data();
        let sigma = tape.value(vars.sigma).data();
        let delta = tape.value(vars.delta).data();
        for i in 0..n {
            out.push(FieldValue {
                color: [rgb[3 * i] as f64, rgb[3 * i + 1] as f64, rgb[3 * i + 2] as f64],
                sigma: sigma[i] as f64,
                delta: [delta[3 * i] as f64, delta[3 * i + 1] as f64, delta[3 * i + 2] as f64],
                mmdef: [prep.mmdef[3 * i], prep.mmdef[3 * i + 1], prep.mmdef[3 * i + 2]],
            });
        }
    }
    Ok(out)
}

fn check_frame_codes(model: &PortraitModel, frames: &[FrameInput]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        if f.omega.len() != model.config.deform_code_dim || f.phi.len() != model.config.appear_code_dim {
            return Err(Error::param(format!("frame {i}: latent code sizes do not match the model")));
        }
        f.params.validate(model.config.num_expressions)?;
    }
    Ok(())
}

/// Per-ray sample depths: stratified coarse samples, then (if requested) fine
/// samples drawn from the coarse weights, merged in sorted order.
pub fn sample_depths(
    model: &PortraitModel,
    frames: &[FrameInput],
    rays: &[RaySpec],
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut coarse = Vec::with_capacity(rays.len());
    for r in rays {
        coarse.push(stratified_samples(opts.coarse_samples, r.near, r.far, opts.jitter, rng)?);
    }
    if opts.fine_samples == 0 {
        return Ok(coarse);
    }
    let queries: Vec<(usize, Vec3, Vec3)> = rays
        .iter()
        .zip(&coarse)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| (r.frame, r.ray.at(t), r.ray.direction)))
        .collect();
    let field = eval_field(model, frames, &queries, opts.window_alpha)?;
    let mut out = Vec::with_capacity(rays.len());
    for (i, (r, ts)) in rays.iter().zip(&coarse).enumerate() {
        let s = &field[i * ts.len()..(i + 1) * ts.len()];
        let sigma: Vec<f64> = s.iter().map(|v| v.sigma).collect();
        let w = quadrature_weights(ts, &sigma, r.far);
        let edges = edges_around(ts, r.near, r.far);
        let weights: Vec<f64> = w.iter().map(|w| w + WEIGHT_FLOOR).collect();
        let fine = importance_samples(&edges, &weights, opts.fine_samples, opts.jitter, rng)?;
        let mut all = ts.clone();
        all.extend(fine);
        all.sort_by(f64::total_cmp);
        out.push(all);
    }
    Ok(out)
}

/// Renders a batch of rays without gradients.
pub fn render_rays(
    model: &PortraitModel,
    frames: &[FrameInput],
    rays: &[RaySpec],
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RenderedPixel>> {
    check_frame_codes(model, frames)?;
    let depths = sample_depths(model, frames, rays, opts, rng)?;
    let queries: Vec<(usize, Vec3, Vec3)> = rays
        .iter()
        .zip(&depths)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| (r.frame, r.ray.at(t), r.ray.direction)))
        .collect();
    let field = eval_field(model, frames, &queries, opts.window_alpha)?;
    let mut start = 0;
    Ok(rays
        .iter()
        .zip(&depths)
        .map(|(r, ts)| {
            let s = &field[start..start + ts.len()];
            start += ts.len();
            let sigma: Vec<f64> = s.iter().map(|v| v.sigma).collect();
            let colors: Vec<[f64; 3]> = s.iter().map(|v| v.color).collect();
            let dm: Vec<f64> = s.iter().map(|v| Vec3::from(v.delta).norm()).collect();
            let fm: Vec<f64> = s.iter().map(|v| (Vec3::from(v.delta) + Vec3::from(v.mmdef)).norm()).collect();
            composite(ts, &sigma, &colors, &dm, &fm, r.far)
        })
        .collect())
}

/// A rendered frame with its diagnostic maps, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`.
    pub color: Vec<f32>,
    pub depth: Vec<f32>,
    pub acc: Vec<f32>,
    pub delta_mag: Vec<f32>,
    pub deform_mag: Vec<f32>,
    pub near: f64,
    pub far: f64,
}

/// Renders `camera`'s view of one frame. Pixels are processed in square tiles,
/// each with its own rng stream derived from `opts.seed`, so the result does
/// not depend on how tiles are scheduled.
pub fn render_image(
    model: &PortraitModel,
    frame: &FrameInput,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    camera.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::param("image dimensions must be positive"));
    }
    if opts.tile_size == 0 || opts.coarse_samples == 0 {
        return Err(Error::param("tile size and coarse sample count must be positive"));
    }
    let frames = std::slice::from_ref(frame);
    check_frame_codes(model, frames)?;
    let ts = opts.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let tiles: Vec<(usize, usize)> = (0..tiles_y).flat_map(|ty| (0..tiles_x).map(move |tx| (tx, ty))).collect();
    let rendered: Vec<Result<Vec<(usize, RenderedPixel)>>> = tiles
        .par_iter()
        .enumerate()
        .map(|(index, &(tx, ty))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(index as u64);
            let mut ids = Vec::new();
            let mut rays = Vec::new();
            for y in ty * ts..((ty + 1) * ts).min(height) {
                for x in tx * ts..((tx + 1) * ts).min(width) {
                    ids.push(y * width + x);
                    rays.push(RaySpec { frame: 0, ray: camera.ray(x as f64, y as f64), near: camera.near, far: camera.far });
                }
            }
            let px = render_rays(model, frames, &rays, opts, &mut rng)?;
            Ok(ids.into_iter().zip(px).collect())
        })
        .collect();
    let n = width * height;
    let mut img = RenderedImage {
        width,
        height,
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        acc: vec![0.0; n],
        delta_mag: vec![0.0; n],
        deform_mag: vec![0.0; n],
        near: camera.near,
        far: camera.far,
    };
    for tile in rendered {
        for (i, p) in tile? {
            for k in 0..3 {
                img.color[3 * i + k] = p.color[k] as f32;
            }
            img.depth[i] = p.depth as f32;
            img.acc[i] = p.acc as f32;
            img.delta_mag[i] = p.delta_mag as f32;
            img.deform_mag[i] = p.deform_mag as f32;
        }
    }
    Ok(img)
}
