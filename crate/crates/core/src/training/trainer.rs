use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, Grads, LrSchedule, OptimState, Tape, Tensor, Var};
use crate::dataio::SceneDataset;
use crate::deformation::FrameGeometry;
use crate::error::{Error, Result};
use crate::model::{FrameInput, PortraitModel, PreparedSamples};
use crate::nn::Binding;
use crate::rendering::{render_rays, sample_depths, RenderOptions, RaySpec};

use super::checkpoint::{Checkpoint, CheckpointMeta, FrameMeta, CHECKPOINT_FILE};
use super::{psnr, TrainConfig};

/// Seed offset for the fixed evaluation ray set.
const EVAL_STREAM: u64 = u64::MAX;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub psnr_eval: Option<f64>,
    pub lr: f64,
    pub alpha_window: f64,
}

/// Rays with their target colors.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: Vec<RaySpec>,
    /// `rays × 3`.
    pub target: Vec<f32>,
}

/// `count` evenly spaced frame indices out of `n`.
pub fn holdout_indices(n: usize, count: usize) -> Result<Vec<usize>> {
    if count >= n {
        return Err(Error::param(format!("cannot hold out {count} of {n} frames")));
    }
    Ok((0..count).map(|k| (2 * k + 1) * n / (2 * count)).collect())
}

fn sample_rays(dataset: &SceneDataset, frames: &[usize], count: usize, rng: &mut ChaCha8Rng) -> RayBatch {
    let (w, h) = (dataset.width as usize, dataset.height as usize);
    let per_frame = w * h;
    let mut rays = Vec::with_capacity(count);
    let mut target = Vec::with_capacity(3 * count);
    for _ in 0..count {
        let idx = rng.gen_range(0..frames.len() * per_frame);
        let f = frames[idx / per_frame];
        let px = idx % per_frame;
        let frame = &dataset.frames[f];
        let cam = &frame.camera;
        rays.push(RaySpec { frame: f, ray: cam.ray((px % w) as f64, (px / w) as f64), near: cam.near, far: cam.far });
        target.extend_from_slice(&frame.image[3 * px..3 * px + 3]);
    }
    RayBatch { rays, target }
}

/// Records the differentiable fine pass for `rays` at the given depths and
/// returns the summed squared color error. `omega`/`phi` hold one row per sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_color_error(
    tape: &mut Tape<f32>,
    model: &PortraitModel,
    binding: Binding,
    frames: &[FrameInput],
    rays: &[RaySpec],
    depths: &[Vec<f64>],
    target: &[f32],
    omega: Var,
    phi: Var,
    alpha: f64,
) -> Result<Var> {
    let spr = depths.first().map_or(0, Vec::len);
    if spr == 0 || depths.iter().any(|d| d.len() != spr) {
        return Err(Error::Internal("rays must carry equal, nonzero sample counts".into()));
    }
    let mut prep = PreparedSamples::default();
    let mut deltas = Vec::with_capacity(rays.len() * spr);
    for (r, ts) in rays.iter().zip(depths) {
        let frame = &frames[r.frame];
        let pts: Vec<_> = ts.iter().map(|&t| r.ray.at(t)).collect();
        prep.push_frame_samples(&frame.geometry, &frame.params, &pts, &r.ray.direction, model.config.distance_scale)?;
        for i in 0..spr {
            let next = if i + 1 < spr { ts[i + 1] } else { r.far };
            deltas.push((next - ts[i]) as f32);
        }
    }
    let vars = model.forward_samples(tape, &model.params, binding, &prep, omega, phi, alpha);
    let pred = tape.composite(vars.rgb, vars.sigma, deltas, spr);
    let gt = tape.constant(Tensor::from_vec(rays.len(), 3, target.to_vec()));
    let diff = tape.sub(pred, gt);
    let sq = tape.mul(diff, diff);
    Ok(tape.sum(sq))
}

fn code_rows(rays: &[RaySpec], spr: usize) -> Vec<usize> {
    rays.iter().flat_map(|r| std::iter::repeat(r.frame).take(spr)).collect()
}

fn shard_rng(seed: u64, step: u64, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 20) | shard as u64);
    rng
}

/// Photometric loss of `batch` and its gradient with respect to all model
/// parameters (networks and code tables). Shards are evaluated in parallel and
/// reduced in index order.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &PortraitModel,
    frames: &[FrameInput],
    batch: &RayBatch,
    opts: &RenderOptions,
    shard_rays: usize,
    seed: u64,
    stream: u64,
) -> Result<(f64, Grads<f32>)> {
    if batch.rays.is_empty() || batch.target.len() != 3 * batch.rays.len() {
        return Err(Error::param("batch needs rays and one RGB target per ray"));
    }
    let norm = 1.0 / (3 * batch.rays.len()) as f32;
    let shards: Vec<Result<(f64, Grads<f32>)>> = batch
        .rays
        .par_chunks(shard_rays.max(1))
        .zip(batch.target.par_chunks(3 * shard_rays.max(1)))
        .enumerate()
        .map(|(s, (rays, target))| {
            let mut rng = shard_rng(seed, stream, s);
            let depths = sample_depths(model, frames, rays, opts, &mut rng)?;
            let spr = depths[0].len();
            let mut tape = Tape::new();
            let rows = code_rows(rays, spr);
            let dt = tape.param(&model.params, model.deform_codes);
            let at = tape.param(&model.params, model.appear_codes);
            let omega = tape.gather(dt, rows.clone());
            let phi = tape.gather(at, rows);
            let err =
                record_color_error(&mut tape, model, Binding::Train, frames, rays, &depths, target, omega, phi, opts.window_alpha)?;
            let loss = tape.scale(err, norm);
            let mut grads = Grads::zeros_like(&model.params);
            tape.backward(loss, &mut grads)?;
            Ok((tape.value(loss).data()[0] as f64, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::zeros_like(&model.params);
    for s in shards {
        let (l, g) = s?;
        total += l;
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

/// Weighted mean squared residual at random posed vertices of `batch_frames`;
/// gradients are added into `grads`.
fn deform_reg_step(
    model: &PortraitModel,
    frames: &[FrameInput],
    batch_frames: &[usize],
    count: usize,
    weight: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut Grads<f32>,
) -> Result<f64> {
    let mut prep = PreparedSamples::default();
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let f = batch_frames[rng.gen_range(0..batch_frames.len())];
        let frame = &frames[f];
        let verts = frame.geometry.posed().vertices();
        let v = verts[rng.gen_range(0..verts.len())];
        prep.push_frame_samples(&frame.geometry, &frame.params, &[v], &crate::rendering::Vec3::z(), model.config.distance_scale)?;
        rows.push(f);
    }
    let mut tape = Tape::new();
    let dt = tape.param(&model.params, model.deform_codes);
    let omega = tape.gather(dt, rows);
    let res = model.forward_residual(&mut tape, &model.params, Binding::Train, &prep, omega, alpha);
    let sq = tape.mul(res.delta, res.delta);
    let sum = tape.sum(sq);
    let loss = tape.scale(sum, (weight / count as f64) as f32);
    tape.backward(loss, grads)?;
    Ok(tape.value(loss).data()[0] as f64)
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: u64,
    loss: f64,
    frames: Vec<usize>,
    origins: Vec<[f64; 3]>,
    directions: Vec<[f64; 3]>,
    target: &'a [f32],
}

fn write_dump(dir: &Path, step: u64, loss: f64, batch: &RayBatch) -> PathBuf {
    let dump = BatchDump {
        step,
        loss,
        frames: batch.rays.iter().map(|r| r.frame).collect(),
        origins: batch.rays.iter().map(|r| r.ray.origin.into()).collect(),
        directions: batch.rays.iter().map(|r| r.ray.direction.into()).collect(),
        target: &batch.target,
    };
    let path = dir.join(format!("nonfinite_step{step}.json"));
    // a failed dump must not mask the divergence error itself
    let _ = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, serde_json::to_vec(&dump).unwrap_or_default()));
    path
}

/// Optimization state for one training run.
pub struct Trainer<'a> {
    dataset: &'a SceneDataset,
    pub config: TrainConfig,
    pub seed: u64,
    pub model: PortraitModel,
    pub optim: OptimState,
    pub step: u64,
    pub train_frames: Vec<usize>,
    pub holdout_frames: Vec<usize>,
    geometries: Vec<Arc<FrameGeometry>>,
    /// Where diagnostic dumps go on divergence.
    pub dump_dir: PathBuf,
    eval_batch: Option<RayBatch>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a SceneDataset, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let n = dataset.frames.len();
        let holdout_frames = if config.holdout == 0 { Vec::new() } else { holdout_indices(n, config.holdout)? };
        let train_frames: Vec<usize> = (0..n).filter(|i| !holdout_frames.contains(i)).collect();
        let model = PortraitModel::new(config.network_for(dataset.num_expressions()), n, seed)?;
        let schedule = LrSchedule { lr0: config.lr0, lr1: config.lr1, total_steps: config.total_steps };
        let mut optim = OptimState::new(&model.params, schedule, AdamHyper::default());
        optim.set_row_sparse(model.deform_codes);
        optim.set_row_sparse(model.appear_codes);
        let geometries = dataset.frame_geometries()?;
        let eval_frames = if holdout_frames.is_empty() { &train_frames } else { &holdout_frames };
        let eval_batch = (config.eval_every > 0 && config.eval_rays > 0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(EVAL_STREAM);
            sample_rays(dataset, eval_frames, config.eval_rays, &mut rng)
        });
        Ok(Self {
            dataset,
            config,
            seed,
            model,
            optim,
            step: 0,
            train_frames,
            holdout_frames,
            geometries,
            dump_dir: std::env::temp_dir(),
            eval_batch,
        })
    }

    /// Conditioning for every dataset frame from the current code tables.
    pub fn frame_inputs(&self) -> Vec<FrameInput> {
        self.dataset
            .frames
            .iter()
            .zip(&self.geometries)
            .map(|(f, g)| FrameInput::new(g.clone(), f.params.clone(), self.model.deform_code(f.index), self.model.appear_code(f.index)))
            .collect()
    }

    fn render_options(&self, jitter: bool) -> RenderOptions {
        RenderOptions {
            coarse_samples: self.config.coarse_samples,
            fine_samples: self.config.fine_samples(),
            jitter,
            seed: self.seed,
            window_alpha: self.config.window_alpha(self.step),
            tile_size: 16,
        }
    }

    pub fn sample_batch(&self, stream: u64) -> RayBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((stream << 20) | (1 << 19));
        sample_rays(self.dataset, &self.train_frames, self.config.rays_per_batch, &mut rng)
    }

    /// One optimizer update on `batch`; `stream` selects the jitter and
    /// regularizer randomness. Returns the total loss before the update.
    pub fn step_on(&mut self, batch: &RayBatch, stream: u64) -> Result<f64> {
        let frames = self.frame_inputs();
        let opts = self.render_options(true);
        let (mut loss, mut grads) =
            batch_loss(&self.model, &frames, batch, &opts, self.config.shard_rays, self.seed, stream)?;
        let reg_w = self.config.deform_reg_weight_at(self.step);
        if reg_w > 0.0 && self.config.deform_reg_vertices > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream((stream << 20) | (1 << 19) | 1);
            let batch_frames: Vec<usize> = batch.rays.iter().map(|r| r.frame).collect();
            loss += deform_reg_step(
                &self.model,
                &frames,
                &batch_frames,
                self.config.deform_reg_vertices,
                reg_w,
                opts.window_alpha,
                &mut rng,
                &mut grads,
            )?;
        }
        if !loss.is_finite() || !grads.all_finite() {
            let dump = write_dump(&self.dump_dir, self.step, loss, batch);
            return Err(Error::NonFinite { step: self.step, dump });
        }
        self.optim.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    /// Samples a batch for the current step and applies one update.
    pub fn step(&mut self) -> Result<LogRecord> {
        let lr = self.optim.current_lr();
        let alpha_window = self.config.window_alpha(self.step);
        let batch = self.sample_batch(self.step);
        let loss = self.step_on(&batch, self.step)?;
        let psnr_eval = if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
            self.evaluate()?
        } else {
            None
        };
        Ok(LogRecord { step: self.step, loss, psnr_eval, lr, alpha_window })
    }

    /// PSNR over the fixed evaluation rays, conditioned on the reference frame's codes.
    pub fn evaluate(&self) -> Result<Option<f64>> {
        let Some(batch) = &self.eval_batch else { return Ok(None) };
        let reference = self.train_frames[0];
        let frames: Vec<FrameInput> = self
            .frame_inputs()
            .into_iter()
            .map(|mut f| {
                f.omega = self.model.deform_code(reference);
                f.phi = self.model.appear_code(reference);
                f
            })
            .collect();
        let opts = self.render_options(false);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let px = render_rays(&self.model, &frames, &batch.rays, &opts, &mut rng)?;
        let mse = px
            .iter()
            .zip(batch.target.chunks(3))
            .map(|(p, t)| (0..3).map(|k| (p.color[k] - t[k] as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            / batch.target.len() as f64;
        Ok(Some(psnr(mse)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let frames = self
            .dataset
            .frames
            .iter()
            .map(|f| FrameMeta {
                index: f.index,
                camera: f.camera.clone(),
                params: f.params.clone(),
                holdout: self.holdout_frames.contains(&f.index),
            })
            .collect();
        let meta = CheckpointMeta {
            step: self.step,
            seed: self.seed,
            train_config: self.config.clone(),
            network: self.model.config.clone(),
            model_hash: self.dataset.model.content_hash(),
            width: self.dataset.width,
            height: self.dataset.height,
            frames,
            param_ranges: self.dataset.param_ranges(),
            window_alpha: self.config.window_alpha(self.step),
        };
        Checkpoint { meta, params: self.model.params.clone() }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Runs `config.total_steps` updates. With `out_dir`, appends the log to
/// `train_log.ndjson` as it goes and writes the checkpoint directory at the end.
pub fn train(
    dataset: &SceneDataset,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config.clone(), seed)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer.dump_dir = dir.to_path_buf();
            let path = dir.join("train_log.ndjson");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.total_steps as usize);
    while trainer.step < config.total_steps {
        let rec = trainer.step()?;
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&rec).expect("log records serialize");
            writeln!(file, "{line}").map_err(|e| Error::io(path.clone(), e))?;
        }
        on_record(&rec);
        log.push(rec);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save_dir(dir, &dataset.model)?;
        debug_assert!(dir.join(CHECKPOINT_FILE).exists());
    }
    Ok(TrainOutcome { checkpoint, log })
}
