use std::sync::OnceLock;

use super::*;
use crate::dataio::{synth_scene, SceneDataset, SynthSpec};
use crate::rendering::{render_image, RenderOptions};

fn smoke_config(steps: u64) -> TrainConfig {
    TrainConfig {
        rays_per_batch: 128,
        samples_per_ray: 32,
        coarse_samples: 16,
        total_steps: steps,
        lr0: 5e-3,
        lr1: 5e-4,
        network: NetworkConfig {
            deform_position_bands: 6,
            radiance_position_bands: 6,
            ..NetworkConfig::tiny(10, 32, 64)
        },
        holdout: 0,
        eval_every: 0,
        shard_rays: 64,
        ..Default::default()
    }
}

fn single_frame() -> SceneDataset {
    synth_scene(&SynthSpec { n_frames: 1, width: 16, height: 16, ..Default::default() }).unwrap()
}

fn small_sequence(frames: usize) -> SceneDataset {
    synth_scene(&SynthSpec { n_frames: frames, width: 8, height: 8, ..Default::default() }).unwrap()
}

/// The overfit run shared by the smoke and code-fitting tests.
fn smoke_run() -> &'static (SceneDataset, Checkpoint) {
    static RUN: OnceLock<(SceneDataset, Checkpoint)> = OnceLock::new();
    RUN.get_or_init(|| {
        let ds = single_frame();
        let out = train(&ds, &smoke_config(2000), 1, None, |_| {}).unwrap();
        (ds, out.checkpoint)
    })
}

fn render_frame(model: &crate::model::PortraitModel, ds: &SceneDataset, ck: &Checkpoint, f: usize) -> Vec<f32> {
    let frame = &ds.frames[f];
    let geo = std::sync::Arc::new(ds.frame_geometry(f).unwrap());
    let input = crate::model::FrameInput::new(geo, frame.params.clone(), model.deform_code(f), model.appear_code(f));
    let opts = RenderOptions {
        coarse_samples: ck.meta.train_config.coarse_samples,
        fine_samples: ck.meta.train_config.fine_samples(),
        window_alpha: ck.meta.window_alpha,
        ..Default::default()
    };
    render_image(model, &input, &frame.camera, ds.width as usize, ds.height as usize, &opts).unwrap().color
}

#[test]
fn overfits_single_frame() {
    let (ds, ck) = smoke_run();
    let model = ck.model().unwrap();
    let img = render_frame(&model, ds, ck, 0);
    let m = metrics(&img, &ds.frames[0].image, &ds.frames[0].mask).unwrap();
    assert!(m.psnr >= 35.0, "train PSNR {:.2}", m.psnr);
}

#[test]
fn fixed_batch_loss_decreases() {
    let ds = single_frame();
    let mut t = Trainer::new(&ds, smoke_config(2000), 1).unwrap();
    let batch = t.sample_batch(0);
    let losses: Vec<f64> = (0..51).map(|_| t.step_on(&batch, 0).unwrap()).collect();
    let violations = losses.windows(2).filter(|w| w[1] >= w[0] - 1e-6).count();
    assert!(violations <= 5, "{violations} non-decreasing steps: {losses:?}");
    assert!(losses[50] < losses[0]);
}

#[test]
fn vanishing_rate_leaves_parameters() {
    let ds = single_frame();
    let cfg = TrainConfig { lr0: 2e-300, lr1: 1e-300, ..smoke_config(10) };
    let mut t = Trainer::new(&ds, cfg, 1).unwrap();
    let before = t.model.params.clone();
    t.step().unwrap();
    for ((_, _, a), (_, _, b)) in before.iter().zip(t.model.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() as f64 <= 1e-12);
        }
    }
}

#[test]
fn codes_of_absent_frames_are_untouched() {
    let ds = small_sequence(4);
    let cfg = TrainConfig { rays_per_batch: 16, ..smoke_config(10) };
    let mut t = Trainer::new(&ds, cfg, 3).unwrap();
    let mut batch = t.sample_batch(0);
    for (i, r) in batch.rays.iter_mut().enumerate() {
        r.frame = if i % 2 == 0 { 0 } else { 2 };
    }
    let before = t.model.params.clone();
    t.step_on(&batch, 0).unwrap();
    for id in [t.model.deform_codes, t.model.appear_codes] {
        let (a, b) = (before.get(id), t.model.params.get(id));
        for f in 0..4 {
            if f == 0 || f == 2 {
                assert_ne!(a.row(f), b.row(f), "frame {f} code should move");
            } else {
                assert_eq!(a.row(f), b.row(f), "frame {f} code must stay bit-identical");
            }
        }
    }
}

#[test]
fn training_is_reproducible() {
    let ds = small_sequence(3);
    let cfg = TrainConfig { rays_per_batch: 24, holdout: 1, eval_every: 2, eval_rays: 8, ..smoke_config(4) };
    let a = train(&ds, &cfg, 9, None, |_| {}).unwrap();
    let b = train(&ds, &cfg, 9, None, |_| {}).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let c = train(&ds, &cfg, 10, None, |_| {}).unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn writes_log_and_checkpoint() {
    let ds = small_sequence(3);
    let cfg = TrainConfig { rays_per_batch: 1550, samples_per_ray: 128, coarse_samples: 64, holdout: 1, eval_every: 2, eval_rays: 8, ..smoke_config(2) };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, &cfg, 1, Some(dir.path()), |_| {}).unwrap();
    let text = std::fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.log);
    assert_eq!(records.len(), 2);
    assert!(records[0].psnr_eval.is_none() && records[1].psnr_eval.is_some());
    assert!(text.lines().next().unwrap().contains("\"psnr_eval\":null"));
    let (ck, head) = Checkpoint::load_dir(dir.path()).unwrap();
    assert_eq!(ck, out.checkpoint);
    assert_eq!(head, ds.model);
    assert_eq!((ck.meta.train_config.rays_per_batch, ck.meta.train_config.samples_per_ray), (1550, 128));
    assert_eq!(ck.meta.holdout_frames(), vec![1]);
}

#[test]
fn nonfinite_loss_aborts_with_dump() {
    let ds = single_frame();
    let mut t = Trainer::new(&ds, smoke_config(10), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.dump_dir = dir.path().to_path_buf();
    let mut batch = t.sample_batch(0);
    batch.target[0] = f32::NAN;
    match t.step_on(&batch, 0) {
        Err(crate::Error::NonFinite { step, dump }) => {
            assert_eq!(step, 0);
            let text = std::fs::read_to_string(dump).unwrap();
            assert!(text.contains("\"origins\""));
        }
        other => panic!("expected divergence error, got {other:?}"),
    }
    assert_eq!(t.step, 0);
}

#[test]
fn holdout_is_evenly_spaced() {
    assert_eq!(holdout_indices(150, 10).unwrap(), vec![7, 22, 37, 52, 67, 82, 97, 112, 127, 142]);
    assert_eq!(holdout_indices(2, 1).unwrap(), vec![1]);
    assert!(holdout_indices(3, 3).is_err());
}

fn validation_frame(ds: &SceneDataset, f: usize) -> ValidationFrame {
    let frame = &ds.frames[f];
    ValidationFrame {
        width: ds.width as usize,
        height: ds.height as usize,
        image: frame.image.clone(),
        camera: frame.camera.clone(),
        params: frame.params.clone(),
        mask: frame.mask.clone(),
    }
}

fn codeopt_config(ck: &Checkpoint) -> CodeOptConfig {
    CodeOptConfig {
        rays_per_iter: 256,
        coarse_samples: ck.meta.train_config.coarse_samples,
        fine_samples: ck.meta.train_config.fine_samples(),
        window_alpha: ck.meta.window_alpha,
        ..Default::default()
    }
}

#[test]
fn code_fit_plateaus_at_an_optimal_code() {
    let (ds, ck) = smoke_run();
    let model = ck.model().unwrap();
    let bytes = ck.to_bytes().unwrap();
    let v = validation_frame(ds, 0);
    let cfg = codeopt_config(ck);
    let first = optimize_deform_code(&model, &ds.model, &v, &model.deform_code(0), &model.appear_code(0), &cfg).unwrap();
    assert_eq!(first.losses.len(), 200);
    assert!(first.after.mse <= first.before.mse);
    let second = optimize_deform_code(&model, &ds.model, &v, &first.omega, &model.appear_code(0), &cfg).unwrap();
    let change = (second.after.mse - second.before.mse).abs() / second.before.mse;
    assert!(change < 0.01, "relative change {change}");
    // nothing but the returned code may change
    let after = Checkpoint { meta: ck.meta.clone(), params: model.params.clone() };
    assert_eq!(after.to_bytes().unwrap(), bytes);
}

/// The table code is optimal for the jittered training objective, not the
/// fixed-depth one being fitted here, so at smoke scale the first fit still
/// gains several percent.
#[test]
#[ignore]
fn code_fit_from_table_code_plateaus() {
    let (ds, ck) = smoke_run();
    let model = ck.model().unwrap();
    let v = validation_frame(ds, 0);
    let r = optimize_deform_code(&model, &ds.model, &v, &model.deform_code(0), &model.appear_code(0), &codeopt_config(ck))
        .unwrap();
    let change = (r.after.mse - r.before.mse).abs() / r.before.mse;
    assert!(change < 0.01, "relative change {change}");
}

#[test]
fn code_fit_rejects_mismatched_inputs() {
    let ds = small_sequence(2);
    let model = crate::model::PortraitModel::new(NetworkConfig::tiny(10, 8, 8), 2, 0).unwrap();
    let v = validation_frame(&ds, 0);
    let cfg = CodeOptConfig { iters: 1, ..Default::default() };
    let (w, p) = (model.deform_code(0), model.appear_code(0));
    assert!(optimize_deform_code(&model, &ds.model, &v, &w[..3], &p, &cfg).is_err());
    let mut bad = v.clone();
    bad.image.pop();
    assert!(optimize_deform_code(&model, &ds.model, &bad, &w, &p, &cfg).is_err());
    assert!(optimize_deform_code(&model, &ds.model, &v, &w, &p, &CodeOptConfig { lr: 0.0, ..cfg }).is_err());
}

