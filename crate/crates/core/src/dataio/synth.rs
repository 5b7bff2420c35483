//! Procedural portrait scenes and the analytic ray tracer that renders them.
//! Nothing here touches the networks, so its images serve as ground truth.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmodel::{face_mask, BlendshapeModel, HeadParams, HeadPose, MeshAccel, TriMesh};
use crate::rendering::{Camera, Ray, Vec3};

use super::{Frame, Normalization, SceneDataset};

/// Distance from the orbit center to the camera.
pub const CAMERA_RADIUS: f64 = 3.0;
pub const NEAR: f64 = 0.5;
pub const FAR: f64 = 7.0;
const DOME_RADIUS: f64 = 4.0;
const GROUND_Y: f64 = -1.5;
/// Focal length as a multiple of the image width.
const FOCAL_PER_WIDTH: f64 = 1.1;

/// How head and camera move over the sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trajectory {
    /// First half: camera orbits a still, neutral head. Second half: fixed
    /// head-level camera while the head turns, talks and emotes.
    #[default]
    Capture,
    /// Camera orbit only, neutral head throughout.
    Orbit,
    /// Fixed camera only, animated head throughout.
    Performance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    pub num_expressions: usize,
    pub trajectory: Trajectory,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_frames: 150, width: 64, height: 64, num_expressions: 10, trajectory: Trajectory::Capture, seed: 7 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::param("frame count and resolution must be positive"));
        }
        if self.num_expressions == 0 {
            return Err(Error::param("need at least one expression coefficient"));
        }
        Ok(())
    }
}

/// Head-like blendshape model: a squashed icosphere with a nose, `num_expressions`
/// sinusoidal surface ripples concentrated on the face, and a hinged lower jaw.
/// The result is centered with unit bounding radius.
pub fn synthetic_head(num_expressions: usize, seed: u64) -> Result<BlendshapeModel> {
    let sphere = TriMesh::icosphere(2);
    let shape = |v: &Vec3| {
        let mut p = Vec3::new(0.8 * v.x, 1.0 * v.y, 0.9 * v.z);
        let nose = 0.18 * (-(v.x * v.x + (v.y + 0.05).powi(2)) / 0.05).exp() * v.z.max(0.0);
        p += v * nose;
        p
    };
    let verts: Vec<Vec3> = sphere.vertices().iter().map(shape).collect();
    let template = sphere.with_vertices(verts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    let basis = (0..num_expressions)
        .map(|_| {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)).normalize();
            let freq = rng.gen_range(2.0..4.5);
            let phase = rng.gen_range(0.0..TAU);
            let amp = rng.gen_range(0.04..0.08);
            sphere
                .vertices()
                .iter()
                .map(|n| {
                    let front = (n.z + 0.3).clamp(0.0, 1.0);
                    n * (amp * front * (freq * n.dot(&dir) + phase).sin())
                })
                .collect()
        })
        .collect();
    let weights = template
        .vertices()
        .iter()
        .map(|v| ((-0.25 - v.y) / 0.35).clamp(0.0, 1.0) * ((v.z + 0.6) / 0.6).clamp(0.0, 1.0))
        .collect();
    let model = BlendshapeModel::new(template, basis, Vec3::new(0.0, 0.05, -0.1), Vec3::x(), weights)?;
    let (center, radius) = model.template().bounding_sphere();
    model.normalized(center, 1.0 / radius)
}

/// Albedo painted on the canonical head: skin, hair cap, eyes and lips.
pub fn head_albedo(p: &Vec3) -> [f64; 3] {
    let front = p.z > 0.35;
    if p.y > 0.5 || (p.y > 0.2 && p.z < -0.2) {
        return [0.28, 0.17, 0.09];
    }
    for ex in [-0.3, 0.3] {
        if front && (p.x - ex).powi(2) + (p.y - 0.22).powi(2) < 0.11f64.powi(2) {
            return [0.1, 0.12, 0.2];
        }
    }
    if front && (p.y + 0.42).abs() < 0.07 && p.x.abs() < 0.3 {
        return [0.72, 0.16, 0.18];
    }
    [0.87, 0.64, 0.5]
}

/// An analytic sphere with a constant Lambertian albedo.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Closest forward intersection of `ray` with a sphere, if any.
pub fn ray_sphere(ray: &Ray, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 1e-9)
}

/// Posed head for the oracle: hits are mapped back to canonical coordinates for texturing.
pub struct OracleHead {
    accel: MeshAccel,
    canonical: TriMesh,
    normals: Vec<Vec3>,
}

impl OracleHead {
    pub fn new(model: &BlendshapeModel, params: &HeadParams) -> Result<Self> {
        let posed = model.pose_mesh(params)?;
        let mut normals = vec![Vec3::zeros(); posed.vertices().len()];
        for tri in posed.triangles() {
            let [a, b, c] = tri.map(|i| posed.vertices()[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            *n = n.normalize();
        }
        Ok(Self { accel: MeshAccel::build(&posed)?, canonical: model.template().clone(), normals })
    }
}

/// Scene content for the oracle renderer. Light travels along `-light`.
pub struct OracleScene {
    pub head: Option<OracleHead>,
    pub spheres: Vec<Sphere>,
    pub ground: bool,
    pub dome: bool,
    pub light: Vec3,
    pub ambient: f64,
}

impl OracleScene {
    pub fn portrait(head: OracleHead) -> Self {
        Self {
            head: Some(head),
            spheres: Vec::new(),
            ground: true,
            dome: true,
            light: Vec3::new(0.4, 0.7, 0.6).normalize(),
            ambient: 0.3,
        }
    }

    fn lambert(&self, albedo: [f64; 3], normal: &Vec3) -> [f64; 3] {
        let shade = self.ambient + (1.0 - self.ambient) * normal.dot(&self.light).max(0.0);
        albedo.map(|a| a * shade)
    }

    /// Radiance along one ray: nearest of head, spheres, ground; otherwise the
    /// sky dome (emissive), otherwise black.
    pub fn trace(&self, ray: &Ray) -> [f64; 3] {
        let mut best = f64::INFINITY;
        let mut color = [0.0; 3];
        if let Some(h) = &self.head {
            if let Some(hit) = h.accel.intersect(ray, 1e-9, best) {
                best = hit.t;
                let tri = h.accel.mesh().triangles()[hit.triangle_id];
                let b = hit.barycentrics;
                let can: Vec3 = (0..3).map(|k| h.canonical.vertices()[tri[k] as usize] * b[k]).sum();
                let mut n: Vec3 = (0..3).map(|k| h.normals[tri[k] as usize] * b[k]).sum();
                n = n.normalize();
                color = self.lambert(head_albedo(&can), &n);
            }
        }
        for s in &self.spheres {
            if let Some(t) = ray_sphere(ray, &s.center, s.radius) {
                if t < best {
                    best = t;
                    let n = (ray.at(t) - s.center) / s.radius;
                    color = self.lambert(s.albedo, &n);
                }
            }
        }
        if self.ground && ray.direction.y < 0.0 {
            let t = (GROUND_Y - ray.origin.y) / ray.direction.y;
            let p = ray.at(t);
            if t > 1e-9 && t < best && p.x * p.x + p.z * p.z < DOME_RADIUS * DOME_RADIUS {
                best = t;
                let parity = ((p.x / 0.5).floor() + (p.z / 0.5).floor()).rem_euclid(2.0) == 0.0;
                let albedo = if parity { [0.62, 0.6, 0.55] } else { [0.3, 0.32, 0.36] };
                color = self.lambert(albedo, &Vec3::y());
            }
        }
        if self.dome && best.is_infinite() {
            if let Some(t) = ray_sphere(ray, &Vec3::zeros(), DOME_RADIUS) {
                let h = (ray.at(t).y / DOME_RADIUS).clamp(-1.0, 1.0);
                let s = 0.5 * (h + 1.0);
                let horizon = [0.85, 0.8, 0.72];
                let zenith = [0.25, 0.42, 0.78];
                let swirl = 0.05 * (3.0 * (ray.at(t).x / DOME_RADIUS) * PI).sin();
                color = [0, 1, 2].map(|k| horizon[k] + (zenith[k] - horizon[k]) * s + swirl);
            }
        }
        color
    }

    /// Row-major RGB image through pixel centers.
    pub fn render(&self, camera: &Camera, width: u32, height: u32) -> Vec<f32> {
        let mut out = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            for x in 0..width {
                let c = self.trace(&camera.ray(x as f64, y as f64));
                out.extend(c.iter().map(|&v| v as f32));
            }
        }
        out
    }
}

/// The default synthetic camera looking at the head from `azimuth`/`elevation`.
pub fn synth_camera(azimuth: f64, elevation: f64, width: u32, height: u32) -> Result<Camera> {
    Camera::orbit(azimuth, elevation, CAMERA_RADIUS, Vec3::zeros(), FOCAL_PER_WIDTH * width as f64, width, height, NEAR, FAR)
}

/// Camera pose and head parameters for every frame.
pub fn trajectory(spec: &SynthSpec) -> Result<Vec<(Camera, HeadParams)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.num_expressions;
    let freqs: Vec<(f64, f64)> = (0..e).map(|_| (rng.gen_range(0.6..2.6), rng.gen_range(0.0..TAU))).collect();
    let n = spec.n_frames;
    let n_orbit = match spec.trajectory {
        Trajectory::Capture => n.div_ceil(2),
        Trajectory::Orbit => n,
        Trajectory::Performance => 0,
    };
    (0..n)
        .map(|i| {
            if i < n_orbit {
                let s = if n_orbit > 1 { i as f64 / (n_orbit - 1) as f64 } else { 0.5 };
                let az = -0.7 + 1.4 * s;
                let el = 0.15 + 0.1 * (TAU * s).sin();
                Ok((synth_camera(az, el, spec.width, spec.height)?, HeadParams::zeros(e)))
            } else {
                let m = n - n_orbit;
                let s = (i - n_orbit) as f64 / m.max(1) as f64;
                let pose = HeadPose {
                    rotation: [
                        0.15 * (TAU * 2.3 * s + 0.5).sin(),
                        0.35 * (TAU * 1.5 * s).sin(),
                        0.05 * (TAU * 0.9 * s + 1.0).sin(),
                    ],
                    translation: [0.03 * (TAU * 1.1 * s).sin(), 0.02 * (TAU * 1.7 * s).sin(), 0.0],
                    jaw: 0.25 * (0.5 - 0.5 * (TAU * 3.1 * s).cos()),
                };
                let beta_exp = freqs.iter().map(|(f, p)| (TAU * f * s + p).sin()).collect();
                Ok((synth_camera(0.0, 0.1, spec.width, spec.height)?, HeadParams { beta_exp, pose }))
            }
        })
        .collect()
}

/// Generates the full dataset in memory. The morphable model is rounded to
/// its on-disk precision first so a saved and reloaded dataset is identical.
pub fn synth_scene(spec: &SynthSpec) -> Result<SceneDataset> {
    let model = synthetic_head(spec.num_expressions, spec.seed)?.quantized()?;
    let traj = trajectory(spec)?;
    let frames: Result<Vec<Frame>> = traj
        .into_par_iter()
        .enumerate()
        .map(|(index, (camera, params))| {
            let head = OracleHead::new(&model, &params)?;
            let image = OracleScene::portrait(head).render(&camera, spec.width, spec.height);
            // stored as 8-bit PNG; keep the in-memory copy identical
            let image = image.into_iter().map(|v| crate::rendering::quantize(v) as f32 / 255.0).collect();
            let mask = face_mask(&model.pose_mesh(&params)?, &camera, spec.width, spec.height);
            Ok(Frame { index, image, camera, params, mask, posed_mesh: None })
        })
        .collect();
    Ok(SceneDataset {
        model,
        width: spec.width,
        height: spec.height,
        frames: frames?,
        normalization: Normalization::default(),
    })
}

/// [`synth_scene`] followed by [`SceneDataset::save`] into `dir`.
pub fn write_synth_scene(spec: &SynthSpec, dir: &Path) -> Result<SceneDataset> {
    let ds = synth_scene(spec)?;
    ds.save(dir)?;
    Ok(ds)
}
