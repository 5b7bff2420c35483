//! Datasets on disk: a TOML manifest, PNG frames and masks, the morphable
//! model file, and optional per-frame posed meshes.
//!
//! ```toml
//! version = 1
//! model = "model.rnrf"
//! width = 64
//! height = 64
//! num_expressions = 10
//!
//! [normalization]
//! center = [0.0, 0.0, 0.0]
//! scale = 1.0
//!
//! [[frames]]
//! index = 0
//! image = "frames/0000.png"
//! mask = "masks/0000.png"        # optional, derived from the posed mesh if absent
//! posed_mesh = "meshes/0000.obj" # optional, replaces the blendshape evaluation
//! beta_exp = [0.0, ...]
//! pose = { rotation = [0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0], jaw = 0.0 }
//! camera = { fx = 70.4, fy = 70.4, cx = 31.5, cy = 31.5, rotation = [[...], [...], [...]], position = [...], near = 0.5, far = 7.0 }
//! ```

mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::deformation::FrameGeometry;
use crate::error::{Error, Result};
use crate::headmodel::{face_mask, BlendshapeModel, HeadParams, HeadPose, Mask, TriMesh, POSE_DIM};
use crate::rendering::{load_png_rgb, save_png, Camera};

pub use synth::{
    head_albedo, ray_sphere, synth_camera, synth_scene, synthetic_head, trajectory, write_synth_scene, OracleHead,
    OracleScene, Sphere, SynthSpec, Trajectory, CAMERA_RADIUS, FAR, NEAR,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_VERSION: u32 = 1;

/// Maps raw scene coordinates into the normalized frame: `(p - center) * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { center: [0.0; 3], scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posed_mesh: Option<String>,
    pub beta_exp: Vec<f64>,
    pub pose: HeadPose,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: String,
    pub width: u32,
    pub height: u32,
    pub num_expressions: usize,
    #[serde(default)]
    pub normalization: Normalization,
    pub frames: Vec<FrameRecord>,
}

/// One captured frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Row-major RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub camera: Camera,
    pub params: HeadParams,
    pub mask: Mask,
    /// Externally fitted posed mesh, if supplied.
    pub posed_mesh: Option<TriMesh>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub model: BlendshapeModel,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
    pub normalization: Normalization,
}

/// Per-component minimum and maximum of the head parameters over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub beta_exp_min: Vec<f64>,
    pub beta_exp_max: Vec<f64>,
    pub pose_min: Vec<f64>,
    pub pose_max: Vec<f64>,
}

impl ParamRanges {
    pub fn from_params<'a>(num_expressions: usize, params: impl IntoIterator<Item = &'a HeadParams>) -> Self {
        let mut r = ParamRanges {
            beta_exp_min: vec![f64::INFINITY; num_expressions],
            beta_exp_max: vec![f64::NEG_INFINITY; num_expressions],
            pose_min: vec![f64::INFINITY; POSE_DIM],
            pose_max: vec![f64::NEG_INFINITY; POSE_DIM],
        };
        for p in params {
            for (k, &b) in p.beta_exp.iter().enumerate() {
                r.beta_exp_min[k] = r.beta_exp_min[k].min(b);
                r.beta_exp_max[k] = r.beta_exp_max[k].max(b);
            }
            for (k, &v) in p.pose.to_vector().iter().enumerate() {
                r.pose_min[k] = r.pose_min[k].min(v);
                r.pose_max[k] = r.pose_max[k].max(v);
            }
        }
        r
    }
}

fn load_err(frame: Option<usize>, message: impl Into<String>) -> Error {
    Error::Load { frame, message: message.into() }
}

impl SceneDataset {
    pub fn num_expressions(&self) -> usize {
        self.model.num_expressions()
    }

    /// Deformation geometry for frame `i`, from its supplied posed mesh if any.
    pub fn frame_geometry(&self, i: usize) -> Result<FrameGeometry> {
        let f = &self.frames[i];
        match &f.posed_mesh {
            Some(posed) => FrameGeometry::from_meshes(self.model.template().clone(), posed, &f.params),
            None => FrameGeometry::from_model(&self.model, &f.params),
        }
    }

    pub fn frame_geometries(&self) -> Result<Vec<Arc<FrameGeometry>>> {
        use rayon::prelude::*;
        (0..self.frames.len()).into_par_iter().map(|i| self.frame_geometry(i).map(Arc::new)).collect()
    }

    pub fn param_ranges(&self) -> ParamRanges {
        ParamRanges::from_params(self.num_expressions(), self.frames.iter().map(|f| &f.params))
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.num_expressions();
        let n = (self.width * self.height) as usize;
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(load_err(Some(i), format!("frame indices must be dense, found {}", f.index)));
            }
            f.params.validate(e).map_err(|err| load_err(Some(i), err.to_string()))?;
            f.camera.validate().map_err(|err| load_err(Some(i), err.to_string()))?;
            if f.image.len() != 3 * n || f.mask.data.len() != n {
                return Err(load_err(Some(i), "image or mask size does not match the dataset resolution"));
            }
            if let Some(m) = &f.posed_mesh {
                if !m.same_topology(self.model.template()) {
                    return Err(load_err(Some(i), "posed mesh topology differs from the model template"));
                }
            }
        }
        Ok(())
    }

    /// Writes manifest, model, frame PNGs, mask PNGs and any posed meshes into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["frames", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        self.model.save(&dir.join("model.rnrf"))?;
        let mut records = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let image = format!("frames/{:04}.png", f.index);
            let mask = format!("masks/{:04}.png", f.index);
            save_png(&dir.join(&image), self.width as usize, self.height as usize, 3, &f.image)?;
            let m: Vec<f32> = f.mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            save_png(&dir.join(&mask), self.width as usize, self.height as usize, 1, &m)?;
            let posed_mesh = match &f.posed_mesh {
                Some(mesh) => {
                    std::fs::create_dir_all(dir.join("meshes")).map_err(|e| Error::io(dir.join("meshes"), e))?;
                    let rel = format!("meshes/{:04}.obj", f.index);
                    std::fs::write(dir.join(&rel), mesh.to_obj_string()).map_err(|e| Error::io(dir.join(&rel), e))?;
                    Some(rel)
                }
                None => None,
            };
            records.push(FrameRecord {
                index: f.index,
                image,
                mask: Some(mask),
                posed_mesh,
                beta_exp: f.params.beta_exp.clone(),
                pose: f.params.pose.clone(),
                camera: f.camera.clone(),
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            model: "model.rnrf".into(),
            width: self.width,
            height: self.height,
            num_expressions: self.num_expressions(),
            normalization: self.normalization.clone(),
            frames: records,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// Resolves a dataset argument: either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and fully validates a dataset. Any missing or inconsistent asset
/// fails the whole load with an error naming the frame.
pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let path = manifest_path(path);
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
    }
    let model_path = root.join(&manifest.model);
    if !model_path.exists() {
        return Err(load_err(None, format!("missing model file {}", model_path.display())));
    }
    let model = BlendshapeModel::load(&model_path)?;
    if model.num_expressions() != manifest.num_expressions {
        return Err(load_err(
            None,
            format!("manifest declares {} expressions, model has {}", manifest.num_expressions, model.num_expressions()),
        ));
    }
    let (w, h) = (manifest.width, manifest.height);
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, rec) in manifest.frames.iter().enumerate() {
        let fail = |m: String| load_err(Some(i), m);
        if rec.index != i {
            return Err(fail(format!("frame indices must be dense, found {} at position {i}", rec.index)));
        }
        let params = HeadParams { beta_exp: rec.beta_exp.clone(), pose: rec.pose.clone() };
        params.validate(model.num_expressions()).map_err(|e| fail(e.to_string()))?;
        rec.camera.validate().map_err(|e| fail(e.to_string()))?;
        let image_path = root.join(&rec.image);
        if !image_path.exists() {
            return Err(fail(format!("missing image {}", image_path.display())));
        }
        let (iw, ih, image) = load_png_rgb(&image_path).map_err(|e| fail(format!("{}: {e}", image_path.display())))?;
        if (iw as u32, ih as u32) != (w, h) {
            return Err(fail(format!("image {} is {iw}x{ih}, expected {w}x{h}", image_path.display())));
        }
        let posed_mesh = match &rec.posed_mesh {
            Some(rel) => {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(fail(format!("missing posed mesh {}", p.display())));
                }
                let mesh = TriMesh::load_obj(&p).map_err(|e| fail(e.to_string()))?;
                if !mesh.same_topology(model.template()) {
                    return Err(fail(format!("posed mesh {} does not match the model topology", p.display())));
                }
                Some(mesh)
            }
            None => None,
        };
        let mask = match &rec.mask {
            Some(rel) => {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(fail(format!("missing mask {}", p.display())));
                }
                let (mw, mh, m) = load_png_rgb(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?;
                if (mw as u32, mh as u32) != (w, h) {
                    return Err(fail(format!("mask {} is {mw}x{mh}, expected {w}x{h}", p.display())));
                }
                Mask { width: w, height: h, data: m.chunks(3).map(|c| c[0] > 0.5).collect() }
            }
            None => {
                let posed = match &posed_mesh {
                    Some(m) => m.clone(),
                    None => model.pose_mesh(&params)?,
                };
                face_mask(&posed, &rec.camera, w, h)
            }
        };
        frames.push(Frame { index: i, image, camera: rec.camera.clone(), params, mask, posed_mesh });
    }
    let ds = SceneDataset { model, width: w, height: h, frames, normalization: manifest.normalization };
    ds.validate()?;
    Ok(ds)
}

/// One record of a driving sequence: parameters and optionally a camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingFrame {
    pub beta_exp: Vec<f64>,
    pub pose: HeadPose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingSequence {
    pub frames: Vec<DrivingFrame>,
}

impl DrivingSequence {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let seq: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if seq.frames.is_empty() {
            return Err(Error::format(path, "driving sequence has no frames"));
        }
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The dataset's own frames as a driving sequence (cameras included).
    pub fn from_dataset(ds: &SceneDataset) -> Self {
        Self {
            frames: ds
                .frames
                .iter()
                .map(|f| DrivingFrame { beta_exp: f.params.beta_exp.clone(), pose: f.params.pose.clone(), camera: Some(f.camera.clone()) })
                .collect(),
        }
    }
}
