use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rigfield::dataio::ParamRanges;
use rigfield::headmodel::{BlendshapeModel, HeadParams, HeadPose, POSE_DIM};
use rigfield::model::PortraitModel;
use rigfield::rendering::{encode_png, render_image, Camera, MapKind, RenderOptions, RenderedImage, Vec3};
use rigfield::training::Checkpoint;

pub const MIN_RESOLUTION: u32 = 16;
pub const MAX_RESOLUTION: u32 = 256;

pub const POSE_NAMES: [&str; POSE_DIM] =
    ["rotation_x", "rotation_y", "rotation_z", "translation_x", "translation_y", "translation_z", "jaw"];

/// Camera placement for a render: an explicit camera given at the training
/// resolution, or an orbit around a target point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraSpec {
    Full(Camera),
    Orbit(OrbitSpec),
    /// The camera of a training frame.
    Frame(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    #[serde(default)]
    pub look_at: [f64; 3],
}

/// Diagnostic maps appended to the right of the color image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapFlags {
    pub depth: bool,
    pub residual: bool,
    pub deformation: bool,
}

impl MapFlags {
    pub const ALL: MapFlags = MapFlags { depth: true, residual: true, deformation: true };

    pub fn kinds(&self) -> Vec<MapKind> {
        let mut out = vec![MapKind::Color];
        for (on, kind) in [(self.depth, MapKind::Depth), (self.residual, MapKind::Residual), (self.deformation, MapKind::Deformation)] {
            if on {
                out.push(kind);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub beta_exp: Vec<f64>,
    pub beta_pose: Vec<f64>,
    pub camera: CameraSpec,
    /// Output width in pixels; the height follows the training aspect ratio.
    #[serde(default)]
    pub resolution: Option<u32>,
    #[serde(default)]
    pub maps: MapFlags,
    #[serde(default)]
    pub seed: u64,
}

impl RenderRequest {
    /// Zero parameters seen through a training frame's camera.
    pub fn neutral(num_expressions: usize, frame: usize) -> Self {
        Self {
            beta_exp: vec![0.0; num_expressions],
            beta_pose: vec![0.0; POSE_DIM],
            camera: CameraSpec::Frame(frame),
            resolution: None,
            maps: MapFlags::default(),
            seed: 0,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, RequestError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { None } else { Some(path) };
            RequestError { field, message: e.into_inner().to_string() }
        })
    }
}

/// A rejected request, naming the offending field when there is one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestError {
    pub field: Option<String>,
    pub message: String,
}

impl RequestError {
    fn field(field: &str, message: impl fmt::Display) -> Self {
        Self { field: Some(field.to_string()), message: message.to_string() }
    }
}

impl fmt::Display for RequestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for RequestError {}

#[derive(Debug)]
pub enum RenderError {
    Request(RequestError),
    Internal(rigfield::Error),
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::Request(e) => e.fmt(f),
            RenderError::Internal(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for RenderError {}

impl From<RequestError> for RenderError {
    fn from(e: RequestError) -> Self {
        RenderError::Request(e)
    }
}

impl From<rigfield::Error> for RenderError {
    fn from(e: rigfield::Error) -> Self {
        RenderError::Internal(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub num_expressions: usize,
    pub pose_dim: usize,
    pub pose_names: Vec<String>,
    pub param_ranges: ParamRanges,
    pub default_camera: Camera,
    pub width: u32,
    pub height: u32,
    pub step: u64,
    pub frames: usize,
}

pub struct Rendered {
    pub png: Vec<u8>,
    pub image: RenderedImage,
    pub warnings: Vec<String>,
}

/// A loaded checkpoint ready to render. Nothing here is mutated after loading.
pub struct Session {
    pub checkpoint: Checkpoint,
    pub head: BlendshapeModel,
    pub model: PortraitModel,
}

impl Session {
    pub fn load(path: &Path) -> rigfield::Result<Self> {
        let (checkpoint, head) = Checkpoint::load_dir(path)?;
        Self::new(checkpoint, head)
    }

    pub fn new(checkpoint: Checkpoint, head: BlendshapeModel) -> rigfield::Result<Self> {
        let model = checkpoint.model()?;
        Ok(Self { checkpoint, head, model })
    }

    pub fn num_expressions(&self) -> usize {
        self.head.num_expressions()
    }

    pub fn default_camera(&self) -> &Camera {
        let m = &self.checkpoint.meta;
        &m.frames[m.reference_frame()].camera
    }

    pub fn meta(&self) -> Meta {
        let m = &self.checkpoint.meta;
        Meta {
            num_expressions: self.num_expressions(),
            pose_dim: POSE_DIM,
            pose_names: POSE_NAMES.iter().map(|s| s.to_string()).collect(),
            param_ranges: m.param_ranges.clone(),
            default_camera: self.default_camera().clone(),
            width: m.width,
            height: m.height,
            step: m.step,
            frames: m.frames.len(),
        }
    }

    /// Output size for a requested width, plus a warning if it was clamped.
    pub fn output_size(&self, resolution: Option<u32>) -> (u32, u32, Option<String>) {
        let m = &self.checkpoint.meta;
        let Some(r) = resolution else {
            return (m.width, m.height, None);
        };
        let w = r.clamp(MIN_RESOLUTION, MAX_RESOLUTION);
        let warning = (w != r).then(|| format!("resolution {r} clamped to {w}"));
        let h = ((w as f64 * m.height as f64 / m.width as f64).round() as u32).max(1);
        (w, h, warning)
    }

    fn camera(&self, spec: &CameraSpec, width: u32, height: u32) -> Result<Camera, RequestError> {
        let m = &self.checkpoint.meta;
        let scale_x = width as f64 / m.width as f64;
        let camera = match spec {
            CameraSpec::Full(c) => rescale_camera(c, m.width, m.height, width, height),
            CameraSpec::Frame(i) => {
                let f = m.frames.get(*i).ok_or_else(|| {
                    RequestError::field("camera.frame", format!("frame {i} out of range (0..{})", m.frames.len()))
                })?;
                rescale_camera(&f.camera, m.width, m.height, width, height)
            }
            CameraSpec::Orbit(o) => {
                let r = self.default_camera();
                if !(o.radius > 0.0) || ![o.azimuth, o.elevation].iter().chain(&o.look_at).all(|v| v.is_finite()) {
                    return Err(RequestError::field("camera.orbit", "needs a positive radius and finite angles"));
                }
                Camera::orbit(o.azimuth, o.elevation, o.radius, Vec3::from(o.look_at), r.fx * scale_x, width, height, r.near, r.far)
                    .map_err(|e| RequestError::field("camera.orbit", e))?
            }
        };
        camera.validate().map_err(|e| RequestError::field("camera", e))?;
        Ok(camera)
    }

    fn params(&self, req: &RenderRequest) -> Result<HeadParams, RequestError> {
        let e = self.num_expressions();
        if req.beta_exp.len() != e {
            return Err(RequestError::field("beta_exp", format!("expected {e} entries, got {}", req.beta_exp.len())));
        }
        let pose = HeadPose::from_vector(&req.beta_pose).map_err(|_| {
            RequestError::field("beta_pose", format!("expected {POSE_DIM} entries, got {}", req.beta_pose.len()))
        })?;
        let params = HeadParams { beta_exp: req.beta_exp.clone(), pose };
        params.validate(e).map_err(|err| RequestError::field("beta_pose", err))?;
        Ok(params)
    }

    pub fn render_options(&self, seed: u64) -> RenderOptions {
        let m = &self.checkpoint.meta;
        RenderOptions {
            coarse_samples: m.train_config.coarse_samples,
            fine_samples: m.train_config.fine_samples(),
            jitter: true,
            seed,
            window_alpha: m.window_alpha,
            ..Default::default()
        }
    }

    /// Renders a request with the reference frame's codes. Identical requests
    /// give identical bytes.
    pub fn render(&self, req: &RenderRequest) -> Result<Rendered, RenderError> {
        let params = self.params(req)?;
        let (width, height, warning) = self.output_size(req.resolution);
        let camera = self.camera(&req.camera, width, height)?;
        let frame = self.checkpoint.frame_input(&self.model, &self.head, &params, self.checkpoint.meta.reference_frame())?;
        let image = render_image(&self.model, &frame, &camera, width as usize, height as usize, &self.render_options(req.seed))?;
        let png = strip_png(&image, &req.maps.kinds())?;
        Ok(Rendered { png, image, warnings: warning.into_iter().collect() })
    }
}

/// Rescales intrinsics given for a `w0 × h0` image to `w × h`.
pub fn rescale_camera(c: &Camera, w0: u32, h0: u32, w: u32, h: u32) -> Camera {
    if (w, h) == (w0, h0) {
        return c.clone();
    }
    let (sx, sy) = (w as f64 / w0 as f64, h as f64 / h0 as f64);
    Camera { fx: c.fx * sx, fy: c.fy * sy, cx: (c.cx + 0.5) * sx - 0.5, cy: (c.cy + 0.5) * sy - 0.5, ..c.clone() }
}

/// The requested maps side by side as one RGB image.
pub fn strip_png(image: &RenderedImage, kinds: &[MapKind]) -> rigfield::Result<Vec<u8>> {
    let (w, h) = (image.width, image.height);
    if kinds == [MapKind::Color] {
        return encode_png(w, h, 3, &image.color);
    }
    let panels: Vec<(usize, Vec<f32>)> = kinds.iter().map(|&k| image.display(k)).collect();
    let total = w * panels.len();
    let mut out = vec![0.0f32; 3 * total * h];
    for (p, (channels, data)) in panels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let dst = 3 * (y * total + p * w + x);
                for k in 0..3 {
                    out[dst + k] = if *channels == 3 { data[3 * (y * w + x) + k] } else { data[y * w + x] };
                }
            }
        }
    }
    encode_png(total, h, 3, &out)
}
