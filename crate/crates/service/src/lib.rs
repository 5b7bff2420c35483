//! Parameter-driven rendering of a trained checkpoint over HTTP.
//!
//! Endpoints: `GET /health`, `GET /meta`, `POST /render` (JSON request, PNG
//! response). Renders run one at a time in arrival order.

mod server;
mod session;

pub use server::{router, serve, MILLIS_HEADER, WARNING_HEADER};
pub use session::{
    rescale_camera, strip_png, CameraSpec, MapFlags, Meta, OrbitSpec, RenderError, RenderRequest, Rendered, RequestError, Session,
    MAX_RESOLUTION, MIN_RESOLUTION, POSE_NAMES,
};
