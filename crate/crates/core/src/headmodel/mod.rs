//! Parametric head geometry: blendshape posing, closest-point queries over the
//! posed surface, and face-mask rasterization.

mod accel;
mod blendshape;
mod mask;
mod mesh;
mod params;

pub use accel::{ClosestPointResult, MeshAccel, RayHit};
pub(crate) use accel::barycentric_point;
pub use blendshape::BlendshapeModel;
pub use mask::{face_mask, Mask};
pub use mesh::{TriMesh, MIN_TRIANGLE_AREA};
pub use params::{axis_angle_matrix, HeadParams, HeadPose, POSE_DIM};
