//! Cameras, ray sampling, volume rendering and image output.

mod camera;
mod image_io;
mod render;
mod sampling;
mod volume;

pub use camera::{Camera, Ray, Vec3};
pub use image_io::{
    decode_float_dump, encode_float_dump, encode_png, load_png_rgb, quantize, save_float_dump, save_png, MapKind,
};
pub use render::{eval_field, render_image, render_rays, sample_depths, FieldValue, RaySpec, RenderOptions, RenderedImage};
pub use sampling::{edges_around, importance_samples, stratified_samples};
pub use volume::{quadrature_weights, volume_render, RenderedPixel, ShadedSample};
