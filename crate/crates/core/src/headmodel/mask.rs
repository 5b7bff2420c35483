use crate::rendering::{Camera, Vec3};

use super::mesh::TriMesh;

/// Binary image, row-major, `height` rows of `width` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Pixels whose centers are covered by at least one triangle of `mesh` as seen by
/// `camera`. Geometry in front of the near plane is clipped away.
pub fn face_mask(mesh: &TriMesh, camera: &Camera, width: u32, height: u32) -> Mask {
    let mut mask = Mask::empty(width, height);
    let cam_verts: Vec<Vec3> = mesh.vertices().iter().map(|v| camera.world_to_camera(v)).collect();
    for tri in mesh.triangles() {
        let poly = clip_near(&tri.map(|i| cam_verts[i as usize]), camera.near);
        if poly.len() < 3 {
            continue;
        }
        let px: Vec<(f64, f64)> = poly.iter().map(|p| camera.project_camera(p)).collect();
        for k in 1..px.len() - 1 {
            fill_triangle(&mut mask, px[0], px[k], px[k + 1]);
        }
    }
    mask
}

/// Sutherland–Hodgman clip of a camera-space polygon against `z >= near`.
fn clip_near(tri: &[Vec3; 3], near: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (tri[i], tri[(i + 1) % 3]);
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = near;
            out.push(p);
        }
    }
    out
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn fill_triangle(mask: &mut Mask, a: (f64, f64), b: (f64, f64), c: (f64, f64)) {
    let area = edge(a, b, c);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    let x0 = a.0.min(b.0).min(c.0).ceil().max(0.0);
    let x1 = a.0.max(b.0).max(c.0).floor().min(w - 1.0);
    let y0 = a.1.min(b.1).min(c.1).ceil().max(0.0);
    let y1 = a.1.max(b.1).max(c.1).floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let sign = area.signum();
    for y in y0 as u32..=y1 as u32 {
        for x in x0 as u32..=x1 as u32 {
            let p = (x as f64, y as f64);
            let inside = edge(a, b, p) * sign >= 0.0 && edge(b, c, p) * sign >= 0.0 && edge(c, a, p) * sign >= 0.0;
            if inside {
                mask.data[(y * mask.width + x) as usize] = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera() -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::zeros(), Vec3::y(), 40.0, 32, 24, 0.5, 10.0).unwrap()
    }

    /// Independent reference: per row, intersect the horizontal line through the
    /// pixel centers with each triangle edge and fill the covered span.
    fn scanline_oracle(tri: [(f64, f64); 3], width: u32, height: u32) -> Vec<bool> {
        let mut out = vec![false; (width * height) as usize];
        for y in 0..height {
            let yc = y as f64;
            let mut xs = Vec::new();
            for i in 0..3 {
                let (p, q) = (tri[i], tri[(i + 1) % 3]);
                if (p.1 <= yc && yc <= q.1) || (q.1 <= yc && yc <= p.1) {
                    if p.1 == q.1 {
                        xs.extend([p.0, q.0]);
                    } else {
                        xs.push(p.0 + (yc - p.1) / (q.1 - p.1) * (q.0 - p.0));
                    }
                }
            }
            if xs.is_empty() {
                continue;
            }
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for x in 0..width {
                let xc = x as f64;
                if xc >= lo && xc <= hi {
                    out[(y * width + x) as usize] = true;
                }
            }
        }
        out
    }

    #[test]
    fn mask_has_requested_dimensions() {
        let m = face_mask(&TriMesh::icosphere(1), &front_camera(), 32, 24);
        assert_eq!((m.width, m.height, m.data.len()), (32, 24, 32 * 24));
        assert!(m.count() > 0);
    }

    #[test]
    fn mesh_behind_camera_is_empty() {
        let cam = front_camera();
        let behind: Vec<Vec3> = TriMesh::icosphere(1).vertices().iter().map(|v| v * 0.5 + Vec3::new(0.0, 0.0, 8.0)).collect();
        let mesh = TriMesh::icosphere(1).with_vertices(behind).unwrap();
        assert_eq!(face_mask(&mesh, &cam, 32, 24).count(), 0);
    }

    #[test]
    fn single_triangle_matches_scanline_reference() {
        let cam = front_camera();
        let tris = [
            [Vec3::new(-1.1, -0.9, 0.3), Vec3::new(1.3, -0.2, 0.1), Vec3::new(0.17, 1.21, -0.4)],
            [Vec3::new(-2.3, 1.7, -1.0), Vec3::new(0.4, -0.3, 0.5), Vec3::new(0.9, 2.9, 0.2)],
        ];
        for t in tris {
            let mesh = TriMesh::new(t.to_vec(), vec![[0, 1, 2]]).unwrap();
            let mask = face_mask(&mesh, &cam, 32, 24);
            let px = t.map(|v| cam.project_camera(&cam.world_to_camera(&v)));
            assert_eq!(mask.data, scanline_oracle(px, 32, 24));
            assert!(mask.count() > 10);
        }
    }

    #[test]
    fn triangle_straddling_near_plane_is_clipped_not_dropped() {
        let cam = front_camera();
        // one vertex behind the camera
        let mesh = TriMesh::new(
            vec![Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, -0.5, 0.0), Vec3::new(0.0, 0.5, 6.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(face_mask(&mesh, &cam, 32, 24).count() > 0);
    }
}
