//! Bounding volume hierarchy over a [`TriMesh`] for exact closest-point and
//! ray queries.

use crate::error::{Error, Result};
use crate::rendering::{Ray, Vec3};

use super::mesh::TriMesh;

const LEAF_SIZE: usize = 4;

/// Nearest surface point of a mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPointResult {
    pub point: Vec3,
    pub distance: f64,
    pub triangle_id: usize,
    pub barycentrics: [f64; 3],
}

/// First hit of a ray against a mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle_id: usize,
    pub barycentrics: [f64; 3],
}

#[derive(Clone, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    kind: NodeKind,
}

#[derive(Clone, Copy, Debug)]
enum NodeKind {
    /// Range into `MeshAccel::order`.
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

/// Acceleration structure owning a copy of its mesh.
#[derive(Clone, Debug)]
pub struct MeshAccel {
    mesh: TriMesh,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl MeshAccel {
    pub fn build(mesh: &TriMesh) -> Result<Self> {
        if mesh.triangles().is_empty() {
            return Err(Error::Construction("cannot build an accelerator over an empty mesh".into()));
        }
        // Revalidate: callers may hand us meshes built through unchecked paths.
        let mesh = TriMesh::new(mesh.vertices().to_vec(), mesh.triangles().to_vec())?;
        let n = mesh.triangles().len();
        let bounds: Vec<(Vec3, Vec3, Vec3)> = (0..n)
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                (a.inf(&b).inf(&c), a.sup(&b).sup(&c), (a + b + c) / 3.0)
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        build_node(&bounds, &mut order, 0, n, &mut nodes);
        Ok(Self { mesh, nodes, order })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf { .. })).count()
    }

    /// Exact nearest surface point. Equidistant candidates resolve to the lowest triangle id.
    pub fn closest_point(&self, x: &Vec3) -> Result<ClosestPointResult> {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::param("closest-point query must be finite"));
        }
        let mut best_d2 = f64::INFINITY;
        let mut best: Option<ClosestPointResult> = None;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if box_distance2(&node.lo, &node.hi, x) > best_d2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start..start + count] {
                        let [a, b, c] = self.mesh.triangle(t);
                        let (point, bary) = closest_on_triangle(x, &a, &b, &c);
                        let d2 = (x - point).norm_squared();
                        let better = match &best {
                            None => true,
                            Some(cur) => d2 < best_d2 || (d2 == best_d2 && t < cur.triangle_id),
                        };
                        if better {
                            best_d2 = d2;
                            best = Some(ClosestPointResult {
                                point,
                                distance: d2.sqrt(),
                                triangle_id: t,
                                barycentrics: bary,
                            });
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = box_distance2(&self.nodes[left].lo, &self.nodes[left].hi, x);
                    let dr = box_distance2(&self.nodes[right].lo, &self.nodes[right].hi, x);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.ok_or_else(|| Error::Internal("closest-point traversal found no triangle".into()))
    }

    /// Nearest intersection with `t` in `(t_min, t_max)`; ties go to the lowest triangle id.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<RayHit> {
        let inv = Vec3::new(1.0 / ray.direction.x, 1.0 / ray.direction.y, 1.0 / ray.direction.z);
        let mut best: Option<RayHit> = None;
        let mut t_best = t_max;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if !slab_hit(&node.lo, &node.hi, ray, &inv, t_min, t_best) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start..start + count] {
                        let [a, b, c] = self.mesh.triangle(t);
                        if let Some((th, u, v)) = ray_triangle(ray, &a, &b, &c) {
                            let closer = th > t_min
                                && (th < t_best || (th == t_best && best.is_some_and(|h| t < h.triangle_id)));
                            if closer {
                                t_best = th;
                                best = Some(RayHit { t: th, triangle_id: t, barycentrics: [1.0 - u - v, u, v] });
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        best
    }
}

fn build_node(bounds: &[(Vec3, Vec3, Vec3)], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut clo = Vec3::repeat(f64::INFINITY);
    let mut chi = Vec3::repeat(f64::NEG_INFINITY);
    for &t in &order[start..end] {
        let (blo, bhi, c) = &bounds[t];
        lo = lo.inf(blo);
        hi = hi.sup(bhi);
        clo = clo.inf(c);
        chi = chi.sup(c);
    }
    let idx = nodes.len();
    nodes.push(Node { lo, hi, kind: NodeKind::Leaf { start, count: end - start } });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let extent = chi - clo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    if extent[axis] <= 0.0 {
        return idx;
    }
    let mid = (start + end) / 2;
    order[start..end].sort_by(|&a, &b| bounds[a].2[axis].total_cmp(&bounds[b].2[axis]).then(a.cmp(&b)));
    let left = build_node(bounds, order, start, mid, nodes);
    let right = build_node(bounds, order, mid, end, nodes);
    nodes[idx].kind = NodeKind::Inner { left, right };
    idx
}

fn box_distance2(lo: &Vec3, hi: &Vec3, p: &Vec3) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let d = (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]);
        d2 += d * d;
    }
    d2
}

fn slab_hit(lo: &Vec3, hi: &Vec3, ray: &Ray, inv: &Vec3, t_min: f64, t_max: f64) -> bool {
    let (mut t0, mut t1) = (t_min, t_max);
    for k in 0..3 {
        // parallel to the slab: inside or out for every t
        if ray.direction[k] == 0.0 {
            if ray.origin[k] < lo[k] || ray.origin[k] > hi[k] {
                return false;
            }
            continue;
        }
        let mut a = (lo[k] - ray.origin[k]) * inv[k];
        let mut b = (hi[k] - ray.origin[k]) * inv[k];
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b * (1.0 + 4.0 * f64::EPSILON));
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Möller–Trumbore; returns `(t, u, v)` with barycentrics `(1-u-v, u, v)`.
fn ray_triangle(ray: &Ray, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - a;
    let u = s.dot(&p) * inv;
    // small slack so rays through shared edges hit at least one side
    const SLACK: f64 = 1e-12;
    if !(-SLACK..=1.0 + SLACK).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    if v < -SLACK || u + v > 1.0 + SLACK {
        return None;
    }
    Some((e2.dot(&q) * inv, u, v))
}

/// Closest point on triangle `abc` to `p` by Voronoi-region classification.
/// Returns the point and its barycentric weights for `(a, b, c)`.
pub(crate) fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    let bary = if d1 <= 0.0 && d2 <= 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        let bp = p - b;
        let d3 = ab.dot(&bp);
        let d4 = ac.dot(&bp);
        let cp = p - c;
        let d5 = ab.dot(&cp);
        let d6 = ac.dot(&cp);
        let vc = d1 * d4 - d3 * d2;
        let vb = d5 * d2 - d1 * d6;
        let va = d3 * d6 - d5 * d4;
        if d3 >= 0.0 && d4 <= d3 {
            [0.0, 1.0, 0.0]
        } else if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            let v = d1 / (d1 - d3);
            [1.0 - v, v, 0.0]
        } else if d6 >= 0.0 && d5 <= d6 {
            [0.0, 0.0, 1.0]
        } else if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            let w = d2 / (d2 - d6);
            [1.0 - w, 0.0, w]
        } else if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
            [0.0, 1.0 - w, w]
        } else {
            let denom = 1.0 / (va + vb + vc);
            [va * denom, vb * denom, vc * denom]
        }
    };
    (barycentric_point(&bary, a, b, c), bary)
}

pub(crate) fn barycentric_point(w: &[f64; 3], a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    a * w[0] + b * w[1] + c * w[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_triangle() -> TriMesh {
        TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn single_triangle_has_one_leaf() {
        assert_eq!(MeshAccel::build(&unit_triangle()).unwrap().leaf_count(), 1);
    }

    #[test]
    fn planar_projection() {
        let acc = MeshAccel::build(&unit_triangle()).unwrap();
        let r = acc.closest_point(&Vec3::new(0.25, 0.25, 1.0)).unwrap();
        assert!((r.point - Vec3::new(0.25, 0.25, 0.0)).norm() < 1e-15);
        assert!((r.distance - 1.0).abs() < 1e-15);
        assert_eq!(r.triangle_id, 0);
    }

    #[test]
    fn query_on_vertex_returns_vertex() {
        let mesh = TriMesh::icosphere(2);
        let acc = MeshAccel::build(&mesh).unwrap();
        for v in mesh.vertices().iter().step_by(7) {
            let r = acc.closest_point(v).unwrap();
            assert_eq!(r.distance, 0.0);
            assert_eq!(r.point, *v);
        }
    }

    #[test]
    fn empty_mesh_and_nonfinite_query_rejected() {
        let empty = TriMesh::new(vec![Vec3::zeros()], vec![]).unwrap();
        assert!(MeshAccel::build(&empty).is_err());
        let acc = MeshAccel::build(&unit_triangle()).unwrap();
        assert!(acc.closest_point(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn ties_resolve_to_lowest_triangle() {
        // Two triangles sharing the edge x = 0 of a tent; a point above the ridge is
        // equidistant from both.
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 0.0, -1.0),
            Vec3::new(-1.0, 0.0, -1.0),
        ];
        let mesh = TriMesh::new(v, vec![[0, 2, 1], [0, 1, 3]]).unwrap();
        let r = MeshAccel::build(&mesh).unwrap().closest_point(&Vec3::new(0.0, 0.5, 2.0)).unwrap();
        assert_eq!(r.triangle_id, 0);
    }

    #[test]
    fn ray_hits_sphere_front() {
        let mesh = TriMesh::icosphere(3);
        let acc = MeshAccel::build(&mesh).unwrap();
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 5.0), direction: -Vec3::z() };
        let hit = acc.intersect(&ray, 1e-9, f64::INFINITY).unwrap();
        assert!(hit.t > 3.9 && hit.t <= 4.0 + 1e-12);
        let miss = Ray { origin: Vec3::new(0.0, 2.0, 5.0), direction: -Vec3::z() };
        assert!(acc.intersect(&miss, 1e-9, f64::INFINITY).is_none());
    }
}
