//! The morphable-model deformation field: surface points carried from their
//! posed location back to the canonical mesh, attenuated off the surface.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::headmodel::{barycentric_point, BlendshapeModel, ClosestPointResult, HeadParams, MeshAccel, TriMesh};
use crate::rendering::Vec3;

/// Canonical-minus-posed position of the surface point described by `cp`.
///
/// `cp` must come from a query against `posed`; `canonical` supplies the
/// corresponding triangle with identical topology.
pub fn mmdef_vertex(canonical: &TriMesh, posed: &TriMesh, cp: &ClosestPointResult) -> Result<Vec3> {
    if !canonical.same_topology(posed) {
        return Err(Error::Internal("posed mesh topology differs from the canonical mesh".into()));
    }
    let [a, b, c] = canonical.triangle(cp.triangle_id);
    let [pa, pb, pc] = posed.triangle(cp.triangle_id);
    let canon = barycentric_point(&cp.barycentrics, &a, &b, &c);
    let posed_pt = barycentric_point(&cp.barycentrics, &pa, &pb, &pc);
    Ok(canon - posed_pt)
}

/// Per-frame field context: the posed surface, its accelerator, and the
/// inverse head pose used to align points fed to the residual network.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    canonical: TriMesh,
    accel: MeshAccel,
    rotation_inv: Matrix3<f64>,
    translation: Vec3,
    identity: bool,
}

impl FrameGeometry {
    pub fn from_model(model: &BlendshapeModel, params: &HeadParams) -> Result<Self> {
        let posed = model.pose_mesh(params)?;
        Self::from_meshes(model.template().clone(), &posed, params)
    }

    /// Uses an externally produced posed mesh (e.g. a fitted model) instead of posing the blendshapes.
    pub fn from_meshes(canonical: TriMesh, posed: &TriMesh, params: &HeadParams) -> Result<Self> {
        if !canonical.same_topology(posed) {
            return Err(Error::Internal("posed mesh topology differs from the canonical mesh".into()));
        }
        let identity = canonical.vertices() == posed.vertices();
        Ok(Self {
            accel: MeshAccel::build(posed)?,
            canonical,
            rotation_inv: params.pose.rotation_matrix().transpose(),
            translation: params.pose.translation_vector(),
            identity,
        })
    }

    pub fn posed(&self) -> &TriMesh {
        self.accel.mesh()
    }

    pub fn canonical(&self) -> &TriMesh {
        &self.canonical
    }

    pub fn accel(&self) -> &MeshAccel {
        &self.accel
    }

    /// `R⁻¹ (x - t)`: the point expressed in head-aligned coordinates.
    pub fn align(&self, x: &Vec3) -> Vec3 {
        self.rotation_inv * (x - self.translation)
    }

    /// Deformation at `x`: the surface value at the nearest posed point divided by
    /// `exp(distance / scale)`.
    pub fn mmdef_field(&self, x: &Vec3, scale: f64) -> Result<Vec3> {
        if !(scale > 0.0) {
            return Err(Error::param(format!("distance scale must be positive, got {scale}")));
        }
        if self.identity {
            if !x.iter().all(|c| c.is_finite()) {
                return Err(Error::param("field query must be finite"));
            }
            return Ok(Vec3::zeros());
        }
        let cp = self.accel.closest_point(x)?;
        let surface = mmdef_vertex(&self.canonical, self.accel.mesh(), &cp)?;
        Ok(surface / (cp.distance / scale).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::HeadPose;

    fn model() -> BlendshapeModel {
        let template = TriMesh::icosphere(2);
        let basis = vec![template.vertices().iter().map(|v| Vec3::new(0.0, 0.1 * v.x, 0.05)).collect()];
        let weights = template.vertices().iter().map(|v| (-v.y).clamp(0.0, 1.0)).collect();
        BlendshapeModel::new(template, basis, Vec3::new(0.0, 0.0, -0.2), Vec3::x(), weights).unwrap()
    }

    #[test]
    fn zero_params_give_zero_field() {
        let m = model();
        let f = FrameGeometry::from_model(&m, &HeadParams::zeros(1)).unwrap();
        for x in [Vec3::new(0.3, 2.0, -1.0), Vec3::zeros(), Vec3::new(5.0, 5.0, 5.0)] {
            assert_eq!(f.mmdef_field(&x, 1.0).unwrap(), Vec3::zeros());
        }
    }

    #[test]
    fn translation_moves_surface_back() {
        let m = model();
        let t = [0.3, -0.2, 0.5];
        let p = HeadParams { beta_exp: vec![0.0], pose: HeadPose { translation: t, ..Default::default() } };
        let f = FrameGeometry::from_model(&m, &p).unwrap();
        for v in f.posed().vertices().iter().step_by(11) {
            let cp = f.accel().closest_point(v).unwrap();
            let d = mmdef_vertex(f.canonical(), f.posed(), &cp).unwrap();
            assert!((d + Vec3::from(t)).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_matches_vertex_correspondence() {
        let m = model();
        let p = HeadParams { beta_exp: vec![0.0], pose: HeadPose { rotation: [0.2, -0.4, 0.1], ..Default::default() } };
        let f = FrameGeometry::from_model(&m, &p).unwrap();
        let r_inv = p.pose.rotation_matrix().transpose();
        for (i, v) in f.posed().vertices().iter().enumerate().step_by(9) {
            let cp = f.accel().closest_point(v).unwrap();
            let d = mmdef_vertex(f.canonical(), f.posed(), &cp).unwrap();
            // oracle: look the vertex up directly in the template
            let direct = m.template().vertices()[i] - v;
            assert!((d - direct).norm() < 1e-12);
            assert!((r_inv * v - v - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn decays_by_e_at_one_scale() {
        let m = model();
        let p = HeadParams { beta_exp: vec![0.0], pose: HeadPose { translation: [0.0, 0.0, 0.1], ..Default::default() } };
        let f = FrameGeometry::from_model(&m, &p).unwrap();
        let s = 0.7;
        // outward from a vertex along its normal direction lands at distance s from it
        let v = f.posed().vertices()[0];
        let dir = (v - Vec3::new(0.0, 0.0, 0.1)).normalize();
        let x = v + dir * s;
        let cp = f.accel().closest_point(&x).unwrap();
        assert!((cp.distance - s).abs() < 1e-12);
        let on_surface = mmdef_vertex(f.canonical(), f.posed(), &cp).unwrap();
        let val = f.mmdef_field(&x, s).unwrap();
        assert!((val - on_surface / std::f64::consts::E).norm() < 1e-9);
    }

    #[test]
    fn on_surface_value_is_unattenuated() {
        let m = model();
        let p = HeadParams { beta_exp: vec![0.8], pose: HeadPose { jaw: 0.3, ..Default::default() } };
        let f = FrameGeometry::from_model(&m, &p).unwrap();
        let [a, b, c] = f.posed().triangle(17);
        let x = (a + b + c) / 3.0;
        let cp = f.accel().closest_point(&x).unwrap();
        assert_eq!(f.mmdef_field(&x, 1.0).unwrap(), mmdef_vertex(f.canonical(), f.posed(), &cp).unwrap() / cp.distance.exp());
        assert!(cp.distance < 1e-12);
    }

    #[test]
    fn topology_mismatch_is_internal_error() {
        let canon = TriMesh::icosphere(1);
        let other = TriMesh::icosphere(2);
        assert!(matches!(
            FrameGeometry::from_meshes(canon, &other, &HeadParams::zeros(0)),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let f = FrameGeometry::from_model(&model(), &HeadParams::zeros(1)).unwrap();
        assert!(f.mmdef_field(&Vec3::zeros(), 0.0).is_err());
    }
}
