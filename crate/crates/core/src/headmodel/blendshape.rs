use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rendering::Vec3;

use super::mesh::TriMesh;
use super::params::{axis_angle_matrix, HeadParams};

const MAGIC: &[u8; 4] = b"RNRF";
const VERSION: u32 = 1;

/// Linear expression blendshapes over a template mesh plus a hinged jaw.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeModel {
    template: TriMesh,
    /// `exp_basis[k][v]` is the offset of vertex `v` per unit of coefficient `k`.
    exp_basis: Vec<Vec<Vec3>>,
    jaw_pivot: Vec3,
    jaw_axis: Vec3,
    jaw_weights: Vec<f64>,
}

impl BlendshapeModel {
    pub fn new(
        template: TriMesh,
        exp_basis: Vec<Vec<Vec3>>,
        jaw_pivot: Vec3,
        jaw_axis: Vec3,
        jaw_weights: Vec<f64>,
    ) -> Result<Self> {
        let nv = template.vertices().len();
        if let Some(k) = exp_basis.iter().position(|b| b.len() != nv) {
            return Err(Error::Construction(format!("expression basis {k} does not cover all {nv} vertices")));
        }
        if !exp_basis.iter().flatten().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::Construction("expression basis has non-finite offsets".into()));
        }
        if (jaw_axis.norm() - 1.0).abs() > 1e-6 || !jaw_pivot.iter().all(|c| c.is_finite()) {
            return Err(Error::Construction("jaw axis must be a unit vector and pivot finite".into()));
        }
        if jaw_weights.len() != nv || !jaw_weights.iter().all(|w| (0.0..=1.0).contains(w)) {
            return Err(Error::Construction("jaw weights must be one value in [0, 1] per vertex".into()));
        }
        Ok(Self { template, exp_basis, jaw_pivot, jaw_axis, jaw_weights })
    }

    pub fn num_expressions(&self) -> usize {
        self.exp_basis.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.template.vertices().len()
    }

    /// The canonical mesh: neutral expression, zero pose.
    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn exp_basis(&self) -> &[Vec<Vec3>] {
        &self.exp_basis
    }

    pub fn jaw_weights(&self) -> &[f64] {
        &self.jaw_weights
    }

    /// Posed vertex positions: expression offsets, then the weighted jaw hinge,
    /// then global rotation about the origin, then translation.
    pub fn pose_vertices(&self, params: &HeadParams) -> Result<Vec<Vec3>> {
        params.validate(self.num_expressions())?;
        let mut verts = self.template.vertices().to_vec();
        for (beta, basis) in params.beta_exp.iter().zip(&self.exp_basis) {
            if *beta != 0.0 {
                for (v, d) in verts.iter_mut().zip(basis) {
                    *v += d * *beta;
                }
            }
        }
        if params.pose.jaw != 0.0 {
            let r = axis_angle_matrix(self.jaw_axis * params.pose.jaw);
            for (v, &w) in verts.iter_mut().zip(&self.jaw_weights) {
                if w > 0.0 {
                    let hinged = r * (*v - self.jaw_pivot) + self.jaw_pivot;
                    *v += (hinged - *v) * w;
                }
            }
        }
        if params.pose.rotation != [0.0; 3] {
            let r = params.pose.rotation_matrix();
            verts.iter_mut().for_each(|v| *v = r * *v);
        }
        if params.pose.translation != [0.0; 3] {
            let t = params.pose.translation_vector();
            verts.iter_mut().for_each(|v| *v += t);
        }
        Ok(verts)
    }

    pub fn pose_mesh(&self, params: &HeadParams) -> Result<TriMesh> {
        let verts = self.pose_vertices(params)?;
        // Large expression coefficients can fold triangles flat; keep those meshes usable.
        Ok(self.template.with_vertices_unchecked(verts))
    }

    /// Uniformly rescales and recenters the model: `v -> (v - center) * scale`.
    pub fn normalized(&self, center: Vec3, scale: f64) -> Result<Self> {
        let template = self.template.with_vertices(self.template.vertices().iter().map(|v| (v - center) * scale).collect())?;
        Self::new(
            template,
            self.exp_basis.iter().map(|b| b.iter().map(|d| d * scale).collect()).collect(),
            (self.jaw_pivot - center) * scale,
            self.jaw_axis,
            self.jaw_weights.clone(),
        )
    }

    /// Little-endian container: magic, version, E, V, T, then f32 template,
    /// f32 basis, u32 triangles, f32 jaw pivot, axis and weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (e, v, t) = (self.num_expressions(), self.num_vertices(), self.template.triangles().len());
        let mut out = Vec::with_capacity(20 + 12 * v * (e + 1) + 12 * t + 24 + 4 * v);
        out.extend_from_slice(MAGIC);
        for n in [VERSION, e as u32, v as u32, t as u32] {
            out.extend_from_slice(&n.to_le_bytes());
        }
        let mut put = |x: &Vec3| {
            for c in x.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        };
        self.template.vertices().iter().for_each(&mut put);
        self.exp_basis.iter().flatten().for_each(&mut put);
        for tri in self.template.triangles() {
            for i in tri {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        for x in [self.jaw_pivot, self.jaw_axis] {
            for c in x.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for w in &self.jaw_weights {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Construction("bad magic, not a morphable model file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Construction(format!("unsupported model version {version}")));
        }
        let (e, v, t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let template_v = (0..v).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
        let basis = (0..e)
            .map(|_| (0..v).map(|_| r.vec3()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let tris = (0..t).map(|_| Ok([r.u32()?, r.u32()?, r.u32()?])).collect::<Result<Vec<_>>>()?;
        let pivot = r.vec3()?;
        let axis = r.vec3()?;
        let weights = (0..v).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Construction("trailing bytes after model data".into()));
        }
        Self::new(TriMesh::new(template_v, tris)?, basis, pivot, axis, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Hex SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// The model as it reads back from disk (f32-rounded).
    pub fn quantized(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Construction("model file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f32()? as f64, self.f32()? as f64, self.f32()? as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::params::HeadPose;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn toy_model() -> BlendshapeModel {
        let template = TriMesh::icosphere(1);
        let basis = (0..3)
            .map(|k| {
                template
                    .vertices()
                    .iter()
                    .map(|v| v * (0.1 * (k as f64 + 1.0) * (v.x * (k as f64 + 2.0)).sin()))
                    .collect()
            })
            .collect();
        let weights = template.vertices().iter().map(|v| (-v.y).clamp(0.0, 1.0)).collect();
        BlendshapeModel::new(template, basis, Vec3::new(0.0, 0.2, -0.3), Vec3::x(), weights).unwrap()
    }

    #[test]
    fn zero_params_reproduce_template_exactly() {
        let m = toy_model();
        let posed = m.pose_mesh(&HeadParams::zeros(3)).unwrap();
        assert_eq!(posed.vertices(), m.template().vertices());
    }

    #[test]
    fn unit_coefficient_adds_basis() {
        let m = toy_model();
        let mut p = HeadParams::zeros(3);
        p.beta_exp[1] = 1.0;
        let posed = m.pose_vertices(&p).unwrap();
        for (i, v) in posed.iter().enumerate() {
            assert_eq!(*v, m.template().vertices()[i] + m.exp_basis()[1][i]);
        }
    }

    #[test]
    fn half_turn_about_z() {
        let template = TriMesh::new(
            vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let m = BlendshapeModel::new(template, vec![], Vec3::zeros(), Vec3::x(), vec![0.0; 3]).unwrap();
        let p = HeadParams { beta_exp: vec![], pose: HeadPose { rotation: [0.0, 0.0, PI], ..Default::default() } };
        let v = m.pose_vertices(&p).unwrap();
        assert!((v[0] - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_parameter_error() {
        assert!(matches!(toy_model().pose_mesh(&HeadParams::zeros(2)), Err(Error::Parameter(_))));
    }

    #[test]
    fn binary_roundtrip_is_stable() {
        let q = toy_model().quantized().unwrap();
        assert_eq!(q.to_bytes(), q.quantized().unwrap().to_bytes());
        assert_eq!(q.content_hash(), q.quantized().unwrap().content_hash());
        let mut bad = q.to_bytes();
        bad[0] = b'X';
        assert!(BlendshapeModel::from_bytes(&bad).is_err());
        assert!(BlendshapeModel::from_bytes(&q.to_bytes()[..40]).is_err());
    }

    proptest! {
        #[test]
        fn expression_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0,
                                b1 in prop::collection::vec(-1.0f64..1.0, 3),
                                b2 in prop::collection::vec(-1.0f64..1.0, 3)) {
            let m = toy_model();
            let t = m.template().vertices();
            let pose = |beta: Vec<f64>| m.pose_vertices(&HeadParams { beta_exp: beta, pose: HeadPose::default() }).unwrap();
            let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + b * y).collect();
            let (p1, p2, pm) = (pose(b1), pose(b2), pose(mix));
            for i in 0..t.len() {
                let expect = t[i] + (p1[i] - t[i]) * a + (p2[i] - t[i]) * b;
                prop_assert!((pm[i] - expect).norm() < 1e-9);
            }
        }

        #[test]
        fn rigid_pose_is_isometry(rx in -1.5f64..1.5, ry in -1.5f64..1.5, rz in -1.5f64..1.5,
                                  tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0) {
            let m = toy_model();
            let p = HeadParams {
                beta_exp: vec![0.3, -0.2, 0.5],
                pose: HeadPose { rotation: [rx, ry, rz], translation: [tx, ty, tz], jaw: 0.0 },
            };
            let unposed = m.pose_vertices(&HeadParams { beta_exp: p.beta_exp.clone(), pose: HeadPose::default() }).unwrap();
            let posed = m.pose_vertices(&p).unwrap();
            for i in (0..posed.len()).step_by(5) {
                for j in (0..posed.len()).step_by(7) {
                    let d0 = (unposed[i] - unposed[j]).norm();
                    let d1 = (posed[i] - posed[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }
}
