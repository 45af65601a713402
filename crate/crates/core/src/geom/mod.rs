//! Triangle meshes: validation, vertex normals (with adjoint), vertex-offset
//! deformation, linear blend skinning, regularizers and surface distances.

mod distance;
pub mod obj;
pub mod primitives;
mod regularize;

use std::collections::HashMap;

pub use distance::{chamfer_and_p2s, point_triangle_distance, sample_surface, SurfaceDistances};
pub use regularize::{mesh_regularizers, mesh_regularizers_relative, uniform_laplacian, LaplacianTerm, MeshRegularizers};

use crate::error::{Error, Result};
use crate::{RigidTransform, Vec2, Vec3};

/// Per-vertex bone weights, row-major `vertex_count × bone_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    pub bone_count: usize,
    pub weights: Vec<f64>,
}

impl SkinWeights {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(bone_count: usize, weights: Vec<f64>, vertex_count: usize) -> Result<Self> {
        if weights.len() != bone_count * vertex_count {
            return Err(Error::arg(format!(
                "skin weights: expected {} values, got {}",
                bone_count * vertex_count,
                weights.len()
            )));
        }
        if bone_count > 0 {
            for (v, row) in weights.chunks(bone_count).enumerate() {
                if row.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::arg(format!("skin weights: negative weight on vertex {v}")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                    return Err(Error::arg(format!("skin weights: vertex {v} row sums to {s}")));
                }
            }
        }
        Ok(SkinWeights {
            bone_count,
            weights,
        })
    }

    #[inline]
    pub fn row(&self, v: usize) -> &[f64] {
        &self.weights[v * self.bone_count..(v + 1) * self.bone_count]
    }
}

/// Indexed triangle mesh with per-vertex UVs.
///
/// Vertices sharing an identical position (UV seams, per-face box corners)
/// form a weld group: they share one normal, and the regularizers treat them
/// as a single graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub uvs: Vec<Vec2>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Vec<Vec3>,
    pub skin: Option<SkinWeights>,
    weld: Vec<u32>,
}

impl TriangleMesh {
    pub fn new(positions: Vec<Vec3>, uvs: Vec<Vec2>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = positions.len();
        if uvs.len() != n {
            return Err(Error::arg(format!("{} uvs for {n} vertices", uvs.len())));
        }
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= n) {
                return Err(Error::arg(format!("face {f} references a vertex >= {n}")));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::arg(format!("face {f} is degenerate {face:?}")));
            }
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::arg("non-finite vertex position"));
        }
        let weld = weld_groups(&positions);
        let mut mesh = TriangleMesh {
            positions,
            uvs,
            faces,
            normals: Vec::new(),
            skin: None,
            weld,
        };
        mesh.normals = compute_vertex_normals(&mesh);
        Ok(mesh)
    }

    pub fn with_skin(mut self, skin: SkinWeights) -> Result<Self> {
        if skin.weights.len() != skin.bone_count * self.vertex_count() {
            return Err(Error::arg("skin weight rows do not match vertex count"));
        }
        self.skin = Some(skin);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn bone_count(&self) -> usize {
        self.skin.as_ref().map_or(0, |s| s.bone_count)
    }

    /// Representative vertex of each vertex's weld group (the smallest index).
    pub fn weld(&self) -> &[u32] {
        &self.weld
    }

    #[inline]
    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.positions[a as usize],
            self.positions[b as usize],
            self.positions[c as usize],
        ]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.positions.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    /// Same topology, UVs and skin with new positions; normals recomputed.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> TriangleMesh {
        assert_eq!(positions.len(), self.vertex_count());
        let mut out = TriangleMesh {
            positions,
            uvs: self.uvs.clone(),
            faces: self.faces.clone(),
            normals: Vec::new(),
            skin: self.skin.clone(),
            weld: self.weld.clone(),
        };
        out.normals = compute_vertex_normals(&out);
        out
    }

    /// Concatenate meshes into one (indices rebased, welds recomputed).
    pub fn merge(parts: &[TriangleMesh]) -> Result<TriangleMesh> {
        let mut positions = Vec::new();
        let mut uvs = Vec::new();
        let mut faces = Vec::new();
        for m in parts {
            let base = positions.len() as u32;
            positions.extend_from_slice(&m.positions);
            uvs.extend_from_slice(&m.uvs);
            faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        TriangleMesh::new(positions, uvs, faces)
    }
}

fn weld_groups(positions: &[Vec3]) -> Vec<u32> {
    let mut first: HashMap<[u64; 3], u32> = HashMap::with_capacity(positions.len());
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // -0.0 and 0.0 must land in the same group.
            let key = [
                (p.x + 0.0).to_bits(),
                (p.y + 0.0).to_bits(),
                (p.z + 0.0).to_bits(),
            ];
            *first.entry(key).or_insert(i as u32)
        })
        .collect()
}

/// Unnormalized face normal `(b-a)×(c-a)`; its length is twice the area.
#[inline]
pub(crate) fn face_cross(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    (b - a).cross(&(c - a))
}

/// Adjoint of [`face_cross`]: accumulates into the three corner gradients.
#[inline]
pub(crate) fn face_cross_backward(a: &Vec3, b: &Vec3, c: &Vec3, g: &Vec3, ga: &mut Vec3, gb: &mut Vec3, gc: &mut Vec3) {
    let u = b - a;
    let w = c - a;
    let du = w.cross(g);
    let dw = g.cross(&u);
    *gb += du;
    *gc += dw;
    *ga -= du + dw;
}

fn accumulate_weighted_normals(mesh: &TriangleMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertex_count()];
    for face in &mesh.faces {
        let [a, b, c] = face.map(|i| mesh.positions[i as usize]);
        let n = face_cross(&a, &b, &c);
        for &v in face {
            acc[mesh.weld[v as usize] as usize] += n;
        }
    }
    acc
}

/// Area-weighted vertex normals. A vertex whose (welded) star has zero area
/// gets `+Z`.
pub fn compute_vertex_normals(mesh: &TriangleMesh) -> Vec<Vec3> {
    let acc = accumulate_weighted_normals(mesh);
    (0..mesh.vertex_count())
        .map(|v| {
            let m = acc[mesh.weld[v] as usize];
            let len = m.norm();
            if len > 0.0 && len.is_finite() {
                m / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}

/// Adjoint of [`compute_vertex_normals`] with respect to vertex positions.
pub fn vertex_normals_backward(mesh: &TriangleMesh, grad_normals: &[Vec3]) -> Result<Vec<Vec3>> {
    let n = mesh.vertex_count();
    if grad_normals.len() != n {
        return Err(Error::arg(format!(
            "normal gradient length {} != vertex count {n}",
            grad_normals.len()
        )));
    }
    let acc = accumulate_weighted_normals(mesh);
    // Gradient w.r.t. each group's unnormalized sum.
    let mut grad_sum = vec![Vec3::zeros(); n];
    for v in 0..n {
        let r = mesh.weld[v] as usize;
        let m = acc[r];
        let len = m.norm();
        if !(len > 0.0 && len.is_finite()) {
            continue;
        }
        let u = m / len;
        let g = grad_normals[v];
        grad_sum[r] += (g - u * u.dot(&g)) / len;
    }
    let mut grad_pos = vec![Vec3::zeros(); n];
    for face in &mesh.faces {
        let g: Vec3 = face.iter().map(|&v| grad_sum[mesh.weld[v as usize] as usize]).sum();
        let [ia, ib, ic] = face.map(|i| i as usize);
        let (a, b, c) = (mesh.positions[ia], mesh.positions[ib], mesh.positions[ic]);
        let (mut ga, mut gb, mut gc) = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
        face_cross_backward(&a, &b, &c, &g, &mut ga, &mut gb, &mut gc);
        grad_pos[ia] += ga;
        grad_pos[ib] += gb;
        grad_pos[ic] += gc;
    }
    Ok(grad_pos)
}

/// Scalar displacement per vertex along its normal.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexOffsets(pub Vec<f64>);

impl VertexOffsets {
    pub fn zeros(n: usize) -> Self {
        VertexOffsets(vec![0.0; n])
    }

    /// Clamp every offset into `[-max_offset, max_offset]`.
    pub fn clamp(&mut self, max_offset: f64) {
        for v in &mut self.0 {
            *v = v.clamp(-max_offset, max_offset);
        }
    }
}

/// Default offset bound: 5% of the bounding-box diagonal.
pub fn default_max_offset(mesh: &TriangleMesh) -> f64 {
    0.05 * mesh.bbox_diagonal()
}

/// `x̂_v = x_v + n_v·l_v`; normals are recomputed on the result.
pub fn apply_vertex_offsets(mesh: &TriangleMesh, offsets: &VertexOffsets) -> Result<TriangleMesh> {
    if offsets.0.len() != mesh.vertex_count() {
        return Err(Error::arg(format!(
            "{} offsets for {} vertices",
            offsets.0.len(),
            mesh.vertex_count()
        )));
    }
    if offsets.0.iter().any(|l| !l.is_finite()) {
        return Err(Error::arg("non-finite vertex offset"));
    }
    let positions = mesh
        .positions
        .iter()
        .zip(&mesh.normals)
        .zip(&offsets.0)
        .map(|((x, n), l)| x + n * *l)
        .collect();
    Ok(mesh.with_positions(positions))
}

/// Adjoint of [`apply_vertex_offsets`] w.r.t. the offsets, with the input
/// mesh (and so its normals) held fixed.
pub fn vertex_offsets_backward(mesh: &TriangleMesh, grad_positions: &[Vec3]) -> Result<Vec<f64>> {
    if grad_positions.len() != mesh.vertex_count() {
        return Err(Error::arg("position gradient length mismatch"));
    }
    Ok(mesh.normals.iter().zip(grad_positions).map(|(n, g)| n.dot(g)).collect())
}

/// Per-frame skeleton state: one rigid transform per bone.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub bone_transforms: Vec<RigidTransform>,
    pub frame_index: usize,
}

impl Pose {
    pub fn rest(frame_index: usize) -> Self {
        Pose {
            bone_transforms: Vec::new(),
            frame_index,
        }
    }

    pub fn new(bone_transforms: Vec<RigidTransform>, frame_index: usize) -> Result<Self> {
        for t in &bone_transforms {
            t.validate()?;
        }
        Ok(Pose {
            bone_transforms,
            frame_index,
        })
    }
}

/// Linear blend skinning: `x = Σ_j w_j (R_j x + t_j)`.
pub fn pose_mesh(mesh: &TriangleMesh, pose: &Pose) -> Result<TriangleMesh> {
    let j = pose.bone_transforms.len();
    if j == 0 {
        return Ok(mesh.clone());
    }
    let skin = mesh
        .skin
        .as_ref()
        .ok_or_else(|| Error::arg(format!("pose has {j} bones but mesh has no skinning weights")))?;
    if skin.bone_count != j {
        return Err(Error::arg(format!(
            "pose has {j} bones, skin has {}",
            skin.bone_count
        )));
    }
    // Written as x + Σ w_j((R_j - I)x + t_j) so identity transforms leave x untouched bitwise.
    let positions = mesh
        .positions
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let mut d = Vec3::zeros();
            for (w, t) in skin.row(v).iter().zip(&pose.bone_transforms) {
                if *w != 0.0 && !t.is_identity() {
                    d += (t.apply(x) - x) * *w;
                }
            }
            x + d
        })
        .collect();
    Ok(mesh.with_positions(positions))
}
