use std::collections::{BTreeMap, BTreeSet};

use super::{face_cross, face_cross_backward, TriangleMesh};
use crate::error::{Error, Result};
use crate::Vec3;

/// Edge-length, normal-consistency and uniform-Laplacian losses with their
/// gradients w.r.t. vertex positions. Gradients of a weld group land on the
/// group's representative vertex.
#[derive(Debug, Clone)]
pub struct MeshRegularizers {
    pub edge: f64,
    pub normal: f64,
    pub laplacian: f64,
    pub grad_edge: Vec<Vec3>,
    pub grad_normal: Vec<Vec3>,
    pub grad_laplacian: Vec<Vec3>,
}

impl MeshRegularizers {
    /// `w_edge·edge + w_normal·normal + w_lap·laplacian` and its gradient.
    pub fn weighted(&self, w_edge: f64, w_normal: f64, w_lap: f64) -> (f64, Vec<Vec3>) {
        let loss = w_edge * self.edge + w_normal * self.normal + w_lap * self.laplacian;
        let grad = (0..self.grad_edge.len())
            .map(|v| self.grad_edge[v] * w_edge + self.grad_normal[v] * w_normal + self.grad_laplacian[v] * w_lap)
            .collect();
        (loss, grad)
    }
}

pub fn mesh_regularizers(mesh: &TriangleMesh, edge_target: f64) -> MeshRegularizers {
    regularizers(mesh, edge_target, None)
}

/// Regularizers measured against a rest mesh with the same topology: edge
/// lengths against rest lengths, `(cos_rest - cos)²` per interior edge, and
/// Laplacian displacements against rest displacements. All three losses and
/// their gradients vanish at `mesh == rest`.
pub fn mesh_regularizers_relative(mesh: &TriangleMesh, rest: &TriangleMesh) -> Result<MeshRegularizers> {
    if mesh.vertex_count() != rest.vertex_count() || mesh.faces != rest.faces {
        return Err(Error::arg("rest mesh topology differs"));
    }
    Ok(regularizers(mesh, 0.0, Some(rest)))
}

fn regularizers(mesh: &TriangleMesh, edge_target: f64, rest: Option<&TriangleMesh>) -> MeshRegularizers {
    let n = mesh.vertex_count();
    let weld = mesh.weld();
    let rep = |v: u32| weld[v as usize];
    let x = |v: u32| mesh.positions[v as usize];

    // Edge → adjacent faces on the welded graph; BTreeMap keeps iteration order fixed.
    let mut edges: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (rep(face[k]), rep(face[(k + 1) % 3]));
            if a != b {
                edges.entry((a.min(b), a.max(b))).or_default().push(f);
            }
        }
    }

    // Edge length.
    let mut grad_edge = vec![Vec3::zeros(); n];
    let mut edge = 0.0;
    if !edges.is_empty() {
        let inv = 1.0 / edges.len() as f64;
        for &(a, b) in edges.keys() {
            let d = x(b) - x(a);
            let len = d.norm();
            let target = match rest {
                Some(m) => (m.positions[b as usize] - m.positions[a as usize]).norm(),
                None => edge_target,
            };
            let r = len - target;
            edge += r * r * inv;
            if len > 0.0 {
                let g = d * (2.0 * r * inv / len);
                grad_edge[b as usize] += g;
                grad_edge[a as usize] -= g;
            }
        }
    }

    // Normal consistency over interior edges (exactly two faces).
    let mut grad_normal = vec![Vec3::zeros(); n];
    let mut normal = 0.0;
    let interior: Vec<(usize, usize)> = edges
        .values()
        .filter(|fs| fs.len() == 2)
        .map(|fs| (fs[0], fs[1]))
        .collect();
    if !interior.is_empty() {
        let inv = 1.0 / interior.len() as f64;
        let cross: Vec<Vec3> = mesh
            .faces
            .iter()
            .map(|f| face_cross(&x(f[0]), &x(f[1]), &x(f[2])))
            .collect();
        let rest_cos = |f1: usize, f2: usize| -> Option<f64> {
            let m = rest?;
            let c = |f: usize| {
                let [a, b, c] = m.faces[f].map(|v| m.positions[v as usize]);
                face_cross(&a, &b, &c)
            };
            let (c1, c2) = (c(f1), c(f2));
            let (l1, l2) = (c1.norm(), c2.norm());
            Some(if l1 == 0.0 || l2 == 0.0 { 1.0 } else { c1.dot(&c2) / (l1 * l2) })
        };
        let mut grad_cross = vec![Vec3::zeros(); mesh.face_count()];
        for &(f1, f2) in &interior {
            let (c1, c2) = (cross[f1], cross[f2]);
            let (l1, l2) = (c1.norm(), c2.norm());
            if l1 == 0.0 || l2 == 0.0 {
                continue;
            }
            let (n1, n2) = (c1 / l1, c2 / l2);
            let cos = n1.dot(&n2);
            // Loss and d(loss)/d(cos).
            let (value, slope) = match rest_cos(f1, f2) {
                Some(c0) => ((c0 - cos) * (c0 - cos), -2.0 * (c0 - cos)),
                None => (1.0 - cos, -1.0),
            };
            normal += value * inv;
            // dcos/dc1 = (n2 - n1 cos)/|c1|
            grad_cross[f1] += (n2 - n1 * cos) * (slope * inv / l1);
            grad_cross[f2] += (n1 - n2 * cos) * (slope * inv / l2);
        }
        for (f, face) in mesh.faces.iter().enumerate() {
            let g = grad_cross[f];
            if g == Vec3::zeros() {
                continue;
            }
            let [a, b, c] = face.map(|v| v as usize);
            let (mut ga, mut gb, mut gc) = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
            face_cross_backward(&mesh.positions[a], &mesh.positions[b], &mesh.positions[c], &g, &mut ga, &mut gb, &mut gc);
            grad_normal[rep(a as u32) as usize] += ga;
            grad_normal[rep(b as u32) as usize] += gb;
            grad_normal[rep(c as u32) as usize] += gc;
        }
    }

    // Uniform Laplacian over welded vertices.
    let mut grad_laplacian = vec![Vec3::zeros(); n];
    let mut laplacian = 0.0;
    let terms = laplacian_terms(mesh, edges.keys());
    let rest_terms = rest.map(|m| laplacian_terms(m, edges.keys()));
    if !terms.is_empty() {
        let inv = 1.0 / terms.len() as f64;
        for (i, t) in terms.iter().enumerate() {
            let d = match &rest_terms {
                Some(r) => t.displacement - r[i].displacement,
                None => t.displacement,
            };
            laplacian += d.norm_squared() * inv;
            let g = d * (2.0 * inv);
            grad_laplacian[t.vertex as usize] += g;
            let k = t.neighbors.len() as f64;
            for &u in &t.neighbors {
                grad_laplacian[u as usize] -= g / k;
            }
        }
    }

    MeshRegularizers {
        edge,
        normal,
        laplacian,
        grad_edge,
        grad_normal,
        grad_laplacian,
    }
}

/// Uniform-Laplacian displacement `x_v - mean(neighbors)` of one welded vertex.
#[derive(Debug, Clone)]
pub struct LaplacianTerm {
    pub vertex: u32,
    pub neighbors: Vec<u32>,
    pub displacement: Vec3,
}

/// One term per weld representative; isolated vertices have zero displacement.
pub fn uniform_laplacian(mesh: &TriangleMesh) -> Vec<LaplacianTerm> {
    let weld = mesh.weld();
    let mut edges = BTreeSet::new();
    for face in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (weld[face[k] as usize], weld[face[(k + 1) % 3] as usize]);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    laplacian_terms(mesh, edges.iter())
}

fn laplacian_terms<'a>(mesh: &TriangleMesh, edges: impl Iterator<Item = &'a (u32, u32)>) -> Vec<LaplacianTerm> {
    let weld = mesh.weld();
    let mut neighbors: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for &(a, b) in edges {
        neighbors.entry(a).or_default().insert(b);
        neighbors.entry(b).or_default().insert(a);
    }
    (0..mesh.vertex_count() as u32)
        .filter(|&v| weld[v as usize] == v)
        .map(|v| {
            let nb: Vec<u32> = neighbors.get(&v).map(|s| s.iter().copied().collect()).unwrap_or_default();
            let displacement = if nb.is_empty() {
                Vec3::zeros()
            } else {
                let mean: Vec3 = nb.iter().map(|&u| mesh.positions[u as usize]).sum::<Vec3>() / nb.len() as f64;
                mesh.positions[v as usize] - mean
            };
            LaplacianTerm {
                vertex: v,
                neighbors: nb,
                displacement,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::primitives::{grid_plane, icosphere};
    use super::*;
    use crate::Vec2;

    #[test]
    fn unit_edges_with_zero_target() {
        // Equilateral triangle: every edge has length 1.
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0)],
            vec![Vec2::zeros(); 3],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let r = mesh_regularizers(&m, 0.0);
        assert!((r.edge - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_grid_is_at_rest() {
        let g = grid_plane(6, 6, 1.0);
        let r = mesh_regularizers(&g, 0.0);
        assert!(r.normal.abs() < 1e-15);
        // Interior vertices (not on the outer ring) have zero displacement.
        for t in uniform_laplacian(&g) {
            let (i, j) = (t.vertex as usize % 7, t.vertex as usize / 7);
            if (1..6).contains(&i) && (1..6).contains(&j) {
                assert!(t.displacement.norm() < 1e-15, "vertex {} -> {:?}", t.vertex, t.displacement);
            }
        }
        assert!(r.laplacian > 0.0);
    }

    #[test]
    fn relative_losses_vanish_at_rest() {
        let ico = icosphere(2);
        let r = mesh_regularizers_relative(&ico, &ico).unwrap();
        assert!(r.edge.abs() < 1e-20 && r.normal.abs() < 1e-20 && r.laplacian.abs() < 1e-20);
        let zero = |g: &[Vec3]| g.iter().all(|v| v.norm() < 1e-14);
        assert!(zero(&r.grad_edge) && zero(&r.grad_normal) && zero(&r.grad_laplacian));
        let mut p = ico.positions.clone();
        p[7] *= 1.2;
        let bumped = mesh_regularizers_relative(&ico.with_positions(p), &ico).unwrap();
        assert!(bumped.edge > 0.0 && bumped.normal > 0.0 && bumped.laplacian > 0.0);
        assert!(mesh_regularizers_relative(&ico, &grid_plane(2, 2, 1.0)).is_err());
    }

    #[test]
    fn relative_gradients_match_finite_differences() {
        let ico = icosphere(1);
        let mut p = ico.positions.clone();
        for (k, x) in p.iter_mut().enumerate() {
            *x *= 1.0 + 0.05 * ((k * 7 % 5) as f64 - 2.0);
        }
        let m = ico.with_positions(p.clone());
        let r = mesh_regularizers_relative(&m, &ico).unwrap();
        let (_, g) = r.weighted(1.0, 1.0, 1.0);
        let f = |q: Vec<Vec3>| {
            let (l, _) = mesh_regularizers_relative(&ico.with_positions(q), &ico).unwrap().weighted(1.0, 1.0, 1.0);
            l
        };
        let h = 1e-6;
        for v in [0usize, 5, 11] {
            for k in 0..3 {
                let mut a = p.clone();
                a[v][k] += h;
                let mut b = p.clone();
                b[v][k] -= h;
                let fd = (f(a) - f(b)) / (2.0 * h);
                assert!((fd - g[v][k]).abs() <= 1e-6 * fd.abs().max(1e-3), "{v},{k}: {fd} vs {}", g[v][k]);
            }
        }
    }

    #[test]
    fn displaced_vertex_increases_all_losses() {
        let ico = icosphere(2);
        let target = 0.0;
        let base = mesh_regularizers(&ico, target);
        let mut p = ico.positions.clone();
        p[7] *= 1.2;
        let bumped = mesh_regularizers(&ico.with_positions(p), target);
        assert!(bumped.edge > base.edge);
        assert!(bumped.normal > base.normal);
        assert!(bumped.laplacian > base.laplacian);
    }
}
