//! Procedural meshes used by tests and synthetic scenes. All faces wind
//! counter-clockwise seen from outside.

use std::collections::HashMap;

use super::TriangleMesh;
use crate::{Vec2, Vec3};

/// Unit icosphere after `level` midpoint subdivisions (20·4^level faces).
/// UVs are spherical coordinates and are not a bijective atlas.
pub fn icosphere(level: u32) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pos: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, pos: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                pos.push(((pos[a as usize] + pos[b as usize]) * 0.5).normalize());
                (pos.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut pos);
            let bc = midpoint(b, c, &mut pos);
            let ca = midpoint(c, a, &mut pos);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let uvs = pos
        .iter()
        .map(|p| {
            let u = 0.5 + p.y.atan2(p.x) / (2.0 * std::f64::consts::PI);
            let v = p.z.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            Vec2::new(u, v)
        })
        .collect();
    TriangleMesh::new(pos, uvs, faces).expect("icosphere is valid")
}

/// Lat-long sphere with a duplicated seam column so the UV atlas is
/// bijective. `uv_rect = [u0, v0, u1, v1]` receives the whole sphere.
pub fn uv_sphere(n_lat: usize, n_lon: usize, radius: f64, center: Vec3, uv_rect: [f64; 4]) -> TriangleMesh {
    assert!(n_lat >= 2 && n_lon >= 3);
    let [u0, v0, u1, v1] = uv_rect;
    let mut pos = Vec::new();
    let mut uvs = Vec::new();
    for i in 0..=n_lat {
        let theta = std::f64::consts::PI * i as f64 / n_lat as f64;
        for j in 0..=n_lon {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_lon as f64;
            let (st, ct) = theta.sin_cos();
            // Exact poles and seam so welding finds the coincident vertices.
            let (sp, cp) = if j == n_lon { (0.0, 1.0) } else { phi.sin_cos() };
            let (st, ct) = match i {
                0 => (0.0, 1.0),
                i if i == n_lat => (0.0, -1.0),
                _ => (st, ct),
            };
            pos.push(center + Vec3::new(st * cp, st * sp, ct) * radius);
            uvs.push(Vec2::new(
                u0 + (u1 - u0) * j as f64 / n_lon as f64,
                v0 + (v1 - v0) * i as f64 / n_lat as f64,
            ));
        }
    }
    let idx = |i: usize, j: usize| (i * (n_lon + 1) + j) as u32;
    let mut faces = Vec::new();
    for i in 0..n_lat {
        for j in 0..n_lon {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if i != 0 {
                faces.push([a, b, d]);
            }
            if i != n_lat - 1 {
                faces.push([b, c, d]);
            }
        }
    }
    TriangleMesh::new(pos, uvs, faces).expect("uv sphere is valid")
}

/// Axis-aligned box with 4 vertices per face. The six face patches tile
/// `uv_rect` as a 3×2 grid with a small margin.
pub fn box_mesh(center: Vec3, half: Vec3, uv_rect: [f64; 4]) -> TriangleMesh {
    let [u0, v0, u1, v1] = uv_rect;
    let (cw, ch) = ((u1 - u0) / 3.0, (v1 - v0) / 2.0);
    let margin = 0.1;
    // (normal axis, sign): face spans the other two axes.
    let faces_def = [(0usize, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0)];
    let mut pos = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    for (k, &(axis, sign)) in faces_def.iter().enumerate() {
        let n = Vec3::from_fn(|i, _| if i == axis { sign } else { 0.0 });
        let a1 = (axis + 1) % 3;
        let a2 = (axis + 2) % 3;
        let e1 = Vec3::from_fn(|i, _| if i == a1 { 1.0 } else { 0.0 });
        let e2 = Vec3::from_fn(|i, _| if i == a2 { 1.0 } else { 0.0 });
        // e1 × e2 = +axis, so flip one tangent on negative faces.
        let (t1, t2) = if sign > 0.0 { (e1, e2) } else { (e2, e1) };
        let pu = u0 + cw * (k % 3) as f64;
        let pv = v0 + ch * (k / 3) as f64;
        let base = pos.len() as u32;
        for (s, t) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            let p = center + n.component_mul(&half) + t1.component_mul(&half) * s + t2.component_mul(&half) * t;
            pos.push(p);
            let fu = margin + (1.0 - 2.0 * margin) * (s + 1.0) / 2.0;
            let fv = margin + (1.0 - 2.0 * margin) * (t + 1.0) / 2.0;
            uvs.push(Vec2::new(pu + cw * fu, pv + ch * fv));
        }
        // Split along the diagonal through the even-parity corners so each
        // box corner sees the same area from its three faces.
        let d = pos[base as usize] - center;
        if (0..3).filter(|&i| d[i] > 0.0).count() % 2 == 0 {
            faces.push([base, base + 1, base + 2]);
            faces.push([base, base + 2, base + 3]);
        } else {
            faces.push([base, base + 1, base + 3]);
            faces.push([base + 1, base + 2, base + 3]);
        }
    }
    TriangleMesh::new(pos, uvs, faces).expect("box is valid")
}

/// Cube `[-0.5, 0.5]³` with 8 shared corner vertices. Face diagonals run
/// through the corners 0, 3, 5, 6 so the cube is symmetric under area weighting.
pub fn unit_cube_shared() -> TriangleMesh {
    let pos: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 != 0 { 0.5 } else { -0.5 },
                if i & 2 != 0 { 0.5 } else { -0.5 },
                if i & 4 != 0 { 0.5 } else { -0.5 },
            )
        })
        .collect();
    let faces = vec![
        [0, 2, 3],
        [0, 3, 1], // -z
        [4, 5, 6],
        [5, 7, 6], // +z
        [0, 1, 5],
        [0, 5, 4], // -y
        [2, 6, 3],
        [6, 7, 3], // +y
        [0, 4, 6],
        [0, 6, 2], // -x
        [1, 3, 5],
        [3, 7, 5], // +x
    ];
    TriangleMesh::new(pos, vec![Vec2::zeros(); 8], faces).expect("cube is valid")
}

/// Regular grid in the z=0 plane covering `[-size/2, size/2]²`, facing +Z.
/// `uv = (x/size + 1/2, 1/2 - y/size)` so v grows toward -y.
pub fn grid_plane(nx: usize, ny: usize, size: f64) -> TriangleMesh {
    let mut pos = Vec::new();
    let mut uvs = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            let u = i as f64 / nx as f64;
            let v = j as f64 / ny as f64;
            pos.push(Vec3::new((u - 0.5) * size, (0.5 - v) * size, 0.0));
            uvs.push(Vec2::new(u, v));
        }
    }
    let idx = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
    let mut faces = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            // (i,j) top-left in uv; y decreases with j.
            let (a, b, c, d) = (idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j), idx(i, j));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriangleMesh::new(pos, uvs, faces).expect("grid is valid")
}

/// One midpoint subdivision step; positions and UVs interpolate linearly.
pub fn subdivide(mesh: &TriangleMesh) -> TriangleMesh {
    let mut pos = mesh.positions.clone();
    let mut uvs = mesh.uvs.clone();
    let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
    let mut midpoint = |a: u32, b: u32, pos: &mut Vec<Vec3>, uvs: &mut Vec<Vec2>| -> u32 {
        *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
            pos.push((pos[a as usize] + pos[b as usize]) * 0.5);
            uvs.push((uvs[a as usize] + uvs[b as usize]) * 0.5);
            (pos.len() - 1) as u32
        })
    };
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let ab = midpoint(a, b, &mut pos, &mut uvs);
        let bc = midpoint(b, c, &mut pos, &mut uvs);
        let ca = midpoint(c, a, &mut pos, &mut uvs);
        faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    TriangleMesh::new(pos, uvs, faces).expect("subdivision preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outward(mesh: &TriangleMesh, center: Vec3) -> bool {
        (0..mesh.face_count()).all(|f| {
            let [a, b, c] = mesh.triangle(f);
            let n = (b - a).cross(&(c - a));
            n.dot(&((a + b + c) / 3.0 - center)) > 0.0
        })
    }

    #[test]
    fn closed_primitives_face_outward() {
        assert!(outward(&icosphere(2), Vec3::zeros()));
        let c = Vec3::new(0.3, -0.2, 1.0);
        assert!(outward(&uv_sphere(8, 12, 0.7, c, [0.0, 0.0, 1.0, 1.0]), c));
        assert!(outward(&box_mesh(c, Vec3::new(0.2, 0.3, 0.4), [0.0, 0.0, 1.0, 1.0]), c));
        assert!(outward(&unit_cube_shared(), Vec3::zeros()));
    }

    #[test]
    fn uv_sphere_welds_seam_and_poles() {
        let s = uv_sphere(6, 8, 1.0, Vec3::zeros(), [0.0, 0.0, 1.0, 1.0]);
        let reps: std::collections::HashSet<u32> = s.weld().iter().copied().collect();
        // 2 poles + (n_lat-1)·n_lon ring vertices.
        assert_eq!(reps.len(), 2 + 5 * 8);
    }

    #[test]
    fn grid_faces_up() {
        let g = grid_plane(4, 3, 2.0);
        assert!(g.normals.iter().all(|n| *n == Vec3::z()));
    }

    #[test]
    fn subdivision_quadruples_faces() {
        let s = subdivide(&grid_plane(2, 2, 1.0));
        assert_eq!(s.face_count(), 32);
        assert_eq!(s.vertex_count(), 25);
    }
}
