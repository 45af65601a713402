use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::Vec3;

/// Symmetric Chamfer distance and point-to-surface distance, scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub chamfer: f64,
    pub p2s: f64,
}

/// Area-uniform surface samples; serial and seeded, so independent of the
/// thread pool.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<Vec3>> {
    if mesh.face_count() == 0 {
        return Err(Error::arg("cannot sample an empty mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if total <= 0.0 {
        return Err(Error::arg("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let r: f64 = rng.random::<f64>() * total;
            let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            let su = s.sqrt();
            let [a, b, c] = mesh.triangle(f);
            a * (1.0 - su) + b * (su * (1.0 - t)) + c * (su * t)
        })
        .collect())
}

/// Euclidean distance from `p` to the closest point of triangle `abc`.
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

// Region-based closest point (Voronoi regions of vertices, edges, face).
fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

type Tree = ImmutableKdTree<f64, u32, 3, 32>;

fn tree(points: &[[f64; 3]]) -> Tree {
    ImmutableKdTree::new_from_slice(points)
}

fn arr(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

fn mean_nearest_sample(from: &[Vec3], to: &[Vec3]) -> f64 {
    let pts: Vec<[f64; 3]> = to.iter().map(arr).collect();
    let t = tree(&pts);
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| {
            let q = arr(p);
            let i = t.nearest_one::<SquaredEuclidean>(&q).item as usize;
            (p - to[i]).norm()
        })
        .collect();
    crate::parallel::ordered_sum(&d) / d.len() as f64
}

// Candidates: centroids within the nearest-centroid bound plus the largest
// vertex-to-centroid distance.
fn mean_point_to_surface(points: &[Vec3], mesh: &TriangleMesh) -> f64 {
    let tris: Vec<[Vec3; 3]> = (0..mesh.face_count()).map(|f| mesh.triangle(f)).collect();
    let centroids: Vec<Vec3> = tris.iter().map(|[a, b, c]| (a + b + c) / 3.0).collect();
    let reach = tris
        .iter()
        .zip(&centroids)
        .map(|(t, c)| t.iter().map(|v| (v - c).norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let pts: Vec<[f64; 3]> = centroids.iter().map(arr).collect();
    let t = tree(&pts);
    let d: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let q = arr(p);
            let near = t.nearest_one::<SquaredEuclidean>(&q).item as usize;
            let [a, b, c] = &tris[near];
            let bound = point_triangle_distance(p, a, b, c);
            let r = bound + reach;
            t.within_unsorted::<SquaredEuclidean>(&q, r * r)
                .iter()
                .map(|n| {
                    let [a, b, c] = &tris[n.item as usize];
                    point_triangle_distance(p, a, b, c)
                })
                .fold(bound, f64::min)
        })
        .collect();
    crate::parallel::ordered_sum(&d) / d.len() as f64
}

/// Chamfer distance between area-uniform sample sets of both meshes (mean of
/// the two directed mean nearest-neighbor distances) and the mean distance
/// from `mesh_a`'s samples to the surface of `mesh_b`.
pub fn chamfer_and_p2s(mesh_a: &TriangleMesh, mesh_b: &TriangleMesh, sample_count: usize, seed: u64) -> Result<SurfaceDistances> {
    if sample_count == 0 {
        return Err(Error::arg("sample_count must be >= 1"));
    }
    let sa = sample_surface(mesh_a, sample_count, seed)?;
    let sb = sample_surface(mesh_b, sample_count, seed)?;
    let chamfer = 0.5 * (mean_nearest_sample(&sa, &sb) + mean_nearest_sample(&sb, &sa));
    let p2s = mean_point_to_surface(&sa, mesh_b);
    Ok(SurfaceDistances { chamfer, p2s })
}

#[cfg(test)]
mod tests {
    use super::super::primitives::{grid_plane, icosphere};
    use super::*;

    #[test]
    fn self_distance() {
        let ico = icosphere(2);
        let d = chamfer_and_p2s(&ico, &ico, 2000, 11).unwrap();
        assert!(d.p2s < 1e-12, "p2s {}", d.p2s);
        // CD bounded by the mean nearest-sample spacing within one set.
        let s = sample_surface(&ico, 2000, 11).unwrap();
        let spacing: f64 = s
            .iter()
            .enumerate()
            .map(|(i, p)| {
                s.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / s.len() as f64;
        assert!(d.chamfer <= spacing, "cd {} spacing {spacing}", d.chamfer);
        let again = chamfer_and_p2s(&ico, &ico, 2000, 11).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn tree_queries_match_brute_force() {
        let mut m = icosphere(2);
        let pos: Vec<Vec3> = m.positions.iter().enumerate().map(|(i, p)| p * (1.0 + 0.05 * ((i * 7) % 5) as f64)).collect();
        m = m.with_positions(pos);
        let a = sample_surface(&m, 300, 3).unwrap();
        let b = sample_surface(&icosphere(1), 300, 4).unwrap();
        let brute_nn: f64 = a
            .iter()
            .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64;
        assert!((mean_nearest_sample(&a, &b) - brute_nn).abs() < 1e-12);
        let brute_p2s: f64 = b
            .iter()
            .map(|p| {
                (0..m.face_count())
                    .map(|f| {
                        let [x, y, z] = m.triangle(f);
                        point_triangle_distance(p, &x, &y, &z)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / b.len() as f64;
        assert!((mean_point_to_surface(&b, &m) - brute_p2s).abs() < 1e-12);
    }

    #[test]
    fn parallel_planes() {
        let a = grid_plane(3, 3, 1.0);
        let d = 0.37;
        let b = a.with_positions(a.positions.iter().map(|p| p + Vec3::z() * d).collect());
        let r = chamfer_and_p2s(&a, &b, 500, 3).unwrap();
        assert!((r.p2s - d).abs() < 1e-6);
    }

    #[test]
    fn concentric_spheres() {
        let a = icosphere(4);
        let b = a.with_positions(a.positions.iter().map(|p| p * 1.05).collect());
        let r = chamfer_and_p2s(&a, &b, 3000, 5).unwrap();
        assert!((r.p2s - 0.05).abs() <= 0.005, "p2s {}", r.p2s);
    }

    #[test]
    fn errors() {
        let empty = TriangleMesh::new(vec![], vec![], vec![]).unwrap();
        assert!(chamfer_and_p2s(&empty, &empty, 10, 0).is_err());
        let g = grid_plane(1, 1, 1.0);
        assert!(chamfer_and_p2s(&g, &g, 0, 0).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert!((point_triangle_distance(&Vec3::new(0.2, 0.2, 0.5), &a, &b, &c) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c) - 2f64.sqrt()).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(0.5, -2.0, 0.0), &a, &b, &c) - 2.0).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c) - 0.5f64.sqrt()).abs() < 1e-15);
    }
}
