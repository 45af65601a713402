//! Any-hit ray casting against a triangle mesh.
//!
//! The triangle test is the watertight shear-and-scale formulation: rays
//! through a shared edge or vertex hit at least one of the adjacent
//! triangles. Box tests are padded so traversal never culls a triangle the
//! triangle test would accept; the BVH therefore classifies every ray exactly
//! like a brute-force loop over all triangles.

use crate::geom::TriangleMesh;
use crate::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: first triangle in `order`; inner: index of the left child.
    start: u32,
    /// Triangle count for leaves, 0 for inner nodes (right child = left + 1).
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<[Vec3; 3]>,
    lo: Vec3,
    hi: Vec3,
}

/// Precomputed shear for the watertight test.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_max: f64,
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
    inv: Vec3,
}

impl Ray {
    /// Segment `origin + t·dir` for `t` in `(0, t_max)`; `dir` must be nonzero.
    pub fn new(origin: Vec3, dir: Vec3, t_max: f64) -> Ray {
        let kz = dir.iamax();
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        Ray {
            origin,
            dir,
            t_max,
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
            inv: dir.map(|d| 1.0 / d),
        }
    }
}

/// Watertight ray/triangle test; true for a hit with `0 < t < t_max`.
pub fn ray_hits_triangle(ray: &Ray, tri: &[Vec3; 3]) -> bool {
    let a = tri[0] - ray.origin;
    let b = tri[1] - ray.origin;
    let c = tri[2] - ray.origin;
    let (kx, ky, kz) = (ray.kx, ray.ky, ray.kz);
    let ax = a[kx] - ray.sx * a[kz];
    let ay = a[ky] - ray.sy * a[kz];
    let bx = b[kx] - ray.sx * b[kz];
    let by = b[ky] - ray.sy * b[kz];
    let cx = c[kx] - ray.sx * c[kz];
    let cy = c[ky] - ray.sy * c[kz];
    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return false;
    }
    let det = u + v + w;
    if det == 0.0 {
        return false;
    }
    let t = u * (ray.sz * a[kz]) + v * (ray.sz * b[kz]) + w * (ray.sz * c[kz]);
    if det > 0.0 {
        t > 0.0 && t < ray.t_max * det
    } else {
        t < 0.0 && t > ray.t_max * det
    }
}

fn bounds<'a>(tris: impl Iterator<Item = &'a [Vec3; 3]>) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for t in tris {
        for p in t {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
    }
    (lo, hi)
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        let all: Vec<[Vec3; 3]> = (0..mesh.face_count()).map(|f| mesh.triangle(f)).collect();
        let mut order: Vec<u32> = (0..all.len() as u32).collect();
        let centroid: Vec<Vec3> = all.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let (lo, hi) = bounds(all.iter());
        let mut bvh = Bvh {
            nodes: Vec::new(),
            tris: Vec::new(),
            lo,
            hi,
        };
        if all.is_empty() {
            return bvh;
        }
        bvh.nodes.push(Node {
            lo,
            hi,
            start: 0,
            count: 0,
        });
        // Explicit stack of (node, begin, end) ranges over `order`.
        let mut stack = vec![(0usize, 0usize, order.len())];
        while let Some((node, begin, end)) = stack.pop() {
            let (lo, hi) = bounds(order[begin..end].iter().map(|&i| &all[i as usize]));
            let pad = (hi - lo).map(|e| e.abs()).max().max(1.0) * 1e-9;
            bvh.nodes[node].lo = lo - Vec3::repeat(pad);
            bvh.nodes[node].hi = hi + Vec3::repeat(pad);
            if end - begin <= LEAF_SIZE {
                bvh.nodes[node].start = begin as u32;
                bvh.nodes[node].count = (end - begin) as u32;
                continue;
            }
            let (clo, chi) = order[begin..end]
                .iter()
                .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(l, h), &i| {
                    (l.inf(&centroid[i as usize]), h.sup(&centroid[i as usize]))
                });
            let axis = (chi - clo).iamax();
            let mid = (begin + end) / 2;
            order[begin..end].select_nth_unstable_by(mid - begin, |&a, &b| {
                centroid[a as usize][axis].total_cmp(&centroid[b as usize][axis]).then(a.cmp(&b))
            });
            let left = bvh.nodes.len();
            let blank = Node {
                lo: Vec3::zeros(),
                hi: Vec3::zeros(),
                start: 0,
                count: 0,
            };
            bvh.nodes.push(blank);
            bvh.nodes.push(blank);
            bvh.nodes[node].start = left as u32;
            stack.push((left, begin, mid));
            stack.push((left + 1, mid, end));
        }
        bvh.tris = order.iter().map(|&i| all[i as usize]).collect();
        bvh
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.tris.is_empty() {
            0.0
        } else {
            (self.hi - self.lo).norm()
        }
    }

    fn box_hit(ray: &Ray, lo: &Vec3, hi: &Vec3) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = ray.t_max;
        for k in 0..3 {
            if ray.dir[k] == 0.0 {
                if ray.origin[k] < lo[k] || ray.origin[k] > hi[k] {
                    return false;
                }
                continue;
            }
            let a = (lo[k] - ray.origin[k]) * ray.inv[k];
            let b = (hi[k] - ray.origin[k]) * ray.inv[k];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(near);
            // Widen the far end by a few ulps to stay conservative.
            t1 = t1.min(far * (1.0 + 4.0 * f64::EPSILON));
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    pub fn any_hit(&self, ray: &Ray) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let mut stack = [0u32; 64];
        let mut top = 1;
        while top > 0 {
            top -= 1;
            let node = &self.nodes[stack[top] as usize];
            if !Self::box_hit(ray, &node.lo, &node.hi) {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                if self.tris[s..s + node.count as usize].iter().any(|t| ray_hits_triangle(ray, t)) {
                    return true;
                }
            } else {
                stack[top] = node.start;
                stack[top + 1] = node.start + 1;
                top += 2;
            }
        }
        false
    }

    /// Reference answer: test every triangle.
    pub fn any_hit_brute_force(&self, ray: &Ray) -> bool {
        self.tris.iter().any(|t| ray_hits_triangle(ray, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::primitives::icosphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tri() -> [Vec3; 3] {
        [Vec3::zeros(), Vec3::x(), Vec3::y()]
    }

    #[test]
    fn hit_and_miss() {
        let t = tri();
        let down = Ray::new(Vec3::new(0.2, 0.2, 1.0), -Vec3::z(), f64::INFINITY);
        assert!(ray_hits_triangle(&down, &t));
        let up = Ray::new(Vec3::new(0.2, 0.2, 1.0), Vec3::z(), f64::INFINITY);
        assert!(!ray_hits_triangle(&up, &t));
        let parallel = Ray::new(Vec3::new(0.2, 0.2, 0.5), Vec3::x(), f64::INFINITY);
        assert!(!ray_hits_triangle(&parallel, &t));
        let short = Ray::new(Vec3::new(0.2, 0.2, 1.0), -Vec3::z(), 0.5);
        assert!(!ray_hits_triangle(&short, &t));
        let outside = Ray::new(Vec3::new(0.8, 0.8, 1.0), -Vec3::z(), f64::INFINITY);
        assert!(!ray_hits_triangle(&outside, &t));
    }

    #[test]
    fn shared_edge_is_watertight() {
        // Two triangles sharing the diagonal of the unit square.
        let a = [Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0)];
        let b = [Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()];
        for k in 1..50 {
            let s = k as f64 / 50.0;
            let r = Ray::new(Vec3::new(s, s, 1.0), Vec3::new(0.0, 0.0, -1.0), f64::INFINITY);
            assert!(ray_hits_triangle(&r, &a) || ray_hits_triangle(&r, &b));
        }
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mesh = icosphere(3);
        let bvh = Bvh::build(&mesh);
        assert_eq!(bvh.triangle_count(), mesh.face_count());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut hits = 0;
        for _ in 0..2000 {
            let o = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r = Ray::new(o, d, f64::INFINITY);
            let hit = bvh.any_hit(&r);
            assert_eq!(hit, bvh.any_hit_brute_force(&r));
            hits += hit as usize;
        }
        assert!(hits > 100 && hits < 2000);
    }
}
