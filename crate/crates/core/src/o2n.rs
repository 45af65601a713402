//! Offset-to-normal conversion.
//!
//! Each masked pixel is lifted to `x_surf = x + n·l` with `l` read from the
//! offset field, then gets a normal from its four screen-space neighbors:
//! right `j`, up `k`, left `l`, down `m`, summing
//! `(x_j−x_i)×(x_k−x_i) + (x_k−x_i)×(x_l−x_i) + (x_l−x_i)×(x_m−x_i) + (x_m−x_i)×(x_j−x_i)`.
//! A term is skipped when either neighbor is off-image, unmasked, or across
//! a depth discontinuity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::UVField;
use crate::geom::{vertex_normals_backward, TriangleMesh};
use crate::raster::{rasterize_backward, GBuffer};
use crate::Vec3;

pub const DEFAULT_TAU: f64 = 0.03;
pub const MIN_TERMS: u32 = 2;
pub const NORM_FLOOR: f64 = 1e-12;

/// Neighbor offsets in order j (right), k (up), l (left), m (down).
const NEIGHBORS: [(isize, isize); 4] = [(1, 0), (0, -1), (-1, 0), (0, 1)];

/// Per-pixel offset surface and its stencil normals.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMaps {
    pub width: usize,
    pub height: usize,
    pub x_surf: Vec<Vec3>,
    /// Queried offset `l` per pixel (0 off-mask).
    pub offset: Vec<f64>,
    pub n_surf: Vec<Vec3>,
    pub valid: Vec<bool>,
}

/// What the backward pass needs from the stencil forward.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilCache {
    /// Bit `t` set when term `t` survived; 0 for fallback pixels.
    pub terms: Vec<u8>,
    /// Unnormalized stencil sum.
    pub raw: Vec<Vec3>,
}

/// `x_surf = x + n·l` on masked pixels, `l` from a one-channel field.
pub fn surface_points(gbuffer: &GBuffer, offset_field: &UVField, frame: usize) -> Result<(Vec<Vec3>, Vec<f64>)> {
    if offset_field.channels() != 1 {
        return Err(Error::arg("offset field must have one channel"));
    }
    let n = gbuffer.pixel_count();
    let l: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| if gbuffer.mask[p] { offset_field.query1(&gbuffer.uv[p], frame) } else { Ok(0.0) })
        .collect::<Result<_>>()?;
    let x = (0..n)
        .map(|p| if gbuffer.mask[p] { gbuffer.position[p] + gbuffer.normal[p] * l[p] } else { Vec3::zeros() })
        .collect();
    Ok((x, l))
}

fn neighbor(gb: &GBuffer, p: usize, k: usize, tau: f64) -> Option<usize> {
    let (w, h) = (gb.width as isize, gb.height as isize);
    let (x, y) = ((p % gb.width) as isize + NEIGHBORS[k].0, (p / gb.width) as isize + NEIGHBORS[k].1);
    if x < 0 || y < 0 || x >= w || y >= h {
        return None;
    }
    let q = (y * w + x) as usize;
    if !gb.mask[q] || (gb.depth[q] - gb.depth[p]).abs() > tau * gb.depth[p] {
        return None;
    }
    Some(q)
}

/// Stencil normals from a surface-point map; validity and the fallback come
/// from `gbuffer`.
pub fn offsets_to_normals(x_surf: &[Vec3], gbuffer: &GBuffer, tau: f64) -> Result<(Vec<Vec3>, Vec<bool>, StencilCache)> {
    let n = gbuffer.pixel_count();
    if x_surf.len() != n {
        return Err(Error::arg(format!("x_surf has {} pixels, G-buffer has {n}", x_surf.len())));
    }
    let per_pixel: Vec<(Vec3, bool, u8, Vec3)> = (0..n)
        .into_par_iter()
        .map(|p| {
            if !gbuffer.mask[p] {
                return (Vec3::zeros(), false, 0, Vec3::zeros());
            }
            let nb: [Option<usize>; 4] = std::array::from_fn(|k| neighbor(gbuffer, p, k, tau));
            let xi = x_surf[p];
            let mut sum = Vec3::zeros();
            let mut terms = 0u8;
            for t in 0..4 {
                if let (Some(a), Some(b)) = (nb[t], nb[(t + 1) % 4]) {
                    sum += (x_surf[a] - xi).cross(&(x_surf[b] - xi));
                    terms |= 1 << t;
                }
            }
            let len = sum.norm();
            if terms.count_ones() < MIN_TERMS || !(len >= NORM_FLOOR) {
                return (gbuffer.normal[p], false, 0, sum);
            }
            (sum / len, true, terms, sum)
        })
        .collect();
    let mut normals = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut cache = StencilCache {
        terms: Vec::with_capacity(n),
        raw: Vec::with_capacity(n),
    };
    for (nn, v, t, r) in per_pixel {
        normals.push(nn);
        valid.push(v);
        cache.terms.push(t);
        cache.raw.push(r);
    }
    Ok((normals, valid, cache))
}

/// Adjoint of [`offsets_to_normals`]: returns gradients w.r.t. `x_surf` and
/// w.r.t. the G-buffer normal (nonzero only on fallback pixels).
pub fn offsets_to_normals_backward(
    x_surf: &[Vec3],
    gbuffer: &GBuffer,
    cache: &StencilCache,
    tau: f64,
    grad_n: &[Vec3],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let n = gbuffer.pixel_count();
    if grad_n.len() != n || x_surf.len() != n || cache.terms.len() != n {
        return Err(Error::arg("stencil gradient shape mismatch"));
    }
    let mut gx = vec![Vec3::zeros(); n];
    let mut gbase = vec![Vec3::zeros(); n];
    for p in 0..n {
        let g = grad_n[p];
        if !gbuffer.mask[p] || g == Vec3::zeros() {
            continue;
        }
        if cache.terms[p] == 0 {
            gbase[p] += g;
            continue;
        }
        let raw = cache.raw[p];
        let len = raw.norm();
        let u = raw / len;
        let gs = (g - u * u.dot(&g)) / len;
        let nb: [Option<usize>; 4] = std::array::from_fn(|k| neighbor(gbuffer, p, k, tau));
        let xi = x_surf[p];
        for t in 0..4 {
            if cache.terms[p] & (1 << t) == 0 {
                continue;
            }
            let (a, b) = (nb[t].unwrap(), nb[(t + 1) % 4].unwrap());
            let (da, db) = (x_surf[a] - xi, x_surf[b] - xi);
            let ga = db.cross(&gs);
            let gb = gs.cross(&da);
            gx[a] += ga;
            gx[b] += gb;
            gx[p] -= ga + gb;
        }
    }
    Ok((gx, gbase))
}

/// Gradients of the O2N chain.
#[derive(Debug, Clone, PartialEq)]
pub struct O2NGrads {
    pub field: Vec<f64>,
    /// Per-pixel gradients w.r.t. the rasterized position and base normal.
    pub pixel_position: Vec<Vec3>,
    pub pixel_normal: Vec<Vec3>,
}

/// Adjoint of [`surface_points`] given `grad_x` w.r.t. `x_surf`, adding into
/// the base-normal gradient `grad_nbase`.
pub fn surface_points_backward(
    gbuffer: &GBuffer,
    offset_field: &UVField,
    frame: usize,
    offsets: &[f64],
    grad_x: &[Vec3],
    mut grad_nbase: Vec<Vec3>,
) -> Result<O2NGrads> {
    let n = gbuffer.pixel_count();
    if grad_x.len() != n || offsets.len() != n || grad_nbase.len() != n {
        return Err(Error::arg("surface-point gradient shape mismatch"));
    }
    let mut field = offset_field.zero_grad();
    let mut pixel_position = vec![Vec3::zeros(); n];
    for p in 0..n {
        if !gbuffer.mask[p] {
            continue;
        }
        let g = grad_x[p];
        pixel_position[p] = g;
        grad_nbase[p] += g * offsets[p];
        let gl = gbuffer.normal[p].dot(&g);
        if gl != 0.0 {
            offset_field.backward_into(&gbuffer.uv[p], frame, &[gl], &mut field)?;
        }
    }
    Ok(O2NGrads {
        field,
        pixel_position,
        pixel_normal: grad_nbase,
    })
}

/// Stateful forward/backward pair; `backward` uses the most recent forward.
#[derive(Debug, Clone)]
pub struct NormalConversion {
    pub tau: f64,
    cache: Option<Forward>,
}

#[derive(Debug, Clone)]
struct Forward {
    gbuffer: GBuffer,
    frame: usize,
    maps: SurfaceMaps,
    stencil: StencilCache,
}

/// Gradients of the O2N chain carried down to the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrads {
    pub field: Vec<f64>,
    pub vertex_positions: Vec<Vec3>,
    /// Gradient w.r.t. unit vertex normals (before normal recomputation).
    pub vertex_normals: Vec<Vec3>,
}

impl NormalConversion {
    pub fn new(tau: f64) -> Self {
        NormalConversion { tau, cache: None }
    }

    pub fn forward(&mut self, gbuffer: &GBuffer, offset_field: &UVField, frame: usize) -> Result<SurfaceMaps> {
        let (x_surf, offset) = surface_points(gbuffer, offset_field, frame)?;
        let (n_surf, valid, stencil) = offsets_to_normals(&x_surf, gbuffer, self.tau)?;
        let maps = SurfaceMaps {
            width: gbuffer.width,
            height: gbuffer.height,
            x_surf,
            offset,
            n_surf,
            valid,
        };
        self.cache = Some(Forward {
            gbuffer: gbuffer.clone(),
            frame,
            maps: maps.clone(),
            stencil,
        });
        Ok(maps)
    }

    /// Pixel-level adjoint: normal-map gradient to offset-field nodes and
    /// per-pixel position/base-normal gradients. `grad_x_extra` adds a direct
    /// gradient on `x_surf` (e.g. from view directions); may be empty.
    pub fn backward_pixels(&self, offset_field: &UVField, grad_n: &[Vec3], grad_x_extra: &[Vec3]) -> Result<O2NGrads> {
        let f = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("O2N backward called before forward".into()))?;
        let (mut gx, gbase) = offsets_to_normals_backward(&f.maps.x_surf, &f.gbuffer, &f.stencil, self.tau, grad_n)?;
        if !grad_x_extra.is_empty() {
            if grad_x_extra.len() != gx.len() {
                return Err(Error::arg("x_surf gradient shape mismatch"));
            }
            for (a, b) in gx.iter_mut().zip(grad_x_extra) {
                *a += b;
            }
        }
        surface_points_backward(&f.gbuffer, offset_field, f.frame, &f.maps.offset, &gx, gbase)
    }

    /// Full adjoint down to the mesh vertices through the rasterizer and
    /// vertex-normal computation.
    pub fn backward(&self, mesh: &TriangleMesh, offset_field: &UVField, grad_n: &[Vec3]) -> Result<MeshGrads> {
        let px = self.backward_pixels(offset_field, grad_n, &[])?;
        let gbuffer = &self.cache.as_ref().expect("checked above").gbuffer;
        let vg = rasterize_backward(gbuffer, mesh, &px.pixel_position, &px.pixel_normal)?;
        let from_normals = vertex_normals_backward(mesh, &vg.normals)?;
        let vertex_positions = vg.positions.iter().zip(&from_normals).map(|(a, b)| a + b).collect();
        Ok(MeshGrads {
            field: px.field,
            vertex_positions,
            vertex_normals: vg.normals,
        })
    }

    pub fn maps(&self) -> Option<&SurfaceMaps> {
        self.cache.as_ref().map(|f| &f.maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::primitives::grid_plane;
    use crate::raster::{rasterize, Camera};
    use crate::Vec2;

    fn synthetic_gbuffer(w: usize, h: usize) -> GBuffer {
        // Orthographic-like buffer: all masked at constant depth.
        let n = w * h;
        GBuffer {
            width: w,
            height: h,
            camera_center: Vec3::new(0.0, 0.0, 10.0),
            mask: vec![true; n],
            triangle_id: vec![0; n],
            barycentrics: vec![[1.0, 0.0, 0.0]; n],
            uv: (0..n).map(|p| Vec2::new((p % w) as f64 / (w - 1) as f64, (p / w) as f64 / (h - 1) as f64)).collect(),
            position: (0..n).map(|p| Vec3::new((p % w) as f64, -((p / w) as f64), 0.0)).collect(),
            normal: vec![Vec3::z(); n],
            depth: vec![10.0; n],
            normal_length: vec![1.0; n],
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let gb = synthetic_gbuffer(6, 5);
        let f = UVField::new(4, 4, &[0.0], None, 0).unwrap();
        let (x, _) = surface_points(&gb, &f, 0).unwrap();
        assert_eq!(x, gb.position);
    }

    #[test]
    fn direct_formula() {
        let mut gb = synthetic_gbuffer(2, 2);
        gb.position[0] = Vec3::new(1.0, 2.0, 3.0);
        gb.normal[0] = Vec3::y();
        let f = UVField::new(2, 2, &[0.25], None, 0).unwrap();
        let (x, l) = surface_points(&gb, &f, 0).unwrap();
        assert_eq!(l[0], 0.25);
        assert_eq!(x[0], Vec3::new(1.0, 2.25, 3.0));
    }

    #[test]
    fn flat_and_ramp() {
        let gb = synthetic_gbuffer(9, 7);
        let (n, valid, _) = offsets_to_normals(&gb.position, &gb, DEFAULT_TAU).unwrap();
        for p in 0..n.len() {
            let (x, y) = (p % 9, p / 9);
            let corner = (x == 0 || x == 8) && (y == 0 || y == 6);
            assert_eq!(valid[p], !corner);
            assert!((n[p] - Vec3::z()).norm() < 1e-15);
        }
        let a = 0.7;
        let ramp: Vec<Vec3> = gb.position.iter().map(|p| Vec3::new(p.x, p.y, a * p.x)).collect();
        let (n, valid, _) = offsets_to_normals(&ramp, &gb, DEFAULT_TAU).unwrap();
        let want = Vec3::new(-a, 0.0, 1.0) / (1.0 + a * a).sqrt();
        for (v, ok) in n.iter().zip(&valid) {
            if *ok {
                assert!((v - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_pixel_and_isolated_pixel() {
        let mut gb = synthetic_gbuffer(3, 3);
        let (_, valid, cache) = offsets_to_normals(&gb.position, &gb, DEFAULT_TAU).unwrap();
        // Corner (0,0) keeps only the right/down term: fallback.
        assert!(!valid[0]);
        assert_eq!(cache.terms[0], 0);
        // Edge pixel (1,0) keeps left/down and down/right.
        assert!(valid[1]);
        gb.mask = vec![false; 9];
        gb.mask[4] = true;
        let (n, valid, _) = offsets_to_normals(&gb.position, &gb, DEFAULT_TAU).unwrap();
        assert!(!valid[4]);
        assert_eq!(n[4], gb.normal[4]);
    }

    #[test]
    fn depth_discontinuity_skips_terms() {
        let mut gb = synthetic_gbuffer(5, 5);
        for p in 0..25 {
            if p % 5 >= 3 {
                gb.depth[p] = 20.0;
            }
        }
        let (_, _, cache) = offsets_to_normals(&gb.position, &gb, DEFAULT_TAU).unwrap();
        // Pixel (2,2): right neighbor is across the step, so terms j-k and m-j drop.
        assert_eq!(cache.terms[12], 0b0110);
    }

    #[test]
    fn stencil_backward_matches_finite_differences() {
        let gb = synthetic_gbuffer(6, 6);
        let x: Vec<Vec3> = gb
            .position
            .iter()
            .map(|p| Vec3::new(p.x, p.y, 0.3 * (p.x * 0.9).sin() + 0.2 * (p.y * 1.3).cos()))
            .collect();
        let target: Vec<Vec3> = (0..36).map(|i| Vec3::new((i as f64).sin(), 0.3, 1.0).normalize()).collect();
        let loss = |x: &[Vec3]| -> f64 {
            let (n, _, _) = offsets_to_normals(x, &gb, DEFAULT_TAU).unwrap();
            n.iter().zip(&target).map(|(a, b)| (a - b).norm_squared()).sum()
        };
        let (n, _, cache) = offsets_to_normals(&x, &gb, DEFAULT_TAU).unwrap();
        let g: Vec<Vec3> = n.iter().zip(&target).map(|(a, b)| (a - b) * 2.0).collect();
        let (gx, _) = offsets_to_normals_backward(&x, &gb, &cache, DEFAULT_TAU, &g).unwrap();
        let h = 1e-6;
        for p in [0, 7, 14, 21, 35] {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[p][c] += h;
                let mut xm = x.clone();
                xm[p][c] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                let a = gx[p][c];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5, "p{p} c{c}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let conv = NormalConversion::new(DEFAULT_TAU);
        let f = UVField::new(2, 2, &[0.0], None, 0).unwrap();
        assert!(matches!(conv.backward_pixels(&f, &[], &[]), Err(Error::State(_))));
    }

    #[test]
    fn grid_plane_through_camera_faces_camera() {
        let mesh = grid_plane(4, 4, 2.0);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 30.0, 24, 24).unwrap();
        let gb = rasterize(&mesh, &cam);
        let mut conv = NormalConversion::new(DEFAULT_TAU);
        let f = UVField::new(3, 3, &[0.0], None, 0).unwrap();
        let maps = conv.forward(&gb, &f, 0).unwrap();
        for p in 0..gb.pixel_count() {
            if maps.valid[p] {
                assert!((maps.n_surf[p] - Vec3::z()).norm() < 1e-9);
            }
        }
        let zero = conv.backward(&mesh, &f, &vec![Vec3::zeros(); gb.pixel_count()]).unwrap();
        assert!(zero.field.iter().all(|v| *v == 0.0));
        assert!(zero.vertex_positions.iter().all(|v| *v == Vec3::zeros()));
    }
}
