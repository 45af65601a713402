//! Probe-lit shading: visibility, the discretized rendering sum and its
//! adjoint, and the white-albedo shading image.
//!
//! A masked pixel renders as `Σ_i L_i · R(ω_i) · V_i · max(ω_i·n, 0) · Δω_i`
//! with `ω_o = normalize(camera − x_surf)`. The adjoint treats `ω_o` and the
//! visibility bits as constants.

pub mod brdf;
pub mod bvh;
pub mod probes;

use rayon::prelude::*;

pub use brdf::{brdf_eval, brdf_with_grad, BrdfEval, BrdfMode, MaterialSample};
pub use bvh::{Bvh, Ray};
pub use probes::LightProbeSphere;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel::chunked_sum;
use crate::raster::GBuffer;
use crate::Vec3;

pub const DEFAULT_EPSILON_SCALE: f64 = 1e-4;

/// Per-(pixel, probe) visibility, pixel-major. Unmasked pixels are all false.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityBuffer {
    pub pixels: usize,
    pub probes: usize,
    pub bits: Vec<bool>,
}

impl VisibilityBuffer {
    /// Everything visible on masked pixels.
    pub fn unoccluded(mask: &[bool], probes: usize) -> Self {
        VisibilityBuffer {
            pixels: mask.len(),
            probes,
            bits: mask.iter().flat_map(|&m| std::iter::repeat_n(m, probes)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, pixel: usize, probe: usize) -> bool {
        self.bits[pixel * self.probes + probe]
    }

    #[inline]
    fn row(&self, pixel: usize) -> &[bool] {
        &self.bits[pixel * self.probes..(pixel + 1) * self.probes]
    }
}

/// Ray-cast each masked point toward every probe direction, starting
/// `epsilon_scale × bbox diagonal` along the ray.
pub fn visibility(points: &[Vec3], mask: &[bool], bvh: &Bvh, probes: &LightProbeSphere, epsilon_scale: f64) -> Result<VisibilityBuffer> {
    if points.len() != mask.len() {
        return Err(Error::arg("visibility: points and mask differ in length"));
    }
    let eps = epsilon_scale * bvh.bbox_diagonal();
    let k = probes.len();
    let rows: Vec<Vec<bool>> = points
        .par_iter()
        .zip(mask.par_iter())
        .map(|(x, &m)| {
            if !m {
                return vec![false; k];
            }
            probes
                .directions
                .iter()
                .map(|w| !bvh.any_hit(&Ray::new(x + w * eps, *w, f64::INFINITY)))
                .collect()
        })
        .collect();
    Ok(VisibilityBuffer {
        pixels: points.len(),
        probes: k,
        bits: rows.concat(),
    })
}

/// Everything `render_pbr` reads. All per-pixel slices have the G-buffer's
/// pixel count.
#[derive(Debug, Clone, Copy)]
pub struct RenderInputs<'a> {
    pub gbuffer: &'a GBuffer,
    pub x_surf: &'a [Vec3],
    pub n_surf: &'a [Vec3],
    pub albedo: &'a [Vec3],
    pub roughness: &'a [f64],
    pub probes: &'a LightProbeSphere,
    pub visibility: &'a VisibilityBuffer,
    pub mode: BrdfMode,
    pub background: Vec3,
}

impl RenderInputs<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.gbuffer.pixel_count();
        let lens = [self.x_surf.len(), self.n_surf.len(), self.albedo.len(), self.roughness.len(), self.visibility.pixels];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::arg(format!("render inputs have pixel counts {lens:?}, G-buffer has {n}")));
        }
        if self.visibility.probes != self.probes.len() {
            return Err(Error::arg("visibility was computed for a different probe count"));
        }
        Ok(())
    }

    fn view_dir(&self, p: usize) -> Vec3 {
        (self.gbuffer.camera_center - self.x_surf[p]).normalize()
    }

    fn material(&self, p: usize) -> MaterialSample {
        MaterialSample {
            albedo: self.albedo[p],
            roughness: self.roughness[p],
        }
    }

    /// `Σ_i L_i V_i max(ω_i·n, 0) Δω_i` per channel.
    fn irradiance(&self, p: usize) -> Vec3 {
        let n = self.n_surf[p];
        let vis = self.visibility.row(p);
        let mut s = Vec3::zeros();
        for (i, w) in self.probes.directions.iter().enumerate() {
            let c = w.dot(&n);
            if c > 0.0 && vis[i] {
                s += self.probes.radiance_at(i) * (c * self.probes.solid_angles[i]);
            }
        }
        s
    }

    fn shade(&self, p: usize) -> Vec3 {
        if !self.gbuffer.mask[p] {
            return self.background;
        }
        match self.mode {
            BrdfMode::Literal => self.irradiance(p).component_mul(&self.albedo[p].add_scalar(self.roughness[p])),
            BrdfMode::Microfacet => {
                let n = self.n_surf[p];
                let wo = self.view_dir(p);
                let m = self.material(p);
                let vis = self.visibility.row(p);
                let mut out = Vec3::zeros();
                for (i, w) in self.probes.directions.iter().enumerate() {
                    let c = w.dot(&n);
                    if c > 0.0 && vis[i] {
                        let r = brdf_with_grad(&m, &n, w, &wo, BrdfMode::Microfacet).value;
                        out += self.probes.radiance_at(i).component_mul(&r) * (c * self.probes.solid_angles[i]);
                    }
                }
                out
            }
        }
    }
}

pub fn render_pbr(inputs: &RenderInputs) -> Result<Image> {
    inputs.validate()?;
    let px: Vec<Vec3> = (0..inputs.gbuffer.pixel_count()).into_par_iter().map(|p| inputs.shade(p)).collect();
    Ok(Image::from_vec3(inputs.gbuffer.width, inputs.gbuffer.height, &px))
}

/// Gradients of a scalar loss w.r.t. the render inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub albedo: Vec<Vec3>,
    pub roughness: Vec<f64>,
    pub normals: Vec<Vec3>,
    /// Same layout as `LightProbeSphere::radiance`.
    pub probes: Vec<f64>,
}

/// Adjoint of [`render_pbr`] for an image gradient `grad` (RGB, same size).
pub fn render_pbr_backward(inputs: &RenderInputs, grad: &Image) -> Result<RenderGrads> {
    inputs.validate()?;
    let gb = inputs.gbuffer;
    let n = gb.pixel_count();
    if grad.width != gb.width || grad.height != gb.height || grad.channels != 3 {
        return Err(Error::arg("render gradient must be RGB at G-buffer resolution"));
    }
    let probes = inputs.probes;
    let k = probes.len();

    let per_pixel: Vec<(Vec3, f64, Vec3)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let g = grad.vec3(p);
            if !gb.mask[p] || g == Vec3::zeros() {
                return (Vec3::zeros(), 0.0, Vec3::zeros());
            }
            let nrm = inputs.n_surf[p];
            let vis = inputs.visibility.row(p);
            match inputs.mode {
                BrdfMode::Literal => {
                    let s = inputs.irradiance(p);
                    let r = inputs.albedo[p].add_scalar(inputs.roughness[p]);
                    let mut dn = Vec3::zeros();
                    for (i, w) in probes.directions.iter().enumerate() {
                        if vis[i] && w.dot(&nrm) > 0.0 {
                            let weight = g.component_mul(&r).dot(&probes.radiance_at(i)) * probes.solid_angles[i];
                            dn += w * weight;
                        }
                    }
                    let da = g.component_mul(&s);
                    (da, da.sum(), dn)
                }
                BrdfMode::Microfacet => {
                    let wo = inputs.view_dir(p);
                    let m = inputs.material(p);
                    let (mut da, mut dr, mut dn) = (Vec3::zeros(), 0.0, Vec3::zeros());
                    for (i, w) in probes.directions.iter().enumerate() {
                        let c = w.dot(&nrm);
                        if !(vis[i] && c > 0.0) {
                            continue;
                        }
                        let e = brdf_with_grad(&m, &nrm, w, &wo, BrdfMode::Microfacet);
                        let gl = g.component_mul(&probes.radiance_at(i)) * probes.solid_angles[i];
                        da += gl * (e.d_albedo * c);
                        dr += gl.sum() * e.d_roughness * c;
                        dn += e.d_normal * (gl.sum() * c) + w * gl.dot(&e.value);
                    }
                    (da, dr, dn)
                }
            }
        })
        .collect();

    let probe_grads = chunked_sum(n, 3 * k, |range, acc| {
        for p in range {
            let g = grad.vec3(p);
            if !gb.mask[p] || g == Vec3::zeros() {
                continue;
            }
            let nrm = inputs.n_surf[p];
            let vis = inputs.visibility.row(p);
            let wo = inputs.view_dir(p);
            let m = inputs.material(p);
            for (i, w) in probes.directions.iter().enumerate() {
                let c = w.dot(&nrm);
                if !(vis[i] && c > 0.0) {
                    continue;
                }
                let r = match inputs.mode {
                    BrdfMode::Literal => m.albedo.add_scalar(m.roughness),
                    BrdfMode::Microfacet => brdf_with_grad(&m, &nrm, w, &wo, BrdfMode::Microfacet).value,
                };
                let t = g.component_mul(&r) * (c * probes.solid_angles[i]);
                acc[3 * i] += t.x;
                acc[3 * i + 1] += t.y;
                acc[3 * i + 2] += t.z;
            }
        }
    });

    let mut out = RenderGrads {
        albedo: Vec::with_capacity(n),
        roughness: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        probes: probe_grads,
    };
    for (a, r, nn) in per_pixel {
        out.albedo.push(a);
        out.roughness.push(r);
        out.normals.push(nn);
    }
    Ok(out)
}

/// Render with unit white albedo, zero roughness, literal BRDF; background 0.
pub fn shading_image(gbuffer: &GBuffer, n_surf: &[Vec3], probes: &LightProbeSphere, visibility: &VisibilityBuffer) -> Result<Image> {
    let n = gbuffer.pixel_count();
    let ones = vec![Vec3::repeat(1.0); n];
    let zeros = vec![0.0; n];
    render_pbr(&RenderInputs {
        gbuffer,
        x_surf: &gbuffer.position,
        n_surf,
        albedo: &ones,
        roughness: &zeros,
        probes,
        visibility,
        mode: BrdfMode::Literal,
        background: Vec3::zeros(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::primitives::{grid_plane, icosphere};
    use crate::geom::TriangleMesh;
    use crate::raster::{rasterize, Camera};
    use std::f64::consts::PI;

    fn sphere_view(res: usize) -> (TriangleMesh, GBuffer) {
        let mesh = icosphere(3);
        let cam = Camera::look_at(Vec3::new(0.0, -4.0, 0.5), Vec3::zeros(), Vec3::z(), 35.0, res, res).unwrap();
        let gb = rasterize(&mesh, &cam);
        (mesh, gb)
    }

    #[test]
    fn uniform_light_on_upward_normal_is_pi() {
        let p = LightProbeSphere::uniform(16, 32, Vec3::repeat(1.0)).unwrap();
        let s: f64 = (0..p.len()).map(|i| p.directions[i].z.max(0.0) * p.solid_angles[i]).sum();
        assert!((s - PI).abs() / PI < 0.02, "{s}");
    }

    #[test]
    fn single_probe_along_the_normal() {
        let mut p = LightProbeSphere::new(16, 32).unwrap();
        p.set_radiance(0, Vec3::repeat(1.0));
        let (_, gb) = sphere_view(6);
        let n = vec![p.directions[0]; gb.pixel_count()];
        let vis = VisibilityBuffer::unoccluded(&gb.mask, p.len());
        let s = shading_image(&gb, &n, &p, &vis).unwrap();
        for q in 0..gb.pixel_count() {
            let want = if gb.mask[q] { p.solid_angles[0] } else { 0.0 };
            assert!((s.vec3(q) - Vec3::repeat(want)).norm() < 1e-15);
        }
        let dark = LightProbeSphere::new(16, 32).unwrap();
        assert!(shading_image(&gb, &n, &dark, &vis).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn literal_render_factorizes() {
        let (_, gb) = sphere_view(24);
        let n = gb.pixel_count();
        let mut probes = LightProbeSphere::new(8, 16).unwrap();
        for (k, v) in probes.radiance.iter_mut().enumerate() {
            *v = 0.5 + 0.5 * (k as f64 * 0.3).sin();
        }
        let vis = VisibilityBuffer::unoccluded(&gb.mask, probes.len());
        let albedo: Vec<Vec3> = (0..n).map(|p| Vec3::new(0.2, 0.5, (p % 7) as f64 / 7.0)).collect();
        let rough = vec![0.0; n];
        let img = render_pbr(&RenderInputs {
            gbuffer: &gb,
            x_surf: &gb.position,
            n_surf: &gb.normal,
            albedo: &albedo,
            roughness: &rough,
            probes: &probes,
            visibility: &vis,
            mode: BrdfMode::Literal,
            background: Vec3::zeros(),
        })
        .unwrap();
        let s = shading_image(&gb, &gb.normal, &probes, &vis).unwrap();
        for p in 0..n {
            if gb.mask[p] {
                let want = albedo[p].component_mul(&s.vec3(p));
                assert!((img.vec3(p) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn convex_sphere_visibility() {
        let (mesh, gb) = sphere_view(16);
        let bvh = Bvh::build(&mesh);
        let probes = LightProbeSphere::new(8, 16).unwrap();
        let vis = visibility(&gb.position, &gb.mask, &bvh, &probes, DEFAULT_EPSILON_SCALE).unwrap();
        for p in 0..gb.pixel_count() {
            if !gb.mask[p] {
                continue;
            }
            let radial = gb.position[p].normalize();
            for (i, w) in probes.directions.iter().enumerate() {
                let c = w.dot(&radial);
                if c > 0.3 {
                    assert!(vis.get(p, i));
                } else if c < -0.3 {
                    assert!(!vis.get(p, i));
                }
            }
        }
    }

    #[test]
    fn lower_plane_is_shadowed() {
        let lower = grid_plane(2, 2, 2.0);
        let upper = lower.with_positions(lower.positions.iter().map(|p| p + Vec3::z()).collect());
        let both = TriangleMesh::merge(&[lower, upper]).unwrap();
        let bvh = Bvh::build(&both);
        let probes = LightProbeSphere::new(4, 4).unwrap();
        let vis = visibility(&[Vec3::new(0.1, 0.1, 0.0)], &[true], &bvh, &probes, DEFAULT_EPSILON_SCALE).unwrap();
        // Cell 0 is 22.5° off vertical: it hits the upper plane.
        assert!(!vis.get(0, 0));
        // Downward cells pass through the lower plane's back side only after t > 0
        // from the offset origin, so they are blocked too; sideways ones escape.
        let sideways = probes.cell_of(&Vec3::new(1.0, 0.2, 0.05));
        assert!(vis.get(0, sideways));
    }

    fn random_inputs(mode: BrdfMode) -> (GBuffer, Vec<Vec3>, Vec<Vec3>, Vec<f64>, LightProbeSphere, VisibilityBuffer) {
        let (mesh, gb) = sphere_view(8);
        let n = gb.pixel_count();
        let normals: Vec<Vec3> = (0..n).map(|p| (gb.normal[p] + Vec3::new(0.1, -0.05, 0.07) * ((p % 5) as f64 - 2.0)).normalize()).collect();
        let albedo: Vec<Vec3> = (0..n).map(|p| Vec3::new(0.3, 0.6, 0.1 + (p % 3) as f64 * 0.2)).collect();
        let rough: Vec<f64> = (0..n).map(|p| if mode == BrdfMode::Literal { 0.1 } else { 0.3 + (p % 4) as f64 * 0.1 }).collect();
        let mut probes = LightProbeSphere::new(4, 8).unwrap();
        for (k, v) in probes.radiance.iter_mut().enumerate() {
            *v = 1.0 + (k as f64 * 0.7).sin();
        }
        let bvh = Bvh::build(&mesh);
        let vis = visibility(&gb.position, &gb.mask, &bvh, &probes, DEFAULT_EPSILON_SCALE).unwrap();
        (gb, normals, albedo, rough, probes, vis)
    }

    #[test]
    fn render_adjoints_match_finite_differences() {
        for mode in [BrdfMode::Literal, BrdfMode::Microfacet] {
            let (gb, normals, albedo, rough, probes, vis) = random_inputs(mode);
            let n = gb.pixel_count();
            let weights = Image::from_vec3(gb.width, gb.height, &(0..n).map(|p| Vec3::new(1.0, -0.5, 0.25 * (p % 3) as f64)).collect::<Vec<_>>());
            let loss = |nrm: &[Vec3], alb: &[Vec3], rgh: &[f64], pr: &LightProbeSphere| -> f64 {
                let img = render_pbr(&RenderInputs {
                    gbuffer: &gb,
                    x_surf: &gb.position,
                    n_surf: nrm,
                    albedo: alb,
                    roughness: rgh,
                    probes: pr,
                    visibility: &vis,
                    mode,
                    background: Vec3::zeros(),
                })
                .unwrap();
                img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
            };
            let inputs = RenderInputs {
                gbuffer: &gb,
                x_surf: &gb.position,
                n_surf: &normals,
                albedo: &albedo,
                roughness: &rough,
                probes: &probes,
                visibility: &vis,
                mode,
                background: Vec3::zeros(),
            };
            let g = render_pbr_backward(&inputs, &weights).unwrap();
            let h = 1e-6;
            let check = |a: f64, fd: f64, what: &str| {
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4, "{mode:?} {what}: {a} vs {fd}");
            };
            let p = (0..n).filter(|&p| gb.mask[p]).nth(5).unwrap();
            for c in 0..3 {
                let (mut ap, mut am) = (albedo.clone(), albedo.clone());
                ap[p][c] += h;
                am[p][c] -= h;
                check(g.albedo[p][c], (loss(&normals, &ap, &rough, &probes) - loss(&normals, &am, &rough, &probes)) / (2.0 * h), "albedo");
                let (mut np, mut nm) = (normals.clone(), normals.clone());
                np[p][c] += h;
                nm[p][c] -= h;
                check(g.normals[p][c], (loss(&np, &albedo, &rough, &probes) - loss(&nm, &albedo, &rough, &probes)) / (2.0 * h), "normal");
            }
            let (mut rp, mut rm) = (rough.clone(), rough.clone());
            rp[p] += h;
            rm[p] -= h;
            check(g.roughness[p], (loss(&normals, &albedo, &rp, &probes) - loss(&normals, &albedo, &rm, &probes)) / (2.0 * h), "roughness");
            for k in [0, 17, 40, 95] {
                let (mut pp, mut pm) = (probes.clone(), probes.clone());
                pp.radiance[k] += h;
                pm.radiance[k] -= h;
                check(g.probes[k], (loss(&normals, &albedo, &rough, &pp) - loss(&normals, &albedo, &rough, &pm)) / (2.0 * h), "probe");
            }
        }
    }
}
