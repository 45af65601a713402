//! Finite-difference verification of every analytic adjoint.
//!
//! Each registered op builds a small randomized problem `L(x) = Σ r·op(x)`
//! with random weights `r`, computes `∂L/∂x` analytically, and compares it
//! against five-point central differences on up to 64 seeded coordinates.
//! Fixtures keep inputs away from kinks (clamps, horizons, fallbacks) so the
//! difference quotient is meaningful.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_mse, loss_ssim};
use super::params::ModelState;
use super::pipeline::{geometry_backward, geometry_with, EngineConfig};
use crate::error::{Error, Result};
use crate::fields::UVField;
use crate::geom::primitives::{grid_plane, icosphere};
use crate::geom::{compute_vertex_normals, mesh_regularizers, mesh_regularizers_relative, vertex_normals_backward, Pose, TriangleMesh, VertexOffsets};
use crate::image::Image;
use crate::o2n::{surface_points, surface_points_backward, NormalConversion, DEFAULT_TAU};
use crate::raster::{interpolate, rasterize, rasterize_backward, Camera, GBuffer};
use crate::shade::{brdf_with_grad, render_pbr, render_pbr_backward, BrdfMode, LightProbeSphere, MaterialSample, RenderInputs, VisibilityBuffer};
use crate::{Vec2, Vec3};

pub const MAX_COORDS: usize = 64;
/// Difference steps; each coordinate reports its best agreement, so one
/// step covers truncation-heavy inputs and the other roundoff-heavy ones.
pub const STEPS: [f64; 2] = [1e-4, 1e-5];

/// Registered ops with their default tolerances.
pub const OPS: &[(&str, f64)] = &[
    ("field_query", 1e-6),
    ("surface_points", 1e-6),
    ("o2n", 1e-4),
    ("raster_backward", 1e-4),
    ("vertex_normals", 1e-4),
    ("geometry_chain", 1e-4),
    ("brdf_literal", 1e-4),
    ("brdf_microfacet", 1e-4),
    ("render_albedo", 1e-4),
    ("render_roughness", 1e-4),
    ("render_probes", 1e-4),
    ("render_normals", 1e-4),
    ("mse", 1e-6),
    ("ssim", 1e-4),
    ("mesh_regularizers", 1e-4),
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

type Objective = Box<dyn Fn(&[f64]) -> Result<f64>>;

struct Problem {
    x: Vec<f64>,
    f: Objective,
    grad: Vec<f64>,
}

pub fn default_tolerance(op: &str) -> Option<f64> {
    OPS.iter().find(|(n, _)| *n == op).map(|(_, t)| *t)
}

/// Check `op` for `seed`; `tolerance` defaults to the op's registered value.
pub fn gradcheck(op: &str, seed: u64, tolerance: Option<f64>) -> Result<GradcheckReport> {
    let tol = match (tolerance, default_tolerance(op)) {
        (_, None) => {
            let known: Vec<&str> = OPS.iter().map(|(n, _)| *n).collect();
            return Err(Error::arg(format!("unknown op {op:?}; registered: {}", known.join(", "))));
        }
        (Some(t), _) => t,
        (None, Some(t)) => t,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = match op {
        "field_query" => field_query(&mut rng),
        "surface_points" => surface_points_problem(&mut rng),
        "o2n" => o2n_problem(&mut rng),
        "raster_backward" => raster_problem(&mut rng),
        "vertex_normals" => vertex_normals_problem(&mut rng),
        "geometry_chain" => geometry_problem(&mut rng),
        "brdf_literal" => brdf_problem(&mut rng, BrdfMode::Literal),
        "brdf_microfacet" => brdf_problem(&mut rng, BrdfMode::Microfacet),
        "render_albedo" => render_problem(&mut rng, RenderVar::Albedo),
        "render_roughness" => render_problem(&mut rng, RenderVar::Roughness),
        "render_probes" => render_problem(&mut rng, RenderVar::Probes),
        "render_normals" => render_problem(&mut rng, RenderVar::Normals),
        "mse" => mse_problem(&mut rng),
        "ssim" => ssim_problem(&mut rng),
        "mesh_regularizers" => regularizer_problem(&mut rng),
        _ => unreachable!("checked against the registry"),
    }?;
    let (checked, max_rel_err) = compare(&problem, &mut rng)?;
    Ok(GradcheckReport {
        op: op.to_string(),
        seed,
        checked,
        max_rel_err,
        tolerance: tol,
        pass: max_rel_err <= tol,
    })
}

/// Floor of the relative-error denominator, as a fraction of the largest
/// analytic gradient entry (and at least this absolute value). Without it an
/// exactly-zero entry compared against difference-quotient roundoff scores as
/// a total mismatch.
pub const DENOM_FLOOR: f64 = 1e-6;

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, DENOM_FLOOR)
}

fn compare(p: &Problem, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    if p.grad.len() != p.x.len() {
        return Err(Error::State(format!("gradient has {} entries for {} inputs", p.grad.len(), p.x.len())));
    }
    let n = p.x.len();
    let mut coords: Vec<usize> = if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        sample(rng, n, MAX_COORDS).into_vec()
    };
    coords.sort_unstable();
    let scale = p.grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    let floor = DENOM_FLOOR * scale;
    let mut worst = 0.0f64;
    let mut x = p.x.clone();
    for &i in &coords {
        let x0 = x[i];
        let mut best = f64::INFINITY;
        for h in STEPS {
            let mut at = |d: f64| -> Result<f64> {
                x[i] = x0 + d;
                (p.f)(&x)
            };
            let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            best = best.min(relative_error_with_floor(p.grad[i], fd, floor));
        }
        x[i] = x0;
        worst = worst.max(best);
    }
    Ok((coords.len(), worst))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot3(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn field_query(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let field = UVField::new(5, 4, &[0.0; 3], None, 0)?;
    let x = uniform(rng, field.data.len(), -1.0, 1.0);
    let uvs: Vec<Vec2> = (0..30).map(|_| Vec2::new(rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1))).collect();
    let r = uniform(rng, 90, -1.0, 1.0);
    let eval = {
        let (field, uvs, r) = (field.clone(), uvs.clone(), r.clone());
        move |x: &[f64]| -> Result<f64> {
            let mut f = field.clone();
            f.data.copy_from_slice(x);
            let mut s = 0.0;
            for (q, uv) in uvs.iter().enumerate() {
                s += dot(&f.query(uv, 0)?, &r[3 * q..3 * q + 3]);
            }
            Ok(s)
        }
    };
    let mut f = field;
    f.data.copy_from_slice(&x);
    let mut grad = f.zero_grad();
    for (q, uv) in uvs.iter().enumerate() {
        f.backward_into(uv, 0, &r[3 * q..3 * q + 3], &mut grad)?;
    }
    Ok(Problem { x, f: Box::new(eval), grad })
}

/// A tilted grid plane seen head-on at 16x16.
fn ramp_view(rng: &mut ChaCha8Rng) -> Result<(TriangleMesh, Camera)> {
    let slope = rng.random_range(-0.4..0.4);
    let g = grid_plane(6, 6, 2.0);
    let p = g.positions.iter().map(|p| Vec3::new(p.x, p.y, slope * p.x)).collect();
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 30.0, 16, 16)?;
    Ok((g.with_positions(p), cam))
}

fn small_field(rng: &mut ChaCha8Rng, amplitude: f64) -> Result<UVField> {
    let mut f = UVField::new(6, 6, &[0.0], None, 0)?;
    for v in &mut f.data {
        *v = rng.random_range(-amplitude..amplitude);
    }
    Ok(f)
}

fn surface_points_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (mesh, cam) = ramp_view(rng)?;
    let gb = rasterize(&mesh, &cam);
    let field = small_field(rng, 0.05)?;
    let r = unflatten(&uniform(rng, 3 * gb.pixel_count(), -1.0, 1.0));
    let (_, offsets) = surface_points(&gb, &field, 0)?;
    let g = surface_points_backward(&gb, &field, 0, &offsets, &r, vec![Vec3::zeros(); gb.pixel_count()])?;
    let x = field.data.clone();
    let eval = move |x: &[f64]| -> Result<f64> {
        let mut f = field.clone();
        f.data.copy_from_slice(x);
        Ok(dot3(&surface_points(&gb, &f, 0)?.0, &r))
    };
    Ok(Problem {
        x,
        f: Box::new(eval),
        grad: g.field,
    })
}

fn o2n_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (mesh, cam) = ramp_view(rng)?;
    let gb = rasterize(&mesh, &cam);
    let field = small_field(rng, 0.03)?;
    let r = unflatten(&uniform(rng, 3 * gb.pixel_count(), -1.0, 1.0));
    let mut conv = NormalConversion::new(DEFAULT_TAU);
    conv.forward(&gb, &field, 0)?;
    let g = conv.backward_pixels(&field, &r, &[])?;
    let x = field.data.clone();
    let eval = move |x: &[f64]| -> Result<f64> {
        let mut f = field.clone();
        f.data.copy_from_slice(x);
        let mut c = NormalConversion::new(DEFAULT_TAU);
        Ok(dot3(&c.forward(&gb, &f, 0)?.n_surf, &r))
    };
    Ok(Problem {
        x,
        f: Box::new(eval),
        grad: g.field,
    })
}

fn jitter(mesh: &TriangleMesh, rng: &mut ChaCha8Rng, amount: f64) -> TriangleMesh {
    let p = mesh
        .positions
        .iter()
        .map(|p| p + Vec3::new(rng.random_range(-amount..amount), rng.random_range(-amount..amount), rng.random_range(-amount..amount)))
        .collect();
    mesh.with_positions(p)
}

fn raster_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (mesh, cam) = ramp_view(rng)?;
    let mesh = jitter(&mesh, rng, 0.02);
    let gb = rasterize(&mesh, &cam);
    let n = gb.pixel_count();
    let rp = unflatten(&uniform(rng, 3 * n, -1.0, 1.0));
    let rn = unflatten(&uniform(rng, 3 * n, -1.0, 1.0));
    let vg = rasterize_backward(&gb, &mesh, &rp, &rn)?;
    let v = mesh.vertex_count();
    let mut x = flatten(&mesh.positions);
    x.extend(flatten(&mesh.normals));
    let mut grad = flatten(&vg.positions);
    grad.extend(flatten(&vg.normals));
    let eval = move |x: &[f64]| -> Result<f64> {
        let mut m = mesh.clone();
        m.positions = unflatten(&x[..3 * v]);
        m.normals = unflatten(&x[3 * v..]);
        let g = interpolate(&gb, &m);
        Ok(dot3(&g.position, &rp) + dot3(&g.normal, &rn))
    };
    Ok(Problem { x, f: Box::new(eval), grad })
}

fn vertex_normals_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mesh = jitter(&icosphere(1), rng, 0.1);
    let r = unflatten(&uniform(rng, 3 * mesh.vertex_count(), -1.0, 1.0));
    let grad = flatten(&vertex_normals_backward(&mesh, &r)?);
    let x = flatten(&mesh.positions);
    let eval = move |x: &[f64]| -> Result<f64> { Ok(dot3(&compute_vertex_normals(&mesh.with_positions(unflatten(x))), &r)) };
    Ok(Problem { x, f: Box::new(eval), grad })
}

fn geometry_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (mesh, cam) = ramp_view(rng)?;
    let v = mesh.vertex_count();
    let state = ModelState {
        vertex_offsets: VertexOffsets(uniform(rng, v, -0.02, 0.02)),
        offset_field: small_field(rng, 0.02)?,
        color_field: UVField::new(2, 2, &[0.5; 3], None, 0)?,
        albedo_field: UVField::new(2, 2, &[0.5; 3], None, 0)?,
        roughness_field: UVField::new(2, 2, &[0.5], None, 0)?,
        probes: LightProbeSphere::new(1, 1)?,
        max_offset: 1.0,
    };
    let cfg = EngineConfig::default();
    let pose = Pose::rest(0);
    let geo = geometry_with(&mesh, &pose, &cam, &state, &cfg, 0, None)?;
    let coverage: GBuffer = geo.gbuffer.clone();
    let r = unflatten(&uniform(rng, 3 * coverage.pixel_count(), -1.0, 1.0));
    let g = geometry_backward(&geo, &state, &cfg, &r, &[])?;
    let mut x = state.vertex_offsets.0.clone();
    x.extend(&state.offset_field.data);
    let mut grad = g.vertex_offsets;
    grad.extend(g.offset_field);
    let eval = move |x: &[f64]| -> Result<f64> {
        let mut s = state.clone();
        s.vertex_offsets.0.copy_from_slice(&x[..v]);
        s.offset_field.data.copy_from_slice(&x[v..]);
        let geo = geometry_with(&mesh, &pose, &cam, &s, &cfg, 0, Some(&coverage))?;
        Ok(dot3(&geo.n_surf, &r))
    };
    Ok(Problem { x, f: Box::new(eval), grad })
}

/// Random unit vector within `max_angle` of `axis`.
fn near(rng: &mut ChaCha8Rng, axis: &Vec3, max_angle: f64) -> Vec3 {
    loop {
        let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if d.norm() > 1.0 || d.norm() < 1e-3 {
            continue;
        }
        let d = d.normalize();
        if d.dot(axis) >= max_angle.cos() {
            return d;
        }
    }
}

fn brdf_problem(rng: &mut ChaCha8Rng, mode: BrdfMode) -> Result<Problem> {
    const CASES: usize = 8;
    let mut fixed = Vec::new();
    let mut x = Vec::new();
    for _ in 0..CASES {
        let n = near(rng, &Vec3::z(), 0.3);
        let wi = near(rng, &n, 1.3);
        let wo = near(rng, &n, 1.3);
        let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        fixed.push((wi, wo, r));
        x.extend([rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
        x.push(rng.random_range(0.2..0.9));
        x.extend([n.x, n.y, n.z]);
    }
    let unpack = |x: &[f64], k: usize| {
        let s = &x[7 * k..7 * k + 7];
        (
            MaterialSample {
                albedo: Vec3::new(s[0], s[1], s[2]),
                roughness: s[3],
            },
            Vec3::new(s[4], s[5], s[6]),
        )
    };
    let mut grad = Vec::with_capacity(x.len());
    for (k, (wi, wo, r)) in fixed.iter().enumerate() {
        let (m, n) = unpack(&x, k);
        let e = brdf_with_grad(&m, &n, wi, wo, mode);
        grad.extend((r * e.d_albedo).iter());
        grad.push(r.sum() * e.d_roughness);
        grad.extend((e.d_normal * r.sum()).iter());
    }
    let eval = move |x: &[f64]| -> Result<f64> {
        Ok(fixed
            .iter()
            .enumerate()
            .map(|(k, (wi, wo, r))| {
                let (m, n) = unpack(x, k);
                brdf_with_grad(&m, &n, wi, wo, mode).value.dot(r)
            })
            .sum())
    };
    Ok(Problem { x, f: Box::new(eval), grad })
}

#[derive(Clone, Copy)]
enum RenderVar {
    Albedo,
    Roughness,
    Probes,
    Normals,
}

#[derive(Clone)]
struct RenderFixture {
    gb: GBuffer,
    normals: Vec<Vec3>,
    albedo: Vec<Vec3>,
    roughness: Vec<f64>,
    probes: LightProbeSphere,
    vis: VisibilityBuffer,
    weights: Image,
}

impl RenderFixture {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 20.0, 8, 8)?;
        let gb = rasterize(&grid_plane(4, 4, 4.0), &cam);
        let n = gb.pixel_count();
        let mut probes = LightProbeSphere::new(4, 8)?;
        probes.radiance = uniform(rng, probes.radiance.len(), 0.0, 1.0);
        // Normals facing the camera, clear of every probe horizon by more than
        // the largest difference step.
        let normals: Vec<Vec3> = (0..n)
            .map(|_| loop {
                let c = near(rng, &Vec3::z(), 0.6);
                if probes.directions.iter().all(|w| w.dot(&c).abs() > 1e-2) {
                    break c;
                }
            })
            .collect();
        let bits = (0..n * probes.len()).map(|_| rng.random_bool(0.8)).collect();
        let vis = VisibilityBuffer {
            pixels: n,
            probes: probes.len(),
            bits,
        };
        let albedo = unflatten(&uniform(rng, 3 * n, 0.1, 0.9));
        let roughness = uniform(rng, n, 0.2, 0.9);
        let weights = Image::from_data(8, 8, 3, uniform(rng, 3 * n, -1.0, 1.0))?;
        Ok(RenderFixture {
            gb,
            normals,
            albedo,
            roughness,
            probes,
            vis,
            weights,
        })
    }

    fn inputs(&self, mode: BrdfMode) -> RenderInputs<'_> {
        RenderInputs {
            gbuffer: &self.gb,
            x_surf: &self.gb.position,
            n_surf: &self.normals,
            albedo: &self.albedo,
            roughness: &self.roughness,
            probes: &self.probes,
            visibility: &self.vis,
            mode,
            background: Vec3::zeros(),
        }
    }

    fn get(&self, var: RenderVar) -> Vec<f64> {
        match var {
            RenderVar::Albedo => flatten(&self.albedo),
            RenderVar::Roughness => self.roughness.clone(),
            RenderVar::Probes => self.probes.radiance.clone(),
            RenderVar::Normals => flatten(&self.normals),
        }
    }

    fn set(&mut self, var: RenderVar, x: &[f64]) {
        match var {
            RenderVar::Albedo => self.albedo = unflatten(x),
            RenderVar::Roughness => self.roughness = x.to_vec(),
            RenderVar::Probes => self.probes.radiance = x.to_vec(),
            RenderVar::Normals => self.normals = unflatten(x),
        }
    }
}

const MODES: [BrdfMode; 2] = [BrdfMode::Literal, BrdfMode::Microfacet];

fn render_problem(rng: &mut ChaCha8Rng, var: RenderVar) -> Result<Problem> {
    let fx = RenderFixture::new(rng)?;
    let x = fx.get(var);
    let mut grad = vec![0.0; x.len()];
    for mode in MODES {
        let g = render_pbr_backward(&fx.inputs(mode), &fx.weights)?;
        let part = match var {
            RenderVar::Albedo => flatten(&g.albedo),
            RenderVar::Roughness => g.roughness,
            RenderVar::Probes => g.probes,
            RenderVar::Normals => flatten(&g.normals),
        };
        for (a, b) in grad.iter_mut().zip(part) {
            *a += b;
        }
    }
    let eval = move |x: &[f64]| -> Result<f64> {
        let mut f = fx.clone();
        f.set(var, x);
        let mut s = 0.0;
        for mode in MODES {
            s += dot(&render_pbr(&f.inputs(mode))?.data, &f.weights.data);
        }
        Ok(s)
    };
    Ok(Problem { x, f: Box::new(eval), grad })
}

fn mse_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let target = Image::from_data(8, 8, 3, uniform(rng, 192, 0.0, 1.0))?;
    let mask: Vec<bool> = (0..64).map(|_| rng.random_bool(0.8)).collect();
    let x = uniform(rng, 192, 0.0, 1.0);
    let pred = Image::from_data(8, 8, 3, x.clone())?;
    let grad = loss_mse(&pred, &target, &mask)?.grad.data;
    let eval = move |x: &[f64]| -> Result<f64> { Ok(loss_mse(&Image::from_data(8, 8, 3, x.to_vec())?, &target, &mask)?.value) };
    Ok(Problem { x, f: Box::new(eval), grad })
}

fn ssim_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let target = Image::from_data(32, 32, 3, uniform(rng, 3072, 0.0, 1.0))?;
    let (cx, cy): (usize, usize) = (rng.random_range(0..32), rng.random_range(0..32));
    // Mask with a rectangular hole so some windows are excluded.
    let mask: Vec<bool> = (0..1024usize)
        .map(|p| {
            let (x, y) = (p % 32, p / 32);
            !(x.abs_diff(cx) < 3 && y.abs_diff(cy) < 3)
        })
        .collect();
    let x = uniform(rng, 3072, 0.0, 1.0);
    let grad = loss_ssim(&Image::from_data(32, 32, 3, x.clone())?, &target, &mask)?.grad.data;
    let eval = move |x: &[f64]| -> Result<f64> { Ok(loss_ssim(&Image::from_data(32, 32, 3, x.to_vec())?, &target, &mask)?.value) };
    Ok(Problem { x, f: Box::new(eval), grad })
}

fn regularizer_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let rest = icosphere(1);
    let mesh = jitter(&rest, rng, 0.1);
    let target = rng.random_range(0.2..0.8);
    let w: [f64; 3] = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
    let total = move |m: &TriangleMesh| -> Result<(f64, Vec<Vec3>)> {
        let (la, ga) = mesh_regularizers(m, target).weighted(w[0], w[1], w[2]);
        let (lb, gb) = mesh_regularizers_relative(m, &rest)?.weighted(w[0], w[1], w[2]);
        Ok((la + lb, ga.iter().zip(&gb).map(|(a, b)| a + b).collect()))
    };
    let (_, g) = total(&mesh)?;
    let x = flatten(&mesh.positions);
    let eval = move |x: &[f64]| -> Result<f64> { Ok(total(&mesh.with_positions(unflatten(x)))?.0) };
    Ok(Problem {
        x,
        f: Box::new(eval),
        grad: flatten(&g),
    })
}
