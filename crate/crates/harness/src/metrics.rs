//! Evaluation of a model state against a synthetic dataset.

use serde::{Deserialize, Serialize};

use relit_core::deshade::{normal_prior, NormalPrior, NormalPriorRequest};
use relit_core::engine::losses::{metric_normal_degree, metric_psnr, metric_scale_aligned, ssim};
use relit_core::engine::{render_view, temporal_consistency, EngineConfig, ModelState, Scene};
use relit_core::fields::UVField;
use relit_core::geom::primitives::subdivide;
use relit_core::geom::{apply_vertex_offsets, chamfer_and_p2s, pose_mesh, TriangleMesh};
use relit_core::image::Image;
use relit_core::raster::{rasterize, Camera, GBuffer};
use relit_core::{Mat3, Vec3};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::synth::{gt_engine_config, SceneDataset};

/// Every number is a mean over (view, frame) pairs unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Re-render under the fitted probes vs the input images.
    pub psnr: f64,
    pub ssim: f64,
    pub albedo_psnr: f64,
    pub albedo_psnr_aligned: f64,
    /// Held-out environment: raw and per-channel scale-aligned.
    pub relight_psnr: f64,
    pub relight_psnr_aligned: f64,
    pub normal_degree: f64,
    /// Surface distances at frame 0, scene units.
    pub chamfer: f64,
    pub p2s: f64,
    /// Mean per-channel L1 ×10³ of rest-frame normals between consecutive
    /// frames (animated scenes only).
    pub temporal_l1: Option<f64>,
    /// Same metric on the noisy normal prior, when the prior is `gt_noisy`.
    pub temporal_l1_prior: Option<f64>,
}

fn clamp01(img: &Image) -> Image {
    img.map(|v| v.clamp(0.0, 1.0))
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Base mesh at `frame`, offset by the vertex offsets, subdivided, and
/// displaced along its normals by `field`.
pub fn displaced_surface(base: &TriangleMesh, state_offsets: &ModelState, field: &UVField, subdivisions: usize, scene: &Scene, frame: usize) -> Result<TriangleMesh> {
    let posed = pose_mesh(base, &scene.poses[frame])?;
    let mut m = apply_vertex_offsets(&posed, &state_offsets.vertex_offsets)?;
    for _ in 0..subdivisions {
        m = subdivide(&m);
    }
    let positions = m
        .positions
        .iter()
        .zip(&m.normals)
        .zip(&m.uvs)
        .map(|((x, n), uv)| Ok(x + n * field.query1(uv, frame)?))
        .collect::<relit_core::Result<Vec<_>>>()?;
    Ok(m.with_positions(positions))
}

/// Rotation taking triangle `f` of `posed` onto the same triangle of `rest`.
fn triangle_rotation(posed: &TriangleMesh, rest: &TriangleMesh, f: usize) -> Mat3 {
    let frame = |m: &TriangleMesh| {
        let [a, b, c] = m.triangle(f);
        let e = (b - a).normalize();
        let n = (b - a).cross(&(c - a)).normalize();
        Mat3::from_columns(&[e, n.cross(&e), n])
    };
    frame(rest) * frame(posed).transpose()
}

/// Pixel correspondences between consecutive frames of one view from the
/// ground-truth motion, and per-pixel rotations into the rest pose.
pub struct TemporalGeometry {
    pub correspondences: Vec<Vec<Option<usize>>>,
    pub to_rest: Vec<Vec<Mat3>>,
}

pub fn temporal_geometry(base: &TriangleMesh, scene: &Scene, camera: &Camera) -> Result<TemporalGeometry> {
    let frames = scene.frames();
    let posed: Vec<TriangleMesh> = scene.poses.iter().map(|p| pose_mesh(base, p)).collect::<relit_core::Result<_>>()?;
    let gbs: Vec<GBuffer> = posed.iter().map(|m| rasterize(m, camera)).collect();
    let tol = 1e-2 * base.bbox_diagonal();
    let mut correspondences = Vec::with_capacity(frames.saturating_sub(1));
    for t in 0..frames.saturating_sub(1) {
        let (g0, g1) = (&gbs[t], &gbs[t + 1]);
        let map = (0..g0.pixel_count())
            .map(|p| {
                if !g0.mask[p] {
                    return None;
                }
                let f = g0.triangle_id[p] as usize;
                let b = g0.barycentrics[p];
                let [a0, a1, a2] = posed[t + 1].triangle(f);
                let x = a0 * b[0] + a1 * b[1] + a2 * b[2];
                let q = camera.to_camera(&x);
                if q.z <= 0.0 {
                    return None;
                }
                let px = camera.project_camera(&q);
                if px.x < 0.0 || px.y < 0.0 || px.x >= camera.width as f64 || px.y >= camera.height as f64 {
                    return None;
                }
                let target = g1.index(px.x as usize, px.y as usize);
                (g1.mask[target] && (g1.depth[target] - q.z).abs() < tol).then_some(target)
            })
            .collect();
        correspondences.push(map);
    }
    let to_rest = (0..frames)
        .map(|t| {
            (0..gbs[t].pixel_count())
                .map(|p| {
                    if gbs[t].mask[p] {
                        triangle_rotation(&posed[t], base, gbs[t].triangle_id[p] as usize)
                    } else {
                        Mat3::identity()
                    }
                })
                .collect()
        })
        .collect();
    Ok(TemporalGeometry { correspondences, to_rest })
}

fn rest_normals(seq: &[Vec<Vec3>], tg: &TemporalGeometry) -> Vec<Vec<Vec3>> {
    seq.iter()
        .zip(&tg.to_rest)
        .map(|(n, r)| n.iter().zip(r).map(|(n, r)| r * n).collect())
        .collect()
}

/// Evaluate `state` (fitted with `engine`) on `ds`.
pub fn evaluate(ds: &SceneDataset, scene: &Scene, state: &ModelState, engine: &EngineConfig, cfg: &ExperimentConfig) -> Result<Metrics> {
    let heldout_model = ds.heldout_probes(state.probes.n_lat, state.probes.n_lon)?;
    let (rl, rn) = ds.render_grid();
    let heldout_gt = ds.heldout_probes(rl, rn)?;
    let gt_state = ds.gt_state()?;
    let gt_cfg = gt_engine_config();

    let mut psnr = Vec::new();
    let mut ssims = Vec::new();
    let mut albedo_raw = Vec::new();
    let mut albedo_aligned = Vec::new();
    let mut relight_raw = Vec::new();
    let mut relight_aligned = Vec::new();
    let mut degrees = Vec::new();
    let mut fitted_normals: Vec<Vec<Vec<Vec3>>> = vec![Vec::new(); ds.views()];
    for f in 0..ds.frames() {
        for v in 0..ds.views() {
            let gt = ds.image(v, f);
            let gt_mask = gt.mask_bits();
            let r = render_view(scene, state, engine, v, f, &state.probes)?;
            let gb = &r.geometry.gbuffer;
            let (w, h) = (gb.width, gb.height);
            let both = and(&gt_mask, &gb.mask);

            psnr.push(metric_psnr(&clamp01(&r.image), &clamp01(&gt.rgb), &gt_mask)?);
            ssims.push(ssim(&clamp01(&r.image), &clamp01(&gt.rgb), &gt_mask)?);

            let albedo = Image::from_vec3(w, h, &r.albedo);
            albedo_raw.push(metric_psnr(&albedo, &gt.albedo, &both)?);
            albedo_aligned.push(metric_scale_aligned(&albedo, &gt.albedo, &both)?);

            let relit = render_view(scene, state, engine, v, f, &heldout_model)?;
            let relit_gt = render_view(scene, &gt_state, &gt_cfg, v, f, &heldout_gt)?;
            relight_raw.push(metric_psnr(&clamp01(&relit.image), &clamp01(&relit_gt.image), &gt_mask)?);
            relight_aligned.push(metric_scale_aligned(&relit.image, &relit_gt.image, &gt_mask)?);

            let n_gt = gt.normal.to_vec3();
            let unit: Vec<bool> = both.iter().zip(&r.geometry.n_surf).map(|(m, n)| *m && n.norm() > 0.0).collect();
            degrees.push(metric_normal_degree(&r.geometry.n_surf, &n_gt, &unit)?);
            fitted_normals[v].push(r.geometry.n_surf.clone());
        }
    }

    let gt_surface = displaced_surface(&ds.mesh, &gt_state, &ds.gt.offset_field, cfg.metrics.subdivisions, scene, 0)?;
    let fit_field = if engine.use_o2n { state.offset_field.clone() } else { zero_like(&state.offset_field) };
    let fit_surface = displaced_surface(&ds.mesh, state, &fit_field, cfg.metrics.subdivisions, scene, 0)?;
    let d = chamfer_and_p2s(&fit_surface, &gt_surface, cfg.metrics.surface_samples, cfg.metrics.seed)?;

    let (temporal_l1, temporal_l1_prior) = if ds.frames() >= 2 {
        let mut fit = Vec::new();
        let mut prior = Vec::new();
        for v in 0..ds.views() {
            let tg = temporal_geometry(&ds.mesh, scene, &ds.cameras[v])?;
            fit.push(temporal_consistency(&rest_normals(&fitted_normals[v], &tg), &tg.correspondences)?);
            if let NormalPrior::GtNoisy { .. } = engine.normal_prior {
                let seq = (0..ds.frames())
                    .map(|f| prior_normals(ds, engine, v, f))
                    .collect::<Result<Vec<_>>>()?;
                prior.push(temporal_consistency(&rest_normals(&seq, &tg), &tg.correspondences)?);
            }
        }
        (Some(mean(&fit)), (!prior.is_empty()).then(|| mean(&prior)))
    } else {
        (None, None)
    };

    Ok(Metrics {
        psnr: mean(&psnr),
        ssim: mean(&ssims),
        albedo_psnr: mean(&albedo_raw),
        albedo_psnr_aligned: mean(&albedo_aligned),
        relight_psnr: mean(&relight_raw),
        relight_psnr_aligned: mean(&relight_aligned),
        normal_degree: mean(&degrees),
        chamfer: d.chamfer,
        p2s: d.p2s,
        temporal_l1,
        temporal_l1_prior,
    })
}

fn zero_like(f: &UVField) -> UVField {
    let mut z = f.clone();
    z.data.iter_mut().for_each(|v| *v = 0.0);
    z
}

/// The normal prior the optimizer saw for (view, frame).
fn prior_normals(ds: &SceneDataset, engine: &EngineConfig, view: usize, frame: usize) -> Result<Vec<Vec3>> {
    let gt = ds.image(view, frame);
    let mask = gt.mask_bits();
    let n_gt = gt.normal.to_vec3();
    let i_rgb = gt.rgb.to_vec3();
    let req = NormalPriorRequest {
        width: gt.rgb.width,
        height: gt.rgb.height,
        n_surf: &n_gt,
        i_rgb: &i_rgb,
        mask: &mask,
        frame,
        view,
    };
    Ok(normal_prior(&req, &engine.normal_prior, Some(&n_gt))?)
}
