//! Per-view forward/backward passes and the three optimization stages.
//!
//! Stage 1 fits geometry to the normal prior and the color field to the
//! input images. Stage 2 freezes geometry and fits albedo, roughness and
//! probe radiance through the probe-lit renderer. Stage 3 alternates
//! de-shading of the current albedo with a joint image fit of geometry,
//! roughness and probes.

use std::path::PathBuf;

use rayon::prelude::*;

use super::losses::image_loss;
use super::params::{Grads, ModelState, ParamId, ParamSet};
use crate::deshade::{deshade_external, deshade_with_shading, normal_prior, DeshadeRequest, NormalPrior, NormalPriorRequest};
use crate::error::{Error, Result};
use crate::fields::UVField;
use crate::geom::{
    apply_vertex_offsets, mesh_regularizers, mesh_regularizers_relative, pose_mesh, vertex_normals_backward,
    vertex_offsets_backward, Pose, TriangleMesh,
};
use crate::image::{encode_normals, Image};
use crate::o2n::NormalConversion;
use crate::raster::{interpolate, rasterize, rasterize_backward, Camera, GBuffer};
use crate::shade::{
    render_pbr, render_pbr_backward, shading_image, visibility, BrdfMode, Bvh, LightProbeSphere, RenderInputs,
    VisibilityBuffer,
};
use crate::Vec3;

/// Input image of one (view, frame) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rgb: Image,
    pub mask: Vec<bool>,
    /// Ground-truth normals, needed only by the `gt_noisy` prior.
    pub normal: Option<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Rest-pose base mesh.
    pub mesh: TriangleMesh,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    /// Indexed `frame * cameras.len() + view`.
    pub observations: Vec<Observation>,
}

impl Scene {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn observation(&self, view: usize, frame: usize) -> &Observation {
        &self.observations[frame * self.views() + view]
    }

    /// `(view, frame)` pairs, frame-major.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        (0..self.frames())
            .flat_map(|f| (0..self.views()).map(move |v| (v, f)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views() == 0 || self.frames() == 0 {
            return Err(Error::arg("scene needs at least one view and one frame"));
        }
        if self.observations.len() != self.views() * self.frames() {
            return Err(Error::arg(format!(
                "scene has {} observations for {} views x {} frames",
                self.observations.len(),
                self.views(),
                self.frames()
            )));
        }
        for (i, o) in self.observations.iter().enumerate() {
            let cam = &self.cameras[i % self.views()];
            if o.rgb.width != cam.width || o.rgb.height != cam.height || o.rgb.channels != 3 {
                return Err(Error::arg(format!("observation {i} does not match its camera resolution")));
            }
            if o.mask.len() != cam.pixel_count() || o.normal.as_ref().is_some_and(|n| n.len() != cam.pixel_count()) {
                return Err(Error::arg(format!("observation {i} has a mis-sized mask or normal map")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_ssim: f64,
    pub edge: f64,
    pub normal: f64,
    pub laplacian: f64,
    pub albedo_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_ssim: 0.2,
            edge: 1.0,
            normal: 0.01,
            laplacian: 0.1,
            albedo_prior: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mse, self.w_ssim, self.edge, self.normal, self.laplacian, self.albedo_prior];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerMode {
    /// Measured against the posed base mesh; zero at rest.
    Relative,
    /// Absolute losses with a single target edge length.
    Absolute { edge_target: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeshadeMode {
    /// `α̂ = α_s`.
    Identity,
    /// `α̂ = α_s / S` with `S` the shading image of the current probes.
    AnalyticCurrent,
    /// `α̂ = I / S_reference`: the observed image, which stage 2 fits as
    /// `α_s ⊙ S_current`, divided by the shading of a fixed reference rig.
    /// The rig must use the model's probe grid.
    AnalyticReference(LightProbeSphere),
    /// Per-frame maps from a directory.
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub weights: LossWeights,
    /// Epochs for stages 1, 2 and 3. One epoch visits every (view, frame)
    /// pair once, with one Adam step per pair.
    pub epochs: [usize; 3],
    /// Stage-1 epochs that feed the input image (rather than the color
    /// field) to the normal prior.
    pub warmup_epochs: usize,
    /// Normal-prior refresh interval in epochs.
    pub prior_refresh: usize,
    /// Stage-3 visibility refresh interval in optimizer steps.
    pub k_vis: usize,
    pub brdf: BrdfMode,
    pub tau: f64,
    pub epsilon_scale: f64,
    pub s_floor: f64,
    pub use_o2n: bool,
    pub use_visibility: bool,
    pub regularizer: RegularizerMode,
    pub normal_prior: NormalPrior,
    pub deshade: DeshadeMode,
    pub background: Vec3,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            weights: LossWeights::default(),
            epochs: [100, 100, 40],
            warmup_epochs: 2,
            prior_refresh: 1,
            k_vis: 10,
            brdf: BrdfMode::Literal,
            tau: crate::o2n::DEFAULT_TAU,
            epsilon_scale: crate::shade::DEFAULT_EPSILON_SCALE,
            s_floor: crate::deshade::DEFAULT_S_FLOOR,
            use_o2n: true,
            use_visibility: true,
            regularizer: RegularizerMode::Relative,
            normal_prior: NormalPrior::Identity,
            deshade: DeshadeMode::Identity,
            background: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
}

/// Geometry of one (view, frame) pair.
#[derive(Debug, Clone)]
pub struct SampleGeometry {
    pub frame: usize,
    pub posed: TriangleMesh,
    pub deformed: TriangleMesh,
    pub gbuffer: GBuffer,
    pub conv: NormalConversion,
    pub x_surf: Vec<Vec3>,
    pub n_surf: Vec<Vec3>,
    /// O2N validity (all false with O2N disabled).
    pub valid: Vec<bool>,
}

/// Rasterize the posed, offset mesh and convert the offset field into
/// normals. With `coverage`, the rasterizer's coverage is replaced by the
/// given frozen one (used by gradient checks).
pub fn geometry_with(
    base: &TriangleMesh,
    pose: &Pose,
    camera: &Camera,
    state: &ModelState,
    cfg: &EngineConfig,
    frame: usize,
    coverage: Option<&GBuffer>,
) -> Result<SampleGeometry> {
    let posed = pose_mesh(base, pose)?;
    let deformed = apply_vertex_offsets(&posed, &state.vertex_offsets)?;
    let gbuffer = match coverage {
        Some(c) => interpolate(c, &deformed),
        None => rasterize(&deformed, camera),
    };
    let mut conv = NormalConversion::new(cfg.tau);
    let (x_surf, n_surf, valid) = if cfg.use_o2n {
        let maps = conv.forward(&gbuffer, &state.offset_field, frame)?;
        (maps.x_surf, maps.n_surf, maps.valid)
    } else {
        (gbuffer.position.clone(), gbuffer.normal.clone(), vec![false; gbuffer.pixel_count()])
    };
    Ok(SampleGeometry {
        frame,
        posed,
        deformed,
        gbuffer,
        conv,
        x_surf,
        n_surf,
        valid,
    })
}

pub fn build_geometry(scene: &Scene, state: &ModelState, cfg: &EngineConfig, view: usize, frame: usize) -> Result<SampleGeometry> {
    geometry_with(&scene.mesh, &scene.poses[frame], &scene.cameras[view], state, cfg, frame, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryGrads {
    pub offset_field: Vec<f64>,
    pub vertex_offsets: Vec<f64>,
}

/// Sum gradients over each weld group and give every member the total, so
/// coincident vertices receive identical updates.
fn share_over_welds(mesh: &TriangleMesh, g: &mut [f64]) {
    let weld = mesh.weld();
    let mut acc = vec![0.0; g.len()];
    for (v, x) in g.iter().enumerate() {
        acc[weld[v] as usize] += x;
    }
    for (v, x) in g.iter_mut().enumerate() {
        *x = acc[weld[v] as usize];
    }
}

/// Adjoint from a normal-map gradient (and optional direct gradients on the
/// deformed vertex positions) to the offset field and vertex offsets.
pub fn geometry_backward(
    geo: &SampleGeometry,
    state: &ModelState,
    cfg: &EngineConfig,
    grad_n: &[Vec3],
    grad_vertices: &[Vec3],
) -> Result<GeometryGrads> {
    let n = geo.gbuffer.pixel_count();
    let (offset_field, pixel_position, pixel_normal) = if cfg.use_o2n {
        let g = geo.conv.backward_pixels(&state.offset_field, grad_n, &[])?;
        (g.field, g.pixel_position, g.pixel_normal)
    } else {
        (state.offset_field.zero_grad(), vec![Vec3::zeros(); n], grad_n.to_vec())
    };
    let vg = rasterize_backward(&geo.gbuffer, &geo.deformed, &pixel_position, &pixel_normal)?;
    let from_normals = vertex_normals_backward(&geo.deformed, &vg.normals)?;
    let mut positions: Vec<Vec3> = vg.positions.iter().zip(&from_normals).map(|(a, b)| a + b).collect();
    if !grad_vertices.is_empty() {
        if grad_vertices.len() != positions.len() {
            return Err(Error::arg("vertex gradient length mismatch"));
        }
        for (a, b) in positions.iter_mut().zip(grad_vertices) {
            *a += b;
        }
    }
    let mut vertex_offsets = vertex_offsets_backward(&geo.posed, &positions)?;
    share_over_welds(&geo.posed, &mut vertex_offsets);
    Ok(GeometryGrads {
        offset_field,
        vertex_offsets,
    })
}

/// Weighted mesh regularizers on the deformed mesh and their gradient.
pub fn regularize(geo: &SampleGeometry, cfg: &EngineConfig) -> Result<(f64, Vec<Vec3>)> {
    let w = &cfg.weights;
    if w.edge == 0.0 && w.normal == 0.0 && w.laplacian == 0.0 {
        return Ok((0.0, Vec::new()));
    }
    let r = match cfg.regularizer {
        RegularizerMode::Relative => mesh_regularizers_relative(&geo.deformed, &geo.posed)?,
        RegularizerMode::Absolute { edge_target } => mesh_regularizers(&geo.deformed, edge_target),
    };
    Ok(r.weighted(w.edge, w.normal, w.laplacian))
}

/// Field values at every masked pixel's uv, `channels` per pixel, zero
/// elsewhere.
pub fn sample_field(field: &UVField, gbuffer: &GBuffer, frame: usize) -> Result<Vec<f64>> {
    let c = field.channels();
    let rows: Vec<Vec<f64>> = (0..gbuffer.pixel_count())
        .into_par_iter()
        .map(|p| {
            if gbuffer.mask[p] {
                field.query(&gbuffer.uv[p], frame)
            } else {
                Ok(vec![0.0; c])
            }
        })
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

/// Adjoint of [`sample_field`].
pub fn sample_field_backward(field: &UVField, gbuffer: &GBuffer, frame: usize, grad: &[f64]) -> Result<Vec<f64>> {
    let c = field.channels();
    if grad.len() != c * gbuffer.pixel_count() {
        return Err(Error::arg("per-pixel field gradient has the wrong length"));
    }
    let mut out = field.zero_grad();
    for p in 0..gbuffer.pixel_count() {
        let g = &grad[p * c..(p + 1) * c];
        if gbuffer.mask[p] && g.iter().any(|&v| v != 0.0) {
            field.backward_into(&gbuffer.uv[p], frame, g, &mut out)?;
        }
    }
    Ok(out)
}

fn to_vec3(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn loss_mask(gbuffer: &GBuffer, obs: &Observation) -> Vec<bool> {
    gbuffer.mask.iter().zip(&obs.mask).map(|(a, b)| *a && *b).collect()
}

/// Visibility of the rasterized base points of `geo` toward every probe.
pub fn compute_visibility(geo: &SampleGeometry, probes: &LightProbeSphere, cfg: &EngineConfig) -> Result<VisibilityBuffer> {
    if !cfg.use_visibility {
        return Ok(VisibilityBuffer::unoccluded(&geo.gbuffer.mask, probes.len()));
    }
    let bvh = Bvh::build(&geo.deformed);
    visibility(&geo.gbuffer.position, &geo.gbuffer.mask, &bvh, probes, cfg.epsilon_scale)
}

/// Everything needed to evaluate a fitted model in one view.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub geometry: SampleGeometry,
    pub albedo: Vec<Vec3>,
    pub roughness: Vec<f64>,
    pub color: Vec<Vec3>,
    pub visibility: VisibilityBuffer,
    /// Probe-lit render under the given probes.
    pub image: Image,
}

/// Render the model state in one view under `probes` (which may differ from
/// the fitted probes, e.g. for relighting).
pub fn render_view(
    scene: &Scene,
    state: &ModelState,
    cfg: &EngineConfig,
    view: usize,
    frame: usize,
    probes: &LightProbeSphere,
) -> Result<ViewRender> {
    let geometry = build_geometry(scene, state, cfg, view, frame)?;
    let gb = &geometry.gbuffer;
    let albedo = to_vec3(&sample_field(&state.albedo_field, gb, frame)?);
    let roughness = sample_field(&state.roughness_field, gb, frame)?;
    let color = to_vec3(&sample_field(&state.color_field, gb, frame)?);
    let vis = compute_visibility(&geometry, probes, cfg)?;
    let image = render_pbr(&RenderInputs {
        gbuffer: gb,
        x_surf: &geometry.x_surf,
        n_surf: &geometry.n_surf,
        albedo: &albedo,
        roughness: &roughness,
        probes,
        visibility: &vis,
        mode: cfg.brdf,
        background: cfg.background,
    })?;
    Ok(ViewRender {
        geometry,
        albedo,
        roughness,
        color,
        visibility: vis,
        image,
    })
}

fn normals_image(w: usize, h: usize, n: &[Vec3]) -> Image {
    encode_normals(&Image::from_vec3(w, h, n))
}

fn stage1_step(
    scene: &Scene,
    params: &mut ParamSet,
    cfg: &EngineConfig,
    (view, frame): (usize, usize),
    epoch: usize,
    prior: &mut Option<Vec<Vec3>>,
) -> Result<f64> {
    let state = &params.state;
    let obs = scene.observation(view, frame);
    let geo = build_geometry(scene, state, cfg, view, frame)?;
    let gb = &geo.gbuffer;
    let (w, h) = (gb.width, gb.height);
    let mask = loss_mask(gb, obs);
    let color = sample_field(&state.color_field, gb, frame)?;
    let color_img = Image::from_data(w, h, 3, color)?;

    if prior.is_none() || epoch % cfg.prior_refresh.max(1) == 0 {
        let i_rgb = if epoch < cfg.warmup_epochs { obs.rgb.to_vec3() } else { color_img.to_vec3() };
        let req = NormalPriorRequest {
            width: w,
            height: h,
            n_surf: &geo.n_surf,
            i_rgb: &i_rgb,
            mask: &mask,
            frame,
            view,
        };
        *prior = Some(normal_prior(&req, &cfg.normal_prior, obs.normal.as_deref())?);
    }
    let target = prior.as_ref().expect("set above");

    let wt = &cfg.weights;
    let ln = image_loss(&normals_image(w, h, &geo.n_surf), &normals_image(w, h, target), &mask, wt.w_mse, wt.w_ssim)?;
    // d(encode)/dn = 1/2.
    let grad_n: Vec<Vec3> = ln.grad.to_vec3().iter().map(|g| g * 0.5).collect();
    let lc = image_loss(&color_img, &obs.rgb, &mask, wt.w_mse, wt.w_ssim)?;
    let color_grad = sample_field_backward(&state.color_field, gb, frame, &lc.grad.data)?;
    let (lr, reg_grad) = regularize(&geo, cfg)?;
    let gg = geometry_backward(&geo, state, cfg, &grad_n, &reg_grad)?;

    let mut grads = Grads::new();
    grads.add(ParamId::OffsetField, &gg.offset_field);
    grads.add(ParamId::VertexOffsets, &gg.vertex_offsets);
    grads.add(ParamId::ColorField, &color_grad);
    params.adam_step(&grads)?;
    Ok(ln.value + lc.value + lr)
}

/// Fit vertex offsets and the offset field to the normal prior, and the
/// color field to the input images.
pub fn stage1(scene: &Scene, params: &mut ParamSet, cfg: &EngineConfig) -> Result<Vec<EpochLog>> {
    scene.validate()?;
    cfg.weights.validate()?;
    params.train_only(&[ParamId::VertexOffsets, ParamId::OffsetField, ParamId::ColorField]);
    let samples = scene.samples();
    let mut priors: Vec<Option<Vec<Vec3>>> = vec![None; samples.len()];
    let mut log = Vec::with_capacity(cfg.epochs[0]);
    for epoch in 0..cfg.epochs[0] {
        let mut total = 0.0;
        for (s, &(view, frame)) in samples.iter().enumerate() {
            total += stage1_step(scene, params, cfg, (view, frame), epoch, &mut priors[s]).map_err(|e| e.in_stage(1, view, frame))?;
        }
        log.push(EpochLog {
            stage: 1,
            epoch,
            loss: total / samples.len() as f64,
        });
    }
    Ok(log)
}

/// Image loss of a probe-lit render and its gradients w.r.t. the render
/// inputs.
fn render_fit(
    inputs: &RenderInputs,
    target: &Image,
    mask: &[bool],
    cfg: &EngineConfig,
) -> Result<(f64, crate::shade::RenderGrads)> {
    let img = render_pbr(inputs)?;
    let l = image_loss(&img, target, mask, cfg.weights.w_mse, cfg.weights.w_ssim)?;
    let g = render_pbr_backward(inputs, &l.grad)?;
    Ok((l.value, g))
}

fn stage2_step(
    scene: &Scene,
    params: &mut ParamSet,
    cfg: &EngineConfig,
    (view, frame): (usize, usize),
    geo: &SampleGeometry,
    vis: &VisibilityBuffer,
) -> Result<f64> {
    let state = &params.state;
    let obs = scene.observation(view, frame);
    let gb = &geo.gbuffer;
    let mask = loss_mask(gb, obs);
    let albedo = to_vec3(&sample_field(&state.albedo_field, gb, frame)?);
    let roughness = sample_field(&state.roughness_field, gb, frame)?;
    let inputs = RenderInputs {
        gbuffer: gb,
        x_surf: &geo.x_surf,
        n_surf: &geo.n_surf,
        albedo: &albedo,
        roughness: &roughness,
        probes: &state.probes,
        visibility: vis,
        mode: cfg.brdf,
        background: cfg.background,
    };
    let (loss, rg) = render_fit(&inputs, &obs.rgb, &mask, cfg)?;
    let mut grads = Grads::new();
    grads.add(ParamId::AlbedoField, &sample_field_backward(&state.albedo_field, gb, frame, &flatten(&rg.albedo))?);
    grads.add(ParamId::RoughnessField, &sample_field_backward(&state.roughness_field, gb, frame, &rg.roughness)?);
    grads.add(ParamId::Probes, &rg.probes);
    params.adam_step(&grads)?;
    Ok(loss)
}

/// Fit albedo, roughness and probe radiance with geometry frozen.
pub fn stage2(scene: &Scene, params: &mut ParamSet, cfg: &EngineConfig) -> Result<Vec<EpochLog>> {
    scene.validate()?;
    cfg.weights.validate()?;
    params.train_only(&[ParamId::AlbedoField, ParamId::RoughnessField, ParamId::Probes]);
    let samples = scene.samples();
    let mut cache = Vec::with_capacity(samples.len());
    for &(view, frame) in &samples {
        let geo = build_geometry(scene, &params.state, cfg, view, frame).map_err(|e| e.in_stage(2, view, frame))?;
        let vis = compute_visibility(&geo, &params.state.probes, cfg).map_err(|e| e.in_stage(2, view, frame))?;
        cache.push((geo, vis));
    }
    let mut log = Vec::with_capacity(cfg.epochs[1]);
    for epoch in 0..cfg.epochs[1] {
        let mut total = 0.0;
        for (s, &(view, frame)) in samples.iter().enumerate() {
            let (geo, vis) = &cache[s];
            total += stage2_step(scene, params, cfg, (view, frame), geo, vis).map_err(|e| e.in_stage(2, view, frame))?;
        }
        log.push(EpochLog {
            stage: 2,
            epoch,
            loss: total / samples.len() as f64,
        });
    }
    Ok(log)
}

/// De-shaded albedo and per-pixel confidence for stage 3.
pub fn deshade_albedo(
    cfg: &EngineConfig,
    geo: &SampleGeometry,
    albedo: &[Vec3],
    observed: &Image,
    probes: &LightProbeSphere,
    vis: &VisibilityBuffer,
    mask: &[bool],
) -> Result<(Vec<Vec3>, Vec<f64>)> {
    let gb = &geo.gbuffer;
    let passthrough = || -> (Vec<Vec3>, Vec<f64>) {
        let a = albedo.iter().map(|v| v.map(|x| x.clamp(0.0, 1.0))).collect();
        let c = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        (a, c)
    };
    match &cfg.deshade {
        DeshadeMode::Identity => Ok(passthrough()),
        DeshadeMode::AnalyticCurrent => {
            let s = shading_image(gb, &geo.n_surf, probes, vis)?;
            let d = deshade_with_shading(albedo, &s, mask, cfg.s_floor)?;
            Ok((d.albedo, d.confidence))
        }
        DeshadeMode::AnalyticReference(rig) => {
            if rig.n_lat != probes.n_lat || rig.n_lon != probes.n_lon {
                return Err(Error::Config("reference de-shading rig must use the model's probe grid".into()));
            }
            let reference = shading_image(gb, &geo.n_surf, rig, vis)?;
            let d = deshade_with_shading(&observed.to_vec3(), &reference, mask, cfg.s_floor)?;
            Ok((d.albedo, d.confidence))
        }
        DeshadeMode::External(dir) => {
            let req = DeshadeRequest {
                width: gb.width,
                height: gb.height,
                albedo_shaded: albedo,
                n_surf: &geo.n_surf,
                mask,
                frame: geo.frame,
            };
            let a = deshade_external(&req, dir)?;
            let (_, c) = passthrough();
            Ok((a, c))
        }
    }
}

/// Stage-3 per-sample cache, rebuilt every `k_vis` steps: visibility and,
/// for de-shaders that do not read the current albedo, their output.
struct Stage3Cache {
    at: usize,
    vis: VisibilityBuffer,
    deshaded: Option<(Vec<Vec3>, Vec<f64>)>,
}

fn stage3_step(
    scene: &Scene,
    params: &mut ParamSet,
    cfg: &EngineConfig,
    (view, frame): (usize, usize),
    cache: &mut Option<Stage3Cache>,
    step: usize,
) -> Result<f64> {
    let state = &params.state;
    let obs = scene.observation(view, frame);
    let geo = build_geometry(scene, state, cfg, view, frame)?;
    let gb = &geo.gbuffer;
    let (w, h) = (gb.width, gb.height);
    let mask = loss_mask(gb, obs);
    let wt = &cfg.weights;
    let albedo = to_vec3(&sample_field(&state.albedo_field, gb, frame)?);

    let stale = match cache {
        Some(c) => step - c.at >= cfg.k_vis.max(1),
        None => true,
    };
    if stale {
        let vis = compute_visibility(&geo, &state.probes, cfg)?;
        let deshaded = match cfg.deshade {
            DeshadeMode::AnalyticReference(_) | DeshadeMode::External(_) => {
                Some(deshade_albedo(cfg, &geo, &albedo, &obs.rgb, &state.probes, &vis, &mask)?)
            }
            DeshadeMode::Identity | DeshadeMode::AnalyticCurrent => None,
        };
        *cache = Some(Stage3Cache { at: step, vis, deshaded });
    }
    let cache = cache.as_ref().expect("set above");
    let vis = &cache.vis;

    // Route 5: albedo toward its de-shaded version.
    let (clean, confidence) = match &cache.deshaded {
        Some((a, c)) => (a.clone(), c.clone()),
        None => deshade_albedo(cfg, &geo, &albedo, &obs.rgb, &state.probes, vis, &mask)?,
    };
    let confident: Vec<bool> = mask.iter().zip(&confidence).map(|(m, c)| *m && *c > 0.0).collect();
    let la = image_loss(&Image::from_vec3(w, h, &albedo), &Image::from_vec3(w, h, &clean), &confident, wt.w_mse, wt.w_ssim)?;
    let mut albedo_grad = sample_field_backward(&state.albedo_field, gb, frame, &la.grad.data)?;
    for g in &mut albedo_grad {
        *g *= wt.albedo_prior;
    }

    // Route 4: image fit with the de-shaded albedo held fixed.
    let roughness = sample_field(&state.roughness_field, gb, frame)?;
    let inputs = RenderInputs {
        gbuffer: gb,
        x_surf: &geo.x_surf,
        n_surf: &geo.n_surf,
        albedo: &clean,
        roughness: &roughness,
        probes: &state.probes,
        visibility: vis,
        mode: cfg.brdf,
        background: cfg.background,
    };
    let (li, rg) = render_fit(&inputs, &obs.rgb, &mask, cfg)?;
    let (lr, reg_grad) = regularize(&geo, cfg)?;
    let gg = geometry_backward(&geo, state, cfg, &rg.normals, &reg_grad)?;

    let mut grads = Grads::new();
    grads.add(ParamId::AlbedoField, &albedo_grad);
    grads.add(ParamId::RoughnessField, &sample_field_backward(&state.roughness_field, gb, frame, &rg.roughness)?);
    grads.add(ParamId::Probes, &rg.probes);
    grads.add(ParamId::OffsetField, &gg.offset_field);
    grads.add(ParamId::VertexOffsets, &gg.vertex_offsets);
    params.adam_step(&grads)?;
    Ok(wt.albedo_prior * la.value + li + lr)
}

/// Joint refinement: albedo toward its de-shaded version; geometry,
/// roughness and probes through the image loss. The color field is frozen.
pub fn stage3(scene: &Scene, params: &mut ParamSet, cfg: &EngineConfig) -> Result<Vec<EpochLog>> {
    scene.validate()?;
    cfg.weights.validate()?;
    params.train_only(&[
        ParamId::VertexOffsets,
        ParamId::OffsetField,
        ParamId::AlbedoField,
        ParamId::RoughnessField,
        ParamId::Probes,
    ]);
    let samples = scene.samples();
    let mut cache: Vec<Option<Stage3Cache>> = (0..samples.len()).map(|_| None).collect();
    let mut log = Vec::with_capacity(cfg.epochs[2]);
    let mut step = 0;
    for epoch in 0..cfg.epochs[2] {
        let mut total = 0.0;
        for (s, &(view, frame)) in samples.iter().enumerate() {
            total += stage3_step(scene, params, cfg, (view, frame), &mut cache[s], step).map_err(|e| e.in_stage(3, view, frame))?;
            step += 1;
        }
        log.push(EpochLog {
            stage: 3,
            epoch,
            loss: total / samples.len() as f64,
        });
    }
    Ok(log)
}
