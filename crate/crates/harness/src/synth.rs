//! Procedural scenes with known ground truth.
//!
//! Every recipe builds a coarse base mesh with a UV atlas, a ground-truth
//! offset field (surface detail along the base normal), a ground-truth albedo
//! field and a rig of white lights stored as probe impulses. Images are
//! rendered by the same forward model the optimizer uses, with the literal
//! BRDF at roughness 0, so `rgb = albedo ⊙ shading` holds per pixel.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use relit_core::engine::{render_view, EngineConfig, ModelState, Observation, Scene};
use relit_core::fields::UVField;
use relit_core::geom::obj::{format_skin, parse_skin, read_obj, write_obj};
use relit_core::geom::primitives::{box_mesh, grid_plane, uv_sphere};
use relit_core::geom::{default_max_offset, Pose, SkinWeights, TriangleMesh, VertexOffsets};
use relit_core::image::Image;
use relit_core::io::{read_pfm, write_pfm};
use relit_core::raster::Camera;
use relit_core::shade::{shading_image, BrdfMode, LightProbeSphere};
use relit_core::{Mat3, RigidTransform, Vec2, Vec3};

use crate::config::SceneConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    BumpyPlane,
    SphereBoxes,
    RotatingObject,
    ClothedTemplate,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::BumpyPlane => "bumpy_plane",
            Recipe::SphereBoxes => "sphere_boxes",
            Recipe::RotatingObject => "rotating_object",
            Recipe::ClothedTemplate => "clothed_template",
        }
    }

    /// Offset amplitude used when the config leaves it unset.
    pub fn default_displacement(self) -> f64 {
        match self {
            Recipe::BumpyPlane => 0.03,
            Recipe::SphereBoxes | Recipe::RotatingObject => 0.06,
            Recipe::ClothedTemplate => 0.04,
        }
    }
}

/// Ground-truth images of one (view, frame) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImages {
    pub rgb: Image,
    pub normal: Image,
    pub albedo: Image,
    pub shading: Image,
    /// One channel, 0 or 1.
    pub mask: Image,
}

impl FrameImages {
    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.data.iter().map(|v| *v > 0.5).collect()
    }
}

/// Ground-truth model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub offset_field: UVField,
    pub albedo_field: UVField,
    /// Light rig on the grid the images were rendered with.
    pub light: LightProbeSphere,
    /// Held-out environment for relighting, as an equirectangular image.
    pub heldout_env: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub config: SceneConfig,
    /// Rest-pose base mesh (with skin weights for animated recipes).
    pub mesh: TriangleMesh,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    /// Indexed `frame * views + view`.
    pub images: Vec<FrameImages>,
    pub gt: GroundTruth,
}

impl SceneDataset {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn image(&self, view: usize, frame: usize) -> &FrameImages {
        &self.images[frame * self.views() + view]
    }

    /// Optimizer input: rgb, mask and ground-truth normals.
    pub fn to_scene(&self) -> Scene {
        Scene {
            mesh: self.mesh.clone(),
            cameras: self.cameras.clone(),
            poses: self.poses.clone(),
            observations: self
                .images
                .iter()
                .map(|im| Observation {
                    rgb: im.rgb.clone(),
                    mask: im.mask_bits(),
                    normal: Some(im.normal.to_vec3()),
                })
                .collect(),
        }
    }

    /// Probe grid of the rendered images.
    pub fn render_grid(&self) -> (usize, usize) {
        (self.gt.light.n_lat, self.gt.light.n_lon)
    }

    /// Ground-truth model state on the render grid.
    pub fn gt_state(&self) -> Result<ModelState> {
        gt_state(&self.mesh, &self.gt.offset_field, &self.gt.albedo_field, &self.gt.light)
    }

    /// Held-out environment resampled to an `n_lat x n_lon` grid.
    pub fn heldout_probes(&self, n_lat: usize, n_lon: usize) -> Result<LightProbeSphere> {
        Ok(LightProbeSphere::from_envmap(n_lat, n_lon, &self.gt.heldout_env)?)
    }
}

/// Parameters of the ground truth as a model state, so the engine's own
/// renderer produces the images.
pub fn gt_state(mesh: &TriangleMesh, offset: &UVField, albedo: &UVField, light: &LightProbeSphere) -> Result<ModelState> {
    Ok(ModelState {
        vertex_offsets: VertexOffsets::zeros(mesh.vertex_count()),
        offset_field: offset.clone(),
        color_field: UVField::new(2, 2, &[0.0; 3], Some((0.0, 1.0)), 0)?,
        albedo_field: albedo.clone(),
        roughness_field: UVField::new(2, 2, &[0.0], Some((0.0, 1.0)), 0)?,
        probes: light.clone(),
        max_offset: default_max_offset(mesh),
    })
}

/// Engine settings used to render ground truth: literal BRDF, visibility on.
pub fn gt_engine_config() -> EngineConfig {
    EngineConfig {
        brdf: BrdfMode::Literal,
        ..EngineConfig::default()
    }
}

/// The 26 directions toward the faces, edges and corners of a cube.
pub fn cube_rig_directions() -> Vec<Vec3> {
    let mut out = Vec::with_capacity(26);
    for x in -1..=1 {
        for y in -1..=1 {
            for z in -1..=1 {
                if (x, y, z) != (0, 0, 0) {
                    out.push(Vec3::new(x as f64, y as f64, z as f64).normalize());
                }
            }
        }
    }
    out
}

/// `n` near-uniform directions on a Fibonacci spiral.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// White point lights as probe impulses: each light adds irradiance
/// `intensity` at normal incidence to the cell containing its direction.
/// The 26-light rig uses the cube directions, other counts a Fibonacci
/// spiral.
pub fn light_rig(n_lat: usize, n_lon: usize, lights: usize, intensity: f64) -> Result<LightProbeSphere> {
    let mut probes = LightProbeSphere::new(n_lat, n_lon)?;
    let dirs = if lights == 26 { cube_rig_directions() } else { fibonacci_directions(lights) };
    for d in dirs {
        let c = probes.cell_of(&d);
        let add = intensity / probes.solid_angles[c];
        let rgb = probes.radiance_at(c).add_scalar(add);
        probes.set_radiance(c, rgb);
    }
    Ok(probes)
}

/// Procedural sky for relighting: warm sun, blue sky gradient, dim ground.
pub fn heldout_envmap(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4f);
    let sun_phi = rng.random_range(0.0..TAU);
    let sun_theta: f64 = rng.random_range(0.25..0.9);
    let sun = Vec3::new(sun_theta.sin() * sun_phi.cos(), sun_theta.sin() * sun_phi.sin(), sun_theta.cos());
    let mut img = Image::new(width, height, 3);
    for y in 0..height {
        let theta = PI * (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let phi = TAU * (x as f64 + 0.5) / width as f64;
            let d = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let sky = if d.z > 0.0 {
                Vec3::new(0.25, 0.35, 0.6) * (0.6 + 0.4 * d.z)
            } else {
                Vec3::new(0.12, 0.1, 0.08) * (1.0 + d.z * 0.5)
            };
            let s = (d.dot(&sun) - 0.94).max(0.0) / 0.06;
            img.set_vec3(y * width + x, sky + Vec3::new(3.0, 2.6, 2.0) * (s * s));
        }
    }
    img
}

fn node_uv(field: &UVField, x: usize, y: usize) -> Vec2 {
    Vec2::new(x as f64 / (field.width() - 1) as f64, y as f64 / (field.height() - 1) as f64)
}

/// Offset field: random signed Gaussian bumps in uv (plus fold stripes for
/// the clothed template), peak magnitude `amplitude`.
pub fn gt_offset_field(recipe: Recipe, res: usize, amplitude: f64, max_offset: f64, seed: u64) -> Result<UVField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ff5_e7);
    let bumps: Vec<(Vec2, f64, f64)> = (0..40)
        .map(|_| {
            let c = Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let r = rng.random_range(0.05..0.11);
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (c, r, s)
        })
        .collect();
    let mut f = UVField::new(res, res, &[0.0], Some((-max_offset, max_offset)), 0)?;
    let mut raw = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let uv = node_uv(&f, x, y);
            let mut h: f64 = bumps.iter().map(|(c, r, s)| s * (-(uv - c).norm_squared() / (2.0 * r * r)).exp()).sum();
            if recipe == Recipe::ClothedTemplate {
                h += 0.8 * (TAU * 7.0 * uv.y + 2.0 * (TAU * uv.x).sin()).sin();
            }
            raw[y * res + x] = h;
        }
    }
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (d, h) in f.data.iter_mut().zip(&raw) {
        *d = (amplitude * h / peak).clamp(-max_offset, max_offset);
    }
    Ok(f)
}

/// Albedo field: smooth color blend with stripes and soft spots, in [0.1, 0.9].
pub fn gt_albedo_field(res: usize, seed: u64) -> Result<UVField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1bed0);
    let base: Vec<Vec3> = (0..3)
        .map(|_| Vec3::new(rng.random_range(0.2..0.85), rng.random_range(0.2..0.85), rng.random_range(0.2..0.85)))
        .collect();
    let freq = rng.random_range(3.0..5.0);
    let spots: Vec<(Vec2, f64)> = (0..10)
        .map(|_| (Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)), rng.random_range(0.04..0.09)))
        .collect();
    let mut f = UVField::new(res, res, &[0.5; 3], Some((0.0, 1.0)), 0)?;
    for y in 0..res {
        for x in 0..res {
            let uv = node_uv(&f, x, y);
            let t = 0.5 + 0.5 * (TAU * freq * (uv.x + 0.6 * uv.y)).sin();
            let mut c = base[0] * (1.0 - t) + base[1] * t;
            let spot: f64 = spots.iter().map(|(s, r)| (-(uv - s).norm_squared() / (2.0 * r * r)).exp()).sum::<f64>().min(1.0);
            c = c * (1.0 - spot) + base[2] * spot;
            let i = f.node_index(0, x, y);
            for k in 0..3 {
                f.data[i + k] = c[k].clamp(0.1, 0.9);
            }
        }
    }
    Ok(f)
}

fn orbit_cameras(target: Vec3, distance: f64, elevation_deg: f64, fov: f64, views: usize, res: usize, phase: f64) -> Result<Vec<Camera>> {
    let el = elevation_deg.to_radians();
    (0..views)
        .map(|k| {
            let az = phase + TAU * k as f64 / views as f64;
            let eye = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * distance;
            Ok(Camera::look_at(eye, target, Vec3::z(), fov, res, res)?)
        })
        .collect()
}

fn sphere_boxes_mesh() -> Result<TriangleMesh> {
    let sphere = uv_sphere(12, 24, 0.6, Vec3::zeros(), [0.0, 0.0, 0.5, 1.0]);
    let a = box_mesh(Vec3::new(0.95, -0.1, -0.25), Vec3::new(0.3, 0.3, 0.35), [0.5, 0.0, 1.0, 0.5]);
    let b = box_mesh(Vec3::new(-0.75, 0.65, -0.35), Vec3::new(0.25, 0.25, 0.25), [0.5, 0.5, 1.0, 1.0]);
    Ok(TriangleMesh::merge(&[sphere, a, b])?)
}

fn rigid_skin(mesh: TriangleMesh) -> Result<TriangleMesh> {
    let n = mesh.vertex_count();
    let skin = SkinWeights::new(1, vec![1.0; n], n)?;
    Ok(mesh.with_skin(skin)?)
}

/// Torso ellipsoid with two box arms; bone 1 swings the right arm.
fn clothed_mesh() -> Result<TriangleMesh> {
    let torso = uv_sphere(14, 20, 1.0, Vec3::zeros(), [0.0, 0.0, 0.5, 1.0]);
    let scaled: Vec<Vec3> = torso.positions.iter().map(|p| Vec3::new(p.x * 0.45, p.y * 0.32, p.z * 0.85)).collect();
    let torso = torso.with_positions(scaled);
    let left = box_mesh(Vec3::new(-0.58, 0.0, 0.2), Vec3::new(0.1, 0.1, 0.45), [0.5, 0.0, 1.0, 0.5]);
    let right = box_mesh(Vec3::new(0.58, 0.0, 0.2), Vec3::new(0.1, 0.1, 0.45), [0.5, 0.5, 1.0, 1.0]);
    let (nt, nl, nr) = (torso.vertex_count(), left.vertex_count(), right.vertex_count());
    let mesh = TriangleMesh::merge(&[torso, left, right])?;
    let mut w = Vec::with_capacity(2 * mesh.vertex_count());
    for v in 0..nt + nl + nr {
        let arm = if v >= nt + nl { 1.0 } else { 0.0 };
        w.extend([1.0 - arm, arm]);
    }
    let n = mesh.vertex_count();
    Ok(mesh.with_skin(SkinWeights::new(2, w, n)?)?)
}

fn recipe_geometry(cfg: &SceneConfig) -> Result<(TriangleMesh, Vec<Camera>, Vec<Pose>)> {
    let (res, views, frames) = (cfg.resolution, cfg.views, cfg.frames);
    match cfg.recipe {
        Recipe::BumpyPlane => {
            let mesh = grid_plane(8, 8, 2.0);
            let cams = orbit_cameras(Vec3::zeros(), 3.0, 65.0, 40.0, views, res, PI / 4.0)?;
            Ok((mesh, cams, (0..frames).map(Pose::rest).collect()))
        }
        Recipe::SphereBoxes => {
            let cams = orbit_cameras(Vec3::new(0.05, 0.1, -0.05), 3.6, 25.0, 42.0, views, res, 0.3)?;
            Ok((sphere_boxes_mesh()?, cams, (0..frames).map(Pose::rest).collect()))
        }
        Recipe::RotatingObject => {
            let mesh = rigid_skin(sphere_boxes_mesh()?)?;
            let cams = orbit_cameras(Vec3::new(0.05, 0.1, -0.05), 3.6, 25.0, 42.0, views, res, 0.3)?;
            let poses = (0..frames)
                .map(|f| Pose::new(vec![RigidTransform::axis_angle(Vec3::z(), 0.15 * f as f64, Vec3::zeros())], f))
                .collect::<relit_core::Result<Vec<_>>>()?;
            Ok((mesh, cams, poses))
        }
        Recipe::ClothedTemplate => {
            let mesh = clothed_mesh()?;
            let cams = orbit_cameras(Vec3::new(0.0, 0.0, 0.1), 3.2, 15.0, 45.0, views, res, -PI / 2.0)?;
            let shoulder = Vec3::new(0.58, 0.0, 0.6);
            let poses = (0..frames)
                .map(|f| {
                    let r = RigidTransform::axis_angle(Vec3::x(), 0.12 * f as f64, Vec3::zeros());
                    // Rotate about the shoulder: x -> R (x - s) + s.
                    let t = RigidTransform {
                        rotation: r.rotation,
                        translation: shoulder - r.rotation * shoulder,
                    };
                    Pose::new(vec![RigidTransform::identity(), t], f)
                })
                .collect::<relit_core::Result<Vec<_>>>()?;
            Ok((mesh, cams, poses))
        }
    }
}

/// Render every (view, frame) of `mesh` under `state` with the GT settings.
fn render_images(mesh: &TriangleMesh, cameras: &[Camera], poses: &[Pose], state: &ModelState) -> Result<Vec<FrameImages>> {
    let scene = Scene {
        mesh: mesh.clone(),
        cameras: cameras.to_vec(),
        poses: poses.to_vec(),
        observations: Vec::new(),
    };
    let cfg = gt_engine_config();
    let mut out = Vec::with_capacity(cameras.len() * poses.len());
    for f in 0..poses.len() {
        for v in 0..cameras.len() {
            let r = render_view(&scene, state, &cfg, v, f, &state.probes)?;
            let gb = &r.geometry.gbuffer;
            let (w, h) = (gb.width, gb.height);
            let shading = shading_image(gb, &r.geometry.n_surf, &state.probes, &r.visibility)?;
            let normals: Vec<Vec3> = (0..gb.pixel_count())
                .map(|p| if gb.mask[p] { r.geometry.n_surf[p] } else { Vec3::zeros() })
                .collect();
            out.push(FrameImages {
                rgb: r.image,
                normal: Image::from_vec3(w, h, &normals),
                albedo: Image::from_vec3(w, h, &r.albedo),
                shading,
                mask: gb.mask_image(),
            });
        }
    }
    Ok(out)
}

/// Build a dataset in memory. Deterministic in `cfg` (including its seed).
pub fn synthesize_scene(cfg: &SceneConfig) -> Result<SceneDataset> {
    cfg.validate()?;
    let (mesh, cameras, poses) = recipe_geometry(cfg)?;
    let amplitude = cfg.displacement.unwrap_or(cfg.recipe.default_displacement());
    let max_offset = default_max_offset(&mesh);
    let offset_field = gt_offset_field(cfg.recipe, cfg.offset_res, amplitude, max_offset, cfg.seed)?;
    let albedo_field = gt_albedo_field(cfg.albedo_res, cfg.seed)?;
    let scale = if cfg.renderer_mismatch { 2 } else { 1 };
    let light = light_rig(cfg.probe_lat * scale, cfg.probe_lon * scale, cfg.lights, cfg.light_intensity)?;
    let state = gt_state(&mesh, &offset_field, &albedo_field, &light)?;
    let images = render_images(&mesh, &cameras, &poses, &state)?;
    Ok(SceneDataset {
        config: cfg.clone(),
        mesh,
        cameras,
        poses,
        images,
        gt: GroundTruth {
            offset_field,
            albedo_field,
            light,
            heldout_env: heldout_envmap(64, 32, cfg.seed),
        },
    })
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneJson {
    format: u32,
    config: SceneConfig,
    cameras: Vec<CameraJson>,
    /// Per frame, one transform per bone.
    poses: Vec<Vec<TransformJson>>,
}

const FORMAT: u32 = 1;
pub const IMAGE_KINDS: [&str; 5] = ["rgb", "normal", "albedo", "shading", "mask"];

fn rot_to_array(r: &Mat3) -> [f64; 9] {
    let mut a = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            a[3 * i + j] = r[(i, j)];
        }
    }
    a
}

fn transform_to_json(t: &RigidTransform) -> TransformJson {
    TransformJson {
        rotation: rot_to_array(&t.rotation),
        translation: [t.translation.x, t.translation.y, t.translation.z],
    }
}

fn transform_from_json(t: &TransformJson) -> Result<RigidTransform> {
    Ok(RigidTransform::new(Mat3::from_row_slice(&t.rotation), Vec3::from_column_slice(&t.translation))?)
}

pub fn image_path(dir: &Path, kind: &str, view: usize, frame: usize) -> std::path::PathBuf {
    dir.join("images").join(format!("{kind}_v{view:02}_f{frame:04}.pfm"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

pub fn probes_from_image(img: &Image) -> Result<LightProbeSphere> {
    let mut p = LightProbeSphere::new(img.height, img.width)?;
    if img.channels != 3 {
        return Err(HarnessError::Config("probe image must be RGB".into()));
    }
    p.radiance = img.data.clone();
    Ok(p)
}

/// Write the dataset under `dir` (created if needed).
pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| HarnessError::io(&images_dir, e))?;
    let json = SceneJson {
        format: FORMAT,
        config: ds.config.clone(),
        cameras: ds
            .cameras
            .iter()
            .map(|c| CameraJson {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation: rot_to_array(&c.world_to_camera.rotation),
                translation: [c.world_to_camera.translation.x, c.world_to_camera.translation.y, c.world_to_camera.translation.z],
                width: c.width,
                height: c.height,
            })
            .collect(),
        poses: ds.poses.iter().map(|p| p.bone_transforms.iter().map(transform_to_json).collect()).collect(),
    };
    let text = serde_json::to_string_pretty(&json).expect("scene json serializes");
    write_text(&dir.join("scene.json"), &(text + "\n"))?;
    write_obj(&dir.join("base.obj"), &ds.mesh)?;
    if let Some(skin) = &ds.mesh.skin {
        write_text(&dir.join("base.skin"), &format_skin(skin))?;
    }
    ds.gt.offset_field.save(&dir.join("gt_offset.field"))?;
    ds.gt.albedo_field.save(&dir.join("gt_albedo.field"))?;
    write_pfm(&dir.join("gt_light.pfm"), &ds.gt.light.to_image())?;
    write_pfm(&dir.join("heldout_env.pfm"), &ds.gt.heldout_env)?;
    for f in 0..ds.frames() {
        for v in 0..ds.views() {
            let im = ds.image(v, f);
            for (kind, img) in IMAGE_KINDS.iter().zip([&im.rgb, &im.normal, &im.albedo, &im.shading, &im.mask]) {
                write_pfm(&image_path(dir, kind, v, f), img)?;
            }
        }
    }
    Ok(())
}

/// Load a dataset written by [`save_dataset`]. Images come back rounded to
/// f32, as stored.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let scene_path = dir.join("scene.json");
    let json: SceneJson =
        serde_json::from_str(&read_text(&scene_path)?).map_err(|e| HarnessError::format(&scene_path, e.to_string()))?;
    if json.format != FORMAT {
        return Err(HarnessError::format(&scene_path, format!("unsupported format {}", json.format)));
    }
    let mut mesh = read_obj(&dir.join("base.obj"))?;
    let skin_path = dir.join("base.skin");
    if skin_path.exists() {
        let skin = parse_skin(&read_text(&skin_path)?, mesh.vertex_count())?;
        mesh = mesh.with_skin(skin)?;
    }
    let cameras = json
        .cameras
        .iter()
        .map(|c| {
            let t = transform_from_json(&TransformJson {
                rotation: c.rotation,
                translation: c.translation,
            })?;
            Ok(Camera::new(c.fx, c.fy, c.cx, c.cy, t, c.width, c.height)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let poses = json
        .poses
        .iter()
        .enumerate()
        .map(|(f, bones)| {
            let ts = bones.iter().map(transform_from_json).collect::<Result<Vec<_>>>()?;
            Ok(Pose::new(ts, f)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(cameras.len() * poses.len());
    for f in 0..poses.len() {
        for v in 0..cameras.len() {
            let read = |kind: &str| read_pfm(&image_path(dir, kind, v, f));
            images.push(FrameImages {
                rgb: read("rgb")?,
                normal: read("normal")?,
                albedo: read("albedo")?,
                shading: read("shading")?,
                mask: read("mask")?,
            });
        }
    }
    let ds = SceneDataset {
        config: json.config,
        mesh,
        cameras,
        poses,
        images,
        gt: GroundTruth {
            offset_field: UVField::load(&dir.join("gt_offset.field"))?,
            albedo_field: UVField::load(&dir.join("gt_albedo.field"))?,
            light: probes_from_image(&read_pfm(&dir.join("gt_light.pfm"))?)?,
            heldout_env: read_pfm(&dir.join("heldout_env.pfm"))?,
        },
    };
    ds.to_scene().validate()?;
    Ok(ds)
}
