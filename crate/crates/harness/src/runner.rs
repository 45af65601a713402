//! Experiment runner: dataset, staged optimization, checkpoints, report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use relit_core::engine::{render_view, stage1, stage2, stage3, EngineConfig, EpochLog, ModelState, ParamId, ParamSet, Scene};
use relit_core::fields::UVField;
use relit_core::geom::{default_max_offset, TriangleMesh, VertexOffsets};
use relit_core::image::Image;
use relit_core::io::{write_normal_png, write_pfm, write_png_preview};
use relit_core::shade::LightProbeSphere;
use relit_core::{Vec2, Vec3};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{evaluate, Metrics};
use crate::synth::{load_dataset, save_dataset, synthesize_scene, SceneDataset};

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub recipe: String,
    pub seed: u64,
    pub views: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub vertices: usize,
    pub faces: usize,
    /// Fraction of pixels covered by the object, over all images.
    pub coverage: f64,
    pub mean_rgb: [f64; 3],
    pub light_probes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 0 for the initial state, otherwise the stage number.
    pub stage: u8,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub dataset_s: f64,
    /// `(stage, seconds)` for each optimization stage run.
    pub stages: Vec<(u8, f64)>,
    pub metrics_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: u32,
    pub config_hash: String,
    pub dataset: DatasetStats,
    /// Initial state followed by one entry per stage run; empty when no
    /// stages were requested.
    pub stages: Vec<StageReport>,
    /// Wall clock; excluded from determinism comparisons.
    pub timing: Timing,
}

impl Report {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.stages.last().map(|s| &s.metrics)
    }

    pub fn stage_metrics(&self, stage: u8) -> Option<&Metrics> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| &s.metrics)
    }

    /// Everything except timing, as canonical JSON.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("timing");
        serde_json::to_string(&v).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let r: Report = serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))?;
        if r.format != REPORT_FORMAT {
            return Err(HarnessError::format(path, format!("unsupported report format {}", r.format)));
        }
        Ok(r)
    }
}

pub fn dataset_stats(ds: &SceneDataset) -> DatasetStats {
    let first = &ds.images[0].rgb;
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut sum = [0.0; 3];
    for im in &ds.images {
        for (p, m) in im.mask_bits().iter().enumerate() {
            total += 1;
            if *m {
                covered += 1;
                let c = im.rgb.vec3(p);
                for k in 0..3 {
                    sum[k] += c[k];
                }
            }
        }
    }
    let n = covered.max(1) as f64;
    DatasetStats {
        recipe: ds.config.recipe.name().to_string(),
        seed: ds.config.seed,
        views: ds.views(),
        frames: ds.frames(),
        width: first.width,
        height: first.height,
        vertices: ds.mesh.vertex_count(),
        faces: ds.mesh.face_count(),
        coverage: covered as f64 / total.max(1) as f64,
        mean_rgb: [sum[0] / n, sum[1] / n, sum[2] / n],
        light_probes: [ds.gt.light.n_lat, ds.gt.light.n_lon],
    }
}

/// Worker count: the config, then `DIS_THREADS`, then rayon's default.
pub fn thread_count(cfg: &ExperimentConfig) -> Result<Option<usize>> {
    if let Some(n) = cfg.threads {
        return Ok(Some(n));
    }
    match std::env::var("DIS_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::Config(format!("DIS_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Run `f` on a pool sized by [`thread_count`].
pub fn with_threads<T: Send>(cfg: &ExperimentConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match thread_count(cfg)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

fn mean_edge_length(mesh: &TriangleMesh) -> f64 {
    let mut sum = 0.0;
    for f in 0..mesh.face_count() {
        let [a, b, c] = mesh.triangle(f);
        sum += (b - a).norm() + (c - b).norm() + (a - c).norm();
    }
    sum / (3 * mesh.face_count()).max(1) as f64
}

pub fn engine_for(cfg: &ExperimentConfig, mesh: &TriangleMesh) -> Result<EngineConfig> {
    cfg.engine_config(Some(mean_edge_length(mesh)))
}

/// Initial model state from the config.
pub fn initial_state(cfg: &ExperimentConfig, mesh: &TriangleMesh) -> Result<ModelState> {
    let f = &cfg.fields;
    let i = &cfg.init;
    let max_offset = default_max_offset(mesh);
    Ok(ModelState {
        vertex_offsets: VertexOffsets::zeros(mesh.vertex_count()),
        offset_field: UVField::new(f.offset_res, f.offset_res, &[0.0], Some((-max_offset, max_offset)), 0)?,
        color_field: UVField::new(f.color_res, f.color_res, &[i.color; 3], Some((0.0, 1.0)), 0)?,
        albedo_field: UVField::new(f.albedo_res, f.albedo_res, &[i.albedo; 3], Some((0.0, 1.0)), 0)?,
        roughness_field: UVField::new(f.roughness_res, f.roughness_res, &[i.roughness], Some((0.0, 1.0)), 0)?,
        probes: LightProbeSphere::uniform(cfg.probes.n_lat, cfg.probes.n_lon, Vec3::repeat(i.probe_radiance))?,
        max_offset,
    })
}

/// Resample the color field onto the albedo grid, baking shading into albedo.
pub fn albedo_from_color(state: &mut ModelState) -> Result<()> {
    let (w, h) = (state.albedo_field.width(), state.albedo_field.height());
    let mut out = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let uv = Vec2::new(x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
            state.color_field.query_into(&uv, 0, &mut out)?;
            let base = state.albedo_field.node_index(0, x, y);
            state.albedo_field.data[base..base + 3].copy_from_slice(&out);
        }
    }
    state.albedo_field.project();
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    max_offset: f64,
    vertex_offsets: Vec<f64>,
    probe_lat: usize,
    probe_lon: usize,
    probe_radiance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: u8,
    /// Optimizer steps taken in this stage.
    pub steps: usize,
    pub config_hash: String,
}

const FIELD_FILES: [&str; 4] = ["offset.field", "color.field", "albedo.field", "roughness.field"];

/// Write a checkpoint directory. Fields use the binary container, scalars
/// and probes a JSON file with exact f64 text; `probes.pfm` is a preview.
pub fn save_checkpoint(dir: &Path, state: &ModelState, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let fields = [&state.offset_field, &state.color_field, &state.albedo_field, &state.roughness_field];
    for (name, field) in FIELD_FILES.iter().zip(fields) {
        field.save(&dir.join(name))?;
    }
    let sf = StateFile {
        max_offset: state.max_offset,
        vertex_offsets: state.vertex_offsets.0.clone(),
        probe_lat: state.probes.n_lat,
        probe_lon: state.probes.n_lon,
        probe_radiance: state.probes.radiance.clone(),
    };
    write_json(&dir.join("state.json"), &sf)?;
    write_pfm(&dir.join("probes.pfm"), &state.probes.to_image())?;
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let sf: StateFile = read_json(&dir.join("state.json"))?;
    let path = dir.join("state.json");
    let mut probes = LightProbeSphere::new(sf.probe_lat, sf.probe_lon)?;
    if sf.probe_radiance.len() != probes.radiance.len() {
        return Err(HarnessError::format(&path, "probe radiance length does not match the grid"));
    }
    probes.radiance = sf.probe_radiance;
    let load = |name: &str| -> Result<UVField> { Ok(UVField::load(&dir.join(name))?) };
    let state = ModelState {
        vertex_offsets: VertexOffsets(sf.vertex_offsets),
        offset_field: load(FIELD_FILES[0])?,
        color_field: load(FIELD_FILES[1])?,
        albedo_field: load(FIELD_FILES[2])?,
        roughness_field: load(FIELD_FILES[3])?,
        probes,
        max_offset: sf.max_offset,
    };
    if state.offset_field.channels() != 1 || state.roughness_field.channels() != 1 || state.color_field.channels() != 3 || state.albedo_field.channels() != 3 {
        return Err(HarnessError::format(dir, "checkpoint fields have unexpected channel counts"));
    }
    Ok((state, manifest))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))
}

/// Preview PNGs of every view at frame 0.
pub fn write_previews(dir: &Path, scene: &Scene, state: &ModelState, engine: &EngineConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for v in 0..scene.views() {
        let r = render_view(scene, state, engine, v, 0, &state.probes)?;
        let gb = &r.geometry.gbuffer;
        write_png_preview(&dir.join(format!("render_v{v:02}.png")), &r.image)?;
        write_png_preview(&dir.join(format!("albedo_v{v:02}.png")), &Image::from_vec3(gb.width, gb.height, &r.albedo))?;
        write_normal_png(&dir.join(format!("normal_v{v:02}.png")), &Image::from_vec3(gb.width, gb.height, &r.geometry.n_surf))?;
    }
    Ok(())
}

fn write_epoch_log(file: &mut fs::File, path: &Path, log: &[EpochLog]) -> Result<()> {
    for e in log {
        let line = serde_json::json!({"stage": e.stage, "epoch": e.epoch, "loss": e.loss});
        writeln!(file, "{line}").map_err(|err| HarnessError::io(path, err))?;
    }
    Ok(())
}

/// Dataset for `cfg`: loaded from `scene_path`, or synthesized, saved under
/// the output directory and reloaded.
pub fn prepare_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<SceneDataset> {
    match &cfg.scene_path {
        Some(p) => load_dataset(p),
        None => {
            let ds = synthesize_scene(&cfg.scene)?;
            let dir = out.join("scene");
            save_dataset(&ds, &dir)?;
            load_dataset(&dir)
        }
    }
}

/// Run the configured stages and write everything under `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    with_threads(cfg, || run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<Report> {
    let t_total = Instant::now();
    let out: PathBuf = cfg.output.clone();
    fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let hash = cfg.hash();

    let t0 = Instant::now();
    let ds = prepare_dataset(cfg, &out)?;
    let dataset_s = t0.elapsed().as_secs_f64();
    let mut report = Report {
        format: REPORT_FORMAT,
        config_hash: hash.clone(),
        dataset: dataset_stats(&ds),
        stages: Vec::new(),
        timing: Timing {
            dataset_s,
            stages: Vec::new(),
            metrics_s: 0.0,
            total_s: 0.0,
        },
    };
    if cfg.stages.is_empty() {
        report.timing.total_s = t_total.elapsed().as_secs_f64();
        report.save(&out.join("report.json"))?;
        return Ok(report);
    }

    let scene = ds.to_scene();
    let engine = engine_for(cfg, &ds.mesh)?;
    let mut params = ParamSet::new(initial_state(cfg, &ds.mesh)?, |id| cfg.lr.get(id));
    let log_path = out.join("epochs.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;

    let t = Instant::now();
    report.stages.push(StageReport {
        stage: 0,
        epochs: 0,
        first_loss: None,
        final_loss: None,
        metrics: evaluate(&ds, &scene, &params.state, &engine, cfg)?,
    });
    report.timing.metrics_s += t.elapsed().as_secs_f64();

    for &stage in &cfg.stages {
        if stage == 2 && cfg.init.albedo_from_color {
            albedo_from_color(&mut params.state)?;
        }
        let scale = if stage == 3 { cfg.lr.stage3_geometry_scale } else { 1.0 };
        for id in [ParamId::VertexOffsets, ParamId::OffsetField] {
            params.set_lr(id, cfg.lr.get(id) * scale);
        }
        let t = Instant::now();
        let log = match stage {
            1 => stage1(&scene, &mut params, &engine)?,
            2 => stage2(&scene, &mut params, &engine)?,
            _ => stage3(&scene, &mut params, &engine)?,
        };
        report.timing.stages.push((stage, t.elapsed().as_secs_f64()));
        write_epoch_log(&mut log_file, &log_path, &log)?;
        if cfg.checkpoints {
            let manifest = CheckpointManifest {
                stage,
                steps: log.len() * scene.samples().len(),
                config_hash: hash.clone(),
            };
            save_checkpoint(&checkpoint_dir(&out, stage), &params.state, &manifest)?;
        }
        let t = Instant::now();
        let metrics = evaluate(&ds, &scene, &params.state, &engine, cfg)?;
        report.timing.metrics_s += t.elapsed().as_secs_f64();
        report.stages.push(StageReport {
            stage,
            epochs: log.len(),
            first_loss: log.first().map(|e| e.loss),
            final_loss: log.last().map(|e| e.loss),
            metrics,
        });
    }
    if cfg.previews {
        write_previews(&out.join("previews"), &scene, &params.state, &engine)?;
    }
    report.timing.total_s = t_total.elapsed().as_secs_f64();
    report.save(&out.join("report.json"))?;
    Ok(report)
}

/// Acceptance thresholds applied by `report --check` to the final metrics.
pub const MIN_ALBEDO_PSNR_ALIGNED: f64 = 30.0;
pub const MIN_RELIGHT_PSNR: f64 = 30.0;
pub const MAX_NORMAL_DEGREE: f64 = 5.0;

/// Threshold violations of the final stage, as readable lines.
pub fn check_thresholds(report: &Report) -> Vec<String> {
    let Some(m) = report.final_metrics().filter(|_| report.stages.len() > 1) else {
        return vec!["report has no optimized stage".to_string()];
    };
    let mut failures = Vec::new();
    if !(m.albedo_psnr_aligned >= MIN_ALBEDO_PSNR_ALIGNED) {
        failures.push(format!("aligned albedo PSNR {:.2} dB < {MIN_ALBEDO_PSNR_ALIGNED}", m.albedo_psnr_aligned));
    }
    if !(m.relight_psnr_aligned >= MIN_RELIGHT_PSNR) {
        failures.push(format!("relighting PSNR {:.2} dB < {MIN_RELIGHT_PSNR}", m.relight_psnr_aligned));
    }
    if !(m.normal_degree <= MAX_NORMAL_DEGREE) {
        failures.push(format!("normal degree {:.2} > {MAX_NORMAL_DEGREE}", m.normal_degree));
    }
    failures
}

/// Run directory layout helpers.
pub fn checkpoint_dir(run: &Path, stage: u8) -> PathBuf {
    run.join(format!("checkpoints/stage{stage}"))
}

/// Latest checkpoint stage present in `run`.
pub fn latest_checkpoint(run: &Path) -> Result<u8> {
    (1..=3)
        .rev()
        .find(|s| checkpoint_dir(run, *s).join("manifest.json").exists())
        .ok_or_else(|| HarnessError::format(run, "no checkpoints found"))
}

/// Config, dataset and scene of a finished run directory.
pub fn open_run(run: &Path) -> Result<(ExperimentConfig, SceneDataset)> {
    let cfg: ExperimentConfig = crate::config::load(&run.join("config.json"), &[])?;
    let ds = match &cfg.scene_path {
        Some(p) => load_dataset(p)?,
        None => load_dataset(&run.join("scene"))?,
    };
    Ok((cfg, ds))
}
