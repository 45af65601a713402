//! Experiment configuration: strict JSON with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use relit_core::deshade::NormalPrior;
use relit_core::engine::{DeshadeMode, EngineConfig, LossWeights, ParamId, RegularizerMode};
use relit_core::shade::BrdfMode;

use crate::error::{HarnessError, Result};
use crate::synth::{light_rig, Recipe};

/// The published schema, shipped next to the crate.
pub const SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub recipe: Recipe,
    pub resolution: usize,
    pub views: usize,
    pub frames: usize,
    pub seed: u64,
    /// Peak offset magnitude; recipe default when unset.
    pub displacement: Option<f64>,
    pub lights: usize,
    /// Irradiance each light adds at normal incidence.
    pub light_intensity: f64,
    pub probe_lat: usize,
    pub probe_lon: usize,
    /// Render at twice the probe resolution per axis.
    pub renderer_mismatch: bool,
    pub offset_res: usize,
    pub albedo_res: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            recipe: Recipe::SphereBoxes,
            resolution: 64,
            views: 4,
            frames: 1,
            seed: 0,
            displacement: None,
            lights: 26,
            light_intensity: 0.12,
            probe_lat: 8,
            probe_lon: 16,
            renderer_mismatch: false,
            offset_res: 32,
            albedo_res: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.resolution < 8 || self.views == 0 || self.frames == 0 {
            return bad(format!(
                "scene needs resolution >= 8 and at least one view and frame (got {}, {}, {})",
                self.resolution, self.views, self.frames
            ));
        }
        if self.lights == 0 || !(self.light_intensity > 0.0) {
            return bad("scene needs at least one light with positive intensity".into());
        }
        if self.probe_lat == 0 || self.probe_lon == 0 || self.offset_res < 2 || self.albedo_res < 2 {
            return bad("probe grid and field resolutions must be positive (fields >= 2)".into());
        }
        if self.displacement.is_some_and(|d| !d.is_finite() || d < 0.0) {
            return bad("displacement must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldsConfig {
    pub offset_res: usize,
    pub color_res: usize,
    pub albedo_res: usize,
    pub roughness_res: usize,
}

impl Default for FieldsConfig {
    fn default() -> Self {
        FieldsConfig {
            offset_res: 16,
            color_res: 64,
            albedo_res: 64,
            roughness_res: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbesConfig {
    pub n_lat: usize,
    pub n_lon: usize,
}

impl Default for ProbesConfig {
    fn default() -> Self {
        ProbesConfig { n_lat: 8, n_lon: 16 }
    }
}

/// Initial values of the learnable quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub albedo: f64,
    pub roughness: f64,
    pub color: f64,
    pub probe_radiance: f64,
    /// Copy the color field into the albedo field before stage 2, so the
    /// albedo starts with shading baked in.
    pub albedo_from_color: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            albedo: 0.5,
            roughness: 0.0,
            color: 0.5,
            probe_radiance: 0.1,
            albedo_from_color: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub vertex_offsets: f64,
    pub offset_field: f64,
    pub color_field: f64,
    pub albedo_field: f64,
    pub roughness_field: f64,
    pub probes: f64,
    /// Multiplier on the vertex-offset and offset-field rates in stage 3.
    pub stage3_geometry_scale: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            vertex_offsets: 1e-6,
            offset_field: 1e-3,
            color_field: 1e-2,
            albedo_field: 1e-2,
            roughness_field: 0.0,
            probes: 1e-2,
            stage3_geometry_scale: 0.01,
        }
    }
}

impl LrConfig {
    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::VertexOffsets => self.vertex_offsets,
            ParamId::OffsetField => self.offset_field,
            ParamId::ColorField => self.color_field,
            ParamId::AlbedoField => self.albedo_field,
            ParamId::RoughnessField => self.roughness_field,
            ParamId::Probes => self.probes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub w_mse: f64,
    pub w_ssim: f64,
    pub edge: f64,
    pub normal: f64,
    pub laplacian: f64,
    pub albedo_prior: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsConfig {
            w_mse: w.w_mse,
            w_ssim: w.w_ssim,
            edge: w.edge,
            normal: w.normal,
            laplacian: w.laplacian,
            albedo_prior: w.albedo_prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    Identity,
    GtNoisy { sigma_deg: f64, seed: u64 },
    External { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DeshadeConfig {
    Identity,
    AnalyticCurrent,
    /// Reference rig of the scene's light count on the model probe grid.
    AnalyticReference,
    External { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOptions {
    pub warmup_epochs: usize,
    pub prior_refresh: usize,
    pub k_vis: usize,
    pub tau: f64,
    pub epsilon_scale: f64,
    pub s_floor: f64,
    pub use_o2n: bool,
    pub use_visibility: bool,
    pub regularizer: RegularizerKind,
    /// Target edge length for absolute regularizers; mean rest edge when unset.
    pub edge_target: Option<f64>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineOptions {
            warmup_epochs: e.warmup_epochs,
            prior_refresh: e.prior_refresh,
            k_vis: e.k_vis,
            tau: e.tau,
            epsilon_scale: e.epsilon_scale,
            s_floor: e.s_floor,
            use_o2n: e.use_o2n,
            use_visibility: e.use_visibility,
            regularizer: RegularizerKind::Relative,
            edge_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Surface samples per mesh for chamfer / point-to-surface distances.
    pub surface_samples: usize,
    pub seed: u64,
    /// Subdivision steps applied to base meshes before displacement.
    pub subdivisions: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            surface_samples: 20_000,
            seed: 7,
            subdivisions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    /// Load this dataset directory instead of synthesizing `scene`.
    pub scene_path: Option<PathBuf>,
    /// Subset of 1, 2, 3, run in increasing order.
    pub stages: Vec<u8>,
    pub epochs: [usize; 3],
    pub weights: WeightsConfig,
    pub fields: FieldsConfig,
    pub probes: ProbesConfig,
    pub init: InitConfig,
    pub lr: LrConfig,
    pub brdf: BrdfName,
    pub normal_prior: PriorConfig,
    pub deshade: DeshadeConfig,
    pub engine: EngineOptions,
    pub metrics: MetricsConfig,
    /// Worker threads; `DIS_THREADS` or all cores when unset.
    pub threads: Option<usize>,
    pub output: PathBuf,
    pub checkpoints: bool,
    pub previews: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrdfName {
    Literal,
    Microfacet,
}

impl From<BrdfName> for BrdfMode {
    fn from(b: BrdfName) -> Self {
        match b {
            BrdfName::Literal => BrdfMode::Literal,
            BrdfName::Microfacet => BrdfMode::Microfacet,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            scene_path: None,
            stages: vec![1, 2, 3],
            epochs: EngineConfig::default().epochs,
            weights: WeightsConfig::default(),
            fields: FieldsConfig::default(),
            probes: ProbesConfig::default(),
            init: InitConfig::default(),
            lr: LrConfig::default(),
            brdf: BrdfName::Literal,
            normal_prior: PriorConfig::GtNoisy { sigma_deg: 5.0, seed: 1 },
            deshade: DeshadeConfig::AnalyticReference,
            engine: EngineOptions::default(),
            metrics: MetricsConfig::default(),
            threads: None,
            output: PathBuf::from("runs/default"),
            checkpoints: true,
            previews: true,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Strict deserialization; errors name the offending path.
pub fn from_value(v: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(v).map_err(|e| config_err(format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| config_err(format!("invalid JSON: {e}")))?;
    from_value(v)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: invalid JSON: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    from_value(v)
}

/// Apply `a.b.c=value`. The value is parsed as JSON when possible and kept
/// as a string otherwise. Missing intermediate objects are created, so a
/// misspelled key surfaces as an unknown-field error on parse.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override {assignment:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if !root.is_object() {
        *root = Value::Object(Default::default());
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().expect("checked object");
        let next = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if !next.is_object() {
            *next = Value::Object(Default::default());
        }
        node = next;
    }
    node.as_object_mut().expect("checked object").insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let mut prev = 0;
        for &s in &self.stages {
            if !(1..=3).contains(&s) || s <= prev {
                return Err(config_err(format!("stages must be increasing values in 1..=3, got {:?}", self.stages)));
            }
            prev = s;
        }
        let f = &self.fields;
        if [f.offset_res, f.color_res, f.albedo_res, f.roughness_res].iter().any(|&r| r < 2) {
            return Err(config_err("field resolutions must be >= 2"));
        }
        if self.probes.n_lat == 0 || self.probes.n_lon == 0 {
            return Err(config_err("probe grid must be at least 1x1"));
        }
        let lrs = [
            self.lr.vertex_offsets,
            self.lr.offset_field,
            self.lr.color_field,
            self.lr.albedo_field,
            self.lr.roughness_field,
            self.lr.probes,
            self.lr.stage3_geometry_scale,
        ];
        if lrs.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(config_err("learning rates must be finite and >= 0"));
        }
        let i = &self.init;
        if ![i.albedo, i.roughness, i.color].iter().all(|v| (0.0..=1.0).contains(v)) || !(i.probe_radiance >= 0.0) {
            return Err(config_err("init values: albedo, roughness, color in [0, 1], probe radiance >= 0"));
        }
        if let PriorConfig::GtNoisy { sigma_deg, .. } = self.normal_prior {
            if !(sigma_deg >= 0.0) {
                return Err(config_err("normal_prior.sigma_deg must be >= 0"));
            }
        }
        if self.threads == Some(0) {
            return Err(config_err("threads must be >= 1"));
        }
        if self.metrics.surface_samples == 0 {
            return Err(config_err("metrics.surface_samples must be >= 1"));
        }
        self.engine_config(None)?.weights.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output");
        let text = serde_json::to_string(&v).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn normal_prior(&self) -> NormalPrior {
        match &self.normal_prior {
            PriorConfig::Identity => NormalPrior::Identity,
            PriorConfig::GtNoisy { sigma_deg, seed } => NormalPrior::GtNoisy {
                sigma_deg: *sigma_deg,
                seed: *seed,
            },
            PriorConfig::External { dir } => NormalPrior::External { dir: dir.clone() },
        }
    }

    /// Engine settings; `edge_target` fills in an unset absolute target.
    pub fn engine_config(&self, edge_target: Option<f64>) -> Result<EngineConfig> {
        let e = &self.engine;
        let w = &self.weights;
        let regularizer = match e.regularizer {
            RegularizerKind::Relative => RegularizerMode::Relative,
            RegularizerKind::Absolute => RegularizerMode::Absolute {
                edge_target: e.edge_target.or(edge_target).unwrap_or(0.0),
            },
        };
        let deshade = match &self.deshade {
            DeshadeConfig::Identity => DeshadeMode::Identity,
            DeshadeConfig::AnalyticCurrent => DeshadeMode::AnalyticCurrent,
            DeshadeConfig::AnalyticReference => DeshadeMode::AnalyticReference(light_rig(
                self.probes.n_lat,
                self.probes.n_lon,
                self.scene.lights,
                self.scene.light_intensity,
            )?),
            DeshadeConfig::External { dir } => DeshadeMode::External(dir.clone()),
        };
        Ok(EngineConfig {
            weights: LossWeights {
                w_mse: w.w_mse,
                w_ssim: w.w_ssim,
                edge: w.edge,
                normal: w.normal,
                laplacian: w.laplacian,
                albedo_prior: w.albedo_prior,
            },
            epochs: self.epochs,
            warmup_epochs: e.warmup_epochs,
            prior_refresh: e.prior_refresh,
            k_vis: e.k_vis,
            brdf: self.brdf.into(),
            tau: e.tau,
            epsilon_scale: e.epsilon_scale,
            s_floor: e.s_floor,
            use_o2n: e.use_o2n,
            use_visibility: e.use_visibility,
            regularizer,
            normal_prior: self.normal_prior(),
            deshade,
            background: relit_core::Vec3::zeros(),
        })
    }
}
