#![allow(dead_code)]

use std::path::Path;

use relit_harness::config::SceneConfig;
use relit_harness::synth::Recipe;
use relit_harness::ExperimentConfig;

/// Small and quick: 32², two views, a few epochs per stage.
pub fn quick_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene = SceneConfig {
        resolution: 32,
        views: 2,
        ..SceneConfig::default()
    };
    cfg.epochs = [4, 4, 2];
    cfg.metrics.surface_samples = 500;
    cfg.previews = false;
    cfg.threads = Some(1);
    cfg.output = out.to_path_buf();
    cfg
}

pub fn quick_scene(recipe: Recipe, seed: u64) -> SceneConfig {
    SceneConfig {
        recipe,
        resolution: 24,
        views: 2,
        seed,
        ..SceneConfig::default()
    }
}
