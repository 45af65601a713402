use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relit_core::engine::gradcheck::{gradcheck, OPS};
use relit_core::engine::render_view;
use relit_core::image::Image;
use relit_core::io::{read_pfm, write_normal_png, write_pfm, write_png_preview};
use relit_core::shade::LightProbeSphere;
use relit_harness::config::{self, ExperimentConfig};
use relit_harness::metrics::evaluate;
use relit_harness::runner::{
    check_thresholds, checkpoint_dir, engine_for, latest_checkpoint, load_checkpoint, open_run, run_experiment, with_threads, write_json, Report,
};
use relit_harness::synth::{save_dataset, synthesize_scene};
use relit_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "relit", about = "Surface-detail inverse rendering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set scene.recipe=bumpy_plane`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => config::load(p, &self.overrides),
            None => {
                let mut v = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
                for o in &self.overrides {
                    config::apply_override(&mut v, o)?;
                }
                config::from_value(v)
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment output directory.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint stage; the latest one when omitted.
    #[arg(long)]
    stage: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured stages and write a report.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render every view and frame of a checkpoint under its fitted probes.
    Render {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint under an equirectangular environment map (PFM).
    Relight {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against its dataset.
    Metrics {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference checks of the registered adjoints.
    Gradcheck {
        /// Single op; all registered ops when omitted.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Print a run's report; `--check` fails with exit code 4 below threshold.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

fn render_all(args: &RunArgs, out: &Path, env: Option<&Image>) -> Result<()> {
    let (cfg, ds) = open_run(&args.run)?;
    let stage = args.stage.map_or_else(|| latest_checkpoint(&args.run), Ok)?;
    let (state, _) = load_checkpoint(&checkpoint_dir(&args.run, stage))?;
    let probes = match env {
        Some(img) => LightProbeSphere::from_envmap(state.probes.n_lat, state.probes.n_lon, img)?,
        None => state.probes.clone(),
    };
    let scene = ds.to_scene();
    let engine = engine_for(&cfg, &ds.mesh)?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    with_threads(&cfg, || {
        for f in 0..scene.frames() {
            for v in 0..scene.views() {
                let r = render_view(&scene, &state, &engine, v, f, &probes)?;
                let gb = &r.geometry.gbuffer;
                let stem = format!("v{v:02}_f{f:04}");
                write_pfm(&out.join(format!("rgb_{stem}.pfm")), &r.image)?;
                write_png_preview(&out.join(format!("rgb_{stem}.png")), &r.image)?;
                write_normal_png(&out.join(format!("normal_{stem}.png")), &Image::from_vec3(gb.width, gb.height, &r.geometry.n_surf))?;
            }
        }
        Ok(())
    })
}

fn print_report(r: &Report) {
    let d = &r.dataset;
    println!(
        "{} seed {}: {} views x {} frames at {}x{}, {} vertices, coverage {:.3}",
        d.recipe, d.seed, d.views, d.frames, d.width, d.height, d.vertices, d.coverage
    );
    println!(
        "{:>5} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8} {:>7} {:>9} {:>9} {:>8}",
        "stage", "psnr", "ssim", "alb", "alb_al", "relit", "relit_al", "n_deg", "chamfer", "p2s", "temp_l1"
    );
    for s in &r.stages {
        let m = &s.metrics;
        println!(
            "{:>5} {:>8.2} {:>7.4} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>7.2} {:>9.2e} {:>9.2e} {:>8}",
            s.stage,
            m.psnr,
            m.ssim,
            m.albedo_psnr,
            m.albedo_psnr_aligned,
            m.relight_psnr,
            m.relight_psnr_aligned,
            m.normal_degree,
            m.chamfer,
            m.p2s,
            m.temporal_l1.map_or("-".to_string(), |t| format!("{t:.3}"))
        );
    }
    for (stage, secs) in &r.timing.stages {
        println!("stage {stage}: {secs:.1} s");
    }
    println!("total {:.1} s (metrics {:.1} s)", r.timing.total_s, r.timing.metrics_s);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.load()?;
            let ds = synthesize_scene(&cfg.scene)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} images to {}", ds.images.len(), out.display());
        }
        Command::Fit { config } => {
            let cfg = config.load()?;
            let report = run_experiment(&cfg)?;
            print_report(&report);
        }
        Command::Render { run, out } => render_all(&run, &out, None)?,
        Command::Relight { run, env, out } => {
            let img = read_pfm(&env)?;
            render_all(&run, &out, Some(&img))?;
        }
        Command::Metrics { run } => {
            let (cfg, ds) = open_run(&run.run)?;
            let stage = run.stage.map_or_else(|| latest_checkpoint(&run.run), Ok)?;
            let (state, _) = load_checkpoint(&checkpoint_dir(&run.run, stage))?;
            let engine = engine_for(&cfg, &ds.mesh)?;
            let m = with_threads(&cfg, || evaluate(&ds, &ds.to_scene(), &state, &engine, &cfg))?;
            let path = run.run.join(format!("metrics_stage{stage}.json"));
            write_json(&path, &m)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::Gradcheck { op, seeds, tolerance } => {
            let ops: Vec<String> = match op {
                Some(o) => vec![o],
                None => OPS.iter().map(|(n, _)| n.to_string()).collect(),
            };
            let mut failed = Vec::new();
            for name in &ops {
                let mut worst = 0.0f64;
                let mut ok = true;
                for seed in 0..seeds {
                    let r = gradcheck(name, seed, tolerance)?;
                    worst = worst.max(r.max_rel_err);
                    ok &= r.pass;
                }
                println!("{name:<18} {} max rel err {worst:.2e}", if ok { "pass" } else { "FAIL" });
                if !ok {
                    failed.push(name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(HarnessError::Threshold(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::Report { run, check } => {
            let report = Report::load(&run.join("report.json"))?;
            print_report(&report);
            if check {
                let failures = check_thresholds(&report);
                if !failures.is_empty() {
                    return Err(HarnessError::Threshold(failures.join("; ")));
                }
                println!("all thresholds met");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
