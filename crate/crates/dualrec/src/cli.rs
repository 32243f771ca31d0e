//! Command-line interface: dataset generation, training, reconstruction,
//! evaluation, ablation, and a gradient-check suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{orbit_cameras, OrbitSpec};
use crate::config::{load_config, AppConfig};
use crate::diffmath::ops::{
    bilinear_sample_2d, gelu, layer_norm, matmul, mean_all, sigmoid, softmax_lastdim,
    volume_composite,
};
use crate::diffmath::{grad_check, save_tsr, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, run_ablation, EvalConfig};
use crate::fusion::FusionMode;
use crate::imgbuf::ImageBuf;
use crate::nerf::{
    extract_density_grid, save_density_grid, volume_render, RenderConfig, TriplaneField,
};
use crate::scenegen::{list_records, make_record, read_record, sample_scene, write_record, SceneRecord};
use crate::training::{
    checkpoint_config, load_checkpoint, reconstruct, train, ExtrinsicScheme, LoadScope, Model,
    ModelConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "dualrec", version, about = "Dual-view triplane-NeRF reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Preset/config selection shared by several subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset: "desk" or "paper".
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML config file (overrides --preset entirely).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<AppConfig> {
        let cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => AppConfig::preset(&self.preset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of procedural scenes with orbit renders.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of scenes (overrides the config).
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Total optimization steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initialize base weights from this checkpoint (adapters stay fresh).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Update only adapter parameters.
        #[arg(long)]
        adapters_only: bool,
        /// Enable the low-rank adapter branches.
        #[arg(long)]
        lora: bool,
        /// Triplane fusion: add, conv2d, or vpca.
        #[arg(long)]
        fusion: Option<String>,
        /// Camera-conditioning scheme: ff, fb, or bb.
        #[arg(long)]
        scheme: Option<String>,
        /// Feed the front image to both branches (single-view baseline).
        #[arg(long)]
        single_view: bool,
    },
    /// Reconstruct a triplane from a front/back image pair and render a
    /// turntable.
    Reconstruct {
        /// Checkpoint directory holding the trained model.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        front: PathBuf,
        #[arg(long)]
        back: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vpca")]
        fusion: String,
        #[arg(long, default_value = "ff")]
        scheme: String,
        /// Disable the adapter branches at inference.
        #[arg(long)]
        no_lora: bool,
        /// Turntable frame count.
        #[arg(long, default_value_t = 12)]
        frames: usize,
        /// Turntable frame resolution.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Density grid resolution.
        #[arg(long, default_value_t = 32)]
        grid: usize,
    },
    /// Score a trained model on a dataset, per view class.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vpca")]
        fusion: String,
        #[arg(long, default_value = "ff")]
        scheme: String,
        #[arg(long)]
        no_lora: bool,
        /// Render resolution for scoring.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 48)]
        samples: usize,
    },
    /// Train and score every one-factor ablation variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients of the core ops against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parse args and run; maps every failure to its exit code.
pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cfg, scenes, seed } => gen_data(&out, &cfg, scenes, seed),
        Command::Train {
            data,
            out,
            cfg,
            seed,
            steps,
            resume,
            base,
            adapters_only,
            lora,
            fusion,
            scheme,
            single_view,
        } => cmd_train(
            &data, &out, &cfg, seed, steps, resume.as_deref(), base.as_deref(), adapters_only,
            lora, fusion, scheme, single_view,
        ),
        Command::Reconstruct {
            checkpoint,
            front,
            back,
            out,
            fusion,
            scheme,
            no_lora,
            frames,
            resolution,
            grid,
        } => cmd_reconstruct(
            &checkpoint, &front, &back, &out, &fusion, &scheme, !no_lora, frames, resolution, grid,
        ),
        Command::Eval { checkpoint, data, out, fusion, scheme, no_lora, resolution, samples } => {
            cmd_eval(&checkpoint, &data, &out, &fusion, &scheme, !no_lora, resolution, samples)
        }
        Command::Ablate { data, out, cfg, steps, seed } => cmd_ablate(&data, &out, &cfg, steps, seed),
        Command::GradCheck { seed, tolerance } => cmd_grad_check(seed, tolerance),
    }
}

// ------------------------------------------------------------------ gen-data

fn gen_data(out: &Path, cfg: &ConfigArgs, scenes: Option<usize>, seed: u64) -> Result<()> {
    let app = cfg.resolve()?;
    let n = scenes.unwrap_or(app.data.n_scenes);
    if n == 0 {
        return Err(Error::Usage("--scenes must be ≥ 1".into()));
    }
    std::fs::create_dir_all(out)?;
    let orbit = app.data.orbit.to_spec();
    for i in 0..n {
        let scene = sample_scene(seed.wrapping_add(i as u64));
        let record = make_record(&scene, &orbit, app.data.resolution, app.data.gt_samples)?;
        let dir = out.join(format!("scene_{i:04}"));
        write_record(&dir, &record)?;
        println!("wrote {}", dir.display());
    }
    println!("generated {n} scenes at {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ train

fn load_dataset(data: &Path, image_size: usize) -> Result<Vec<SceneRecord>> {
    let dirs = list_records(data)?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no scene records under {}", data.display())));
    }
    dirs.iter()
        .map(|d| {
            let mut r = read_record(d)?;
            for (img, _) in &mut r.views {
                if img.width != image_size {
                    *img = img.resize_square_white(image_size);
                }
            }
            Ok(r)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    cfg: &ConfigArgs,
    seed: Option<u64>,
    steps: Option<usize>,
    resume: Option<&Path>,
    base: Option<&Path>,
    adapters_only: bool,
    lora: bool,
    fusion: Option<String>,
    scheme: Option<String>,
    single_view: bool,
) -> Result<()> {
    let app = cfg.resolve()?;
    let mut tc: TrainConfig = app.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(s) = steps {
        tc.total_steps = s;
        tc.warmup_steps = tc.warmup_steps.min(s);
    }
    if adapters_only {
        tc.adapters_only = true;
    }
    if lora {
        tc.lora_enabled = true;
    }
    if let Some(f) = fusion {
        tc.fusion_mode = f.parse()?;
    }
    if let Some(s) = scheme {
        tc.extrinsic_scheme = s.parse()?;
    }
    if single_view {
        tc.dual_input = false;
    }
    tc.validate()?;
    let records = load_dataset(data, app.model.encoder.image_size)?;
    let model = Model::<f32>::new(app.model)?;
    if let Some(b) = base {
        load_checkpoint(b, &model.params, None, LoadScope::BaseOnly)?;
        println!("loaded base weights from {}", b.display());
    }
    let outcome = train(&model, &records, &tc, Some(out), resume)?;
    println!(
        "trained {} steps, final loss {:.6}; checkpoints under {}",
        outcome.final_step,
        outcome.final_loss,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ reconstruct

fn model_from_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let cfg_json = checkpoint_config(dir)?;
    let model_cfg: ModelConfig = serde_json::from_value(
        cfg_json
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Validation("checkpoint config lacks a model section".into()))?,
    )
    .map_err(|e| Error::Validation(format!("bad model config in checkpoint: {e}")))?;
    let model = Model::new(model_cfg)?;
    load_checkpoint(dir, &model.params, None, LoadScope::Full)?;
    Ok(model)
}

fn load_input_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    Ok(ImageBuf::load_png(path)?.resize_square_white(size).to_tensor())
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    checkpoint: &Path,
    front: &Path,
    back: &Path,
    out: &Path,
    fusion: &str,
    scheme: &str,
    lora: bool,
    frames: usize,
    resolution: usize,
    grid: usize,
) -> Result<()> {
    let mode: FusionMode = fusion.parse()?;
    let scheme: ExtrinsicScheme = scheme.parse()?;
    let model = model_from_checkpoint(checkpoint)?;
    let s = model.cfg.encoder.image_size;
    let front_t = load_input_image(front, s)?;
    let back_t = load_input_image(back, s)?;
    std::fs::create_dir_all(out)?;

    let started = Instant::now();
    let triplane =
        crate::diffmath::no_grad(|| reconstruct(&model, &front_t, &back_t, mode, scheme, lora))?;
    let latency = started.elapsed();
    println!("reconstruction latency: {:.1} ms", latency.as_secs_f64() * 1e3);

    for (name, plane) in ["plane_xy", "plane_yz", "plane_xz"].iter().zip(&triplane.planes) {
        save_tsr(plane, &out.join(format!("{name}.tsr")))?;
    }
    let density = extract_density_grid(&triplane, &model.nerf, grid)?;
    save_density_grid(&out.join("density.tsr"), &density)?;

    let orbit = OrbitSpec {
        n_high: frames,
        n_low: 0,
        elevation_high_deg: 15.0,
        ..OrbitSpec::default()
    };
    let render = RenderConfig { width: resolution, height: resolution, n_samples: 48, stratified: false };
    render.validate()?;
    let field = TriplaneField { triplane: &triplane, mlp: &model.nerf };
    for (i, view) in orbit_cameras(&orbit).iter().enumerate() {
        let img = crate::diffmath::no_grad(|| volume_render(&field, &view.pose, &render, None))?;
        ImageBuf::from_tensor(&img)?.save_png(&out.join(format!("turntable_{i:02}.png")))?;
    }
    println!("wrote triplane, density grid, and {frames} turntable frames to {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ eval

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    fusion: &str,
    scheme: &str,
    lora: bool,
    resolution: usize,
    samples: usize,
) -> Result<()> {
    let model = model_from_checkpoint(checkpoint)?;
    let records = load_dataset(data, model.cfg.encoder.image_size)?;
    let cfg = EvalConfig {
        render: RenderConfig {
            width: resolution,
            height: resolution,
            n_samples: samples,
            stratified: false,
        },
        fusion_mode: fusion.parse()?,
        extrinsic_scheme: scheme.parse()?,
        lora_enabled: lora,
    };
    let report = evaluate(&model, &records, &cfg)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(
        out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Decode(e.to_string()))?,
    )?;
    println!(
        "psnr front {:.2} back {:.2} side {:.2} | ssim overall {:.4} | report: {}",
        report.front.psnr,
        report.back.psnr,
        report.side.psnr,
        report.overall.ssim,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ ablate

fn cmd_ablate(
    data: &Path,
    out: &Path,
    cfg: &ConfigArgs,
    steps: Option<usize>,
    seed: u64,
) -> Result<()> {
    let app = cfg.resolve()?;
    let mut tc = app.train.clone();
    tc.seed = seed;
    if let Some(s) = steps {
        tc.total_steps = s;
        tc.warmup_steps = tc.warmup_steps.min(s);
    }
    tc.validate()?;
    let records = load_dataset(data, app.model.encoder.image_size)?;
    let report = run_ablation::<f32>(&records, app.model, &tc, Some(out))?;
    for cell in &report.cells {
        println!(
            "{}{}={}: psnr {:.2} ssim {:.4}",
            if cell.is_baseline { "*" } else { " " },
            cell.factor,
            cell.value,
            cell.report.overall.psnr,
            cell.report.overall.ssim
        );
    }
    println!("artifacts under {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ grad-check

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Named finite-difference checks over representative op compositions.
pub fn grad_check_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![4, 5], -1.0, 1.0);
    // Fixed weights keep the reduction sensitive to the softmax (a plain
    // mean of softmax rows is constant).
    let w = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.7).sin()).collect())?;
    results.push((
        "matmul+softmax".to_string(),
        grad_check(
            move |xs| {
                let s = softmax_lastdim(&matmul(&xs[0], &xs[1]).unwrap()).unwrap();
                mean_all(&crate::diffmath::ops::mul(&s, &w).unwrap())
            },
            &[a, b],
            1e-5,
        )?,
    ));

    let x = rand_tensor(&mut rng, vec![4, 6], -2.0, 2.0);
    let gain = rand_tensor(&mut rng, vec![6], 0.5, 1.5);
    let bias = rand_tensor(&mut rng, vec![6], -0.5, 0.5);
    results.push((
        "layer_norm".to_string(),
        grad_check(
            |xs| mean_all(&layer_norm(&xs[0], &xs[1], &xs[2], 1e-5).unwrap()),
            &[x, gain, bias],
            1e-5,
        )?,
    ));

    let y = rand_tensor(&mut rng, vec![5, 5], -2.0, 2.0);
    results.push((
        "gelu∘sigmoid".to_string(),
        grad_check(|xs| mean_all(&gelu(&sigmoid(&xs[0]))), &[y], 1e-5)?,
    ));

    let plane = rand_tensor(&mut rng, vec![6, 6, 3], -1.0, 1.0);
    let uv = rand_tensor(&mut rng, vec![8, 2], -0.8, 0.8);
    results.push((
        "bilinear_sample".to_string(),
        grad_check(
            |xs| mean_all(&bilinear_sample_2d(&xs[0], &xs[1]).unwrap()),
            &[plane, uv],
            1e-5,
        )?,
    ));

    let sigma = rand_tensor(&mut rng, vec![2, 7], 0.1, 2.0);
    let rgb = rand_tensor(&mut rng, vec![2, 7, 3], 0.1, 0.9);
    let deltas = std::rc::Rc::new(vec![0.1; 14]);
    results.push((
        "volume_composite".to_string(),
        grad_check(
            move |xs| {
                mean_all(
                    &volume_composite(&xs[0], &xs[1], std::rc::Rc::clone(&deltas), [1.0, 1.0, 1.0])
                        .unwrap(),
                )
            },
            &[sigma, rgb],
            1e-5,
        )?,
    ));

    Ok(results)
}

fn cmd_grad_check(seed: u64, tolerance: f64) -> Result<()> {
    let results = grad_check_suite(seed)?;
    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name:<20} max rel err {err:.3e}");
        worst = worst.max(*err);
    }
    if worst > tolerance {
        return Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {tolerance:.1e}"
        )));
    }
    println!("all {} checks within {tolerance:.1e}", results.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_suite_passes_tight_tolerance() {
        for (name, err) in grad_check_suite(7).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn bad_fusion_name_maps_to_config_exit_code() {
        let e = "wavelet".parse::<FusionMode>().unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
