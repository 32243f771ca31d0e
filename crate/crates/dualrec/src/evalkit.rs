//! Image quality metrics (PSNR, SSIM), per-view-class evaluation, and the
//! one-factor-at-a-time ablation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::imgbuf::ImageBuf;
use crate::nerf::{volume_render, RenderConfig, TriplaneField};
use crate::scalar::Scalar;
use crate::scenegen::SceneRecord;
use crate::training::{reconstruct, train, ExtrinsicScheme, Model, ModelConfig, TrainConfig};

// ------------------------------------------------------------------ metrics

/// Peak signal-to-noise ratio in dB over all RGB channels; +∞ for a perfect
/// match (signal peak 1.0).
pub fn psnr(pred: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension(format!(
            "psnr size mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mse: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn luma(img: &ImageBuf) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64)
        .collect()
}

/// Separable Gaussian filter, valid region only: output is
/// (h−10) × (w−10) for the 11-tap window.
fn gauss_valid(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wv];
    for i in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * src[i * w + j + t];
            }
            rows[i * wv + j] = acc;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[(i + t) * wv + j];
            }
            out[i * wv + j] = acc;
        }
    }
    out
}

/// Mean structural similarity of the luma channels, Gaussian-windowed
/// (11 taps, σ = 1.5), valid-region averaging. Images must be at least
/// 11 pixels on each side.
pub fn ssim(pred: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension(format!(
            "ssim size mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs images at least {SSIM_WINDOW}px per side, got {}x{}",
            pred.width, pred.height
        )));
    }
    let (h, w) = (pred.height, pred.width);
    let x = luma(pred);
    let y = luma(gt);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mu_x = gauss_valid(&x, h, w);
    let mu_y = gauss_valid(&y, h, w);
    let s_xx = gauss_valid(&xx, h, w);
    let s_yy = gauss_valid(&yy, h, w);
    let s_xy = gauss_valid(&xy, h, w);
    let c1 = SSIM_K1 * SSIM_K1; // dynamic range is 1.0
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = s_xx[i] - mx * mx;
        let var_y = s_yy[i] - my * my;
        let cov = s_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

// ------------------------------------------------------------------ evaluation

/// How a held-out view relates to the two inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewClass {
    Front,
    Back,
    Side,
}

pub fn classify_view(record: &SceneRecord, index: usize) -> ViewClass {
    if index == record.front_index {
        ViewClass::Front
    } else if index == record.back_index {
        ViewClass::Back
    } else {
        ViewClass::Side
    }
}

/// Mean metrics for one view class.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub n_views: usize,
}

/// Evaluation summary across all rendered views.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub front: ClassMetrics,
    pub back: ClassMetrics,
    pub side: ClassMetrics,
    pub overall: ClassMetrics,
    /// Learned perceptual metric; no network ships with this crate.
    pub lpips: String,
}

/// Inference settings for evaluation and ablation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub render: RenderConfig,
    pub fusion_mode: FusionMode,
    pub extrinsic_scheme: ExtrinsicScheme,
    pub lora_enabled: bool,
}

struct Accumulator {
    psnr: f64,
    ssim: f64,
    n: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator { psnr: 0.0, ssim: 0.0, n: 0 }
    }
    fn push(&mut self, p: f64, s: f64) {
        self.psnr += p;
        self.ssim += s;
        self.n += 1;
    }
    fn finish(&self) -> ClassMetrics {
        if self.n == 0 {
            ClassMetrics::default()
        } else {
            ClassMetrics { psnr: self.psnr / self.n as f64, ssim: self.ssim / self.n as f64, n_views: self.n }
        }
    }
}

/// Reconstruct each scene from its front/back pair and score every orbit
/// view against ground truth, grouped by view class.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[SceneRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.render.validate()?;
    if records.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene record".into()));
    }
    let mut acc = [Accumulator::new(), Accumulator::new(), Accumulator::new()];
    let mut all = Accumulator::new();
    crate::diffmath::no_grad(|| {
        for record in records {
            let front = record.views[record.front_index].0.to_tensor::<T>();
            let back = record.views[record.back_index].0.to_tensor::<T>();
            let triplane = reconstruct(
                model,
                &front,
                &back,
                cfg.fusion_mode,
                cfg.extrinsic_scheme,
                cfg.lora_enabled,
            )?;
            let field = TriplaneField { triplane: &triplane, mlp: &model.nerf };
            for (i, (gt_img, view)) in record.views.iter().enumerate() {
                let pred_t = volume_render(&field, &view.pose, &cfg.render, None)?;
                let pred = ImageBuf::from_tensor(&pred_t)?;
                let gt = gt_img.resize_square_white(cfg.render.width);
                let p = psnr(&pred, &gt)?;
                let s = ssim(&pred, &gt)?;
                let class = classify_view(record, i);
                acc[class as usize].push(p, s);
                all.push(p, s);
            }
        }
        Ok::<(), Error>(())
    })?;
    Ok(EvalReport {
        front: acc[ViewClass::Front as usize].finish(),
        back: acc[ViewClass::Back as usize].finish(),
        side: acc[ViewClass::Side as usize].finish(),
        overall: all.finish(),
        lpips: "unavailable".into(),
    })
}

// ------------------------------------------------------------------ ablation

/// One trained-and-scored variant in the ablation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub factor: String,
    pub value: String,
    pub is_baseline: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: String,
    pub cells: Vec<AblationCell>,
    pub lpips: String,
}

/// Factor levels swept one at a time around the baseline
/// (fusion = add, rank = 4 from the model config, scheme = ff).
pub const ABLATION_FUSIONS: [FusionMode; 3] =
    [FusionMode::Add, FusionMode::Conv2d, FusionMode::Vpca];
pub const ABLATION_RANKS: [usize; 3] = [2, 4, 8];
pub const ABLATION_SCHEMES: [ExtrinsicScheme; 3] =
    [ExtrinsicScheme::FrontFront, ExtrinsicScheme::FrontBack, ExtrinsicScheme::BackBack];

/// Train and score every one-factor variant. Each cell trains its own model
/// with the same init seed so variants differ only in the swept factor.
/// Writes `ablation.json` and `contact_sheet.png` when `out_dir` is given.
pub fn run_ablation<T: Scalar>(
    records: &[SceneRecord],
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let base_rank = model_cfg.triform.rank;
    let baseline = format!(
        "fusion={} rank={base_rank} scheme={}",
        train_cfg.fusion_mode, train_cfg.extrinsic_scheme
    );
    let mut cells = Vec::new();
    let mut sheet_rows: Vec<(String, ImageBuf, ImageBuf)> = Vec::new();

    let mut run_cell = |factor: &str,
                        value: String,
                        model_cfg: ModelConfig,
                        cell_cfg: TrainConfig,
                        is_baseline: bool|
     -> Result<AblationCell> {
        let model = Model::<T>::new(model_cfg)?;
        train(&model, records, &cell_cfg, None, None)?;
        let eval_cfg = EvalConfig {
            render: RenderConfig { stratified: false, ..cell_cfg.render },
            fusion_mode: cell_cfg.fusion_mode,
            extrinsic_scheme: cell_cfg.extrinsic_scheme,
            lora_enabled: cell_cfg.lora_enabled,
        };
        let report = evaluate(&model, records, &eval_cfg)?;
        let record = &records[0];
        let front = record.views[record.front_index].0.to_tensor::<T>();
        let back = record.views[record.back_index].0.to_tensor::<T>();
        let (f_img, b_img) = crate::diffmath::no_grad(|| {
            let tri = reconstruct(
                &model,
                &front,
                &back,
                eval_cfg.fusion_mode,
                eval_cfg.extrinsic_scheme,
                eval_cfg.lora_enabled,
            )?;
            let field = TriplaneField { triplane: &tri, mlp: &model.nerf };
            let f = volume_render(
                &field,
                &record.views[record.front_index].1.pose,
                &eval_cfg.render,
                None,
            )?;
            let b = volume_render(
                &field,
                &record.views[record.back_index].1.pose,
                &eval_cfg.render,
                None,
            )?;
            Ok::<(ImageBuf, ImageBuf), Error>((
                ImageBuf::from_tensor(&f)?,
                ImageBuf::from_tensor(&b)?,
            ))
        })?;
        sheet_rows.push((format!("{factor}={value}"), f_img, b_img));
        Ok(AblationCell { factor: factor.into(), value, is_baseline, report })
    };

    for mode in ABLATION_FUSIONS {
        let cfg = TrainConfig { fusion_mode: mode, ..train_cfg.clone() };
        let is_base = mode == train_cfg.fusion_mode;
        cells.push(run_cell("fusion", mode.to_string(), model_cfg, cfg, is_base)?);
    }
    for rank in ABLATION_RANKS {
        let mut mc = model_cfg;
        mc.triform.rank = rank;
        let cfg = TrainConfig { lora_enabled: true, ..train_cfg.clone() };
        cells.push(run_cell("rank", rank.to_string(), mc, cfg, rank == base_rank)?);
    }
    for scheme in ABLATION_SCHEMES {
        let cfg = TrainConfig { extrinsic_scheme: scheme, ..train_cfg.clone() };
        let is_base = scheme == train_cfg.extrinsic_scheme;
        cells.push(run_cell("scheme", scheme.to_string(), model_cfg, cfg, is_base)?);
    }

    let report = AblationReport { baseline, cells, lpips: "unavailable".into() };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(&report).map_err(|e| Error::Decode(e.to_string()))?,
        )?;
        contact_sheet(&sheet_rows)?.save_png(&dir.join("contact_sheet.png"))?;
    }
    Ok(report)
}

/// Tile per-cell (front, back) renders into one image: a row per cell,
/// two columns, with a 2px white gutter.
fn contact_sheet(rows: &[(String, ImageBuf, ImageBuf)]) -> Result<ImageBuf> {
    if rows.is_empty() {
        return Err(Error::Usage("contact sheet needs at least one row".into()));
    }
    let tile = rows[0].1.width.max(rows[0].1.height);
    let gutter = 2;
    let w = 2 * tile + 3 * gutter;
    let h = rows.len() * (tile + gutter) + gutter;
    let mut sheet = ImageBuf::filled(w, h, [1.0, 1.0, 1.0]);
    for (r, (_label, front, back)) in rows.iter().enumerate() {
        let y0 = gutter + r * (tile + gutter);
        for (c, img) in [front, back].into_iter().enumerate() {
            let x0 = gutter + c * (tile + gutter);
            for i in 0..img.height.min(tile) {
                for j in 0..img.width.min(tile) {
                    sheet.set_pixel(y0 + i, x0 + j, img.pixel(i, j));
                }
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::OrbitSpec;
    use crate::encoder::EncoderConfig;
    use crate::nerf::NerfConfig;
    use crate::scenegen::{make_record, sample_scene};
    use crate::training::LossWeights;
    use crate::triform::TriformConfig;

    fn flat(v: f32, size: usize) -> ImageBuf {
        ImageBuf::filled(size, size, [v, v, v])
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = flat(0.3, 12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_closed_form_for_constant_offset() {
        // MSE = 0.01 → PSNR = 20 dB.
        let a = flat(0.5, 12);
        let b = flat(0.6, 12);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn ssim_identical_images_score_one() {
        let mut img = ImageBuf::new(16, 16);
        for i in 0..16 {
            for j in 0..16 {
                let v = ((i * 16 + j) as f32 * 0.37).sin() * 0.5 + 0.5;
                img.set_pixel(i, j, [v, v * 0.5, 1.0 - v]);
            }
        }
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // Zero variance ⇒ SSIM = (2ab + C1) / (a² + b² + C1) on luma.
        let (a, b) = (0.2f64, 0.7f64);
        let img_a = flat(a as f32, 16);
        let img_b = flat(b as f32, 16);
        let c1 = 0.01f64 * 0.01;
        // Luma of a gray pixel equals its gray level (coefficients sum to 1),
        // up to f32 quantization.
        let la = 0.2126 * a as f32 as f64 + 0.7152 * a as f32 as f64 + 0.0722 * a as f32 as f64;
        let lb = 0.2126 * b as f32 as f64 + 0.7152 * b as f32 as f64 + 0.0722 * b as f32 as f64;
        let expected = (2.0 * la * lb + c1) / (la * la + lb * lb + c1);
        let s = ssim(&img_a, &img_b).unwrap();
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
    }

    #[test]
    fn ssim_degrades_with_noise() {
        let base = flat(0.5, 16);
        let mut noisy = base.clone();
        for i in 0..16 {
            for j in 0..16 {
                let n = if (i + j) % 2 == 0 { 0.2 } else { -0.2 };
                noisy.set_pixel(i, j, [0.5 + n, 0.5 + n, 0.5 + n]);
            }
        }
        let s = ssim(&base, &noisy).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = flat(0.5, 8);
        assert!(matches!(ssim(&a, &a), Err(Error::Validation(_))));
    }

    #[test]
    fn view_classes_cover_front_back_side() {
        let orbit = OrbitSpec { n_high: 4, n_low: 2, ..OrbitSpec::default() };
        let record = make_record(&sample_scene(0), &orbit, 8, 4).unwrap();
        assert_eq!(classify_view(&record, record.front_index), ViewClass::Front);
        assert_eq!(classify_view(&record, record.back_index), ViewClass::Back);
        let side = (0..record.views.len())
            .find(|&i| i != record.front_index && i != record.back_index)
            .unwrap();
        assert_eq!(classify_view(&record, side), ViewClass::Side);
    }

    fn tiny_setup() -> (ModelConfig, TrainConfig, Vec<SceneRecord>) {
        let model_cfg = ModelConfig {
            encoder: EncoderConfig { image_size: 16, patch: 8, width: 32, n_blocks: 1, n_heads: 2 },
            triform: TriformConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 32,
                d_ctx: 32,
                d_triplane: 8,
                plane_tokens: 4,
                rank: 4,
                cam_dim: 20,
                deconv_channels: 16,
            },
            nerf: NerfConfig { d_in: 8, hidden: 16, n_layers: 2 },
            fusion_window: 4,
            init_seed: 0,
        };
        let train_cfg = TrainConfig {
            weights: LossWeights::default(),
            total_steps: 1,
            warmup_steps: 0,
            checkpoint_every: 1,
            render: RenderConfig { width: 16, height: 16, n_samples: 4, stratified: true },
            ..TrainConfig::desk()
        };
        let orbit = OrbitSpec { n_high: 2, n_low: 2, ..OrbitSpec::default() };
        let records = vec![make_record(&sample_scene(1), &orbit, 16, 4).unwrap()];
        (model_cfg, train_cfg, records)
    }

    #[test]
    fn evaluate_reports_all_classes() {
        let (model_cfg, train_cfg, records) = tiny_setup();
        let model = Model::<f32>::new(model_cfg).unwrap();
        let cfg = EvalConfig {
            render: RenderConfig { stratified: false, ..train_cfg.render },
            fusion_mode: FusionMode::Add,
            extrinsic_scheme: ExtrinsicScheme::FrontFront,
            lora_enabled: false,
        };
        let report = evaluate(&model, &records, &cfg).unwrap();
        assert_eq!(report.front.n_views, 1);
        assert_eq!(report.back.n_views, 1);
        assert_eq!(report.side.n_views, 2);
        assert_eq!(report.overall.n_views, 4);
        assert!(report.overall.psnr.is_finite() && report.overall.psnr > 0.0);
        assert!(report.overall.ssim <= 1.0);
        assert_eq!(report.lpips, "unavailable");
    }

    #[test]
    fn ablation_covers_every_factor_and_writes_artifacts() {
        let (model_cfg, train_cfg, records) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_ablation::<f32>(&records, model_cfg, &train_cfg, Some(dir.path())).unwrap();
        assert_eq!(report.cells.len(), 9);
        for factor in ["fusion", "rank", "scheme"] {
            assert_eq!(report.cells.iter().filter(|c| c.factor == factor).count(), 3);
            assert_eq!(
                report.cells.iter().filter(|c| c.factor == factor && c.is_baseline).count(),
                1,
                "{factor} must have exactly one baseline level"
            );
        }
        assert!(dir.path().join("ablation.json").exists());
        assert!(dir.path().join("contact_sheet.png").exists());
        let text = std::fs::read_to_string(dir.path().join("ablation.json")).unwrap();
        assert!(text.contains("\"lpips\": \"unavailable\""));
    }
}
