//! Loss, optimizer, schedule, dual-view reconstruction, the training loop,
//! and checkpointing.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{camera_embedding, canonical_back_pose, canonical_front_pose};
use crate::diffmath::ops::{add, gather_flat, mean_all, mul, mul_scalar, sub, sum_all};
use crate::diffmath::{load_tsr, no_grad, save_tsr, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{flip_triplane_z180, Fusion, FusionMode};
use crate::nerf::{volume_render, NerfConfig, NerfMlp, RenderConfig, TriplaneField};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::scenegen::{augment_back, SceneRecord};
use crate::triform::{Triform, TriformConfig, Triplane};

// ------------------------------------------------------------------ model

/// Shapes of every trainable component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub triform: TriformConfig,
    pub nerf: NerfConfig,
    pub fusion_window: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            triform: TriformConfig::desk(),
            nerf: NerfConfig::desk(),
            fusion_window: 4,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.triform.validate()?;
        let mut bad = Vec::new();
        if self.encoder.width != self.triform.d_ctx {
            bad.push(format!(
                "encoder.width {} != triform.d_ctx {}",
                self.encoder.width, self.triform.d_ctx
            ));
        }
        if self.nerf.d_in != self.triform.d_triplane {
            bad.push(format!(
                "nerf.d_in {} != triform.d_triplane {}",
                self.nerf.d_in, self.triform.d_triplane
            ));
        }
        if self.fusion_window == 0 {
            bad.push("fusion_window must be ≥ 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// The full dual-view reconstruction model with its parameter registry.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder: Encoder<T>,
    pub triform: Triform<T>,
    pub fusion: Fusion<T>,
    pub nerf: NerfMlp<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let encoder = Encoder::new(&mut ps, "encoder", &mut rng, cfg.encoder)?;
        let triform = Triform::new(&mut ps, "triform", &mut rng, cfg.triform)?;
        let fusion =
            Fusion::new(&mut ps, "fusion", &mut rng, cfg.triform.d_triplane, cfg.fusion_window)?;
        let nerf = NerfMlp::new(&mut ps, "nerf", &mut rng, cfg.nerf);
        Ok(Model { cfg, params: ps, encoder, triform, fusion, nerf })
    }

    /// Parameters updated in adapters-only training: low-rank adapter
    /// factors, modulation MLPs, the fusion module, and the field heads.
    /// Everything else is a frozen base weight in that mode.
    pub fn adapter_param_names(&self) -> Vec<String> {
        self.params.select(|n| {
            n.contains(".lora_")
                || n.contains(".mod.")
                || n.starts_with("fusion.")
                || n.starts_with("nerf.sigma_head")
                || n.starts_with("nerf.rgb_head")
        })
    }

    pub fn base_param_names(&self) -> Vec<String> {
        let adapters = self.adapter_param_names();
        self.params.select(|n| !adapters.iter().any(|a| a == n))
    }
}

// ------------------------------------------------------------------ reconstruction

/// Which camera embedding conditions each decode, and whether the back
/// triplane is rotated into the front frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtrinsicScheme {
    /// Both decodes use the front embedding; back triplane is flipped.
    #[serde(rename = "ff")]
    FrontFront,
    /// Back decode uses the back embedding and the flip is skipped
    /// (separate per-view extrinsics, no rotation).
    #[serde(rename = "fb")]
    FrontBack,
    /// Both decodes use the back embedding; the flip is kept.
    #[serde(rename = "bb")]
    BackBack,
}

impl std::str::FromStr for ExtrinsicScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff" => Ok(ExtrinsicScheme::FrontFront),
            "fb" => Ok(ExtrinsicScheme::FrontBack),
            "bb" => Ok(ExtrinsicScheme::BackBack),
            other => Err(Error::Config(format!("unknown extrinsic scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for ExtrinsicScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExtrinsicScheme::FrontFront => "ff",
            ExtrinsicScheme::FrontBack => "fb",
            ExtrinsicScheme::BackBack => "bb",
        })
    }
}

/// Encode both images, decode each into a triplane, rotate the back triplane
/// into the front frame (per scheme), and fuse.
pub fn reconstruct<T: Scalar>(
    model: &Model<T>,
    front: &Tensor<T>,
    back: &Tensor<T>,
    mode: FusionMode,
    scheme: ExtrinsicScheme,
    lora_enabled: bool,
) -> Result<Triplane<T>> {
    let s = model.cfg.encoder.image_size;
    for (name, img) in [("front", front), ("back", back)] {
        if img.shape() != [s, s, 3] {
            return Err(Error::Config(format!(
                "{name} image must be [{s},{s},3], got {:?}",
                img.shape()
            )));
        }
    }
    let tokens_f = model.encoder.forward(front)?;
    let tokens_b = model.encoder.forward(back)?;
    let e_f = camera_embedding::<T>(&canonical_front_pose());
    let e_b = camera_embedding::<T>(&canonical_back_pose());
    let (t_f, t_b) = match scheme {
        ExtrinsicScheme::FrontFront => {
            let t_f = model.triform.decode_view(&tokens_f, &e_f, lora_enabled)?;
            let t_bf = model.triform.decode_view(&tokens_b, &e_f, lora_enabled)?;
            (t_f, flip_triplane_z180(&t_bf)?)
        }
        ExtrinsicScheme::FrontBack => {
            let t_f = model.triform.decode_view(&tokens_f, &e_f, lora_enabled)?;
            let t_b = model.triform.decode_view(&tokens_b, &e_b, lora_enabled)?;
            (t_f, t_b)
        }
        ExtrinsicScheme::BackBack => {
            let t_f = model.triform.decode_view(&tokens_f, &e_b, lora_enabled)?;
            let t_bf = model.triform.decode_view(&tokens_b, &e_b, lora_enabled)?;
            (t_f, flip_triplane_z180(&t_bf)?)
        }
    };
    model.fusion.fuse(mode, &t_f, &t_b)
}

// ------------------------------------------------------------------ loss

/// Optional perceptual-loss plugin (pred, gt) → scalar tensor. None means
/// the perceptual term contributes zero regardless of its weight.
pub type PerceptualFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>>;

/// Per-term loss weights (reconstruction, perceptual, smoothness).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // The perceptual weight defaults to 0 because no perceptual plugin
        // ships; with a plugin registered, 1.0 restores the reference setup.
        LossWeights { mse: 1.0, perceptual: 0.0, tv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.mse < 0.0 || self.perceptual < 0.0 || self.tv < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Mean of squared horizontal and vertical neighbor differences of an
/// [H, W, 3] image (unary total-variation smoothness term).
pub fn tv_loss<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Dimension(format!("tv_loss expects [H,W,3], got {s:?}"))),
    };
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut up = Vec::new();
    let mut down = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let idx = (i * w + j) * 3 + c;
                if j + 1 < w {
                    left.push(idx);
                    right.push(idx + 3);
                }
                if i + 1 < h {
                    up.push(idx);
                    down.push(idx + 3 * w);
                }
            }
        }
    }
    let count = left.len() + up.len();
    if count == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let diff_sq_sum = |a: Vec<usize>, b: Vec<usize>| -> Result<Tensor<T>> {
        let n = a.len();
        if n == 0 {
            return Ok(Tensor::scalar(T::zero()));
        }
        let ta = gather_flat(image, Rc::new(a), vec![n])?;
        let tb = gather_flat(image, Rc::new(b), vec![n])?;
        let d = sub(&ta, &tb)?;
        Ok(sum_all(&mul(&d, &d)?))
    };
    let total = add(&diff_sq_sum(left, right)?, &diff_sq_sum(up, down)?)?;
    Ok(mul_scalar(&total, T::one() / T::from_usizec(count)))
}

/// Weighted per-view loss averaged over views: w.mse·MSE + w.perceptual·P +
/// w.tv·TV(prediction).
pub fn loss<T: Scalar>(
    pred_views: &[Tensor<T>],
    gt_views: &[Tensor<T>],
    weights: &LossWeights,
    perceptual: Option<&PerceptualFn<T>>,
) -> Result<Tensor<T>> {
    weights.validate()?;
    if pred_views.len() != gt_views.len() {
        return Err(Error::Usage(format!(
            "view count mismatch: {} predictions vs {} ground truths",
            pred_views.len(),
            gt_views.len()
        )));
    }
    if pred_views.is_empty() {
        return Err(Error::Usage("loss needs at least one view".into()));
    }
    let mut total = Tensor::scalar(T::zero());
    for (p, g) in pred_views.iter().zip(gt_views) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "view shape mismatch: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let d = sub(p, g)?;
        let mse = mean_all(&mul(&d, &d)?);
        let mut term = mul_scalar(&mse, T::from_f64c(weights.mse));
        if weights.perceptual > 0.0 {
            if let Some(f) = perceptual {
                term = add(&term, &mul_scalar(&f(p, g)?, T::from_f64c(weights.perceptual)))?;
            }
        }
        if weights.tv > 0.0 {
            term = add(&term, &mul_scalar(&tv_loss(p)?, T::from_f64c(weights.tv)))?;
        }
        total = add(&total, &term)?;
    }
    Ok(mul_scalar(&total, T::one() / T::from_usizec(pred_views.len())))
}

// ------------------------------------------------------------------ schedule & optimizer

/// Linear warmup to `base_lr`, then cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    assert!(step <= total, "step {step} past total {total}");
    if warmup > 0 && step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total == warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay and global gradient-norm clipping.
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over `names` using their accumulated gradients; tensors
    /// without a gradient are skipped. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &ParamSet<T>, names: &[String], lr: f64) -> Result<f64> {
        let mut grads: Vec<(&str, &Tensor<T>, Vec<T>)> = Vec::new();
        let mut sq_norm = 0.0f64;
        for name in names {
            let t = params.get(name)?;
            if let Some(g) = t.grad() {
                sq_norm += g.iter().map(|&v| v.to_f64c().powi(2)).sum::<f64>();
                grads.push((name, t, g));
            }
        }
        let norm = sq_norm.sqrt();
        let scale =
            if self.grad_clip > 0.0 && norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let one_m_b1 = T::from_f64c(1.0 - self.beta1);
        let one_m_b2 = T::from_f64c(1.0 - self.beta2);
        let eps = T::from_f64c(self.eps);
        let lr_t = T::from_f64c(lr);
        let wd = T::from_f64c(lr * self.weight_decay);
        let inv_bc1 = T::from_f64c(1.0 / bc1);
        let inv_bc2 = T::from_f64c(1.0 / bc2);
        let scale_t = T::from_f64c(scale);
        for (name, tensor, g) in grads {
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
            if m.len() != g.len() {
                return Err(Error::Validation(format!(
                    "optimizer moment size mismatch for {name}"
                )));
            }
            tensor.with_data_mut(|data| {
                for i in 0..g.len() {
                    let gi = g[i] * scale_t;
                    m[i] = b1 * m[i] + one_m_b1 * gi;
                    v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                    let mhat = m[i] * inv_bc1;
                    let vhat = v[i] * inv_bc2;
                    data[i] = data[i] - lr_t * mhat / (vhat.sqrt() + eps) - wd * data[i];
                }
            });
        }
        Ok(norm)
    }
}

// ------------------------------------------------------------------ hashing

/// SHA-256 of a tensor's values (as little-endian f64), for change detection.
pub fn tensor_hash<T: Scalar>(t: &Tensor<T>) -> String {
    let mut hasher = Sha256::new();
    for v in t.data().iter() {
        hasher.update(v.to_f64c().to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Name → hash for a set of parameters.
pub fn hash_params<T: Scalar>(ps: &ParamSet<T>, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), tensor_hash(ps.get(n)?))))
        .collect()
}

// ------------------------------------------------------------------ checkpointing

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    step: usize,
    optimizer_t: u64,
    tensors: BTreeMap<String, Vec<usize>>,
    moment_names: Vec<String>,
    config: serde_json::Value,
}

fn tensor_file(kind: &str, name: &str) -> String {
    format!("{kind}.{name}.tsr")
}

/// Write all parameters (and optimizer moments, if given) as `.tsr` files
/// plus `manifest.json`. Deterministic: identical state → identical bytes.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    params: &ParamSet<T>,
    optimizer: Option<&AdamW<T>>,
    step: usize,
    config: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in params.iter() {
        tensors.insert(name.to_string(), t.shape().to_vec());
        save_tsr(t, &dir.join(tensor_file("p", name)))?;
    }
    let mut moment_names = Vec::new();
    let mut optimizer_t = 0;
    if let Some(opt) = optimizer {
        optimizer_t = opt.t;
        for (name, m) in &opt.m {
            let shape = vec![m.len()];
            save_tsr(&Tensor::new(shape.clone(), m.clone())?, &dir.join(tensor_file("m", name)))?;
            save_tsr(
                &Tensor::new(shape, opt.v[name].clone())?,
                &dir.join(tensor_file("v", name)),
            )?;
            moment_names.push(name.clone());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        optimizer_t,
        tensors,
        moment_names,
        config,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Decode(e.to_string()))?,
    )?;
    Ok(())
}

/// Read back the config snapshot stored in a checkpoint manifest.
pub fn checkpoint_config(dir: &Path) -> Result<serde_json::Value> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    Ok(manifest.config)
}

/// How much of a checkpoint to restore.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadScope {
    /// Every parameter must exist with a matching shape.
    Full,
    /// Restore only parameters present in BOTH the checkpoint and the model
    /// with matching shapes, skipping adapter tensors (used to seed a model
    /// whose adapter rank differs from the checkpoint's).
    BaseOnly,
}

/// Restore parameters (and optimizer state for `Full` loads) from a
/// checkpoint directory. Returns the saved step counter.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    params: &ParamSet<T>,
    mut optimizer: Option<&mut AdamW<T>>,
    scope: LoadScope,
) -> Result<usize> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    for (name, t) in params.iter() {
        let in_ckpt = manifest.tensors.get(name);
        match (scope, in_ckpt) {
            (LoadScope::Full, None) => {
                return Err(Error::Validation(format!("checkpoint missing parameter {name}")))
            }
            (LoadScope::BaseOnly, None) => continue,
            (LoadScope::BaseOnly, Some(shape))
                if name.contains(".lora_") || shape != &t.shape().to_vec() =>
            {
                continue
            }
            (_, Some(shape)) => {
                if shape != &t.shape().to_vec() {
                    return Err(Error::Validation(format!(
                        "shape mismatch for {name}: checkpoint {shape:?} vs model {:?}",
                        t.shape()
                    )));
                }
                let loaded: Tensor<T> = load_tsr(&dir.join(tensor_file("p", name)))?;
                t.set_data(&loaded.to_vec());
            }
        }
    }
    if scope == LoadScope::Full {
        for name in manifest.tensors.keys() {
            if params.get(name).is_err() {
                return Err(Error::Validation(format!(
                    "checkpoint has unknown parameter {name}"
                )));
            }
        }
        if let Some(opt) = optimizer.as_deref_mut() {
            opt.t = manifest.optimizer_t;
            opt.m.clear();
            opt.v.clear();
            for name in &manifest.moment_names {
                let m: Tensor<T> = load_tsr(&dir.join(tensor_file("m", name)))?;
                let v: Tensor<T> = load_tsr(&dir.join(tensor_file("v", name)))?;
                opt.m.insert(name.clone(), m.to_vec());
                opt.v.insert(name.clone(), v.to_vec());
            }
        }
    }
    Ok(manifest.step)
}

// ------------------------------------------------------------------ training loop

/// Optimization and supervision settings for one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Supervised views per scene: front + back + (V−2) random side views.
    pub views_per_scene: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adapters_only: bool,
    pub lora_enabled: bool,
    pub fusion_mode: FusionMode,
    pub extrinsic_scheme: ExtrinsicScheme,
    /// Back input replaced by the front image when false (single-view mode).
    pub dual_input: bool,
    /// Scene-symmetry augmentation: random RGB channel permutation plus
    /// front/back role swap, both exact symmetries of the scene generator.
    /// Multiplies the effective scene count by 12; best enabled once the
    /// model already conditions on its inputs (it blocks the small-corpus
    /// memorization that bootstraps conditioning early in training).
    #[serde(default)]
    pub symmetry_aug: bool,
    pub seed: u64,
    pub render: RenderConfig,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            views_per_scene: 4,
            lr: 3e-4,
            weight_decay: 0.05,
            grad_clip: 1.0,
            warmup_steps: 10,
            total_steps: 200,
            batch_size: 1,
            adapters_only: false,
            lora_enabled: false,
            fusion_mode: FusionMode::Add,
            extrinsic_scheme: ExtrinsicScheme::FrontFront,
            dual_input: true,
            symmetry_aug: false,
            seed: 0,
            render: RenderConfig { width: 16, height: 16, n_samples: 16, stratified: true },
            checkpoint_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(msg)) = self.weights.validate() {
            bad.push(msg);
        }
        if self.views_per_scene < 2 {
            bad.push(format!("views_per_scene {} must be ≥ 2", self.views_per_scene));
        }
        if self.lr <= 0.0 {
            bad.push(format!("lr {} must be > 0", self.lr));
        }
        if self.total_steps == 0 {
            bad.push("total_steps must be ≥ 1".into());
        }
        if self.warmup_steps > self.total_steps {
            bad.push(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be ≥ 1".into());
        }
        if self.checkpoint_every == 0 {
            bad.push("checkpoint_every must be ≥ 1".into());
        }
        if let Err(Error::Config(msg)) = self.render.validate() {
            bad.push(msg);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Per-step numbers appended to the metrics log.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub probe_psnr: Option<f64>,
}

/// One scene's supervision slice for a step, with the symmetry augmentation
/// already applied: inputs and ground truths are role-resolved and
/// channel-permuted, so the loss only needs poses and images.
struct BatchItem {
    front_image: crate::imgbuf::ImageBuf,
    back_image: crate::imgbuf::ImageBuf,
    /// (render pose, ground-truth image) per supervised view.
    views: Vec<(crate::camera::CameraPose, crate::imgbuf::ImageBuf)>,
}

/// The six permutations of the RGB channels.
const CHANNEL_PERMS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn permute_channels(img: &crate::imgbuf::ImageBuf, perm: &[usize; 3]) -> crate::imgbuf::ImageBuf {
    let mut out = img.clone();
    for (o, p) in out.data.chunks_mut(3).zip(img.data.chunks(3)) {
        for c in 0..3 {
            o[c] = p[perm[c]];
        }
    }
    out
}

/// Scene-symmetry augmentation: the generator draws albedo channels i.i.d.,
/// so permuting RGB consistently across every image of a scene yields an
/// equally likely scene; an even orbit makes the front/back role swap an
/// exact relabeling (supervise pose v against the image of v's opposite).
/// Together they multiply the effective scene count by 12 without
/// synthesizing new images.
fn assemble_batch(
    records: &[SceneRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let record = &records[rng.gen_range(0..records.len())];
        let (perm, swap) = if cfg.symmetry_aug {
            (&CHANNEL_PERMS[rng.gen_range(0..CHANNEL_PERMS.len())], rng.gen_bool(0.5))
        } else {
            (&CHANNEL_PERMS[0], false)
        };
        let orbit_views: Vec<crate::camera::OrbitView> =
            record.views.iter().map(|(_, v)| v.clone()).collect();
        let (front_in, back_in) = if swap {
            (record.back_index, record.front_index)
        } else {
            (record.front_index, record.back_index)
        };
        let front_image = permute_channels(&record.views[front_in].0, perm);
        let back_image = permute_channels(&augment_back(&record.views[back_in].0, rng), perm);
        let mut view_indices = vec![record.front_index, record.back_index];
        let side: Vec<usize> = (0..record.views.len())
            .filter(|&i| i != record.front_index && i != record.back_index)
            .collect();
        for _ in 0..cfg.views_per_scene.saturating_sub(2) {
            view_indices.push(side[rng.gen_range(0..side.len())]);
        }
        let mut views = Vec::with_capacity(view_indices.len());
        for vi in view_indices {
            let gt_index =
                if swap { crate::camera::opposite_view_index(&orbit_views, vi)? } else { vi };
            views.push((
                record.views[vi].1.pose.clone(),
                permute_channels(&record.views[gt_index].0, perm),
            ));
        }
        batch.push(BatchItem { front_image, back_image, views });
    }
    Ok(batch)
}

/// Forward + loss for a batch. Returns the scalar loss tensor.
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for item in batch {
        let front = item.front_image.to_tensor::<T>();
        let back = if cfg.dual_input {
            item.back_image.to_tensor::<T>()
        } else {
            item.front_image.to_tensor::<T>()
        };
        let triplane = reconstruct(
            model,
            &front,
            &back,
            cfg.fusion_mode,
            cfg.extrinsic_scheme,
            cfg.lora_enabled,
        )?;
        let field = TriplaneField { triplane: &triplane, mlp: &model.nerf };
        let mut preds = Vec::with_capacity(item.views.len());
        let mut gts = Vec::with_capacity(item.views.len());
        for (pose, gt_img) in &item.views {
            preds.push(volume_render(&field, pose, &cfg.render, Some(rng))?);
            gts.push(gt_img.resize_square_white(cfg.render.width).to_tensor::<T>());
        }
        total = add(&total, &loss(&preds, &gts, &cfg.weights, None)?)?;
    }
    Ok(mul_scalar(&total, T::one() / T::from_usizec(batch.len())))
}

/// Render the fixed probe (scene 0's back view at eval settings) and return
/// its PSNR against ground truth.
fn probe_psnr<T: Scalar>(model: &Model<T>, records: &[SceneRecord], cfg: &TrainConfig) -> Result<f64> {
    let record = &records[0];
    no_grad(|| {
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
        let eval_render = RenderConfig { stratified: false, ..cfg.render };
        let (img, view) = &record.views[record.back_index];
        let pred = volume_render(&field, &view.pose, &eval_render, None)?;
        let gt = img.resize_square_white(cfg.render.width).to_tensor::<T>();
        let d = sub(&pred, &gt)?;
        let mse = mean_all(&mul(&d, &d)?).item().to_f64c();
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    pub final_step: usize,
    pub final_loss: f64,
    pub metrics: Vec<StepMetrics>,
}

/// Run the optimization loop. `out_dir` (when given) receives periodic
/// checkpoints (`ckpt_{step}/`), a final checkpoint (`ckpt_final/`), and an
/// append-only `metrics.jsonl`. `resume` restores parameters, optimizer
/// state, and the step counter before training continues.
pub fn train<T: Scalar>(
    model: &Model<T>,
    records: &[SceneRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Usage("training needs at least one scene record".into()));
    }
    let trainable: Vec<String> = if cfg.adapters_only {
        model.adapter_param_names()
    } else {
        model.params.names().map(|s| s.to_string()).collect()
    };
    let mut optimizer = AdamW::<T>::new(cfg.weight_decay, cfg.grad_clip);
    let mut start_step = 0;
    if let Some(ckpt) = resume {
        start_step = load_checkpoint(ckpt, &model.params, Some(&mut optimizer), LoadScope::Full)?;
    }
    let config_json = serde_json::json!({
        "train": cfg,
        "model": model.cfg,
    });
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?,
            )
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut final_loss = f64::NAN;
    for step in start_step..cfg.total_steps {
        // Per-step RNG keyed by (seed, step) so resumed runs replay the
        // exact sample stream.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let batch = assemble_batch(records, cfg, &mut rng)?;
        for name in &trainable {
            model.params.get(name)?.zero_grad();
        }
        let loss_t = batch_loss(model, &batch, cfg, &mut rng)?;
        let loss_val = loss_t.item().to_f64c();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} at step {step} (run seed {})",
                cfg.seed,
            )));
        }
        loss_t.backward();
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr, cfg.warmup_steps);
        let grad_norm = optimizer.step(&model.params, &trainable, lr)?;
        final_loss = loss_val;
        let next = step + 1;
        let probe = if next % cfg.checkpoint_every == 0 || next == cfg.total_steps {
            Some(probe_psnr(model, records, cfg)?)
        } else {
            None
        };
        let entry = StepMetrics { step, loss: loss_val, lr, grad_norm, probe_psnr: probe };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).map_err(|e| Error::Decode(e.to_string()))?)?;
        }
        metrics.push(entry);
        if let Some(dir) = out_dir {
            if next % cfg.checkpoint_every == 0 && next != cfg.total_steps {
                save_checkpoint(
                    &dir.join(format!("ckpt_{next}")),
                    &model.params,
                    Some(&optimizer),
                    next,
                    config_json.clone(),
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("ckpt_final"),
            &model.params,
            Some(&optimizer),
            cfg.total_steps,
            config_json,
        )?;
    }
    Ok(TrainOutcome { final_step: cfg.total_steps, final_loss, metrics })
}
