//! Triplane transformer decoder: learned initial tokens refined by
//! self-attention, image cross-attention, camera-conditioned modulation, and
//! a feed-forward block per layer, then upsampled into three feature planes.
//! Low-rank adapters sit on the attention input/output projections so the
//! decoder can be fine-tuned without touching base weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::ops::{add, deconv2d, gather_rows, reshape, transpose2d};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::nn::{
    modulate, CrossAttention, LayerNorm, Linear, Mlp, Modulation, ParamSet, SelfAttention,
};
use crate::scalar::Scalar;

/// Index of the plane spanned by (x, y).
pub const PLANE_XY: usize = 0;
/// Index of the plane spanned by (y, z).
pub const PLANE_YZ: usize = 1;
/// Index of the plane spanned by (x, z).
pub const PLANE_XZ: usize = 2;

/// Three square feature planes of equal shape [H, W, d].
#[derive(Clone)]
pub struct Triplane<T: Scalar> {
    pub planes: [Tensor<T>; 3],
}

impl<T: Scalar> Triplane<T> {
    pub fn new(planes: [Tensor<T>; 3]) -> Result<Self> {
        let s0 = planes[0].shape().to_vec();
        if s0.len() != 3 {
            return Err(Error::Dimension(format!("plane must be [H,W,d], got {s0:?}")));
        }
        for p in &planes[1..] {
            if p.shape() != s0 {
                return Err(Error::Dimension(format!(
                    "plane shape mismatch: {:?} vs {s0:?}",
                    p.shape()
                )));
            }
        }
        Ok(Triplane { planes })
    }

    /// (H, W, d) of every plane.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.planes[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Triplane {
            planes: [
                Tensor::zeros(vec![h, w, d]),
                Tensor::zeros(vec![h, w, d]),
                Tensor::zeros(vec![h, w, d]),
            ],
        }
    }

    /// Detached copy of the raw plane values.
    pub fn detach(&self) -> Self {
        Triplane { planes: [self.planes[0].detach(), self.planes[1].detach(), self.planes[2].detach()] }
    }
}

/// Decoder shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TriformConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ctx: usize,
    pub d_triplane: usize,
    /// Side length of the token grid per plane; planes upsample to 2×.
    pub plane_tokens: usize,
    pub rank: usize,
    pub cam_dim: usize,
    pub deconv_channels: usize,
}

impl TriformConfig {
    pub fn desk() -> Self {
        TriformConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ctx: 128,
            d_triplane: 32,
            plane_tokens: 12,
            rank: 4,
            cam_dim: crate::camera::CAMERA_EMBED_DIM,
            deconv_channels: 64,
        }
    }

    pub fn paper() -> Self {
        TriformConfig {
            n_layers: 16,
            n_heads: 16,
            d_model: 1024,
            d_ctx: 1024,
            d_triplane: 80,
            plane_tokens: 32,
            rank: 4,
            cam_dim: crate::camera::CAMERA_EMBED_DIM,
            deconv_channels: 256,
        }
    }

    /// Output plane side length after 2× upsampling.
    pub fn plane_size(&self) -> usize {
        2 * self.plane_tokens
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.plane_tokens * self.plane_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be ≥ 1".into()));
        }
        Ok(())
    }
}

struct DecoderLayer<T: Scalar> {
    norm1: LayerNorm<T>,
    self_attn: SelfAttention<T>,
    norm2: LayerNorm<T>,
    cross_attn: CrossAttention<T>,
    norm3: LayerNorm<T>,
    mlp: Mlp<T>,
    modulation: Modulation<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn new(ps: &mut ParamSet<T>, prefix: &str, rng: &mut ChaCha8Rng, cfg: &TriformConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(DecoderLayer {
            norm1: LayerNorm::new(ps, &format!("{prefix}.norm1"), d),
            self_attn: SelfAttention::new(
                ps,
                &format!("{prefix}.self_attn"),
                rng,
                d,
                cfg.n_heads,
                cfg.rank,
            )?,
            norm2: LayerNorm::new(ps, &format!("{prefix}.norm2"), d),
            cross_attn: CrossAttention::new(
                ps,
                &format!("{prefix}.cross_attn"),
                rng,
                d,
                cfg.d_ctx,
                cfg.n_heads,
                cfg.rank,
            )?,
            norm3: LayerNorm::new(ps, &format!("{prefix}.norm3"), d),
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), rng, d, 4 * d),
            modulation: Modulation::new(ps, &format!("{prefix}.mod"), rng, cfg.cam_dim, 64, d, 3),
        })
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        ctx: &Tensor<T>,
        cam: &Tensor<T>,
        lora_enabled: bool,
    ) -> Result<Tensor<T>> {
        let slots = self.modulation.forward(cam)?;
        let h = modulate(&self.norm1.forward(x)?, &slots[0].0, &slots[0].1)?;
        let x = add(x, &self.self_attn.forward(&h, lora_enabled)?)?;
        let h = modulate(&self.norm2.forward(&x)?, &slots[1].0, &slots[1].1)?;
        let x = add(&x, &self.cross_attn.forward(&h, ctx, lora_enabled)?)?;
        let h = modulate(&self.norm3.forward(&x)?, &slots[2].0, &slots[2].1)?;
        add(&x, &self.mlp.forward(&h)?)
    }
}

/// The triplane decoder.
pub struct Triform<T: Scalar> {
    pub cfg: TriformConfig,
    pub f_init: Tensor<T>,
    layers: Vec<DecoderLayer<T>>,
    final_norm: LayerNorm<T>,
    deconv_w: Tensor<T>,
    deconv_b: Tensor<T>,
    to_triplane: Linear<T>,
}

impl<T: Scalar> Triform<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: TriformConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let n = cfg.n_tokens();
        let init_data: Vec<T> = (0..n * d)
            .map(|_| T::from_f64c(rng.gen_range(-0.02..0.02)))
            .collect();
        let f_init = ps.register(&format!("{prefix}.f_init"), Tensor::param(vec![n, d], init_data));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(DecoderLayer::new(ps, &format!("{prefix}.layer.{i}"), rng, &cfg)?);
        }
        let final_norm = LayerNorm::new(ps, &format!("{prefix}.final_norm"), d);
        let up = cfg.deconv_channels;
        let limit = (6.0 / (d + up) as f64).sqrt() / 16.0;
        let wdata: Vec<T> = (0..d * up * 16)
            .map(|_| T::from_f64c(rng.gen_range(-limit..limit)))
            .collect();
        let deconv_w =
            ps.register(&format!("{prefix}.deconv.w"), Tensor::param(vec![d, up, 4, 4], wdata));
        let deconv_b =
            ps.register(&format!("{prefix}.deconv.b"), Tensor::param(vec![up], vec![T::zero(); up]));
        let to_triplane = Linear::new(ps, &format!("{prefix}.to_triplane"), rng, up, cfg.d_triplane);
        Ok(Triform { cfg, f_init, layers, final_norm, deconv_w, deconv_b, to_triplane })
    }

    /// Decode one view's image tokens into a triplane. `cam_embed` is the
    /// conditioning camera embedding [1, cam_dim] (front pose for both views
    /// in the standard dual-sided configuration).
    pub fn decode_view(
        &self,
        image_tokens: &Tensor<T>,
        cam_embed: &Tensor<T>,
        lora_enabled: bool,
    ) -> Result<Triplane<T>> {
        if image_tokens.shape().last() != Some(&self.cfg.d_ctx) {
            return Err(Error::Dimension(format!(
                "image tokens must have width {}, got {:?}",
                self.cfg.d_ctx,
                image_tokens.shape()
            )));
        }
        let mut x = self.f_init.clone();
        for layer in &self.layers {
            x = layer.forward(&x, image_tokens, cam_embed, lora_enabled)?;
        }
        x = self.final_norm.forward(&x)?;

        let h = self.cfg.plane_tokens;
        let hw = h * h;
        let up = self.cfg.deconv_channels;
        let mut planes = Vec::with_capacity(3);
        for p in 0..3 {
            let rows: Vec<usize> = (p * hw..(p + 1) * hw).collect();
            let tok = gather_rows(&x, &rows)?;
            let chan_first = reshape(&transpose2d(&tok)?, vec![self.cfg.d_model, h, h])?;
            let upsampled = deconv2d(&chan_first, &self.deconv_w, &self.deconv_b, 2)?;
            let flat = transpose2d(&reshape(&upsampled, vec![up, 4 * hw])?)?;
            let feat = self.to_triplane.forward(&flat)?;
            planes.push(reshape(&feat, vec![2 * h, 2 * h, self.cfg.d_triplane])?);
        }
        Triplane::new([planes.remove(0), planes.remove(0), planes.remove(0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> TriformConfig {
        TriformConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ctx: 12,
            d_triplane: 6,
            plane_tokens: 4,
            rank: 2,
            cam_dim: 20,
            deconv_channels: 8,
        }
    }

    fn build(cfg: TriformConfig) -> (ParamSet<f64>, Triform<f64>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tf = Triform::new(&mut ps, "triform", &mut rng, cfg).unwrap();
        (ps, tf)
    }

    fn tokens(n: usize, d: usize, seed: f64) -> Tensor<f64> {
        Tensor::new(vec![n, d], (0..n * d).map(|i| ((i as f64 + seed) * 0.13).sin()).collect())
            .unwrap()
    }

    fn cam(seed: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 20], (0..20).map(|i| ((i as f64 + seed) * 0.29).cos()).collect())
            .unwrap()
    }

    #[test]
    fn output_plane_shapes_follow_config() {
        assert_eq!(TriformConfig::desk().plane_size(), 24);
        let (_ps, tf) = build(tiny_cfg());
        let t = tf.decode_view(&tokens(5, 12, 0.0), &cam(0.0), true).unwrap();
        assert_eq!(t.dims(), (8, 8, 6));
    }

    #[test]
    fn deterministic_for_identical_inputs() {
        let (_ps, tf) = build(tiny_cfg());
        let a = tf.decode_view(&tokens(5, 12, 3.0), &cam(1.0), true).unwrap();
        let b = tf.decode_view(&tokens(5, 12, 3.0), &cam(1.0), true).unwrap();
        for p in 0..3 {
            assert_eq!(a.planes[p].to_vec(), b.planes[p].to_vec());
        }
    }

    #[test]
    fn zero_adapters_make_lora_flag_irrelevant() {
        // All adapter B matrices start at zero, so the adapted and base
        // forward paths coincide bitwise.
        let (_ps, tf) = build(tiny_cfg());
        let on = tf.decode_view(&tokens(5, 12, 7.0), &cam(2.0), true).unwrap();
        let off = tf.decode_view(&tokens(5, 12, 7.0), &cam(2.0), false).unwrap();
        for p in 0..3 {
            assert_eq!(on.planes[p].to_vec(), off.planes[p].to_vec());
        }
    }

    #[test]
    fn activated_adapters_change_only_the_enabled_path() {
        let (ps, tf) = build(tiny_cfg());
        for name in ps.select(|n| n.ends_with(".lora_b")) {
            ps.get(&name).unwrap().with_data_mut(|b| {
                for (i, v) in b.iter_mut().enumerate() {
                    *v = (i as f64 * 0.37).sin() * 0.1;
                }
            });
        }
        let base = tf.decode_view(&tokens(5, 12, 7.0), &cam(2.0), false).unwrap();
        let adapted = tf.decode_view(&tokens(5, 12, 7.0), &cam(2.0), true).unwrap();
        assert_ne!(base.planes[0].to_vec(), adapted.planes[0].to_vec());
    }

    #[test]
    fn zeroed_sublayer_outputs_make_layers_identity() {
        let (ps, tf) = build(tiny_cfg());
        for name in ps.select(|n| {
            (n.contains(".self_attn.proj.") || n.contains(".cross_attn.proj.") || n.contains(".mlp.fc2."))
                && !n.contains("lora_a")
        }) {
            ps.get(&name).unwrap().with_data_mut(|w| w.fill(0.0));
        }
        let ctx = tokens(5, 12, 1.0);
        let c = cam(0.0);
        let x = tokens(48, 16, 2.0);
        let y = tf.layers[0].forward(&x, &ctx, &c, true).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn camera_embedding_modulates_output() {
        let (ps, tf) = build(tiny_cfg());
        // The modulation head starts at zero; give it weight so the camera
        // conditioning is active.
        for name in ps.select(|n| n.contains(".mod.fc2.w")) {
            ps.get(&name).unwrap().with_data_mut(|w| {
                for (i, v) in w.iter_mut().enumerate() {
                    *v = (i as f64 * 0.11).sin() * 0.05;
                }
            });
        }
        let a = tf.decode_view(&tokens(5, 12, 0.0), &cam(0.0), true).unwrap();
        let b = tf.decode_view(&tokens(5, 12, 0.0), &cam(9.0), true).unwrap();
        let da: f64 = a.planes[0]
            .to_vec()
            .iter()
            .zip(b.planes[0].to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(da > 1e-6, "camera embedding had no effect");
    }

    #[test]
    fn base_and_adapter_parameters_are_disjoint() {
        let (ps, _tf) = build(tiny_cfg());
        let adapters = ps.select(|n| n.contains(".lora_"));
        let base = ps.select(|n| !n.contains(".lora_"));
        assert!(!adapters.is_empty());
        for a in &adapters {
            assert!(!base.contains(a));
        }
        assert_eq!(adapters.len() + base.len(), ps.len());
    }
}
