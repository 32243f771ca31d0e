//! Patch-transformer image encoder: linear patch embedding, learned
//! positional embeddings, and pre-norm transformer blocks.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::diffmath::ops::{add, gather_flat};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::nn::{attention, xavier, LayerNorm, Linear, Mlp, ParamSet};
use crate::scalar::Scalar;

/// Encoder shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig { image_size: 64, patch: 8, width: 128, n_blocks: 4, n_heads: 4 }
    }

    pub fn n_tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        Ok(())
    }
}

struct EncoderBlock<T: Scalar> {
    norm1: LayerNorm<T>,
    qkv: Linear<T>,
    proj: Linear<T>,
    norm2: LayerNorm<T>,
    mlp: Mlp<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(ps: &mut ParamSet<T>, prefix: &str, rng: &mut ChaCha8Rng, d: usize) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(ps, &format!("{prefix}.norm1"), d),
            qkv: Linear::new(ps, &format!("{prefix}.qkv"), rng, d, 3 * d),
            proj: Linear::new(ps, &format!("{prefix}.proj"), rng, d, d),
            norm2: LayerNorm::new(ps, &format!("{prefix}.norm2"), d),
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), rng, d, 4 * d),
        }
    }

    fn forward(&self, x: &Tensor<T>, n_heads: usize) -> Result<Tensor<T>> {
        let d = *x.shape().last().unwrap();
        let h = self.norm1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = crate::diffmath::ops::slice_cols(&qkv, 0, d)?;
        let k = crate::diffmath::ops::slice_cols(&qkv, d, 2 * d)?;
        let v = crate::diffmath::ops::slice_cols(&qkv, 2 * d, 3 * d)?;
        let att = self.proj.forward(&attention(&q, &k, &v, n_heads, None)?)?;
        let x = add(x, &att)?;
        add(&x, &self.mlp.forward(&self.norm2.forward(&x)?)?)
    }
}

/// Trainable image encoder producing [N, width] patch tokens.
pub struct Encoder<T: Scalar> {
    pub cfg: EncoderConfig,
    patch_proj: Linear<T>,
    pub pos_emb: Tensor<T>,
    blocks: Vec<EncoderBlock<T>>,
    final_norm: LayerNorm<T>,
    patch_index: Rc<Vec<usize>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let n = cfg.n_tokens();
        let patch_proj = Linear::new(ps, &format!("{prefix}.patch_proj"), rng, patch_dim, d);
        let pos = xavier::<T>(rng, n, d);
        let pos_emb = ps.register(&format!("{prefix}.pos_emb"), pos);
        let blocks = (0..cfg.n_blocks)
            .map(|i| EncoderBlock::new(ps, &format!("{prefix}.block.{i}"), rng, d))
            .collect();
        let final_norm = LayerNorm::new(ps, &format!("{prefix}.final_norm"), d);
        Ok(Encoder {
            patch_index: Rc::new(patch_indices(cfg.image_size, cfg.patch)),
            cfg,
            patch_proj,
            pos_emb,
            blocks,
            final_norm,
        })
    }

    /// Encode an [H, W, 3] image into [N, width] tokens.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Config(format!(
                "encoder expects [{s},{s},3] image, got {:?}",
                image.shape()
            )));
        }
        let n = self.cfg.n_tokens();
        let patch_dim = self.cfg.patch * self.cfg.patch * 3;
        let patches = gather_flat(image, Rc::clone(&self.patch_index), vec![n, patch_dim])?;
        let mut x = add(&self.patch_proj.forward(&patches)?, &self.pos_emb)?;
        for b in &self.blocks {
            x = b.forward(&x, self.cfg.n_heads)?;
        }
        self.final_norm.forward(&x)
    }
}

/// Flat indices regrouping an [S,S,3] image into [(S/p)², p·p·3] patch rows.
fn patch_indices(size: usize, patch: usize) -> Vec<usize> {
    let side = size / patch;
    let mut idx = Vec::with_capacity(size * size * 3);
    for pr in 0..side {
        for pc in 0..side {
            for i in 0..patch {
                for j in 0..patch {
                    let base = ((pr * patch + i) * size + pc * patch + j) * 3;
                    idx.extend([base, base + 1, base + 2]);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { image_size: 8, patch: 4, width: 16, n_blocks: 2, n_heads: 2 }
    }

    fn build(cfg: EncoderConfig) -> (ParamSet<f64>, Encoder<f64>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut ps, "enc", &mut rng, cfg).unwrap();
        (ps, enc)
    }

    fn test_image(size: usize, seed: u64) -> Tensor<f64> {
        let data = (0..size * size * 3)
            .map(|i| (i as f64 + seed as f64 * 13.7).sin() * 0.5 + 0.5)
            .collect();
        Tensor::new(vec![size, size, 3], data).unwrap()
    }

    #[test]
    fn token_count_matches_patch_grid() {
        assert_eq!(EncoderConfig::desk().n_tokens(), 64);
        let (_ps, enc) = build(small_cfg());
        let out = enc.forward(&test_image(8, 0)).unwrap();
        assert_eq!(out.shape(), &[4, 16]);
    }

    #[test]
    fn deterministic_for_identical_images() {
        let (_ps, enc) = build(small_cfg());
        let a = enc.forward(&test_image(8, 5)).unwrap();
        let b = enc.forward(&test_image(8, 5)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let cfg = EncoderConfig { image_size: 10, patch: 4, width: 16, n_blocks: 1, n_heads: 2 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patch_permutation_equivariant_without_pos_emb() {
        let (_ps, enc) = build(small_cfg());
        enc.pos_emb.with_data_mut(|p| p.fill(0.0));
        let img = test_image(8, 9);
        let base = enc.forward(&img).unwrap().to_vec();

        // Swap the first two 4×4 patches of the image (patch grid is 2×2).
        let mut data = img.to_vec();
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    let a = (i * 8 + j) * 3 + c;
                    let b = (i * 8 + j + 4) * 3 + c;
                    data.swap(a, b);
                }
            }
        }
        let swapped = enc.forward(&Tensor::new(vec![8, 8, 3], data).unwrap()).unwrap().to_vec();

        // Token rows 0 and 1 must swap; rows 2 and 3 are untouched.
        let d = 16;
        assert_eq!(&swapped[0..d], &base[d..2 * d]);
        assert_eq!(&swapped[d..2 * d], &base[0..d]);
        assert_eq!(&swapped[2 * d..], &base[2 * d..]);
    }
}
