//! Trainable building blocks: parameter registry, linear layers, low-rank
//! adapters, layer norm, multi-head attention, and adaptive modulation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::ops::{
    add, add_bias, add_scalar, concat_cols, gelu, layer_norm, matmul, mul_bcast_row, mul_scalar,
    slice_cols, softmax_lastdim, transpose2d,
};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named parameter registry. Modules register their tensors under dotted
/// names at construction; the optimizer and checkpoints address them by name.
#[derive(Default)]
pub struct ParamSet<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, t: Tensor<T>) -> Tensor<T> {
        assert!(
            self.map.insert(name.to_string(), t.clone()).is_none(),
            "duplicate parameter name {name}"
        );
        t
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Names selected by a predicate, in sorted order.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.map.keys().filter(|k| pred(k)).cloned().collect()
    }
}

/// Uniform Xavier/Glorot init over [-√(6/(fan_in+fan_out)), +…].
pub fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<T> = (0..fan_in * fan_out)
        .map(|_| T::from_f64c(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::param(vec![fan_in, fan_out], data)
}

/// y = xW + b with x: [n, d_in], W: [d_in, d_out].
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: ps.register(&format!("{prefix}.w"), xavier(rng, d_in, d_out)),
            b: ps.register(&format!("{prefix}.b"), Tensor::param(vec![d_out], vec![T::zero(); d_out])),
        }
    }

    /// Same shape, but weight and bias start at zero (identity-free output).
    pub fn new_zeroed(ps: &mut ParamSet<T>, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: ps.register(
                &format!("{prefix}.w"),
                Tensor::param(vec![d_in, d_out], vec![T::zero(); d_in * d_out]),
            ),
            b: ps.register(&format!("{prefix}.b"), Tensor::param(vec![d_out], vec![T::zero(); d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        add_bias(&matmul(x, &self.w)?, &self.b)
    }
}

/// Linear layer with a low-rank residual adapter:
/// y = xW₀ + b + (α/r)·(xA)B. B starts at zero so the adapter is initially
/// inert; `merge` folds the adapter into the base weight.
pub struct LoraLinear<T: Scalar> {
    pub base: Linear<T>,
    pub a: Tensor<T>,
    pub bmat: Tensor<T>,
    pub rank: usize,
    pub alpha: T,
}

impl<T: Scalar> LoraLinear<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        rank: usize,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {rank} must be in 1..={}",
                d_in.min(d_out)
            )));
        }
        let base = Linear::new(ps, prefix, rng, d_in, d_out);
        let a = ps.register(&format!("{prefix}.lora_a"), xavier(rng, d_in, rank));
        let bmat = ps.register(
            &format!("{prefix}.lora_b"),
            Tensor::param(vec![rank, d_out], vec![T::zero(); rank * d_out]),
        );
        Ok(LoraLinear { base, a, bmat, rank, alpha: T::from_usizec(rank) })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, true)
    }

    /// Base path only when `enabled` is false (bitwise-equal to W₀x + b).
    pub fn forward_with(&self, x: &Tensor<T>, enabled: bool) -> Result<Tensor<T>> {
        let base = self.base.forward(x)?;
        if !enabled {
            return Ok(base);
        }
        let low = matmul(&matmul(x, &self.a)?, &self.bmat)?;
        add(&base, &mul_scalar(&low, self.alpha / T::from_usizec(self.rank)))
    }

    /// Fold (α/r)·AB into the base weight and zero the adapter.
    pub fn merge(&self) -> Result<()> {
        let scale = self.alpha / T::from_usizec(self.rank);
        let delta = matmul(&self.a.detach(), &self.bmat.detach())?;
        let dd = delta.to_vec();
        self.base.w.with_data_mut(|w| {
            for (wv, &dv) in w.iter_mut().zip(&dd) {
                *wv += dv * scale;
            }
        });
        self.bmat.with_data_mut(|b| b.fill(T::zero()));
        Ok(())
    }
}

/// Layer norm over the last dimension with learned gain/bias.
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(ps: &mut ParamSet<T>, prefix: &str, d: usize) -> Self {
        LayerNorm {
            gain: ps.register(&format!("{prefix}.gain"), Tensor::param(vec![d], vec![T::one(); d])),
            bias: ps.register(&format!("{prefix}.bias"), Tensor::param(vec![d], vec![T::zero(); d])),
            eps: T::from_f64c(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }
}

/// Scaled dot-product attention over pre-projected q/k/v, split into heads
/// along the channel dimension. `bias` is an optional additive score bias
/// [n_q, n_k] shared across heads (−∞ entries mask keys out).
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = *q.shape().last().ok_or_else(|| Error::Dimension("attention: 0-d q".into()))?;
    if d % n_heads != 0 {
        return Err(Error::Dimension(format!("attention: width {d} not divisible by {n_heads} heads")));
    }
    let hd = d / n_heads;
    let scale = T::one() / T::from_usizec(hd).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * hd, (h + 1) * hd);
        let qh = slice_cols(q, s, e)?;
        let kh = slice_cols(k, s, e)?;
        let vh = slice_cols(v, s, e)?;
        let mut scores = mul_scalar(&matmul(&qh, &transpose2d(&kh)?)?, scale);
        if let Some(b) = bias {
            scores = add(&scores, b)?;
        }
        head_outs.push(matmul(&softmax_lastdim(&scores)?, &vh)?);
    }
    let mut out = head_outs[0].clone();
    for h in &head_outs[1..] {
        out = concat_cols(&out, h)?;
    }
    Ok(out)
}

/// Self-attention with a fused qkv projection. Adapters sit on the qkv input
/// projection and on the output projection.
pub struct SelfAttention<T: Scalar> {
    pub qkv: LoraLinear<T>,
    pub proj: LoraLinear<T>,
    pub n_heads: usize,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        n_heads: usize,
        rank: usize,
    ) -> Result<Self> {
        Ok(SelfAttention {
            qkv: LoraLinear::new(ps, &format!("{prefix}.qkv"), rng, d, 3 * d, rank)?,
            proj: LoraLinear::new(ps, &format!("{prefix}.proj"), rng, d, d, rank)?,
            n_heads,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, lora_enabled: bool) -> Result<Tensor<T>> {
        let d = *x.shape().last().unwrap();
        let qkv = self.qkv.forward_with(x, lora_enabled)?;
        let q = slice_cols(&qkv, 0, d)?;
        let k = slice_cols(&qkv, d, 2 * d)?;
        let v = slice_cols(&qkv, 2 * d, 3 * d)?;
        self.proj.forward_with(&attention(&q, &k, &v, self.n_heads, None)?, lora_enabled)
    }
}

/// Cross-attention from queries `x` to a context sequence. Adapters sit on
/// the separate q/k/v projections and on the output projection.
pub struct CrossAttention<T: Scalar> {
    pub q: LoraLinear<T>,
    pub k: LoraLinear<T>,
    pub v: LoraLinear<T>,
    pub proj: LoraLinear<T>,
    pub n_heads: usize,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        d_ctx: usize,
        n_heads: usize,
        rank: usize,
    ) -> Result<Self> {
        Ok(CrossAttention {
            q: LoraLinear::new(ps, &format!("{prefix}.q"), rng, d, d, rank)?,
            k: LoraLinear::new(ps, &format!("{prefix}.k"), rng, d_ctx, d, rank)?,
            v: LoraLinear::new(ps, &format!("{prefix}.v"), rng, d_ctx, d, rank)?,
            proj: LoraLinear::new(ps, &format!("{prefix}.proj"), rng, d, d, rank)?,
            n_heads,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Tensor<T>, lora_enabled: bool) -> Result<Tensor<T>> {
        let q = self.q.forward_with(x, lora_enabled)?;
        let k = self.k.forward_with(ctx, lora_enabled)?;
        let v = self.v.forward_with(ctx, lora_enabled)?;
        self.proj.forward_with(&attention(&q, &k, &v, self.n_heads, None)?, lora_enabled)
    }
}

/// Two-layer feed-forward block with GELU.
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), rng, d, hidden),
            fc2: Linear::new(ps, &format!("{prefix}.fc2"), rng, hidden, d),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?))
    }
}

/// Adaptive modulation: a camera embedding is mapped through a two-layer MLP
/// to per-slot (scale, shift) pairs. The final layer starts at zero so
/// modulation is initially the identity (x·(1+0) + 0).
pub struct Modulation<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub d_model: usize,
    pub n_slots: usize,
}

impl<T: Scalar> Modulation<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        hidden: usize,
        d_model: usize,
        n_slots: usize,
    ) -> Self {
        Modulation {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), rng, d_in, hidden),
            fc2: Linear::new_zeroed(ps, &format!("{prefix}.fc2"), hidden, 2 * d_model * n_slots),
            d_model,
            n_slots,
        }
    }

    /// (scale, shift) per slot, each [1, d_model].
    pub fn forward(&self, cam: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let h = self.fc2.forward(&gelu(&self.fc1.forward(cam)?))?;
        let d = self.d_model;
        let mut out = Vec::with_capacity(self.n_slots);
        for s in 0..self.n_slots {
            let scale = slice_cols(&h, 2 * s * d, (2 * s + 1) * d)?;
            let shift = slice_cols(&h, (2 * s + 1) * d, (2 * s + 2) * d)?;
            out.push((scale, shift));
        }
        Ok(out)
    }
}

/// x·(1 + scale) + shift, broadcast over rows.
pub fn modulate<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    add_bias(&mul_bcast_row(x, &add_scalar(scale, T::one()))?, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn lora_starts_inert_and_merge_matches() {
        let mut ps = ParamSet::<f64>::new();
        let layer = LoraLinear::new(&mut ps, "l", &mut rng(), 6, 5, 2).unwrap();
        let x = Tensor::<f64>::new(vec![3, 6], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let y0 = layer.forward(&x).unwrap();
        let base = layer.base.forward(&x).unwrap();
        assert_eq!(y0.to_vec(), base.to_vec());

        // Activate the adapter, then check merge reproduces its output.
        layer.bmat.with_data_mut(|b| {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 * 0.31).sin() * 0.2;
            }
        });
        let with_adapter = layer.forward(&x).unwrap().to_vec();
        layer.merge().unwrap();
        let merged = layer.forward(&x).unwrap().to_vec();
        for (a, b) in with_adapter.iter().zip(&merged) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lora_disabled_is_bitwise_base() {
        let mut ps = ParamSet::<f64>::new();
        let layer = LoraLinear::new(&mut ps, "l", &mut rng(), 6, 5, 2).unwrap();
        layer.bmat.with_data_mut(|b| {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 * 0.41).sin();
            }
        });
        let x = Tensor::<f64>::new(vec![2, 6], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let off = layer.forward_with(&x, false).unwrap();
        let base = layer.base.forward(&x).unwrap();
        assert_eq!(off.to_vec(), base.to_vec());
        assert_ne!(layer.forward(&x).unwrap().to_vec(), base.to_vec());
    }

    #[test]
    fn merging_twice_doubles_the_delta() {
        let mut ps = ParamSet::<f64>::new();
        let layer = LoraLinear::new(&mut ps, "l", &mut rng(), 4, 4, 2).unwrap();
        let w0 = layer.base.w.to_vec();
        let bvals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.23).cos()).collect();
        layer.bmat.with_data_mut(|b| b.copy_from_slice(&bvals));
        layer.merge().unwrap();
        let w1 = layer.base.w.to_vec();
        // merge zeroes B; restoring it and merging again stacks a second delta
        layer.bmat.with_data_mut(|b| b.copy_from_slice(&bvals));
        layer.merge().unwrap();
        let w2 = layer.base.w.to_vec();
        for i in 0..w0.len() {
            assert!((w2[i] - w0[i] - 2.0 * (w1[i] - w0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_gradients_check_out() {
        let mut ps = ParamSet::<f64>::new();
        let layer = LoraLinear::new(&mut ps, "l", &mut rng(), 4, 3, 2).unwrap();
        layer.bmat.with_data_mut(|b| {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 * 0.7).cos() * 0.3;
            }
        });
        let x = Tensor::<f64>::param(vec![2, 4], (0..8).map(|i| (i as f64 * 0.9).sin()).collect());
        let inputs = vec![x, layer.a.clone(), layer.bmat.clone(), layer.base.w.clone()];
        let err = grad_check(
            |t| {
                let base = add_bias(&matmul(&t[0], &t[3]).unwrap(), &layer.base.b).unwrap();
                let low = matmul(&matmul(&t[0], &t[1]).unwrap(), &t[2]).unwrap();
                crate::diffmath::ops::mean_all(&add(&base, &low).unwrap())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max grad error {err}");
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        // Identical keys give uniform attention: output = mean of values.
        let q = Tensor::<f64>::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let k = Tensor::<f64>::new(vec![3, 4], vec![0.7; 12]).unwrap();
        let v = Tensor::<f64>::new(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
        let out = attention(&q, &k, &v, 2, None).unwrap();
        for (j, &o) in out.to_vec().iter().enumerate() {
            assert!((o - (4.0 + j as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_mask_excludes_keys() {
        let q = Tensor::<f64>::new(vec![1, 2], vec![0.1, 0.2]).unwrap();
        let k = Tensor::<f64>::new(vec![2, 2], vec![0.5, 0.5, -0.3, 0.9]).unwrap();
        let v = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bias = Tensor::<f64>::new(vec![1, 2], vec![0.0, -1e30]).unwrap();
        let out = attention(&q, &k, &v, 1, Some(&bias)).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn self_attention_gradcheck() {
        let mut ps = ParamSet::<f64>::new();
        let sa = SelfAttention::new(&mut ps, "sa", &mut rng(), 4, 2, 2).unwrap();
        sa.qkv.bmat.with_data_mut(|b| {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 * 0.13).sin() * 0.1;
            }
        });
        let x = Tensor::<f64>::param(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).cos()).collect());
        let inputs = vec![x, sa.qkv.base.w.clone(), sa.proj.base.w.clone(), sa.qkv.bmat.clone()];
        let err = grad_check(
            |t| {
                // Rebuild the forward pass on the probed tensors.
                let d = 4;
                let qkv = add_bias(
                    &add(
                        &matmul(&t[0], &t[1]).unwrap(),
                        &matmul(&matmul(&t[0], &sa.qkv.a).unwrap(), &t[3]).unwrap(),
                    )
                    .unwrap(),
                    &sa.qkv.base.b,
                )
                .unwrap();
                let q = slice_cols(&qkv, 0, d).unwrap();
                let k = slice_cols(&qkv, d, 2 * d).unwrap();
                let v = slice_cols(&qkv, 2 * d, 3 * d).unwrap();
                let att = attention(&q, &k, &v, 2, None).unwrap();
                let out = add_bias(&matmul(&att, &t[2]).unwrap(), &sa.proj.base.b).unwrap();
                crate::diffmath::ops::mean_all(&out)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max grad error {err}");
    }

    #[test]
    fn modulation_starts_as_identity() {
        let mut ps = ParamSet::<f64>::new();
        let m = Modulation::new(&mut ps, "m", &mut rng(), 20, 16, 8, 3);
        let cam = Tensor::<f64>::new(vec![1, 20], (0..20).map(|i| i as f64 * 0.05).collect()).unwrap();
        let slots = m.forward(&cam).unwrap();
        assert_eq!(slots.len(), 3);
        let x = Tensor::<f64>::new(vec![4, 8], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
        for (scale, shift) in &slots {
            let y = modulate(&x, scale, shift).unwrap();
            assert_eq!(y.to_vec(), x.to_vec());
        }
    }

    #[test]
    fn registry_names_are_stable_and_unique() {
        let mut ps = ParamSet::<f64>::new();
        let _ = SelfAttention::new(&mut ps, "dec.0.self_attn", &mut rng(), 8, 2, 2).unwrap();
        let names: Vec<_> = ps.names().map(|s| s.to_string()).collect();
        assert!(names.contains(&"dec.0.self_attn.qkv.lora_a".to_string()));
        assert!(names.contains(&"dec.0.self_attn.proj.lora_b".to_string()));
        let adapters = ps.select(|n| n.contains(".lora_"));
        assert_eq!(adapters.len(), 4);
    }
}
