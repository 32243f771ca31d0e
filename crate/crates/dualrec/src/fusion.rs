//! Back-to-front triplane alignment and fusion: a 180° rotation about the
//! z-axis expressed as a plane index permutation, plus three interchangeable
//! fusion operators (windowed cross-attention, mean, convolution).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::ops::{
    add, concat_rows, conv2d, gather_flat, gather_rows, gelu, mul_scalar, reshape, transpose2d,
};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::nn::{attention, xavier, LayerNorm, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::triform::Triplane;

/// Fusion operator selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Windowed viewpoint cross-attention (front queries, back keys/values).
    Vpca,
    /// Elementwise mean of the two triplanes.
    Add,
    /// Channel-concatenation followed by a small conv stack, residual to front.
    Conv2d,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vpca" => Ok(FusionMode::Vpca),
            "add" => Ok(FusionMode::Add),
            "conv2d" => Ok(FusionMode::Conv2d),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Vpca => "vpca",
            FusionMode::Add => "add",
            FusionMode::Conv2d => "conv2d",
        })
    }
}

/// Pull a triplane through the rigid map R_z(180°): (x,y,z) → (−x,−y,z).
///
/// With planes indexed (x,y), (y,z), (x,z) on their (row, col) axes, the XY
/// plane reverses both axes and the YZ/XZ planes reverse their row axis.
/// Pure index permutation — exactly invertible.
pub fn flip_triplane_z180<T: Scalar>(t: &Triplane<T>) -> Result<Triplane<T>> {
    let (h, w, d) = t.dims();
    let perm = |rev_cols: bool| -> Rc<Vec<usize>> {
        let mut idx = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                let sj = if rev_cols { w - 1 - j } else { j };
                let base = ((h - 1 - i) * w + sj) * d;
                idx.extend(base..base + d);
            }
        }
        Rc::new(idx)
    };
    let shape = vec![h, w, d];
    Triplane::new([
        gather_flat(&t.planes[0], perm(true), shape.clone())?,
        gather_flat(&t.planes[1], perm(false), shape.clone())?,
        gather_flat(&t.planes[2], perm(false), shape)?,
    ])
}

/// Elementwise mean of the two triplanes.
pub fn fuse_add<T: Scalar>(t_f: &Triplane<T>, t_b: &Triplane<T>) -> Result<Triplane<T>> {
    if t_f.dims() != t_b.dims() {
        return Err(Error::Dimension("fuse_add: triplane shape mismatch".into()));
    }
    let half = T::from_f64c(0.5);
    Triplane::new([
        mul_scalar(&add(&t_f.planes[0], &t_b.planes[0])?, half),
        mul_scalar(&add(&t_f.planes[1], &t_b.planes[1])?, half),
        mul_scalar(&add(&t_f.planes[2], &t_b.planes[2])?, half),
    ])
}

/// Windowed cross-attention fusion: per plane, the grid is tiled into
/// window×window blocks (overhanging tiles are clipped — replicated padding
/// keys would be fully masked out, so they are never materialized); within a
/// tile, queries come from the front plane and keys/values from the
/// co-located back tile. Single head, learned q/k/v/output projections,
/// residual to the front plane, then layer norm.
pub struct VpcaFusion<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
    pub window: usize,
}

impl<T: Scalar> VpcaFusion<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        window: usize,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("fusion window must be ≥ 1".into()));
        }
        Ok(VpcaFusion {
            q: Linear::new(ps, &format!("{prefix}.q"), rng, d, d),
            k: Linear::new(ps, &format!("{prefix}.k"), rng, d, d),
            v: Linear::new(ps, &format!("{prefix}.v"), rng, d, d),
            proj: Linear::new_zeroed(ps, &format!("{prefix}.proj"), d, d),
            norm: LayerNorm::new(ps, &format!("{prefix}.norm"), d),
            window,
        })
    }

    /// (pre-norm residual sum, normalized output).
    pub fn forward_parts(&self, t_f: &Triplane<T>, t_b: &Triplane<T>) -> Result<(Triplane<T>, Triplane<T>)> {
        if t_f.dims() != t_b.dims() {
            return Err(Error::Dimension("vpca: triplane shape mismatch".into()));
        }
        let (h, w, d) = t_f.dims();
        let mut pre = Vec::with_capacity(3);
        let mut post = Vec::with_capacity(3);
        for p in 0..3 {
            let flat_f = reshape(&t_f.planes[p], vec![h * w, d])?;
            let flat_b = reshape(&t_b.planes[p], vec![h * w, d])?;
            let mut tile_outs = Vec::new();
            let mut order = Vec::with_capacity(h * w);
            for r0 in (0..h).step_by(self.window) {
                for c0 in (0..w).step_by(self.window) {
                    let rows: Vec<usize> = (r0..(r0 + self.window).min(h))
                        .flat_map(|r| (c0..(c0 + self.window).min(w)).map(move |c| r * w + c))
                        .collect();
                    let q = self.q.forward(&gather_rows(&flat_f, &rows)?)?;
                    let kv_src = gather_rows(&flat_b, &rows)?;
                    let k = self.k.forward(&kv_src)?;
                    let v = self.v.forward(&kv_src)?;
                    tile_outs.push(self.proj.forward(&attention(&q, &k, &v, 1, None)?)?);
                    order.extend(rows);
                }
            }
            // Undo the tile traversal order back to row-major cells.
            let concat = concat_rows(&tile_outs)?;
            let mut inverse = vec![0usize; h * w];
            for (pos, &cell) in order.iter().enumerate() {
                inverse[cell] = pos;
            }
            let att = gather_rows(&concat, &inverse)?;
            let residual = add(&flat_f, &att)?;
            pre.push(reshape(&residual, vec![h, w, d])?);
            post.push(reshape(&self.norm.forward(&residual)?, vec![h, w, d])?);
        }
        Ok((
            Triplane::new([pre.remove(0), pre.remove(0), pre.remove(0)])?,
            Triplane::new([post.remove(0), post.remove(0), post.remove(0)])?,
        ))
    }

    pub fn forward(&self, t_f: &Triplane<T>, t_b: &Triplane<T>) -> Result<Triplane<T>> {
        Ok(self.forward_parts(t_f, t_b)?.1)
    }
}

/// Convolutional fusion: channel-concatenate per plane, three 3×3 conv
/// layers (GELU between, zero-initialized final layer), residual to front.
pub struct ConvFusion<T: Scalar> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
    w3: Tensor<T>,
    b3: Tensor<T>,
}

impl<T: Scalar> ConvFusion<T> {
    pub fn new(ps: &mut ParamSet<T>, prefix: &str, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let conv_init = |rng: &mut ChaCha8Rng, cin: usize, cout: usize| -> Vec<T> {
            xavier::<T>(rng, cin * 9, cout).to_vec()
        };
        let w1d = conv_init(rng, 2 * d, d);
        let w2d = conv_init(rng, d, d);
        ConvFusion {
            w1: ps.register(&format!("{prefix}.conv1.w"), Tensor::param(vec![d, 2 * d, 3, 3], w1d)),
            b1: ps.register(&format!("{prefix}.conv1.b"), Tensor::param(vec![d], vec![T::zero(); d])),
            w2: ps.register(&format!("{prefix}.conv2.w"), Tensor::param(vec![d, d, 3, 3], w2d)),
            b2: ps.register(&format!("{prefix}.conv2.b"), Tensor::param(vec![d], vec![T::zero(); d])),
            w3: ps.register(
                &format!("{prefix}.conv3.w"),
                Tensor::param(vec![d, d, 3, 3], vec![T::zero(); d * d * 9]),
            ),
            b3: ps.register(&format!("{prefix}.conv3.b"), Tensor::param(vec![d], vec![T::zero(); d])),
        }
    }

    pub fn forward(&self, t_f: &Triplane<T>, t_b: &Triplane<T>) -> Result<Triplane<T>> {
        if t_f.dims() != t_b.dims() {
            return Err(Error::Dimension("conv fusion: triplane shape mismatch".into()));
        }
        let (h, w, d) = t_f.dims();
        let mut out = Vec::with_capacity(3);
        for p in 0..3 {
            // [H,W,d] -> channel-first [d,H,W]
            let cf_f = reshape(&transpose2d(&reshape(&t_f.planes[p], vec![h * w, d])?)?, vec![d, h, w])?;
            let cf_b = reshape(&transpose2d(&reshape(&t_b.planes[p], vec![h * w, d])?)?, vec![d, h, w])?;
            let stacked = reshape(
                &concat_rows(&[
                    reshape(&cf_f, vec![d, h * w])?,
                    reshape(&cf_b, vec![d, h * w])?,
                ])?,
                vec![2 * d, h, w],
            )?;
            let x = gelu(&conv2d(&stacked, &self.w1, &self.b1, 1)?);
            let x = gelu(&conv2d(&x, &self.w2, &self.b2, 1)?);
            let x = conv2d(&x, &self.w3, &self.b3, 1)?;
            let residual = add(&cf_f, &x)?;
            // back to [H,W,d]
            out.push(reshape(&transpose2d(&reshape(&residual, vec![d, h * w])?)?, vec![h, w, d])?);
        }
        Triplane::new([out.remove(0), out.remove(0), out.remove(0)])
    }
}

/// All fusion operators behind one signature; selection by [`FusionMode`].
pub struct Fusion<T: Scalar> {
    pub vpca: VpcaFusion<T>,
    pub conv: ConvFusion<T>,
}

impl<T: Scalar> Fusion<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        window: usize,
    ) -> Result<Self> {
        Ok(Fusion {
            vpca: VpcaFusion::new(ps, &format!("{prefix}.vpca"), rng, d, window)?,
            conv: ConvFusion::new(ps, &format!("{prefix}.conv"), rng, d),
        })
    }

    pub fn fuse(&self, mode: FusionMode, t_f: &Triplane<T>, t_b: &Triplane<T>) -> Result<Triplane<T>> {
        match mode {
            FusionMode::Vpca => self.vpca.forward(t_f, t_b),
            FusionMode::Add => fuse_add(t_f, t_b),
            FusionMode::Conv2d => self.conv.forward(t_f, t_b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_triplane(h: usize, w: usize, d: usize, seed: f64) -> Triplane<f64> {
        let gen = |o: f64| {
            Tensor::new(
                vec![h, w, d],
                (0..h * w * d).map(|i| ((i as f64 + o + seed) * 0.61).sin()).collect(),
            )
            .unwrap()
        };
        Triplane::new([gen(0.0), gen(100.0), gen(200.0)]).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let t = random_triplane(6, 6, 4, 0.0);
        let back = flip_triplane_z180(&flip_triplane_z180(&t).unwrap()).unwrap();
        for p in 0..3 {
            assert_eq!(back.planes[p].to_vec(), t.planes[p].to_vec());
        }
    }

    #[test]
    fn flip_moves_one_hot_cells_correctly() {
        let (h, w, d) = (5, 4, 2);
        let t = Triplane::<f64>::zeros(h, w, d);
        t.planes[0].with_data_mut(|v| v[((1 * w + 2) * d) + 1] = 3.0);
        t.planes[1].with_data_mut(|v| v[((0 * w + 3) * d) + 0] = 2.0);
        t.planes[2].with_data_mut(|v| v[((4 * w + 1) * d) + 1] = 5.0);
        let f = flip_triplane_z180(&t).unwrap();
        // XY: both axes reverse.
        assert_eq!(f.planes[0].to_vec()[(((h - 2) * w + (w - 3)) * d) + 1], 3.0);
        // YZ/XZ: only the row axis reverses.
        assert_eq!(f.planes[1].to_vec()[(((h - 1) * w + 3) * d) + 0], 2.0);
        assert_eq!(f.planes[2].to_vec()[((0 * w + 1) * d) + 1], 5.0);
    }

    #[test]
    fn fuse_add_is_the_mean() {
        let a = random_triplane(4, 4, 3, 1.0);
        let b = random_triplane(4, 4, 3, 9.0);
        let same = fuse_add(&a, &a).unwrap();
        for p in 0..3 {
            assert_eq!(same.planes[p].to_vec(), a.planes[p].to_vec());
        }
        let neg = Triplane::new([
            mul_scalar(&b.planes[0], -1.0),
            mul_scalar(&b.planes[1], -1.0),
            mul_scalar(&b.planes[2], -1.0),
        ])
        .unwrap();
        let zero = fuse_add(&b, &neg).unwrap();
        assert!(zero.planes[0].to_vec().iter().all(|&v| v == 0.0));
        let m = fuse_add(&a, &b).unwrap();
        let (av, bv, mv) = (a.planes[2].to_vec(), b.planes[2].to_vec(), m.planes[2].to_vec());
        for i in 0..av.len() {
            assert!((mv[i] - 0.5 * (av[i] + bv[i])).abs() < 1e-15);
        }
    }

    fn build_vpca(d: usize, window: usize, seed: u64) -> (ParamSet<f64>, VpcaFusion<f64>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = VpcaFusion::new(&mut ps, "fusion.vpca", &mut rng, d, window).unwrap();
        (ps, v)
    }

    #[test]
    fn vpca_zero_init_is_residual_identity() {
        let (_ps, v) = build_vpca(4, 2, 1);
        let a = random_triplane(4, 4, 4, 0.0);
        let b = random_triplane(4, 4, 4, 7.0);
        let (pre, _post) = v.forward_parts(&a, &b).unwrap();
        for p in 0..3 {
            assert_eq!(pre.planes[p].to_vec(), a.planes[p].to_vec());
        }
    }

    #[test]
    fn vpca_full_window_matches_global_attention() {
        let (h, w, d) = (4, 4, 4);
        let (_ps, v) = build_vpca(d, h, 2);
        // Activate the output projection so attention actually contributes.
        v.proj.w.with_data_mut(|p| {
            for (i, x) in p.iter_mut().enumerate() {
                *x = ((i as f64) * 0.23).sin() * 0.3;
            }
        });
        let a = random_triplane(h, w, d, 3.0);
        let b = random_triplane(h, w, d, 11.0);
        let windowed = v.forward(&a, &b).unwrap();

        // Direct global reference: one tile covering the whole plane.
        for p in 0..3 {
            let flat_f = reshape(&a.planes[p], vec![h * w, d]).unwrap();
            let flat_b = reshape(&b.planes[p], vec![h * w, d]).unwrap();
            let q = v.q.forward(&flat_f).unwrap();
            let k = v.k.forward(&flat_b).unwrap();
            let vv = v.v.forward(&flat_b).unwrap();
            let att = v.proj.forward(&attention(&q, &k, &vv, 1, None).unwrap()).unwrap();
            let refv = v.norm.forward(&add(&flat_f, &att).unwrap()).unwrap().to_vec();
            let got = windowed.planes[p].to_vec();
            for i in 0..refv.len() {
                assert!((refv[i] - got[i]).abs() < 1e-5, "plane {p} idx {i}");
            }
        }
    }

    #[test]
    fn vpca_commutes_with_flip_on_aligned_windows() {
        let (h, w, d) = (4, 4, 3);
        let (_ps, v) = build_vpca(d, 2, 5);
        v.proj.w.with_data_mut(|p| {
            for (i, x) in p.iter_mut().enumerate() {
                *x = ((i as f64) * 0.37).cos() * 0.2;
            }
        });
        let a = random_triplane(h, w, d, 21.0);
        let b = random_triplane(h, w, d, 34.0);
        let lhs = v
            .forward(&flip_triplane_z180(&a).unwrap(), &flip_triplane_z180(&b).unwrap())
            .unwrap();
        let rhs = flip_triplane_z180(&v.forward(&a, &b).unwrap()).unwrap();
        for p in 0..3 {
            let (l, r) = (lhs.planes[p].to_vec(), rhs.planes[p].to_vec());
            for i in 0..l.len() {
                assert!((l[i] - r[i]).abs() < 1e-10, "plane {p} idx {i}");
            }
        }
    }

    #[test]
    fn conv_fusion_zero_final_layer_is_identity() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = ConvFusion::new(&mut ps, "fusion.conv", &mut rng, 3);
        let a = random_triplane(5, 5, 3, 0.0);
        let b = random_triplane(5, 5, 3, 50.0);
        let out = c.forward(&a, &b).unwrap();
        assert_eq!(out.dims(), (5, 5, 3));
        for p in 0..3 {
            let (o, av) = (out.planes[p].to_vec(), a.planes[p].to_vec());
            for i in 0..o.len() {
                assert!((o[i] - av[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_fusion_gradients_reach_both_inputs() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = ConvFusion::new(&mut ps, "fusion.conv", &mut rng, 2);
        // Non-zero final layer so the back input influences the output.
        c.w3.with_data_mut(|w| {
            for (i, v) in w.iter_mut().enumerate() {
                *v = ((i as f64) * 0.17).sin() * 0.1;
            }
        });
        let mk = |seed: f64| {
            let gen = |o: f64| {
                Tensor::<f64>::param(
                    vec![3, 3, 2],
                    (0..18).map(|i| ((i as f64 + o + seed) * 0.43).sin()).collect(),
                )
            };
            Triplane::new([gen(0.0), gen(10.0), gen(20.0)]).unwrap()
        };
        let a = mk(1.0);
        let b = mk(2.0);
        let out = c.forward(&a, &b).unwrap();
        crate::diffmath::ops::mean_all(&out.planes[0]).backward();
        let ga = a.planes[0].grad().unwrap();
        let gb = b.planes[0].grad().unwrap();
        assert!(ga.iter().any(|&v| v != 0.0));
        assert!(gb.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in [FusionMode::Vpca, FusionMode::Add, FusionMode::Conv2d] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("swin".parse::<FusionMode>().is_err());
    }
}
