//! Triplane-conditioned radiance field and differentiable volume renderer.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, ray_unit_cube_intersect, CameraPose};
use crate::diffmath::ops::{
    add, concat_rows, gather_rows, gelu, reshape, sigmoid, softplus, volume_composite,
};
use crate::diffmath::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSet};
use crate::scalar::Scalar;
use crate::scenegen::{field_query, AnalyticScene, BACKGROUND};
use crate::triform::Triplane;

/// Rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub n_samples: usize,
    /// Stratified jitter along rays (training); midpoints when off.
    pub stratified: bool,
}

impl RenderConfig {
    pub fn desk() -> Self {
        RenderConfig { width: 64, height: 64, n_samples: 48, stratified: false }
    }

    /// 128 samples per ray.
    pub fn paper_dense() -> Self {
        RenderConfig { width: 128, height: 128, n_samples: 128, stratified: false }
    }

    /// 96 samples per ray (the alternative figure in the source material's
    /// appendix; kept as a separate preset).
    pub fn paper_sparse() -> Self {
        RenderConfig { width: 128, height: 128, n_samples: 96, stratified: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!("n_samples {} must be ≥ 2", self.n_samples)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Project points onto the three planes and sum the bilinear samples.
///
/// Points are given in [-1,1]³ (coordinates outside clamp to the border).
pub fn sample_triplane<T: Scalar>(t: &Triplane<T>, points: &[[T; 3]]) -> Result<Tensor<T>> {
    let k = points.len();
    let mut uv_xy = Vec::with_capacity(2 * k);
    let mut uv_yz = Vec::with_capacity(2 * k);
    let mut uv_xz = Vec::with_capacity(2 * k);
    for p in points {
        uv_xy.extend([p[0], p[1]]);
        uv_yz.extend([p[1], p[2]]);
        uv_xz.extend([p[0], p[2]]);
    }
    let s = |plane: &Tensor<T>, uv: Vec<T>| -> Result<Tensor<T>> {
        crate::diffmath::ops::bilinear_sample_2d(plane, &Tensor::new(vec![k, 2], uv)?)
    };
    let xy = s(&t.planes[0], uv_xy)?;
    let yz = s(&t.planes[1], uv_yz)?;
    let xz = s(&t.planes[2], uv_xz)?;
    add(&add(&xy, &yz)?, &xz)
}

/// Field MLP shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerfConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub n_layers: usize,
}

impl NerfConfig {
    pub fn desk() -> Self {
        NerfConfig { d_in: 32, hidden: 64, n_layers: 4 }
    }

    pub fn paper() -> Self {
        NerfConfig { d_in: 80, hidden: 64, n_layers: 10 }
    }
}

/// Maps sampled triplane features to density (softplus) and color (sigmoid).
pub struct NerfMlp<T: Scalar> {
    trunk: Vec<Linear<T>>,
    sigma_head: Linear<T>,
    rgb_head: Linear<T>,
}

impl<T: Scalar> NerfMlp<T> {
    pub fn new(
        ps: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: NerfConfig,
    ) -> Self {
        let mut trunk = Vec::with_capacity(cfg.n_layers);
        let mut d = cfg.d_in;
        for i in 0..cfg.n_layers {
            trunk.push(Linear::new(ps, &format!("{prefix}.trunk.{i}"), rng, d, cfg.hidden));
            d = cfg.hidden;
        }
        NerfMlp {
            trunk,
            sigma_head: Linear::new(ps, &format!("{prefix}.sigma_head"), rng, d, 1),
            rgb_head: Linear::new(ps, &format!("{prefix}.rgb_head"), rng, d, 3),
        }
    }

    /// (sigma [K], rgb [K,3]) from features [K, d_in].
    pub fn forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = features.clone();
        for layer in &self.trunk {
            h = gelu(&layer.forward(&h)?);
        }
        let k = features.shape()[0];
        let sigma = reshape(&softplus(&self.sigma_head.forward(&h)?), vec![k])?;
        let rgb = sigmoid(&self.rgb_head.forward(&h)?);
        Ok((sigma, rgb))
    }
}

/// Anything the volume renderer can march through.
pub trait RadianceField<T: Scalar> {
    /// (sigma [K], rgb [K,3]) at K points in [-1,1]³.
    fn query(&self, points: &[[T; 3]]) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// The learned field: triplane features through the NeRF MLP.
pub struct TriplaneField<'a, T: Scalar> {
    pub triplane: &'a Triplane<T>,
    pub mlp: &'a NerfMlp<T>,
}

impl<T: Scalar> RadianceField<T> for TriplaneField<'_, T> {
    fn query(&self, points: &[[T; 3]]) -> Result<(Tensor<T>, Tensor<T>)> {
        self.mlp.forward(&sample_triplane(self.triplane, points)?)
    }
}

/// Ground-truth analytic field (non-differentiable); lets the renderer be
/// compared against the procedural oracle on identical compositing math.
pub struct AnalyticField<'a> {
    pub scene: &'a AnalyticScene,
}

impl<T: Scalar> RadianceField<T> for AnalyticField<'_> {
    fn query(&self, points: &[[T; 3]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let k = points.len();
        let mut sigma = Vec::with_capacity(k);
        let mut rgb = Vec::with_capacity(3 * k);
        for p in points {
            let (s, c) = field_query(self.scene, [p[0].to_f64c(), p[1].to_f64c(), p[2].to_f64c()]);
            sigma.push(T::from_f64c(s));
            rgb.extend(c.map(T::from_f64c));
        }
        Ok((Tensor::new(vec![k], sigma)?, Tensor::new(vec![k, 3], rgb)?))
    }
}

/// Differentiable volume rendering of `field` from `pose`: per ray, the
/// [-1,1]³ slab is sampled at `n_samples` depths (midpoints, or stratified
/// jitter when configured), alpha-composited over a white background. Rays
/// that miss the box return the background.
pub fn volume_render<T: Scalar>(
    field: &dyn RadianceField<T>,
    pose: &CameraPose,
    cfg: &RenderConfig,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (origins, dirs) = generate_rays(pose, cfg.width, cfg.height);
    let s = cfg.n_samples;
    let n_pix = cfg.width * cfg.height;
    let mut points: Vec<[T; 3]> = Vec::new();
    let mut deltas: Vec<T> = Vec::new();
    // Row index into the composited block per pixel; misses use the
    // background row appended after the hits.
    let mut pixel_row = vec![usize::MAX; n_pix];
    let mut n_hits = 0usize;
    for (pix, (o, d)) in origins.iter().zip(&dirs).enumerate() {
        if d.iter().all(|v| v.abs() < 1e-12) {
            return Err(Error::Numeric(format!("degenerate ray at pixel {pix}")));
        }
        let Some((t0, t1)) = ray_unit_cube_intersect(*o, *d) else { continue };
        let dt = (t1 - t0) / s as f64;
        for i in 0..s {
            let off = match &mut jitter {
                Some(rng) if cfg.stratified => rng.gen_range(0.0..1.0),
                _ => 0.5,
            };
            let t = t0 + (i as f64 + off) * dt;
            points.push([
                T::from_f64c(o[0] + t * d[0]),
                T::from_f64c(o[1] + t * d[1]),
                T::from_f64c(o[2] + t * d[2]),
            ]);
            deltas.push(T::from_f64c(dt));
        }
        pixel_row[pix] = n_hits;
        n_hits += 1;
    }
    let background = BACKGROUND.map(T::from_f64c);
    let block = if n_hits > 0 {
        let (sigma, rgb) = field.query(&points)?;
        let sigma = reshape(&sigma, vec![n_hits, s])?;
        let rgb = reshape(&rgb, vec![n_hits, s, 3])?;
        let comp = volume_composite(&sigma, &rgb, Rc::new(deltas), background)?;
        let bg_row = Tensor::new(vec![1, 3], background.to_vec())?;
        concat_rows(&[comp, bg_row])?
    } else {
        Tensor::new(vec![1, 3], background.to_vec())?
    };
    let rows: Vec<usize> = pixel_row
        .iter()
        .map(|&r| if r == usize::MAX { n_hits } else { r })
        .collect();
    reshape(&gather_rows(&block, &rows)?, vec![cfg.height, cfg.width, 3])
}

/// Density on the regular (2/(N−1))-spaced lattice over [-1,1]³, laid out
/// row-major with z fastest; non-differentiable snapshot.
pub fn extract_density_grid<T: Scalar>(
    triplane: &Triplane<T>,
    mlp: &NerfMlp<T>,
    n: usize,
) -> Result<Tensor<T>> {
    if n < 2 {
        return Err(Error::Config(format!("grid resolution {n} must be ≥ 2")));
    }
    no_grad(|| {
        let coord = |i: usize| T::from_f64c(-1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let mut out = Vec::with_capacity(n * n * n);
        // One x-slab at a time keeps peak memory flat at paper-scale N.
        for ix in 0..n {
            let mut pts = Vec::with_capacity(n * n);
            for iy in 0..n {
                for iz in 0..n {
                    pts.push([coord(ix), coord(iy), coord(iz)]);
                }
            }
            let (sigma, _) = mlp.forward(&sample_triplane(triplane, &pts)?)?;
            out.extend(sigma.to_vec());
        }
        Tensor::new(vec![n, n, n], out)
    })
}

/// Lattice convention recorded next to a density grid dump.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct DensityGridSidecar {
    pub resolution: usize,
    pub order: String,
    pub domain: [f64; 2],
}

/// Write `grid.tsr` plus a JSON sidecar describing the lattice.
pub fn save_density_grid<T: Scalar>(path: &Path, grid: &Tensor<T>) -> Result<()> {
    let n = grid.shape()[0];
    crate::diffmath::save_tsr(grid, path)?;
    let sidecar = DensityGridSidecar {
        resolution: n,
        order: "z-fastest".into(),
        domain: [-1.0, 1.0],
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar).expect("serializable sidecar"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    #[test]
    fn zero_triplane_samples_to_zero() {
        let t = Triplane::<f64>::zeros(5, 5, 4);
        let out = sample_triplane(&t, &[[0.3, -0.2, 0.9], [-1.0, 1.0, 0.0]]).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn origin_hits_center_texels_of_odd_planes() {
        let (h, d) = (5, 3);
        let t = Triplane::<f64>::zeros(h, h, d);
        for (p, base) in [(0, 1.0), (1, 10.0), (2, 100.0)] {
            t.planes[p].with_data_mut(|v| {
                for c in 0..d {
                    v[((2 * h + 2) * d) + c] = base + c as f64;
                }
            });
        }
        let out = sample_triplane(&t, &[[0.0, 0.0, 0.0]]).unwrap().to_vec();
        for c in 0..d {
            let expect = (1.0 + c as f64) + (10.0 + c as f64) + (100.0 + c as f64);
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_plane_tabulation_reproduces_linear_fields() {
        // g(x,y) = 0.25 + 0.5x − 0.3y tabulated into the (x,y) plane only;
        // bilinear interpolation is exact on linear functions.
        let (h, d) = (4, 1);
        let t = Triplane::<f64>::zeros(h, h, d);
        let grid = |i: usize| -1.0 + 2.0 * i as f64 / (h - 1) as f64;
        t.planes[0].with_data_mut(|v| {
            for i in 0..h {
                for j in 0..h {
                    v[i * h + j] = 0.25 + 0.5 * grid(i) - 0.3 * grid(j);
                }
            }
        });
        let pts = [[0.13, -0.77, 0.5], [-0.9, 0.4, -0.2], [0.0, 0.0, 1.0]];
        let out = sample_triplane(&t, &pts).unwrap().to_vec();
        for (p, &got) in pts.iter().zip(&out) {
            let expect = 0.25 + 0.5 * p[0] - 0.3 * p[1];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn mlp_outputs_respect_activation_ranges() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = NerfMlp::new(&mut ps, "nerf", &mut rng(), NerfConfig { d_in: 6, hidden: 8, n_layers: 2 });
        let feats = Tensor::new(vec![7, 6], (0..42).map(|i| ((i as f64) * 1.7).sin() * 3.0).collect()).unwrap();
        let (sigma, rgb) = mlp.forward(&feats).unwrap();
        assert!(sigma.to_vec().iter().all(|&v| v.is_finite() && v >= 0.0));
        assert!(rgb.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zeroed_heads_give_softplus_zero_and_half_gray() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = NerfMlp::new(&mut ps, "nerf", &mut rng(), NerfConfig { d_in: 4, hidden: 8, n_layers: 2 });
        mlp.sigma_head.w.with_data_mut(|w| w.fill(0.0));
        mlp.rgb_head.w.with_data_mut(|w| w.fill(0.0));
        let feats = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.4).collect()).unwrap();
        let (sigma, rgb) = mlp.forward(&feats).unwrap();
        let sp0 = 2.0f64.ln();
        assert!(sigma.to_vec().iter().all(|&v| (v - sp0).abs() < 1e-12));
        assert!(rgb.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn mlp_feature_gradient_matches_finite_differences() {
        let mut ps = ParamSet::<f64>::new();
        let mlp = NerfMlp::new(&mut ps, "nerf", &mut rng(), NerfConfig { d_in: 4, hidden: 6, n_layers: 2 });
        let feats = Tensor::<f64>::param(vec![2, 4], (0..8).map(|i| (i as f64 * 0.63).sin()).collect());
        let err = crate::diffmath::grad_check(
            |t| {
                let (sigma, rgb) = mlp.forward(&t[0]).unwrap();
                add(
                    &crate::diffmath::ops::mean_all(&sigma),
                    &crate::diffmath::ops::mean_all(&rgb),
                )
                .unwrap()
            },
            &[feats],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max grad error {err}");
    }

    struct ConstField {
        sigma: f64,
        rgb: [f64; 3],
    }

    impl RadianceField<f64> for ConstField {
        fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor<f64>, Tensor<f64>)> {
            let k = points.len();
            Ok((
                Tensor::full(vec![k], self.sigma),
                Tensor::new(vec![k, 3], self.rgb.repeat(k))?,
            ))
        }
    }

    #[test]
    fn zero_density_renders_the_background() {
        let pose = crate::camera::canonical_front_pose();
        let cfg = RenderConfig { width: 5, height: 5, n_samples: 8, stratified: false };
        let img = volume_render(&ConstField { sigma: 0.0, rgb: [0.2, 0.3, 0.4] }, &pose, &cfg, None)
            .unwrap();
        assert!(img.to_vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_medium_matches_closed_form_transmittance() {
        let pose = crate::camera::canonical_front_pose();
        let cfg = RenderConfig { width: 3, height: 3, n_samples: 256, stratified: false };
        let (sigma_c, c) = (1.3, [0.6, 0.2, 0.9]);
        let img = volume_render(&ConstField { sigma: sigma_c, rgb: c }, &pose, &cfg, None).unwrap();
        let (origins, dirs) = generate_rays(&pose, 3, 3);
        let vals = img.to_vec();
        for pix in 0..9 {
            let (t0, t1) = ray_unit_cube_intersect(origins[pix], dirs[pix]).unwrap();
            let trans = (-sigma_c * (t1 - t0)).exp();
            for ch in 0..3 {
                let expect = c[ch] * (1.0 - trans) + trans;
                assert!(
                    (vals[pix * 3 + ch] - expect).abs() < 1e-3,
                    "pixel {pix} ch {ch}: {} vs {expect}",
                    vals[pix * 3 + ch]
                );
            }
        }
    }

    #[test]
    fn density_grid_matches_direct_queries() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng();
        let mlp = NerfMlp::new(&mut ps, "nerf", &mut r, NerfConfig { d_in: 3, hidden: 6, n_layers: 2 });
        let t = Triplane::<f64>::zeros(4, 4, 3);
        for p in 0..3 {
            t.planes[p].with_data_mut(|v| {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = ((i as f64 + p as f64 * 31.0) * 0.7).sin();
                }
            });
        }
        let n = 3;
        let grid = extract_density_grid(&t, &mlp, n).unwrap();
        assert_eq!(grid.shape(), &[n, n, n]);
        let gv = grid.to_vec();
        // Spot-check a lattice point against a direct recompute (z-fastest).
        let (ix, iy, iz) = (2, 0, 1);
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
        let (sig, _) = mlp
            .forward(&sample_triplane(&t, &[[coord(ix), coord(iy), coord(iz)]]).unwrap())
            .unwrap();
        assert!((gv[(ix * n + iy) * n + iz] - sig.item()).abs() < 1e-12);
    }

    #[test]
    fn two_point_grid_covers_the_cube_corners() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng();
        let mlp = NerfMlp::new(&mut ps, "nerf", &mut r, NerfConfig { d_in: 2, hidden: 4, n_layers: 1 });
        mlp.sigma_head.w.with_data_mut(|w| w.fill(0.0));
        let t = Triplane::<f64>::zeros(3, 3, 2);
        let grid = extract_density_grid(&t, &mlp, 2).unwrap();
        assert_eq!(grid.numel(), 8);
        let sp0 = 2.0f64.ln();
        assert!(grid.to_vec().iter().all(|&v| (v - sp0).abs() < 1e-12));
    }
}
