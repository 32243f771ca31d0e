//! Differentiable primitives.
//!
//! Every op builds a graph node whose backward closure maps the output
//! gradient to per-parent gradients. Shape-checked ops return `Result`;
//! ops that cannot fail return `Tensor` directly.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- elementwise

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.to_vec()]),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "sub")?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.iter().map(|&v| -v).collect()]),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ad = ac.data();
            let bd = bc.data();
            vec![
                g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect(),
                g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect(),
            ]
        }),
    ))
}

pub fn neg<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| -x).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g| vec![g.iter().map(|&v| -v).collect()]),
    )
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| x + c).collect();
    Tensor::from_op(a.shape().to_vec(), data, vec![a.clone()], Box::new(|g| vec![g.to_vec()]))
}

pub fn mul_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| vec![g.iter().map(|&v| v * c).collect()]),
    )
}

/// x [n×m] + row vector b (numel m), broadcast over rows.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let m = *x.shape().last().ok_or_else(|| Error::Dimension("add_bias: 0-d input".into()))?;
    if b.numel() != m {
        return Err(Error::Dimension(format!(
            "add_bias: bias numel {} != last dim {m}",
            b.numel()
        )));
    }
    let bd = b.to_vec();
    let data: Vec<T> = x.data().chunks(m).flat_map(|row| {
        row.iter().zip(&bd).map(|(&xv, &bv)| xv + bv).collect::<Vec<_>>()
    }).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |g| {
            let mut db = vec![T::zero(); m];
            for row in g.chunks(m) {
                for (d, &gv) in db.iter_mut().zip(row) {
                    *d += gv;
                }
            }
            vec![g.to_vec(), db]
        }),
    ))
}

/// x [n×m] * row vector s (numel m), broadcast over rows.
pub fn mul_bcast_row<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let m = *x.shape().last().ok_or_else(|| Error::Dimension("mul_bcast_row: 0-d input".into()))?;
    if s.numel() != m {
        return Err(Error::Dimension(format!(
            "mul_bcast_row: scale numel {} != last dim {m}",
            s.numel()
        )));
    }
    let sd = s.to_vec();
    let data: Vec<T> = x.data().chunks(m).flat_map(|row| {
        row.iter().zip(&sd).map(|(&xv, &sv)| xv * sv).collect::<Vec<_>>()
    }).collect();
    let xc = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), s.clone()],
        Box::new(move |g| {
            let xd = xc.data();
            let mut dx = vec![T::zero(); g.len()];
            let mut ds = vec![T::zero(); m];
            for (grow, xrow) in g.chunks(m).zip(xd.chunks(m)) {
                for j in 0..m {
                    ds[j] += grow[j] * xrow[j];
                }
            }
            for (i, &gv) in g.iter().enumerate() {
                dx[i] = gv * sd[i % m];
            }
            vec![dx, ds]
        }),
    ))
}

// ---------------------------------------------------------------- activations

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| x.exp()).collect();
    let saved = data.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| vec![g.iter().zip(&saved).map(|(&gv, &y)| gv * y).collect()]),
    )
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| {
            if x >= T::zero() {
                one / (one + (-x).exp())
            } else {
                let e = x.exp();
                e / (one + e)
            }
        })
        .collect();
    let saved = data.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            vec![g.iter().zip(&saved).map(|(&gv, &y)| gv * y * (T::one() - y)).collect()]
        }),
    )
}

pub fn softplus<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| x.max(T::zero()) + (one + (-x.abs()).exp()).ln())
        .collect();
    let xc = a.to_vec();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&xc)
                .map(|(&gv, &x)| {
                    let s = if x >= T::zero() {
                        one / (one + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (one + e)
                    };
                    gv * s
                })
                .collect()]
        }),
    )
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    let one = T::one();
    let three = T::from_f64c(3.0);
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| {
            let inner = c * (x + k * x * x * x);
            half * x * (one + inner.tanh())
        })
        .collect();
    let xc = a.to_vec();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&xc)
                .map(|(&gv, &x)| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (one + three * k * x * x);
                    let d = half * (one + t) + half * x * (one - t * t) * du;
                    gv * d
                })
                .collect()]
        }),
    )
}

// ---------------------------------------------------------------- reductions

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s: T = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0]; n]]),
    )
}

pub fn mean_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel();
    let inv = T::one() / T::from_usizec(n);
    let s: T = a.data().iter().copied().sum();
    Tensor::from_op(
        vec![1],
        vec![s * inv],
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0] * inv; n]]),
    )
}

// ---------------------------------------------------------------- shape ops

pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != a.numel() {
        return Err(Error::Dimension(format!(
            "reshape: {:?} -> {:?} changes element count",
            a.shape(),
            shape
        )));
    }
    Ok(Tensor::from_op(
        shape,
        a.to_vec(),
        vec![a.clone()],
        Box::new(|g| vec![g.to_vec()]),
    ))
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = two_dims(a, "transpose2d")?;
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    drop(ad);
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut dg = vec![T::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    dg[i * n + j] = g[j * m + i];
                }
            }
            vec![dg]
        }),
    ))
}

fn two_dims<T: Scalar>(a: &Tensor<T>, op: &str) -> Result<[usize; 2]> {
    match a.shape() {
        [m, n] => Ok([*m, *n]),
        s => Err(Error::Dimension(format!("{op}: expected 2-d tensor, got {s:?}"))),
    }
}

/// out[i] = a.flat[idx[i]]; backward scatter-adds (duplicate indices allowed).
pub fn gather_flat<T: Scalar>(
    a: &Tensor<T>,
    idx: Rc<Vec<usize>>,
    out_shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let n: usize = out_shape.iter().product();
    if n != idx.len() {
        return Err(Error::Dimension(format!(
            "gather_flat: out shape {:?} vs {} indices",
            out_shape,
            idx.len()
        )));
    }
    let an = a.numel();
    if let Some(&bad) = idx.iter().find(|&&i| i >= an) {
        return Err(Error::Dimension(format!("gather_flat: index {bad} out of range {an}")));
    }
    let ad = a.data();
    let data: Vec<T> = idx.iter().map(|&i| ad[i]).collect();
    drop(ad);
    let idxb = Rc::clone(&idx);
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = vec![T::zero(); an];
            for (&i, &gv) in idxb.iter().zip(g) {
                da[i] += gv;
            }
            vec![da]
        }),
    ))
}

/// Row gather on a [n×d] matrix.
pub fn gather_rows<T: Scalar>(a: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let [n, d] = two_dims(a, "gather_rows")?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Dimension(format!("gather_rows: row {bad} out of range {n}")));
    }
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * d..r * d + d).collect();
    gather_flat(a, Rc::new(idx), vec![rows.len(), d])
}

/// Concatenate [nᵢ×d] matrices along rows.
pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Usage("concat_rows: empty input".into()));
    }
    let [_, d] = two_dims(&parts[0], "concat_rows")?;
    let mut total = 0usize;
    for p in parts {
        let [n, pd] = two_dims(p, "concat_rows")?;
        if pd != d {
            return Err(Error::Dimension(format!("concat_rows: column mismatch {pd} vs {d}")));
        }
        total += n;
    }
    let mut data = Vec::with_capacity(total * d);
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::from_op(
        vec![total, d],
        data,
        parts.to_vec(),
        Box::new(move |g| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &s in &sizes {
                out.push(g[off..off + s].to_vec());
                off += s;
            }
            out
        }),
    ))
}

/// Concatenate two [n×d] matrices along the last dimension -> [n×(d1+d2)].
pub fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d1] = two_dims(a, "concat_cols")?;
    let [nb, d2] = two_dims(b, "concat_cols")?;
    if n != nb {
        return Err(Error::Dimension(format!("concat_cols: row mismatch {n} vs {nb}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(n * (d1 + d2));
    for i in 0..n {
        data.extend_from_slice(&ad[i * d1..(i + 1) * d1]);
        data.extend_from_slice(&bd[i * d2..(i + 1) * d2]);
    }
    drop(ad);
    drop(bd);
    Ok(Tensor::from_op(
        vec![n, d1 + d2],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let d = d1 + d2;
            let mut da = vec![T::zero(); n * d1];
            let mut db = vec![T::zero(); n * d2];
            for i in 0..n {
                da[i * d1..(i + 1) * d1].copy_from_slice(&g[i * d..i * d + d1]);
                db[i * d2..(i + 1) * d2].copy_from_slice(&g[i * d + d1..(i + 1) * d]);
            }
            vec![da, db]
        }),
    ))
}

/// Columns [start, end) of a [n×d] matrix.
pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let [n, d] = two_dims(a, "slice_cols")?;
    if start >= end || end > d {
        return Err(Error::Dimension(format!("slice_cols: [{start},{end}) out of 0..{d}")));
    }
    let w = end - start;
    let ad = a.data();
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend_from_slice(&ad[i * d + start..i * d + end]);
    }
    drop(ad);
    Ok(Tensor::from_op(
        vec![n, w],
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = vec![T::zero(); n * d];
            for i in 0..n {
                da[i * d + start..i * d + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![da]
        }),
    ))
}

// ---------------------------------------------------------------- matmul

const PAR_FLOP_THRESHOLD: usize = 1 << 22;

/// c[m×n] = a[m×k]·b[k×n], ikj loop order (vectorizes over j).
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, crow: &mut [T]| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// c[m×n] = a[m×k]·b[n×k]ᵀ (row-dot-row).
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, crow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                s += *av * *bv;
            }
            *cv = s;
        }
    };
    if m * n * k > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// c[m×n] = a[k×m]ᵀ·b[k×n].
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, crow: &mut [T]| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// Standard matrix product, differentiable w.r.t. both operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = two_dims(a, "matmul")?;
    let [kb, n] = two_dims(b, "matmul")?;
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul: inner dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = mm_nn(&a.data(), &b.data(), m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            // dA = g·bᵀ, dB = aᵀ·g
            let da = if ac.needs_grad() { mm_nt(g, &bc.data(), m, n, k) } else { Vec::new() };
            let db = if bc.needs_grad() { mm_tn(&ac.data(), g, k, m, n) } else { Vec::new() };
            vec![da, db]
        }),
    ))
}

// ---------------------------------------------------------------- softmax / layer norm

/// Softmax along the last dimension, max-stabilized.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let m = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("softmax_lastdim: 0-d input".into()))?;
    if m < 1 {
        return Err(Error::Dimension("softmax_lastdim: empty last dimension".into()));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax_lastdim: non-finite input".into()));
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(m) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / s));
    }
    let saved = data.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ((grow, yrow), dxrow) in
                g.chunks(m).zip(saved.chunks(m)).zip(dx.chunks_mut(m))
            {
                let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                for ((d, &gv), &yv) in dxrow.iter_mut().zip(grow).zip(yrow) {
                    *d = yv * (gv - dot);
                }
            }
            vec![dx]
        }),
    ))
}

/// Layer normalization over the last dimension with affine gain/bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("layer_norm: eps must be > 0".into()));
    }
    let m = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("layer_norm: 0-d input".into()))?;
    if gain.numel() != m || bias.numel() != m {
        return Err(Error::Dimension(format!(
            "layer_norm: gain/bias numel {}/{} != last dim {m}",
            gain.numel(),
            bias.numel()
        )));
    }
    let gd = gain.to_vec();
    let bd = bias.to_vec();
    let rows = x.numel() / m;
    let inv_m = T::one() / T::from_usizec(m);
    let mut data = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_sigma = Vec::with_capacity(rows);
    for row in x.data().chunks(m) {
        let mu: T = row.iter().copied().sum::<T>() * inv_m;
        let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
        let is = T::one() / (var + eps).sqrt();
        inv_sigma.push(is);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mu) * is;
            xhat.push(xh);
            data.push(gd[j] * xh + bd[j]);
        }
    }
    let (gc, _bc) = (gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g| {
            let gd = gc.to_vec();
            let mut dx = vec![T::zero(); g.len()];
            let mut dgain = vec![T::zero(); m];
            let mut dbias = vec![T::zero(); m];
            for (r, (grow, xhrow)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                let is = inv_sigma[r];
                // d = gain ∘ dy
                let d: Vec<T> = grow.iter().zip(&gd).map(|(&gv, &ga)| gv * ga).collect();
                let mean_d: T = d.iter().copied().sum::<T>() * inv_m;
                let mean_dx: T =
                    d.iter().zip(xhrow).map(|(&dv, &xh)| dv * xh).sum::<T>() * inv_m;
                for j in 0..m {
                    dx[r * m + j] = (d[j] - mean_d - xhrow[j] * mean_dx) * is;
                    dgain[j] += grow[j] * xhrow[j];
                    dbias[j] += grow[j];
                }
            }
            vec![dx, dgain, dbias]
        }),
    ))
}

// ---------------------------------------------------------------- convolutions

/// 2D convolution, stride 1, symmetric zero padding. x: [Cin,H,W],
/// w: [Cout,Cin,kh,kw], b: [Cout].
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd) = three_dims(x, "conv2d input")?;
    let ws = w.shape().to_vec();
    if ws.len() != 4 || ws[1] != cin {
        return Err(Error::Dimension(format!(
            "conv2d: weight {ws:?} incompatible with input channels {cin}"
        )));
    }
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.numel() != cout {
        return Err(Error::Dimension(format!("conv2d: bias numel {} != {cout}", b.numel())));
    }
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let xd = x.data();
    let wv = w.to_vec();
    let bv = b.to_vec();
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bv[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= wd {
                                continue;
                            }
                            let ix = ix - pad;
                            s += wv[((co * cin + ci) * kh + ky) * kw + kx]
                                * xd[(ci * h + iy) * wd + ix];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    drop(xd);
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        vec![cout, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xd = xc.data();
            let wv = wc.to_vec();
            let mut dx = vec![T::zero(); cin * h * wd];
            let mut dw = vec![T::zero(); cout * cin * kh * kw];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(co * oh + oy) * ow + ox];
                        if gv == T::zero() {
                            continue;
                        }
                        db[co] += gv;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kw {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                    let xi = (ci * h + iy) * wd + ix;
                                    dx[xi] += gv * wv[wi];
                                    dw[wi] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw, db]
        }),
    ))
}

/// Transposed convolution. x: [Cin,H,W], w: [Cin,Cout,kh,kw], b: [Cout].
/// Padding (k - stride)/2 is chosen so output extent = stride × input extent.
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd) = three_dims(x, "deconv2d input")?;
    let ws = w.shape().to_vec();
    if ws.len() != 4 || ws[0] != cin {
        return Err(Error::Dimension(format!(
            "deconv2d: weight {ws:?} incompatible with input channels {cin}"
        )));
    }
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    if stride < 1 || kh < stride || kw < stride {
        return Err(Error::Dimension(format!(
            "deconv2d: kernel {kh}×{kw} must be ≥ stride {stride}"
        )));
    }
    if (kh - stride) % 2 != 0 || (kw - stride) % 2 != 0 {
        return Err(Error::Dimension(format!(
            "deconv2d: kernel {kh}×{kw} and stride {stride} admit no exact-upsample padding"
        )));
    }
    if b.numel() != cout {
        return Err(Error::Dimension(format!("deconv2d: bias numel {} != {cout}", b.numel())));
    }
    let pad_y = (kh - stride) / 2;
    let pad_x = (kw - stride) / 2;
    let oh = h * stride;
    let ow = wd * stride;
    let xd = x.data();
    let wv = w.to_vec();
    let bv = b.to_vec();
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        for p in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *p = bv[co];
        }
    }
    for ci in 0..cin {
        for y in 0..h {
            for xw in 0..wd {
                let xv = xd[(ci * h + y) * wd + xw];
                if xv == T::zero() {
                    continue;
                }
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = y * stride + ky;
                        if oy < pad_y || oy - pad_y >= oh {
                            continue;
                        }
                        let oy = oy - pad_y;
                        for kx in 0..kw {
                            let ox = xw * stride + kx;
                            if ox < pad_x || ox - pad_x >= ow {
                                continue;
                            }
                            let ox = ox - pad_x;
                            out[(co * oh + oy) * ow + ox] +=
                                xv * wv[((ci * cout + co) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        vec![cout, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xd = xc.data();
            let wv = wc.to_vec();
            let mut dx = vec![T::zero(); cin * h * wd];
            let mut dw = vec![T::zero(); cin * cout * kh * kw];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for &gv in &g[co * oh * ow..(co + 1) * oh * ow] {
                    db[co] += gv;
                }
            }
            for ci in 0..cin {
                for y in 0..h {
                    for xw in 0..wd {
                        let xi = (ci * h + y) * wd + xw;
                        let xv = xd[xi];
                        for co in 0..cout {
                            for ky in 0..kh {
                                let oy = y * stride + ky;
                                if oy < pad_y || oy - pad_y >= oh {
                                    continue;
                                }
                                let oy = oy - pad_y;
                                for kx in 0..kw {
                                    let ox = xw * stride + kx;
                                    if ox < pad_x || ox - pad_x >= ow {
                                        continue;
                                    }
                                    let ox = ox - pad_x;
                                    let gv = g[(co * oh + oy) * ow + ox];
                                    let wi = ((ci * cout + co) * kh + ky) * kw + kx;
                                    dx[xi] += gv * wv[wi];
                                    dw[wi] += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw, db]
        }),
    ))
}

fn three_dims<T: Scalar>(a: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    match a.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Dimension(format!("{op}: expected 3-d tensor, got {s:?}"))),
    }
}

// ---------------------------------------------------------------- bilinear sampling

/// Bilinear sample of a [H,W,d] plane at K normalized uv points.
///
/// uv = -1 maps to the center of the first texel, uv = +1 to the center of
/// the last (align-corners-true); out-of-range uv clamps to the border.
/// Differentiable w.r.t. both plane values and uv.
pub fn bilinear_sample_2d<T: Scalar>(plane: &Tensor<T>, uv: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d) = three_dims(plane, "bilinear_sample_2d plane")?;
    let [k, two] = two_dims(uv, "bilinear_sample_2d uv")?;
    if two != 2 {
        return Err(Error::Dimension(format!(
            "bilinear_sample_2d: uv must be [K×2], got {:?}",
            uv.shape()
        )));
    }
    if uv.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("bilinear_sample_2d: NaN uv".into()));
    }
    let half = T::from_f64c(0.5);
    let one = T::one();
    let uvd = uv.to_vec();
    let pd = plane.data();
    let mut out = vec![T::zero(); k * d];
    // Per-point interpolation state saved for backward.
    let mut corners: Vec<(usize, usize, usize, usize, T, T, bool, bool)> =
        Vec::with_capacity(k);
    for p in 0..k {
        let u = uvd[2 * p];
        let v = uvd[2 * p + 1];
        let (uc, u_clamped) = clamp_unit(u);
        let (vc, v_clamped) = clamp_unit(v);
        let py = (uc + one) * half * T::from_usizec(h - 1);
        let px = (vc + one) * half * T::from_usizec(w - 1);
        let i0 = py.floor().to_usize().unwrap_or(0).min(h - 1);
        let j0 = px.floor().to_usize().unwrap_or(0).min(w - 1);
        let i1 = (i0 + 1).min(h - 1);
        let j1 = (j0 + 1).min(w - 1);
        let fy = py - T::from_usizec(i0);
        let fx = px - T::from_usizec(j0);
        corners.push((i0, i1, j0, j1, fy, fx, u_clamped, v_clamped));
        let orow = &mut out[p * d..(p + 1) * d];
        for c in 0..d {
            let v00 = pd[(i0 * w + j0) * d + c];
            let v01 = pd[(i0 * w + j1) * d + c];
            let v10 = pd[(i1 * w + j0) * d + c];
            let v11 = pd[(i1 * w + j1) * d + c];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            orow[c] = top + (bot - top) * fy;
        }
    }
    drop(pd);
    let (pc, uvc) = (plane.clone(), uv.clone());
    Ok(Tensor::from_op(
        vec![k, d],
        out,
        vec![plane.clone(), uv.clone()],
        Box::new(move |g| {
            let pd = pc.data();
            let one = T::one();
            let half = T::from_f64c(0.5);
            let dplane_needed = pc.needs_grad();
            let duv_needed = uvc.needs_grad();
            let mut dplane =
                if dplane_needed { vec![T::zero(); h * w * d] } else { Vec::new() };
            let mut duv = if duv_needed { vec![T::zero(); k * 2] } else { Vec::new() };
            let su = half * T::from_usizec(h - 1);
            let sv = half * T::from_usizec(w - 1);
            for p in 0..k {
                let (i0, i1, j0, j1, fy, fx, ucl, vcl) = corners[p];
                let grow = &g[p * d..(p + 1) * d];
                let mut du = T::zero();
                let mut dv = T::zero();
                for c in 0..d {
                    let gv = grow[c];
                    if dplane_needed {
                        dplane[(i0 * w + j0) * d + c] += gv * (one - fy) * (one - fx);
                        dplane[(i0 * w + j1) * d + c] += gv * (one - fy) * fx;
                        dplane[(i1 * w + j0) * d + c] += gv * fy * (one - fx);
                        dplane[(i1 * w + j1) * d + c] += gv * fy * fx;
                    }
                    if duv_needed {
                        let v00 = pd[(i0 * w + j0) * d + c];
                        let v01 = pd[(i0 * w + j1) * d + c];
                        let v10 = pd[(i1 * w + j0) * d + c];
                        let v11 = pd[(i1 * w + j1) * d + c];
                        let dfy = (v10 + (v11 - v10) * fx) - (v00 + (v01 - v00) * fx);
                        let dfx = (v01 - v00) + ((v11 - v10) - (v01 - v00)) * fy;
                        du += gv * dfy;
                        dv += gv * dfx;
                    }
                }
                if duv_needed {
                    duv[2 * p] = if ucl { T::zero() } else { du * su };
                    duv[2 * p + 1] = if vcl { T::zero() } else { dv * sv };
                }
            }
            vec![dplane, duv]
        }),
    ))
}

fn clamp_unit<T: Scalar>(v: T) -> (T, bool) {
    let one = T::one();
    if v < -one {
        (-one, true)
    } else if v > one {
        (one, true)
    } else {
        (v, false)
    }
}

// ---------------------------------------------------------------- volume compositing

/// Alpha-composite per-sample density and color along rays.
///
/// sigma: [R×S], rgb: [R×S×3], deltas: per-sample spacing (R×S, constant),
/// background: 3 values. Output [R×3]:
/// pixel = Σ wᵢ·rgbᵢ + T_final·bg with wᵢ = αᵢ·∏_{j<i}(1−αⱼ), αᵢ = 1−exp(−σᵢδᵢ).
pub fn volume_composite<T: Scalar>(
    sigma: &Tensor<T>,
    rgb: &Tensor<T>,
    deltas: Rc<Vec<T>>,
    background: [T; 3],
) -> Result<Tensor<T>> {
    let [r, s] = two_dims(sigma, "volume_composite sigma")?;
    if rgb.shape() != [r, s, 3] {
        return Err(Error::Dimension(format!(
            "volume_composite: rgb shape {:?} != [{r},{s},3]",
            rgb.shape()
        )));
    }
    if deltas.len() != r * s {
        return Err(Error::Dimension(format!(
            "volume_composite: deltas len {} != {}",
            deltas.len(),
            r * s
        )));
    }
    let one = T::one();
    let sd = sigma.data();
    let cd = rgb.data();
    let mut out = vec![T::zero(); r * 3];
    // Saved per-sample weights and post-sample transmittances T_{i+1}.
    let mut weights = vec![T::zero(); r * s];
    let mut trans_after = vec![T::zero(); r * s];
    for ray in 0..r {
        let mut trans = one;
        let mut px = [T::zero(); 3];
        for i in 0..s {
            let idx = ray * s + i;
            let alpha = one - (-sd[idx] * deltas[idx]).exp();
            let wgt = trans * alpha;
            weights[idx] = wgt;
            for c in 0..3 {
                px[c] += wgt * cd[idx * 3 + c];
            }
            trans *= one - alpha;
            trans_after[idx] = trans;
        }
        for c in 0..3 {
            out[ray * 3 + c] = px[c] + trans * background[c];
        }
    }
    drop(sd);
    drop(cd);
    let cc = rgb.clone();
    let deltas_b = Rc::clone(&deltas);
    Ok(Tensor::from_op(
        vec![r, 3],
        out,
        vec![sigma.clone(), rgb.clone()],
        Box::new(move |g| {
            let cd = cc.data();
            let mut dsigma = vec![T::zero(); r * s];
            let mut drgb = vec![T::zero(); r * s * 3];
            for ray in 0..r {
                let gray = &g[ray * 3..ray * 3 + 3];
                // d pixel / d rgb_i = w_i
                for i in 0..s {
                    let idx = ray * s + i;
                    for c in 0..3 {
                        drgb[idx * 3 + c] = weights[idx] * gray[c];
                    }
                }
                // suffix_i = Σ_{j>i} w_j·⟨g,rgb_j⟩ + T_final·⟨g,bg⟩
                let t_final = trans_after[ray * s + s - 1];
                let gbg: T = (0..3).map(|c| gray[c] * background[c]).sum();
                let mut suffix = t_final * gbg;
                for i in (0..s).rev() {
                    let idx = ray * s + i;
                    let grgb: T = (0..3).map(|c| gray[c] * cd[idx * 3 + c]).sum();
                    // dc/dσ_i = δ_i · (T_{i+1}·⟨g,rgb_i⟩ − suffix_i)
                    dsigma[idx] = deltas_b[idx] * (trans_after[idx] * grgb - suffix);
                    suffix += weights[idx] * grgb;
                }
            }
            drop(cd);
            vec![dsigma, drgb]
        }),
    ))
}
