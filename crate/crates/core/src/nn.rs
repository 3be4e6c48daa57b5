//! Dense kernels with their backward passes: 1x1 channel mixing, grouped
//! stride-1 convolution, layer normalization over channels, GELU,
//! patchification, pooling and cross-entropy.

use crate::error::{shape_err, Result};
use crate::tensor::{OffsetOrder, Scalar, Tensor};

/// `dst[y,x] += alpha * src[y+dy, x+dx]`, zero outside the map.
#[inline]
pub(crate) fn shift_axpy<T: Scalar>(src: &[T], dst: &mut [T], (dy, dx): (isize, isize), h: usize, w: usize, alpha: T) {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
    if x_lo >= x_hi {
        return;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
        let s = &src[s0 as usize..s0 as usize + (x_hi - x_lo)];
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        for (a, &v) in d.iter_mut().zip(s) {
            *a += alpha * v;
        }
    }
}

/// `sum_{y,x} a[y,x] * b[y+dy, x+dx]` over in-bounds pairs.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], (dy, dx): (isize, isize), h: usize, w: usize) -> T {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
    let mut acc = T::zero();
    if x_lo >= x_hi {
        return acc;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let s0 = ((sy as usize * w) as isize + x_lo as isize + dx) as usize;
        let bs = &b[s0..s0 + (x_hi - x_lo)];
        let as_ = &a[y * w + x_lo..y * w + x_hi];
        for (&u, &v) in as_.iter().zip(bs) {
            acc += u * v;
        }
    }
    acc
}

/// 1x1 convolution: `out[b,o,p] = sum_i weight[o,i] x[b,i,p] + bias[o]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [b, cin, h, w] = x.dims4()?;
    let (cout, wcin) = match weight.dims() {
        [o, i] => (*o, *i),
        d => return shape_err(format!("linear weight must be 2-D, got {d:?}")),
    };
    if wcin != cin {
        return shape_err(format!("linear: input has {cin} channels, weight expects {wcin}"));
    }
    if let Some(bias) = bias {
        if bias.len() != cout {
            return shape_err("linear bias length");
        }
    }
    let p = h * w;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); b * cout * p];
    for bi in 0..b {
        let xb = &xd[bi * cin * p..(bi + 1) * cin * p];
        for o in 0..cout {
            let dst = &mut out[(bi * cout + o) * p..(bi * cout + o + 1) * p];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            let wrow = &wd[o * cin..(o + 1) * cin];
            for (i, &wv) in wrow.iter().enumerate() {
                let src = &xb[i * p..(i + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, h, w], out))
}

/// Gradients of [`linear`]: `(dx, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, cin, h, w] = x.dims4()?;
    let cout = weight.dims()[0];
    let p = h * w;
    if grad.len() != b * cout * p {
        return shape_err("linear gradient shape");
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for bi in 0..b {
        for o in 0..cout {
            let g = &gd[(bi * cout + o) * p..(bi * cout + o + 1) * p];
            db[o] += g.iter().copied().sum::<T>();
            for i in 0..cin {
                let xs = &xd[(bi * cin + i) * p..(bi * cin + i + 1) * p];
                let dxs = &mut dx[(bi * cin + i) * p..(bi * cin + i + 1) * p];
                let wv = wd[o * cin + i];
                let mut acc = T::zero();
                for ((d, &gv), &xv) in dxs.iter_mut().zip(g).zip(xs) {
                    *d += wv * gv;
                    acc += gv * xv;
                }
                dw[o * cin + i] += acc;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.dims().to_vec(), dx),
        Tensor::from_parts(weight.dims().to_vec(), dw),
        Tensor::from_parts(vec![cout], db),
    ))
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
) -> Result<([usize; 4], usize, usize, OffsetOrder)> {
    let dims = x.dims4()?;
    let [cout, cin_g, kh, kw] = weight.dims4()?;
    if kh != kw {
        return shape_err("square kernels only");
    }
    let order = OffsetOrder::new(kh)?;
    if groups == 0 || dims[1] % groups != 0 || cout % groups != 0 || dims[1] / groups != cin_g {
        return shape_err(format!(
            "grouped conv: input {:?}, weight {:?}, groups {groups}",
            x.dims(),
            weight.dims()
        ));
    }
    Ok((dims, cout, cin_g, order))
}

/// Stride-1 grouped correlation with zero padding `K/2`; weight `(Cout, Cin/groups, K, K)`.
pub fn grouped_conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let ([b, cin, h, w], cout, cin_g, order) = conv_dims(x, weight, groups)?;
    let p = h * w;
    let t_len = order.len();
    let cout_g = cout / groups;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); b * cout * p];
    for bi in 0..b {
        for o in 0..cout {
            let g = o / cout_g;
            let dst = &mut out[(bi * cout + o) * p..(bi * cout + o + 1) * p];
            for ic in 0..cin_g {
                let i = g * cin_g + ic;
                let src = &xd[(bi * cin + i) * p..(bi * cin + i + 1) * p];
                let kern = &wd[(o * cin_g + ic) * t_len..(o * cin_g + ic + 1) * t_len];
                for (t, &kv) in kern.iter().enumerate() {
                    if kv != T::zero() {
                        shift_axpy(src, dst, order.offsets()[t], h, w, kv);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, h, w], out))
}

/// Gradients of [`grouped_conv2d`]: `(dx, dweight)`.
pub fn grouped_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
    grad: &Tensor<T>,
    need_weight: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let ([b, cin, h, w], cout, cin_g, order) = conv_dims(x, weight, groups)?;
    let p = h * w;
    let t_len = order.len();
    let cout_g = cout / groups;
    if grad.len() != b * cout * p {
        return shape_err("conv gradient shape");
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = if need_weight {
        vec![T::zero(); weight.len()]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for o in 0..cout {
            let g = o / cout_g;
            let go = &gd[(bi * cout + o) * p..(bi * cout + o + 1) * p];
            for ic in 0..cin_g {
                let i = g * cin_g + ic;
                let widx = (o * cin_g + ic) * t_len;
                let src = &xd[(bi * cin + i) * p..(bi * cin + i + 1) * p];
                let dxs = &mut dx[(bi * cin + i) * p..(bi * cin + i + 1) * p];
                for t in 0..t_len {
                    let (dy, dxo) = order.offsets()[t];
                    let kv = wd[widx + t];
                    if kv != T::zero() {
                        shift_axpy(go, dxs, (-dy, -dxo), h, w, kv);
                    }
                    if need_weight {
                        dw[widx + t] += shifted_dot(go, src, (dy, dxo), h, w);
                    }
                }
            }
        }
    }
    let dw = need_weight.then(|| Tensor::from_parts(weight.dims().to_vec(), dw));
    Ok((Tensor::from_parts(x.dims().to_vec(), dx), dw))
}

/// Depth-wise sliding-window correlation, weight `(C, K, K)`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    let w4 = depthwise_weight(weight, c)?;
    grouped_conv2d(x, &w4, c)
}

pub(crate) fn depthwise_weight<T: Scalar>(weight: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    match weight.dims() {
        [wc, k, k2] if *wc == c && k == k2 => weight.clone().reshape(&[c, 1, *k, *k]),
        [wc, 1, k, k2] if *wc == c && k == k2 => Ok(weight.clone()),
        d => shape_err(format!("depth-wise weight {d:?} for {c} channels")),
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let k = T::from_f64(INV_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * k).erf()))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    let k = T::from_f64(INV_SQRT_2);
    let c = T::from_f64(INV_SQRT_2PI);
    x.zip_map(grad, |v, g| {
        let cdf = half * (T::one() + (v * k).erf());
        let pdf = c * (-half * v * v).exp();
        g * (cdf + v * pdf)
    })
}

/// Layer normalization across the channel axis of `(B,C,H,W)` at every pixel.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return shape_err("layer norm affine length");
    }
    let p = h * w;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.len()];
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(eps);
    let mut mean = vec![T::zero(); p];
    let mut var = vec![T::zero(); p];
    for bi in 0..b {
        let xb = &xd[bi * c * p..(bi + 1) * c * p];
        mean.fill(T::zero());
        var.fill(T::zero());
        for ci in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xb[ci * p..(ci + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ci in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xb[ci * p..(ci + 1) * p]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = T::one() / (*s * inv_c + eps).sqrt());
        let ob = &mut out[bi * c * p..(bi + 1) * c * p];
        for ci in 0..c {
            let (g, be) = (gd[ci], bd[ci]);
            for pi in 0..p {
                ob[ci * p + pi] = (xb[ci * p + pi] - mean[pi]) * var[pi] * g + be;
            }
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Gradients of [`layer_norm_channels`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = x.dims4()?;
    let p = h * w;
    let (xd, gmd, gd) = (x.data(), gamma.data(), grad.data());
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(eps);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut gh = vec![T::zero(); c];
    for bi in 0..b {
        let base = bi * c * p;
        for pi in 0..p {
            let mut m = T::zero();
            for ci in 0..c {
                m += xd[base + ci * p + pi];
            }
            m *= inv_c;
            let mut v = T::zero();
            for ci in 0..c {
                let d = xd[base + ci * p + pi] - m;
                v += d * d;
            }
            let rstd = T::one() / (v * inv_c + eps).sqrt();
            let mut mean_gh = T::zero();
            let mut mean_gh_xhat = T::zero();
            for ci in 0..c {
                let k = base + ci * p + pi;
                xhat[ci] = (xd[k] - m) * rstd;
                gh[ci] = gd[k] * gmd[ci];
                dgamma[ci] += gd[k] * xhat[ci];
                dbeta[ci] += gd[k];
                mean_gh += gh[ci];
                mean_gh_xhat += gh[ci] * xhat[ci];
            }
            mean_gh *= inv_c;
            mean_gh_xhat *= inv_c;
            for ci in 0..c {
                dx[base + ci * p + pi] = rstd * (gh[ci] - mean_gh - xhat[ci] * mean_gh_xhat);
            }
        }
    }
    Ok((
        Tensor::from_parts(x.dims().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

/// Non-overlapping `p x p` patches stacked into channels: `(B,C,H,W) -> (B,C*p*p,H/p,W/p)`.
///
/// Output channel `c*p*p + dy*p + dx` holds input channel `c` at offset `(dy,dx)`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("patch {patch} does not tile {h}x{w}"));
    }
    let (ho, wo) = (h / patch, w / patch);
    let cout = c * patch * patch;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    let oc = ci * patch * patch + dy * patch + dx;
                    for y in 0..ho {
                        for xo in 0..wo {
                            out[((bi * cout + oc) * ho + y) * wo + xo] =
                                xd[((bi * c + ci) * h + y * patch + dy) * w + xo * patch + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, ho, wo], out))
}

/// Inverse of [`patchify`], which is also its adjoint.
pub fn unpatchify<T: Scalar>(x: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let [b, cp, ho, wo] = x.dims4()?;
    if cp != channels * patch * patch {
        return shape_err("unpatchify channel count");
    }
    let (h, w) = (ho * patch, wo * patch);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..channels {
            for dy in 0..patch {
                for dx in 0..patch {
                    let oc = ci * patch * patch + dy * patch + dx;
                    for y in 0..ho {
                        for xo in 0..wo {
                            out[((bi * channels + ci) * h + y * patch + dy) * w + xo * patch + dx] =
                                xd[((bi * cp + oc) * ho + y) * wo + xo];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, channels, h, w], out))
}

/// Spatial mean: `(B,C,H,W) -> (B,C,1,1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let p = h * w;
    let inv = T::from_f64(1.0 / p as f64);
    let data = x
        .data()
        .chunks_exact(p)
        .map(|s| s.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![b, c, 1, 1], data))
}

pub fn global_avg_pool_backward<T: Scalar>(dims: [usize; 4], grad: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = dims;
    let p = h * w;
    let inv = T::from_f64(1.0 / p as f64);
    let mut out = Vec::with_capacity(b * c * p);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, p));
    }
    Tensor::from_parts(dims.to_vec(), out)
}

/// Log-softmax rows of `(B, N, ..)` logits flattened to `(B, N)`.
fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> (usize, usize, Vec<T>) {
    let b = logits.dims()[0];
    let n = logits.len() / b;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    (b, n, out)
}

/// Mean cross-entropy of `(B, N, ..)` logits against class labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, n, ls) = log_softmax_rows(logits);
    if labels.len() != b || labels.iter().any(|&l| l >= n) {
        return shape_err("labels do not match logits");
    }
    let total: T = labels.iter().enumerate().map(|(i, &l)| -ls[i * n + l]).sum();
    Ok(total / T::from_f64(b as f64))
}

pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let (b, n, mut ls) = log_softmax_rows(logits);
    let scale = grad / T::from_f64(b as f64);
    for (i, row) in ls.chunks_exact_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let p = v.exp();
            let y = if j == labels[i] { T::one() } else { T::zero() };
            *v = (p - y) * scale;
        }
    }
    Tensor::from_parts(logits.dims().to_vec(), ls)
}

/// Row-wise argmax of `(B, N, ..)` logits.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let b = logits.dims()[0];
    let n = logits.len() / b;
    logits
        .data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depthwise_center_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::<f64>::zeros(&[2, 3, 3]);
        k.set(&[0, 1, 1], 1.0);
        k.set(&[1, 1, 1], 1.0);
        assert_eq!(depthwise_conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn depthwise_all_ones_counts_neighbors() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn patchify_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 6], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[2, 12, 2, 3]);
        assert_eq!(unpatchify(&p, 2, 3).unwrap(), x);
        assert!(patchify(&x, 4).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::<f64>::zeros(&[2, 10]);
        let l = cross_entropy(&z, &[3, 7]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&z, &[3, 10]).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_655_253_931_457).abs() < 1e-12);
    }
}
