use super::{OffsetOrder, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_FILTER_EPS: f64 = 1e-5;

/// im2col with zero padding `(K-1)/2`: `(B,C,H,W) -> (B,C,K*K,H*W)`.
pub fn unfold<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let order = OffsetOrder::new(kernel)?;
    let [b, c, h, w] = x.dims4()?;
    let t_len = order.len();
    let p = h * w;
    let mut out = vec![T::zero(); b * c * t_len * p];
    let src = x.data();
    for bc in 0..b * c {
        let plane = &src[bc * p..(bc + 1) * p];
        let dst = &mut out[bc * t_len * p..(bc + 1) * t_len * p];
        for t in 0..t_len {
            let row = &mut dst[t * p..(t + 1) * p];
            shift_into(plane, row, order.offsets()[t], h, w, false);
        }
    }
    Ok(Tensor::from_parts(vec![b, c, t_len, p], out))
}

/// Adjoint of [`unfold`]: folds patch columns back by summation.
pub fn unfold_backward<T: Scalar>(grad: &Tensor<T>, dims: [usize; 4], kernel: usize) -> Result<Tensor<T>> {
    let order = OffsetOrder::new(kernel)?;
    let [b, c, h, w] = dims;
    let t_len = order.len();
    let p = h * w;
    if grad.dims() != [b, c, t_len, p] && grad.len() != b * c * t_len * p {
        return shape_err("unfold gradient shape");
    }
    let mut out = vec![T::zero(); b * c * p];
    let g = grad.data();
    for bc in 0..b * c {
        let dst = &mut out[bc * p..(bc + 1) * p];
        for t in 0..t_len {
            let row = &g[(bc * t_len + t) * p..(bc * t_len + t + 1) * p];
            let (dy, dx) = order.offsets()[t];
            shift_into(row, dst, (-dy, -dx), h, w, true);
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

/// `dst[y,x] (+)= src[y+dy, x+dx]`, zero outside the map.
#[inline]
pub(crate) fn shift_into<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    (dy, dx): (isize, isize),
    h: usize,
    w: usize,
    accumulate: bool,
) {
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        if x_lo >= x_hi {
            continue;
        }
        let sy = sy as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let s_start = (sy * w) as isize + x_lo as isize + dx;
        let s = &src[s_start as usize..s_start as usize + (x_hi - x_lo)];
        if accumulate {
            for (a, &v) in d.iter_mut().zip(s) {
                *a += v;
            }
        } else {
            d.copy_from_slice(s);
        }
    }
}

/// Numerically stabilized softmax over `axis`.
pub fn softmax_over<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    x.reject_nan("softmax input")?;
    let (outer, len, inner) = x.axis_split(axis)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for t in 0..len {
                m = m.max(data[base + t * inner + i]);
            }
            if m == T::neg_infinity() {
                return Err(Error::NaN("softmax slice with no finite logit".into()));
            }
            let mut s = T::zero();
            for t in 0..len {
                let e = (data[base + t * inner + i] - m).exp();
                data[base + t * inner + i] = e;
                s += e;
            }
            let inv = T::one() / s;
            for t in 0..len {
                data[base + t * inner + i] *= inv;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_over_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.expect_same_dims(grad)?;
    let (outer, len, inner) = y.axis_split(axis)?;
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for t in 0..len {
                let k = base + t * inner + i;
                dot += yd[k] * gd[k];
            }
            for t in 0..len {
                let k = base + t * inner + i;
                out[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.dims().to_vec(), out))
}

/// Per-slice standardization `(v - mean) / (std + eps)` along `axis`,
/// population standard deviation. Zero-variance slices map to zeros.
pub fn filter_normalize_axis<T: Scalar>(x: &Tensor<T>, axis: usize, eps: f64) -> Result<Tensor<T>> {
    x.reject_nan("filter normalization input")?;
    let (outer, len, inner) = x.axis_split(axis)?;
    if len < 2 {
        return Err(Error::DegenerateFilterAxis);
    }
    let eps = T::from_f64(eps);
    let n = T::from_f64(len as f64);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let (mean, std) = slice_moments(data, base, len, inner, i, n);
            let denom = std + eps;
            for t in 0..len {
                let k = base + t * inner + i;
                data[k] = if std == T::zero() {
                    T::zero()
                } else {
                    (data[k] - mean) / denom
                };
            }
        }
    }
    Ok(out)
}

#[inline]
fn slice_moments<T: Scalar>(data: &[T], base: usize, len: usize, inner: usize, i: usize, n: T) -> (T, T) {
    let mut mean = T::zero();
    for t in 0..len {
        mean += data[base + t * inner + i];
    }
    mean = mean / n;
    let mut var = T::zero();
    for t in 0..len {
        let d = data[base + t * inner + i] - mean;
        var += d * d;
    }
    (mean, (var / n).sqrt())
}

/// Vector-Jacobian product of [`filter_normalize_axis`] given its input `x`.
pub fn filter_normalize_axis_backward<T: Scalar>(
    x: &Tensor<T>,
    grad: &Tensor<T>,
    axis: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    x.expect_same_dims(grad)?;
    let (outer, len, inner) = x.axis_split(axis)?;
    let eps = T::from_f64(eps);
    let n = T::from_f64(len as f64);
    let (xd, gd) = (x.data(), grad.data());
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let (mean, std) = slice_moments(xd, base, len, inner, i, n);
            if std == T::zero() {
                continue;
            }
            let denom = std + eps;
            let mut g_mean = T::zero();
            let mut g_dot_d = T::zero();
            for t in 0..len {
                let k = base + t * inner + i;
                g_mean += gd[k];
                g_dot_d += gd[k] * (xd[k] - mean);
            }
            g_mean = g_mean / n;
            let coef = g_dot_d / (denom * denom * n * std);
            for t in 0..len {
                let k = base + t * inner + i;
                out[k] = (gd[k] - g_mean) / denom - coef * (xd[k] - mean);
            }
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// `out[b, m.., h, w] = sum_c x[b,c,h,w] * table[c, m..]`.
///
/// The table's trailing axes are kept in the output, so a `(C,G,T)` table
/// yields `(B,G,T,H,W)`.
pub fn contract_channel<T: Scalar>(x: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if table.dims()[0] != c || table.ndim() < 2 {
        return shape_err(format!(
            "contract_channel: input {:?} vs table {:?}",
            x.dims(),
            table.dims()
        ));
    }
    let m = table.len() / c;
    let p = h * w;
    let (xd, td) = (x.data(), table.data());
    let mut out = vec![T::zero(); b * m * p];
    for bi in 0..b {
        let ob = &mut out[bi * m * p..(bi + 1) * m * p];
        for ci in 0..c {
            let xs = &xd[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            let trow = &td[ci * m..(ci + 1) * m];
            for (mi, &wv) in trow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let dst = &mut ob[mi * p..(mi + 1) * p];
                for (d, &s) in dst.iter_mut().zip(xs) {
                    *d += wv * s;
                }
            }
        }
    }
    let mut dims = vec![b];
    dims.extend_from_slice(&table.dims()[1..]);
    dims.extend_from_slice(&[h, w]);
    Ok(Tensor::from_parts(dims, out))
}

/// Gradients of [`contract_channel`] with respect to `(x, table)`.
pub fn contract_channel_backward<T: Scalar>(
    x: &Tensor<T>,
    table: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = x.dims4()?;
    let m = table.len() / c;
    let p = h * w;
    if grad.len() != b * m * p {
        return shape_err("contract_channel gradient shape");
    }
    let (xd, td, gd) = (x.data(), table.data(), grad.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dt = vec![T::zero(); table.len()];
    for bi in 0..b {
        for ci in 0..c {
            let xs = &xd[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            let dxs = &mut dx[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            for mi in 0..m {
                let gs = &gd[(bi * m + mi) * p..(bi * m + mi + 1) * p];
                let wv = td[ci * m + mi];
                let mut acc = T::zero();
                for ((d, &g), &s) in dxs.iter_mut().zip(gs).zip(xs) {
                    *d += wv * g;
                    acc += g * s;
                }
                dt[ci * m + mi] += acc;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.dims().to_vec(), dx),
        Tensor::from_parts(table.dims().to_vec(), dt),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp3() -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64)
    }

    fn column(u: &Tensor<f64>, pixel: usize) -> Vec<f64> {
        let [_, _, t, p] = u.dims4().unwrap();
        (0..t).map(|ti| u.data()[ti * p + pixel]).collect()
    }

    #[test]
    fn unfold_identity_kernel() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let u = unfold(&x, 1).unwrap();
        assert_eq!(u.dims(), &[1, 1, 1, 1]);
        assert_eq!(u.data(), &[5.0]);
    }

    #[test]
    fn unfold_center_and_corner_columns() {
        let u = unfold(&ramp3(), 3).unwrap();
        assert_eq!(u.dims(), &[1, 1, 9, 9]);
        assert_eq!(column(&u, 4), vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(column(&u, 0), vec![0., 0., 0., 0., 1., 2., 0., 4., 5.]);
    }

    #[test]
    fn unfold_rejects_even_kernel_and_non_4d() {
        assert!(matches!(unfold(&ramp3(), 2), Err(Error::EvenKernel(2))));
        let x = Tensor::<f64>::zeros(&[3, 3]);
        assert!(unfold(&x, 3).is_err());
    }

    #[test]
    fn unfold_of_ones_counts_interior_multiplicity() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let u = unfold(&x, 3).unwrap();
        // interior pixel (2,2)
        let s: f64 = column(&u, 12).iter().sum();
        assert_eq!(s, 9.0);
        let corner: f64 = column(&u, 0).iter().sum();
        assert_eq!(corner, 4.0);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::zeros(&[3]);
        let y = softmax_over(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f32>::new(&[2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_over(&x, 0).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::new(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let y = softmax_over(&x, 0).unwrap();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f64>::new(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_over(&x, 0), Err(Error::NaN(_))));
        assert!(softmax_over(&x, 1).is_err());
    }

    #[test]
    fn filter_normalize_examples() {
        let fnorm = |v: Vec<f64>| {
            let n = v.len();
            filter_normalize_axis(&Tensor::new(&[n], v).unwrap(), 0, 0.0)
                .unwrap()
                .into_data()
        };
        assert_eq!(fnorm(vec![1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(fnorm(vec![3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(fnorm(vec![0.0, 2.0]), vec![-1.0, 1.0]);
        let single = Tensor::<f64>::new(&[1], vec![4.0]).unwrap();
        assert!(matches!(
            filter_normalize_axis(&single, 0, 1e-5),
            Err(Error::DegenerateFilterAxis)
        ));
    }

    #[test]
    fn contract_channel_examples() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 7.0);
        let t = Tensor::<f64>::ones(&[1, 2, 3]);
        let y = contract_channel(&x, &t).unwrap();
        assert_eq!(y.dims(), &[1, 2, 3, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 7.0));

        let x = Tensor::<f64>::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let mut t = Tensor::<f64>::zeros(&[2, 1, 1]);
        t.set(&[0, 0, 0], 3.0);
        t.set(&[1, 0, 0], 4.0);
        assert_eq!(contract_channel(&x, &t).unwrap().data(), &[11.0]);

        let z = contract_channel(&x, &Tensor::zeros(&[2, 2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        assert!(contract_channel(&x, &Tensor::zeros(&[3, 2, 2])).is_err());
    }
}
