//! Element kernels behind the ELSA block and their backward passes.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{OffsetOrder, Scalar, Tensor};

/// Sign-preserving power `sgn(o) * |o|^lambda`.
#[inline]
pub fn spow<T: Scalar>(o: T, lambda: T) -> T {
    if o == T::zero() {
        return T::zero();
    }
    o.signum() * o.abs().powf(lambda)
}

/// Derivative of [`spow`]; taken as zero at `o = 0` unless `lambda = 1`.
#[inline]
pub fn spow_grad<T: Scalar>(o: T, lambda: T) -> T {
    if lambda == T::zero() {
        return T::zero();
    }
    if o == T::zero() {
        return if lambda == T::one() { T::one() } else { T::zero() };
    }
    lambda * o.abs().powf(lambda - T::one())
}

/// `out[b,g,t,p] = sum_c table[c,g,t] * unfolded[b,c,t,p]`.
pub fn contract_unfolded<T: Scalar>(unfolded: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, t_n, p] = unfolded.dims4()?;
    let g_n = match table.dims() {
        [tc, g, tt] if *tc == c && *tt == t_n => *g,
        d => return shape_err(format!("table {d:?} for unfolded {:?}", unfolded.dims())),
    };
    let (ud, td) = (unfolded.data(), table.data());
    let mut out = vec![T::zero(); b * g_n * t_n * p];
    for bi in 0..b {
        for ci in 0..c {
            for g in 0..g_n {
                for t in 0..t_n {
                    let wv = td[(ci * g_n + g) * t_n + t];
                    let src = &ud[((bi * c + ci) * t_n + t) * p..((bi * c + ci) * t_n + t + 1) * p];
                    let dst = &mut out[((bi * g_n + g) * t_n + t) * p..((bi * g_n + g) * t_n + t + 1) * p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, g_n, t_n, p], out))
}

pub fn contract_unfolded_backward<T: Scalar>(
    unfolded: &Tensor<T>,
    table: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, t_n, p] = unfolded.dims4()?;
    let g_n = table.dims()[1];
    if grad.len() != b * g_n * t_n * p {
        return shape_err("contract_unfolded gradient shape");
    }
    let (ud, td, gd) = (unfolded.data(), table.data(), grad.data());
    let mut du = vec![T::zero(); unfolded.len()];
    let mut dt = vec![T::zero(); table.len()];
    for bi in 0..b {
        for ci in 0..c {
            for g in 0..g_n {
                for t in 0..t_n {
                    let ti = (ci * g_n + g) * t_n + t;
                    let uo = ((bi * c + ci) * t_n + t) * p;
                    let go = ((bi * g_n + g) * t_n + t) * p;
                    let mut acc = T::zero();
                    for k in 0..p {
                        du[uo + k] += td[ti] * gd[go + k];
                        acc += ud[uo + k] * gd[go + k];
                    }
                    dt[ti] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(unfolded.dims().to_vec(), du),
        Tensor::from_parts(table.dims().to_vec(), dt),
    ))
}

/// Block-diagonal expansion of a per-head table `(C, T)` to `(C, G, T)`:
/// channel `c` only feeds head `c / (C/G)`.
pub fn expand_per_head<T: Scalar>(table: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (c, t_n) = match table.dims() {
        [c, t] => (*c, *t),
        d => return shape_err(format!("per-head table must be (C, T), got {d:?}")),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::HeadsChannels { heads, channels: c });
    }
    let per = c / heads;
    let mut out = vec![T::zero(); c * heads * t_n];
    for ci in 0..c {
        let g = ci / per;
        out[(ci * heads + g) * t_n..(ci * heads + g + 1) * t_n]
            .copy_from_slice(&table.data()[ci * t_n..(ci + 1) * t_n]);
    }
    Ok(Tensor::from_parts(vec![c, heads, t_n], out))
}

pub fn expand_per_head_backward<T: Scalar>(dims: &[usize], heads: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, t_n) = (dims[0], dims[1]);
    let per = c / heads;
    let mut out = vec![T::zero(); c * t_n];
    for ci in 0..c {
        let g = ci / per;
        out[ci * t_n..(ci + 1) * t_n].copy_from_slice(&grad.data()[(ci * heads + g) * t_n..(ci * heads + g + 1) * t_n]);
    }
    Ok(Tensor::from_parts(dims.to_vec(), out))
}

/// `(C, M..) x 2 -> (C, 2M)` with `out[c, 2m] = a[c,m]`, `out[c, 2m+1] = b[c,m]`.
pub fn interleave_tables<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_dims(b)?;
    let c = a.dims()[0];
    let m = a.len() / c;
    let mut out = Vec::with_capacity(2 * a.len());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        out.push(x);
        out.push(y);
    }
    Ok(Tensor::from_parts(vec![c, 2 * m], out))
}

pub fn interleave_tables_backward<T: Scalar>(dims: &[usize], grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (a, b): (Vec<T>, Vec<T>) = grad.data().chunks_exact(2).map(|p| (p[0], p[1])).unzip();
    Ok((
        Tensor::from_parts(dims.to_vec(), a),
        Tensor::from_parts(dims.to_vec(), b),
    ))
}

/// `(M..) -> (2M)` with the bias at even positions and zeros at odd ones.
pub fn pad_bias<T: Scalar>(bias: &Tensor<T>) -> Tensor<T> {
    let data = bias.data().iter().flat_map(|&v| [v, T::zero()]).collect();
    Tensor::from_parts(vec![2 * bias.len()], data)
}

pub fn pad_bias_backward<T: Scalar>(dims: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(dims.to_vec(), grad.data().iter().step_by(2).copied().collect())
}

/// Depth-wise one-hot kernels `(G*T, 1, K, K)`: channel `g*T + t` picks offset `t`.
pub fn shift_kernels<T: Scalar>(heads: usize, kernel: usize) -> Result<Tensor<T>> {
    let t_n = OffsetOrder::new(kernel)?.len();
    let mut w = Tensor::zeros(&[heads * t_n, 1, kernel, kernel]);
    for g in 0..heads {
        for t in 0..t_n {
            w.set(&[g * t_n + t, 0, t / kernel, t % kernel], T::one());
        }
    }
    Ok(w)
}

/// Grouped one-hot kernels `(G*T, 2, K, K)`: input pair `(2m, 2m+1)` maps to
/// output `m` as `center(in[2m]) + shift_t(in[2m+1])`.
pub fn merged_kernels<T: Scalar>(heads: usize, kernel: usize) -> Result<Tensor<T>> {
    let order = OffsetOrder::new(kernel)?;
    let (t_n, c) = (order.len(), order.center());
    let mut w = Tensor::zeros(&[heads * t_n, 2, kernel, kernel]);
    for g in 0..heads {
        for t in 0..t_n {
            w.set(&[g * t_n + t, 0, c / kernel, c % kernel], T::one());
            w.set(&[g * t_n + t, 1, t / kernel, t % kernel], T::one());
        }
    }
    Ok(w)
}

fn ghost_dims<T: Scalar>(
    h: &Tensor<T>,
    mul: &Tensor<T>,
    add: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    if h.ndim() < 3 {
        return shape_err(format!("attention {:?} needs (B, G, T, ..)", h.dims()));
    }
    let (b, g_n, t_n) = (h.dims()[0], h.dims()[1], h.dims()[2]);
    let p: usize = h.dims()[3..].iter().product();
    let c = mul.dims()[0];
    if mul.len() != c * t_n || add.dims() != mul.dims() {
        return shape_err(format!(
            "ghost matrices {:?}/{:?} for {t_n} filter elements",
            mul.dims(),
            add.dims()
        ));
    }
    if g_n == 0 || !c.is_multiple_of(g_n) || c < g_n {
        return Err(Error::HeadsChannels {
            heads: g_n,
            channels: c,
        });
    }
    Ok((b, g_n, t_n, p, c))
}

/// `out[b,c,t,..] = spow(O[c,t], lambda) * h[b, c % G, t, ..] + gamma * S[c,t]`.
pub fn ghost_head<T: Scalar>(
    h: &Tensor<T>,
    mul: &Tensor<T>,
    add: &Tensor<T>,
    lambda: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    let (b, g_n, t_n, p, c) = ghost_dims(h, mul, add)?;
    let (lam, gam) = (T::from_f64(lambda), T::from_f64(gamma));
    let (hd, md, ad) = (h.data(), mul.data(), add.data());
    let mut out = vec![T::zero(); b * c * t_n * p];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci % g_n;
            for t in 0..t_n {
                let o = spow(md[ci * t_n + t], lam);
                let s = gam * ad[ci * t_n + t];
                let src = &hd[((bi * g_n + gi) * t_n + t) * p..((bi * g_n + gi) * t_n + t + 1) * p];
                let dst = &mut out[((bi * c + ci) * t_n + t) * p..((bi * c + ci) * t_n + t + 1) * p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = o * v + s;
                }
            }
        }
    }
    let mut dims = h.dims().to_vec();
    dims[1] = c;
    Ok(Tensor::from_parts(dims, out))
}

/// Gradients of [`ghost_head`]: `(dh, dmul, dadd)`.
pub fn ghost_head_backward<T: Scalar>(
    h: &Tensor<T>,
    mul: &Tensor<T>,
    lambda: f64,
    gamma: f64,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, g_n, t_n, p, c) = ghost_dims(h, mul, mul)?;
    if grad.len() != b * c * t_n * p {
        return shape_err("ghost head gradient shape");
    }
    let (lam, gam) = (T::from_f64(lambda), T::from_f64(gamma));
    let (hd, md, gd) = (h.data(), mul.data(), grad.data());
    let mut dh = vec![T::zero(); h.len()];
    let mut dm = vec![T::zero(); mul.len()];
    let mut da = vec![T::zero(); mul.len()];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci % g_n;
            for t in 0..t_n {
                let ti = ci * t_n + t;
                let o = spow(md[ti], lam);
                let ho = ((bi * g_n + gi) * t_n + t) * p;
                let go = ((bi * c + ci) * t_n + t) * p;
                let mut hg = T::zero();
                let mut gs = T::zero();
                for k in 0..p {
                    dh[ho + k] += o * gd[go + k];
                    hg += hd[ho + k] * gd[go + k];
                    gs += gd[go + k];
                }
                dm[ti] += spow_grad(md[ti], lam) * hg;
                da[ti] += gam * gs;
            }
        }
    }
    Ok((
        Tensor::from_parts(h.dims().to_vec(), dh),
        Tensor::from_parts(mul.dims().to_vec(), dm),
        Tensor::from_parts(mul.dims().to_vec(), da),
    ))
}

fn global_dims<T: Scalar>(attn: &Tensor<T>, mul: &Tensor<T>) -> Result<[usize; 5]> {
    let [b, g_n, nq, nk] = attn.dims4()?;
    let (c, mk) = match mul.dims() {
        [c, n] => (*c, *n),
        d => return shape_err(format!("global ghost matrices must be (C, N), got {d:?}")),
    };
    if mk != nk {
        return shape_err(format!("ghost matrices cover {mk} tokens, attention has {nk}"));
    }
    if c < g_n || c % g_n != 0 {
        return Err(Error::Config(format!(
            "ghost expansion from {g_n} heads to {c} maps is not an integer factor >= 1"
        )));
    }
    Ok([b, g_n, nq, nk, c])
}

/// Ghost head over global attention maps `(B, G, N, N)`; the filter axis is
/// the key axis, `mul`/`add` are `(C, N)` and the result is `(B, C, N, N)`.
pub fn ghost_head_global<T: Scalar>(
    attn: &Tensor<T>,
    mul: &Tensor<T>,
    add: &Tensor<T>,
    lambda: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    let [b, g_n, nq, nk, c] = global_dims(attn, mul)?;
    attn_same(mul, add)?;
    let (lam, gam) = (T::from_f64(lambda), T::from_f64(gamma));
    let (hd, md, ad) = (attn.data(), mul.data(), add.data());
    let mut out = vec![T::zero(); b * c * nq * nk];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci % g_n;
            for i in 0..nq {
                let src = &hd[((bi * g_n + gi) * nq + i) * nk..((bi * g_n + gi) * nq + i + 1) * nk];
                let dst = &mut out[((bi * c + ci) * nq + i) * nk..((bi * c + ci) * nq + i + 1) * nk];
                for j in 0..nk {
                    dst[j] = spow(md[ci * nk + j], lam) * src[j] + gam * ad[ci * nk + j];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, nq, nk], out))
}

fn attn_same<T: Scalar>(mul: &Tensor<T>, add: &Tensor<T>) -> Result<()> {
    if mul.dims() != add.dims() {
        return shape_err("ghost matrices differ in shape");
    }
    Ok(())
}

pub fn ghost_head_global_backward<T: Scalar>(
    attn: &Tensor<T>,
    mul: &Tensor<T>,
    lambda: f64,
    gamma: f64,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, g_n, nq, nk, c] = global_dims(attn, mul)?;
    let (lam, gam) = (T::from_f64(lambda), T::from_f64(gamma));
    let (hd, md, gd) = (attn.data(), mul.data(), grad.data());
    let mut dh = vec![T::zero(); attn.len()];
    let mut dm = vec![T::zero(); mul.len()];
    let mut da = vec![T::zero(); mul.len()];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci % g_n;
            for i in 0..nq {
                let ho = ((bi * g_n + gi) * nq + i) * nk;
                let go = ((bi * c + ci) * nq + i) * nk;
                for j in 0..nk {
                    let o = md[ci * nk + j];
                    dh[ho + j] += spow(o, lam) * gd[go + j];
                    dm[ci * nk + j] += spow_grad(o, lam) * hd[ho + j] * gd[go + j];
                    da[ci * nk + j] += gam * gd[go + j];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(attn.dims().to_vec(), dh),
        Tensor::from_parts(mul.dims().to_vec(), dm),
        Tensor::from_parts(mul.dims().to_vec(), da),
    ))
}
