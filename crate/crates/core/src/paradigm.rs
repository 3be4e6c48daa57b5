//! The unified local spatial-processing operation.
//!
//! Per head `g`, pixel `i` gathers values from a set of key pixels `j`
//! (either its non-overlapping window or its `K x K` neighborhood) weighted by
//!
//! ```text
//! Norm_j( s * q_i.k_j  +  q_i.rk[j-i]  +  rq[j-i].k_j  +  rb[j-i] )
//! ```
//!
//! with each bracketed term switched on or off by [`ParadigmConfig`].
//! Depth-wise convolution, involution-style dynamic filters and windowed
//! self-attention are all special cases; [`Preset`] names them.
//!
//! Identity normalization is accepted but numerically unstable in training:
//! nothing bounds the filter magnitudes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::KvDoc;
use crate::error::{shape_err, Error, Result};
use crate::rng::trunc_normal;
use crate::tensor::{filter_normalize_axis, softmax_over, OffsetOrder, Scalar, Tensor, DEFAULT_FILTER_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    Identity,
    FilterNorm,
    Softmax,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Identity => "identity",
            Normalization::FilterNorm => "filter_norm",
            Normalization::Softmax => "softmax",
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Normalization::Identity),
            "filter_norm" => Ok(Normalization::FilterNorm),
            "softmax" => Ok(Normalization::Softmax),
            _ => Err(Error::Unknown {
                kind: "normalization",
                name: s.into(),
            }),
        }
    }
}

/// Which key pixels a query pixel sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Application {
    /// Non-overlapping `size x size` windows.
    Window(usize),
    /// Sliding `size x size` neighborhood centred on the query (odd size).
    Neighboring(usize),
}

impl Application {
    pub fn size(self) -> usize {
        match self {
            Application::Window(s) | Application::Neighboring(s) => s,
        }
    }

    /// Number of key slots per query pixel.
    pub fn slots(self) -> usize {
        self.size() * self.size()
    }

    /// Rows of the relative-position tables.
    pub fn table_len(self) -> usize {
        match self {
            Application::Window(w) => (2 * w - 1) * (2 * w - 1),
            Application::Neighboring(k) => k * k,
        }
    }
}

/// Treatment of neighborhood slots that fall outside the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Border {
    /// Padded keys and values are zero but still take part in normalization.
    #[default]
    ZeroPad,
    /// Padded slots are excluded from the softmax (softmax only).
    Masked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParadigmConfig {
    pub use_qk: bool,
    pub use_q_rk: bool,
    pub use_rq_k: bool,
    pub use_rb: bool,
    pub norm: Normalization,
    pub application: Application,
    pub heads: usize,
    pub channels: usize,
    /// Multiplies the `q.k` term only.
    pub qk_scale: f64,
    pub border: Border,
}

impl ParadigmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_qk || self.use_q_rk || self.use_rq_k || self.use_rb) {
            return Err(Error::Config(
                "at least one parameterization term must be enabled".into(),
            ));
        }
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::HeadsChannels {
                heads: self.heads,
                channels: self.channels,
            });
        }
        match self.application {
            Application::Window(0) => return Err(Error::Config("window size must be >= 1".into())),
            Application::Neighboring(k) if k % 2 == 0 => return Err(Error::EvenKernel(k)),
            _ => {}
        }
        if self.border == Border::Masked && self.norm != Normalization::Softmax {
            return Err(Error::Config("masked borders require softmax normalization".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn default_qk_scale(channels: usize, heads: usize) -> f64 {
        1.0 / ((channels / heads.max(1)).max(1) as f64).sqrt()
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        doc.set(&k("use_qk"), self.use_qk);
        doc.set(&k("use_q_rk"), self.use_q_rk);
        doc.set(&k("use_rq_k"), self.use_rq_k);
        doc.set(&k("use_rb"), self.use_rb);
        doc.set(&k("norm"), self.norm.name());
        let (mode, size) = match self.application {
            Application::Window(s) => ("window", s),
            Application::Neighboring(s) => ("neighboring", s),
        };
        doc.set(&k("application.mode"), mode);
        doc.set(&k("application.size"), size);
        doc.set(&k("heads"), self.heads);
        doc.set(&k("channels"), self.channels);
        doc.set(&k("qk_scale"), self.qk_scale);
        doc.set(
            &k("border"),
            match self.border {
                Border::ZeroPad => "zero_pad",
                Border::Masked => "masked",
            },
        );
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let size: usize = doc.require(&k("application.size"))?;
        let application = match doc.require_str(&k("application.mode"))? {
            "window" => Application::Window(size),
            "neighboring" => Application::Neighboring(size),
            other => return Err(doc.bad_value(&k("application.mode"), other)),
        };
        let border = match doc.get_str(&k("border")).unwrap_or("zero_pad") {
            "zero_pad" => Border::ZeroPad,
            "masked" => Border::Masked,
            other => return Err(doc.bad_value(&k("border"), other)),
        };
        let heads: usize = doc.require(&k("heads"))?;
        let channels: usize = doc.require(&k("channels"))?;
        let cfg = ParadigmConfig {
            use_qk: doc.get(&k("use_qk"))?.unwrap_or(false),
            use_q_rk: doc.get(&k("use_q_rk"))?.unwrap_or(false),
            use_rq_k: doc.get(&k("use_rq_k"))?.unwrap_or(false),
            use_rb: doc.get(&k("use_rb"))?.unwrap_or(false),
            norm: doc.require(&k("norm"))?,
            application,
            heads,
            channels,
            qk_scale: doc
                .get(&k("qk_scale"))?
                .unwrap_or_else(|| Self::default_qk_scale(channels, heads)),
            border,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named rows of the parameterization / filter-application ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Net1,
    Net2,
    Net3,
    Net4,
    Net5,
    Net6,
    Net7,
    SwinLsa,
    DwConv,
    InvolutionLike,
    Net6N,
    Net7N,
}

impl Preset {
    pub const ALL: [Preset; 12] = [
        Preset::Net1,
        Preset::Net2,
        Preset::Net3,
        Preset::Net4,
        Preset::Net5,
        Preset::Net6,
        Preset::Net7,
        Preset::SwinLsa,
        Preset::DwConv,
        Preset::InvolutionLike,
        Preset::Net6N,
        Preset::Net7N,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Net1 => "net1",
            Preset::Net2 => "net2",
            Preset::Net3 => "net3",
            Preset::Net4 => "net4",
            Preset::Net5 => "net5",
            Preset::Net6 => "net6",
            Preset::Net7 => "net7",
            Preset::SwinLsa => "swin-lsa",
            Preset::DwConv => "dwconv",
            Preset::InvolutionLike => "involution-like",
            Preset::Net6N => "net6-n",
            Preset::Net7N => "net7-n",
        }
    }

    /// `(q.k, q.rk, rq.k, rb)` flags.
    pub fn terms(self) -> (bool, bool, bool, bool) {
        match self {
            Preset::Net1 => (true, false, false, false),
            Preset::Net2 | Preset::InvolutionLike => (false, true, false, false),
            Preset::Net3 => (false, false, true, false),
            Preset::Net4 | Preset::DwConv => (false, false, false, true),
            Preset::Net5 => (false, true, true, false),
            Preset::Net6 | Preset::Net6N => (false, true, true, true),
            Preset::Net7 | Preset::Net7N => (true, true, true, true),
            Preset::SwinLsa => (true, false, false, true),
        }
    }

    pub fn norm(self) -> Normalization {
        match self {
            Preset::DwConv | Preset::InvolutionLike => Normalization::Identity,
            _ => Normalization::Softmax,
        }
    }

    pub fn is_neighboring(self) -> bool {
        matches!(
            self,
            Preset::DwConv | Preset::InvolutionLike | Preset::Net6N | Preset::Net7N
        )
    }

    /// Configuration for `channels` channels; `heads` is ignored by
    /// [`Preset::DwConv`], which always uses one head per channel.
    /// `size` is the window size or (odd) kernel size.
    pub fn config(self, channels: usize, heads: usize, size: usize) -> Result<ParadigmConfig> {
        let (use_qk, use_q_rk, use_rq_k, use_rb) = self.terms();
        let heads = if self == Preset::DwConv { channels } else { heads };
        let application = if self.is_neighboring() {
            Application::Neighboring(size)
        } else {
            Application::Window(size)
        };
        let cfg = ParadigmConfig {
            use_qk,
            use_q_rk,
            use_rq_k,
            use_rb,
            norm: self.norm(),
            application,
            heads,
            channels,
            qk_scale: ParadigmConfig::default_qk_scale(channels, heads),
            border: Border::ZeroPad,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown {
                kind: "preset",
                name: s.into(),
            })
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    name.parse()
}

/// Relative-position parameters: `r_k`, `r_q` are `(d_h, G, T)`, `r_b` is `(G, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTables<T> {
    pub r_k: Tensor<T>,
    pub r_q: Tensor<T>,
    pub r_b: Tensor<T>,
}

impl<T: Scalar> RelPosTables<T> {
    pub fn zeros(cfg: &ParadigmConfig) -> Self {
        let (d, g, t) = (cfg.head_dim(), cfg.heads, cfg.application.table_len());
        RelPosTables {
            r_k: Tensor::zeros(&[d, g, t]),
            r_q: Tensor::zeros(&[d, g, t]),
            r_b: Tensor::zeros(&[g, t]),
        }
    }

    /// Truncated normal, std 0.02, cut at two standard deviations.
    pub fn init(cfg: &ParadigmConfig, rng: &mut impl Rng) -> Self {
        let (d, g, t) = (cfg.head_dim(), cfg.heads, cfg.application.table_len());
        RelPosTables {
            r_k: trunc_normal(rng, &[d, g, t], 0.02),
            r_q: trunc_normal(rng, &[d, g, t], 0.02),
            r_b: trunc_normal(rng, &[g, t], 0.02),
        }
    }

    pub fn check(&self, cfg: &ParadigmConfig) -> Result<()> {
        let (d, g, t) = (cfg.head_dim(), cfg.heads, cfg.application.table_len());
        if self.r_k.dims() != [d, g, t] || self.r_q.dims() != [d, g, t] || self.r_b.dims() != [g, t] {
            return shape_err(format!(
                "tables {:?}/{:?}/{:?} do not match d_h={d}, G={g}, T={t}",
                self.r_k.dims(),
                self.r_q.dims(),
                self.r_b.dims()
            ));
        }
        Ok(())
    }
}

/// Key pixel and table row for every `(query pixel, slot)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPlan {
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub table_len: usize,
    /// `key[i * slots + s]`, [`SlotPlan::PAD`] where the slot lies outside the map.
    pub key: Vec<u32>,
    pub rel: Vec<u32>,
}

impl SlotPlan {
    pub const PAD: u32 = u32::MAX;

    pub fn new(application: Application, height: usize, width: usize) -> Result<Self> {
        match application {
            Application::Window(wd) => Self::window(wd, height, width),
            Application::Neighboring(k) => Self::neighboring(k, height, width),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn window(wd: usize, h: usize, w: usize) -> Result<Self> {
        if wd == 0 || !h.is_multiple_of(wd) || !w.is_multiple_of(wd) {
            return Err(Error::IndivisibleWindow {
                window: wd,
                height: h,
                width: w,
            });
        }
        let slots = wd * wd;
        let span = 2 * wd - 1;
        let mut key = Vec::with_capacity(h * w * slots);
        let mut rel = Vec::with_capacity(h * w * slots);
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = (y / wd * wd, x / wd * wd);
                for sy in 0..wd {
                    for sx in 0..wd {
                        let (ky, kx) = (oy + sy, ox + sx);
                        key.push((ky * w + kx) as u32);
                        let ry = ky + wd - 1 - y;
                        let rx = kx + wd - 1 - x;
                        rel.push((ry * span + rx) as u32);
                    }
                }
            }
        }
        Ok(SlotPlan {
            height: h,
            width: w,
            slots,
            table_len: span * span,
            key,
            rel,
        })
    }

    fn neighboring(k: usize, h: usize, w: usize) -> Result<Self> {
        let order = OffsetOrder::new(k)?;
        let slots = order.len();
        let mut key = Vec::with_capacity(h * w * slots);
        let mut rel = Vec::with_capacity(h * w * slots);
        for y in 0..h {
            for x in 0..w {
                for t in 0..slots {
                    key.push(order.displaced(t, y, x, h, w).map_or(Self::PAD, |j| j as u32));
                    rel.push(t as u32);
                }
            }
        }
        Ok(SlotPlan {
            height: h,
            width: w,
            slots,
            table_len: slots,
            key,
            rel,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStatus {
    Raw,
    FilterNormed,
    SoftmaxNormed,
}

/// Per-pixel filters `(B, G, slots, pixels)`; pixels are in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub values: Tensor<T>,
    pub normalized: NormStatus,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn raw(values: Tensor<T>) -> Self {
        AttentionMap {
            values,
            normalized: NormStatus::Raw,
        }
    }

    pub fn filter_normalize(&self, eps: f64) -> Result<Self> {
        Ok(AttentionMap {
            values: filter_normalize_axis(&self.values, 2, eps)?,
            normalized: NormStatus::FilterNormed,
        })
    }

    pub fn softmax(&self) -> Result<Self> {
        Ok(AttentionMap {
            values: softmax_over(&self.values, 2)?,
            normalized: NormStatus::SoftmaxNormed,
        })
    }

    /// Largest deviation from the declared normalization: `|sum - 1|` for
    /// softmax maps, `max(|mean|, |std - 1|)` for filter-normalized maps
    /// (zero-variance slices excluded).
    pub fn normalization_error(&self) -> f64 {
        let (outer, len, inner) = self.values.axis_split(2).expect("4-D map");
        let d = self.values.data();
        let mut worst: f64 = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let vals = (0..len).map(|t| d[(o * len + t) * inner + i].as_f64());
                match self.normalized {
                    NormStatus::Raw => {}
                    NormStatus::SoftmaxNormed => {
                        worst = worst.max((vals.sum::<f64>() - 1.0).abs());
                    }
                    NormStatus::FilterNormed => {
                        let v: Vec<f64> = vals.collect();
                        let mean = v.iter().sum::<f64>() / len as f64;
                        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len as f64;
                        if v.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        worst = worst.max(mean.abs()).max((var.sqrt() - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

fn check_qkv<T: Scalar>(cfg: &ParadigmConfig, xs: &[&Tensor<T>]) -> Result<[usize; 4]> {
    let dims = xs[0].dims4()?;
    for x in xs {
        if x.dims() != dims {
            return shape_err(format!("q/k/v shapes differ: {:?} vs {:?}", dims, x.dims()));
        }
    }
    if dims[1] != cfg.channels {
        return shape_err(format!("config has {} channels, input has {}", cfg.channels, dims[1]));
    }
    Ok(dims)
}

/// Pre-normalization filter logits, `(B, G, slots, pixels)`.
///
/// Masked padding slots hold `-inf`.
pub fn attention_logits<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    tables: &RelPosTables<T>,
    cfg: &ParadigmConfig,
    plan: &SlotPlan,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    tables.check(cfg)?;
    let [b, c, h, w] = check_qkv(cfg, &[q, k])?;
    if plan.height != h || plan.width != w || plan.table_len != cfg.application.table_len() {
        return shape_err("slot plan does not match input");
    }
    let (g_n, d_n, s_n, p) = (cfg.heads, cfg.head_dim(), plan.slots, h * w);
    let scale = T::from_f64(cfg.qk_scale);
    let (qd, kd) = (q.data(), k.data());
    let (rk, rq, rb) = (tables.r_k.data(), tables.r_q.data(), tables.r_b.data());
    let t_n = plan.table_len;
    let mut out = vec![T::zero(); b * g_n * s_n * p];
    for bi in 0..b {
        for g in 0..g_n {
            let qb = &qd[(bi * c + g * d_n) * p..];
            let kb = &kd[(bi * c + g * d_n) * p..];
            let ob = &mut out[(bi * g_n + g) * s_n * p..(bi * g_n + g + 1) * s_n * p];
            for i in 0..p {
                for s in 0..s_n {
                    let j = plan.key[i * s_n + s];
                    let tau = plan.rel[i * s_n + s] as usize;
                    if j == SlotPlan::PAD && cfg.border == Border::Masked {
                        ob[s * p + i] = T::neg_infinity();
                        continue;
                    }
                    let mut acc = T::zero();
                    if cfg.use_rb {
                        acc += rb[g * t_n + tau];
                    }
                    for d in 0..d_n {
                        let qv = qb[d * p + i];
                        let tab = (d * g_n + g) * t_n + tau;
                        if cfg.use_q_rk {
                            acc += qv * rk[tab];
                        }
                        if j != SlotPlan::PAD {
                            let kv = kb[d * p + j as usize];
                            if cfg.use_qk {
                                acc += scale * qv * kv;
                            }
                            if cfg.use_rq_k {
                                acc += rq[tab] * kv;
                            }
                        }
                    }
                    ob[s * p + i] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, g_n, s_n, p], out))
}

/// Gradients of the logits with respect to `(q, k, r_k, r_q, r_b)`.
pub struct LogitGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub tables: RelPosTables<T>,
}

pub fn attention_logits_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    tables: &RelPosTables<T>,
    cfg: &ParadigmConfig,
    plan: &SlotPlan,
    grad: &Tensor<T>,
) -> Result<LogitGrads<T>> {
    let [b, c, h, w] = check_qkv(cfg, &[q, k])?;
    let (g_n, d_n, s_n, p) = (cfg.heads, cfg.head_dim(), plan.slots, h * w);
    if grad.len() != b * g_n * s_n * p {
        return shape_err("logit gradient shape");
    }
    let t_n = plan.table_len;
    let scale = T::from_f64(cfg.qk_scale);
    let (qd, kd, gd) = (q.data(), k.data(), grad.data());
    let (rk, rq) = (tables.r_k.data(), tables.r_q.data());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut drk = vec![T::zero(); rk.len()];
    let mut drq = vec![T::zero(); rq.len()];
    let mut drb = vec![T::zero(); tables.r_b.len()];
    for bi in 0..b {
        for g in 0..g_n {
            let base = (bi * c + g * d_n) * p;
            let gb = &gd[(bi * g_n + g) * s_n * p..(bi * g_n + g + 1) * s_n * p];
            for i in 0..p {
                for s in 0..s_n {
                    let j = plan.key[i * s_n + s];
                    if j == SlotPlan::PAD && cfg.border == Border::Masked {
                        continue;
                    }
                    let ds = gb[s * p + i];
                    if ds == T::zero() {
                        continue;
                    }
                    let tau = plan.rel[i * s_n + s] as usize;
                    if cfg.use_rb {
                        drb[g * t_n + tau] += ds;
                    }
                    for d in 0..d_n {
                        let qi = base + d * p + i;
                        let tab = (d * g_n + g) * t_n + tau;
                        if cfg.use_q_rk {
                            dq[qi] += ds * rk[tab];
                            drk[tab] += ds * qd[qi];
                        }
                        if j != SlotPlan::PAD {
                            let kj = base + d * p + j as usize;
                            if cfg.use_qk {
                                dq[qi] += ds * scale * kd[kj];
                                dk[kj] += ds * scale * qd[qi];
                            }
                            if cfg.use_rq_k {
                                dk[kj] += ds * rq[tab];
                                drq[tab] += ds * kd[kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(LogitGrads {
        dq: Tensor::from_parts(q.dims().to_vec(), dq),
        dk: Tensor::from_parts(k.dims().to_vec(), dk),
        tables: RelPosTables {
            r_k: Tensor::from_parts(tables.r_k.dims().to_vec(), drk),
            r_q: Tensor::from_parts(tables.r_q.dims().to_vec(), drq),
            r_b: Tensor::from_parts(tables.r_b.dims().to_vec(), drb),
        },
    })
}

/// Apply the configured normalization over the slot axis.
pub fn normalize<T: Scalar>(logits: Tensor<T>, norm: Normalization) -> Result<AttentionMap<T>> {
    let raw = AttentionMap::raw(logits);
    match norm {
        Normalization::Identity => Ok(raw),
        Normalization::FilterNorm => raw.filter_normalize(DEFAULT_FILTER_EPS),
        Normalization::Softmax => raw.softmax(),
    }
}

/// `out[b,c,i] = sum_s attn[b, c / (C/A), s, i] * v[b, c, key(i,s)]`.
///
/// `A` attention heads are shared by contiguous channel groups; padded keys
/// contribute zero.
pub fn aggregate<T: Scalar>(attn: &Tensor<T>, v: &Tensor<T>, plan: &SlotPlan) -> Result<Tensor<T>> {
    let [b, c, h, w] = v.dims4()?;
    let [ab, a_n, s_n, p] = attn.dims4()?;
    if ab != b || p != h * w || s_n != plan.slots || a_n == 0 || c % a_n != 0 {
        return shape_err(format!(
            "aggregate: attention {:?} vs values {:?}",
            attn.dims(),
            v.dims()
        ));
    }
    let per = c / a_n;
    let (ad, vd) = (attn.data(), v.data());
    let mut out = vec![T::zero(); v.len()];
    for bi in 0..b {
        for ci in 0..c {
            let a_base = (bi * a_n + ci / per) * s_n * p;
            let vs = &vd[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            let os = &mut out[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            for (i, o) in os.iter_mut().enumerate() {
                let keys = &plan.key[i * s_n..(i + 1) * s_n];
                let mut acc = T::zero();
                for (s, &j) in keys.iter().enumerate() {
                    if j != SlotPlan::PAD {
                        acc += ad[a_base + s * p + i] * vs[j as usize];
                    }
                }
                *o = acc;
            }
        }
    }
    Ok(Tensor::from_parts(v.dims().to_vec(), out))
}

/// Gradients of [`aggregate`]: `(dattn, dv)`.
pub fn aggregate_backward<T: Scalar>(
    attn: &Tensor<T>,
    v: &Tensor<T>,
    plan: &SlotPlan,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = v.dims4()?;
    let [_, a_n, s_n, p] = attn.dims4()?;
    if grad.dims() != v.dims() || p != h * w {
        return shape_err("aggregate gradient shape");
    }
    let per = c / a_n;
    let (ad, vd, gd) = (attn.data(), v.data(), grad.data());
    let mut da = vec![T::zero(); attn.len()];
    let mut dv = vec![T::zero(); v.len()];
    for bi in 0..b {
        for ci in 0..c {
            let a_base = (bi * a_n + ci / per) * s_n * p;
            let vbase = (bi * c + ci) * p;
            for i in 0..p {
                let gi = gd[vbase + i];
                let keys = &plan.key[i * s_n..(i + 1) * s_n];
                for (s, &j) in keys.iter().enumerate() {
                    if j == SlotPlan::PAD {
                        continue;
                    }
                    let j = j as usize;
                    da[a_base + s * p + i] += gi * vd[vbase + j];
                    dv[vbase + j] += gi * ad[a_base + s * p + i];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(attn.dims().to_vec(), da),
        Tensor::from_parts(v.dims().to_vec(), dv),
    ))
}

/// Normalized per-head filters for the unified operation.
pub fn unified_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    tables: &RelPosTables<T>,
    cfg: &ParadigmConfig,
) -> Result<AttentionMap<T>> {
    let [_, _, h, w] = q.dims4()?;
    let plan = SlotPlan::new(cfg.application, h, w)?;
    normalize(attention_logits(q, k, tables, cfg, &plan)?, cfg.norm)
}

/// The unified spatial-processing operation; heads are concatenated over channels.
pub fn unified_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: &RelPosTables<T>,
    cfg: &ParadigmConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let [_, _, h, w] = check_qkv(cfg, &[q, k, v])?;
    let plan = SlotPlan::new(cfg.application, h, w)?;
    let attn = normalize(attention_logits(q, k, tables, cfg, &plan)?, cfg.norm)?;
    let out = aggregate(&attn.values, v, &plan)?;
    out.reject_nan("unified output")?;
    Ok(out)
}

/// Depth-wise convolution with zero padding; `weights` is `(C, K, K)`.
pub fn dwconv_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    if weights.dims().first() != Some(&c) {
        return shape_err(format!("weights {:?} for {c}-channel input", weights.dims()));
    }
    crate::nn::depthwise_conv2d(x, weights)
}

/// Windowed multi-head self-attention with a relative position bias
/// `(G, (2Wd-1)^2)`, computed window by window.
pub fn lsa_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    window: usize,
    scale: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = q.dims4()?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return shape_err("q/k/v shapes differ");
    }
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::IndivisibleWindow {
            window,
            height: h,
            width: w,
        });
    }
    let heads = bias.dims()[0];
    let span = 2 * window - 1;
    if heads == 0 || c % heads != 0 || bias.dims() != [heads, span * span] {
        return shape_err(format!("bias {:?} for {c} channels", bias.dims()));
    }
    let d_n = c / heads;
    let n = window * window;
    let scale = T::from_f64(scale);
    let at = |t: &Tensor<T>, bi: usize, ch: usize, y: usize, x: usize| t.data()[((bi * c + ch) * h + y) * w + x];
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let mut scores = vec![T::zero(); n];
    for bi in 0..b {
        for wy in (0..h).step_by(window) {
            for wx in (0..w).step_by(window) {
                let token = |t: usize| (wy + t / window, wx + t % window);
                for g in 0..heads {
                    for qi in 0..n {
                        let (qy, qx) = token(qi);
                        for (kj, sc) in scores.iter_mut().enumerate() {
                            let (ky, kx) = token(kj);
                            let mut dot = T::zero();
                            for d in 0..d_n {
                                let ch = g * d_n + d;
                                dot += at(q, bi, ch, qy, qx) * at(k, bi, ch, ky, kx);
                            }
                            let ry = ky + window - 1 - qy;
                            let rx = kx + window - 1 - qx;
                            *sc = dot * scale + bias.data()[g * span * span + ry * span + rx];
                        }
                        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut z = T::zero();
                        for sc in scores.iter_mut() {
                            *sc = (*sc - m).exp();
                            z += *sc;
                        }
                        for d in 0..d_n {
                            let ch = g * d_n + d;
                            let mut acc = T::zero();
                            for (kj, &sc) in scores.iter().enumerate() {
                                let (ky, kx) = token(kj);
                                acc += sc / z * at(v, bi, ch, ky, kx);
                            }
                            out.set(&[bi, ch, qy, qx], acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dynamic filtering over `K x K` neighborhoods: the filter at pixel `i`
/// for head `g` is generated from `x_i` by the per-head weight
/// `w: (d_h, G, K*K)`, normalized, and applied to `x` itself.
pub fn dynamic_filter_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    kernel: usize,
    norm: Normalization,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let order = OffsetOrder::new(kernel)?;
    let t_n = order.len();
    let [d_n, g_n, wt] = match weight.dims() {
        [d, g, t] => [*d, *g, *t],
        other => return shape_err(format!("dynamic filter weight {other:?}")),
    };
    if d_n * g_n != c || wt != t_n {
        return shape_err("dynamic filter weight does not match input");
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let mut filt = Tensor::<T>::zeros(&[t_n]);
    for bi in 0..b {
        for g in 0..g_n {
            for y in 0..h {
                for xx in 0..w {
                    for t in 0..t_n {
                        let mut acc = T::zero();
                        for d in 0..d_n {
                            acc += x.get(&[bi, g * d_n + d, y, xx]) * weight.get(&[d, g, t]);
                        }
                        filt.data_mut()[t] = acc;
                    }
                    let f = match norm {
                        Normalization::Identity => filt.clone(),
                        Normalization::FilterNorm => filter_normalize_axis(&filt, 0, DEFAULT_FILTER_EPS)?,
                        Normalization::Softmax => softmax_over(&filt, 0)?,
                    };
                    for d in 0..d_n {
                        let ch = g * d_n + d;
                        let mut acc = T::zero();
                        for t in 0..t_n {
                            if let Some(j) = order.displaced(t, y, xx, h, w) {
                                acc += f.data()[t] * x.get(&[bi, ch, j / w, j % w]);
                            }
                        }
                        out.set(&[bi, ch, y, xx], acc);
                    }
                }
            }
        }
    }
    Ok(out)
}
