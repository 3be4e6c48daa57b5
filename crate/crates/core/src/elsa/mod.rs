//! ELSA block: Hadamard attention, the ghost head, and neighborhood
//! aggregation.
//!
//! Hadamard attention replaces the query-key dot product by the elementwise
//! product `q ⊙ k` at each pixel, contracted with relative-position tables:
//!
//! ```text
//! h[i, j] = softmax_j( (q_i ⊙ k_i) . rk[j-i] + rq[j-i] . (q_j ⊙ k_j) + rb[j-i] )
//! ```
//!
//! Four realizations are provided. [`Variant::StrictUnfold`],
//! [`Variant::ShiftConv`] and [`Variant::MergedConv`] compute the same
//! function; [`Variant::Production`] inserts a GELU between the merged
//! contraction and the spatial shift and is a different function.

pub mod kernels;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::config::KvDoc;
use crate::error::{shape_err, Error, Result};
use crate::grad::{Tape, Var};
use crate::paradigm::{Application, SlotPlan};
use crate::rng::{normal, trunc_normal};
use crate::tensor::{read_tensor, write_tensor, OffsetOrder, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    StrictUnfold,
    ShiftConv,
    MergedConv,
    Production,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::StrictUnfold,
        Variant::ShiftConv,
        Variant::MergedConv,
        Variant::Production,
    ];

    /// The three realizations that compute the same function.
    pub const EQUIVALENT: [Variant; 3] = [Variant::StrictUnfold, Variant::ShiftConv, Variant::MergedConv];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StrictUnfold => "strict-unfold",
            Variant::ShiftConv => "shift-conv",
            Variant::MergedConv => "merged-conv",
            Variant::Production => "production",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                name: s.into(),
            })
    }
}

/// Shape of the `r_k` / `r_q` tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TableLayout {
    /// `(C, G, K*K)`: every channel feeds every head.
    #[default]
    Full,
    /// `(C, K*K)`: each channel only feeds its own head (block-diagonal `Full`).
    PerHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElsaConfig {
    pub channels: usize,
    pub heads: usize,
    pub kernel: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub layout: TableLayout,
    pub proj_bias: bool,
    pub ghost: bool,
}

impl ElsaConfig {
    pub fn new(channels: usize, heads: usize, kernel: usize) -> Self {
        ElsaConfig {
            channels,
            heads,
            kernel,
            lambda: 1.0,
            gamma: 1.0,
            layout: TableLayout::Full,
            proj_bias: true,
            ghost: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::HeadsChannels {
                heads: self.heads,
                channels: self.channels,
            });
        }
        OffsetOrder::new(self.kernel)?;
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn table_dims(&self) -> Vec<usize> {
        match self.layout {
            TableLayout::Full => vec![self.channels, self.heads, self.taps()],
            TableLayout::PerHead => vec![self.channels, self.taps()],
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        doc.set(&k("channels"), self.channels);
        doc.set(&k("heads"), self.heads);
        doc.set(&k("kernel"), self.kernel);
        doc.set(&k("lambda"), self.lambda);
        doc.set(&k("gamma"), self.gamma);
        doc.set(
            &k("layout"),
            match self.layout {
                TableLayout::Full => "full",
                TableLayout::PerHead => "per_head",
            },
        );
        doc.set(&k("proj_bias"), self.proj_bias);
        doc.set(&k("ghost"), self.ghost);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let mut cfg = ElsaConfig::new(
            doc.require(&k("channels"))?,
            doc.require(&k("heads"))?,
            doc.require(&k("kernel"))?,
        );
        cfg.lambda = doc.get_or(&k("lambda"), cfg.lambda)?;
        cfg.gamma = doc.get_or(&k("gamma"), cfg.gamma)?;
        cfg.layout = match doc.get_str(&k("layout")).unwrap_or("full") {
            "full" => TableLayout::Full,
            "per_head" => TableLayout::PerHead,
            other => return Err(doc.bad_value(&k("layout"), other)),
        };
        cfg.proj_bias = doc.get_or(&k("proj_bias"), true)?;
        cfg.ghost = doc.get_or(&k("ghost"), true)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ghost-head matrices: `mul` (O) and `add` (S), both `(C, K, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GhostHeadParams<T> {
    pub mul: Tensor<T>,
    pub add: Tensor<T>,
}

impl<T: Scalar> GhostHeadParams<T> {
    /// `O` standard normal, `S` truncated normal with std 0.02.
    pub fn init(channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        GhostHeadParams {
            mul: normal(rng, &[channels, kernel, kernel], 1.0),
            add: trunc_normal(rng, &[channels, kernel, kernel], 0.02),
        }
    }

    /// `O = 1`, `S = 0`: plain replication of heads over channels.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        GhostHeadParams {
            mul: Tensor::ones(&[channels, kernel, kernel]),
            add: Tensor::zeros(&[channels, kernel, kernel]),
        }
    }
}

/// Learnable state of one ELSA block.
#[derive(Debug, Clone, PartialEq)]
pub struct ElsaParams<T> {
    pub config: ElsaConfig,
    pub proj_q: Tensor<T>,
    pub proj_k: Tensor<T>,
    pub proj_v: Tensor<T>,
    pub proj_out: Tensor<T>,
    /// Biases of `q, k, v, out` when `config.proj_bias`.
    pub bias_q: Option<Tensor<T>>,
    pub bias_k: Option<Tensor<T>>,
    pub bias_v: Option<Tensor<T>>,
    pub bias_out: Option<Tensor<T>>,
    pub r_k: Tensor<T>,
    pub r_q: Tensor<T>,
    /// `(G, K*K)`.
    pub r_b: Tensor<T>,
    pub ghost: Option<GhostHeadParams<T>>,
}

fn identity_matrix<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
}

impl<T: Scalar> ElsaParams<T> {
    pub fn init(config: ElsaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let proj = |rng: &mut _| trunc_normal(rng, &[c, c], 0.02);
        let bias = |on: bool| on.then(|| Tensor::zeros(&[c]));
        let td = config.table_dims();
        Ok(ElsaParams {
            proj_q: proj(rng),
            proj_k: proj(rng),
            proj_v: proj(rng),
            proj_out: proj(rng),
            bias_q: bias(config.proj_bias),
            bias_k: bias(config.proj_bias),
            bias_v: bias(config.proj_bias),
            bias_out: bias(config.proj_bias),
            r_q: trunc_normal(rng, &td, 0.02),
            r_k: trunc_normal(rng, &td, 0.02),
            r_b: trunc_normal(rng, &[config.heads, config.taps()], 0.02),
            ghost: config.ghost.then(|| GhostHeadParams::init(c, config.kernel, rng)),
            config,
        })
    }

    /// Identity projections, zero tables and biases, identity ghost head.
    pub fn identity(config: ElsaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bias = |on: bool| on.then(|| Tensor::zeros(&[c]));
        let td = config.table_dims();
        Ok(ElsaParams {
            proj_q: identity_matrix(c),
            proj_k: identity_matrix(c),
            proj_v: identity_matrix(c),
            proj_out: identity_matrix(c),
            bias_q: bias(config.proj_bias),
            bias_k: bias(config.proj_bias),
            bias_v: bias(config.proj_bias),
            bias_out: bias(config.proj_bias),
            r_q: Tensor::zeros(&td),
            r_k: Tensor::zeros(&td),
            r_b: Tensor::zeros(&[config.heads, config.taps()]),
            ghost: config.ghost.then(|| GhostHeadParams::identity(c, config.kernel)),
            config,
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("proj_q", &self.proj_q),
            ("proj_k", &self.proj_k),
            ("proj_v", &self.proj_v),
            ("proj_out", &self.proj_out),
        ];
        for (name, b) in [
            ("bias_q", &self.bias_q),
            ("bias_k", &self.bias_k),
            ("bias_v", &self.bias_v),
            ("bias_out", &self.bias_out),
        ] {
            if let Some(b) = b {
                v.push((name, b));
            }
        }
        v.extend([("r_k", &self.r_k), ("r_q", &self.r_q), ("r_b", &self.r_b)]);
        if let Some(g) = &self.ghost {
            v.extend([("ghost_mul", &g.mul), ("ghost_add", &g.add)]);
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![
            ("proj_q", &mut self.proj_q),
            ("proj_k", &mut self.proj_k),
            ("proj_v", &mut self.proj_v),
            ("proj_out", &mut self.proj_out),
        ];
        for (name, b) in [
            ("bias_q", &mut self.bias_q),
            ("bias_k", &mut self.bias_k),
            ("bias_v", &mut self.bias_v),
            ("bias_out", &mut self.bias_out),
        ] {
            if let Some(b) = b.as_mut() {
                v.push((name, b));
            }
        }
        v.extend([("r_k", &mut self.r_k), ("r_q", &mut self.r_q), ("r_b", &mut self.r_b)]);
        if let Some(g) = self.ghost.as_mut() {
            v.extend([("ghost_mul", &mut g.mul), ("ghost_add", &mut g.add)]);
        }
        v
    }

    pub fn check(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let c = cfg.channels;
        for (name, t) in self.named() {
            let want: Vec<usize> = match name {
                "proj_q" | "proj_k" | "proj_v" | "proj_out" => vec![c, c],
                "r_k" | "r_q" => cfg.table_dims(),
                "r_b" => vec![cfg.heads, cfg.taps()],
                "ghost_mul" | "ghost_add" => vec![c, cfg.kernel, cfg.kernel],
                _ => vec![c],
            };
            if t.dims() != want {
                return shape_err(format!("{name} is {:?}, expected {want:?}", t.dims()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every tensor as a tape parameter named `{prefix}{name}`.
    pub fn register(&self, tape: &mut Tape<T>, prefix: &str) -> ElsaVars {
        let mut p = |name: &str, t: &Tensor<T>| tape.param(&format!("{prefix}{name}"), t.clone());
        ElsaVars {
            proj_q: p("proj_q", &self.proj_q),
            proj_k: p("proj_k", &self.proj_k),
            proj_v: p("proj_v", &self.proj_v),
            proj_out: p("proj_out", &self.proj_out),
            bias_q: self.bias_q.as_ref().map(|t| p("bias_q", t)),
            bias_k: self.bias_k.as_ref().map(|t| p("bias_k", t)),
            bias_v: self.bias_v.as_ref().map(|t| p("bias_v", t)),
            bias_out: self.bias_out.as_ref().map(|t| p("bias_out", t)),
            r_k: p("r_k", &self.r_k),
            r_q: p("r_q", &self.r_q),
            r_b: p("r_b", &self.r_b),
            ghost: self
                .ghost
                .as_ref()
                .map(|g| (p("ghost_mul", &g.mul), p("ghost_add", &g.add))),
        }
    }

    /// Write `manifest.kv` plus one tensor file per parameter into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut doc = KvDoc::default();
        self.config.write_kv(&mut doc, "config.");
        doc.set("dtype", T::DTYPE.name());
        for (name, t) in self.named() {
            let file = format!("{name}.latt");
            write_tensor(t, dir.join(&file))?;
            doc.set(&format!("tensor.{name}"), file);
        }
        std::fs::write(dir.join("manifest.kv"), doc.to_string())?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let doc = KvDoc::load(dir.join("manifest.kv"))?;
        doc.reject_unknown(&["config.", "tensor.", "dtype"])?;
        let config = ElsaConfig::read_kv(&doc, "config.")?;
        let mut params = ElsaParams::<T>::identity(config)?;
        for (name, slot) in params.named_mut() {
            let file: String = doc.require(&format!("tensor.{name}"))?;
            *slot = read_tensor(dir.join(file))?.to_scalar();
        }
        params.check()?;
        Ok(params)
    }
}

/// Tape handles for an [`ElsaParams`].
#[derive(Debug, Clone, Copy)]
pub struct ElsaVars {
    pub proj_q: Var,
    pub proj_k: Var,
    pub proj_v: Var,
    pub proj_out: Var,
    pub bias_q: Option<Var>,
    pub bias_k: Option<Var>,
    pub bias_v: Option<Var>,
    pub bias_out: Option<Var>,
    pub r_k: Var,
    pub r_q: Var,
    pub r_b: Var,
    pub ghost: Option<(Var, Var)>,
}

/// Softmax-normalized Hadamard attention `(B, G, K*K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HadamardAttention<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> HadamardAttention<T> {
    /// Largest `|sum_t h - 1|` over all `(b, g, h, w)`.
    pub fn normalization_error(&self) -> f64 {
        let [b, g, t, h, w] = match self.values.dims() {
            [b, g, t, h, w] => [*b, *g, *t, *h, *w],
            _ => return f64::INFINITY,
        };
        let p = h * w;
        let d = self.values.data();
        let mut worst: f64 = 0.0;
        for bg in 0..b * g {
            for i in 0..p {
                let s: f64 = (0..t).map(|ti| d[(bg * t + ti) * p + i].as_f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

fn full_tables<T: Scalar>(tape: &mut Tape<T>, cfg: &ElsaConfig, vars: &ElsaVars) -> Result<(Var, Var)> {
    Ok(match cfg.layout {
        TableLayout::Full => (vars.r_k, vars.r_q),
        TableLayout::PerHead => (
            tape.expand_per_head(vars.r_k, cfg.heads)?,
            tape.expand_per_head(vars.r_q, cfg.heads)?,
        ),
    })
}

/// Pre-softmax Hadamard logits `(B, G, K*K, H, W)` on a tape.
pub fn hadamard_logits_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    cfg: &ElsaConfig,
    vars: &ElsaVars,
    variant: Variant,
) -> Result<Var> {
    let [b, c, h, w] = tape.value(q).dims4()?;
    if c != cfg.channels || tape.dims(k) != tape.dims(q) {
        return shape_err(format!(
            "q {:?} / k {:?} for a {}-channel block",
            tape.dims(q),
            tape.dims(k),
            cfg.channels
        ));
    }
    let (g, t_n, kernel) = (cfg.heads, cfg.taps(), cfg.kernel);
    let out_dims = [b, g, t_n, h, w];
    let hp = tape.mul(q, k)?;
    let (rk, rq) = full_tables(tape, cfg, vars)?;
    match variant {
        Variant::StrictUnfold => {
            let center = tape.contract_channel(hp, rk)?;
            let unfolded = tape.unfold(hp, kernel)?;
            let neighbor = tape.contract_unfolded(unfolded, rq)?;
            let neighbor = tape.reshape(neighbor, &out_dims)?;
            let sum = tape.add(center, neighbor)?;
            tape.add_bias(sum, vars.r_b, h * w)
        }
        Variant::ShiftConv => {
            let center = tape.contract_channel(hp, rk)?;
            let center = tape.add_bias(center, vars.r_b, h * w)?;
            let pre = tape.contract_channel(hp, rq)?;
            let pre = tape.reshape(pre, &[b, g * t_n, h, w])?;
            let kernels = tape.constant(kernels::shift_kernels(g, kernel)?);
            let shifted = tape.grouped_conv(pre, kernels, g * t_n)?;
            let shifted = tape.reshape(shifted, &out_dims)?;
            tape.add(center, shifted)
        }
        Variant::MergedConv | Variant::Production => {
            let merged = tape.interleave(rk, rq)?;
            let z = tape.contract_channel(hp, merged)?;
            let bias = tape.pad_bias(vars.r_b);
            let z = tape.add_bias(z, bias, h * w)?;
            let z = if variant == Variant::Production {
                tape.gelu(z)
            } else {
                z
            };
            let kernels = tape.constant(kernels::merged_kernels(g, kernel)?);
            let y = tape.grouped_conv(z, kernels, g * t_n)?;
            tape.reshape(y, &out_dims)
        }
    }
}

pub fn hadamard_attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    cfg: &ElsaConfig,
    vars: &ElsaVars,
    variant: Variant,
) -> Result<Var> {
    let logits = hadamard_logits_on(tape, q, k, cfg, vars, variant)?;
    tape.softmax(logits, 2)
}

/// Full block on a tape: projections, Hadamard attention, ghost head,
/// neighborhood aggregation, output projection.
pub fn elsa_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ElsaConfig,
    vars: &ElsaVars,
    variant: Variant,
) -> Result<Var> {
    let [b, c, h, w] = tape.value(x).dims4()?;
    let q = tape.linear(x, vars.proj_q, vars.bias_q)?;
    let k = tape.linear(x, vars.proj_k, vars.bias_k)?;
    let v = tape.linear(x, vars.proj_v, vars.bias_v)?;
    let attn = hadamard_attention_on(tape, q, k, cfg, vars, variant)?;
    let t_n = cfg.taps();
    // without a ghost head, channel c reads head c / (C / G) as in plain
    // multi-head attention
    let (expanded, maps) = match vars.ghost {
        Some((mul, add)) => (tape.ghost_head(attn, mul, add, cfg.lambda, cfg.gamma)?, c),
        None => (attn, cfg.heads),
    };
    let expanded = tape.reshape(expanded, &[b, maps, t_n, h * w])?;
    let plan = Arc::new(SlotPlan::new(Application::Neighboring(cfg.kernel), h, w)?);
    let f = tape.aggregate(expanded, v, plan)?;
    tape.linear(f, vars.proj_out, vars.bias_out)
}

/// Hadamard attention with `q`, `k` given directly.
pub fn hadamard_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    params: &ElsaParams<T>,
    variant: Variant,
) -> Result<HadamardAttention<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, "");
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let out = hadamard_attention_on(&mut tape, qv, kv, &params.config, &vars, variant)?;
    Ok(HadamardAttention {
        values: tape.value(out).clone(),
    })
}

/// Pre-softmax Hadamard logits with `q`, `k` given directly.
pub fn hadamard_logits<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    params: &ElsaParams<T>,
    variant: Variant,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, "");
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let out = hadamard_logits_on(&mut tape, qv, kv, &params.config, &vars, variant)?;
    Ok(tape.value(out).clone())
}

/// Expand `G` attention heads to `C` channels: `(B,G,T,H,W) -> (B,C,T,H,W)`.
pub fn ghost_head<T: Scalar>(
    h: &HadamardAttention<T>,
    ghost: &GhostHeadParams<T>,
    lambda: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    kernels::ghost_head(&h.values, &ghost.mul, &ghost.add, lambda, gamma)
}

/// Ghost head over global attention `(B, G, N, N)` with `(C, N)` matrices.
pub fn ghost_head_global<T: Scalar>(
    attn: &Tensor<T>,
    mul: &Tensor<T>,
    add: &Tensor<T>,
    lambda: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    kernels::ghost_head_global(attn, mul, add, lambda, gamma)
}

/// The ELSA block without residual or normalization.
pub fn elsa_forward<T: Scalar>(x: &Tensor<T>, params: &ElsaParams<T>, variant: Variant) -> Result<Tensor<T>> {
    params.check()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, "");
    let xv = tape.constant(x.clone());
    let out = elsa_forward_on(&mut tape, xv, &params.config, &vars, variant)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    fn params(c: usize, g: usize, k: usize, seed: u64) -> ElsaParams<f64> {
        ElsaParams::init(ElsaConfig::new(c, g, k), &mut SeedSplitter::new(seed).stream("p")).unwrap()
    }

    #[test]
    fn zero_queries_reduce_to_bias_softmax() {
        let p = params(4, 2, 3, 1);
        let q = Tensor::<f64>::zeros(&[1, 4, 3, 3]);
        let k = normal(&mut SeedSplitter::new(2).stream("k"), &[1, 4, 3, 3], 1.0);
        let h = hadamard_attention(&q, &k, &p, Variant::StrictUnfold).unwrap();
        let rb = crate::tensor::softmax_over(&p.r_b, 1).unwrap();
        for g in 0..2 {
            for t in 0..9 {
                for i in 0..9 {
                    let v = h.values.data()[(g * 9 + t) * 9 + i];
                    assert!((v - rb.get(&[g, t])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("fused".parse::<Variant>().is_err());
    }

    #[test]
    fn saturated_center_bias_passes_values_through() {
        let mut p = ElsaParams::<f64>::identity(ElsaConfig::new(4, 2, 3)).unwrap();
        for g in 0..2 {
            p.r_b.set(&[g, 4], 1e3);
        }
        p.ghost.as_mut().unwrap().add = Tensor::zeros(&[4, 3, 3]);
        let x = normal(&mut SeedSplitter::new(5).stream("x"), &[2, 4, 5, 3], 1.0);
        let y = elsa_forward(&x, &p, Variant::MergedConv).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-3);
    }

    #[test]
    fn params_roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(4, 2, 3, 9);
        p.save_dir(dir.path()).unwrap();
        let back = ElsaParams::<f64>::load_dir(dir.path()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_bad_head_count() {
        assert!(ElsaConfig::new(6, 4, 3).validate().is_err());
        assert!(ElsaConfig::new(4, 2, 4).validate().is_err());
    }
}
