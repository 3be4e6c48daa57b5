//! Gradient-check cases covering every differentiable tape op and the
//! composite blocks built from them.

use std::sync::Arc;

use super::{fd_check, fd_check_mixed, FdConfig, GradReport, Objective, Tape, Var};
use crate::elsa::{elsa_forward_on, hadamard_attention_on, ElsaConfig, ElsaParams, TableLayout, Variant};
use crate::error::Result;
use crate::paradigm::{Border, Normalization, ParadigmConfig, Preset, SlotPlan};
use crate::rng::{normal, uniform, SeedSplitter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum CaseOp {
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Reshape,
    Unfold(usize),
    Softmax(usize),
    FilterNorm(usize),
    ContractChannel,
    ContractUnfolded,
    ExpandPerHead(usize),
    Interleave,
    PadBias,
    Linear,
    GroupedConv(usize),
    Gelu,
    LayerNorm,
    Patchify(usize),
    AvgPool,
    CrossEntropy(Vec<usize>),
    AttentionLogits(Box<ParadigmConfig>),
    Unified(Box<ParadigmConfig>),
    Aggregate(usize),
    GhostHead { lambda: f64, gamma: f64 },
    GhostHeadGlobal { lambda: f64, gamma: f64 },
    Hadamard(Box<ElsaConfig>, Variant),
    ElsaBlock(Box<ElsaConfig>, Variant),
}

/// One named check: parameters plus the op applied to them. The objective is
/// a fixed pseudo-random weighted sum of the op's output.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub op: CaseOp,
    pub params: Vec<(String, Tensor<f64>)>,
    /// Elements of these parameters within the radius of zero are skipped.
    pub skip: Vec<(String, f64)>,
}

fn weights<T: Scalar>(dims: &[usize]) -> Tensor<T> {
    Tensor::from_fn(dims, |i| T::from_f64((1.3 * i as f64 + 0.7).sin()))
}

fn elsa_vars(p: &[Var], cfg: &ElsaConfig) -> crate::elsa::ElsaVars {
    // parameter order follows ElsaParams::named
    let mut it = p.iter().copied();
    let mut next = || it.next().expect("parameter");
    let (pq, pk, pv, po) = (next(), next(), next(), next());
    let (bq, bk, bv, bo) = if cfg.proj_bias {
        (Some(next()), Some(next()), Some(next()), Some(next()))
    } else {
        (None, None, None, None)
    };
    let (rk, rq, rb) = (next(), next(), next());
    let ghost = cfg.ghost.then(|| (next(), next()));
    crate::elsa::ElsaVars {
        proj_q: pq,
        proj_k: pk,
        proj_v: pv,
        proj_out: po,
        bias_q: bq,
        bias_k: bk,
        bias_v: bv,
        bias_out: bo,
        r_k: rk,
        r_q: rq,
        r_b: rb,
        ghost,
    }
}

impl Objective for GradCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Result<Var> {
        let out = match &self.op {
            CaseOp::Add => tape.add(p[0], p[1])?,
            CaseOp::Sub => tape.sub(p[0], p[1])?,
            CaseOp::Mul => tape.mul(p[0], p[1])?,
            CaseOp::Scale => tape.scale(p[0], -1.7),
            CaseOp::AddBias => {
                let inner = tape.dims(p[0]).last().copied().unwrap_or(1);
                tape.add_bias(p[0], p[1], inner)?
            }
            CaseOp::Reshape => {
                let n = tape.value(p[0]).len();
                tape.reshape(p[0], &[n])?
            }
            CaseOp::Unfold(k) => tape.unfold(p[0], *k)?,
            CaseOp::Softmax(axis) => tape.softmax(p[0], *axis)?,
            CaseOp::FilterNorm(axis) => tape.filter_norm(p[0], *axis, 1e-5)?,
            CaseOp::ContractChannel => tape.contract_channel(p[0], p[1])?,
            CaseOp::ContractUnfolded => tape.contract_unfolded(p[0], p[1])?,
            CaseOp::ExpandPerHead(g) => tape.expand_per_head(p[0], *g)?,
            CaseOp::Interleave => tape.interleave(p[0], p[1])?,
            CaseOp::PadBias => tape.pad_bias(p[0]),
            CaseOp::Linear => tape.linear(p[0], p[1], Some(p[2]))?,
            CaseOp::GroupedConv(g) => tape.grouped_conv(p[0], p[1], *g)?,
            CaseOp::Gelu => tape.gelu(p[0]),
            CaseOp::LayerNorm => tape.layer_norm(p[0], p[1], p[2], 1e-5)?,
            CaseOp::Patchify(s) => tape.patchify(p[0], *s)?,
            CaseOp::AvgPool => tape.avg_pool(p[0])?,
            CaseOp::CrossEntropy(labels) => tape.cross_entropy(p[0], labels)?,
            CaseOp::AttentionLogits(cfg) => {
                let [_, _, h, w] = tape.value(p[0]).dims4()?;
                let plan = Arc::new(SlotPlan::new(cfg.application, h, w)?);
                tape.attention_logits(p[0], p[1], [p[2], p[3], p[4]], cfg, plan)?
            }
            CaseOp::Unified(cfg) => {
                let [_, _, h, w] = tape.value(p[0]).dims4()?;
                let plan = Arc::new(SlotPlan::new(cfg.application, h, w)?);
                let logits = tape.attention_logits(p[0], p[1], [p[3], p[4], p[5]], cfg, plan.clone())?;
                let attn = match cfg.norm {
                    Normalization::Identity => logits,
                    Normalization::FilterNorm => tape.filter_norm(logits, 2, 1e-5)?,
                    Normalization::Softmax => tape.softmax(logits, 2)?,
                };
                tape.aggregate(attn, p[2], plan)?
            }
            CaseOp::Aggregate(k) => {
                let [_, _, h, w] = tape.value(p[1]).dims4()?;
                let plan = Arc::new(SlotPlan::new(crate::paradigm::Application::Neighboring(*k), h, w)?);
                tape.aggregate(p[0], p[1], plan)?
            }
            CaseOp::GhostHead { lambda, gamma } => tape.ghost_head(p[0], p[1], p[2], *lambda, *gamma)?,
            CaseOp::GhostHeadGlobal { lambda, gamma } => tape.ghost_head_global(p[0], p[1], p[2], *lambda, *gamma)?,
            CaseOp::Hadamard(cfg, variant) => {
                let vars = elsa_vars(&p[2..], cfg);
                hadamard_attention_on(tape, p[0], p[1], cfg, &vars, *variant)?
            }
            CaseOp::ElsaBlock(cfg, variant) => {
                let vars = elsa_vars(&p[1..], cfg);
                elsa_forward_on(tape, p[0], cfg, &vars, *variant)?
            }
        };
        let w = weights(tape.dims(out));
        tape.weighted_sum(out, w)
    }

    fn skips(&self) -> Vec<(String, f64)> {
        self.skip.clone()
    }
}

impl GradCase {
    pub fn check(&self, cfg: FdConfig) -> Result<GradReport> {
        fd_check(self, &self.params, cfg)
    }

    /// Analytic gradients from an f32 evaluation.
    pub fn check_mixed(&self, cfg: FdConfig) -> Result<GradReport> {
        fd_check_mixed(self, &self.params, cfg)
    }
}

struct Builder {
    seeds: SeedSplitter,
    cases: Vec<GradCase>,
}

impl Builder {
    fn t(&self, case: &str, name: &str, dims: &[usize]) -> (String, Tensor<f64>) {
        let mut rng = self.seeds.stream(&format!("{case}/{name}"));
        (name.to_string(), normal(&mut rng, dims, 1.0))
    }

    fn push(&mut self, name: &str, op: CaseOp, params: Vec<(String, Tensor<f64>)>) {
        self.cases.push(GradCase {
            name: name.to_string(),
            op,
            params,
            skip: Vec::new(),
        });
    }

    fn elsa_params(&self, case: &str, cfg: &ElsaConfig) -> Vec<(String, Tensor<f64>)> {
        let mut rng = self.seeds.stream(case);
        let mut p = ElsaParams::<f64>::init(cfg.clone(), &mut rng).expect("valid config");
        // widen the small default inits so every path contributes
        for (name, t) in p.named_mut() {
            if name != "ghost_mul" {
                *t = normal(&mut rng, t.dims(), 0.5);
            }
        }
        p.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

/// The default suite; every shape is at most `(2, 4, 6, 6)`.
pub fn default_suite(seed: u64) -> Vec<GradCase> {
    let mut b = Builder {
        seeds: SeedSplitter::new(seed).child("gradcheck"),
        cases: Vec::new(),
    };
    let x4 = [2, 4, 5, 6];
    b.push("add", CaseOp::Add, vec![b.t("add", "a", &x4), b.t("add", "b", &x4)]);
    b.push("sub", CaseOp::Sub, vec![b.t("sub", "a", &x4), b.t("sub", "b", &x4)]);
    b.push("mul", CaseOp::Mul, vec![b.t("mul", "a", &x4), b.t("mul", "b", &x4)]);
    b.push("scale", CaseOp::Scale, vec![b.t("scale", "a", &x4)]);
    b.push(
        "add_bias",
        CaseOp::AddBias,
        vec![b.t("add_bias", "x", &[2, 4, 3, 5]), b.t("add_bias", "bias", &[4, 3])],
    );
    b.push("reshape", CaseOp::Reshape, vec![b.t("reshape", "x", &[2, 3, 4])]);
    b.push("unfold", CaseOp::Unfold(3), vec![b.t("unfold", "x", &[2, 3, 5, 4])]);
    b.push("softmax", CaseOp::Softmax(2), vec![b.t("softmax", "x", &[2, 3, 9, 5])]);
    b.push(
        "filter_norm",
        CaseOp::FilterNorm(2),
        vec![b.t("filter_norm", "x", &[2, 3, 9, 5])],
    );
    b.push(
        "contract_channel",
        CaseOp::ContractChannel,
        vec![
            b.t("contract_channel", "x", &[2, 4, 3, 4]),
            b.t("contract_channel", "table", &[4, 2, 9]),
        ],
    );
    b.push(
        "contract_unfolded",
        CaseOp::ContractUnfolded,
        vec![
            b.t("contract_unfolded", "u", &[2, 4, 9, 12]),
            b.t("contract_unfolded", "table", &[4, 2, 9]),
        ],
    );
    b.push(
        "expand_per_head",
        CaseOp::ExpandPerHead(2),
        vec![b.t("expand_per_head", "table", &[4, 9])],
    );
    b.push(
        "interleave",
        CaseOp::Interleave,
        vec![b.t("interleave", "a", &[4, 2, 9]), b.t("interleave", "b", &[4, 2, 9])],
    );
    b.push("pad_bias", CaseOp::PadBias, vec![b.t("pad_bias", "bias", &[2, 9])]);
    b.push(
        "linear",
        CaseOp::Linear,
        vec![
            b.t("linear", "x", &x4),
            b.t("linear", "w", &[3, 4]),
            b.t("linear", "b", &[3]),
        ],
    );
    b.push(
        "grouped_conv",
        CaseOp::GroupedConv(2),
        vec![
            b.t("grouped_conv", "x", &[2, 4, 5, 4]),
            b.t("grouped_conv", "w", &[6, 2, 3, 3]),
        ],
    );
    b.push("gelu", CaseOp::Gelu, vec![b.t("gelu", "x", &x4)]);
    b.push(
        "layer_norm",
        CaseOp::LayerNorm,
        vec![
            b.t("layer_norm", "x", &x4),
            b.t("layer_norm", "gamma", &[4]),
            b.t("layer_norm", "beta", &[4]),
        ],
    );
    b.push(
        "patchify",
        CaseOp::Patchify(2),
        vec![b.t("patchify", "x", &[2, 3, 4, 6])],
    );
    b.push("avg_pool", CaseOp::AvgPool, vec![b.t("avg_pool", "x", &x4)]);
    b.push(
        "cross_entropy",
        CaseOp::CrossEntropy(vec![2, 0, 4]),
        vec![b.t("cross_entropy", "logits", &[3, 5])],
    );
    b.push(
        "aggregate",
        CaseOp::Aggregate(3),
        vec![
            b.t("aggregate", "attn", &[2, 2, 9, 20]),
            b.t("aggregate", "v", &[2, 4, 4, 5]),
        ],
    );

    for (preset, size, hw) in [
        (Preset::Net7, 2, [4, 6]),
        (Preset::Net7N, 3, [5, 4]),
        (Preset::Net6N, 5, [4, 4]),
        (Preset::Net5, 3, [6, 6]),
    ] {
        let cfg = preset.config(4, 2, size).expect("valid preset");
        let name = format!("attention_logits/{preset}");
        let t = cfg.application.table_len();
        let params = vec![
            b.t(&name, "q", &[2, 4, hw[0], hw[1]]),
            b.t(&name, "k", &[2, 4, hw[0], hw[1]]),
            b.t(&name, "r_k", &[2, 2, t]),
            b.t(&name, "r_q", &[2, 2, t]),
            b.t(&name, "r_b", &[2, t]),
        ];
        b.push(&name, CaseOp::AttentionLogits(Box::new(cfg)), params);
    }
    for (preset, size, norm, border) in [
        (Preset::Net7, 2, Normalization::Softmax, Border::ZeroPad),
        (Preset::Net7N, 3, Normalization::Softmax, Border::Masked),
        (Preset::Net6N, 3, Normalization::FilterNorm, Border::ZeroPad),
        (Preset::InvolutionLike, 3, Normalization::Identity, Border::ZeroPad),
    ] {
        let mut cfg = preset.config(4, 2, size).expect("valid preset");
        cfg.norm = norm;
        cfg.border = border;
        let name = format!("unified/{preset}/{}", norm.name());
        let t = cfg.application.table_len();
        let params = vec![
            b.t(&name, "q", &[2, 4, 4, 4]),
            b.t(&name, "k", &[2, 4, 4, 4]),
            b.t(&name, "v", &[2, 4, 4, 4]),
            b.t(&name, "r_k", &[2, 2, t]),
            b.t(&name, "r_q", &[2, 2, t]),
            b.t(&name, "r_b", &[2, t]),
        ];
        b.push(&name, CaseOp::Unified(Box::new(cfg)), params);
    }

    b.push(
        "ghost_head/lambda1",
        CaseOp::GhostHead {
            lambda: 1.0,
            gamma: 1.0,
        },
        vec![
            b.t("ghost_head/lambda1", "h", &[2, 2, 9, 4, 4]),
            b.t("ghost_head/lambda1", "mul", &[4, 3, 3]),
            b.t("ghost_head/lambda1", "add", &[4, 3, 3]),
        ],
    );
    // smooth regime: O bounded away from zero
    let mut rng = b.seeds.stream("ghost_head/lambda2/mul");
    let mul = uniform::<f64>(&mut rng, &[4, 3, 3], 0.5, 1.5)
        .zip_map(
            &Tensor::from_fn(&[4, 3, 3], |i| if i % 3 == 0 { -1.0 } else { 1.0 }),
            |a, s| a * s,
        )
        .expect("same dims");
    b.push(
        "ghost_head/lambda2",
        CaseOp::GhostHead {
            lambda: 2.0,
            gamma: 0.5,
        },
        vec![
            b.t("ghost_head/lambda2", "h", &[2, 2, 9, 4, 4]),
            ("mul".into(), mul),
            b.t("ghost_head/lambda2", "add", &[4, 3, 3]),
        ],
    );
    let name = "ghost_head/lambda0.5";
    let mut params = vec![
        b.t(name, "h", &[2, 2, 9, 4, 4]),
        b.t(name, "mul", &[4, 3, 3]),
        b.t(name, "add", &[4, 3, 3]),
    ];
    // plant a few entries at and near zero so the skip path is exercised
    params[1].1.data_mut()[0] = 0.0;
    params[1].1.data_mut()[5] = 4e-4;
    b.cases.push(GradCase {
        name: name.to_string(),
        op: CaseOp::GhostHead {
            lambda: 0.5,
            gamma: 1.0,
        },
        params,
        skip: vec![("mul".into(), 1e-3)],
    });
    b.push(
        "ghost_head_global",
        CaseOp::GhostHeadGlobal {
            lambda: 1.0,
            gamma: 1.0,
        },
        vec![
            b.t("ghost_head_global", "attn", &[2, 3, 4, 4]),
            b.t("ghost_head_global", "mul", &[6, 4]),
            b.t("ghost_head_global", "add", &[6, 4]),
        ],
    );

    for variant in Variant::ALL {
        let cfg = ElsaConfig::new(4, 2, 3);
        let name = format!("hadamard/{variant}");
        let mut params = vec![b.t(&name, "q", &[2, 4, 5, 6]), b.t(&name, "k", &[2, 4, 5, 6])];
        params.extend(b.elsa_params(&name, &cfg));
        b.push(&name, CaseOp::Hadamard(Box::new(cfg), variant), params);
    }
    for variant in Variant::ALL {
        for (tag, layout, ghost) in [
            ("full", TableLayout::Full, true),
            ("per_head", TableLayout::PerHead, true),
            ("no_ghost", TableLayout::Full, false),
        ] {
            if tag != "full" && variant != Variant::MergedConv {
                continue;
            }
            let mut cfg = ElsaConfig::new(4, 2, 3);
            cfg.layout = layout;
            cfg.ghost = ghost;
            let name = format!("elsa_block/{variant}/{tag}");
            let mut params = vec![b.t(&name, "x", &[1, 4, 4, 4])];
            params.extend(b.elsa_params(&name, &cfg));
            b.push(&name, CaseOp::ElsaBlock(Box::new(cfg), variant), params);
        }
    }
    b.cases
}

/// Run every case; rows are named `case:parameter`.
pub fn run_suite(cases: &[GradCase], cfg: FdConfig, mixed: bool) -> Result<GradReport> {
    let mut report = GradReport::default();
    for case in cases {
        let r = if mixed {
            case.check_mixed(cfg)?
        } else {
            case.check(cfg)?
        };
        report.extend(&format!("{}:", case.name), r);
    }
    Ok(report)
}
