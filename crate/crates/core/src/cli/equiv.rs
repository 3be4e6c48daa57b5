//! Cross-variant and degeneracy checks behind `latt equiv`.

use std::fmt::Write as _;

use rand::Rng;

use crate::elsa::{hadamard_attention, ElsaConfig, ElsaParams, Variant};
use crate::error::Result;
use crate::paradigm::{
    dwconv_forward, dynamic_filter_forward, lsa_forward, unified_forward, Normalization, Preset, RelPosTables,
};
use crate::rng::{normal, SeedSplitter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EquivCase {
    pub dims: [usize; 4],
    pub kernel: usize,
    pub heads: usize,
}

impl EquivCase {
    pub fn label(&self) -> String {
        let [b, c, h, w] = self.dims;
        format!("{b}x{c}x{h}x{w}/K{}/G{}", self.kernel, self.heads)
    }

    /// Parse `B,C,H,W,K,G`.
    pub fn parse(s: &str) -> Option<Self> {
        let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v.as_slice() {
            &[b, c, h, w, kernel, heads] => Some(EquivCase {
                dims: [b, c, h, w],
                kernel,
                heads,
            }),
            _ => None,
        }
    }
}

/// 21 configurations, kernels 3/5/7, up to `(4, 64, 14, 14)`.
pub fn default_cases() -> Vec<EquivCase> {
    [
        (1, 8, 6, 6, 3, 2),
        (2, 8, 6, 6, 5, 2),
        (2, 16, 7, 5, 3, 4),
        (1, 12, 9, 9, 7, 3),
        (4, 64, 14, 14, 3, 4),
        (4, 64, 14, 14, 5, 8),
        (4, 64, 14, 14, 7, 4),
        (2, 32, 10, 10, 7, 8),
        (3, 24, 8, 11, 5, 6),
        (1, 4, 4, 4, 3, 1),
        (2, 4, 5, 3, 7, 2),
        (1, 64, 14, 14, 7, 16),
        (2, 48, 12, 12, 3, 12),
        (2, 20, 7, 7, 5, 5),
        (1, 6, 13, 13, 3, 3),
        (2, 10, 9, 6, 5, 2),
        (1, 32, 14, 14, 5, 32),
        (3, 16, 6, 8, 7, 4),
        (2, 8, 11, 7, 3, 8),
        (1, 36, 12, 12, 7, 6),
        (4, 64, 14, 14, 3, 1),
    ]
    .iter()
    .map(|&(b, c, h, w, kernel, heads)| EquivCase {
        dims: [b, c, h, w],
        kernel,
        heads,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Reported for information only.
    Excluded,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Excluded => "not equivalent (by design)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivRow {
    pub check: String,
    pub config: String,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub status: Status,
}

impl EquivRow {
    fn new(check: String, config: String, diff: f64, tolerance: f64) -> Self {
        let status = if diff <= tolerance { Status::Pass } else { Status::Fail };
        EquivRow {
            check,
            config,
            max_abs_diff: diff,
            tolerance,
            status,
        }
    }
}

pub const CSV_HEADER: &str = "check,config,max_abs_diff,tolerance,status";

pub fn to_csv(rows: &[EquivRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3e},{:.1e},{}",
            r.check,
            r.config,
            r.max_abs_diff,
            r.tolerance,
            r.status.name()
        );
    }
    s
}

pub fn all_pass(rows: &[EquivRow]) -> bool {
    rows.iter().all(|r| r.status != Status::Fail)
}

fn diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = a.max_abs_diff(b)?;
    // NaN never passes
    Ok(if d.is_nan() { f64::INFINITY } else { d })
}

/// Parameters with tables wide enough that every logit term matters.
pub fn random_elsa_params<T: Scalar>(cfg: ElsaConfig, seeds: &SeedSplitter) -> Result<ElsaParams<T>> {
    let mut p = ElsaParams::init(cfg, &mut seeds.stream("params"))?;
    p.r_k = normal(&mut seeds.stream("r_k"), p.r_k.dims(), 0.5);
    p.r_q = normal(&mut seeds.stream("r_q"), p.r_q.dims(), 0.5);
    p.r_b = normal(&mut seeds.stream("r_b"), p.r_b.dims(), 0.5);
    Ok(p)
}

/// Pairwise variant diffs per case, plus one informational production row.
pub fn variant_rows<T: Scalar>(cases: &[EquivCase], seed: u64, tolerance: f64) -> Result<Vec<EquivRow>> {
    let root = SeedSplitter::new(seed).child("equiv");
    let mut rows = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let seeds = root.child(&format!("case/{i}"));
        let cfg = ElsaConfig::new(case.dims[1], case.heads, case.kernel);
        let params = random_elsa_params::<T>(cfg, &seeds)?;
        let q: Tensor<T> = normal(&mut seeds.stream("q"), &case.dims, 1.0);
        let k: Tensor<T> = normal(&mut seeds.stream("k"), &case.dims, 1.0);
        let outs = Variant::ALL
            .iter()
            .map(|&v| hadamard_attention(&q, &k, &params, v).map(|h| h.values))
            .collect::<Result<Vec<_>>>()?;
        let label = case.label();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let d = diff(&outs[a], &outs[b])?;
            rows.push(EquivRow::new(
                format!("{}~{}", Variant::ALL[a], Variant::ALL[b]),
                label.clone(),
                d,
                tolerance,
            ));
        }
        let d = diff(&outs[0], &outs[3])?;
        rows.push(EquivRow {
            check: format!("{}~{}", Variant::ALL[0], Variant::ALL[3]),
            config: label,
            max_abs_diff: d,
            tolerance,
            status: Status::Excluded,
        });
    }
    Ok(rows)
}

/// The unified operation against the three specialized evaluators,
/// `instances` random cases each.
pub fn degeneracy_rows<T: Scalar>(seed: u64, instances: usize, tolerance: f64) -> Result<Vec<EquivRow>> {
    let root = SeedSplitter::new(seed).child("degeneracy");
    let mut rows = Vec::new();
    for i in 0..instances {
        let seeds = root.child(&format!("dwconv/{i}"));
        let mut rng = seeds.stream("shape");
        let (b, c, k) = (rng.random_range(1..=2), rng.random_range(1..=8), [1, 3, 5, 7][i % 4]);
        let (h, w) = (rng.random_range(2..=9), rng.random_range(2..=9));
        let x: Tensor<T> = normal(&mut seeds.stream("x"), &[b, c, h, w], 1.0);
        let weights: Tensor<T> = normal(&mut seeds.stream("w"), &[c, k, k], 0.5);
        let cfg = Preset::DwConv.config(c, c, k)?;
        let mut tables = RelPosTables::zeros(&cfg);
        tables.r_b = weights.clone().reshape(&[c, k * k])?;
        let got = unified_forward(&x, &x, &x, &tables, &cfg)?;
        let want = dwconv_forward(&x, &weights)?;
        rows.push(EquivRow::new(
            "unified~dwconv".into(),
            format!("{b}x{c}x{h}x{w}/K{k}"),
            diff(&got, &want)?,
            tolerance,
        ));
    }
    for i in 0..instances {
        let seeds = root.child(&format!("lsa/{i}"));
        let mut rng = seeds.stream("shape");
        let wd = [1, 2, 3, 4][i % 4];
        let g = rng.random_range(1..=3);
        let c = g * rng.random_range(1..=4);
        let (h, w) = (wd * rng.random_range(1..=3), wd * rng.random_range(1..=3));
        let b = rng.random_range(1..=2);
        let dims = [b, c, h, w];
        let q: Tensor<T> = normal(&mut seeds.stream("q"), &dims, 1.0);
        let k: Tensor<T> = normal(&mut seeds.stream("k"), &dims, 1.0);
        let v: Tensor<T> = normal(&mut seeds.stream("v"), &dims, 1.0);
        let span = 2 * wd - 1;
        let bias: Tensor<T> = normal(&mut seeds.stream("bias"), &[g, span * span], 0.5);
        let cfg = Preset::SwinLsa.config(c, g, wd)?;
        let mut tables = RelPosTables::zeros(&cfg);
        tables.r_b = bias.clone();
        let got = unified_forward(&q, &k, &v, &tables, &cfg)?;
        let want = lsa_forward(&q, &k, &v, &bias, wd, cfg.qk_scale)?;
        rows.push(EquivRow::new(
            "unified~lsa".into(),
            format!("{b}x{c}x{h}x{w}/W{wd}/G{g}"),
            diff(&got, &want)?,
            tolerance,
        ));
    }
    for i in 0..instances {
        let seeds = root.child(&format!("dynamic/{i}"));
        let mut rng = seeds.stream("shape");
        let norm = [
            Normalization::Identity,
            Normalization::Softmax,
            Normalization::FilterNorm,
        ][i % 3];
        // a single tap cannot be filter-normalized
        let k = match [3, 5, 1, 7][i % 4] {
            1 if norm == Normalization::FilterNorm => 3,
            k => k,
        };
        let g = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let (b, h, w) = (
            rng.random_range(1..=2),
            rng.random_range(2..=8),
            rng.random_range(2..=8),
        );
        let x: Tensor<T> = normal(&mut seeds.stream("x"), &[b, g * d, h, w], 1.0);
        let weight: Tensor<T> = normal(&mut seeds.stream("w"), &[d, g, k * k], 0.5);
        let mut cfg = Preset::InvolutionLike.config(g * d, g, k)?;
        cfg.norm = norm;
        let mut tables = RelPosTables::zeros(&cfg);
        tables.r_k = weight.clone();
        let got = unified_forward(&x, &x, &x, &tables, &cfg)?;
        let want = dynamic_filter_forward(&x, &weight, k, norm)?;
        rows.push(EquivRow::new(
            format!("unified~dynamic_filter/{}", norm.name()),
            format!("{b}x{}x{h}x{w}/K{k}/G{g}", g * d),
            diff(&got, &want)?,
            tolerance,
        ));
    }
    Ok(rows)
}
