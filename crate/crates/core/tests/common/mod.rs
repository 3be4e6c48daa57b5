//! Loop oracles and invariant checks shared by the integration tests.
#![allow(dead_code)]

use latt::elsa::{hadamard_attention, ElsaConfig, ElsaParams, TableLayout, Variant};
use latt::paradigm::{
    attention_logits, normalize, unified_forward, Application, AttentionMap, Border, Normalization, ParadigmConfig,
    Preset, RelPosTables, SlotPlan,
};
use latt::rng::{normal, SeedSplitter};
use latt::tensor::{filter_normalize_axis, DEFAULT_FILTER_EPS};
use latt::Tensor;

pub fn at(t: &Tensor<f64>, b: usize, c: usize, y: usize, x: usize) -> f64 {
    t.get(&[b, c, y, x])
}

/// `(key pixel or None, table index)` for every slot of query `(y, x)`.
pub fn slots(app: Application, y: usize, x: usize, h: usize, w: usize) -> Vec<(Option<(usize, usize)>, usize)> {
    match app {
        Application::Window(wd) => {
            let (oy, ox) = (y / wd * wd, x / wd * wd);
            let span = 2 * wd - 1;
            let mut out = Vec::new();
            for ky in oy..oy + wd {
                for kx in ox..ox + wd {
                    let t = (ky + wd - 1 - y) * span + (kx + wd - 1 - x);
                    out.push((Some((ky, kx)), t));
                }
            }
            out
        }
        Application::Neighboring(k) => {
            let r = (k / 2) as isize;
            let mut out = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ky, kx) = (y as isize + dy, x as isize + dx);
                    let inside = ky >= 0 && kx >= 0 && (ky as usize) < h && (kx as usize) < w;
                    let t = ((dy + r) * k as isize + dx + r) as usize;
                    out.push((inside.then_some((ky as usize, kx as usize)), t));
                }
            }
            out
        }
    }
}

/// Direct evaluation of
/// `y_i = sum_j norm_j(s q_i.k_j + q_i.rk_{j-i} + rq_{j-i}.k_j + rb_{j-i}) v_j`
/// one pixel and head at a time.
pub fn unified_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    tb: &RelPosTables<f64>,
    cfg: &ParadigmConfig,
) -> Tensor<f64> {
    let [b, c, h, w] = q.dims4().unwrap();
    let dh = c / cfg.heads;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for g in 0..cfg.heads {
            for y in 0..h {
                for x in 0..w {
                    let sl = slots(cfg.application, y, x, h, w);
                    let mut logits = Vec::new();
                    let mut keep = Vec::new();
                    for &(key, t) in &sl {
                        let masked = key.is_none() && cfg.border == Border::Masked;
                        let mut z = 0.0;
                        for d in 0..dh {
                            let ch = g * dh + d;
                            let qv = at(q, bi, ch, y, x);
                            let kv = key.map_or(0.0, |(ky, kx)| at(k, bi, ch, ky, kx));
                            if cfg.use_qk {
                                z += cfg.qk_scale * qv * kv;
                            }
                            if cfg.use_q_rk {
                                z += qv * tb.r_k.get(&[d, g, t]);
                            }
                            if cfg.use_rq_k {
                                z += tb.r_q.get(&[d, g, t]) * kv;
                            }
                        }
                        if cfg.use_rb {
                            z += tb.r_b.get(&[g, t]);
                        }
                        logits.push(z);
                        keep.push(!masked);
                    }
                    let n = logits.len() as f64;
                    let weights: Vec<f64> = match cfg.norm {
                        Normalization::Identity => logits.clone(),
                        Normalization::Softmax => {
                            let m = logits
                                .iter()
                                .zip(&keep)
                                .filter(|(_, &k)| k)
                                .map(|(z, _)| *z)
                                .fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = logits
                                .iter()
                                .zip(&keep)
                                .map(|(z, &k)| if k { (z - m).exp() } else { 0.0 })
                                .collect();
                            let s: f64 = e.iter().sum();
                            e.iter().map(|x| x / s).collect()
                        }
                        Normalization::FilterNorm => {
                            let mean = logits.iter().sum::<f64>() / n;
                            let std = (logits.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
                            logits
                                .iter()
                                .map(|z| {
                                    if std == 0.0 {
                                        0.0
                                    } else {
                                        (z - mean) / (std + DEFAULT_FILTER_EPS)
                                    }
                                })
                                .collect()
                        }
                    };
                    for d in 0..dh {
                        let ch = g * dh + d;
                        let mut acc = 0.0;
                        for (&(key, _), a) in sl.iter().zip(&weights) {
                            if let Some((ky, kx)) = key {
                                acc += a * at(v, bi, ch, ky, kx);
                            }
                        }
                        out.set(&[bi, ch, y, x], acc);
                    }
                }
            }
        }
    }
    out
}

pub fn random_tables(cfg: &ParadigmConfig, seeds: &SeedSplitter) -> RelPosTables<f64> {
    let z = RelPosTables::<f64>::zeros(cfg);
    RelPosTables {
        r_k: normal(&mut seeds.stream("rk"), z.r_k.dims(), 0.5),
        r_q: normal(&mut seeds.stream("rq"), z.r_q.dims(), 0.5),
        r_b: normal(&mut seeds.stream("rb"), z.r_b.dims(), 0.5),
    }
}

pub fn qkv(seeds: &SeedSplitter, dims: &[usize]) -> [Tensor<f64>; 3] {
    ["q", "k", "v"].map(|n| normal(&mut seeds.stream(n), dims, 1.0))
}

pub fn check_against_oracle(cfg: &ParadigmConfig, dims: [usize; 4], seed: u64) -> f64 {
    let seeds = SeedSplitter::new(seed);
    let [q, k, v] = qkv(&seeds, &dims);
    let tb = random_tables(cfg, &seeds);
    let got = unified_forward(&q, &k, &v, &tb, cfg).unwrap();
    got.max_abs_diff(&unified_oracle(&q, &k, &v, &tb, cfg)).unwrap()
}

pub fn softmax_paths(seed: u64) -> Vec<(String, f64)> {
    let seeds = SeedSplitter::new(seed);
    let mut out = Vec::new();
    let cases: [(Preset, usize, Border); 5] = [
        (Preset::Net7, 2, Border::ZeroPad),
        (Preset::SwinLsa, 3, Border::ZeroPad),
        (Preset::Net7N, 3, Border::ZeroPad),
        (Preset::Net7N, 5, Border::Masked),
        (Preset::Net6N, 7, Border::ZeroPad),
    ];
    for (p, size, border) in cases {
        let mut cfg = p.config(6, 3, size).unwrap();
        cfg.border = border;
        let [q, k, _] = qkv(&seeds, &[2, 6, 6, 6]);
        // large tables push the softmax into saturation
        let mut tb = random_tables(&cfg, &seeds);
        tb.r_b = tb.r_b.map(|x| x * 40.0);
        let plan = SlotPlan::new(cfg.application, 6, 6).unwrap();
        let attn = normalize(attention_logits(&q, &k, &tb, &cfg, &plan).unwrap(), cfg.norm).unwrap();
        out.push((format!("{p}/{size}/{border:?}"), attn.normalization_error()));
    }
    for v in Variant::ALL {
        for layout in [TableLayout::Full, TableLayout::PerHead] {
            let mut cfg = ElsaConfig::new(8, 2, 5);
            cfg.layout = layout;
            let params = ElsaParams::<f32>::init(cfg, &mut seeds.stream("elsa")).unwrap();
            let q: Tensor<f32> = normal(&mut seeds.stream("eq"), &[2, 8, 5, 7], 3.0);
            let h = hadamard_attention(&q, &q, &params, v).unwrap();
            out.push((format!("{v}/{layout:?}"), h.normalization_error()));
        }
    }
    out
}

/// Checks mean 0 and std sigma/(sigma+eps) on every filter, and std 1 within
/// 1e-4 where sigma >= 0.1. Returns how many filters met the latter.
pub fn filter_norm_moments(seed: u64) -> usize {
    let seeds = SeedSplitter::new(seed);
    let moments = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        (mean, std)
    };
    let mut wide = 0;
    for (i, t) in [2usize, 9, 25, 49].into_iter().enumerate() {
        let x: Tensor<f64> = normal(&mut seeds.stream(&format!("x{i}")), &[2, 3, t, 11], 1.0);
        let map = AttentionMap::raw(x.clone())
            .filter_normalize(DEFAULT_FILTER_EPS)
            .unwrap();
        let y = filter_normalize_axis(&x, 2, DEFAULT_FILTER_EPS).unwrap();
        assert_eq!(map.values, y);
        for o in 0..6 {
            for p in 0..11 {
                let slice = |src: &[f64]| (0..t).map(|s| src[(o * t + s) * 11 + p]).collect::<Vec<_>>();
                let (_, sigma) = moments(&slice(x.data()));
                let (mean, std) = moments(&slice(y.data()));
                assert!(mean.abs() <= 1e-6, "mean {mean:e}");
                // eps sits on the std, so the output std is sigma / (sigma + eps)
                assert!((std - sigma / (sigma + DEFAULT_FILTER_EPS)).abs() <= 1e-9);
                if sigma >= 0.1 {
                    assert!((std - 1.0).abs() <= 1e-4, "std {std}");
                    wide += 1;
                }
            }
        }
    }
    wide
}

/// Max abs diff of the f32 unified operation from the f64 loop oracle, with
/// the oracle fed the same f32-rounded inputs.
pub fn f32_oracle_diff(cfg: &ParadigmConfig, dims: [usize; 4], seed: u64) -> f64 {
    let seeds = SeedSplitter::new(seed);
    let round = |t: &Tensor<f64>| t.cast::<f32>();
    let [q, k, v] = qkv(&seeds, &dims).map(|t| round(&t));
    let tb = random_tables(cfg, &seeds);
    let tb32 = RelPosTables {
        r_k: round(&tb.r_k),
        r_q: round(&tb.r_q),
        r_b: round(&tb.r_b),
    };
    let tb64 = RelPosTables {
        r_k: tb32.r_k.cast(),
        r_q: tb32.r_q.cast(),
        r_b: tb32.r_b.cast(),
    };
    let got = unified_forward(&q, &k, &v, &tb32, cfg).unwrap().cast::<f64>();
    let want = unified_oracle(&q.cast(), &k.cast(), &v.cast(), &tb64, cfg);
    got.max_abs_diff(&want).unwrap()
}
