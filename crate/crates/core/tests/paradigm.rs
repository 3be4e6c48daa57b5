//! Unified local operation against literal loop evaluators, degeneracy to
//! the specialized operators, and normalization invariants.

use latt::cli::equiv::{degeneracy_rows, Status};
use latt::paradigm::{
    attention_logits, dwconv_forward, dynamic_filter_forward, lsa_forward, normalize, Application, Border,
    Normalization, Preset, RelPosTables, SlotPlan,
};
use latt::rng::{normal, SeedSplitter};
use latt::Tensor;
use proptest::prelude::*;

mod common;
use common::*;

#[test]
fn every_preset_matches_the_loop_oracle() {
    for (i, p) in Preset::ALL.iter().enumerate() {
        let (size, dims) = if p.is_neighboring() {
            (3, [2, 4, 5, 4])
        } else {
            (2, [2, 4, 4, 6])
        };
        let cfg = p.config(4, 2, size).unwrap();
        let d = check_against_oracle(&cfg, dims, i as u64);
        assert!(d <= 1e-10, "{p}: {d:e}");
    }
}

#[test]
fn net6_on_1x4x4x4() {
    let cfg = Preset::Net6.config(4, 2, 2).unwrap();
    assert!(check_against_oracle(&cfg, [1, 4, 4, 4], 6) <= 1e-10);
}

#[test]
fn every_norm_and_border_matches_the_loop_oracle() {
    for norm in [
        Normalization::Identity,
        Normalization::Softmax,
        Normalization::FilterNorm,
    ] {
        for border in [Border::ZeroPad, Border::Masked] {
            if border == Border::Masked && norm != Normalization::Softmax {
                continue;
            }
            for k in [1, 3, 5] {
                if k == 1 && norm == Normalization::FilterNorm {
                    continue;
                }
                let mut cfg = Preset::Net7N.config(6, 3, k).unwrap();
                cfg.norm = norm;
                cfg.border = border;
                cfg.validate().unwrap();
                let d = check_against_oracle(&cfg, [1, 6, 4, 5], k as u64);
                assert!(d <= 1e-10, "{norm:?} {border:?} K={k}: {d:e}");
            }
        }
    }
}

#[test]
fn masked_border_rejects_non_softmax() {
    let mut cfg = Preset::Net7N.config(4, 2, 3).unwrap();
    cfg.border = Border::Masked;
    cfg.norm = Normalization::Identity;
    assert!(cfg.validate().is_err());
}

/// `y = sum_t w[c, t] x[c, i + offset(t)]` with zero padding.
fn dwconv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>) -> Tensor<f64> {
    let [b, c, h, w] = x.dims4().unwrap();
    let k = wt.dims()[1];
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (key, t) in slots(Application::Neighboring(k), y, xx, h, w) {
                        if let Some((ky, kx)) = key {
                            acc += wt.data()[ch * k * k + t] * at(x, bi, ch, ky, kx);
                        }
                    }
                    out.set(&[bi, ch, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn dwconv_matches_loop_oracle() {
    let seeds = SeedSplitter::new(3);
    for k in [1, 3, 5, 7] {
        let x: Tensor<f64> = normal(&mut seeds.stream(&format!("x{k}")), &[2, 3, 6, 5], 1.0);
        let wt: Tensor<f64> = normal(&mut seeds.stream(&format!("w{k}")), &[3, k, k], 1.0);
        let d = dwconv_forward(&x, &wt)
            .unwrap()
            .max_abs_diff(&dwconv_oracle(&x, &wt))
            .unwrap();
        assert!(d <= 1e-12, "K={k}: {d:e}");
    }
}

/// Per-pixel filters generated from `x_i` and applied to its neighborhood.
fn dynamic_filter_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, k: usize, norm: Normalization) -> Tensor<f64> {
    let [_, c, _, _] = x.dims4().unwrap();
    let g = wt.dims()[1];
    let mut cfg = Preset::InvolutionLike.config(c, g, k).unwrap();
    cfg.norm = norm;
    let mut tb = RelPosTables::zeros(&cfg);
    tb.r_k = wt.clone();
    unified_oracle(x, x, x, &tb, &cfg)
}

#[test]
fn dynamic_filter_matches_loop_oracle() {
    let seeds = SeedSplitter::new(4);
    for (i, norm) in [
        Normalization::Identity,
        Normalization::Softmax,
        Normalization::FilterNorm,
    ]
    .into_iter()
    .enumerate()
    {
        let x: Tensor<f64> = normal(&mut seeds.stream(&format!("x{i}")), &[1, 6, 5, 4], 1.0);
        let wt: Tensor<f64> = normal(&mut seeds.stream(&format!("w{i}")), &[3, 2, 9], 0.5);
        let got = dynamic_filter_forward(&x, &wt, 3, norm).unwrap();
        let d = got.max_abs_diff(&dynamic_filter_oracle(&x, &wt, 3, norm)).unwrap();
        assert!(d <= 1e-12, "{norm:?}: {d:e}");
    }
}

#[test]
fn lsa_matches_unified_oracle() {
    let seeds = SeedSplitter::new(5);
    let [q, k, v] = qkv(&seeds, &[1, 4, 4, 4]);
    let cfg = Preset::SwinLsa.config(4, 2, 2).unwrap();
    let mut tb = RelPosTables::zeros(&cfg);
    tb.r_b = normal(&mut seeds.stream("bias"), &[2, 9], 0.5);
    let got = lsa_forward(&q, &k, &v, &tb.r_b, 2, cfg.qk_scale).unwrap();
    assert!(got.max_abs_diff(&unified_oracle(&q, &k, &v, &tb, &cfg)).unwrap() <= 1e-12);
}

#[test]
fn degeneracy_in_f32_on_ten_instances_each() {
    let rows = degeneracy_rows::<f32>(0, 10, 1e-6).unwrap();
    for family in ["unified~dwconv", "unified~lsa", "unified~dynamic_filter"] {
        let n = rows.iter().filter(|r| r.check.starts_with(family)).count();
        assert!(n >= 10, "{family}: {n} instances");
    }
    for r in &rows {
        assert_eq!(r.status, Status::Pass, "{r:?}");
    }
}

#[test]
fn softmax_rows_sum_to_one_on_every_path() {
    for (name, err) in softmax_paths(8) {
        assert!(err <= 1e-5, "{name}: {err:e}");
    }
}

#[test]
fn filter_normalize_moments() {
    let wide = filter_norm_moments(9);
    assert!(wide >= 240, "{wide}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn random_configs_match_oracle(
        preset in 0usize..Preset::ALL.len(),
        heads in 1usize..=3,
        per_head in 1usize..=2,
        size_ix in 0usize..3,
        h in 1usize..=3,
        w in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let p = Preset::ALL[preset];
        let c = heads * per_head;
        let (size, dims) = if p.is_neighboring() {
            let k = [1, 3, 5][size_ix];
            (k, [1, c, h + 2, w + 1])
        } else {
            let wd = [1, 2, 3][size_ix];
            (wd, [1, c, h * wd, w * wd])
        };
        let cfg = p.config(c, heads, size);
        prop_assume!(cfg.is_ok());
        let cfg = cfg.unwrap();
        prop_assert!(check_against_oracle(&cfg, dims, seed) <= 1e-10);
    }

    #[test]
    fn softmax_maps_are_normalized(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let seeds = SeedSplitter::new(seed);
        let cfg = Preset::Net7N.config(4, 2, 3).unwrap();
        let [q, k, _] = qkv(&seeds, &[1, 4, 4, 3]);
        let q = q.map(|x| x * scale);
        let tb = random_tables(&cfg, &seeds);
        let plan = SlotPlan::new(cfg.application, 4, 3).unwrap();
        let attn = normalize(attention_logits(&q, &k, &tb, &cfg, &plan).unwrap(), cfg.norm).unwrap();
        prop_assert!(attn.normalization_error() <= 1e-5);
    }
}
