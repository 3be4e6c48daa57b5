use latt::elsa::{
    elsa_forward, ghost_head, ghost_head_global, hadamard_attention, hadamard_logits, ElsaConfig, ElsaParams,
    GhostHeadParams, TableLayout, Variant,
};
use latt::rng::{normal, SeedSplitter};
use latt::Tensor;

fn spow(o: f64, l: f64) -> f64 {
    if o == 0.0 {
        0.0
    } else {
        o.signum() * o.abs().powf(l)
    }
}

fn project(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Vec<f64> {
    let d = x.dims().to_vec();
    let (b, c, p) = (d[0], d[1], d[2] * d[3]);
    let mut out = vec![0.0; b * c * p];
    for bi in 0..b {
        for co in 0..c {
            for i in 0..p {
                let mut s = bias.map_or(0.0, |t| t.data()[co]);
                for ci in 0..c {
                    s += w.data()[co * c + ci] * x.data()[(bi * c + ci) * p + i];
                }
                out[(bi * c + co) * p + i] = s;
            }
        }
    }
    out
}

fn neighbor(y: usize, x: usize, t: usize, k: usize, h: usize, w: usize) -> Option<usize> {
    let r = (k / 2) as isize;
    let yy = y as isize + (t / k) as isize - r;
    let xx = x as isize + (t % k) as isize - r;
    (yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize).then(|| yy as usize * w + xx as usize)
}

fn table(p: &ElsaParams<f64>, which: &Tensor<f64>, c: usize, g: usize, t: usize) -> f64 {
    let cfg = &p.config;
    match cfg.layout {
        TableLayout::Full => which.data()[(c * cfg.heads + g) * cfg.taps() + t],
        TableLayout::PerHead => {
            if c / (cfg.channels / cfg.heads) == g {
                which.data()[c * cfg.taps() + t]
            } else {
                0.0
            }
        }
    }
}

/// Logits `(B, G, T, H*W)` by literal loops over the defining formula.
fn logits_oracle(q: &[f64], k: &[f64], dims: [usize; 4], p: &ElsaParams<f64>) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let cfg = &p.config;
    let (g, t_n, kern) = (cfg.heads, cfg.taps(), cfg.kernel);
    let hp: Vec<f64> = q.iter().zip(k).map(|(a, b)| a * b).collect();
    let np = h * w;
    let mut out = vec![0.0; b * g * t_n * np];
    for bi in 0..b {
        for gi in 0..g {
            for t in 0..t_n {
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let mut s = p.r_b.data()[gi * t_n + t];
                        for ci in 0..c {
                            let hi = hp[(bi * c + ci) * np + i];
                            s += hi * table(p, &p.r_k, ci, gi, t);
                            if let Some(j) = neighbor(y, x, t, kern, h, w) {
                                s += table(p, &p.r_q, ci, gi, t) * hp[(bi * c + ci) * np + j];
                            }
                        }
                        out[((bi * g + gi) * t_n + t) * np + i] = s;
                    }
                }
            }
        }
    }
    out
}

fn softmax_taps(logits: &mut [f64], outer: usize, t_n: usize, np: usize) {
    for o in 0..outer {
        for i in 0..np {
            let m = (0..t_n)
                .map(|t| logits[(o * t_n + t) * np + i])
                .fold(f64::MIN, f64::max);
            let z: f64 = (0..t_n).map(|t| (logits[(o * t_n + t) * np + i] - m).exp()).sum();
            for t in 0..t_n {
                let v = &mut logits[(o * t_n + t) * np + i];
                *v = (*v - m).exp() / z;
            }
        }
    }
}

fn forward_oracle(x: &Tensor<f64>, p: &ElsaParams<f64>) -> Vec<f64> {
    let d = x.dims().to_vec();
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    let cfg = &p.config;
    let (g, t_n, kern, np) = (cfg.heads, cfg.taps(), cfg.kernel, h * w);
    let q = project(x, &p.proj_q, p.bias_q.as_ref());
    let k = project(x, &p.proj_k, p.bias_k.as_ref());
    let v = project(x, &p.proj_v, p.bias_v.as_ref());
    let mut attn = logits_oracle(&q, &k, [b, c, h, w], p);
    softmax_taps(&mut attn, b * g, t_n, np);
    let mut f = vec![0.0; b * c * np];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = y * w + xx;
                    let mut s = 0.0;
                    for t in 0..t_n {
                        let hv = attn[((bi * g + ci % g) * t_n + t) * np + i];
                        let gh = match &p.ghost {
                            Some(gp) => {
                                spow(gp.mul.data()[ci * t_n + t], cfg.lambda) * hv
                                    + cfg.gamma * gp.add.data()[ci * t_n + t]
                            }
                            None => attn[((bi * g + ci / (c / g)) * t_n + t) * np + i],
                        };
                        if let Some(j) = neighbor(y, xx, t, kern, h, w) {
                            s += gh * v[(bi * c + ci) * np + j];
                        }
                    }
                    f[(bi * c + ci) * np + i] = s;
                }
            }
        }
    }
    let ft = Tensor::new(&d, f).unwrap();
    project(&ft, &p.proj_out, p.bias_out.as_ref())
}

fn randomized(cfg: ElsaConfig, seed: u64) -> ElsaParams<f64> {
    let s = SeedSplitter::new(seed);
    let mut p = ElsaParams::init(cfg, &mut s.stream("params")).unwrap();
    // larger tables and biases so every term matters
    let scale = |t: &mut Tensor<f64>, name: &str| *t = normal(&mut s.stream(name), t.dims(), 0.5);
    scale(&mut p.r_k, "rk");
    scale(&mut p.r_q, "rq");
    scale(&mut p.r_b, "rb");
    scale(&mut p.proj_q, "wq");
    scale(&mut p.proj_k, "wk");
    scale(&mut p.proj_v, "wv");
    scale(&mut p.proj_out, "wo");
    for (n, b) in [
        ("bq", &mut p.bias_q),
        ("bk", &mut p.bias_k),
        ("bv", &mut p.bias_v),
        ("bo", &mut p.bias_out),
    ] {
        if let Some(b) = b.as_mut() {
            scale(b, n);
        }
    }
    p
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn logits_match_literal_formula_for_every_equivalent_variant() {
    for (i, &(b, c, g, k, h, w)) in [(2, 8, 2, 3, 6, 6), (1, 6, 3, 5, 5, 7), (1, 4, 1, 7, 4, 3)]
        .iter()
        .enumerate()
    {
        for layout in [TableLayout::Full, TableLayout::PerHead] {
            let mut cfg = ElsaConfig::new(c, g, k);
            cfg.layout = layout;
            let p = randomized(cfg, 10 + i as u64);
            let s = SeedSplitter::new(i as u64);
            let q: Tensor<f64> = normal(&mut s.stream("q"), &[b, c, h, w], 1.0);
            let kk: Tensor<f64> = normal(&mut s.stream("k"), &[b, c, h, w], 1.0);
            let want = logits_oracle(q.data(), kk.data(), [b, c, h, w], &p);
            for v in Variant::EQUIVALENT {
                let got = hadamard_logits(&q, &kk, &p, v).unwrap();
                assert_eq!(got.dims(), &[b, g, k * k, h, w]);
                let d = max_diff(got.data(), &want);
                assert!(d <= 1e-12, "{v} {layout:?} case {i}: {d}");
            }
        }
    }
}

#[test]
fn per_head_layout_equals_block_diagonal_full_layout() {
    let mut cfg = ElsaConfig::new(6, 3, 3);
    cfg.layout = TableLayout::PerHead;
    let ph = randomized(cfg.clone(), 4);
    cfg.layout = TableLayout::Full;
    let mut full = ph.clone();
    full.config = cfg;
    let expand = |t: &Tensor<f64>| {
        Tensor::from_fn(&[6, 3, 9], |i| {
            let (c, g, tt) = (i / 27, (i / 9) % 3, i % 9);
            if c / 2 == g {
                t.data()[c * 9 + tt]
            } else {
                0.0
            }
        })
    };
    full.r_k = expand(&ph.r_k);
    full.r_q = expand(&ph.r_q);
    let x: Tensor<f64> = normal(&mut SeedSplitter::new(3).stream("x"), &[1, 6, 5, 4], 1.0);
    for v in Variant::ALL {
        let a = elsa_forward(&x, &ph, v).unwrap();
        let b = elsa_forward(&x, &full, v).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12, "{v}");
    }
}

#[test]
fn block_matches_loop_oracle() {
    for (seed, lambda, gamma, ghost) in [(1, 1.0, 1.0, true), (2, 0.5, 2.0, true), (3, 1.0, 1.0, false)] {
        let mut cfg = ElsaConfig::new(4, 2, 3);
        cfg.lambda = lambda;
        cfg.gamma = gamma;
        cfg.ghost = ghost;
        let p = randomized(cfg, seed);
        let x: Tensor<f64> = normal(&mut SeedSplitter::new(seed).stream("x"), &[1, 4, 4, 4], 1.0);
        let want = forward_oracle(&x, &p);
        for v in Variant::EQUIVALENT {
            let got = elsa_forward(&x, &p, v).unwrap();
            let d = max_diff(got.data(), &want);
            assert!(d <= 1e-10, "{v} seed {seed}: {d}");
        }
    }
}

#[test]
fn output_shape_with_odd_extents() {
    let p = randomized(ElsaConfig::new(8, 2, 5), 5);
    let x: Tensor<f64> = normal(&mut SeedSplitter::new(5).stream("x"), &[2, 8, 7, 5], 1.0);
    for v in Variant::ALL {
        assert_eq!(elsa_forward(&x, &p, v).unwrap().dims(), &[2, 8, 7, 5]);
    }
}

#[test]
fn production_is_normalized_but_not_equivalent() {
    let p = randomized(ElsaConfig::new(8, 2, 3), 6);
    let s = SeedSplitter::new(6);
    let q: Tensor<f64> = normal(&mut s.stream("q"), &[2, 8, 6, 6], 1.0);
    let k: Tensor<f64> = normal(&mut s.stream("k"), &[2, 8, 6, 6], 1.0);
    let prod = hadamard_attention(&q, &k, &p, Variant::Production).unwrap();
    let strict = hadamard_attention(&q, &k, &p, Variant::StrictUnfold).unwrap();
    assert!(prod.normalization_error() <= 1e-12);
    assert!(strict.normalization_error() <= 1e-12);
    assert!(prod.values.max_abs_diff(&strict.values).unwrap() > 1e-3);
}

#[test]
fn f32_variants_agree() {
    let p64 = randomized(ElsaConfig::new(8, 2, 3), 7);
    let mut p32 = ElsaParams::<f32>::identity(p64.config.clone()).unwrap();
    for ((_, dst), (_, src)) in p32.named_mut().into_iter().zip(p64.named()) {
        *dst = src.cast();
    }
    let s = SeedSplitter::new(7);
    let q: Tensor<f32> = normal(&mut s.stream("q"), &[2, 8, 6, 6], 1.0);
    let k: Tensor<f32> = normal(&mut s.stream("k"), &[2, 8, 6, 6], 1.0);
    let a = hadamard_attention(&q, &k, &p32, Variant::StrictUnfold).unwrap();
    for v in [Variant::ShiftConv, Variant::MergedConv] {
        let b = hadamard_attention(&q, &k, &p32, v).unwrap();
        assert!(a.values.max_abs_diff(&b.values).unwrap() <= 1e-5, "{v}");
    }
}

#[test]
fn ghost_head_examples() {
    let s = SeedSplitter::new(8);
    let q: Tensor<f64> = normal(&mut s.stream("q"), &[1, 6, 4, 4], 1.0);
    let k: Tensor<f64> = normal(&mut s.stream("k"), &[1, 6, 4, 4], 1.0);
    let p = randomized(ElsaConfig::new(6, 2, 3), 8);
    let h = hadamard_attention(&q, &k, &p, Variant::MergedConv).unwrap();
    let hd = h.values.data();
    let per = 9 * 16;

    let ones = GhostHeadParams::identity(6, 3);
    let out = ghost_head(&h, &ones, 0.37, 0.0).unwrap();
    assert_eq!(out.dims(), &[1, 6, 9, 4, 4]);
    for c in 0..6 {
        assert_eq!(
            &out.data()[c * per..(c + 1) * per],
            &hd[(c % 2) * per..(c % 2 + 1) * per]
        );
    }

    let mut signed = GhostHeadParams::init(6, 3, &mut s.stream("o"));
    signed.mul.data_mut().iter_mut().for_each(|o| {
        if *o == 0.0 {
            *o = 1.0
        }
    });
    let out = ghost_head(&h, &signed, 0.0, 0.0).unwrap();
    for c in 0..6 {
        for t in 0..9 {
            for i in 0..16 {
                let sign = signed.mul.data()[c * 9 + t].signum();
                assert_eq!(out.data()[(c * 9 + t) * 16 + i], sign * hd[((c % 2) * 9 + t) * 16 + i]);
            }
        }
    }

    let out = ghost_head(&h, &signed, 1.0, 1.0).unwrap();
    for (c, t, i) in [(0, 0, 0), (5, 8, 15), (3, 4, 7)] {
        let o = signed.mul.data()[c * 9 + t];
        let sv = signed.add.data()[c * 9 + t];
        let want = o * hd[((c % 2) * 9 + t) * 16 + i] + sv;
        assert!((out.data()[(c * 9 + t) * 16 + i] - want).abs() <= 1e-12);
    }
}

#[test]
fn ghost_head_global_examples() {
    let s = SeedSplitter::new(9);
    let attn: Tensor<f64> = normal(&mut s.stream("a"), &[1, 3, 4, 4], 1.0);
    let out = ghost_head_global(&attn, &Tensor::ones(&[6, 4]), &Tensor::zeros(&[6, 4]), 1.0, 0.0).unwrap();
    assert_eq!(out.dims(), &[1, 6, 4, 4]);
    for c in 0..6 {
        assert_eq!(
            &out.data()[c * 16..(c + 1) * 16],
            &attn.data()[(c % 3) * 16..(c % 3 + 1) * 16]
        );
    }

    let a2: Tensor<f64> = normal(&mut s.stream("b"), &[1, 1, 2, 2], 1.0);
    let o: Tensor<f64> = normal(&mut s.stream("o"), &[2, 2], 1.0);
    let sm: Tensor<f64> = normal(&mut s.stream("s"), &[2, 2], 1.0);
    let out = ghost_head_global(&a2, &o, &sm, 2.0, 0.5).unwrap();
    for c in 0..2 {
        for n in 0..2 {
            for m in 0..2 {
                let want = spow(o.get(&[c, m]), 2.0) * a2.get(&[0, 0, n, m]) + 0.5 * sm.get(&[c, m]);
                assert!((out.get(&[0, c, n, m]) - want).abs() <= 1e-12);
            }
        }
    }
    assert!(ghost_head_global(&attn, &Tensor::ones(&[2, 4]), &Tensor::zeros(&[2, 4]), 1.0, 0.0).is_err());
}

#[test]
fn logits_scale_quadratically_and_aggregation_cubically() {
    let mut cfg = ElsaConfig::new(4, 2, 3);
    cfg.proj_bias = false;
    let mut p = randomized(cfg, 11);
    p.r_b = Tensor::zeros(p.r_b.dims());
    let x: Tensor<f64> = normal(&mut SeedSplitter::new(11).stream("x"), &[1, 4, 5, 5], 1.0);
    let alpha = 1.7;
    let xa = x.map(|v| v * alpha);
    let proj = |x: &Tensor<f64>, w: &Tensor<f64>| Tensor::new(x.dims(), project(x, w, None)).unwrap();
    let l1 = hadamard_logits(&proj(&x, &p.proj_q), &proj(&x, &p.proj_k), &p, Variant::MergedConv).unwrap();
    let l2 = hadamard_logits(&proj(&xa, &p.proj_q), &proj(&xa, &p.proj_k), &p, Variant::MergedConv).unwrap();
    let d = max_diff(&l1.map(|v| v * alpha * alpha).into_data(), l2.data());
    assert!(d <= 1e-12, "{d}");
    // with the softmax bypassed, aggregating v gives the cubic term
    let v1 = proj(&x, &p.proj_v);
    let v2 = proj(&xa, &p.proj_v);
    let plan = latt::paradigm::SlotPlan::new(latt::paradigm::Application::Neighboring(3), 5, 5).unwrap();
    let agg = |l: &Tensor<f64>, v: &Tensor<f64>| {
        let l = l.clone().reshape(&[1, 2, 9, 25]).unwrap();
        latt::paradigm::aggregate(&l, v, &plan).unwrap()
    };
    let a1 = agg(&l1, &v1);
    let a2 = agg(&l2, &v2);
    let d = max_diff(&a1.map(|v| v * alpha.powi(3)).into_data(), a2.data());
    assert!(d <= 1e-10, "{d}");
}
