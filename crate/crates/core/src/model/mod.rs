//! A small hierarchical classifier with a pluggable spatial mixer.
//!
//! patch embed -> stages of `[norm -> mixer -> +x, norm -> MLP -> +x]`, with
//! 2x patch merging between stages -> norm -> global pool -> linear head.

mod count;
mod data;
mod train;

pub use count::{count_params_flops, Architecture, Counts};
pub use data::{SyntheticDataset, IMAGE_CHANNELS, IMAGE_SIZE, NUM_CLASSES};
pub use train::{evaluate, train, LrSchedule, Optimizer, TrainConfig, TrainLog, TrainRow};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::config::KvDoc;
use crate::elsa::{elsa_forward_on, ElsaConfig, ElsaParams, ElsaVars, TableLayout, Variant};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::paradigm::{Border, Normalization, ParadigmConfig, Preset, RelPosTables, SlotPlan};
use crate::rng::{trunc_normal, SeedSplitter};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixer {
    /// Windowed self-attention with a relative position bias.
    Lsa,
    DwConv,
    Unified(Preset),
    Elsa(Variant),
}

impl fmt::Display for Mixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mixer::Lsa => f.write_str("lsa"),
            Mixer::DwConv => f.write_str("dwconv"),
            Mixer::Unified(p) => write!(f, "unified:{p}"),
            Mixer::Elsa(v) => write!(f, "elsa:{v}"),
        }
    }
}

impl FromStr for Mixer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "lsa" => Ok(Mixer::Lsa),
            None if s == "dwconv" => Ok(Mixer::DwConv),
            None if s == "elsa" => Ok(Mixer::Elsa(Variant::MergedConv)),
            Some(("unified", p)) => Ok(Mixer::Unified(p.parse()?)),
            Some(("elsa", v)) => Ok(Mixer::Elsa(v.parse()?)),
            _ => Err(Error::Unknown {
                kind: "mixer",
                name: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    /// Head count under [`HeadSetting::OneX`].
    pub heads: usize,
    pub mixer: Mixer,
    /// Window size (window mixers) or kernel size (neighborhood mixers).
    pub size: usize,
}

/// How per-stage head counts are derived from [`StageConfig::heads`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadSetting {
    One,
    #[default]
    OneX,
    TwoX,
    /// One head per channel.
    C,
}

impl HeadSetting {
    pub fn name(self) -> &'static str {
        match self {
            HeadSetting::One => "1",
            HeadSetting::OneX => "1x",
            HeadSetting::TwoX => "2x",
            HeadSetting::C => "c",
        }
    }

    pub fn heads(self, stage: &StageConfig) -> usize {
        match self {
            HeadSetting::One => 1,
            HeadSetting::OneX => stage.heads,
            HeadSetting::TwoX => 2 * stage.heads,
            HeadSetting::C => stage.channels,
        }
    }
}

impl FromStr for HeadSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "one" => Ok(HeadSetting::One),
            "1x" | "onex" => Ok(HeadSetting::OneX),
            "2x" | "twox" => Ok(HeadSetting::TwoX),
            "c" => Ok(HeadSetting::C),
            _ => Err(Error::Unknown {
                kind: "head setting",
                name: s.into(),
            }),
        }
    }
}

/// Options shared by every ELSA mixer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ElsaOptions {
    pub layout: TableLayout,
    pub lambda: f64,
    pub gamma: f64,
    pub ghost: bool,
}

impl Default for ElsaOptions {
    fn default() -> Self {
        ElsaOptions {
            layout: TableLayout::Full,
            lambda: 1.0,
            gamma: 1.0,
            ghost: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub patch: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub head_setting: HeadSetting,
    pub elsa: ElsaOptions,
    /// Border handling for neighborhood-mode unified mixers.
    pub border: Border,
    /// Replaces the preset normalization of unified mixers.
    pub unified_norm: Option<Normalization>,
}

impl ModelConfig {
    /// Two stages on 32x32 inputs: 8x8 tokens of width 32, then 4x4 of width 64.
    pub fn tiny(mixer: Mixer) -> Self {
        let size = match mixer {
            Mixer::Lsa => 4,
            Mixer::Unified(p) if !p.is_neighboring() => 4,
            _ => 3,
        };
        ModelConfig {
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: 32,
                    heads: 2,
                    mixer,
                    size,
                },
                StageConfig {
                    blocks: 1,
                    channels: 64,
                    heads: 4,
                    mixer,
                    size,
                },
            ],
            patch: 4,
            in_channels: 3,
            num_classes: 10,
            head_setting: HeadSetting::OneX,
            elsa: ElsaOptions::default(),
            border: Border::ZeroPad,
            unified_norm: None,
        }
    }

    pub fn stage_heads(&self, s: usize) -> usize {
        self.head_setting.heads(&self.stages[s])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.patch == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "model needs stages, a patch size, inputs and classes".into(),
            ));
        }
        for (s, st) in self.stages.iter().enumerate() {
            let heads = self.stage_heads(s);
            if st.blocks == 0 || heads == 0 || st.channels % heads != 0 {
                return Err(Error::HeadsChannels {
                    heads,
                    channels: st.channels,
                });
            }
            match st.mixer {
                Mixer::Lsa => {}
                Mixer::DwConv => crate::tensor::OffsetOrder::new(st.size).map(|_| ())?,
                Mixer::Unified(_) => self.paradigm_config(s).map(|_| ())?,
                Mixer::Elsa(_) => self.elsa_config(s).validate()?,
            }
            if st.size == 0 {
                return Err(Error::Config(format!("stage {s} has size 0")));
            }
        }
        Ok(())
    }

    /// Token-grid extent at each stage for a square input of `resolution`.
    pub fn stage_extents(&self, resolution: usize) -> Result<Vec<usize>> {
        if !resolution.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "resolution {resolution} not divisible by patch {}",
                self.patch
            )));
        }
        let mut e = resolution / self.patch;
        let mut out = vec![e];
        for s in 1..self.stages.len() {
            if !e.is_multiple_of(2) {
                return Err(Error::Config(format!("stage {s} cannot halve extent {e}")));
            }
            e /= 2;
            out.push(e);
        }
        Ok(out)
    }

    pub(crate) fn elsa_config(&self, s: usize) -> ElsaConfig {
        let st = &self.stages[s];
        ElsaConfig {
            channels: st.channels,
            heads: self.stage_heads(s),
            kernel: st.size,
            lambda: self.elsa.lambda,
            gamma: self.elsa.gamma,
            layout: self.elsa.layout,
            proj_bias: true,
            ghost: self.elsa.ghost,
        }
    }

    pub(crate) fn paradigm_config(&self, s: usize) -> Result<ParadigmConfig> {
        let st = &self.stages[s];
        let preset = match st.mixer {
            Mixer::Lsa => Preset::SwinLsa,
            Mixer::Unified(p) => p,
            _ => return Err(Error::Config(format!("stage {s} has no paradigm mixer"))),
        };
        let mut cfg = preset.config(st.channels, self.stage_heads(s), st.size)?;
        if preset.is_neighboring() {
            cfg.border = self.border;
        }
        if let (Mixer::Unified(_), Some(norm)) = (st.mixer, self.unified_norm) {
            cfg.norm = norm;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        doc.set(&k("patch"), self.patch);
        doc.set(&k("in_channels"), self.in_channels);
        doc.set(&k("num_classes"), self.num_classes);
        doc.set(&k("head_setting"), self.head_setting.name());
        doc.set(&k("stages"), self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            doc.set(&k(&format!("stage.{i}.blocks")), st.blocks);
            doc.set(&k(&format!("stage.{i}.channels")), st.channels);
            doc.set(&k(&format!("stage.{i}.heads")), st.heads);
            doc.set(&k(&format!("stage.{i}.mixer")), st.mixer);
            doc.set(&k(&format!("stage.{i}.size")), st.size);
        }
        doc.set(
            &k("elsa.layout"),
            match self.elsa.layout {
                TableLayout::Full => "full",
                TableLayout::PerHead => "per_head",
            },
        );
        doc.set(&k("elsa.lambda"), self.elsa.lambda);
        doc.set(&k("elsa.gamma"), self.elsa.gamma);
        doc.set(&k("elsa.ghost"), self.elsa.ghost);
        doc.set(
            &k("border"),
            match self.border {
                Border::ZeroPad => "zero_pad",
                Border::Masked => "masked",
            },
        );
        if let Some(norm) = self.unified_norm {
            doc.set(&k("unified_norm"), norm.name());
        }
    }

    /// Read from `doc`; missing keys fall back to [`ModelConfig::tiny`] with
    /// the mixer of `{prefix}mixer` (default ELSA).
    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let mixer: Mixer = doc.get_or(&k("mixer"), Mixer::Elsa(Variant::MergedConv))?;
        let mut cfg = ModelConfig::tiny(mixer);
        cfg.patch = doc.get_or(&k("patch"), cfg.patch)?;
        cfg.in_channels = doc.get_or(&k("in_channels"), cfg.in_channels)?;
        cfg.num_classes = doc.get_or(&k("num_classes"), cfg.num_classes)?;
        cfg.head_setting = doc.get_or(&k("head_setting"), cfg.head_setting)?;
        let n: usize = doc.get_or(&k("stages"), cfg.stages.len())?;
        if n == 0 {
            return Err(doc.bad_value(&k("stages"), "0"));
        }
        let template = cfg.stages.last().cloned().expect("tiny has stages");
        cfg.stages.resize(n, template);
        for (i, st) in cfg.stages.iter_mut().enumerate() {
            let key = |f: &str| k(&format!("stage.{i}.{f}"));
            st.blocks = doc.get_or(&key("blocks"), st.blocks)?;
            st.channels = doc.get_or(&key("channels"), st.channels)?;
            st.heads = doc.get_or(&key("heads"), st.heads)?;
            st.mixer = doc.get_or(&key("mixer"), st.mixer)?;
            st.size = doc.get_or(&key("size"), st.size)?;
        }
        if let Some(layout) = doc.get_str(&k("elsa.layout")) {
            cfg.elsa.layout = match layout {
                "full" => TableLayout::Full,
                "per_head" => TableLayout::PerHead,
                other => return Err(doc.bad_value(&k("elsa.layout"), other)),
            };
        }
        cfg.elsa.lambda = doc.get_or(&k("elsa.lambda"), cfg.elsa.lambda)?;
        cfg.elsa.gamma = doc.get_or(&k("elsa.gamma"), cfg.elsa.gamma)?;
        cfg.elsa.ghost = doc.get_or(&k("elsa.ghost"), cfg.elsa.ghost)?;
        if let Some(b) = doc.get_str(&k("border")) {
            cfg.border = match b {
                "zero_pad" => Border::ZeroPad,
                "masked" => Border::Masked,
                other => return Err(doc.bad_value(&k("border"), other)),
            };
        }
        cfg.unified_norm = doc.get(&k("unified_norm"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for HeadSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of a built model, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

struct Init<'a, T> {
    seeds: SeedSplitter,
    params: &'a mut Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Init<'_, T> {
    fn add(&mut self, name: String, t: Tensor<T>) {
        self.params.push((name, t));
    }

    fn weight(&mut self, name: String, dims: &[usize]) {
        let t = trunc_normal(&mut self.seeds.stream(&name), dims, 0.02);
        self.add(name, t);
    }

    fn zeros(&mut self, name: String, dims: &[usize]) {
        self.add(name, Tensor::zeros(dims));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.g"), Tensor::ones(&[c]));
        self.zeros(format!("{prefix}.b"), &[c]);
    }

    fn linear(&mut self, prefix: &str, cout: usize, cin: usize, bias: bool) {
        self.weight(format!("{prefix}.w"), &[cout, cin]);
        if bias {
            self.zeros(format!("{prefix}.b"), &[cout]);
        }
    }
}

/// Which relative tables a paradigm mixer owns, by term flag.
fn used_tables(cfg: &ParadigmConfig) -> [bool; 3] {
    [cfg.use_q_rk, cfg.use_rq_k, cfg.use_rb]
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut init = Init {
            seeds: SeedSplitter::new(seed).child("model"),
            params: &mut params,
        };
        let c0 = config.stages[0].channels;
        init.linear("embed", c0, config.in_channels * config.patch * config.patch, true);
        init.norm("embed.norm", c0);
        let mut prev = c0;
        for (s, st) in config.stages.iter().enumerate() {
            let c = st.channels;
            if s > 0 {
                init.norm(&format!("s{s}.merge.norm"), 4 * prev);
                init.linear(&format!("s{s}.merge"), c, 4 * prev, false);
            }
            for b in 0..st.blocks {
                let p = format!("s{s}.b{b}");
                init.norm(&format!("{p}.norm1"), c);
                let m = format!("{p}.mixer");
                match st.mixer {
                    Mixer::DwConv => init.weight(format!("{m}.w"), &[c, 1, st.size, st.size]),
                    Mixer::Lsa | Mixer::Unified(_) => {
                        let pc = config.paradigm_config(s)?;
                        for proj in ["q", "k", "v", "out"] {
                            init.linear(&format!("{m}.{proj}"), c, c, true);
                        }
                        let tables = RelPosTables::<T>::init(&pc, &mut init.seeds.stream(&m));
                        let used = used_tables(&pc);
                        for (on, (name, t)) in
                            used.iter()
                                .zip([("r_k", tables.r_k), ("r_q", tables.r_q), ("r_b", tables.r_b)])
                        {
                            if *on {
                                init.add(format!("{m}.{name}"), t);
                            }
                        }
                    }
                    Mixer::Elsa(_) => {
                        let ep = ElsaParams::<T>::init(config.elsa_config(s), &mut init.seeds.stream(&m))?;
                        for (name, t) in ep.named() {
                            init.add(format!("{m}.{name}"), t.clone());
                        }
                    }
                }
                init.norm(&format!("{p}.norm2"), c);
                init.linear(&format!("{p}.mlp1"), MLP_RATIO * c, c, true);
                init.linear(&format!("{p}.mlp2"), c, MLP_RATIO * c, true);
            }
            prev = c;
        }
        init.norm("head.norm", prev);
        init.linear("head", config.num_classes, prev, true);
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Model { config, params, index })
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register all parameters and build logits `(B, num_classes)` for `x`.
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let vars: BTreeMap<&str, Var> = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), tape.param(n, t.clone())))
            .collect();
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        };
        let cfg = &self.config;
        let [b, cin, _, _] = tape.value(x).dims4()?;
        if cin != cfg.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {cin}",
                cfg.in_channels
            )));
        }
        let mut h = tape.patchify(x, cfg.patch)?;
        h = tape.linear(h, v("embed.w")?, Some(v("embed.b")?))?;
        h = tape.layer_norm(h, v("embed.norm.g")?, v("embed.norm.b")?, LN_EPS)?;
        for (s, st) in cfg.stages.iter().enumerate() {
            if s > 0 {
                h = tape.patchify(h, 2)?;
                let p = format!("s{s}.merge");
                h = tape.layer_norm(h, v(&format!("{p}.norm.g"))?, v(&format!("{p}.norm.b"))?, LN_EPS)?;
                h = tape.linear(h, v(&format!("{p}.w"))?, None)?;
            }
            let [_, _, hh, ww] = tape.value(h).dims4()?;
            let plan = match st.mixer {
                Mixer::Lsa | Mixer::Unified(_) => {
                    Some(Arc::new(SlotPlan::new(cfg.paradigm_config(s)?.application, hh, ww)?))
                }
                _ => None,
            };
            for blk in 0..st.blocks {
                let p = format!("s{s}.b{blk}");
                let n = tape.layer_norm(h, v(&format!("{p}.norm1.g"))?, v(&format!("{p}.norm1.b"))?, LN_EPS)?;
                let m = format!("{p}.mixer");
                let mixed = match st.mixer {
                    Mixer::DwConv => tape.grouped_conv(n, v(&format!("{m}.w"))?, st.channels)?,
                    Mixer::Lsa | Mixer::Unified(_) => {
                        let pc = cfg.paradigm_config(s)?;
                        let lin = |tape: &mut Tape<T>, which: &str| -> Result<Var> {
                            tape.linear(n, v(&format!("{m}.{which}.w"))?, Some(v(&format!("{m}.{which}.b"))?))
                        };
                        let q = lin(tape, "q")?;
                        let k = lin(tape, "k")?;
                        let val = lin(tape, "v")?;
                        let zeros = RelPosTables::<T>::zeros(&pc);
                        let used = used_tables(&pc);
                        let mut tables = Vec::with_capacity(3);
                        for (on, (name, z)) in
                            used.iter()
                                .zip([("r_k", zeros.r_k), ("r_q", zeros.r_q), ("r_b", zeros.r_b)])
                        {
                            tables.push(if *on {
                                v(&format!("{m}.{name}"))?
                            } else {
                                tape.constant(z)
                            });
                        }
                        let plan = plan.clone().expect("paradigm plan");
                        let logits =
                            tape.attention_logits(q, k, [tables[0], tables[1], tables[2]], &pc, plan.clone())?;
                        let attn = match pc.norm {
                            Normalization::Identity => logits,
                            Normalization::FilterNorm => {
                                tape.filter_norm(logits, 2, crate::tensor::DEFAULT_FILTER_EPS)?
                            }
                            Normalization::Softmax => tape.softmax(logits, 2)?,
                        };
                        let agg = tape.aggregate(attn, val, plan)?;
                        tape.linear(agg, v(&format!("{m}.out.w"))?, Some(v(&format!("{m}.out.b"))?))?
                    }
                    Mixer::Elsa(variant) => {
                        let ec = cfg.elsa_config(s);
                        let g = |name: &str| v(&format!("{m}.{name}"));
                        let vars = ElsaVars {
                            proj_q: g("proj_q")?,
                            proj_k: g("proj_k")?,
                            proj_v: g("proj_v")?,
                            proj_out: g("proj_out")?,
                            bias_q: Some(g("bias_q")?),
                            bias_k: Some(g("bias_k")?),
                            bias_v: Some(g("bias_v")?),
                            bias_out: Some(g("bias_out")?),
                            r_k: g("r_k")?,
                            r_q: g("r_q")?,
                            r_b: g("r_b")?,
                            ghost: if ec.ghost {
                                Some((g("ghost_mul")?, g("ghost_add")?))
                            } else {
                                None
                            },
                        };
                        elsa_forward_on(tape, n, &ec, &vars, variant)?
                    }
                };
                h = tape.add(h, mixed)?;
                let n = tape.layer_norm(h, v(&format!("{p}.norm2.g"))?, v(&format!("{p}.norm2.b"))?, LN_EPS)?;
                let u = tape.linear(n, v(&format!("{p}.mlp1.w"))?, Some(v(&format!("{p}.mlp1.b"))?))?;
                let u = tape.gelu(u);
                let u = tape.linear(u, v(&format!("{p}.mlp2.w"))?, Some(v(&format!("{p}.mlp2.b"))?))?;
                h = tape.add(h, u)?;
            }
        }
        h = tape.layer_norm(h, v("head.norm.g")?, v("head.norm.b")?, LN_EPS)?;
        h = tape.avg_pool(h)?;
        h = tape.linear(h, v("head.w")?, Some(v("head.b")?))?;
        tape.reshape(h, &[b, cfg.num_classes])
    }

    /// Logits `(B, num_classes)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}
