use std::fmt;
use std::str::FromStr;

use super::{ElsaOptions, HeadSetting, Mixer, ModelConfig, StageConfig, MLP_RATIO};
use crate::elsa::{TableLayout, Variant};
use crate::error::{Error, Result};
use crate::paradigm::Border;

/// Analytic cost of a model.
///
/// `flops` counts multiply-accumulate operations of the linear maps,
/// convolutions, attention contractions, ghost-head scaling and
/// aggregation. Normalization, softmax, activations, biases and residual
/// additions are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub params: u64,
    pub flops: u64,
}

/// Named full-size architectures on the four-stage `2/2/6/2` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum Architecture {
    SwinT_LSA,
    /// ELSA mixers in the first three stages.
    SwinT_ELSA,
    /// As [`Architecture::SwinT_ELSA`] without the ghost head.
    SwinT_ELSA_HA_only,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::SwinT_LSA,
        Architecture::SwinT_ELSA,
        Architecture::SwinT_ELSA_HA_only,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::SwinT_LSA => "SwinT_LSA",
            Architecture::SwinT_ELSA => "SwinT_ELSA",
            Architecture::SwinT_ELSA_HA_only => "SwinT_ELSA_HA_only",
        }
    }

    pub fn config(self) -> ModelConfig {
        let elsa_stages = match self {
            Architecture::SwinT_LSA => 0,
            _ => 3,
        };
        let stages = [(2, 96, 3), (2, 192, 6), (6, 384, 12), (2, 768, 24)]
            .iter()
            .enumerate()
            .map(|(s, &(blocks, channels, heads))| StageConfig {
                blocks,
                channels,
                heads,
                mixer: if s < elsa_stages {
                    Mixer::Elsa(Variant::MergedConv)
                } else {
                    Mixer::Lsa
                },
                size: 7,
            })
            .collect();
        ModelConfig {
            stages,
            patch: 4,
            in_channels: 3,
            num_classes: 1000,
            head_setting: HeadSetting::OneX,
            elsa: ElsaOptions {
                layout: TableLayout::PerHead,
                ghost: self != Architecture::SwinT_ELSA_HA_only,
                ..ElsaOptions::default()
            },
            border: Border::ZeroPad,
            unified_norm: None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "architecture",
                name: s.into(),
            })
    }
}

fn mixer_counts(cfg: &ModelConfig, s: usize, pixels: u64) -> Result<(u64, u64)> {
    let st = &cfg.stages[s];
    let c = st.channels as u64;
    let projections = (4 * (c * c + c), pixels * 4 * c * c);
    Ok(match st.mixer {
        Mixer::DwConv => {
            let t = (st.size * st.size) as u64;
            (c * t, pixels * c * t)
        }
        Mixer::Lsa | Mixer::Unified(_) => {
            let pc = cfg.paradigm_config(s)?;
            let (t, g, slots) = (
                pc.application.table_len() as u64,
                pc.heads as u64,
                pc.application.slots() as u64,
            );
            let tables = (pc.use_q_rk as u64 + pc.use_rq_k as u64) * c * t + pc.use_rb as u64 * g * t;
            let terms = pc.use_qk as u64 + pc.use_q_rk as u64 + pc.use_rq_k as u64 + 1;
            (projections.0 + tables, projections.1 + pixels * slots * c * terms)
        }
        Mixer::Elsa(_) => {
            let ec = cfg.elsa_config(s);
            let (t, g) = (ec.taps() as u64, ec.heads as u64);
            let table = match ec.layout {
                TableLayout::Full => c * g * t,
                TableLayout::PerHead => c * t,
            };
            let ghost = if ec.ghost { 2 * c * t } else { 0 };
            let params = projections.0 + 2 * table + g * t + ghost;
            let per_pixel = c + 2 * table + if ec.ghost { c * t } else { 0 } + c * t;
            (params, projections.1 + pixels * per_pixel)
        }
    })
}

/// Parameter and multiply-accumulate counts at a square input `resolution`.
pub fn count_params_flops(cfg: &ModelConfig, resolution: usize) -> Result<Counts> {
    cfg.validate()?;
    let extents = cfg.stage_extents(resolution)?;
    let patch_in = (cfg.in_channels * cfg.patch * cfg.patch) as u64;
    let c0 = cfg.stages[0].channels as u64;
    let p0 = (extents[0] * extents[0]) as u64;
    let mut params = patch_in * c0 + c0 + 2 * c0;
    let mut flops = p0 * patch_in * c0;
    let mut prev = c0;
    for (s, st) in cfg.stages.iter().enumerate() {
        let c = st.channels as u64;
        let pixels = (extents[s] * extents[s]) as u64;
        if s > 0 {
            params += 2 * 4 * prev + 4 * prev * c;
            flops += pixels * 4 * prev * c;
        }
        let (mp, mf) = mixer_counts(cfg, s, pixels)?;
        let r = MLP_RATIO as u64;
        let mlp = (2 * r * c * c + r * c + c, pixels * 2 * r * c * c);
        params += st.blocks as u64 * (4 * c + mp + mlp.0);
        flops += st.blocks as u64 * (mf + mlp.1);
        prev = c;
    }
    let k = cfg.num_classes as u64;
    params += 2 * prev + prev * k + k;
    flops += prev * k;
    Ok(Counts { params, flops })
}
