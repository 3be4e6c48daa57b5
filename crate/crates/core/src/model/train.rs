use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{Model, SyntheticDataset};
use crate::config::KvDoc;
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::nn::argmax_rows;
use crate::rng::SeedSplitter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero.
    Cosine {
        warmup: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            schedule: LrSchedule::Cosine { warmup: 100 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { warmup } => {
                if step < warmup {
                    self.lr * (step + 1) as f64 / warmup as f64
                } else {
                    let span = (self.steps - warmup).max(1) as f64;
                    let t = (step - warmup) as f64 / span;
                    self.lr * 0.5 * (1.0 + (PI * t).cos())
                }
            }
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        doc.set(&k("steps"), self.steps);
        doc.set(&k("batch"), self.batch);
        doc.set(&k("lr"), self.lr);
        match self.optimizer {
            Optimizer::Sgd { momentum } => {
                doc.set(&k("optimizer"), "sgd");
                doc.set(&k("momentum"), momentum);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                doc.set(&k("optimizer"), "adam");
                doc.set(&k("beta1"), beta1);
                doc.set(&k("beta2"), beta2);
                doc.set(&k("eps"), eps);
            }
        }
        match self.schedule {
            LrSchedule::Constant => doc.set(&k("schedule"), "constant"),
            LrSchedule::Cosine { warmup } => {
                doc.set(&k("schedule"), "cosine");
                doc.set(&k("warmup"), warmup);
            }
        }
    }

    /// `seed` is taken from the caller; missing keys keep defaults.
    pub fn read_kv(doc: &KvDoc, prefix: &str, seed: u64) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let d = TrainConfig::default();
        let optimizer = match doc.get_str(&k("optimizer")).unwrap_or("adam") {
            "adam" => Optimizer::Adam {
                beta1: doc.get_or(&k("beta1"), 0.9)?,
                beta2: doc.get_or(&k("beta2"), 0.999)?,
                eps: doc.get_or(&k("eps"), 1e-8)?,
            },
            "sgd" => Optimizer::Sgd {
                momentum: doc.get_or(&k("momentum"), 0.9)?,
            },
            other => return Err(doc.bad_value(&k("optimizer"), other)),
        };
        let schedule = match doc.get_str(&k("schedule")).unwrap_or("cosine") {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine {
                warmup: doc.get_or(&k("warmup"), 100)?,
            },
            other => return Err(doc.bad_value(&k("schedule"), other)),
        };
        let cfg = TrainConfig {
            steps: doc.get_or(&k("steps"), d.steps)?,
            batch: doc.get_or(&k("batch"), d.batch)?,
            lr: doc.get_or(&k("lr"), d.lr)?,
            optimizer,
            schedule,
            seed,
        };
        if cfg.steps == 0 || cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr < 0.0 {
            return Err(Error::Config("training needs steps >= 1, batch >= 1, lr >= 0".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    /// Step and loss value of the first non-finite loss; training stopped there.
    pub diverged: Option<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.4}", r.step, r.loss, r.acc);
        }
        if let Some((step, v)) = self.diverged {
            let _ = writeln!(s, "{step},{v},nan");
        }
        s
    }
}

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

fn apply_update<T: Scalar>(
    model: &mut Model<T>,
    grads: &crate::grad::Grads<T>,
    state: &mut OptState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    for (pi, (name, p)) in model.params.iter_mut().enumerate() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Tape(format!("no gradient for `{name}`")))?;
        let (m, v) = (&mut state.m[pi], &mut state.v[pi]);
        for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi.as_f64();
            let step = match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    m[i] = momentum * m[i] + gi;
                    m[i]
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mh = m[i] / (1.0 - beta1.powi(state.t as i32));
                    let vh = v[i] / (1.0 - beta2.powi(state.t as i32));
                    mh / (vh.sqrt() + eps)
                }
            };
            *w = T::from_f64(w.as_f64() - lr * step);
        }
    }
    Ok(())
}

/// Train in place; rows record the loss and batch accuracy before each update.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("training needs steps >= 1 and batch >= 1".into()));
    }
    let seeds = SeedSplitter::new(cfg.seed).child("train");
    let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.len()).collect();
    let mut state = OptState {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut seeds.stream(&format!("epoch/{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, labels) = data.batch::<T>(&idx);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.forward_on(&mut tape, xv)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            log.diverged = Some((step, loss_value));
            break;
        }
        let pred = argmax_rows(tape.value(logits));
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        log.rows.push(TrainRow {
            step,
            loss: loss_value,
            acc,
        });
        let grads = tape.backward(loss, &Tensor::scalar(T::one()))?;
        apply_update(model, &grads, &mut state, cfg, cfg.lr_at(step))?;
    }
    Ok(log)
}

/// Accuracy over the whole dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &SyntheticDataset, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk);
        let logits = model.forward(&x)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
