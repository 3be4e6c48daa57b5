use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::elsa::kernels as ek;
use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::paradigm::{self, ParadigmConfig, RelPosTables, SlotPlan};
use crate::tensor::{self, Scalar, Tensor};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Param(String),
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Bias of length `M` added over `(B, M.., inner)`.
    AddBias {
        inner: usize,
    },
    Sum,
    Reshape,
    Unfold {
        kernel: usize,
    },
    Softmax {
        axis: usize,
    },
    FilterNorm {
        axis: usize,
        eps: f64,
    },
    ContractChannel,
    ContractUnfolded,
    ExpandPerHead {
        heads: usize,
    },
    Interleave,
    PadBias,
    Linear {
        bias: bool,
    },
    GroupedConv {
        groups: usize,
    },
    Gelu,
    LayerNorm {
        eps: f64,
    },
    Patchify {
        patch: usize,
    },
    AvgPool,
    CrossEntropy {
        labels: Arc<Vec<usize>>,
    },
    AttnLogits {
        cfg: Box<ParadigmConfig>,
        plan: Arc<SlotPlan>,
    },
    Aggregate {
        plan: Arc<SlotPlan>,
    },
    GhostHead {
        lambda: f64,
        gamma: f64,
    },
    GhostHeadGlobal {
        lambda: f64,
        gamma: f64,
    },
    /// Recorded without a backward rule.
    Opaque(String),
}

impl Op {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Unfold { .. } => "unfold",
            Op::Softmax { .. } => "softmax",
            Op::FilterNorm { .. } => "filter_norm",
            Op::ContractChannel => "contract_channel",
            Op::ContractUnfolded => "contract_unfolded",
            Op::ExpandPerHead { .. } => "expand_per_head",
            Op::Interleave => "interleave",
            Op::PadBias => "pad_bias",
            Op::Linear { .. } => "linear",
            Op::GroupedConv { .. } => "grouped_conv",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Patchify { .. } => "patchify",
            Op::AvgPool => "avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::AttnLogits { .. } => "attention_logits",
            Op::Aggregate { .. } => "aggregate",
            Op::GhostHead { .. } => "ghost_head",
            Op::GhostHeadGlobal { .. } => "ghost_head_global",
            Op::Opaque(name) => name,
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer. Parameters are the leaves gradients are reported for.
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every parameter leaf, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v)].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[self.check(v)].op.name()
    }

    fn push(&mut self, op: Op, inputs: &[Var], value: Tensor<T>) -> Var {
        let inputs: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect();
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A named leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push(Op::Param(name.to_string()), &[], value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, &[], value)
    }

    /// Record a value computed outside the tape; gradients cannot flow through it.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push(Op::Opaque(name.to_string()), inputs, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add, &[a, b], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub, &[a, b], v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul, &[a, b], v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::from_f64(s);
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(s), &[a], v)
    }

    /// Add `bias` (length `M`) to `x` shaped `(B, M.., inner)`.
    pub fn add_bias(&mut self, x: Var, bias: Var, inner: usize) -> Result<Var> {
        let v = add_bias_kernel(self.value(x), self.value(bias), inner)?;
        Ok(self.push(Op::AddBias { inner }, &[x, bias], v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, &[a], v)
    }

    /// `sum(a * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let w = self.constant(weights);
        let m = self.mul(a, w)?;
        Ok(self.sum(m))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(dims)?;
        Ok(self.push(Op::Reshape, &[a], v))
    }

    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let v = tensor::unfold(self.value(x), kernel)?;
        Ok(self.push(Op::Unfold { kernel }, &[x], v))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = tensor::softmax_over(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { axis }, &[x], v))
    }

    pub fn filter_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let v = tensor::filter_normalize_axis(self.value(x), axis, eps)?;
        Ok(self.push(Op::FilterNorm { axis, eps }, &[x], v))
    }

    pub fn contract_channel(&mut self, x: Var, table: Var) -> Result<Var> {
        let v = tensor::contract_channel(self.value(x), self.value(table))?;
        Ok(self.push(Op::ContractChannel, &[x, table], v))
    }

    pub fn contract_unfolded(&mut self, unfolded: Var, table: Var) -> Result<Var> {
        let v = ek::contract_unfolded(self.value(unfolded), self.value(table))?;
        Ok(self.push(Op::ContractUnfolded, &[unfolded, table], v))
    }

    pub fn expand_per_head(&mut self, table: Var, heads: usize) -> Result<Var> {
        let v = ek::expand_per_head(self.value(table), heads)?;
        Ok(self.push(Op::ExpandPerHead { heads }, &[table], v))
    }

    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ek::interleave_tables(self.value(a), self.value(b))?;
        Ok(self.push(Op::Interleave, &[a, b], v))
    }

    pub fn pad_bias(&mut self, bias: Var) -> Var {
        let v = ek::pad_bias(self.value(bias));
        self.push(Op::PadBias, &[bias], v)
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let v = nn::linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let op = Op::Linear { bias: bias.is_some() };
        Ok(match bias {
            Some(b) => self.push(op, &[x, weight, b], v),
            None => self.push(op, &[x, weight], v),
        })
    }

    pub fn grouped_conv(&mut self, x: Var, weight: Var, groups: usize) -> Result<Var> {
        let v = nn::grouped_conv2d(self.value(x), self.value(weight), groups)?;
        Ok(self.push(Op::GroupedConv { groups }, &[x, weight], v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = nn::gelu(self.value(x));
        self.push(Op::Gelu, &[x], v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = nn::layer_norm_channels(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { eps }, &[x, gamma, beta], v))
    }

    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let v = nn::patchify(self.value(x), patch)?;
        Ok(self.push(Op::Patchify { patch }, &[x], v))
    }

    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = nn::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::AvgPool, &[x], v))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = Tensor::scalar(nn::cross_entropy(self.value(logits), labels)?);
        Ok(self.push(
            Op::CrossEntropy {
                labels: Arc::new(labels.to_vec()),
            },
            &[logits],
            v,
        ))
    }

    /// Unified-paradigm logits; `tables` holds `(r_k, r_q, r_b)`.
    pub fn attention_logits(
        &mut self,
        q: Var,
        k: Var,
        tables: [Var; 3],
        cfg: &ParadigmConfig,
        plan: Arc<SlotPlan>,
    ) -> Result<Var> {
        let rel = RelPosTables {
            r_k: self.value(tables[0]).clone(),
            r_q: self.value(tables[1]).clone(),
            r_b: self.value(tables[2]).clone(),
        };
        let v = paradigm::attention_logits(self.value(q), self.value(k), &rel, cfg, &plan)?;
        Ok(self.push(
            Op::AttnLogits {
                cfg: Box::new(cfg.clone()),
                plan,
            },
            &[q, k, tables[0], tables[1], tables[2]],
            v,
        ))
    }

    pub fn aggregate(&mut self, attn: Var, v: Var, plan: Arc<SlotPlan>) -> Result<Var> {
        let out = paradigm::aggregate(self.value(attn), self.value(v), &plan)?;
        Ok(self.push(Op::Aggregate { plan }, &[attn, v], out))
    }

    pub fn ghost_head(&mut self, h: Var, mul: Var, add: Var, lambda: f64, gamma: f64) -> Result<Var> {
        let v = ek::ghost_head(self.value(h), self.value(mul), self.value(add), lambda, gamma)?;
        Ok(self.push(Op::GhostHead { lambda, gamma }, &[h, mul, add], v))
    }

    pub fn ghost_head_global(&mut self, attn: Var, mul: Var, add: Var, lambda: f64, gamma: f64) -> Result<Var> {
        let v = ek::ghost_head_global(self.value(attn), self.value(mul), self.value(add), lambda, gamma)?;
        Ok(self.push(Op::GhostHeadGlobal { lambda, gamma }, &[attn, mul, add], v))
    }

    /// Reverse sweep from `output` seeded with `seed`.
    ///
    /// Returns the gradient of every parameter leaf on the tape, zero for
    /// leaves the output does not depend on. Does not modify the tape.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Grads<T>> {
        let out = self.check(output);
        if seed.dims() != self.nodes[out].value.dims() {
            return shape_err(format!(
                "seed {:?} does not match output {:?}",
                seed.dims(),
                self.nodes[out].value.dims()
            ));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Tape(format!("cycle detected at node {i}")));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out + 1];
        grads[out] = Some(seed.clone());
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let input_grads = self.vjp(node, &g)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[*slot].requires_grad {
                    continue;
                }
                grads[*slot] = Some(match grads[*slot].take() {
                    None => ig,
                    Some(acc) => acc.zip_map(&ig, |a, b| a + b)?,
                });
            }
            grads[i] = None;
        }
        let mut by_name = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                match by_name.get_mut(name) {
                    None => {
                        by_name.insert(name.clone(), g);
                    }
                    Some(acc) => {
                        let sum: Tensor<T> = Tensor::zip_map(acc, &g, |a, b| a + b)?;
                        *acc = sum;
                    }
                }
            }
        }
        Ok(Grads { by_name })
    }

    fn input(&self, node: &Node<T>, k: usize) -> &Tensor<T> {
        &self.nodes[node.inputs[k]].value
    }

    fn wants(&self, node: &Node<T>, k: usize) -> bool {
        self.nodes[node.inputs[k]].requires_grad
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x0 = || self.input(node, 0);
        Ok(match &node.op {
            Op::Param(_) | Op::Constant => vec![],
            Op::Opaque(name) => {
                return Err(Error::Tape(format!("missing vjp for op `{name}`")));
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                Some(g.zip_map(self.input(node, 1), |a, b| a * b)?),
                Some(g.zip_map(x0(), |a, b| a * b)?),
            ],
            Op::Scale(s) => {
                let k = T::from_f64(*s);
                vec![Some(g.map(|v| v * k))]
            }
            Op::AddBias { inner } => {
                let m = self.input(node, 1).len();
                let mut db = vec![T::zero(); m];
                for (chunk_i, chunk) in g.data().chunks_exact(*inner).enumerate() {
                    db[chunk_i % m] += chunk.iter().copied().sum::<T>();
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_parts(self.input(node, 1).dims().to_vec(), db)),
                ]
            }
            Op::Sum => {
                let s = g.data()[0];
                vec![Some(Tensor::full(x0().dims(), s))]
            }
            Op::Reshape => vec![Some(g.clone().reshape(x0().dims())?)],
            Op::Unfold { kernel } => {
                vec![Some(tensor::unfold_backward(g, x0().dims4()?, *kernel)?)]
            }
            Op::Softmax { axis } => vec![Some(tensor::softmax_over_backward(&node.value, g, *axis)?)],
            Op::FilterNorm { axis, eps } => {
                vec![Some(tensor::filter_normalize_axis_backward(x0(), g, *axis, *eps)?)]
            }
            Op::ContractChannel => {
                let (dx, dt) = tensor::contract_channel_backward(x0(), self.input(node, 1), g)?;
                vec![Some(dx), Some(dt)]
            }
            Op::ContractUnfolded => {
                let (du, dt) = ek::contract_unfolded_backward(x0(), self.input(node, 1), g)?;
                vec![Some(du), Some(dt)]
            }
            Op::ExpandPerHead { heads } => {
                vec![Some(ek::expand_per_head_backward(x0().dims(), *heads, g)?)]
            }
            Op::Interleave => {
                let (a, b) = ek::interleave_tables_backward(x0().dims(), g)?;
                vec![Some(a), Some(b)]
            }
            Op::PadBias => vec![Some(ek::pad_bias_backward(x0().dims(), g))],
            Op::Linear { bias } => {
                let (dx, dw, db) = nn::linear_backward(x0(), self.input(node, 1), g)?;
                let mut out = vec![Some(dx), Some(dw)];
                if *bias {
                    out.push(Some(db));
                }
                out
            }
            Op::GroupedConv { groups } => {
                let need_w = self.wants(node, 1);
                let (dx, dw) = nn::grouped_conv2d_backward(x0(), self.input(node, 1), *groups, g, need_w)?;
                vec![Some(dx), dw]
            }
            Op::Gelu => vec![Some(nn::gelu_backward(x0(), g)?)],
            Op::LayerNorm { eps } => {
                let (dx, dg, db) = nn::layer_norm_channels_backward(x0(), self.input(node, 1), g, *eps)?;
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::Patchify { patch } => {
                vec![Some(nn::unpatchify(g, *patch, x0().dims()[1])?)]
            }
            Op::AvgPool => vec![Some(nn::global_avg_pool_backward(x0().dims4()?, g))],
            Op::CrossEntropy { labels } => {
                vec![Some(nn::cross_entropy_backward(x0(), labels, g.data()[0]))]
            }
            Op::AttnLogits { cfg, plan } => {
                let rel = RelPosTables {
                    r_k: self.input(node, 2).clone(),
                    r_q: self.input(node, 3).clone(),
                    r_b: self.input(node, 4).clone(),
                };
                let lg = paradigm::attention_logits_backward(x0(), self.input(node, 1), &rel, cfg, plan, g)?;
                vec![
                    Some(lg.dq),
                    Some(lg.dk),
                    Some(lg.tables.r_k),
                    Some(lg.tables.r_q),
                    Some(lg.tables.r_b),
                ]
            }
            Op::Aggregate { plan } => {
                let (da, dv) = paradigm::aggregate_backward(x0(), self.input(node, 1), plan, g)?;
                vec![Some(da), Some(dv)]
            }
            Op::GhostHead { lambda, gamma } => {
                let (dh, dm, da) = ek::ghost_head_backward(x0(), self.input(node, 1), *lambda, *gamma, g)?;
                vec![Some(dh), Some(dm), Some(da)]
            }
            Op::GhostHeadGlobal { lambda, gamma } => {
                let (dh, dm, da) = ek::ghost_head_global_backward(x0(), self.input(node, 1), *lambda, *gamma, g)?;
                vec![Some(dh), Some(dm), Some(da)]
            }
        })
    }

    #[cfg(test)]
    pub(crate) fn corrupt_for_test(&mut self, node: usize, input: usize) {
        self.nodes[node].inputs.push(input);
    }
}

fn add_bias_kernel<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, inner: usize) -> Result<Tensor<T>> {
    let m = bias.len();
    if inner == 0 || !x.len().is_multiple_of(m * inner) {
        return shape_err(format!(
            "bias of length {m} does not fit {:?} with inner {inner}",
            x.dims()
        ));
    }
    let mut out = x.clone();
    for (chunk_i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
        let b = bias.data()[chunk_i % m];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}
