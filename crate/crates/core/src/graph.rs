//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed during one forward pass.
//! Parameters are pulled from a [`NamedTensorSet`] by name; requesting the
//! same name twice yields the same node, so weight sharing accumulates
//! gradients naturally. [`Graph::backward`] walks the tape in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::params::NamedTensorSet;
use crate::tensor::{gemm, Layout, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization, running statistics updated.
    Train,
    /// Running statistics in normalization.
    Eval,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: S,
    },
    Sigmoid(Var),
    LeakyRelu {
        x: Var,
        slope: S,
    },
    Exp(Var),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Permute {
        x: Var,
        axes: [usize; 4],
    },
    Resize(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Running-statistics update produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct StatUpdate<S> {
    pub name: String,
    pub value: Tensor<S>,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<S>>,
    store: Option<&'a NamedTensorSet<S>>,
    params: HashMap<String, Var>,
    mode: Mode,
    stat_updates: Vec<StatUpdate<S>>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a NamedTensorSet<S>, mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            params: HashMap::new(),
            mode,
            stat_updates: Vec::new(),
        }
    }

    /// A tape with no parameter store, for composing primitives directly.
    pub fn standalone() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            params: HashMap::new(),
            mode: Mode::Train,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn stat_updates(&self) -> &[StatUpdate<S>] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<S>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data input or constant; receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn store(&self) -> Result<&'a NamedTensorSet<S>> {
        self.store
            .ok_or_else(|| Error::contract("graph has no parameter store"))
    }

    /// Node for a named parameter; repeated requests share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = self
            .store()?
            .entry(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(entry.tensor.clone(), entry.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (S::of(scale), S::of(shift));
        let y = self.value(x).map(|v| s * v + t);
        self.push(y, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = S::of(slope);
        let y = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { s * v });
        self.push(y, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::of(lo), S::of(hi));
        let y = self.value(x).map(|v| v.max(l).min(h));
        self.push(y, Op::Clamp { x, lo: l, hi: h }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv { x, w, b, spec }, &inputs))
    }

    /// Per-channel batch normalization. `stats` names the buffer prefix
    /// holding `running_mean` / `running_var`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &str) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).numel() != c {
                return Err(Error::dim(
                    "batch_norm",
                    "channel",
                    format!("{what} has {} entries for {c} channels", self.value(v).numel()),
                ));
            }
        }
        let eps = S::of(BN_EPS);
        let mean_name = format!("{stats}.running_mean");
        let var_name = format!("{stats}.running_var");
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let (mean, var) = kernels::channel_moments(self.value(x))?;
            if let Some(store) = self.store {
                let n = (b * h * w) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = S::of(BN_MOMENTUM);
                let rm = store.get(&mean_name)?;
                let rv = store.get(&var_name)?;
                let new_mean = Tensor::from_fn(&[c], |i| (S::one() - m) * rm.data()[i] + m * mean[i]);
                let new_var = Tensor::from_fn(&[c], |i| {
                    (S::one() - m) * rv.data()[i] + m * var[i] * S::of(unbias)
                });
                self.stat_updates.push(StatUpdate {
                    name: mean_name,
                    value: new_mean,
                });
                self.stat_updates.push(StatUpdate {
                    name: var_name,
                    value: new_var,
                });
            }
            (mean, var)
        } else {
            let store = self.store()?;
            (
                store.get(&mean_name)?.data().to_vec(),
                store.get(&var_name)?.data().to_vec(),
            )
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut out = vec![S::zero(); xv.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::raw(shape.clone(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::raw(shape, xhat),
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("non-empty shape");
        let rows = xv.numel() / d;
        let eps = S::of(LN_EPS);
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / S::of(d as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::of(d as f64);
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let y = Tensor::raw(xv.shape().to_vec(), xhat);
        self.push(
            y.clone(),
            Op::LayerNorm {
                x,
                xhat: y,
                inv_std,
            },
            &[x],
        )
    }

    /// Affine map over the last axis: `x @ w^T + b`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let din = *xv.shape().last().expect("non-empty shape");
        if wv.rank() != 2 || wv.shape()[1] != din {
            return Err(Error::dim(
                "linear",
                "last",
                format!("input width {din}, weight {:?}", wv.shape()),
            ));
        }
        let dout = wv.shape()[0];
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::dim("linear", "bias", format!("{} vs {dout}", self.value(b).numel())));
            }
        }
        let rows = xv.numel() / din;
        let mut out = vec![S::zero(); rows * dout];
        gemm(rows, din, dout, S::one(), xv.data(), Layout::N, wv.data(), Layout::T, S::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::raw(shape, out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let d = self.value(x).data();
        let out: Vec<S> = (0..b * c)
            .map(|i| d[i * hw..(i + 1) * hw].iter().copied().sum::<S>() / S::of(hw as f64))
            .collect();
        Ok(self.push(Tensor::raw(vec![b, c, 1, 1], out), Op::AvgPool(x), &[x]))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let d = self.value(x).data();
        let mut argmax = Vec::with_capacity(b * c);
        let mut out = Vec::with_capacity(b * c);
        for i in 0..b * c {
            let (mut best, mut arg) = (d[i * hw], i * hw);
            for j in i * hw + 1..(i + 1) * hw {
                if d[j] > best {
                    best = d[j];
                    arg = j;
                }
            }
            argmax.push(arg);
            out.push(best);
        }
        Ok(self.push(
            Tensor::raw(vec![b, c, 1, 1], out),
            Op::MaxPool { x, argmax },
            &[x],
        ))
    }

    /// Concatenation along the channel axis of BCHW maps.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4()?;
        let mut channels = 0;
        for &v in xs {
            let (b, c, h, w) = self.value(v).dims4()?;
            if (b, h, w) != (first.0, first.2, first.3) {
                return Err(Error::dim(
                    "concat",
                    "spatial",
                    format!("{:?} vs {:?}", self.shape(xs[0]), self.shape(v)),
                ));
            }
            channels += c;
        }
        let (b, _, h, w) = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(b * channels * hw);
        for bi in 0..b {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        Ok(self.push(
            Tensor::raw(vec![b, channels, h, w], out),
            Op::Concat(xs.to_vec()),
            xs,
        ))
    }

    /// Channels `start..start+len` of a BCHW map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "slice_channels",
                "1",
                format!("range {start}..{} of {c}", start + len),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            out.extend_from_slice(&self.value(x).data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        Ok(self.push(
            Tensor::raw(vec![b, len, h, w], out),
            Op::Slice { x, start },
            &[x],
        ))
    }

    pub fn permute(&mut self, x: Var, axes: [usize; 4]) -> Result<Var> {
        let y = kernels::permute4(self.value(x), axes)?;
        Ok(self.push(y, Op::Permute { x, axes }, &[x]))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, _, sh, sw) = self.value(x).dims4()?;
        if (sh, sw) == (h, w) {
            return Ok(x);
        }
        let y = kernels::resize_forward(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Two-way softmax per position: returns `(w_a, w_b)` with
    /// `w_a + w_b = 1`, computed as `sigmoid(a - b)` so large gaps stay finite.
    pub fn softmax_pair(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "softmax_pair",
                "all",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let wa = self.sigmoid(d);
        let wb = self.one_minus(wa);
        Ok((wa, wb))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / S::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean per-pixel cross-entropy of BKHW logits against class ids laid
    /// out as `b*H*W + y*W + x`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, result: Var) -> Result<Gradients<S>> {
        if self.value(result).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar result, got shape {:?}",
                self.shape(result)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[result.0] = Some(Tensor::full(self.shape(result), S::one()));
        for i in (0..=result.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<S>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.needs(*a) {
                    acc(*a, kernels::reduce_to(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    let mut gb = kernels::reduce_to(g, self.shape(*b));
                    if negate {
                        gb = gb.map(|v| -v);
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let t = kernels::broadcast_binary("mul", g, self.value(*b), |x, y| x * y)?;
                    acc(*a, kernels::reduce_to(&t, self.shape(*a)));
                }
                if self.needs(*b) {
                    let t = kernels::broadcast_binary("mul", g, self.value(*a), |x, y| x * y)?;
                    acc(*b, kernels::reduce_to(&t, self.shape(*b)));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                acc(*x, g.map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(&node.value, |gv, y| gv * y * (S::one() - y))?);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                acc(
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| if xv > S::zero() { gv } else { s * gv })?,
                );
            }
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y)?),
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (*lo, *hi);
                acc(
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| {
                        if xv >= l && xv <= h {
                            gv
                        } else {
                            S::zero()
                        }
                    })?,
                );
            }
            Op::Conv { x, w, b, spec } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    g,
                    *spec,
                    self.needs(*x),
                )?;
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    acc(*w, cg.dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    if self.needs(*b) {
                        acc(*b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, h, w) = g.dims4()?;
                let hw = h * w;
                let n = S::of((b * hw) as f64);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dbeta[ch] += g.data()[i];
                            dgamma[ch] += g.data()[i] * xhat.data()[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![S::zero(); g.numel()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    k * (g.data()[i] - dbeta[ch] / n - xhat.data()[i] * dgamma[ch] / n)
                                } else {
                                    k * g.data()[i]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::raw(g.shape().to_vec(), dx));
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::raw(self.shape(*gamma).to_vec(), dgamma));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::raw(self.shape(*beta).to_vec(), dbeta));
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *g.shape().last().expect("non-empty");
                let dn = S::of(d as f64);
                let mut dx = vec![S::zero(); g.numel()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat.data()[r * d..(r + 1) * d];
                    let sg: S = gr.iter().copied().sum();
                    let sgx: S = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = is * (gr[j] - sg / dn - xr[j] * sgx / dn);
                    }
                }
                acc(*x, Tensor::raw(g.shape().to_vec(), dx));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / din;
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); xv.numel()];
                    gemm(rows, dout, din, S::one(), g.data(), Layout::N, wv.data(), Layout::N, S::zero(), &mut dx);
                    acc(*x, Tensor::raw(xv.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); wv.numel()];
                    gemm(dout, rows, din, S::one(), g.data(), Layout::T, xv.data(), Layout::N, S::zero(), &mut dw);
                    acc(*w, Tensor::raw(wv.shape().to_vec(), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![S::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::raw(self.shape(*b).to_vec(), db));
                    }
                }
            }
            Op::AvgPool(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = S::one() / S::of(hw as f64);
                let dx = Tensor::from_fn(&[b, c, h, w], |i| g.data()[i / hw] * inv);
                acc(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, &a) in argmax.iter().enumerate() {
                    dx.data_mut()[a] += g.data()[i];
                }
                acc(*x, dx);
            }
            Op::Concat(xs) => {
                let (b, _, h, w) = g.dims4()?;
                let hw = h * w;
                let total = g.shape()[1];
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            part.extend_from_slice(&g.data()[(bi * total + start) * hw..(bi * total + start + c) * hw]);
                        }
                        acc(v, Tensor::raw(vec![b, c, h, w], part));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = vec![S::zero(); b * c * hw];
                for bi in 0..b {
                    dx[(bi * c + start) * hw..(bi * c + start + len) * hw]
                        .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
                }
                acc(*x, Tensor::raw(vec![b, c, h, w], dx));
            }
            Op::Permute { x, axes } => {
                acc(*x, kernels::permute4(g, kernels::inverse_axes(*axes))?);
            }
            Op::Resize(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                acc(*x, kernels::resize_backward(g, h, w)?);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = S::of(self.value(*x).numel() as f64);
                acc(*x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, k, h, w) = probs.dims4()?;
                let hw = h * w;
                let scale = g.item() / S::of((b * hw) as f64);
                let mut dx: Vec<S> = probs.data().iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    let (bi, p) = (i / hw, i % hw);
                    dx[(bi * k + t) * hw + p] -= scale;
                }
                acc(*logits, Tensor::raw(probs.shape().to_vec(), dx));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Result of a reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<String, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the result did not depend on it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients for every trainable tensor of `store`; parameters that did
    /// not take part in the computation get zeros.
    pub fn named(&self, store: &NamedTensorSet<S>) -> NamedTensorSet<S> {
        let mut out = NamedTensorSet::new();
        for (name, t) in store.trainable() {
            let g = self
                .param(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g, true);
        }
        out
    }
}
