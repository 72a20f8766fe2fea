//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns the value of every intermediate it records. Nodes are
//! appended in evaluation order, so walking the tape backwards visits every
//! node after all of its consumers.

use super::ops::{self, BnStats, ConvGeometry, ConvShape, Mode};
use super::{Float, ParamId, ParamStore, RngState, Tensor};
use crate::error::{Error, Result};
use crate::graph::{self, KnnGraph, NodeFeatures};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Gelu(Var),
    Add(Var, Var),
    AddBroadcast {
        input: Var,
        addend: Var,
    },
    Scale(Var, F),
    ScalePerSample(Var, Vec<F>),
    Upsample(Var, usize),
    AvgPool(Var, usize),
    MaxRelative {
        nodes: Var,
        candidates: Var,
        /// `[B, N, C]` winning candidate per node and channel.
        argmax: Vec<u32>,
    },
    Sum(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<F>,
    },
    Dice {
        logits: Var,
        target: Vec<F>,
        smooth: F,
    },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch-norm statistics source for [`Tape::batch_norm`].
pub enum BnMode<'a, F: Float> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Running { mean: &'a Tensor<F>, var: &'a Tensor<F> },
}

/// Per-channel batch statistics produced by a train-mode batch norm.
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub biased_var: Vec<F>,
    pub count: usize,
}

pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input; it is differentiable when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: tensor.detached(),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a store entry; its gradient can later be written back with
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.get(id);
        let requires_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let shape = ConvShape::new(self.shape(input), self.shape(weight), geometry)?;
        if let Some(b) = bias {
            if self.shape(b) != [shape.oc] {
                return Err(Error::shape(format!(
                    "conv bias {:?} for {} output channels",
                    self.shape(b),
                    shape.oc
                )));
            }
        }
        let out = ops::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(shape.out_shape(), out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            },
            &parents,
        ))
    }

    /// Per-channel batch norm. Returns the batch statistics in
    /// [`BnMode::Batch`] so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, F>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let needs = self.grad_enabled && [input, gamma, beta].iter().any(|&v| self.requires_grad(v));
        let stats = match mode {
            BnMode::Batch => BnStats::Batch,
            BnMode::Running { mean, var } => BnStats::Fixed {
                mean: mean.data(),
                var: var.data(),
            },
        };
        let fwd = ops::batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
            needs,
        )?;
        let batch_stats = fwd.batch_stats.map(|(mean, biased_var)| BatchStats {
            mean,
            biased_var,
            count: fwd.count,
        });
        let value = Tensor::new(self.shape(input).to_vec(), fwd.out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats: batch_stats.is_some(),
            },
            &[input, gamma, beta],
        );
        Ok((var, batch_stats))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds `addend` (shape `input.shape[1..]`) to every batch element.
    pub fn add_broadcast(&mut self, input: Var, addend: Var) -> Result<Var> {
        if self.shape(input).get(1..) != Some(self.shape(addend)) {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} over {:?}",
                self.shape(addend),
                self.shape(input)
            )));
        }
        let add = self.value(addend).data();
        let data = self
            .value(input)
            .data()
            .chunks(add.len())
            .flat_map(|c| c.iter().zip(add).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(input).to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast { input, addend }, &[input, addend]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Stochastic depth over the leading (batch) axis. The identity cases
    /// return `x` itself without recording a node.
    pub fn droppath(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let batch = self.shape(x)[0];
        match ops::droppath_factors::<F>(batch, rate, mode, rng)? {
            None => Ok(x),
            Some(factors) => {
                let data = ops::scale_per_sample(self.value(x).data(), &factors);
                let value = Tensor::new(self.shape(x).to_vec(), data)?;
                Ok(self.push(value, Op::ScalePerSample(x, factors), &[x]))
            }
        }
    }

    pub fn upsample_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(x), scale)?;
        Ok(self.push(value, Op::Upsample(x, scale), &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let value = ops::avg_pool2d(self.value(x), window)?;
        Ok(self.push(value, Op::AvgPool(x, window), &[x]))
    }

    /// Batched max-relative aggregation on `[B, C, H, W]` feature maps.
    ///
    /// `graphs[b]` connects the `H*W` nodes of sample `b` to the positions of
    /// `candidates` (which may be `nodes` itself). Output is `[B, 2C, H, W]`:
    /// the node features followed by the max-relative term.
    pub fn max_relative(&mut self, nodes: Var, candidates: Var, graphs: &[KnnGraph]) -> Result<Var> {
        let (value, argmax) = self.max_relative_value(nodes, candidates, graphs)?;
        Ok(self.push_max_relative(value, nodes, candidates, argmax))
    }

    /// [`Tape::max_relative`] that also returns the winning candidate of
    /// every `(sample, node, channel)`, in that nesting order.
    pub fn max_relative_logged(&mut self, nodes: Var, candidates: Var, graphs: &[KnnGraph]) -> Result<(Var, Vec<u32>)> {
        let (value, argmax) = self.max_relative_value(nodes, candidates, graphs)?;
        let selection = argmax.clone();
        Ok((self.push_max_relative(value, nodes, candidates, argmax), selection))
    }

    /// Max-relative aggregation with the maximizing candidates given rather
    /// than searched: `[x_i, y_sel - x_i]`. Holding the selection fixed makes
    /// the op linear in its inputs.
    pub fn max_relative_fixed(&mut self, nodes: Var, candidates: Var, selection: &[u32]) -> Result<Var> {
        let (b, c, h, w) = self.value(nodes).dims4()?;
        let (cb, cc, ch, cw) = self.value(candidates).dims4()?;
        if cb != b || cc != c {
            return Err(Error::shape(format!(
                "candidates {:?} do not match nodes {:?}",
                self.shape(candidates),
                self.shape(nodes)
            )));
        }
        let (n, m) = (h * w, ch * cw);
        if selection.len() != b * n * c {
            return Err(Error::GraphMismatch(format!(
                "selection has {} entries, expected {}",
                selection.len(),
                b * n * c
            )));
        }
        if let Some(&j) = selection.iter().find(|&&j| j as usize >= m) {
            return Err(Error::GraphMismatch(format!("selected candidate {j} of {m}")));
        }
        let (xs, ys) = (self.value(nodes).data(), self.value(candidates).data());
        let mut out = vec![F::ZERO; b * 2 * c * n];
        for bi in 0..b {
            for k in 0..c {
                for i in 0..n {
                    let x = xs[(bi * c + k) * n + i];
                    let j = selection[(bi * n + i) * c + k] as usize;
                    out[(bi * 2 * c + k) * n + i] = x;
                    out[(bi * 2 * c + c + k) * n + i] = ys[(bi * c + k) * m + j] - x;
                }
            }
        }
        let value = Tensor::new(vec![b, 2 * c, h, w], out)?;
        Ok(self.push_max_relative(value, nodes, candidates, selection.to_vec()))
    }

    fn push_max_relative(&mut self, value: Tensor<F>, nodes: Var, candidates: Var, argmax: Vec<u32>) -> Var {
        self.push(
            value,
            Op::MaxRelative {
                nodes,
                candidates,
                argmax,
            },
            &[nodes, candidates],
        )
    }

    fn max_relative_value(&self, nodes: Var, candidates: Var, graphs: &[KnnGraph]) -> Result<(Tensor<F>, Vec<u32>)> {
        let (b, c, h, w) = self.value(nodes).dims4()?;
        let (cb, cc, ch, cw) = self.value(candidates).dims4()?;
        if cb != b || cc != c {
            return Err(Error::shape(format!(
                "candidates {:?} do not match nodes {:?}",
                self.shape(candidates),
                self.shape(nodes)
            )));
        }
        if graphs.len() != b {
            return Err(Error::GraphMismatch(format!("{} graphs for batch of {b}", graphs.len())));
        }
        let (n, m) = (h * w, ch * cw);
        let mut out = vec![F::ZERO; b * 2 * c * n];
        let mut argmax = Vec::with_capacity(b * n * c);
        for (bi, g) in graphs.iter().enumerate() {
            let xs = &self.value(nodes).data()[bi * c * n..(bi + 1) * c * n];
            let feats = NodeFeatures::from_feature_map(xs, c, h, w)?;
            let (agg, arg) = if nodes == candidates {
                graph::mr_aggregate_between(&feats, &feats, g)?
            } else {
                let ys = &self.value(candidates).data()[bi * c * m..(bi + 1) * c * m];
                let cand = NodeFeatures::from_feature_map(ys, c, ch, cw)?;
                graph::mr_aggregate_between(&feats, &cand, g)?
            };
            let dst = &mut out[bi * 2 * c * n..(bi + 1) * 2 * c * n];
            for i in 0..n {
                for k in 0..2 * c {
                    dst[k * n + i] = agg[i * 2 * c + k];
                }
            }
            argmax.extend(arg);
        }
        Ok((Tensor::new(vec![b, 2 * c, h, w], out)?, argmax))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy on logits, `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape(format!(
                "logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            )));
        }
        let total: F = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(F::ZERO) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / F::from_usize(z.numel()));
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// `1 - (2 * sum(p*y) + s) / (sum(p) + sum(y) + s)` with `p = sigmoid(z)`,
    /// summed over the whole tensor.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor<F>, smooth: F) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape(format!(
                "logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            )));
        }
        let (mut inter, mut sp, mut sy) = (F::ZERO, F::ZERO, F::ZERO);
        for (&zv, &y) in z.data().iter().zip(target.data()) {
            let p = sigmoid(zv);
            inter += p * y;
            sp += p;
            sy += y;
        }
        let two = F::from_f64(2.0);
        let value = Tensor::scalar(F::ONE - (two * inter + smooth) / (sp + sy + smooth));
        Ok(self.push(
            value,
            Op::Dice {
                logits,
                target: target.data().to_vec(),
                smooth,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a one-element `loss`.
    ///
    /// Gradients are kept for leaves only; intermediates are dropped as soon
    /// as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![F::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op<F>, g: Vec<F>, grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let mut send = |v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            } => {
                let need = [
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let cg = ops::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    &g,
                    shape,
                    need,
                );
                if let Some(gx) = cg.input {
                    send(*input, gx);
                }
                if let Some(gw) = cg.weight {
                    send(*weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let bg = ops::batch_norm_backward(
                    self.value(*input).dims4()?,
                    &g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                );
                send(*input, bg.input);
                send(*gamma, bg.gamma);
                send(*beta, bg.beta);
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| gv * ops::gelu_grad_scalar(v))
                    .collect();
                send(*x, gx);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::AddBroadcast { input, addend } => {
                let per = self.value(*addend).numel();
                let mut ga = vec![F::ZERO; per];
                for chunk in g.chunks(per) {
                    ga.iter_mut().zip(chunk).for_each(|(a, &c)| *a += c);
                }
                send(*addend, ga);
                send(*input, g);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&v| v * *f).collect()),
            Op::ScalePerSample(x, factors) => send(*x, ops::scale_per_sample(&g, factors)),
            Op::Upsample(x, scale) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                send(*x, ops::upsample_backward(&g, b * c, h, w, *scale));
            }
            Op::AvgPool(x, r) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                send(*x, ops::avg_pool_backward(&g, b * c, h, w, *r));
            }
            Op::MaxRelative {
                nodes,
                candidates,
                argmax,
            } => {
                let (b, c, h, w) = self.value(*nodes).dims4()?;
                let (n, m) = (h * w, self.value(*candidates).numel() / (b * c));
                let mut gx = vec![F::ZERO; b * c * n];
                let mut gc = vec![F::ZERO; b * c * m];
                for bi in 0..b {
                    let go = &g[bi * 2 * c * n..(bi + 1) * 2 * c * n];
                    for ch in 0..c {
                        for i in 0..n {
                            let gself = go[ch * n + i];
                            let gmax = go[(c + ch) * n + i];
                            let j = argmax[(bi * n + i) * c + ch] as usize;
                            gx[(bi * c + ch) * n + i] += gself - gmax;
                            gc[(bi * c + ch) * m + j] += gmax;
                        }
                    }
                }
                if nodes == candidates {
                    gx.iter_mut().zip(&gc).for_each(|(a, &b)| *a += b);
                    send(*nodes, gx);
                } else {
                    send(*nodes, gx);
                    send(*candidates, gc);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits).data();
                let scale = g[0] / F::from_usize(z.len());
                send(
                    *logits,
                    z.iter().zip(target).map(|(&zv, &y)| (sigmoid(zv) - y) * scale).collect(),
                );
            }
            Op::Dice { logits, target, smooth } => {
                let z = self.value(*logits).data();
                let p: Vec<F> = z.iter().map(|&v| sigmoid(v)).collect();
                let inter: F = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
                let den: F = p.iter().copied().sum::<F>() + target.iter().copied().sum::<F>() + *smooth;
                let num = F::from_f64(2.0) * inter + *smooth;
                let gz = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &y)| {
                        let dl_dp = -(F::from_f64(2.0) * y * den - num) / (den * den);
                        g[0] * dl_dp * pv * (F::ONE - pv)
                    })
                    .collect();
                send(*logits, gz);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<F: Float>(z: F) -> F {
    if z >= F::ZERO {
        F::ONE / (F::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::ONE + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F: Float> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(usize, ParamId)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every recorded parameter into the store's
    /// gradient slots. Calling it again accumulates.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
