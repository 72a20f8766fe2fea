//! Composite blocks: stem, Grapher, FFN and the down/up resamplers.
//!
//! Blocks own no tensors themselves. Each holds [`ParamId`]s into the model's
//! [`ParamStore`] and records its forward pass on a [`Tape`] through a
//! [`ForwardCtx`].

use crate::error::{Error, Result};
use crate::graph::{knn_graph, knn_graph_between, KnnGraph, NodeFeatures};
use crate::tensor::{
    BatchNormState, BnMode, ConvGeometry, ConvParams, Float, Mode, ParamId, ParamStore, RngState, RunningStats,
    Tape, Tensor, Var,
};

/// Everything a block needs to run forward.
pub struct ForwardCtx<'a, F: Float> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a mut ParamStore<F>,
    pub mode: Mode,
    pub rng: &'a mut RngState,
    /// Optional record (or replay) of the neighbour choices of each Grapher.
    pub graphs: Option<&'a mut GraphLog>,
}

/// Discrete choices made by the Graphers of one forward pass, in call
/// order: the KNN graph of every sample and the maximizing neighbour of
/// every node and channel.
///
/// A recording log stores both; a replaying log hands them back instead of
/// searching again. Replay makes the forward pass a smooth function of the
/// features and parameters (e.g. for finite-difference checks).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphLog {
    calls: Vec<LoggedCall>,
    replay: bool,
    cursor: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LoggedCall {
    graphs: Vec<KnnGraph>,
    selection: Vec<u32>,
}

impl GraphLog {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Switches to replay from the first recorded call.
    pub fn into_replay(mut self) -> Self {
        self.replay = true;
        self.cursor = 0;
        self
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    /// Graphs of Grapher call `i`, one per batch sample.
    pub fn graphs(&self, i: usize) -> Option<&[KnnGraph]> {
        self.calls.get(i).map(|c| c.graphs.as_slice())
    }

    /// Max-relative aggregation of one Grapher call, recorded or replayed.
    fn aggregate<F: Float>(
        &mut self,
        tape: &mut Tape<F>,
        nodes: Var,
        candidates: Var,
        build: impl FnOnce(&Tape<F>) -> Result<Vec<KnnGraph>>,
    ) -> Result<Var> {
        if self.replay {
            let call = self
                .calls
                .get(self.cursor)
                .ok_or_else(|| Error::GraphMismatch(format!("no recorded graphs for grapher call {}", self.cursor)))?;
            self.cursor += 1;
            tape.max_relative_fixed(nodes, candidates, &call.selection)
        } else {
            let graphs = build(tape)?;
            let (agg, selection) = tape.max_relative_logged(nodes, candidates, &graphs)?;
            self.calls.push(LoggedCall { graphs, selection });
            Ok(agg)
        }
    }
}

/// Convolution whose weight and bias live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl ConvLayer {
    /// Kaiming-uniform (fan-in) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = in_ch / geometry.groups * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(vec![out_ch, in_ch / geometry.groups, kernel, kernel], |_| {
            F::from_f64(rng.uniform_range(-bound, bound))
        });
        Self {
            weight: store.learnable(format!("{name}.weight"), weight),
            bias: store.learnable(format!("{name}.bias"), Tensor::zeros(vec![out_ch])),
            geometry,
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.tape.param(ctx.store, self.weight);
        let b = ctx.tape.param(ctx.store, self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.geometry)
    }

    pub fn out_channels<F: Float>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[0]
    }

    /// Value-level copy of the layer's parameters.
    pub fn params<F: Float>(&self, store: &ParamStore<F>) -> ConvParams<F> {
        ConvParams {
            weight: store.get(self.weight).detached(),
            bias: store.get(self.bias).detached(),
            geometry: self.geometry,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.learnable(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.learnable(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
            eps: BatchNormState::<F>::DEFAULT_EPS,
            momentum: BatchNormState::<F>::DEFAULT_MOMENTUM,
        }
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// buffers in the store; eval mode uses the running buffers.
    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Result<Var> {
        let gamma = ctx.tape.param(ctx.store, self.gamma);
        let beta = ctx.tape.param(ctx.store, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BnMode::Batch, self.eps)?;
                let stats = stats.expect("batch mode yields statistics");
                let mut mean = ctx.store.get(self.running_mean).detached();
                let mut var = ctx.store.get(self.running_var).detached();
                crate::tensor::ops::update_running(
                    mean.data_mut(),
                    var.data_mut(),
                    &stats.mean,
                    &stats.biased_var,
                    stats.count,
                    self.momentum,
                );
                ctx.store.set_values(self.running_mean, mean)?;
                ctx.store.set_values(self.running_var, var)?;
                Ok(y)
            }
            Mode::Eval => {
                let mode = BnMode::Running {
                    mean: ctx.store.get(self.running_mean),
                    var: ctx.store.get(self.running_var),
                };
                Ok(ctx.tape.batch_norm(x, gamma, beta, mode, self.eps)?.0)
            }
        }
    }

    pub fn state<F: Float>(&self, store: &ParamStore<F>, mode: Mode) -> BatchNormState<F> {
        BatchNormState {
            gamma: store.get(self.gamma).detached(),
            beta: store.get(self.beta).detached(),
            running: Some(RunningStats {
                mean: store.get(self.running_mean).detached(),
                var: store.get(self.running_var).detached(),
            }),
            eps: self.eps,
            momentum: self.momentum,
            mode,
        }
    }
}

/// A convolution followed by batch norm: the `input * W + b` unit of every
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut RngState,
    ) -> Self {
        Self {
            conv: ConvLayer::new(store, name, in_ch, out_ch, kernel, geometry, rng),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn pointwise<F: Float>(store: &mut ParamStore<F>, name: &str, in_ch: usize, out_ch: usize, rng: &mut RngState) -> Self {
        Self::new(store, name, in_ch, out_ch, 1, ConvGeometry::new(1, 0), rng)
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

fn check_channels<F: Float>(tape: &Tape<F>, x: Var, expected: usize, block: &str) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != expected {
        return Err(Error::shape(format!("{block} expects {expected} channels, got {c}")));
    }
    Ok((b, c, h, w))
}

/// Graph block: projection, KNN graph, max-relative aggregation, multi-head
/// update, output projection, GELU, droppath and the identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct Grapher {
    pub dim: usize,
    pub k: usize,
    pub heads: usize,
    /// Candidate-reduction ratio: neighbours are searched on the feature map
    /// average-pooled by this factor.
    pub reduction: usize,
    pub droppath_rate: f64,
    pub fc_in: ConvBn,
    /// Grouped `1x1` convolution with one group per head (2D to 2D).
    pub update: ConvBn,
    pub fc_out: ConvBn,
}

impl Grapher {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        k: usize,
        heads: usize,
        reduction: usize,
        droppath_rate: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || (2 * dim) % heads != 0 {
            return Err(Error::Config(format!("{} aggregated channels not divisible by {heads} heads", 2 * dim)));
        }
        if k == 0 || reduction == 0 {
            return Err(Error::Config("grapher needs k >= 1 and reduction >= 1".into()));
        }
        if !(0.0..=1.0).contains(&droppath_rate) {
            return Err(Error::Config(format!("droppath rate {droppath_rate} outside [0, 1]")));
        }
        Ok(Self {
            dim,
            k,
            heads,
            reduction,
            droppath_rate,
            fc_in: ConvBn::pointwise(store, &format!("{name}.fc_in"), dim, dim, rng),
            update: ConvBn::new(
                store,
                &format!("{name}.update"),
                2 * dim,
                2 * dim,
                1,
                ConvGeometry::new(1, 0).grouped(heads),
                rng,
            ),
            fc_out: ConvBn::pointwise(store, &format!("{name}.fc_out"), 2 * dim, dim, rng),
        })
    }

    /// One KNN graph per batch sample over the current values of `nodes`,
    /// with neighbours taken from `candidates`.
    pub fn build_graphs<F: Float>(&self, tape: &Tape<F>, nodes: Var, candidates: Var) -> Result<Vec<KnnGraph>> {
        let (b, c, h, w) = tape.value(nodes).dims4()?;
        let (_, _, ch, cw) = tape.value(candidates).dims4()?;
        let (xs, ys) = (tape.value(nodes).data(), tape.value(candidates).data());
        (0..b)
            .map(|bi| {
                let f = NodeFeatures::from_feature_map(&xs[bi * c * h * w..(bi + 1) * c * h * w], c, h, w)?;
                if nodes == candidates {
                    knn_graph(&f, self.k)
                } else {
                    let m = ch * cw;
                    let cand = NodeFeatures::from_feature_map(&ys[bi * c * m..(bi + 1) * c * m], c, ch, cw)?;
                    knn_graph_between(&f, &cand, self.k)
                }
            })
            .collect()
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Result<Var> {
        let (_, _, h, w) = check_channels(ctx.tape, x, self.dim, "grapher")?;
        if h % self.reduction != 0 || w % self.reduction != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} feature map not divisible by reduction {}",
                self.reduction
            )));
        }
        let x1 = self.fc_in.forward(ctx, x)?;
        let candidates = if self.reduction > 1 {
            ctx.tape.avg_pool(x1, self.reduction)?
        } else {
            x1
        };
        let agg = match ctx.graphs.as_deref_mut() {
            Some(log) => log.aggregate(ctx.tape, x1, candidates, |tape| self.build_graphs(tape, x1, candidates))?,
            None => {
                let graphs = self.build_graphs(ctx.tape, x1, candidates)?;
                ctx.tape.max_relative(x1, candidates, &graphs)?
            }
        };
        let updated = self.update.forward(ctx, agg)?;
        let out = self.fc_out.forward(ctx, updated)?;
        let out = ctx.tape.gelu(out);
        let branch = ctx.tape.droppath(out, self.droppath_rate, ctx.mode, ctx.rng)?;
        ctx.tape.add(branch, x)
    }
}

/// Two pointwise layers with a GELU between them and an identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub dim: usize,
    pub hidden: usize,
    pub droppath_rate: f64,
    pub fc1: ConvBn,
    pub fc2: ConvBn,
}

impl Ffn {
    /// Number of weight applications (convolutional layers) in the block.
    pub const LAYERS: usize = 2;

    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        ratio: usize,
        droppath_rate: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("ffn hidden ratio must be positive".into()));
        }
        let hidden = dim * ratio;
        Ok(Self {
            dim,
            hidden,
            droppath_rate,
            fc1: ConvBn::pointwise(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: ConvBn::pointwise(store, &format!("{name}.fc2"), hidden, dim, rng),
        })
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, y: Var) -> Result<Var> {
        check_channels(ctx.tape, y, self.dim, "ffn")?;
        let h = self.fc1.forward(ctx, y)?;
        let h = ctx.tape.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        let branch = ctx.tape.droppath(h, self.droppath_rate, ctx.mode, ctx.rng)?;
        ctx.tape.add(branch, y)
    }
}

/// Visual embedding: 3x3 stride-1 and 3x3 stride-2 convolutions, each with
/// batch norm and GELU, plus a learned position embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub in_channels: usize,
    pub dim: usize,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// `[dim, H/2, W/2]`, initialized to zero.
    pub pos_embed: ParamId,
}

impl Stem {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        dim: usize,
        input_hw: (usize, usize),
        rng: &mut RngState,
    ) -> Self {
        Self {
            in_channels,
            dim,
            conv1: ConvBn::new(store, &format!("{name}.conv1"), in_channels, dim, 3, ConvGeometry::new(1, 1), rng),
            conv2: ConvBn::new(store, &format!("{name}.conv2"), dim, dim, 3, ConvGeometry::new(2, 1), rng),
            pos_embed: store.learnable(
                format!("{name}.pos_embed"),
                Tensor::zeros(vec![dim, input_hw.0 / 2, input_hw.1 / 2]),
            ),
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, img: Var) -> Result<Var> {
        let (_, _, h, w) = check_channels(ctx.tape, img, self.in_channels, "stem")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg(format!("stem input {h}x{w} has an odd side")));
        }
        let x = self.conv1.forward(ctx, img)?;
        let x = ctx.tape.gelu(x);
        let x = self.conv2.forward(ctx, x)?;
        let x = ctx.tape.gelu(x);
        let pos = ctx.tape.param(ctx.store, self.pos_embed);
        ctx.tape.add_broadcast(x, pos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Down: stride-2 3x3 conv + BN, channels doubled. Up: bilinear x2 then a
/// 3x3 conv + BN, channels halved.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample {
    pub direction: Direction,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ConvBn,
}

impl Resample {
    pub fn down<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut RngState) -> Self {
        Self {
            direction: Direction::Down,
            in_channels: channels,
            out_channels: 2 * channels,
            conv: ConvBn::new(store, name, channels, 2 * channels, 3, ConvGeometry::new(2, 1), rng),
        }
    }

    pub fn up<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut RngState) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("cannot halve {channels} channels")));
        }
        Ok(Self {
            direction: Direction::Up,
            in_channels: channels,
            out_channels: channels / 2,
            conv: ConvBn::new(store, name, channels, channels / 2, 3, ConvGeometry::new(1, 1), rng),
        })
    }

    pub fn forward<F: Float>(&self, ctx: &mut ForwardCtx<'_, F>, x: Var) -> Result<Var> {
        let (_, _, h, w) = check_channels(ctx.tape, x, self.in_channels, "resample")?;
        match self.direction {
            Direction::Down => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::arg(format!("cannot downsample a {h}x{w} map with an odd side")));
                }
                self.conv.forward(ctx, x)
            }
            Direction::Up => {
                let up = ctx.tape.upsample_bilinear(x, 2)?;
                self.conv.forward(ctx, up)
            }
        }
    }
}
