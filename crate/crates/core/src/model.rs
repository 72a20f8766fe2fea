//! Model configuration and the assembled U-shaped network.

use std::fmt::Write as _;

use crate::blocks::{ConvLayer, Ffn, ForwardCtx, GraphLog, Grapher, Resample, Stem};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Float, Mode, ParamStore, RngState, Tape, Tensor, Var};

/// Number of encoder (and decoder) stages.
pub const STAGES: usize = 4;
/// Input sides must be divisible by this (stem plus four downsamplings).
pub const SIZE_MULTIPLE: usize = 32;

/// Settings of one resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// Channel count `D`.
    pub dim: usize,
    /// Convolutional layers per FFN. Only 2 is supported.
    pub ffn_layers: usize,
    /// Neighbours per node, including the node itself.
    pub k: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `dim`.
    pub ffn_ratio: usize,
    /// Candidate-reduction ratio for the KNN search.
    pub reduction: usize,
    pub droppath_rate: f64,
}

impl StageConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ffn_layers: 2,
            k: 9,
            heads: 4,
            ffn_ratio: 4,
            reduction: 1,
            droppath_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Four encoder/decoder levels followed by the bottleneck level.
    pub stages: Vec<StageConfig>,
    pub bottleneck_graphers: usize,
    /// Join the skip before the decoder stage instead of after its FFN.
    pub skip_before_decoder: bool,
    /// When positive, overrides per-stage droppath with a linear ramp from 0
    /// to this rate across all graph and FFN blocks in forward order.
    pub droppath_ramp: f64,
}

impl ModelConfig {
    fn with_dims(dims: [usize; 5], size: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes: 1,
            input_height: size,
            input_width: size,
            stages: dims.iter().map(|&d| StageConfig::new(d)).collect(),
            bottleneck_graphers: 2,
            skip_before_decoder: false,
            droppath_ramp: 0.0,
        }
    }

    /// Full-width network: dims 32..512, K=9, 4 heads, FFN ratio 4.
    pub fn full(size: usize) -> Self {
        Self::with_dims([32, 64, 128, 256, 512], size)
    }

    /// Desk-scale network: dims 8..128 on 64x64 inputs.
    pub fn tiny() -> Self {
        Self::with_dims([8, 16, 32, 64, 128], 64)
    }

    /// Sets the KNN candidate reduction of each level (five values).
    pub fn with_reductions(mut self, r: [usize; 5]) -> Self {
        for (s, r) in self.stages.iter_mut().zip(r) {
            s.reduction = r;
        }
        self
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    /// Spatial size `(h, w)` of level `i` (0 = H/2, 4 = H/32).
    pub fn level_size(&self, i: usize) -> (usize, usize) {
        (self.input_height >> (i + 1), self.input_width >> (i + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes != 1 {
            return bad(format!("only binary segmentation is supported, got num_classes={}", self.num_classes));
        }
        let (h, w) = (self.input_height, self.input_width);
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return bad(format!("input size {h}x{w} must be a positive multiple of {SIZE_MULTIPLE}"));
        }
        if self.stages.len() != STAGES + 1 {
            return bad(format!("expected {} stage configs, got {}", STAGES + 1, self.stages.len()));
        }
        if self.bottleneck_graphers == 0 {
            return bad("bottleneck needs at least one grapher".into());
        }
        if !(0.0..=1.0).contains(&self.droppath_ramp) {
            return bad(format!("droppath_ramp {} outside [0, 1]", self.droppath_ramp));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 {
                return bad(format!("stage {i} has zero channels"));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return bad(format!(
                    "stage dims must double: stage {i} has {} after {}",
                    s.dim,
                    self.stages[i - 1].dim
                ));
            }
            if s.ffn_layers != 2 {
                return bad(format!("stage {i}: FFNs have exactly 2 layers, got {}", s.ffn_layers));
            }
            if s.k == 0 {
                return bad(format!("stage {i}: k must be at least 1"));
            }
            if s.heads == 0 || (2 * s.dim) % s.heads != 0 {
                return bad(format!("stage {i}: {} channels not divisible by {} heads", 2 * s.dim, s.heads));
            }
            if s.ffn_ratio == 0 {
                return bad(format!("stage {i}: ffn_ratio must be positive"));
            }
            let (lh, lw) = self.level_size(i);
            if s.reduction == 0 || lh % s.reduction != 0 || lw % s.reduction != 0 {
                return bad(format!("stage {i}: reduction {} does not divide {lh}x{lw}", s.reduction));
            }
            if !(0.0..=1.0).contains(&s.droppath_rate) {
                return bad(format!("stage {i}: droppath {} outside [0, 1]", s.droppath_rate));
            }
        }
        Ok(())
    }

    /// Serializes as `key=value` lines; [`ModelConfig::from_text`] reads it back.
    pub fn to_text(&self) -> String {
        let list = |f: &dyn Fn(&StageConfig) -> String| self.stages.iter().map(f).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "input_height={}", self.input_height);
        let _ = writeln!(s, "input_width={}", self.input_width);
        let _ = writeln!(s, "dims={}", list(&|c| c.dim.to_string()));
        let _ = writeln!(s, "ffn_layers={}", list(&|c| c.ffn_layers.to_string()));
        let _ = writeln!(s, "k={}", list(&|c| c.k.to_string()));
        let _ = writeln!(s, "heads={}", list(&|c| c.heads.to_string()));
        let _ = writeln!(s, "ffn_ratio={}", list(&|c| c.ffn_ratio.to_string()));
        let _ = writeln!(s, "reduction={}", list(&|c| c.reduction.to_string()));
        let _ = writeln!(s, "droppath={}", list(&|c| c.droppath_rate.to_string()));
        let _ = writeln!(s, "bottleneck_graphers={}", self.bottleneck_graphers);
        let _ = writeln!(s, "skip_before_decoder={}", self.skip_before_decoder);
        let _ = writeln!(s, "droppath_ramp={}", self.droppath_ramp);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("line {}: unknown key `{}`", n + 1, k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` setting. Per-level keys accept one value for
    /// all five levels or a comma list of five. Returns `Ok(false)` for keys
    /// that are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn per_level<T: std::str::FromStr + Clone>(key: &str, v: &str) -> Result<Vec<T>> {
            let vals = v.split(',').map(|p| one(key, p.trim())).collect::<Result<Vec<T>>>()?;
            match vals.len() {
                1 => Ok(vec![vals[0].clone(); STAGES + 1]),
                n if n == STAGES + 1 => Ok(vals),
                n => Err(Error::Config(format!("`{key}` needs 1 or {} values, got {n}", STAGES + 1))),
            }
        }
        let stages = &mut self.stages;
        macro_rules! levels {
            ($field:ident) => {
                for (s, v) in stages.iter_mut().zip(per_level(key, value)?) {
                    s.$field = v;
                }
            };
        }
        match key {
            "in_channels" => self.in_channels = one(key, value)?,
            "num_classes" => self.num_classes = one(key, value)?,
            "input_size" => {
                let s = one(key, value)?;
                self.input_height = s;
                self.input_width = s;
            }
            "input_height" => self.input_height = one(key, value)?,
            "input_width" => self.input_width = one(key, value)?,
            "dims" => {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|p| one(key, p.trim()))
                    .collect::<Result<_>>()?;
                if dims.len() != STAGES + 1 {
                    return Err(Error::Config(format!("`dims` needs {} values, got {}", STAGES + 1, dims.len())));
                }
                for (s, d) in stages.iter_mut().zip(dims) {
                    s.dim = d;
                }
            }
            "ffn_layers" => levels!(ffn_layers),
            "k" => levels!(k),
            "heads" => levels!(heads),
            "ffn_ratio" => levels!(ffn_ratio),
            "reduction" => levels!(reduction),
            "droppath" => levels!(droppath_rate),
            "bottleneck_graphers" => self.bottleneck_graphers = one(key, value)?,
            "skip_before_decoder" => self.skip_before_decoder = one(key, value)?,
            "droppath_ramp" => self.droppath_ramp = one(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Total graph and FFN blocks in forward order.
    pub fn num_blocks(&self) -> usize {
        4 * STAGES + self.bottleneck_graphers
    }

    fn droppath_for(&self, block: usize, stage: usize) -> f64 {
        if self.droppath_ramp > 0.0 {
            let n = self.num_blocks();
            if n <= 1 {
                return self.droppath_ramp;
            }
            self.droppath_ramp * block as f64 / (n - 1) as f64
        } else {
            self.stages[stage].droppath_rate
        }
    }
}

/// Encoder level: Grapher, FFN, then downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub grapher: Grapher,
    pub ffn: Ffn,
    pub down: Resample,
}

/// Decoder level: upsampling, Grapher, FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub up: Resample,
    pub grapher: Grapher,
    pub ffn: Ffn,
}

/// Output shape of every module in one forward pass, in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub shapes: Vec<(String, Vec<usize>)>,
    pub skip_additions: usize,
}

impl ForwardTrace {
    fn record<F: Float>(&mut self, name: impl Into<String>, tape: &Tape<F>, v: Var) {
        self.shapes.push((name.into(), tape.shape(v).to_vec()));
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Optional observers of a forward pass.
#[derive(Default)]
pub struct Hooks<'a> {
    pub trace: Option<&'a mut ForwardTrace>,
    pub graphs: Option<&'a mut GraphLog>,
}

/// One row of the parameter report.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRow {
    pub name: String,
    /// Output shape for a single input image, `[C, H, W]`.
    pub output: [usize; 3],
    pub params: usize,
}

/// The full network together with its parameters.
#[derive(Clone, Debug)]
pub struct VigUnet<F: Float = f32> {
    config: ModelConfig,
    store: ParamStore<F>,
    stem: Stem,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<Grapher>,
    decoder: Vec<DecoderStage>,
    head: ConvLayer,
}

impl<F: Float> VigUnet<F> {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let st = &config.stages;
        let stem = Stem::new(
            &mut store,
            "stem",
            config.in_channels,
            st[0].dim,
            (config.input_height, config.input_width),
            rng,
        );
        let mut block = 0;
        let mut next_rate = |stage: usize| {
            let r = config.droppath_for(block, stage);
            block += 1;
            r
        };
        let grapher = |store: &mut ParamStore<F>, name: &str, s: &StageConfig, rate: f64, rng: &mut RngState| {
            Grapher::new(store, name, s.dim, s.k, s.heads, s.reduction, rate, rng)
        };
        let mut encoder = Vec::with_capacity(STAGES);
        for (i, s) in st.iter().take(STAGES).enumerate() {
            let g = grapher(&mut store, &format!("enc.{i}.grapher"), s, next_rate(i), rng)?;
            let f = Ffn::new(&mut store, &format!("enc.{i}.ffn"), s.dim, s.ffn_ratio, next_rate(i), rng)?;
            let down = Resample::down(&mut store, &format!("enc.{i}.down"), s.dim, rng);
            encoder.push(EncoderStage { grapher: g, ffn: f, down });
        }
        let mut bottleneck = Vec::with_capacity(config.bottleneck_graphers);
        for j in 0..config.bottleneck_graphers {
            bottleneck.push(grapher(&mut store, &format!("bottleneck.{j}"), &st[STAGES], next_rate(STAGES), rng)?);
        }
        let mut decoder = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            let level = STAGES - 1 - j;
            let s = &st[level];
            let up = Resample::up(&mut store, &format!("dec.{j}.up"), st[level + 1].dim, rng)?;
            let g = grapher(&mut store, &format!("dec.{j}.grapher"), s, next_rate(level), rng)?;
            let f = Ffn::new(&mut store, &format!("dec.{j}.ffn"), s.dim, s.ffn_ratio, next_rate(level), rng)?;
            decoder.push(DecoderStage { up, grapher: g, ffn: f });
        }
        let head = ConvLayer::new(
            &mut store,
            "final",
            st[0].dim,
            config.num_classes,
            1,
            ConvGeometry::new(1, 0),
            rng,
        );
        Ok(Self {
            config,
            store,
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn encoder(&self) -> &[EncoderStage] {
        &self.encoder
    }

    pub fn bottleneck(&self) -> &[Grapher] {
        &self.bottleneck
    }

    pub fn decoder(&self) -> &[DecoderStage] {
        &self.decoder
    }

    /// Learnable element count; batch-norm running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.num_learnable()
    }

    /// Same network at another precision.
    pub fn cast<G: Float>(&self) -> VigUnet<G> {
        VigUnet {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [_, ch, h, w] if *ch == c.in_channels && *h == c.input_height && *w == c.input_width => Ok(()),
            [_, _, h, w] if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 => Err(Error::arg(format!(
                "input {h}x{w} is not divisible by {SIZE_MULTIPLE}"
            ))),
            _ => Err(Error::arg(format!(
                "model expects [B, {}, {}, {}] input, got {shape:?}",
                c.in_channels, c.input_height, c.input_width
            ))),
        }
    }

    /// Records a forward pass of `input` (`[B, C, H, W]`) on `tape` and
    /// returns the `[B, 1, H, W]` logits.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape<F>,
        input: Var,
        mode: Mode,
        rng: &mut RngState,
        hooks: Hooks<'_>,
    ) -> Result<Var> {
        let Hooks { mut trace, graphs } = hooks;
        self.check_input(tape.shape(input))?;
        let Self {
            config,
            store,
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        } = self;
        let mut ctx = ForwardCtx {
            tape,
            store,
            mode,
            rng,
            graphs,
        };
        let mut rec = |name: String, ctx: &ForwardCtx<'_, F>, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.record(name, ctx.tape, v);
            }
        };

        let mut x = stem.forward(&mut ctx, input)?;
        rec("stem".into(), &ctx, x);
        let mut skips = Vec::with_capacity(STAGES);
        for (i, s) in encoder.iter().enumerate() {
            x = s.grapher.forward(&mut ctx, x)?;
            rec(format!("enc.{i}.grapher"), &ctx, x);
            x = s.ffn.forward(&mut ctx, x)?;
            rec(format!("enc.{i}.ffn"), &ctx, x);
            skips.push(x);
            x = s.down.forward(&mut ctx, x)?;
            rec(format!("enc.{i}.down"), &ctx, x);
        }
        for (j, g) in bottleneck.iter().enumerate() {
            x = g.forward(&mut ctx, x)?;
            rec(format!("bottleneck.{j}"), &ctx, x);
        }
        let mut added = 0;
        for (j, s) in decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per encoder stage");
            x = s.up.forward(&mut ctx, x)?;
            rec(format!("dec.{j}.up"), &ctx, x);
            if config.skip_before_decoder {
                x = ctx.tape.add(x, skip)?;
                added += 1;
            }
            x = s.grapher.forward(&mut ctx, x)?;
            rec(format!("dec.{j}.grapher"), &ctx, x);
            x = s.ffn.forward(&mut ctx, x)?;
            rec(format!("dec.{j}.ffn"), &ctx, x);
            if !config.skip_before_decoder {
                x = ctx.tape.add(x, skip)?;
                added += 1;
            }
        }
        let up = ctx.tape.upsample_bilinear(x, 2)?;
        let logits = head.forward(&mut ctx, up)?;
        rec("final".into(), &ctx, logits);
        if let Some(t) = trace {
            t.skip_additions = added;
        }
        Ok(logits)
    }

    /// Forward pass on a fresh tape without gradient tracking.
    pub fn predict(&mut self, input: &Tensor<F>, mode: Mode, rng: &mut RngState) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input.clone());
        let y = self.forward_on(&mut tape, x, mode, rng, Hooks::default())?;
        Ok(tape.value(y).clone())
    }

    /// Like [`VigUnet::predict`] but also returns every module's output shape.
    pub fn forward_traced(&mut self, input: &Tensor<F>, mode: Mode, rng: &mut RngState) -> Result<(Tensor<F>, ForwardTrace)> {
        let mut tape = Tape::no_grad();
        let mut trace = ForwardTrace::default();
        let x = tape.constant(input.clone());
        let hooks = Hooks {
            trace: Some(&mut trace),
            graphs: None,
        };
        let y = self.forward_on(&mut tape, x, mode, rng, hooks)?;
        Ok((tape.value(y).clone(), trace))
    }

    fn params_under(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::tensor::ParamKind::Learnable && (e.name == prefix || e.name.starts_with(&dotted)))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Per-module output shapes (derived from the config) and parameter
    /// counts, in forward order.
    pub fn module_table(&self) -> Vec<ModuleRow> {
        let c = &self.config;
        let row = |name: String, dim: usize, (h, w): (usize, usize)| ModuleRow {
            params: self.params_under(&name),
            name,
            output: [dim, h, w],
        };
        let mut rows = vec![row("stem".into(), c.stages[0].dim, c.level_size(0))];
        for i in 0..STAGES {
            let (d, hw) = (c.stages[i].dim, c.level_size(i));
            rows.push(row(format!("enc.{i}.grapher"), d, hw));
            rows.push(row(format!("enc.{i}.ffn"), d, hw));
            rows.push(row(format!("enc.{i}.down"), c.stages[i + 1].dim, c.level_size(i + 1)));
        }
        for j in 0..c.bottleneck_graphers {
            rows.push(row(format!("bottleneck.{j}"), c.stages[STAGES].dim, c.level_size(STAGES)));
        }
        for j in 0..STAGES {
            let level = STAGES - 1 - j;
            let (d, hw) = (c.stages[level].dim, c.level_size(level));
            rows.push(row(format!("dec.{j}.up"), d, hw));
            rows.push(row(format!("dec.{j}.grapher"), d, hw));
            rows.push(row(format!("dec.{j}.ffn"), d, hw));
        }
        rows.push(row("final".into(), c.num_classes, (c.input_height, c.input_width)));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny32() -> ModelConfig {
        let mut c = ModelConfig::with_dims([4, 8, 16, 32, 64], 32);
        for s in &mut c.stages {
            s.heads = 1;
        }
        c
    }

    #[test]
    fn presets_validate() {
        ModelConfig::full(512).validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::full(512).dims(), vec![32, 64, 128, 256, 512]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.input_height = 48;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.stages[2].dim = 40;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.stages[0].ffn_layers = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.stages[0].heads = 3;
        assert!(c.validate().is_err());
        let c = ModelConfig::tiny().with_reductions([3, 1, 1, 1, 1]);
        assert!(c.validate().is_err());
        assert!(VigUnet::<f32>::new(ModelConfig { num_classes: 2, ..ModelConfig::tiny() }, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ModelConfig::full(256).with_reductions([4, 2, 1, 1, 1]);
        c.stages[3].k = 5;
        c.droppath_ramp = 0.1;
        c.skip_before_decoder = true;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!(ModelConfig::from_text("k=1,2").is_err());
    }

    #[test]
    fn bottleneck_has_two_graphers_and_no_ffn() {
        let m = VigUnet::<f32>::new(ModelConfig::tiny(), &mut RngState::new(1)).unwrap();
        assert_eq!(m.bottleneck().len(), 2);
        assert!(m.store().entries().iter().all(|e| !e.name.starts_with("bottleneck.") || !e.name.contains("ffn")));
        assert_eq!(m.encoder().len(), 4);
        assert_eq!(m.decoder().len(), 4);
        for (j, d) in m.decoder().iter().enumerate() {
            assert_eq!(d.ffn.dim, m.encoder()[3 - j].ffn.dim);
        }
    }

    #[test]
    fn tiny_forward_shapes_and_skips() {
        let mut m = VigUnet::<f32>::new(ModelConfig::tiny(), &mut RngState::new(2)).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 64, 64], |i| (i % 17) as f32 / 17.0);
        let (y, trace) = m.forward_traced(&x, Mode::Eval, &mut RngState::new(0)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 64]);
        assert_eq!(trace.skip_additions, 4);
        assert_eq!(trace.shape_of("stem"), Some(&[2, 8, 32, 32][..]));
        assert_eq!(trace.shape_of("bottleneck.1"), Some(&[2, 128, 2, 2][..]));
        assert_eq!(trace.shape_of("dec.3.ffn"), Some(&[2, 8, 32, 32][..]));
        let rows = m.module_table();
        assert_eq!(rows.len(), trace.shapes.len());
        for (r, (name, shape)) in rows.iter().zip(&trace.shapes) {
            assert_eq!(&r.name, name);
            assert_eq!(&shape[1..], &r.output[..]);
        }
        assert_eq!(rows.iter().map(|r| r.params).sum::<usize>(), m.count_parameters());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = VigUnet::<f64>::new(tiny32(), &mut RngState::new(3)).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 32, 32], |i| ((i * 31) % 23) as f64 / 23.0);
        let a = m.predict(&x, Mode::Eval, &mut RngState::new(0)).unwrap();
        let b = m.predict(&x, Mode::Eval, &mut RngState::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_an_argument_error() {
        let mut m = VigUnet::<f32>::new(tiny32(), &mut RngState::new(3)).unwrap();
        let x = Tensor::zeros(vec![1, 3, 48, 48]);
        assert!(matches!(m.predict(&x, Mode::Eval, &mut RngState::new(0)), Err(Error::Argument(_))));
        let x = Tensor::zeros(vec![1, 3, 64, 64]);
        assert!(matches!(m.predict(&x, Mode::Eval, &mut RngState::new(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn droppath_ramp_spans_blocks() {
        let mut c = ModelConfig::tiny();
        c.droppath_ramp = 0.2;
        let m = VigUnet::<f32>::new(c, &mut RngState::new(0)).unwrap();
        assert_eq!(m.encoder()[0].grapher.droppath_rate, 0.0);
        assert!((m.decoder()[3].ffn.droppath_rate - 0.2).abs() < 1e-12);
        assert!(m.bottleneck()[0].droppath_rate > m.encoder()[3].ffn.droppath_rate);
    }
}
