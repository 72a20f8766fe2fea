//! Forward and backward kernels for the differentiable primitives.
//!
//! Every kernel here works on plain row-major buffers. The public functions at
//! the top of the module are the value-level API; [`super::Tape`] records the
//! same kernels and calls the matching `*_backward` routines.

use super::{Float, RngState, Tensor};
use crate::error::{Error, Result};

/// Forward-pass behaviour of batch norm and droppath.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Weight `[out_ch, in_ch / groups, kh, kw]`, bias `[out_ch]` and geometry of
/// one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<F: Float = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub geometry: ConvGeometry,
}

impl<F: Float> ConvParams<F> {
    pub fn new(weight: Tensor<F>, bias: Tensor<F>, stride: usize, padding: usize) -> Result<Self> {
        Self::with_geometry(weight, bias, ConvGeometry::new(stride, padding))
    }

    pub fn with_geometry(weight: Tensor<F>, bias: Tensor<F>, geometry: ConvGeometry) -> Result<Self> {
        let (oc, _, kh, kw) = weight.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!("kernel {kh}x{kw} must have odd sides")));
        }
        if !(1..=2).contains(&geometry.stride) {
            return Err(Error::arg(format!("stride {} not in {{1, 2}}", geometry.stride)));
        }
        if bias.shape() != [oc] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {oc} output channels",
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F: Float = f32> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

/// Affine parameters, running statistics and hyperparameters of one
/// per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F: Float = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    /// `None` until the first train-mode pass (or explicit initialization).
    pub running: Option<RunningStats<F>>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl<F: Float> BatchNormState<F> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    /// gamma 1, beta 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running: Some(RunningStats {
                mean: Tensor::zeros(vec![channels]),
                var: Tensor::ones(vec![channels]),
            }),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn without_running_stats(channels: usize) -> Self {
        Self {
            running: None,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

// ---------------------------------------------------------------------------
// Value-level API

pub fn conv2d<F: Float>(input: &Tensor<F>, p: &ConvParams<F>) -> Result<Tensor<F>> {
    let s = ConvShape::new(input.shape(), p.weight.shape(), p.geometry)?;
    let out = conv2d_forward(input.data(), p.weight.data(), Some(p.bias.data()), &s);
    Tensor::new(s.out_shape(), out)
}

/// Applies batch norm in `s.mode`. Train mode normalizes with batch
/// statistics and folds them into the running statistics.
pub fn batch_norm2d<F: Float>(input: &Tensor<F>, s: &mut BatchNormState<F>) -> Result<Tensor<F>> {
    let (_, c, _, _) = input.dims4()?;
    if c != s.channels() {
        return Err(Error::shape(format!(
            "batch norm over {} channels given {c}-channel input",
            s.channels()
        )));
    }
    let stats = match s.mode {
        Mode::Train => BnStats::Batch,
        Mode::Eval => {
            let r = s.running.as_ref().ok_or_else(|| {
                Error::State("eval-mode batch norm with uninitialized running stats".into())
            })?;
            BnStats::Fixed {
                mean: r.mean.data(),
                var: r.var.data(),
            }
        }
    };
    let fwd = batch_norm_forward(input, s.gamma.data(), s.beta.data(), stats, s.eps, false)?;
    if let Some((mean, var)) = &fwd.batch_stats {
        let r = s.running.get_or_insert_with(|| RunningStats {
            mean: Tensor::zeros(vec![c]),
            var: Tensor::ones(vec![c]),
        });
        update_running(r.mean.data_mut(), r.var.data_mut(), mean, var, fwd.count, s.momentum);
    }
    Tensor::new(input.shape().to_vec(), fwd.out)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<F: Float>(input: &Tensor<F>) -> Tensor<F> {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&x| gelu_scalar(x)).collect(),
    )
    .expect("same shape")
}

pub fn bilinear_upsample<F: Float>(input: &Tensor<F>, scale: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = input.dims4()?;
    if scale == 0 {
        return Err(Error::arg("upsample scale must be at least 1"));
    }
    let out = upsample_forward(input.data(), b * c, h, w, scale);
    Tensor::new(vec![b, c, h * scale, w * scale], out)
}

pub fn avg_pool2d<F: Float>(input: &Tensor<F>, window: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = input.dims4()?;
    check_pool(h, w, window)?;
    let out = avg_pool_forward(input.data(), b * c, h, w, window);
    Tensor::new(vec![b, c, h / window, w / window], out)
}

/// Stochastic depth: zeroes whole samples of a residual branch.
///
/// In train mode each batch element is kept with probability `1 - rate` and
/// kept elements are scaled by `1 / (1 - rate)`. `rate == 1` zeroes the
/// branch. Eval mode is the identity.
pub fn droppath<F: Float>(
    input: &Tensor<F>,
    rate: f64,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor<F>> {
    let batch = *input
        .shape()
        .first()
        .ok_or_else(|| Error::shape("droppath needs a batch dimension"))?;
    match droppath_factors::<F>(batch, rate, mode, rng)? {
        None => Ok(input.detached()),
        Some(f) => Tensor::new(
            input.shape().to_vec(),
            scale_per_sample(input.data(), &f),
        ),
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn new(x: &[usize], wt: &[usize], g: ConvGeometry) -> Result<Self> {
        let &[b, c, h, w] = x else {
            return Err(Error::shape(format!("conv2d input must be [B,C,H,W], got {x:?}")));
        };
        let &[oc, icg, kh, kw] = wt else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {wt:?}")));
        };
        if g.groups == 0 || g.stride == 0 {
            return Err(Error::arg("conv2d stride and groups must be positive"));
        }
        if icg * g.groups != c || oc % g.groups != 0 {
            return Err(Error::shape(format!(
                "conv2d weight {wt:?} with {} groups does not fit {c} input channels",
                g.groups
            )));
        }
        let (hp, wp) = (h + 2 * g.padding, w + 2 * g.padding);
        if hp < kh || wp < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            ho: (hp - kh) / g.stride + 1,
            wo: (wp - kw) / g.stride + 1,
            stride: g.stride,
            pad: g.padding,
            groups: g.groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.oc, self.ho, self.wo]
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn ocg(&self) -> usize {
        self.oc / self.groups
    }

    /// Rows of the unfolded patch matrix.
    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one group of one sample (`cg x h x w`) into `[cg*kh*kw, ho*wo]`.
fn im2col<F: Float>(x: &[F], s: &ConvShape, cols: &mut [F]) {
    let p = s.pixels();
    for ci in 0..s.cg() {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (ci * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    let line = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(F::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        *d = if ix < 0 || ix >= s.w as isize {
                            F::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<F: Float>(cols: &[F], s: &ConvShape, gx: &mut [F]) {
    let p = s.pixels();
    for ci in 0..s.cg() {
        let plane = &mut gx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (ci * s.kh + ky) * s.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Float>(x: &[F], wt: &[F], bias: Option<&[F]>, s: &ConvShape) -> Vec<F> {
    let (p, k, cg, ocg) = (s.pixels(), s.k(), s.cg(), s.ocg());
    let mut out = vec![F::ZERO; s.b * s.oc * p];
    let mut cols = if s.pointwise() { Vec::new() } else { vec![F::ZERO; k * p] };
    for bi in 0..s.b {
        for g in 0..s.groups {
            let xg = &x[(bi * s.c + g * cg) * s.h * s.w..(bi * s.c + (g + 1) * cg) * s.h * s.w];
            let patches: &[F] = if s.pointwise() {
                xg
            } else {
                im2col(xg, s, &mut cols);
                &cols
            };
            let wg = &wt[g * ocg * k..(g + 1) * ocg * k];
            let og = &mut out[(bi * s.oc + g * ocg) * p..(bi * s.oc + (g + 1) * ocg) * p];
            F::gemm(ocg, k, p, F::ONE, wg, k as isize, 1, patches, p as isize, 1, F::ZERO, og, p as isize, 1);
        }
    }
    if let Some(bias) = bias {
        for bi in 0..s.b {
            for (o, &bv) in bias.iter().enumerate() {
                out[(bi * s.oc + o) * p..(bi * s.oc + o + 1) * p]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Float>(
    x: &[F],
    wt: &[F],
    gout: &[F],
    s: &ConvShape,
    need: [bool; 3],
) -> ConvGrads<F> {
    let (p, k, cg, ocg) = (s.pixels(), s.k(), s.cg(), s.ocg());
    let [need_x, need_w, need_b] = need;
    let mut gx = need_x.then(|| vec![F::ZERO; x.len()]);
    let mut gw = need_w.then(|| vec![F::ZERO; wt.len()]);
    let pointwise = s.pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![F::ZERO; k * p] };
    let mut gcols = vec![F::ZERO; k * p];
    for bi in 0..s.b {
        for g in 0..s.groups {
            let xrange = (bi * s.c + g * cg) * s.h * s.w..(bi * s.c + (g + 1) * cg) * s.h * s.w;
            let go = &gout[(bi * s.oc + g * ocg) * p..(bi * s.oc + (g + 1) * ocg) * p];
            let wg = &wt[g * ocg * k..(g + 1) * ocg * k];
            if let Some(gw) = gw.as_mut() {
                let patches: &[F] = if pointwise {
                    &x[xrange.clone()]
                } else {
                    im2col(&x[xrange.clone()], s, &mut cols);
                    &cols
                };
                // gW_g += gout_g * patches^T
                let gwg = &mut gw[g * ocg * k..(g + 1) * ocg * k];
                F::gemm(ocg, p, k, F::ONE, go, p as isize, 1, patches, 1, p as isize, F::ONE, gwg, k as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let gxg = &mut gx[xrange];
                if pointwise {
                    F::gemm(k, ocg, p, F::ONE, wg, 1, k as isize, go, p as isize, 1, F::ONE, gxg, p as isize, 1);
                } else {
                    // gcols = W_g^T * gout_g
                    F::gemm(k, ocg, p, F::ONE, wg, 1, k as isize, go, p as isize, 1, F::ZERO, &mut gcols, p as isize, 1);
                    col2im(&gcols, s, gxg);
                }
            }
        }
    }
    let gb = need_b.then(|| {
        let mut gb = vec![F::ZERO; s.oc];
        for bi in 0..s.b {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gout[(bi * s.oc + o) * p..(bi * s.oc + o + 1) * p].iter().copied().sum::<F>();
            }
        }
        gb
    });
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

// ---------------------------------------------------------------------------
// Batch norm

pub(crate) enum BnStats<'a, F> {
    Batch,
    Fixed { mean: &'a [F], var: &'a [F] },
}

pub(crate) struct BnForward<F> {
    pub out: Vec<F>,
    /// Normalized input, kept only when a backward pass will need it.
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    /// Per-channel (mean, biased variance) when batch statistics were used.
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
    pub count: usize,
}

pub(crate) fn batch_norm_forward<F: Float>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    stats: BnStats<'_, F>,
    eps: f64,
    keep_xhat: bool,
) -> Result<BnForward<F>> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch norm affine parameters of length {} for {c} channels",
            gamma.len()
        )));
    }
    let hw = h * w;
    let count = b * hw;
    let xd = x.data();
    let eps = F::from_f64(eps);
    let (mean, var, batch) = match stats {
        BnStats::Batch => {
            let n = F::from_usize(count);
            let mut mean = vec![F::ZERO; c];
            let mut var = vec![F::ZERO; c];
            for ch in 0..c {
                let mut s = F::ZERO;
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<F>();
                }
                let m = s / n;
                let mut sq = F::ZERO;
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq / n;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        BnStats::Fixed { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("running statistics do not match channel count"));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
    let mut out = vec![F::ZERO; xd.len()];
    let mut xhat = if keep_xhat { vec![F::ZERO; xd.len()] } else { Vec::new() };
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in r {
                let xn = (xd[i] - m) * is;
                out[i] = g * xn + bt;
                if keep_xhat {
                    xhat[i] = xn;
                }
            }
        }
    }
    Ok(BnForward {
        out,
        xhat,
        inv_std,
        batch_stats: batch,
        count,
    })
}

/// Running mean gets the batch mean, running variance the unbiased batch
/// variance, both blended with `momentum`.
pub(crate) fn update_running<F: Float>(
    run_mean: &mut [F],
    run_var: &mut [F],
    mean: &[F],
    biased_var: &[F],
    count: usize,
    momentum: f64,
) {
    let m = F::from_f64(momentum);
    let keep = F::ONE - m;
    let correction = if count > 1 {
        F::from_usize(count) / F::from_usize(count - 1)
    } else {
        F::ONE
    };
    for ch in 0..mean.len() {
        run_mean[ch] = keep * run_mean[ch] + m * mean[ch];
        run_var[ch] = keep * run_var[ch] + m * biased_var[ch] * correction;
    }
}

pub(crate) struct BnGrads<F> {
    pub input: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub(crate) fn batch_norm_backward<F: Float>(
    dims: (usize, usize, usize, usize),
    gout: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    batch_stats: bool,
) -> BnGrads<F> {
    let (b, c, h, w) = dims;
    let hw = h * w;
    let n = F::from_usize(b * hw);
    let mut gx = vec![F::ZERO; gout.len()];
    let mut gg = vec![F::ZERO; c];
    let mut gb = vec![F::ZERO; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (F::ZERO, F::ZERO);
        for bi in 0..b {
            for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                sg += gout[i];
                sgx += gout[i] * xhat[i];
            }
        }
        gb[ch] = sg;
        gg[ch] = sgx;
        let scale = gamma[ch] * inv_std[ch];
        for bi in 0..b {
            for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                gx[i] = if batch_stats {
                    scale * (gout[i] - sg / n - xhat[i] * sgx / n)
                } else {
                    scale * gout[i]
                };
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    }
}

// ---------------------------------------------------------------------------
// Elementwise

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf())
}

/// d/dx of `x * Phi(x)`, i.e. `Phi(x) + x * phi(x)`.
#[inline]
pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = F::from_f64(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

pub(crate) fn scale_per_sample<F: Float>(x: &[F], factors: &[F]) -> Vec<F> {
    let per = x.len() / factors.len();
    x.chunks(per)
        .zip(factors)
        .flat_map(|(chunk, &f)| chunk.iter().map(move |&v| v * f))
        .collect()
}

/// Per-sample droppath multipliers, or `None` when the op is the identity.
pub(crate) fn droppath_factors<F: Float>(
    batch: usize,
    rate: f64,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Option<Vec<F>>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::arg(format!("droppath rate {rate} outside [0, 1]")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    if rate == 1.0 {
        return Ok(Some(vec![F::ZERO; batch]));
    }
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    Ok(Some(
        (0..batch)
            .map(|_| if rng.bernoulli(keep) { scale } else { F::ZERO })
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Resampling

/// Source taps for one output coordinate of a half-pixel-center resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<F> {
    pub i0: usize,
    pub i1: usize,
    pub w1: F,
}

pub(crate) fn half_pixel_taps<F: Float>(in_len: usize, scale: usize) -> Vec<Taps<F>> {
    (0..in_len * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Taps {
                i0,
                i1,
                w1: F::from_f64(src - i0 as f64),
            }
        })
        .collect()
}

pub(crate) fn upsample_forward<F: Float>(x: &[F], planes: usize, h: usize, w: usize, scale: usize) -> Vec<F> {
    let (ty, tx) = (half_pixel_taps::<F>(h, scale), half_pixel_taps::<F>(w, scale));
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![F::ZERO; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y.i0 * w..(y.i0 + 1) * w], &src[y.i1 * w..(y.i1 + 1) * w]);
            for (ox, t) in tx.iter().enumerate() {
                let top = r0[t.i0] + t.w1 * (r0[t.i1] - r0[t.i0]);
                let bot = r1[t.i0] + t.w1 * (r1[t.i1] - r1[t.i0]);
                dst[oy * ow + ox] = top + y.w1 * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<F: Float>(g: &[F], planes: usize, h: usize, w: usize, scale: usize) -> Vec<F> {
    let (ty, tx) = (half_pixel_taps::<F>(h, scale), half_pixel_taps::<F>(w, scale));
    let (oh, ow) = (h * scale, w * scale);
    let mut gx = vec![F::ZERO; planes * h * w];
    for pl in 0..planes {
        let src = &g[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::ONE - y.w1, y.w1);
            for (ox, t) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                let (wx0, wx1) = (F::ONE - t.w1, t.w1);
                dst[y.i0 * w + t.i0] += v * wy0 * wx0;
                dst[y.i0 * w + t.i1] += v * wy0 * wx1;
                dst[y.i1 * w + t.i0] += v * wy1 * wx0;
                dst[y.i1 * w + t.i1] += v * wy1 * wx1;
            }
        }
    }
    gx
}

pub(crate) fn check_pool(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::arg(format!(
            "pool window {window} does not tile a {h}x{w} map"
        )));
    }
    Ok(())
}

pub(crate) fn avg_pool_forward<F: Float>(x: &[F], planes: usize, h: usize, w: usize, r: usize) -> Vec<F> {
    let (oh, ow) = (h / r, w / r);
    let norm = F::ONE / F::from_usize(r * r);
    let mut out = vec![F::ZERO; planes * oh * ow];
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = F::ZERO;
                for dy in 0..r {
                    let row = pl * h * w + (oy * r + dy) * w + ox * r;
                    s += x[row..row + r].iter().copied().sum::<F>();
                }
                out[(pl * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<F: Float>(g: &[F], planes: usize, h: usize, w: usize, r: usize) -> Vec<F> {
    let (oh, ow) = (h / r, w / r);
    let norm = F::ONE / F::from_usize(r * r);
    let mut gx = vec![F::ZERO; planes * h * w];
    for pl in 0..planes {
        for y in 0..h {
            for x in 0..w {
                gx[(pl * h + y) * w + x] = g[(pl * oh + y / r) * ow + x / r] * norm;
            }
        }
    }
    gx
}
