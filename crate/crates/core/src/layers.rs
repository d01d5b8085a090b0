//! Layer parameter specifications and reference kernels.
//!
//! Each pooling/element-wise kernel exists in two forms that share the same
//! scalar and window primitives: a whole-tensor form used by the
//! breadth-first executor, and a plane/region form used by the depth-first
//! tile interpreter. Sharing the primitives is what makes the two execution
//! orders bit-identical; the accumulation order inside every primitive is
//! fixed (row-major windows, ascending feature index) and must not change.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::{Region, Shape, Tensor};

/// The six supported layer families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Relu,
    Batchnorm,
    Maxpool,
    Avgpool,
    Conv2d,
    Linear,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Relu,
        LayerKind::Batchnorm,
        LayerKind::Maxpool,
        LayerKind::Avgpool,
        LayerKind::Conv2d,
        LayerKind::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Relu => "relu",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
        }
    }

    pub fn class(self) -> OpClass {
        match self {
            LayerKind::Relu | LayerKind::Batchnorm => OpClass::Elementwise,
            LayerKind::Maxpool | LayerKind::Avgpool => OpClass::Pooling,
            LayerKind::Conv2d | LayerKind::Linear => OpClass::Opaque,
        }
    }
}

/// Classification driving the fusion planner: element-wise and pooling
/// layers are optimizable, conv/linear are opaque and always run
/// breadth-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    Elementwise,
    Pooling,
    Opaque,
}

impl OpClass {
    pub fn optimizable(self) -> bool {
        !matches!(self, OpClass::Opaque)
    }
}

/// Spatial geometry of a pooling or convolution: kernel, stride, padding,
/// each as (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        PoolGeom { kernel, stride, padding }
    }

    pub fn check(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh < 1 || kw < 1 {
            return Err(Error::Validation(format!("kernel must be >= 1, got {kh}x{kw}")));
        }
        if sh < 1 || sw < 1 {
            return Err(Error::Validation(format!("stride must be >= 1, got {sh}x{sw}")));
        }
        if ph >= kh || pw >= kw {
            return Err(Error::Validation(format!(
                "padding {ph}x{pw} must be smaller than kernel {kh}x{kw} per axis"
            )));
        }
        Ok(())
    }

    /// Output extent: floor((in + 2*pad - kernel) / stride) + 1 per axis.
    pub fn out_extent(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let axis = |inp: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let span = inp as i64 + 2 * p as i64 - k as i64;
            if span < 0 {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {k} with padding {p} does not fit input extent {inp}"
                )));
            }
            Ok((span / s as i64) as usize + 1)
        };
        Ok((
            axis(input.0, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(input.1, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Where a parameter's values came from; kept so validated graphs can be
/// serialized back to the same document they were parsed from.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSource {
    File(PathBuf),
    Prng(u64),
    /// Built programmatically; not expressible in the network schema.
    Inline,
}

/// Per-channel parameter vector with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    pub values: Vec<f32>,
    pub source: ParamSource,
}

impl ParamVec {
    pub fn inline(values: Vec<f32>) -> Self {
        ParamVec { values, source: ParamSource::Inline }
    }
}

/// Weight tensor with provenance (conv filters, linear weight matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub tensor: Tensor,
    pub source: ParamSource,
}

impl ParamTensor {
    pub fn inline(tensor: Tensor) -> Self {
        ParamTensor { tensor, source: ParamSource::Inline }
    }
}

/// One layer of the network, with all parameters resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Relu,
    Batchnorm {
        gamma: ParamVec,
        beta: ParamVec,
        running_mean: ParamVec,
        running_var: ParamVec,
        eps: f32,
    },
    Maxpool(PoolGeom),
    Avgpool(PoolGeom),
    Conv2d {
        /// Shape (k_out, c_in, kh, kw).
        weights: ParamTensor,
        bias: ParamVec,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Linear {
        /// Shape (1, 1, out_features, in_features).
        weight: ParamTensor,
        bias: ParamVec,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Batchnorm { .. } => LayerKind::Batchnorm,
            LayerSpec::Maxpool(_) => LayerKind::Maxpool,
            LayerSpec::Avgpool(_) => LayerKind::Avgpool,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Linear { .. } => LayerKind::Linear,
        }
    }

    pub fn class(&self) -> OpClass {
        self.kind().class()
    }

    pub fn pool_geom(&self) -> Option<PoolGeom> {
        match self {
            LayerSpec::Maxpool(g) | LayerSpec::Avgpool(g) => Some(*g),
            _ => None,
        }
    }

    /// Parameter element count read from memory when the layer executes over
    /// `channels` channels (conv/linear ignore `channels`).
    pub fn param_elems(&self, channels: usize) -> u64 {
        match self {
            LayerSpec::Relu | LayerSpec::Maxpool(_) | LayerSpec::Avgpool(_) => 0,
            LayerSpec::Batchnorm { .. } => 4 * channels as u64,
            LayerSpec::Conv2d { weights, bias, .. } => {
                weights.tensor.shape().elems() as u64 + bias.values.len() as u64
            }
            LayerSpec::Linear { weight, bias } => {
                weight.tensor.shape().elems() as u64 + bias.values.len() as u64
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar and window primitives (the single source of arithmetic truth)
// ---------------------------------------------------------------------------

#[inline]
pub fn relu_scalar(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Precomputed denominator for batchnorm; eval order is fixed as
/// subtract, divide, multiply, add.
#[inline]
pub fn bn_std(var: f32, eps: f32) -> f32 {
    (var + eps).sqrt()
}

#[inline]
pub fn bn_scalar(v: f32, mean: f32, std: f32, gamma: f32, beta: f32) -> f32 {
    ((v - mean) / std) * gamma + beta
}

/// Read-only view of a dense plane buffer covering `region` in absolute
/// coordinates, with cells outside `extent` being padding.
///
/// Both the whole-tensor kernels (region == full extent) and the depth-first
/// scratch buffers (region possibly hanging over the edges) are planes, so
/// every window walks identical absolute coordinates in both modes.
#[derive(Debug, Clone, Copy)]
pub struct PlaneSrc<'a> {
    pub data: &'a [f32],
    pub region: Region,
    pub extent: (usize, usize),
}

impl<'a> PlaneSrc<'a> {
    /// Value at absolute (h, w); None marks a padded coordinate.
    #[inline]
    pub fn get(&self, h: i64, w: i64) -> Option<f32> {
        if h < 0 || w < 0 || h >= self.extent.0 as i64 || w >= self.extent.1 as i64 {
            return None;
        }
        debug_assert!(
            h >= self.region.h.lo && h < self.region.h.hi && w >= self.region.w.lo && w < self.region.w.hi,
            "coordinate ({h},{w}) outside loaded region {:?}",
            self.region
        );
        let r = (h - self.region.h.lo) as usize;
        let c = (w - self.region.w.lo) as usize;
        Some(self.data[r * self.region.cols() + c])
    }
}

/// Max over one window, row-major; padded coordinates contribute -inf and
/// are never selected while any real element is present.
#[inline]
pub fn max_window(src: &PlaneSrc<'_>, oh: i64, ow: i64, g: &PoolGeom) -> f32 {
    let h0 = oh * g.stride.0 as i64 - g.padding.0 as i64;
    let w0 = ow * g.stride.1 as i64 - g.padding.1 as i64;
    let mut acc = f32::NEG_INFINITY;
    for u in 0..g.kernel.0 as i64 {
        for v in 0..g.kernel.1 as i64 {
            if let Some(x) = src.get(h0 + u, w0 + v) {
                if x > acc {
                    acc = x;
                }
            }
        }
    }
    acc
}

/// Sum over one window in row-major order (padded cells add 0.0), divided by
/// the full kernel area.
#[inline]
pub fn avg_window(src: &PlaneSrc<'_>, oh: i64, ow: i64, g: &PoolGeom) -> f32 {
    let h0 = oh * g.stride.0 as i64 - g.padding.0 as i64;
    let w0 = ow * g.stride.1 as i64 - g.padding.1 as i64;
    let mut acc = 0.0f32;
    for u in 0..g.kernel.0 as i64 {
        for v in 0..g.kernel.1 as i64 {
            acc += src.get(h0 + u, w0 + v).unwrap_or(0.0);
        }
    }
    acc / (g.kernel.0 * g.kernel.1) as f32
}

/// Which pooling aggregate a plane-level pooling pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

impl PoolKind {
    pub fn pad_policy(self) -> crate::tensor::PadPolicy {
        match self {
            PoolKind::Max => crate::tensor::PadPolicy::NegInf,
            PoolKind::Avg => crate::tensor::PadPolicy::Zero,
        }
    }
}

/// Pools `out_region` of one plane into `dst` (dense, row-major over the
/// region rectangle). Cells of the region that fall outside `out_extent` are
/// depth-first padding: they are not computed and are stored as 0.0; every
/// downstream consumer decides padding from coordinates, never from stored
/// sentinels.
pub fn pool_region_into(
    kind: PoolKind,
    src: &PlaneSrc<'_>,
    out_region: Region,
    out_extent: (usize, usize),
    g: &PoolGeom,
    dst: &mut [f32],
) {
    let cols = out_region.cols();
    for (ri, oh) in (out_region.h.lo..out_region.h.hi).enumerate() {
        for (ci, ow) in (out_region.w.lo..out_region.w.hi).enumerate() {
            let real = oh >= 0 && ow >= 0 && oh < out_extent.0 as i64 && ow < out_extent.1 as i64;
            dst[ri * cols + ci] = if real {
                match kind {
                    PoolKind::Max => max_window(src, oh, ow, g),
                    PoolKind::Avg => avg_window(src, oh, ow, g),
                }
            } else {
                0.0
            };
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-tensor kernels (breadth-first reference forms)
// ---------------------------------------------------------------------------

/// Element-wise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| relu_scalar(v)).collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

pub fn relu_slice(xs: &mut [f32]) {
    for v in xs.iter_mut() {
        *v = relu_scalar(*v);
    }
}

/// Inference-mode batch normalization with per-channel parameters.
pub fn batchnorm_inference(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let shape = x.shape();
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", mean.len()),
        ("running_var", var.len()),
    ] {
        if len != shape.c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm {name} has length {len}, expected {} channels",
                shape.c
            )));
        }
    }
    let mut out = x.clone();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let std = bn_std(var[c], eps);
            bn_slice(out.plane_mut(n, c), gamma[c], beta[c], mean[c], std);
        }
    }
    Ok(out)
}

pub fn bn_slice(xs: &mut [f32], gamma: f32, beta: f32, mean: f32, std: f32) {
    for v in xs.iter_mut() {
        *v = bn_scalar(*v, mean, std, gamma, beta);
    }
}

fn pool2d(x: &Tensor, g: &PoolGeom, kind: PoolKind) -> Result<Tensor> {
    g.check()?;
    let shape = x.shape();
    let (oh, ow) = g.out_extent(shape.extent())?;
    let out_shape = Shape::new(shape.n, shape.c, oh, ow);
    let mut out = Tensor::zeros(out_shape)?;
    let full = Region::new(0, shape.h as i64, 0, shape.w as i64);
    let out_region = Region::new(0, oh as i64, 0, ow as i64);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let src = PlaneSrc {
                data: x.plane(n, c),
                region: full,
                extent: shape.extent(),
            };
            pool_region_into(kind, &src, out_region, (oh, ow), g, out.plane_mut(n, c));
        }
    }
    Ok(out)
}

/// Max pooling; padded coordinates act as -inf.
pub fn maxpool2d(x: &Tensor, g: &PoolGeom) -> Result<Tensor> {
    pool2d(x, g, PoolKind::Max)
}

/// Average pooling; padded cells contribute 0.0 and the divisor is always
/// the full kernel area.
pub fn avgpool2d(x: &Tensor, g: &PoolGeom) -> Result<Tensor> {
    pool2d(x, g, PoolKind::Avg)
}

/// Direct cross-correlation with zero padding. Accumulation starts from the
/// bias and runs channels-outer, then kernel rows, then kernel cols.
pub fn conv2d(
    x: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let shape = x.shape();
    let wshape = weights.shape();
    let (k_out, c_in, kh, kw) = (wshape.n, wshape.c, wshape.h, wshape.w);
    if c_in != shape.c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weights expect {c_in} input channels, tensor has {}",
            shape.c
        )));
    }
    if bias.len() != k_out {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias has length {}, expected {k_out}",
            bias.len()
        )));
    }
    let geom = PoolGeom::new((kh, kw), stride, padding);
    geom.check()?;
    let (oh, ow) = geom.out_extent(shape.extent())?;
    let mut out = Tensor::zeros(Shape::new(shape.n, k_out, oh, ow))?;
    for n in 0..shape.n {
        for k in 0..k_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[k];
                    for c in 0..c_in {
                        for u in 0..kh {
                            let ih = (i * stride.0 + u) as i64 - padding.0 as i64;
                            if ih < 0 || ih >= shape.h as i64 {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (j * stride.1 + v) as i64 - padding.1 as i64;
                                if iw < 0 || iw >= shape.w as i64 {
                                    continue;
                                }
                                acc += weights.at(k, c, u, v)
                                    * x.at(n, c, ih as usize, iw as usize);
                            }
                        }
                    }
                    let idx = out.index(n, k, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Dense layer over the flattened input: y = x * W^T + b, products
/// accumulated in ascending feature order, bias added last.
///
/// `weight` is stored as (1, 1, out_features, in_features); output shape is
/// (n, out_features, 1, 1).
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let shape = x.shape();
    let wshape = weight.shape();
    let (out_features, in_features) = (wshape.h, wshape.w);
    let features = shape.c * shape.h * shape.w;
    if features != in_features {
        return Err(Error::ShapeMismatch(format!(
            "linear expects {in_features} input features, tensor flattens to {features}"
        )));
    }
    if bias.len() != out_features {
        return Err(Error::ShapeMismatch(format!(
            "linear bias has length {}, expected {out_features}",
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(Shape::new(shape.n, out_features, 1, 1))?;
    let wdata = weight.data();
    for n in 0..shape.n {
        let row = &x.data()[n * features..(n + 1) * features];
        for o in 0..out_features {
            let wrow = &wdata[o * in_features..(o + 1) * in_features];
            let mut acc = 0.0f32;
            for i in 0..in_features {
                acc += row[i] * wrow[i];
            }
            let idx = out.index(n, o, 0, 0);
            out.data_mut()[idx] = acc + bias[o];
        }
    }
    Ok(out)
}
