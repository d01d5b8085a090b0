//! Dense NCHW f32 tensors, deterministic generation, and the BSTN binary
//! persistence format.
//!
//! Tensors are immutable value objects once built: every kernel returns a
//! fresh tensor instead of mutating in place, which keeps them safe to share
//! across the tiled executor's workers.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// 4-D tensor shape: batch, channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn elems(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial extent (rows, cols).
    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn check(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major (n outermost, w innermost) tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.elems() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.elems()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        shape.check()?;
        Ok(Tensor {
            shape,
            data: vec![0.0; shape.elems()],
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous (h, w) plane for one batch/channel pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Bit-exact equality, including NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// SplitMix64 generator: the pinned source of all deterministic values.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform value in [-1, 1): upper 24 bits of the draw divided by 2^23,
    /// minus one. Every intermediate is exactly representable in f32, so the
    /// mapping is bit-identical on all platforms.
    pub fn next_f32(&mut self) -> f32 {
        let hi = (self.next_u64() >> 40) as f32;
        hi / (1u32 << 23) as f32 - 1.0
    }

    /// Uniform value in [lo, hi) derived from `next_f32`.
    pub fn next_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (self.next_f32() + 1.0) * 0.5 * (hi - lo)
    }

    /// Uniform integer in [0, bound).
    pub fn next_below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }
}

/// Deterministic tensor fill: same seed and shape give a bit-identical tensor
/// on every platform.
pub fn prng_fill(seed: u64, shape: Shape) -> Result<Tensor> {
    shape.check()?;
    let mut rng = SplitMix64::new(seed);
    let data = (0..shape.elems()).map(|_| rng.next_f32()).collect();
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// BSTN binary format
// ---------------------------------------------------------------------------

const BSTN_MAGIC: [u8; 4] = *b"BSTN";
const BSTN_VERSION: u32 = 1;
const BSTN_DTYPE_F32: u32 = 0;

/// Writes the BSTN encoding of `t` and returns the number of bytes emitted.
///
/// Layout, little-endian, no padding: magic "BSTN", u32 version = 1,
/// u32 dtype (0 = f32), u32 ndim = 4, 4x u64 dims, then raw f32 payload.
pub fn write_tensor<W: Write>(t: &Tensor, mut sink: W) -> Result<u64> {
    sink.write_all(&BSTN_MAGIC)?;
    sink.write_all(&BSTN_VERSION.to_le_bytes())?;
    sink.write_all(&BSTN_DTYPE_F32.to_le_bytes())?;
    sink.write_all(&4u32.to_le_bytes())?;
    for d in t.shape().dims() {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(16 + 32 + 4 * t.data().len() as u64)
}

/// Reads one BSTN-encoded tensor from `source`.
pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|_| {
        Error::Format("stream too short for BSTN magic".to_string())
    })?;
    if magic != BSTN_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"BSTN\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut source)?;
    if version != BSTN_VERSION {
        return Err(Error::Format(format!(
            "unsupported BSTN version {version}, expected {BSTN_VERSION}"
        )));
    }
    let dtype = read_u32(&mut source)?;
    if dtype != BSTN_DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = read_u32(&mut source)?;
    if ndim != 4 {
        return Err(Error::Format(format!("expected 4 dims, header says {ndim}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let raw = read_u64(&mut source)?;
        *d = usize::try_from(raw)
            .map_err(|_| Error::Format(format!("dimension {raw} overflows usize")))?;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    shape.check()?;
    let elems = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows usize".to_string()))?;

    let expected = 4 * elems as u64;
    let mut payload = vec![0u8; 4 * elems];
    let mut filled = 0usize;
    while filled < payload.len() {
        match source.read(&mut payload[filled..])? {
            0 => {
                return Err(Error::TruncatedPayload {
                    expected,
                    actual: filled as u64,
                })
            }
            k => filled += k,
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(t: &Tensor, path: &std::path::Path) -> Result<u64> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    let n = write_tensor(t, &mut buf)?;
    buf.flush()?;
    Ok(n)
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(file))
}

fn read_u32<R: Read>(src: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    src.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated BSTN header".to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(src: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    src.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated BSTN header".to_string()))?;
    Ok(u64::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Regions and padded extraction
// ---------------------------------------------------------------------------

/// Half-open interval on one spatial axis. May extend past tensor bounds;
/// the consumer applies padding semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lo: i64,
    pub hi: i64,
}

impl Span {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo < hi, "empty span {lo}..{hi}");
        Span { lo, hi }
    }

    // Spans are non-empty by construction, so no is_empty counterpart.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        (self.hi - self.lo) as usize
    }

    /// Length of the overlap with [0, extent).
    pub fn in_bounds_len(&self, extent: usize) -> usize {
        let lo = self.lo.max(0);
        let hi = self.hi.min(extent as i64);
        if lo < hi {
            (hi - lo) as usize
        } else {
            0
        }
    }
}

/// Rectangular spatial region in (h, w); batch and channel are carried by the
/// caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub h: Span,
    pub w: Span,
}

impl Region {
    pub fn new(h_lo: i64, h_hi: i64, w_lo: i64, w_hi: i64) -> Self {
        Region {
            h: Span::new(h_lo, h_hi),
            w: Span::new(w_lo, w_hi),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.len()
    }

    pub fn cols(&self) -> usize {
        self.w.len()
    }

    /// Cell count of the full rectangle, padding included.
    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Cell count of the overlap with a (rows, cols) extent anchored at 0.
    pub fn in_bounds_area(&self, extent: (usize, usize)) -> usize {
        self.h.in_bounds_len(extent.0) * self.w.in_bounds_len(extent.1)
    }

    pub fn is_within(&self, extent: (usize, usize)) -> bool {
        self.h.lo >= 0
            && self.w.lo >= 0
            && self.h.hi <= extent.0 as i64
            && self.w.hi <= extent.1 as i64
    }
}

/// Fill value for coordinates outside the tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// 0.0 — identity for sums (average pooling, element-wise loads).
    Zero,
    /// -inf — identity for running maxima (max pooling).
    NegInf,
}

impl PadPolicy {
    #[inline]
    pub fn value(self) -> f32 {
        match self {
            PadPolicy::Zero => 0.0,
            PadPolicy::NegInf => f32::NEG_INFINITY,
        }
    }
}

/// Dense (rows, cols) window cut out of one channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Copies `region` of one channel plane into a dense patch, materializing
/// out-of-bounds coordinates per `policy`.
pub fn extract_region(
    t: &Tensor,
    batch: usize,
    channel: usize,
    region: Region,
    policy: PadPolicy,
) -> Result<Patch> {
    let shape = t.shape();
    if batch >= shape.n || channel >= shape.c {
        return Err(Error::IndexOutOfRange(format!(
            "batch {batch} / channel {channel} outside shape {shape}"
        )));
    }
    let mut data = vec![0.0f32; region.area()];
    extract_region_into(t, batch, channel, region, policy, &mut data);
    Ok(Patch {
        rows: region.rows(),
        cols: region.cols(),
        data,
    })
}

/// Extraction into a caller-owned buffer; `dst` must hold `region.area()`
/// elements. Used by the tiled executor to avoid per-tile allocation.
pub fn extract_region_into(
    t: &Tensor,
    batch: usize,
    channel: usize,
    region: Region,
    policy: PadPolicy,
    dst: &mut [f32],
) {
    let (eh, ew) = t.shape().extent();
    let plane = t.plane(batch, channel);
    let pad = policy.value();
    let cols = region.cols();
    debug_assert!(dst.len() >= region.area());

    for (ri, h) in (region.h.lo..region.h.hi).enumerate() {
        let row = &mut dst[ri * cols..(ri + 1) * cols];
        if h < 0 || h >= eh as i64 {
            row.fill(pad);
            continue;
        }
        let src_row = &plane[h as usize * ew..(h as usize + 1) * ew];
        let w_lo = region.w.lo.max(0);
        let w_hi = region.w.hi.min(ew as i64);
        // Left padding, interior copy, right padding.
        let left = (w_lo - region.w.lo) as usize;
        row[..left].fill(pad);
        if w_lo < w_hi {
            let n = (w_hi - w_lo) as usize;
            row[left..left + n].copy_from_slice(&src_row[w_lo as usize..w_hi as usize]);
            row[left + n..].fill(pad);
        } else {
            row[left..].fill(pad);
        }
    }
}
