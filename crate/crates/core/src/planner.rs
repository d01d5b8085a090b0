//! Compile phase: detect stacks of optimizable layers, group their
//! operations into steps, pack steps into cache-fitting sequences, and pick
//! tile geometry.
//!
//! The packing rule is greedy with remove-on-overflow: tentatively add each
//! step to the open sequence, and when the scratch requirement exceeds the
//! device budget (or a policy cap, or the fused traffic model stops paying
//! for itself), take the step back out, close the sequence, and seed a new
//! one with it.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ValidatedGraph;
use crate::layers::{LayerKind, LayerSpec, OpClass, PoolGeom, PoolKind};
use crate::tensor::{PadPolicy, Region, Shape, Span};

// ---------------------------------------------------------------------------
// Device description
// ---------------------------------------------------------------------------

/// Hardware model driving sequence packing: parallel lanes cooperating on a
/// tile, and the per-tile fast-memory budget the scratch buffers must fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeviceSpec {
    pub lanes: usize,
    pub scratch_bytes: usize,
    pub element_size: usize,
    pub worker_count: usize,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec { lanes: 128, scratch_bytes: 16384, element_size: 4, worker_count: 1 }
    }
}

impl DeviceSpec {
    pub fn check(&self) -> Result<()> {
        if self.lanes < 1 {
            return Err(Error::Validation("device lanes must be >= 1".to_string()));
        }
        if self.element_size < 1 {
            return Err(Error::Validation("device element_size must be >= 1".to_string()));
        }
        if self.scratch_bytes < self.element_size {
            return Err(Error::Validation(
                "device scratch_bytes must hold at least one element".to_string(),
            ));
        }
        if self.worker_count < 1 {
            return Err(Error::Validation("device worker_count must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// File-backed device spec plus planning policy overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub lanes: usize,
    pub scratch_bytes: usize,
    pub element_size: usize,
    pub worker_count: usize,
    /// None means unrestricted.
    pub max_steps_per_sequence: Option<usize>,
    pub channels_per_tile: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        let d = DeviceSpec::default();
        DeviceConfig {
            lanes: d.lanes,
            scratch_bytes: d.scratch_bytes,
            element_size: d.element_size,
            worker_count: d.worker_count,
            max_steps_per_sequence: None,
            channels_per_tile: 1,
        }
    }
}

impl DeviceConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: DeviceConfig = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("device file: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn device(&self) -> DeviceSpec {
        DeviceSpec {
            lanes: self.lanes,
            scratch_bytes: self.scratch_bytes,
            element_size: self.element_size,
            worker_count: self.worker_count,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.device().check()?;
        if self.channels_per_tile < 1 {
            return Err(Error::Validation("channels_per_tile must be >= 1".to_string()));
        }
        if self.max_steps_per_sequence == Some(0) {
            return Err(Error::Validation(
                "max_steps_per_sequence must be >= 1 (omit for unrestricted)".to_string(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stack detection
// ---------------------------------------------------------------------------

/// One entry of the segmented graph: an opaque layer left in place, or a
/// maximal run of optimizable layers replaced by a stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Opaque(usize),
    Run(Range<usize>),
}

/// Replaces every maximal run of optimizable layers with a single stack
/// reference; runs of length one become stacks too.
pub fn detect_stacks(g: &ValidatedGraph) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut run_start: Option<usize> = None;
    for (idx, layer) in g.layers.iter().enumerate() {
        if layer.class().optimizable() {
            run_start.get_or_insert(idx);
        } else {
            if let Some(start) = run_start.take() {
                segments.push(Segment::Run(start..idx));
            }
            segments.push(Segment::Opaque(idx));
        }
    }
    if let Some(start) = run_start {
        segments.push(Segment::Run(start..g.layers.len()));
    }
    segments
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// One operation inside a step, addressed by its offset within the stack so
/// that a step plan stays valid for every instance of an identical stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOp {
    pub offset: usize,
    pub kind: LayerKind,
}

/// The pooling operation of a step, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPool {
    /// Index into the step's op list.
    pub pos: usize,
    pub kind: PoolKind,
    pub geom: PoolGeom,
}

/// A group of operations with at most one pooling op; the unit between
/// scratch-buffer swaps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub ops: Vec<StepOp>,
    pub pool: Option<StepPool>,
    pub in_extent: (usize, usize),
    pub out_extent: (usize, usize),
}

impl StepPlan {
    pub fn is_elementwise_only(&self) -> bool {
        self.pool.is_none()
    }
}

/// Greedy left-to-right grouping: every element-wise op joins the open step;
/// a pooling op joins unless the step already holds one, in which case it
/// closes the step and starts the next.
pub fn build_steps(g: &ValidatedGraph, run: Range<usize>) -> Vec<StepPlan> {
    assert!(!run.is_empty(), "stack runs are non-empty by construction");
    let mut steps = Vec::new();
    let mut ops: Vec<StepOp> = Vec::new();
    let mut pool: Option<StepPool> = None;
    let mut in_extent = g.node_input_shape(run.start).extent();
    let mut cur_extent = in_extent;

    let start = run.start;
    for node in run.clone() {
        let layer = &g.layers[node];
        let offset = node - start;
        match layer.class() {
            OpClass::Elementwise => ops.push(StepOp { offset, kind: layer.kind() }),
            OpClass::Pooling => {
                if pool.is_some() {
                    steps.push(StepPlan { ops: std::mem::take(&mut ops), pool: pool.take(), in_extent, out_extent: cur_extent });
                    in_extent = cur_extent;
                }
                let kind = match layer.kind() {
                    LayerKind::Maxpool => PoolKind::Max,
                    LayerKind::Avgpool => PoolKind::Avg,
                    _ => unreachable!("pooling class covers only pool kinds"),
                };
                ops.push(StepOp { offset, kind: layer.kind() });
                pool = Some(StepPool {
                    pos: ops.len() - 1,
                    kind,
                    geom: layer.pool_geom().expect("pooling layer carries geometry"),
                });
                cur_extent = g.shapes[node].out.extent();
            }
            OpClass::Opaque => unreachable!("stacks contain only optimizable layers"),
        }
    }
    steps.push(StepPlan { ops, pool, in_extent, out_extent: cur_extent });
    steps
}

// ---------------------------------------------------------------------------
// Backward geometry
// ---------------------------------------------------------------------------

fn backward_axis(out: Span, kernel: usize, stride: usize, padding: usize) -> Span {
    let lo = out.lo * stride as i64 - padding as i64;
    let hi = (out.hi - 1) * stride as i64 + kernel as i64 - padding as i64;
    Span::new(lo, hi)
}

/// Input region a step must read to produce `out_region`: for pooling
/// geometry (k, s, p) per axis, in_lo = out_lo*s - p and
/// in_hi = (out_hi - 1)*s + k - p (half-open); identity for pure
/// element-wise steps.
pub fn backward_geometry(out_region: Region, step: &StepPlan) -> Region {
    match &step.pool {
        None => out_region,
        Some(p) => Region {
            h: backward_axis(out_region.h, p.geom.kernel.0, p.geom.stride.0, p.geom.padding.0),
            w: backward_axis(out_region.w, p.geom.kernel.1, p.geom.stride.1, p.geom.padding.1),
        },
    }
}

/// Regions at every step boundary, composed backwards from the tile's output
/// region; index 0 is the sequence input region, index `steps.len()` the
/// output region.
pub fn sequence_regions(steps: &[StepPlan], tile_out: Region) -> Vec<Region> {
    let mut regions = vec![tile_out; steps.len() + 1];
    for i in (0..steps.len()).rev() {
        regions[i] = backward_geometry(regions[i + 1], &steps[i]);
    }
    regions
}

// ---------------------------------------------------------------------------
// Tiles and resource consumption
// ---------------------------------------------------------------------------

/// Output-space tile shape shared by all lanes, plus how many channels one
/// tile carries through the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileGeometry {
    pub th: usize,
    pub tw: usize,
    pub channels_per_tile: usize,
}

impl TileGeometry {
    pub fn outputs(&self) -> usize {
        self.th * self.tw
    }

    pub fn outputs_per_lane(&self, lanes: usize) -> f64 {
        self.outputs() as f64 / lanes as f64
    }
}

/// Scratch need at one step boundary, in elements (channels included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundaryUsage {
    pub input_elems: u64,
    pub output_elems: u64,
}

/// Two-scratch-buffer requirement of a step list under a tile geometry: the
/// worst consecutive (input + output) region pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Consumption {
    pub boundaries: Vec<BoundaryUsage>,
    pub peak_elems: u64,
    pub peak_bytes: u64,
}

/// Computes per-boundary region sizes for the nominal (unclamped) tile and
/// the peak two-buffer requirement.
pub fn resource_consumption(
    steps: &[StepPlan],
    tile: &TileGeometry,
    dev: &DeviceSpec,
) -> Consumption {
    let tile_region = Region::new(0, tile.th as i64, 0, tile.tw as i64);
    let regions = sequence_regions(steps, tile_region);
    let cpt = tile.channels_per_tile as u64;
    let boundaries: Vec<BoundaryUsage> = (0..steps.len())
        .map(|i| BoundaryUsage {
            input_elems: regions[i].area() as u64 * cpt,
            output_elems: regions[i + 1].area() as u64 * cpt,
        })
        .collect();
    let peak_elems = boundaries
        .iter()
        .map(|b| b.input_elems + b.output_elems)
        .max()
        .unwrap_or(0);
    Consumption { boundaries, peak_elems, peak_bytes: peak_elems * dev.element_size as u64 }
}

/// Starting tile: `lanes` output positions as the most-square rectangle with
/// width a multiple of 8 when the lane count allows it (16x8 for 128 lanes),
/// falling back to the most-square divisor split otherwise.
pub fn initial_tile(lanes: usize) -> (usize, usize) {
    if lanes >= 8 && lanes.is_multiple_of(8) {
        let mut w = 8;
        while (w + 8) * (w + 8) <= lanes && lanes.is_multiple_of(w + 8) {
            w += 8;
        }
        return (lanes / w, w);
    }
    let mut w = 1;
    for d in 1..=lanes {
        if d * d > lanes {
            break;
        }
        if lanes.is_multiple_of(d) {
            w = d;
        }
    }
    (lanes / w, w)
}

fn double_longer(tile: (usize, usize)) -> (usize, usize) {
    if tile.0 >= tile.1 {
        (tile.0 * 2, tile.1)
    } else {
        (tile.0, tile.1 * 2)
    }
}

fn halve_longer(tile: (usize, usize)) -> (usize, usize) {
    if tile.0 >= tile.1 {
        ((tile.0 / 2).max(1), tile.1)
    } else {
        (tile.0, (tile.1 / 2).max(1))
    }
}

/// Grows a sequence's tile from the packing tile: while doubling the number
/// of outputs per lane keeps the scratch requirement within budget, double
/// the tile's longer axis.
pub fn choose_tile(
    dev: &DeviceSpec,
    steps: &[StepPlan],
    base: TileGeometry,
) -> TileGeometry {
    let mut tile = base;
    loop {
        let (th, tw) = double_longer((tile.th, tile.tw));
        let next = TileGeometry { th, tw, channels_per_tile: tile.channels_per_tile };
        if resource_consumption(steps, &next, dev).peak_bytes <= dev.scratch_bytes as u64 {
            tile = next;
        } else {
            return tile;
        }
    }
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// An ordered bundle of steps whose combined scratch requirement fits the
/// device budget, with its tile geometry fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePlan {
    pub steps: Vec<StepPlan>,
    pub tile: TileGeometry,
    pub in_extent: (usize, usize),
    pub out_extent: (usize, usize),
    pub consumption: Consumption,
    /// Capacity of each of the two scratch buffers, in elements.
    pub scratch_elems: u64,
}

impl SequencePlan {
    /// Extraction policy for the initial tile load, keyed by the first
    /// step's pooling kind. Later pooling steps re-derive padding from
    /// coordinates, never from stored sentinel values.
    pub fn load_policy(&self) -> PadPolicy {
        match &self.steps[0].pool {
            Some(p) => p.kind.pad_policy(),
            None => PadPolicy::Zero,
        }
    }

    /// Spatial tile grid over the output extent, clamped at the edges.
    pub fn spatial_tiles(&self) -> Vec<Region> {
        let (oh, ow) = self.out_extent;
        let mut tiles = Vec::new();
        let mut h = 0;
        while h < oh {
            let h1 = (h + self.tile.th).min(oh);
            let mut w = 0;
            while w < ow {
                let w1 = (w + self.tile.tw).min(ow);
                tiles.push(Region::new(h as i64, h1 as i64, w as i64, w1 as i64));
                w = w1;
            }
            h = h1;
        }
        tiles
    }

    /// Total real elements loaded per (batch, channel) plane and the number
    /// of distinct cells covered; their difference is the overlap redundancy.
    ///
    /// Tile regions form a full product grid, so both counts factor per axis.
    pub fn plane_load_counts(&self) -> (u64, u64) {
        let pools: Vec<&StepPool> = self.steps.iter().filter_map(|s| s.pool.as_ref()).collect();
        let h_geoms: Vec<(usize, usize, usize)> = pools
            .iter()
            .map(|p| (p.geom.kernel.0, p.geom.stride.0, p.geom.padding.0))
            .collect();
        let w_geoms: Vec<(usize, usize, usize)> = pools
            .iter()
            .map(|p| (p.geom.kernel.1, p.geom.stride.1, p.geom.padding.1))
            .collect();
        let (h_total, h_union) =
            axis_load_counts(self.out_extent.0, self.tile.th, &h_geoms, self.in_extent.0);
        let (w_total, w_union) =
            axis_load_counts(self.out_extent.1, self.tile.tw, &w_geoms, self.in_extent.1);
        (h_total * w_total, h_union * w_union)
    }
}

/// Walks the tile grid along one axis, composing the load span backwards
/// through the pooling geometries; returns (sum of clamped span lengths,
/// length of their union).
fn axis_load_counts(
    extent_out: usize,
    tile_len: usize,
    geoms: &[(usize, usize, usize)],
    extent_in: usize,
) -> (u64, u64) {
    let mut total = 0u64;
    let mut intervals: Vec<(i64, i64)> = Vec::new();
    let mut lo = 0usize;
    while lo < extent_out {
        let hi = (lo + tile_len).min(extent_out);
        let mut span = Span::new(lo as i64, hi as i64);
        for &(k, s, p) in geoms.iter().rev() {
            span = backward_axis(span, k, s, p);
        }
        total += span.in_bounds_len(extent_in) as u64;
        intervals.push((span.lo.max(0), span.hi.min(extent_in as i64)));
        lo = hi;
    }
    intervals.sort_unstable();
    let mut covered = 0i64;
    let mut cur: Option<(i64, i64)> = None;
    for (a, b) in intervals {
        if b <= a {
            continue;
        }
        match cur {
            None => cur = Some((a, b)),
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                covered += cb - ca;
                cur = Some((a, b));
            }
        }
    }
    if let Some((ca, cb)) = cur {
        covered += cb - ca;
    }
    (total, covered as u64)
}

/// Per-sequence data traffic of the fused path, in elements:
/// overlap-counted real input loads and exclusive output writes.
pub fn sequence_data_elems(seq: &SequencePlan, batch: usize, channels: usize) -> (u64, u64) {
    let (loaded, _) = seq.plane_load_counts();
    let planes = (batch * channels) as u64;
    let written = (seq.out_extent.0 * seq.out_extent.1) as u64;
    (loaded * planes, written * planes)
}

/// Breadth-first data traffic of the same step list, in elements: every op
/// reads its full input tensor and writes its full output tensor.
pub fn steps_breadth_first_data_elems(steps: &[StepPlan], batch: usize, channels: usize) -> (u64, u64) {
    let planes = (batch * channels) as u64;
    let mut read = 0u64;
    let mut written = 0u64;
    for step in steps {
        for (i, _op) in step.ops.iter().enumerate() {
            let before_pool = match &step.pool {
                Some(p) => i <= p.pos,
                None => true,
            };
            let in_area = if before_pool { step.in_extent } else { step.out_extent };
            let out_area = match &step.pool {
                Some(p) if i < p.pos => step.in_extent,
                _ => step.out_extent,
            };
            read += (in_area.0 * in_area.1) as u64 * planes;
            written += (out_area.0 * out_area.1) as u64 * planes;
        }
    }
    (read, written)
}

struct Packer<'a> {
    dev: &'a DeviceSpec,
    base_tile: TileGeometry,
    max_steps: Option<usize>,
    batch: usize,
    channels: usize,
}

impl<'a> Packer<'a> {
    fn fits(&self, steps: &[StepPlan], in_extent: (usize, usize), out_extent: (usize, usize)) -> bool {
        if let Some(max) = self.max_steps {
            if steps.len() > max {
                return false;
            }
        }
        let usage = resource_consumption(steps, &self.base_tile, self.dev);
        if usage.peak_bytes > self.dev.scratch_bytes as u64 {
            return false;
        }
        // A fused sequence must not move more data than running its layers
        // breadth-first would; single steps are atomic and exempt.
        if steps.len() >= 2 {
            let draft = self.sequence(steps.to_vec(), self.base_tile, in_extent, out_extent);
            let (df_r, df_w) = sequence_data_elems(&draft, self.batch, self.channels);
            let (bf_r, bf_w) = steps_breadth_first_data_elems(steps, self.batch, self.channels);
            if df_r + df_w > bf_r + bf_w {
                return false;
            }
        }
        true
    }

    fn sequence(
        &self,
        steps: Vec<StepPlan>,
        tile: TileGeometry,
        in_extent: (usize, usize),
        out_extent: (usize, usize),
    ) -> SequencePlan {
        let consumption = resource_consumption(&steps, &tile, self.dev);
        let tile_region = Region::new(0, tile.th as i64, 0, tile.tw as i64);
        let scratch_elems = sequence_regions(&steps, tile_region)
            .iter()
            .map(|r| r.area() as u64)
            .max()
            .unwrap_or(0)
            * tile.channels_per_tile as u64;
        SequencePlan { steps, tile, in_extent, out_extent, consumption, scratch_elems }
    }

    fn finish(&self, steps: Vec<StepPlan>) -> SequencePlan {
        let in_extent = steps.first().expect("non-empty sequence").in_extent;
        let out_extent = steps.last().expect("non-empty sequence").out_extent;
        let tile = TileGeometry {
            th: self.base_tile.th,
            tw: self.base_tile.tw,
            channels_per_tile: self.base_tile.channels_per_tile,
        };
        let grown = choose_tile(self.dev, &steps, tile);
        self.sequence(steps, grown, in_extent, out_extent)
    }

    /// A step whose requirement exceeds the budget even alone gets a
    /// sequence of its own with the tile halved until it fits.
    fn lone_oversized(&self, step: StepPlan) -> Result<SequencePlan> {
        let steps = vec![step];
        let mut tile = self.base_tile;
        loop {
            let usage = resource_consumption(&steps, &tile, self.dev);
            if usage.peak_bytes <= self.dev.scratch_bytes as u64 {
                let in_extent = steps[0].in_extent;
                let out_extent = steps[0].out_extent;
                let grown = choose_tile(self.dev, &steps, tile);
                return Ok(self.sequence(steps, grown, in_extent, out_extent));
            }
            if (tile.th, tile.tw) == (1, 1) {
                let step = &steps[0];
                let kinds: Vec<&str> = step.ops.iter().map(|o| o.kind.name()).collect();
                return Err(Error::Planning(format!(
                    "step [{}] needs at least {} bytes of scratch at a 1x1 tile, budget is {}",
                    kinds.join(","),
                    usage.peak_bytes,
                    self.dev.scratch_bytes
                )));
            }
            let (th, tw) = halve_longer((tile.th, tile.tw));
            tile = TileGeometry { th, tw, channels_per_tile: tile.channels_per_tile };
        }
    }
}

/// Greedy accumulation of steps into budget-fitting sequences.
pub fn pack_sequences(
    steps: &[StepPlan],
    dev: &DeviceSpec,
    max_steps: Option<usize>,
    channels_per_tile: usize,
    batch: usize,
    channels: usize,
) -> Result<Vec<SequencePlan>> {
    let (th, tw) = initial_tile(dev.lanes);
    let packer = Packer {
        dev,
        base_tile: TileGeometry { th, tw, channels_per_tile },
        max_steps,
        batch,
        channels,
    };

    let mut sequences = Vec::new();
    let mut open: Vec<StepPlan> = Vec::new();
    for step in steps {
        open.push(step.clone());
        let in_extent = open[0].in_extent;
        let out_extent = open.last().unwrap().out_extent;
        if packer.fits(&open, in_extent, out_extent) {
            continue;
        }
        let overflow = open.pop().expect("just pushed");
        if open.is_empty() {
            sequences.push(packer.lone_oversized(overflow)?);
        } else {
            sequences.push(packer.finish(std::mem::take(&mut open)));
            open.push(overflow);
            let solo_in = open[0].in_extent;
            let solo_out = open[0].out_extent;
            if !packer.fits(&open, solo_in, solo_out) {
                let lone = open.pop().expect("just pushed");
                sequences.push(packer.lone_oversized(lone)?);
            }
        }
    }
    if !open.is_empty() {
        sequences.push(packer.finish(open));
    }
    Ok(sequences)
}

// ---------------------------------------------------------------------------
// Whole-network planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum OpKey {
    Elementwise(LayerKind, usize),
    Pool(PoolKind, PoolGeom),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TemplateKey {
    input: (usize, usize, usize, usize),
    ops: Vec<OpKey>,
}

fn template_key(g: &ValidatedGraph, run: &Range<usize>) -> TemplateKey {
    let shape = g.node_input_shape(run.start);
    let ops = run
        .clone()
        .map(|node| match &g.layers[node] {
            LayerSpec::Relu => OpKey::Elementwise(LayerKind::Relu, 0),
            LayerSpec::Batchnorm { gamma, .. } => {
                OpKey::Elementwise(LayerKind::Batchnorm, gamma.values.len())
            }
            LayerSpec::Maxpool(geom) => OpKey::Pool(PoolKind::Max, *geom),
            LayerSpec::Avgpool(geom) => OpKey::Pool(PoolKind::Avg, *geom),
            other => unreachable!("opaque layer {:?} inside a stack", other.kind()),
        })
        .collect();
    TemplateKey { input: (shape.n, shape.c, shape.h, shape.w), ops }
}

/// Compiled description of one stack structure; identical stacks share one
/// template and bind their own parameters at execution time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackTemplate {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub sequences: Vec<SequencePlan>,
    pub structural_hash: u64,
}

/// One scheduled unit: an opaque layer run breadth-first, or a stack
/// instance expanded through a shared template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanItem {
    Opaque { node: usize },
    Stack { template: usize, nodes: Range<usize> },
}

/// Schedulable artifact of planning: the interleaving of opaque layers and
/// stacks, with per-stack sequence templates.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub graph: Arc<ValidatedGraph>,
    pub device: DeviceSpec,
    pub channels_per_tile: usize,
    pub max_steps_per_sequence: Option<usize>,
    pub items: Vec<PlanItem>,
    pub templates: Vec<StackTemplate>,
}

/// Compiles a validated graph against a device: detect stacks, group into
/// steps, pack into sequences, choose tiles. Deterministic for a fixed
/// (graph, device) pair.
pub fn plan(graph: Arc<ValidatedGraph>, cfg: &DeviceConfig) -> Result<ExecutionPlan> {
    cfg.check()?;
    let dev = cfg.device();
    let mut items = Vec::new();
    let mut templates: Vec<StackTemplate> = Vec::new();
    let mut known: HashMap<TemplateKey, usize> = HashMap::new();

    for segment in detect_stacks(&graph) {
        match segment {
            Segment::Opaque(node) => items.push(PlanItem::Opaque { node }),
            Segment::Run(run) => {
                let key = template_key(&graph, &run);
                let template = match known.get(&key) {
                    Some(&idx) => idx,
                    None => {
                        let input_shape = graph.node_input_shape(run.start);
                        let output_shape = graph.shapes[run.end - 1].out;
                        let steps = build_steps(&graph, run.clone());
                        let sequences = pack_sequences(
                            &steps,
                            &dev,
                            cfg.max_steps_per_sequence,
                            cfg.channels_per_tile,
                            input_shape.n,
                            input_shape.c,
                        )?;
                        debug_assert!(sequences
                            .iter()
                            .all(|s| s.consumption.peak_bytes <= dev.scratch_bytes as u64));
                        let mut hasher = DefaultHasher::new();
                        key.hash(&mut hasher);
                        let idx = templates.len();
                        templates.push(StackTemplate {
                            input_shape,
                            output_shape,
                            sequences,
                            structural_hash: hasher.finish(),
                        });
                        known.insert(key, idx);
                        idx
                    }
                };
                items.push(PlanItem::Stack { template, nodes: run });
            }
        }
    }

    Ok(ExecutionPlan {
        graph,
        device: dev,
        channels_per_tile: cfg.channels_per_tile,
        max_steps_per_sequence: cfg.max_steps_per_sequence,
        items,
        templates,
    })
}

// ---------------------------------------------------------------------------
// Plan report
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct PlanReport {
    pub device: DeviceSpec,
    pub channels_per_tile: usize,
    pub max_steps_per_sequence: Option<usize>,
    pub items: Vec<ItemReport>,
    pub stacks: Vec<StackReport>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemReport {
    Opaque { node: usize, kind: String },
    Stack { template: usize, first_node: usize, last_node: usize },
}

#[derive(Debug, Serialize)]
pub struct StackReport {
    pub template: usize,
    pub instances: usize,
    pub layer_count: usize,
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 4],
    pub sequences: Vec<SequenceReport>,
}

#[derive(Debug, Serialize)]
pub struct SequenceReport {
    pub steps: Vec<Vec<String>>,
    pub tile: [usize; 2],
    pub channels_per_tile: usize,
    pub outputs_per_lane: f64,
    pub consumption_elems: u64,
    pub consumption_bytes: u64,
    pub budget_headroom_bytes: i64,
}

impl ExecutionPlan {
    pub fn report(&self) -> PlanReport {
        let items = self
            .items
            .iter()
            .map(|item| match item {
                PlanItem::Opaque { node } => ItemReport::Opaque {
                    node: *node,
                    kind: self.graph.layers[*node].kind().name().to_string(),
                },
                PlanItem::Stack { template, nodes } => ItemReport::Stack {
                    template: *template,
                    first_node: nodes.start,
                    last_node: nodes.end - 1,
                },
            })
            .collect();
        let stacks = self
            .templates
            .iter()
            .enumerate()
            .map(|(idx, t)| {
                let instances = self
                    .items
                    .iter()
                    .filter(|i| matches!(i, PlanItem::Stack { template, .. } if *template == idx))
                    .count();
                let layer_count = t.sequences.iter().map(|s| s.steps.iter().map(|st| st.ops.len()).sum::<usize>()).sum();
                StackReport {
                    template: idx,
                    instances,
                    layer_count,
                    input_shape: t.input_shape.dims(),
                    output_shape: t.output_shape.dims(),
                    sequences: t
                        .sequences
                        .iter()
                        .map(|s| SequenceReport {
                            steps: s
                                .steps
                                .iter()
                                .map(|st| st.ops.iter().map(|o| o.kind.name().to_string()).collect())
                                .collect(),
                            tile: [s.tile.th, s.tile.tw],
                            channels_per_tile: s.tile.channels_per_tile,
                            outputs_per_lane: s.tile.outputs_per_lane(self.device.lanes),
                            consumption_elems: s.consumption.peak_elems,
                            consumption_bytes: s.consumption.peak_bytes,
                            budget_headroom_bytes: self.device.scratch_bytes as i64
                                - s.consumption.peak_bytes as i64,
                        })
                        .collect(),
                }
            })
            .collect();
        PlanReport {
            device: self.device,
            channels_per_tile: self.channels_per_tile,
            max_steps_per_sequence: self.max_steps_per_sequence,
            items,
            stacks,
        }
    }
}

impl std::fmt::Display for PlanReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "device: lanes={} scratch={}B element={}B workers={}",
            self.device.lanes, self.device.scratch_bytes, self.device.element_size, self.device.worker_count
        )?;
        writeln!(
            f,
            "policy: max_steps_per_sequence={} channels_per_tile={}",
            self.max_steps_per_sequence.map_or("unrestricted".to_string(), |k| k.to_string()),
            self.channels_per_tile
        )?;
        writeln!(f, "schedule:")?;
        for item in &self.items {
            match item {
                ItemReport::Opaque { node, kind } => {
                    writeln!(f, "  node {node}: {kind} (breadth-first)")?
                }
                ItemReport::Stack { template, first_node, last_node } => {
                    writeln!(f, "  nodes {first_node}..={last_node}: stack (template {template})")?
                }
            }
        }
        for stack in &self.stacks {
            writeln!(
                f,
                "stack template {} ({} instance{}), {} layers, {:?} -> {:?}:",
                stack.template,
                stack.instances,
                if stack.instances == 1 { "" } else { "s" },
                stack.layer_count,
                stack.input_shape,
                stack.output_shape
            )?;
            for (i, seq) in stack.sequences.iter().enumerate() {
                writeln!(
                    f,
                    "  sequence {i}: tile {}x{} x{}ch, {:.2} outputs/lane, {} elems = {} bytes (headroom {} bytes)",
                    seq.tile[0],
                    seq.tile[1],
                    seq.channels_per_tile,
                    seq.outputs_per_lane,
                    seq.consumption_elems,
                    seq.consumption_bytes,
                    seq.budget_headroom_bytes
                )?;
                for (j, ops) in seq.steps.iter().enumerate() {
                    writeln!(f, "    step {j}: {}", ops.join(" / "))?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{builtin_blocks, validate, NetworkGraph};
    use crate::layers::{ParamTensor, ParamVec};
    use crate::tensor::prng_fill;

    fn validated(g: NetworkGraph) -> ValidatedGraph {
        validate(g).unwrap()
    }

    fn elementwise_chain(depth: usize, shape: Shape) -> ValidatedGraph {
        let layers = (0..depth).map(|_| LayerSpec::Relu).collect();
        validated(NetworkGraph { input_shape: shape, layers })
    }

    fn conv_layer(c_in: usize, c_out: usize, seed: u64) -> LayerSpec {
        LayerSpec::Conv2d {
            weights: ParamTensor::inline(prng_fill(seed, Shape::new(c_out, c_in, 3, 3)).unwrap()),
            bias: ParamVec::inline(vec![0.0; c_out]),
            stride: (1, 1),
            padding: (1, 1),
        }
    }

    fn bn_layer(c: usize, seed: u64) -> LayerSpec {
        let t = |s| prng_fill(s, Shape::new(1, 1, 1, c)).unwrap().data().to_vec();
        LayerSpec::Batchnorm {
            gamma: ParamVec::inline(t(seed)),
            beta: ParamVec::inline(t(seed + 1)),
            running_mean: ParamVec::inline(t(seed + 2)),
            running_var: ParamVec::inline(t(seed + 3).iter().map(|v| v.abs() + 0.1).collect()),
            eps: 1e-5,
        }
    }

    fn pool(kind: LayerKind, k: usize, s: usize, p: usize) -> LayerSpec {
        let g = PoolGeom::new((k, k), (s, s), (p, p));
        match kind {
            LayerKind::Maxpool => LayerSpec::Maxpool(g),
            LayerKind::Avgpool => LayerSpec::Avgpool(g),
            _ => panic!(),
        }
    }

    #[test]
    fn detect_stacks_leaves_opaque_layers_untouched() {
        let g = validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 8, 8),
            layers: vec![
                conv_layer(2, 2, 1),
                bn_layer(2, 5),
                LayerSpec::Relu,
                pool(LayerKind::Maxpool, 3, 1, 1),
                conv_layer(2, 2, 2),
            ],
        });
        let segs = detect_stacks(&g);
        assert_eq!(
            segs,
            vec![Segment::Opaque(0), Segment::Run(1..4), Segment::Opaque(4)]
        );
    }

    #[test]
    fn detect_stacks_all_opaque_network_has_zero_stacks() {
        let g = validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 8, 8),
            layers: vec![conv_layer(2, 3, 1), conv_layer(3, 2, 2)],
        });
        let segs = detect_stacks(&g);
        assert!(segs.iter().all(|s| matches!(s, Segment::Opaque(_))));
        assert_eq!(segs.len(), 2);
    }

    #[test]
    fn detect_stacks_forty_blocks_collapse_to_one_run() {
        let g = validated(builtin_blocks(40, Shape::new(1, 4, 32, 32), 3));
        let segs = detect_stacks(&g);
        assert_eq!(segs, vec![Segment::Run(0..120)]);
        // Brute-force cross-check: no opaque layer anywhere.
        assert!(g.layers.iter().all(|l| l.class().optimizable()));
    }

    #[test]
    fn singleton_runs_still_become_stacks() {
        let g = validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 8, 8),
            layers: vec![conv_layer(2, 2, 1), LayerSpec::Relu, conv_layer(2, 2, 2)],
        });
        let segs = detect_stacks(&g);
        assert_eq!(
            segs,
            vec![Segment::Opaque(0), Segment::Run(1..2), Segment::Opaque(2)]
        );
    }

    #[test]
    fn build_steps_groups_at_second_pooling_op() {
        let g = validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 16, 16),
            layers: vec![
                pool(LayerKind::Maxpool, 3, 1, 1),
                bn_layer(2, 9),
                LayerSpec::Relu,
                pool(LayerKind::Avgpool, 3, 1, 1),
                bn_layer(2, 13),
            ],
        });
        let steps = build_steps(&g, 0..5);
        assert_eq!(steps.len(), 2);
        let kinds = |s: &StepPlan| s.ops.iter().map(|o| o.kind).collect::<Vec<_>>();
        assert_eq!(kinds(&steps[0]), [LayerKind::Maxpool, LayerKind::Batchnorm, LayerKind::Relu]);
        assert_eq!(kinds(&steps[1]), [LayerKind::Avgpool, LayerKind::Batchnorm]);
        assert_eq!(steps[0].pool.unwrap().pos, 0);
        assert_eq!(steps[1].pool.unwrap().kind, PoolKind::Avg);
    }

    #[test]
    fn build_steps_single_relu_is_one_step() {
        let g = elementwise_chain(1, Shape::new(1, 1, 4, 4));
        let steps = build_steps(&g, 0..1);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].ops.len(), 1);
        assert!(steps[0].is_elementwise_only());
    }

    // Independent grouping oracle for the greedy rule.
    fn oracle_group(kinds: &[LayerKind]) -> Vec<Vec<LayerKind>> {
        let mut steps: Vec<Vec<LayerKind>> = vec![Vec::new()];
        let mut has_pool = false;
        for &k in kinds {
            let pooling = k.class() == OpClass::Pooling;
            if pooling && has_pool {
                steps.push(Vec::new());
                has_pool = false;
            }
            steps.last_mut().unwrap().push(k);
            has_pool |= pooling;
        }
        steps
    }

    #[test]
    fn build_steps_matches_exhaustive_grouping_oracle() {
        // Leading element-wise ops join the first pooling step; boundaries
        // fall exactly where a second pooling op would join a step that
        // already holds one.
        let g = validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 16, 16),
            layers: vec![
                bn_layer(2, 1),
                LayerSpec::Relu,
                pool(LayerKind::Maxpool, 3, 1, 1),
                bn_layer(2, 5),
                LayerSpec::Relu,
                pool(LayerKind::Maxpool, 3, 1, 1),
            ],
        });
        let steps = build_steps(&g, 0..6);
        let got: Vec<Vec<LayerKind>> = steps
            .iter()
            .map(|s| s.ops.iter().map(|o| o.kind).collect())
            .collect();
        let kinds: Vec<LayerKind> = g.layers.iter().map(|l| l.kind()).collect();
        assert_eq!(got, oracle_group(&kinds));
        assert_eq!(steps.len(), 2); // == number of pooling ops
    }

    #[test]
    fn step_count_equals_pooling_count_for_block_stacks() {
        for depth in [1, 3, 7, 16] {
            let g = validated(builtin_blocks(depth, Shape::new(1, 4, 32, 32), 1));
            let steps = build_steps(&g, 0..3 * depth);
            assert_eq!(steps.len(), depth);
            assert!(steps.iter().all(|s| s.ops.len() == 3));
        }
    }

    #[test]
    fn backward_geometry_identity_for_elementwise_steps() {
        let step = StepPlan { ops: vec![], pool: None, in_extent: (8, 8), out_extent: (8, 8) };
        let r = Region::new(0, 8, 0, 8);
        assert_eq!(backward_geometry(r, &step), r);
    }

    #[test]
    fn backward_geometry_formula_for_3x3_s1_p1() {
        let step = StepPlan {
            ops: vec![],
            pool: Some(StepPool {
                pos: 0,
                kind: PoolKind::Max,
                geom: PoolGeom::new((3, 3), (1, 1), (1, 1)),
            }),
            in_extent: (8, 8),
            out_extent: (8, 8),
        };
        let r = backward_geometry(Region::new(0, 8, 0, 8), &step);
        assert_eq!(r, Region::new(-1, 9, -1, 9));
    }

    #[test]
    fn backward_geometry_matches_window_enumeration_oracle() {
        // Oracle: bounding box over every output cell's window.
        for (k, s, p) in [(2usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1), (4, 3, 2), (2, 3, 1)] {
            let step = StepPlan {
                ops: vec![],
                pool: Some(StepPool {
                    pos: 0,
                    kind: PoolKind::Max,
                    geom: PoolGeom::new((k, k), (s, s), (p, p)),
                }),
                in_extent: (64, 64),
                out_extent: (64, 64),
            };
            for lo in 0..4i64 {
                for len in 1..5i64 {
                    let out = Region::new(lo, lo + len, 2 * lo, 2 * lo + len);
                    let got = backward_geometry(out, &step);
                    let mut h_min = i64::MAX;
                    let mut h_max = i64::MIN;
                    let mut w_min = i64::MAX;
                    let mut w_max = i64::MIN;
                    for oh in out.h.lo..out.h.hi {
                        for ow in out.w.lo..out.w.hi {
                            h_min = h_min.min(oh * s as i64 - p as i64);
                            h_max = h_max.max(oh * s as i64 - p as i64 + k as i64);
                            w_min = w_min.min(ow * s as i64 - p as i64);
                            w_max = w_max.max(ow * s as i64 - p as i64 + k as i64);
                        }
                    }
                    assert_eq!(got, Region::new(h_min, h_max, w_min, w_max));
                }
            }
        }
    }

    #[test]
    fn stacked_3x3_steps_grow_regions_by_two_per_step() {
        let step = |_: usize| StepPlan {
            ops: vec![],
            pool: Some(StepPool {
                pos: 0,
                kind: PoolKind::Max,
                geom: PoolGeom::new((3, 3), (1, 1), (1, 1)),
            }),
            in_extent: (32, 32),
            out_extent: (32, 32),
        };
        for n in 1..6 {
            let steps: Vec<StepPlan> = (0..n).map(step).collect();
            let regions = sequence_regions(&steps, Region::new(0, 7, 0, 7));
            assert_eq!(regions[0].rows(), 7 + 2 * n);
            assert_eq!(regions[0].cols(), 7 + 2 * n);
            // Repeated single-step composition gives the same answer.
            let mut r = Region::new(0, 7, 0, 7);
            for s in steps.iter().rev() {
                r = backward_geometry(r, s);
            }
            assert_eq!(r, regions[0]);
        }
    }

    #[test]
    fn resource_consumption_reproduces_worked_example() {
        // One non-overlapping 3x3 pooling step, 128-position tile, 32
        // channels: 128*32 output elements, 128*3*3*32 input elements.
        let step = StepPlan {
            ops: vec![StepOp { offset: 0, kind: LayerKind::Maxpool }],
            pool: Some(StepPool {
                pos: 0,
                kind: PoolKind::Max,
                geom: PoolGeom::new((3, 3), (3, 3), (0, 0)),
            }),
            in_extent: (48, 24),
            out_extent: (16, 8),
        };
        let tile = TileGeometry { th: 16, tw: 8, channels_per_tile: 32 };
        let usage = resource_consumption(&[step], &tile, &DeviceSpec::default());
        assert_eq!(usage.boundaries.len(), 1);
        assert_eq!(usage.boundaries[0].output_elems, 4096);
        assert_eq!(usage.boundaries[0].input_elems, 36864);
    }

    #[test]
    fn resource_consumption_identity_step() {
        let step = StepPlan {
            ops: vec![StepOp { offset: 0, kind: LayerKind::Relu }],
            pool: None,
            in_extent: (16, 8),
            out_extent: (16, 8),
        };
        let tile = TileGeometry { th: 16, tw: 8, channels_per_tile: 1 };
        let usage = resource_consumption(&[step], &tile, &DeviceSpec::default());
        assert_eq!(usage.peak_elems, 256);
        assert_eq!(usage.peak_bytes, 1024);
    }

    #[test]
    fn resource_consumption_two_stacked_padded_steps() {
        let step = || StepPlan {
            ops: vec![StepOp { offset: 0, kind: LayerKind::Maxpool }],
            pool: Some(StepPool {
                pos: 0,
                kind: PoolKind::Max,
                geom: PoolGeom::new((3, 3), (1, 1), (1, 1)),
            }),
            in_extent: (32, 32),
            out_extent: (32, 32),
        };
        let tile = TileGeometry { th: 16, tw: 8, channels_per_tile: 1 };
        let usage = resource_consumption(&[step(), step()], &tile, &DeviceSpec::default());
        assert_eq!(usage.boundaries[0].input_elems, 240); // 20x12
        assert_eq!(usage.boundaries[0].output_elems, 180); // 18x10
        assert_eq!(usage.boundaries[1].input_elems, 180);
        assert_eq!(usage.boundaries[1].output_elems, 128); // 16x8
        assert_eq!(usage.peak_elems, 420);
        assert_eq!(usage.peak_bytes, 1680);
    }

    #[test]
    fn initial_tile_shapes() {
        assert_eq!(initial_tile(128), (16, 8));
        assert_eq!(initial_tile(1), (1, 1));
        assert_eq!(initial_tile(64), (8, 8));
        assert_eq!(initial_tile(256), (16, 16));
    }

    #[test]
    fn choose_tile_grows_elementwise_sequence_to_sixteen_outputs_per_lane() {
        // 2*T*4 <= 16384 caps T at 2048 outputs = 16 per lane.
        let step = StepPlan {
            ops: vec![StepOp { offset: 0, kind: LayerKind::Relu }],
            pool: None,
            in_extent: (4096, 4096),
            out_extent: (4096, 4096),
        };
        let dev = DeviceSpec::default();
        let base = TileGeometry { th: 16, tw: 8, channels_per_tile: 1 };
        let tile = choose_tile(&dev, &[step], base);
        assert_eq!(tile.outputs(), 2048);
        assert_eq!(tile.outputs_per_lane(dev.lanes), 16.0);
    }

    #[test]
    fn elementwise_only_stacks_pack_into_one_sequence_regardless_of_depth() {
        for depth in [1, 5, 20, 40] {
            let g = elementwise_chain(depth, Shape::new(1, 1, 64, 64));
            let steps = build_steps(&g, 0..depth);
            let seqs =
                pack_sequences(&steps, &DeviceSpec::default(), None, 1, 1, 1).unwrap();
            assert_eq!(seqs.len(), 1);
            assert_eq!(seqs[0].steps.len(), 1);
            assert_eq!(seqs[0].steps[0].ops.len(), depth);
        }
    }

    #[test]
    fn huge_budget_always_yields_one_sequence() {
        let g = validated(builtin_blocks(40, Shape::new(1, 4, 32, 32), 3));
        let steps = build_steps(&g, 0..120);
        let dev = DeviceSpec { scratch_bytes: 1 << 30, ..DeviceSpec::default() };
        let seqs = pack_sequences(&steps, &dev, None, 1, 1, 4).unwrap();
        assert_eq!(seqs.len(), 1);
    }

    #[test]
    fn block_sequence_boundaries_match_closed_form() {
        // Oracle: a 16x8 tile needs (16+2n)(8+2n) + (16+2(n-1))(8+2(n-1))
        // elements after n padded 3x3/1/1 steps; a sequence closes when that
        // first exceeds the budget.
        let oracle_counts = |depth: usize, budget: u64| -> usize {
            let grown = |n: u64| (16 + 2 * n) * (8 + 2 * n);
            let mut seqs = 1;
            let mut n = 0u64;
            for _ in 0..depth {
                if (grown(n + 1) + grown(n)) * 4 <= budget {
                    n += 1;
                } else {
                    seqs += 1;
                    n = 1;
                }
            }
            seqs
        };
        let dev = DeviceSpec::default();
        for depth in [1, 10, 17, 18, 30, 34, 35, 40] {
            let g = validated(builtin_blocks(depth, Shape::new(1, 4, 32, 32), 7));
            let steps = build_steps(&g, 0..3 * depth);
            let seqs = pack_sequences(&steps, &dev, None, 1, 1, 4).unwrap();
            assert_eq!(
                seqs.len(),
                oracle_counts(depth, dev.scratch_bytes as u64),
                "depth {depth}"
            );
            for s in &seqs {
                assert!(s.consumption.peak_bytes <= dev.scratch_bytes as u64);
            }
        }
    }

    #[test]
    fn max_steps_policy_splits_by_ceiling() {
        let g = validated(builtin_blocks(16, Shape::new(1, 4, 32, 32), 7));
        let steps = build_steps(&g, 0..48);
        let dev = DeviceSpec::default();
        let seqs = pack_sequences(&steps, &dev, Some(5), 1, 1, 4).unwrap();
        assert_eq!(seqs.len(), 4); // ceil(16 / 5)
        let one_step = pack_sequences(&steps, &dev, Some(1), 1, 1, 4).unwrap();
        assert_eq!(one_step.len(), 16);
    }

    #[test]
    fn oversized_single_step_shrinks_its_tile() {
        // 32 channels per tile blow the budget at 16x8 for a padded pool.
        let g = validated(builtin_blocks(1, Shape::new(1, 32, 64, 64), 7));
        let steps = build_steps(&g, 0..3);
        let dev = DeviceSpec::default();
        let seqs = pack_sequences(&steps, &dev, None, 32, 1, 32).unwrap();
        assert_eq!(seqs.len(), 1);
        let tile = seqs[0].tile;
        assert!(tile.outputs() < 128, "tile {tile:?} should have shrunk");
        assert!(seqs[0].consumption.peak_bytes <= dev.scratch_bytes as u64);
    }

    #[test]
    fn unfittable_step_names_itself_and_its_requirement() {
        let g = validated(builtin_blocks(1, Shape::new(1, 512, 64, 64), 7));
        let steps = build_steps(&g, 0..3);
        let dev = DeviceSpec { scratch_bytes: 64, ..DeviceSpec::default() };
        let err = pack_sequences(&steps, &dev, None, 512, 1, 512).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("maxpool"), "{msg}");
        assert!(msg.contains("bytes"), "{msg}");
    }

    #[test]
    fn plan_interleaves_opaque_and_stack_items() {
        let g = Arc::new(validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 8, 8),
            layers: vec![conv_layer(2, 2, 1), bn_layer(2, 5), LayerSpec::Relu],
        }));
        let plan = plan(g, &DeviceConfig::default()).unwrap();
        assert_eq!(plan.items.len(), 2);
        assert!(matches!(plan.items[0], PlanItem::Opaque { node: 0 }));
        match &plan.items[1] {
            PlanItem::Stack { template, nodes } => {
                assert_eq!(*template, 0);
                assert_eq!(*nodes, 1..3);
            }
            other => panic!("expected stack, got {other:?}"),
        }
        let t = &plan.templates[0];
        assert_eq!(t.sequences.len(), 1);
        assert_eq!(t.sequences[0].steps.len(), 1);
        assert_eq!(t.sequences[0].steps[0].ops.len(), 2);
    }

    #[test]
    fn identical_stacks_share_one_template() {
        let g = Arc::new(validated(NetworkGraph {
            input_shape: Shape::new(1, 2, 8, 8),
            layers: vec![
                bn_layer(2, 5),
                LayerSpec::Relu,
                conv_layer(2, 2, 1),
                bn_layer(2, 50), // different values, same structure
                LayerSpec::Relu,
            ],
        }));
        let plan = plan(g, &DeviceConfig::default()).unwrap();
        assert_eq!(plan.templates.len(), 1);
        let stacks: Vec<usize> = plan
            .items
            .iter()
            .filter_map(|i| match i {
                PlanItem::Stack { template, .. } => Some(*template),
                _ => None,
            })
            .collect();
        assert_eq!(stacks, vec![0, 0]);
    }

    #[test]
    fn twenty_layer_elementwise_chain_is_one_sequence_one_step() {
        let g = Arc::new(elementwise_chain(20, Shape::new(1, 1, 32, 32)));
        let plan = plan(g, &DeviceConfig::default()).unwrap();
        assert_eq!(plan.templates.len(), 1);
        let seqs = &plan.templates[0].sequences;
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].steps.len(), 1);
        assert_eq!(seqs[0].steps[0].ops.len(), 20);
    }

    #[test]
    fn shrinking_budget_never_decreases_sequence_count() {
        let g = validated(builtin_blocks(24, Shape::new(1, 4, 32, 32), 7));
        let steps = build_steps(&g, 0..72);
        let mut last = 0usize;
        for shift in (6..=20).rev() {
            let dev = DeviceSpec { scratch_bytes: 1 << shift, ..DeviceSpec::default() };
            match pack_sequences(&steps, &dev, None, 1, 1, 4) {
                Ok(seqs) => {
                    assert!(seqs.len() >= last, "budget {} decreased splits", 1 << shift);
                    last = seqs.len();
                }
                Err(_) => break, // budget below the 1x1-tile floor
            }
        }
    }

    #[test]
    fn packed_sequences_union_equals_stack_ops_in_order() {
        let g = validated(builtin_blocks(20, Shape::new(1, 4, 32, 32), 7));
        let steps = build_steps(&g, 0..60);
        let seqs = pack_sequences(&steps, &DeviceSpec::default(), None, 1, 1, 4).unwrap();
        let mut offsets = Vec::new();
        for seq in &seqs {
            for step in &seq.steps {
                assert!(step.pool.iter().count() <= 1);
                for op in &step.ops {
                    offsets.push(op.offset);
                }
            }
        }
        assert_eq!(offsets, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn device_config_parses_with_defaults_and_rejects_unknown_fields() {
        let cfg = DeviceConfig::from_json(r#"{"lanes": 64, "scratch_bytes": 8192}"#).unwrap();
        assert_eq!(cfg.lanes, 64);
        assert_eq!(cfg.element_size, 4);
        assert!(DeviceConfig::from_json(r#"{"lanee": 64}"#).is_err());
        assert!(DeviceConfig::from_json(r#"{"lanes": 0}"#).is_err());
    }

    #[test]
    fn plan_report_text_is_deterministic() {
        let g = Arc::new(validated(builtin_blocks(4, Shape::new(1, 4, 32, 32), 7)));
        let p1 = plan(g.clone(), &DeviceConfig::default()).unwrap();
        let p2 = plan(g, &DeviceConfig::default()).unwrap();
        assert_eq!(p1.report().to_string(), p2.report().to_string());
        assert!(p1.report().to_string().contains("sequence 0"));
    }
}
