//! Execution phase: breadth-first reference runner, depth-first tiled
//! runner, and the main-memory traffic model both are charged against.
//!
//! The two runners share every arithmetic primitive with the layer kernels,
//! so their outputs are bit-identical; the traffic counters differ, which is
//! the whole point.

use std::ops::Range;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::ValidatedGraph;
use crate::layers::{
    self, bn_slice, bn_std, relu_slice, LayerSpec, PlaneSrc, PoolGeom,
};
use crate::planner::{
    sequence_regions, ExecutionPlan, PlanItem, SequencePlan, StepOp,
};
use crate::tensor::{extract_region_into, prng_fill, Region, Shape, Tensor};

// ---------------------------------------------------------------------------
// Traffic accounting
// ---------------------------------------------------------------------------

/// Bytes and operations charged to main memory for one phase or run.
/// Parameter reads are tracked apart from data so traffic-law comparisons
/// can exclude the (deliberately pessimistic) per-tile parameter charges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficCounters {
    pub data_bytes_read: u64,
    pub data_bytes_written: u64,
    pub param_bytes_read: u64,
    /// Overlap re-reads: loaded elements beyond one copy of each distinct
    /// input cell. Zero for breadth-first runs and non-overlapping tilings.
    pub redundant_elements: u64,
    /// Fused multiply/compare/add tally: one unit per element an op visits,
    /// times the window/feature size for aggregating ops.
    pub op_count: u64,
}

impl TrafficCounters {
    pub fn add(&mut self, other: &TrafficCounters) {
        self.data_bytes_read += other.data_bytes_read;
        self.data_bytes_written += other.data_bytes_written;
        self.param_bytes_read += other.param_bytes_read;
        self.redundant_elements += other.redundant_elements;
        self.op_count += other.op_count;
    }

    /// All reads charged to main memory, parameters included.
    pub fn bytes_read_main(&self) -> u64 {
        self.data_bytes_read + self.param_bytes_read
    }

    pub fn bytes_written_main(&self) -> u64 {
        self.data_bytes_written
    }

    /// Data traffic only (the quantity the fusion is meant to shrink).
    pub fn data_bytes(&self) -> u64 {
        self.data_bytes_read + self.data_bytes_written
    }
}

/// One scheduled unit's worth of accounting: a layer for breadth-first runs,
/// an opaque layer or one stack sequence for depth-first runs.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub label: String,
    pub counters: TrafficCounters,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrafficReport {
    pub phases: Vec<PhaseReport>,
    pub total: TrafficCounters,
    pub wall_seconds: f64,
}

impl TrafficReport {
    fn push(&mut self, label: String, counters: TrafficCounters, wall_seconds: f64) {
        self.total.add(&counters);
        self.wall_seconds += wall_seconds;
        self.phases.push(PhaseReport { label, counters, wall_seconds });
    }

    /// Counter equality, ignoring wall times (which never reproduce).
    pub fn counters_eq(&self, other: &TrafficReport) -> bool {
        self.total == other.total
            && self.phases.len() == other.phases.len()
            && self
                .phases
                .iter()
                .zip(other.phases.iter())
                .all(|(a, b)| a.label == b.label && a.counters == b.counters)
    }
}

fn bf_layer_counters(layer: &LayerSpec, in_shape: Shape, out_shape: Shape) -> TrafficCounters {
    let window_ops = |g: &PoolGeom| (g.kernel.0 * g.kernel.1) as u64;
    let op_count = match layer {
        LayerSpec::Relu | LayerSpec::Batchnorm { .. } => out_shape.elems() as u64,
        LayerSpec::Maxpool(g) | LayerSpec::Avgpool(g) => out_shape.elems() as u64 * window_ops(g),
        LayerSpec::Conv2d { weights, .. } => {
            let w = weights.tensor.shape();
            out_shape.elems() as u64 * (w.c * w.h * w.w) as u64
        }
        LayerSpec::Linear { weight, .. } => {
            out_shape.elems() as u64 * weight.tensor.shape().w as u64
        }
    };
    TrafficCounters {
        data_bytes_read: 4 * in_shape.elems() as u64,
        data_bytes_written: 4 * out_shape.elems() as u64,
        param_bytes_read: 4 * layer.param_elems(in_shape.c),
        redundant_elements: 0,
        op_count,
    }
}

fn apply_layer(layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
    match layer {
        LayerSpec::Relu => Ok(layers::relu(x)),
        LayerSpec::Batchnorm { gamma, beta, running_mean, running_var, eps } => {
            layers::batchnorm_inference(
                x,
                &gamma.values,
                &beta.values,
                &running_mean.values,
                &running_var.values,
                *eps,
            )
        }
        LayerSpec::Maxpool(g) => layers::maxpool2d(x, g),
        LayerSpec::Avgpool(g) => layers::avgpool2d(x, g),
        LayerSpec::Conv2d { weights, bias, stride, padding } => {
            layers::conv2d(x, &weights.tensor, &bias.values, *stride, *padding)
        }
        LayerSpec::Linear { weight, bias } => layers::linear(x, &weight.tensor, &bias.values),
    }
}

// ---------------------------------------------------------------------------
// Breadth-first runner
// ---------------------------------------------------------------------------

/// Applies each layer's whole-tensor kernel in order, charging a full input
/// read and full output write per layer.
pub fn run_breadth_first(g: &ValidatedGraph, x: &Tensor) -> Result<(Tensor, TrafficReport)> {
    if x.shape() != g.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input tensor is {}, network expects {}",
            x.shape(),
            g.input_shape
        )));
    }
    let mut report = TrafficReport::default();
    let mut cur = x.clone();
    for (idx, layer) in g.layers.iter().enumerate() {
        let in_shape = cur.shape();
        let t0 = Instant::now();
        let out = apply_layer(layer, &cur)?;
        let wall = t0.elapsed().as_secs_f64();
        report.push(
            format!("node{idx}:{}", layer.kind().name()),
            bf_layer_counters(layer, in_shape, out.shape()),
            wall,
        );
        cur = out;
    }
    Ok((cur, report))
}

// ---------------------------------------------------------------------------
// Depth-first runner
// ---------------------------------------------------------------------------

/// One unit of depth-first work: a (batch, channel group, spatial patch).
#[derive(Debug, Clone, Copy)]
struct TileTask {
    batch: usize,
    chan0: usize,
    chans: usize,
    out_region: Region,
}

fn tile_tasks(seq: &SequencePlan, batch: usize, channels: usize) -> Vec<TileTask> {
    let spatial = seq.spatial_tiles();
    let cpt = seq.tile.channels_per_tile;
    let mut tasks = Vec::new();
    for n in 0..batch {
        let mut c = 0;
        while c < channels {
            let chans = cpt.min(channels - c);
            for &region in &spatial {
                tasks.push(TileTask { batch: n, chan0: c, chans, out_region: region });
            }
            c += chans;
        }
    }
    tasks
}

/// Two swap buffers sized to the sequence's worst region; never reallocated
/// between steps.
struct ScratchBuffers {
    bufs: [Vec<f32>; 2],
    active: usize,
}

impl ScratchBuffers {
    fn new(capacity: usize) -> Self {
        ScratchBuffers { bufs: [vec![0.0; capacity], vec![0.0; capacity]], active: 0 }
    }

    fn active_mut(&mut self) -> &mut [f32] {
        &mut self.bufs[self.active]
    }

    /// Active and standby buffers at once, for pooling across the swap.
    fn pair_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        let (a, b) = self.bufs.split_at_mut(1);
        if self.active == 0 {
            (&mut a[0], &mut b[0])
        } else {
            (&mut b[0], &mut a[0])
        }
    }

    fn swap(&mut self) {
        self.active ^= 1;
    }
}

/// Raw output pointer handed to tile workers. Safety rests on the tiling
/// contract: no two tiles write the same output element.
#[derive(Clone, Copy)]
struct OutPtr(*mut f32);
unsafe impl Send for OutPtr {}
unsafe impl Sync for OutPtr {}

struct SequenceCtx<'a> {
    seq: &'a SequencePlan,
    layers: &'a [LayerSpec],
    stack_start: usize,
    input: &'a Tensor,
    out_shape: Shape,
}

fn run_tile(ctx: &SequenceCtx<'_>, task: &TileTask, scratch: &mut ScratchBuffers, out: OutPtr) -> TrafficCounters {
    let seq = ctx.seq;
    let regions = sequence_regions(&seq.steps, task.out_region);
    let mut counters = TrafficCounters::default();

    // Load the composed input region per channel, padding materialized by
    // the first step's policy.
    let policy = seq.load_policy();
    let in_region = regions[0];
    let in_area = in_region.area();
    let buf = scratch.active_mut();
    for ci in 0..task.chans {
        extract_region_into(
            ctx.input,
            task.batch,
            task.chan0 + ci,
            in_region,
            policy,
            &mut buf[ci * in_area..(ci + 1) * in_area],
        );
    }
    counters.data_bytes_read +=
        4 * (in_region.in_bounds_area(seq.in_extent) * task.chans) as u64;

    let mut cur_area = in_area;
    for (si, step) in seq.steps.iter().enumerate() {
        let step_in = regions[si];
        let step_out = regions[si + 1];
        match &step.pool {
            None => {
                for op in &step.ops {
                    apply_elementwise(ctx, op, scratch.active_mut(), cur_area, task, &mut counters);
                }
            }
            Some(pool) => {
                for op in &step.ops[..pool.pos] {
                    apply_elementwise(ctx, op, scratch.active_mut(), cur_area, task, &mut counters);
                }
                let out_area = step_out.area();
                let (src_buf, dst_buf) = scratch.pair_mut();
                for ci in 0..task.chans {
                    let src = PlaneSrc {
                        data: &src_buf[ci * cur_area..(ci + 1) * cur_area],
                        region: step_in,
                        extent: step.in_extent,
                    };
                    layers::pool_region_into(
                        pool.kind,
                        &src,
                        step_out,
                        step.out_extent,
                        &pool.geom,
                        &mut dst_buf[ci * out_area..(ci + 1) * out_area],
                    );
                }
                counters.op_count += (step_out.in_bounds_area(step.out_extent)
                    * task.chans
                    * pool.geom.kernel.0
                    * pool.geom.kernel.1) as u64;
                scratch.swap();
                cur_area = out_area;
                for op in &step.ops[pool.pos + 1..] {
                    apply_elementwise(ctx, op, scratch.active_mut(), cur_area, task, &mut counters);
                }
            }
        }
    }

    // Write the final patch; the tile's output region is fully in bounds.
    let final_region = *regions.last().unwrap();
    debug_assert!(final_region.is_within(seq.out_extent));
    let rows = final_region.rows();
    let cols = final_region.cols();
    let (oh, ow) = (ctx.out_shape.h, ctx.out_shape.w);
    let buf = scratch.active_mut();
    for ci in 0..task.chans {
        let plane_base = ((task.batch * ctx.out_shape.c) + task.chan0 + ci) * oh * ow;
        for r in 0..rows {
            let dst_off = plane_base
                + (final_region.h.lo as usize + r) * ow
                + final_region.w.lo as usize;
            let src = &buf[ci * cur_area + r * cols..ci * cur_area + r * cols + cols];
            // Safety: tiles write pairwise-disjoint (batch, channel, region)
            // cells, and `out` points at a tensor sized for this shape.
            unsafe {
                std::ptr::copy_nonoverlapping(src.as_ptr(), out.0.add(dst_off), cols);
            }
        }
    }
    counters.data_bytes_written += 4 * (rows * cols * task.chans) as u64;
    counters
}

fn apply_elementwise(
    ctx: &SequenceCtx<'_>,
    op: &StepOp,
    buf: &mut [f32],
    area: usize,
    task: &TileTask,
    counters: &mut TrafficCounters,
) {
    match &ctx.layers[ctx.stack_start + op.offset] {
        LayerSpec::Relu => {
            relu_slice(&mut buf[..area * task.chans]);
        }
        LayerSpec::Batchnorm { gamma, beta, running_mean, running_var, eps } => {
            for ci in 0..task.chans {
                let c = task.chan0 + ci;
                let std = bn_std(running_var.values[c], *eps);
                bn_slice(
                    &mut buf[ci * area..(ci + 1) * area],
                    gamma.values[c],
                    beta.values[c],
                    running_mean.values[c],
                    std,
                );
            }
            counters.param_bytes_read += 4 * 4 * task.chans as u64;
        }
        other => unreachable!("opaque layer {:?} inside a sequence", other.kind()),
    }
    counters.op_count += (area * task.chans) as u64;
}

fn run_sequence(
    plan: &ExecutionPlan,
    seq: &SequencePlan,
    nodes: &Range<usize>,
    input: &Tensor,
) -> Result<(Tensor, TrafficCounters)> {
    let in_shape = input.shape();
    debug_assert_eq!(in_shape.extent(), seq.in_extent);
    let out_shape = Shape::new(in_shape.n, in_shape.c, seq.out_extent.0, seq.out_extent.1);
    let mut out = Tensor::zeros(out_shape)?;
    let tasks = tile_tasks(seq, in_shape.n, in_shape.c);
    let ctx = SequenceCtx {
        seq,
        layers: &plan.graph.layers,
        stack_start: nodes.start,
        input,
        out_shape,
    };
    let scratch_cap = seq.scratch_elems as usize;
    let out_ptr = OutPtr(out.data_mut().as_mut_ptr());

    let workers = plan.device.worker_count.min(tasks.len()).max(1);
    let mut counters = TrafficCounters::default();
    if workers == 1 {
        let mut scratch = ScratchBuffers::new(scratch_cap);
        for task in &tasks {
            counters.add(&run_tile(&ctx, task, &mut scratch, out_ptr));
        }
    } else {
        let chunk = tasks.len().div_ceil(workers);
        let parts = std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|slice| {
                    let ctx = &ctx;
                    scope.spawn(move || {
                        let mut scratch = ScratchBuffers::new(scratch_cap);
                        let mut local = TrafficCounters::default();
                        for task in slice {
                            local.add(&run_tile(ctx, task, &mut scratch, out_ptr));
                        }
                        local
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tile worker panicked"))
                .collect::<Vec<_>>()
        });
        for part in parts {
            counters.add(&part);
        }
    }

    // Overlap redundancy: loads beyond one copy of each distinct input cell.
    let (loaded_plane, union_plane) = seq.plane_load_counts();
    let planes = (in_shape.n * in_shape.c) as u64;
    debug_assert_eq!(counters.data_bytes_read, 4 * loaded_plane * planes);
    counters.redundant_elements = (loaded_plane - union_plane) * planes;

    Ok((out, counters))
}

/// Executes the plan: opaque layers breadth-first, each stack sequence
/// tile-by-tile through the scratch buffers. Output is bit-identical to
/// `run_breadth_first` on the same graph.
pub fn run_depth_first(plan: &ExecutionPlan, x: &Tensor) -> Result<(Tensor, TrafficReport)> {
    let g = &plan.graph;
    if x.shape() != g.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input tensor is {}, plan expects {}",
            x.shape(),
            g.input_shape
        )));
    }
    let mut report = TrafficReport::default();
    let mut cur = x.clone();
    for item in &plan.items {
        match item {
            PlanItem::Opaque { node } => {
                let layer = &g.layers[*node];
                let in_shape = cur.shape();
                let t0 = Instant::now();
                let out = apply_layer(layer, &cur)?;
                let wall = t0.elapsed().as_secs_f64();
                report.push(
                    format!("node{node}:{}", layer.kind().name()),
                    bf_layer_counters(layer, in_shape, out.shape()),
                    wall,
                );
                cur = out;
            }
            PlanItem::Stack { template, nodes } => {
                let stack = &plan.templates[*template];
                for (si, seq) in stack.sequences.iter().enumerate() {
                    let t0 = Instant::now();
                    let (out, counters) = run_sequence(plan, seq, nodes, &cur)?;
                    let wall = t0.elapsed().as_secs_f64();
                    report.push(format!("stack@{}:seq{si}", nodes.start), counters, wall);
                    cur = out;
                }
            }
        }
    }
    Ok((cur, report))
}

// ---------------------------------------------------------------------------
// Analytic traffic model
// ---------------------------------------------------------------------------

fn model_sequence_counters(
    plan: &ExecutionPlan,
    seq: &SequencePlan,
    nodes: &Range<usize>,
    in_shape: Shape,
) -> TrafficCounters {
    let planes = (in_shape.n * in_shape.c) as u64;
    let (loaded_plane, union_plane) = seq.plane_load_counts();
    let out_area = (seq.out_extent.0 * seq.out_extent.1) as u64;

    let mut ops = 0u64;
    let mut param_elems = 0u64;
    for tile in seq.spatial_tiles() {
        let regions = sequence_regions(&seq.steps, tile);
        for (si, step) in seq.steps.iter().enumerate() {
            let pool_pos = step.pool.as_ref().map(|p| p.pos);
            for (oi, op) in step.ops.iter().enumerate() {
                let at_input_level = match pool_pos {
                    Some(pos) => oi < pos,
                    None => true,
                };
                match &plan.graph.layers[nodes.start + op.offset] {
                    LayerSpec::Relu => {
                        let area =
                            if at_input_level { regions[si].area() } else { regions[si + 1].area() };
                        ops += area as u64 * planes;
                    }
                    LayerSpec::Batchnorm { .. } => {
                        let area =
                            if at_input_level { regions[si].area() } else { regions[si + 1].area() };
                        ops += area as u64 * planes;
                        param_elems += 4 * in_shape.c as u64 * in_shape.n as u64;
                    }
                    LayerSpec::Maxpool(g) | LayerSpec::Avgpool(g) => {
                        let real = regions[si + 1].in_bounds_area(step.out_extent);
                        ops += (real * g.kernel.0 * g.kernel.1) as u64 * planes;
                    }
                    other => unreachable!("opaque layer {:?} inside a sequence", other.kind()),
                }
            }
        }
    }

    TrafficCounters {
        data_bytes_read: 4 * loaded_plane * planes,
        data_bytes_written: 4 * out_area * planes,
        param_bytes_read: 4 * param_elems,
        redundant_elements: (loaded_plane - union_plane) * planes,
        op_count: ops,
    }
}

/// Pure analytical traffic report, no execution: breadth-first when `plan`
/// is None, otherwise the plan's depth-first schedule. Equals the counted
/// report of the corresponding run exactly.
pub fn model_traffic(g: &ValidatedGraph, plan: Option<&ExecutionPlan>) -> TrafficReport {
    let mut report = TrafficReport::default();
    match plan {
        None => {
            for (idx, layer) in g.layers.iter().enumerate() {
                let in_shape = g.node_input_shape(idx);
                let out_shape = g.shapes[idx].out;
                report.push(
                    format!("node{idx}:{}", layer.kind().name()),
                    bf_layer_counters(layer, in_shape, out_shape),
                    0.0,
                );
            }
        }
        Some(plan) => {
            for item in &plan.items {
                match item {
                    PlanItem::Opaque { node } => {
                        let layer = &plan.graph.layers[*node];
                        report.push(
                            format!("node{node}:{}", layer.kind().name()),
                            bf_layer_counters(
                                layer,
                                plan.graph.node_input_shape(*node),
                                plan.graph.shapes[*node].out,
                            ),
                            0.0,
                        );
                    }
                    PlanItem::Stack { template, nodes } => {
                        let stack = &plan.templates[*template];
                        let mut in_shape = plan.graph.node_input_shape(nodes.start);
                        for (si, seq) in stack.sequences.iter().enumerate() {
                            let counters = model_sequence_counters(plan, seq, nodes, in_shape);
                            report.push(format!("stack@{}:seq{si}", nodes.start), counters, 0.0);
                            in_shape =
                                Shape::new(in_shape.n, in_shape.c, seq.out_extent.0, seq.out_extent.1);
                        }
                    }
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub network: String,
    pub batch: usize,
    pub mode: &'static str,
    pub min_seconds: f64,
    pub counters: TrafficCounters,
    /// Breadth-first minimum over depth-first minimum; 1.0 on bf rows.
    pub speedup: f64,
}

/// Runs both executors `reps` times per batch size, keeping the minimum wall
/// time of each, and reports traffic from the deterministic counters.
pub fn bench(
    network_name: &str,
    net: &crate::graph::NetworkGraph,
    cfg: &crate::planner::DeviceConfig,
    batches: &[usize],
    reps: usize,
    input_seed: u64,
) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for &batch in batches {
        let shape = Shape::new(batch, net.input_shape.c, net.input_shape.h, net.input_shape.w);
        let graph = std::sync::Arc::new(crate::graph::validate(crate::graph::NetworkGraph {
            input_shape: shape,
            layers: net.layers.clone(),
        })?);
        let plan = crate::planner::plan(graph.clone(), cfg)?;
        let x = prng_fill(input_seed, shape)?;

        let mut bf_min = f64::INFINITY;
        let mut bf_traffic = TrafficCounters::default();
        for _ in 0..reps {
            let t0 = Instant::now();
            let (_, report) = run_breadth_first(&graph, &x)?;
            bf_min = bf_min.min(t0.elapsed().as_secs_f64());
            bf_traffic = report.total;
        }
        let mut df_min = f64::INFINITY;
        let mut df_traffic = TrafficCounters::default();
        for _ in 0..reps {
            let t0 = Instant::now();
            let (_, report) = run_depth_first(&plan, &x)?;
            df_min = df_min.min(t0.elapsed().as_secs_f64());
            df_traffic = report.total;
        }

        rows.push(BenchRow {
            network: network_name.to_string(),
            batch,
            mode: "bf",
            min_seconds: bf_min,
            counters: bf_traffic,
            speedup: 1.0,
        });
        rows.push(BenchRow {
            network: network_name.to_string(),
            batch,
            mode: "df",
            min_seconds: df_min,
            counters: df_traffic,
            speedup: bf_min / df_min,
        });
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str =
    "network,batch,mode,min_ms,bytes_read,bytes_written,redundant_elements,speedup";

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{},{:.4}\n",
            r.network,
            r.batch,
            r.mode,
            r.min_seconds * 1e3,
            r.counters.bytes_read_main(),
            r.counters.bytes_written_main(),
            r.counters.redundant_elements,
            r.speedup
        ));
    }
    out
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let header = ["network", "batch", "mode", "min_ms", "bytes_read", "bytes_written", "redundant", "speedup"];
    let mut cells: Vec<[String; 8]> = Vec::with_capacity(rows.len());
    for r in rows {
        cells.push([
            r.network.clone(),
            r.batch.to_string(),
            r.mode.to_string(),
            format!("{:.3}", r.min_seconds * 1e3),
            r.counters.bytes_read_main().to_string(),
            r.counters.bytes_written_main().to_string(),
            r.counters.redundant_elements.to_string(),
            format!("{:.3}", r.speedup),
        ]);
    }
    let mut width = [0usize; 8];
    for (i, h) in header.iter().enumerate() {
        width[i] = h.len();
    }
    for row in &cells {
        for (i, cell) in row.iter().enumerate() {
            width[i] = width[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cols: &[String; 8], width: &[usize; 8]| -> String {
        cols.iter()
            .enumerate()
            .map(|(i, c)| format!("{:>w$}", c, w = width[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let head: [String; 8] = header.map(|h| h.to_string());
    out.push_str(&fmt_row(&head, &width));
    out.push('\n');
    for row in &cells {
        out.push_str(&fmt_row(row, &width));
        out.push('\n');
    }
    out
}
