//! Sequential network description: parsing, serialization, validation, and
//! shape inference.
//!
//! The document format is a strict JSON schema; unknown fields anywhere are
//! hard errors. Weight-carrying fields reference sibling BSTN files or
//! deterministic generation directives, so test networks need no binary
//! sidecars.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec, OpClass, ParamSource, ParamTensor, ParamVec, PoolGeom};
use crate::tensor::{prng_fill, read_tensor_file, Shape, SplitMix64, Tensor};

/// Parsed network: an ordered chain of layers fed by a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Shape annotation attached to every node by validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeShape {
    pub out: Shape,
    /// True for linear nodes, which implicitly flatten (c, h, w) into the
    /// feature axis before applying the weight matrix.
    pub flattens_input: bool,
}

/// Validated graph: every node carries its inferred output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedGraph {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub shapes: Vec<NodeShape>,
}

impl ValidatedGraph {
    pub fn node_input_shape(&self, node: usize) -> Shape {
        if node == 0 {
            self.input_shape
        } else {
            self.shapes[node - 1].out
        }
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().map(|s| s.out).unwrap_or(self.input_shape)
    }
}

/// Fusion classification of one layer (exposed as a graph-level operation so
/// the planner's notion of "optimizable" lives next to the IR).
pub fn classify(spec: &LayerSpec) -> OpClass {
    spec.class()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

pub fn parse_network_file(path: &Path) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_network(&text, base)
}

/// Parses a network document. `base_dir` anchors relative weight-file paths.
pub fn parse_network(text: &str, base_dir: &Path) -> Result<NetworkGraph> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("invalid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Parse("top level must be an object".to_string()))?;

    for key in obj.keys() {
        if key != "input_shape" && key != "layers" {
            return Err(Error::Parse(format!("unknown top-level field \"{key}\"")));
        }
    }

    let input_shape = parse_shape4(
        obj.get("input_shape")
            .ok_or_else(|| Error::Parse("missing top-level field \"input_shape\"".to_string()))?,
        "input_shape",
    )?;

    let layers_val = obj
        .get("layers")
        .ok_or_else(|| Error::Parse("missing top-level field \"layers\"".to_string()))?;
    let layers_arr = layers_val
        .as_array()
        .ok_or_else(|| Error::Parse("\"layers\" must be an array".to_string()))?;

    let mut layers = Vec::with_capacity(layers_arr.len());
    for (idx, entry) in layers_arr.iter().enumerate() {
        layers.push(parse_layer(idx, entry, base_dir)?);
    }

    Ok(NetworkGraph { input_shape, layers })
}

fn parse_shape4(v: &Value, what: &str) -> Result<Shape> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| Error::Parse(format!("{what} must be an array of 4 integers")))?;
    let mut dims = [0usize; 4];
    for (i, d) in arr.iter().enumerate() {
        dims[i] = d
            .as_u64()
            .and_then(|x| usize::try_from(x).ok())
            .ok_or_else(|| Error::Parse(format!("{what}[{i}] must be a non-negative integer")))?;
    }
    Ok(Shape::new(dims[0], dims[1], dims[2], dims[3]))
}

fn parse_layer(idx: usize, entry: &Value, base_dir: &Path) -> Result<LayerSpec> {
    let obj = entry
        .as_object()
        .ok_or_else(|| Error::Parse(format!("layer {idx} must be an object")))?;
    for key in obj.keys() {
        if key != "kind" && key != "params" {
            return Err(Error::Parse(format!("layer {idx}: unknown field \"{key}\"")));
        }
    }
    let kind_str = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse(format!("layer {idx}: missing string field \"kind\"")))?;
    let kind = LayerKind::ALL
        .into_iter()
        .find(|k| k.name() == kind_str)
        .ok_or_else(|| Error::Parse(format!("layer {idx}: unknown layer kind \"{kind_str}\"")))?;

    let empty = Map::new();
    let params = match obj.get("params") {
        None => &empty,
        Some(v) => v.as_object().ok_or_else(|| {
            Error::Parse(format!("layer {idx} ({kind_str}): \"params\" must be an object"))
        })?,
    };
    let ctx = ParamCtx { idx, kind: kind_str, base_dir };

    match kind {
        LayerKind::Relu => {
            ctx.expect_fields(params, &[])?;
            Ok(LayerSpec::Relu)
        }
        LayerKind::Batchnorm => {
            ctx.expect_fields(params, &["gamma", "beta", "running_mean", "running_var", "eps"])?;
            Ok(LayerSpec::Batchnorm {
                gamma: ctx.vector(params, "gamma")?,
                beta: ctx.vector(params, "beta")?,
                running_mean: ctx.vector(params, "running_mean")?,
                running_var: ctx.vector(params, "running_var")?,
                eps: ctx.float(params, "eps")?,
            })
        }
        LayerKind::Maxpool => Ok(LayerSpec::Maxpool(ctx.pool_geom(params)?)),
        LayerKind::Avgpool => Ok(LayerSpec::Avgpool(ctx.pool_geom(params)?)),
        LayerKind::Conv2d => {
            ctx.expect_fields(params, &["weights", "bias", "stride", "padding"])?;
            Ok(LayerSpec::Conv2d {
                weights: ctx.tensor(params, "weights")?,
                bias: ctx.vector(params, "bias")?,
                stride: ctx.pair(params, "stride")?,
                padding: ctx.pair(params, "padding")?,
            })
        }
        LayerKind::Linear => {
            ctx.expect_fields(params, &["weight", "bias"])?;
            Ok(LayerSpec::Linear {
                weight: ctx.tensor(params, "weight")?,
                bias: ctx.vector(params, "bias")?,
            })
        }
    }
}

struct ParamCtx<'a> {
    idx: usize,
    kind: &'a str,
    base_dir: &'a Path,
}

impl<'a> ParamCtx<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Parse(format!("layer {} ({}): {msg}", self.idx, self.kind))
    }

    fn expect_fields(&self, params: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
        for key in params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(self.err(format!("unknown parameter \"{key}\"")));
            }
        }
        for field in allowed {
            if !params.contains_key(*field) {
                return Err(self.err(format!("missing parameter \"{field}\"")));
            }
        }
        Ok(())
    }

    fn float(&self, params: &Map<String, Value>, field: &str) -> Result<f32> {
        params
            .get(field)
            .and_then(Value::as_f64)
            .map(|v| v as f32)
            .ok_or_else(|| self.err(format!("parameter \"{field}\" must be a number")))
    }

    fn pair(&self, params: &Map<String, Value>, field: &str) -> Result<(usize, usize)> {
        let arr = params
            .get(field)
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| self.err(format!("parameter \"{field}\" must be [rows, cols]")))?;
        let get = |i: usize| {
            arr[i]
                .as_u64()
                .and_then(|x| usize::try_from(x).ok())
                .ok_or_else(|| self.err(format!("parameter \"{field}\"[{i}] must be an integer")))
        };
        Ok((get(0)?, get(1)?))
    }

    fn pool_geom(&self, params: &Map<String, Value>) -> Result<PoolGeom> {
        self.expect_fields(params, &["kernel", "stride", "padding"])?;
        Ok(PoolGeom::new(
            self.pair(params, "kernel")?,
            self.pair(params, "stride")?,
            self.pair(params, "padding")?,
        ))
    }

    /// Weight directive for a length-L vector: {"file": path} with BSTN shape
    /// (1,1,1,L), or {"prng_seed": s, "len": L}.
    fn vector(&self, params: &Map<String, Value>, field: &str) -> Result<ParamVec> {
        let obj = self.directive(params, field)?;
        if let Some(path) = obj.get("file") {
            self.only_keys(obj, field, &["file"])?;
            let (tensor, path) = self.load_file(path, field)?;
            let dims = tensor.shape().dims();
            if dims[0] != 1 || dims[1] != 1 || dims[2] != 1 {
                return Err(self.err(format!(
                    "parameter \"{field}\" expects BSTN shape (1,1,1,len), file has {:?}",
                    dims
                )));
            }
            return Ok(ParamVec {
                values: tensor.data().to_vec(),
                source: ParamSource::File(path),
            });
        }
        self.only_keys(obj, field, &["prng_seed", "len"])?;
        let seed = self.directive_u64(obj, field, "prng_seed")?;
        let len = self.directive_u64(obj, field, "len")? as usize;
        if len == 0 {
            return Err(self.err(format!("parameter \"{field}\" length must be >= 1")));
        }
        let t = prng_fill(seed, Shape::new(1, 1, 1, len))?;
        Ok(ParamVec { values: t.data().to_vec(), source: ParamSource::Prng(seed) })
    }

    /// Weight directive for a 4-D tensor: {"file": path} or
    /// {"prng_seed": s, "shape": [a,b,c,d]}.
    fn tensor(&self, params: &Map<String, Value>, field: &str) -> Result<ParamTensor> {
        let obj = self.directive(params, field)?;
        if let Some(path) = obj.get("file") {
            self.only_keys(obj, field, &["file"])?;
            let (tensor, path) = self.load_file(path, field)?;
            return Ok(ParamTensor { tensor, source: ParamSource::File(path) });
        }
        self.only_keys(obj, field, &["prng_seed", "shape"])?;
        let seed = self.directive_u64(obj, field, "prng_seed")?;
        let shape = parse_shape4(
            obj.get("shape")
                .ok_or_else(|| self.err(format!("parameter \"{field}\" missing \"shape\"")))?,
            "shape",
        )
        .map_err(|e| self.err(format!("parameter \"{field}\": {e}")))?;
        Ok(ParamTensor { tensor: prng_fill(seed, shape)?, source: ParamSource::Prng(seed) })
    }

    fn directive<'b>(
        &self,
        params: &'b Map<String, Value>,
        field: &str,
    ) -> Result<&'b Map<String, Value>> {
        params
            .get(field)
            .and_then(Value::as_object)
            .ok_or_else(|| {
                self.err(format!(
                    "parameter \"{field}\" must be {{\"file\": ...}} or {{\"prng_seed\": ...}}"
                ))
            })
    }

    fn directive_u64(&self, obj: &Map<String, Value>, field: &str, key: &str) -> Result<u64> {
        obj.get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| self.err(format!("parameter \"{field}\" missing integer \"{key}\"")))
    }

    fn only_keys(&self, obj: &Map<String, Value>, field: &str, allowed: &[&str]) -> Result<()> {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(self.err(format!(
                    "parameter \"{field}\": unknown directive field \"{key}\""
                )));
            }
        }
        Ok(())
    }

    fn load_file(&self, path_val: &Value, field: &str) -> Result<(Tensor, PathBuf)> {
        let rel = path_val
            .as_str()
            .ok_or_else(|| self.err(format!("parameter \"{field}\": \"file\" must be a string")))?;
        let rel = PathBuf::from(rel);
        let full = if rel.is_absolute() { rel.clone() } else { self.base_dir.join(&rel) };
        let tensor = read_tensor_file(&full)?;
        Ok((tensor, rel))
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Emits the same schema `parse_network` reads; parse . serialize is the
/// identity on graphs whose parameters carry file or prng provenance.
pub fn serialize_network(g: &NetworkGraph) -> Result<String> {
    let mut layers = Vec::new();
    for (idx, layer) in g.layers.iter().enumerate() {
        layers.push(serialize_layer(idx, layer)?);
    }
    let doc = serde_json::json!({
        "input_shape": g.input_shape.dims(),
        "layers": layers,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialize(e.to_string()))
}

fn serialize_layer(idx: usize, layer: &LayerSpec) -> Result<Value> {
    let kind = layer.kind().name();
    let params = match layer {
        LayerSpec::Relu => return Ok(serde_json::json!({ "kind": kind })),
        LayerSpec::Batchnorm { gamma, beta, running_mean, running_var, eps } => serde_json::json!({
            "gamma": vec_directive(idx, "gamma", gamma)?,
            "beta": vec_directive(idx, "beta", beta)?,
            "running_mean": vec_directive(idx, "running_mean", running_mean)?,
            "running_var": vec_directive(idx, "running_var", running_var)?,
            "eps": *eps as f64,
        }),
        LayerSpec::Maxpool(geom) | LayerSpec::Avgpool(geom) => serde_json::json!({
            "kernel": [geom.kernel.0, geom.kernel.1],
            "stride": [geom.stride.0, geom.stride.1],
            "padding": [geom.padding.0, geom.padding.1],
        }),
        LayerSpec::Conv2d { weights, bias, stride, padding } => serde_json::json!({
            "weights": tensor_directive(idx, "weights", weights)?,
            "bias": vec_directive(idx, "bias", bias)?,
            "stride": [stride.0, stride.1],
            "padding": [padding.0, padding.1],
        }),
        LayerSpec::Linear { weight, bias } => serde_json::json!({
            "weight": tensor_directive(idx, "weight", weight)?,
            "bias": vec_directive(idx, "bias", bias)?,
        }),
    };
    Ok(serde_json::json!({ "kind": kind, "params": params }))
}

fn vec_directive(idx: usize, field: &str, p: &ParamVec) -> Result<Value> {
    match &p.source {
        ParamSource::File(path) => Ok(serde_json::json!({ "file": path.to_string_lossy() })),
        ParamSource::Prng(seed) => {
            Ok(serde_json::json!({ "prng_seed": seed, "len": p.values.len() }))
        }
        ParamSource::Inline => Err(Error::Serialize(format!(
            "layer {idx}: parameter \"{field}\" was built inline and has no document form"
        ))),
    }
}

fn tensor_directive(idx: usize, field: &str, p: &ParamTensor) -> Result<Value> {
    match &p.source {
        ParamSource::File(path) => Ok(serde_json::json!({ "file": path.to_string_lossy() })),
        ParamSource::Prng(seed) => {
            Ok(serde_json::json!({ "prng_seed": seed, "shape": p.tensor.shape().dims() }))
        }
        ParamSource::Inline => Err(Error::Serialize(format!(
            "layer {idx}: parameter \"{field}\" was built inline and has no document form"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Validation and shape inference
// ---------------------------------------------------------------------------

/// Annotates every node with its output shape, checking parameter lengths
/// and geometry against the inferred channel counts along the way.
pub fn validate(g: NetworkGraph) -> Result<ValidatedGraph> {
    g.input_shape
        .check()
        .map_err(|e| Error::Validation(format!("input shape: {e}")))?;
    let mut shapes = Vec::with_capacity(g.layers.len());
    let mut cur = g.input_shape;

    for (idx, layer) in g.layers.iter().enumerate() {
        let node_err = |msg: String| Error::Validation(format!("node {idx} ({}): {msg}", layer.kind().name()));
        let mut flattens_input = false;
        let out = match layer {
            LayerSpec::Relu => cur,
            LayerSpec::Batchnorm { gamma, beta, running_mean, running_var, eps } => {
                for (name, vec) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("running_mean", running_mean),
                    ("running_var", running_var),
                ] {
                    if vec.values.len() != cur.c {
                        return Err(node_err(format!(
                            "{name} has length {}, expected {} channels",
                            vec.values.len(),
                            cur.c
                        )));
                    }
                }
                if !eps.is_finite() || *eps <= 0.0 {
                    return Err(node_err(format!("eps must be > 0, got {eps}")));
                }
                if let Some(v) = running_var.values.iter().find(|v| v.is_nan() || **v < 0.0) {
                    return Err(node_err(format!("running_var must be >= 0, found {v}")));
                }
                cur
            }
            LayerSpec::Maxpool(geom) | LayerSpec::Avgpool(geom) => {
                geom.check().map_err(|e| node_err(e.to_string()))?;
                let (h, w) = geom
                    .out_extent(cur.extent())
                    .map_err(|e| node_err(format!("{e} (input shape {cur})")))?;
                Shape::new(cur.n, cur.c, h, w)
            }
            LayerSpec::Conv2d { weights, bias, stride, padding } => {
                let wshape = weights.tensor.shape();
                if wshape.c != cur.c {
                    return Err(node_err(format!(
                        "weights expect {} input channels, got {}",
                        wshape.c, cur.c
                    )));
                }
                if bias.values.len() != wshape.n {
                    return Err(node_err(format!(
                        "bias has length {}, expected {} output channels",
                        bias.values.len(),
                        wshape.n
                    )));
                }
                let geom = PoolGeom::new((wshape.h, wshape.w), *stride, *padding);
                geom.check().map_err(|e| node_err(e.to_string()))?;
                let (h, w) = geom
                    .out_extent(cur.extent())
                    .map_err(|e| node_err(format!("{e} (input shape {cur})")))?;
                Shape::new(cur.n, wshape.n, h, w)
            }
            LayerSpec::Linear { weight, bias } => {
                flattens_input = true;
                let wshape = weight.tensor.shape();
                if wshape.n != 1 || wshape.c != 1 {
                    return Err(node_err(format!(
                        "weight must have shape (1,1,out,in), got {wshape}"
                    )));
                }
                let features = cur.c * cur.h * cur.w;
                if features != wshape.w {
                    return Err(node_err(format!(
                        "weight expects {} input features, input {cur} flattens to {features}",
                        wshape.w
                    )));
                }
                if bias.values.len() != wshape.h {
                    return Err(node_err(format!(
                        "bias has length {}, expected {} output features",
                        bias.values.len(),
                        wshape.h
                    )));
                }
                Shape::new(cur.n, wshape.h, 1, 1)
            }
        };
        shapes.push(NodeShape { out, flattens_input });
        cur = out;
    }

    Ok(ValidatedGraph { input_shape: g.input_shape, layers: g.layers, shapes })
}

// ---------------------------------------------------------------------------
// Builtin block network
// ---------------------------------------------------------------------------

/// Synthesizes `depth` blocks of max-pool 3x3 / stride 1x1 / padding 1x1,
/// batch normalization, and relu — the standard stress network for the
/// fusion planner. All parameters derive from `seed`.
pub fn builtin_blocks(depth: usize, input_shape: Shape, seed: u64) -> NetworkGraph {
    let c = input_shape.c;
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::with_capacity(3 * depth);
    for _ in 0..depth {
        layers.push(LayerSpec::Maxpool(PoolGeom::new((3, 3), (1, 1), (1, 1))));
        let gamma = (0..c).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let beta = (0..c).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let mean = (0..c).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let var = (0..c).map(|_| rng.next_in(0.25, 0.75)).collect();
        layers.push(LayerSpec::Batchnorm {
            gamma: ParamVec::inline(gamma),
            beta: ParamVec::inline(beta),
            running_mean: ParamVec::inline(mean),
            running_var: ParamVec::inline(var),
            eps: 1e-5,
        });
        layers.push(LayerSpec::Relu);
    }
    NetworkGraph { input_shape, layers }
}
