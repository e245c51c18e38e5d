//! Network graph representation and structural validation.
//!
//! A network is a DAG of layers. Layers with no declared inputs read the
//! network input; exactly one layer (the sink) has no consumers and produces
//! the network output. Supported layer kinds are 2-d convolution, bounded
//! ReLU, residual addition, channel concatenation, and integer rescale.
//!
//! The same graph type carries float networks (f32 kernels, optional batch
//! norm) and integer networks (i8 kernels, i32 bias). Validation infers which
//! of the two a graph is from its kernel storage and applies the matching
//! structural rules.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use crate::error::{Error, Result};
use crate::quant::MulShift;
use crate::ratio::Rational;
use crate::tensor::{Tensor, TensorKind};

/// Identifier of a layer within a network. Ids are restricted to
/// `[A-Za-z0-9_.-]` so the text model format can use them unquoted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(id: impl Into<String>) -> Self {
        LayerId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
            && self
                .0
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || b == b'-')
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        LayerId::new(s)
    }
}

/// Batch normalization parameters attached to a float convolution, applied as
/// `gamma * (x - mean) / sqrt(variance + epsilon) + beta` per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f64,
}

/// Convolution kernel in `[O, I, KH, KW]` layout, float or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelData {
    Float(Tensor<f32>),
    Int(Tensor<i8>),
}

impl KernelData {
    pub fn shape(&self) -> &[usize] {
        match self {
            KernelData::Float(t) => t.shape(),
            KernelData::Int(t) => t.shape(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape()[1]
    }
}

/// Convolution bias, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasData {
    Float(Vec<f32>),
    Int(Vec<i32>),
}

impl BiasData {
    pub fn len(&self) -> usize {
        match self {
            BiasData::Float(v) => v.len(),
            BiasData::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 2-d convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: KernelData,
    pub bias: BiasData,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: Option<BatchNorm>,
}

/// ReLU bounded above: `min(max(x, 0), upper)`. An infinite `upper` is a
/// plain ReLU, the state of float networks before bound calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct BRelu {
    pub upper: f64,
}

/// The operation a layer performs.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d(Conv2d),
    BRelu(BRelu),
    /// Elementwise sum of exactly two inputs. In integer networks the first
    /// input is the main-path convolution and the second is the rescaled
    /// skip connection.
    ResidualAdd,
    /// Channel concatenation of two or more inputs with equal spatial size.
    Concat,
    /// Multiplies by `mul` and right-shifts by `shift` with round-to-nearest,
    /// the integer approximation of scaling by `mul / 2^shift`.
    Rescale(MulShift),
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d(_) => "conv2d",
            LayerOp::BRelu(_) => "brelu",
            LayerOp::ResidualAdd => "residual-add",
            LayerOp::Concat => "concat",
            LayerOp::Rescale(_) => "rescale",
        }
    }
}

/// One node of the network DAG. An empty `inputs` list means the layer reads
/// the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: LayerId,
    pub inputs: Vec<LayerId>,
    pub op: LayerOp,
}

/// A network: input description plus the layer DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkIR {
    pub name: String,
    /// Input shape as `[C, H, W]`; the batch dimension is free.
    pub input_shape: [usize; 3],
    /// Scale of the raw 8-bit input: raw values are shifted by -128 and the
    /// float domain value is `(raw - 128) / input_ratio`.
    pub input_ratio: Rational,
    pub layers: Vec<Layer>,
}

/// Everything validation learns about a well-formed graph.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    /// Indices into `layers` in topological order (ties broken by id).
    pub order: Vec<usize>,
    /// Output shape `[C, H, W]` of every layer.
    pub shapes: BTreeMap<LayerId, [usize; 3]>,
    /// Output scalar kind of every layer (`F32` throughout float networks).
    pub kinds: BTreeMap<LayerId, TensorKind>,
    /// Layers that consume each layer's output.
    pub consumers: BTreeMap<LayerId, Vec<LayerId>>,
    /// The unique layer without consumers.
    pub sink: LayerId,
    /// Whether the network stores quantized kernels.
    pub integer: bool,
}

impl NetworkIR {
    pub fn layer(&self, id: &LayerId) -> Option<&Layer> {
        self.layers.iter().find(|l| &l.id == id)
    }

    pub fn layer_mut(&mut self, id: &LayerId) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| &l.id == id)
    }

    /// True if any kernel is stored quantized.
    pub fn has_int_kernels(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                &l.op,
                LayerOp::Conv2d(Conv2d {
                    kernel: KernelData::Int(_),
                    ..
                })
            )
        })
    }

    /// Layer ids in topological order, ties broken by id.
    pub fn topo_order(&self) -> Result<Vec<LayerId>> {
        let index = self.index_by_id()?;
        let order = self.topo_indices(&index)?;
        Ok(order.into_iter().map(|i| self.layers[i].id.clone()).collect())
    }

    fn index_by_id(&self) -> Result<BTreeMap<&LayerId, usize>> {
        let mut index = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.id.is_well_formed() {
                return Err(Error::graph(
                    layer.id.as_str(),
                    "layer id must be non-empty and use only [A-Za-z0-9_.-]",
                ));
            }
            if index.insert(&layer.id, i).is_some() {
                return Err(Error::graph(layer.id.as_str(), "duplicate layer id"));
            }
        }
        Ok(index)
    }

    fn topo_indices(&self, index: &BTreeMap<&LayerId, usize>) -> Result<Vec<usize>> {
        let n = self.layers.len();
        let mut indegree = vec![0usize; n];
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, layer) in self.layers.iter().enumerate() {
            for input in &layer.inputs {
                let &src = index.get(input).ok_or_else(|| {
                    Error::graph(
                        layer.id.as_str(),
                        format!("references unknown layer '{input}'"),
                    )
                })?;
                if src == i {
                    return Err(Error::graph(layer.id.as_str(), "layer consumes itself"));
                }
                edges[src].push(i);
                indegree[i] += 1;
            }
        }

        // Kahn's algorithm with a min-heap on layer id so the order is a
        // deterministic function of the graph, not of layer declaration order.
        let mut ready: BinaryHeap<Reverse<(&LayerId, usize)>> = BinaryHeap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if indegree[i] == 0 {
                ready.push(Reverse((&layer.id, i)));
            }
        }
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse((_, i))) = ready.pop() {
            order.push(i);
            for &next in &edges[i] {
                indegree[next] -= 1;
                if indegree[next] == 0 {
                    ready.push(Reverse((&self.layers[next].id, next)));
                }
            }
        }
        if order.len() != n {
            let stuck = indegree
                .iter()
                .position(|&d| d > 0)
                .map(|i| self.layers[i].id.as_str().to_string())
                .unwrap_or_default();
            return Err(Error::graph(stuck, "graph contains a cycle"));
        }
        Ok(order)
    }

    /// Checks every structural rule and computes shapes, kinds, and ordering.
    pub fn validate(&self) -> Result<GraphInfo> {
        if self.layers.is_empty() {
            return Err(Error::graph("", "network has no layers"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::graph("", "input shape has a zero dimension"));
        }
        use num::Signed;
        if !self.input_ratio.is_positive() {
            return Err(Error::graph("", "input ratio must be positive"));
        }

        let index = self.index_by_id()?;
        let order = self.topo_indices(&index)?;
        let integer = self.has_int_kernels();

        let mut shapes: BTreeMap<LayerId, [usize; 3]> = BTreeMap::new();
        let mut kinds: BTreeMap<LayerId, TensorKind> = BTreeMap::new();
        let input_kind = if integer { TensorKind::I8 } else { TensorKind::F32 };

        for &i in &order {
            let layer = &self.layers[i];
            let id = layer.id.as_str();
            // Shape and kind of each input, with the network input standing
            // in when the list is empty.
            let mut in_shapes: Vec<[usize; 3]> = Vec::new();
            let mut in_kinds: Vec<TensorKind> = Vec::new();
            let mut in_ops: Vec<Option<&'static str>> = Vec::new();
            if layer.inputs.is_empty() {
                in_shapes.push(self.input_shape);
                in_kinds.push(input_kind);
                in_ops.push(None);
            } else {
                for input in &layer.inputs {
                    in_shapes.push(shapes[input]);
                    in_kinds.push(kinds[input]);
                    in_ops.push(Some(self.layers[index[input]].op.name()));
                }
            }

            let (shape, kind) = match &layer.op {
                LayerOp::Conv2d(conv) => {
                    if in_shapes.len() != 1 {
                        return Err(Error::graph(id, "conv2d takes exactly one input"));
                    }
                    validate_conv(id, conv, integer, in_kinds[0], in_ops[0])?;
                    let out = conv_output_shape(id, conv, in_shapes[0])?;
                    let kind = if integer { TensorKind::I32 } else { TensorKind::F32 };
                    (out, kind)
                }
                LayerOp::BRelu(brelu) => {
                    if in_shapes.len() != 1 {
                        return Err(Error::graph(id, "brelu takes exactly one input"));
                    }
                    if !matches!(in_ops[0], Some("conv2d") | Some("residual-add")) {
                        return Err(Error::graph(
                            id,
                            "brelu input must be a conv2d or residual-add layer",
                        ));
                    }
                    if brelu.upper.is_nan() || brelu.upper <= 0.0 {
                        return Err(Error::graph(id, "brelu upper bound must be positive"));
                    }
                    if integer && !brelu.upper.is_finite() {
                        return Err(Error::graph(
                            id,
                            "integer network brelu requires a finite upper bound",
                        ));
                    }
                    let kind = if integer { TensorKind::I8 } else { TensorKind::F32 };
                    (in_shapes[0], kind)
                }
                LayerOp::ResidualAdd => {
                    if in_shapes.len() != 2 {
                        return Err(Error::graph(id, "residual-add takes exactly two inputs"));
                    }
                    if in_shapes[0] != in_shapes[1] {
                        return Err(Error::shape(
                            format!("layer '{id}' residual-add"),
                            format!("{:?}", in_shapes[0]),
                            format!("{:?}", in_shapes[1]),
                        ));
                    }
                    if integer
                        && (in_ops[0] != Some("conv2d") || in_ops[1] != Some("rescale")) {
                            return Err(Error::graph(
                                id,
                                "integer residual-add inputs must be [conv2d, rescale]",
                            ));
                        }
                    let kind = if integer { TensorKind::I32 } else { TensorKind::F32 };
                    (in_shapes[0], kind)
                }
                LayerOp::Concat => {
                    if in_shapes.len() < 2 {
                        return Err(Error::graph(id, "concat takes at least two inputs"));
                    }
                    let (h, w) = (in_shapes[0][1], in_shapes[0][2]);
                    let mut c = 0;
                    for (k, s) in in_shapes.iter().enumerate() {
                        if s[1] != h || s[2] != w {
                            return Err(Error::shape(
                                format!("layer '{id}' concat input {k}"),
                                format!("spatial size {h}x{w}"),
                                format!("{}x{}", s[1], s[2]),
                            ));
                        }
                        c += s[0];
                    }
                    if integer && in_ops.iter().any(|op| *op != Some("brelu")) {
                        return Err(Error::graph(id, "integer concat inputs must all be brelu"));
                    }
                    let kind = if integer { TensorKind::I8 } else { TensorKind::F32 };
                    ([c, h, w], kind)
                }
                LayerOp::Rescale(ms) => {
                    if !integer {
                        return Err(Error::graph(id, "rescale only appears in integer networks"));
                    }
                    if in_shapes.len() != 1 {
                        return Err(Error::graph(id, "rescale takes exactly one input"));
                    }
                    ms.check().map_err(|e| Error::graph(id, e.to_string()))?;
                    if !matches!(in_kinds[0], TensorKind::I8 | TensorKind::I32) {
                        return Err(Error::graph(id, "rescale input must be i8 or i32"));
                    }
                    (in_shapes[0], TensorKind::I32)
                }
            };

            shapes.insert(layer.id.clone(), shape);
            kinds.insert(layer.id.clone(), kind);
        }

        let mut consumers: BTreeMap<LayerId, Vec<LayerId>> = self
            .layers
            .iter()
            .map(|l| (l.id.clone(), Vec::new()))
            .collect();
        for layer in &self.layers {
            for input in &layer.inputs {
                consumers.get_mut(input).unwrap().push(layer.id.clone());
            }
        }
        let mut sinks: Vec<&LayerId> = consumers
            .iter()
            .filter(|(_, c)| c.is_empty())
            .map(|(id, _)| id)
            .collect();
        if sinks.len() != 1 {
            let listed = sinks
                .iter()
                .map(|id| id.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::graph(
                listed,
                format!("expected exactly one sink layer, found {}", sinks.len()),
            ));
        }
        let sink = sinks.pop().unwrap().clone();

        Ok(GraphInfo {
            order,
            shapes,
            kinds,
            consumers,
            sink,
            integer,
        })
    }

    /// Depth level of every convolution: 1 + the maximum depth of any
    /// convolution upstream of it. Used to assign per-level activation
    /// bounds; parallel branch convolutions share a level.
    pub fn conv_depths(&self) -> Result<BTreeMap<LayerId, usize>> {
        let index = self.index_by_id()?;
        let order = self.topo_indices(&index)?;
        let mut upstream: BTreeMap<&LayerId, usize> = BTreeMap::new();
        let mut depths = BTreeMap::new();
        for &i in &order {
            let layer = &self.layers[i];
            let below = layer
                .inputs
                .iter()
                .map(|input| upstream[input])
                .max()
                .unwrap_or(0);
            let here = if matches!(layer.op, LayerOp::Conv2d(_)) {
                let depth = below + 1;
                depths.insert(layer.id.clone(), depth);
                depth
            } else {
                below
            };
            upstream.insert(&layer.id, here);
        }
        Ok(depths)
    }
}

fn validate_conv(
    id: &str,
    conv: &Conv2d,
    integer: bool,
    input_kind: TensorKind,
    input_op: Option<&'static str>,
) -> Result<()> {
    let kshape = conv.kernel.shape();
    if kshape.len() != 4 {
        return Err(Error::shape(
            format!("layer '{id}' kernel"),
            "rank 4 [O, I, KH, KW]",
            format!("rank {}", kshape.len()),
        ));
    }
    if kshape.contains(&0) {
        return Err(Error::graph(id, "kernel has a zero dimension"));
    }
    if conv.stride == 0 {
        return Err(Error::graph(id, "stride must be at least 1"));
    }
    if conv.bias.len() != kshape[0] {
        return Err(Error::shape(
            format!("layer '{id}' bias"),
            format!("{} entries", kshape[0]),
            format!("{}", conv.bias.len()),
        ));
    }
    match (&conv.kernel, &conv.bias, integer) {
        (KernelData::Float(_), BiasData::Float(_), false) => {}
        (KernelData::Int(_), BiasData::Int(_), true) => {}
        _ => {
            return Err(Error::graph(
                id,
                "kernel and bias storage must both match the network kind",
            ))
        }
    }
    if integer {
        if conv.batch_norm.is_some() {
            return Err(Error::graph(
                id,
                "integer networks must have batch norm folded away",
            ));
        }
        if input_kind != TensorKind::I8 {
            return Err(Error::graph(
                id,
                format!("conv2d input must be i8, got {input_kind}"),
            ));
        }
        if !matches!(input_op, None | Some("brelu") | Some("concat")) {
            return Err(Error::graph(
                id,
                "integer conv2d input must be the network input, a brelu, or a concat",
            ));
        }
    } else if let Some(bn) = &conv.batch_norm {
        let o = kshape[0];
        if bn.gamma.len() != o || bn.beta.len() != o || bn.mean.len() != o || bn.variance.len() != o {
            return Err(Error::shape(
                format!("layer '{id}' batch norm"),
                format!("{o} entries per parameter"),
                format!(
                    "gamma {}, beta {}, mean {}, variance {}",
                    bn.gamma.len(),
                    bn.beta.len(),
                    bn.mean.len(),
                    bn.variance.len()
                ),
            ));
        }
        if !bn.epsilon.is_finite() || bn.epsilon <= 0.0 {
            return Err(Error::graph(id, "batch norm epsilon must be positive"));
        }
        if bn.variance.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::graph(id, "batch norm variance must be non-negative"));
        }
    }
    Ok(())
}

fn conv_output_shape(id: &str, conv: &Conv2d, input: [usize; 3]) -> Result<[usize; 3]> {
    let kshape = conv.kernel.shape();
    let (o, i, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if i != input[0] {
        return Err(Error::shape(
            format!("layer '{id}' input channels"),
            i.to_string(),
            input[0].to_string(),
        ));
    }
    let h_padded = input[1] + 2 * conv.padding;
    let w_padded = input[2] + 2 * conv.padding;
    if h_padded < kh || w_padded < kw {
        return Err(Error::shape(
            format!("layer '{id}' spatial extent"),
            format!("at least {kh}x{kw} after padding"),
            format!("{h_padded}x{w_padded}"),
        ));
    }
    let oh = (h_padded - kh) / conv.stride + 1;
    let ow = (w_padded - kw) / conv.stride + 1;
    Ok([o, oh, ow])
}
