//! Model file format: a diff-able text header followed by binary tensor
//! blobs.
//!
//! ```text
//! #intnet-model v1
//! kind: float | integer
//! name: <free-form, one line>
//! input: <C>x<H>x<W>
//! input_ratio: <p/q>
//! layer: <id> conv2d in=<ids|-> stride=<n> pad=<n> kernel=@<k> bias=@<k> \
//!        [bn=@<k>,@<k>,@<k>,@<k> bn_eps=<f64>]
//! layer: <id> brelu in=<id> upper=<f64>
//! layer: <id> residual-add in=<id>,<id>
//! layer: <id> concat in=<id>,<id>[,...]
//! layer: <id> rescale in=<id|-> mul=<u32> shift=<u32>
//! quant: <conv-id> delta=<p/q>[;<p/q>...] [h_rf=<f64> h_ri=<i64> mul=<u32>
//!        shift=<u32> max_int=<i64> brelu=<id>]
//! output_ratio: <p/q>          (integer models)
//! max_int: <i64>               (integer models)
//! blobs: <count>
//! data:
//! <binary blobs, concatenated>
//! ```
//!
//! Tensors referenced as `@k` index the blob section in order. Scales are
//! exact rationals; floats use the shortest text that round-trips. A
//! quantization record stores only its independent parameters (weight step,
//! calibrated bounds, requantization stage); every derived scale is rebuilt
//! and cross-checked on load, so a file with inconsistent parameters is
//! rejected with the offending layer named. Saving a loaded model reproduces
//! the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use num::Signed;

use crate::error::{Error, Result};
use crate::int_engine::check_accumulator_bounds;
use crate::ir::{
    BatchNorm, BiasData, BRelu, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR,
};
use crate::quant::{self, ActSeed, MulShift, QuantTable, RecordSeed};
use crate::ratio::{self, Rational};
use crate::tensor::{read_blob_any, AnyTensor, Tensor};

/// A network plus, for integer models, its quantization table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub ir: NetworkIR,
    pub quant: Option<QuantTable>,
}

impl Model {
    pub fn float(ir: NetworkIR) -> Model {
        Model { ir, quant: None }
    }

    pub fn integer(ir: NetworkIR, quant: QuantTable) -> Model {
        Model {
            ir,
            quant: Some(quant),
        }
    }

    pub fn is_integer(&self) -> bool {
        self.quant.is_some()
    }
}

const MARKER: &[u8] = b"\ndata:\n";

/// Serializes a model to its file representation.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let info = model.ir.validate()?;
    if info.integer != model.quant.is_some() {
        return Err(Error::invalid(
            "integer kernels and a quantization table must come together",
        ));
    }

    let mut text = String::from("#intnet-model v1\n");
    let kind = if model.is_integer() { "integer" } else { "float" };
    let _ = writeln!(text, "kind: {kind}");
    if model.ir.name.contains(['\n', '\r']) {
        return Err(Error::invalid("model name must be a single line"));
    }
    let _ = writeln!(text, "name: {}", model.ir.name);
    let [c, h, w] = model.ir.input_shape;
    let _ = writeln!(text, "input: {c}x{h}x{w}");
    let _ = writeln!(text, "input_ratio: {}", ratio::format(&model.ir.input_ratio));

    let mut blobs: Vec<AnyTensor> = Vec::new();
    let mut claim = |t: AnyTensor| -> usize {
        blobs.push(t);
        blobs.len() - 1
    };

    for layer in &model.ir.layers {
        let inputs = if layer.inputs.is_empty() {
            "-".to_string()
        } else {
            layer
                .inputs
                .iter()
                .map(|id| id.as_str())
                .collect::<Vec<_>>()
                .join(",")
        };
        match &layer.op {
            LayerOp::Conv2d(conv) => {
                let kernel = match &conv.kernel {
                    KernelData::Float(t) => claim(AnyTensor::F32(t.clone())),
                    KernelData::Int(t) => claim(AnyTensor::I8(t.clone())),
                };
                let bias = match &conv.bias {
                    BiasData::Float(v) => {
                        claim(AnyTensor::F32(Tensor::new(vec![v.len()], v.clone())?))
                    }
                    BiasData::Int(v) => {
                        claim(AnyTensor::I32(Tensor::new(vec![v.len()], v.clone())?))
                    }
                };
                let _ = write!(
                    text,
                    "layer: {} conv2d in={inputs} stride={} pad={} kernel=@{kernel} bias=@{bias}",
                    layer.id, conv.stride, conv.padding
                );
                if let Some(bn) = &conv.batch_norm {
                    let g = claim(AnyTensor::F32(Tensor::new(vec![bn.gamma.len()], bn.gamma.clone())?));
                    let b = claim(AnyTensor::F32(Tensor::new(vec![bn.beta.len()], bn.beta.clone())?));
                    let m = claim(AnyTensor::F32(Tensor::new(vec![bn.mean.len()], bn.mean.clone())?));
                    let v = claim(AnyTensor::F32(Tensor::new(vec![bn.variance.len()], bn.variance.clone())?));
                    let _ = write!(text, " bn=@{g},@{b},@{m},@{v} bn_eps={}", bn.epsilon);
                }
                text.push('\n');
            }
            LayerOp::BRelu(brelu) => {
                let _ = writeln!(text, "layer: {} brelu in={inputs} upper={}", layer.id, brelu.upper);
            }
            LayerOp::ResidualAdd => {
                let _ = writeln!(text, "layer: {} residual-add in={inputs}", layer.id);
            }
            LayerOp::Concat => {
                let _ = writeln!(text, "layer: {} concat in={inputs}", layer.id);
            }
            LayerOp::Rescale(ms) => {
                let _ = writeln!(
                    text,
                    "layer: {} rescale in={inputs} mul={} shift={}",
                    layer.id, ms.mul, ms.shift
                );
            }
        }
    }

    if let Some(table) = &model.quant {
        for layer in &model.ir.layers {
            let Some(record) = table.record(&layer.id) else {
                continue;
            };
            let delta = if record.delta.windows(2).all(|p| p[0] == p[1]) {
                ratio::format(&record.delta[0])
            } else {
                record
                    .delta
                    .iter()
                    .map(ratio::format)
                    .collect::<Vec<_>>()
                    .join(";")
            };
            let _ = write!(text, "quant: {} delta={delta}", record.layer);
            if let Some(act) = &record.act {
                let _ = write!(
                    text,
                    " h_rf={} h_ri={} mul={} shift={} max_int={} brelu={}",
                    act.h_rf, act.h_ri, act.mul_shift.mul, act.mul_shift.shift, act.max_int, act.brelu
                );
            }
            text.push('\n');
        }
        let _ = writeln!(text, "output_ratio: {}", ratio::format(&table.output_ratio));
        let _ = writeln!(text, "max_int: {}", table.max_int);
    }

    let _ = writeln!(text, "blobs: {}", blobs.len());
    text.push_str("data:\n");

    let mut bytes = text.into_bytes();
    for blob in &blobs {
        blob.write_blob(&mut bytes);
    }
    Ok(bytes)
}

/// Parses a model file, rebuilding and checking all derived quantization
/// state for integer models.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let marker_at = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| Error::parse(0, "missing 'data:' section"))?;
    let header = std::str::from_utf8(&bytes[..marker_at])
        .map_err(|_| Error::parse(0, "header is not valid UTF-8"))?;
    let binary = &bytes[marker_at + MARKER.len()..];

    let mut parser = Parser::default();
    for (idx, line) in header.lines().enumerate() {
        parser.line(idx + 1, line)?;
    }
    parser.finish(binary)
}

/// Writes a model file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

/// Reads a model file.
pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[derive(Default)]
struct Parser {
    kind: Option<String>,
    name: Option<String>,
    input_shape: Option<[usize; 3]>,
    input_ratio: Option<Rational>,
    layers: Vec<(usize, PendingLayer)>,
    seeds: Vec<RecordSeed>,
    output_ratio: Option<Rational>,
    max_int: Option<i64>,
    blob_count: Option<usize>,
}

struct PendingLayer {
    id: LayerId,
    inputs: Vec<LayerId>,
    op: PendingOp,
}

enum PendingOp {
    Conv {
        stride: usize,
        pad: usize,
        kernel: usize,
        bias: usize,
        bn: Option<([usize; 4], f64)>,
    },
    BRelu {
        upper: f64,
    },
    ResidualAdd,
    Concat,
    Rescale(MulShift),
}

fn parse_num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("bad {what} '{s}'")))
}

fn parse_ratio(line: usize, what: &str, s: &str) -> Result<Rational> {
    ratio::parse(s).ok_or_else(|| Error::parse(line, format!("bad {what} '{s}'")))
}

fn parse_blob_ref(line: usize, s: &str) -> Result<usize> {
    let idx = s
        .strip_prefix('@')
        .ok_or_else(|| Error::parse(line, format!("expected '@<index>', got '{s}'")))?;
    parse_num(line, "blob index", idx)
}

/// Splits `key=value` with a fixed expected key.
fn field<'a>(line: usize, token: Option<&'a str>, key: &str) -> Result<&'a str> {
    let token = token.ok_or_else(|| Error::parse(line, format!("missing field '{key}='")))?;
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::parse(line, format!("expected '{key}=...', got '{token}'")))
}

impl Parser {
    fn line(&mut self, lineno: usize, line: &str) -> Result<()> {
        if lineno == 1 {
            if line != "#intnet-model v1" {
                return Err(Error::parse(1, "expected header '#intnet-model v1'"));
            }
            return Ok(());
        }
        if line.is_empty() {
            return Ok(());
        }
        if let Some(rest) = line.strip_prefix("kind: ") {
            if rest != "float" && rest != "integer" {
                return Err(Error::parse(lineno, format!("unknown kind '{rest}'")));
            }
            self.kind = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("name: ") {
            self.name = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("input: ") {
            let dims: Vec<&str> = rest.split('x').collect();
            if dims.len() != 3 {
                return Err(Error::parse(lineno, "input must be <C>x<H>x<W>"));
            }
            self.input_shape = Some([
                parse_num(lineno, "input channels", dims[0])?,
                parse_num(lineno, "input height", dims[1])?,
                parse_num(lineno, "input width", dims[2])?,
            ]);
        } else if let Some(rest) = line.strip_prefix("input_ratio: ") {
            self.input_ratio = Some(parse_ratio(lineno, "input ratio", rest)?);
        } else if let Some(rest) = line.strip_prefix("layer: ") {
            self.layer_line(lineno, rest)?;
        } else if let Some(rest) = line.strip_prefix("quant: ") {
            self.quant_line(lineno, rest)?;
        } else if let Some(rest) = line.strip_prefix("output_ratio: ") {
            self.output_ratio = Some(parse_ratio(lineno, "output ratio", rest)?);
        } else if let Some(rest) = line.strip_prefix("max_int: ") {
            self.max_int = Some(parse_num(lineno, "max_int", rest)?);
        } else if let Some(rest) = line.strip_prefix("blobs: ") {
            self.blob_count = Some(parse_num(lineno, "blob count", rest)?);
        } else {
            return Err(Error::parse(lineno, format!("unrecognized line '{line}'")));
        }
        Ok(())
    }

    fn layer_line(&mut self, lineno: usize, rest: &str) -> Result<()> {
        let mut tokens = rest.split_whitespace();
        let id = LayerId::new(
            tokens
                .next()
                .ok_or_else(|| Error::parse(lineno, "missing layer id"))?,
        );
        let op_name = tokens
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing layer op"))?;
        let in_spec = field(lineno, tokens.next(), "in")?;
        let inputs: Vec<LayerId> = if in_spec == "-" {
            Vec::new()
        } else {
            in_spec.split(',').map(LayerId::new).collect()
        };
        let op = match op_name {
            "conv2d" => {
                let stride = parse_num(lineno, "stride", field(lineno, tokens.next(), "stride")?)?;
                let pad = parse_num(lineno, "pad", field(lineno, tokens.next(), "pad")?)?;
                let kernel = parse_blob_ref(lineno, field(lineno, tokens.next(), "kernel")?)?;
                let bias = parse_blob_ref(lineno, field(lineno, tokens.next(), "bias")?)?;
                let bn = match tokens.next() {
                    None => None,
                    Some(tok) => {
                        let refs = field(lineno, Some(tok), "bn")?;
                        let parts: Vec<&str> = refs.split(',').collect();
                        if parts.len() != 4 {
                            return Err(Error::parse(lineno, "bn needs four blob references"));
                        }
                        let mut ids = [0usize; 4];
                        for (slot, part) in ids.iter_mut().zip(&parts) {
                            *slot = parse_blob_ref(lineno, part)?;
                        }
                        let eps = parse_num(lineno, "bn_eps", field(lineno, tokens.next(), "bn_eps")?)?;
                        Some((ids, eps))
                    }
                };
                PendingOp::Conv {
                    stride,
                    pad,
                    kernel,
                    bias,
                    bn,
                }
            }
            "brelu" => {
                let upper = parse_num(lineno, "upper", field(lineno, tokens.next(), "upper")?)?;
                PendingOp::BRelu { upper }
            }
            "residual-add" => PendingOp::ResidualAdd,
            "concat" => PendingOp::Concat,
            "rescale" => {
                let mul = parse_num(lineno, "mul", field(lineno, tokens.next(), "mul")?)?;
                let shift = parse_num(lineno, "shift", field(lineno, tokens.next(), "shift")?)?;
                let ms = MulShift::new(mul, shift)
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                PendingOp::Rescale(ms)
            }
            other => return Err(Error::parse(lineno, format!("unknown layer op '{other}'"))),
        };
        if let Some(extra) = tokens.next() {
            return Err(Error::parse(lineno, format!("unexpected token '{extra}'")));
        }
        self.layers.push((lineno, PendingLayer { id, inputs, op }));
        Ok(())
    }

    fn quant_line(&mut self, lineno: usize, rest: &str) -> Result<()> {
        let mut tokens = rest.split_whitespace();
        let layer = LayerId::new(
            tokens
                .next()
                .ok_or_else(|| Error::parse(lineno, "missing record layer id"))?,
        );
        let delta_spec = field(lineno, tokens.next(), "delta")?;
        let delta: Vec<Rational> = delta_spec
            .split(';')
            .map(|s| parse_ratio(lineno, "delta", s))
            .collect::<Result<_>>()?;
        if delta.iter().any(|d| !d.is_positive()) {
            return Err(Error::parse(lineno, "delta entries must be positive"));
        }
        let act = match tokens.next() {
            None => None,
            Some(tok) => {
                let h_rf = parse_num(lineno, "h_rf", field(lineno, Some(tok), "h_rf")?)?;
                let h_ri = parse_num(lineno, "h_ri", field(lineno, tokens.next(), "h_ri")?)?;
                let mul = parse_num(lineno, "mul", field(lineno, tokens.next(), "mul")?)?;
                let shift = parse_num(lineno, "shift", field(lineno, tokens.next(), "shift")?)?;
                let max_int = parse_num(lineno, "max_int", field(lineno, tokens.next(), "max_int")?)?;
                let brelu = LayerId::new(field(lineno, tokens.next(), "brelu")?);
                let mul_shift = MulShift::new(mul, shift)
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                Some(ActSeed {
                    brelu,
                    h_rf,
                    h_ri,
                    mul_shift,
                    max_int,
                })
            }
        };
        if let Some(extra) = tokens.next() {
            return Err(Error::parse(lineno, format!("unexpected token '{extra}'")));
        }
        self.seeds.push(RecordSeed { layer, delta, act });
        Ok(())
    }

    fn finish(self, binary: &[u8]) -> Result<Model> {
        let kind = self.kind.ok_or_else(|| Error::parse(0, "missing 'kind:' line"))?;
        let name = self.name.ok_or_else(|| Error::parse(0, "missing 'name:' line"))?;
        let input_shape = self
            .input_shape
            .ok_or_else(|| Error::parse(0, "missing 'input:' line"))?;
        let input_ratio = self
            .input_ratio
            .ok_or_else(|| Error::parse(0, "missing 'input_ratio:' line"))?;
        let blob_count = self
            .blob_count
            .ok_or_else(|| Error::parse(0, "missing 'blobs:' line"))?;

        let mut blobs = Vec::with_capacity(blob_count);
        let mut cursor = 0;
        for _ in 0..blob_count {
            blobs.push(Some(read_blob_any(binary, &mut cursor)?));
        }
        if cursor != binary.len() {
            return Err(Error::blob(format!(
                "{} bytes of trailing data after the declared blobs",
                binary.len() - cursor
            )));
        }

        let mut take = |lineno: usize, idx: usize| -> Result<AnyTensor> {
            let slot = blobs
                .get_mut(idx)
                .ok_or_else(|| Error::parse(lineno, format!("blob @{idx} out of range")))?;
            slot.take()
                .ok_or_else(|| Error::parse(lineno, format!("blob @{idx} referenced twice")))
        };

        let integer = kind == "integer";
        let mut layers = Vec::with_capacity(self.layers.len());
        for (lineno, pending) in self.layers {
            let op = match pending.op {
                PendingOp::Conv {
                    stride,
                    pad,
                    kernel,
                    bias,
                    bn,
                } => {
                    let kernel = match (take(lineno, kernel)?, integer) {
                        (AnyTensor::F32(t), false) => KernelData::Float(t),
                        (AnyTensor::I8(t), true) => KernelData::Int(t),
                        (t, _) => {
                            return Err(Error::parse(
                                lineno,
                                format!("kernel blob is {} which does not match kind '{kind}'", t.kind()),
                            ))
                        }
                    };
                    let bias = match (take(lineno, bias)?, integer) {
                        (AnyTensor::F32(t), false) if t.rank() == 1 => BiasData::Float(t.into_data()),
                        (AnyTensor::I32(t), true) if t.rank() == 1 => BiasData::Int(t.into_data()),
                        (t, _) => {
                            return Err(Error::parse(
                                lineno,
                                format!("bias blob must be rank-1 and match kind, got {} rank {}", t.kind(), t.rank()),
                            ))
                        }
                    };
                    let batch_norm = match bn {
                        None => None,
                        Some((ids, epsilon)) => {
                            let mut params = Vec::with_capacity(4);
                            for idx in ids {
                                match take(lineno, idx)? {
                                    AnyTensor::F32(t) if t.rank() == 1 => params.push(t.into_data()),
                                    t => {
                                        return Err(Error::parse(
                                            lineno,
                                            format!("bn blob must be rank-1 f32, got {}", t.kind()),
                                        ))
                                    }
                                }
                            }
                            let variance = params.pop().unwrap();
                            let mean = params.pop().unwrap();
                            let beta = params.pop().unwrap();
                            let gamma = params.pop().unwrap();
                            Some(BatchNorm {
                                gamma,
                                beta,
                                mean,
                                variance,
                                epsilon,
                            })
                        }
                    };
                    LayerOp::Conv2d(Conv2d {
                        kernel,
                        bias,
                        stride,
                        padding: pad,
                        batch_norm,
                    })
                }
                PendingOp::BRelu { upper } => LayerOp::BRelu(BRelu { upper }),
                PendingOp::ResidualAdd => LayerOp::ResidualAdd,
                PendingOp::Concat => LayerOp::Concat,
                PendingOp::Rescale(ms) => LayerOp::Rescale(ms),
            };
            layers.push(Layer {
                id: pending.id,
                inputs: pending.inputs,
                op,
            });
        }
        if let Some(unused) = blobs.iter().position(|b| b.is_some()) {
            return Err(Error::parse(0, format!("blob @{unused} is never referenced")));
        }

        let ir = NetworkIR {
            name,
            input_shape,
            input_ratio,
            layers,
        };
        let info = ir.validate()?;
        if info.integer != integer {
            return Err(Error::parse(
                0,
                format!("kind '{kind}' does not match the kernel storage"),
            ));
        }

        if !integer {
            if !self.seeds.is_empty() || self.output_ratio.is_some() || self.max_int.is_some() {
                return Err(Error::parse(0, "float models must not carry quantization lines"));
            }
            return Ok(Model::float(ir));
        }

        let max_int = self.max_int.ok_or_else(|| Error::parse(0, "missing 'max_int:' line"))?;
        let declared = self
            .output_ratio
            .ok_or_else(|| Error::parse(0, "missing 'output_ratio:' line"))?;
        let mut seeds = self.seeds;
        for seed in &mut seeds {
            // A single stored step stands for every output channel.
            if seed.delta.len() == 1 {
                if let Some(layer) = ir.layer(&seed.layer) {
                    if let LayerOp::Conv2d(conv) = &layer.op {
                        let o = conv.kernel.out_channels();
                        seed.delta = vec![seed.delta[0].clone(); o];
                    }
                }
            }
        }
        let table = quant::rebuild_table(&ir, seeds, max_int)?;
        if table.output_ratio != declared {
            return Err(Error::parse(
                0,
                format!(
                    "declared output_ratio {} does not match the propagated value {}",
                    ratio::format(&declared),
                    ratio::format(&table.output_ratio)
                ),
            ));
        }
        check_accumulator_bounds(&ir, &table)?;
        Ok(Model::integer(ir, table))
    }
}
