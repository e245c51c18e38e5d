//! Integer-only execution.
//!
//! Every arithmetic operation in this engine is integer: i8 activations and
//! weights, i32 accumulators, and multiply-shift requantization in i64.
//! No value is ever converted through a float.
//!
//! Overflow is ruled out statically rather than handled dynamically:
//! [`check_accumulator_bounds`] propagates a worst-case magnitude through
//! the graph before execution and rejects any network whose convolutions
//! could exceed the accumulator budget. Within a checked network, arithmetic
//! uses plain i32/i64 operations (debug builds additionally trap on any
//! overflow, which would indicate a bug in the bound itself).
//!
//! Results are bit-identical regardless of thread count or work order: each
//! output plane is computed independently and assembled in a fixed order.
//! The `schedule_seed` option permutes the order in which planes are
//! processed, which must never change the result. Thread count is controlled
//! by running the engine inside a configured rayon thread pool.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{BiasData, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR};
use crate::model_io::Model;
use crate::quant::{renormalize_input, ActQuant, MulShift, QuantTable};
use crate::ratio::Rational;
use crate::tensor::{concat_channels, saturate, AnyTensor, Tensor};

/// Largest worst-case magnitude a convolution accumulator may reach. One
/// power of two below `i32::MAX / 2`, so the sum of two convolution outputs
/// in a residual addition still fits in i32.
pub const ACC_LIMIT: i64 = (1 << 30) - 1;

/// Execution options. Thread count is taken from the ambient rayon pool.
#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ExecOptions {
    /// Seed for the plane processing order. Any seed yields identical
    /// output; varying it exercises scheduling independence.
    pub schedule_seed: u64,
    /// Record every layer's output tensor.
    pub record_trace: bool,
}


/// Result of an integer forward pass.
#[derive(Debug, Clone)]
pub struct IntRun {
    /// Sink output: i32 for a convolution or residual-add sink, i8 for a
    /// brelu or concat sink.
    pub output: AnyTensor,
    /// Scale of the output: float values are `output / output_ratio`.
    pub output_ratio: Rational,
    /// Per-layer outputs in topological order, if requested.
    pub trace: Option<Vec<(LayerId, AnyTensor)>>,
}

/// Sizes the shared worker pool used by both engines. Must run before the
/// first forward pass; the pool cannot be resized once started.
pub fn set_worker_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Maps integer values back to floats: `value / ratio`. Float tensors pass
/// through unchanged.
pub fn dequantize(t: &AnyTensor, ratio: &Rational) -> Tensor<f32> {
    let scale = crate::ratio::to_f64(ratio);
    match t {
        AnyTensor::F32(t) => t.clone(),
        AnyTensor::I8(t) => t.map(|v| (v as f64 / scale) as f32),
        AnyTensor::I32(t) => t.map(|v| (v as f64 / scale) as f32),
        AnyTensor::U8(t) => t.map(|v| (v as f64 / scale) as f32),
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn shuffled(count: usize, seed: u64) -> Vec<usize> {
    let mut items: Vec<usize> = (0..count).collect();
    let mut state = seed;
    for i in (1..count).rev() {
        let j = (splitmix64(&mut state) % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
    items
}

/// 2-d convolution over i8 data with i32 accumulation and zero padding.
pub fn conv2d_i8(
    input: &Tensor<i8>,
    kernel: &Tensor<i8>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<i32>> {
    conv2d_i8_scheduled(input, kernel, stride, padding, 0)
}

/// [`conv2d_i8`] with an explicit plane-order seed. The seed only permutes
/// the processing order of independent output planes; the result is the
/// same for every seed.
pub fn conv2d_i8_scheduled(
    input: &Tensor<i8>,
    kernel: &Tensor<i8>,
    stride: usize,
    padding: usize,
    schedule_seed: u64,
) -> Result<Tensor<i32>> {
    if input.rank() != 4 {
        return Err(Error::shape("conv2d input", "rank 4", format!("rank {}", input.rank())));
    }
    if kernel.rank() != 4 {
        return Err(Error::shape("conv2d kernel", "rank 4", format!("rank {}", kernel.rank())));
    }
    let (n, ci, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, ki, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if ki != ci {
        return Err(Error::shape("conv2d input channels", ki.to_string(), ci.to_string()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d spatial extent",
            format!("at least {kh}x{kw} after padding"),
            format!("{}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let x = input.data();
    let k = kernel.data();
    let compute_plane = |plane: usize| -> Vec<i32> {
        let (bn, oc) = (plane / o, plane % o);
        let mut dst = vec![0i32; oh * ow];
        for out_y in 0..oh {
            for out_x in 0..ow {
                let mut acc = 0i32;
                let base_y = out_y * stride;
                let base_x = out_x * stride;
                for in_c in 0..ci {
                    for ky in 0..kh {
                        let in_y = base_y + ky;
                        if in_y < padding || in_y >= h + padding {
                            continue;
                        }
                        let iy = in_y - padding;
                        for kx in 0..kw {
                            let in_x = base_x + kx;
                            if in_x < padding || in_x >= w + padding {
                                continue;
                            }
                            let ix = in_x - padding;
                            let xv = x[((bn * ci + in_c) * h + iy) * w + ix] as i32;
                            let kv = k[((oc * ci + in_c) * kh + ky) * kw + kx] as i32;
                            acc += xv * kv;
                        }
                    }
                }
                dst[out_y * ow + out_x] = acc;
            }
        }
        dst
    };

    // Planes are computed in a (possibly shuffled, possibly parallel) order
    // and placed by index, so the output is independent of scheduling.
    let order = shuffled(n * o, schedule_seed);
    let planes: Vec<(usize, Vec<i32>)> = order
        .par_iter()
        .map(|&plane| (plane, compute_plane(plane)))
        .collect();
    let mut out = vec![0i32; n * o * oh * ow];
    let plane_len = oh * ow;
    for (plane, values) in planes {
        out[plane * plane_len..(plane + 1) * plane_len].copy_from_slice(&values);
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Adds a per-output-channel bias to a convolution result.
pub fn add_bias(y: &Tensor<i32>, bias: &[i32]) -> Result<Tensor<i32>> {
    if y.rank() != 4 || y.shape()[1] != bias.len() {
        return Err(Error::shape(
            "bias add",
            format!("rank 4 with {} channels", bias.len()),
            format!("{:?}", y.shape()),
        ));
    }
    let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let plane = h * w;
    let mut out = y.clone();
    for bi in 0..n {
        for (ci, &b) in bias.iter().enumerate() {
            let start = (bi * c + ci) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Bounded ReLU with requantization: clip the accumulator to `[0, h_i]`,
/// then scale by `mul / 2^shift` with round-to-nearest. The clip bound is
/// anchored so the result never exceeds `max_int`.
pub fn brelu_requant(y: &Tensor<i32>, h_i: i64, mul_shift: MulShift, max_int: i64) -> Tensor<i8> {
    y.map(|v| {
        let clipped = saturate(v as i64, 0, h_i);
        let q = mul_shift.apply(clipped);
        assert!(
            (0..=max_int).contains(&q),
            "requantized activation {q} escapes [0, {max_int}]"
        );
        q as i8
    })
}

/// Elementwise sum of two i32 tensors of equal shape.
pub fn residual_add_i32(a: &Tensor<i32>, b: &Tensor<i32>) -> Result<Tensor<i32>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual add",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let sum = x as i64 + y as i64;
            assert!(
                sum >= i32::MIN as i64 && sum <= i32::MAX as i64,
                "residual sum {sum} escapes i32"
            );
            sum as i32
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Applies a multiply-shift stage elementwise.
pub fn rescale_i32(t: &Tensor<i32>, mul_shift: MulShift) -> Tensor<i32> {
    t.map(|v| {
        let scaled = mul_shift.apply(v as i64);
        assert!(
            scaled >= i32::MIN as i64 && scaled <= i32::MAX as i64,
            "rescaled value {scaled} escapes i32"
        );
        scaled as i32
    })
}

/// Propagates worst-case magnitudes through an integer network and rejects
/// it if any accumulator could overflow. Returns the per-layer bounds.
pub fn check_accumulator_bounds(
    ir: &NetworkIR,
    table: &QuantTable,
) -> Result<BTreeMap<LayerId, i64>> {
    let order = ir.topo_order()?;
    let mut bounds: BTreeMap<LayerId, i64> = BTreeMap::new();
    for id in &order {
        let layer = ir.layer(id).expect("ordered layer");
        let input_bound = |k: usize| -> i64 {
            if layer.inputs.is_empty() {
                128
            } else {
                bounds[&layer.inputs[k]]
            }
        };
        let bound = match &layer.op {
            LayerOp::Conv2d(Conv2d { kernel, bias, .. }) => {
                let kshape = kernel.shape();
                let taps = (kshape[1] * kshape[2] * kshape[3]) as i64;
                let max_bias = match bias {
                    BiasData::Int(b) => b.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0),
                    BiasData::Float(_) => {
                        return Err(Error::graph(id.as_str(), "float bias in integer network"))
                    }
                };
                let worst = taps * input_bound(0) * 127 + max_bias;
                if worst > ACC_LIMIT {
                    return Err(Error::overflow(format!(
                        "layer '{id}': worst-case accumulator {worst} exceeds limit {ACC_LIMIT}; \
                         the kernel is too large for 8-bit integer accumulation"
                    )));
                }
                worst
            }
            LayerOp::BRelu(_) => {
                let record = table
                    .record_for_brelu(&layer.id)
                    .ok_or_else(|| Error::graph(id.as_str(), "brelu has no quantization record"))?;
                record.act.as_ref().expect("claimed brelu").max_int
            }
            LayerOp::ResidualAdd => input_bound(0) + input_bound(1),
            LayerOp::Concat => (0..layer.inputs.len()).map(input_bound).max().unwrap(),
            LayerOp::Rescale(ms) => ms.apply(input_bound(0)),
        };
        if bound > i32::MAX as i64 {
            return Err(Error::overflow(format!(
                "layer '{id}': worst-case magnitude {bound} exceeds the i32 range"
            )));
        }
        bounds.insert(id.clone(), bound);
    }
    Ok(bounds)
}

enum Value {
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl Value {
    fn as_i8(&self) -> &Tensor<i8> {
        match self {
            Value::I8(t) => t,
            Value::I32(_) => unreachable!("kind-checked by validation"),
        }
    }

    fn as_i32(&self) -> &Tensor<i32> {
        match self {
            Value::I32(t) => t,
            Value::I8(_) => unreachable!("kind-checked by validation"),
        }
    }

    fn widen(&self) -> Tensor<i32> {
        match self {
            Value::I8(t) => t.map(|v| v as i32),
            Value::I32(t) => t.clone(),
        }
    }

    fn to_any(&self) -> AnyTensor {
        match self {
            Value::I8(t) => AnyTensor::I8(t.clone()),
            Value::I32(t) => AnyTensor::I32(t.clone()),
        }
    }
}

/// Runs an integer model on raw 8-bit input of shape `[N, C, H, W]`.
pub fn forward_int(model: &Model, raw: &Tensor<u8>, opts: &ExecOptions) -> Result<IntRun> {
    let table = model
        .quant
        .as_ref()
        .ok_or_else(|| Error::invalid("integer engine requires a quantization table"))?;
    let info = model.ir.validate()?;
    if !info.integer {
        return Err(Error::invalid("integer engine requires integer kernels"));
    }
    if raw.rank() != 4 {
        return Err(Error::shape("network input", "rank 4 [N, C, H, W]", format!("rank {}", raw.rank())));
    }
    let s = raw.shape();
    if [s[1], s[2], s[3]] != model.ir.input_shape {
        return Err(Error::shape(
            "network input",
            format!("{:?}", model.ir.input_shape),
            format!("[{}, {}, {}]", s[1], s[2], s[3]),
        ));
    }
    check_accumulator_bounds(&model.ir, table)?;

    let acts: BTreeMap<&LayerId, &ActQuant> = table
        .records
        .iter()
        .filter_map(|r| r.act.as_ref().map(|a| (&a.brelu, a)))
        .collect();

    let network_input = Value::I8(renormalize_input(raw));
    let mut values: BTreeMap<LayerId, Value> = BTreeMap::new();
    let mut trace: Vec<(LayerId, AnyTensor)> = Vec::new();

    for &i in &info.order {
        let layer = &model.ir.layers[i];
        let value = eval_layer(layer, &network_input, &values, &acts, opts)?;
        if opts.record_trace {
            trace.push((layer.id.clone(), value.to_any()));
        }
        values.insert(layer.id.clone(), value);
    }

    Ok(IntRun {
        output: values[&info.sink].to_any(),
        output_ratio: table.output_ratio.clone(),
        trace: opts.record_trace.then_some(trace),
    })
}

fn eval_layer(
    layer: &Layer,
    network_input: &Value,
    values: &BTreeMap<LayerId, Value>,
    acts: &BTreeMap<&LayerId, &ActQuant>,
    opts: &ExecOptions,
) -> Result<Value> {
    let arg = |k: usize| -> &Value {
        if layer.inputs.is_empty() {
            network_input
        } else {
            &values[&layer.inputs[k]]
        }
    };
    match &layer.op {
        LayerOp::Conv2d(Conv2d {
            kernel: KernelData::Int(kernel),
            bias: BiasData::Int(bias),
            stride,
            padding,
            ..
        }) => {
            let y = conv2d_i8_scheduled(arg(0).as_i8(), kernel, *stride, *padding, opts.schedule_seed)?;
            Ok(Value::I32(add_bias(&y, bias)?))
        }
        LayerOp::Conv2d(_) => unreachable!("validated integer network"),
        LayerOp::BRelu(_) => {
            let act = acts[&layer.id];
            Ok(Value::I8(brelu_requant(
                arg(0).as_i32(),
                act.h_i,
                act.mul_shift,
                act.max_int,
            )))
        }
        LayerOp::ResidualAdd => Ok(Value::I32(residual_add_i32(arg(0).as_i32(), arg(1).as_i32())?)),
        LayerOp::Concat => {
            let tensors: Vec<&Tensor<i8>> = (0..layer.inputs.len()).map(|k| arg(k).as_i8()).collect();
            Ok(Value::I8(concat_channels(&tensors)?))
        }
        LayerOp::Rescale(ms) => Ok(Value::I32(rescale_i32(&arg(0).widen(), *ms))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::BRelu;
    use crate::quant::{derive_mul_shift, rebuild_table, ActSeed, RecordSeed};
    use crate::ratio;

    fn pseudo_i8(len: usize, seed: u64, cap: i8) -> Vec<i8> {
        let mut state = seed | 1;
        (0..len)
            .map(|_| {
                let r = splitmix64(&mut state);
                ((r % (2 * cap as u64 + 1)) as i64 - cap as i64) as i8
            })
            .collect()
    }

    /// Independent convolution oracle with i64 accumulation and a different
    /// loop nesting. Must agree exactly.
    fn conv_oracle(input: &Tensor<i8>, kernel: &Tensor<i8>, stride: usize, padding: usize) -> Tensor<i32> {
        let (n, ci, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (o, _, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::filled(vec![n, o, oh, ow], 0i32).unwrap();
        for ky in 0..kh {
            for kx in 0..kw {
                for bn in 0..n {
                    for oc in 0..o {
                        for ic in 0..ci {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let acc = out.at4(bn, oc, oy, ox) as i64
                                        + input.at4(bn, ic, iy as usize, ix as usize) as i64
                                            * kernel.at4(oc, ic, ky, kx) as i64;
                                    out.set4(bn, oc, oy, ox, i32::try_from(acc).unwrap());
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_independent_oracle_exactly() {
        for (ci, o, h, w, kh, stride, pad, seed) in [
            (1usize, 2usize, 6usize, 6usize, 3usize, 1usize, 1usize, 7u64),
            (3, 4, 8, 5, 3, 1, 1, 11),
            (2, 3, 9, 9, 5, 2, 2, 13),
            (4, 2, 7, 7, 1, 1, 0, 17),
        ] {
            let input = Tensor::new(vec![2, ci, h, w], pseudo_i8(2 * ci * h * w, seed, 127)).unwrap();
            let kernel = Tensor::new(vec![o, ci, kh, kh], pseudo_i8(o * ci * kh * kh, seed + 1, 127)).unwrap();
            let got = conv2d_i8(&input, &kernel, stride, pad).unwrap();
            let want = conv_oracle(&input, &kernel, stride, pad);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn conv_hand_example() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1i8, -2, 3, -4]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 2, 2], vec![10i8, 20, 30, 40]).unwrap();
        let out = conv2d_i8(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out.data(), &[10 - 2 * 20 + 3 * 30 - 4 * 40]);
    }

    #[test]
    fn schedule_seed_never_changes_results() {
        let input = Tensor::new(vec![2, 3, 10, 10], pseudo_i8(600, 3, 127)).unwrap();
        let kernel = Tensor::new(vec![8, 3, 3, 3], pseudo_i8(216, 5, 127)).unwrap();
        let baseline = conv2d_i8_scheduled(&input, &kernel, 1, 1, 0).unwrap();
        for seed in [1u64, 42, u64::MAX] {
            assert_eq!(conv2d_i8_scheduled(&input, &kernel, 1, 1, seed).unwrap(), baseline);
        }
    }

    #[test]
    fn requant_matches_hand_example_and_clips() {
        let ms = MulShift::new(13872, 15).unwrap();
        let y = Tensor::new(vec![1, 1, 1, 3], vec![200i32, -50, 400]).unwrap();
        let v = brelu_requant(&y, 300, ms, 127);
        // 200 * 13872 / 2^15 = 84.67 -> 85; negatives clip to 0;
        // 400 clips to 300 -> 127.
        assert_eq!(v.data(), &[85, 0, 127]);
    }

    #[test]
    fn requant_is_monotone_and_bounded() {
        let ms = derive_mul_shift(977, 63).unwrap();
        let y: Vec<i32> = (-100..1100).step_by(7).collect();
        let t = Tensor::new(vec![1, 1, 1, y.len()], y.clone()).unwrap();
        let v = brelu_requant(&t, 977, ms, 63);
        let mut last = i8::MIN;
        for &q in v.data() {
            assert!((0..=63).contains(&(q as i64)));
            assert!(q >= last);
            last = q;
        }
        // The top of the clip range lands exactly on max_int.
        let top = Tensor::new(vec![1, 1, 1, 1], vec![977i32]).unwrap();
        assert_eq!(brelu_requant(&top, 977, ms, 63).data(), &[63]);
    }

    #[test]
    fn rescale_rounds_away_from_zero_for_negatives() {
        let ms = MulShift::new(32768, 16).unwrap(); // scale 1/2
        let t = Tensor::new(vec![1, 1, 1, 4], vec![5i32, -5, 85, -85]).unwrap();
        assert_eq!(rescale_i32(&t, ms).data(), &[3, -3, 43, -43]);
    }

    fn tiny_int_model() -> Model {
        let c1_kernel = Tensor::new(vec![4, 1, 3, 3], pseudo_i8(36, 21, 127)).unwrap();
        let c2_kernel = Tensor::new(vec![2, 4, 1, 1], pseudo_i8(8, 23, 127)).unwrap();
        let ir = NetworkIR {
            name: "tiny int".into(),
            input_shape: [1, 6, 6],
            input_ratio: ratio::from_i64(256),
            layers: vec![
                Layer {
                    id: LayerId::new("c1"),
                    inputs: vec![],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Int(c1_kernel),
                        bias: BiasData::Int(vec![100, -50, 0, 25]),
                        stride: 1,
                        padding: 1,
                        batch_norm: None,
                    }),
                },
                Layer {
                    id: LayerId::new("r1"),
                    inputs: vec![LayerId::new("c1")],
                    op: LayerOp::BRelu(BRelu { upper: 0.02 }),
                },
                Layer {
                    id: LayerId::new("c2"),
                    inputs: vec![LayerId::new("r1")],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Int(c2_kernel),
                        bias: BiasData::Int(vec![0, 10]),
                        stride: 1,
                        padding: 0,
                        batch_norm: None,
                    }),
                },
            ],
        };
        // ratio_x = 256, delta = 1/100 -> ratio_y = 25600.
        let seeds = vec![
            RecordSeed {
                layer: LayerId::new("c1"),
                delta: vec![ratio::new(1, 100); 4],
                act: Some(ActSeed {
                    brelu: LayerId::new("r1"),
                    h_rf: 0.02,
                    h_ri: 512,
                    mul_shift: derive_mul_shift(512, 127).unwrap(),
                    max_int: 127,
                }),
            },
            RecordSeed {
                layer: LayerId::new("c2"),
                delta: vec![ratio::new(1, 50); 2],
                act: None,
            },
        ];
        let table = rebuild_table(&ir, seeds, 127).unwrap();
        Model::integer(ir, table)
    }

    #[test]
    fn forward_is_identical_across_threads_and_schedules() {
        let model = tiny_int_model();
        let raw = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|v| (v * 3 + 11) as u8).collect()).unwrap();
        let baseline = forward_int(&model, &raw, &ExecOptions::default()).unwrap();
        match &baseline.output {
            AnyTensor::I32(t) => assert_eq!(t.shape(), &[2, 2, 6, 6]),
            other => panic!("expected i32 sink, got {}", other.kind()),
        }
        for threads in [1usize, 2, 4] {
            for seed in [0u64, 1, 999] {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap();
                let run = pool.install(|| {
                    forward_int(
                        &model,
                        &raw,
                        &ExecOptions {
                            schedule_seed: seed,
                            record_trace: false,
                        },
                    )
                    .unwrap()
                });
                assert_eq!(run.output, baseline.output, "threads={threads} seed={seed}");
            }
        }
    }

    #[test]
    fn trace_reports_every_layer_with_expected_kinds() {
        let model = tiny_int_model();
        let raw = Tensor::new(vec![1, 1, 6, 6], vec![140u8; 36]).unwrap();
        let run = forward_int(
            &model,
            &raw,
            &ExecOptions {
                schedule_seed: 0,
                record_trace: true,
            },
        )
        .unwrap();
        let trace = run.trace.unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace[0].0, LayerId::new("c1"));
        assert!(matches!(trace[0].1, AnyTensor::I32(_)));
        assert!(matches!(trace[1].1, AnyTensor::I8(_)));
        assert!(matches!(trace[2].1, AnyTensor::I32(_)));
    }

    #[test]
    fn accumulator_bound_rejects_oversized_kernels() {
        // 256 input channels of 17x17 taps: 256*17*17*128*127 ~ 1.2e9
        // exceeds the 2^30 - 1 accumulator budget.
        let big = Tensor::filled(vec![1, 256, 17, 17], 127i8).unwrap();
        let ir = NetworkIR {
            name: "big".into(),
            input_shape: [256, 17, 17],
            input_ratio: ratio::from_i64(256),
            layers: vec![Layer {
                id: LayerId::new("c1"),
                inputs: vec![],
                op: LayerOp::Conv2d(Conv2d {
                    kernel: KernelData::Int(big),
                    bias: BiasData::Int(vec![0]),
                    stride: 1,
                    padding: 0,
                    batch_norm: None,
                }),
            }],
        };
        let seeds = vec![RecordSeed {
            layer: LayerId::new("c1"),
            delta: vec![ratio::new(1, 100)],
            act: None,
        }];
        let table = rebuild_table(&ir, seeds, 127).unwrap();
        let err = check_accumulator_bounds(&ir, &table).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let model = tiny_int_model();
        let raw = Tensor::new(vec![1, 1, 5, 5], vec![0u8; 25]).unwrap();
        assert!(forward_int(&model, &raw, &ExecOptions::default()).is_err());
    }
}
