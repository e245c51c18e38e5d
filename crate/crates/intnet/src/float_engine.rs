//! Float reference execution.
//!
//! This engine defines the numeric ground truth the integer engine is
//! compared against, so its arithmetic is pinned down: convolutions
//! accumulate in `f32` with a fixed summation order (bias first, then input
//! channel, kernel row, kernel column), as separate multiply and add
//! operations. Zero padding contributes nothing to a sum. Results are
//! therefore bit-identical across runs, thread counts, and platforms with
//! IEEE-754 `f32`.
//!
//! Parallelism is per independent output plane and never changes any
//! per-element summation order. Callers control the thread count by running
//! the engine inside a configured rayon thread pool.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{BatchNorm, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR};
use crate::tensor::{concat_channels, Tensor};

/// Result of a float forward pass.
#[derive(Debug, Clone)]
pub struct FloatRun {
    pub output: Tensor<f32>,
    /// Input tensor of each bounded ReLU, keyed by the brelu's layer id.
    /// Populated only when taps are requested; bound calibration reads these.
    pub pre_activations: BTreeMap<LayerId, Tensor<f32>>,
}

/// 2-d convolution with zero padding over `[N, C, H, W]` input and
/// `[O, I, KH, KW]` kernel.
pub fn conv2d_f32(
    input: &Tensor<f32>,
    kernel: &Tensor<f32>,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>> {
    let (n, ci, h, w) = input_dims(input)?;
    if kernel.rank() != 4 {
        return Err(Error::shape("conv2d kernel", "rank 4", format!("rank {}", kernel.rank())));
    }
    let (o, ki, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if ki != ci {
        return Err(Error::shape("conv2d input channels", ki.to_string(), ci.to_string()));
    }
    if bias.len() != o {
        return Err(Error::shape("conv2d bias", o.to_string(), bias.len().to_string()));
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
    let mut out = vec![0.0f32; n * o * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, dst)| {
        let (bn, oc) = (plane / o, plane % o);
        for out_y in 0..oh {
            for out_x in 0..ow {
                let mut acc = bias[oc];
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
                            let xv = x[((bn * ci + in_c) * h + iy) * w + ix];
                            let kv = k[((oc * ci + in_c) * kh + ky) * kw + kx];
                            acc += xv * kv;
                        }
                    }
                }
                dst[out_y * ow + out_x] = acc;
            }
        }
    });
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Per-channel batch normalization over `[N, C, H, W]`.
pub fn apply_batchnorm(input: &Tensor<f32>, bn: &BatchNorm) -> Result<Tensor<f32>> {
    let (n, c, h, w) = input_dims(input)?;
    if bn.gamma.len() != c {
        return Err(Error::shape("batch norm", format!("{c} channels"), bn.gamma.len().to_string()));
    }
    let mut out = input.clone();
    let plane = h * w;
    for bi in 0..n {
        for ci in 0..c {
            let scale = bn.gamma[ci] as f64 / (bn.variance[ci] as f64 + bn.epsilon).sqrt();
            let shift = bn.beta[ci] as f64 - bn.mean[ci] as f64 * scale;
            let start = (bi * c + ci) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = (*v as f64 * scale + shift) as f32;
            }
        }
    }
    Ok(out)
}

/// Bounded ReLU: `min(max(x, 0), upper)`. An infinite `upper` leaves the
/// positive side unclipped.
pub fn brelu_f32(input: &Tensor<f32>, upper: f64) -> Tensor<f32> {
    let cap = upper as f32;
    input.map(|v| v.max(0.0).min(cap))
}

/// Elementwise sum of two equally shaped tensors.
pub fn residual_add_f32(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
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
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn input_dims<T: crate::tensor::Element>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape("activation tensor", "rank 4 [N, C, H, W]", format!("rank {}", t.rank())));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Runs a float network on a `[N, C, H, W]` input. With `record_taps` set,
/// the returned run also carries every bounded ReLU's input tensor.
pub fn forward_f32(ir: &NetworkIR, input: &Tensor<f32>, record_taps: bool) -> Result<FloatRun> {
    let info = ir.validate()?;
    if info.integer {
        return Err(Error::invalid("float engine requires a float network"));
    }
    let (_, c, h, w) = input_dims(input)?;
    if [c, h, w] != ir.input_shape {
        return Err(Error::shape(
            "network input",
            format!("{:?}", ir.input_shape),
            format!("[{c}, {h}, {w}]"),
        ));
    }
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("network input"));
    }

    let mut values: BTreeMap<LayerId, Tensor<f32>> = BTreeMap::new();
    let mut pre_activations = BTreeMap::new();
    for &i in &info.order {
        let layer = &ir.layers[i];
        let value = eval_layer(layer, input, &values, record_taps, &mut pre_activations)?;
        values.insert(layer.id.clone(), value);
    }
    Ok(FloatRun {
        output: values.remove(&info.sink).expect("sink evaluated"),
        pre_activations,
    })
}

fn eval_layer(
    layer: &Layer,
    input: &Tensor<f32>,
    values: &BTreeMap<LayerId, Tensor<f32>>,
    record_taps: bool,
    pre_activations: &mut BTreeMap<LayerId, Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let arg = |k: usize| -> &Tensor<f32> {
        if layer.inputs.is_empty() {
            input
        } else {
            &values[&layer.inputs[k]]
        }
    };
    match &layer.op {
        LayerOp::Conv2d(Conv2d {
            kernel: KernelData::Float(k),
            bias: crate::ir::BiasData::Float(b),
            stride,
            padding,
            batch_norm,
        }) => {
            let mut y = conv2d_f32(arg(0), k, b, *stride, *padding)?;
            if let Some(bn) = batch_norm {
                y = apply_batchnorm(&y, bn)?;
            }
            Ok(y)
        }
        LayerOp::Conv2d(_) => unreachable!("validated float network"),
        LayerOp::BRelu(brelu) => {
            if record_taps {
                pre_activations.insert(layer.id.clone(), arg(0).clone());
            }
            Ok(brelu_f32(arg(0), brelu.upper))
        }
        LayerOp::ResidualAdd => residual_add_f32(arg(0), arg(1)),
        LayerOp::Concat => {
            let tensors: Vec<&Tensor<f32>> = (0..layer.inputs.len()).map(arg).collect();
            concat_channels(&tensors)
        }
        LayerOp::Rescale(_) => unreachable!("validated float network"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BiasData, BRelu};
    use crate::ratio;

    /// Independent convolution oracle: f64 accumulation, different loop
    /// nesting. Agrees with the engine up to f32-vs-f64 rounding.
    fn conv_oracle(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> Tensor<f32> {
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
        let mut out = Tensor::filled(vec![n, o, oh, ow], 0.0f32).unwrap();
        for bn in 0..n {
            for (oc, &oc_bias) in bias.iter().enumerate().take(o) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = oc_bias as f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for ic in 0..ci {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.at4(bn, ic, iy as usize, ix as usize) as f64
                                        * kernel.at4(oc, ic, ky, kx) as f64;
                                }
                            }
                        }
                        out.set4(bn, oc, oy, ox, acc as f32);
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(len: usize, scale: f32) -> Vec<f32> {
        // Small deterministic LCG; values in [-scale, scale].
        let mut state = 0x2545f491_4f6cdd1du64;
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32 - 1.0) * scale
            })
            .collect()
    }

    #[test]
    fn conv_matches_hand_computed_values() {
        let input = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let kernel = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let out = conv2d_f32(&input, &kernel, &[0.5], 1, 0).unwrap();
        // x[y][x] - x[y+1][x+1] + 0.5, all exactly representable.
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[-3.5, -3.5, -3.5, -3.5]);
    }

    #[test]
    fn conv_padding_and_stride_match_oracle() {
        for (ci, o, h, w, kh, stride, pad) in [
            (1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 1usize),
            (3, 4, 8, 6, 3, 1, 1),
            (2, 3, 9, 9, 5, 2, 2),
            (4, 2, 7, 7, 1, 1, 0),
        ] {
            let input = Tensor::new(vec![2, ci, h, w], pseudo_random(2 * ci * h * w, 1.0)).unwrap();
            let kernel = Tensor::new(vec![o, ci, kh, kh], pseudo_random(o * ci * kh * kh, 0.5)).unwrap();
            let bias: Vec<f32> = pseudo_random(o, 0.25);
            let got = conv2d_f32(&input, &kernel, &bias, stride, pad).unwrap();
            let want = conv_oracle(&input, &kernel, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() < 1e-4, "{g} vs {w_}");
            }
        }
    }

    #[test]
    fn conv_is_deterministic_across_thread_counts() {
        let input = Tensor::new(vec![1, 3, 16, 16], pseudo_random(3 * 256, 1.0)).unwrap();
        let kernel = Tensor::new(vec![8, 3, 3, 3], pseudo_random(8 * 27, 0.5)).unwrap();
        let bias = pseudo_random(8, 0.1);
        let mut outputs = Vec::new();
        for threads in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let out = pool.install(|| conv2d_f32(&input, &kernel, &bias, 1, 1).unwrap());
            outputs.push(out);
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }

    #[test]
    fn brelu_clamps_both_sides() {
        let t = Tensor::new(vec![1, 1, 1, 4], vec![-1.0f32, 0.25, 0.5, 9.0]).unwrap();
        assert_eq!(brelu_f32(&t, 0.5).data(), &[0.0, 0.25, 0.5, 0.5]);
        assert_eq!(brelu_f32(&t, f64::INFINITY).data(), &[0.0, 0.25, 0.5, 9.0]);
    }

    #[test]
    fn concat_interleaves_per_batch_item() {
        let a = Tensor::new(vec![2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1, 2], vec![5.0f32, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            cat.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn batchnorm_matches_definition() {
        let t = Tensor::new(vec![1, 2, 1, 1], vec![2.0f32, -1.0]).unwrap();
        let bn = BatchNorm {
            gamma: vec![0.5, 2.0],
            beta: vec![1.0, 0.0],
            mean: vec![1.0, -2.0],
            variance: vec![0.75, 0.0],
            epsilon: 0.25,
        };
        let out = apply_batchnorm(&t, &bn).unwrap();
        // (2 - 1) * 0.5 / 1 + 1 = 1.5 ; (-1 + 2) * 2 / 0.5 + 0 = 4
        assert_eq!(out.data(), &[1.5, 4.0]);
    }

    #[test]
    fn forward_composes_ops_and_taps_pre_activations() {
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let ir = NetworkIR {
            name: "t".into(),
            input_shape: [1, 2, 2],
            input_ratio: ratio::from_i64(256),
            layers: vec![
                Layer {
                    id: LayerId::new("c1"),
                    inputs: vec![],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Float(kernel.clone()),
                        bias: BiasData::Float(vec![0.125]),
                        stride: 1,
                        padding: 0,
                        batch_norm: None,
                    }),
                },
                Layer {
                    id: LayerId::new("r1"),
                    inputs: vec![LayerId::new("c1")],
                    op: LayerOp::BRelu(BRelu { upper: 0.5 }),
                },
                Layer {
                    id: LayerId::new("c2"),
                    inputs: vec![LayerId::new("r1")],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Float(kernel),
                        bias: BiasData::Float(vec![0.0]),
                        stride: 1,
                        padding: 0,
                        batch_norm: None,
                    }),
                },
            ],
        };
        let input = Tensor::new(vec![1, 1, 2, 2], vec![-0.5f32, 0.125, 0.25, 0.375]).unwrap();
        let run = forward_f32(&ir, &input, true).unwrap();
        // c1 = 2x + 0.125, r1 = clamp to [0, 0.5], c2 = 2 * r1. All values
        // are exact binary fractions, so the comparison is exact.
        assert_eq!(run.output.data(), &[0.0, 0.75, 1.0, 1.0]);
        let tap = &run.pre_activations[&LayerId::new("r1")];
        assert_eq!(tap.data(), &[-0.875, 0.375, 0.625, 0.875]);

        let bad = Tensor::new(vec![1, 1, 2, 2], vec![f32::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(forward_f32(&ir, &bad, false).is_err());
    }
}
