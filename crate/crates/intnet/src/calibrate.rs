//! Activation bound estimation.
//!
//! Bounded ReLUs need an upper bound per activation before quantization.
//! Two estimators are provided:
//!
//! * The n-sigma rule: run calibration batches through the float network
//!   with clipping disabled and take, per activation, the value below which
//!   all but a `tail_fraction(n)` share of samples fall — the empirical
//!   counterpart of "mean plus n standard deviations" under a normal
//!   assumption, but computed as a rank statistic so it needs no
//!   distributional fit. Per-batch bounds are averaged across batches.
//! * A geometric progression from the known input magnitude `a0` to a target
//!   output magnitude `an`, assigning each convolution depth level the
//!   interpolated magnitude. Parallel branches share a level and therefore
//!   a bound. This needs no calibration data at all.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::float_engine::forward_f32;
use crate::ir::{LayerId, LayerOp, NetworkIR};
use crate::quant::renormalize_input_f32;
use crate::tensor::Tensor;

/// Fraction of samples allowed above an n-sigma bound: `P(Z > n)` for a
/// standard normal `Z`, i.e. `0.5 * erfc(n / sqrt(2))`.
pub fn tail_fraction(n: f64) -> f64 {
    0.5 * libm::erfc(n / std::f64::consts::SQRT_2)
}

/// 1-indexed rank of the bound inside `count` ascending samples:
/// `ceil((1 - tail) * count)`, clamped into `[1, count]`.
pub fn quantile_rank(count: usize, tail: f64) -> usize {
    let raw = ((1.0 - tail) * count as f64).ceil() as i64;
    raw.clamp(1, count as i64) as usize
}

/// The n-sigma bound of one batch of samples.
pub fn batch_bound(values: &[f32], n: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("cannot take a quantile of zero samples"));
    }
    if n < 0.0 || !n.is_finite() {
        return Err(Error::invalid(format!("n must be non-negative and finite, got {n}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = quantile_rank(sorted.len(), tail_fraction(n));
    Ok(sorted[rank - 1] as f64)
}

/// Calibration outcome for one bounded ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBound {
    /// The brelu layer this bound belongs to.
    pub layer: LayerId,
    /// Bound of each calibration batch.
    pub batch_bounds: Vec<f64>,
    /// Final bound: the mean over batches.
    pub h_rf: f64,
}

/// Estimates every activation bound with the n-sigma rule over raw 8-bit
/// calibration batches. Clipping is disabled during the measurement runs, so
/// bounds already present on the network do not bias the estimate.
pub fn calibrate_nsigma(
    ir: &NetworkIR,
    batches: &[Tensor<u8>],
    n: f64,
) -> Result<Vec<ActivationBound>> {
    if batches.is_empty() {
        return Err(Error::invalid("calibration needs at least one batch"));
    }
    let relaxed = without_clipping(ir);

    let mut per_layer: BTreeMap<LayerId, Vec<f64>> = BTreeMap::new();
    for batch in batches {
        let input = renormalize_input_f32(batch, &ir.input_ratio);
        let run = forward_f32(&relaxed, &input, true)?;
        for (layer, tap) in &run.pre_activations {
            per_layer
                .entry(layer.clone())
                .or_default()
                .push(batch_bound(tap.data(), n)?);
        }
    }

    per_layer
        .into_iter()
        .map(|(layer, batch_bounds)| {
            let h_rf = batch_bounds.iter().sum::<f64>() / batch_bounds.len() as f64;
            if !h_rf.is_finite() || h_rf <= 0.0 {
                return Err(Error::graph(
                    layer.as_str(),
                    format!("calibrated bound {h_rf} is not positive; the activation never fires"),
                ));
            }
            Ok(ActivationBound {
                layer,
                batch_bounds,
                h_rf,
            })
        })
        .collect()
}

/// Copy of the network with every bounded ReLU relaxed to a plain ReLU.
fn without_clipping(ir: &NetworkIR) -> NetworkIR {
    let mut relaxed = ir.clone();
    for layer in &mut relaxed.layers {
        if let LayerOp::BRelu(b) = &mut layer.op {
            b.upper = f64::INFINITY;
        }
    }
    relaxed
}

/// Assigns geometric-progression bounds: with `depth_count` convolution
/// levels, the bound for the activation after a depth-`d` convolution is
/// `a0 * (an / a0)^(d / depth_count)`.
pub fn geometric_bounds(ir: &NetworkIR, a0: f64, an: f64) -> Result<Vec<ActivationBound>> {
    if !(a0.is_finite() && a0 > 0.0 && an.is_finite() && an > 0.0) {
        return Err(Error::invalid(format!(
            "geometric bounds need positive finite endpoints, got a0={a0}, an={an}"
        )));
    }
    let depths = ir.conv_depths()?;
    let depth_count = depths.values().copied().max().unwrap_or(0);
    if depth_count == 0 {
        return Err(Error::invalid("network has no convolutions"));
    }

    let mut bounds = Vec::new();
    for layer in &ir.layers {
        if !matches!(layer.op, LayerOp::BRelu(_)) {
            continue;
        }
        let conv = driving_conv(ir, &layer.id)?;
        let d = depths[&conv];
        let h_rf = a0 * (an / a0).powf(d as f64 / depth_count as f64);
        bounds.push(ActivationBound {
            layer: layer.id.clone(),
            batch_bounds: Vec::new(),
            h_rf,
        });
    }
    bounds.sort_by(|a, b| a.layer.cmp(&b.layer));
    Ok(bounds)
}

/// The convolution whose output a bounded ReLU clips: its direct input, or
/// the main-path convolution when the input is a residual addition.
pub fn driving_conv(ir: &NetworkIR, brelu: &LayerId) -> Result<LayerId> {
    let layer = ir
        .layer(brelu)
        .ok_or_else(|| Error::graph(brelu.as_str(), "unknown layer"))?;
    if !matches!(layer.op, LayerOp::BRelu(_)) {
        return Err(Error::graph(brelu.as_str(), "not a brelu layer"));
    }
    let feeder = ir
        .layer(&layer.inputs[0])
        .ok_or_else(|| Error::graph(brelu.as_str(), "dangling input"))?;
    match &feeder.op {
        LayerOp::Conv2d(_) => Ok(feeder.id.clone()),
        LayerOp::ResidualAdd => Ok(feeder.inputs[0].clone()),
        other => Err(Error::graph(
            brelu.as_str(),
            format!("fed by {} instead of conv2d or residual-add", other.name()),
        )),
    }
}

/// Largest output magnitude of the float network over the given batches,
/// with clipping disabled. Useful as the `an` endpoint for
/// [`geometric_bounds`] and as the signal peak for error reporting.
pub fn output_peak(ir: &NetworkIR, batches: &[Tensor<u8>]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::invalid("peak measurement needs at least one batch"));
    }
    let relaxed = without_clipping(ir);
    let mut peak = 0.0f64;
    for batch in batches {
        let input = renormalize_input_f32(batch, &ir.input_ratio);
        let run = forward_f32(&relaxed, &input, false)?;
        for &v in run.output.data() {
            peak = peak.max(v.abs() as f64);
        }
    }
    Ok(peak)
}

/// Serializes bounds to the calibration report format:
///
/// ```text
/// #intnet-calibration v1
/// method: <free-form description>
/// bound: <brelu-id> <h_rf>
/// ```
pub fn write_report(method: &str, bounds: &[ActivationBound]) -> String {
    let mut out = String::from("#intnet-calibration v1\n");
    let _ = writeln!(out, "method: {method}");
    for b in bounds {
        if !b.batch_bounds.is_empty() {
            let _ = write!(out, "# batches {}:", b.layer);
            for v in &b.batch_bounds {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "bound: {} {}", b.layer, b.h_rf);
    }
    out
}

/// Parses a calibration report back into per-layer bounds.
pub fn parse_report(text: &str) -> Result<(String, BTreeMap<LayerId, f64>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "#intnet-calibration v1")) => {}
        _ => return Err(Error::parse(1, "expected header '#intnet-calibration v1'")),
    }
    let mut method = String::new();
    let mut bounds = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(m) = line.strip_prefix("method: ") {
            method = m.to_string();
        } else if let Some(rest) = line.strip_prefix("bound: ") {
            let (id, value) = rest
                .split_once(' ')
                .ok_or_else(|| Error::parse(lineno, "expected 'bound: <layer> <value>'"))?;
            let value: f64 = value
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad bound value '{value}'")))?;
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::parse(lineno, format!("bound must be positive, got {value}")));
            }
            if bounds.insert(LayerId::new(id), value).is_some() {
                return Err(Error::parse(lineno, format!("duplicate bound for '{id}'")));
            }
        } else {
            return Err(Error::parse(lineno, format!("unrecognized line '{line}'")));
        }
    }
    Ok((method, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BiasData, BRelu, Conv2d, KernelData, Layer};
    use crate::ratio;

    #[test]
    fn tail_fraction_matches_normal_table() {
        // Standard normal upper-tail probabilities.
        assert!((tail_fraction(3.0) - 0.001349898031630095).abs() < 1e-15);
        assert!((tail_fraction(2.0) - 0.022750131948179212).abs() < 1e-15);
        assert!((tail_fraction(0.0) - 0.5).abs() < 1e-15);
        assert!(tail_fraction(6.0) < 1e-8);
    }

    #[test]
    fn quantile_rank_matches_hand_counts() {
        // 1000 samples, 0.15% tail: the 999th ascending value.
        assert_eq!(quantile_rank(1000, 0.0015), 999);
        // Tail so small nothing is excluded.
        assert_eq!(quantile_rank(1000, 1e-9), 1000);
        // Tail close to 1 still picks at least the smallest sample.
        assert_eq!(quantile_rank(10, 0.9999), 1);
        assert_eq!(quantile_rank(1, 0.5), 1);
    }

    #[test]
    fn batch_bound_is_order_invariant() {
        let ascending: Vec<f32> = (1..=1000).map(|v| v as f32).collect();
        let mut shuffled = ascending.clone();
        shuffled.reverse();
        shuffled.swap(17, 800);
        let n = 3.0; // tail 0.00135 -> rank 999
        assert_eq!(batch_bound(&ascending, n).unwrap(), 999.0);
        assert_eq!(batch_bound(&shuffled, n).unwrap(), 999.0);
        assert!(batch_bound(&[], n).is_err());
        assert!(batch_bound(&[1.0], f64::NAN).is_err());
    }

    fn identity_net(upper: f64) -> NetworkIR {
        // 1x1 identity conv so the brelu tap equals the renormalized input.
        NetworkIR {
            name: "t".into(),
            input_shape: [1, 4, 4],
            input_ratio: ratio::from_i64(1),
            layers: vec![
                Layer {
                    id: LayerId::new("c1"),
                    inputs: vec![],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Float(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
                        bias: BiasData::Float(vec![0.0]),
                        stride: 1,
                        padding: 0,
                        batch_norm: None,
                    }),
                },
                Layer {
                    id: LayerId::new("r1"),
                    inputs: vec![LayerId::new("c1")],
                    op: LayerOp::BRelu(BRelu { upper }),
                },
                Layer {
                    id: LayerId::new("c2"),
                    inputs: vec![LayerId::new("r1")],
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Float(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
                        bias: BiasData::Float(vec![0.0]),
                        stride: 1,
                        padding: 0,
                        batch_norm: None,
                    }),
                },
            ],
        }
    }

    fn batch_of(values: [u8; 16]) -> Tensor<u8> {
        Tensor::new(vec![1, 1, 4, 4], values.to_vec()).unwrap()
    }

    #[test]
    fn nsigma_bounds_average_per_batch_quantiles() {
        let ir = identity_net(f64::INFINITY);
        // With n = 0 the tail is 0.5, so rank = ceil(8) = 8 of 16: the 8th
        // ascending value. Batches are 128 + [1..=16] and 128 + 2*[1..=16].
        let b1 = batch_of(std::array::from_fn(|i| 129 + i as u8));
        let b2 = batch_of(std::array::from_fn(|i| 130 + 2 * i as u8));
        let bounds = calibrate_nsigma(&ir, &[b1, b2], 0.0).unwrap();
        assert_eq!(bounds.len(), 1);
        let b = &bounds[0];
        assert_eq!(b.layer, LayerId::new("r1"));
        assert_eq!(b.batch_bounds, vec![8.0, 16.0]);
        assert_eq!(b.h_rf, 12.0);
    }

    #[test]
    fn existing_clipping_does_not_bias_calibration() {
        let strict = identity_net(0.001);
        let relaxed = identity_net(f64::INFINITY);
        let batch = batch_of(std::array::from_fn(|i| 128 + (i as u8 + 1) * 7));
        let a = calibrate_nsigma(&strict, std::slice::from_ref(&batch), 3.0).unwrap();
        let b = calibrate_nsigma(&relaxed, &[batch], 3.0).unwrap();
        assert_eq!(a[0].h_rf, b[0].h_rf);
    }

    #[test]
    fn dead_activation_is_an_error() {
        let ir = identity_net(f64::INFINITY);
        // All raw values below 128 renormalize negative, so every quantile
        // is negative.
        let batch = batch_of([5; 16]);
        let err = calibrate_nsigma(&ir, &[batch], 3.0).unwrap_err();
        assert!(err.to_string().contains("r1"), "{err}");
    }

    #[test]
    fn geometric_bounds_interpolate_between_endpoints() {
        // Chain with three convolutions -> depths 1, 2, 3.
        let k = |id: &str, input: Option<&str>| Layer {
            id: LayerId::new(id),
            inputs: input.map(|s| vec![LayerId::new(s)]).unwrap_or_default(),
            op: LayerOp::Conv2d(Conv2d {
                kernel: KernelData::Float(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
                bias: BiasData::Float(vec![0.0]),
                stride: 1,
                padding: 0,
                batch_norm: None,
            }),
        };
        let r = |id: &str, input: &str| Layer {
            id: LayerId::new(id),
            inputs: vec![LayerId::new(input)],
            op: LayerOp::BRelu(BRelu { upper: f64::INFINITY }),
        };
        let ir = NetworkIR {
            name: "chain".into(),
            input_shape: [1, 2, 2],
            input_ratio: ratio::from_i64(1),
            layers: vec![
                k("c1", None),
                r("r1", "c1"),
                k("c2", Some("r1")),
                r("r2", "c2"),
                k("c3", Some("r2")),
                r("r3", "c3"),
                k("c4", Some("r3")),
            ],
        };
        // a0 = 1, a4 = 16 over 4 levels: bounds 2, 4, 8 at depths 1, 2, 3.
        let bounds = geometric_bounds(&ir, 1.0, 16.0).unwrap();
        let by_layer: BTreeMap<_, _> = bounds.iter().map(|b| (b.layer.clone(), b.h_rf)).collect();
        assert!((by_layer[&LayerId::new("r1")] - 2.0).abs() < 1e-12);
        assert!((by_layer[&LayerId::new("r2")] - 4.0).abs() < 1e-12);
        assert!((by_layer[&LayerId::new("r3")] - 8.0).abs() < 1e-12);
        assert!(geometric_bounds(&ir, 0.0, 16.0).is_err());
    }

    #[test]
    fn report_round_trips() {
        let bounds = vec![
            ActivationBound {
                layer: LayerId::new("r1"),
                batch_bounds: vec![1.0, 2.0],
                h_rf: 1.5,
            },
            ActivationBound {
                layer: LayerId::new("r2"),
                batch_bounds: vec![],
                h_rf: 0.123456789012345,
            },
        ];
        let text = write_report("nsigma n=3", &bounds);
        let (method, parsed) = parse_report(&text).unwrap();
        assert_eq!(method, "nsigma n=3");
        assert_eq!(parsed[&LayerId::new("r1")], 1.5);
        assert_eq!(parsed[&LayerId::new("r2")], 0.123456789012345);

        assert!(parse_report("nonsense").is_err());
        assert!(parse_report("#intnet-calibration v1\nbound: r1 -3").is_err());
        assert!(parse_report("#intnet-calibration v1\nbound: r1 1\nbound: r1 2").is_err());
    }

    #[test]
    fn output_peak_sees_through_clipping() {
        let ir = identity_net(0.001);
        let batch = batch_of(std::array::from_fn(|i| 128 + (i as u8) * 8));
        let peak = output_peak(&ir, &[batch]).unwrap();
        assert_eq!(peak, 120.0);
    }
}
