//! Quantization operations: weight discretization, activation-bound fixups,
//! bias scaling, and the ratio synchronization needed at graph merge points.
//!
//! Conventions used throughout:
//!
//! * Weights are signed 8-bit with a symmetric range: integer values lie in
//!   `[-127, 127]` (never -128) and the step is `delta = maxabs / 127`.
//! * Activations are unsigned after the bounded ReLU and stored in i8; the
//!   largest representable activation is `max_int = 2^(bits-1) - 1` for the
//!   configured storage width (127 for 8-bit storage).
//! * A scale `ratio_T` converts a float-domain value to its integer
//!   representation: `t_int ~= t_float * ratio_T`. Scales compose exactly:
//!   `ratio_Y = ratio_X * ratio_W` for a convolution, and a multiply-shift
//!   stage scales by exactly `mul / 2^shift`.

use num::{BigInt, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::ir::{BatchNorm, LayerId, NetworkIR};
use crate::ratio::{self, Rational};
use crate::tensor::Tensor;

/// Largest magnitude a quantized weight may take.
pub const WEIGHT_MAX_INT: i64 = 127;

/// Range of the integer multiplier in a multiply-shift stage.
pub const MUL_MAX: i64 = 65535;

/// Largest right shift in a multiply-shift stage.
pub const SHIFT_MAX: u32 = 31;

/// Largest representable activation for a storage width of `bits`
/// (the activations keep one bit of the signed byte as sign headroom).
pub fn max_int_for_bits(bits: u32) -> Result<i64> {
    if !(4..=8).contains(&bits) {
        return Err(Error::invalid(format!(
            "activation bit width must be in [4, 8], got {bits}"
        )));
    }
    Ok((1i64 << (bits - 1)) - 1)
}

/// Integer scaling stage: multiply by `mul`, right-shift by `shift`,
/// rounding to nearest with ties away from zero. Approximates scaling by
/// the rational `mul / 2^shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MulShift {
    pub mul: u32,
    pub shift: u32,
}

impl MulShift {
    pub fn new(mul: u32, shift: u32) -> Result<Self> {
        let ms = MulShift { mul, shift };
        ms.check()?;
        Ok(ms)
    }

    pub fn check(&self) -> Result<()> {
        if self.mul == 0 || self.mul as i64 > MUL_MAX {
            return Err(Error::invalid(format!(
                "multiplier {} outside [1, {MUL_MAX}]",
                self.mul
            )));
        }
        if self.shift > SHIFT_MAX {
            return Err(Error::invalid(format!(
                "shift {} outside [0, {SHIFT_MAX}]",
                self.shift
            )));
        }
        Ok(())
    }

    /// The exact scale this stage applies.
    pub fn as_ratio(&self) -> Rational {
        ratio::from_i64(self.mul as i64) / ratio::pow2(self.shift as i32)
    }

    /// Applies the stage to `x` with round-half-away-from-zero.
    pub fn apply(&self, x: i64) -> i64 {
        let product = x.unsigned_abs() as u128 * self.mul as u128;
        let scaled = if self.shift == 0 {
            product
        } else {
            (product + (1u128 << (self.shift - 1))) >> self.shift
        };
        let scaled = scaled as i64;
        if x < 0 {
            -scaled
        } else {
            scaled
        }
    }

    /// Nearest representable stage to a positive rational `target`, trying
    /// shifts from largest to smallest so precision is maximal.
    pub fn approximate(target: &Rational) -> Result<Self> {
        if !target.is_positive() {
            return Err(Error::invalid("multiply-shift target must be positive"));
        }
        for shift in (0..=SHIFT_MAX).rev() {
            let scaled = target * ratio::pow2(shift as i32);
            let mul = ratio::round_half_away(&scaled);
            if mul >= BigInt::from(1) && mul <= BigInt::from(MUL_MAX) {
                return Ok(MulShift {
                    mul: mul.to_u32().unwrap(),
                    shift,
                });
            }
        }
        Err(Error::invalid(format!(
            "no multiply-shift stage approximates scale {}",
            ratio::format(target)
        )))
    }
}

/// Multiplier and shift that scale the clipped range `[0, h_ri]` onto
/// `[0, max_int]`: the nearest representable stage to `max_int / h_ri`.
pub fn derive_mul_shift(h_ri: i64, max_int: i64) -> Result<MulShift> {
    if h_ri < 1 {
        return Err(Error::invalid(format!(
            "integer activation bound must be at least 1, got {h_ri}"
        )));
    }
    if max_int < 1 {
        return Err(Error::invalid(format!(
            "activation max_int must be at least 1, got {max_int}"
        )));
    }
    MulShift::approximate(&ratio::new(max_int, h_ri))
}

/// Quantized weights plus their per-channel step.
#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    pub values: Tensor<i8>,
    /// Step per output channel. In per-tensor mode every entry is equal.
    /// A zero entry marks an all-zero channel (see `zero_channels`).
    pub delta: Vec<Rational>,
    /// Channels whose quantized weights are all zero; candidates for pruning.
    pub zero_channels: Vec<usize>,
}

fn channel_views(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.is_empty() {
        return Err(Error::shape("weight tensor", "rank >= 1", "rank 0"));
    }
    let o = shape[0];
    let per: usize = shape[1..].iter().product();
    if o == 0 || per == 0 {
        return Err(Error::shape("weight tensor", "no zero dimensions", format!("{shape:?}")));
    }
    Ok((o, per))
}

fn max_abs(values: &[f32], context: &str) -> Result<f32> {
    let mut m = 0.0f32;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::non_finite(context));
        }
        m = m.max(v.abs());
    }
    Ok(m)
}

fn quantize_slice(values: &[f32], delta: &Rational, context: &str) -> Result<Vec<i8>> {
    let inv = delta.recip();
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let scaled = ratio::from_f32(v, context)? * &inv;
        let q = ratio::round_half_away_i64(&scaled, context)?;
        if q.abs() > WEIGHT_MAX_INT {
            return Err(Error::overflow(format!(
                "{context}: weight {v} quantizes to {q}, outside [-{WEIGHT_MAX_INT}, {WEIGHT_MAX_INT}]"
            )));
        }
        out.push(q as i8);
    }
    Ok(out)
}

/// Symmetric 8-bit weight quantization. With `per_channel` set, each output
/// channel (dimension 0) gets its own step from its own max magnitude;
/// otherwise one step derived from the global max magnitude is replicated
/// across channels. All-zero channels get a zero step and are reported in
/// `zero_channels` rather than failing.
pub fn quantize_weights(w: &Tensor<f32>, per_channel: bool) -> Result<QuantizedWeights> {
    let (o, per) = channel_views(w.shape())?;
    let data = w.data();

    let global = max_abs(data, "weight quantization")?;
    if !per_channel && global == 0.0 {
        return Err(Error::invalid("cannot quantize an all-zero weight tensor"));
    }
    let global_delta = ratio::from_f32(global, "weight quantization")? / ratio::from_i64(WEIGHT_MAX_INT);

    let mut values = Vec::with_capacity(data.len());
    let mut delta = Vec::with_capacity(o);
    let mut zero_channels = Vec::new();
    for c in 0..o {
        let slice = &data[c * per..(c + 1) * per];
        let step = if per_channel {
            let m = max_abs(slice, "weight quantization")?;
            ratio::from_f32(m, "weight quantization")? / ratio::from_i64(WEIGHT_MAX_INT)
        } else {
            global_delta.clone()
        };
        if step.is_zero() {
            zero_channels.push(c);
            values.extend(std::iter::repeat_n(0i8, per));
            delta.push(step);
            continue;
        }
        let q = quantize_slice(slice, &step, &format!("channel {c}"))?;
        if q.iter().all(|&v| v == 0) {
            zero_channels.push(c);
        }
        values.extend(q);
        delta.push(step);
    }

    Ok(QuantizedWeights {
        values: Tensor::new(w.shape().to_vec(), values)?,
        delta,
        zero_channels,
    })
}

/// Re-quantizes weights with an externally chosen step (used after scale
/// synchronization). Fails with `Overflow` if any weight falls outside the
/// representable range under that step.
pub fn quantize_weights_with_step(w: &Tensor<f32>, delta: &Rational) -> Result<QuantizedWeights> {
    if !delta.is_positive() {
        return Err(Error::invalid("weight step must be positive"));
    }
    let (o, per) = channel_views(w.shape())?;
    let values = quantize_slice(w.data(), delta, "re-quantization")?;
    let mut zero_channels = Vec::new();
    for c in 0..o {
        if values[c * per..(c + 1) * per].iter().all(|&v| v == 0) {
            zero_channels.push(c);
        }
    }
    Ok(QuantizedWeights {
        values: Tensor::new(w.shape().to_vec(), values)?,
        delta: vec![delta.clone(); o],
        zero_channels,
    })
}

/// Snaps float weights onto their quantization grid:
/// `delta * round(w / delta)` per output channel. Channels with a zero step
/// become all zero.
pub fn discretize_weights(w: &Tensor<f32>, delta: &[Rational]) -> Result<Tensor<f32>> {
    let (o, per) = channel_views(w.shape())?;
    if delta.len() != o {
        return Err(Error::shape(
            "discretize steps",
            format!("{o} entries"),
            delta.len().to_string(),
        ));
    }
    let data = w.data();
    let mut out = Vec::with_capacity(data.len());
    for c in 0..o {
        let step = &delta[c];
        for &v in &data[c * per..(c + 1) * per] {
            if step.is_zero() {
                out.push(0.0);
                continue;
            }
            let q = ratio::from_f32(v, "discretize")? / step;
            let snapped = step * Rational::from_integer(ratio::round_half_away(&q));
            out.push(ratio::to_f64(&snapped) as f32);
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Folds batch normalization into the preceding convolution's kernel and
/// bias: `scale = gamma / sqrt(variance + epsilon)` per output channel,
/// `W' = W * scale`, `b' = (b - mean) * scale + beta`.
pub fn fold_batchnorm(
    kernel: &Tensor<f32>,
    bias: &[f32],
    bn: &BatchNorm,
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let (o, per) = channel_views(kernel.shape())?;
    if bn.gamma.len() != o || bias.len() != o {
        return Err(Error::shape(
            "batch norm fold",
            format!("{o} channels"),
            format!("gamma {}, bias {}", bn.gamma.len(), bias.len()),
        ));
    }
    let mut folded = kernel.data().to_vec();
    let mut new_bias = Vec::with_capacity(o);
    for c in 0..o {
        let scale = bn.gamma[c] as f64 / (bn.variance[c] as f64 + bn.epsilon).sqrt();
        if !scale.is_finite() {
            return Err(Error::non_finite(format!("batch norm scale, channel {c}")));
        }
        for v in &mut folded[c * per..(c + 1) * per] {
            *v = (*v as f64 * scale) as f32;
        }
        new_bias.push(((bias[c] as f64 - bn.mean[c] as f64) * scale + bn.beta[c] as f64) as f32);
    }
    Ok((Tensor::new(kernel.shape().to_vec(), folded)?, new_bias))
}

/// Everything derived when a calibrated activation bound is made integer.
#[derive(Debug, Clone)]
pub struct BreluFix {
    /// Calibrated bound scaled into the accumulator domain and rounded.
    pub h_ri: i64,
    /// Requantization stage, the nearest representable `max_int / h_ri`.
    pub mul_shift: MulShift,
    /// Exact scale of the requantized activation: `ratio_y * mul / 2^shift`.
    pub ratio_v: Rational,
    /// Float bound the integer network actually realizes: `max_int / ratio_v`.
    pub h_f: Rational,
    /// Accumulator-domain clipping bound consistent with `h_f`.
    pub h_i: i64,
}

/// Turns a calibrated float activation bound into integer clipping and
/// requantization parameters for a convolution with output scale `ratio_y`.
///
/// The derived values satisfy `round(h_i * mul / 2^shift) == max_int`
/// exactly: the clip bound maps onto the top of the activation range.
pub fn fixup_brelu(h_rf: f64, ratio_y: &Rational, max_int: i64) -> Result<BreluFix> {
    if !h_rf.is_finite() || h_rf <= 0.0 {
        return Err(Error::invalid(format!(
            "calibrated activation bound must be positive and finite, got {h_rf}"
        )));
    }
    if !ratio_y.is_positive() {
        return Err(Error::invalid("ratio_y must be positive"));
    }
    let bound = ratio::from_f64(h_rf, "activation bound")? * ratio_y;
    let h_ri = ratio::round_half_away_i64(&bound, "activation bound")?;
    if h_ri < 1 {
        return Err(Error::invalid(format!(
            "activation bound {h_rf} scales to integer bound {h_ri}; \
             the bound is too small for this output scale"
        )));
    }
    let mul_shift = derive_mul_shift(h_ri, max_int)?;
    finish_fix(h_ri, mul_shift, ratio_y, max_int)
}

/// Completes the derived activation parameters for a known requantization
/// stage (used both by [`fixup_brelu`] and by scale synchronization, which
/// picks the stage differently).
pub fn finish_fix(
    h_ri: i64,
    mul_shift: MulShift,
    ratio_y: &Rational,
    max_int: i64,
) -> Result<BreluFix> {
    let ratio_v = ratio_y * mul_shift.as_ratio();
    let h_f = ratio::from_i64(max_int) / &ratio_v;
    let h_i = ratio::round_half_away_i64(
        &(ratio::from_i64(max_int) / mul_shift.as_ratio()),
        "clipping bound",
    )?;
    let anchored = ratio::round_half_away(&(ratio::from_i64(h_i) * mul_shift.as_ratio()));
    if anchored != BigInt::from(max_int) {
        return Err(Error::invalid(format!(
            "clipping bound {h_i} maps to {anchored} instead of {max_int}"
        )));
    }
    Ok(BreluFix {
        h_ri,
        mul_shift,
        ratio_v,
        h_f,
        h_i,
    })
}

/// Quantizes a bias vector with the per-channel output scale:
/// `b_int = round(b * ratio_y)`, checked against the i32 range.
pub fn quantize_bias(bias: &[f32], ratio_y: &[Rational]) -> Result<Vec<i32>> {
    if bias.len() != ratio_y.len() {
        return Err(Error::shape(
            "bias quantization",
            format!("{} scales", bias.len()),
            ratio_y.len().to_string(),
        ));
    }
    let mut out = Vec::with_capacity(bias.len());
    for (c, (&b, r)) in bias.iter().zip(ratio_y).enumerate() {
        let scaled = ratio::from_f32(b, "bias")? * r;
        let q = ratio::round_half_away_i64(&scaled, "bias")?;
        if q < i32::MIN as i64 || q > i32::MAX as i64 {
            return Err(Error::overflow(format!(
                "bias channel {c}: {b} scales to {q}, outside the i32 range"
            )));
        }
        out.push(q as i32);
    }
    Ok(out)
}

/// Centers raw 8-bit input onto the signed range: `x - 128`.
pub fn renormalize_input(raw: &Tensor<u8>) -> Tensor<i8> {
    raw.map(|v| (v as i16 - 128) as i8)
}

/// Float-domain view of raw 8-bit input: `(x - 128) / input_ratio`.
pub fn renormalize_input_f32(raw: &Tensor<u8>, input_ratio: &Rational) -> Tensor<f32> {
    let scale = 1.0 / ratio::to_f64(input_ratio);
    raw.map(|v| ((v as i16 - 128) as f64 * scale) as f32)
}

/// Scales of one concat branch before synchronization.
#[derive(Debug, Clone)]
pub struct ConcatBranch {
    pub delta: Rational,
    pub ratio_y: Rational,
    pub ratio_v: Rational,
}

/// Scales of one branch after synchronization. `ratio_v` is identical across
/// branches, so concatenated channels share one scale.
#[derive(Debug, Clone)]
pub struct SyncedBranch {
    pub delta: Rational,
    pub ratio_y: Rational,
    pub mul_shift: MulShift,
    pub ratio_v: Rational,
}

/// Aligns the post-activation scales of concat branches to their minimum.
///
/// The smallest branch scale is kept (clipping never loses range that way);
/// every branch gets a requantization stage approximating
/// `ratio_min / ratio_y_i`, and its weight step is adjusted so the stage's
/// rounding error moves into the weights, keeping
/// `ratio_v_i == ratio_min` exact for all branches.
pub fn sync_concat(branches: &[ConcatBranch]) -> Result<Vec<SyncedBranch>> {
    if branches.len() < 2 {
        return Err(Error::invalid("concat synchronization needs at least two branches"));
    }
    for (i, b) in branches.iter().enumerate() {
        if !b.delta.is_positive() || !b.ratio_y.is_positive() || !b.ratio_v.is_positive() {
            return Err(Error::invalid(format!(
                "concat branch {i} has a non-positive scale"
            )));
        }
    }
    let ratio_min = branches
        .iter()
        .map(|b| &b.ratio_v)
        .min()
        .cloned()
        .expect("at least two branches");

    branches
        .iter()
        .map(|b| {
            let ratio_x = &b.delta * &b.ratio_y;
            let mul_shift = MulShift::approximate(&(&ratio_min / &b.ratio_y))?;
            let ratio_y = &ratio_min / mul_shift.as_ratio();
            let delta = &ratio_x / &ratio_y;
            Ok(SyncedBranch {
                delta,
                ratio_y,
                mul_shift,
                ratio_v: ratio_min.clone(),
            })
        })
        .collect()
}

/// Outcome of aligning a residual skip connection with its main path.
#[derive(Debug, Clone)]
pub struct ResidualSync {
    /// Stage applied to the skip values before the addition.
    pub skip_rescale: MulShift,
    /// Exact scale shared by both addends and the sum.
    pub shared_ratio: Rational,
    /// Adjusted weight step of the main-path convolution.
    pub main_delta: Rational,
}

/// Aligns a residual addition: the skip input (scale `skip_ratio`) is
/// rescaled toward the smaller of the two scales, and the main convolution's
/// step is adjusted so its output scale equals the rescaled skip scale
/// exactly. `main_ratio_x` is the main convolution's input scale.
pub fn sync_residual(
    skip_ratio: &Rational,
    main_ratio_x: &Rational,
    main_ratio_y: &Rational,
) -> Result<ResidualSync> {
    if !skip_ratio.is_positive() || !main_ratio_x.is_positive() || !main_ratio_y.is_positive() {
        return Err(Error::invalid("residual synchronization scales must be positive"));
    }
    let target = skip_ratio.min(main_ratio_y);
    let skip_rescale = MulShift::approximate(&(target / skip_ratio))?;
    let shared_ratio = skip_ratio * skip_rescale.as_ratio();
    let main_delta = main_ratio_x / &shared_ratio;
    Ok(ResidualSync {
        skip_rescale,
        shared_ratio,
        main_delta,
    })
}

/// Activation quantization attached to a convolution record: the integer
/// parameters of the bounded ReLU that consumes the convolution's output
/// (directly or through a residual addition).
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant {
    /// The brelu layer these parameters drive.
    pub brelu: LayerId,
    /// Calibrated float bound before any adjustment.
    pub h_rf: f64,
    /// Calibrated bound scaled into the accumulator domain.
    pub h_ri: i64,
    /// Requantization stage.
    pub mul_shift: MulShift,
    /// Exact post-requantization scale.
    pub ratio_v: Rational,
    /// Float bound the integer network realizes (for the float companion).
    pub h_f: Rational,
    /// Accumulator-domain clipping bound.
    pub h_i: i64,
    /// Top of the activation range, `2^(bits-1) - 1`.
    pub max_int: i64,
}

/// Quantization bookkeeping for one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantRecord {
    pub layer: LayerId,
    /// Weight step per output channel. Integer execution requires all
    /// entries equal; they are kept per channel for inspection.
    pub delta: Vec<Rational>,
    /// Input scale.
    pub ratio_x: Rational,
    /// Weight scale, `1 / delta`.
    pub ratio_w: Rational,
    /// Output (accumulator) scale, `ratio_x * ratio_w`.
    pub ratio_y: Rational,
    /// Activation quantization, absent for convolutions whose output is
    /// never passed through a bounded ReLU (e.g. the final regression conv).
    pub act: Option<ActQuant>,
}

/// Quantization table of an integer model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTable {
    pub records: Vec<QuantRecord>,
    /// Scale of the network output tensor.
    pub output_ratio: Rational,
    /// Activation range top shared by every record.
    pub max_int: i64,
}

impl QuantTable {
    pub fn record(&self, layer: &LayerId) -> Option<&QuantRecord> {
        self.records.iter().find(|r| &r.layer == layer)
    }

    pub fn record_for_brelu(&self, brelu: &LayerId) -> Option<&QuantRecord> {
        self.records
            .iter()
            .find(|r| r.act.as_ref().is_some_and(|a| &a.brelu == brelu))
    }
}

/// Minimal stored form of a record, from which every derived field is
/// rebuilt: the weight step, and for an activation its calibrated bounds
/// and requantization stage.
#[derive(Debug, Clone)]
pub struct RecordSeed {
    pub layer: LayerId,
    pub delta: Vec<Rational>,
    pub act: Option<ActSeed>,
}

/// Stored activation parameters; see [`RecordSeed`].
#[derive(Debug, Clone)]
pub struct ActSeed {
    pub brelu: LayerId,
    pub h_rf: f64,
    pub h_ri: i64,
    pub mul_shift: MulShift,
    pub max_int: i64,
}

/// Rebuilds the full quantization table from stored seeds by propagating
/// scales through the graph in topological order, then checks every
/// structural and arithmetic invariant. This runs on every model load, so a
/// model whose stored parameters are inconsistent never reaches an engine.
pub fn rebuild_table(ir: &NetworkIR, seeds: Vec<RecordSeed>, max_int: i64) -> Result<QuantTable> {
    use crate::ir::{Conv2d, KernelData,LayerOp};

    let info = ir.validate()?;
    if !info.integer {
        return Err(Error::invalid(
            "quantization table requires a network with integer kernels",
        ));
    }
    if !(1..=127).contains(&max_int) {
        return Err(Error::invalid(format!(
            "activation max_int {max_int} outside [1, 127]"
        )));
    }

    let mut seed_by_layer: std::collections::BTreeMap<LayerId, RecordSeed> = std::collections::BTreeMap::new();
    for seed in seeds {
        let id = seed.layer.clone();
        if seed_by_layer.insert(id.clone(), seed).is_some() {
            return Err(Error::graph(id.as_str(), "duplicate quantization record"));
        }
    }

    // Scale of each layer's output as it becomes known.
    let mut scales: std::collections::BTreeMap<LayerId, Rational> = std::collections::BTreeMap::new();
    let mut records: Vec<QuantRecord> = Vec::new();
    let mut claimed_brelus: std::collections::BTreeSet<LayerId> = std::collections::BTreeSet::new();

    for &i in &info.order {
        let layer = &ir.layers[i];
        let id = layer.id.as_str();
        let input_scale = |k: usize| -> Rational {
            if layer.inputs.is_empty() {
                ir.input_ratio.clone()
            } else {
                scales[&layer.inputs[k]].clone()
            }
        };
        let out_scale = match &layer.op {
            LayerOp::Conv2d(Conv2d { kernel, bias, .. }) => {
                let seed = seed_by_layer.remove(&layer.id).ok_or_else(|| {
                    Error::graph(id, "convolution has no quantization record")
                })?;
                let o = kernel.out_channels();
                if seed.delta.len() != o {
                    return Err(Error::graph(
                        id,
                        format!("record has {} steps for {o} channels", seed.delta.len()),
                    ));
                }
                let delta0 = seed.delta[0].clone();
                if !delta0.is_positive() {
                    return Err(Error::graph(id, "weight step must be positive"));
                }
                if seed.delta.iter().any(|d| d != &delta0) {
                    return Err(Error::graph(
                        id,
                        "integer execution requires equal per-channel weight steps",
                    ));
                }
                if let KernelData::Int(k) = kernel {
                    if k.data().contains(&i8::MIN) {
                        return Err(Error::graph(id, "quantized weight -128 is out of range"));
                    }
                } else {
                    unreachable!("validated integer network");
                }
                let _ = bias;
                let ratio_x = input_scale(0);
                let ratio_w = delta0.recip();
                let ratio_y = &ratio_x * &ratio_w;
                let act = match seed.act {
                    None => None,
                    Some(seed_act) => {
                        if seed_act.max_int != max_int {
                            return Err(Error::graph(
                                id,
                                format!(
                                    "record max_int {} differs from table max_int {max_int}",
                                    seed_act.max_int
                                ),
                            ));
                        }
                        if seed_act.h_ri < 1 {
                            return Err(Error::graph(id, "stored integer bound must be at least 1"));
                        }
                        seed_act.mul_shift.check().map_err(|e| Error::graph(id, e.to_string()))?;
                        let fix = finish_fix(seed_act.h_ri, seed_act.mul_shift, &ratio_y, max_int)
                            .map_err(|e| Error::graph(id, e.to_string()))?;
                        if !claimed_brelus.insert(seed_act.brelu.clone()) {
                            return Err(Error::graph(
                                id,
                                format!("brelu '{}' is claimed by two records", seed_act.brelu),
                            ));
                        }
                        Some(ActQuant {
                            brelu: seed_act.brelu,
                            h_rf: seed_act.h_rf,
                            h_ri: seed_act.h_ri,
                            mul_shift: seed_act.mul_shift,
                            ratio_v: fix.ratio_v,
                            h_f: fix.h_f,
                            h_i: fix.h_i,
                            max_int,
                        })
                    }
                };
                records.push(QuantRecord {
                    layer: layer.id.clone(),
                    delta: seed.delta,
                    ratio_x,
                    ratio_w,
                    ratio_y: ratio_y.clone(),
                    act,
                });
                ratio_y
            }
            LayerOp::BRelu(_) => {
                let record = records
                    .iter()
                    .find(|r| r.act.as_ref().is_some_and(|a| a.brelu == layer.id))
                    .ok_or_else(|| {
                        Error::graph(id, "no quantization record claims this brelu")
                    })?;
                let act = record.act.as_ref().unwrap();
                // The claiming record must be the convolution feeding this
                // brelu, directly or as the main path of a residual add.
                let feeder = &layer.inputs[0];
                let feeder_layer = ir.layer(feeder).unwrap();
                let conv_of_brelu = match &feeder_layer.op {
                    LayerOp::Conv2d(_) => feeder.clone(),
                    LayerOp::ResidualAdd => feeder_layer.inputs[0].clone(),
                    _ => unreachable!("validated brelu input"),
                };
                if conv_of_brelu != record.layer {
                    return Err(Error::graph(
                        id,
                        format!(
                            "brelu is claimed by record '{}' but fed by '{conv_of_brelu}'",
                            record.layer
                        ),
                    ));
                }
                act.ratio_v.clone()
            }
            LayerOp::ResidualAdd => {
                let a = input_scale(0);
                let b = input_scale(1);
                if a != b {
                    return Err(Error::graph(
                        id,
                        format!(
                            "residual-add inputs have unequal scales {} and {}",
                            ratio::format(&a),
                            ratio::format(&b)
                        ),
                    ));
                }
                a
            }
            LayerOp::Concat => {
                let first = input_scale(0);
                for k in 1..layer.inputs.len() {
                    let s = input_scale(k);
                    if s != first {
                        return Err(Error::graph(
                            id,
                            format!(
                                "concat inputs have unequal scales {} and {}",
                                ratio::format(&first),
                                ratio::format(&s)
                            ),
                        ));
                    }
                }
                first
            }
            LayerOp::Rescale(ms) => input_scale(0) * ms.as_ratio(),
        };
        scales.insert(layer.id.clone(), out_scale);
    }

    if let Some((id, _)) = seed_by_layer.into_iter().next() {
        return Err(Error::graph(
            id.as_str(),
            "quantization record does not match any convolution",
        ));
    }
    for layer in &ir.layers {
        if matches!(layer.op, LayerOp::BRelu(_)) && !claimed_brelus.contains(&layer.id) {
            return Err(Error::graph(layer.id.as_str(), "brelu has no quantization record"));
        }
    }

    Ok(QuantTable {
        records,
        output_ratio: scales[&info.sink].clone(),
        max_int,
    })
}
