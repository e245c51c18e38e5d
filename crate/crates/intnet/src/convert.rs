//! Float-to-integer conversion pipeline.
//!
//! Starting from a float network and an activation bound source, the
//! pipeline produces:
//!
//! * an integer model (i8 kernels, i32 bias, requantization stages, and the
//!   quantization table with every derived scale), and
//! * a float companion model carrying the discretized weights and the bounds
//!   the integer model actually realizes — the reference its accuracy is
//!   judged against.
//!
//! Steps, in order: fold batch norm, derive per-convolution weight steps and
//! discretize, estimate activation bounds (once, or over an increasing
//! n-sigma sweep scored by a caller metric), then fix up every activation in
//! topological order. At merge points the branch scales are synchronized:
//! concat branches are requantized to one shared scale, and residual
//! additions get a rescale stage on the skip path plus an adjusted main-path
//! weight step, so both addends carry exactly equal scales.
//!
//! All scale arithmetic is exact; the only approximations in the produced
//! model are the integer roundings the format forces (weights, bias, bounds,
//! multiply-shift stages), and each of those is made once, explicitly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::calibrate::{calibrate_nsigma, driving_conv, geometric_bounds};
use crate::error::{Error, Result};
use crate::int_engine::check_accumulator_bounds;
use crate::ir::{BiasData, BRelu, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR};
use crate::model_io::Model;
use crate::quant::{
    self, fold_batchnorm, max_int_for_bits, quantize_bias, quantize_weights,
    quantize_weights_with_step, sync_concat, sync_residual, ActSeed, ConcatBranch, MulShift,
    RecordSeed,
};
use crate::ratio::{self, Rational};
use crate::tensor::Tensor;

/// Where activation bounds come from.
pub enum BoundSource {
    /// Empirical quantile rule over calibration batches, swept over
    /// increasing `n` when a metric is supplied.
    NSigma { batches: Vec<Tensor<u8>> },
    /// Geometric progression from input magnitude `a0` to output magnitude
    /// `an`, assigned by convolution depth. Needs no data.
    Geometric { a0: f64, an: f64 },
    /// Explicit per-brelu bounds, e.g. from a saved calibration report.
    Fixed(BTreeMap<LayerId, f64>),
}

/// Pipeline parameters.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Activation storage width in bits (4 to 8); weights are always 8-bit.
    pub bits: u32,
    /// First n-sigma value tried.
    pub n_start: f64,
    /// Increment between sweep steps.
    pub n_step: f64,
    /// Largest n-sigma value tried.
    pub n_cap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bits: 8,
            n_start: 3.0,
            n_step: 0.5,
            n_cap: 6.0,
        }
    }
}

/// Pipeline stages reported to the stage hook.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineStage {
    /// Input convention settled; the model is unchanged otherwise.
    Renormalized,
    /// Batch norm folded and weights snapped to their quantization grid.
    Discretized,
    /// One integer candidate built (with the n that produced it, when the
    /// bound source is the n-sigma rule).
    Candidate { n: Option<f64> },
}

/// Scoring callback: higher is better. Receives the integer candidate and
/// its float companion.
pub type MetricFn<'a> = dyn FnMut(&Model, &Model) -> Result<f64> + 'a;

/// Observation callback, called after each pipeline stage with the model of
/// that stage.
pub type StageFn<'a> = dyn FnMut(PipelineStage, &Model) + 'a;

/// Observation and scoring hooks for [`convert_with`].
#[derive(Default)]
pub struct PipelineHooks<'a> {
    /// Called after each pipeline stage with the model of that stage.
    pub stage: Option<&'a mut StageFn<'a>>,
    /// Candidate metric and its acceptance threshold. With the n-sigma
    /// source the sweep stops at the first candidate meeting the threshold;
    /// otherwise the metric is evaluated once and reported.
    pub metric: Option<(&'a mut MetricFn<'a>, f64)>,
}

/// Per-activation entry of the conversion report.
#[derive(Debug, Clone)]
pub struct ActReport {
    pub brelu: LayerId,
    pub h_rf: f64,
    pub h_ri: i64,
    pub mul: u32,
    pub shift: u32,
    pub h_i: i64,
    pub ratio_v: f64,
    pub h_f: f64,
}

/// Per-convolution entry of the conversion report.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: LayerId,
    pub delta: String,
    pub ratio_y: f64,
    pub act: Option<ActReport>,
}

/// One candidate evaluation in the sweep.
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub n: Option<f64>,
    pub metric: Option<f64>,
}

/// Everything the pipeline did, in reportable form.
#[derive(Debug, Clone)]
pub struct ConversionReport {
    pub method: String,
    pub bits: u32,
    pub max_int: i64,
    pub iterations: Vec<IterationReport>,
    pub chosen_n: Option<f64>,
    pub metric_value: Option<f64>,
    pub metric_threshold: Option<f64>,
    /// Whether the threshold was met; `None` when no metric was supplied.
    pub threshold_met: Option<bool>,
    pub layers: Vec<LayerReport>,
    pub sync_events: Vec<String>,
    /// Channels whose weights quantized to all zeros, per convolution.
    pub prune_candidates: Vec<(LayerId, Vec<usize>)>,
    pub output_ratio: String,
}

impl ConversionReport {
    /// Renders the report as text.
    pub fn render(&self) -> String {
        let mut out = String::from("#intnet-conversion v1\n");
        let _ = writeln!(out, "method: {}", self.method);
        let _ = writeln!(out, "bits: {} (max_int {})", self.bits, self.max_int);
        for it in &self.iterations {
            let n = it.n.map_or("-".to_string(), |n| n.to_string());
            let m = it.metric.map_or("-".to_string(), |m| format!("{m:.4}"));
            let _ = writeln!(out, "candidate: n={n} metric={m}");
        }
        if let Some(n) = self.chosen_n {
            let _ = writeln!(out, "chosen_n: {n}");
        }
        if let (Some(v), Some(t)) = (self.metric_value, self.metric_threshold) {
            let met = if self.threshold_met == Some(true) { "met" } else { "not met" };
            let _ = writeln!(out, "metric: {v:.4} threshold: {t} ({met})");
        }
        for l in &self.layers {
            let _ = write!(out, "layer: {} delta={} ratio_y={:.6e}", l.layer, l.delta, l.ratio_y);
            if let Some(a) = &l.act {
                let _ = write!(
                    out,
                    " brelu={} h_rf={:.6} h_ri={} mul={} shift={} h_i={} ratio_v={:.6e} h_f={:.6}",
                    a.brelu, a.h_rf, a.h_ri, a.mul, a.shift, a.h_i, a.ratio_v, a.h_f
                );
            }
            out.push('\n');
        }
        for s in &self.sync_events {
            let _ = writeln!(out, "sync: {s}");
        }
        for (layer, channels) in &self.prune_candidates {
            let _ = writeln!(out, "prune-candidate: {layer} channels={channels:?}");
        }
        let _ = writeln!(out, "output_ratio: {}", self.output_ratio);
        out
    }
}

/// A finished conversion.
pub struct Conversion {
    pub integer: Model,
    /// Float model with discretized weights, realized biases, and realized
    /// activation bounds: what the integer model approximates.
    pub float_reference: Model,
    pub report: ConversionReport,
}

/// Converts a float model to an integer model. See [`convert_with`] for the
/// hook-taking variant.
pub fn convert(model: &Model, bounds: &BoundSource, cfg: &PipelineConfig) -> Result<Conversion> {
    convert_with(model, bounds, cfg, PipelineHooks::default())
}

/// Converts a float model to an integer model, reporting pipeline stages
/// and scoring candidates through `hooks`.
pub fn convert_with(
    model: &Model,
    bounds: &BoundSource,
    cfg: &PipelineConfig,
    mut hooks: PipelineHooks<'_>,
) -> Result<Conversion> {
    if model.is_integer() {
        return Err(Error::invalid("model is already integer"));
    }
    let info = model.ir.validate()?;
    if info.integer {
        return Err(Error::invalid("conversion requires a float model"));
    }
    let max_int = max_int_for_bits(cfg.bits)?;

    if let Some(stage) = hooks.stage.as_mut() {
        stage(PipelineStage::Renormalized, model);
    }

    // Fold batch norm away and fix the base weight step of every
    // convolution from its folded kernel.
    let folded = fold_network(&model.ir)?;
    let mut base_delta: BTreeMap<LayerId, Rational> = BTreeMap::new();
    for layer in &folded.layers {
        if let LayerOp::Conv2d(conv) = &layer.op {
            let KernelData::Float(kernel) = &conv.kernel else {
                unreachable!("float network");
            };
            let q = quantize_weights(kernel, false)
                .map_err(|e| Error::graph(layer.id.as_str(), e.to_string()))?;
            base_delta.insert(layer.id.clone(), q.delta[0].clone());
        }
    }

    // The calibration network: folded, with weights snapped to their grid.
    let calib_net = discretized_network(&folded, &base_delta, None)?;
    if let Some(stage) = hooks.stage.as_mut() {
        stage(PipelineStage::Discretized, &Model::float(calib_net.clone()));
    }

    // Candidate sweep. Sources other than the n-sigma rule evaluate once.
    let mut iterations: Vec<IterationReport> = Vec::new();
    let mut best: Option<(Option<f64>, Option<f64>, Candidate)> = None;
    let mut threshold_met = None;

    let sweep: Vec<Option<f64>> = match bounds {
        BoundSource::NSigma { .. } if hooks.metric.is_some() => {
            let mut ns = Vec::new();
            let mut n = cfg.n_start;
            while n <= cfg.n_cap + 1e-12 {
                ns.push(Some(n));
                n += cfg.n_step;
            }
            if ns.is_empty() {
                return Err(Error::invalid("empty n sweep: check n_start, n_step, n_cap"));
            }
            ns
        }
        BoundSource::NSigma { .. } => vec![Some(cfg.n_start)],
        _ => vec![None],
    };

    for n in sweep {
        let bound_map = match bounds {
            BoundSource::NSigma { batches } => calibrate_nsigma(&calib_net, batches, n.unwrap())?
                .into_iter()
                .map(|b| (b.layer, b.h_rf))
                .collect(),
            BoundSource::Geometric { a0, an } => geometric_bounds(&calib_net, *a0, *an)?
                .into_iter()
                .map(|b| (b.layer, b.h_rf))
                .collect(),
            BoundSource::Fixed(map) => map.clone(),
        };
        let candidate = build_candidate(&folded, &bound_map, max_int)?;
        if let Some(stage) = hooks.stage.as_mut() {
            stage(PipelineStage::Candidate { n }, &candidate.integer);
        }
        let metric = match hooks.metric.as_mut() {
            Some((eval, _)) => Some(eval(&candidate.integer, &candidate.float_reference)?),
            None => None,
        };
        iterations.push(IterationReport { n, metric });

        let better = match (&best, metric) {
            (None, _) => true,
            (Some((_, Some(prev), _)), Some(now)) => now > *prev,
            (Some(_), _) => false,
        };
        if better {
            best = Some((n, metric, candidate));
        }
        if let Some((_, threshold)) = hooks.metric.as_ref() {
            if metric.is_some_and(|m| m >= *threshold) {
                threshold_met = Some(true);
                break;
            }
            threshold_met = Some(false);
        }
    }

    let (chosen_n, metric_value, candidate) = best.expect("at least one candidate");
    let method = match bounds {
        BoundSource::NSigma { batches } => {
            format!("nsigma n={} batches={}", chosen_n.unwrap_or(cfg.n_start), batches.len())
        }
        BoundSource::Geometric { a0, an } => format!("geometric a0={a0} an={an}"),
        BoundSource::Fixed(_) => "fixed bounds".to_string(),
    };

    let table = candidate.integer.quant.as_ref().expect("integer candidate");
    let layers = table
        .records
        .iter()
        .map(|r| LayerReport {
            layer: r.layer.clone(),
            delta: ratio::format(&r.delta[0]),
            ratio_y: ratio::to_f64(&r.ratio_y),
            act: r.act.as_ref().map(|a| ActReport {
                brelu: a.brelu.clone(),
                h_rf: a.h_rf,
                h_ri: a.h_ri,
                mul: a.mul_shift.mul,
                shift: a.mul_shift.shift,
                h_i: a.h_i,
                ratio_v: ratio::to_f64(&a.ratio_v),
                h_f: ratio::to_f64(&a.h_f),
            }),
        })
        .collect();

    let report = ConversionReport {
        method,
        bits: cfg.bits,
        max_int,
        iterations,
        chosen_n,
        metric_value,
        metric_threshold: hooks.metric.as_ref().map(|(_, t)| *t),
        threshold_met,
        layers,
        sync_events: candidate.sync_events.clone(),
        prune_candidates: candidate.prune_candidates.clone(),
        output_ratio: ratio::format(&table.output_ratio),
    };

    Ok(Conversion {
        integer: candidate.integer,
        float_reference: candidate.float_reference,
        report,
    })
}

/// Folds batch norm into convolution weights across the network.
fn fold_network(ir: &NetworkIR) -> Result<NetworkIR> {
    let mut out = ir.clone();
    for layer in &mut out.layers {
        let LayerOp::Conv2d(conv) = &mut layer.op else {
            continue;
        };
        let Some(bn) = conv.batch_norm.take() else {
            continue;
        };
        let KernelData::Float(kernel) = &conv.kernel else {
            return Err(Error::graph(layer.id.as_str(), "integer kernels cannot carry batch norm"));
        };
        let BiasData::Float(bias) = &conv.bias else {
            unreachable!("validated float network");
        };
        let (folded_kernel, folded_bias) = fold_batchnorm(kernel, bias, &bn)
            .map_err(|e| Error::graph(layer.id.as_str(), e.to_string()))?;
        conv.kernel = KernelData::Float(folded_kernel);
        conv.bias = BiasData::Float(folded_bias);
    }
    Ok(out)
}

/// Float network with kernels snapped to their quantization grid. With
/// `bounds`, brelu uppers are replaced too (used for the float companion).
fn discretized_network(
    ir: &NetworkIR,
    delta: &BTreeMap<LayerId, Rational>,
    bounds: Option<&BTreeMap<LayerId, f64>>,
) -> Result<NetworkIR> {
    let mut out = ir.clone();
    for layer in &mut out.layers {
        match &mut layer.op {
            LayerOp::Conv2d(conv) => {
                let KernelData::Float(kernel) = &conv.kernel else {
                    unreachable!("float network");
                };
                let o = kernel.shape()[0];
                let step = delta[&layer.id].clone();
                let snapped = quant::discretize_weights(kernel, &vec![step; o])
                    .map_err(|e| Error::graph(layer.id.as_str(), e.to_string()))?;
                conv.kernel = KernelData::Float(snapped);
            }
            LayerOp::BRelu(b) => {
                if let Some(map) = bounds {
                    b.upper = map[&layer.id];
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// One built integer model plus its companion and bookkeeping.
struct Candidate {
    integer: Model,
    float_reference: Model,
    sync_events: Vec<String>,
    prune_candidates: Vec<(LayerId, Vec<usize>)>,
}

/// Working per-convolution state during a build.
struct WorkRec {
    delta: Rational,
    ratio_x: Rational,
    ratio_y: Rational,
    act: Option<WorkAct>,
}

struct WorkAct {
    brelu: LayerId,
    h_rf: f64,
    h_ri: i64,
    mul_shift: MulShift,
}

/// Builds the integer model for one set of activation bounds.
///
/// Weight re-quantization after a synchronization can in principle push a
/// weight past the 8-bit range when the synthesized stage rounds the scale
/// the short way; the build then nudges that stage one multiplier step in
/// the safe direction and retries. The nudge map is keyed by the affected
/// convolution.
fn build_candidate(
    folded: &NetworkIR,
    bounds: &BTreeMap<LayerId, f64>,
    max_int: i64,
) -> Result<Candidate> {
    let mut nudges: BTreeMap<LayerId, u32> = BTreeMap::new();
    for _attempt in 0..16 {
        match try_build(folded, bounds, max_int, &nudges)? {
            BuildOutcome::Done(candidate) => return Ok(*candidate),
            BuildOutcome::WeightOverflow(conv) => {
                *nudges.entry(conv).or_insert(0) += 1;
            }
        }
    }
    Err(Error::overflow(
        "weight re-quantization kept overflowing after repeated stage adjustments",
    ))
}

enum BuildOutcome {
    Done(Box<Candidate>),
    WeightOverflow(LayerId),
}

fn try_build(
    folded: &NetworkIR,
    bounds: &BTreeMap<LayerId, f64>,
    max_int: i64,
    nudges: &BTreeMap<LayerId, u32>,
) -> Result<BuildOutcome> {
    let info = folded.validate()?;
    let mut used_bounds: BTreeSet<&LayerId> = BTreeSet::new();

    let mut records: BTreeMap<LayerId, WorkRec> = BTreeMap::new();
    let mut ratios: BTreeMap<LayerId, Rational> = BTreeMap::new();
    // Rescale layers to insert, keyed by the residual-add they protect.
    let mut skip_stages: BTreeMap<LayerId, (LayerId, MulShift)> = BTreeMap::new();
    let mut sync_events: Vec<String> = Vec::new();

    for &i in &info.order {
        let layer = &folded.layers[i];
        let id = layer.id.as_str();
        let producer_op = |input: &LayerId| folded.layer(input).map(|l| l.op.name());
        match &layer.op {
            LayerOp::Conv2d(conv) => {
                let ratio_x = match layer.inputs.first() {
                    None => folded.input_ratio.clone(),
                    Some(input) => {
                        if !matches!(producer_op(input), Some("brelu") | Some("concat")) {
                            return Err(Error::graph(
                                id,
                                "convolution consumes an unactivated value; integer execution \
                                 needs a bounded activation between convolutions",
                            ));
                        }
                        ratios[input].clone()
                    }
                };
                let delta = match &conv.kernel {
                    KernelData::Float(_) => {
                        // Base step; merge synchronization may replace it.
                        base_step(folded, &layer.id)?
                    }
                    KernelData::Int(_) => unreachable!("float network"),
                };
                let ratio_y = &ratio_x / &delta;
                records.insert(
                    layer.id.clone(),
                    WorkRec {
                        delta,
                        ratio_x,
                        ratio_y: ratio_y.clone(),
                        act: None,
                    },
                );
                ratios.insert(layer.id.clone(), ratio_y);
            }
            LayerOp::BRelu(_) => {
                let conv = driving_conv(folded, &layer.id)?;
                let bound = *bounds.get(&layer.id).ok_or_else(|| {
                    Error::graph(id, "no activation bound for this brelu")
                })?;
                used_bounds.insert(bounds.get_key_value(&layer.id).unwrap().0);
                let rec = records.get_mut(&conv).expect("conv precedes its brelu");
                if rec.act.is_some() {
                    return Err(Error::graph(
                        id,
                        format!("convolution '{conv}' already drives another brelu"),
                    ));
                }
                let fix = quant::fixup_brelu(bound, &rec.ratio_y, max_int)
                    .map_err(|e| Error::graph(id, e.to_string()))?;
                rec.act = Some(WorkAct {
                    brelu: layer.id.clone(),
                    h_rf: bound,
                    h_ri: fix.h_ri,
                    mul_shift: fix.mul_shift,
                });
                ratios.insert(layer.id.clone(), fix.ratio_v);
            }
            LayerOp::Concat => {
                // Branches must be single-consumer brelus; their records are
                // rewritten to share one scale.
                let mut branch_convs = Vec::with_capacity(layer.inputs.len());
                for input in &layer.inputs {
                    if producer_op(input) != Some("brelu") {
                        return Err(Error::graph(
                            id,
                            "concat branches must be bounded activations",
                        ));
                    }
                    if info.consumers[input].len() != 1 {
                        return Err(Error::graph(
                            id,
                            format!("branch '{input}' fans out; its scale cannot be rewritten"),
                        ));
                    }
                    branch_convs.push(driving_conv(folded, input)?);
                }
                let branches: Vec<ConcatBranch> = branch_convs
                    .iter()
                    .map(|conv| {
                        let rec = &records[conv];
                        ConcatBranch {
                            delta: rec.delta.clone(),
                            ratio_y: rec.ratio_y.clone(),
                            ratio_v: ratios
                                [&rec.act.as_ref().expect("branch brelu fixed").brelu]
                                .clone(),
                        }
                    })
                    .collect();
                let mut synced = sync_concat(&branches)?;
                // Apply overflow nudges: a larger multiplier raises the
                // branch's weight step while keeping ratio_v exact.
                for (conv, s) in branch_convs.iter().zip(&mut synced) {
                    let bump = nudges.get(conv).copied().unwrap_or(0);
                    if bump > 0 {
                        let mul = s.mul_shift.mul.saturating_add(bump).min(quant::MUL_MAX as u32);
                        s.mul_shift = MulShift::new(mul, s.mul_shift.shift)?;
                        s.ratio_y = &s.ratio_v / s.mul_shift.as_ratio();
                        let rec = &records[conv];
                        s.delta = &rec.ratio_x / &s.ratio_y;
                    }
                }
                for (conv, s) in branch_convs.iter().zip(&synced) {
                    let rec = records.get_mut(conv).expect("branch conv recorded");
                    rec.delta = s.delta.clone();
                    rec.ratio_y = s.ratio_y.clone();
                    let act = rec.act.as_mut().expect("branch brelu fixed");
                    act.mul_shift = s.mul_shift;
                    ratios.insert(act.brelu.clone(), s.ratio_v.clone());
                }
                sync_events.push(format!(
                    "concat '{}': {} branches share scale {}",
                    layer.id,
                    branches.len(),
                    ratio::format(&synced[0].ratio_v)
                ));
                ratios.insert(layer.id.clone(), synced[0].ratio_v.clone());
            }
            LayerOp::ResidualAdd => {
                let main = &layer.inputs[0];
                let skip = &layer.inputs[1];
                if producer_op(main) != Some("conv2d") {
                    return Err(Error::graph(
                        id,
                        "the first residual input must be the main-path convolution",
                    ));
                }
                if info.consumers[main].len() != 1 {
                    return Err(Error::graph(
                        id,
                        format!("main-path convolution '{main}' fans out; its step cannot be rewritten"),
                    ));
                }
                let skip_ratio = ratios[skip].clone();
                let (main_ratio_x, main_ratio_y) = {
                    let rec = &records[main];
                    (rec.ratio_x.clone(), rec.ratio_y.clone())
                };
                let mut sync = sync_residual(&skip_ratio, &main_ratio_x, &main_ratio_y)?;
                // Overflow nudge: a smaller skip multiplier lowers the shared
                // scale and with it the main path's required precision.
                let bump = nudges.get(main).copied().unwrap_or(0);
                if bump > 0 {
                    let mul = sync.skip_rescale.mul.saturating_sub(bump).max(1);
                    sync.skip_rescale = MulShift::new(mul, sync.skip_rescale.shift)?;
                    sync.shared_ratio = &skip_ratio * sync.skip_rescale.as_ratio();
                    sync.main_delta = &main_ratio_x / &sync.shared_ratio;
                }
                let rec = records.get_mut(main).expect("main conv recorded");
                rec.delta = sync.main_delta.clone();
                rec.ratio_y = sync.shared_ratio.clone();
                skip_stages.insert(layer.id.clone(), (skip.clone(), sync.skip_rescale));
                sync_events.push(format!(
                    "residual '{}': skip stage {}/2^{}, shared scale {}",
                    layer.id,
                    sync.skip_rescale.mul,
                    sync.skip_rescale.shift,
                    ratio::format(&sync.shared_ratio)
                ));
                ratios.insert(layer.id.clone(), sync.shared_ratio);
            }
            LayerOp::Rescale(_) => {
                return Err(Error::graph(id, "float networks must not contain rescale layers"));
            }
        }
    }

    for id in bounds.keys() {
        if !used_bounds.contains(id) {
            return Err(Error::graph(
                id.as_str(),
                "activation bound does not match any brelu",
            ));
        }
    }

    // Materialize the integer network and its float companion.
    let mut int_layers: Vec<Layer> = Vec::new();
    let mut ref_layers: Vec<Layer> = Vec::new();
    let mut seeds: Vec<RecordSeed> = Vec::new();
    let mut prune_candidates: Vec<(LayerId, Vec<usize>)> = Vec::new();

    for layer in &folded.layers {
        match &layer.op {
            LayerOp::Conv2d(conv) => {
                let KernelData::Float(kernel) = &conv.kernel else {
                    unreachable!("float network");
                };
                let BiasData::Float(bias) = &conv.bias else {
                    unreachable!("float network");
                };
                let rec = &records[&layer.id];
                let o = kernel.shape()[0];
                let q = match quantize_weights_with_step(kernel, &rec.delta) {
                    Ok(q) => q,
                    Err(Error::Overflow { .. }) => {
                        return Ok(BuildOutcome::WeightOverflow(layer.id.clone()))
                    }
                    Err(e) => return Err(e),
                };
                if !q.zero_channels.is_empty() {
                    prune_candidates.push((layer.id.clone(), q.zero_channels.clone()));
                }
                let ratio_y_per: Vec<Rational> = vec![rec.ratio_y.clone(); o];
                let int_bias = quantize_bias(bias, &ratio_y_per)
                    .map_err(|e| Error::graph(layer.id.as_str(), e.to_string()))?;
                // The companion carries exactly what the integer model
                // realizes: snapped weights and the dequantized bias.
                let ref_kernel = quant::discretize_weights(kernel, &vec![rec.delta.clone(); o])?;
                let ref_bias: Vec<f32> = int_bias
                    .iter()
                    .map(|&b| ratio::to_f64(&(ratio::from_i64(b as i64) / &rec.ratio_y)) as f32)
                    .collect();
                int_layers.push(Layer {
                    id: layer.id.clone(),
                    inputs: layer.inputs.clone(),
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Int(q.values),
                        bias: BiasData::Int(int_bias),
                        stride: conv.stride,
                        padding: conv.padding,
                        batch_norm: None,
                    }),
                });
                ref_layers.push(Layer {
                    id: layer.id.clone(),
                    inputs: layer.inputs.clone(),
                    op: LayerOp::Conv2d(Conv2d {
                        kernel: KernelData::Float(ref_kernel),
                        bias: BiasData::Float(ref_bias),
                        stride: conv.stride,
                        padding: conv.padding,
                        batch_norm: None,
                    }),
                });
                seeds.push(RecordSeed {
                    layer: layer.id.clone(),
                    delta: vec![rec.delta.clone(); o],
                    act: rec.act.as_ref().map(|a| ActSeed {
                        brelu: a.brelu.clone(),
                        h_rf: a.h_rf,
                        h_ri: a.h_ri,
                        mul_shift: a.mul_shift,
                        max_int,
                    }),
                });
            }
            LayerOp::BRelu(_) => {
                let conv = driving_conv(folded, &layer.id)?;
                let rec = &records[&conv];
                let act = rec.act.as_ref().expect("brelu fixed");
                let fix = quant::finish_fix(act.h_ri, act.mul_shift, &rec.ratio_y, max_int)?;
                let upper = ratio::to_f64(&fix.h_f);
                int_layers.push(Layer {
                    id: layer.id.clone(),
                    inputs: layer.inputs.clone(),
                    op: LayerOp::BRelu(BRelu { upper }),
                });
                ref_layers.push(Layer {
                    id: layer.id.clone(),
                    inputs: layer.inputs.clone(),
                    op: LayerOp::BRelu(BRelu { upper }),
                });
            }
            LayerOp::ResidualAdd => {
                let (skip, stage) = skip_stages.remove(&layer.id).expect("residual synced");
                let stage_id = LayerId::new(format!("{}.skip", layer.id));
                if folded.layer(&stage_id).is_some() {
                    return Err(Error::graph(
                        stage_id.as_str(),
                        "layer id collides with a reserved rescale id",
                    ));
                }
                int_layers.push(Layer {
                    id: stage_id.clone(),
                    inputs: vec![skip],
                    op: LayerOp::Rescale(stage),
                });
                int_layers.push(Layer {
                    id: layer.id.clone(),
                    inputs: vec![layer.inputs[0].clone(), stage_id],
                    op: LayerOp::ResidualAdd,
                });
                ref_layers.push(layer.clone());
            }
            LayerOp::Concat => {
                int_layers.push(layer.clone());
                ref_layers.push(layer.clone());
            }
            LayerOp::Rescale(_) => unreachable!("rejected above"),
        }
    }

    let int_ir = NetworkIR {
        name: folded.name.clone(),
        input_shape: folded.input_shape,
        input_ratio: folded.input_ratio.clone(),
        layers: int_layers,
    };
    // Rebuilding from seeds recomputes every derived scale through the same
    // checked path model loading uses; any inconsistency in the build
    // surfaces here rather than in a saved file.
    let table = quant::rebuild_table(&int_ir, seeds, max_int)?;
    if &table.output_ratio != ratios.get(&info.sink).expect("sink ratio") {
        return Err(Error::invalid(
            "internal: propagated output scale disagrees with the rebuilt table",
        ));
    }
    check_accumulator_bounds(&int_ir, &table)?;

    let ref_ir = NetworkIR {
        name: format!("{} (discretized)", folded.name),
        input_shape: folded.input_shape,
        input_ratio: folded.input_ratio.clone(),
        layers: ref_layers,
    };
    ref_ir.validate()?;

    Ok(BuildOutcome::Done(Box::new(Candidate {
        integer: Model::integer(int_ir, table),
        float_reference: Model::float(ref_ir),
        sync_events,
        prune_candidates,
    })))
}

fn base_step(folded: &NetworkIR, conv: &LayerId) -> Result<Rational> {
    let layer = folded.layer(conv).expect("known conv");
    let LayerOp::Conv2d(c) = &layer.op else {
        unreachable!();
    };
    let KernelData::Float(kernel) = &c.kernel else {
        unreachable!("float network");
    };
    let q = quantize_weights(kernel, false).map_err(|e| Error::graph(conv.as_str(), e.to_string()))?;
    Ok(q.delta[0].clone())
}

/// Mean squared error between two equal-length slices.
pub fn mse(reference: &[f32], candidate: &[f32]) -> Result<f64> {
    if reference.len() != candidate.len() || reference.is_empty() {
        return Err(Error::shape(
            "mse",
            format!("{} samples", reference.len()),
            candidate.len().to_string(),
        ));
    }
    let sum: f64 = reference
        .iter()
        .zip(candidate)
        .map(|(&r, &c)| {
            let d = r as f64 - c as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Peak signal-to-noise ratio in decibels for a given signal peak.
/// An exact match yields infinity.
pub fn psnr(reference: &[f32], candidate: &[f32], peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let e = mse(reference, candidate)?;
    Ok(10.0 * ((peak * peak) / e).log10())
}
