//! Command-line front end for the quantization toolkit: calibrate activation
//! bounds, convert float models to integer models, run inference, compare
//! the two engines, and benchmark them.
//!
//! Exit codes: 0 success, 1 usage error, 2 model or data validation error,
//! 3 comparison threshold failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intnet::calibrate::{
    calibrate_nsigma, geometric_bounds, output_peak, parse_report, write_report,
};
use intnet::convert::{
    convert_with, mse, psnr, BoundSource, MetricFn, PipelineConfig, PipelineHooks,
};
use intnet::float_engine::forward_f32;
use intnet::int_engine::{dequantize, forward_int, ExecOptions};
use intnet::model_io::{load, save, Model};
use intnet::quant::renormalize_input_f32;
use intnet::ratio;
use intnet::tensor::{read_blob_file, write_blob_file, AnyTensor, Tensor};

#[derive(Parser)]
#[command(
    name = "intnet",
    about = "Post-training quantization toolkit and integer inference engine",
    version
)]
struct Cli {
    /// Worker threads for both engines (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed for synthetic inputs and schedule shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate activation bounds for a float model and write a report.
    Calibrate(CalibrateArgs),
    /// Convert a float model into an integer model.
    Convert(ConvertArgs),
    /// Run a model over a data directory and write its outputs.
    Infer(InferArgs),
    /// Run float and integer models on the same data and report divergence.
    Compare(CompareArgs),
    /// Time forward passes of one or both engines on synthetic input.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Nsigma,
    Geometric,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    /// Report argmax class indices; the output scale cancels.
    Classify,
    /// Divide integer outputs by the model's output ratio.
    Regress,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Float model file.
    #[arg(long)]
    model: PathBuf,
    /// Directory of raw input batches (.tblob, u8, NCHW).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Nsigma)]
    method: Method,
    /// Quantile parameter for the n-sigma rule.
    #[arg(long, default_value_t = 3.0)]
    n: f64,
    /// Input-side bound for the geometric progression.
    #[arg(long, default_value_t = 0.5)]
    a0: f64,
    /// Output-side bound for the geometric progression; measured from the
    /// data when omitted.
    #[arg(long)]
    an: Option<f64>,
    /// Largest number of data batches to use.
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Float model file.
    #[arg(long)]
    model: PathBuf,
    /// Integer model output path.
    #[arg(long)]
    out: PathBuf,
    /// Calibration report to take bounds from (skips calibration here).
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Directory of raw input batches; required for the n-sigma method
    /// without a report, and for the quality-target sweep.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Nsigma)]
    method: Method,
    /// Activation storage width in bits (4 to 8); weights are always 8-bit.
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, default_value_t = 3.0)]
    n: f64,
    #[arg(long, default_value_t = 0.5)]
    n_step: f64,
    #[arg(long, default_value_t = 6.0)]
    n_cap: f64,
    #[arg(long, default_value_t = 0.5)]
    a0: f64,
    #[arg(long)]
    an: Option<f64>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Equivalence PSNR (dB) the n-sigma sweep must reach; single-shot
    /// conversion when omitted.
    #[arg(long)]
    metric_threshold: Option<f64>,
    /// Conversion report path; defaults to the model path + ".report".
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also save the float reference model (discretized weights, realized
    /// bounds) for later comparison.
    #[arg(long)]
    ref_out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Model file, float or integer.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Regress)]
    mode: Mode,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Output directory for .tblob results (regress) or a class listing
    /// (classify); stdout summary only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every layer's integer output alongside the results.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Float model file.
    #[arg(long)]
    model: PathBuf,
    /// Integer model file.
    #[arg(long)]
    int_model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Regress)]
    mode: Mode,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Fail (exit 3) when the pooled PSNR falls below this many dB.
    #[arg(long)]
    psnr_floor: Option<f64>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Float model to time.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Integer model to time.
    #[arg(long)]
    int_model: Option<PathBuf>,
    /// Images per synthetic batch.
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Timed repetitions after one warmup pass.
    #[arg(long, default_value_t = 10)]
    repeat: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Version/help requests are successes, everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = intnet::int_engine::set_worker_threads(cli.threads) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Convert(args) => cmd_convert(args),
        Command::Infer(args) => cmd_infer(args, cli.seed),
        Command::Compare(args) => cmd_compare(args),
        Command::Bench(args) => cmd_bench(args, cli.seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CmdResult = Result<ExitCode, intnet::Error>;

fn usage(message: impl std::fmt::Display) -> CmdResult {
    eprintln!("error: {message}");
    Ok(ExitCode::from(1))
}

/// Loads every .tblob batch in `dir` (sorted by file name, at most `limit`).
fn load_batches(dir: &Path, limit: usize) -> Result<Vec<(String, Tensor<u8>)>, intnet::Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tblob"))
        .collect();
    paths.sort();
    paths.truncate(limit);
    if paths.is_empty() {
        return Err(intnet::Error::invalid(format!(
            "no .tblob batches found in {}",
            dir.display()
        )));
    }
    let mut batches = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match read_blob_file(&path)? {
            AnyTensor::U8(t) if t.rank() == 4 => batches.push((name, t)),
            other => {
                return Err(intnet::Error::invalid(format!(
                    "{}: expected a rank-4 u8 batch, got {} rank {}",
                    path.display(),
                    other.kind(),
                    other.rank()
                )))
            }
        }
    }
    Ok(batches)
}

fn require_float(model: &Model, path: &Path) -> Result<(), intnet::Error> {
    if model.is_integer() {
        return Err(intnet::Error::invalid(format!(
            "{} is an integer model; this command needs the float model",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> CmdResult {
    let model = load(&args.model)?;
    require_float(&model, &args.model)?;
    let (method, bounds) = match args.method {
        Method::Nsigma => {
            let Some(dir) = &args.data else {
                return usage("--method nsigma needs --data");
            };
            let batches = load_batches(dir, args.batch)?;
            let tensors: Vec<Tensor<u8>> = batches.into_iter().map(|(_, t)| t).collect();
            let bounds = calibrate_nsigma(&model.ir, &tensors, args.n)?;
            let tail = intnet::calibrate::tail_fraction(args.n);
            (format!("nsigma n={} tail={tail:e} batches={}", args.n, tensors.len()), bounds)
        }
        Method::Geometric => {
            let an = match args.an {
                Some(an) => an,
                None => {
                    let Some(dir) = &args.data else {
                        return usage("--method geometric needs --an or --data to measure it");
                    };
                    let batches = load_batches(dir, args.batch)?;
                    let tensors: Vec<Tensor<u8>> = batches.into_iter().map(|(_, t)| t).collect();
                    output_peak(&model.ir, &tensors)?
                }
            };
            let bounds = geometric_bounds(&model.ir, args.a0, an)?;
            (format!("geometric a0={} an={an}", args.a0), bounds)
        }
    };
    let report = write_report(&method, &bounds);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &report)?;
            println!("calibration written: {} ({} bounds)", path.display(), bounds.len());
        }
        None => print!("{report}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(args: ConvertArgs) -> CmdResult {
    let model = load(&args.model)?;
    require_float(&model, &args.model)?;
    if !(4..=8).contains(&args.bits) {
        return usage(format!("--bits must be in 4..=8, got {}", args.bits));
    }
    if args.metric_threshold.is_some() && args.method != Method::Nsigma {
        return usage("--metric-threshold only applies to --method nsigma");
    }

    let data = match &args.data {
        Some(dir) => Some(
            load_batches(dir, args.batch)?
                .into_iter()
                .map(|(_, t)| t)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };

    let bounds = if let Some(calib) = &args.calib {
        let text = std::fs::read_to_string(calib)?;
        let (_, map) = parse_report(&text)?;
        BoundSource::Fixed(map)
    } else {
        match args.method {
            Method::Nsigma => {
                let Some(batches) = data.clone() else {
                    return usage("--method nsigma needs --data or --calib");
                };
                BoundSource::NSigma { batches }
            }
            Method::Geometric => {
                let an = match args.an {
                    Some(an) => an,
                    None => match &data {
                        Some(batches) => output_peak(&model.ir, batches)?,
                        None => {
                            return usage("--method geometric needs --an or --data to measure it")
                        }
                    },
                };
                BoundSource::Geometric { a0: args.a0, an }
            }
        }
    };

    let cfg = PipelineConfig {
        bits: args.bits,
        n_start: args.n,
        n_step: args.n_step,
        n_cap: args.n_cap,
    };

    // The sweep metric is the pooled equivalence PSNR over the data.
    let metric_batches = data.clone().unwrap_or_default();
    let mut metric = move |integer: &Model, reference: &Model| {
        let mut all_ref = Vec::new();
        let mut all_int = Vec::new();
        for raw in &metric_batches {
            let float_in = renormalize_input_f32(raw, &reference.ir.input_ratio);
            all_ref.extend_from_slice(forward_f32(&reference.ir, &float_in, false)?.output.data());
            let run = forward_int(integer, raw, &ExecOptions::default())?;
            all_int.extend_from_slice(dequantize(&run.output, &run.output_ratio).data());
        }
        let peak = all_ref.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        psnr(&all_ref, &all_int, peak)
    };
    let hooks = match args.metric_threshold {
        Some(threshold) => {
            if data.is_none() {
                return usage("--metric-threshold needs --data to score candidates");
            }
            PipelineHooks {
                stage: None,
                metric: Some((&mut metric as &mut MetricFn, threshold)),
            }
        }
        None => PipelineHooks::default(),
    };

    let out = convert_with(&model, &bounds, &cfg, hooks)?;
    save(&out.integer, &args.out)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report"));
    std::fs::write(&report_path, out.report.render())?;
    if let Some(ref_path) = &args.ref_out {
        save(&out.float_reference, ref_path)?;
    }
    println!(
        "integer model written: {} ({} convolutions, report {})",
        args.out.display(),
        out.report.layers.len(),
        report_path.display()
    );
    if out.report.threshold_met == Some(false) {
        println!("note: best candidate kept, but the metric threshold was not reached");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs, seed: u64) -> CmdResult {
    let model = load(&args.model)?;
    let batches = load_batches(&args.data, args.batch)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    let mut class_lines = Vec::new();
    for (name, raw) in &batches {
        let (output, ratio, trace) = if model.is_integer() {
            let run = forward_int(
                &model,
                raw,
                &ExecOptions {
                    schedule_seed: seed,
                    record_trace: args.trace,
                },
            )?;
            (run.output, run.output_ratio, run.trace)
        } else {
            let float_in = renormalize_input_f32(raw, &model.ir.input_ratio);
            let run = forward_f32(&model.ir, &float_in, false)?;
            (AnyTensor::F32(run.output), ratio::from_i64(1), None)
        };
        match args.mode {
            Mode::Classify => {
                for (item, class) in argmax_per_item(&output).into_iter().enumerate() {
                    class_lines.push(format!("{name}[{item}] {class}"));
                }
            }
            Mode::Regress => {
                let rescaled = if model.is_integer() {
                    dequantize(&output, &ratio)
                } else {
                    let AnyTensor::F32(t) = output else { unreachable!() };
                    t
                };
                if let Some(dir) = &args.out {
                    let path = dir.join(format!("{name}.out.tblob"));
                    write_blob_file(&path, &AnyTensor::F32(rescaled))?;
                } else {
                    let data = rescaled.data();
                    let preview: Vec<f32> = data.iter().take(4).copied().collect();
                    println!("{name}: {} values, first {preview:?}", data.len());
                }
            }
        }
        if let (Some(dir), Some(trace)) = (&args.out, trace) {
            for (layer, tensor) in trace {
                let path = dir.join(format!("{name}.{layer}.tblob"));
                write_blob_file(&path, &tensor)?;
            }
        }
    }
    if args.mode == Mode::Classify {
        match &args.out {
            Some(dir) => {
                let path = dir.join("classes.txt");
                std::fs::write(&path, class_lines.join("\n") + "\n")?;
                println!("classes written: {}", path.display());
            }
            None => {
                for line in &class_lines {
                    println!("{line}");
                }
            }
        }
    } else if args.out.is_some() {
        println!("outputs written: {} batches", batches.len());
    }
    Ok(ExitCode::SUCCESS)
}

/// Index of the largest value per batch item, over the flattened non-batch
/// dimensions; ties to the lowest index. Scale-independent for the positive
/// ratios integer models carry.
fn argmax_per_item(t: &AnyTensor) -> Vec<usize> {
    fn run<T: Copy + PartialOrd>(shape: &[usize], data: &[T]) -> Vec<usize> {
        let per = if shape.is_empty() { 0 } else { data.len() / shape[0] };
        (0..shape[0])
            .map(|i| {
                let slice = &data[i * per..(i + 1) * per];
                let mut best = 0usize;
                for (j, v) in slice.iter().enumerate() {
                    if *v > slice[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
    match t {
        AnyTensor::F32(t) => run(t.shape(), t.data()),
        AnyTensor::I8(t) => run(t.shape(), t.data()),
        AnyTensor::I32(t) => run(t.shape(), t.data()),
        AnyTensor::U8(t) => run(t.shape(), t.data()),
    }
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let float_model = load(&args.model)?;
    require_float(&float_model, &args.model)?;
    let int_model = load(&args.int_model)?;
    if !int_model.is_integer() {
        return Err(intnet::Error::invalid(format!(
            "{} is not an integer model",
            args.int_model.display()
        )));
    }
    if float_model.ir.input_shape != int_model.ir.input_shape {
        return Err(intnet::Error::shape(
            "compare input",
            format!("{:?}", float_model.ir.input_shape),
            format!("{:?}", int_model.ir.input_shape),
        ));
    }
    let batches = load_batches(&args.data, args.batch)?;

    let mut all_ref: Vec<f32> = Vec::new();
    let mut all_int: Vec<f32> = Vec::new();
    let mut agree = 0usize;
    let mut items = 0usize;
    for (_, raw) in &batches {
        let float_in = renormalize_input_f32(raw, &float_model.ir.input_ratio);
        let ref_run = forward_f32(&float_model.ir, &float_in, false)?;
        let int_run = forward_int(&int_model, raw, &ExecOptions::default())?;
        let deq = dequantize(&int_run.output, &int_run.output_ratio);
        if args.mode == Mode::Classify {
            let a = argmax_per_item(&AnyTensor::F32(ref_run.output.clone()));
            let b = argmax_per_item(&int_run.output);
            agree += a.iter().zip(&b).filter(|(x, y)| x == y).count();
            items += a.len();
        }
        all_ref.extend_from_slice(ref_run.output.data());
        all_int.extend_from_slice(deq.data());
    }

    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0f64;
    for (r, c) in all_ref.iter().zip(&all_int) {
        let d = (*r as f64 - *c as f64).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
    }
    let mean_abs = sum_abs / all_ref.len() as f64;
    let peak = all_ref.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let psnr_db = psnr(&all_ref, &all_int, peak)?;
    let mse_val = mse(&all_ref, &all_int)?;

    let mut report = String::from("#intnet-compare v1\n");
    report.push_str(&format!("batches: {}\n", batches.len()));
    report.push_str(&format!("samples: {}\n", all_ref.len()));
    report.push_str(&format!("max_abs: {max_abs:e}\n"));
    report.push_str(&format!("mean_abs: {mean_abs:e}\n"));
    report.push_str(&format!("mse: {mse_val:e}\n"));
    report.push_str(&format!("peak: {peak:e}\n"));
    report.push_str(&format!("psnr_db: {psnr_db:.4}\n"));
    if args.mode == Mode::Classify {
        report.push_str(&format!("argmax_agreement: {agree}/{items}\n"));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &report)?;
            println!("comparison written: {}", path.display());
        }
        None => print!("{report}"),
    }

    if let Some(floor) = args.psnr_floor {
        if psnr_db < floor {
            eprintln!("psnr {psnr_db:.2} dB below floor {floor} dB");
            return Ok(ExitCode::from(3));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs, seed: u64) -> CmdResult {
    if args.model.is_none() && args.int_model.is_none() {
        return usage("bench needs --model and/or --int-model");
    }
    if args.repeat == 0 || args.batch == 0 {
        return usage("--repeat and --batch must be at least 1");
    }

    let mut rows = Vec::new();
    let mut time_model = |path: &PathBuf| -> Result<(), intnet::Error> {
        let model = load(path)?;
        let [c, h, w] = model.ir.input_shape;
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::new(
            vec![args.batch, c, h, w],
            (0..args.batch * c * h * w).map(|_| g.random()).collect(),
        )?;
        let engine = if model.is_integer() { "int" } else { "float" };

        // Warmup, then timed passes. Integer outputs must not vary.
        let mut reference_blob: Option<Vec<u8>> = None;
        let mut run_once = |schedule_seed: u64| -> Result<(), intnet::Error> {
            if model.is_integer() {
                let run = forward_int(
                    &model,
                    &raw,
                    &ExecOptions {
                        schedule_seed,
                        record_trace: false,
                    },
                )?;
                let mut blob = Vec::new();
                run.output.write_blob(&mut blob);
                match &reference_blob {
                    None => reference_blob = Some(blob),
                    Some(prev) => {
                        assert_eq!(prev, &blob, "integer outputs diverged during bench");
                    }
                }
            } else {
                let float_in = renormalize_input_f32(&raw, &model.ir.input_ratio);
                forward_f32(&model.ir, &float_in, false)?;
            }
            Ok(())
        };
        run_once(seed)?;
        let start = Instant::now();
        for rep in 0..args.repeat {
            run_once(seed.wrapping_add(rep as u64 + 1))?;
        }
        let per_pass = start.elapsed().as_secs_f64() * 1e3 / args.repeat as f64;
        rows.push((engine, path.display().to_string(), per_pass));
        Ok(())
    };

    if let Some(path) = &args.model {
        time_model(path)?;
    }
    if let Some(path) = &args.int_model {
        time_model(path)?;
    }
    println!("#intnet-bench v1");
    println!("batch: {}  repeat: {}", args.batch, args.repeat);
    for (engine, path, ms) in rows {
        println!("{engine}: {ms:.3} ms/pass  ({path})");
    }
    Ok(ExitCode::SUCCESS)
}
