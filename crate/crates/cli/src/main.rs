use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use herd_core::behavior::{classify_window, read_accel_csv, slide_windows, BehaviorError, BehaviorLabel};
use herd_core::detection::{
    mean_average_precision, read_detections, read_ground_truth, DetectionError, DEFAULT_CLASSES,
};
use herd_core::nn::{
    calibrate, count_nonzero_params, forward_float, forward_int8_dequantized, load_weights, profile, ModelGraph,
    WeightFileError,
};
use herd_core::sim::{run_simulation, Scenario, SimError};
use herd_core::FloatTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Livestock monitor toolkit: fleet simulation, detection metrics, model
/// profiling and accelerometer windowing.
#[derive(Parser, Debug)]
#[command(name = "herd", version)]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (repeatable); HERD_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario through the fleet simulator.
    Simulate(SimulateArgs),
    /// Per-class AP and mAP of a detection file against ground truth.
    EvalMap(EvalMapArgs),
    /// FLOPs, parameters and peak activation memory of a weight file.
    Profile(ProfileArgs),
    /// Slide windows over an accelerometer CSV and count labels.
    Windows(WindowsArgs),
    /// Classify accelerometer windows with a behavior model.
    Classify(ClassifyArgs),
    /// Calibrate INT8 parameters and compare against float inference.
    Quantize(QuantizeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Defaults to the scenario's `seed` field (0 when absent).
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the scenario's `horizon_ms`.
    #[arg(long)]
    horizon_ms: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalMapArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Class ids at or above this are rejected.
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    classes: usize,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args, Debug)]
struct WindowsArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = herd_core::behavior::DEFAULT_WINDOW_LEN)]
    len: usize,
    #[arg(long, default_value_t = herd_core::behavior::DEFAULT_STEP)]
    step: usize,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    /// Window length comes from the model input.
    #[arg(long, default_value_t = herd_core::behavior::DEFAULT_STEP)]
    step: usize,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random calibration inputs.
    #[arg(long, default_value_t = 64)]
    calib: usize,
    /// Random evaluation inputs.
    #[arg(long, default_value_t = 1000)]
    inputs: usize,
}

/// Exit 2 for bad input, 1 for failures while running.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl ToString) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    fn runtime(message: impl ToString) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(_) | SimError::Io { .. } | SimError::Weights(_) => Self::input(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<DetectionError> for Failure {
    fn from(e: DetectionError) -> Self {
        Self::input(e)
    }
}

impl From<WeightFileError> for Failure {
    fn from(e: WeightFileError) -> Self {
        Self::input(e)
    }
}

impl From<BehaviorError> for Failure {
    fn from(e: BehaviorError) -> Self {
        match e {
            BehaviorError::Graph(_) => Self::runtime(e),
            _ => Self::input(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HERD_LOG", default_level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("herd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.json),
        Command::EvalMap(a) => cmd_eval_map(a, cli.json),
        Command::Profile(a) => cmd_profile(a, cli.json),
        Command::Windows(a) => cmd_windows(a, cli.json),
        Command::Classify(a) => cmd_classify(a, cli.json),
        Command::Quantize(a) => cmd_quantize(a, cli.json),
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{}: no such file", path.display())))
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn cmd_simulate(a: &SimulateArgs, as_json: bool) -> Result<(), Failure> {
    require_file(&a.scenario)?;
    let scenario = Scenario::from_path(&a.scenario)?;
    let seed = a.seed.unwrap_or(scenario.seed);
    let horizon = a.horizon_ms.unwrap_or(scenario.horizon_ms);
    log::info!("simulating {} devices for {horizon} ms, seed {seed}", scenario.devices.len());
    let report = run_simulation(&scenario, horizon, seed)?;
    let text = report.to_json();
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{text}\n")).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    }
    if as_json {
        println!("{text}");
        return Ok(());
    }
    println!("events            {}", report.events);
    println!("simulated ms      {}", report.end_time_ms);
    for (id, d) in &report.devices {
        let sent: u64 = d.sent.values().sum();
        let received: u64 = d.received.values().sum();
        println!("device {id:<5} {:<8} sent {sent:<6} received {received}", format!("{:?}", d.kind).to_lowercase());
    }
    let levels: Vec<String> = report.notifications_by_level.iter().map(|(l, n)| format!("L{l}={n}")).collect();
    println!("notifications     {} ({})", report.notifications.len(), levels.join(" "));
    println!(
        "dropped           out of range {}, lost {}, malformed {}",
        report.dropped.out_of_range, report.dropped.lost, report.dropped.malformed
    );
    Ok(())
}

fn cmd_eval_map(a: &EvalMapArgs, as_json: bool) -> Result<(), Failure> {
    require_file(&a.dets)?;
    require_file(&a.gt)?;
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Failure::input(format!("--iou {} outside [0, 1]", a.iou)));
    }
    let dets = read_detections(&a.dets)?;
    let gt = read_ground_truth(&a.gt)?;
    let classes = dets.values().flatten().map(|d| d.class_id).chain(gt.values().flatten().map(|g| g.class_id));
    if let Some(bad) = classes.filter(|&c| c >= a.classes).min() {
        return Err(Failure::input(format!("unknown class id {bad} (expected 0..{})", a.classes)));
    }
    let (map, per_class) = mean_average_precision(&dets, &gt, a.iou);
    if as_json {
        let classes: Vec<_> = per_class
            .iter()
            .map(|c| json!({"class_id": c.class_id, "ap": c.ap, "ground_truth": c.num_gt, "detections": c.num_detections}))
            .collect();
        print_json(&json!({"iou_threshold": a.iou, "map": map, "classes": classes}));
        return Ok(());
    }
    for c in &per_class {
        println!("class {:<3} AP {:.4}  (gt {}, detections {})", c.class_id, c.ap, c.num_gt, c.num_detections);
    }
    println!("mAP@{} {:.4}", a.iou, map);
    Ok(())
}

fn load(path: &Path) -> Result<ModelGraph, Failure> {
    require_file(path)?;
    Ok(load_weights(path)?)
}

fn cmd_profile(a: &ProfileArgs, as_json: bool) -> Result<(), Failure> {
    let g = load(&a.weights)?;
    let int8 = profile(&g, 1);
    let float = profile(&g, 4);
    let nonzero = count_nonzero_params(&g);
    if as_json {
        print_json(&json!({
            "layers": g.layers().len(),
            "flops": int8.flops,
            "params": int8.params,
            "nonzero_params": nonzero,
            "peak_activation_bytes": {"int8": int8.peak_activation_bytes, "float32": float.peak_activation_bytes},
            "param_bytes": {"int8": int8.params, "float32": 4 * float.params},
        }));
        return Ok(());
    }
    println!("layers                    {}", g.layers().len());
    println!("input                     {:?}", g.input_shape());
    println!("output                    {:?}", g.output_shape());
    println!("#FLOPs                    {}", int8.flops);
    println!("#Params                   {}", int8.params);
    println!("non-zero params           {nonzero}");
    println!("peak activation (INT8)    {} B", int8.peak_activation_bytes);
    println!("peak activation (float)   {} B", float.peak_activation_bytes);
    Ok(())
}

fn label_histogram<'a>(labels: impl Iterator<Item = &'a BehaviorLabel>) -> BTreeMap<&'static str, usize> {
    let mut h: BTreeMap<&'static str, usize> = BehaviorLabel::ALL.iter().map(|l| (l.code(), 0)).collect();
    for l in labels {
        *h.entry(l.code()).or_default() += 1;
    }
    h
}

fn cmd_windows(a: &WindowsArgs, as_json: bool) -> Result<(), Failure> {
    require_file(&a.csv)?;
    let series = read_accel_csv(&a.csv)?;
    let windows = slide_windows(&series, a.len, a.step)?;
    let hist = label_histogram(windows.iter().filter_map(|w| w.label.as_ref()));
    if as_json {
        print_json(
            &json!({"samples": series.len(), "window_len": a.len, "step": a.step, "windows": windows.len(), "labels": hist}),
        );
        return Ok(());
    }
    println!("samples {}  window {}  step {}", series.len(), a.len, a.step);
    println!("windows {}", windows.len());
    for l in BehaviorLabel::ALL {
        println!("  {} {}", l.code(), hist[l.code()]);
    }
    Ok(())
}

fn cmd_classify(a: &ClassifyArgs, as_json: bool) -> Result<(), Failure> {
    let g = load(&a.weights)?;
    require_file(&a.csv)?;
    let len = match g.input_shape() {
        [t, 3] => *t,
        other => return Err(Failure::input(format!("model input {other:?} is not an accelerometer window [T, 3]"))),
    };
    let series = read_accel_csv(&a.csv)?;
    let windows = slide_windows(&series, len, a.step)?;
    let mut predicted = Vec::with_capacity(windows.len());
    let mut correct = 0;
    for w in &windows {
        let p = classify_window(&g, w)?;
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        let label = BehaviorLabel::from_index(best).expect("five classes");
        correct += usize::from(w.label == Some(label));
        predicted.push(label);
    }
    let accuracy = if windows.is_empty() { 0.0 } else { correct as f64 / windows.len() as f64 };
    let hist = label_histogram(predicted.iter());
    if as_json {
        let codes: Vec<&str> = predicted.iter().map(|l| l.code()).collect();
        print_json(&json!({"windows": windows.len(), "accuracy": accuracy, "predicted": hist, "labels": codes}));
        return Ok(());
    }
    println!("windows {}  accuracy vs majority labels {:.4}", windows.len(), accuracy);
    for l in BehaviorLabel::ALL {
        println!("  {} {}", l.code(), hist[l.code()]);
    }
    Ok(())
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> FloatTensor {
    let n = shape.iter().product();
    FloatTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect()).expect("finite")
}

fn cmd_quantize(a: &QuantizeArgs, as_json: bool) -> Result<(), Failure> {
    if a.calib == 0 || a.inputs == 0 {
        return Err(Failure::input("--calib and --inputs must be positive"));
    }
    let mut g = load(&a.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shape = g.input_shape().to_vec();
    let calib: Vec<FloatTensor> = (0..a.calib).map(|_| random_input(&shape, &mut rng)).collect();
    calibrate(&mut g, &calib).map_err(Failure::runtime)?;
    let (mut agree, mut max_dev) = (0usize, 0.0f32);
    for _ in 0..a.inputs {
        let x = random_input(&shape, &mut rng);
        let f = forward_float(&g, &x).map_err(Failure::runtime)?;
        let q = forward_int8_dequantized(&g, &x).map_err(Failure::runtime)?;
        agree += usize::from(f.argmax() == q.argmax());
        max_dev = f.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()).fold(max_dev, f32::max);
    }
    let agreement = agree as f64 / a.inputs as f64;
    if as_json {
        print_json(&json!({"inputs": a.inputs, "argmax_agreement": agreement, "max_abs_deviation": max_dev}));
        return Ok(());
    }
    println!("inputs {}  argmax agreement {:.4}  max |float - int8| {:.6}", a.inputs, agreement, max_dev);
    Ok(())
}
