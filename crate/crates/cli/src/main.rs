//! `hanfuse` — command-line front end for the fusion network.
//!
//! Subcommands: `init` (parameter files), `forward` (single-frame fusion
//! with optional trace capture or replay), `trace` (trace inspection and
//! DOT export), `check` (self-verification suites), `train-demo` (gradient
//! descent on synthetic scenarios), `bench` (forward timing), `synth`
//! (dataset emission). Exit codes: 0 success, 1 check or verification
//! failure, 2 usage/format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use han_core::{
    default_dataset, export_dot, flop_count, han_forward, han_forward_replay, param_count,
    read_params, read_tensor, read_trace, train_demo, write_params, write_tensor, write_trace,
    FeatureMap, HanConfig, HanError, HanParams, ModalityPair, Result, RngState, RouteTensor,
    ScenarioClass, TraceFile, TrainConfig, DEFAULT_EDGE_THRESHOLD,
};

mod check;

// ----------------------------------------------------------------- parsing

#[derive(Parser)]
#[command(name = "hanfuse", version, about = "Attention fusion network with learned routing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Initialize a parameter file for a config and report its size.
    Init(InitArgs),
    /// Fuse one rgb/tir tensor pair and optionally record the routing trace.
    Forward(ForwardArgs),
    /// Inspect a recorded trace or render it as a DOT graph.
    Trace(TraceArgs),
    /// Run the self-verification suites.
    Check(CheckArgs),
    /// Gradient-descend on a synthetic dataset and report routing behavior.
    TrainDemo(TrainDemoArgs),
    /// Time the forward pass (median over repeated runs).
    Bench(BenchArgs),
    /// Emit a synthetic scenario dataset as tensor triplets plus a manifest.
    Synth(SynthArgs),
}

/// Flags shared by every subcommand that builds a config from scratch.
#[derive(Args)]
struct ConfigArgs {
    /// Config JSON file; defaults apply for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set layers=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed override for parameter initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Output parameter file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForwardArgs {
    /// Parameter file from `init` or `train-demo`.
    #[arg(long)]
    params: PathBuf,
    /// Visible-stream input tensor [C,H,W].
    #[arg(long)]
    rgb: PathBuf,
    /// Thermal-stream input tensor [C,H,W].
    #[arg(long)]
    tir: PathBuf,
    /// Output fused tensor.
    #[arg(long)]
    out: PathBuf,
    /// Record the routing trace to this JSON file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Re-run with gates injected from a recorded trace instead of routers.
    #[arg(long, conflicts_with = "static_structure")]
    replay: Option<PathBuf>,
    /// Frame of the replay trace to inject.
    #[arg(long, default_value_t = 0, requires = "replay")]
    frame: usize,
    /// Force every gate to 1 (the fixed dense-fusion variant).
    #[arg(long = "static")]
    static_structure: bool,
    /// Gate threshold for the recorded trace's active-edge set.
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct TraceArgs {
    /// Trace JSON file to inspect.
    #[arg(long = "in")]
    input: PathBuf,
    /// Write this frame's active-edge graph as DOT.
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Frame to export.
    #[arg(long, default_value_t = 0)]
    frame: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum CheckLevel {
    /// Structural and replay suites only (seconds).
    Fast,
    /// Adds the finite-difference gradient cross-check.
    Full,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value_t = CheckLevel::Fast)]
    level: CheckLevel,
    /// Also validate this parameter file against its declared layout.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDemoArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Gradient descent steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Gradient descent step size.
    #[arg(long)]
    step_size: Option<f64>,
    /// Parameter-initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset-generation seed.
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
    /// Write the full training report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained parameters.
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input-generation seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Worker threads fanning out over the batch.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Frames per repetition.
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset-generation seed.
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Per-class counts, e.g. "noisy-tir=4,complementary=2".
    #[arg(long)]
    counts: Option<String>,
    /// Directory receiving the tensor triplets and manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

// ------------------------------------------------------------------ helpers

fn load_config(args: &ConfigArgs) -> Result<HanConfig> {
    let mut value: serde_json::Value = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => serde_json::to_value(HanConfig::default())?,
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| HanError::Parse("config JSON must be an object".into()))?;
    for kv in &args.set {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| HanError::Parse(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    let cfg: HanConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_feature(path: &Path) -> Result<FeatureMap> {
    FeatureMap::from_tensor(read_tensor(path)?)
}

fn print_gate_summary(gates: &RouteTensor) {
    for (l, layer) in gates.gates.iter().enumerate() {
        let flat: Vec<f64> = layer.iter().flatten().copied().collect();
        let min = flat.iter().copied().fold(f64::INFINITY, f64::min);
        let max = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        println!("layer {l}: gate min {min:.4}  mean {mean:.4}  max {max:.4}");
    }
}

// --------------------------------------------------------------- commands

fn cmd_init(args: &InitArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let params = HanParams::init(&cfg)?;
    write_params(&args.out, &params)?;
    println!("wrote {}", args.out.display());
    println!("parameters: {}", param_count(&cfg));
    println!("forward flops: {}", flop_count(&cfg));
    Ok(())
}

fn cmd_forward(args: &ForwardArgs) -> Result<()> {
    let params = read_params(&args.params)?;
    let rgb = read_feature(&args.rgb)?;
    let tir = read_feature(&args.tir)?;
    let (h, w) = (rgb.height(), rgb.width());
    let input = ModalityPair::new(rgb, tir)?;
    let cfg = params.infer_config(h, w)?;

    let (fused, trace) = if let Some(trace_path) = &args.replay {
        let recorded = read_trace(trace_path)?;
        let frame = recorded.frames.get(args.frame).ok_or_else(|| {
            HanError::Config(format!(
                "frame {} out of range: trace holds {} frames",
                args.frame,
                recorded.frames.len()
            ))
        })?;
        han_forward_replay(&input, &params, &cfg, &frame.gates)?
    } else if args.static_structure {
        // Bit-identical to `han_forward_static`, and keeps the trace.
        han_forward_replay(&input, &params, &cfg, &RouteTensor::ones(cfg.layers))?
    } else {
        han_forward(&input, &params, &cfg)?
    };

    print_gate_summary(&trace.gates);
    write_tensor(&args.out, fused.as_tensor())?;
    println!("wrote {}", args.out.display());
    if let Some(trace_path) = &args.trace {
        let file = TraceFile { config: cfg, frames: vec![trace.with_threshold(args.threshold)] };
        write_trace(trace_path, &file)?;
        println!("wrote {}", trace_path.display());
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let file = read_trace(&args.input)?;
    println!(
        "config: layers={} channels={} {}x{}",
        file.config.layers, file.config.channels, file.config.height, file.config.width
    );
    println!("frames: {}", file.frames.len());
    for (idx, frame) in file.frames.iter().enumerate() {
        println!(
            "frame {idx}: {} active edges at threshold {}",
            frame.active_edges.len(),
            frame.edge_threshold
        );
        print_gate_summary(&frame.gates);
    }
    if let Some(dot_path) = &args.dot {
        let text = export_dot(&file, args.frame)?;
        han_core::io::atomic_write(dot_path, text.as_bytes())?;
        println!("wrote {}", dot_path.display());
    }
    Ok(())
}

fn cmd_train_demo(args: &TrainDemoArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut tcfg = TrainConfig::default();
    if let Some(steps) = args.steps {
        tcfg.steps = steps;
    }
    if let Some(step_size) = args.step_size {
        tcfg.step_size = step_size;
    }
    if let Some(seed) = args.seed {
        tcfg.seed = seed;
    }
    let dataset = default_dataset(&cfg, args.data_seed)?;
    let started = Instant::now();
    let report = train_demo(&dataset, &cfg, &tcfg)?;
    println!(
        "trained {} steps on {} scenarios in {:.1}s",
        tcfg.steps,
        dataset.len(),
        started.elapsed().as_secs_f64()
    );
    println!(
        "loss: initial {:.6}  final {:.6}  ratio {:.3}",
        report.initial_loss(),
        report.final_loss(),
        report.final_loss() / report.initial_loss()
    );
    for cg in &report.class_gates {
        let flat: Vec<f64> = cg
            .mean_gates
            .gates
            .iter()
            .flat_map(|layer| layer.iter().flatten())
            .copied()
            .collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        println!("class {:>13} ({} frames): mean gate {:.4}", cg.class.as_str(), cg.count, mean);
    }
    if let Some(gap) = report.gate_gap(ScenarioClass::NoisyTir, ScenarioClass::NoisyRgb) {
        println!("gate L1 gap noisy-tir vs noisy-rgb: {gap:.4}");
    }
    if let Some(out) = &args.out {
        han_core::io::atomic_write(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
        println!("wrote {}", out.display());
    }
    if let Some(params_out) = &args.params_out {
        let trained = report.params.as_ref().expect("train_demo keeps final params");
        write_params(params_out, trained)?;
        println!("wrote {}", params_out.display());
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    if args.runs == 0 || args.jobs == 0 || args.batch == 0 {
        return Err(HanError::Config("--runs, --jobs, and --batch must be positive".into()));
    }
    let params = HanParams::init(&cfg)?;
    let mut rng = RngState::new(args.seed);
    let batch: Vec<ModalityPair> = (0..args.batch)
        .map(|_| {
            Ok(ModalityPair::new(
                FeatureMap::random(cfg.channels, cfg.height, cfg.width, &mut rng, -1.0, 1.0)?,
                FeatureMap::random(cfg.channels, cfg.height, cfg.width, &mut rng, -1.0, 1.0)?,
            )?)
        })
        .collect::<Result<_>>()?;

    let mut times = Vec::with_capacity(args.runs);
    for _ in 0..args.runs {
        let started = Instant::now();
        if args.jobs == 1 {
            for input in &batch {
                let _ = han_forward(input, &params, &cfg)?;
            }
        } else {
            let chunk = batch.len().div_ceil(args.jobs);
            std::thread::scope(|scope| -> Result<()> {
                let mut workers = Vec::new();
                for slice in batch.chunks(chunk) {
                    let (params, cfg) = (&params, &cfg);
                    workers.push(scope.spawn(move || -> Result<()> {
                        for input in slice {
                            let _ = han_forward(input, params, cfg)?;
                        }
                        Ok(())
                    }));
                }
                for worker in workers {
                    worker.join().expect("bench worker panicked")?;
                }
                Ok(())
            })?;
        }
        times.push(started.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let per_frame = median / args.batch as f64;
    let flops = flop_count(&cfg) as f64;
    println!(
        "median batch time {:.3} ms over {} runs ({} frames/batch, {} jobs)",
        median * 1e3,
        args.runs,
        args.batch,
        args.jobs
    );
    println!(
        "per frame: {:.3} ms, {:.0} flops, {:.2} MFLOP/s",
        per_frame * 1e3,
        flops,
        flops / per_frame / 1e6
    );
    Ok(())
}

fn parse_counts(spec: &str) -> Result<Vec<(ScenarioClass, usize)>> {
    let mut counts = Vec::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, n) = part
            .split_once('=')
            .ok_or_else(|| HanError::Parse(format!("--counts expects class=count, got {part:?}")))?;
        let class = ScenarioClass::parse(name.trim())?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| HanError::Parse(format!("invalid count {n:?} for class {name}")))?;
        counts.push((class, n));
    }
    if counts.is_empty() {
        return Err(HanError::Parse("--counts is empty".into()));
    }
    Ok(counts)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let counts = match &args.counts {
        Some(spec) => parse_counts(spec)?,
        None => ScenarioClass::ALL.iter().map(|&c| (c, 2)).collect(),
    };
    let dataset = han_core::make_dataset(&counts, &cfg, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;

    let mut manifest_entries = Vec::with_capacity(dataset.len());
    for (idx, scenario) in dataset.iter().enumerate() {
        let stem = format!("{}-{idx:03}", scenario.class.as_str());
        let files = [
            (format!("{stem}.rgb.ftns"), scenario.input.rgb.as_tensor()),
            (format!("{stem}.tir.ftns"), scenario.input.tir.as_tensor()),
            (format!("{stem}.target.ftns"), scenario.target.as_tensor()),
        ];
        for (name, tensor) in &files {
            write_tensor(&args.out_dir.join(name), tensor)?;
        }
        manifest_entries.push(serde_json::json!({
            "index": idx,
            "class": scenario.class.as_str(),
            "seed": scenario.seed,
            "rgb": files[0].0,
            "tir": files[1].0,
            "target": files[2].0,
        }));
    }
    let manifest = serde_json::json!({
        "config": cfg,
        "seed": args.seed,
        "scenarios": manifest_entries,
    });
    han_core::io::atomic_write(
        &args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    println!("wrote {} scenarios to {}", dataset.len(), args.out_dir.display());
    Ok(())
}

// --------------------------------------------------------------------- main

fn exit_code_for(err: &HanError) -> ExitCode {
    match err {
        // A training divergence is a verification failure, not a usage one.
        HanError::Diverged { .. } => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Init(args) => cmd_init(args),
        Cmd::Forward(args) => cmd_forward(args),
        Cmd::Trace(args) => cmd_trace(args),
        Cmd::Check(args) => return check::run(args.level, args.params.as_deref()),
        Cmd::TrainDemo(args) => cmd_train_demo(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
