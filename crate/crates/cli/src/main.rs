use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dic_core::analyzer::analyze;
use dic_core::diffusion::{sample, CfgMode, WithOptions};
use dic_core::harness::{
    bench_conv, gradcheck_model, run_ablation, step_cost_warning, train, write_ppm, write_raw_f32, BenchTable, MetricRow, RunConfig,
    TrainOptions, DEFAULT_SHAPES,
};
use dic_core::model::{Checkpoint, ConvPath, ForwardOptions};
use dic_core::DicError;

const DEFAULT_CHECKPOINT: &str = "dic.ckpt";

#[derive(Parser)]
#[command(name = "dic", version, about = "Train, sample and analyze 3x3-convolutional diffusion models")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file ('#' starts a comment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset.
    Train {
        /// Continue from a checkpoint carrying optimizer state.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many completed steps.
        #[arg(long, value_name = "STEPS")]
        stop_after: Option<u64>,
        /// Print a progress line every this many steps (0 = never).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Draw class-conditional samples from a checkpoint.
    Sample {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Guidance scale (1 = plain conditional).
        #[arg(long, default_value_t = 1.5)]
        cfg: f64,
        #[arg(short = 'n', long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run stride-1 3x3 convs through the Winograd kernel.
        #[arg(long)]
        winograd: bool,
        /// Separate conditional and unconditional forwards.
        #[arg(long)]
        two_pass: bool,
    },
    /// Static parameter, FLOPs and receptive-field report.
    Analyze {
        #[arg(long)]
        resolution: Option<usize>,
        /// Write the per-layer CSV here instead of stdout.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Direct vs Winograd 3x3 convolution timings.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Layer shape NxCxH (square, C->C); repeatable.
        #[arg(long, value_name = "NxCxH", value_parser = parse_shape)]
        shape: Vec<(usize, usize, usize)>,
    },
    /// Train all four architecture variants under one budget and compare.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s.split('x').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [n, c, h] if n > 0 && c > 0 && h > 0 => Ok((n, c, h)),
        _ => Err(format!("expected NxCxH with positive sizes, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Run { kind: &'static str, message: String },
}

impl From<DicError> for Failure {
    fn from(e: DicError) -> Self {
        match e {
            DicError::UnknownKey(_) => Failure::Usage(e.to_string()),
            e => Failure::Run { kind: e.kind(), message: e.to_string() },
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn load_run(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run.set(k.trim(), v.trim())?;
    }
    run.validate()?;
    Ok(run)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let msg = match e.kind() {
                clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand",
                _ => text.lines().next().unwrap_or_default().trim_start_matches("error: "),
            };
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("error kind=usage message=\"{}\"", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("error kind=usage message=\"{}\"", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Run { kind, message }) => {
            eprintln!("error kind={kind} message=\"{}\"", one_line(&message));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let run = load_run(&cli.config)?;
    match cli.command {
        Command::Train { resume, stop_after, log_every } => cmd_train(run, resume.as_deref(), stop_after, log_every),
        Command::Sample { ckpt, class, cfg, count, out, seed, winograd, two_pass } => {
            cmd_sample(&ckpt, class, cfg, count, &out, seed, winograd, two_pass)
        }
        Command::Analyze { resolution, csv } => {
            let report = analyze(&run.model, resolution.unwrap_or(run.model.image_size))?;
            println!("{report}");
            match csv {
                Some(path) => std::fs::write(&path, report.to_csv()).map_err(|e| DicError::Io { path, source: e })?,
                None => print!("\n{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Gradcheck { coords, step, tol } => {
            let report = gradcheck_model(&run.model, run.seed, coords, step)?;
            let worst = report.worst();
            println!("checked {} coordinates, max rel err {:.3e}", report.entries.len(), report.max_rel_err());
            if let Some(w) = worst {
                println!("worst {}[{}] analytic {:.6e} numeric {:.6e}", w.tensor, w.index, w.analytic, w.numeric);
            }
            if report.passes(tol) {
                Ok(())
            } else {
                let w = worst.expect("failing report has entries");
                Err(Failure::Run { kind: "gradcheck", message: format!("max rel err {:.3e} >= {tol:e} at {}[{}]", w.rel_err, w.tensor, w.index) })
            }
        }
        Command::Bench { reps, shape } => {
            let shapes = if shape.is_empty() { DEFAULT_SHAPES.to_vec() } else { shape };
            print!("{}", BenchTable(bench_conv(&shapes, reps)?));
            Ok(())
        }
        Command::Ablate { seeds } => {
            if seeds.is_empty() {
                return Err(Failure::Usage("--seeds must list at least one seed".into()));
            }
            print!("{}", run_ablation(&run, &seeds)?);
            Ok(())
        }
    }
}

fn cmd_train(mut run: RunConfig, resume: Option<&Path>, stop_after: Option<u64>, log_every: u64) -> Result<(), Failure> {
    if run.checkpoint_path.is_none() {
        run.checkpoint_path = Some(PathBuf::from(DEFAULT_CHECKPOINT));
    }
    if let Some(w) = step_cost_warning(&run)? {
        eprintln!("warning: {w}");
    }
    let mut progress = |row: &MetricRow| {
        if log_every > 0 && (row.step + 1) % log_every == 0 {
            println!("step {} loss {:.6} grad_norm {:.4}", row.step + 1, row.loss, row.grad_norm);
        }
    };
    let outcome = train(&run, TrainOptions { resume, stop_after, on_step: Some(&mut progress) })?;
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    for (step, loss) in &outcome.evals {
        println!("eval step {step} loss {loss:.6}");
    }
    println!("done steps {} final_loss {last:.6} checkpoint {}", outcome.optimizer.state.step, run.checkpoint_path.as_ref().expect("set above").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(ckpt: &Path, class: usize, cfg: f64, count: usize, out: &Path, seed: u64, winograd: bool, two_pass: bool) -> Result<(), Failure> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let run = RunConfig::parse(&checkpoint.config_text)?;
    let model = checkpoint.to_model::<f32>()?;
    if class >= run.model.num_classes {
        return Err(DicError::Config { field: "class".into(), reason: format!("must be below {}", run.model.num_classes) }.into());
    }
    if !(cfg.is_finite() && cfg >= 0.0) {
        return Err(DicError::Config { field: "cfg".into(), reason: "must be finite and non-negative".into() }.into());
    }
    std::fs::create_dir_all(out).map_err(|e| DicError::Io { path: out.to_path_buf(), source: e })?;
    let opts = ForwardOptions { conv_path: if winograd { ConvPath::Winograd } else { ConvPath::Direct }, ..Default::default() };
    let mode = if two_pass { CfgMode::TwoPass } else { CfgMode::Batched };
    let y = vec![class; count];
    let images = sample(&WithOptions(&model, opts), &y, cfg, &run.schedule()?, seed, mode)?;
    for i in 0..count {
        let img = images.slice_batch(i, 1)?;
        let chw = img.shape()[1..].to_vec();
        let img = img.reshape(chw)?;
        let stem = out.join(format!("sample_{i:03}"));
        write_ppm(&stem.with_extension("ppm"), &img)?;
        write_raw_f32(&stem.with_extension("f32"), &img)?;
        println!("{}", stem.with_extension("ppm").display());
    }
    Ok(())
}
