//! `odereg` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on bad arguments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use odereg::image_io::{flow_to_color, load_displacement, load_image, load_mask, save_displacement, save_image, save_mask, save_rgb_png};
use odereg::losses::mse_value;
use odereg::metrics::{count_nonpositive_jacobian, evaluate, Region};
use odereg::synth::{generate_pair, SynthParams};
use odereg::warp::{compose_fields, warp_mask_nearest};
use odereg::{register, DeformationField, Error, LossMode, RegistrationConfig};

#[derive(Parser)]
#[command(name = "odereg", version, about = "Training-free diffeomorphic registration of 2-D image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Score a displacement field against label masks.
    Evaluate(EvaluateArgs),
    /// Generate synthetic pairs with known deformations.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long, required_unless_present = "config")]
    moving: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    fixed: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pyramid levels [default: 2]
    #[arg(long)]
    levels: Option<usize>,
    /// Optimizer iterations [default: 800]
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate [default: 5e-4]
    #[arg(long)]
    lr: Option<f32>,
    /// Identity regularization weight [default: 5]
    #[arg(long)]
    lambda: Option<f32>,
    /// Similarity: mse, ssim or ssim+mi [default: ssim+mi]
    #[arg(long)]
    loss: Option<LossMode>,
    /// Velocity smoothing in pixels [default: 1.0]
    #[arg(long)]
    sigma: Option<f32>,
    /// Optimize the forward direction only.
    #[arg(long)]
    unidirectional: bool,
    /// Network initialization seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the configuration (and inputs) of an earlier manifest.json;
    /// explicit flags still override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    moving_mask: PathBuf,
    #[arg(long)]
    fixed_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score a single label instead of all foreground.
    #[arg(long)]
    label: Option<u8>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 6.0)]
    amplitude_px: f32,
    #[arg(long, default_value_t = 8.0)]
    sigma_px: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InputPaths {
    moving: PathBuf,
    fixed: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunMetrics {
    final_loss: f32,
    mean_displacement_px: f64,
    mean_displacement_bwd_px: Option<f64>,
    nonpositive_jacobian: usize,
    nonpositive_jacobian_bwd: Option<usize>,
    /// Mean `|D_B(D_F(x)) - x|` in pixels.
    inverse_consistency_px: Option<f64>,
    mse_before: f64,
    mse_after: f64,
}

/// Everything needed to reproduce and audit one registration. Output paths
/// are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    config: RegistrationConfig,
    inputs: InputPaths,
    outputs: BTreeMap<String, String>,
    metrics: RunMetrics,
    loss_trace: Vec<f32>,
    wall_clock_seconds: f64,
}

#[derive(Serialize)]
struct SynthEntry {
    params: SynthParams,
    fixed: String,
    moving: String,
    fixed_mask: String,
    moving_mask: String,
    gt_disp: String,
    max_velocity_px: f32,
}

#[derive(Serialize)]
struct SynthManifest {
    generator: &'static str,
    pairs: Vec<SynthEntry>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn read_manifest_config(path: &Path) -> Result<(RegistrationConfig, Option<InputPaths>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| Failure::Usage(format!("{}: {e}", path.display()));
    // either a full run manifest or a bare configuration object
    if let Some(cfg) = value.get("config") {
        let cfg = RegistrationConfig::deserialize(cfg).map_err(bad)?;
        let inputs = value.get("inputs").map(InputPaths::deserialize).transpose().map_err(bad)?;
        Ok((cfg, inputs))
    } else {
        Ok((RegistrationConfig::deserialize(&value).map_err(bad)?, None))
    }
}

fn cmd_register(args: RegisterArgs) -> CmdResult {
    let (mut cfg, saved_inputs) = match &args.config {
        Some(path) => read_manifest_config(path)?,
        None => (RegistrationConfig::default(), None),
    };
    if let Some(v) = args.levels {
        cfg.levels = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.loss {
        cfg.loss = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.unidirectional {
        cfg.bidirectional = false;
    }
    let pick = |flag: Option<PathBuf>, saved: Option<&PathBuf>, name: &str| {
        flag.or_else(|| saved.cloned())
            .ok_or_else(|| Failure::Usage(format!("--{name} is required (the configuration file names no input)")))
    };
    let inputs = InputPaths {
        moving: pick(args.moving, saved_inputs.as_ref().map(|i| &i.moving), "moving")?,
        fixed: pick(args.fixed, saved_inputs.as_ref().map(|i| &i.fixed), "fixed")?,
    };

    let moving = load_image(&inputs.moving)?;
    let fixed = load_image(&inputs.fixed)?;
    cfg.validate(fixed.height(), fixed.width())?;
    let result = register(&moving, &fixed, &cfg)?;

    create_dir(&args.out)?;
    let ext = match inputs.fixed.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => "png",
        _ => "pgm",
    };
    let mut outputs = BTreeMap::new();
    let mut emit = |key: &str, file: String| {
        outputs.insert(key.to_string(), file.clone());
        args.out.join(file)
    };
    save_image(&result.warped_moving, emit("warped_fwd", format!("warped_fwd.{ext}")))?;
    save_displacement(&result.forward, emit("disp_fwd", "disp_fwd.dfld".into()))?;
    save_rgb_png(&flow_to_color(&result.forward), emit("flow_fwd", "flow_fwd.png".into()))?;
    if let (Some(bwd), Some(warped)) = (&result.backward, &result.warped_fixed) {
        save_image(warped, emit("warped_bwd", format!("warped_bwd.{ext}")))?;
        save_displacement(bwd, emit("disp_bwd", "disp_bwd.dfld".into()))?;
        save_rgb_png(&flow_to_color(bwd), emit("flow_bwd", "flow_bwd.png".into()))?;
    }
    outputs.insert("manifest".into(), "manifest.json".into());

    let inverse_consistency_px = match &result.backward {
        Some(b) => Some(compose_fields(b, &result.forward)?.mean_displacement_px()),
        None => None,
    };
    let metrics = RunMetrics {
        final_loss: result.final_loss,
        mean_displacement_px: result.forward.mean_displacement_px(),
        mean_displacement_bwd_px: result.backward.as_ref().map(DeformationField::mean_displacement_px),
        nonpositive_jacobian: count_nonpositive_jacobian(&result.forward)?,
        nonpositive_jacobian_bwd: result.backward.as_ref().map(count_nonpositive_jacobian).transpose()?,
        inverse_consistency_px,
        mse_before: mse_value(&moving.to_tensor(), &fixed.to_tensor())?,
        mse_after: mse_value(&result.warped_moving.to_tensor(), &fixed.to_tensor())?,
    };
    let manifest = RunManifest {
        config: result.config.clone(),
        inputs,
        outputs,
        metrics,
        loss_trace: result.loss_trace.clone(),
        wall_clock_seconds: result.elapsed_seconds,
    };
    write_json(&manifest, &args.out.join("manifest.json"))?;
    println!(
        "registered in {:.1}s: loss {:.5} -> {:.5}, mean displacement {:.3} px, {} folded pixels",
        manifest.wall_clock_seconds,
        manifest.loss_trace.first().copied().unwrap_or(f32::NAN),
        manifest.metrics.final_loss,
        manifest.metrics.mean_displacement_px,
        manifest.metrics.nonpositive_jacobian
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let field = load_displacement(&args.disp)?;
    let moving = load_mask(&args.moving_mask)?;
    let fixed = load_mask(&args.fixed_mask)?;
    let extents = |w: usize, h: usize| format!("{w}x{h}");
    let f = extents(field.width(), field.height());
    for (name, m) in [("moving mask", &moving), ("fixed mask", &fixed)] {
        let e = extents(m.width(), m.height());
        if e != f {
            return Err(runtime(format!("extent mismatch: displacement field is {f} but the {name} is {e}")));
        }
    }
    let region = args.label.map_or(Region::Foreground, Region::Label);
    let warped = warp_mask_nearest(&moving, &field)?;
    let report = evaluate(&warped, &fixed, &field, region)?;
    write_json(&report, &args.out)?;
    println!(
        "dice {:.4}, hausdorff {:.3} px, {} folded pixels",
        report.dice, report.hausdorff_px, report.nonpositive_jacobian
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    if args.size < 8 {
        return Err(Failure::Usage(format!("--size {} is below the 8 pixel minimum", args.size)));
    }
    let limit = 0.25 * args.size as f32;
    if !(args.amplitude_px >= 0.0 && args.amplitude_px <= limit) {
        return Err(Failure::Usage(format!(
            "--amplitude-px {} must lie in [0, {limit}] for --size {}",
            args.amplitude_px, args.size
        )));
    }
    if !(args.sigma_px >= 0.0 && args.sigma_px.is_finite()) {
        return Err(Failure::Usage(format!("--sigma-px {} must be non-negative", args.sigma_px)));
    }
    if args.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    create_dir(&args.out)?;
    let mut pairs = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let params = SynthParams {
            size: args.size,
            amplitude_px: args.amplitude_px,
            sigma_px: args.sigma_px,
            seed: args.seed + i as u64,
        };
        let pair = generate_pair(&params)?;
        let name = |what: &str, ext: &str| format!("pair_{i:03}_{what}.{ext}");
        let entry = SynthEntry {
            fixed: name("fixed", "pgm"),
            moving: name("moving", "pgm"),
            fixed_mask: name("fixed_mask", "pgm"),
            moving_mask: name("moving_mask", "pgm"),
            gt_disp: name("gt", "dfld"),
            max_velocity_px: pair.velocity.max_norm_px(),
            params,
        };
        save_image(&pair.fixed, args.out.join(&entry.fixed))?;
        save_image(&pair.moving, args.out.join(&entry.moving))?;
        save_mask(&pair.fixed_mask, args.out.join(&entry.fixed_mask))?;
        save_mask(&pair.moving_mask, args.out.join(&entry.moving_mask))?;
        save_displacement(&pair.gt_forward, args.out.join(&entry.gt_disp))?;
        pairs.push(entry);
    }
    write_json(
        &SynthManifest {
            generator: "smooth-velocity phantom",
            pairs,
        },
        &args.out.join("manifest.json"),
    )?;
    println!("wrote {} pair(s) to {}", args.count, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let outcome = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `odereg --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
