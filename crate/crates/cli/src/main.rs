use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use voxdet_core::commands::{self, checkpoint_config, RenderTarget};
use voxdet_core::config::RunConfig;
use voxdet_core::{Error, Result};

/// Multi-view 3D box detection on synthetic indoor scenes.
#[derive(Parser, Debug)]
#[command(name = "voxdet", version = env!("CARGO_PKG_VERSION"))]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; defaults apply for absent files.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `model.fusion=mean`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Directory for every artifact the command writes.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: Option<bool>,
    /// Number of scenes to generate.
    #[arg(long, global = true)]
    scenes: Option<usize>,
    /// Views per scene.
    #[arg(long, global = true)]
    views: Option<usize>,
    /// Voxel grid as WxLxH, e.g. 16x16x8.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<[usize; 3]>,
    /// Training iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train and checkpoint a model.
    Train,
    /// Evaluate a checkpoint on the eval split and write metrics.json.
    Eval {
        /// Checkpoint directory; `<out-dir>/checkpoint` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid.
    Ablate,
    /// Render RGB, depth and opacity images from the radiance branch.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene id; the first eval scene by default.
        #[arg(long)]
        scene: Option<String>,
        /// Stored view index to render.
        #[arg(long, conflicts_with = "pose")]
        view: Option<usize>,
        /// Camera as `ex,ey,ez,tx,ty,tz` (eye and look-at target).
        #[arg(long, value_parser = parse_pose)]
        pose: Option<[f64; 6]>,
    },
    /// Run the gradient and invariant suites.
    Check,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse().map_err(|_| format!("bad grid axis {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "grid needs three axes".to_string())
}

fn parse_pose(s: &str) -> std::result::Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "pose needs six numbers".to_string())
}

fn emit(v: Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn resolve_config(c: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&c.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => checkpoint_config(ck)?.unwrap_or_default(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = c.deterministic {
        cfg.deterministic = d;
    }
    if let Some(n) = c.scenes {
        cfg.data.num_scenes = n;
        cfg.data.num_eval = if n > 1 { (n / 5).max(1) } else { 0 };
    }
    if let Some(v) = c.views {
        cfg.data.views_min = v;
        cfg.data.views_max = v;
    }
    if let Some(g) = c.grid {
        cfg.grid = g;
    }
    if let Some(n) = c.iterations {
        cfg.train.iterations = n;
    }
    let cfg = cfg.with_overrides(&c.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::Invalid(format!("{}: {e}", c.out_dir.display())))?;
    let default_ck = c.out_dir.join("checkpoint");
    let mut log = |v: Value| emit(v);
    match cli.command {
        Command::GenData => {
            commands::gen_data(&resolve_config(c, None)?, &c.out_dir, &mut log)?;
        }
        Command::Train => {
            commands::train(&resolve_config(c, None)?, &c.out_dir, &mut log)?;
        }
        Command::Eval { checkpoint } => {
            let ck = checkpoint.unwrap_or(default_ck);
            commands::eval(&resolve_config(c, Some(&ck))?, &c.out_dir, &ck, &mut log)?;
        }
        Command::Ablate => {
            commands::ablate(&resolve_config(c, None)?, &c.out_dir, &mut log)?;
        }
        Command::Render { checkpoint, scene, view, pose } => {
            let ck = checkpoint.unwrap_or(default_ck);
            let target = match pose {
                Some(p) => RenderTarget::LookAt([p[0], p[1], p[2]], [p[3], p[4], p[5]]),
                None => RenderTarget::View(view.unwrap_or(0)),
            };
            commands::render(&resolve_config(c, Some(&ck))?, &c.out_dir, &ck, scene.as_deref(), &target, &mut log)?;
        }
        Command::Check => {
            return commands::check(&resolve_config(c, None)?, &c.out_dir, &mut log);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            emit(json!({"event": "failed", "message": "one or more checks failed"}));
            ExitCode::FAILURE
        }
        Err(e) => {
            emit(json!({"event": "error", "message": e.to_string()}));
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
