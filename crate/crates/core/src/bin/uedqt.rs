use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uedqt::config::PipelineConfig;
use uedqt::pipeline;
use uedqt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "uedqt",
    version,
    about = "Diffraction simulation and quantum state tomography of molecular wavepackets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the pipeline commands. Values from `--config` take
/// precedence over flags.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML pipeline configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (relative paths resolve under QTUED_OUTPUT_ROOT).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature_k: Option<f64>,
    #[arg(long)]
    j_max: Option<usize>,
    #[arg(long)]
    peak_intensity_w_cm2: Option<f64>,
    #[arg(long)]
    counts_per_frame: Option<f64>,
    /// Fixed regularization strength; selects the fixed policy.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Ignore ground truth and report errors against previous iterates.
    #[arg(long)]
    experiment_mode: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset (diffraction frames or a position-probability movie).
    Simulate {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Invert diffraction frames into angular distributions.
    Invert {
        #[arg(long, short)]
        input: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// L-curve and condition-number scan of one frame.
    Lcurve {
        #[arg(long, short)]
        input: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Rotational tomography from angular distributions.
    QtRot {
        #[arg(long, short)]
        input: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Vibrational tomography from a position-probability movie.
    QtVib {
        #[arg(long, short)]
        input: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Check digests of a run directory or the schema of a config file.
    Validate { path: PathBuf },
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolved configuration and its canonical TOML text.
fn resolve(opts: &Overrides) -> Result<(PipelineConfig, String)> {
    let mut cfg = PipelineConfig::default();
    if let Some(v) = &opts.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.temperature_k {
        cfg.rotor.temperature_k = v;
    }
    if let Some(v) = opts.j_max {
        cfg.rotor.j_max = v;
    }
    if let Some(v) = opts.peak_intensity_w_cm2 {
        cfg.pulse.peak_intensity_w_cm2 = v;
    }
    if opts.counts_per_frame.is_some() {
        cfg.noise.counts_per_frame = opts.counts_per_frame;
    }
    if let Some(v) = opts.lambda {
        cfg.regularization.policy = uedqt::config::LambdaPolicy::Fixed;
        cfg.regularization.lambda = v;
    }
    if let Some(v) = opts.max_iterations {
        cfg.qt.max_iterations = v;
        cfg.vibrational.max_iterations = v;
    }
    if opts.experiment_mode {
        cfg.qt.experiment_mode = true;
        cfg.vibrational.experiment_mode = true;
    }
    let mut table: toml::Table = toml::from_str(&cfg.to_toml()).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        // parse once for schema errors with field paths
        PipelineConfig::from_toml(&text)?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        merge(&mut table, file);
    }
    let text = toml::to_string_pretty(&table).map_err(|e| Error::Serde(e.to_string()))?;
    let cfg = PipelineConfig::from_toml(&text)?;
    Ok((cfg, text))
}

fn print_history(history: &[uedqt::iterative::IterationRecord]) {
    if let Some(last) = history.last() {
        println!(
            "iterations {}  eps_rho {:.3e}  eps_pr {:.3e}",
            last.iteration, last.error_rho, last.error_pr
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = |cfg: &PipelineConfig| cfg.resolved_output_dir();
    match cli.command {
        Command::Simulate { opts } => {
            let (cfg, text) = resolve(&opts)?;
            let out = out_dir(&cfg);
            let m = pipeline::cmd_simulate(&cfg, &text, &out)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Invert { input, opts } => {
            let (cfg, text) = resolve(&opts)?;
            let out = out_dir(&cfg);
            let m = pipeline::cmd_invert(&cfg, &text, &input, &out)?;
            println!("lambda {}  wrote {}", m.metadata["lambda"], out.display());
        }
        Command::Lcurve { input, opts } => {
            let (cfg, text) = resolve(&opts)?;
            let out = out_dir(&cfg);
            let m = pipeline::cmd_lcurve(&cfg, &text, &input, &out)?;
            println!(
                "selected lambda {}  wrote {}",
                m.metadata["selected_lambda"],
                out.display()
            );
        }
        Command::QtRot { input, opts } => {
            let (cfg, text) = resolve(&opts)?;
            let (_, history) = pipeline::cmd_qt_rot(&cfg, &text, &input, &out_dir(&cfg))?;
            print_history(&history);
        }
        Command::QtVib { input, opts } => {
            let (cfg, text) = resolve(&opts)?;
            let (_, history) = pipeline::cmd_qt_vib(&cfg, &text, &input, &out_dir(&cfg))?;
            print_history(&history);
        }
        Command::Validate { path } => {
            let r = pipeline::cmd_validate(Path::new(&path))?;
            println!("ok: {} ({}, {} files)", r.path, r.kind, r.files_checked);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
