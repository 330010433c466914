//! End-to-end commands operating on run directories.

use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::angular::{AngularGrid, QuadratureRule};
use crate::config::{InitialGuess, LambdaPolicy, PipelineConfig, SystemKind};
use crate::diffraction::{build_kernel, DiffractionDataset, ScatteringGeometry};
use crate::error::{Error, Result};
use crate::inversion::{invert_dataset, l_curve_scan, RegularizationReport};
use crate::io::{
    csv_table, decode_blocks, decode_rotational, encode_blocks, encode_rotational, RunDirectory, RunManifest, RunWriter,
};
use crate::iterative::{qt_iterate, random_density, IterationRecord, PartialTraceTargets};
use crate::rotor::{
    density_from_pendular, period_time_nodes, propagate_alignment, synthesize_probability, thermal_weights,
    AngularDistribution, PendularCoefficients, RotationalDensityMatrix, ThermalWeights,
};
use crate::vibrational::{
    iterative_vib_qt, random_vibrational_density, synthesize_measurement, VibrationalDensityMatrix,
    VibrationalMeasurement,
};

/// Metadata describing a stored angular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub rule: QuadratureRule,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl GridMeta {
    fn of(grid: &AngularGrid) -> Self {
        GridMeta {
            rule: grid.rule,
            n_theta: grid.n_theta(),
            n_phi: grid.n_phi(),
        }
    }

    fn build(&self) -> Result<AngularGrid> {
        AngularGrid::new(self.rule, self.n_theta, self.n_phi)
    }
}

fn write_distribution(w: &mut RunWriter, pr: &AngularDistribution) -> Result<()> {
    w.array("distribution.bin", &pr.values, vec![pr.n_times(), pr.grid.len()])?;
    w.meta("distribution_grid", GridMeta::of(&pr.grid))
}

fn read_distribution(run: &RunDirectory) -> Result<AngularDistribution> {
    let grid = run.meta::<GridMeta>("distribution_grid")?.build()?;
    let (values, _) = run.array("distribution.bin")?;
    let (time_nodes, _) = run.array("times.bin")?;
    let pr = AngularDistribution {
        grid,
        time_nodes,
        values,
    };
    if pr.values.len() != pr.n_times() * pr.grid.len() {
        return Err(Error::Validation {
            path: "files.distribution.bin".into(),
            message: "size differs from grid and time nodes".into(),
        });
    }
    Ok(pr)
}

fn distinct_dirs(input: &Path, out: &Path) -> Result<()> {
    let same = match (input.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Error::Validation {
            path: "output_dir".into(),
            message: format!("output would overwrite input {}", input.display()),
        });
    }
    Ok(())
}

fn copy_forward(run: &RunDirectory, w: &mut RunWriter, names: &[&str]) -> Result<()> {
    for &name in names {
        if !run.has(name) {
            continue;
        }
        if let Some(index) = run.manifest.blocks.get(name) {
            let (data, _) = run.array(name)?;
            w.blocks(name, &data, index.clone())?;
        } else {
            let (data, shape) = run.array(name)?;
            w.array(name, &data, shape)?;
        }
    }
    for key in ["reference_time_ps", "j_max"] {
        if let Some(v) = run.manifest.metadata.get(key) {
            w.meta(key, v.clone())?;
        }
    }
    Ok(())
}

fn history_csv(history: &[IterationRecord], with_truth: bool) -> String {
    let rows = history.iter().map(|r| {
        vec![
            r.iteration as f64,
            r.error_rho,
            r.error_pr,
            if r.hio_converged { 1.0 } else { 0.0 },
            r.guarded_nodes as f64,
        ]
    });
    let rho_col = if with_truth { "eps_rho [1]" } else { "eps_rho_step [1]" };
    csv_table(
        &[
            "iteration [1]",
            rho_col,
            "eps_pr [1]",
            "hio_converged [bool]",
            "guarded_nodes [count]",
        ],
        rows,
    )
}

/// Writes a simulated dataset into `out`.
pub fn cmd_simulate(cfg: &PipelineConfig, config_text: &str, out: &Path) -> Result<RunManifest> {
    match cfg.system {
        SystemKind::Rotational => simulate_rotational(cfg, config_text, out),
        SystemKind::Vibrational => simulate_vibrational(cfg, config_text, out),
    }
}

/// Ground-truth density, thermal weights and time nodes of the configured
/// rotational benchmark.
pub fn rotational_truth(cfg: &PipelineConfig) -> Result<(RotationalDensityMatrix, ThermalWeights, Vec<f64>)> {
    let spec = cfg.rotor_spec()?;
    let j_max = cfg.rotor.j_max;
    let weights = thermal_weights(&spec, j_max, cfg.rotor.max_thermal_tail)?;
    let pulse = cfg.pulse();
    let coeffs = if pulse.peak_intensity == 0.0 {
        PendularCoefficients::identity(j_max)
    } else {
        propagate_alignment(&spec, &pulse, j_max, &pulse.default_time_grid(cfg.pulse.time_intervals))?
    };
    let top = coeffs.top_shell_population(&weights.weights);
    if top > 1e-3 {
        warn!("population {top:.2e} reaches J = {j_max}; the basis may be truncated");
    }
    let rho = density_from_pendular(&coeffs, &weights, &spec, cfg.grid.start_ps);
    let times = period_time_nodes(&spec, cfg.grid.start_ps, cfg.time_samples());
    Ok((rho, weights, times))
}

fn simulate_rotational(cfg: &PipelineConfig, config_text: &str, out: &Path) -> Result<RunManifest> {
    let spec = cfg.rotor_spec()?;
    let (rho, weights, times) = rotational_truth(cfg)?;
    let qt_grid = cfg.qt_grid()?;
    let pr = synthesize_probability(&rho, &spec, &qt_grid, &times)?;
    let kernel_grid = cfg.kernel_grid()?;
    let geometry = cfg.scattering_geometry()?;
    let kernel = build_kernel(&cfg.molecule()?, &geometry, &kernel_grid)?;
    let pr_kernel = synthesize_probability(&rho, &spec, &kernel_grid, &times)?;
    let mut ds = crate::diffraction::forward_intensity(&kernel, &geometry, &pr_kernel)?;
    if let Some(c) = cfg.noise.counts_per_frame {
        crate::diffraction::apply_poisson_noise(&mut ds, c, cfg.seed)?;
    }
    info!(
        "simulated {} frames of {} pixels, kernel {}x{}",
        times.len(),
        ds.n_pixels(),
        kernel.rows(),
        kernel.cols()
    );
    let mut w = RunWriter::new(out, "simulate", config_text)?;
    w.text("config.toml", config_text)?;
    w.array("times.bin", &times, vec![times.len()])?;
    w.array("frames.bin", &ds.frames, vec![times.len(), ds.n_pixels()])?;
    let px: Vec<f64> = geometry.pixels.iter().flat_map(|&(t, p)| [t, p]).collect();
    w.array("pixels.bin", &px, vec![geometry.pixels.len(), 2])?;
    write_distribution(&mut w, &pr)?;
    let (data, index) = encode_rotational(&rho);
    w.blocks("truth_rho.bin", &data, index)?;
    w.array("weights.bin", &weights.weights, vec![weights.weights.len()])?;
    w.meta("system", "rotational")?;
    w.meta("j_max", cfg.rotor.j_max)?;
    w.meta("reference_time_ps", rho.reference_time)?;
    w.meta("rotor", &spec)?;
    w.meta("noise", &ds.noise)?;
    w.finish()
}

fn simulate_vibrational(cfg: &PipelineConfig, config_text: &str, out: &Path) -> Result<RunManifest> {
    let basis = cfg.oscillator_basis()?;
    let v = &cfg.vibrational;
    let rho = random_vibrational_density(basis.dim(), v.state_rank, v.state_seed);
    let times = basis.time_nodes(cfg.vib_time_samples(&basis));
    let movie = synthesize_measurement(&rho, &basis, &times)?;
    let mut w = RunWriter::new(out, "simulate", config_text)?;
    w.text("config.toml", config_text)?;
    w.array("times.bin", &times, vec![times.len()])?;
    w.array("movie.bin", &movie.values, vec![times.len(), basis.grid_points()])?;
    let (data, index) = encode_blocks(&[("modes".to_string(), &rho.matrix)]);
    w.blocks("truth_rho.bin", &data, index)?;
    w.meta("system", "vibrational")?;
    w.meta("oscillator", &basis)?;
    w.finish()
}

fn load_dataset(cfg: &PipelineConfig, run: &RunDirectory) -> Result<DiffractionDataset> {
    let (frames, shape) = run.array("frames.bin")?;
    let (px, _) = run.array("pixels.bin")?;
    let (time_nodes, _) = run.array("times.bin")?;
    let pixels: Vec<(f64, f64)> = px.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if shape.len() != 2 || shape[1] != pixels.len() || shape[0] != time_nodes.len() {
        return Err(Error::Validation {
            path: "files.frames.bin.shape".into(),
            message: format!(
                "shape {shape:?} differs from {} pixels and {} times",
                pixels.len(),
                time_nodes.len()
            ),
        });
    }
    let geometry = ScatteringGeometry::new(cfg.probe.kind, cfg.probe.energy_kev, pixels)?;
    Ok(DiffractionDataset {
        geometry,
        time_nodes,
        frames,
        noise: None,
    })
}

fn scan(
    cfg: &PipelineConfig,
    run: &RunDirectory,
) -> Result<(
    DiffractionDataset,
    crate::diffraction::KernelMatrix,
    Option<RegularizationReport>,
    f64,
)> {
    let ds = load_dataset(cfg, run)?;
    let mut kernel = build_kernel(&cfg.molecule()?, &ds.geometry, &cfg.kernel_grid()?)?;
    if !cfg.probe.masked_pixels.is_empty() {
        let mut keep = vec![true; ds.n_pixels()];
        for &p in &cfg.probe.masked_pixels {
            if p >= keep.len() {
                return Err(Error::Validation {
                    path: "probe.masked_pixels".into(),
                    message: format!("pixel {p} outside detector of {}", keep.len()),
                });
            }
            keep[p] = false;
        }
        kernel = kernel.masked(&keep)?;
        info!(
            "masked {} pixels, {} kernel rows kept",
            cfg.probe.masked_pixels.len(),
            kernel.rows()
        );
    }
    let reg = &cfg.regularization;
    match reg.policy {
        LambdaPolicy::Fixed => Ok((ds, kernel, None, reg.lambda)),
        LambdaPolicy::LCurve => {
            if reg.scan_frame >= ds.time_nodes.len() {
                return Err(Error::Validation {
                    path: "regularization.scan_frame".into(),
                    message: format!("frame {} of {}", reg.scan_frame, ds.time_nodes.len()),
                });
            }
            let frame: Vec<f64> = kernel.pixel_rows.iter().map(|&p| ds.frame(reg.scan_frame)[p]).collect();
            let report = l_curve_scan(&kernel, &frame, &cfg.lambda_grid()?, &cfg.lcurve_options())?;
            let lambda = report.selected_lambda;
            info!(
                "selected lambda {lambda:.3e}, turning point {:?}",
                report.turning_point_lambda
            );
            Ok((ds, kernel, Some(report), lambda))
        }
    }
}

/// L-curve diagnostics of a dataset.
pub fn cmd_lcurve(cfg: &PipelineConfig, config_text: &str, input: &Path, out: &Path) -> Result<RunManifest> {
    distinct_dirs(input, out)?;
    let run = RunDirectory::open(input)?;
    let mut c = cfg.clone();
    c.regularization.policy = LambdaPolicy::LCurve;
    let (_, _, report, lambda) = scan(&c, &run)?;
    let report = report.expect("L-curve policy");
    let mut w = RunWriter::new(out, "lcurve", config_text)?;
    w.text("lcurve.csv", &report.to_csv())?;
    w.text("report.json", &serde_json::to_string_pretty(&report)?)?;
    w.meta("selected_lambda", lambda)?;
    w.finish()
}

/// Tikhonov inversion of every frame into `Pr(θ, φ, t)`.
pub fn cmd_invert(cfg: &PipelineConfig, config_text: &str, input: &Path, out: &Path) -> Result<RunManifest> {
    distinct_dirs(input, out)?;
    let run = RunDirectory::open(input)?;
    let (ds, kernel, report, lambda) = scan(cfg, &run)?;
    let pr = invert_dataset(&kernel, &ds, lambda)?;
    let mut w = RunWriter::new(out, "invert", config_text)?;
    w.array("times.bin", &pr.time_nodes, vec![pr.n_times()])?;
    write_distribution(&mut w, &pr)?;
    if let Some(r) = report {
        w.text("lcurve.csv", &r.to_csv())?;
    }
    copy_forward(&run, &mut w, &["truth_rho.bin", "weights.bin"])?;
    w.meta("lambda", lambda)?;
    w.finish()
}

/// Rotational tomography on a stored distribution.
pub fn cmd_qt_rot(
    cfg: &PipelineConfig,
    config_text: &str,
    input: &Path,
    out: &Path,
) -> Result<(RunManifest, Vec<IterationRecord>)> {
    distinct_dirs(input, out)?;
    let run = RunDirectory::open(input)?;
    let spec = cfg.rotor_spec()?;
    let pr = read_distribution(&run)?;
    let j_max = cfg.rotor.j_max;
    let weights = if run.has("weights.bin") {
        let (w, _) = run.array("weights.bin")?;
        let tail = 0.0;
        ThermalWeights { weights: w, tail }
    } else {
        thermal_weights(&spec, j_max, cfg.rotor.max_thermal_tail)?
    };
    if weights.j_max() != j_max {
        return Err(Error::Validation {
            path: "rotor.j_max".into(),
            message: format!("input was simulated with j_max {}", weights.j_max()),
        });
    }
    let mut qc = cfg.qt_config();
    if cfg.qt.thermal_partial_traces {
        qc.constraints.partial_traces = Some(PartialTraceTargets::from_weights(&weights));
    }
    let initial = match cfg.qt.initial_guess {
        InitialGuess::Thermal => RotationalDensityMatrix::diagonal(&weights.weights),
        InitialGuess::Mixed => {
            let dim = ((j_max + 1) * (j_max + 1)) as f64;
            let mut r = RotationalDensityMatrix::zeros(j_max);
            for m in r.m_values().collect::<Vec<_>>() {
                let b = r.block_mut(m);
                for i in 0..b.nrows() {
                    b[(i, i)] = Complex64::new(1.0 / dim, 0.0);
                }
            }
            r
        }
        InitialGuess::Random => random_density(j_max, cfg.seed, None),
    };
    let truth = if run.has("truth_rho.bin") && !cfg.qt.experiment_mode {
        let (d, idx) = run.blocks("truth_rho.bin")?;
        Some(decode_rotational(
            &d,
            &idx,
            run.meta("reference_time_ps").unwrap_or(0.0),
        )?)
    } else {
        None
    };
    let mut w = RunWriter::new(out, "qt-rot", config_text)?;
    match qt_iterate(&initial, &pr, &spec, &qc, truth.as_ref()) {
        Ok(outcome) => {
            w.text("convergence.csv", &history_csv(&outcome.history, truth.is_some()))?;
            let (d, idx) = encode_rotational(&outcome.state.rho);
            w.blocks("rho.bin", &d, idx)?;
            w.meta("iterations", outcome.history.len())?;
            Ok((w.finish()?, outcome.history))
        }
        Err(Error::Diverged {
            iteration,
            error,
            minimum,
            history,
        }) => {
            w.text("convergence.csv", &history_csv(&history, truth.is_some()))?;
            w.finish()?;
            Err(Error::Diverged {
                iteration,
                error,
                minimum,
                history,
            })
        }
        Err(e) => Err(e),
    }
}

/// Vibrational tomography on a stored position-probability movie.
pub fn cmd_qt_vib(
    cfg: &PipelineConfig,
    config_text: &str,
    input: &Path,
    out: &Path,
) -> Result<(RunManifest, Vec<IterationRecord>)> {
    distinct_dirs(input, out)?;
    let run = RunDirectory::open(input)?;
    let basis = cfg.oscillator_basis()?;
    let (values, shape) = run.array("movie.bin")?;
    let (time_nodes, _) = run.array("times.bin")?;
    if shape != [time_nodes.len(), basis.grid_points()] {
        return Err(Error::Validation {
            path: "files.movie.bin.shape".into(),
            message: format!("shape {shape:?} differs from configured grid"),
        });
    }
    let movie = VibrationalMeasurement { time_nodes, values };
    let dim = basis.dim();
    let initial = match cfg.vibrational.initial_guess {
        InitialGuess::Random => random_vibrational_density(dim, dim, cfg.seed),
        InitialGuess::Mixed | InitialGuess::Thermal => {
            VibrationalDensityMatrix::new(DMatrix::identity(dim, dim) / Complex64::new(dim as f64, 0.0))?
        }
    };
    let truth = if run.has("truth_rho.bin") && !cfg.vibrational.experiment_mode {
        let (d, idx) = run.blocks("truth_rho.bin")?;
        let (_, m) = decode_blocks(&d, &idx)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Validation {
                path: "blocks.truth_rho.bin".into(),
                message: "empty".into(),
            })?;
        Some(VibrationalDensityMatrix::new(m)?)
    } else {
        None
    };
    let outcome = iterative_vib_qt(&initial, &movie, &basis, &cfg.vib_qt_config(), truth.as_ref())?;
    let mut w = RunWriter::new(out, "qt-vib", config_text)?;
    w.text("convergence.csv", &history_csv(&outcome.history, truth.is_some()))?;
    let (d, idx) = encode_blocks(&[("modes".to_string(), &outcome.rho.matrix)]);
    w.blocks("rho.bin", &d, idx)?;
    w.meta("oscillator", &basis)?;
    Ok((w.finish()?, outcome.history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: String,
    pub kind: String,
    pub files_checked: usize,
}

/// Verifies a run directory's digests or a configuration file's schema.
pub fn cmd_validate(path: &Path) -> Result<ValidationReport> {
    if path.is_dir() {
        let run = RunDirectory::open(path)?;
        if run.has("config.toml") {
            let text = crate::io::read_bytes(&path.join("config.toml"))?;
            PipelineConfig::from_toml(&String::from_utf8_lossy(&text))?;
        }
        Ok(ValidationReport {
            path: path.display().to_string(),
            kind: run.manifest.command.clone(),
            files_checked: run.manifest.files.len(),
        })
    } else {
        PipelineConfig::load(path)?;
        Ok(ValidationReport {
            path: path.display().to_string(),
            kind: "config".into(),
            files_checked: 1,
        })
    }
}
