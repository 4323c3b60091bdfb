//! Subcommand dispatch: runs one experiment, writes its outputs and the
//! manifest, and decides the exit status.

use std::path::Path;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attractor::{attractor_regularity_check, dimension_probe, DimensionReport, RegularityReport};
use crate::certify::{absorbing_criterion, certify_suite, stabilizability_criterion, CriterionOutcome};
use crate::error::{FpiError, Result};
use crate::grid::build_grid;
use crate::io::{emit_plot_data, write_snapshot, OutputWriter, PlotData, RunManifest, Timing, Versions};
use crate::spectral::{
    assemble_generator, check_accretivity, condition_number, contractivity, spectral_abscissa, AccretivityReport,
};
use crate::state::phase_norm;
use crate::stepper::{decay_rate_fit, ForcingSpec, Lyapunov, RunConfig, Stepper};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Spectrum,
    Absorb,
    Stabilize,
    Dimension,
    Certify,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::Simulate,
        Subcommand::Spectrum,
        Subcommand::Absorb,
        Subcommand::Stabilize,
        Subcommand::Dimension,
        Subcommand::Certify,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Spectrum => "spectrum",
            Subcommand::Absorb => "absorb",
            Subcommand::Stabilize => "stabilize",
            Subcommand::Dimension => "dimension",
            Subcommand::Certify => "certify",
        }
    }
}

impl FromStr for Subcommand {
    type Err = FpiError;

    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| FpiError::validation("subcommand", format!("unknown subcommand `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub exit_code: i32,
    pub manifest: RunManifest,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

/// Written as `failure.json` when a run stops on an error.
#[derive(Debug, Clone, Serialize)]
pub struct FailureReport {
    pub subcommand: String,
    pub error: String,
    pub exit_code: i32,
}

/// Runs `sub` with `cfg`, writing every output and `manifest.json` into
/// `out_dir`. Errors inside the experiment are recorded in the manifest
/// and a failure report; only errors writing the output directory itself
/// are returned.
pub fn run_experiment(sub: Subcommand, cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let mut out = OutputWriter::new(out_dir)?;
    let mut lines = Vec::new();
    let result = cfg.validate().and_then(|_| match sub {
        Subcommand::Simulate => simulate(cfg, &mut out, &mut lines),
        Subcommand::Spectrum => spectrum(cfg, &mut out, &mut lines),
        Subcommand::Absorb => absorb(cfg, &mut out, &mut lines),
        Subcommand::Stabilize => stabilize(cfg, &mut out, &mut lines),
        Subcommand::Dimension => dimension(cfg, &mut out, &mut lines),
        Subcommand::Certify => certify(cfg, &mut out, &mut lines),
    });
    let (exit_code, status) = match result {
        Ok(true) => (0, "ok".to_string()),
        Ok(false) => (3, "certification failed".to_string()),
        Err(e) => {
            let code = e.exit_code();
            lines.push(format!("error: {e}"));
            out.write_json(
                "failure.json",
                &FailureReport {
                    subcommand: sub.as_str().into(),
                    error: e.to_string(),
                    exit_code: code,
                },
            )?;
            (code, e.to_string())
        }
    };
    let manifest = out.finish(RunManifest {
        subcommand: sub.as_str().into(),
        config: cfg.clone(),
        versions: Versions::default(),
        seed: cfg.seed,
        timing: Timing {
            started_unix_seconds: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        },
        status,
        exit_code,
        outputs: Vec::new(),
    })?;
    Ok(ExperimentOutcome {
        exit_code,
        manifest,
        lines,
    })
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    steps: usize,
    final_time: f64,
    initial_energy: f64,
    final_energy: f64,
    max_abs_residual: f64,
    relative_residual: f64,
    final_norm: f64,
    lyapunov_eta: f64,
    lyapunov_eta_threshold: f64,
    extension_norm: f64,
}

fn simulate(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let grid = build_grid(&cfg.grid)?;
    let stepper = Stepper::new(&grid, cfg)?;
    let u0 = stepper.initial_state()?;
    let lyap = Lyapunov::new(&grid, &stepper, cfg.probes.eta)?;
    let traj = stepper.run(&u0, Some(&lyap))?;
    emit_plot_data(out, PlotData::Ledger(&traj.ledger))?;
    for (k, s) in traj.snapshots.iter().enumerate() {
        write_snapshot(out, &format!("snapshot_{k:05}"), &grid, s)?;
    }
    let last = traj.ledger.rows.last().expect("ledger has the initial row");
    let e0 = traj.ledger.initial_energy();
    let max_res = traj.ledger.max_abs_residual();
    let summary = SimulationSummary {
        steps: cfg.steps(),
        final_time: last.t,
        initial_energy: e0,
        final_energy: last.energy(),
        max_abs_residual: max_res,
        relative_residual: if e0 > 0.0 { max_res / e0 } else { max_res },
        final_norm: last.norm_h,
        lyapunov_eta: lyap.eta,
        lyapunov_eta_threshold: lyap.eta_threshold,
        extension_norm: lyap.extension_norm,
    };
    lines.push(format!(
        "simulated {} steps to t = {:.4}: energy {:.6e} -> {:.6e}, max ledger residual {:.3e}",
        summary.steps, summary.final_time, e0, summary.final_energy, max_res
    ));
    out.write_json("summary.json", &summary)?;
    if cfg.forcing == ForcingSpec::Zero {
        match decay_rate_fit(&traj.ledger, cfg.probes.tail_fraction) {
            Ok(fit) => {
                emit_plot_data(out, PlotData::Decay(&traj.ledger, &fit))?;
                lines.push(format!("decay rate {:.4} (R^2 {:.5})", fit.alpha, fit.r_squared));
            }
            Err(e) => log::info!("no decay fit: {e}"),
        }
    }
    Ok(true)
}

#[derive(Debug, Serialize)]
struct SpectrumSummary {
    dimension: usize,
    abscissa: f64,
    exponentially_stable: bool,
    contractivity_t1: f64,
    condition_number: f64,
    accretivity: AccretivityReport,
    /// Abscissa with twice the viscosity; reported, not asserted.
    abscissa_double_viscosity: f64,
}

fn spectrum(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let grid = build_grid(&cfg.grid)?;
    let m = assemble_generator(&grid)?;
    let report = spectral_abscissa(&m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let accretivity = check_accretivity(&grid, &m, 100, &mut rng);
    let doubled = build_grid(&cfg.grid.clone().with_viscosity(2.0 * cfg.grid.viscosity))?;
    let summary = SpectrumSummary {
        dimension: m.dim(),
        abscissa: report.abscissa,
        exponentially_stable: report.abscissa < 0.0,
        contractivity_t1: contractivity(&m, 1.0),
        condition_number: condition_number(&m),
        accretivity,
        abscissa_double_viscosity: spectral_abscissa(&assemble_generator(&doubled)?)?.abscissa,
    };
    lines.push(format!(
        "generator of dimension {}: abscissa {:.6}, ||exp(-A)|| {:.6}, condition number {:.3e}",
        summary.dimension, summary.abscissa, summary.contractivity_t1, summary.condition_number
    ));
    emit_plot_data(out, PlotData::Spectrum(&report))?;
    out.write_json("spectrum.json", &summary)?;
    Ok(true)
}

#[derive(Debug, Serialize)]
struct ProbeOutput<'a, R: Serialize> {
    outcome: &'a CriterionOutcome,
    report: &'a Option<R>,
}

fn absorb(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let (outcome, report) = absorbing_criterion(cfg);
    lines.push(outcome.line());
    out.write_json(
        "absorbing.json",
        &ProbeOutput {
            outcome: &outcome,
            report: &report,
        },
    )?;
    Ok(outcome.passed)
}

fn stabilize(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let (outcome, report) = stabilizability_criterion(cfg);
    lines.push(outcome.line());
    out.write_json(
        "stabilizability.json",
        &ProbeOutput {
            outcome: &outcome,
            report: &report,
        },
    )?;
    Ok(outcome.passed)
}

#[derive(Debug, Serialize)]
struct DimensionOutput {
    label: &'static str,
    entry_time: f64,
    transient: f64,
    dimension: DimensionReport,
    regularity: RegularityReport,
}

fn dimension(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let grid = build_grid(&cfg.grid)?;
    let stepper = Stepper::new(&grid, cfg)?;
    let states = stepper.states(&stepper.initial_state()?)?;
    let norms: Vec<f64> = states.iter().map(|s| phase_norm(&grid, s)).collect();
    let tail_start = ((1.0 - cfg.probes.tail_fraction) * norms.len() as f64) as usize;
    let level = 2.0 * norms[tail_start..].iter().copied().fold(0.0, f64::max);
    // first index after which the norm stays below twice the tail sup
    let entry = norms.iter().rposition(|&n| n > level).map_or(0, |k| k + 1);
    let entry_time = states[entry.min(states.len() - 1)].t;
    let max_transient = states.len() / 2;
    let skip = ((cfg.probes.transient_factor * entry as f64).ceil() as usize).min(max_transient);
    if skip == max_transient {
        log::warn!("transient capped at half the horizon; lengthen the run for a cleaner estimate");
    }
    let post = &states[skip..];
    let stride = (post.len() / cfg.probes.dimension_samples).max(1);
    let samples: Vec<_> = post.iter().step_by(stride).take(cfg.probes.dimension_samples).cloned().collect();
    let dim = dimension_probe(&grid, &samples)?;
    let regularity = attractor_regularity_check(&stepper, post)?;
    lines.push(format!(
        "heuristic correlation dimension {:.3} (local slopes {:.3}..{:.3}) from {} samples after t = {:.3}; regularity bounded: {}",
        dim.estimate,
        dim.band.0,
        dim.band.1,
        dim.samples,
        states[skip].t,
        regularity.bounded
    ));
    emit_plot_data(out, PlotData::Distance(&dim))?;
    out.write_json(
        "dimension.json",
        &DimensionOutput {
            label: "heuristic",
            entry_time,
            transient: states[skip].t,
            dimension: dim,
            regularity,
        },
    )?;
    Ok(true)
}

fn certify(cfg: &RunConfig, out: &mut OutputWriter, lines: &mut Vec<String>) -> Result<bool> {
    let outcomes = certify_suite(cfg);
    lines.extend(outcomes.iter().map(CriterionOutcome::line));
    out.write_json("certify.json", &outcomes)?;
    Ok(outcomes.iter().all(|o| o.passed))
}
