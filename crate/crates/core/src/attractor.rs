//! Long-time probes: absorbing set, stabilizability estimate, correlation
//! dimension and attractor regularity.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FpiError, Result};
use crate::grid::Grid;
use crate::plate::{apply_plate_operator, plate_form_a, PotentialSpec};
use crate::spectral::{spectral_abscissa, GeneratorMatrix};
use crate::state::{phase_norm, SystemState};
use crate::stepper::{linear_fit, Lyapunov, Stepper};
use crate::stokes::{conservative_trace, laplacian};

/// Parameters of the long-time probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Trajectories in the absorbing-set ensemble.
    pub ensemble_size: usize,
    /// Largest initial `‖U₀‖_𝓗` in the ensembles.
    pub max_radius: f64,
    /// Trajectory pairs for the stabilizability check.
    pub pairs: usize,
    /// Horizon of the restart (forward invariance) runs.
    pub restart_horizon: f64,
    /// Fraction of a run used as its tail by fits and sups.
    pub tail_fraction: f64,
    /// Weight of the cross terms in `𝒲`; the computed threshold when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Samples used by the correlation-dimension probe.
    pub dimension_samples: usize,
    /// Post-transient start, in multiples of the largest entry time.
    pub transient_factor: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            ensemble_size: 10,
            max_radius: 2.0,
            pairs: 10,
            restart_horizon: 5.0,
            tail_fraction: 0.5,
            eta: None,
            dimension_samples: 400,
            transient_factor: 5.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(FpiError::validation("probes.ensemble_size", "must be at least 1"));
        }
        if self.pairs == 0 {
            return Err(FpiError::validation("probes.pairs", "must be at least 1"));
        }
        if !(self.max_radius > 0.0 && self.max_radius.is_finite()) {
            return Err(FpiError::validation("probes.max_radius", "must be positive"));
        }
        if !(self.restart_horizon > 0.0 && self.restart_horizon.is_finite()) {
            return Err(FpiError::validation("probes.restart_horizon", "must be positive"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(FpiError::validation("probes.tail_fraction", "must lie in (0, 1]"));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(FpiError::validation("probes.eta", "must be nonnegative"));
            }
        }
        if self.dimension_samples < 10 {
            return Err(FpiError::validation("probes.dimension_samples", "need at least 10"));
        }
        if self.transient_factor.is_nan() || self.transient_factor < 0.0 {
            return Err(FpiError::validation("probes.transient_factor", "must be nonnegative"));
        }
        Ok(())
    }
}

/// `W(t)` and `‖U(t)‖_𝓗` along one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovTrace {
    pub times: Vec<f64>,
    pub w: Vec<f64>,
    pub norm: Vec<f64>,
}

fn trace_run(stepper: &Stepper, lyap: &Lyapunov, u0: &SystemState, steps: usize) -> Result<(LyapunovTrace, SystemState)> {
    let grid = stepper.grid();
    let spec = &stepper.config().potential;
    let mut tr = LyapunovTrace {
        times: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps + 1),
        norm: Vec::with_capacity(steps + 1),
    };
    let last = stepper.advance(u0, steps, |s| {
        tr.times.push(s.t - u0.t);
        tr.w.push(lyap.value(grid, s, lyap.eta, spec));
        tr.norm.push(phase_norm(grid, s));
    })?;
    Ok((tr, last))
}

/// Envelope `W(t) ≤ W(0)e^{-c₀t} + K(1-e^{-c₀t})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub c0: f64,
    /// Asymptotic level `(c₁/c₀)(c_f + ‖G‖²)`.
    pub level: f64,
}

impl Envelope {
    pub fn bound(&self, w0: f64, t: f64) -> f64 {
        let e = (-self.c0 * t).exp();
        w0 * e + self.level * (1.0 - e)
    }

    /// Largest relative excess of a trace over the envelope (≤ 0 when it holds).
    pub fn excess(&self, tr: &LyapunovTrace) -> f64 {
        let w0 = tr.w[0];
        tr.times
            .iter()
            .zip(&tr.w)
            .map(|(&t, &w)| (w - self.bound(w0, t)) / w0.max(self.level).max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

const ENVELOPE_TOL: f64 = 1e-9;

/// Fits the envelope: `K` from the tails, then the largest admissible `c₀`.
pub fn fit_envelope(traces: &[LyapunovTrace], tail_fraction: f64) -> Result<Envelope> {
    let mut level = 0.0f64;
    for (k, tr) in traces.iter().enumerate() {
        let start = ((1.0 - tail_fraction) * tr.w.len() as f64) as usize;
        let tail = &tr.w[start..];
        let mid = tail.len() / 2;
        let sup = |xs: &[f64]| xs.iter().copied().fold(0.0, f64::max);
        let (early, late) = (sup(&tail[..mid]), sup(&tail[mid..]));
        if late > 1.05 * early + 1e-300 {
            return Err(FpiError::Certification(format!(
                "trajectory {k}: W still grows over the tail ({early:.3e} → {late:.3e}); extend the horizon"
            )));
        }
        level = level.max(sup(tail));
    }
    // trajectories starting below the level must not overshoot it
    for _ in 0..20 {
        let over = traces
            .iter()
            .filter(|tr| tr.w[0] < level)
            .flat_map(|tr| tr.w.iter().copied())
            .fold(0.0, f64::max);
        if over < level || over == 0.0 {
            break;
        }
        level = over * 1.01;
    }
    let mut c_hi = f64::INFINITY;
    let mut c_lo = 0.0f64;
    for tr in traces {
        let w0 = tr.w[0];
        for (&t, &w) in tr.times.iter().zip(&tr.w).skip(1) {
            if t <= 0.0 {
                continue;
            }
            let slack = ENVELOPE_TOL * w0.max(level);
            if w0 >= level {
                if w > level + slack {
                    let c = ((w0 - level) / (w - level)).ln() / t;
                    c_hi = c_hi.min(c.max(0.0));
                }
            } else if w > level - slack {
                c_lo = f64::INFINITY;
            } else {
                let c = ((level - w0) / (level - w)).ln() / t;
                c_lo = c_lo.max(c);
            }
        }
    }
    if c_hi.is_nan() || c_hi <= 0.0 || c_lo > c_hi {
        return Err(FpiError::Certification(format!(
            "no envelope rate fits the ensemble (c₀ ∈ [{c_lo:.3e}, {c_hi:.3e}])"
        )));
    }
    Ok(Envelope {
        c0: c_hi.min(1e6),
        level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleMember {
    pub initial_norm: f64,
    pub initial_w: f64,
    /// First time after which `W ≤ 2K` for the rest of the run.
    pub entry_time: Option<f64>,
    pub final_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorbingReport {
    pub envelope: Envelope,
    pub eta: f64,
    /// The absorbing set `{W ≤ 2K}`.
    pub w_level: f64,
    /// Radius of an 𝓗-ball containing it (`‖U‖² ≤ 4W`).
    pub ball_radius: f64,
    pub members: Vec<EnsembleMember>,
    /// Rank correlation between initial norm and entry time.
    pub entry_time_trend: f64,
    /// Worst envelope excess over the ensemble (≤ 0 passes).
    pub ensemble_excess: f64,
    /// Worst envelope excess over the restart runs (reported only: the
    /// envelope is fitted on the ensemble, not on these states).
    pub restart_excess: f64,
    /// Largest `W / (2K)` seen on restart runs (≤ 1 passes).
    pub restart_max_ratio: f64,
    pub restarts: usize,
    /// Indices of members that never entered the set.
    pub escaped: Vec<usize>,
    pub passed: bool,
}

/// Initial states with norms spread evenly over `(0, R_max]`.
pub fn ensemble<R: rand::Rng>(stepper: &Stepper, count: usize, max_radius: f64, rng: &mut R) -> Result<Vec<SystemState>> {
    (0..count)
        .map(|k| stepper.random_state(rng, max_radius * (k + 1) as f64 / count as f64))
        .collect()
}

/// Runs the ensemble, fits the envelope, then restarts from states inside
/// the set and checks they stay there for `probes.restart_horizon`.
pub fn absorbing_set_check(stepper: &Stepper, lyap: &Lyapunov, initial: &[SystemState], seed: u64) -> Result<AbsorbingReport> {
    if initial.is_empty() {
        return Err(FpiError::InsufficientData("empty ensemble".into()));
    }
    let cfg = stepper.config();
    let grid = stepper.grid();
    let steps = cfg.steps();
    let runs: Vec<(LyapunovTrace, SystemState)> = initial
        .par_iter()
        .map(|u0| trace_run(stepper, lyap, u0, steps))
        .collect::<Result<_>>()?;
    let traces: Vec<LyapunovTrace> = runs.iter().map(|r| r.0.clone()).collect();
    let envelope = fit_envelope(&traces, cfg.probes.tail_fraction)?;
    let w_level = 2.0 * envelope.level;
    let ensemble_excess = traces.iter().map(|t| envelope.excess(t)).fold(f64::NEG_INFINITY, f64::max);

    let slack = |w: f64| w <= w_level * (1.0 + 1e-9) + 1e-300;
    let mut members = Vec::new();
    let mut escaped = Vec::new();
    for (k, (tr, _)) in runs.iter().enumerate() {
        let last_out = tr.w.iter().rposition(|&w| !slack(w));
        let entry_time = match last_out {
            None => Some(0.0),
            Some(i) if i + 1 < tr.w.len() => Some(tr.times[i + 1]),
            Some(_) => None,
        };
        if entry_time.is_none() {
            escaped.push(k);
        }
        members.push(EnsembleMember {
            initial_norm: tr.norm[0],
            initial_w: tr.w[0],
            entry_time,
            final_norm: *tr.norm.last().expect("nonempty trace"),
        });
    }
    let entry_time_trend = spearman(
        &members.iter().map(|m| m.initial_norm).collect::<Vec<_>>(),
        &members.iter().map(|m| m.entry_time.unwrap_or(f64::INFINITY)).collect::<Vec<_>>(),
    );

    // restart from in-set states: the final states, and random states
    // rescaled onto W = 0.95·2K
    let restart_steps = ((cfg.probes.restart_horizon / cfg.dt).round() as usize).max(1);
    let mut starts: Vec<SystemState> = runs.iter().map(|r| reset_time(&r.1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ab50);
    for _ in 0..initial.len() {
        let s = stepper.random_state(&mut rng, 1.0)?;
        starts.push(scale_to_level(grid, lyap, &cfg.potential, &s, 0.95 * w_level));
    }
    let restarts: Vec<LyapunovTrace> = starts
        .par_iter()
        .map(|u0| trace_run(stepper, lyap, u0, restart_steps).map(|r| r.0))
        .collect::<Result<_>>()?;
    let restart_excess = restarts.iter().map(|t| envelope.excess(t)).fold(f64::NEG_INFINITY, f64::max);
    let restart_max_ratio = restarts
        .iter()
        .flat_map(|t| t.w.iter())
        .map(|&w| if w_level > 0.0 { w / w_level } else if w > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    let passed = escaped.is_empty() && ensemble_excess <= ENVELOPE_TOL && restart_max_ratio <= 1.0 + 1e-6;
    Ok(AbsorbingReport {
        envelope,
        eta: lyap.eta,
        w_level,
        ball_radius: (4.0 * w_level).sqrt(),
        members,
        entry_time_trend,
        ensemble_excess,
        restart_excess,
        restart_max_ratio,
        restarts: restarts.len(),
        escaped,
        passed,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = 0.5 * (i + j) as f64;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (0 when either side is constant).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let pts: Vec<(f64, f64)> = rx.into_iter().zip(ry).collect();
    let (a, _, r2) = linear_fit(&pts);
    if a == 0.0 {
        0.0
    } else {
        a.signum() * r2.sqrt()
    }
}

fn reset_time(s: &SystemState) -> SystemState {
    let mut s = s.clone();
    s.t = 0.0;
    s
}

/// `s·U` with `W(s·U) = target`, by bisection on `s` (`W` grows with `s`).
fn scale_to_level(grid: &Grid, lyap: &Lyapunov, spec: &PotentialSpec, u: &SystemState, target: f64) -> SystemState {
    if target <= 0.0 {
        return SystemState::zeros(grid);
    }
    let w = |s: f64| lyap.value(grid, &u.scaled(s), lyap.eta, spec);
    let mut hi = 1.0;
    while w(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if w(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    u.scaled(lo)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairResult {
    pub initial_distance: f64,
    /// `min_t [RHS(t) - LHS(t)] / ‖U₀-U₀*‖_𝓗`.
    pub margin: f64,
    pub worst_time: f64,
    /// Largest `‖U(t)‖_𝓗` of either trajectory.
    pub max_norm: f64,
    pub used_for_fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilizabilityReport {
    pub omega: f64,
    pub c0: f64,
    pub c_r: f64,
    pub pairs: Vec<PairResult>,
    pub min_margin: f64,
    pub passed: bool,
}

/// `sup_t ‖e^{-t𝒜}‖_𝓗 e^{ωt}` over at most 200 evenly spaced times in
/// `(0, steps·dt]`.
pub fn semigroup_constant(m: &GeneratorMatrix, omega: f64, dt: f64, steps: usize) -> f64 {
    let b = m.symmetrized();
    let stride = steps.div_ceil(200).max(1);
    let h = dt * stride as f64;
    let step = (&b * (-h)).exp();
    let mut e = DMatrix::identity(b.nrows(), b.ncols());
    let mut c: f64 = 1.0;
    let mut t = 0.0;
    while t < steps as f64 * dt {
        e = &step * e;
        t += h;
        c = c.max(e.singular_values().max() * (omega * t).exp());
    }
    c
}

/// Checks `‖S_tU₀ - S_tU₀*‖ ≤ c₀e^{-ωt}‖U₀-U₀*‖ + c_R∫₀ᵗe^{-ω(t-τ)}‖u-u*‖_Ω dτ`.
///
/// `ω` and `c₀` come from the linear semigroup; `c_R` is the smallest value
/// that fits the first half of the pairs, and the remaining pairs are held
/// out to test it.
pub fn stabilizability_check(
    stepper: &Stepper,
    generator: &GeneratorMatrix,
    pairs: &[(SystemState, SystemState)],
) -> Result<StabilizabilityReport> {
    if pairs.is_empty() {
        return Err(FpiError::InsufficientData("no trajectory pairs".into()));
    }
    let cfg = stepper.config();
    let grid = stepper.grid();
    let dt = cfg.dt;
    let steps = cfg.steps();
    let abscissa = spectral_abscissa(generator)?.abscissa;
    if abscissa >= 0.0 {
        return Err(FpiError::Certification(format!("linear abscissa {abscissa:.3e} is not negative")));
    }
    let omega = 0.5 * -abscissa;
    // small allowance for the times skipped by the sampled sup
    let c0 = 1.01 * semigroup_constant(generator, omega, dt, steps);

    struct PairData {
        z0: f64,
        z: Vec<f64>,
        h: Vec<f64>,
        max_norm: f64,
    }
    let data: Vec<PairData> = pairs
        .par_iter()
        .map(|(a, b)| -> Result<PairData> {
            let (ta, tb) = (stepper.states(a)?, stepper.states(b)?);
            let decay = (-omega * dt).exp();
            let mut z = Vec::with_capacity(ta.len());
            let mut h = Vec::with_capacity(ta.len());
            let mut hk = 0.0;
            let mut prev_d = 0.0;
            let mut max_norm: f64 = 0.0;
            for (k, (x, y)) in ta.iter().zip(&tb).enumerate() {
                let diff = x.difference(y);
                let du = grid.products().plate(&diff.plate.u, &diff.plate.u).sqrt();
                if k > 0 {
                    hk = decay * hk + 0.5 * dt * (decay * prev_d + du);
                }
                prev_d = du;
                z.push(phase_norm(grid, &diff));
                h.push(hk);
                max_norm = max_norm.max(phase_norm(grid, x)).max(phase_norm(grid, y));
            }
            Ok(PairData {
                z0: z[0],
                z,
                h,
                max_norm,
            })
        })
        .collect::<Result<_>>()?;

    let linear = |d: &PairData, k: usize| c0 * (-omega * k as f64 * dt).exp() * d.z0;
    let n_fit = data.len().div_ceil(2);
    let mut c_r: f64 = 0.0;
    for d in &data[..n_fit] {
        for k in 0..d.z.len() {
            let excess = d.z[k] - linear(d, k);
            if excess > 0.0 {
                c_r = if d.h[k] > 0.0 { c_r.max(excess / d.h[k]) } else { f64::INFINITY };
            }
        }
    }
    let results: Vec<PairResult> = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (mut margin, mut worst) = (f64::INFINITY, 0.0);
            if d.z0 == 0.0 {
                margin = 0.0;
            } else {
                for k in 0..d.z.len() {
                    let rhs = linear(d, k) + if c_r > 0.0 { c_r * d.h[k] } else { 0.0 };
                    let m = (rhs - d.z[k]) / d.z0;
                    if m < margin {
                        margin = m;
                        worst = k as f64 * dt;
                    }
                }
            }
            PairResult {
                initial_distance: d.z0,
                margin,
                worst_time: worst,
                max_norm: d.max_norm,
                used_for_fit: i < n_fit,
            }
        })
        .collect();
    let min_margin = results.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Ok(StabilizabilityReport {
        omega,
        c0,
        c_r,
        passed: min_margin >= -1e-9 && c_r.is_finite(),
        pairs: results,
        min_margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionReport {
    /// Heuristic correlation-dimension estimate.
    pub estimate: f64,
    /// Range of local slopes over the scaling region.
    pub band: (f64, f64),
    pub samples: usize,
    /// Largest pairwise distance between samples.
    pub diameter: f64,
    /// `(r, C(r))` on the log-spaced radii.
    pub curve: Vec<(f64, f64)>,
    pub degenerate: bool,
    pub note: &'static str,
}

/// Grassberger–Procaccia estimate from post-transient samples.
pub fn dimension_probe(grid: &Grid, samples: &[SystemState]) -> Result<DimensionReport> {
    const NOTE: &str = "heuristic correlation-dimension estimate, not a bound";
    let n = samples.len();
    if n < 10 {
        return Err(FpiError::InsufficientData(format!("{n} samples; need at least 10")));
    }
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| phase_norm(grid, &samples[i].difference(&samples[j])))
        .collect();
    dists.sort_by(f64::total_cmp);
    let diameter = *dists.last().expect("at least one pair");
    let scale = samples.iter().map(|s| phase_norm(grid, s)).fold(0.0, f64::max);
    if diameter <= 1e-10 * (1.0 + scale) {
        return Ok(DimensionReport {
            estimate: 0.0,
            band: (0.0, 0.0),
            samples: n,
            diameter,
            curve: Vec::new(),
            degenerate: true,
            note: NOTE,
        });
    }
    let quantile = |q: f64| dists[((dists.len() - 1) as f64 * q) as usize];
    let (r_lo, r_hi) = (quantile(0.02).max(diameter * 1e-12), quantile(0.5));
    let radii = 12;
    let total = dists.len() as f64;
    let curve: Vec<(f64, f64)> = (0..radii)
        .map(|k| {
            let r = r_lo * (r_hi / r_lo).powf(k as f64 / (radii - 1) as f64);
            let count = dists.partition_point(|&d| d < r);
            (r, count as f64 / total)
        })
        .collect();
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|&(r, c)| (r.ln(), c.ln()))
        .collect();
    if pts.len() < 3 || r_hi <= r_lo {
        return Ok(DimensionReport {
            estimate: 0.0,
            band: (0.0, 0.0),
            samples: n,
            diameter,
            curve,
            degenerate: true,
            note: NOTE,
        });
    }
    let (slope, _, _) = linear_fit(&pts);
    let local: Vec<f64> = pts.windows(3).map(|w| linear_fit(w).0).collect();
    let band = (
        local.iter().copied().fold(f64::INFINITY, f64::min),
        local.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(DimensionReport {
        estimate: slope,
        band,
        samples: n,
        diameter,
        curve,
        degenerate: false,
        note: NOTE,
    })
}

/// Evenly spaced samples of the run after `transient`.
pub fn post_transient_samples(stepper: &Stepper, u0: &SystemState, transient: f64, count: usize) -> Result<Vec<SystemState>> {
    let dt = stepper.config().dt;
    let skip = (transient / dt).round() as usize;
    let steps = stepper.config().steps();
    if skip >= steps {
        return Err(FpiError::InsufficientData(format!(
            "transient {transient} exceeds the horizon {}",
            stepper.config().horizon
        )));
    }
    let stride = ((steps - skip) / count).max(1);
    let mut out = Vec::new();
    let mut k = 0usize;
    stepper.advance(u0, steps, |s| {
        if k >= skip && (k - skip).is_multiple_of(stride) && out.len() < count {
            out.push(s.clone());
        }
        k += 1;
    })?;
    if out.len() < 10 {
        return Err(FpiError::InsufficientData(format!("{} post-transient samples", out.len())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityTrend {
    pub name: &'static str,
    pub sup: f64,
    pub first_half_sup: f64,
    pub second_half_sup: f64,
    pub growing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub quantities: Vec<QuantityTrend>,
    pub bounded: bool,
}

pub const REGULARITY_QUANTITIES: [&str; 5] = ["v_t", "P_L Δv", "A^{1/2} u_t", "u_tt", "Au + γv"];

/// Discrete analogs of the bounded quantities on consecutive states.
pub fn regularity_values(stepper: &Stepper, a: &SystemState, b: &SystemState) -> Result<[f64; 5]> {
    let grid = stepper.grid();
    let ip = grid.products();
    let dt = b.t - a.t;
    let vt = (&b.v.values - &a.v.values) / dt;
    let lap = stepper.project(&laplacian(grid, &b.v.values, &b.plate.ut))?;
    let utt = (&b.plate.ut - &a.plate.ut) / dt;
    let bal = apply_plate_operator(grid, &b.plate.u) + conservative_trace(grid, &b.v.values, &b.plate.ut);
    Ok([
        ip.fluid(&vt, &vt).sqrt(),
        ip.fluid(&lap, &lap).sqrt(),
        plate_form_a(grid, &b.plate.ut, &b.plate.ut).max(0.0).sqrt(),
        ip.plate(&utt, &utt).sqrt(),
        ip.plate(&bal, &bal).sqrt(),
    ])
}

/// Sups over the tail and a two-half trend test.
pub fn attractor_regularity_check(stepper: &Stepper, tail: &[SystemState]) -> Result<RegularityReport> {
    if tail.len() < 4 {
        return Err(FpiError::InsufficientData(format!("{} tail states", tail.len())));
    }
    let series: Vec<[f64; 5]> = tail
        .windows(2)
        .map(|w| regularity_values(stepper, &w[0], &w[1]))
        .collect::<Result<_>>()?;
    let half = series.len() / 2;
    let quantities: Vec<QuantityTrend> = REGULARITY_QUANTITIES
        .iter()
        .enumerate()
        .map(|(q, &name)| {
            let sup_of = |xs: &[[f64; 5]]| xs.iter().map(|x| x[q]).fold(0.0, f64::max);
            let first = sup_of(&series[..half]);
            let second = sup_of(&series[half..]);
            QuantityTrend {
                name,
                sup: first.max(second),
                first_half_sup: first,
                second_half_sup: second,
                growing: second > 1.1 * first + 1e-12,
            }
        })
        .collect();
    let bounded = quantities.iter().all(|q| !q.growing && q.sup.is_finite());
    Ok(RegularityReport { quantities, bounded })
}

/// Distance-scaling curve as CSV `r,C`.
pub fn dimension_csv(report: &DimensionReport) -> String {
    let mut out = String::from("r,C\n");
    for (r, c) in &report.curve {
        out.push_str(&format!("{r:.12e},{c:.12e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec};
    use crate::spectral::assemble_generator;
    use crate::stepper::RunConfig;

    fn trace(f: impl Fn(f64) -> f64) -> LyapunovTrace {
        let times: Vec<f64> = (0..200).map(|k| 0.05 * k as f64).collect();
        let w: Vec<f64> = times.iter().map(|&t| f(t)).collect();
        LyapunovTrace {
            norm: w.iter().map(|x| x.sqrt()).collect(),
            times,
            w,
        }
    }

    #[test]
    fn envelope_recovers_synthetic_rate() {
        let traces: Vec<_> = [4.0, 2.0, 1.0]
            .iter()
            .map(|&w0| trace(move |t| 0.5 + (w0 - 0.5) * (-1.3 * t).exp()))
            .collect();
        let env = fit_envelope(&traces, 0.3).unwrap();
        assert!((env.level - 0.5).abs() < 1e-3);
        assert!((env.c0 - 1.3).abs() < 0.05 * 1.3, "{env:?}");
        for tr in &traces {
            assert!(env.excess(tr) <= 1e-9);
        }
        // a growing trace admits no envelope
        let bad = vec![trace(|t| 1.0 + t)];
        assert!(fit_envelope(&bad, 0.5).is_err());
    }

    #[test]
    fn rank_correlation() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn dimension_of_point_and_curve() {
        let g = build_grid(&GridSpec::uniform(2, 4)).unwrap();
        let point = vec![SystemState::zeros(&g); 20];
        let rep = dimension_probe(&g, &point).unwrap();
        assert!(rep.degenerate && rep.estimate == 0.0);
        assert!(dimension_probe(&g, &point[..5]).is_err());
        // samples on a circle in the plate-velocity plane
        let mut e1 = SystemState::zeros(&g);
        e1.plate.ut[0] = 1.0;
        let mut e2 = SystemState::zeros(&g);
        e2.plate.ut[1] = 1.0;
        let circle: Vec<SystemState> = (0..400)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 400.0;
                let mut s = e1.scaled(th.cos());
                s.plate.ut += e2.scaled(th.sin()).plate.ut;
                s
            })
            .collect();
        let rep = dimension_probe(&g, &circle).unwrap();
        assert!((rep.estimate - 1.0).abs() < 0.15, "{rep:?}");
    }

    #[test]
    fn stabilizability_for_identical_and_linear_pairs() {
        let mut cfg = RunConfig::new(GridSpec::uniform(2, 6));
        cfg.potential = PotentialSpec::Zero;
        cfg.horizon = 1.0;
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let m = assemble_generator(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = st.random_state(&mut rng, 1.0).unwrap();
        let same = stabilizability_check(&st, &m, &[(a.clone(), a.clone())]).unwrap();
        assert_eq!(same.pairs[0].margin, 0.0);
        let pairs: Vec<_> = (0..4)
            .map(|_| (st.random_state(&mut rng, 1.0).unwrap(), st.random_state(&mut rng, 1.0).unwrap()))
            .collect();
        let rep = stabilizability_check(&st, &m, &pairs).unwrap();
        assert_eq!(rep.c_r, 0.0);
        assert!(rep.passed && rep.min_margin >= 0.0);
    }

    #[test]
    fn unforced_ensemble_collapses_to_origin() {
        let mut cfg = RunConfig::new(GridSpec::uniform(2, 6));
        cfg.horizon = 6.0;
        cfg.dt = 0.02;
        cfg.probes.restart_horizon = 1.0;
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let ly = Lyapunov::new(&g, &st, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ens = ensemble(&st, 4, 1.0, &mut rng).unwrap();
        let rep = absorbing_set_check(&st, &ly, &ens, 7).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.ball_radius < 1e-3, "{}", rep.ball_radius);
        assert!(rep.members.iter().all(|m| m.final_norm < 1e-6));
    }

    #[test]
    fn regularity_quantities_vanish_at_rest() {
        let cfg = RunConfig::new(GridSpec::uniform(2, 6));
        let g = build_grid(&cfg.grid).unwrap();
        let st = Stepper::new(&g, &cfg).unwrap();
        let states = st.states(&SystemState::zeros(&g)).unwrap();
        let rep = attractor_regularity_check(&st, &states).unwrap();
        assert!(rep.bounded);
        assert!(rep.quantities.iter().all(|q| q.sup == 0.0));
    }
}
