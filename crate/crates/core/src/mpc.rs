//! Receding-horizon loop and the three-phase feasible-control synthesizer.
//!
//! The synthesizer emits a certified cap-respecting control that steers any
//! admissible state into the terminal set: phase 1 damps the outbreak below
//! half the cap, phase 2 holds E + I constant while S burns down toward the
//! herd-immunity threshold, phase 3 freezes E and I and lands S on the
//! threshold exactly. The MPC loop solves the finite-horizon problem each
//! sampling period, applies the first segment, and advances the plant by
//! exact simulation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::integrate::{fmt, simulate, step_rk4, ControlSignal, Trajectory};
use crate::model::{herd_immunity_threshold, ControlValue, Params, State};
use crate::ocp::{solve_ocp, OcpProblem, OcpSolution, SolverConfig};
use crate::sets::{admissible_membership, region_contains, MembershipOpts, RegionKind};

/// Sub-interval length used to realize the continuous phase laws as a
/// piecewise-constant signal.
pub const PHASE_SUBSTEP: f64 = 0.1;
/// Minimum of E0 and I0 required by the synthesizer when E0 + I0 > 0.
pub const EPS_FLOOR: f64 = 1e-10;
/// Phase 2 starts only once E + I fits under this fraction of the terminal
/// box mass E_cap + I_max, so the frozen mass splits into an in-box (E, I).
const GATE_FRACTION: f64 = 0.98;
/// Phase 3 takes over once S is within this band above the threshold; the
/// clipped phase-3 law then drifts E by at most O(band / S_bar).
const S_LANDING_BAND: f64 = 5e-4;
/// Hard time guard on any synthesizer phase, days.
const PHASE_TIME_CAP: f64 = 4000.0;
/// Above this estimated phase-2 duration, fall back to cautious decay into
/// the equilibria branch of the terminal set.
const SLOW_BURN_LIMIT: f64 = 400.0;

/// Per-phase synthesizer diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PhaseDiagnostics {
    /// 1, 2, or 3.
    pub phase: u8,
    pub duration: f64,
    /// Total time the phase law had to be clipped to the control box.
    pub clipped_time: f64,
    /// Phase 2: max |E + I - (E + I)(t1)|. Phase 3: max of the E and I
    /// excursions from their frozen values. Phase 1: unused (0).
    pub drift: f64,
}

/// Three-phase control certificate with its switching times.
#[derive(Debug, Clone)]
pub struct SynthesizedControl {
    pub signal: ControlSignal,
    /// End of phase 1: I at or below half the cap with E + I under the gate.
    pub t1: f64,
    /// End of phase 2: entry to the frozen-(E, I) arc.
    pub t2: f64,
    /// S lands on the herd-immunity threshold.
    pub t3: f64,
    pub phases: Vec<PhaseDiagnostics>,
    /// Set when clipping held a phase law off its target for longer than a
    /// tolerance window; the signal is still emitted.
    pub degraded: bool,
}

struct SignalBuilder {
    starts: Vec<f64>,
    values: Vec<ControlValue>,
    t: f64,
}

impl SignalBuilder {
    fn new() -> Self {
        SignalBuilder {
            starts: Vec::new(),
            values: Vec::new(),
            t: 0.0,
        }
    }

    fn push(&mut self, u: ControlValue, dt: f64) {
        self.starts.push(self.t);
        self.values.push(u);
        self.t += dt;
    }

    fn finish(mut self, p: &Params) -> Result<ControlSignal> {
        if self.values.is_empty() {
            return Ok(ControlSignal::constant(p.u_nom()));
        }
        self.starts.push(self.t);
        ControlSignal::new(self.starts, self.values, p.u_nom(), p)
    }
}

/// True when applying `u` for one substep leaves a state from which the
/// cautious input still keeps I at or below the cap.
fn cautious_lookahead(x: &State, u: &ControlValue, dt: f64, p: &Params) -> Result<bool> {
    let next = step_rk4(x, u, dt, p)?;
    if next.i > p.i_max {
        return Ok(false);
    }
    let opts = MembershipOpts {
        tol: 0.0,
        ..MembershipOpts::default()
    };
    Ok(admissible_membership(&next, p, &opts)?.inside)
}

/// Builds the three-phase feasible control from `x0` (Algorithm: phase 1
/// damps I below half the cap, phase 2 holds E + I via gamma/beta = S, phase
/// 3 freezes E and I via gamma = eta E / I and lands S on the threshold).
///
/// Preconditions: `x0` passes the admissible-set oracle, and when E0 + I0 is
/// positive both E0 and I0 are at least [`EPS_FLOOR`]. A state already in the
/// terminal set short-circuits to the nominal input with all switching times
/// zero.
pub fn synthesize_feasible_control(x0: &State, p: &Params) -> Result<SynthesizedControl> {
    if region_contains(RegionKind::TerminalSet, x0, p) {
        return Ok(SynthesizedControl {
            signal: ControlSignal::constant(p.u_nom()),
            t1: 0.0,
            t2: 0.0,
            t3: 0.0,
            phases: Vec::new(),
            degraded: false,
        });
    }
    if x0.infected() > 0.0 && x0.e.min(x0.i) < EPS_FLOOR {
        return Err(Error::SynthesisRefused(format!(
            "min(E0, I0) = {} is below the floor {EPS_FLOOR}",
            x0.e.min(x0.i)
        )));
    }
    let opts = MembershipOpts {
        tol: 0.0,
        ..MembershipOpts::default()
    };
    if !admissible_membership(x0, p, &opts)?.inside {
        return Err(Error::SynthesisRefused(format!(
            "(S, E, I) = ({}, {}, {}) fails the admissible-set oracle",
            x0.s, x0.e, x0.i
        )));
    }

    let s_bar = herd_immunity_threshold(p);
    let e_cap = p.gamma_nom / p.eta * p.i_max;
    let gate_mass = GATE_FRACTION * (e_cap + p.i_max);
    let dt = PHASE_SUBSTEP;
    let mut b = SignalBuilder::new();
    let mut x = *x0;
    let mut degraded = false;
    let mut phases = Vec::new();

    // phase 1: nominal input while the cautious certificate survives the
    // lookahead; once it first fails, latch onto the cautious input (which
    // contracts E + I) until I <= I_max/2 with E + I under the gate.
    // Re-arming the nominal input instead would ride the cap and burn S far
    // below the threshold, defeating the phase-2/3 landing.
    let t1 = {
        let mut latched = false;
        while !(x.i <= p.i_max / 2.0 && x.infected() <= gate_mass) {
            if b.t > PHASE_TIME_CAP {
                return Err(Error::Numerical("phase 1 exceeded its time cap".into()));
            }
            if !latched && !cautious_lookahead(&x, &p.u_nom(), dt, p)? {
                latched = true;
            }
            let u = if latched { p.u_cautious() } else { p.u_nom() };
            x = step_rk4(&x, &u, dt, p)?;
            b.push(u, dt);
        }
        phases.push(PhaseDiagnostics {
            phase: 1,
            duration: b.t,
            clipped_time: 0.0,
            drift: 0.0,
        });
        b.t
    };

    if x.s <= s_bar {
        // S is already past the threshold: the nominal input keeps I under
        // eta (E + I) / (eta + gamma_nom) < I_max and decays into the box
        let start = b.t;
        while !region_contains(RegionKind::TerminalSet, &x, p) {
            if b.t > PHASE_TIME_CAP {
                return Err(Error::Numerical("nominal tail exceeded its time cap".into()));
            }
            x = step_rk4(&x, &p.u_nom(), dt, p)?;
            b.push(p.u_nom(), dt);
        }
        phases.push(PhaseDiagnostics {
            phase: 2,
            duration: b.t - start,
            clipped_time: 0.0,
            drift: 0.0,
        });
        let t3 = b.t;
        return Ok(SynthesizedControl {
            signal: b.finish(p)?,
            t1,
            t2: t3,
            t3,
            phases,
            degraded,
        });
    }

    // A vanishing infected mass makes the constant-mass S-burn of phase 2
    // astronomically slow (its rate is proportional to E + I). The cautious
    // input is contractive everywhere in the admissible set, so in that
    // regime decay straight into the equilibria branch of the terminal set
    // instead.
    let mass1 = x.infected();
    let i_share = p.eta / (p.eta + p.gamma_nom);
    let burn_rate = p.beta_nom * i_share * mass1;
    let burn_estimate = if burn_rate > 0.0 {
        (x.s / s_bar).ln() / burn_rate
    } else {
        f64::INFINITY
    };
    if burn_estimate > SLOW_BURN_LIMIT {
        let start = b.t;
        while !region_contains(RegionKind::TerminalSet, &x, p) {
            if b.t - start > PHASE_TIME_CAP {
                return Err(Error::Numerical(
                    "cautious decay exceeded its time cap".into(),
                ));
            }
            x = step_rk4(&x, &p.u_cautious(), dt, p)?;
            b.push(p.u_cautious(), dt);
        }
        phases.push(PhaseDiagnostics {
            phase: 2,
            duration: b.t - start,
            clipped_time: 0.0,
            drift: 0.0,
        });
        let t3 = b.t;
        return Ok(SynthesizedControl {
            signal: b.finish(p)?,
            t1,
            t2: t3,
            t3,
            phases,
            degraded,
        });
    }

    // phase 2: gamma/beta = S holds E + I constant; the law is evaluated at
    // a predicted substep midpoint to keep the discretization drift O(dt^3)
    let mut clipped2 = 0.0;
    let mut drift2 = 0.0f64;
    let t2 = {
        while x.s > s_bar + S_LANDING_BAND {
            if b.t - t1 > PHASE_TIME_CAP {
                return Err(Error::Numerical("phase 2 exceeded its time cap".into()));
            }
            let mut step = dt;
            let s_rate = p.beta_nom * x.s * x.i;
            // shorten the final substep so S does not dive through the band
            if s_rate > 0.0 {
                let to_band = x.s - (s_bar + S_LANDING_BAND / 2.0);
                step = step.min((to_band / s_rate).max(1e-3));
            }
            let guess = ControlValue::clamped(p.beta_nom, p.beta_nom * x.s, p);
            let mid = step_rk4(&x, &guess, step / 2.0, p)?;
            let target = p.beta_nom * mid.s;
            let u = ControlValue::clamped(p.beta_nom, target, p);
            if (u.gamma - target).abs() > 1e-12 {
                clipped2 += step;
            }
            x = step_rk4(&x, &u, step, p)?;
            b.push(u, step);
            drift2 = drift2.max((x.infected() - mass1).abs());
        }
        phases.push(PhaseDiagnostics {
            phase: 2,
            duration: b.t - t1,
            clipped_time: clipped2,
            drift: drift2,
        });
        b.t
    };

    // phase 3: gamma = eta E / I freezes I, beta = eta E(t2) / (S I(t2))
    // freezes E; S then falls at the constant rate eta E(t2), so the final
    // partial substep lands S on the threshold exactly
    let (e2, i2) = (x.e, x.i);
    let s_rate = p.eta * e2;
    let mut clipped3 = 0.0;
    let mut drift3 = 0.0f64;
    if i2 < EPS_FLOOR || s_rate <= 0.0 {
        return Err(Error::Numerical(
            "phase 3 entered with vanishing infectious mass".into(),
        ));
    }
    // land fractionally below the threshold so the terminal-set check is not
    // defeated by roundoff
    let s_target = s_bar - 1e-9;
    while x.s > s_target {
        if b.t - t2 > PHASE_TIME_CAP {
            return Err(Error::Numerical("phase 3 exceeded its time cap".into()));
        }
        let step = dt.min((x.s - s_target) / s_rate);
        let s_mid = x.s - s_rate * step / 2.0;
        let gamma_target = p.eta * x.e / x.i;
        let beta_target = p.eta * e2 / (s_mid * i2);
        let u = ControlValue::clamped(beta_target, gamma_target, p);
        if (u.gamma - gamma_target).abs() > 1e-12 || (u.beta - beta_target).abs() > 1e-12 {
            clipped3 += step;
        }
        x = step_rk4(&x, &u, step, p)?;
        b.push(u, step);
        drift3 = drift3.max((x.e - e2).abs().max((x.i - i2).abs()));
    }
    phases.push(PhaseDiagnostics {
        phase: 3,
        duration: b.t - t2,
        clipped_time: clipped3,
        drift: drift3,
    });
    let t3 = b.t;
    if clipped2 + clipped3 > 0.5 {
        degraded = true;
    }
    if !region_contains(RegionKind::TerminalSet, &x, p) {
        degraded = true;
    }
    Ok(SynthesizedControl {
        signal: b.finish(p)?,
        t1,
        t2,
        t3,
        phases,
        degraded,
    })
}

/// Remark-style shifted candidate: the tail of the previous solution followed
/// by the nominal input on the freed final stretch.
pub fn shift_warm_start(prev: &OcpSolution, delta: f64, p: &Params) -> ControlSignal {
    let horizon_t = *prev
        .predicted
        .times
        .last()
        .expect("prediction never empty");
    let t_end = horizon_t - delta;
    if t_end <= 0.0 {
        return ControlSignal::constant(p.u_nom());
    }
    let mut grid = vec![0.0];
    let mut values = vec![prev.control.value_at(delta)];
    for &g in prev.control.grid() {
        let shifted = g - delta;
        if shifted > 1e-12 && shifted < t_end - 1e-12 {
            grid.push(shifted);
            values.push(prev.control.value_at(g));
        }
    }
    grid.push(t_end);
    ControlSignal::new(grid, values, p.u_nom(), p)
        .expect("shifted values stay within control bounds")
}

/// Closed-loop configuration: the prediction horizon is
/// `n_horizon * delta` days, split into `n_horizon` control intervals.
#[derive(Debug, Clone, Copy)]
pub struct MpcConfig {
    /// Sampling period, days.
    pub delta: f64,
    pub n_horizon: usize,
    pub p: Params,
    /// Terminate once E + I falls below this.
    pub stop_threshold: f64,
    pub max_days: f64,
    pub solver: SolverConfig,
    /// Plant integration step.
    pub plant_h: f64,
}

impl MpcConfig {
    pub fn new(p: Params) -> Self {
        MpcConfig {
            delta: 1.0,
            n_horizon: 25,
            p,
            stop_threshold: 1e-6,
            max_days: 1000.0,
            solver: SolverConfig::default(),
            plant_h: 0.05,
        }
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcTermination {
    /// E + I fell below the stop threshold.
    Converged,
    MaxDays,
    /// A step reported an infeasible solve; the partial run is returned.
    InfeasibleStep,
}

impl MpcTermination {
    pub fn label(&self) -> &'static str {
        match self {
            MpcTermination::Converged => "Converged",
            MpcTermination::MaxDays => "MaxDays",
            MpcTermination::InfeasibleStep => "InfeasibleStep",
        }
    }
}

/// One solve of the receding-horizon loop.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub value: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// False only at step 0, where the synthesized control seeds the solve.
    pub warm_started: bool,
}

/// Closed-loop outcome.
#[derive(Debug, Clone)]
pub struct MpcResult {
    pub closed_loop: Trajectory,
    /// The realized feedback: one control value per sampling period.
    pub applied_controls: ControlSignal,
    pub per_step: Vec<StepRecord>,
    pub terminated: MpcTermination,
    /// Running minimum of I / (E + I) along the closed loop, an observability
    /// diagnostic; 1 when the loop never ran with E + I > 0.
    pub min_infectious_fraction: f64,
}

impl MpcResult {
    pub fn days_elapsed(&self) -> f64 {
        *self.closed_loop.times.last().expect("trajectory never empty")
    }
}

fn append_segment(total: &mut Trajectory, seg: &Trajectory, offset: f64) {
    let base_cost = *total.running_cost.last().unwrap_or(&0.0);
    for k in 1..seg.times.len() {
        total.times.push(offset + seg.times[k]);
        total.states.push(seg.states[k]);
        total.controls.push(seg.controls[k]);
        total.running_cost.push(base_cost + seg.running_cost[k]);
    }
}

/// Receding-horizon loop: solve, apply the first sampling period, advance the
/// plant by exact simulation, shift the warm start, repeat. Step 0 is seeded
/// by [`synthesize_feasible_control`] inside the solver.
pub fn mpc_run(x0: &State, cfg: &MpcConfig) -> Result<MpcResult> {
    if cfg.delta <= 0.0 || cfg.n_horizon == 0 {
        return Err(Error::Precondition(
            "delta must be positive and n_horizon at least 1".into(),
        ));
    }
    let p = cfg.p;
    if !region_contains(RegionKind::GPi, x0, &p) {
        return Err(Error::Precondition(format!(
            "closed loop requires x0 in G_Pi, got (S, E, I) = ({}, {}, {})",
            x0.s, x0.e, x0.i
        )));
    }
    let horizon_t = cfg.delta * cfg.n_horizon as f64;

    let mut x = *x0;
    let mut t = 0.0;
    let mut per_step = Vec::new();
    let mut applied = Vec::new();
    let mut prev: Option<OcpSolution> = None;
    let mut closed_loop = Trajectory {
        times: vec![0.0],
        states: vec![*x0],
        controls: vec![p.u_nom()],
        running_cost: vec![0.0],
    };
    let mut min_fraction = 1.0f64;
    let terminated;

    loop {
        if x.infected() > 0.0 {
            min_fraction = min_fraction.min(x.i / x.infected());
        }
        if x.infected() < cfg.stop_threshold {
            terminated = MpcTermination::Converged;
            break;
        }
        if t >= cfg.max_days - 1e-9 {
            terminated = MpcTermination::MaxDays;
            break;
        }
        let warm = prev.as_ref().map(|s| shift_warm_start(s, cfg.delta, &p));
        let prob = OcpProblem {
            constraint_tol: cfg.solver.constraint_tol,
            ..OcpProblem::new(x, horizon_t, cfg.n_horizon, p)?
        };
        let sol = solve_ocp(&prob, warm.as_ref(), &cfg.solver)?;
        per_step.push(StepRecord {
            value: sol.value,
            feasible: sol.feasible,
            iterations: sol.iterations,
            warm_started: warm.is_some(),
        });
        if !sol.feasible {
            terminated = MpcTermination::InfeasibleStep;
            break;
        }
        let u0 = sol.control.value_at(0.0);
        applied.push(u0);
        let seg = simulate(&x, &ControlSignal::constant(u0), cfg.delta, cfg.plant_h, &p)?;
        for state in &seg.states {
            if state.infected() > 0.0 {
                min_fraction = min_fraction.min(state.i / state.infected());
            }
        }
        append_segment(&mut closed_loop, &seg, t);
        x = *seg.final_state();
        t += cfg.delta;
        prev = Some(sol);
    }

    let applied_controls = if applied.is_empty() {
        ControlSignal::constant(p.u_nom())
    } else {
        ControlSignal::sampled(cfg.delta, applied, &p)?
    };
    Ok(MpcResult {
        closed_loop,
        applied_controls,
        per_step,
        terminated,
        min_infectious_fraction: min_fraction,
    })
}

/// Closed-loop CSV: the trajectory columns plus per-sample solve diagnostics
/// `step,ocp_value,ocp_feasible,ocp_iters`.
pub fn write_closed_loop_csv<W: Write>(
    out: &mut W,
    res: &MpcResult,
    delta: f64,
    p: &Params,
) -> Result<()> {
    writeln!(
        out,
        "t,S,E,I,R,beta,gamma,stage_cost,running_cost,step,ocp_value,ocp_feasible,ocp_iters"
    )?;
    let tr = &res.closed_loop;
    for k in 0..tr.times.len() {
        let x = &tr.states[k];
        let u = &tr.controls[k];
        let step = ((tr.times[k] / delta).floor() as usize).min(res.per_step.len().saturating_sub(1));
        let (value, feasible, iters) = match res.per_step.get(step) {
            Some(r) => (r.value, r.feasible as u8, r.iterations),
            None => (f64::NAN, 0, 0),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{step},{},{feasible},{iters}",
            fmt(tr.times[k]),
            fmt(x.s),
            fmt(x.e),
            fmt(x.i),
            fmt(x.r),
            fmt(u.beta),
            fmt(u.gamma),
            fmt(crate::model::stage_cost(x, u, p)),
            fmt(tr.running_cost[k]),
            fmt(value),
        )?;
    }
    Ok(())
}

/// Flat key-value run summary.
pub fn write_run_summary<W: Write>(out: &mut W, res: &MpcResult, p: &Params) -> Result<()> {
    let tr = &res.closed_loop;
    let s_bar = herd_immunity_threshold(p);
    let first_time = |pred: &dyn Fn(&State) -> bool| -> Option<f64> {
        tr.states
            .iter()
            .position(|x| pred(x))
            .map(|k| tr.times[k])
    };
    let t_cap = first_time(&|x: &State| x.i >= 0.99 * p.i_max);
    let t_sbar = first_time(&|x: &State| x.s <= s_bar);
    let opt = |v: Option<f64>| v.map_or_else(|| "none".into(), fmt);
    writeln!(out, "terminated={}", res.terminated.label())?;
    writeln!(out, "days_elapsed={}", fmt(res.days_elapsed()))?;
    writeln!(out, "max_I={}", fmt(tr.max_infectious()))?;
    writeln!(out, "t_cap_entry={}", opt(t_cap))?;
    writeln!(out, "t_sbar_cross={}", opt(t_sbar))?;
    writeln!(out, "total_cost={}", fmt(tr.total_cost()))?;
    Ok(())
}
