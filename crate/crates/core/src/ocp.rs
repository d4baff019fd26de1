//! Finite-horizon optimal control problem: single-shooting transcription
//! over piecewise-constant controls, terminal cost by forward nominal
//! integration, terminal-set constraint, and an augmented-Lagrangian solve
//! with a box-projected quasi-Newton inner loop.
//!
//! The decision vector holds the `2 n_ctrl` control parameters scaled to
//! `[0, 1]` per component; box bounds are handled by projection. State and
//! terminal inequalities enter through the augmented-Lagrangian penalty.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::integrate::{fmt, simulate, step_rk4, ControlSignal, Trajectory, T_INF_CAP};
use crate::model::{herd_immunity_threshold, ControlValue, Params, State};
use crate::par;
use crate::sets::{region_contains, RegionKind, EQUILIBRIA_TOL};

/// Which branch of the terminal set the NLP constrains to.
///
/// The equilibria branch is measure-zero and unreachable in finite time from
/// `E + I > 0`, so `Box` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalBranch {
    Box,
    EquilibriaOnly,
}

/// One finite-horizon problem instance.
#[derive(Debug, Clone, Copy)]
pub struct OcpProblem {
    pub x0: State,
    /// Horizon length T, days.
    pub horizon_t: f64,
    /// Number of piecewise-constant control intervals over `[0, T)`.
    pub n_ctrl: usize,
    pub p: Params,
    /// Feasibility slack on all inequality constraints.
    pub constraint_tol: f64,
    pub terminal_branch: TerminalBranch,
}

impl OcpProblem {
    pub fn new(x0: State, horizon_t: f64, n_ctrl: usize, p: Params) -> Result<Self> {
        if !(horizon_t > 0.0) {
            return Err(Error::Precondition(format!("horizon T = {horizon_t} must be positive")));
        }
        if n_ctrl == 0 {
            return Err(Error::Precondition("n_ctrl must be >= 1".into()));
        }
        Ok(OcpProblem {
            x0,
            horizon_t,
            n_ctrl,
            p,
            constraint_tol: 1e-5,
            terminal_branch: TerminalBranch::Box,
        })
    }
}

/// Solver knobs. These are the keys accepted in scenario files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_ctrl: usize,
    /// Integration (and constraint-sampling) step over the horizon.
    pub h: f64,
    pub constraint_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Forward finite-difference step in scaled control units.
    pub fd_step: f64,
    /// Reserved for randomized multi-start; the default solve is
    /// deterministic and ignores it.
    pub seed: u64,
    /// Drop the terminal cost while keeping the terminal-set constraint.
    pub use_terminal_cost: bool,
    /// Truncation floor on E + I for the terminal-cost integral.
    pub terminal_trunc_tol: f64,
    /// Integration step for the terminal-cost integral.
    pub terminal_h: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_ctrl: 25,
            h: 0.05,
            constraint_tol: 1e-5,
            max_outer_iters: 10,
            max_inner_iters: 40,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            fd_step: 1e-6,
            seed: 0,
            use_terminal_cost: true,
            terminal_trunc_tol: 1e-10,
            terminal_h: 0.1,
        }
    }
}

/// Terminal-cost evaluation report.
#[derive(Debug, Clone, Copy)]
pub struct TerminalCost {
    pub value: f64,
    /// Time at which the integral was truncated.
    pub truncated_at: f64,
    /// Set when the horizon cap was reached with E + I still above the
    /// truncation floor; the value is still returned.
    pub horizon_capped: bool,
}

/// Cost-to-go under the nominal input: quadrature of `E^2 + I^2` along the
/// forward trajectory from `x_hat`, truncated once `E + I < trunc_tol` or at
/// the hard horizon cap.
pub fn terminal_cost(x_hat: &State, p: &Params, trunc_tol: f64) -> Result<TerminalCost> {
    terminal_cost_with(x_hat, p, trunc_tol, 0.01)
}

/// As [`terminal_cost`], with an explicit integration step.
pub fn terminal_cost_with(x_hat: &State, p: &Params, trunc_tol: f64, h: f64) -> Result<TerminalCost> {
    if !region_contains(RegionKind::Pi, x_hat, p) {
        return Err(Error::Precondition(format!(
            "terminal cost requires x_hat in Pi, got (S, E, I) = ({}, {}, {})",
            x_hat.s, x_hat.e, x_hat.i
        )));
    }
    let u = p.u_nom();
    let mut x = *x_hat;
    let mut value = 0.0;
    let mut t = 0.0;
    while x.infected() >= trunc_tol && t < T_INF_CAP {
        let prev = x;
        x = step_rk4(&x, &u, h, p)?;
        value += h / 2.0 * (prev.e * prev.e + prev.i * prev.i + x.e * x.e + x.i * x.i);
        t += h;
    }
    Ok(TerminalCost {
        value,
        truncated_at: t,
        horizon_capped: x.infected() >= trunc_tol,
    })
}

/// Decision-vector layout plus objective/constraint evaluators for one
/// problem instance.
pub struct Transcription<'a> {
    pub prob: &'a OcpProblem,
    pub cfg: &'a SolverConfig,
}

/// One evaluation of the shooting map.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    /// `c_i(z) <= 0` form: cap violations at every sample, then the
    /// terminal-set inequalities.
    pub constraints: Vec<f64>,
    pub terminal_state: State,
    pub max_i: f64,
}

impl<'a> Transcription<'a> {
    pub fn new(prob: &'a OcpProblem, cfg: &'a SolverConfig) -> Self {
        Transcription { prob, cfg }
    }

    pub fn n_vars(&self) -> usize {
        2 * self.prob.n_ctrl
    }

    fn interval_len(&self) -> f64 {
        self.prob.horizon_t / self.prob.n_ctrl as f64
    }

    fn control_from_scaled(&self, zb: f64, zg: f64) -> ControlValue {
        let p = &self.prob.p;
        ControlValue {
            beta: p.beta_min + zb.clamp(0.0, 1.0) * (p.beta_nom - p.beta_min),
            gamma: p.gamma_nom + zg.clamp(0.0, 1.0) * (p.gamma_max - p.gamma_nom),
        }
    }

    /// Scaled decision vector -> piecewise-constant signal on the control grid.
    pub fn signal_from(&self, z: &[f64]) -> ControlSignal {
        let n = self.prob.n_ctrl;
        debug_assert_eq!(z.len(), 2 * n);
        let values: Vec<ControlValue> = (0..n)
            .map(|k| self.control_from_scaled(z[2 * k], z[2 * k + 1]))
            .collect();
        ControlSignal::sampled(self.interval_len(), values, &self.prob.p)
            .expect("scaled controls are feasible by construction")
    }

    /// Signal -> scaled decision vector, sampling at interval midpoints.
    pub fn z_from_signal(&self, sig: &ControlSignal) -> Vec<f64> {
        let p = &self.prob.p;
        let dt = self.interval_len();
        let span_b = p.beta_nom - p.beta_min;
        let span_g = p.gamma_max - p.gamma_nom;
        let mut z = Vec::with_capacity(self.n_vars());
        for k in 0..self.prob.n_ctrl {
            let u = sig.value_at((k as f64 + 0.5) * dt);
            z.push(if span_b > 0.0 { (u.beta - p.beta_min) / span_b } else { 0.0 });
            z.push(if span_g > 0.0 { (u.gamma - p.gamma_nom) / span_g } else { 0.0 });
        }
        z
    }

    /// The nominal-input decision vector (beta at its top, gamma at its bottom).
    pub fn z_nominal(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.n_vars()];
        for k in 0..self.prob.n_ctrl {
            z[2 * k] = 1.0;
        }
        z
    }

    /// Simulates the candidate and assembles objective plus constraints.
    pub fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let sig = self.signal_from(z);
        let traj = simulate(&self.prob.x0, &sig, self.prob.horizon_t, self.cfg.h, &self.prob.p)?;
        let p = &self.prob.p;
        let mut constraints: Vec<f64> = traj.states.iter().map(|x| x.i - p.i_max).collect();
        let xt = *traj.final_state();
        match self.prob.terminal_branch {
            TerminalBranch::Box => {
                let e_cap = p.gamma_nom / p.eta * p.i_max;
                // the terminal set is a union: the S bound is waived on the
                // equilibria branch (E and I both at zero)
                let equilibria_residual = (xt.e - EQUILIBRIA_TOL).max(xt.i - EQUILIBRIA_TOL);
                constraints.push((xt.s - herd_immunity_threshold(p)).min(equilibria_residual));
                constraints.push(xt.e - e_cap);
                constraints.push(xt.i - p.i_max);
            }
            TerminalBranch::EquilibriaOnly => {
                constraints.push(xt.e - EQUILIBRIA_TOL);
                constraints.push(xt.i - EQUILIBRIA_TOL);
            }
        }
        let mut objective = traj.total_cost();
        if self.cfg.use_terminal_cost {
            objective +=
                terminal_cost_with(&xt, p, self.cfg.terminal_trunc_tol, self.cfg.terminal_h)?
                    .value;
        }
        Ok(Evaluation {
            objective,
            constraints,
            terminal_state: xt,
            max_i: traj.max_infectious(),
        })
    }
}

/// Optimal control schedule, predicted trajectory, value, and diagnostics.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub control: ControlSignal,
    pub predicted: Trajectory,
    /// J_T at the returned control.
    pub value: f64,
    pub feasible: bool,
    /// Max-norm of the projected augmented-Lagrangian gradient at the
    /// returned iterate.
    pub kkt_residual: f64,
    /// Total inner iterations across all outer rounds.
    pub iterations: usize,
    /// Worst constraint value `max_i c_i` at the returned iterate.
    pub max_violation: f64,
}

fn project(z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn augmented_value(eval: &Evaluation, lambda: &[f64], mu: f64) -> f64 {
    let mut total = eval.objective;
    for (c, l) in eval.constraints.iter().zip(lambda) {
        let shifted = (l + mu * c).max(0.0);
        total += (shifted * shifted - l * l) / (2.0 * mu);
    }
    total
}

struct InnerResult {
    z: Vec<f64>,
    proj_grad_norm: f64,
    iterations: usize,
}

/// Projected quasi-Newton (L-BFGS direction, Armijo backtracking) on the
/// augmented Lagrangian. Gradients are forward finite differences, computed
/// concurrently across decision variables under the `parallel` feature.
fn inner_minimize<F>(al: &F, z0: Vec<f64>, fd_step: f64, max_iters: usize, tol: f64) -> InnerResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = z0.len();
    let mut z = z0;
    project(&mut z);
    let mut value = al(&z);
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    let gradient = |z: &[f64], base: f64| -> Vec<f64> {
        par::map_range(n, |i| {
            let mut zp = z.to_vec();
            // stay inside the box: fall back to a backward difference at the
            // upper bound
            if zp[i] + fd_step <= 1.0 {
                zp[i] += fd_step;
                (al(&zp) - base) / fd_step
            } else {
                zp[i] -= fd_step;
                (base - al(&zp)) / fd_step
            }
        })
    };

    let mut grad = gradient(&z, value);
    let mut proj_norm = projected_gradient_norm(&z, &grad);
    let mut iterations = 0;

    for _ in 0..max_iters {
        if proj_norm <= tol {
            break;
        }
        iterations += 1;

        // L-BFGS two-loop recursion
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y) in history.iter().rev() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            if sy <= 1e-14 {
                alphas.push(0.0);
                continue;
            }
            let sd: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
            let a = sd / sy;
            alphas.push(a);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
        }
        if let Some((s, y)) = history.last() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            if sy > 1e-14 && yy > 1e-14 {
                let scale = sy / yy;
                for di in d.iter_mut() {
                    *di *= scale;
                }
            }
        }
        for ((s, y), a) in history.iter().zip(alphas.iter().rev()) {
            let sy: f64 = s.iter().zip(y).map(|(u, v)| u * v).sum();
            if sy <= 1e-14 {
                continue;
            }
            let yd: f64 = y.iter().zip(&d).map(|(u, v)| u * v).sum();
            let b = yd / sy;
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        // backtracking line search along the projected path
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..25 {
            let mut cand: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| zi + alpha * di).collect();
            project(&mut cand);
            let step_dot: f64 = cand
                .iter()
                .zip(&z)
                .zip(&grad)
                .map(|((c, zi), g)| (c - zi) * g)
                .sum();
            if step_dot >= 0.0 {
                // projected direction not a descent direction; shrink
                alpha *= 0.5;
                continue;
            }
            let cand_val = al(&cand);
            if cand_val <= value + 1e-4 * step_dot {
                accepted = Some((cand, cand_val));
                break;
            }
            alpha *= 0.5;
        }
        let Some((z_new, val_new)) = accepted else {
            // no progress along the quasi-Newton path; give up this round
            break;
        };

        let grad_new = gradient(&z_new, val_new);
        let s: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-14 {
            history.push((s, y));
            if history.len() > 8 {
                history.remove(0);
            }
        }
        let improvement = value - val_new;
        z = z_new;
        value = val_new;
        grad = grad_new;
        proj_norm = projected_gradient_norm(&z, &grad);
        if improvement.abs() < 1e-14 {
            break;
        }
    }
    InnerResult {
        z,
        proj_grad_norm: proj_norm,
        iterations,
    }
}

fn projected_gradient_norm(z: &[f64], grad: &[f64]) -> f64 {
    z.iter()
        .zip(grad)
        .map(|(zi, g)| {
            let stepped = (zi - g).clamp(0.0, 1.0);
            (stepped - zi).abs()
        })
        .fold(0.0, f64::max)
}

/// Solves the finite-horizon problem. Deterministic given the problem, warm
/// start, and configuration. Without a warm start the initial iterate is the
/// synthesized three-phase feasible control restricted to the horizon, which
/// is feasible whenever the synthesizer applies; the nominal input is the
/// fallback when it does not.
pub fn solve_ocp(
    prob: &OcpProblem,
    warm_start: Option<&ControlSignal>,
    cfg: &SolverConfig,
) -> Result<OcpSolution> {
    let p = prob.p;
    let tr = Transcription::new(prob, cfg);

    // infeasible at t = 0: no control can help
    if prob.x0.i > p.i_max + prob.constraint_tol {
        let sig = ControlSignal::constant(p.u_nom());
        let predicted = simulate(&prob.x0, &sig, prob.horizon_t, cfg.h, &p)?;
        return Ok(OcpSolution {
            control: sig,
            predicted,
            value: f64::INFINITY,
            feasible: false,
            kkt_residual: f64::NAN,
            iterations: 0,
            max_violation: prob.x0.i - p.i_max,
        });
    }

    let mut z = match warm_start {
        Some(sig) => tr.z_from_signal(sig),
        None => match crate::mpc::synthesize_feasible_control(&prob.x0, &p) {
            Ok(sc) => tr.z_from_signal(&sc.signal),
            Err(_) => tr.z_nominal(),
        },
    };
    project(&mut z);

    let eval0 = tr.evaluate(&z)?;
    let n_con = eval0.constraints.len();
    let viol_of = |c: &[f64]| c.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));

    // best feasible iterate seen, so a feasible warm start is never worsened
    let mut best_feasible: Option<(Vec<f64>, f64)> = None;
    if viol_of(&eval0.constraints) <= prob.constraint_tol {
        best_feasible = Some((z.clone(), eval0.objective));
    }

    let mut lambda = vec![0.0; n_con];
    let mut mu = cfg.penalty_init;
    let mut total_inner = 0;
    let mut kkt = f64::NAN;
    let mut prev_viol = f64::INFINITY;
    let inner_tol = 1e-7;

    for _outer in 0..cfg.max_outer_iters {
        let lambda_ref = &lambda;
        let al = |zz: &[f64]| -> f64 {
            match tr.evaluate(zz) {
                Ok(e) => augmented_value(&e, lambda_ref, mu),
                Err(_) => f64::INFINITY,
            }
        };
        let res = inner_minimize(&al, z.clone(), cfg.fd_step, cfg.max_inner_iters, inner_tol);
        z = res.z;
        total_inner += res.iterations;
        kkt = res.proj_grad_norm;

        let eval = tr.evaluate(&z)?;
        let viol = viol_of(&eval.constraints);
        if viol <= prob.constraint_tol {
            match &best_feasible {
                Some((_, v)) if *v <= eval.objective => {}
                _ => best_feasible = Some((z.clone(), eval.objective)),
            }
        }
        if viol <= prob.constraint_tol && res.proj_grad_norm <= inner_tol * 10.0 {
            break;
        }
        for (l, c) in lambda.iter_mut().zip(&eval.constraints) {
            *l = (*l + mu * c).max(0.0);
        }
        if viol > 0.25 * prev_viol && viol > prob.constraint_tol {
            mu *= cfg.penalty_growth;
        }
        prev_viol = viol;
    }

    // prefer the best feasible iterate over the final one
    let final_eval = tr.evaluate(&z)?;
    let final_viol = viol_of(&final_eval.constraints);
    let (z, value, feasible, max_violation) = match best_feasible {
        Some((zb, vb))
            if final_viol > prob.constraint_tol || vb < final_eval.objective =>
        {
            let eb = tr.evaluate(&zb)?;
            (zb, vb, true, viol_of(&eb.constraints))
        }
        _ => (
            z,
            final_eval.objective,
            final_viol <= prob.constraint_tol,
            final_viol,
        ),
    };

    let control = tr.signal_from(&z);
    let predicted = simulate(&prob.x0, &control, prob.horizon_t, cfg.h, &p)?;
    Ok(OcpSolution {
        control,
        predicted,
        value,
        feasible,
        kkt_residual: kkt,
        iterations: total_inner,
        max_violation,
    })
}

/// Optimal value or the infinity marker when no feasible control exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Finite(f64),
    Infeasible,
}

impl Value {
    pub fn as_f64(&self) -> f64 {
        match self {
            Value::Finite(v) => *v,
            Value::Infeasible => f64::INFINITY,
        }
    }
}

/// V_T: wraps [`solve_ocp`] and maps infeasibility to the infinity marker.
pub fn value_function(x0: &State, horizon_t: f64, p: &Params, cfg: &SolverConfig) -> Result<Value> {
    let prob = OcpProblem {
        constraint_tol: cfg.constraint_tol,
        ..OcpProblem::new(*x0, horizon_t, cfg.n_ctrl, *p)?
    };
    let sol = solve_ocp(&prob, None, cfg)?;
    Ok(if sol.feasible {
        Value::Finite(sol.value)
    } else {
        Value::Infeasible
    })
}

/// Writes the control schedule as CSV with header `k,t_start,beta,gamma`.
pub fn write_schedule_csv<W: Write>(out: &mut W, sol: &OcpSolution) -> Result<()> {
    writeln!(out, "k,t_start,beta,gamma")?;
    for (k, &t) in sol.control.grid().iter().enumerate() {
        let u = sol.control.value_at(t);
        writeln!(out, "{k},{},{},{}", fmt(t), fmt(u.beta), fmt(u.gamma))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> Params {
        Params::case_study()
    }

    fn quick_cfg() -> SolverConfig {
        SolverConfig {
            h: 0.1,
            terminal_h: 0.2,
            terminal_trunc_tol: 1e-9,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn terminal_cost_zero_at_equilibrium() {
        let tc = terminal_cost(&State::equilibrium(0.7).unwrap(), &p(), 1e-12).unwrap();
        assert_eq!(tc.value, 0.0);
        assert!(!tc.horizon_capped);
    }

    #[test]
    fn terminal_cost_positive_and_bounded_in_terminal_set() {
        let p = p();
        let x = State::from_sei(0.3, 0.03, 0.04).unwrap();
        let tc = terminal_cost(&x, &p, 1e-12).unwrap();
        assert!(tc.value > 0.0);
        assert!(tc.value < 2.0 / p.eta + 1.0 / p.gamma_nom); // 15.7 for the case study
        assert!(!tc.horizon_capped);
    }

    #[test]
    fn terminal_cost_step_halving_consistency() {
        use rand::{Rng, SeedableRng};
        let p = p();
        let s_bar = herd_immunity_threshold(&p);
        let e_cap = p.gamma_nom / p.eta * p.i_max;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = State::from_sei(
                rng.gen_range(0.0..s_bar),
                rng.gen_range(0.0..e_cap),
                rng.gen_range(0.0..p.i_max),
            )
            .unwrap();
            let a = terminal_cost(&x, &p, 1e-12).unwrap();
            let b = terminal_cost_with(&x, &p, 1e-12, 0.005).unwrap();
            assert!((a.value - b.value).abs() <= 1e-8, "{} vs {}", a.value, b.value);
        }
    }

    #[test]
    fn transcription_layout_and_roundtrip() {
        let p = p();
        let prob = OcpProblem::new(State::from_sei(0.5, 0.18, 0.01).unwrap(), 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let tr = Transcription::new(&prob, &cfg);
        assert_eq!(tr.n_vars(), 50);

        let z = tr.z_nominal();
        let sig = tr.signal_from(&z);
        assert_eq!(sig.value_at(3.0), p.u_nom());
        let back = tr.z_from_signal(&sig);
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nominal_from_equilibrium_is_cost_free_and_feasible() {
        let p = p();
        let prob = OcpProblem::new(State::equilibrium(0.2).unwrap(), 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let tr = Transcription::new(&prob, &cfg);
        let eval = tr.evaluate(&tr.z_nominal()).unwrap();
        assert_eq!(eval.objective, 0.0);
        assert!(eval.constraints.iter().all(|c| *c <= 0.0));

        let sol = solve_ocp(&prob, None, &cfg).unwrap();
        assert!(sol.feasible);
        assert!(sol.value <= 1e-12);
        assert_eq!(sol.control.value_at(5.0), p.u_nom());
    }

    #[test]
    fn nominal_candidate_breaches_cap_from_scenario_start() {
        // forward-simulation oracle: the uncontrolled outbreak from the
        // case-study start pushes I well past the cap
        let p = p();
        let prob = OcpProblem::new(State::from_sei(0.5, 0.18, 0.01).unwrap(), 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let tr = Transcription::new(&prob, &cfg);
        let eval = tr.evaluate(&tr.z_nominal()).unwrap();
        let worst = eval.constraints.iter().fold(f64::NEG_INFINITY, |m, c| m.max(*c));
        assert!(worst > 0.05, "worst constraint = {worst}");
        assert!(eval.max_i > 2.0 * p.i_max);
    }

    #[test]
    fn infeasible_cap_at_t0_short_circuits() {
        let p = p();
        let prob =
            OcpProblem::new(State::from_sei(0.4, 0.05, 0.08).unwrap(), 25.0, 25, p).unwrap();
        let sol = solve_ocp(&prob, None, &quick_cfg()).unwrap();
        assert!(!sol.feasible);
        assert_eq!(sol.value, f64::INFINITY);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn value_function_markers() {
        let p = p();
        let cfg = quick_cfg();
        let v = value_function(&State::equilibrium(0.9).unwrap(), 25.0, &p, &cfg).unwrap();
        assert!(matches!(v, Value::Finite(c) if c <= 1e-12));
        let w = value_function(&State::from_sei(0.4, 0.05, 0.08).unwrap(), 25.0, &p, &cfg).unwrap();
        assert_eq!(w, Value::Infeasible);
        assert!(w.as_f64().is_infinite());
    }

    #[test]
    fn solver_solves_scenario_start() {
        let p = p();
        let prob = OcpProblem::new(State::from_sei(0.5, 0.18, 0.01).unwrap(), 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let sol = solve_ocp(&prob, None, &cfg).unwrap();
        assert!(sol.feasible, "max violation {}", sol.max_violation);
        assert!(sol.predicted.max_infectious() <= p.i_max + 1e-4);
        assert!(region_contains(RegionKind::TerminalSet, sol.predicted.final_state(), &p)
            || sol.max_violation <= prob.constraint_tol);
    }

    #[test]
    fn solver_never_worsens_a_feasible_candidate() {
        let p = p();
        // start inside the terminal set: u_nom is feasible
        let x0 = State::from_sei(0.3, 0.02, 0.02).unwrap();
        let prob = OcpProblem::new(x0, 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let tr = Transcription::new(&prob, &cfg);
        let candidate = ControlSignal::constant(p.u_nom());
        let cand_value = tr.evaluate(&tr.z_from_signal(&candidate)).unwrap().objective;
        let sol = solve_ocp(&prob, Some(&candidate), &cfg).unwrap();
        assert!(sol.feasible);
        assert!(sol.value <= cand_value + 1e-6, "{} vs {cand_value}", sol.value);
    }

    #[test]
    fn feasible_solution_survives_fine_resimulation() {
        let p = p();
        let prob = OcpProblem::new(State::from_sei(0.5, 0.18, 0.01).unwrap(), 25.0, 25, p).unwrap();
        let cfg = quick_cfg();
        let sol = solve_ocp(&prob, None, &cfg).unwrap();
        assert!(sol.feasible);
        let fine = simulate(&prob.x0, &sol.control, prob.horizon_t, cfg.h / 4.0, &p).unwrap();
        assert!(fine.max_infectious() <= p.i_max + prob.constraint_tol + 1e-6);
        let xt = fine.final_state();
        let e_cap = p.gamma_nom / p.eta * p.i_max;
        assert!(xt.s <= herd_immunity_threshold(&p) + prob.constraint_tol + 1e-6);
        assert!(xt.e <= e_cap + prob.constraint_tol + 1e-6);
    }

    #[test]
    fn schedule_csv_format() {
        let p = p();
        let prob = OcpProblem::new(State::equilibrium(0.2).unwrap(), 2.0, 2, p).unwrap();
        let cfg = quick_cfg();
        let sol = solve_ocp(&prob, None, &cfg).unwrap();
        let mut buf = Vec::new();
        write_schedule_csv(&mut buf, &sol).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,t_start,beta,gamma\n0,"));
        assert_eq!(text.lines().count(), 3);
    }
}
