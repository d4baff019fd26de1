//! Fixed-step RK4 integration of the controlled SEIR system under
//! piecewise-constant controls, plus the integral functionals used by costs
//! and the conservation identities.
//!
//! Stepping is breakpoint-aligned: the step size is refined per control
//! interval so a control discontinuity never falls inside a step.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{stage_cost, ControlValue, Params, State};

/// Default integration step in days.
pub const DEFAULT_H: f64 = 0.05;

/// Infinite-horizon integrals are truncated once E + I falls below this.
pub const TRUNC_TOL: f64 = 1e-12;

/// Hard cap on "infinite horizon" integration, days.
pub const T_INF_CAP: f64 = 2.0e4;

/// Piecewise-constant (beta, gamma) schedule on a time grid.
///
/// `values[k]` applies on `[grid[k], grid[k+1])`; `tail` applies for all
/// `t >= grid.last()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    grid: Vec<f64>,
    values: Vec<ControlValue>,
    tail: ControlValue,
}

impl ControlSignal {
    pub fn new(grid: Vec<f64>, values: Vec<ControlValue>, tail: ControlValue, p: &Params) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidSignal("empty time grid".into()));
        }
        if grid[0] != 0.0 {
            return Err(Error::InvalidSignal(format!(
                "grid must start at 0, got {}",
                grid[0]
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSignal("grid not strictly increasing".into()));
        }
        if values.len() + 1 != grid.len() {
            return Err(Error::InvalidSignal(format!(
                "{} grid points require {} interval values, got {}",
                grid.len(),
                grid.len() - 1,
                values.len()
            )));
        }
        for v in values.iter().chain(std::iter::once(&tail)) {
            if !v.is_feasible(p) {
                return Err(Error::InvalidControl(format!(
                    "control ({}, {}) outside bounds",
                    v.beta, v.gamma
                )));
            }
        }
        Ok(ControlSignal { grid, values, tail })
    }

    /// Signal that holds `u` for all time.
    pub fn constant(u: ControlValue) -> Self {
        ControlSignal {
            grid: vec![0.0],
            values: Vec::new(),
            tail: u,
        }
    }

    /// Uniform grid with period `dt` and one value per interval; the last
    /// value is reused as the tail.
    pub fn sampled(dt: f64, values: Vec<ControlValue>, p: &Params) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidSignal("no control values".into()));
        }
        let grid = (0..values.len()).map(|k| k as f64 * dt).collect();
        let tail = *values.last().unwrap();
        let body = values[..values.len() - 1].to_vec();
        ControlSignal::new(grid, body, tail, p)
    }

    pub fn value_at(&self, t: f64) -> ControlValue {
        match self.grid.partition_point(|&g| g <= t) {
            0 => self.values.first().copied().unwrap_or(self.tail), // t < 0: clamp
            k if k >= self.grid.len() => self.tail,
            k => self.values[k - 1],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn tail(&self) -> ControlValue {
        self.tail
    }

    /// Breakpoints strictly inside `(0, t_end)`.
    pub fn breakpoints_within(&self, t_end: f64) -> Vec<f64> {
        self.grid
            .iter()
            .copied()
            .filter(|&g| g > 0.0 && g < t_end)
            .collect()
    }
}

/// Time-stamped states with applied controls and cumulative stage cost.
///
/// `controls[k]` is the input applied on `[times[k], times[k+1])`; the last
/// entry repeats the input active at the final instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<ControlValue>,
    pub running_cost: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory never empty")
    }

    pub fn total_cost(&self) -> f64 {
        *self.running_cost.last().expect("trajectory never empty")
    }

    pub fn max_infectious(&self) -> f64 {
        self.states.iter().map(|x| x.i).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn rk4_raw(x: [f64; 4], u: &ControlValue, h: f64, p: &Params) -> [f64; 4] {
    let f = |y: [f64; 4]| -> [f64; 4] {
        let inf = u.beta * y[0] * y[2];
        let inc = p.eta * y[1];
        let rem = u.gamma * y[2];
        [-inf, inf - inc, inc - rem, rem]
    };
    let add = |a: [f64; 4], b: [f64; 4], c: f64| {
        [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]]
    };
    let k1 = f(x);
    let k2 = f(add(x, k1, h / 2.0));
    let k3 = f(add(x, k2, h / 2.0));
    let k4 = f(add(x, k3, h));
    let mut out = x;
    for j in 0..4 {
        out[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    out
}

const BLOWUP_TOL: f64 = 1e-9;

fn finish_step(raw: [f64; 4], t: f64) -> Result<State> {
    let names = ["S", "E", "I", "R"];
    let mut y = raw;
    for j in 0..4 {
        if !(-BLOWUP_TOL..=1.0 + BLOWUP_TOL).contains(&y[j]) || !y[j].is_finite() {
            return Err(Error::IntegrationBlowup {
                t,
                component: names[j],
                value: y[j],
            });
        }
        y[j] = y[j].clamp(0.0, 1.0);
    }
    // restore conservation exactly
    let r = (1.0 - y[0] - y[1] - y[2]).clamp(0.0, 1.0);
    Ok(State {
        s: y[0],
        e: y[1],
        i: y[2],
        r,
    })
}

/// One classical RK4 step of the SEIR field. The result is clamped to the
/// simplex and `R` is renormalized to restore `S + E + I + R = 1`.
pub fn step_rk4(x: &State, u: &ControlValue, h: f64, p: &Params) -> Result<State> {
    debug_assert!(h > 0.0);
    finish_step(rk4_raw([x.s, x.e, x.i, x.r], u, h, p), h)
}

/// Simulates `x0` under `sig` over `[0, t_end]`, sampling at multiples of `h`
/// refined so every control breakpoint is a sample instant. The running cost
/// is the composite-trapezoid integral of the stage cost.
pub fn simulate(
    x0: &State,
    sig: &ControlSignal,
    t_end: f64,
    h: f64,
    p: &Params,
) -> Result<Trajectory> {
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step size h = {h} must be positive")));
    }
    if t_end < 0.0 {
        return Err(Error::Precondition(format!("t_end = {t_end} must be nonnegative")));
    }
    let mut edges = vec![0.0];
    edges.extend(sig.breakpoints_within(t_end));
    if t_end > 0.0 {
        edges.push(t_end);
    }

    let mut times = vec![0.0];
    let mut states = vec![*x0];
    let mut controls = vec![sig.value_at(0.0)];
    let mut running_cost = vec![0.0];

    let mut x = *x0;
    let mut cost = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let u = sig.value_at(a);
        let n = (((b - a) / h) - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n as f64;
        for k in 0..n {
            let t_next = a + (k + 1) as f64 * dt;
            let l0 = stage_cost(&x, &u, p);
            let next = match step_rk4(&x, &u, dt, p) {
                Ok(s) => s,
                Err(Error::IntegrationBlowup { component, value, .. }) => {
                    return Err(Error::IntegrationBlowup {
                        t: t_next,
                        component,
                        value,
                    })
                }
                Err(e) => return Err(e),
            };
            let l1 = stage_cost(&next, &u, p);
            cost += dt / 2.0 * (l0 + l1);
            x = next;
            times.push(t_next);
            states.push(x);
            controls.push(u);
            running_cost.push(cost);
        }
    }
    // last control entry reflects the input active at the final instant
    if let Some(last) = controls.last_mut() {
        *last = sig.value_at(t_end);
    }
    Ok(Trajectory {
        times,
        states,
        controls,
        running_cost,
    })
}

/// Outcome of a lean peak-tracking run (no trajectory storage).
#[derive(Debug, Clone, Copy)]
pub struct PeakInfo {
    pub max_i: f64,
    pub t_of_max: f64,
    /// First time `I` exceeded the early-stop cap, if one was given.
    pub breached_at: Option<f64>,
    /// Time the run stopped (horizon, die-out, or breach).
    pub stopped_at: f64,
}

/// Tracks the peak of `I` along the trajectory without storing it.
///
/// Stops early once `I > cap` (when `stop_above` is set) or once
/// `E + I < die_out_floor` (the peak cannot move afterwards).
pub fn peak_infection(
    x0: &State,
    sig: &ControlSignal,
    t_end: f64,
    h: f64,
    p: &Params,
    stop_above: Option<f64>,
    die_out_floor: f64,
) -> Result<PeakInfo> {
    let mut edges = vec![0.0];
    edges.extend(sig.breakpoints_within(t_end));
    if t_end > 0.0 {
        edges.push(t_end);
    }
    let mut x = *x0;
    let mut info = PeakInfo {
        max_i: x.i,
        t_of_max: 0.0,
        breached_at: None,
        stopped_at: t_end,
    };
    if let Some(cap) = stop_above {
        if x.i > cap {
            info.breached_at = Some(0.0);
            info.stopped_at = 0.0;
            return Ok(info);
        }
    }
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let u = sig.value_at(a);
        let n = (((b - a) / h) - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n as f64;
        for k in 0..n {
            let t = a + (k + 1) as f64 * dt;
            x = step_rk4(&x, &u, dt, p)?;
            if x.i > info.max_i {
                info.max_i = x.i;
                info.t_of_max = t;
            }
            if let Some(cap) = stop_above {
                if x.i > cap {
                    info.breached_at = Some(t);
                    info.stopped_at = t;
                    return Ok(info);
                }
            }
            if x.infected() < die_out_floor {
                info.stopped_at = t;
                return Ok(info);
            }
        }
    }
    Ok(info)
}

/// Trapezoid integrals of E, I, E^2, I^2 and beta S I over `[0, t_end]`.
#[derive(Debug, Clone, Copy)]
pub struct IntegralFunctionals {
    pub int_e: f64,
    pub int_i: f64,
    pub int_e2: f64,
    pub int_i2: f64,
    pub int_beta_si: f64,
    pub s_final: f64,
    pub r_final: f64,
    /// Time integration actually stopped (die-out truncation or `t_end`).
    pub truncated_at: f64,
    /// True when the horizon was exhausted with E + I still above the
    /// truncation floor.
    pub horizon_capped: bool,
}

/// Accumulates the integral functionals along the trajectory, truncating once
/// `E + I <` [`TRUNC_TOL`] or at `t_end`, whichever comes first.
pub fn integral_functionals(
    x0: &State,
    sig: &ControlSignal,
    t_end: f64,
    h: f64,
    p: &Params,
) -> Result<IntegralFunctionals> {
    let mut edges = vec![0.0];
    edges.extend(sig.breakpoints_within(t_end));
    if t_end > 0.0 {
        edges.push(t_end);
    }
    let mut x = *x0;
    let mut acc = IntegralFunctionals {
        int_e: 0.0,
        int_i: 0.0,
        int_e2: 0.0,
        int_i2: 0.0,
        int_beta_si: 0.0,
        s_final: x.s,
        r_final: x.r,
        truncated_at: 0.0,
        horizon_capped: false,
    };
    // a start seeded below the nominal floor (for example machine-epsilon
    // initial infections) must still integrate through its outbreak, so the
    // die-out floor never exceeds half the initial infected mass
    let floor = TRUNC_TOL.min(x.infected() / 2.0);
    let mut done = x.infected() <= floor;
    for w in edges.windows(2) {
        if done {
            break;
        }
        let (a, b) = (w[0], w[1]);
        let u = sig.value_at(a);
        let n = (((b - a) / h) - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n as f64;
        for k in 0..n {
            let prev = x;
            x = step_rk4(&x, &u, dt, p)?;
            acc.int_e += dt / 2.0 * (prev.e + x.e);
            acc.int_i += dt / 2.0 * (prev.i + x.i);
            acc.int_e2 += dt / 2.0 * (prev.e * prev.e + x.e * x.e);
            acc.int_i2 += dt / 2.0 * (prev.i * prev.i + x.i * x.i);
            acc.int_beta_si += dt / 2.0 * u.beta * (prev.s * prev.i + x.s * x.i);
            acc.truncated_at = a + (k + 1) as f64 * dt;
            if x.infected() <= floor {
                done = true;
                break;
            }
        }
    }
    acc.s_final = x.s;
    acc.r_final = x.r;
    acc.horizon_capped = !done && t_end > 0.0;
    if t_end == 0.0 {
        acc.horizon_capped = false;
    }
    Ok(acc)
}

/// Writes a trajectory as CSV with full double precision.
///
/// Header: `t,S,E,I,R,beta,gamma,stage_cost,running_cost`.
pub fn write_trajectory_csv<W: Write>(out: &mut W, traj: &Trajectory, p: &Params) -> Result<()> {
    writeln!(out, "t,S,E,I,R,beta,gamma,stage_cost,running_cost")?;
    for k in 0..traj.times.len() {
        let x = &traj.states[k];
        let u = &traj.controls[k];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt(traj.times[k]),
            fmt(x.s),
            fmt(x.e),
            fmt(x.i),
            fmt(x.r),
            fmt(u.beta),
            fmt(u.gamma),
            fmt(stage_cost(x, u, p)),
            fmt(traj.running_cost[k]),
        )?;
    }
    Ok(())
}

/// 17 significant digits, enough to round-trip an f64.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::herd_immunity_threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> Params {
        Params::case_study()
    }

    fn scenario_x0() -> State {
        State::new(0.50, 0.18, 0.01, 0.31).unwrap()
    }

    pub(crate) fn random_bang_bang(rng: &mut ChaCha8Rng, period: f64, t_end: f64, p: &Params) -> ControlSignal {
        let n = (t_end / period).ceil() as usize;
        let values = (0..n.max(1))
            .map(|_| ControlValue {
                beta: if rng.gen_bool(0.5) { p.beta_nom } else { p.beta_min },
                gamma: if rng.gen_bool(0.5) { p.gamma_nom } else { p.gamma_max },
            })
            .collect();
        ControlSignal::sampled(period, values, p).unwrap()
    }

    #[test]
    fn signal_lookup_is_right_continuous() {
        let p = p();
        let sig = ControlSignal::sampled(
            1.0,
            vec![p.u_nom(), p.u_cautious(), p.u_nom()],
            &p,
        )
        .unwrap();
        assert_eq!(sig.value_at(0.0), p.u_nom());
        assert_eq!(sig.value_at(0.99), p.u_nom());
        assert_eq!(sig.value_at(1.0), p.u_cautious());
        assert_eq!(sig.value_at(2.0), p.u_nom());
        assert_eq!(sig.value_at(55.0), p.u_nom());
    }

    #[test]
    fn signal_rejects_bad_grids() {
        let p = p();
        assert!(ControlSignal::new(vec![], vec![], p.u_nom(), &p).is_err());
        assert!(ControlSignal::new(vec![1.0], vec![], p.u_nom(), &p).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0, 1.0], vec![p.u_nom(), p.u_nom()], p.u_nom(), &p).is_err());
        let out_of_bounds = ControlValue { beta: 0.9, gamma: 0.1 };
        assert!(ControlSignal::new(vec![0.0], vec![], out_of_bounds, &p).is_err());
    }

    #[test]
    fn equilibrium_is_exact_fixed_point() {
        let p = p();
        let x = State::equilibrium(0.9).unwrap();
        let next = step_rk4(&x, &p.u_cautious(), 1.7, &p).unwrap();
        assert_eq!(next, x);
        let traj = simulate(&x, &ControlSignal::constant(p.u_nom()), 100.0, 0.5, &p).unwrap();
        assert!(traj.states.iter().all(|s| *s == x));
        assert_eq!(traj.total_cost(), 0.0);
    }

    #[test]
    fn step_matches_two_half_steps() {
        let p = p();
        let x = scenario_x0();
        let full = step_rk4(&x, &p.u_nom(), 0.01, &p).unwrap();
        let half = step_rk4(&x, &p.u_nom(), 0.005, &p).unwrap();
        let half2 = step_rk4(&half, &p.u_nom(), 0.005, &p).unwrap();
        for (a, b) in [
            (full.s, half2.s),
            (full.e, half2.e),
            (full.i, half2.i),
            (full.r, half2.r),
        ] {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn rk4_self_convergence_order_is_four() {
        let p = p();
        let x0 = scenario_x0();
        let sig = ControlSignal::constant(p.u_nom());
        let err = |h: f64| -> f64 {
            let coarse = simulate(&x0, &sig, 50.0, h, &p).unwrap();
            let fine = simulate(&x0, &sig, 50.0, h / 64.0, &p).unwrap();
            let a = coarse.final_state();
            let b = fine.final_state();
            (a.s - b.s)
                .abs()
                .max((a.e - b.e).abs())
                .max((a.i - b.i).abs())
        };
        let (e1, e2) = (err(0.8), err(0.4));
        let order = (e1 / e2).log2();
        assert!(
            (3.7..=4.3).contains(&order),
            "observed order {order} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn scenario_run_is_conservative_and_monotone() {
        let p = p();
        let traj = simulate(
            &scenario_x0(),
            &ControlSignal::constant(p.u_nom()),
            200.0,
            0.05,
            &p,
        )
        .unwrap();
        for w in traj.states.windows(2) {
            assert!(w[1].s <= w[0].s + 1e-12);
            assert!(w[1].r >= w[0].r - 1e-12);
            let mass = w[1].s + w[1].e + w[1].i + w[1].r;
            assert!((mass - 1.0).abs() <= 1e-9);
        }
        // S strictly decreasing while I > 0
        for (w, x) in traj.states.windows(2).zip(&traj.states) {
            if x.i > 1e-12 {
                assert!(w[1].s < w[0].s);
            }
        }
        for w in traj.running_cost.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn below_threshold_infected_monotonically_decays() {
        let p = p();
        let s0 = herd_immunity_threshold(&p) - 0.02;
        let x0 = State::from_sei(s0, 0.02, 0.02).unwrap();
        let traj = simulate(&x0, &ControlSignal::constant(p.u_nom()), 300.0, 0.05, &p).unwrap();
        for w in traj.states.windows(2) {
            if w[0].i > 1e-12 {
                assert!(w[1].infected() < w[0].infected());
            }
        }
    }

    #[test]
    fn mass_conserved_under_random_bang_bang() {
        let p = p();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s: f64 = rng.gen_range(0.0..1.0);
            let e: f64 = rng.gen_range(0.0..(1.0 - s));
            let i: f64 = rng.gen_range(0.0..(1.0 - s - e));
            let x0 = State::from_sei(s, e, i).unwrap();
            let sig = random_bang_bang(&mut rng, 2.0, 500.0, &p);
            let traj = simulate(&x0, &sig, 500.0, 0.1, &p).unwrap();
            for x in &traj.states {
                assert!((x.s + x.e + x.i + x.r - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn asymptotic_die_out_from_random_starts() {
        let p = p();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s: f64 = rng.gen_range(0.0..1.0);
            let e: f64 = rng.gen_range(0.0..(1.0 - s));
            let i: f64 = rng.gen_range(0.0..(1.0 - s - e));
            let x0 = State::from_sei(s, e, i).unwrap();
            let beta = rng.gen_range(p.beta_min..=p.beta_nom);
            let gamma = rng.gen_range(p.gamma_nom..=p.gamma_max);
            let sig = ControlSignal::constant(ControlValue { beta, gamma });
            let info = peak_infection(&x0, &sig, 1.0e4, 0.1, &p, None, 1e-7).unwrap();
            assert!(
                info.stopped_at < 1.0e4,
                "E+I failed to fall below 1e-7 within 1e4 days"
            );
        }
    }

    #[test]
    fn integral_functionals_zero_at_equilibrium() {
        let p = p();
        let x0 = State::equilibrium(0.9).unwrap();
        let f = integral_functionals(&x0, &ControlSignal::constant(p.u_nom()), 100.0, 0.05, &p)
            .unwrap();
        assert_eq!(f.int_e, 0.0);
        assert_eq!(f.int_i, 0.0);
        assert_eq!(f.int_beta_si, 0.0);
        assert_eq!(f.truncated_at, 0.0);
    }

    #[test]
    fn conservation_integral_identities_under_nominal_input() {
        let p = p();
        let x0 = State::from_sei(0.4, 0.01, 0.01).unwrap();
        let f = integral_functionals(
            &x0,
            &ControlSignal::constant(p.u_nom()),
            T_INF_CAP,
            0.05,
            &p,
        )
        .unwrap();
        assert!(!f.horizon_capped);
        // int beta S I = S0 - S_inf
        assert!((f.int_beta_si - (x0.s - f.s_final)).abs() <= 1e-6);
        // int I = (1 - R0 - S_inf) / gamma_nom
        let expected = (1.0 - x0.r - f.s_final) / p.gamma_nom;
        assert!((f.int_i - expected).abs() <= 1e-6);
    }

    #[test]
    fn blowup_is_reported_not_propagated_as_nan() {
        let p = p();
        // absurd step size forces the RK4 update far outside the simplex
        let x = scenario_x0();
        let err = step_rk4(&x, &p.u_nom(), 1.0e3, &p);
        assert!(matches!(err, Err(Error::IntegrationBlowup { .. })));
    }

    #[test]
    fn csv_writer_format() {
        let p = p();
        let traj = simulate(
            &scenario_x0(),
            &ControlSignal::constant(p.u_nom()),
            1.0,
            0.5,
            &p,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, &p).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,S,E,I,R,beta,gamma,stage_cost,running_cost"
        );
        let first = lines.next().unwrap();
        assert_eq!(first.split(',').count(), 9);
        assert!(first.starts_with("0.0000000000000000e0,5.0000000000000000e-1,"));
    }
}
