//! Terminal set, membership oracles for the admissible set and the MRPI, and
//! boundary point clouds computed by backward extremal integration.
//!
//! The admissible set collects states from which *some* feasible control
//! keeps the infection cap forever; the MRPI collects states from which
//! *every* feasible control does. Both are approximated two ways that
//! cross-check each other: simulation-based membership oracles, and barrier
//! curves (state plus adjoint integrated backward from ultimate-tangentiality
//! points on `I = I_max`, with the input extremizing the Hamiltonian pointwise
//! over the vertices of the control box).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::integrate::{fmt, ControlSignal};
use crate::model::{herd_immunity_threshold, ControlValue, Params, State};
use crate::par;

/// Named state regions used as predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    /// Simplex `S, E, I >= 0`, `S + E + I <= 1`.
    Pi,
    /// Infection cap `I <= I_max`.
    G,
    /// Intersection of the two.
    GPi,
    /// MPC terminal set: box `S <= S_bar`, `I <= I_max`,
    /// `E <= (gamma_nom / eta) I_max` inside Pi, united with the equilibria.
    TerminalSet,
    /// Disease-free equilibria `E = I = 0`.
    EquilibriaSet,
}

/// Which of the two invariant sets a boundary object belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    Admissible,
    Mrpi,
}

impl BoundaryKind {
    pub fn label(&self) -> &'static str {
        match self {
            BoundaryKind::Admissible => "admissible",
            BoundaryKind::Mrpi => "mrpi",
        }
    }
}

/// The equilibria set is measure-zero; membership uses this tolerance.
pub const EQUILIBRIA_TOL: f64 = 1e-12;

/// Exact predicate evaluation for the named regions.
pub fn region_contains(kind: RegionKind, x: &State, p: &Params) -> bool {
    let in_pi = x.s >= 0.0 && x.e >= 0.0 && x.i >= 0.0 && x.s + x.e + x.i <= 1.0;
    match kind {
        RegionKind::Pi => in_pi,
        RegionKind::G => x.i <= p.i_max,
        RegionKind::GPi => in_pi && x.i <= p.i_max,
        RegionKind::EquilibriaSet => in_pi && x.e <= EQUILIBRIA_TOL && x.i <= EQUILIBRIA_TOL,
        RegionKind::TerminalSet => {
            let s_bar = herd_immunity_threshold(p);
            let e_cap = p.gamma_nom / p.eta * p.i_max;
            let in_box = in_pi && x.s <= s_bar && x.i <= p.i_max && x.e <= e_cap;
            in_box || (in_pi && x.e <= EQUILIBRIA_TOL && x.i <= EQUILIBRIA_TOL)
        }
    }
}

/// Options for the simulation-based membership oracles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MembershipOpts {
    /// Slack on the infection cap.
    pub tol: f64,
    /// Simulation horizon per adversary, days.
    pub horizon_days: f64,
    /// Integration step.
    pub h: f64,
    /// Random bang-bang adversaries tried on top of the nominal input
    /// (MRPI oracle only).
    pub n_samples: usize,
    /// Switch period of the bang-bang adversaries, days.
    pub switch_period: f64,
    /// Root seed; per-adversary RNG streams are derived from it.
    pub seed: u64,
}

impl Default for MembershipOpts {
    fn default() -> Self {
        MembershipOpts {
            tol: 1e-6,
            horizon_days: 600.0,
            h: 0.05,
            n_samples: 64,
            switch_period: 2.0,
            seed: 0,
        }
    }
}

/// Oracle verdict with the worst peak observed as a certificate.
#[derive(Debug, Clone, Copy)]
pub struct MembershipVerdict {
    pub inside: bool,
    /// Worst observed `max_t I(t)` over the control family tried.
    pub certificate: f64,
}

/// Random bang-bang signal on the vertices of the control box.
pub fn bang_bang_signal(rng: &mut ChaCha8Rng, period: f64, t_end: f64, p: &Params) -> ControlSignal {
    let n = ((t_end / period).ceil() as usize).max(1);
    let values = (0..n)
        .map(|_| ControlValue {
            beta: if rng.gen_bool(0.5) { p.beta_nom } else { p.beta_min },
            gamma: if rng.gen_bool(0.5) { p.gamma_nom } else { p.gamma_max },
        })
        .collect();
    ControlSignal::sampled(period, values, p).expect("vertex controls are feasible")
}

/// Peak of `I` under one signal, with early exit on breach and on safe
/// die-out. Die-out is only safe once `S` is below the signal family's
/// regrowth threshold `s_safe`: a tiny infected mass can still seed a large
/// outbreak while enough susceptibles remain.
fn sup_i_run(
    x0: &State,
    sig: &ControlSignal,
    p: &Params,
    opts: &MembershipOpts,
    s_safe: f64,
) -> Result<f64> {
    let cap = p.i_max + opts.tol;
    let mut x = *x0;
    let mut max_i = x.i;
    if max_i > cap {
        return Ok(max_i);
    }
    let mut edges = vec![0.0];
    edges.extend(sig.breakpoints_within(opts.horizon_days));
    edges.push(opts.horizon_days);
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let u = sig.value_at(a);
        let n = (((b - a) / opts.h) - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n as f64;
        for _ in 0..n {
            x = crate::integrate::step_rk4(&x, &u, dt, p)?;
            if x.i > max_i {
                max_i = x.i;
                if max_i > cap {
                    return Ok(max_i);
                }
            }
            if x.infected() < 1e-10 && x.s < s_safe {
                return Ok(max_i);
            }
        }
    }
    Ok(max_i)
}

/// MRPI oracle: `x0` is kept below the cap by the nominal input and by
/// `opts.n_samples` random bang-bang adversaries. The nominal input maximizes
/// beta and minimizes gamma pointwise and is the natural worst-case
/// candidate; the random layer exists to falsify that assumption.
pub fn mrpi_membership(x0: &State, p: &Params, opts: &MembershipOpts) -> Result<MembershipVerdict> {
    if !region_contains(RegionKind::GPi, x0, p) {
        return Err(Error::Domain(format!(
            "MRPI oracle requires x0 in G_Pi, got (S, E, I) = ({}, {}, {})",
            x0.s, x0.e, x0.i
        )));
    }
    let s_safe = herd_immunity_threshold(p) * 0.999;
    let nominal = sup_i_run(x0, &ControlSignal::constant(p.u_nom()), p, opts, s_safe)?;
    let cap = p.i_max + opts.tol;
    if nominal > cap {
        return Ok(MembershipVerdict {
            inside: false,
            certificate: nominal,
        });
    }
    let peaks = par::map_range(opts.n_samples, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64 + 1);
        let sig = bang_bang_signal(&mut rng, opts.switch_period, opts.horizon_days, p);
        sup_i_run(x0, &sig, p, opts, s_safe)
    });
    let mut worst = nominal;
    for peak in peaks {
        worst = worst.max(peak?);
    }
    Ok(MembershipVerdict {
        inside: worst <= cap,
        certificate: worst,
    })
}

/// Admissible-set oracle: the single cautious input `(beta_min, gamma_max)`
/// pointwise minimizes the growth of E and I, so a capped cautious run is a
/// sufficient certificate of admissibility.
pub fn admissible_membership(
    x0: &State,
    p: &Params,
    opts: &MembershipOpts,
) -> Result<MembershipVerdict> {
    if !region_contains(RegionKind::Pi, x0, p) {
        return Err(Error::Domain(format!(
            "admissible oracle requires x0 in Pi, got (S, E, I) = ({}, {}, {})",
            x0.s, x0.e, x0.i
        )));
    }
    let cautious = p.u_cautious();
    // regrowth threshold of the cautious input
    let s_safe = (cautious.gamma / cautious.beta).min(1.0) * 0.999;
    let peak = sup_i_run(x0, &ControlSignal::constant(cautious), p, opts, s_safe)?;
    Ok(MembershipVerdict {
        inside: peak <= p.i_max + opts.tol,
        certificate: peak,
    })
}

/// Ultimate-tangentiality data on the plane `I = I_max`.
#[derive(Debug, Clone, Copy)]
pub struct TangencyInfo {
    /// A representative tangency point (midpoint of the valid S-range).
    pub point: State,
    /// Exposed fraction at tangency, `E* = gamma_ext * I_max / eta`.
    pub e_star: f64,
    /// S-range of valid barrier starts on `I = I_max`.
    pub s_range: (f64, f64),
}

/// Extremal input at a tangency start of the given boundary.
fn extremal_start_input(kind: BoundaryKind, p: &Params) -> ControlValue {
    match kind {
        // worst case: maximal contact, minimal removal
        BoundaryKind::Mrpi => p.u_nom(),
        // best case: the cautious input
        BoundaryKind::Admissible => p.u_cautious(),
    }
}

/// Point on `I = I_max` where the extremal field is tangent to the cap
/// (`dI/dt = 0`), i.e. `E* = gamma_ext I_max / eta`.
pub fn tangency_points(kind: BoundaryKind, p: &Params) -> Result<TangencyInfo> {
    let u = extremal_start_input(kind, p);
    let e_star = u.gamma * p.i_max / p.eta;
    if e_star > 1.0 - p.i_max {
        return Err(Error::DegenerateGeometry(format!(
            "tangency E* = {e_star} exceeds 1 - I_max = {}; no tangency point inside Pi",
            1.0 - p.i_max
        )));
    }
    // Valid starts need room inside Pi and a genuine local maximum of I,
    // which requires S below the extremal threshold gamma/beta.
    let s_cap = (u.gamma / u.beta).min(1.0 - e_star - p.i_max);
    let s_range = (0.05 * s_cap, 0.999 * s_cap);
    let s_mid = 0.5 * (s_range.0 + s_range.1);
    Ok(TangencyInfo {
        point: State::from_sei(s_mid, e_star, p.i_max)?,
        e_star,
        s_range,
    })
}

/// One point of a boundary curve: state, adjoint, elapsed backward time.
#[derive(Debug, Clone, Copy)]
pub struct BarrierState {
    pub x: State,
    pub lambda: [f64; 3],
    pub t_back: f64,
}

impl BarrierState {
    /// Start on `I = I_max` with the terminal adjoint `grad g = (0, 0, 1)`.
    pub fn start(x: State) -> Self {
        BarrierState {
            x,
            lambda: [0.0, 0.0, 1.0],
            t_back: 0.0,
        }
    }
}

/// Options for backward barrier integration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BarrierOpts {
    /// Backward integration step, days.
    pub h: f64,
    /// Stop once `I` falls below this.
    pub i_floor: f64,
    /// Stop after this much backward time.
    pub t_max: f64,
    /// Emit every n-th step into the point cloud.
    pub emit_every: usize,
}

impl Default for BarrierOpts {
    fn default() -> Self {
        BarrierOpts {
            h: 0.01,
            i_floor: 1e-8,
            t_max: 400.0,
            emit_every: 10,
        }
    }
}

/// Adjoint magnitude beyond which the curve is truncated and flagged.
const LAMBDA_CAP: f64 = 1e12;

/// Switching-function tie tolerance; within it the previous input is held.
const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub curve_id: usize,
}

/// Why a curve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveStop {
    LeftPi,
    IFloor,
    TimeCap,
    /// Adjoint blow-up; the curve was truncated and should be treated
    /// as unreliable past its last point.
    AdjointBlowup,
}

#[derive(Debug, Clone)]
pub struct BarrierCurve {
    pub kind: BoundaryKind,
    pub curve_id: usize,
    pub points: Vec<BarrierState>,
    pub stop: CurveStop,
}

/// Boundary point cloud: union of barrier curves.
#[derive(Debug, Clone)]
pub struct BoundaryPointCloud {
    pub kind: BoundaryKind,
    pub points: Vec<BoundaryPoint>,
    pub stops: Vec<CurveStop>,
}

fn switching_input(
    kind: BoundaryKind,
    x: &[f64; 3],
    lambda: &[f64; 3],
    held: &mut ControlValue,
    p: &Params,
) -> ControlValue {
    let sigma_beta = x[0] * x[2] * (lambda[1] - lambda[0]);
    let sigma_gamma = -x[2] * lambda[2];
    // H = beta S I (l2 - l1) - gamma I l3 + terms independent of u
    let maximize = matches!(kind, BoundaryKind::Mrpi);
    let pick = |sigma: f64, lo: f64, hi: f64, held: f64| -> f64 {
        if sigma.abs() <= SINGULAR_TOL {
            held
        } else if (sigma > 0.0) == maximize {
            hi
        } else {
            lo
        }
    };
    let beta = pick(sigma_beta, p.beta_min, p.beta_nom, held.beta);
    let gamma = pick(sigma_gamma, p.gamma_nom, p.gamma_max, held.gamma);
    *held = ControlValue { beta, gamma };
    *held
}

/// One RK4 step of the backward augmented system
/// `dx/dtau = -f(x, u)`, `dlambda/dtau = J(x, u)^T lambda`.
fn barrier_step(z: [f64; 6], u: &ControlValue, h: f64, p: &Params) -> [f64; 6] {
    let rhs = |z: [f64; 6]| -> [f64; 6] {
        let (s, e, i) = (z[0], z[1], z[2]);
        let (l1, l2, l3) = (z[3], z[4], z[5]);
        let inf = u.beta * s * i;
        // forward field
        let f = [-inf, inf - p.eta * e, p.eta * e - u.gamma * i];
        // J^T lambda with J the forward Jacobian
        let jt = [
            -u.beta * i * l1 + u.beta * i * l2,
            -p.eta * l2 + p.eta * l3,
            -u.beta * s * l1 + u.beta * s * l2 - u.gamma * l3,
        ];
        [-f[0], -f[1], -f[2], jt[0], jt[1], jt[2]]
    };
    let add = |a: [f64; 6], b: [f64; 6], c: f64| {
        let mut out = a;
        for j in 0..6 {
            out[j] += c * b[j];
        }
        out
    };
    let k1 = rhs(z);
    let k2 = rhs(add(z, k1, h / 2.0));
    let k3 = rhs(add(z, k2, h / 2.0));
    let k4 = rhs(add(z, k3, h));
    let mut out = z;
    for j in 0..6 {
        out[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    out
}

/// Integrates one barrier curve backward from a tangency start.
///
/// The input is re-selected from the vertices of the control box at every
/// step via the switching functions; within the singular tolerance the
/// previous value is held.
pub fn barrier_curve(
    start: &BarrierState,
    kind: BoundaryKind,
    p: &Params,
    opts: &BarrierOpts,
) -> Result<BarrierCurve> {
    if (start.x.i - p.i_max).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "barrier curve must start on I = I_max, got I = {}",
            start.x.i
        )));
    }
    if start.lambda.iter().all(|l| *l == 0.0) {
        return Err(Error::Precondition("zero initial adjoint".into()));
    }
    let mut z = [
        start.x.s,
        start.x.e,
        start.x.i,
        start.lambda[0],
        start.lambda[1],
        start.lambda[2],
    ];
    let mut held = extremal_start_input(kind, p);
    let mut points = vec![*start];
    let mut t_back = start.t_back;
    let n_max = (opts.t_max / opts.h).ceil() as usize;
    let mut stop = CurveStop::TimeCap;
    for step in 1..=n_max {
        let x3 = [z[0], z[1], z[2]];
        let l3 = [z[3], z[4], z[5]];
        let u = switching_input(kind, &x3, &l3, &mut held, p);
        z = barrier_step(z, &u, opts.h, p);
        t_back += opts.h;

        let lambda_norm = z[3].abs().max(z[4].abs()).max(z[5].abs());
        if !z.iter().all(|v| v.is_finite()) || lambda_norm > LAMBDA_CAP {
            stop = CurveStop::AdjointBlowup;
            break;
        }
        let outside_pi = z[0] < -1e-9
            || z[1] < -1e-9
            || z[2] < -1e-9
            || z[0] + z[1] + z[2] > 1.0 + 1e-9;
        if outside_pi {
            stop = CurveStop::LeftPi;
            break;
        }
        if z[2] < opts.i_floor {
            stop = CurveStop::IFloor;
            break;
        }
        if step % opts.emit_every == 0 {
            points.push(BarrierState {
                x: State::from_sei(z[0].max(0.0), z[1].max(0.0), z[2].max(0.0))?,
                lambda: [z[3], z[4], z[5]],
                t_back,
            });
        }
    }
    Ok(BarrierCurve {
        kind,
        curve_id: 0,
        points,
        stop,
    })
}

/// Union of barrier curves from `n_starts` tangency points spread along the
/// valid S-range on `I = I_max`. Deterministic given the options; curves run
/// concurrently under the `parallel` feature.
pub fn boundary_cloud(
    kind: BoundaryKind,
    p: &Params,
    n_starts: usize,
    opts: &BarrierOpts,
) -> Result<BoundaryPointCloud> {
    if n_starts == 0 {
        return Err(Error::Precondition("n_starts must be >= 1".into()));
    }
    let tangency = tangency_points(kind, p)?;
    let (s_lo, s_hi) = tangency.s_range;
    let curves: Vec<Result<BarrierCurve>> = par::map_range(n_starts, |k| {
        let frac = if n_starts == 1 {
            0.5
        } else {
            k as f64 / (n_starts - 1) as f64
        };
        let s0 = s_lo + frac * (s_hi - s_lo);
        let x = State::from_sei(s0, tangency.e_star, p.i_max)?;
        let mut curve = barrier_curve(&BarrierState::start(x), kind, p, opts)?;
        curve.curve_id = k;
        Ok(curve)
    });
    let mut points = Vec::new();
    let mut stops = Vec::new();
    for curve in curves {
        let curve = curve?;
        stops.push(curve.stop);
        points.extend(curve.points.iter().map(|b| BoundaryPoint {
            s: b.x.s,
            e: b.x.e,
            i: b.x.i,
            curve_id: curve.curve_id,
        }));
    }
    Ok(BoundaryPointCloud { kind, points, stops })
}

/// Writes a point cloud as CSV with header `kind,curve_id,S,E,I`.
pub fn write_cloud_csv<W: Write>(out: &mut W, cloud: &BoundaryPointCloud) -> Result<()> {
    writeln!(out, "kind,curve_id,S,E,I")?;
    for pt in &cloud.points {
        writeln!(
            out,
            "{},{},{},{},{}",
            cloud.kind.label(),
            pt.curve_id,
            fmt(pt.s),
            fmt(pt.e),
            fmt(pt.i)
        )?;
    }
    Ok(())
}

/// Row of a membership grid sweep.
#[derive(Debug, Clone, Copy)]
pub struct GridRow {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub in_admissible: bool,
    pub in_mrpi: bool,
    pub in_terminal: bool,
}

/// Evaluates both oracles and the terminal-set predicate on an `n^3` grid
/// over Pi. Points with `I > I_max` are outside both invariant sets by
/// definition. Grid points are processed concurrently.
pub fn grid_membership(p: &Params, n: usize, opts: &MembershipOpts) -> Result<Vec<GridRow>> {
    let mut coords = Vec::new();
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let s = a as f64 / (n - 1).max(1) as f64;
                let e = b as f64 / (n - 1).max(1) as f64;
                let i = c as f64 / (n - 1).max(1) as f64;
                if s + e + i <= 1.0 {
                    coords.push((s, e, i));
                }
            }
        }
    }
    let rows = par::map_slice(&coords, |&(s, e, i)| -> Result<GridRow> {
        let x = State::from_sei(s, e, i)?;
        let (in_admissible, in_mrpi) = if x.i > p.i_max {
            (false, false)
        } else {
            let adm = admissible_membership(&x, p, opts)?;
            let mrpi = mrpi_membership(&x, p, opts)?;
            (adm.inside, mrpi.inside)
        };
        Ok(GridRow {
            s,
            e,
            i,
            in_admissible,
            in_mrpi,
            in_terminal: region_contains(RegionKind::TerminalSet, &x, p),
        })
    });
    rows.into_iter().collect()
}

/// Writes a grid sweep as CSV with header
/// `S,E,I,in_admissible,in_mrpi,in_terminal`.
pub fn write_grid_csv<W: Write>(out: &mut W, rows: &[GridRow]) -> Result<()> {
    writeln!(out, "S,E,I,in_admissible,in_mrpi,in_terminal")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(r.s),
            fmt(r.e),
            fmt(r.i),
            r.in_admissible,
            r.in_mrpi,
            r.in_terminal
        )?;
    }
    Ok(())
}
