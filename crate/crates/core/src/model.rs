//! SEIR vector field, constraint data, stage cost, and the linearized tail
//! system that governs decay inside the terminal set.
//!
//! All rates are per day and time is measured in days. Compartments are
//! population fractions. Operations here are pure; invalid inputs are
//! rejected when the domain types are constructed.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tiny negatives from integration rounding are clamped to zero up to this.
pub const CLAMP_TOL: f64 = 1e-12;

/// Tolerance on `S + E + I + R = 1`.
pub const MASS_TOL: f64 = 1e-9;

/// Model and constraint constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Nominal rate of infectious contacts (upper control bound on beta).
    pub beta_nom: f64,
    /// Strictest contact restriction (lower control bound on beta).
    pub beta_min: f64,
    /// Nominal removal rate (lower control bound on gamma).
    pub gamma_nom: f64,
    /// Strictest quarantine (upper control bound on gamma).
    pub gamma_max: f64,
    /// Inverse incubation time.
    pub eta: f64,
    /// Hard cap on the infectious fraction.
    pub i_max: f64,
}

impl Params {
    pub fn new(
        beta_nom: f64,
        beta_min: f64,
        gamma_nom: f64,
        gamma_max: f64,
        eta: f64,
        i_max: f64,
    ) -> Result<Self> {
        let p = Params {
            beta_nom,
            beta_min,
            gamma_nom,
            gamma_max,
            eta,
            i_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_nom) {
            return Err(Error::InvalidParams(format!(
                "need 0 < beta_min <= beta_nom, got beta_min={}, beta_nom={}",
                self.beta_min, self.beta_nom
            )));
        }
        if !(self.gamma_nom > 0.0 && self.gamma_nom <= self.gamma_max && self.gamma_max.is_finite())
        {
            return Err(Error::InvalidParams(format!(
                "need 0 < gamma_nom <= gamma_max < inf, got gamma_nom={}, gamma_max={}",
                self.gamma_nom, self.gamma_max
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParams(format!("need eta > 0, got {}", self.eta)));
        }
        if !(self.i_max > 0.0 && self.i_max < 1.0) {
            return Err(Error::InvalidParams(format!(
                "need i_max in (0, 1), got {}",
                self.i_max
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration issues. `beta_min <= gamma_max` is required by
    /// the feasible-control synthesis but not by the dynamics themselves, so
    /// a violation is surfaced as a warning rather than an error.
    pub fn config_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.beta_min > self.gamma_max {
            w.push(format!(
                "beta_min = {} exceeds gamma_max = {}; feasible-control synthesis \
                 assumes beta_min <= gamma_max (allow stricter distancing or quarantine)",
                self.beta_min, self.gamma_max
            ));
        }
        w
    }

    /// Nominal input: no countermeasures.
    pub fn u_nom(&self) -> ControlValue {
        ControlValue {
            beta: self.beta_nom,
            gamma: self.gamma_nom,
        }
    }

    /// Most cautious input: strictest distancing and quarantine.
    pub fn u_cautious(&self) -> ControlValue {
        ControlValue {
            beta: self.beta_min,
            gamma: self.gamma_max,
        }
    }

    /// Case-study parameter set: beta_nom = 0.44, gamma_nom = 1/6.5,
    /// eta = 1/4.6, I_max = 0.05, gamma_max = 0.5, beta_min = 0.22.
    pub fn case_study() -> Self {
        Params {
            beta_nom: 0.44,
            beta_min: 0.22,
            gamma_nom: 1.0 / 6.5,
            gamma_max: 0.5,
            eta: 1.0 / 4.6,
            i_max: 0.05,
        }
    }
}

/// One point of compartment fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub r: f64,
}

impl State {
    /// Builds a state, clamping rounding-level negatives to zero. Larger
    /// violations of `[0, 1]` bounds or mass conservation are errors.
    pub fn new(s: f64, e: f64, i: f64, r: f64) -> Result<Self> {
        let clamp = |v: f64, name: &str| -> Result<f64> {
            if v >= 0.0 && v <= 1.0 {
                Ok(v)
            } else if v < 0.0 && v >= -CLAMP_TOL {
                Ok(0.0)
            } else {
                Err(Error::InvalidState(format!(
                    "compartment {name} = {v} outside [0, 1]"
                )))
            }
        };
        let s = clamp(s, "S")?;
        let e = clamp(e, "E")?;
        let i = clamp(i, "I")?;
        let r = clamp(r, "R")?;
        let sum = s + e + i + r;
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidState(format!(
                "S + E + I + R = {sum} deviates from 1 by more than {MASS_TOL}"
            )));
        }
        Ok(State { s, e, i, r })
    }

    /// State from the (S, E, I) triple with R absorbing the remainder.
    pub fn from_sei(s: f64, e: f64, i: f64) -> Result<Self> {
        State::new(s, e, i, 1.0 - s - e - i)
    }

    /// Disease-free equilibrium with susceptible fraction `s`.
    pub fn equilibrium(s: f64) -> Result<Self> {
        State::new(s, 0.0, 0.0, 1.0 - s)
    }

    pub fn infected(&self) -> f64 {
        self.e + self.i
    }
}

/// One (beta, gamma) input value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlValue {
    pub beta: f64,
    pub gamma: f64,
}

impl ControlValue {
    /// Builds a control value checked against the bounds in `p`.
    pub fn checked(beta: f64, gamma: f64, p: &Params) -> Result<Self> {
        if !(p.beta_min..=p.beta_nom).contains(&beta) {
            return Err(Error::InvalidControl(format!(
                "beta = {beta} outside [{}, {}]",
                p.beta_min, p.beta_nom
            )));
        }
        if !(p.gamma_nom..=p.gamma_max).contains(&gamma) {
            return Err(Error::InvalidControl(format!(
                "gamma = {gamma} outside [{}, {}]",
                p.gamma_nom, p.gamma_max
            )));
        }
        Ok(ControlValue { beta, gamma })
    }

    /// Clamps both components into the feasible box.
    pub fn clamped(beta: f64, gamma: f64, p: &Params) -> Self {
        ControlValue {
            beta: beta.clamp(p.beta_min, p.beta_nom),
            gamma: gamma.clamp(p.gamma_nom, p.gamma_max),
        }
    }

    pub fn is_feasible(&self, p: &Params) -> bool {
        (p.beta_min..=p.beta_nom).contains(&self.beta)
            && (p.gamma_nom..=p.gamma_max).contains(&self.gamma)
    }
}

/// Time derivative of the four compartments, 1/day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deriv {
    pub ds: f64,
    pub de: f64,
    pub di: f64,
    pub dr: f64,
}

/// SEIR right-hand side: `(-bSI, bSI - eta E, eta E - g I, g I)`.
pub fn vector_field(x: &State, u: &ControlValue, p: &Params) -> Deriv {
    let new_infections = u.beta * x.s * x.i;
    let incubations = p.eta * x.e;
    let removals = u.gamma * x.i;
    Deriv {
        ds: -new_infections,
        de: new_infections - incubations,
        di: incubations - removals,
        dr: removals,
    }
}

/// Quadratic stage cost: `E^2 + I^2 + (beta - beta_nom)^2 + (gamma - gamma_nom)^2`.
pub fn stage_cost(x: &State, u: &ControlValue, p: &Params) -> f64 {
    let db = u.beta - p.beta_nom;
    let dg = u.gamma - p.gamma_nom;
    x.e * x.e + x.i * x.i + db * db + dg * dg
}

/// Herd-immunity threshold `S_bar = gamma_nom / beta_nom` (the inverse of the
/// basic reproduction number). Below it, E + I decreases under nominal inputs.
pub fn herd_immunity_threshold(p: &Params) -> f64 {
    p.gamma_nom / p.beta_nom
}

/// Linear system bounding (E, I) from above once S is frozen, with its
/// eigenvalues in closed form.
#[derive(Debug, Clone, Copy)]
pub struct LinearTail {
    /// Row-major 2x2 matrix `[[-eta, beta*s], [eta, -gamma]]`, units 1/day.
    pub matrix_a: [[f64; 2]; 2],
    pub eig1: Complex64,
    pub eig2: Complex64,
}

/// Tail system at frozen susceptible fraction `s_frozen` under fixed
/// `(beta, gamma)`. Both eigenvalues have negative real part whenever
/// `s_frozen < gamma / beta`.
pub fn linear_tail(s_frozen: f64, beta: f64, gamma: f64, p: &Params) -> LinearTail {
    let eta = p.eta;
    let matrix_a = [[-eta, beta * s_frozen], [eta, -gamma]];
    // lambda_{1,2} = -(eta+gamma)/2 +- sqrt((eta+gamma)^2/4 - eta gamma + eta beta s)
    let half_trace = -(eta + gamma) / 2.0;
    let disc = Complex64::new(
        (eta + gamma) * (eta + gamma) / 4.0 - eta * gamma + eta * beta * s_frozen,
        0.0,
    );
    let root = disc.sqrt();
    LinearTail {
        matrix_a,
        eig1: Complex64::new(half_trace, 0.0) + root,
        eig2: Complex64::new(half_trace, 0.0) - root,
    }
}

impl LinearTail {
    /// Residual of `lambda^2 - tr(A) lambda + det(A)` at both eigenvalues.
    pub fn characteristic_residual(&self) -> f64 {
        let a = self.matrix_a;
        let tr = a[0][0] + a[1][1];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let res = |l: Complex64| (l * l - l * tr + det).norm();
        res(self.eig1).max(res(self.eig2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> Params {
        Params::case_study()
    }

    #[test]
    fn params_reject_bad_bounds() {
        assert!(Params::new(0.44, 0.0, 0.15, 0.5, 0.2, 0.05).is_err());
        assert!(Params::new(0.44, 0.5, 0.15, 0.5, 0.2, 0.05).is_err());
        assert!(Params::new(0.44, 0.22, 0.6, 0.5, 0.2, 0.05).is_err());
        assert!(Params::new(0.44, 0.22, 0.15, 0.5, -1.0, 0.05).is_err());
        assert!(Params::new(0.44, 0.22, 0.15, 0.5, 0.2, 1.0).is_err());
    }

    #[test]
    fn assumption_violation_is_a_warning_not_an_error() {
        let p = Params::new(0.9, 0.6, 0.15, 0.5, 0.2, 0.05).unwrap();
        assert_eq!(p.config_warnings().len(), 1);
        assert!(Params::case_study().config_warnings().is_empty());
    }

    #[test]
    fn state_clamps_rounding_negatives_and_rejects_larger_ones() {
        let x = State::new(0.5, -1e-13, 0.2, 0.3).unwrap();
        assert_eq!(x.e, 0.0);
        assert!(State::new(0.5, -1e-6, 0.2, 0.3).is_err());
        assert!(State::new(0.5, 0.3, 0.3, 0.3).is_err());
    }

    #[test]
    fn vector_field_vanishes_at_disease_free_equilibrium() {
        let x = State::equilibrium(0.7).unwrap();
        let d = vector_field(&x, &p().u_nom(), &p());
        assert_eq!((d.ds, d.de, d.di, d.dr), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn vector_field_matches_hand_arithmetic() {
        let x = State::new(0.50, 0.18, 0.01, 0.31).unwrap();
        let d = vector_field(&x, &p().u_nom(), &p());
        assert!((d.ds - (-0.0022)).abs() < 1e-15);
        assert!((d.de - (0.0022 - 0.18 / 4.6)).abs() < 1e-15);
        assert!((d.di - (0.18 / 4.6 - 0.01 / 6.5)).abs() < 1e-15);
        assert!((d.dr - 0.01 / 6.5).abs() < 1e-15);

        let x = State::new(0.5, 0.2, 0.05, 0.25).unwrap();
        let d = vector_field(&x, &p().u_cautious(), &p());
        assert!((d.ds - (-0.22 * 0.5 * 0.05)).abs() < 1e-15);
        assert!((d.di - (0.2 / 4.6 - 0.5 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn stage_cost_examples() {
        let eq = State::equilibrium(0.9).unwrap();
        assert_eq!(stage_cost(&eq, &p().u_nom(), &p()), 0.0);

        let x = State::new(0.50, 0.18, 0.01, 0.31).unwrap();
        assert!((stage_cost(&x, &p().u_nom(), &p()) - 0.0325).abs() < 1e-15);

        let c = stage_cost(&eq, &p().u_cautious(), &p());
        let expected = 0.22f64.powi(2) + (0.5f64 - 1.0 / 6.5).powi(2);
        assert!((c - expected).abs() < 1e-15);
        assert!((c - 0.168_222_485_207_1).abs() < 1e-10);
    }

    #[test]
    fn herd_immunity_threshold_examples() {
        assert!((herd_immunity_threshold(&p()) - 0.349_650_349_650_35).abs() < 1e-12);
        let q = Params::new(0.5, 0.25, 0.25, 0.5, 0.2, 0.05).unwrap();
        assert_eq!(herd_immunity_threshold(&q), 0.5);
        let r = Params::new(0.3, 0.2, 0.3, 0.5, 0.2, 0.05).unwrap();
        assert_eq!(herd_immunity_threshold(&r), 1.0);
    }

    #[test]
    fn linear_tail_collapses_at_threshold() {
        let p = p();
        let s = p.gamma_nom / p.beta_nom;
        let tail = linear_tail(s, p.beta_nom, p.gamma_nom, &p);
        assert!(tail.eig1.norm() < 1e-14);
        assert!((tail.eig2.re - (-(p.eta + p.gamma_nom))).abs() < 1e-12);
        assert!((tail.eig2.re - (-0.371_237_458_193_98)).abs() < 1e-12);
        assert!(tail.characteristic_residual() < 1e-12);
    }

    #[test]
    fn linear_tail_stable_below_threshold() {
        let p = p();
        for k in 0..50 {
            let frac = k as f64 / 50.0;
            let beta = p.beta_min + frac * (p.beta_nom - p.beta_min);
            let gamma = p.gamma_nom + frac * (p.gamma_max - p.gamma_nom);
            let s = 0.95 * gamma / beta;
            let tail = linear_tail(s.min(1.0), beta, gamma, &p);
            assert!(tail.eig1.re < 0.0 && tail.eig2.re < 0.0);
            assert!(tail.characteristic_residual() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn conservation_and_monotone_signs(
            s in 0.0..1.0f64, e in 0.0..1.0f64, i in 0.0..1.0f64,
            fb in 0.0..1.0f64, fg in 0.0..1.0f64,
        ) {
            let total = s + e + i;
            prop_assume!(total > 1e-12);
            // scale into the simplex, leave some R
            let scale = 0.9 / total.max(0.9);
            let x = State::from_sei(s * scale, e * scale, i * scale).unwrap();
            let p = p();
            let u = ControlValue::clamped(
                p.beta_min + fb * (p.beta_nom - p.beta_min),
                p.gamma_nom + fg * (p.gamma_max - p.gamma_nom),
                &p,
            );
            let d = vector_field(&x, &u, &p);
            prop_assert!((d.ds + d.de + d.di + d.dr).abs() < 1e-16);
            prop_assert!(d.ds <= 0.0);
            prop_assert!(d.dr >= 0.0);
            prop_assert_eq!(d.ds < 0.0, x.s * x.i > 0.0);
        }

        #[test]
        fn threshold_sign_law(
            s in 0.0..1.0f64, e in 0.0..1.0f64, i in 1e-6..1.0f64,
            fb in 0.0..1.0f64, fg in 0.0..1.0f64,
        ) {
            let total = s + e + i;
            prop_assume!(total > 1e-3);
            let scale = (0.999 / total).min(1.0);
            let x = State::from_sei(s * scale, e * scale, i * scale).unwrap();
            prop_assume!(x.i > 1e-9);
            let p = p();
            let u = ControlValue::clamped(
                p.beta_min + fb * (p.beta_nom - p.beta_min),
                p.gamma_nom + fg * (p.gamma_max - p.gamma_nom),
                &p,
            );
            let d = vector_field(&x, &u, &p);
            let growth = d.de + d.di; // (beta S - gamma) I
            let margin = (u.beta * x.s - u.gamma) * x.i;
            prop_assume!(margin.abs() > 1e-12);
            prop_assert_eq!(growth > 0.0, x.s > u.gamma / u.beta);
            prop_assert_eq!(growth < 0.0, x.s < u.gamma / u.beta);
        }

        #[test]
        fn linear_tail_eigs_solve_characteristic_polynomial(
            s in 0.0..1.0f64, fb in 0.0..1.0f64, fg in 0.0..1.0f64,
        ) {
            let p = p();
            let beta = p.beta_min + fb * (p.beta_nom - p.beta_min);
            let gamma = p.gamma_nom + fg * (p.gamma_max - p.gamma_nom);
            let tail = linear_tail(s, beta, gamma, &p);
            prop_assert!(tail.characteristic_residual() < 1e-12);
        }
    }
}
