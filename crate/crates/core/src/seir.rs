//! Deterministic SEIR model with vital dynamics and a death compartment.
//!
//! The contact rate is piecewise constant over days: `contact_rate[d]` drives
//! every Euler sub-step between integer day `d` and `d + 1`. The same mortality
//! rate drives both the natural turnover term `mu * (n - S)` and the flow into
//! the deceased compartment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compartment order used by the flat state arrays.
pub const S: usize = 0;
pub const E: usize = 1;
pub const I: usize = 2;
pub const R: usize = 3;
pub const D: usize = 4;

/// Compartments diverging beyond this multiple of the population abort integration.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

pub const DEFAULT_STEP_SIZE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeirParams {
    /// Per-day contact rate (1/day).
    pub contact_rate: Vec<f64>,
    /// Incubation rate sigma (1/day), shared across regions.
    pub incubation_rate: f64,
    /// Recovery rate gamma (1/day).
    pub recovery_rate: f64,
    /// Mortality rate mu (1/day).
    pub mortality_rate: f64,
    /// Population size n.
    pub population: f64,
}

impl SeirParams {
    pub fn new(
        contact_rate: Vec<f64>,
        incubation_rate: f64,
        recovery_rate: f64,
        mortality_rate: f64,
        population: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("incubation_rate", incubation_rate),
            ("recovery_rate", recovery_rate),
            ("mortality_rate", mortality_rate),
            ("population", population),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if let Some((day, b)) = contact_rate
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0))
        {
            return Err(Error::Domain(format!(
                "contact rate on day {day} must be positive and finite, got {b}"
            )));
        }
        Ok(Self {
            contact_rate,
            incubation_rate,
            recovery_rate,
            mortality_rate,
            population,
        })
    }

    /// Checks the upper bound `beta <= 2 * beta_reference` implied by the sigmoid link.
    pub fn check_contact_bound(&self, beta_reference: f64) -> Result<()> {
        let cap = 2.0 * beta_reference;
        match self.contact_rate.iter().position(|&b| b > cap) {
            Some(day) => Err(Error::Domain(format!(
                "contact rate {} on day {day} exceeds 2 * beta_reference = {cap}",
                self.contact_rate[day]
            ))),
            None => Ok(()),
        }
    }

    pub fn contact_rate_at(&self, day: usize) -> Result<f64> {
        self.contact_rate.get(day).copied().ok_or(Error::Range {
            day,
            len: self.contact_rate.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeirState {
    pub susceptible: f64,
    pub exposed: f64,
    pub infectious: f64,
    pub recovered: f64,
    pub deceased: f64,
    pub day: usize,
}

impl SeirState {
    pub fn from_array(x: [f64; 5], day: usize) -> Self {
        Self {
            susceptible: x[S],
            exposed: x[E],
            infectious: x[I],
            recovered: x[R],
            deceased: x[D],
            day,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.susceptible,
            self.exposed,
            self.infectious,
            self.recovered,
            self.deceased,
        ]
    }

    fn validate(&self) -> Result<()> {
        let x = self.to_array();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite compartment in state {x:?}"
            )));
        }
        if x.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "negative compartment in state {x:?}"
            )));
        }
        Ok(())
    }
}

/// Daily-sampled output of [`integrate_euler`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeirTrajectory {
    /// One state per integer day, `states[k].day == k`.
    pub states: Vec<SeirState>,
    pub step_size: f64,
    /// Number of compartment values clamped at zero.
    pub clamp_events: usize,
}

impl SeirTrajectory {
    pub fn deceased(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.deceased).collect()
    }
}

/// Rule for seeding the exposed compartment on outbreak day 1.
///
/// `E(0) = max(1, multiplier * deaths_day1 / f)` with `f = mu / (mu + gamma)`
/// evaluated at the reference rates, `I(0) = R(0) = 0` and `D(0) = deaths_day1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedingRule {
    pub multiplier: f64,
    pub reference_mortality_rate: f64,
    pub reference_recovery_rate: f64,
}

impl Default for SeedingRule {
    fn default() -> Self {
        Self {
            multiplier: 10.0,
            reference_mortality_rate: 0.01,
            reference_recovery_rate: 0.1,
        }
    }
}

impl SeedingRule {
    pub fn initial_exposed(&self, deaths_day1: f64) -> f64 {
        let mu = self.reference_mortality_rate;
        let fatality_fraction = mu / (mu + self.reference_recovery_rate);
        (self.multiplier * deaths_day1 / fatality_fraction).max(1.0)
    }

    pub fn initial_state(&self, population: f64, deaths_day1: f64) -> SeirState {
        let exposed = self.initial_exposed(deaths_day1).min(population);
        SeirState {
            susceptible: population - exposed,
            exposed,
            infectious: 0.0,
            recovered: 0.0,
            deceased: deaths_day1,
            day: 0,
        }
    }
}

#[inline]
fn rates(params: &SeirParams) -> (f64, f64, f64, f64) {
    (
        params.incubation_rate,
        params.recovery_rate,
        params.mortality_rate,
        params.population,
    )
}

#[inline]
fn derivative(x: &[f64; 5], beta: f64, sigma: f64, gamma: f64, mu: f64, n: f64) -> [f64; 5] {
    let infection = beta * x[S] * x[I] / n;
    [
        mu * (n - x[S]) - infection,
        infection - (mu + sigma) * x[E],
        sigma * x[E] - (gamma + mu) * x[I],
        gamma * x[I] - mu * x[R],
        mu * x[I],
    ]
}

/// Right-hand side of the SEIR system, ordered `(dS, dE, dI, dR, dD)`.
pub fn seir_derivatives(state: &SeirState, params: &SeirParams, day: usize) -> Result<[f64; 5]> {
    if state.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite state".into()));
    }
    let beta = params.contact_rate_at(day)?;
    let (sigma, gamma, mu, n) = rates(params);
    Ok(derivative(&state.to_array(), beta, sigma, gamma, mu, n))
}

/// `(sigma / (mu + sigma)) * (beta / (mu + gamma))` from raw rates.
pub fn reproduction_number_from_rates(beta: f64, sigma: f64, gamma: f64, mu: f64) -> f64 {
    (sigma / (mu + sigma)) * (beta / (mu + gamma))
}

pub fn reproduction_number(params: &SeirParams, day: usize) -> Result<f64> {
    let beta = params.contact_rate_at(day)?;
    Ok(reproduction_number_from_rates(
        beta,
        params.incubation_rate,
        params.recovery_rate,
        params.mortality_rate,
    ))
}

#[derive(Debug, Clone, Copy)]
struct TapeStep {
    before: [f64; 5],
    h: f64,
    day: usize,
    clamped: [bool; 5],
}

/// Sub-step lengths covering one day with steps of at most `step_size`.
fn day_substeps(step_size: f64) -> Vec<f64> {
    let full = (1.0 / step_size + 1e-9).floor() as usize;
    let mut steps = vec![step_size; full];
    let rest = 1.0 - full as f64 * step_size;
    if rest > 1e-9 {
        steps.push(rest);
    }
    steps
}

fn run_euler(
    initial: &SeirState,
    params: &SeirParams,
    horizon_days: usize,
    step_size: f64,
    mut tape: Option<&mut Vec<TapeStep>>,
) -> Result<SeirTrajectory> {
    if !(step_size > 0.0 && step_size <= 1.0) {
        return Err(Error::Domain(format!(
            "step size must lie in (0, 1], got {step_size}"
        )));
    }
    if horizon_days < 1 {
        return Err(Error::Domain("horizon must be at least one day".into()));
    }
    if params.contact_rate.len() < horizon_days {
        return Err(Error::Range {
            day: horizon_days - 1,
            len: params.contact_rate.len(),
        });
    }
    initial.validate()?;

    let (sigma, gamma, mu, n) = rates(params);
    let limit = DIVERGENCE_FACTOR * n;
    let substeps = day_substeps(step_size);
    let mut x = initial.to_array();
    let mut states = Vec::with_capacity(horizon_days + 1);
    states.push(SeirState::from_array(x, 0));
    let mut clamp_events = 0;

    for day in 0..horizon_days {
        let beta = params.contact_rate[day];
        for &h in &substeps {
            let dx = derivative(&x, beta, sigma, gamma, mu, n);
            let before = x;
            let mut clamped = [false; 5];
            for c in 0..5 {
                x[c] += h * dx[c];
                if x[c] < 0.0 {
                    x[c] = 0.0;
                    clamped[c] = true;
                    clamp_events += 1;
                }
            }
            if let Some(t) = tape.as_deref_mut() {
                t.push(TapeStep {
                    before,
                    h,
                    day,
                    clamped,
                });
            }
        }
        if x.iter().any(|v| !v.is_finite() || *v > limit) {
            return Err(Error::IntegrationFailure {
                day: day + 1,
                detail: format!("state {x:?} exceeds {DIVERGENCE_FACTOR} x population"),
            });
        }
        states.push(SeirState::from_array(x, day + 1));
    }
    Ok(SeirTrajectory {
        states,
        step_size,
        clamp_events,
    })
}

/// Forward-Euler integration sampled at integer days `0..=horizon_days`.
pub fn integrate_euler(
    initial: &SeirState,
    params: &SeirParams,
    horizon_days: usize,
    step_size: f64,
) -> Result<SeirTrajectory> {
    run_euler(initial, params, horizon_days, step_size, None)
}

/// Gradient of a scalar loss with respect to the SEIR inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SeirGradient {
    pub contact_rate: Vec<f64>,
    pub incubation_rate: f64,
    pub recovery_rate: f64,
    pub mortality_rate: f64,
    pub initial: [f64; 5],
}

/// Euler integration that records every sub-step so that the exact gradient of
/// the discrete scheme can be computed by a reverse sweep.
#[derive(Debug, Clone)]
pub struct EulerTape {
    params: SeirParams,
    steps: Vec<TapeStep>,
    substeps_per_day: usize,
    trajectory: SeirTrajectory,
}

impl EulerTape {
    pub fn record(
        initial: &SeirState,
        params: &SeirParams,
        horizon_days: usize,
        step_size: f64,
    ) -> Result<Self> {
        let mut steps = Vec::new();
        let trajectory = run_euler(initial, params, horizon_days, step_size, Some(&mut steps))?;
        Ok(Self {
            params: params.clone(),
            steps,
            substeps_per_day: day_substeps(step_size).len(),
            trajectory,
        })
    }

    pub fn trajectory(&self) -> &SeirTrajectory {
        &self.trajectory
    }

    /// Reverse sweep given `dL/dD(day)` for every sampled day `0..=horizon`.
    pub fn backward(&self, d_deceased: &[f64]) -> Result<SeirGradient> {
        let horizon = self.trajectory.states.len() - 1;
        if d_deceased.len() != horizon + 1 {
            return Err(Error::Shape(format!(
                "expected {} death sensitivities, got {}",
                horizon + 1,
                d_deceased.len()
            )));
        }
        let (sigma, gamma, mu, n) = rates(&self.params);
        let mut grad = SeirGradient {
            contact_rate: vec![0.0; self.params.contact_rate.len()],
            incubation_rate: 0.0,
            recovery_rate: 0.0,
            mortality_rate: 0.0,
            initial: [0.0; 5],
        };
        let mut adj = [0.0; 5];
        adj[D] = d_deceased[horizon];

        for (k, step) in self.steps.iter().enumerate().rev() {
            let beta = self.params.contact_rate[step.day];
            let x = &step.before;
            let h = step.h;
            let mut a = adj;
            for c in 0..5 {
                if step.clamped[c] {
                    a[c] = 0.0;
                }
            }
            let si_n = x[S] * x[I] / n;
            // parameter sensitivities: h * (df/dtheta)^T a
            grad.contact_rate[step.day] += h * si_n * (a[E] - a[S]);
            grad.incubation_rate += h * x[E] * (a[I] - a[E]);
            grad.recovery_rate += h * x[I] * (a[R] - a[I]);
            grad.mortality_rate +=
                h * ((n - x[S]) * a[S] - x[E] * a[E] - x[I] * a[I] - x[R] * a[R] + x[I] * a[D]);
            // state: a + h * J^T a
            let b_i = beta * x[I] / n;
            let b_s = beta * x[S] / n;
            adj = [
                a[S] + h * ((-mu - b_i) * a[S] + b_i * a[E]),
                a[E] + h * (-(mu + sigma) * a[E] + sigma * a[I]),
                a[I] + h
                    * (-b_s * a[S] + b_s * a[E] - (gamma + mu) * a[I] + gamma * a[R] + mu * a[D]),
                a[R] + h * (-mu * a[R]),
                a[D],
            ];
            if k % self.substeps_per_day == 0 {
                adj[D] += d_deceased[step.day];
            }
        }
        grad.initial = adj;
        Ok(grad)
    }
}
