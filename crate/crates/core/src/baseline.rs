//! Comparison forecasters: a Gompertz growth curve and a single-region SEIR
//! with constant rates, both fitted by least squares.

use argmin::core::{CostFunction, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::storage::Owned;
use nalgebra::{DVector, Dyn, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::data::RegionRecord;
use crate::error::{Error, Result};
use crate::forecast::ForecastResult;
use crate::model::{contact_latent, contact_rate, softplus, softplus_inverse, ModelConfig};
use crate::seir::{integrate_euler, SeirParams};

pub const FIT_RESTARTS: usize = 5;
const MIN_FIT_DAYS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    VanillaSeir,
    Gompertz,
}

impl BaselineMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMethod::VanillaSeir => "vanilla_seir",
            BaselineMethod::Gompertz => "gompertz",
        }
    }
}

/// `a * exp(-b * exp(-c * t))` with `t` the outbreak day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GompertzFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GompertzFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * (-self.b * (-self.c * t).exp()).exp()
    }
}

/// Residuals over log-parameters, which keeps `a, b, c` positive.
struct GompertzProblem<'a> {
    y: &'a [f64],
    p: Vector3<f64>,
}

impl GompertzProblem<'_> {
    fn curve(&self) -> GompertzFit {
        GompertzFit {
            a: self.p[0].exp(),
            b: self.p[1].exp(),
            c: self.p[2].exp(),
        }
    }
}

impl LeastSquaresProblem<f64, Dyn, U3> for GompertzProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U3>;
    type ParameterStorage = Owned<f64, U3>;

    fn set_params(&mut self, x: &Vector3<f64>) {
        self.p = *x;
    }

    fn params(&self) -> Vector3<f64> {
        self.p
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let g = self.curve();
        let r = DVector::from_iterator(
            self.y.len(),
            self.y
                .iter()
                .enumerate()
                .map(|(i, y)| g.eval((i + 1) as f64) - y),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U3>> {
        let g = self.curve();
        let mut j = OMatrix::<f64, Dyn, U3>::zeros(self.y.len());
        for i in 0..self.y.len() {
            let t = (i + 1) as f64;
            let f = g.eval(t);
            let e = (-g.c * t).exp();
            j[(i, 0)] = f;
            j[(i, 1)] = -f * g.b * e;
            j[(i, 2)] = f * g.b * g.c * t * e;
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

pub fn fit_gompertz(y: &[f64]) -> Result<GompertzFit> {
    if y.len() < MIN_FIT_DAYS {
        return Err(Error::Fit(format!(
            "need {MIN_FIT_DAYS} observed days, got {}",
            y.len()
        )));
    }
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(GompertzFit {
            a: max,
            b: 0.0,
            c: 0.0,
        });
    }
    let first = y[0].max(1.0).min(max);
    let starts: [(f64, f64); 5] = [
        (1.2, 0.1),
        (2.0, 0.05),
        (5.0, 0.03),
        (1.05, 0.2),
        (10.0, 0.15),
    ];
    let mut best: Option<(f64, GompertzFit)> = None;
    for &(scale, c) in starts.iter().take(FIT_RESTARTS) {
        let a = max * scale;
        let b = ((a / first).ln() * c.exp()).max(1e-3);
        let problem = GompertzProblem {
            y,
            p: Vector3::new(a.ln(), b.ln(), c.ln()),
        };
        let (fitted, report) = LevenbergMarquardt::new().minimize(problem);
        if !report.termination.was_successful() || !report.objective_function.is_finite() {
            continue;
        }
        let cost = report.objective_function;
        if best.as_ref().is_none_or(|(c0, _)| cost < *c0) {
            best = Some((cost, fitted.curve()));
        }
    }
    best.map(|(_, g)| g).ok_or_else(|| {
        Error::Fit(format!(
            "Gompertz fit did not converge in {FIT_RESTARTS} restarts"
        ))
    })
}

/// Constant-rate SEIR: contact, recovery and mortality rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanillaSeirFit {
    pub contact_rate: f64,
    pub incubation_rate: f64,
    pub recovery_rate: f64,
    pub mortality_rate: f64,
}

impl VanillaSeirFit {
    /// Cumulative deaths over outbreak days `1..=days`.
    pub fn trajectory(
        &self,
        region: &RegionRecord,
        config: &ModelConfig,
        days: usize,
    ) -> Result<Vec<f64>> {
        let initial = config
            .seeding
            .initial_state(region.population, region.fatalities[0]);
        if days <= 1 {
            return Ok(vec![initial.deceased]);
        }
        let params = SeirParams::new(
            vec![self.contact_rate; days - 1],
            self.incubation_rate,
            self.recovery_rate,
            self.mortality_rate,
            region.population,
        )?;
        Ok(integrate_euler(&initial, &params, days - 1, config.step_size)?.deceased())
    }
}

struct SeirCost<'a> {
    region: &'a RegionRecord,
    config: &'a ModelConfig,
}

impl SeirCost<'_> {
    fn decode(&self, p: &[f64]) -> VanillaSeirFit {
        VanillaSeirFit {
            contact_rate: contact_rate(self.config.beta_reference, p[0]),
            incubation_rate: self.config.init.incubation_rate,
            recovery_rate: softplus(p[1]),
            mortality_rate: softplus(p[2]),
        }
    }
}

impl CostFunction for SeirCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let fit = self.decode(p);
        let space = self.config.observation_space;
        let Ok(d) = fit.trajectory(self.region, self.config, self.region.num_days()) else {
            return Ok(1e300);
        };
        let sse: f64 = self
            .region
            .fatalities
            .iter()
            .zip(&d)
            .map(|(y, m)| (space.map(*y) - space.map(*m)).powi(2))
            .sum();
        Ok(if sse.is_finite() { sse } else { 1e300 })
    }
}

pub fn fit_vanilla_seir(region: &RegionRecord, config: &ModelConfig) -> Result<VanillaSeirFit> {
    if region.num_days() < MIN_FIT_DAYS {
        return Err(Error::Fit(format!(
            "need {MIN_FIT_DAYS} observed days, got {}",
            region.num_days()
        )));
    }
    let sigma = config.init.incubation_rate;
    let gamma = config.init.recovery_rate;
    let mu = config.init.mortality_rate;
    let mut best: Option<(f64, VanillaSeirFit)> = None;
    for r0 in [2.5, 1.5, 3.5, 1.1, 5.0].iter().take(FIT_RESTARTS) {
        let beta = (r0 * (gamma + mu) * (sigma + mu) / sigma).min(1.9 * config.beta_reference);
        let center = vec![
            contact_latent(config.beta_reference, beta)?,
            softplus_inverse(gamma),
            softplus_inverse(mu),
        ];
        let mut simplex = vec![center.clone()];
        for i in 0..3 {
            let mut v = center.clone();
            v[i] += 0.5;
            simplex.push(v);
        }
        let problem = SeirCost { region, config };
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-10)
            .map_err(|e| Error::Fit(e.to_string()))?;
        let Ok(res) = Executor::new(problem, solver)
            .configure(|s| s.max_iters(3000))
            .run()
        else {
            continue;
        };
        let state = res.state();
        if state.get_termination_reason() != Some(&TerminationReason::SolverConverged) {
            continue;
        }
        let cost = state.get_best_cost();
        let Some(p) = state.get_best_param() else {
            continue;
        };
        if cost.is_finite() && cost < 1e300 && best.as_ref().is_none_or(|(c0, _)| cost < *c0) {
            best = Some((cost, SeirCost { region, config }.decode(p)));
        }
    }
    best.map(|(_, f)| f).ok_or_else(|| {
        Error::Fit(format!(
            "SEIR fit for `{}` did not converge in {FIT_RESTARTS} restarts",
            region.region_id
        ))
    })
}

/// Point forecast for days `t..=t + horizon` from a baseline fitted on all
/// observed days.
pub fn baseline_forecast(
    method: BaselineMethod,
    region: &RegionRecord,
    config: &ModelConfig,
    horizon: usize,
) -> Result<ForecastResult> {
    let t = region.num_days();
    let values = match method {
        BaselineMethod::Gompertz => {
            let g = fit_gompertz(&region.fatalities)?;
            (t..=t + horizon).map(|d| g.eval(d as f64)).collect()
        }
        BaselineMethod::VanillaSeir => {
            let fit = fit_vanilla_seir(region, config)?;
            fit.trajectory(region, config, t + horizon)?[t - 1..].to_vec()
        }
    };
    Ok(ForecastResult::deterministic(region, t, values))
}
