//! Posterior-predictive forecasts, counterfactual policy edits and the
//! forecast metrics.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stringency_index, RegionRecord};
use crate::error::{Error, Result};
use crate::gp::{gp_posterior, jittered_cholesky, zero_mean, KernelSpec};
use crate::model::{
    contact_rate, day_inputs, latent_reproduction_number, level_inputs, PositiveMap,
};
use crate::posterior::{PosteriorModel, RegionPosterior};
use crate::seir::{integrate_euler, SeirParams, SeirState};

pub const DEFAULT_FORECAST_SAMPLES: usize = 1000;
pub const MIN_FORECAST_SAMPLES: usize = 100;
pub const MAX_SHIFT_DAYS: i64 = 28;
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
/// Largest tolerated fraction of Monte Carlo samples whose integration fails.
const MAX_FAILURE_FRACTION: f64 = 0.1;

/// A what-if forecast request for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub region_id: String,
    /// Policy vectors for days `t..=t + horizon`, `t` being the last observed day.
    pub future_policy: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Shift applied to every policy-change date before forecasting.
    #[serde(default)]
    pub shift_days: Option<i64>,
    /// Report the whole history plus the horizon instead of `t..=t + horizon`.
    #[serde(default)]
    pub include_history: bool,
}

impl ScenarioSpec {
    /// Holds the last observed policy, following any announced schedule.
    pub fn hold_last(region: &RegionRecord, horizon: usize) -> Self {
        let last = region.policy.values.last().cloned().unwrap_or_default();
        let mut future = vec![last];
        for j in 0..horizon {
            let next = region
                .scheduled_policy
                .values
                .get(j)
                .cloned()
                .unwrap_or_else(|| future[j].clone());
            future.push(next);
        }
        Self {
            region_id: region.region_id.clone(),
            future_policy: future,
            horizon,
            shift_days: None,
            include_history: false,
        }
    }

    pub fn validate(&self, indicators: usize) -> Result<()> {
        if self.future_policy.len() != self.horizon + 1 {
            return Err(Error::Shape(format!(
                "future policy has {} rows, horizon {} needs {}",
                self.future_policy.len(),
                self.horizon,
                self.horizon + 1
            )));
        }
        for (d, p) in self.future_policy.iter().enumerate() {
            if p.len() != indicators {
                return Err(Error::Shape(format!(
                    "future policy day {d} has {} indicators, expected {indicators}",
                    p.len()
                )));
            }
            if let Some((k, v)) = p
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::Domain(format!(
                    "future policy day {d} indicator {k} is {v}, must be in [0, 1]"
                )));
            }
        }
        if let Some(s) = self.shift_days {
            if s.abs() > MAX_SHIFT_DAYS {
                return Err(Error::Domain(format!(
                    "shift of {s} days exceeds the limit of {MAX_SHIFT_DAYS}"
                )));
            }
        }
        Ok(())
    }
}

/// Monte Carlo summary of the predictive distribution of cumulative deaths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub region_id: String,
    /// Last observed outbreak day.
    pub origin_day: usize,
    /// Outbreak days (1-based) of every row.
    pub days: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub mean: Vec<f64>,
    /// Sample standard deviation per day.
    pub std: Vec<f64>,
    pub q5: Vec<f64>,
    pub q25: Vec<f64>,
    pub q50: Vec<f64>,
    pub q75: Vec<f64>,
    pub q95: Vec<f64>,
    /// First differences of the mean, the first row against the preceding observation.
    pub daily_mean: Vec<f64>,
    pub num_samples: usize,
    pub failed_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ForecastResult {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn mean_at(&self, day: usize) -> Option<f64> {
        self.days
            .iter()
            .position(|d| *d == day)
            .map(|i| self.mean[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,date,mean,q5,q25,q50,q75,q95,daily_mean\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.days[i],
                self.dates[i].format(crate::data::DATE_FORMAT),
                self.mean[i],
                self.q5[i],
                self.q25[i],
                self.q50[i],
                self.q75[i],
                self.q95[i],
                self.daily_mean[i]
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Result with point values only, as produced by the baselines.
    pub(crate) fn deterministic(region: &RegionRecord, first_day: usize, values: Vec<f64>) -> Self {
        let days: Vec<usize> = (first_day..first_day + values.len()).collect();
        let daily = daily_differences(region, first_day, &values);
        Self {
            region_id: region.region_id.clone(),
            origin_day: region.num_days(),
            dates: days.iter().map(|d| region.date_of(d - 1)).collect(),
            days,
            std: vec![0.0; values.len()],
            q5: values.clone(),
            q25: values.clone(),
            q50: values.clone(),
            q75: values.clone(),
            q95: values.clone(),
            mean: values,
            daily_mean: daily,
            num_samples: 0,
            failed_samples: 0,
            seed: 0,
            warnings: Vec::new(),
        }
    }
}

fn daily_differences(region: &RegionRecord, first_day: usize, mean: &[f64]) -> Vec<f64> {
    let previous = if first_day >= 2 {
        region.fatalities.get(first_day - 2).copied().unwrap_or(0.0)
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(mean.len());
    let mut prev = previous;
    for m in mean {
        out.push(m - prev);
        prev = *m;
    }
    out
}

/// Type-7 (linear interpolation) quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Shifts every change date of a per-day timeline by `shift` days.
/// Changes pushed before the first day land on it; the flag reports that.
pub fn shift_timeline(timeline: &[Vec<f64>], shift: i64) -> (Vec<Vec<f64>>, bool) {
    let n = timeline.len();
    if n == 0 || shift == 0 {
        return (timeline.to_vec(), false);
    }
    let clamped =
        shift < 0 && (1..n).any(|c| timeline[c] != timeline[c - 1] && (c as i64) + shift < 0);
    let out = (0..n)
        .map(|d| {
            let src = (d as i64 - shift).clamp(0, n as i64 - 1) as usize;
            timeline[src].clone()
        })
        .collect();
    (out, clamped)
}

struct NovelLevels {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

struct Plan<'a> {
    model: &'a PosteriorModel,
    region: &'a RegionRecord,
    post: &'a RegionPosterior,
    /// Level index of every day row of the scenario, one per modeled day.
    scenario_levels: Vec<usize>,
    factual_levels: Vec<usize>,
    novel: Option<NovelLevels>,
    total_days: usize,
    first_output_day: usize,
    initial: SeirState,
    observed: DVector<f64>,
    history_inputs: DMatrix<f64>,
    query_inputs: DMatrix<f64>,
}

impl Plan<'_> {
    fn num_outputs(&self) -> usize {
        self.total_days + 1 - self.first_output_day
    }

    fn num_normals(&self) -> usize {
        let novel = self.novel.as_ref().map_or(0, |n| n.mean.len());
        4 + self.post.beta.len() + novel + 2 * self.num_outputs()
    }

    fn deaths(
        &self,
        beta: &[f64],
        levels: &[usize],
        days: usize,
        rates: [f64; 3],
    ) -> Result<Vec<f64>> {
        if days <= 1 {
            return Ok(vec![self.initial.deceased]);
        }
        let beta_ref = self.model.config.beta_reference;
        let contact = levels[..days - 1]
            .iter()
            .map(|l| contact_rate(beta_ref, beta[*l]))
            .collect();
        let params = SeirParams::new(
            contact,
            rates[0],
            rates[1],
            rates[2],
            self.region.population,
        )?;
        let traj = integrate_euler(
            &self.initial,
            &params,
            days - 1,
            self.model.config.step_size,
        )?;
        Ok(traj.deceased())
    }

    /// One predictive path of cumulative deaths over the output days.
    fn sample(&self, seed: u64, index: usize) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let z: Vec<f64> = (0..self.num_normals())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let cfg = &self.model.config;
        let space = cfg.observation_space;
        let post = self.post;
        let rates = [
            PositiveMap::RATE.apply(self.model.incubation.sample(z[0])),
            PositiveMap::RATE.apply(post.recovery.sample(z[2])),
            PositiveMap::RATE.apply(post.mortality.sample(z[3])),
        ];
        let ell = PositiveMap::LENGTHSCALE.apply(post.lengthscale.sample(z[1]));
        let mut k = 4;
        let mut beta: Vec<f64> = post
            .beta
            .iter()
            .map(|b| {
                k += 1;
                b.sample(z[k - 1])
            })
            .collect();
        if let Some(novel) = &self.novel {
            let m = novel.mean.len();
            let dev = &novel.factor * DVector::from_column_slice(&z[k..k + m]);
            beta.extend(novel.mean.iter().zip(dev.iter()).map(|(a, b)| a + b));
            k += m;
        }

        let t = self.observed.len();
        let scenario = self.deaths(&beta, &self.scenario_levels, self.total_days, rates)?;
        let factual = if t <= 1 || self.scenario_levels[..t - 1] == self.factual_levels[..t - 1] {
            scenario[..t].to_vec()
        } else {
            self.deaths(&beta, &self.factual_levels, t, rates)?
        };
        if scenario.iter().chain(&factual).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite trajectory".into()));
        }

        let n_out = self.num_outputs();
        let z_f = &z[k..k + n_out];
        let z_noise = &z[k + n_out..k + 2 * n_out];
        let s_l = cfg.lower.signal_variance;
        let eta = cfg.lower.noise_variance;
        let residual_path = if s_l > 0.0 {
            let residual =
                DVector::from_iterator(t, (0..t).map(|d| self.observed[d] - space.map(factual[d])));
            let kernel = KernelSpec::new(cfg.kernel_family, vec![ell], s_l, eta.max(0.0))?;
            let gp = gp_posterior(zero_mean(), kernel, self.history_inputs.clone(), residual)?;
            let pred = gp.predict(&self.query_inputs, true)?;
            let crate::gp::Spread::Covariance(cov) = pred.spread else {
                unreachable!("covariance requested");
            };
            let chol = jittered_cholesky(&cov, s_l)?;
            let dev = chol.factor.l() * DVector::from_column_slice(z_f);
            (pred.mean + dev).iter().copied().collect()
        } else {
            vec![0.0; n_out]
        };
        let noise_sd = eta.max(0.0).sqrt();

        let mut path = Vec::with_capacity(n_out);
        let mut running = 0.0f64;
        for j in 0..n_out {
            let day = self.first_output_day + j;
            let y = space.map(scenario[day - 1]) + residual_path[j] + noise_sd * z_noise[j];
            let deaths = space.inverse(y).max(0.0);
            running = running.max(deaths);
            path.push(running);
        }
        if path.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite forecast path".into()));
        }
        Ok(path)
    }
}

fn build_plan<'a>(
    model: &'a PosteriorModel,
    region: &'a RegionRecord,
    timeline: &[Vec<f64>],
    first_output_day: usize,
) -> Result<Plan<'a>> {
    let post = model.region(&region.region_id)?;
    let t = region.num_days();
    let total_days = timeline.len();
    let mut levels = post.levels.clone();
    let mut novel_rows = Vec::new();
    let mut level_of = |p: &Vec<f64>| match levels.iter().position(|l| l == p) {
        Some(i) => i,
        None => {
            levels.push(p.clone());
            novel_rows.push(p.clone());
            levels.len() - 1
        }
    };
    let scenario_levels: Vec<usize> = timeline.iter().map(&mut level_of).collect();
    let factual_levels: Vec<usize> = region.policy.values.iter().map(&mut level_of).collect();
    let novel = if novel_rows.is_empty() {
        None
    } else {
        let gp = model.beta_gp()?;
        let pred = gp.predict(&level_inputs(&post.features, &novel_rows), true)?;
        let crate::gp::Spread::Covariance(cov) = pred.spread else {
            unreachable!("covariance requested");
        };
        let chol = jittered_cholesky(&cov, model.config.upper.beta.signal_variance)?;
        Some(NovelLevels {
            mean: pred.mean,
            factor: chol.factor.l(),
        })
    };
    let space = model.config.observation_space;
    Ok(Plan {
        model,
        region,
        post,
        scenario_levels,
        factual_levels,
        novel,
        total_days,
        first_output_day,
        initial: model
            .config
            .seeding
            .initial_state(region.population, region.fatalities[0]),
        observed: DVector::from_iterator(t, region.fatalities.iter().map(|y| space.map(*y))),
        history_inputs: day_inputs(1, t),
        query_inputs: day_inputs(first_output_day, total_days + 1 - first_output_day),
    })
}

/// Monte Carlo posterior-predictive forecast of cumulative deaths.
pub fn forecast(
    model: &PosteriorModel,
    region: &RegionRecord,
    scenario: &ScenarioSpec,
    num_samples: usize,
    seed: u64,
) -> Result<ForecastResult> {
    if num_samples < MIN_FORECAST_SAMPLES {
        return Err(Error::Domain(format!(
            "num_samples must be at least {MIN_FORECAST_SAMPLES}, got {num_samples}"
        )));
    }
    if scenario.region_id != region.region_id {
        return Err(Error::Shape(format!(
            "scenario is for `{}` but the data are for `{}`",
            scenario.region_id, region.region_id
        )));
    }
    let post = model.region(&region.region_id)?;
    let k = post.levels.first().map_or(0, Vec::len);
    scenario.validate(k)?;
    let t = region.num_days();
    if t == 0 || region.policy.len() != t {
        return Err(Error::Alignment(format!(
            "`{}` needs one policy row per observed day",
            region.region_id
        )));
    }

    let mut timeline: Vec<Vec<f64>> = region.policy.values[..t - 1].to_vec();
    timeline.extend(scenario.future_policy.iter().cloned());
    let mut warnings = Vec::new();
    if let Some(shift) = scenario.shift_days {
        let (shifted, clamped) = shift_timeline(&timeline, shift);
        if clamped {
            let msg = format!(
                "shift of {shift} days moved policy changes before day 1; clamped to day 1"
            );
            log::warn!("{}: {msg}", region.region_id);
            warnings.push(msg);
        }
        timeline = shifted;
    }
    let first_output_day = if scenario.include_history { 1 } else { t };
    let plan = build_plan(model, region, &timeline, first_output_day)?;

    let paths: Vec<Option<Vec<f64>>> = (0..num_samples)
        .into_par_iter()
        .map(|s| match plan.sample(seed, s) {
            Ok(p) => Some(p),
            Err(e) => {
                log::debug!("sample {s} of `{}` failed: {e}", region.region_id);
                None
            }
        })
        .collect();
    let failed = paths.iter().filter(|p| p.is_none()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * num_samples as f64 {
        return Err(Error::Forecast(format!(
            "{failed} of {num_samples} samples failed to integrate for `{}`",
            region.region_id
        )));
    }
    let paths: Vec<Vec<f64>> = paths.into_iter().flatten().collect();
    let n_out = plan.num_outputs();
    let n = paths.len() as f64;

    let mut mean = Vec::with_capacity(n_out);
    let mut std = Vec::with_capacity(n_out);
    let mut qs: [Vec<f64>; 5] = Default::default();
    let mut column = Vec::with_capacity(paths.len());
    for j in 0..n_out {
        column.clear();
        column.extend(paths.iter().map(|p| p[j]));
        let m = column.iter().sum::<f64>() / n;
        let var = if paths.len() > 1 {
            column.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        column.sort_by(|a, b| a.total_cmp(b));
        for (q, level) in qs.iter_mut().zip(QUANTILE_LEVELS) {
            q.push(quantile_sorted(&column, level));
        }
        mean.push(m);
        std.push(var.sqrt());
    }
    let days: Vec<usize> = (first_output_day..first_output_day + n_out).collect();
    let [q5, q25, q50, q75, q95] = qs;
    Ok(ForecastResult {
        region_id: region.region_id.clone(),
        origin_day: t,
        dates: days.iter().map(|d| region.date_of(d - 1)).collect(),
        daily_mean: daily_differences(region, first_output_day, &mean),
        days,
        mean,
        std,
        q5,
        q25,
        q50,
        q75,
        q95,
        num_samples: paths.len(),
        failed_samples: failed,
        seed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub baseline: ForecastResult,
    pub shifted: ForecastResult,
    /// Final mean cumulative deaths, shifted minus baseline.
    pub cumulative_difference: f64,
}

/// Forecast over history and horizon with every policy change moved by
/// `shift_days`, against the unedited timeline under the same seed.
pub fn counterfactual_shift(
    model: &PosteriorModel,
    region: &RegionRecord,
    shift_days: i64,
    horizon: usize,
    num_samples: usize,
    seed: u64,
) -> Result<Counterfactual> {
    let mut spec = ScenarioSpec::hold_last(region, horizon);
    spec.include_history = true;
    let baseline = forecast(model, region, &spec, num_samples, seed)?;
    spec.shift_days = Some(shift_days);
    let shifted = forecast(model, region, &spec, num_samples, seed)?;
    let last = |f: &ForecastResult| f.mean.last().copied().unwrap_or(0.0);
    let cumulative_difference = last(&shifted) - last(&baseline);
    Ok(Counterfactual {
        baseline,
        shifted,
        cumulative_difference,
    })
}

/// `sum_{k=1..T} (truth_k - predicted_k)`; positive means under-prediction.
pub fn horizon_error(truth: &[f64], predicted: &[f64], horizon: usize) -> Result<f64> {
    if truth.len() < horizon || predicted.len() < horizon {
        return Err(Error::Shape(format!(
            "horizon {horizon} needs {horizon} values, got {} truth and {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    Ok(truth[..horizon]
        .iter()
        .zip(&predicted[..horizon])
        .map(|(y, p)| y - p)
        .sum())
}

/// Signed cumulative error of a forecast over the `horizon` days after its
/// origin. `truth` is the full cumulative series, index 0 = outbreak day 1.
pub fn cumulative_error(truth: &[f64], forecast: &ForecastResult, horizon: usize) -> Result<f64> {
    let t = forecast.origin_day;
    let mut y = Vec::with_capacity(horizon);
    let mut p = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let day = t + k;
        let truth_k = truth.get(day - 1).ok_or_else(|| {
            Error::Shape(format!(
                "truth has {} days, horizon needs day {day}",
                truth.len()
            ))
        })?;
        let pred = forecast
            .mean_at(day)
            .ok_or_else(|| Error::Shape(format!("forecast does not cover day {day}")))?;
        y.push(*truth_k);
        p.push(pred);
    }
    horizon_error(&y, &p, horizon)
}

/// Least-squares line through `(x, y)` points: `(slope, intercept)`.
pub fn ols_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Shape("a line needs at least two points".into()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientVariation { distinct: 1 });
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StringencyFit {
    pub slope: f64,
    pub intercept: f64,
    /// (stringency, reproduction number) per observed day.
    pub points: Vec<(f64, f64)>,
}

/// Posterior-mean reproduction number averaged over the observed days.
pub fn mean_reproduction_number(model: &PosteriorModel, region: &RegionRecord) -> Result<f64> {
    let post = model.region(&region.region_id)?;
    let per_level = model.level_reproduction_numbers(&region.region_id)?;
    let mut total = 0.0;
    for (d, p) in region.policy.values.iter().enumerate() {
        let level = post.level_of(p).ok_or_else(|| {
            Error::Shape(format!(
                "day {} of `{}` has a policy the model was not trained on",
                d + 1,
                region.region_id
            ))
        })?;
        total += per_level[level];
    }
    if region.policy.is_empty() {
        return Err(Error::Shape(format!(
            "`{}` has no observed days",
            region.region_id
        )));
    }
    Ok(total / region.policy.len() as f64)
}

/// Regresses the posterior-mean reproduction number of every observed day on
/// the stringency index.
pub fn stringency_regression(
    model: &PosteriorModel,
    region: &RegionRecord,
) -> Result<StringencyFit> {
    let post = model.region(&region.region_id)?;
    let mut points = Vec::with_capacity(region.policy.len());
    for d in 0..region.policy.len() {
        let p = &region.policy.values[d];
        let level = post.level_of(p).ok_or_else(|| {
            Error::Shape(format!(
                "day {} of `{}` has a policy the model was not trained on",
                d + 1,
                region.region_id
            ))
        })?;
        let r0 = latent_reproduction_number(
            model.config.beta_reference,
            post.beta[level].mean,
            model.incubation.mean,
            post.recovery.mean,
            post.mortality.mean,
        );
        let published = region.policy.stringency.as_ref().map(|s| s[d]);
        points.push((stringency_index(p, published), r0));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::InsufficientVariation { distinct: xs.len() });
    }
    let (slope, intercept) = ols_fit(&points)?;
    Ok(StringencyFit {
        slope,
        intercept,
        points,
    })
}

/// Sum of independent regional forecasts on shared calendar dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateForecast {
    pub region_id: String,
    pub dates: Vec<NaiveDate>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn aggregate_forecasts(parts: &[ForecastResult], id: &str) -> Result<AggregateForecast> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("no forecasts to aggregate".into()))?;
    let dates: Vec<NaiveDate> = first
        .dates
        .iter()
        .filter(|d| parts.iter().all(|p| p.dates.contains(d)))
        .copied()
        .collect();
    let mut mean = vec![0.0; dates.len()];
    let mut variance = vec![0.0; dates.len()];
    for p in parts {
        for (i, date) in dates.iter().enumerate() {
            let j = p.dates.iter().position(|d| d == date).expect("shared date");
            mean[i] += p.mean[j];
            variance[i] += p.std[j] * p.std[j];
        }
    }
    Ok(AggregateForecast {
        region_id: id.to_string(),
        dates,
        mean,
        variance,
    })
}
