//! The two-layer model: latent transforms, the SEIR-mean lower layer and the
//! joint log density.
//!
//! Latents live on an unconstrained scale. The contact rate goes through
//! `2 * beta_reference * sigmoid(g)`; the lengthscale and the rates go through
//! `offset + softplus(x)`. Contact-rate latents are attached to the distinct
//! policy vectors of a region rather than to individual days, so a region with
//! three policy regimes has three contact latents.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::RegionRecord;
use crate::error::{Error, Result};
use crate::gp::{jittered_cholesky, JitteredCholesky, KernelSpec, MaternFamily};
use crate::seir::{
    integrate_euler, reproduction_number_from_rates, EulerTape, SeedingRule, SeirParams,
    SeirTrajectory, DEFAULT_STEP_SIZE,
};

pub const LENGTHSCALE_OFFSET: f64 = 1.0;
pub const RATE_OFFSET: f64 = 1e-6;
pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `offset + softplus(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveMap {
    pub offset: f64,
}

impl PositiveMap {
    pub const LENGTHSCALE: Self = Self {
        offset: LENGTHSCALE_OFFSET,
    };
    pub const RATE: Self = Self {
        offset: RATE_OFFSET,
    };

    pub fn apply(&self, x: f64) -> f64 {
        self.offset + softplus(x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        sigmoid(x)
    }

    pub fn inverse(&self, value: f64) -> Result<f64> {
        if !(value > self.offset && value.is_finite()) {
            return Err(Error::Domain(format!(
                "{value} is not above the positivity offset {}",
                self.offset
            )));
        }
        Ok(softplus_inverse(value - self.offset))
    }
}

pub fn contact_rate(beta_reference: f64, latent: f64) -> f64 {
    2.0 * beta_reference * sigmoid(latent)
}

fn contact_rate_slope(beta_reference: f64, latent: f64) -> f64 {
    let s = sigmoid(latent);
    2.0 * beta_reference * s * (1.0 - s)
}

pub fn contact_latent(beta_reference: f64, beta: f64) -> Result<f64> {
    let p = beta / (2.0 * beta_reference);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "contact rate {beta} outside (0, {})",
            2.0 * beta_reference
        )));
    }
    Ok((p / (1.0 - p)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSpace {
    RawCumulative,
    #[default]
    Log1pCumulative,
}

impl ObservationSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::RawCumulative => "raw_cumulative",
            Self::Log1pCumulative => "log1p_cumulative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw_cumulative" => Some(Self::RawCumulative),
            "log1p_cumulative" => Some(Self::Log1pCumulative),
            _ => None,
        }
    }

    pub fn map(&self, deaths: f64) -> f64 {
        match self {
            Self::RawCumulative => deaths,
            Self::Log1pCumulative => deaths.ln_1p(),
        }
    }

    pub fn slope(&self, deaths: f64) -> f64 {
        match self {
            Self::RawCumulative => 1.0,
            Self::Log1pCumulative => 1.0 / (1.0 + deaths),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match self {
            Self::RawCumulative => y,
            Self::Log1pCumulative => y.exp_m1(),
        }
    }
}

/// Constant mean and Matérn kernel hyperparameters of one upper-layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPrior {
    pub mean: f64,
    pub signal_variance: f64,
    /// One value per input dimension, or a single value used for all.
    pub lengthscales: Vec<f64>,
}

impl OutputPrior {
    pub fn lengthscales_for(&self, dim: usize) -> Result<Vec<f64>> {
        match self.lengthscales.len() {
            1 => Ok(vec![self.lengthscales[0]; dim]),
            n if n == dim => Ok(self.lengthscales.clone()),
            n => Err(Error::Shape(format!(
                "{n} upper lengthscales for {dim} input dimensions"
            ))),
        }
    }

    pub fn kernel(&self, family: MaternFamily, dim: usize) -> Result<KernelSpec> {
        KernelSpec::new(
            family,
            self.lengthscales_for(dim)?,
            self.signal_variance,
            0.0,
        )
    }
}

pub const OUTPUT_NAMES: [&str; 5] = ["lengthscale", "beta", "sigma", "gamma", "mu"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperLayer {
    pub lengthscale: OutputPrior,
    pub beta: OutputPrior,
    pub sigma: OutputPrior,
    pub gamma: OutputPrior,
    pub mu: OutputPrior,
}

impl UpperLayer {
    pub fn output(&self, name: &str) -> Option<&OutputPrior> {
        match name {
            "lengthscale" => Some(&self.lengthscale),
            "beta" => Some(&self.beta),
            "sigma" => Some(&self.sigma),
            "gamma" => Some(&self.gamma),
            "mu" => Some(&self.mu),
            _ => None,
        }
    }

    fn output_mut(&mut self, name: &str) -> Option<&mut OutputPrior> {
        match name {
            "lengthscale" => Some(&mut self.lengthscale),
            "beta" => Some(&mut self.beta),
            "sigma" => Some(&mut self.sigma),
            "gamma" => Some(&mut self.gamma),
            "mu" => Some(&mut self.mu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerLayer {
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Starting point of the variational means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialValues {
    pub r0: f64,
    pub incubation_rate: f64,
    pub recovery_rate: f64,
    pub mortality_rate: f64,
    pub lengthscale: f64,
    pub log_std: f64,
}

impl Default for InitialValues {
    fn default() -> Self {
        Self {
            r0: 2.5,
            incubation_rate: 0.2,
            recovery_rate: 0.1,
            mortality_rate: 0.01,
            lengthscale: 7.0,
            log_std: -2.0,
        }
    }
}

/// Unconstrained values implied by [`InitialValues`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialLatents {
    pub lengthscale: f64,
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl InitialValues {
    pub fn latents(&self, beta_reference: f64) -> Result<InitialLatents> {
        let (s, g, m) = (
            self.incubation_rate,
            self.recovery_rate,
            self.mortality_rate,
        );
        let beta = self.r0 * (m + g) * (m + s) / s;
        Ok(InitialLatents {
            lengthscale: PositiveMap::LENGTHSCALE.inverse(self.lengthscale)?,
            beta: contact_latent(beta_reference, beta)?,
            sigma: PositiveMap::RATE.inverse(s)?,
            gamma: PositiveMap::RATE.inverse(g)?,
            mu: PositiveMap::RATE.inverse(m)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub beta_reference: f64,
    pub observation_space: ObservationSpace,
    pub kernel_family: MaternFamily,
    pub step_size: f64,
    pub seeding: SeedingRule,
    pub init: InitialValues,
    pub upper: UpperLayer,
    pub lower: LowerLayer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let init = InitialValues::default();
        let lat = init.latents(0.5).expect("default initial values are valid");
        let prior = |mean: f64, var: f64| OutputPrior {
            mean,
            signal_variance: var,
            lengthscales: vec![1.0],
        };
        Self {
            beta_reference: 0.5,
            observation_space: ObservationSpace::default(),
            kernel_family: MaternFamily::default(),
            step_size: DEFAULT_STEP_SIZE,
            seeding: SeedingRule::default(),
            init,
            upper: UpperLayer {
                lengthscale: prior(lat.lengthscale, 1.0),
                beta: prior(lat.beta, 1.0),
                sigma: prior(lat.sigma, 0.25),
                gamma: prior(lat.gamma, 0.25),
                mu: prior(lat.mu, 0.25),
            },
            lower: LowerLayer {
                signal_variance: 0.01,
                noise_variance: 0.0025,
            },
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_f64(key, v)).collect()
}

impl ModelConfig {
    /// Every key understood by [`ModelConfig::set`], in file order.
    pub fn keys() -> Vec<String> {
        let mut keys: Vec<String> = [
            "beta_reference",
            "observation_space",
            "kernel_family",
            "step_size",
            "seed_multiplier",
            "seed_reference_mortality",
            "seed_reference_recovery",
            "init_r0",
            "init_incubation_rate",
            "init_recovery_rate",
            "init_mortality_rate",
            "init_lengthscale",
            "init_log_std",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for name in OUTPUT_NAMES {
            for field in ["mean", "signal_variance", "lengthscale"] {
                keys.push(format!("upper_{name}_{field}"));
            }
        }
        keys.push("lower_signal_variance".into());
        keys.push("lower_noise_variance".into());
        keys
    }

    pub fn is_key(key: &str) -> bool {
        Self::keys().iter().any(|k| k == key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "beta_reference" => self.beta_reference.to_string(),
            "observation_space" => self.observation_space.as_str().to_string(),
            "kernel_family" => self.kernel_family.as_str().to_string(),
            "step_size" => self.step_size.to_string(),
            "seed_multiplier" => self.seeding.multiplier.to_string(),
            "seed_reference_mortality" => self.seeding.reference_mortality_rate.to_string(),
            "seed_reference_recovery" => self.seeding.reference_recovery_rate.to_string(),
            "init_r0" => self.init.r0.to_string(),
            "init_incubation_rate" => self.init.incubation_rate.to_string(),
            "init_recovery_rate" => self.init.recovery_rate.to_string(),
            "init_mortality_rate" => self.init.mortality_rate.to_string(),
            "init_lengthscale" => self.init.lengthscale.to_string(),
            "init_log_std" => self.init.log_std.to_string(),
            "lower_signal_variance" => self.lower.signal_variance.to_string(),
            "lower_noise_variance" => self.lower.noise_variance.to_string(),
            _ => {
                let rest = key.strip_prefix("upper_")?;
                let (name, field) = OUTPUT_NAMES.iter().find_map(|n| {
                    rest.strip_prefix(n)
                        .and_then(|f| f.strip_prefix('_'))
                        .map(|f| (*n, f))
                })?;
                let out = self.upper.output(name)?;
                match field {
                    "mean" => out.mean.to_string(),
                    "signal_variance" => out.signal_variance.to_string(),
                    "lengthscale" => out
                        .lengthscales
                        .iter()
                        .map(f64::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                    _ => return None,
                }
            }
        };
        Some(v)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || parse_f64(key, value);
        match key {
            "beta_reference" => self.beta_reference = num()?,
            "observation_space" => self.observation_space = ObservationSpace::parse(value.trim())
                .ok_or_else(|| {
                Error::Config(format!(
                    "observation_space must be raw_cumulative or log1p_cumulative, got `{value}`"
                ))
            })?,
            "kernel_family" => {
                self.kernel_family = MaternFamily::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown kernel family `{value}`")))?
            }
            "step_size" => self.step_size = num()?,
            "seed_multiplier" => self.seeding.multiplier = num()?,
            "seed_reference_mortality" => self.seeding.reference_mortality_rate = num()?,
            "seed_reference_recovery" => self.seeding.reference_recovery_rate = num()?,
            "init_r0" => self.init.r0 = num()?,
            "init_incubation_rate" => self.init.incubation_rate = num()?,
            "init_recovery_rate" => self.init.recovery_rate = num()?,
            "init_mortality_rate" => self.init.mortality_rate = num()?,
            "init_lengthscale" => self.init.lengthscale = num()?,
            "init_log_std" => self.init.log_std = num()?,
            "lower_signal_variance" => self.lower.signal_variance = num()?,
            "lower_noise_variance" => self.lower.noise_variance = num()?,
            _ => {
                let unknown = || Error::Config(format!("unknown config key `{key}`"));
                let rest = key.strip_prefix("upper_").ok_or_else(unknown)?;
                let (name, field) = OUTPUT_NAMES
                    .iter()
                    .find_map(|n| {
                        rest.strip_prefix(n)
                            .and_then(|f| f.strip_prefix('_'))
                            .map(|f| (*n, f))
                    })
                    .ok_or_else(unknown)?;
                let out = self.upper.output_mut(name).ok_or_else(unknown)?;
                match field {
                    "mean" => out.mean = num()?,
                    "signal_variance" => out.signal_variance = num()?,
                    "lengthscale" => out.lengthscales = parse_list(key, value)?,
                    _ => return Err(unknown()),
                }
            }
        }
        Ok(())
    }

    /// Builds a config from key/value pairs on top of the defaults. Upper-layer
    /// means that are not given explicitly follow the initial values.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = Self::default();
        let mut explicit = Vec::new();
        for (k, v) in pairs {
            cfg.set(k, v)?;
            explicit.push(k.to_string());
        }
        cfg.validate()?;
        let lat = cfg.init.latents(cfg.beta_reference)?;
        for (name, value) in [
            ("lengthscale", lat.lengthscale),
            ("beta", lat.beta),
            ("sigma", lat.sigma),
            ("gamma", lat.gamma),
            ("mu", lat.mu),
        ] {
            if !explicit.iter().any(|k| *k == format!("upper_{name}_mean")) {
                cfg.upper.output_mut(name).expect("known output").mean = value;
            }
        }
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        Self::keys()
            .into_iter()
            .map(|k| {
                let v = self.get(&k).expect("listed key");
                (k, v)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` must be positive, got {v}")))
            }
        };
        positive("beta_reference", self.beta_reference)?;
        positive("lower_signal_variance", self.lower.signal_variance)?;
        positive("lower_noise_variance", self.lower.noise_variance)?;
        positive("seed_multiplier", self.seeding.multiplier)?;
        positive(
            "seed_reference_mortality",
            self.seeding.reference_mortality_rate,
        )?;
        positive(
            "seed_reference_recovery",
            self.seeding.reference_recovery_rate,
        )?;
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(format!(
                "`step_size` must lie in (0, 1], got {}",
                self.step_size
            )));
        }
        for name in OUTPUT_NAMES {
            let out = self.upper.output(name).expect("known output");
            positive(
                &format!("upper_{name}_signal_variance"),
                out.signal_variance,
            )?;
            if !out.mean.is_finite() {
                return Err(Error::Config(format!("`upper_{name}_mean` must be finite")));
            }
            if out.lengthscales.is_empty() {
                return Err(Error::Config(format!(
                    "`upper_{name}_lengthscale` is empty"
                )));
            }
            for l in &out.lengthscales {
                positive(&format!("upper_{name}_lengthscale"), *l)?;
            }
        }
        self.init
            .latents(self.beta_reference)
            .map_err(|e| Error::Config(format!("initial values: {e}")))?;
        Ok(())
    }
}

/// Distinct policy vectors of a timeline, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLevels {
    pub levels: Vec<Vec<f64>>,
    /// Level index of every day.
    pub day_level: Vec<usize>,
}

impl PolicyLevels {
    pub fn from_timeline(days: &[Vec<f64>]) -> Self {
        let mut levels: Vec<Vec<f64>> = Vec::new();
        let mut day_level = Vec::with_capacity(days.len());
        for p in days {
            let idx = match levels.iter().position(|l| l == p) {
                Some(i) => i,
                None => {
                    levels.push(p.clone());
                    levels.len() - 1
                }
            };
            day_level.push(idx);
        }
        Self { levels, day_level }
    }

    pub fn find(&self, p: &[f64]) -> Option<usize> {
        self.levels.iter().position(|l| l == p)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// One region's latent parameters on the unconstrained scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLatents {
    pub lengthscale: f64,
    /// Contact latent per policy level.
    pub beta: Vec<f64>,
    pub incubation: f64,
    pub recovery: f64,
    pub mortality: f64,
    /// Level index of every modeled day.
    pub day_level: Vec<usize>,
}

impl RegionLatents {
    /// Per-day contact latents.
    pub fn beta_series(&self) -> Vec<f64> {
        self.day_level.iter().map(|l| self.beta[*l]).collect()
    }
}

/// Maps latents to SEIR parameters and the lower-layer kernel.
pub fn transform_latents(
    latents: &RegionLatents,
    config: &ModelConfig,
    population: f64,
) -> Result<(SeirParams, KernelSpec)> {
    let contact = latents
        .beta_series()
        .iter()
        .map(|g| contact_rate(config.beta_reference, *g))
        .collect();
    let params = SeirParams::new(
        contact,
        PositiveMap::RATE.apply(latents.incubation),
        PositiveMap::RATE.apply(latents.recovery),
        PositiveMap::RATE.apply(latents.mortality),
        population,
    )?;
    let kernel = KernelSpec::new(
        config.kernel_family,
        vec![PositiveMap::LENGTHSCALE.apply(latents.lengthscale)],
        config.lower.signal_variance,
        config.lower.noise_variance,
    )?;
    Ok((params, kernel))
}

/// Lower-layer prior over observed days `1..=t`.
#[derive(Debug, Clone)]
pub struct LowerPrior {
    /// Day indices as a `t x 1` input matrix.
    pub days: DMatrix<f64>,
    /// SEIR deaths mapped into the observation space.
    pub mean: DVector<f64>,
    pub kernel: KernelSpec,
    pub trajectory: SeirTrajectory,
}

pub fn day_inputs(first: usize, count: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(count, 1, (first..first + count).map(|d| d as f64))
}

/// SEIR deaths over `days` days (day 1 plus `days - 1` steps).
fn seir_deaths(
    region: &RegionRecord,
    params: &SeirParams,
    config: &ModelConfig,
    days: usize,
) -> Result<SeirTrajectory> {
    let initial = config
        .seeding
        .initial_state(region.population, region.fatalities[0]);
    if days <= 1 {
        return Ok(SeirTrajectory {
            states: vec![initial],
            step_size: config.step_size,
            clamp_events: 0,
        });
    }
    integrate_euler(&initial, params, days - 1, config.step_size)
}

pub fn lower_layer_prior(
    region: &RegionRecord,
    latents: &RegionLatents,
    config: &ModelConfig,
) -> Result<LowerPrior> {
    let t = region.num_days();
    if t == 0 {
        return Err(Error::Domain(format!(
            "`{}` has no observations",
            region.region_id
        )));
    }
    if latents.day_level.len() + 1 < t {
        return Err(Error::Range {
            day: t - 1,
            len: latents.day_level.len(),
        });
    }
    let (params, kernel) = transform_latents(latents, config, region.population)?;
    let trajectory = seir_deaths(region, &params, config, t)?;
    let mean = DVector::from_iterator(
        t,
        trajectory
            .states
            .iter()
            .map(|s| config.observation_space.map(s.deceased)),
    );
    Ok(LowerPrior {
        days: day_inputs(1, t),
        mean,
        kernel,
        trajectory,
    })
}

/// Upper-layer inputs for the policy levels of a region: features then policy.
pub fn level_inputs(features: &[f64], levels: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = features.len() + levels.first().map_or(0, Vec::len);
    DMatrix::from_fn(levels.len(), dim, |i, j| {
        if j < features.len() {
            features[j]
        } else {
            levels[i][j - features.len()]
        }
    })
}

/// `E_q[log N(x; m 1, C)]` for independent normal `x_j ~ N(mean_j, var_j)`
/// with the derivatives needed for training. With zero variances it is the
/// log density at `mean`.
#[derive(Debug, Clone)]
pub(crate) struct ExpectedLogNormal {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
    pub d_prior_mean: f64,
    /// Derivative with respect to the (jittered) covariance.
    pub d_cov: DMatrix<f64>,
}

pub(crate) fn expected_log_normal(
    mean: &[f64],
    var: &[f64],
    prior_mean: f64,
    chol: &JitteredCholesky,
    want_grad: bool,
) -> ExpectedLogNormal {
    let n = mean.len();
    let delta = DVector::from_iterator(n, mean.iter().map(|m| m - prior_mean));
    let a = chol.factor.solve(&delta);
    let inv = chol.factor.inverse();
    let log_det: f64 = 2.0
        * chol
            .factor
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let trace: f64 = (0..n).map(|j| var[j] * inv[(j, j)]).sum();
    let value = -0.5 * (delta.dot(&a) + trace + log_det + n as f64 * LN_2PI);
    if !want_grad {
        return ExpectedLogNormal {
            value,
            d_mean: Vec::new(),
            d_var: Vec::new(),
            d_prior_mean: 0.0,
            d_cov: DMatrix::zeros(0, 0),
        };
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * var[j]);
    let outer = &a * a.transpose() + scaled * &inv;
    let d_cov = 0.5 * (outer - &inv);
    ExpectedLogNormal {
        value,
        d_mean: a.iter().map(|x| -x).collect(),
        d_var: (0..n).map(|j| -0.5 * inv[(j, j)]).collect(),
        d_prior_mean: a.sum(),
        d_cov,
    }
}

/// `E[log N(x; m, s)]` for scalar `x ~ N(mean, var)`, with derivatives in
/// `(mean, var, m, log s)`.
pub(crate) fn expected_log_normal_scalar(mean: f64, var: f64, m: f64, s: f64) -> (f64, [f64; 4]) {
    let d = mean - m;
    let q = d * d + var;
    let value = -0.5 * (q / s + s.ln() + LN_2PI);
    (value, [-d / s, -0.5 / s, d / s, 0.5 * (q / s - 1.0)])
}

/// Contact-latent covariance of one region's policy levels under the upper layer.
pub(crate) fn beta_covariance(
    kernel: &KernelSpec,
    inputs: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, JitteredCholesky)> {
    let k = kernel.gram(inputs)?;
    let chol = jittered_cholesky(&k, kernel.signal_variance)?;
    Ok((k, chol))
}

/// Precomputed per-region quantities for the data term.
#[derive(Debug, Clone)]
pub(crate) struct RegionContext {
    pub observed: DVector<f64>,
    pub initial: crate::seir::SeirState,
    pub population: f64,
    pub levels: PolicyLevels,
    pub level_inputs: DMatrix<f64>,
}

impl RegionContext {
    pub fn new(region: &RegionRecord, config: &ModelConfig) -> Result<Self> {
        let t = region.num_days();
        if t == 0 {
            return Err(Error::Domain(format!(
                "`{}` has no observations",
                region.region_id
            )));
        }
        if region.policy.len() != t {
            return Err(Error::Alignment(format!(
                "`{}` has {} policy days for {t} observations",
                region.region_id,
                region.policy.len()
            )));
        }
        let levels = PolicyLevels::from_timeline(&region.policy.values);
        let level_inputs = level_inputs(&region.features, &levels.levels);
        Ok(Self {
            observed: DVector::from_iterator(
                t,
                region
                    .fatalities
                    .iter()
                    .map(|y| config.observation_space.map(*y)),
            ),
            initial: config
                .seeding
                .initial_state(region.population, region.fatalities[0]),
            population: region.population,
            levels,
            level_inputs,
        })
    }
}

/// Unconstrained parameters of one region for the data term.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Theta<'a> {
    pub sigma: f64,
    pub lengthscale: f64,
    pub gamma: f64,
    pub mu: f64,
    pub beta: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub(crate) struct DataGrad {
    pub sigma: f64,
    pub lengthscale: f64,
    pub gamma: f64,
    pub mu: f64,
    pub beta: Vec<f64>,
    pub log_signal: f64,
    pub log_noise: f64,
}

/// `log N(y; h(D_theta), s K_l + eta I)` over the observed days, with its
/// exact gradient when requested.
pub(crate) fn data_log_likelihood(
    ctx: &RegionContext,
    theta: Theta<'_>,
    lower: LowerLayer,
    config: &ModelConfig,
    grad: Option<&mut DataGrad>,
) -> Result<f64> {
    let t = ctx.observed.len();
    let beta_ref = config.beta_reference;
    let sigma = PositiveMap::RATE.apply(theta.sigma);
    let gamma = PositiveMap::RATE.apply(theta.gamma);
    let mu = PositiveMap::RATE.apply(theta.mu);
    let ell = PositiveMap::LENGTHSCALE.apply(theta.lengthscale);

    let horizon = t - 1;
    let contact: Vec<f64> = (0..horizon)
        .map(|d| contact_rate(beta_ref, theta.beta[ctx.levels.day_level[d]]))
        .collect();
    let tape = if horizon > 0 {
        let params = SeirParams::new(contact, sigma, gamma, mu, ctx.population)?;
        Some(EulerTape::record(
            &ctx.initial,
            &params,
            horizon,
            config.step_size,
        )?)
    } else {
        None
    };
    let deaths: Vec<f64> = match &tape {
        Some(tape) => tape.trajectory().deceased(),
        None => vec![ctx.initial.deceased],
    };
    let obs = config.observation_space;
    let resid = DVector::from_iterator(
        t,
        ctx.observed
            .iter()
            .zip(&deaths)
            .map(|(y, d)| y - obs.map(*d)),
    );

    let s = lower.signal_variance;
    let eta = lower.noise_variance;
    let unit = KernelSpec {
        family: config.kernel_family,
        lengthscales: vec![ell],
        signal_variance: 1.0,
        noise_variance: 0.0,
    };
    let mut corr = DMatrix::zeros(t, t);
    let mut d_corr = DMatrix::zeros(t, t);
    for i in 0..t {
        corr[(i, i)] = 1.0;
        for j in 0..i {
            let g = unit.eval_with_grad(&[i as f64], &[j as f64]);
            corr[(i, j)] = g.value;
            corr[(j, i)] = g.value;
            d_corr[(i, j)] = g.d_log_lengthscale[0];
            d_corr[(j, i)] = g.d_log_lengthscale[0];
        }
    }
    let mut cov = &corr * s;
    for i in 0..t {
        cov[(i, i)] += eta;
    }
    let chol = jittered_cholesky(&cov, s)?;
    let a = chol.factor.solve(&resid);
    let log_det: f64 = 2.0
        * chol
            .factor
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let value = -0.5 * (resid.dot(&a) + log_det + t as f64 * LN_2PI);

    let Some(grad) = grad else {
        return Ok(value);
    };
    let inv = chol.factor.inverse();
    let w = 0.5 * (&a * a.transpose() - &inv);
    let tr_w: f64 = w.diagonal().sum();
    grad.log_signal = s * w.dot(&corr) + chol.jitter * tr_w;
    grad.log_noise = eta * tr_w;
    grad.lengthscale = s * w.dot(&d_corr) / ell * PositiveMap::LENGTHSCALE.slope(theta.lengthscale);
    grad.beta = vec![0.0; theta.beta.len()];
    grad.sigma = 0.0;
    grad.gamma = 0.0;
    grad.mu = 0.0;
    if let Some(tape) = &tape {
        let d_deaths: Vec<f64> = deaths
            .iter()
            .zip(a.iter())
            .map(|(d, ai)| ai * obs.slope(*d))
            .collect();
        let g = tape.backward(&d_deaths)?;
        for (d, gc) in g.contact_rate.iter().enumerate() {
            let lvl = ctx.levels.day_level[d];
            grad.beta[lvl] += gc * contact_rate_slope(beta_ref, theta.beta[lvl]);
        }
        grad.sigma = g.incubation_rate * PositiveMap::RATE.slope(theta.sigma);
        grad.gamma = g.recovery_rate * PositiveMap::RATE.slope(theta.gamma);
        grad.mu = g.mortality_rate * PositiveMap::RATE.slope(theta.mu);
    }
    Ok(value)
}

/// `log P(Y | theta) + log P(theta | X, P, alpha)` for one region at the given
/// latents, using the upper layer stored in `config`.
pub fn joint_log_density(
    region: &RegionRecord,
    latents: &RegionLatents,
    config: &ModelConfig,
) -> Result<f64> {
    let ctx = RegionContext::new(region, config)?;
    if latents.beta.len() != ctx.levels.len() {
        return Err(Error::Shape(format!(
            "{} contact latents for {} policy levels",
            latents.beta.len(),
            ctx.levels.len()
        )));
    }
    let theta = Theta {
        sigma: latents.incubation,
        lengthscale: latents.lengthscale,
        gamma: latents.recovery,
        mu: latents.mortality,
        beta: &latents.beta,
    };
    let data = data_log_likelihood(&ctx, theta, config.lower, config, None)?;
    let up = &config.upper;
    let scalar =
        |x: f64, p: &OutputPrior| expected_log_normal_scalar(x, 0.0, p.mean, p.signal_variance).0;
    let mut prior = scalar(latents.lengthscale, &up.lengthscale)
        + scalar(latents.incubation, &up.sigma)
        + scalar(latents.recovery, &up.gamma)
        + scalar(latents.mortality, &up.mu);
    let kernel = up
        .beta
        .kernel(config.kernel_family, ctx.level_inputs.ncols())?;
    let (_, chol) = beta_covariance(&kernel, &ctx.level_inputs)?;
    let zeros = vec![0.0; latents.beta.len()];
    prior += expected_log_normal(&latents.beta, &zeros, up.beta.mean, &chol, false).value;
    Ok(data + prior)
}

/// Reproduction number implied by unconstrained latents.
pub fn latent_reproduction_number(
    beta_reference: f64,
    beta_latent: f64,
    incubation: f64,
    recovery: f64,
    mortality: f64,
) -> f64 {
    reproduction_number_from_rates(
        contact_rate(beta_reference, beta_latent),
        PositiveMap::RATE.apply(incubation),
        PositiveMap::RATE.apply(recovery),
        PositiveMap::RATE.apply(mortality),
    )
}
