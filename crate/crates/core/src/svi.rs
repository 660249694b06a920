//! Stochastic variational inference with a mean-field normal family.
//!
//! The data term is estimated by reparameterized Monte Carlo. The prior
//! cross-term and the entropy of the variational family are analytic.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RegionRecord;
use crate::error::{Error, Result};
use crate::gp::KernelSpec;
use crate::model::{
    beta_covariance, data_log_likelihood, expected_log_normal, expected_log_normal_scalar,
    DataGrad, LowerLayer, ModelConfig, RegionContext, Theta, LN_2PI,
};
use crate::posterior::PosteriorModel;

pub const MIN_LOG_STD: f64 = -13.815_510_557_964_274; // ln 1e-6
pub const MAX_LOG_STD: f64 = 6.907_755_278_982_137; // ln 1e3
pub const MAX_CONSECUTIVE_FAILURES: usize = 10;

/// A model as seen by the trainer: a sampled likelihood term and an analytic
/// prior term over `num_latents` latents and `num_hyper` hyperparameters.
/// Gradient buffers are accumulated into, never overwritten.
pub trait Objective: Sync {
    fn num_latents(&self) -> usize;
    fn num_hyper(&self) -> usize;
    fn latent_name(&self, k: usize) -> String;
    fn hyper_name(&self, k: usize) -> String;

    fn log_likelihood(
        &self,
        theta: &[f64],
        hyper: &[f64],
        grad_theta: &mut [f64],
        grad_hyper: &mut [f64],
    ) -> Result<f64>;

    /// `E_q[log p(theta | hyper)]` for independent `theta_k ~ N(mean_k, var_k)`.
    fn expected_log_prior(
        &self,
        mean: &[f64],
        var: &[f64],
        hyper: &[f64],
        grad_mean: &mut [f64],
        grad_var: &mut [f64],
        grad_hyper: &mut [f64],
    ) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Hyperparameters on their unconstrained scale.
    pub hyper: Vec<f64>,
}

impl VariationalParams {
    pub fn zeros(num_latents: usize, num_hyper: usize) -> Self {
        Self {
            mean: vec![0.0; num_latents],
            log_std: vec![0.0; num_latents],
            hyper: vec![0.0; num_hyper],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len() + self.log_std.len() + self.hyper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|l| l.clamp(MIN_LOG_STD, MAX_LOG_STD).exp())
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.mean);
        v.extend_from_slice(&self.log_std);
        v.extend_from_slice(&self.hyper);
        v
    }

    pub fn from_flat(flat: &[f64], num_latents: usize) -> Self {
        Self {
            mean: flat[..num_latents].to_vec(),
            log_std: flat[num_latents..2 * num_latents].to_vec(),
            hyper: flat[2 * num_latents..].to_vec(),
        }
    }

    fn check(&self, obj: &dyn Objective) -> Result<()> {
        if self.mean.len() != obj.num_latents()
            || self.log_std.len() != obj.num_latents()
            || self.hyper.len() != obj.num_hyper()
        {
            return Err(Error::Shape(format!(
                "variational parameters ({}, {}, {}) do not match the model ({} latents, {} hyperparameters)",
                self.mean.len(),
                self.log_std.len(),
                self.hyper.len(),
                obj.num_latents(),
                obj.num_hyper()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    /// Monte Carlo standard error of the sampled term.
    pub std_error: f64,
}

/// SplitMix64 step, used to derive independent seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn standard_normals(seed: u64, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|l| l.clamp(MIN_LOG_STD, MAX_LOG_STD) + 0.5 * (LN_2PI + 1.0))
        .sum()
}

struct SampleTerm {
    value: f64,
    grad_theta: Vec<f64>,
    grad_hyper: Vec<f64>,
}

fn evaluate(
    obj: &dyn Objective,
    params: &VariationalParams,
    num_samples: usize,
    seed: u64,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<VariationalParams>)> {
    if num_samples == 0 {
        return Err(Error::Domain("num_samples must be at least 1".into()));
    }
    params.check(obj)?;
    let n = obj.num_latents();
    let h = obj.num_hyper();
    let std = params.std();
    let eps = standard_normals(seed, num_samples, n);
    let terms: Vec<Result<SampleTerm>> = eps
        .par_iter()
        .map(|e| {
            let theta: Vec<f64> = (0..n).map(|k| params.mean[k] + std[k] * e[k]).collect();
            let mut grad_theta = vec![0.0; n];
            let mut grad_hyper = vec![0.0; h];
            let value =
                obj.log_likelihood(&theta, &params.hyper, &mut grad_theta, &mut grad_hyper)?;
            Ok(SampleTerm {
                value,
                grad_theta,
                grad_hyper,
            })
        })
        .collect();
    let terms: Vec<SampleTerm> = terms.into_iter().collect::<Result<_>>()?;

    let s = num_samples as f64;
    let values: Vec<f64> = terms.iter().map(|t| t.value).collect();
    let mc_mean = values.iter().sum::<f64>() / s;
    let std_error = if num_samples > 1 {
        let var = values.iter().map(|v| (v - mc_mean).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        0.0
    };

    let var: Vec<f64> = std.iter().map(|x| x * x).collect();
    let mut g_mean = vec![0.0; n];
    let mut g_var = vec![0.0; n];
    let mut g_hyper = vec![0.0; h];
    let prior = obj.expected_log_prior(
        &params.mean,
        &var,
        &params.hyper,
        &mut g_mean,
        &mut g_var,
        &mut g_hyper,
    )?;
    let value = mc_mean + prior + entropy(&params.log_std);
    let estimate = ElboEstimate { value, std_error };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("ELBO estimate is {value}")));
    }
    if !want_grad {
        return Ok((estimate, None));
    }

    let mut g_log_std = vec![0.0; n];
    for (t, e) in terms.iter().zip(&eps) {
        for k in 0..n {
            g_mean[k] += t.grad_theta[k] / s;
            g_log_std[k] += t.grad_theta[k] * e[k] * std[k] / s;
        }
        for j in 0..h {
            g_hyper[j] += t.grad_hyper[j] / s;
        }
    }
    for k in 0..n {
        let l = params.log_std[k];
        g_log_std[k] = if (MIN_LOG_STD..=MAX_LOG_STD).contains(&l) {
            g_log_std[k] + 2.0 * var[k] * g_var[k] + 1.0
        } else {
            0.0
        };
    }
    let grad = VariationalParams {
        mean: g_mean,
        log_std: g_log_std,
        hyper: g_hyper,
    };
    for (k, g) in grad.mean.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Training {
                parameter: format!("mean of {}", obj.latent_name(k)),
                message: format!("gradient is {g}"),
            });
        }
    }
    for (k, g) in grad.log_std.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Training {
                parameter: format!("log-std of {}", obj.latent_name(k)),
                message: format!("gradient is {g}"),
            });
        }
    }
    for (k, g) in grad.hyper.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Training {
                parameter: obj.hyper_name(k),
                message: format!("gradient is {g}"),
            });
        }
    }
    Ok((estimate, Some(grad)))
}

/// Seeded Monte Carlo estimate of the evidence lower bound.
pub fn elbo_estimate(
    obj: &dyn Objective,
    params: &VariationalParams,
    num_samples: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    Ok(evaluate(obj, params, num_samples, seed, false)?.0)
}

/// Exact gradient of the seeded estimator for the realized noise draws.
pub fn elbo_gradient(
    obj: &dyn Objective,
    params: &VariationalParams,
    num_samples: usize,
    seed: u64,
) -> Result<(ElboEstimate, VariationalParams)> {
    let (est, grad) = evaluate(obj, params, num_samples, seed, true)?;
    Ok((est, grad.expect("gradient requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for [`Adam`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, adam: &Adam, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - adam.beta1.powi(self.t);
        let c2 = 1.0 - adam.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = adam.beta1 * self.m[i] + (1.0 - adam.beta1) * grad[i];
            self.v[i] = adam.beta2 * self.v[i] + (1.0 - adam.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += adam.learning_rate * m_hat / (v_hat.sqrt() + adam.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.01,
            num_samples: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub params: VariationalParams,
    /// ELBO estimate at the start of every iteration; NaN where the iteration was skipped.
    pub elbo: Vec<f64>,
    pub skipped: usize,
}

/// Maximizes the ELBO with ADAM. Iterations whose estimate or gradient is not
/// finite are skipped; too many in a row abort training.
pub fn optimize(
    obj: &dyn Objective,
    init: VariationalParams,
    options: &TrainOptions,
) -> Result<OptimizeResult> {
    init.check(obj)?;
    let adam = Adam::new(options.learning_rate);
    let n = obj.num_latents();
    let mut flat = init.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut elbo = Vec::with_capacity(options.iterations);
    let mut skipped = 0;
    let mut consecutive = 0;
    for it in 0..options.iterations {
        let params = VariationalParams::from_flat(&flat, n);
        let seed = derive_seed(options.seed, it as u64);
        match elbo_gradient(obj, &params, options.num_samples, seed) {
            Ok((est, grad)) => {
                consecutive = 0;
                elbo.push(est.value);
                state.step(&adam, &mut flat, &grad.to_flat());
            }
            Err(e) => {
                skipped += 1;
                consecutive += 1;
                elbo.push(f64::NAN);
                log::debug!("iteration {it} skipped: {e}");
                if consecutive >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::TrainingAborted(format!(
                        "{consecutive} consecutive non-finite iterations ending at iteration {it}; last error: {e}"
                    )));
                }
            }
        }
        if it % 100 == 0 {
            log::info!("iteration {it}: elbo {:.4}", elbo[it]);
        }
    }
    Ok(OptimizeResult {
        params: VariationalParams::from_flat(&flat, n),
        elbo,
        skipped,
    })
}

pub const H_LENGTHSCALE_MEAN: usize = 0;
pub const H_LENGTHSCALE_LOG_VAR: usize = 1;
pub const H_GAMMA_MEAN: usize = 2;
pub const H_GAMMA_LOG_VAR: usize = 3;
pub const H_MU_MEAN: usize = 4;
pub const H_MU_LOG_VAR: usize = 5;
pub const H_BETA_MEAN: usize = 6;
pub const H_BETA_LOG_VAR: usize = 7;
pub const H_BETA_LOG_LENGTHSCALE: usize = 8;

/// Latent layout: index 0 is the shared incubation rate; then every region
/// holds `[lengthscale, gamma, mu, beta_0, .., beta_{L-1}]`.
pub struct CgpObjective {
    config: ModelConfig,
    ids: Vec<String>,
    contexts: Vec<RegionContext>,
    offsets: Vec<usize>,
    num_latents: usize,
    input_dim: usize,
}

impl CgpObjective {
    pub fn new(regions: &[RegionRecord], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if regions.is_empty() {
            return Err(Error::Domain("training needs at least one region".into()));
        }
        if !regions.iter().any(|r| r.num_days() >= 5) {
            return Err(Error::Domain(
                "training needs a region with at least 5 observed days".into(),
            ));
        }
        let k = regions[0].policy.values.first().map_or(0, Vec::len);
        let d = regions[0].features.len();
        let mut contexts = Vec::with_capacity(regions.len());
        let mut offsets = Vec::with_capacity(regions.len());
        let mut next = 1;
        for r in regions {
            if r.features.len() != d || r.policy.values.iter().any(|p| p.len() != k) {
                return Err(Error::Shape(format!(
                    "`{}` does not share the feature/indicator dimensions ({d}, {k})",
                    r.region_id
                )));
            }
            let ctx = RegionContext::new(r, config)?;
            offsets.push(next);
            next += 3 + ctx.levels.len();
            contexts.push(ctx);
        }
        Ok(Self {
            config: config.clone(),
            ids: regions.iter().map(|r| r.region_id.clone()).collect(),
            contexts,
            offsets,
            num_latents: next,
            input_dim: d + k,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn region_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn region_offset(&self, r: usize) -> usize {
        self.offsets[r]
    }

    pub fn num_levels(&self, r: usize) -> usize {
        self.contexts[r].levels.len()
    }

    fn lower_index(&self) -> usize {
        H_BETA_LOG_LENGTHSCALE + self.input_dim
    }

    /// Initial variational parameters from the config.
    pub fn initial_params(&self) -> Result<VariationalParams> {
        let cfg = &self.config;
        let lat = cfg.init.latents(cfg.beta_reference)?;
        let mut mean = vec![0.0; self.num_latents];
        mean[0] = lat.sigma;
        for (r, ctx) in self.contexts.iter().enumerate() {
            let o = self.offsets[r];
            mean[o] = lat.lengthscale;
            mean[o + 1] = lat.gamma;
            mean[o + 2] = lat.mu;
            for l in 0..ctx.levels.len() {
                mean[o + 3 + l] = lat.beta;
            }
        }
        let up = &cfg.upper;
        let mut hyper = vec![0.0; self.num_hyper()];
        hyper[H_LENGTHSCALE_MEAN] = up.lengthscale.mean;
        hyper[H_LENGTHSCALE_LOG_VAR] = up.lengthscale.signal_variance.ln();
        hyper[H_GAMMA_MEAN] = up.gamma.mean;
        hyper[H_GAMMA_LOG_VAR] = up.gamma.signal_variance.ln();
        hyper[H_MU_MEAN] = up.mu.mean;
        hyper[H_MU_LOG_VAR] = up.mu.signal_variance.ln();
        hyper[H_BETA_MEAN] = up.beta.mean;
        hyper[H_BETA_LOG_VAR] = up.beta.signal_variance.ln();
        let ls = up.beta.lengthscales_for(self.input_dim)?;
        for (j, l) in ls.iter().enumerate() {
            hyper[H_BETA_LOG_LENGTHSCALE + j] = l.ln();
        }
        let li = self.lower_index();
        hyper[li] = cfg.lower.signal_variance.ln();
        hyper[li + 1] = cfg.lower.noise_variance.ln();
        Ok(VariationalParams {
            mean,
            log_std: vec![cfg.init.log_std; self.num_latents],
            hyper,
        })
    }

    /// Config with the upper and lower layers replaced by the hyperparameters.
    pub fn learned_config(&self, hyper: &[f64]) -> ModelConfig {
        let mut cfg = self.config.clone();
        cfg.upper.lengthscale.mean = hyper[H_LENGTHSCALE_MEAN];
        cfg.upper.lengthscale.signal_variance = hyper[H_LENGTHSCALE_LOG_VAR].exp();
        cfg.upper.gamma.mean = hyper[H_GAMMA_MEAN];
        cfg.upper.gamma.signal_variance = hyper[H_GAMMA_LOG_VAR].exp();
        cfg.upper.mu.mean = hyper[H_MU_MEAN];
        cfg.upper.mu.signal_variance = hyper[H_MU_LOG_VAR].exp();
        cfg.upper.beta.mean = hyper[H_BETA_MEAN];
        cfg.upper.beta.signal_variance = hyper[H_BETA_LOG_VAR].exp();
        cfg.upper.beta.lengthscales = hyper
            [H_BETA_LOG_LENGTHSCALE..H_BETA_LOG_LENGTHSCALE + self.input_dim]
            .iter()
            .map(|l| l.exp())
            .collect();
        let li = self.lower_index();
        cfg.lower = LowerLayer {
            signal_variance: hyper[li].exp(),
            noise_variance: hyper[li + 1].exp(),
        };
        cfg
    }

    fn beta_kernel(&self, hyper: &[f64]) -> KernelSpec {
        KernelSpec {
            family: self.config.kernel_family,
            lengthscales: hyper[H_BETA_LOG_LENGTHSCALE..H_BETA_LOG_LENGTHSCALE + self.input_dim]
                .iter()
                .map(|l| l.exp())
                .collect(),
            signal_variance: hyper[H_BETA_LOG_VAR].exp(),
            noise_variance: 0.0,
        }
    }
}

struct RegionPriorTerm {
    value: f64,
    g_mean: Vec<f64>,
    g_var: Vec<f64>,
    g_hyper: Vec<(usize, f64)>,
}

impl Objective for CgpObjective {
    fn num_latents(&self) -> usize {
        self.num_latents
    }

    fn num_hyper(&self) -> usize {
        self.lower_index() + 2
    }

    fn latent_name(&self, k: usize) -> String {
        if k == 0 {
            return "sigma".into();
        }
        let r = self.offsets.partition_point(|o| *o <= k) - 1;
        let id = &self.ids[r];
        match k - self.offsets[r] {
            0 => format!("{id}.lengthscale"),
            1 => format!("{id}.gamma"),
            2 => format!("{id}.mu"),
            l => format!("{id}.beta[{}]", l - 3),
        }
    }

    fn hyper_name(&self, k: usize) -> String {
        let li = self.lower_index();
        match k {
            H_LENGTHSCALE_MEAN => "upper.lengthscale.mean".into(),
            H_LENGTHSCALE_LOG_VAR => "upper.lengthscale.log_signal_variance".into(),
            H_GAMMA_MEAN => "upper.gamma.mean".into(),
            H_GAMMA_LOG_VAR => "upper.gamma.log_signal_variance".into(),
            H_MU_MEAN => "upper.mu.mean".into(),
            H_MU_LOG_VAR => "upper.mu.log_signal_variance".into(),
            H_BETA_MEAN => "upper.beta.mean".into(),
            H_BETA_LOG_VAR => "upper.beta.log_signal_variance".into(),
            k if k < li => format!("upper.beta.log_lengthscale[{}]", k - H_BETA_LOG_LENGTHSCALE),
            k if k == li => "lower.log_signal_variance".into(),
            _ => "lower.log_noise_variance".into(),
        }
    }

    fn log_likelihood(
        &self,
        theta: &[f64],
        hyper: &[f64],
        grad_theta: &mut [f64],
        grad_hyper: &mut [f64],
    ) -> Result<f64> {
        let li = self.lower_index();
        let lower = LowerLayer {
            signal_variance: hyper[li].exp(),
            noise_variance: hyper[li + 1].exp(),
        };
        let terms: Vec<Result<(f64, DataGrad)>> = (0..self.contexts.len())
            .into_par_iter()
            .map(|r| {
                let o = self.offsets[r];
                let ctx = &self.contexts[r];
                let th = Theta {
                    sigma: theta[0],
                    lengthscale: theta[o],
                    gamma: theta[o + 1],
                    mu: theta[o + 2],
                    beta: &theta[o + 3..o + 3 + ctx.levels.len()],
                };
                let mut g = DataGrad::default();
                let v = data_log_likelihood(ctx, th, lower, &self.config, Some(&mut g))?;
                Ok((v, g))
            })
            .collect();
        let mut total = 0.0;
        for (r, term) in terms.into_iter().enumerate() {
            let (v, g) = term?;
            let o = self.offsets[r];
            total += v;
            grad_theta[0] += g.sigma;
            grad_theta[o] += g.lengthscale;
            grad_theta[o + 1] += g.gamma;
            grad_theta[o + 2] += g.mu;
            for (l, gb) in g.beta.iter().enumerate() {
                grad_theta[o + 3 + l] += gb;
            }
            grad_hyper[li] += g.log_signal;
            grad_hyper[li + 1] += g.log_noise;
        }
        Ok(total)
    }

    fn expected_log_prior(
        &self,
        mean: &[f64],
        var: &[f64],
        hyper: &[f64],
        grad_mean: &mut [f64],
        grad_var: &mut [f64],
        grad_hyper: &mut [f64],
    ) -> Result<f64> {
        let sp = &self.config.upper.sigma;
        let (sigma_value, sg) =
            expected_log_normal_scalar(mean[0], var[0], sp.mean, sp.signal_variance);
        grad_mean[0] += sg[0];
        grad_var[0] += sg[1];

        let kernel = self.beta_kernel(hyper);
        let scalars = [
            (0, H_LENGTHSCALE_MEAN, H_LENGTHSCALE_LOG_VAR),
            (1, H_GAMMA_MEAN, H_GAMMA_LOG_VAR),
            (2, H_MU_MEAN, H_MU_LOG_VAR),
        ];
        let terms: Vec<Result<RegionPriorTerm>> = (0..self.contexts.len())
            .into_par_iter()
            .map(|r| {
                let o = self.offsets[r];
                let ctx = &self.contexts[r];
                let nl = ctx.levels.len();
                let mut value = 0.0;
                let mut g_mean = vec![0.0; 3 + nl];
                let mut g_var = vec![0.0; 3 + nl];
                let mut g_hyper = Vec::new();
                for (slot, hm, hv) in scalars {
                    let (v, g) = expected_log_normal_scalar(
                        mean[o + slot],
                        var[o + slot],
                        hyper[hm],
                        hyper[hv].exp(),
                    );
                    value += v;
                    g_mean[slot] += g[0];
                    g_var[slot] += g[1];
                    g_hyper.push((hm, g[2]));
                    g_hyper.push((hv, g[3]));
                }
                let (k, chol) = beta_covariance(&kernel, &ctx.level_inputs)?;
                let e = expected_log_normal(
                    &mean[o + 3..o + 3 + nl],
                    &var[o + 3..o + 3 + nl],
                    hyper[H_BETA_MEAN],
                    &chol,
                    true,
                );
                value += e.value;
                for l in 0..nl {
                    g_mean[3 + l] += e.d_mean[l];
                    g_var[3 + l] += e.d_var[l];
                }
                g_hyper.push((H_BETA_MEAN, e.d_prior_mean));
                // dC/dlog s = C, including the jitter which scales with s
                let mut c = k.clone();
                for i in 0..nl {
                    c[(i, i)] += chol.jitter;
                }
                g_hyper.push((H_BETA_LOG_VAR, e.d_cov.dot(&c)));
                let rows: Vec<Vec<f64>> = (0..nl)
                    .map(|i| ctx.level_inputs.row(i).iter().copied().collect())
                    .collect();
                let mut d_ls = vec![0.0; self.input_dim];
                for i in 0..nl {
                    for j in 0..i {
                        let kg = kernel.eval_with_grad(&rows[i], &rows[j]);
                        for (dim, dk) in kg.d_log_lengthscale.iter().enumerate() {
                            d_ls[dim] += 2.0 * e.d_cov[(i, j)] * dk;
                        }
                    }
                }
                for (dim, g) in d_ls.into_iter().enumerate() {
                    g_hyper.push((H_BETA_LOG_LENGTHSCALE + dim, g));
                }
                Ok(RegionPriorTerm {
                    value,
                    g_mean,
                    g_var,
                    g_hyper,
                })
            })
            .collect();
        let mut total = sigma_value;
        for (r, term) in terms.into_iter().enumerate() {
            let t = term?;
            let o = self.offsets[r];
            total += t.value;
            for (i, (gm, gv)) in t.g_mean.iter().zip(&t.g_var).enumerate() {
                grad_mean[o + i] += gm;
                grad_var[o + i] += gv;
            }
            for (idx, g) in t.g_hyper {
                grad_hyper[idx] += g;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub elbo: Vec<f64>,
    pub final_params: VariationalParams,
    pub latent_names: Vec<String>,
    pub hyper_names: Vec<String>,
    pub wall_clock_seconds: f64,
    pub skipped_iterations: usize,
    /// Euler clamp events when integrating every region at the final means.
    pub clamp_events: usize,
    pub seed: u64,
}

impl TrainReport {
    pub fn elbo_csv(&self) -> String {
        let mut out = String::from("iteration,elbo\n");
        for (i, v) in self.elbo.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

/// Trains the two-layer model on the given regions.
pub fn train(
    regions: &[RegionRecord],
    config: &ModelConfig,
    options: &TrainOptions,
) -> Result<(PosteriorModel, TrainReport)> {
    let started = Instant::now();
    let obj = CgpObjective::new(regions, config)?;
    let init = obj.initial_params()?;
    let result = optimize(&obj, init, options)?;
    let model = PosteriorModel::from_objective(&obj, regions, &result.params)?;
    let clamp_events = model.clamp_events(regions)?;
    let report = TrainReport {
        elbo: result.elbo,
        final_params: result.params,
        latent_names: (0..obj.num_latents()).map(|k| obj.latent_name(k)).collect(),
        hyper_names: (0..obj.num_hyper()).map(|k| obj.hyper_name(k)).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        skipped_iterations: result.skipped,
        clamp_events,
        seed: options.seed,
    };
    Ok((model, report))
}

/// Helper for tests and diagnostics: central finite differences of the seeded
/// estimator along every coordinate of the flattened parameters.
pub fn finite_difference_gradient(
    obj: &dyn Objective,
    params: &VariationalParams,
    num_samples: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<f64>> {
    let n = obj.num_latents();
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut up = flat.clone();
        let mut down = flat.clone();
        up[i] += step;
        down[i] -= step;
        let f_up = elbo_estimate(
            obj,
            &VariationalParams::from_flat(&up, n),
            num_samples,
            seed,
        )?;
        let f_down = elbo_estimate(
            obj,
            &VariationalParams::from_flat(&down, n),
            num_samples,
            seed,
        )?;
        out.push((f_up.value - f_down.value) / (2.0 * step));
    }
    Ok(out)
}
