//! Matérn kernels and exact Gaussian process conditioning.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter added to every Gram diagonal before factorisation.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaternFamily {
    MaternHalf,
    #[default]
    MaternThreeHalf,
    MaternFiveHalf,
}

impl MaternFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaternFamily::MaternHalf => "matern_half",
            MaternFamily::MaternThreeHalf => "matern_three_half",
            MaternFamily::MaternFiveHalf => "matern_five_half",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "matern_half" => Some(Self::MaternHalf),
            "matern_three_half" => Some(Self::MaternThreeHalf),
            "matern_five_half" => Some(Self::MaternFiveHalf),
            _ => None,
        }
    }

    /// Unit-variance correlation at scaled distance `r`.
    fn correlation(&self, r: f64) -> f64 {
        match self {
            MaternFamily::MaternHalf => (-r).exp(),
            MaternFamily::MaternThreeHalf => {
                let a = 3f64.sqrt() * r;
                (1.0 + a) * (-a).exp()
            }
            MaternFamily::MaternFiveHalf => {
                let a = 5f64.sqrt() * r;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }

    /// `(d corr / dr) / r`, finite at `r = 0` except for the exponential kernel.
    fn correlation_slope_over_r(&self, r: f64) -> f64 {
        match self {
            MaternFamily::MaternHalf => {
                if r > 0.0 {
                    -(-r).exp() / r
                } else {
                    0.0
                }
            }
            MaternFamily::MaternThreeHalf => -3.0 * (-(3f64.sqrt()) * r).exp(),
            MaternFamily::MaternFiveHalf => {
                let a = 5f64.sqrt() * r;
                -(5.0 / 3.0) * (1.0 + a) * (-a).exp()
            }
        }
    }
}

impl fmt::Display for MaternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matérn kernel with ARD lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: MaternFamily,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Kernel value together with its derivatives in log-hyperparameter space.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub value: f64,
    /// `dk / d log(lengthscale_j)` per input dimension.
    pub d_log_lengthscale: Vec<f64>,
    /// `dk / d log(signal_variance)`, which equals `value`.
    pub d_log_signal_variance: f64,
}

impl KernelSpec {
    pub fn new(
        family: MaternFamily,
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let spec = Self {
            family,
            lengthscales,
            signal_variance,
            noise_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::Shape("kernel needs at least one lengthscale".into()));
        }
        if self
            .lengthscales
            .iter()
            .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err(Error::Domain(format!(
                "lengthscales must be positive: {:?}",
                self.lengthscales
            )));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::Domain(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::Domain(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn scaled_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let z = (a - b) / l;
                z * z
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.signal_variance * self.family.correlation(self.scaled_distance(x, y))
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || y.len() != self.dim() {
            return Err(Error::Shape(format!(
                "kernel over {} dims evaluated at points of dims {} and {}",
                self.dim(),
                x.len(),
                y.len()
            )));
        }
        Ok(self.eval_unchecked(x, y))
    }

    pub fn eval_with_grad(&self, x: &[f64], y: &[f64]) -> KernelGrad {
        let r = self.scaled_distance(x, y);
        let value = self.signal_variance * self.family.correlation(r);
        let slope = self.signal_variance * self.family.correlation_slope_over_r(r);
        // dr/dlog(l_j) = -(dx_j / l_j)^2 / r, so dk/dlog(l_j) = -slope_over_r * (dx_j / l_j)^2
        let d_log_lengthscale = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let z = (a - b) / l;
                -slope * z * z
            })
            .collect();
        KernelGrad {
            value,
            d_log_lengthscale,
            d_log_signal_variance: value,
        }
    }

    /// Gram matrix over the rows of `inputs`, without noise or jitter.
    pub fn gram(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(inputs)?;
        let rows = row_vectors(inputs);
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval_unchecked(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Cross-covariance between rows of `a` and rows of `b`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(a)?;
        self.check_inputs(b)?;
        let ra = row_vectors(a);
        let rb = row_vectors(b);
        Ok(DMatrix::from_fn(ra.len(), rb.len(), |i, j| {
            self.eval_unchecked(&ra[i], &rb[j])
        }))
    }

    fn check_inputs(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns but the kernel has {} lengthscales",
                inputs.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

pub(crate) fn row_vectors(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Cholesky factor of `matrix + jitter * I` with the escalating jitter policy:
/// relative jitter starts at [`BASE_JITTER`] times `scale` and grows by 10x up
/// to [`MAX_JITTER`].
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
    /// Number of escalations beyond the base jitter.
    pub escalations: usize,
}

pub fn jittered_cholesky(matrix: &DMatrix<f64>, scale: f64) -> Result<JitteredCholesky> {
    let n = matrix.nrows();
    let mut relative = BASE_JITTER;
    let mut escalations = 0;
    loop {
        let jitter = relative * scale;
        let mut a = matrix.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(a) {
            if escalations > 0 {
                log::debug!("cholesky needed jitter {jitter:e} after {escalations} escalations");
            }
            return Ok(JitteredCholesky {
                factor,
                jitter,
                escalations,
            });
        }
        relative *= 10.0;
        escalations += 1;
        if relative > MAX_JITTER * (1.0 + 1e-9) {
            let diag_min = (0..n).map(|i| matrix[(i, i)]).fold(f64::INFINITY, f64::min);
            let diag_max = (0..n)
                .map(|i| matrix[(i, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let finite = matrix.iter().all(|v| v.is_finite());
            return Err(Error::Numerical(format!(
                "cholesky failed for a {n}x{n} matrix after jitter {:e}; diagonal range [{diag_min:e}, {diag_max:e}], all finite: {finite}",
                MAX_JITTER * scale
            )));
        }
    }
}

pub type MeanFunction = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

pub fn zero_mean() -> MeanFunction {
    Arc::new(|_| 0.0)
}

pub fn constant_mean(c: f64) -> MeanFunction {
    Arc::new(move |_| c)
}

/// Exact GP conditioned on `(inputs, targets)`.
#[derive(Clone)]
pub struct GpPosterior {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    prior_mean: MeanFunction,
    kernel: KernelSpec,
    chol: Option<JitteredCholesky>,
    /// `(K + noise I + jitter I)^{-1} (targets - prior_mean(inputs))`
    weights: DVector<f64>,
}

impl fmt::Debug for GpPosterior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GpPosterior")
            .field("points", &self.inputs.nrows())
            .field("kernel", &self.kernel)
            .field("jitter", &self.chol.as_ref().map(|c| c.jitter))
            .finish()
    }
}

/// Posterior predictive spread.
#[derive(Debug, Clone, PartialEq)]
pub enum Spread {
    Variance(DVector<f64>),
    Covariance(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean: DVector<f64>,
    pub spread: Spread,
}

impl GpPrediction {
    pub fn variances(&self) -> DVector<f64> {
        match &self.spread {
            Spread::Variance(v) => v.clone(),
            Spread::Covariance(c) => c.diagonal(),
        }
    }
}

/// Conditions a GP with the given prior mean and kernel on the training data.
/// An empty training set yields the prior.
pub fn gp_posterior(
    prior_mean: MeanFunction,
    kernel: KernelSpec,
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
) -> Result<GpPosterior> {
    kernel.validate()?;
    if inputs.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} input rows but {} targets",
            inputs.nrows(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("training targets must be finite".into()));
    }
    if inputs.nrows() == 0 {
        let dim = kernel.dim();
        return Ok(GpPosterior {
            inputs: DMatrix::zeros(0, dim),
            targets,
            prior_mean,
            kernel,
            chol: None,
            weights: DVector::zeros(0),
        });
    }
    let mut k = kernel.gram(&inputs)?;
    for i in 0..k.nrows() {
        k[(i, i)] += kernel.noise_variance;
    }
    let chol = jittered_cholesky(&k, kernel.signal_variance)?;
    let residual = DVector::from_iterator(
        targets.len(),
        row_vectors(&inputs)
            .iter()
            .zip(targets.iter())
            .map(|(x, t)| t - prior_mean(x)),
    );
    let weights = chol.factor.solve(&residual);
    Ok(GpPosterior {
        inputs,
        targets,
        prior_mean,
        kernel,
        chol: Some(chol),
        weights,
    })
}

impl GpPosterior {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn jitter(&self) -> f64 {
        self.chol.as_ref().map_or(0.0, |c| c.jitter)
    }

    pub fn prior_mean_at(&self, x: &[f64]) -> f64 {
        (self.prior_mean)(x)
    }

    /// Latent-function posterior at `queries`; variances are floored at zero.
    pub fn predict(&self, queries: &DMatrix<f64>, want_covariance: bool) -> Result<GpPrediction> {
        if queries.ncols() != self.kernel.dim() {
            return Err(Error::Shape(format!(
                "queries have {} columns, model expects {}",
                queries.ncols(),
                self.kernel.dim()
            )));
        }
        let q = row_vectors(queries);
        let prior = DVector::from_iterator(q.len(), q.iter().map(|x| (self.prior_mean)(x)));
        let Some(chol) = &self.chol else {
            let spread = if want_covariance {
                Spread::Covariance(self.kernel.gram(queries)?)
            } else {
                Spread::Variance(DVector::from_element(q.len(), self.kernel.signal_variance))
            };
            return Ok(GpPrediction {
                mean: prior,
                spread,
            });
        };
        let k_star = self.kernel.cross(&self.inputs, queries)?;
        let mean = prior + k_star.transpose() * &self.weights;
        let v = chol
            .factor
            .l()
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let spread = if want_covariance {
            let mut cov = self.kernel.gram(queries)? - v.transpose() * &v;
            for i in 0..cov.nrows() {
                cov[(i, i)] = cov[(i, i)].max(0.0);
            }
            Spread::Covariance(cov)
        } else {
            let var = DVector::from_iterator(
                q.len(),
                (0..q.len())
                    .map(|j| (self.kernel.signal_variance - v.column(j).norm_squared()).max(0.0)),
            );
            Spread::Variance(var)
        };
        Ok(GpPrediction { mean, spread })
    }
}

pub fn gp_predict(
    posterior: &GpPosterior,
    queries: &DMatrix<f64>,
    want_covariance: bool,
) -> Result<GpPrediction> {
    posterior.predict(queries, want_covariance)
}

/// Per-output kernel and targets for [`multi_output_gp`].
#[derive(Debug, Clone)]
pub struct OutputSpec {
    pub kernel: KernelSpec,
    pub mean: f64,
    pub targets: DVector<f64>,
}

/// Independent single-output GPs sharing one input matrix.
pub fn multi_output_gp(
    output_names: &[String],
    shared_inputs: &DMatrix<f64>,
    per_output: &BTreeMap<String, OutputSpec>,
) -> Result<BTreeMap<String, GpPosterior>> {
    let mut out = BTreeMap::new();
    for name in output_names {
        let spec = per_output
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no targets for output `{name}`")))?;
        if spec.targets.len() != shared_inputs.nrows() {
            return Err(Error::Shape(format!(
                "output `{name}` has {} targets for {} inputs",
                spec.targets.len(),
                shared_inputs.nrows()
            )));
        }
        let post = gp_posterior(
            constant_mean(spec.mean),
            spec.kernel.clone(),
            shared_inputs.clone(),
            spec.targets.clone(),
        )?;
        out.insert(name.clone(), post);
    }
    Ok(out)
}

/// Log density of `N(y; mean, cov)` via the jittered Cholesky factor.
pub fn mvn_log_density(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    scale: f64,
) -> Result<f64> {
    let chol = jittered_cholesky(cov, scale)?;
    let r = y - mean;
    let a = chol.factor.solve(&r);
    let log_det: f64 = 2.0
        * chol
            .factor
            .l()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let n = y.len() as f64;
    Ok(-0.5 * (r.dot(&a) + log_det + n * (2.0 * std::f64::consts::PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k32(l: f64, s: f64) -> KernelSpec {
        KernelSpec::new(MaternFamily::MaternThreeHalf, vec![l], s, 0.0).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k = k32(1.0, 1.0);
        assert_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert_relative_eq!(
            k.eval(&[0.0], &[1.0]).unwrap(),
            0.4833577245965077,
            epsilon = 1e-12
        );
        assert!(k.eval(&[0.0], &[1e3]).unwrap() < 1e-300);
        assert!(matches!(k.eval(&[0.0, 1.0], &[1.0]), Err(Error::Shape(_))));
        for fam in [MaternFamily::MaternHalf, MaternFamily::MaternFiveHalf] {
            let k = KernelSpec::new(fam, vec![2.0, 0.5], 3.0, 0.0).unwrap();
            assert_eq!(k.eval(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 3.0);
            assert!(k.eval(&[0.0, 0.0], &[50.0, 50.0]).unwrap() < 1e-12);
        }
        let half = KernelSpec::new(MaternFamily::MaternHalf, vec![2.0], 1.0, 0.0).unwrap();
        assert_relative_eq!(
            half.eval(&[0.0], &[1.0]).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let five = KernelSpec::new(MaternFamily::MaternFiveHalf, vec![1.0], 1.0, 0.0).unwrap();
        let a = 5f64.sqrt();
        assert_relative_eq!(
            five.eval(&[0.0], &[1.0]).unwrap(),
            (1.0 + a + 5.0 / 3.0) * (-a).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::new(MaternFamily::MaternHalf, vec![], 1.0, 0.0).is_err());
        assert!(KernelSpec::new(MaternFamily::MaternHalf, vec![0.0], 1.0, 0.0).is_err());
        assert!(KernelSpec::new(MaternFamily::MaternHalf, vec![1.0], -1.0, 0.0).is_err());
        assert!(KernelSpec::new(MaternFamily::MaternHalf, vec![1.0], 1.0, -1.0).is_err());
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        for fam in [
            MaternFamily::MaternHalf,
            MaternFamily::MaternThreeHalf,
            MaternFamily::MaternFiveHalf,
        ] {
            let spec = KernelSpec::new(fam, vec![0.7, 2.0], 1.3, 0.0).unwrap();
            let (x, y) = ([0.1, -0.4], [0.9, 1.2]);
            let g = spec.eval_with_grad(&x, &y);
            for j in 0..2 {
                let h: f64 = 1e-6;
                let mut up = spec.clone();
                let mut dn = spec.clone();
                up.lengthscales[j] *= h.exp();
                dn.lengthscales[j] *= (-h).exp();
                let fd = (up.eval_unchecked(&x, &y) - dn.eval_unchecked(&x, &y)) / (2.0 * h);
                assert_relative_eq!(g.d_log_lengthscale[j], fd, epsilon = 1e-8);
            }
            assert_relative_eq!(g.d_log_signal_variance, g.value);
        }
    }

    #[test]
    fn one_point_conditioning() {
        // k(x,x) = 1 and k(x*,x) = 0.5 with a Matérn-1/2 kernel at distance ln 2
        let k = KernelSpec::new(MaternFamily::MaternHalf, vec![1.0], 1.0, 0.0).unwrap();
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let post = gp_posterior(zero_mean(), k, x, DVector::from_vec(vec![2.0])).unwrap();
        let q = DMatrix::from_row_slice(1, 1, &[2f64.ln()]);
        let p = post.predict(&q, false).unwrap();
        assert_relative_eq!(p.mean[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(p.variances()[0], 0.75, epsilon = 1e-7);
    }

    #[test]
    fn noiseless_interpolation() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 2.5).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.8 * (x * 1.3).sin()).collect();
        let inputs = DMatrix::from_column_slice(12, 1, &xs);
        let post = gp_posterior(
            zero_mean(),
            k32(1.0, 1.0),
            inputs.clone(),
            DVector::from_vec(ys.clone()),
        )
        .unwrap();
        let p = post.predict(&inputs, false).unwrap();
        for i in 0..12 {
            assert!((p.mean[i] - ys[i]).abs() <= 1e-8);
            assert!(p.variances()[i] <= post.jitter() * (1.0 + 1e-6));
        }
    }

    #[test]
    fn empty_training_set_is_prior() {
        let post = gp_posterior(
            constant_mean(3.0),
            k32(1.0, 2.0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let q = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let p = post.predict(&q, true).unwrap();
        assert_eq!(p.mean.as_slice(), &[3.0, 3.0]);
        match p.spread {
            Spread::Covariance(c) => {
                assert_eq!(c[(0, 0)], 2.0);
                assert_relative_eq!(c[(0, 1)], 2.0 * 0.4833577245965077, epsilon = 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let inputs = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let post = gp_posterior(
            constant_mean(0.5),
            k32(1.0, 2.0),
            inputs,
            DVector::from_vec(vec![3.0, -1.0, 2.0]),
        )
        .unwrap();
        let p = post
            .predict(&DMatrix::from_column_slice(1, 1, &[22.0]), false)
            .unwrap();
        assert!((p.mean[0] - 0.5).abs() < 1e-6);
        assert!((p.variances()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn repeated_queries_identical() {
        let inputs = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let post = gp_posterior(
            zero_mean(),
            k32(0.8, 1.0),
            inputs,
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let p = post
            .predict(&DMatrix::from_column_slice(3, 1, &[0.4, 0.4, 0.4]), true)
            .unwrap();
        assert_eq!(p.mean[0].to_bits(), p.mean[1].to_bits());
        assert_eq!(p.mean[1].to_bits(), p.mean[2].to_bits());
    }

    fn dense_oracle(kernel: &KernelSpec, xs: &[f64], ys: &[f64], q: f64) -> (f64, f64) {
        // Cramer's rule on the 2x2 system (no factorisation involved)
        let j = BASE_JITTER * kernel.signal_variance + kernel.noise_variance;
        let a = kernel.eval_unchecked(&[xs[0]], &[xs[0]]) + j;
        let b = kernel.eval_unchecked(&[xs[0]], &[xs[1]]);
        let d = kernel.eval_unchecked(&[xs[1]], &[xs[1]]) + j;
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let ks = [
            kernel.eval_unchecked(&[q], &[xs[0]]),
            kernel.eval_unchecked(&[q], &[xs[1]]),
        ];
        let w = [
            inv[0][0] * ys[0] + inv[0][1] * ys[1],
            inv[1][0] * ys[0] + inv[1][1] * ys[1],
        ];
        let mean = ks[0] * w[0] + ks[1] * w[1];
        let quad = ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1])
            + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]);
        (mean, kernel.signal_variance - quad)
    }

    #[test]
    fn two_point_matches_dense_solve() {
        let kernel = KernelSpec::new(MaternFamily::MaternFiveHalf, vec![1.5], 2.0, 0.1).unwrap();
        let xs = [0.0, 1.0];
        let ys = [1.0, -0.5];
        let post = gp_posterior(
            zero_mean(),
            kernel.clone(),
            DMatrix::from_column_slice(2, 1, &xs),
            DVector::from_vec(ys.to_vec()),
        )
        .unwrap();
        for q in [-1.0, 0.3, 0.77, 2.5] {
            let p = post
                .predict(&DMatrix::from_column_slice(1, 1, &[q]), false)
                .unwrap();
            let (m, v) = dense_oracle(&kernel, &xs, &ys, q);
            assert!((p.mean[0] - m).abs() <= 1e-10);
            assert!((p.variances()[0] - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn multi_output_equals_separate_fits() {
        let inputs = DMatrix::from_row_slice(3, 2, &[0.1, 1.0, -0.5, 0.3, 1.2, -0.7]);
        let names: Vec<String> = ["lengthscale", "beta", "sigma", "gamma", "mu"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut per = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            let kernel = KernelSpec::new(
                MaternFamily::MaternThreeHalf,
                vec![0.5 + i as f64, 1.0],
                1.0 + 0.1 * i as f64,
                1e-3,
            )
            .unwrap();
            let targets = DVector::from_vec(vec![i as f64, 1.0 - i as f64, 0.5 * i as f64]);
            per.insert(
                n.clone(),
                OutputSpec {
                    kernel,
                    mean: -(i as f64),
                    targets,
                },
            );
        }
        let multi = multi_output_gp(&names, &inputs, &per).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
        for n in &names {
            let s = &per[n];
            let single = gp_posterior(
                constant_mean(s.mean),
                s.kernel.clone(),
                inputs.clone(),
                s.targets.clone(),
            )
            .unwrap();
            assert_eq!(
                multi[n].predict(&q, true).unwrap(),
                single.predict(&q, true).unwrap()
            );
        }
        let mut bad = per.clone();
        bad.get_mut("beta").unwrap().targets = DVector::zeros(2);
        assert!(multi_output_gp(&names, &inputs, &bad).is_err());
    }

    #[test]
    fn shape_errors() {
        let inputs = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(gp_posterior(
            zero_mean(),
            k32(1.0, 1.0),
            inputs.clone(),
            DVector::zeros(3)
        )
        .is_err());
        let post = gp_posterior(zero_mean(), k32(1.0, 1.0), inputs, DVector::zeros(2)).unwrap();
        assert!(post.predict(&DMatrix::zeros(1, 2), false).is_err());
    }

    #[test]
    fn duplicate_points_need_jitter_escalation() {
        let inputs = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 0.0]);
        let post = gp_posterior(
            zero_mean(),
            k32(1.0, 1.0),
            inputs,
            DVector::from_vec(vec![1.0, 1.0, 1.0]),
        )
        .unwrap();
        assert!(post.jitter() >= BASE_JITTER);
    }

    #[test]
    fn mvn_density_standard_normal() {
        let v = mvn_log_density(
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0 - BASE_JITTER),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gram_is_psd(seed in any::<u64>(), n in 2usize..50, dim in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..5.0)).collect();
            let kernel = KernelSpec::new(MaternFamily::MaternThreeHalf, ls, rng.random_range(0.1..3.0), 0.0).unwrap();
            let inputs = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-3.0..3.0));
            let k = kernel.gram(&inputs).unwrap();
            let min_eig = k.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-8);
        }

        #[test]
        fn variance_bounded_and_monotone_in_data(seed in any::<u64>(), n in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kernel = KernelSpec::new(MaternFamily::MaternFiveHalf, vec![rng.random_range(0.3..2.0)], 1.5, 0.01).unwrap();
            let xs: Vec<f64> = (0..=n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let ys: Vec<f64> = (0..=n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = DMatrix::from_column_slice(5, 1, &[-3.0, -1.0, 0.0, 1.5, 3.7]);
            let fewer = gp_posterior(zero_mean(), kernel.clone(), DMatrix::from_column_slice(n, 1, &xs[..n]), DVector::from_column_slice(&ys[..n])).unwrap();
            let more = gp_posterior(zero_mean(), kernel.clone(), DMatrix::from_column_slice(n + 1, 1, &xs), DVector::from_column_slice(&ys)).unwrap();
            let vf = fewer.predict(&q, false).unwrap().variances();
            let vm = more.predict(&q, false).unwrap().variances();
            for j in 0..5 {
                prop_assert!(vf[j] <= kernel.signal_variance + 1e-8);
                prop_assert!(vm[j] <= vf[j] + 1e-8);
            }
        }

        #[test]
        fn shifting_targets_and_mean_shifts_posterior(seed in any::<u64>(), c in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kernel = KernelSpec::new(MaternFamily::MaternThreeHalf, vec![1.0], 1.0, 0.05).unwrap();
            let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
            let inputs = DMatrix::from_column_slice(6, 1, &xs);
            let a = gp_posterior(constant_mean(0.3), kernel.clone(), inputs.clone(), DVector::from_vec(ys)).unwrap();
            let b = gp_posterior(constant_mean(0.3 + c), kernel, inputs, DVector::from_vec(shifted)).unwrap();
            let q = DMatrix::from_column_slice(3, 1, &[-1.0, 0.2, 4.0]);
            let pa = a.predict(&q, false).unwrap();
            let pb = b.predict(&q, false).unwrap();
            for j in 0..3 {
                prop_assert!((pb.mean[j] - pa.mean[j] - c).abs() < 1e-9);
                prop_assert!((pb.variances()[j] - pa.variances()[j]).abs() < 1e-12);
            }
        }
    }
}
