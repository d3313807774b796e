//! Gaussian-process utility model with preference and ordinal likelihoods.
//!
//! The latent utility over a working subset `S` of actions has a zero-mean
//! squared-exponential GP prior. Feedback enters through logistic links:
//!
//! ```text
//! P(a1 > a2)        = sigmoid((r(a1) - r(a2)) / c_p)
//! P(a unsafe | r)   = sigmoid((beta - r(a)) / c_o)
//! P(a safe | r)     = 1 - P(a unsafe | r)
//! ```
//!
//! The posterior is approximated by a Gaussian at the MAP estimate with the
//! inverse Hessian of the negative log posterior as covariance.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_variance: f64,
    /// Per-dimension lengthscales in step-normalized units.
    pub lengthscales: Vec<f64>,
}

impl KernelConfig {
    pub fn isotropic(dims: usize, lengthscale: f64) -> Self {
        Self {
            signal_variance: 1.0,
            lengthscales: vec![lengthscale; dims],
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        if !(self.signal_variance > 0.0) {
            return Err(Error::config("kernel.signal_variance", "must be > 0"));
        }
        if self.lengthscales.len() != dims {
            return Err(Error::config(
                "kernel.lengthscales",
                format!("expected {dims} entries, got {}", self.lengthscales.len()),
            ));
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config(
                "kernel.lengthscales",
                "all entries must be > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Preference noise `c_p`.
    pub pref_noise: f64,
    /// Ordinal noise `c_o`.
    pub ordinal_noise: f64,
    /// Ordinal threshold `beta` separating unsafe from safe utilities.
    pub threshold: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            pref_noise: 0.1,
            ordinal_noise: 0.1,
            threshold: 0.0,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pref_noise > 0.0) {
            return Err(Error::config("likelihood.pref_noise", "must be > 0"));
        }
        if !(self.ordinal_noise > 0.0) {
            return Err(Error::config("likelihood.ordinal_noise", "must be > 0"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("likelihood.threshold", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernel: KernelConfig,
    pub likelihood: LikelihoodConfig,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn new(kernel: KernelConfig, likelihood: LikelihoodConfig) -> Self {
        Self {
            kernel,
            likelihood,
            jitter: default_jitter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Preference {
    pub preferred: usize,
    pub other: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Category {
    Unsafe = 1,
    Safe = 2,
}

impl TryFrom<u8> for Category {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Category::Unsafe),
            2 => Ok(Category::Safe),
            other => Err(format!("ordinal category must be 1 or 2, got {other}")),
        }
    }
}

impl From<Category> for u8 {
    fn from(c: Category) -> u8 {
        c as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrdinalLabel {
    pub action: usize,
    pub category: Category,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDataset {
    pub preferences: Vec<Preference>,
    pub ordinals: Vec<OrdinalLabel>,
}

impl FeedbackDataset {
    pub fn len(&self) -> usize {
        self.preferences.len() + self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extend(&mut self, other: &FeedbackDataset) {
        self.preferences.extend_from_slice(&other.preferences);
        self.ordinals.extend_from_slice(&other.ordinals);
    }

    /// Every action index referenced by the dataset.
    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.preferences
            .iter()
            .flat_map(|p| [p.preferred, p.other])
            .chain(self.ordinals.iter().map(|o| o.action))
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))` without overflow.
fn log_logistic(x: f64) -> f64 {
    let y = -x;
    -(y.max(0.0) + (-y.abs()).exp().ln_1p())
}

pub fn pref_likelihood(r_pref: f64, r_other: f64, cfg: &LikelihoodConfig) -> f64 {
    logistic((r_pref - r_other) / cfg.pref_noise)
}

pub fn ordinal_likelihood(r: f64, category: Category, cfg: &LikelihoodConfig) -> f64 {
    let unsafe_p = logistic((cfg.threshold - r) / cfg.ordinal_noise);
    match category {
        Category::Unsafe => unsafe_p,
        Category::Safe => 1.0 - unsafe_p,
    }
}

/// Squared-exponential kernel on step-normalized coordinates.
pub fn kernel(x: &[f64], y: &[f64], cfg: &KernelConfig) -> f64 {
    let q: f64 = x
        .iter()
        .zip(y)
        .zip(&cfg.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    cfg.signal_variance * (-0.5 * q).exp()
}

pub fn kernel_actions(a1: &Action, a2: &Action, cfg: &KernelConfig) -> f64 {
    let x: Vec<f64> = a1.coords.iter().map(|&c| c as f64).collect();
    let y: Vec<f64> = a2.coords.iter().map(|&c| c as f64).collect();
    kernel(&x, &y, cfg)
}

pub fn gram_matrix(points: &[Vec<f64>], cfg: &KernelConfig) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&points[i], &points[j], cfg);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factorization with jitter escalation up to `cap`.
/// Returns the factor and the jitter that was added to the diagonal.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    jitter: f64,
    cap: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut j = jitter.max(0.0);
    loop {
        let mut trial = m.clone();
        for i in 0..trial.nrows() {
            trial[(i, i)] += j;
        }
        if let Some(chol) = Cholesky::new(trial) {
            return Ok((chol, j));
        }
        if j >= cap {
            return Err(Error::NotPositiveDefinite { jitter: j });
        }
        j = if j == 0.0 {
            1e-12 * cap.max(1e-300)
        } else {
            (j * 10.0).min(cap)
        };
    }
}

/// Prior covariance over the given points plus `jitter * I`.
pub fn prior_covariance(
    points: &[Vec<f64>],
    cfg: &KernelConfig,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    let (_, m) = prior_factor(points, cfg, jitter)?;
    Ok(m)
}

fn prior_factor(
    points: &[Vec<f64>],
    cfg: &KernelConfig,
    jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>)> {
    let k = gram_matrix(points, cfg);
    let cap = (1e-4 * cfg.signal_variance).max(jitter);
    let (chol, used) = cholesky_with_jitter(&k, jitter, cap)?;
    let mut m = k;
    for i in 0..m.nrows() {
        m[(i, i)] += used;
    }
    Ok((chol, m))
}

/// Feedback re-indexed onto positions within a subset.
#[derive(Debug, Clone, Default)]
pub struct LocalFeedback {
    pub preferences: Vec<(usize, usize)>,
    pub ordinals: Vec<(usize, Category)>,
}

impl LocalFeedback {
    pub fn new(subset: &[usize], data: &FeedbackDataset) -> Result<Self> {
        let position: HashMap<usize, usize> =
            subset.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let at = |a: usize| position.get(&a).copied().ok_or(Error::UnknownAction(a));
        Ok(Self {
            preferences: data
                .preferences
                .iter()
                .map(|p| Ok((at(p.preferred)?, at(p.other)?)))
                .collect::<Result<_>>()?,
            ordinals: data
                .ordinals
                .iter()
                .map(|o| Ok((at(o.action)?, o.category)))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Negative log posterior `-ln P(D | r) + 0.5 r' K^-1 r` with its gradient
/// and Hessian.
pub fn neg_log_posterior(
    r: &DVector<f64>,
    data: &LocalFeedback,
    prior_inv: &DMatrix<f64>,
    cfg: &LikelihoodConfig,
) -> Objective {
    let kr = prior_inv * r;
    let mut value = 0.5 * r.dot(&kr);
    let mut gradient = kr;
    let mut hessian = prior_inv.clone();

    let cp = cfg.pref_noise;
    for &(i, j) in &data.preferences {
        let z = (r[i] - r[j]) / cp;
        value -= log_logistic(z);
        let s = logistic(z);
        let g = (1.0 - s) / cp;
        gradient[i] -= g;
        gradient[j] += g;
        let w = s * (1.0 - s) / (cp * cp);
        hessian[(i, i)] += w;
        hessian[(j, j)] += w;
        hessian[(i, j)] -= w;
        hessian[(j, i)] -= w;
    }

    let co = cfg.ordinal_noise;
    for &(i, category) in &data.ordinals {
        // both categories reduce to -ln sigmoid(sign * (r - beta) / c_o)
        let sign = match category {
            Category::Safe => 1.0,
            Category::Unsafe => -1.0,
        };
        let q = sign * (r[i] - cfg.threshold) / co;
        value -= log_logistic(q);
        let s = logistic(q);
        gradient[i] -= sign * (1.0 - s) / co;
        hessian[(i, i)] += s * (1.0 - s) / (co * co);
    }

    Objective {
        value,
        gradient,
        hessian,
    }
}

/// Laplace-approximated posterior over a subset of actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub subset: Vec<usize>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub std_dev: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Lower Cholesky factor of the covariance used for sampling.
    #[serde(skip)]
    factor: Option<DMatrix<f64>>,
}

impl PosteriorModel {
    pub fn from_parts(
        subset: Vec<usize>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    ) -> Result<Self> {
        let n = subset.len();
        if mean.len() != n || covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::InvalidGrid(
                "posterior dimensions do not match the subset".into(),
            ));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let std_dev = covariance.diagonal().map(|v| v.max(0.0).sqrt());
        let scale = covariance.diagonal().max().max(1e-300);
        let (chol, _) = cholesky_with_jitter(&covariance, 0.0, 1e-6 * scale)?;
        Ok(Self {
            subset,
            mean,
            covariance,
            std_dev,
            converged: true,
            iterations: 0,
            factor: Some(chol.l()),
        })
    }

    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }

    pub fn position(&self, action: usize) -> Option<usize> {
        self.subset.iter().position(|&a| a == action)
    }

    /// Subset member with the largest posterior mean (first on ties).
    pub fn argmax_mean(&self) -> usize {
        let mut best = 0;
        for i in 1..self.mean.len() {
            if self.mean[i] > self.mean[best] {
                best = i;
            }
        }
        self.subset[best]
    }

    fn factor(&mut self) -> Result<&DMatrix<f64>> {
        if self.factor.is_none() {
            let scale = self.covariance.diagonal().max().max(1e-300);
            let (chol, _) = cholesky_with_jitter(&self.covariance, 0.0, 1e-6 * scale)?;
            self.factor = Some(chol.l());
        }
        Ok(self.factor.as_ref().expect("factor just computed"))
    }

    /// One draw `mean + L z` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<DVector<f64>> {
        let n = self.mean.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let lz = self.factor()? * z;
        Ok(&self.mean + lz)
    }
}

/// Convergence settings for the damped Newton MAP solve.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub gradient_tol: f64,
    pub max_iterations: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-8,
            max_iterations: 100,
        }
    }
}

/// MAP estimate and Laplace covariance for the actions in `subset`.
pub fn laplace_map(
    grid: &Grid,
    subset: &[usize],
    data: &FeedbackDataset,
    cfg: &ModelConfig,
) -> Result<PosteriorModel> {
    let points = subset
        .iter()
        .map(|&i| grid.normalized(i))
        .collect::<Result<Vec<_>>>()?;
    laplace_map_points(subset, &points, data, cfg)
}

pub fn laplace_map_points(
    subset: &[usize],
    points: &[Vec<f64>],
    data: &FeedbackDataset,
    cfg: &ModelConfig,
) -> Result<PosteriorModel> {
    if subset.is_empty() {
        return Err(Error::InvalidGrid("empty posterior subset".into()));
    }
    let (chol, prior) = prior_factor(points, &cfg.kernel, cfg.jitter)?;
    let prior_inv = chol.inverse();
    let local = LocalFeedback::new(subset, data)?;
    laplace_with_prior(
        subset.to_vec(),
        &prior,
        &prior_inv,
        &local,
        &cfg.likelihood,
        NewtonSettings::default(),
    )
}

pub fn laplace_with_prior(
    subset: Vec<usize>,
    prior: &DMatrix<f64>,
    prior_inv: &DMatrix<f64>,
    data: &LocalFeedback,
    lik: &LikelihoodConfig,
    settings: NewtonSettings,
) -> Result<PosteriorModel> {
    let n = subset.len();
    if data.preferences.is_empty() && data.ordinals.is_empty() {
        let mut post = PosteriorModel::from_parts(subset, DVector::zeros(n), prior.clone())?;
        post.converged = true;
        return Ok(post);
    }

    let mut r = DVector::zeros(n);
    let mut obj = neg_log_posterior(&r, data, prior_inv, lik);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        if obj.gradient.norm() < settings.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let chol =
            Cholesky::new(obj.hessian.clone()).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        let direction = -chol.solve(&obj.gradient);
        let slope = obj.gradient.dot(&direction);
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            let trial = &r + &direction * step;
            let trial_obj = neg_log_posterior(&trial, data, prior_inv, lik);
            if trial_obj.value <= obj.value + 1e-4 * step * slope {
                accepted = Some((trial, trial_obj));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, trial_obj)) => {
                r = trial;
                obj = trial_obj;
            }
            None => {
                // no further decrease representable in floating point
                converged = obj.gradient.norm() < 1e3 * settings.gradient_tol;
                break;
            }
        }
    }
    if !converged && obj.gradient.norm() < settings.gradient_tol {
        converged = true;
    }

    let hess_chol =
        Cholesky::new(obj.hessian.clone()).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let covariance = hess_chol.inverse();
    let mut post = PosteriorModel::from_parts(subset, r, covariance)?;
    post.converged = converged;
    post.iterations = iterations;
    Ok(post)
}
