//! Synthetic utilities drawn from the GP prior, feedback sampled from the
//! likelihood models, and multi-run campaign statistics.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dimension, Grid, GridSpec};
use crate::learner::{FeedbackProvider, Learner, LearnerConfig, QueryBatch};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::utility::{
    cholesky_with_jitter, gram_matrix, logistic, Category, FeedbackDataset, KernelConfig,
    LikelihoodConfig, ModelConfig, OrdinalLabel, Preference,
};

/// Largest grid accepted for an exact dense draw.
pub const MAX_TRUTH_POINTS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub utilities: Vec<f64>,
    pub best: usize,
    pub seed: u64,
}

impl SyntheticTruth {
    pub fn utility(&self, action: usize) -> Result<f64> {
        self.utilities
            .get(action)
            .copied()
            .ok_or(Error::UnknownAction(action))
    }
}

/// Exact draw from `N(0, K + jitter I)` over every grid point.
pub fn draw_truth(
    grid: &Grid,
    kernel: &KernelConfig,
    jitter: f64,
    seed: u64,
) -> Result<SyntheticTruth> {
    if grid.len() > MAX_TRUTH_POINTS {
        return Err(Error::GridTooLarge {
            size: grid.len(),
            limit: MAX_TRUTH_POINTS,
        });
    }
    if !(kernel.signal_variance >= 0.0) || kernel.lengthscales.len() != grid.dims() {
        return Err(Error::config("kernel", "invalid kernel for truth draw"));
    }
    let points = (0..grid.len())
        .map(|i| grid.normalized(i))
        .collect::<Result<Vec<_>>>()?;
    let k = gram_matrix(&points, kernel);
    let cap = (1e-4 * kernel.signal_variance).max(jitter);
    let (chol, _) = cholesky_with_jitter(&k, jitter, cap)?;
    let mut rng = stream_rng(seed, Stream::Truth, 0);
    let n = grid.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let utilities: Vec<f64> = (chol.l() * z).iter().copied().collect();
    let mut best = 0;
    for (i, &u) in utilities.iter().enumerate() {
        if u > utilities[best] {
            best = i;
        }
    }
    Ok(SyntheticTruth {
        utilities,
        best,
        seed,
    })
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// `a1` is preferred with probability `sigma((r1 - r2) / c_p)`.
pub fn answer_preference<R: Rng + ?Sized>(
    truth: &SyntheticTruth,
    a1: usize,
    a2: usize,
    c_p: f64,
    rng: &mut R,
) -> Result<Preference> {
    let diff = truth.utility(a1)? - truth.utility(a2)?;
    let p = if c_p > 0.0 {
        logistic(diff / c_p)
    } else if diff == 0.0 {
        0.5
    } else {
        (diff > 0.0) as u8 as f64
    };
    Ok(if bernoulli(p, rng) {
        Preference {
            preferred: a1,
            other: a2,
        }
    } else {
        Preference {
            preferred: a2,
            other: a1,
        }
    })
}

/// Unsafe with probability `sigma((beta - r) / c_o)`.
pub fn answer_ordinal<R: Rng + ?Sized>(
    truth: &SyntheticTruth,
    action: usize,
    beta: f64,
    c_o: f64,
    rng: &mut R,
) -> Result<OrdinalLabel> {
    let gap = beta - truth.utility(action)?;
    let p = if c_o > 0.0 {
        logistic(gap / c_o)
    } else if gap == 0.0 {
        0.5
    } else {
        (gap > 0.0) as u8 as f64
    };
    let category = if bernoulli(p, rng) {
        Category::Unsafe
    } else {
        Category::Safe
    };
    Ok(OrdinalLabel { action, category })
}

/// Answers every query of a batch from the synthetic truth. Randomness is
/// keyed by the batch iteration so runs stay coupled across settings.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    pub truth: Arc<SyntheticTruth>,
    pub likelihood: LikelihoodConfig,
    pub seed: u64,
}

impl FeedbackProvider for OracleProvider {
    fn answer(&mut self, batch: &QueryBatch) -> Result<FeedbackDataset> {
        let mut rng = stream_rng(self.seed, Stream::Oracle, batch.iteration as u64);
        let mut out = FeedbackDataset::default();
        for &(a1, a2) in &batch.preferences {
            out.preferences.push(answer_preference(
                &self.truth,
                a1,
                a2,
                self.likelihood.pref_noise,
                &mut rng,
            )?);
        }
        for &a in &batch.ordinals {
            out.ordinals.push(answer_ordinal(
                &self.truth,
                a,
                self.likelihood.threshold,
                self.likelihood.ordinal_noise,
                &mut rng,
            )?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCampaignConfig {
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub actions_per_iteration: usize,
    pub iterations: usize,
    #[serde(default = "default_line_size")]
    pub line_size: usize,
    pub runs: usize,
    pub seed: u64,
    /// `null` entries run plain LineCoSpar.
    pub lambdas: Vec<Option<f64>>,
}

fn default_line_size() -> usize {
    25
}

impl Default for SyntheticCampaignConfig {
    /// 30 x 30 two-dimensional slice with a one-step lengthscale.
    fn default() -> Self {
        Self {
            grid: GridSpec {
                dimensions: vec![
                    Dimension::new("u", 0.0, 29.0, 1.0),
                    Dimension::new("w", 0.0, 29.0, 1.0),
                ],
            },
            model: ModelConfig::new(KernelConfig::isotropic(2, 1.0), LikelihoodConfig::default()),
            actions_per_iteration: 3,
            iterations: 30,
            line_size: default_line_size(),
            runs: 50,
            seed: 0,
            lambdas: vec![Some(-0.5), None],
        }
    }
}

impl SyntheticCampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be >= 1"));
        }
        if self.lambdas.is_empty() {
            return Err(Error::config("lambdas", "must not be empty"));
        }
        self.model.likelihood.validate()?;
        self.model.kernel.validate(self.grid.dimensions.len())?;
        self.learner_config(None, 0).validate()
    }

    fn learner_config(&self, lambda: Option<f64>, seed: u64) -> LearnerConfig {
        LearnerConfig {
            actions_per_iteration: self.actions_per_iteration,
            iterations: self.iterations,
            roi_lambda: lambda,
            line_size: self.line_size,
            seed,
        }
    }

    pub fn truth_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, Stream::Truth, run as u64)
    }

    pub fn learner_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, Stream::Init, run as u64)
    }
}

/// Per-iteration metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run: usize,
    pub truth_seed: u64,
    pub learner_seed: u64,
    pub prediction_error: Vec<f64>,
    pub cumulative_unsafe: Vec<usize>,
    pub deployed: Vec<Vec<usize>>,
}

/// Per-iteration prediction errors, cumulative unsafe counts and deployed actions.
pub type RunCurves = (Vec<f64>, Vec<usize>, Vec<Vec<usize>>);

/// Runs one learner against one truth for the configured iterations.
pub fn run_single(
    grid: Arc<Grid>,
    truth: Arc<SyntheticTruth>,
    model: &ModelConfig,
    config: LearnerConfig,
    oracle_seed: u64,
) -> Result<RunCurves> {
    let iterations = config.iterations;
    let learner = Learner::new(grid.clone(), model.clone(), config)?;
    let mut oracle = OracleProvider {
        truth: truth.clone(),
        likelihood: model.likelihood,
        seed: oracle_seed,
    };
    let beta = model.likelihood.threshold;
    let mut errors = Vec::with_capacity(iterations);
    let mut unsafe_counts = Vec::with_capacity(iterations);
    let mut deployed_log = Vec::with_capacity(iterations);
    let mut unsafe_total = 0usize;

    let mut state = learner.start(&mut oracle)?;
    loop {
        let deployed = &state
            .history
            .last()
            .expect("history is never empty")
            .deployed;
        for &a in deployed {
            if truth.utility(a)? < beta {
                unsafe_total += 1;
            }
        }
        deployed_log.push(deployed.clone());
        unsafe_counts.push(unsafe_total);
        errors.push(learner.prediction_error(&state, truth.best)?);
        if state.iteration >= iterations {
            break;
        }
        state = learner.step(&state, &mut oracle)?;
    }
    Ok((errors, unsafe_counts, deployed_log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub lambda: Option<f64>,
    pub runs: usize,
    pub prediction_error: Vec<MeanStderr>,
    pub cumulative_unsafe: Vec<MeanStderr>,
    pub traces: Vec<RunTrace>,
}

impl CampaignStats {
    fn from_traces(lambda: Option<f64>, traces: Vec<RunTrace>) -> Self {
        let iters = traces
            .iter()
            .map(|t| t.prediction_error.len())
            .min()
            .unwrap_or(0);
        let column = |f: &dyn Fn(&RunTrace, usize) -> f64, i: usize| -> MeanStderr {
            MeanStderr::of(&traces.iter().map(|t| f(t, i)).collect::<Vec<_>>())
        };
        let prediction_error = (0..iters)
            .map(|i| column(&|t, i| t.prediction_error[i], i))
            .collect();
        let cumulative_unsafe = (0..iters)
            .map(|i| column(&|t, i| t.cumulative_unsafe[i] as f64, i))
            .collect();
        Self {
            lambda,
            runs: traces.len(),
            prediction_error,
            cumulative_unsafe,
            traces,
        }
    }

    pub fn label(&self) -> String {
        match self.lambda {
            Some(l) => format!("{l}"),
            None => "plain".into(),
        }
    }
}

/// Runs every lambda on the same set of truths and learner seeds.
pub fn run_campaign(cfg: &SyntheticCampaignConfig) -> Result<Vec<CampaignStats>> {
    cfg.validate()?;
    let grid = Arc::new(Grid::new(cfg.grid.clone())?);
    let truths: Vec<Arc<SyntheticTruth>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            draw_truth(
                &grid,
                &cfg.model.kernel,
                cfg.model.jitter,
                cfg.truth_seed(run),
            )
            .map(Arc::new)
        })
        .collect::<Result<_>>()?;

    cfg.lambdas
        .iter()
        .map(|&lambda| {
            let traces = (0..cfg.runs)
                .into_par_iter()
                .map(|run| {
                    let learner_seed = cfg.learner_seed(run);
                    let (prediction_error, cumulative_unsafe, deployed) = run_single(
                        grid.clone(),
                        truths[run].clone(),
                        &cfg.model,
                        cfg.learner_config(lambda, learner_seed),
                        learner_seed,
                    )?;
                    Ok(RunTrace {
                        run,
                        truth_seed: truths[run].seed,
                        learner_seed,
                        prediction_error,
                        cumulative_unsafe,
                        deployed,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CampaignStats::from_traces(lambda, traces))
        })
        .collect()
}

/// `iteration,lambda,metric,mean,stderr` rows.
pub fn write_campaign_csv<W: Write>(stats: &[CampaignStats], mut w: W) -> Result<()> {
    writeln!(w, "iteration,lambda,metric,mean,stderr")?;
    for s in stats {
        let label = s.label();
        for (i, (pe, cu)) in s
            .prediction_error
            .iter()
            .zip(&s.cumulative_unsafe)
            .enumerate()
        {
            writeln!(
                w,
                "{},{},prediction_error,{},{}",
                i + 1,
                label,
                pe.mean,
                pe.stderr
            )?;
            writeln!(
                w,
                "{},{},cumulative_unsafe,{},{}",
                i + 1,
                label,
                cu.mean,
                cu.stderr
            )?;
        }
    }
    Ok(())
}

/// Plot-ready JSON: one series per lambda and metric, traces omitted.
pub fn campaign_plot_json(stats: &[CampaignStats]) -> serde_json::Value {
    let series: Vec<_> = stats
        .iter()
        .map(|s| {
            serde_json::json!({
                "lambda": s.lambda,
                "label": s.label(),
                "runs": s.runs,
                "iteration": (1..=s.prediction_error.len()).collect::<Vec<_>>(),
                "prediction_error": s.prediction_error,
                "cumulative_unsafe": s.cumulative_unsafe,
            })
        })
        .collect();
    serde_json::json!({ "series": series })
}
