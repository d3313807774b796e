//! Tuning campaigns on the robust filter: configuration, rollout-based
//! feedback, headless execution and the final report.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cbf::{BarrierConfig, RobustParams};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec};
use crate::learner::{FeedbackProvider, Learner, LearnerConfig, LearnerState, QueryBatch};
use crate::oracle::{draw_truth, OracleProvider, SyntheticTruth};
use crate::rng::{derive_seed, Stream};
use crate::sim::{score_rollout, Rollout, SafetyRule, Scenario};
use crate::utility::{
    Category, FeedbackDataset, KernelConfig, LikelihoodConfig, ModelConfig, OrdinalLabel,
    Preference,
};

/// Who answers queries when no human is involved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeedbackSource {
    /// Preferences from rollout performance, labels from the safety rule.
    #[default]
    RolloutScorer,
    /// Synthetic utility over the grid (grid must allow a dense draw).
    Oracle { truth_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub name: String,
    #[serde(default = "GridSpec::robust_params")]
    pub grid: GridSpec,
    /// Defaults to a unit-variance kernel with a one-step lengthscale per dimension.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default = "Scenario::two_obstacles")]
    pub scenario: Scenario,
    #[serde(default)]
    pub feedback: FeedbackSource,
    #[serde(default)]
    pub safety: SafetyRule,
    /// Skipped ordinal queries take the suggested label instead of nothing.
    #[serde(default)]
    pub auto_label_on_skip: bool,
}

impl CampaignConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            grid: GridSpec::robust_params(),
            model: None,
            learner: LearnerConfig::default(),
            scenario: Scenario::two_obstacles(),
            feedback: FeedbackSource::default(),
            safety: SafetyRule::default(),
            auto_label_on_skip: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| {
            ModelConfig::new(
                KernelConfig::isotropic(self.grid.dimensions.len(), 1.0),
                LikelihoodConfig::default(),
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.dimensions.len() != 4 {
            return Err(Error::config(
                "grid.dimensions",
                "expected (alpha, phi, a, b)",
            ));
        }
        let grid = Grid::new(self.grid.clone())?;
        let model = self.model_config();
        model.kernel.validate(grid.dims())?;
        model.likelihood.validate()?;
        self.learner.validate()?;
        self.scenario.validate()?;
        Ok(())
    }
}

/// Outcome digest of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub reached_goal: bool,
    pub time_to_goal: Option<f64>,
    #[serde(with = "crate::sim::inf_as_null")]
    pub min_h: f64,
    pub infeasible_step_count: usize,
    pub clamp_violation_count: usize,
    pub progress: f64,
    pub final_goal_distance: f64,
    pub path_length: f64,
    pub suggested: Category,
}

impl RolloutSummary {
    pub fn new(r: &Rollout, rule: &SafetyRule) -> Self {
        Self {
            reached_goal: r.reached_goal,
            time_to_goal: r.time_to_goal,
            min_h: r.min_h,
            infeasible_step_count: r.infeasible_step_count,
            clamp_violation_count: r.clamp_violation_count,
            progress: r.progress(),
            final_goal_distance: r.final_goal_distance,
            path_length: r.path_length,
            suggested: score_rollout(r, rule).suggested,
        }
    }
}

/// Higher is better. Safe rollouts rank above unsafe ones; within each
/// class an early goal beats a late goal beats partial progress.
pub fn performance_score(r: &Rollout, horizon: f64, rule: &SafetyRule) -> f64 {
    let base = match r.time_to_goal {
        Some(t) if r.reached_goal => 2.0 - (t / horizon).min(1.0),
        _ => r.progress().clamp(-1.0, 1.0),
    };
    match score_rollout(r, rule).suggested {
        Category::Safe => base,
        Category::Unsafe => base - 4.0,
    }
}

pub struct Campaign {
    config: CampaignConfig,
    grid: Arc<Grid>,
    learner: Learner,
    env: BarrierConfig,
    truth: Option<Arc<SyntheticTruth>>,
    cache: Mutex<HashMap<usize, Arc<Rollout>>>,
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(Grid::new(config.grid.clone())?);
        let model = config.model_config();
        let learner = Learner::new(grid.clone(), model.clone(), config.learner.clone())?;
        let env = config.scenario.environment.barrier_config()?;
        let truth = match config.feedback {
            FeedbackSource::Oracle { truth_seed } => Some(Arc::new(draw_truth(
                &grid,
                &model.kernel,
                model.jitter,
                truth_seed,
            )?)),
            FeedbackSource::RolloutScorer => None,
        };
        Ok(Self {
            config,
            grid,
            learner,
            env,
            truth,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn truth(&self) -> Option<&SyntheticTruth> {
        self.truth.as_deref()
    }

    pub fn params(&self, action: usize) -> Result<RobustParams> {
        RobustParams::from_action(&self.grid.action(action)?)
    }

    pub fn rollout_seed(&self, action: usize) -> u64 {
        derive_seed(self.config.learner.seed, Stream::Scenario, action as u64)
    }

    /// Rollout of an action on the campaign scenario, computed once.
    pub fn rollout(&self, action: usize) -> Result<Arc<Rollout>> {
        if let Some(r) = self.cache.lock().expect("cache lock").get(&action) {
            return Ok(r.clone());
        }
        let s = &self.config.scenario;
        let r = Arc::new(crate::sim::simulate(
            &self.params(action)?,
            &self.env,
            &s.sim,
            &s.gains,
            self.rollout_seed(action),
        )?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(action, r.clone());
        Ok(r)
    }

    pub fn rollouts(&self, actions: &[usize]) -> Result<Vec<Arc<Rollout>>> {
        actions.par_iter().map(|&a| self.rollout(a)).collect()
    }

    pub fn suggested(&self, action: usize) -> Result<Category> {
        Ok(score_rollout(&*self.rollout(action)?, &self.config.safety).suggested)
    }

    fn score(&self, action: usize) -> Result<f64> {
        Ok(performance_score(
            &*self.rollout(action)?,
            self.config.scenario.sim.horizon,
            &self.config.safety,
        ))
    }

    /// Provider matching the configured feedback source.
    pub fn provider(&self) -> Box<dyn FeedbackProvider + '_> {
        match &self.truth {
            Some(truth) => Box::new(OracleProvider {
                truth: truth.clone(),
                likelihood: self.learner.model().likelihood,
                seed: self.config.learner.seed,
            }),
            None => Box::new(RolloutScorer { campaign: self }),
        }
    }

    pub fn report(&self, state: &LearnerState) -> Result<CampaignReport> {
        let rule = &self.config.safety;
        let summarize = |a: usize| -> Result<ActionReport> {
            Ok(ActionReport {
                index: a,
                values: self.grid.action(a)?.values,
                rollout: RolloutSummary::new(&*self.rollout(a)?, rule),
            })
        };
        let best = if state.dataset.is_empty() {
            None
        } else {
            Some(summarize(self.learner.believed_best(state)?.0)?)
        };
        let history = state
            .history
            .iter()
            .map(|h| {
                Ok(IterationReport {
                    iteration: h.iteration,
                    incumbent: h.incumbent,
                    roi_size: h.roi.len(),
                    roi_fallback: h.roi_fallback,
                    deployed: h
                        .deployed
                        .iter()
                        .map(|&a| summarize(a))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut report = CampaignReport {
            name: self.config.name.clone(),
            seed: self.config.learner.seed,
            iterations_completed: state.iteration,
            preferences: state.dataset.preferences.len(),
            ordinals: state.dataset.ordinals.len(),
            best,
            history,
            hash: String::new(),
        };
        report.hash = report.compute_hash()?;
        Ok(report)
    }
}

/// Compares rollouts of the queried actions.
pub struct RolloutScorer<'a> {
    campaign: &'a Campaign,
}

impl FeedbackProvider for RolloutScorer<'_> {
    fn answer(&mut self, batch: &QueryBatch) -> Result<FeedbackDataset> {
        let mut needed = batch.actions.clone();
        needed.extend(batch.incumbent);
        self.campaign.rollouts(&needed)?;
        let mut out = FeedbackDataset::default();
        for &(x, y) in &batch.preferences {
            let (sx, sy) = (self.campaign.score(x)?, self.campaign.score(y)?);
            let (preferred, other) = if sy > sx { (y, x) } else { (x, y) };
            out.preferences.push(Preference { preferred, other });
        }
        for &a in &batch.ordinals {
            out.ordinals.push(OrdinalLabel {
                action: a,
                category: self.campaign.suggested(a)?,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionReport {
    pub index: usize,
    pub values: Vec<f64>,
    pub rollout: RolloutSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub incumbent: Option<usize>,
    pub roi_size: usize,
    pub roi_fallback: bool,
    pub deployed: Vec<ActionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub name: String,
    pub seed: u64,
    pub iterations_completed: usize,
    pub preferences: usize,
    pub ordinals: usize,
    /// Believed-best action after the last absorbed feedback.
    pub best: Option<ActionReport>,
    pub history: Vec<IterationReport>,
    /// SHA-256 over the report with this field empty.
    pub hash: String,
}

impl CampaignReport {
    pub fn compute_hash(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.hash.clear();
        let bytes = serde_json::to_vec(&copy)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Runs the configured number of iterations without persistence.
pub fn run_headless(config: CampaignConfig) -> Result<(LearnerState, CampaignReport)> {
    let campaign = Campaign::new(config)?;
    let mut provider = campaign.provider();
    let learner = campaign.learner();
    let mut state = learner.start(provider.as_mut())?;
    while state.iteration < learner.config().iterations {
        state = learner.step(&state, provider.as_mut())?;
    }
    drop(provider);
    let report = campaign.report(&state)?;
    Ok((state, report))
}
