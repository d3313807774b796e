//! Safety-aware LineCoSpar: the preference-learning loop.
//!
//! Each iteration builds a posterior over the visited actions, draws a random
//! line through the believed-best action, refits over the line plus visited
//! set, restricts Thompson sampling to the region of interest
//! `{a : mean(a) + lambda * sd(a) > beta}`, and deploys the sampled actions.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LineSubspace};
use crate::rng::{stream_rng, Stream};
use crate::utility::{laplace_map, FeedbackDataset, ModelConfig, PosteriorModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Actions sampled per iteration (`s`).
    pub actions_per_iteration: usize,
    /// Iteration budget (`N`), counting the initial random iteration.
    pub iterations: usize,
    /// ROI confidence `lambda`; `None` disables the ROI restriction
    /// (plain LineCoSpar).
    pub roi_lambda: Option<f64>,
    /// Points per random line (`e`).
    #[serde(default = "default_line_size")]
    pub line_size: usize,
    pub seed: u64,
}

fn default_line_size() -> usize {
    25
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            actions_per_iteration: 3,
            iterations: 30,
            roi_lambda: Some(-0.5),
            line_size: default_line_size(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions_per_iteration == 0 {
            return Err(Error::config(
                "learner.actions_per_iteration",
                "must be >= 1",
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("learner.iterations", "must be >= 1"));
        }
        if self.line_size == 0 {
            return Err(Error::config("learner.line_size", "must be >= 1"));
        }
        if let Some(l) = self.roi_lambda {
            if l.is_nan() {
                return Err(Error::config("learner.roi_lambda", "must be a number"));
            }
        }
        Ok(())
    }
}

/// Actions deployed in one iteration and the feedback requested about them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub iteration: usize,
    /// Distinct deployed actions in draw order.
    pub actions: Vec<usize>,
    /// Incumbent best the new actions are compared against, if any.
    pub incumbent: Option<usize>,
    /// Unordered pairs offered for a preference.
    pub preferences: Vec<(usize, usize)>,
    /// Actions offered for an ordinal label.
    pub ordinals: Vec<usize>,
}

impl QueryBatch {
    fn new(iteration: usize, actions: Vec<usize>, incumbent: Option<usize>) -> Self {
        let mut preferences = Vec::new();
        for i in 0..actions.len() {
            for j in i + 1..actions.len() {
                preferences.push((actions[i], actions[j]));
            }
        }
        if let Some(best) = incumbent {
            for &a in &actions {
                if a != best && !actions.contains(&best) {
                    preferences.push((a, best));
                }
            }
        }
        Self {
            iteration,
            ordinals: actions.clone(),
            actions,
            incumbent,
            preferences,
        }
    }

    /// Checks that feedback only answers queries offered in this batch.
    pub fn check(&self, feedback: &FeedbackDataset) -> Result<()> {
        for p in &feedback.preferences {
            let offered = self.preferences.iter().any(|&(x, y)| {
                (x, y) == (p.preferred, p.other) || (y, x) == (p.preferred, p.other)
            });
            if !offered {
                return Err(Error::Provider(format!(
                    "preference {} > {} was not queried",
                    p.preferred, p.other
                )));
            }
        }
        for o in &feedback.ordinals {
            if !self.ordinals.contains(&o.action) {
                return Err(Error::Provider(format!(
                    "ordinal label for {} was not queried",
                    o.action
                )));
            }
        }
        Ok(())
    }
}

/// Supplies feedback for deployed actions (oracle, rollout scorer, human).
pub trait FeedbackProvider {
    fn answer(&mut self, batch: &QueryBatch) -> Result<FeedbackDataset>;
}

impl<F> FeedbackProvider for F
where
    F: FnMut(&QueryBatch) -> Result<FeedbackDataset>,
{
    fn answer(&mut self, batch: &QueryBatch) -> Result<FeedbackDataset> {
        self(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub incumbent: Option<usize>,
    pub subset_size: usize,
    pub roi: Vec<usize>,
    pub roi_fallback: bool,
    /// Thompson argmax per draw, duplicates kept.
    pub draws: Vec<usize>,
    pub deployed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub subset: Vec<usize>,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
}

impl From<&PosteriorModel> for PosteriorSnapshot {
    fn from(p: &PosteriorModel) -> Self {
        Self {
            subset: p.subset.clone(),
            mean: p.mean.iter().copied().collect(),
            std_dev: p.std_dev.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub iteration: usize,
    /// Visited actions in first-visit order.
    pub visited: Vec<usize>,
    pub dataset: FeedbackDataset,
    /// Believed-best action used as the incumbent in the latest iteration.
    pub best: Option<usize>,
    /// Posterior over the latest working subset `S_i`.
    pub posterior: Option<PosteriorSnapshot>,
    pub history: Vec<IterationRecord>,
}

impl LearnerState {
    pub fn absorb(&mut self, feedback: &FeedbackDataset) {
        self.dataset.extend(feedback);
    }
}

/// Everything computed for an iteration before anything is deployed.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub iteration: usize,
    pub incumbent: usize,
    pub line: LineSubspace,
    pub posterior: PosteriorModel,
    pub roi: Vec<usize>,
    pub roi_fallback: bool,
    pub draws: Vec<usize>,
    pub deployed: Vec<usize>,
}

/// Region-of-interest selection over a posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    /// Positions within the posterior subset.
    pub positions: Vec<usize>,
    pub fallback: bool,
}

/// Members of the posterior subset with `mean + lambda * sd > beta`. When no
/// member qualifies, the single member maximizing `mean + lambda * sd`.
/// `lambda = None` keeps the whole subset.
pub fn region_of_interest(post: &PosteriorModel, lambda: Option<f64>, beta: f64) -> Roi {
    let Some(lambda) = lambda else {
        return Roi {
            positions: (0..post.len()).collect(),
            fallback: false,
        };
    };
    let score = |i: usize| post.mean[i] + lambda * post.std_dev[i];
    let positions: Vec<usize> = (0..post.len()).filter(|&i| score(i) > beta).collect();
    if !positions.is_empty() {
        return Roi {
            positions,
            fallback: false,
        };
    }
    let mut best = 0;
    for i in 1..post.len() {
        if score(i) > score(best) {
            best = i;
        }
    }
    Roi {
        positions: vec![best],
        fallback: true,
    }
}

#[derive(Debug, Clone)]
pub struct Learner {
    grid: Arc<Grid>,
    model: ModelConfig,
    config: LearnerConfig,
}

impl Learner {
    pub fn new(grid: Arc<Grid>, model: ModelConfig, config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        model.kernel.validate(grid.dims())?;
        model.likelihood.validate()?;
        if grid.is_empty() {
            return Err(Error::config("grid", "grid is empty"));
        }
        if config.actions_per_iteration > grid.len() {
            return Err(Error::config(
                "learner.actions_per_iteration",
                format!(
                    "{} exceeds the grid size {}",
                    config.actions_per_iteration,
                    grid.len()
                ),
            ));
        }
        Ok(Self {
            grid,
            model,
            config,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// First iteration: `s` distinct uniformly random actions.
    pub fn init(&self) -> Result<(LearnerState, QueryBatch)> {
        let mut rng = stream_rng(self.config.seed, Stream::Init, 0);
        let mut visited =
            rand::seq::index::sample(&mut rng, self.grid.len(), self.config.actions_per_iteration)
                .into_vec();
        // draw order is kept, it only depends on the seed
        visited.dedup();
        let batch = QueryBatch::new(1, visited.clone(), None);
        let state = LearnerState {
            iteration: 1,
            visited: visited.clone(),
            dataset: FeedbackDataset::default(),
            best: None,
            posterior: None,
            history: vec![IterationRecord {
                iteration: 1,
                incumbent: None,
                subset_size: 0,
                roi: vec![],
                roi_fallback: false,
                draws: visited.clone(),
                deployed: visited,
            }],
        };
        Ok((state, batch))
    }

    /// Laplace posterior over the visited set and its argmax.
    pub fn believed_best(&self, state: &LearnerState) -> Result<(usize, PosteriorModel)> {
        let post = laplace_map(&self.grid, &state.visited, &state.dataset, &self.model)?;
        Ok((post.argmax_mean(), post))
    }

    /// Computes the next iteration's deployment without changing the state.
    pub fn propose(&self, state: &LearnerState) -> Result<Proposal> {
        let next = state.iteration + 1;
        let (incumbent, _) = self.believed_best(state)?;

        let mut line_rng = stream_rng(self.config.seed, Stream::Line, next as u64);
        let line = self
            .grid
            .draw_line(incumbent, &mut line_rng, self.config.line_size)?;

        let mut subset = state.visited.clone();
        for &m in &line.members {
            if !subset.contains(&m) {
                subset.push(m);
            }
        }
        let mut posterior = laplace_map(&self.grid, &subset, &state.dataset, &self.model)?;

        let roi = region_of_interest(
            &posterior,
            self.config.roi_lambda,
            self.model.likelihood.threshold,
        );

        let mut ts_rng = stream_rng(self.config.seed, Stream::Thompson, next as u64);
        let mut draws = Vec::with_capacity(self.config.actions_per_iteration);
        for _ in 0..self.config.actions_per_iteration {
            let sample = posterior.sample(&mut ts_rng)?;
            let mut best = roi.positions[0];
            for &p in &roi.positions[1..] {
                if sample[p] > sample[best] {
                    best = p;
                }
            }
            draws.push(subset[best]);
        }
        let mut deployed = Vec::new();
        for &d in &draws {
            if !deployed.contains(&d) {
                deployed.push(d);
            }
        }

        Ok(Proposal {
            iteration: next,
            incumbent,
            roi: roi.positions.iter().map(|&p| subset[p]).collect(),
            roi_fallback: roi.fallback,
            line,
            posterior,
            draws,
            deployed,
        })
    }

    /// Applies a proposal: the deployed actions join the visited set.
    pub fn deploy(&self, state: &LearnerState, proposal: &Proposal) -> (LearnerState, QueryBatch) {
        let mut next = state.clone();
        next.iteration = proposal.iteration;
        for &a in &proposal.deployed {
            if !next.visited.contains(&a) {
                next.visited.push(a);
            }
        }
        next.best = Some(proposal.incumbent);
        next.posterior = Some(PosteriorSnapshot::from(&proposal.posterior));
        next.history.push(IterationRecord {
            iteration: proposal.iteration,
            incumbent: Some(proposal.incumbent),
            subset_size: proposal.posterior.len(),
            roi: proposal.roi.clone(),
            roi_fallback: proposal.roi_fallback,
            draws: proposal.draws.clone(),
            deployed: proposal.deployed.clone(),
        });
        let batch = QueryBatch::new(
            proposal.iteration,
            proposal.deployed.clone(),
            Some(proposal.incumbent),
        );
        (next, batch)
    }

    pub fn advance(&self, state: &LearnerState) -> Result<(LearnerState, QueryBatch)> {
        let proposal = self.propose(state)?;
        Ok(self.deploy(state, &proposal))
    }

    /// One full iteration. On error the input state is untouched.
    pub fn step(
        &self,
        state: &LearnerState,
        provider: &mut dyn FeedbackProvider,
    ) -> Result<LearnerState> {
        let (mut next, batch) = self.advance(state)?;
        let feedback = provider.answer(&batch)?;
        batch.check(&feedback)?;
        next.absorb(&feedback);
        Ok(next)
    }

    /// Runs the initial iteration and collects its feedback.
    pub fn start(&self, provider: &mut dyn FeedbackProvider) -> Result<LearnerState> {
        let (mut state, batch) = self.init()?;
        let feedback = provider.answer(&batch)?;
        batch.check(&feedback)?;
        state.absorb(&feedback);
        Ok(state)
    }

    /// Step-normalized distance between the believed best and `true_best`.
    pub fn prediction_error(&self, state: &LearnerState, true_best: usize) -> Result<f64> {
        let (best, _) = self.believed_best(state)?;
        self.grid.distance(best, true_best)
    }

    /// Uniformly random action, used by tests and baselines.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.grid.len())
    }
}
