//! Persistent tuning sessions driven by external feedback.
//!
//! Each session lives in its own directory:
//!
//! ```text
//! <root>/<id>/config.json       campaign configuration
//! <root>/<id>/checkpoint.json   learner state, open queries, version
//! <root>/<id>/dataset.jsonl     append-only feedback records
//! <root>/<id>/skips.jsonl       skipped queries
//! <root>/<id>/rollouts/a<k>.json
//! ```
//!
//! The JSONL dataset is the source of truth for feedback. A checkpoint is
//! written atomically after every learner advance, so on restart the
//! current iteration's answers are recovered from the dataset tail.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::campaign::{Campaign, CampaignConfig, CampaignReport, RolloutSummary};
use crate::error::{Error, Result};
use crate::learner::{LearnerState, QueryBatch};
use crate::sim::{EnvironmentConfig, Rollout};
use crate::utility::{Category, FeedbackDataset, OrdinalLabel, Preference};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const DATASET_FILE: &str = "dataset.jsonl";
const SKIPS_FILE: &str = "skips.jsonl";
const ROLLOUT_DIR: &str = "rollouts";

/// Test hook that aborts a mutation at a fixed point, as a process kill would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    /// After the feedback record is durable, before the learner advances.
    AfterAppend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QueryKind {
    Preference { left: usize, right: usize },
    Ordinal { action: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub iteration: usize,
    #[serde(flatten)]
    pub kind: QueryKind,
}

impl Query {
    pub fn actions(&self) -> Vec<usize> {
        match self.kind {
            QueryKind::Preference { left, right } => vec![left, right],
            QueryKind::Ordinal { action } => vec![action],
        }
    }
}

/// Open queries of a batch, ids `i<iteration>-p<k>` and `i<iteration>-o<k>`.
pub fn batch_queries(batch: &QueryBatch) -> Vec<Query> {
    let it = batch.iteration;
    let prefs = batch
        .preferences
        .iter()
        .enumerate()
        .map(|(k, &(l, r))| Query {
            id: format!("i{it}-p{k}"),
            iteration: it,
            kind: QueryKind::Preference { left: l, right: r },
        });
    let ords = batch.ordinals.iter().enumerate().map(|(k, &a)| Query {
        id: format!("i{it}-o{k}"),
        iteration: it,
        kind: QueryKind::Ordinal { action: a },
    });
    prefs.chain(ords).collect()
}

pub fn rollout_id(action: usize) -> String {
    format!("a{action}")
}

fn parse_rollout_id(rid: &str) -> Option<usize> {
    rid.strip_prefix('a')?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Verdict {
    Prefer { preferred: Side },
    Label { category: Category },
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSubmission {
    pub query_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub rater: Option<String>,
    /// Rejected with a stale-version error unless it matches the session.
    #[serde(default)]
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetEntry {
    Preference { preferred: usize, other: usize },
    Ordinal { action: usize, category: Category },
}

/// One line of `dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seq: u64,
    pub query_id: String,
    pub iteration: usize,
    #[serde(default)]
    pub rater: Option<String>,
    /// Label filled in from the rollout because the query was skipped.
    #[serde(default)]
    pub auto: bool,
    #[serde(flatten)]
    pub entry: DatasetEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub query_id: String,
    pub iteration: usize,
    #[serde(default)]
    pub rater: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    version: u64,
    complete: bool,
    state: LearnerState,
    batch: Option<QueryBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutPayload {
    pub id: String,
    pub action: usize,
    pub values: Vec<f64>,
    pub summary: RolloutSummary,
    pub rollout: Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    #[serde(flatten)]
    pub query: Query,
    pub rollouts: Vec<RolloutPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryList {
    pub session: String,
    pub version: u64,
    pub iteration: usize,
    pub complete: bool,
    pub environment: EnvironmentConfig,
    pub queries: Vec<QueryView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub query_id: String,
    /// False for a skip that left no dataset entry.
    pub recorded: bool,
    pub advanced: bool,
    pub iteration: usize,
    pub version: u64,
    pub remaining: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub version: u64,
    pub iteration: usize,
    pub complete: bool,
    pub pending: usize,
}

struct Session {
    id: String,
    dir: PathBuf,
    campaign: Campaign,
    version: u64,
    complete: bool,
    state: LearnerState,
    batch: Option<QueryBatch>,
    /// Queries of the open batch not yet answered or skipped.
    pending: Vec<Query>,
    /// Feedback received for the open batch, in arrival order.
    current: FeedbackDataset,
    answered: HashSet<String>,
    next_seq: u64,
}

impl Session {
    fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            version: self.version,
            iteration: self.state.iteration,
            complete: self.complete,
            pending: self.pending.len(),
        }
    }

    fn checkpoint(&self) -> Result<()> {
        let cp = Checkpoint {
            version: self.version,
            complete: self.complete,
            state: self.state.clone(),
            batch: self.batch.clone(),
        };
        write_atomic(
            &self.dir.join(CHECKPOINT_FILE),
            &serde_json::to_vec_pretty(&cp)?,
        )
    }

    /// Simulates and stores the rollouts a batch needs before it is exposed.
    fn store_rollouts(&self, batch: &QueryBatch) -> Result<()> {
        let mut needed = batch.actions.clone();
        needed.extend(batch.incumbent);
        let rollouts = self.campaign.rollouts(&needed)?;
        let dir = self.dir.join(ROLLOUT_DIR);
        for (a, r) in needed.iter().zip(rollouts) {
            let path = dir.join(format!("{}.json", rollout_id(*a)));
            if !path.exists() {
                write_atomic(&path, &serde_json::to_vec(&*r)?)?;
            }
        }
        Ok(())
    }

    fn open_batch(&mut self, batch: QueryBatch) -> Result<()> {
        self.store_rollouts(&batch)?;
        self.pending = batch_queries(&batch);
        self.batch = Some(batch);
        self.current = FeedbackDataset::default();
        self.answered.clear();
        Ok(())
    }

    /// Absorbs the drained batch and either opens the next one or finishes.
    fn advance(&mut self) -> Result<()> {
        let mut state = self.state.clone();
        state.absorb(&self.current);
        let learner = self.campaign.learner();
        if state.iteration >= learner.config().iterations {
            self.state = state;
            self.batch = None;
            self.pending.clear();
            self.current = FeedbackDataset::default();
            self.answered.clear();
            self.complete = true;
        } else {
            let (next, batch) = learner.advance(&state)?;
            self.state = next;
            self.open_batch(batch)?;
        }
        self.version += 1;
        self.checkpoint()
    }

    fn record(&mut self, query: &Query, sub: &FeedbackSubmission) -> Result<Option<DatasetEntry>> {
        let entry = match (&query.kind, &sub.verdict) {
            (_, Verdict::Skip) => None,
            (QueryKind::Preference { left, right }, Verdict::Prefer { preferred }) => {
                let (p, o) = match preferred {
                    Side::Left => (*left, *right),
                    Side::Right => (*right, *left),
                };
                Some(DatasetEntry::Preference {
                    preferred: p,
                    other: o,
                })
            }
            (QueryKind::Ordinal { action }, Verdict::Label { category }) => {
                Some(DatasetEntry::Ordinal {
                    action: *action,
                    category: *category,
                })
            }
            (QueryKind::Preference { .. }, _) => {
                return Err(Error::MalformedSubmission(format!(
                    "query `{}` needs a preference or a skip",
                    query.id
                )))
            }
            (QueryKind::Ordinal { .. }, _) => {
                return Err(Error::MalformedSubmission(format!(
                    "query `{}` needs a label or a skip",
                    query.id
                )))
            }
        };
        if entry.is_some() {
            return Ok(entry);
        }
        match query.kind {
            QueryKind::Ordinal { action } if self.campaign.config().auto_label_on_skip => {
                Ok(Some(DatasetEntry::Ordinal {
                    action,
                    category: self.campaign.suggested(action)?,
                }))
            }
            _ => Ok(None),
        }
    }

    fn apply(&mut self, query_id: &str, entry: Option<&DatasetEntry>) {
        match entry {
            Some(DatasetEntry::Preference { preferred, other }) => {
                self.current.preferences.push(Preference {
                    preferred: *preferred,
                    other: *other,
                })
            }
            Some(DatasetEntry::Ordinal { action, category }) => {
                self.current.ordinals.push(OrdinalLabel {
                    action: *action,
                    category: *category,
                })
            }
            None => {}
        }
        self.answered.insert(query_id.to_string());
        self.pending.retain(|q| q.id != query_id);
    }

    fn submit(&mut self, sub: &FeedbackSubmission, fail: Option<Failpoint>) -> Result<SubmitAck> {
        if let Some(expected) = sub.expected_version {
            if expected != self.version {
                return Err(Error::StaleVersion {
                    expected,
                    current: self.version,
                });
            }
        }
        if self.answered.contains(&sub.query_id) || self.is_past_query(&sub.query_id) {
            return Err(Error::DuplicateSubmission(sub.query_id.clone()));
        }
        let query = self
            .pending
            .iter()
            .find(|q| q.id == sub.query_id)
            .cloned()
            .ok_or_else(|| Error::UnknownQuery(sub.query_id.clone()))?;

        let entry = self.record(&query, sub)?;
        let auto = matches!(sub.verdict, Verdict::Skip) && entry.is_some();
        match &entry {
            Some(e) => {
                let rec = DatasetRecord {
                    seq: self.next_seq,
                    query_id: query.id.clone(),
                    iteration: query.iteration,
                    rater: sub.rater.clone(),
                    auto,
                    entry: e.clone(),
                };
                append_line(&self.dir.join(DATASET_FILE), &serde_json::to_vec(&rec)?)?;
                self.next_seq += 1;
            }
            None => {
                let rec = SkipRecord {
                    query_id: query.id.clone(),
                    iteration: query.iteration,
                    rater: sub.rater.clone(),
                };
                append_line(&self.dir.join(SKIPS_FILE), &serde_json::to_vec(&rec)?)?;
            }
        }
        if fail == Some(Failpoint::AfterAppend) {
            return Err(Error::InjectedCrash("after-append"));
        }
        self.apply(&query.id, entry.as_ref());

        let advanced = self.pending.is_empty();
        if advanced {
            self.advance()?;
        }
        Ok(SubmitAck {
            query_id: query.id,
            recorded: entry.is_some(),
            advanced,
            iteration: self.state.iteration,
            version: self.version,
            remaining: self.pending.len(),
            complete: self.complete,
        })
    }

    /// True for well-formed ids that belong to an already closed iteration.
    fn is_past_query(&self, id: &str) -> bool {
        let it = id
            .strip_prefix('i')
            .and_then(|s| s.split('-').next())
            .and_then(|s| s.parse::<usize>().ok());
        match it {
            Some(it) if self.complete => it <= self.state.iteration,
            Some(it) => it < self.state.iteration,
            None => false,
        }
    }

    fn payload(&self, action: usize) -> Result<RolloutPayload> {
        let rollout = self.load_rollout(action)?;
        Ok(RolloutPayload {
            id: rollout_id(action),
            action,
            values: self.campaign.grid().action(action)?.values,
            summary: RolloutSummary::new(&rollout, &self.campaign.config().safety),
            rollout,
        })
    }

    fn load_rollout(&self, action: usize) -> Result<Rollout> {
        let path = self
            .dir
            .join(ROLLOUT_DIR)
            .join(format!("{}.json", rollout_id(action)));
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::UnknownRollout(rollout_id(action)))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn queries(&self) -> Result<QueryList> {
        let queries = self
            .pending
            .iter()
            .map(|q| {
                Ok(QueryView {
                    query: q.clone(),
                    rollouts: q
                        .actions()
                        .into_iter()
                        .map(|a| self.payload(a))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(QueryList {
            session: self.id.clone(),
            version: self.version,
            iteration: self.state.iteration,
            complete: self.complete,
            environment: self.campaign.config().scenario.environment.clone(),
            queries,
        })
    }

    fn report(&self) -> Result<CampaignReport> {
        self.campaign.report(&self.state)
    }

    /// Turns batch feedback into one submission per open query.
    fn submit_answers(&mut self, batch: &QueryBatch, answers: &FeedbackDataset) -> Result<()> {
        batch.check(answers)?;
        for q in self.pending.clone() {
            let verdict = match q.kind {
                QueryKind::Preference { left, right } => answers
                    .preferences
                    .iter()
                    .find(|p| {
                        (p.preferred, p.other) == (left, right)
                            || (p.preferred, p.other) == (right, left)
                    })
                    .map(|p| Verdict::Prefer {
                        preferred: if p.preferred == left {
                            Side::Left
                        } else {
                            Side::Right
                        },
                    }),
                QueryKind::Ordinal { action } => answers
                    .ordinals
                    .iter()
                    .find(|o| o.action == action)
                    .map(|o| Verdict::Label {
                        category: o.category,
                    }),
            };
            let sub = FeedbackSubmission {
                query_id: q.id,
                verdict: verdict.unwrap_or(Verdict::Skip),
                rater: Some("provider".into()),
                expected_version: None,
            };
            self.submit(&sub, None)?;
        }
        Ok(())
    }
}

/// Everything known about a session, for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionExport {
    pub id: String,
    pub config: CampaignConfig,
    pub version: u64,
    pub iteration: usize,
    pub complete: bool,
    pub dataset: Vec<DatasetRecord>,
    pub skips: Vec<SkipRecord>,
    pub report: CampaignReport,
}

impl SessionExport {
    /// Dataset as CSV, one row per record.
    pub fn dataset_csv(&self) -> String {
        let mut out = String::from(
            "seq,iteration,query_id,kind,preferred,other,action,category,rater,auto\n",
        );
        for r in &self.dataset {
            let (kind, preferred, other, action, category) = match &r.entry {
                DatasetEntry::Preference { preferred, other } => (
                    "preference",
                    preferred.to_string(),
                    other.to_string(),
                    String::new(),
                    String::new(),
                ),
                DatasetEntry::Ordinal { action, category } => (
                    "ordinal",
                    String::new(),
                    String::new(),
                    action.to_string(),
                    (*category as u8).to_string(),
                ),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.seq,
                r.iteration,
                r.query_id,
                kind,
                preferred,
                other,
                action,
                category,
                r.rater.as_deref().unwrap_or(""),
                r.auto
            ));
        }
        out
    }
}

/// All sessions under one data directory. Mutations of a session are
/// serialized by its own lock; different sessions proceed independently.
pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    failpoint: Mutex<Option<Failpoint>>,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            sessions: RwLock::new(HashMap::new()),
            failpoint: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Arms a one-shot failpoint for the next submission.
    pub fn set_failpoint(&self, fp: Option<Failpoint>) {
        *self.failpoint.lock().expect("failpoint lock") = fp;
    }

    pub fn create_json(&self, text: &str) -> Result<String> {
        self.create(CampaignConfig::from_json(text)?)
    }

    pub fn create(&self, config: CampaignConfig) -> Result<String> {
        let campaign = Campaign::new(config)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        fs::create_dir_all(dir.join(ROLLOUT_DIR))?;
        write_atomic(
            &dir.join(CONFIG_FILE),
            &serde_json::to_vec_pretty(campaign.config())?,
        )?;
        let (state, batch) = campaign.learner().init()?;
        let mut session = Session {
            id: id.clone(),
            dir,
            campaign,
            version: 1,
            complete: false,
            state,
            batch: None,
            pending: Vec::new(),
            current: FeedbackDataset::default(),
            answered: HashSet::new(),
            next_seq: 0,
        };
        session.open_batch(batch)?;
        session.checkpoint()?;
        tracing::info!(session = %id, "session created");
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    /// Ids of every session directory on disk.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(CHECKPOINT_FILE).exists() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        if let Some(s) = self.sessions.read().expect("session map lock").get(id) {
            return Ok(s.clone());
        }
        let mut map = self.sessions.write().expect("session map lock");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let session = Arc::new(Mutex::new(recover(&self.root, id)?));
        map.insert(id.to_string(), session.clone());
        Ok(session)
    }

    fn with<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let s = self.get(id)?;
        let mut guard = s.lock().expect("session lock");
        f(&mut guard)
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary> {
        self.with(id, |s| Ok(s.summary()))
    }

    pub fn next_queries(&self, id: &str) -> Result<QueryList> {
        self.with(id, |s| s.queries())
    }

    pub fn submit(&self, id: &str, sub: &FeedbackSubmission) -> Result<SubmitAck> {
        let fail = self.failpoint.lock().expect("failpoint lock").take();
        let result = self.with(id, |s| s.submit(sub, fail));
        if let Err(e) = &result {
            if matches!(e, Error::InjectedCrash(_)) {
                // the in-memory session is gone with the "process"
                self.sessions.write().expect("session map lock").remove(id);
            } else {
                tracing::debug!(session = %id, query = %sub.query_id, error = %e, "submission rejected");
            }
        }
        result
    }

    pub fn rollout(&self, id: &str, rid: &str) -> Result<RolloutPayload> {
        let action = parse_rollout_id(rid).ok_or_else(|| Error::UnknownRollout(rid.to_string()))?;
        self.with(id, |s| s.payload(action))
    }

    pub fn report(&self, id: &str) -> Result<CampaignReport> {
        self.with(id, |s| s.report())
    }

    /// Feeds the session from its campaign provider until it completes.
    pub fn drive(&self, id: &str) -> Result<CampaignReport> {
        self.with(id, |s| {
            while let Some(batch) = s.batch.clone() {
                let answers = s.campaign.provider().answer(&batch)?;
                s.submit_answers(&batch, &answers)?;
            }
            s.report()
        })
    }

    pub fn export(&self, id: &str) -> Result<SessionExport> {
        self.with(id, |s| {
            Ok(SessionExport {
                id: s.id.clone(),
                config: s.campaign.config().clone(),
                version: s.version,
                iteration: s.state.iteration,
                complete: s.complete,
                dataset: read_records(&s.dir.join(DATASET_FILE))?.0,
                skips: read_records(&s.dir.join(SKIPS_FILE))?.0,
                report: s.report()?,
            })
        })
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }
}

fn recover(root: &Path, id: &str) -> Result<Session> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(Error::UnknownSession(id.to_string()));
    }
    let dir = root.join(id);
    let cp_path = dir.join(CHECKPOINT_FILE);
    if !cp_path.exists() {
        return Err(Error::UnknownSession(id.to_string()));
    }
    let config = CampaignConfig::from_json(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let cp: Checkpoint = serde_json::from_slice(&fs::read(&cp_path)?)?;
    let campaign = Campaign::new(config)?;

    let (records, dropped) = read_records::<DatasetRecord>(&dir.join(DATASET_FILE))?;
    let (skips, dropped_skips) = read_records::<SkipRecord>(&dir.join(SKIPS_FILE))?;
    if dropped + dropped_skips > 0 {
        tracing::warn!(session = %id, dropped, dropped_skips, "truncated torn journal tail");
    }

    let mut seen = HashSet::new();
    let mut past = FeedbackDataset::default();
    let mut current_entries = Vec::new();
    let mut next_seq = 0;
    for r in records {
        next_seq = next_seq.max(r.seq + 1);
        if !seen.insert(r.query_id.clone()) {
            continue;
        }
        let closed = r.iteration < cp.state.iteration || cp.complete;
        if closed {
            match r.entry {
                DatasetEntry::Preference { preferred, other } => {
                    past.preferences.push(Preference { preferred, other })
                }
                DatasetEntry::Ordinal { action, category } => {
                    past.ordinals.push(OrdinalLabel { action, category })
                }
            }
        } else {
            current_entries.push(r);
        }
    }
    if past != cp.state.dataset {
        return Err(Error::Provider(format!(
            "session `{id}`: journal disagrees with checkpoint ({} vs {} records)",
            past.len(),
            cp.state.dataset.len()
        )));
    }

    let mut session = Session {
        id: id.to_string(),
        dir,
        campaign,
        version: cp.version,
        complete: cp.complete,
        state: cp.state,
        batch: None,
        pending: Vec::new(),
        current: FeedbackDataset::default(),
        answered: HashSet::new(),
        next_seq,
    };
    if let Some(batch) = cp.batch {
        session.store_rollouts(&batch)?;
        session.pending = batch_queries(&batch);
        session.batch = Some(batch);
        for r in current_entries {
            if session.pending.iter().any(|q| q.id == r.query_id) {
                session.apply(&r.query_id, Some(&r.entry));
            }
        }
        for s in skips {
            if s.iteration == session.state.iteration
                && seen.insert(s.query_id.clone())
                && session.pending.iter().any(|q| q.id == s.query_id)
            {
                session.apply(&s.query_id, None);
            }
        }
        if session.pending.is_empty() {
            tracing::info!(session = %id, "resuming interrupted advance");
            session.advance()?;
        }
    }
    Ok(session)
}

/// Appends one line and syncs it to disk before returning.
fn append_line(path: &Path, line: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line);
    buf.push(b'\n');
    f.write_all(&buf)?;
    f.sync_data()?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        // directory fsync is not supported everywhere
        let _ = File::open(parent).and_then(|d| d.sync_all());
    }
    Ok(())
}

/// Parses a JSONL journal. A torn final line is cut off the file and its
/// byte count returned alongside the records.
fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize)> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    }
    let mut out = Vec::new();
    let mut good = 0;
    let mut start = 0;
    while start < bytes.len() {
        let Some(nl) = bytes[start..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[start..start + nl];
        match serde_json::from_slice::<T>(line) {
            Ok(v) => out.push(v),
            Err(e) if start + nl + 1 < bytes.len() => {
                return Err(Error::Provider(format!(
                    "corrupt journal {} at byte {start}: {e}",
                    path.display()
                )))
            }
            Err(_) => break,
        }
        start += nl + 1;
        good = start;
    }
    let dropped = bytes.len() - good;
    if dropped > 0 {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(good as u64)?;
        f.sync_all()?;
    }
    Ok((out, dropped))
}
