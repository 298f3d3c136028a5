//! Request-independent service state: base data, the deployed model and
//! the event-sourced router.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Context;
use arc_swap::ArcSwapOption;
use chrono::{DateTime, NaiveDate, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use triage_core::corpus::{load_csv, LabeledEmail};
use triage_core::ingest::{CleaningRules, ExtractorRegistry, RawEmail};
use triage_core::metrics::DayCounts;
use triage_core::router::{
    EnqueueReason, EventKind, ManualAssignment, Outcome, PriorityLexicon, Roster, Router, RouterContext, Ticket,
    TicketOrigin, TicketStatus,
};
use triage_core::taxonomy::{load_taxonomy, Category1, MappingTable, SenderDirectory, UniqueCategory};

use crate::config::Config;
use crate::error::{ApiError, ErrorCode};
use crate::registry::{build_version, BuildSources, Evaluation, LoadedVersion, ModelRegistry};

pub const EVENT_LOG: &str = "events.jsonl";

/// Inputs that do not change between model versions.
pub struct BaseData {
    pub table: MappingTable,
    pub senders: SenderDirectory,
    pub roster: Roster,
    pub rows: Vec<LabeledEmail>,
}

impl BaseData {
    pub fn load(cfg: &Config) -> anyhow::Result<Self> {
        let i = &cfg.inputs;
        let (table, senders) = load_taxonomy(&i.mapping, &i.senders)
            .with_context(|| format!("loading {} and {}", i.mapping.display(), i.senders.display()))?;
        let roster = match &i.roster {
            Some(p) => Roster::load(p).with_context(|| format!("loading roster {}", p.display()))?,
            None => Roster::one_per_group(&table),
        };
        let rows = load_csv(&i.corpus).with_context(|| format!("loading corpus {}", i.corpus.display()))?;
        Ok(Self {
            table,
            senders,
            roster,
            rows,
        })
    }
}

/// A published version together with the routing context built from it.
pub struct Deployed {
    pub registry: ModelRegistry,
    pub ctx: RouterContext,
}

pub struct Service {
    cfg: Config,
    base: BaseData,
    current: ArcSwapOption<Deployed>,
    router: Mutex<Router>,
    retraining: AtomicBool,
}

/// Held while a retrain runs; dropping it lets the next one start.
pub struct RetrainGuard<'a>(&'a AtomicBool);

impl Drop for RetrainGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub email_id: String,
    pub outcome: Outcome,
    /// `quick_fix`, `static_rule`, `ml` or `manual`.
    pub origin: String,
    pub ticket_id: Option<String>,
    pub model_version: u64,
    /// Sequence numbers of the events this submission appended.
    pub events: Vec<u64>,
    /// True when the id was routed before; nothing new was recorded.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub email_id: String,
    pub sender: String,
    pub cat1: Option<Category1>,
    pub title: String,
    pub body: String,
    pub reason: EnqueueReason,
    pub candidates: Vec<Candidate>,
    pub enqueued_at: DateTime<Utc>,
    /// Assignable pairs for the region; empty when the region is unknown.
    pub valid_pairs: Vec<UniqueCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignRequest {
    pub cat2: String,
    pub cat3: String,
    #[serde(default)]
    pub operator: Option<String>,
    /// Needed only for items whose region could not be resolved.
    #[serde(default)]
    pub cat1: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignResponse {
    pub ticket: Ticket,
    /// Manual rows now waiting for the next retrain.
    pub pending_training_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub date: NaiveDate,
    #[serde(flatten)]
    pub counts: DayCounts,
    pub total: usize,
    pub automation_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    #[serde(flatten)]
    pub counts: DayCounts,
    pub total: usize,
    pub automation_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub days: Vec<DayStats>,
    pub totals: Totals,
    pub model_version: Option<u64>,
    /// Held-out coverage and selective accuracy of the deployed version.
    pub model: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: Option<u64>,
    pub events: u64,
    pub retraining: bool,
}

fn day_stats(date: NaiveDate, counts: DayCounts) -> DayStats {
    DayStats {
        date,
        total: counts.total(),
        automation_share: counts.automation_share(),
        counts,
    }
}

fn origin_name(o: &Outcome) -> &'static str {
    match o {
        Outcome::QuickFix { .. } => "quick_fix",
        Outcome::Manual { .. } => "manual",
        Outcome::Ticket { origin, .. } => match origin {
            TicketOrigin::QuickFix => "quick_fix",
            TicketOrigin::StaticRule => "static_rule",
            TicketOrigin::Ml => "ml",
            TicketOrigin::Manual => "manual",
        },
    }
}

impl Service {
    /// Loads base data, the current version (if any) and replays the log.
    pub fn open(cfg: Config) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&cfg.data_dir)
            .with_context(|| format!("creating data dir {}", cfg.data_dir.display()))?;
        let base = BaseData::load(&cfg)?;
        let router = Router::open(&cfg.data_dir.join(EVENT_LOG)).context("replaying event log")?;
        let svc = Self {
            cfg,
            base,
            current: ArcSwapOption::empty(),
            router: Mutex::new(router),
            retraining: AtomicBool::new(false),
        };
        if let Some(reg) = ModelRegistry::load(&svc.cfg.data_dir)? {
            let loaded = reg.open(&svc.cfg.data_dir).context("loading registered artifacts")?;
            svc.deploy(reg, loaded);
        }
        Ok(svc)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn data_dir(&self) -> &Path {
        &self.cfg.data_dir
    }

    pub fn base(&self) -> &BaseData {
        &self.base
    }

    pub fn deployed(&self) -> Option<Arc<Deployed>> {
        self.current.load_full()
    }

    fn deploy(&self, registry: ModelRegistry, loaded: LoadedVersion) {
        let priority = loaded.matcher.as_ref().map_or_else(
            || PriorityLexicon::from_words(Vec::<String>::new()),
            PriorityLexicon::from_matcher,
        );
        let ctx = RouterContext {
            table: self.base.table.clone(),
            senders: self.base.senders.clone(),
            cleaning: CleaningRules::default(),
            extractor: Box::new(ExtractorRegistry::with_plain_text()),
            rules: loaded.rules,
            matcher: loaded.matcher,
            priority,
            model: loaded.model,
            roster: self.base.roster.clone(),
            model_version: registry.version,
        };
        self.current.store(Some(Arc::new(Deployed { registry, ctx })));
    }

    pub fn submit(&self, raw: &RawEmail) -> Result<SubmitResponse, ApiError> {
        if raw.id.trim().is_empty() {
            return Err(ApiError::bad_request("email id is empty"));
        }
        if raw.sender.trim().is_empty() {
            return Err(ApiError::bad_request("sender is empty"));
        }
        // One snapshot per routing: every event of this email carries the
        // same version even if a retrain swaps models meanwhile.
        let dep = self
            .deployed()
            .ok_or_else(|| ApiError::new(ErrorCode::NotReady, "no model has been trained yet"))?;
        let r = self.router.lock().submit(raw, &dep.ctx)?;
        let ticket_id = match &r.outcome {
            Outcome::Ticket { ticket_id, .. } => Some(ticket_id.clone()),
            _ => None,
        };
        let model_version = r
            .events
            .iter()
            .find_map(|e| e.model_version)
            .unwrap_or(dep.registry.version);
        Ok(SubmitResponse {
            email_id: raw.id.clone(),
            origin: origin_name(&r.outcome).to_string(),
            duplicate: r.events.is_empty(),
            events: r.events.iter().map(|e| e.seq).collect(),
            outcome: r.outcome,
            ticket_id,
            model_version,
        })
    }

    pub fn tickets(&self, status: Option<TicketStatus>) -> Vec<Ticket> {
        let router = self.router.lock();
        router
            .state()
            .tickets
            .values()
            .filter(|t| status.is_none_or(|s| t.status == s))
            .cloned()
            .collect()
    }

    pub fn manual_queue(&self) -> Vec<QueueEntry> {
        let router = self.router.lock();
        router
            .state()
            .pending_queue()
            .into_iter()
            .map(|item| QueueEntry {
                email_id: item.email_id.clone(),
                sender: item.sender.clone(),
                cat1: item.email.cat1.clone(),
                title: item.email.title.clone(),
                body: item.email.body.clone(),
                reason: item.reason,
                candidates: item
                    .candidates
                    .iter()
                    .map(|(label, prob)| Candidate {
                        label: label.clone(),
                        prob: *prob,
                    })
                    .collect(),
                enqueued_at: item.enqueued_at,
                valid_pairs: item
                    .email
                    .cat1
                    .as_ref()
                    .map(|c| self.base.table.valid_pairs(c))
                    .unwrap_or_default(),
            })
            .collect()
    }

    pub fn assign(&self, email_id: &str, req: &AssignRequest, at: DateTime<Utc>) -> Result<AssignResponse, ApiError> {
        let operator = req
            .operator
            .as_deref()
            .filter(|o| !o.trim().is_empty())
            .ok_or_else(|| ApiError::bad_request("operator is required"))?;
        let mut router = self.router.lock();
        let (ticket, _) = router.manual_assign(
            &ManualAssignment {
                email_id,
                cat2: &req.cat2,
                cat3: &req.cat3,
                operator,
                cat1: req.cat1.as_deref(),
                at,
            },
            &self.base.table,
            &self.base.roster,
        )?;
        let pending = router
            .state()
            .training_rows
            .len()
            .saturating_sub(self.manual_rows_in_current());
        Ok(AssignResponse {
            ticket,
            pending_training_rows: pending,
        })
    }

    fn manual_rows_in_current(&self) -> usize {
        self.deployed().map_or(0, |d| d.registry.manual_rows)
    }

    /// `Some` when no other retrain is running.
    pub fn begin_retrain(&self) -> Option<RetrainGuard<'_>> {
        self.retraining
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| RetrainGuard(&self.retraining))
    }

    pub fn is_retraining(&self) -> bool {
        self.retraining.load(Ordering::Acquire)
    }

    /// Builds and publishes the next version from the base corpus plus
    /// every manual assignment so far. Routing continues on the old
    /// version until the swap.
    pub fn retrain(&self) -> Result<ModelRegistry, ApiError> {
        let _guard = self
            .begin_retrain()
            .ok_or_else(|| ApiError::new(ErrorCode::RetrainRunning, "a retrain is already running"))?;
        self.retrain_locked()
    }

    fn retrain_locked(&self) -> Result<ModelRegistry, ApiError> {
        let manual: Vec<LabeledEmail> = self.router.lock().state().training_rows.clone();
        let mut rows = self.base.rows.clone();
        let manual_rows = manual.len();
        rows.extend(manual);
        if rows.is_empty() {
            return Err(ApiError::bad_request("the training store is empty"));
        }
        let current = ModelRegistry::load(self.data_dir()).map_err(|e| ApiError::internal(e.to_string()))?;
        let version = current.map_or(1, |r| r.version + 1);
        let i = &self.cfg.inputs;
        let sources = BuildSources {
            rules: i.rules.as_deref(),
            intents: i.intents.as_deref(),
        };
        let (registry, loaded) = build_version(
            self.data_dir(),
            version,
            rows,
            manual_rows,
            &self.base.table,
            &self.cfg.train,
            self.cfg.seed,
            &sources,
        )
        .map_err(|e| ApiError::internal(format!("retrain failed: {e}")).with("version", json!(version)))?;
        registry
            .publish(self.data_dir())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.deploy(registry.clone(), loaded);
        tracing::info!(version, rows = registry.training_rows, "published model version");
        Ok(registry)
    }

    pub fn stats(&self, from: Option<NaiveDate>, to: Option<NaiveDate>) -> Result<StatsResponse, ApiError> {
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(ApiError::bad_request("`from` is after `to`")
                    .with("from", json!(f))
                    .with("to", json!(t)));
            }
        }
        let report = self.router.lock().state().daily_report(from, to);
        let totals = report.totals();
        let dep = self.deployed();
        Ok(StatsResponse {
            from,
            to,
            days: report.days.into_iter().map(|(d, c)| day_stats(d, c)).collect(),
            totals: Totals {
                total: totals.total(),
                automation_share: totals.automation_share(),
                counts: totals,
            },
            model_version: dep.as_ref().map(|d| d.registry.version),
            model: dep.map(|d| d.registry.evaluation.clone()),
        })
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            model_version: self.deployed().map(|d| d.registry.version),
            events: self.router.lock().state().next_seq,
            retraining: self.is_retraining(),
        }
    }

    /// Routes `raw` against the current state without recording anything.
    pub fn dry_run(&self, raw: &RawEmail) -> Result<(Outcome, Option<EventKind>), ApiError> {
        let dep = self
            .deployed()
            .ok_or_else(|| ApiError::new(ErrorCode::NotReady, "no model has been trained yet"))?;
        let router = self.router.lock();
        let r = triage_core::router::route(raw, &dep.ctx, router.state());
        let ml = r
            .events
            .into_iter()
            .map(|e| e.kind)
            .find(|k| matches!(k, EventKind::MlClassified { .. }));
        Ok((r.outcome, ml))
    }

    pub fn event_log_path(&self) -> PathBuf {
        self.cfg.data_dir.join(EVENT_LOG)
    }
}
