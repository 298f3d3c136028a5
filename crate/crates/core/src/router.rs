//! Routing state machine and the event log that backs it.
//!
//! [`route`] is pure: it reads the current [`RouterState`] and returns the
//! events one email produces. State only changes through
//! [`RouterState::apply`], so replaying a log rebuilds it exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{GateDecision, ABSTAIN_CANDIDATES};
use crate::corpus::LabeledEmail;
use crate::featurizer::{tokenize, Stopwords};
use crate::ingest::{
    clean, detect_forwarded, normalized_subject, CleanEmail, CleaningRules, RawEmail, TextExtractor, ThreadStore,
};
use crate::metrics::{DailyReport, OutcomeOrigin};
use crate::pipeline::TrainedModel;
use crate::quickfix::{quickfix_step, DialogState, DialogStatus, IntentMatcher, QuickfixAction};
use crate::rules::{matching_rules, RuleMatch, RuleSet};
use crate::taxonomy::{Category1, Category2, Category3, MappingTable, SenderDirectory, UniqueCategory};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("triple {cat1}/{cat2}/{cat3} is not valid; valid pairs for the region: {}", valid_pairs_text(.valid))]
    InvalidTriple {
        cat1: String,
        cat2: String,
        cat3: String,
        valid: Vec<UniqueCategory>,
    },
    #[error("no consultant is rostered for admin group {0}")]
    EmptyRoster(String),
    #[error("manual queue has no item for email {0}")]
    UnknownItem(String),
    #[error("email {email_id} was already assigned as ticket {ticket_id}")]
    AlreadyAssigned { email_id: String, ticket_id: String },
    #[error("email {0} has an unknown region; pass a region to assign it")]
    RegionRequired(String),
    #[error("event {seq}: {message}")]
    Replay { seq: u64, message: String },
    #[error("event log line {line}: {message}")]
    LogParse { line: usize, message: String },
    #[error("roster line {line}: {message}")]
    RosterParse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn valid_pairs_text(v: &[UniqueCategory]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(UniqueCategory::label).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketOrigin {
    QuickFix,
    StaticRule,
    Ml,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: String,
    pub email_id: String,
    pub cat1: Category1,
    pub cat2: Category2,
    pub cat3: Category3,
    pub admin_group: String,
    pub assignee: Option<String>,
    pub status: TicketStatus,
    pub origin: TicketOrigin,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnqueueReason {
    UnknownRegion,
    Abstained,
    QuickfixEscalationUnclassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualQueueItem {
    pub email_id: String,
    pub sender: String,
    pub email: CleanEmail,
    /// Up to three ML candidates, highest probability first.
    pub candidates: Vec<(String, f64)>,
    pub reason: EnqueueReason,
    pub enqueued_at: DateTime<Utc>,
    /// Ticket created by a manual assignment, once done.
    #[serde(default)]
    pub assigned_ticket: Option<String>,
}

/// Consultants per admin group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    groups: BTreeMap<String, BTreeSet<String>>,
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, admin_group: &str, consultant: &str) {
        self.groups
            .entry(admin_group.to_string())
            .or_default()
            .insert(consultant.to_string());
    }

    pub fn consultants(&self, admin_group: &str) -> Option<&BTreeSet<String>> {
        self.groups.get(admin_group).filter(|c| !c.is_empty())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Reads `admin_group,consultant` rows.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, RouterError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut roster = Roster::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| RouterError::RosterParse {
                line: e.position().map_or(i as u64 + 1, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(i as u64 + 1, |p| p.line());
            if i == 0 {
                if rec.iter().ne(["admin_group", "consultant"]) {
                    return Err(RouterError::RosterParse {
                        line,
                        message: "expected header admin_group,consultant".into(),
                    });
                }
                continue;
            }
            if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
                return Err(RouterError::RosterParse {
                    line,
                    message: "expected non-empty admin_group and consultant".into(),
                });
            }
            roster.insert(&rec[0], &rec[1]);
        }
        Ok(roster)
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        Self::read_csv(File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RouterError> {
        writeln!(w, "admin_group,consultant")?;
        for (g, cs) in &self.groups {
            for c in cs {
                writeln!(w, "{g},{c}")?;
            }
        }
        Ok(())
    }

    /// One consultant per admin group of `table`, named after the group.
    pub fn one_per_group(table: &MappingTable) -> Self {
        let mut r = Self::new();
        for e in table.entries() {
            r.insert(&e.admin_group, &format!("{}-c1", e.admin_group.to_lowercase()));
        }
        r
    }
}

/// Least open tickets within the group; ties go to the smallest id.
pub fn assign_consultant(
    admin_group: &str,
    roster: &Roster,
    open_load: &BTreeMap<String, usize>,
) -> Result<String, RouterError> {
    let consultants = roster
        .consultants(admin_group)
        .ok_or_else(|| RouterError::EmptyRoster(admin_group.to_string()))?;
    let best = consultants
        .iter()
        .min_by_key(|c| (open_load.get(*c).copied().unwrap_or(0), (*c).clone()))
        .expect("non-empty roster group");
    Ok(best.clone())
}

fn invalid_triple(table: &MappingTable, cat1: &Category1, cat2: &Category2, cat3: &Category3) -> RouterError {
    RouterError::InvalidTriple {
        cat1: cat1.to_string(),
        cat2: cat2.to_string(),
        cat3: cat3.to_string(),
        valid: table.valid_pairs(cat1),
    }
}

/// Builds an open ticket. A group absent from the roster leaves the ticket
/// unassigned.
#[allow(clippy::too_many_arguments)]
pub fn create_ticket(
    id: String,
    email_id: &str,
    cat1: &Category1,
    cat2: &Category2,
    cat3: &Category3,
    origin: TicketOrigin,
    created_at: DateTime<Utc>,
    table: &MappingTable,
    roster: &Roster,
    open_load: &BTreeMap<String, usize>,
) -> Result<Ticket, RouterError> {
    let admin_group = table
        .lookup_admin_group(cat1, cat2, cat3)
        .map_err(|_| invalid_triple(table, cat1, cat2, cat3))?
        .to_string();
    let assignee = assign_consultant(&admin_group, roster, open_load).ok();
    Ok(Ticket {
        id,
        email_id: email_id.to_string(),
        cat1: cat1.clone(),
        cat2: cat2.clone(),
        cat3: cat3.clone(),
        admin_group,
        assignee,
        status: TicketStatus::Open,
        origin,
        created_at,
    })
}

/// Terms that mark an email as high priority for the quick-fix bot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityLexicon {
    terms: BTreeSet<String>,
}

impl PriorityLexicon {
    /// Words are tokenized and stemmed like email text.
    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let stop = Stopwords::default();
        let terms = words
            .into_iter()
            .flat_map(|w| tokenize(w.as_ref(), &stop).tokens)
            .collect();
        Self { terms }
    }

    /// The matcher's utterance vocabulary.
    pub fn from_matcher(m: &IntentMatcher) -> Self {
        Self {
            terms: m.vocabulary().cloned().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_high_priority(&self, ce: &CleanEmail) -> bool {
        let stop = Stopwords::default();
        [&ce.title, &ce.body]
            .iter()
            .any(|t| tokenize(t, &stop).tokens.iter().any(|tok| self.terms.contains(tok)))
    }
}

/// Everything routing reads. Swapped as a unit between routings.
pub struct RouterContext {
    pub table: MappingTable,
    pub senders: SenderDirectory,
    pub cleaning: CleaningRules,
    pub extractor: Box<dyn TextExtractor>,
    pub rules: RuleSet,
    /// Quick-fix stage is skipped when absent.
    pub matcher: Option<IntentMatcher>,
    pub priority: PriorityLexicon,
    pub model: TrainedModel,
    pub roster: Roster,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Intake,
    Region,
    QuickFix,
    StaticRules,
    Ml,
    Outcome,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum EventKind {
    Received {
        sender: String,
        subject: String,
    },
    Cleaned {
        subject_key: String,
        is_forwarded: bool,
        thread_id: String,
    },
    Cat1Assigned {
        cat1: Category1,
    },
    Cat1Unknown {
        sender: String,
    },
    QuickfixTurn {
        action: QuickfixAction,
        dialog: DialogState,
    },
    RuleMatched {
        rule: RuleMatch,
    },
    NoRuleMatched,
    MlClassified {
        category: String,
        prob: f64,
        threshold: f64,
        auto: bool,
        candidates: Vec<(String, f64)>,
    },
    QuickfixReplied {
        intent: String,
        reply: String,
        awaiting_reply: bool,
    },
    TicketCreated {
        ticket: Ticket,
    },
    ManualQueued {
        item: ManualQueueItem,
    },
    ManualAssigned {
        operator: String,
        ticket: Ticket,
        training_row: LabeledEmail,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Received { .. } => "Received",
            EventKind::Cleaned { .. } => "Cleaned",
            EventKind::Cat1Assigned { .. } => "Cat1Assigned",
            EventKind::Cat1Unknown { .. } => "Cat1Unknown",
            EventKind::QuickfixTurn { .. } => "QuickfixTurn",
            EventKind::RuleMatched { .. } => "RuleMatched",
            EventKind::NoRuleMatched => "NoRuleMatched",
            EventKind::MlClassified { .. } => "MlClassified",
            EventKind::QuickfixReplied { .. } => "QuickfixReplied",
            EventKind::TicketCreated { .. } => "TicketCreated",
            EventKind::ManualQueued { .. } => "ManualQueued",
            EventKind::ManualAssigned { .. } => "ManualAssigned",
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            EventKind::Received { .. } | EventKind::Cleaned { .. } => Stage::Intake,
            EventKind::Cat1Assigned { .. } | EventKind::Cat1Unknown { .. } => Stage::Region,
            EventKind::QuickfixTurn { .. } => Stage::QuickFix,
            EventKind::RuleMatched { .. } | EventKind::NoRuleMatched => Stage::StaticRules,
            EventKind::MlClassified { .. } => Stage::Ml,
            EventKind::QuickfixReplied { .. } | EventKind::TicketCreated { .. } | EventKind::ManualQueued { .. } => {
                Stage::Outcome
            }
            EventKind::ManualAssigned { .. } => Stage::Manual,
        }
    }

    /// Whether this event ends the routing of an email.
    pub fn is_terminal(&self) -> bool {
        self.stage() == Stage::Outcome
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub seq: u64,
    pub email_id: String,
    pub at: DateTime<Utc>,
    /// Artifact version in effect while routing; absent on operator events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u64>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    QuickFix {
        intent: String,
        reply: String,
        awaiting_reply: bool,
    },
    Ticket {
        ticket_id: String,
        origin: TicketOrigin,
    },
    Manual {
        reason: EnqueueReason,
    },
}

impl Outcome {
    pub fn origin(&self) -> OutcomeOrigin {
        match self {
            Outcome::QuickFix { .. } => OutcomeOrigin::Quickfix,
            Outcome::Ticket { origin, .. } => match origin {
                TicketOrigin::QuickFix => OutcomeOrigin::Quickfix,
                TicketOrigin::StaticRule => OutcomeOrigin::Static,
                TicketOrigin::Ml => OutcomeOrigin::MlAuto,
                TicketOrigin::Manual => OutcomeOrigin::Manual,
            },
            Outcome::Manual { .. } => OutcomeOrigin::Manual,
        }
    }

    fn of_terminal(kind: &EventKind) -> Option<Self> {
        match kind {
            EventKind::QuickfixReplied {
                intent,
                reply,
                awaiting_reply,
            } => Some(Outcome::QuickFix {
                intent: intent.clone(),
                reply: reply.clone(),
                awaiting_reply: *awaiting_reply,
            }),
            EventKind::TicketCreated { ticket } => Some(Outcome::Ticket {
                ticket_id: ticket.id.clone(),
                origin: ticket.origin,
            }),
            EventKind::ManualQueued { item } => Some(Outcome::Manual { reason: item.reason }),
            _ => None,
        }
    }
}

/// Ticket, queue, dialog and thread state, derived only from events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub tickets: BTreeMap<String, Ticket>,
    pub queue: BTreeMap<String, ManualQueueItem>,
    pub dialogs: BTreeMap<String, DialogState>,
    pub threads: ThreadStore,
    pub outcomes: BTreeMap<String, Outcome>,
    /// Rows produced by manual assignments, in assignment order.
    pub training_rows: Vec<LabeledEmail>,
    /// Routed emails per day and origin, in routing order.
    pub routed: Vec<(String, NaiveDate, OutcomeOrigin)>,
    pub next_seq: u64,
    /// Emails whose routing has started but not reached an outcome.
    in_flight: BTreeSet<String>,
}

impl RouterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Open tickets per assignee.
    pub fn open_load(&self) -> BTreeMap<String, usize> {
        let mut load = BTreeMap::new();
        for t in self.tickets.values() {
            if let (TicketStatus::Open, Some(a)) = (t.status, &t.assignee) {
                *load.entry(a.clone()).or_insert(0) += 1;
            }
        }
        load
    }

    /// Unassigned manual queue items, oldest first.
    pub fn pending_queue(&self) -> Vec<&ManualQueueItem> {
        let mut v: Vec<&ManualQueueItem> = self.queue.values().filter(|i| i.assigned_ticket.is_none()).collect();
        v.sort_by(|a, b| {
            a.enqueued_at
                .cmp(&b.enqueued_at)
                .then_with(|| a.email_id.cmp(&b.email_id))
        });
        v
    }

    pub fn next_ticket_id(&self) -> String {
        format!("T{:06}", self.tickets.len() + 1)
    }

    pub fn daily_report(&self, from: Option<NaiveDate>, to: Option<NaiveDate>) -> DailyReport {
        DailyReport::from_outcomes(self.routed.iter().map(|(_, d, o)| (*d, *o)), from, to)
    }

    fn replay_err(ev: &PipelineEvent, message: impl Into<String>) -> RouterError {
        RouterError::Replay {
            seq: ev.seq,
            message: message.into(),
        }
    }

    /// The only state transition.
    pub fn apply(&mut self, ev: &PipelineEvent) -> Result<(), RouterError> {
        if ev.seq != self.next_seq {
            return Err(Self::replay_err(ev, format!("expected seq {}", self.next_seq)));
        }
        let id = ev.email_id.as_str();
        match &ev.kind {
            EventKind::Received { .. } => {
                if self.outcomes.contains_key(id) || !self.in_flight.insert(id.to_string()) {
                    return Err(Self::replay_err(ev, format!("email {id} received twice")));
                }
            }
            EventKind::ManualAssigned {
                ticket, training_row, ..
            } => {
                let item = self
                    .queue
                    .get_mut(id)
                    .ok_or_else(|| Self::replay_err(ev, format!("no manual item for {id}")))?;
                if item.assigned_ticket.is_some() {
                    return Err(Self::replay_err(ev, format!("{id} assigned twice")));
                }
                item.assigned_ticket = Some(ticket.id.clone());
                self.tickets.insert(ticket.id.clone(), ticket.clone());
                self.training_rows.push(training_row.clone());
            }
            other => {
                if !self.in_flight.contains(id) {
                    return Err(Self::replay_err(
                        ev,
                        format!("{} for {id} outside a routing", other.name()),
                    ));
                }
                match other {
                    EventKind::Cleaned {
                        subject_key, thread_id, ..
                    } => self.threads.record(id, subject_key, thread_id),
                    EventKind::QuickfixTurn { dialog, .. } => {
                        self.dialogs.insert(dialog.thread_id.clone(), dialog.clone());
                    }
                    EventKind::TicketCreated { ticket } => {
                        self.tickets.insert(ticket.id.clone(), ticket.clone());
                    }
                    EventKind::ManualQueued { item } => {
                        self.queue.insert(id.to_string(), item.clone());
                    }
                    _ => {}
                }
                if let Some(outcome) = Outcome::of_terminal(other) {
                    self.in_flight.remove(id);
                    self.routed.push((id.to_string(), ev.at.date_naive(), outcome.origin()));
                    self.outcomes.insert(id.to_string(), outcome);
                }
            }
        }
        self.next_seq += 1;
        Ok(())
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a PipelineEvent>) -> Result<Self, RouterError> {
        let mut s = Self::new();
        for ev in events {
            s.apply(ev)?;
        }
        Ok(s)
    }
}

struct Emitter {
    email_id: String,
    at: DateTime<Utc>,
    next_seq: u64,
    version: u64,
    events: Vec<PipelineEvent>,
}

impl Emitter {
    fn push(&mut self, kind: EventKind) {
        self.events.push(PipelineEvent {
            seq: self.next_seq,
            email_id: self.email_id.clone(),
            at: self.at,
            model_version: Some(self.version),
            kind,
        });
        self.next_seq += 1;
    }
}

pub struct RouteResult {
    pub outcome: Outcome,
    pub events: Vec<PipelineEvent>,
}

/// Routes one email against `state` without mutating it. A repeated email
/// id returns its earlier outcome and no events.
pub fn route(raw: &RawEmail, ctx: &RouterContext, state: &RouterState) -> RouteResult {
    if let Some(o) = state.outcomes.get(&raw.id) {
        return RouteResult {
            outcome: o.clone(),
            events: Vec::new(),
        };
    }
    let mut em = Emitter {
        email_id: raw.id.clone(),
        at: raw.received_at,
        next_seq: state.next_seq,
        version: ctx.model_version,
        events: Vec::new(),
    };
    em.push(EventKind::Received {
        sender: raw.sender.clone(),
        subject: raw.subject.clone(),
    });
    let mut ce = clean(raw, &ctx.cleaning, ctx.extractor.as_ref());
    let (is_forwarded, joined) = detect_forwarded(raw, &state.threads, &ctx.cleaning);
    let thread_id = joined.clone().unwrap_or_else(|| raw.id.clone());
    ce.is_forwarded = is_forwarded;
    ce.thread_id = Some(thread_id.clone());
    em.push(EventKind::Cleaned {
        subject_key: normalized_subject(&raw.subject, &ctx.cleaning),
        is_forwarded,
        thread_id: thread_id.clone(),
    });

    let cat1 = match ctx.senders.cat1_from_sender(&raw.sender) {
        Ok(c) => c,
        Err(_) => {
            em.push(EventKind::Cat1Unknown {
                sender: raw.sender.clone(),
            });
            return finish_manual(em, raw, ce, Vec::new(), EnqueueReason::UnknownRegion);
        }
    };
    ce.cat1 = Some(cat1.clone());
    em.push(EventKind::Cat1Assigned { cat1: cat1.clone() });

    // Quick fix: continue an existing dialog, else only for priority mail.
    let dialog = match joined.as_ref().and_then(|t| state.dialogs.get(t)) {
        Some(d) if d.status == DialogStatus::Resolved => Some(DialogState::new(thread_id.clone())),
        Some(d) => Some(d.clone()),
        None if ctx.priority.is_high_priority(&ce) => Some(DialogState::new(thread_id.clone())),
        None => None,
    };
    let mut escalated = false;
    if let (Some(d), Some(matcher)) = (dialog, &ctx.matcher) {
        let (next, action) = quickfix_step(&d, &ce, matcher);
        em.push(EventKind::QuickfixTurn {
            action: action.clone(),
            dialog: next,
        });
        match action {
            QuickfixAction::Resolved { intent, reply } => {
                return finish_reply(em, intent, reply, false);
            }
            QuickfixAction::AskFollowUp { intent, prompt } => {
                return finish_reply(em, intent, prompt, true);
            }
            QuickfixAction::CreateTicket { cat2, cat3, .. } if ctx.table.valid_triple(&cat1, &cat2, &cat3) => {
                return finish_ticket(em, ctx, state, &cat1, &cat2, &cat3, TicketOrigin::QuickFix);
            }
            QuickfixAction::CreateTicket { .. } | QuickfixAction::Escalate { .. } => escalated = true,
        }
    }

    // Static rules apply only where their category exists for the region.
    let rule = matching_rules(&ce, &ctx.rules)
        .into_iter()
        .find(|m| ctx.table.valid_triple(&cat1, &m.cat2, &m.cat3));
    match &rule {
        Some(m) => em.push(EventKind::RuleMatched { rule: m.clone() }),
        None => em.push(EventKind::NoRuleMatched),
    }
    if let Some(m) = rule.as_ref().filter(|m| m.terminal) {
        return finish_ticket(em, ctx, state, &cat1, &m.cat2, &m.cat3, TicketOrigin::StaticRule);
    }

    let (pred, decision) = match ctx.model.classify(&ce) {
        Ok(r) => r,
        Err(_) => {
            let reason = abstain_reason(escalated);
            return finish_manual(em, raw, ce, Vec::new(), reason);
        }
    };
    let threshold = ctx.model.thresholds.threshold(&pred.label);
    em.push(EventKind::MlClassified {
        category: pred.label.clone(),
        prob: pred.prob,
        threshold,
        auto: decision.is_auto(),
        candidates: pred.top(ABSTAIN_CANDIDATES),
    });
    if let GateDecision::Auto { category, .. } = &decision {
        if let Some(uc) = UniqueCategory::parse(category) {
            if ctx.table.valid_triple(&cat1, &uc.cat2, &uc.cat3) {
                return finish_ticket(em, ctx, state, &cat1, &uc.cat2, &uc.cat3, TicketOrigin::Ml);
            }
        }
    }
    if let Some(m) = &rule {
        return finish_ticket(em, ctx, state, &cat1, &m.cat2, &m.cat3, TicketOrigin::StaticRule);
    }
    let candidates = pred.top(ABSTAIN_CANDIDATES);
    finish_manual(em, raw, ce, candidates, abstain_reason(escalated))
}

fn abstain_reason(escalated: bool) -> EnqueueReason {
    if escalated {
        EnqueueReason::QuickfixEscalationUnclassified
    } else {
        EnqueueReason::Abstained
    }
}

fn finish_reply(mut em: Emitter, intent: String, reply: String, awaiting_reply: bool) -> RouteResult {
    em.push(EventKind::QuickfixReplied {
        intent: intent.clone(),
        reply: reply.clone(),
        awaiting_reply,
    });
    RouteResult {
        outcome: Outcome::QuickFix {
            intent,
            reply,
            awaiting_reply,
        },
        events: em.events,
    }
}

fn finish_ticket(
    mut em: Emitter,
    ctx: &RouterContext,
    state: &RouterState,
    cat1: &Category1,
    cat2: &Category2,
    cat3: &Category3,
    origin: TicketOrigin,
) -> RouteResult {
    let ticket = create_ticket(
        state.next_ticket_id(),
        &em.email_id,
        cat1,
        cat2,
        cat3,
        origin,
        em.at,
        &ctx.table,
        &ctx.roster,
        &state.open_load(),
    )
    .expect("callers check valid_triple");
    let outcome = Outcome::Ticket {
        ticket_id: ticket.id.clone(),
        origin,
    };
    em.push(EventKind::TicketCreated { ticket });
    RouteResult {
        outcome,
        events: em.events,
    }
}

fn finish_manual(
    mut em: Emitter,
    raw: &RawEmail,
    ce: CleanEmail,
    candidates: Vec<(String, f64)>,
    reason: EnqueueReason,
) -> RouteResult {
    let item = ManualQueueItem {
        email_id: raw.id.clone(),
        sender: raw.sender.clone(),
        email: ce,
        candidates,
        reason,
        enqueued_at: raw.received_at,
        assigned_ticket: None,
    };
    em.push(EventKind::ManualQueued { item });
    RouteResult {
        outcome: Outcome::Manual { reason },
        events: em.events,
    }
}

pub struct ManualAssignment<'a> {
    pub email_id: &'a str,
    pub cat2: &'a str,
    pub cat3: &'a str,
    pub operator: &'a str,
    /// Required when the item's region is unknown; otherwise must match it.
    pub cat1: Option<&'a str>,
    pub at: DateTime<Utc>,
}

/// Validates a manual assignment and returns the event recording it.
pub fn manual_assign(
    req: &ManualAssignment<'_>,
    state: &RouterState,
    table: &MappingTable,
    roster: &Roster,
) -> Result<PipelineEvent, RouterError> {
    let item = state
        .queue
        .get(req.email_id)
        .ok_or_else(|| RouterError::UnknownItem(req.email_id.to_string()))?;
    if let Some(t) = &item.assigned_ticket {
        return Err(RouterError::AlreadyAssigned {
            email_id: req.email_id.to_string(),
            ticket_id: t.clone(),
        });
    }
    let cat1 = match (&item.email.cat1, req.cat1) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => Category1::new(c).ok_or_else(|| RouterError::RegionRequired(req.email_id.to_string()))?,
        (None, None) => return Err(RouterError::RegionRequired(req.email_id.to_string())),
    };
    let bad = || RouterError::InvalidTriple {
        cat1: cat1.to_string(),
        cat2: req.cat2.to_string(),
        cat3: req.cat3.to_string(),
        valid: table.valid_pairs(&cat1),
    };
    let cat2 = Category2::new(req.cat2).ok_or_else(bad)?;
    let cat3 = Category3::new(req.cat3).ok_or_else(bad)?;
    let ticket = create_ticket(
        state.next_ticket_id(),
        req.email_id,
        &cat1,
        &cat2,
        &cat3,
        TicketOrigin::Manual,
        req.at,
        table,
        roster,
        &state.open_load(),
    )?;
    let training_row = LabeledEmail {
        title: item.email.title.clone(),
        body: item.email.body.clone(),
        ocr: item.email.ocr_text.clone(),
        from: item.sender.clone(),
        to: String::new(),
        cc: String::new(),
        cat1: cat1.to_string(),
        cat2: cat2.to_string(),
        cat3: cat3.to_string(),
    };
    Ok(PipelineEvent {
        seq: state.next_seq,
        email_id: req.email_id.to_string(),
        at: req.at,
        model_version: None,
        kind: EventKind::ManualAssigned {
            operator: req.operator.to_string(),
            ticket,
            training_row,
        },
    })
}

/// Append-only JSON-lines event log.
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) and returns the existing events.
    pub fn open(path: &Path) -> Result<(Self, Vec<PipelineEvent>), RouterError> {
        let events = if path.exists() {
            read_events(File::open(path)?)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes all events and syncs before returning.
    pub fn append(&mut self, events: &[PipelineEvent]) -> Result<(), RouterError> {
        let mut buf = String::new();
        for ev in events {
            buf.push_str(&serde_json::to_string(ev).expect("events serialize"));
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

pub fn read_events<R: Read>(r: R) -> Result<Vec<PipelineEvent>, RouterError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RouterError::LogParse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_events(events: &[PipelineEvent]) -> String {
    let mut s = String::new();
    for ev in events {
        s.push_str(&serde_json::to_string(ev).expect("events serialize"));
        s.push('\n');
    }
    s
}

/// Per-day counts read straight from a log.
pub fn daily_report(events: &[PipelineEvent], from: Option<NaiveDate>, to: Option<NaiveDate>) -> DailyReport {
    DailyReport::from_outcomes(
        events
            .iter()
            .filter_map(|e| Outcome::of_terminal(&e.kind).map(|o| (e.at.date_naive(), o.origin()))),
        from,
        to,
    )
}

/// State plus an optional durable log, kept in step.
pub struct Router {
    state: RouterState,
    log: Option<EventLog>,
}

impl Router {
    pub fn in_memory() -> Self {
        Self {
            state: RouterState::new(),
            log: None,
        }
    }

    /// Replays `path` (if present) and appends to it from then on.
    pub fn open(path: &Path) -> Result<Self, RouterError> {
        let (log, events) = EventLog::open(path)?;
        Ok(Self {
            state: RouterState::replay(&events)?,
            log: Some(log),
        })
    }

    pub fn state(&self) -> &RouterState {
        &self.state
    }

    fn commit(&mut self, events: &[PipelineEvent]) -> Result<(), RouterError> {
        let mut next = self.state.clone();
        for ev in events {
            next.apply(ev)?;
        }
        if let Some(log) = &mut self.log {
            log.append(events)?;
        }
        self.state = next;
        Ok(())
    }

    pub fn submit(&mut self, raw: &RawEmail, ctx: &RouterContext) -> Result<RouteResult, RouterError> {
        let r = route(raw, ctx, &self.state);
        self.commit(&r.events)?;
        Ok(r)
    }

    pub fn manual_assign(
        &mut self,
        req: &ManualAssignment<'_>,
        table: &MappingTable,
        roster: &Roster,
    ) -> Result<(Ticket, LabeledEmail), RouterError> {
        let ev = manual_assign(req, &self.state, table, roster)?;
        self.commit(std::slice::from_ref(&ev))?;
        match ev.kind {
            EventKind::ManualAssigned {
                ticket, training_row, ..
            } => Ok((ticket, training_row)),
            _ => unreachable!("manual_assign emits ManualAssigned"),
        }
    }
}
