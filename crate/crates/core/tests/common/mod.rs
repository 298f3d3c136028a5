#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;
use serde_json::{json, Value};

use triage_core::corpus::{load_csv, LabeledEmail};
use triage_core::ingest::{clean, read_raw_emails, CleaningRules, ExtractorRegistry, PlainTextExtractor, RawEmail};
use triage_core::pipeline::{train_model, TrainConfig, TrainedModel};
use triage_core::quickfix::IntentCatalog;
use triage_core::router::{
    route, EnqueueReason, EventKind, Outcome, PriorityLexicon, Roster, Router, RouterContext, RouterState, TicketOrigin,
};
use triage_core::rules::load_rules;
use triage_core::rules::matching_rules;
use triage_core::taxonomy::load_taxonomy;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn training_rows() -> Vec<LabeledEmail> {
    load_csv(&fixture("train.csv")).unwrap()
}

pub fn fixture_model() -> TrainedModel {
    let (table, _) = load_taxonomy(&fixture("mapping.csv"), &fixture("senders.csv")).unwrap();
    train_model(&training_rows(), &table, &TrainConfig::default(), 42).unwrap()
}

pub fn fixture_context_with(model: TrainedModel) -> RouterContext {
    let (table, senders) = load_taxonomy(&fixture("mapping.csv"), &fixture("senders.csv")).unwrap();
    let rules = load_rules(&fixture("rules.txt"), Some(&table)).unwrap();
    let matcher = IntentCatalog::load(&fixture("intents.toml"))
        .unwrap()
        .publish()
        .unwrap();
    let priority = PriorityLexicon::from_matcher(&matcher);
    RouterContext {
        table,
        senders,
        cleaning: CleaningRules::default(),
        extractor: Box::new(ExtractorRegistry::with_plain_text()),
        rules,
        matcher: Some(matcher),
        priority,
        model,
        roster: Roster::load(&fixture("roster.csv")).unwrap(),
        model_version: 1,
    }
}

pub fn fixture_context() -> RouterContext {
    fixture_context_with(fixture_model())
}

pub fn golden_emails() -> Vec<RawEmail> {
    read_raw_emails(&std::fs::read_to_string(fixture("golden_emails.jsonl")).unwrap()).unwrap()
}

/// `email_id -> (cat2, cat3)` ground truth for the golden emails.
pub fn golden_labels() -> std::collections::BTreeMap<String, (String, String)> {
    let text = std::fs::read_to_string(fixture("golden_labels.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), (f[1].to_string(), f[2].to_string()))
        })
        .collect()
}

pub fn at(day: i64, minute: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 8, 0, 0).unwrap() + Duration::days(day) + Duration::minutes(minute)
}

pub fn golden_record() -> Value {
    let ctx = fixture_context();
    let mut router = Router::in_memory();
    let mut rows = Vec::new();
    for raw in golden_emails() {
        let r = router.submit(&raw, &ctx).unwrap();
        let events: Vec<&str> = r.events.iter().map(|e| e.kind.name()).collect();
        let ticket = match &r.outcome {
            Outcome::Ticket { ticket_id, .. } => {
                let t = &router.state().tickets[ticket_id];
                json!({"triple": format!("{}/{}/{}", t.cat1, t.cat2, t.cat3), "admin_group": t.admin_group, "assignee": t.assignee})
            }
            _ => Value::Null,
        };
        rows.push(json!({"email": raw.id, "outcome": r.outcome, "events": events, "ticket": ticket}));
    }
    Value::Array(rows)
}

const WORDS: &[&str] = &[
    "SU01", "MD04", "darwin", "delivery", "toner", "printer", "jam", "password", "reset", "locked", "account",
    "unlock", "MRP", "run", "planning", "invoice", "hello", "urgent", "CMB1042", "please", "help", "order",
];
const SENDERS: &[&str] = &[
    "a@colombo.example.com",
    "b@kandy.example.com",
    "c@ny.example.com",
    "d@elsewhere.example.org",
];

fn words(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 0..max).prop_map(|w| w.join(" "))
}

pub fn email_batch() -> impl Strategy<Value = Vec<RawEmail>> {
    prop::collection::vec(
        (prop::sample::select(SENDERS), words(4), words(12), any::<bool>()),
        1..12,
    )
    .prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (sender, subject, body, fwd))| RawEmail {
                id: format!("p{i}"),
                sender: sender.to_string(),
                to: vec!["helpdesk@example.com".into()],
                cc: Vec::new(),
                subject: if fwd { format!("FW: {subject}") } else { subject },
                body,
                attachments: Vec::new(),
                in_reply_to: None,
                received_at: at(0, i as i64),
            })
            .collect()
    })
}

/// Routes `batch` in order and checks totality, sequencing and rule precedence.
pub fn check_batch(ctx: &RouterContext, batch: &[RawEmail]) -> Result<(), TestCaseError> {
    let mut state = RouterState::new();
    for raw in batch {
        let r = route(raw, ctx, &state);
        let ev = &r.events;
        let starts = matches!(ev.first().map(|e| &e.kind), Some(EventKind::Received { .. }));
        prop_assert!(starts, "first event must be Received");
        prop_assert_eq!(ev.iter().filter(|e| e.kind.is_terminal()).count(), 1);
        prop_assert!(ev.last().unwrap().kind.is_terminal());
        for (k, e) in ev.iter().enumerate() {
            prop_assert_eq!(e.seq, state.next_seq + k as u64);
            prop_assert_eq!(&e.email_id, &raw.id);
        }
        let terminal_rule = ev
            .iter()
            .any(|e| matches!(&e.kind, EventKind::RuleMatched { rule } if rule.terminal));
        let ml = ev.iter().any(|e| matches!(e.kind, EventKind::MlClassified { .. }));
        prop_assert!(!(terminal_rule && ml), "terminal rule match must suppress ML");

        let ce = clean(raw, &ctx.cleaning, &PlainTextExtractor);
        let sure = ctx.senders.cat1_from_sender(&raw.sender).ok().and_then(|c1| {
            matching_rules(&ce, &ctx.rules)
                .into_iter()
                .find(|m| ctx.table.valid_triple(&c1, &m.cat2, &m.cat3))
                .filter(|m| m.terminal)
        });
        let quickfixed = ev.iter().any(|e| matches!(e.kind, EventKind::QuickfixReplied { .. }))
            || matches!(
                r.outcome,
                Outcome::Ticket {
                    origin: TicketOrigin::QuickFix,
                    ..
                }
            );
        if sure.is_some() && !quickfixed {
            prop_assert!(
                matches!(
                    r.outcome,
                    Outcome::Ticket {
                        origin: TicketOrigin::StaticRule,
                        ..
                    }
                ),
                "sure-shot rule did not produce a static ticket: {:?}",
                r.outcome
            );
        }

        for e in ev {
            state.apply(e).unwrap();
        }
        prop_assert_eq!(state.outcomes.get(&raw.id), Some(&r.outcome));
        if let Outcome::Ticket { ticket_id, .. } = &r.outcome {
            let t = &state.tickets[ticket_id];
            prop_assert!(ctx.table.valid_triple(&t.cat1, &t.cat2, &t.cat3));
        }
        if let Outcome::Manual { reason } = &r.outcome {
            if ctx.senders.cat1_from_sender(&raw.sender).is_err() {
                prop_assert_eq!(*reason, EnqueueReason::UnknownRegion);
            }
        }
    }
    Ok(())
}
