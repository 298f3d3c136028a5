//! Local intent matching, entity extraction and the quick-fix dialog.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::text::{tokenize, Stopwords};
use crate::featurizer::tfidf::{tfidf_fit, IdfTable};
use crate::featurizer::FeatureVector;
use crate::ingest::CleanEmail;
use crate::taxonomy::{Category2, Category3};

#[derive(Debug, Error)]
pub enum QuickfixError {
    #[error("no intents defined")]
    EmptyIntentSet,
    #[error("intent {intent:?}: {message}")]
    InvalidIntent { intent: String, message: String },
    #[error("entity {entity:?}: {message}")]
    InvalidEntity { entity: String, message: String },
    #[error("intent file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Resolution {
    CloseWithFix,
    CreateTicket { cat2: Category2, cat3: Category3 },
    AskFollowUp { prompt: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    pub utterances: Vec<String>,
    #[serde(default)]
    pub required_entities: Vec<String>,
    pub response_template: String,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntitySource {
    Regex { regex: String },
    Lexicon { lexicon: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPattern {
    pub name: String,
    #[serde(flatten)]
    pub source: EntitySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuickfixConfig {
    pub match_threshold: f64,
    pub max_turns: usize,
}

impl Default for QuickfixConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.5,
            max_turns: 3,
        }
    }
}

/// The editable intent catalog (define phase).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntentCatalog {
    #[serde(default)]
    pub config: QuickfixConfig,
    #[serde(default, rename = "intent")]
    pub intents: Vec<Intent>,
    #[serde(default, rename = "entity")]
    pub entities: Vec<EntityPattern>,
}

impl IntentCatalog {
    pub fn parse(text: &str) -> Result<Self, QuickfixError> {
        toml::from_str(text).map_err(|e| QuickfixError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, QuickfixError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Trains and freezes a matcher snapshot (train + publish phases).
    pub fn publish(&self) -> Result<IntentMatcher, QuickfixError> {
        define_and_train(&self.intents, &self.entities, &self.config)
    }
}

/// A compiled entity extractor.
#[derive(Debug, Clone)]
pub struct CompiledEntity {
    pub name: String,
    regex: Regex,
}

pub fn compile_entities(patterns: &[EntityPattern]) -> Result<Vec<CompiledEntity>, QuickfixError> {
    let mut seen = BTreeSet::new();
    patterns
        .iter()
        .map(|p| {
            if !seen.insert(p.name.as_str()) {
                return Err(QuickfixError::InvalidEntity {
                    entity: p.name.clone(),
                    message: "defined twice".into(),
                });
            }
            let source = match &p.source {
                EntitySource::Regex { regex } => regex.clone(),
                EntitySource::Lexicon { lexicon } => {
                    if lexicon.is_empty() {
                        return Err(QuickfixError::InvalidEntity {
                            entity: p.name.clone(),
                            message: "empty lexicon".into(),
                        });
                    }
                    let mut terms: Vec<&String> = lexicon.iter().collect();
                    terms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
                    let alts: Vec<String> = terms.iter().map(|t| regex::escape(t)).collect();
                    format!(r"(?i)\b(?:{})\b", alts.join("|"))
                }
            };
            let regex = Regex::new(&source).map_err(|e| QuickfixError::InvalidEntity {
                entity: p.name.clone(),
                message: e.to_string(),
            })?;
            Ok(CompiledEntity {
                name: p.name.clone(),
                regex,
            })
        })
        .collect()
}

/// All non-overlapping matches per entity type, in document order. Types
/// without matches are absent.
pub fn extract_entities(text: &str, patterns: &[CompiledEntity]) -> BTreeMap<String, Vec<String>> {
    patterns
        .iter()
        .filter_map(|p| {
            let found: Vec<String> = p.regex.find_iter(text).map(|m| m.as_str().to_string()).collect();
            (!found.is_empty()).then(|| (p.name.clone(), found))
        })
        .collect()
}

fn placeholders(template: &str) -> BTreeSet<String> {
    let re = Regex::new(r"\{([A-Za-z0-9_]+)\}").expect("static pattern");
    re.captures_iter(template).map(|c| c[1].to_string()).collect()
}

/// Replaces `{name}` with the collected values joined by ", ".
pub fn render_template(template: &str, entities: &BTreeMap<String, Vec<String>>) -> String {
    let re = Regex::new(r"\{([A-Za-z0-9_]+)\}").expect("static pattern");
    re.replace_all(template, |c: &regex::Captures| {
        entities
            .get(&c[1])
            .map(|v| v.join(", "))
            .unwrap_or_else(|| c[0].to_string())
    })
    .into_owned()
}

fn utterance_terms(text: &str, stop: &Stopwords) -> Vec<String> {
    tokenize(text, stop).tokens
}

/// Immutable, published intent matcher.
#[derive(Debug, Clone)]
pub struct IntentMatcher {
    intents: Vec<Intent>,
    entities: Vec<CompiledEntity>,
    config: QuickfixConfig,
    stopwords: Stopwords,
    idf: IdfTable<String>,
    /// (intent index, utterance vector).
    vectors: Vec<(usize, FeatureVector)>,
}

pub fn define_and_train(
    intents: &[Intent],
    entities: &[EntityPattern],
    cfg: &QuickfixConfig,
) -> Result<IntentMatcher, QuickfixError> {
    if intents.is_empty() {
        return Err(QuickfixError::EmptyIntentSet);
    }
    if !(cfg.match_threshold > 0.0 && cfg.match_threshold <= 1.0) {
        return Err(QuickfixError::Parse(format!(
            "match_threshold {} outside (0, 1]",
            cfg.match_threshold
        )));
    }
    let compiled = compile_entities(entities)?;
    let entity_names: BTreeSet<&str> = compiled.iter().map(|e| e.name.as_str()).collect();
    let mut names = BTreeSet::new();
    let stopwords = Stopwords::default();
    for intent in intents {
        let bad = |message: String| QuickfixError::InvalidIntent {
            intent: intent.name.clone(),
            message,
        };
        if !names.insert(intent.name.as_str()) {
            return Err(bad("defined twice".into()));
        }
        if intent.utterances.is_empty() {
            return Err(bad("no utterances".into()));
        }
        if let Some(u) = intent
            .utterances
            .iter()
            .find(|u| utterance_terms(u, &stopwords).is_empty())
        {
            return Err(bad(format!("utterance {u:?} has no terms")));
        }
        let required: BTreeSet<String> = intent.required_entities.iter().cloned().collect();
        let mut templates = vec![intent.response_template.as_str()];
        if let Resolution::AskFollowUp { prompt } = &intent.resolution {
            templates.push(prompt);
        }
        for t in templates {
            if let Some(p) = placeholders(t).difference(&required).next() {
                return Err(bad(format!("placeholder {{{p}}} is not a required entity")));
            }
        }
        if let Some(e) = required.iter().find(|e| !entity_names.contains(e.as_str())) {
            return Err(bad(format!("required entity {e:?} has no pattern")));
        }
    }
    let docs: Vec<(usize, Vec<String>)> = intents
        .iter()
        .enumerate()
        .flat_map(|(i, intent)| intent.utterances.iter().map(move |u| (i, u)))
        .map(|(i, u)| (i, utterance_terms(u, &stopwords)))
        .collect();
    // Distinct utterances only, so duplicates leave every weight unchanged.
    let corpus: Vec<Vec<String>> = docs
        .iter()
        .map(|d| d.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let idf = tfidf_fit(&corpus, true).map_err(|e| QuickfixError::Parse(e.to_string()))?;
    let vectors = docs.into_iter().map(|(i, terms)| (i, idf.transform(&terms))).collect();
    Ok(IntentMatcher {
        intents: intents.to_vec(),
        entities: compiled,
        config: cfg.clone(),
        stopwords,
        idf,
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentMatch {
    pub intent: String,
    pub score: f64,
}

impl IntentMatcher {
    pub fn n_vectors(&self) -> usize {
        self.vectors.len()
    }

    pub fn config(&self) -> &QuickfixConfig {
        &self.config
    }

    pub fn intents(&self) -> &[Intent] {
        &self.intents
    }

    pub fn intent(&self, name: &str) -> Option<&Intent> {
        self.intents.iter().find(|i| i.name == name)
    }

    pub fn entities(&self) -> &[CompiledEntity] {
        &self.entities
    }

    /// Every term appearing in any utterance.
    pub fn vocabulary(&self) -> impl Iterator<Item = &String> {
        self.idf.keys()
    }

    /// Best cosine score per intent, before thresholding.
    pub fn scores(&self, text: &str) -> BTreeMap<String, f64> {
        let v = self.idf.transform(&utterance_terms(text, &self.stopwords));
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for (i, u) in &self.vectors {
            let s = v.cosine(u).clamp(0.0, 1.0);
            let e = best.entry(self.intents[*i].name.clone()).or_insert(0.0);
            if s > *e {
                *e = s;
            }
        }
        best
    }

    /// Highest-scoring intent at or above the threshold; ties go to the
    /// lexicographically first name.
    pub fn match_intent(&self, text: &str) -> Option<IntentMatch> {
        let mut best: Option<IntentMatch> = None;
        for (intent, score) in self.scores(text) {
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(IntentMatch { intent, score });
            }
        }
        best.filter(|b| b.score > 0.0 && b.score >= self.config.match_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogStatus {
    Open,
    Resolved,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogState {
    pub thread_id: String,
    pub active_intent: Option<String>,
    pub entities: BTreeMap<String, Vec<String>>,
    pub turns: usize,
    pub status: DialogStatus,
}

impl DialogState {
    pub fn new(thread_id: impl Into<String>) -> Self {
        Self {
            thread_id: thread_id.into(),
            active_intent: None,
            entities: BTreeMap::new(),
            turns: 0,
            status: DialogStatus::Open,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    NoIntent,
    TurnBudget,
    DialogClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum QuickfixAction {
    /// Fixed by the bot; the thread is closed with this reply.
    Resolved {
        intent: String,
        reply: String,
    },
    AskFollowUp {
        intent: String,
        prompt: String,
    },
    /// Needs a human in the given category.
    CreateTicket {
        intent: String,
        cat2: Category2,
        cat3: Category3,
        reply: String,
    },
    /// Hand over to static rules and ML.
    Escalate {
        intent: Option<String>,
        reason: EscalationReason,
    },
}

fn missing_prompt(missing: &[&String]) -> String {
    let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
    format!("Please reply with your {}.", names.join(", "))
}

/// Advances one dialog turn with a new email on the thread.
pub fn quickfix_step(ds: &DialogState, ce: &CleanEmail, m: &IntentMatcher) -> (DialogState, QuickfixAction) {
    let mut next = ds.clone();
    if ds.status != DialogStatus::Open {
        return (
            next,
            QuickfixAction::Escalate {
                intent: ds.active_intent.clone(),
                reason: EscalationReason::DialogClosed,
            },
        );
    }
    next.turns += 1;
    let text = ce.full_text();
    let intent_name = match &ds.active_intent {
        Some(name) => name.clone(),
        None => match m.match_intent(&text) {
            Some(hit) => hit.intent,
            None => {
                next.status = DialogStatus::Escalated;
                return (
                    next,
                    QuickfixAction::Escalate {
                        intent: None,
                        reason: EscalationReason::NoIntent,
                    },
                );
            }
        },
    };
    let intent = m
        .intent(&intent_name)
        .expect("dialog intent comes from this matcher")
        .clone();
    next.active_intent = Some(intent_name.clone());
    for (k, vals) in extract_entities(&text, m.entities()) {
        if !intent.required_entities.contains(&k) {
            continue;
        }
        let slot = next.entities.entry(k).or_default();
        for v in vals {
            if !slot.contains(&v) {
                slot.push(v);
            }
        }
    }
    let missing: Vec<&String> = intent
        .required_entities
        .iter()
        .filter(|e| !next.entities.contains_key(*e))
        .collect();
    let budget_left = next.turns < m.config().max_turns;
    if !missing.is_empty() {
        if budget_left {
            let prompt = missing_prompt(&missing);
            return (
                next,
                QuickfixAction::AskFollowUp {
                    intent: intent_name,
                    prompt,
                },
            );
        }
        next.status = DialogStatus::Escalated;
        return (
            next,
            QuickfixAction::Escalate {
                intent: Some(intent_name),
                reason: EscalationReason::TurnBudget,
            },
        );
    }
    let reply = render_template(&intent.response_template, &next.entities);
    match intent.resolution {
        Resolution::CloseWithFix => {
            next.status = DialogStatus::Resolved;
            (
                next,
                QuickfixAction::Resolved {
                    intent: intent_name,
                    reply,
                },
            )
        }
        Resolution::CreateTicket { cat2, cat3 } => {
            next.status = DialogStatus::Escalated;
            (
                next,
                QuickfixAction::CreateTicket {
                    intent: intent_name,
                    cat2,
                    cat3,
                    reply,
                },
            )
        }
        Resolution::AskFollowUp { prompt } if budget_left => {
            let prompt = render_template(&prompt, &next.entities);
            (
                next,
                QuickfixAction::AskFollowUp {
                    intent: intent_name,
                    prompt,
                },
            )
        }
        Resolution::AskFollowUp { .. } => {
            next.status = DialogStatus::Escalated;
            (
                next,
                QuickfixAction::Escalate {
                    intent: Some(intent_name),
                    reason: EscalationReason::TurnBudget,
                },
            )
        }
    }
}
