//! Raw email → cleaned pipeline unit.
//!
//! Cleaning strips quoted trailers, signatures, greetings and URLs. Every
//! step only removes text, so the body pipeline is iterated to a fixed
//! point; that makes `clean` idempotent regardless of how the individual
//! heuristics interact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Category1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no extractor handles attachment {filename:?} ({media_type})")]
    UnsupportedAttachment { filename: String, media_type: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cleaning rules: {0}")]
    Rules(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub filename: String,
    pub media_type: String,
    #[serde(default, with = "base64_bytes")]
    pub bytes: Vec<u8>,
    /// Pre-extracted text shipped alongside the binary (simulated OCR).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_text: Option<String>,
}

impl Attachment {
    pub fn text(filename: &str, content: &str) -> Self {
        Self {
            filename: filename.into(),
            media_type: "text/plain".into(),
            bytes: content.as_bytes().to_vec(),
            sidecar_text: None,
        }
    }
}

mod base64_bytes {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEmail {
    pub id: String,
    pub sender: String,
    #[serde(default)]
    pub to: Vec<String>,
    #[serde(default)]
    pub cc: Vec<String>,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<String>,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanEmail {
    pub id: String,
    pub cat1: Option<Category1>,
    pub title: String,
    pub body: String,
    pub ocr_text: String,
    pub is_forwarded: bool,
    pub thread_id: Option<String>,
}

impl CleanEmail {
    /// Re-wraps the cleaned fields as a raw email (attachment text becomes
    /// a single plain-text attachment).
    pub fn as_raw(&self, sender: &str, received_at: DateTime<Utc>) -> RawEmail {
        RawEmail {
            id: self.id.clone(),
            sender: sender.into(),
            to: Vec::new(),
            cc: Vec::new(),
            subject: self.title.clone(),
            body: self.body.clone(),
            attachments: if self.ocr_text.is_empty() {
                Vec::new()
            } else {
                vec![Attachment::text("ocr.txt", &self.ocr_text)]
            },
            in_reply_to: None,
            received_at,
        }
    }

    /// Title, body and attachment text joined for keyword and intent matching.
    pub fn full_text(&self) -> String {
        [self.title.as_str(), self.body.as_str(), self.ocr_text.as_str()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Marker lists controlling cleaning. All comparisons are case-insensitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningRules {
    pub greetings: Vec<String>,
    pub signature_markers: Vec<String>,
    /// A signature marker only cuts when it starts within this trailing
    /// fraction of the body.
    pub signature_tail_fraction: f64,
    /// Lines starting with one of these begin quoted/forwarded content.
    pub quote_markers: Vec<String>,
    /// Subject prefixes that mark a reply or forward.
    pub reply_prefixes: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            greetings: s(&[
                "hi",
                "hello",
                "hey",
                "dear",
                "good morning",
                "good afternoon",
                "good evening",
                "greetings",
            ]),
            signature_markers: s(&[
                "regards",
                "best regards",
                "kind regards",
                "thanks",
                "thank you",
                "best",
                "cheers",
                "sincerely",
                "--",
            ]),
            signature_tail_fraction: 0.4,
            quote_markers: s(&[
                "-----original message-----",
                "----- forwarded message -----",
                "---------- forwarded message",
                "begin forwarded message",
                "from:",
                ">",
            ]),
            reply_prefixes: s(&["re:", "fw:", "fwd:"]),
        }
    }
}

impl CleaningRules {
    /// Reads a TOML file; missing keys fall back to the defaults.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| IngestError::Rules(e.to_string()))
    }
}

fn url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:https?://|ftp://|www\.)\S+").unwrap())
}

fn wrote_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^on\b.{0,200}\bwrote:\s*$").unwrap())
}

/// True when `text` (lowercase) begins with `word` followed by a word boundary.
fn starts_with_word(text: &str, word: &str) -> bool {
    if !text.starts_with(word) {
        return false;
    }
    match text[word.len()..].chars().next() {
        None => true,
        Some(c) => !c.is_alphanumeric() || !word.chars().last().is_some_and(char::is_alphanumeric),
    }
}

fn remove_urls(text: &str) -> String {
    url_pattern().replace_all(text, "").into_owned()
}

fn normalize_line(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_lines(text: &str) -> String {
    text.lines()
        .map(normalize_line)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

fn is_quote_marker(line: &str, rules: &CleaningRules) -> bool {
    let lower = line.trim().to_lowercase();
    rules.quote_markers.iter().any(|m| lower.starts_with(&m.to_lowercase())) || wrote_pattern().is_match(&lower)
}

/// The newest author-written segment: everything before the first
/// quoted-header marker line.
pub fn extract_key_body_with(raw_body: &str, rules: &CleaningRules) -> String {
    let mut kept = Vec::new();
    for line in raw_body.lines() {
        if is_quote_marker(line, rules) {
            break;
        }
        kept.push(line);
    }
    kept.join("\n").trim().to_string()
}

pub fn extract_key_body(raw_body: &str) -> String {
    extract_key_body_with(raw_body, &CleaningRules::default())
}

fn is_signature_line(line: &str, rules: &CleaningRules) -> bool {
    let lower = line.trim().to_lowercase();
    rules.signature_markers.iter().any(|m| {
        let m = m.to_lowercase();
        if !starts_with_word(&lower, &m) {
            return false;
        }
        // "Regards," / "Thanks" / "Best regards, Bob" but not "Thanks to the
        // new patch the app works again".
        let rest = lower[m.len()..].trim();
        rest.is_empty()
            || rest.starts_with([',', '!', '.'])
            || lower.ends_with(',')
            || lower.split_whitespace().count() <= 3
    })
}

fn cut_signature(body: &str, rules: &CleaningRules) -> String {
    let total = body.len();
    if total == 0 {
        return String::new();
    }
    let boundary = total as f64 * (1.0 - rules.signature_tail_fraction);
    let mut offset = 0usize;
    for line in body.split('\n') {
        if offset as f64 >= boundary && is_signature_line(line, rules) {
            return body[..offset].trim_end().to_string();
        }
        offset += line.len() + 1;
    }
    body.to_string()
}

fn is_greeting_line(line: &str, rules: &CleaningRules) -> bool {
    let lower = line.trim().to_lowercase();
    rules.greetings.iter().any(|g| {
        let g = g.to_lowercase();
        starts_with_word(&lower, &g)
            && (lower.ends_with(',') || lower.ends_with('!') || lower.split_whitespace().count() <= 3)
    })
}

fn drop_greetings(body: &str, rules: &CleaningRules) -> String {
    let mut lines = body.lines().skip_while(|l| is_greeting_line(l, rules));
    let mut out = String::new();
    if let Some(first) = lines.next() {
        out.push_str(first);
        for l in lines {
            out.push('\n');
            out.push_str(l);
        }
    }
    out
}

fn clean_body_once(body: &str, rules: &CleaningRules) -> String {
    let body = normalize_lines(body);
    let body = extract_key_body_with(&body, rules);
    let body = cut_signature(&body, rules);
    let body = drop_greetings(&body, rules);
    normalize_lines(&remove_urls(&body))
}

fn clean_body(body: &str, rules: &CleaningRules) -> String {
    let mut current = clean_body_once(body, rules);
    loop {
        let next = clean_body_once(&current, rules);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Strips any number of leading reply/forward prefixes.
pub fn strip_reply_prefixes(subject: &str, rules: &CleaningRules) -> String {
    let mut s = normalize_line(subject);
    loop {
        let lower = s.to_lowercase();
        let Some(p) = rules
            .reply_prefixes
            .iter()
            .find(|p| lower.starts_with(&p.to_lowercase()))
        else {
            return s;
        };
        s = s[p.len()..].trim().to_string();
    }
}

fn has_reply_prefix(subject: &str, rules: &CleaningRules) -> bool {
    let lower = subject.trim().to_lowercase();
    rules
        .reply_prefixes
        .iter()
        .any(|p| lower.starts_with(&p.to_lowercase()))
}

/// Thread key derived from a subject: prefixes removed, whitespace
/// collapsed, lowercased.
pub fn normalized_subject(subject: &str, rules: &CleaningRules) -> String {
    strip_reply_prefixes(subject, rules).to_lowercase()
}

fn clean_title(subject: &str, rules: &CleaningRules) -> String {
    let mut current = subject.to_string();
    loop {
        let next = normalize_line(&remove_urls(&strip_reply_prefixes(&current, rules)));
        if next == current {
            return current;
        }
        current = next;
    }
}

fn clean_text_field(text: &str) -> String {
    normalize_lines(&remove_urls(text))
}

/// Produces the attachment text for an email. Unsupported attachments
/// contribute nothing.
pub fn attachment_text(raw: &RawEmail, extractor: &dyn TextExtractor) -> (String, Vec<IngestError>) {
    let mut parts = Vec::new();
    let mut errors = Vec::new();
    for att in &raw.attachments {
        match extract_attachment_text(att, extractor) {
            Ok(t) if !t.trim().is_empty() => parts.push(t),
            Ok(_) => {}
            Err(e) => errors.push(e),
        }
    }
    (parts.join("\n"), errors)
}

/// Cleans an email. Forwarding metadata and `cat1` are left unset; the
/// router fills them in from its thread store and sender directory.
pub fn clean(raw: &RawEmail, rules: &CleaningRules, extractor: &dyn TextExtractor) -> CleanEmail {
    let (ocr, _errors) = attachment_text(raw, extractor);
    CleanEmail {
        id: raw.id.clone(),
        cat1: None,
        title: clean_title(&raw.subject, rules),
        body: clean_body(&raw.body, rules),
        ocr_text: clean_text_field(&ocr),
        is_forwarded: false,
        thread_id: None,
    }
}

/// Pluggable attachment-to-text conversion (OCR, PDF text, ...).
pub trait TextExtractor: Send + Sync {
    fn supports(&self, media_type: &str) -> bool;
    fn extract(&self, attachment: &Attachment) -> Result<String, IngestError>;
}

/// Handles `text/*` attachments by UTF-8 decoding.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainTextExtractor;

impl TextExtractor for PlainTextExtractor {
    fn supports(&self, media_type: &str) -> bool {
        media_type.to_ascii_lowercase().starts_with("text/")
    }

    fn extract(&self, attachment: &Attachment) -> Result<String, IngestError> {
        Ok(String::from_utf8_lossy(&attachment.bytes).into_owned())
    }
}

/// Tries extractors in registration order.
#[derive(Default)]
pub struct ExtractorRegistry {
    extractors: Vec<Box<dyn TextExtractor>>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_plain_text() -> Self {
        let mut r = Self::new();
        r.register(Box::new(PlainTextExtractor));
        r
    }

    pub fn register(&mut self, extractor: Box<dyn TextExtractor>) {
        self.extractors.push(extractor);
    }
}

impl TextExtractor for ExtractorRegistry {
    fn supports(&self, media_type: &str) -> bool {
        self.extractors.iter().any(|e| e.supports(media_type))
    }

    fn extract(&self, attachment: &Attachment) -> Result<String, IngestError> {
        match self.extractors.iter().find(|e| e.supports(&attachment.media_type)) {
            Some(e) => e.extract(attachment),
            None => Err(IngestError::UnsupportedAttachment {
                filename: attachment.filename.clone(),
                media_type: attachment.media_type.clone(),
            }),
        }
    }
}

/// Sidecar text wins; otherwise plain text is decoded directly and other
/// media types go to `extractor`.
pub fn extract_attachment_text(att: &Attachment, extractor: &dyn TextExtractor) -> Result<String, IngestError> {
    if let Some(text) = &att.sidecar_text {
        return Ok(text.clone());
    }
    if PlainTextExtractor.supports(&att.media_type) {
        return PlainTextExtractor.extract(att);
    }
    if extractor.supports(&att.media_type) {
        return extractor.extract(att);
    }
    Err(IngestError::UnsupportedAttachment {
        filename: att.filename.clone(),
        media_type: att.media_type.clone(),
    })
}

/// Previously ingested emails, for thread detection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadStore {
    thread_of: BTreeMap<String, String>,
    by_subject: BTreeMap<String, String>,
}

impl ThreadStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.thread_of.contains_key(id)
    }

    pub fn thread_of(&self, id: &str) -> Option<&str> {
        self.thread_of.get(id).map(String::as_str)
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.thread_of.keys().map(String::as_str).collect()
    }

    /// Records an email as part of `thread_id` (itself, for a new thread).
    pub fn record(&mut self, id: &str, subject_key: &str, thread_id: &str) {
        self.thread_of.insert(id.to_string(), thread_id.to_string());
        if !subject_key.is_empty() {
            self.by_subject
                .entry(subject_key.to_string())
                .or_insert_with(|| thread_id.to_string());
        }
    }
}

/// Whether an email continues an earlier one, and which thread it joins.
///
/// A known `in_reply_to` links directly. A reply/forward subject prefix
/// marks the mail as forwarded and joins the thread with the same
/// normalized subject, if any.
pub fn detect_forwarded(raw: &RawEmail, store: &ThreadStore, rules: &CleaningRules) -> (bool, Option<String>) {
    if let Some(parent) = &raw.in_reply_to {
        if let Some(thread) = store.thread_of(parent) {
            return (true, Some(thread.to_string()));
        }
    }
    if has_reply_prefix(&raw.subject, rules) {
        let key = normalized_subject(&raw.subject, rules);
        let thread = store.by_subject.get(&key).cloned();
        return (true, thread);
    }
    (false, None)
}

/// Reads line-delimited JSON raw emails; blank lines are skipped.
pub fn read_raw_emails(text: &str) -> Result<Vec<RawEmail>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_raw_emails(emails: &[RawEmail]) -> String {
    let mut out = String::new();
    for e in emails {
        out.push_str(&serde_json::to_string(e).expect("raw email serializes"));
        out.push('\n');
    }
    out
}
