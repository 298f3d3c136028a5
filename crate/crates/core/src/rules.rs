//! Keyword and T-code rules that classify before the ML stage.
//!
//! One rule per line:
//!
//! ```text
//! priority|id|all:a,b|any:c,d|lit:ZX01|cat2|cat3|terminal
//! ```
//!
//! A rule fires when every non-empty clause holds: each `all` keyword, at
//! least one `any` keyword, at least one `lit` literal. Keywords go through
//! the featurizer's tokenizer (stopwords kept) and may be multi-word
//! phrases; literals are case-insensitive raw substrings. The last field is
//! `terminal` or empty. Blank lines and `#` comments are ignored.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::text::{tokenize, Stopwords, TokenStream};
use crate::ingest::CleanEmail;
use crate::taxonomy::{Category2, Category3, MappingTable};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate rule id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("rule {id:?}: target {cat2}/{cat3} is not valid in any region")]
    InvalidTarget { id: String, cat2: String, cat3: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    tokens: Vec<String>,
}

impl Keyword {
    fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: tokenize(text, &Stopwords::empty()).tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub priority: i64,
    pub all_of: Vec<Keyword>,
    pub any_of: Vec<Keyword>,
    pub literals: Vec<String>,
    pub cat2: Category2,
    pub cat3: Category3,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub rule_id: String,
    pub cat2: Category2,
    pub cat3: Category3,
    pub terminal: bool,
    /// Keywords and literals that were found, in rule order.
    pub matched_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

fn clause<'a>(field: &'a str, name: &str, line: usize) -> Result<Vec<&'a str>, RuleError> {
    let body = field
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| RuleError::Parse {
            line,
            message: format!("expected `{name}:` clause, got {field:?}"),
        })?;
    Ok(body.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
}

fn parse_line(text: &str, line: usize) -> Result<Rule, RuleError> {
    let perr = |message: String| RuleError::Parse { line, message };
    let fields: Vec<&str> = text.split('|').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(perr(format!("expected 8 `|`-separated fields, got {}", fields.len())));
    }
    let priority: i64 = fields[0]
        .parse()
        .map_err(|_| perr(format!("bad priority {:?}", fields[0])))?;
    let id = fields[1];
    if id.is_empty() {
        return Err(perr("empty rule id".into()));
    }
    let all_of: Vec<Keyword> = clause(fields[2], "all", line)?.into_iter().map(Keyword::new).collect();
    let any_of: Vec<Keyword> = clause(fields[3], "any", line)?.into_iter().map(Keyword::new).collect();
    let literals: Vec<String> = clause(fields[4], "lit", line)?
        .into_iter()
        .map(str::to_string)
        .collect();
    if let Some(k) = all_of.iter().chain(&any_of).find(|k| k.tokens.is_empty()) {
        return Err(perr(format!("keyword {:?} has no tokens", k.text)));
    }
    if all_of.is_empty() && any_of.is_empty() && literals.is_empty() {
        return Err(perr(format!("rule {id:?} has no match clause")));
    }
    let cat2 = Category2::new(fields[5]).ok_or_else(|| perr("empty cat2".into()))?;
    let cat3 = Category3::new(fields[6]).ok_or_else(|| perr("empty cat3".into()))?;
    let terminal = match fields[7] {
        "terminal" => true,
        "" => false,
        other => return Err(perr(format!("last field must be `terminal` or empty, got {other:?}"))),
    };
    Ok(Rule {
        id: id.to_string(),
        priority,
        all_of,
        any_of,
        literals,
        cat2,
        cat3,
        terminal,
    })
}

pub fn parse_rules(text: &str) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rule = parse_line(trimmed, line)?;
        if !ids.insert(rule.id.clone()) {
            return Err(RuleError::DuplicateId { line, id: rule.id });
        }
        rules.push(rule);
    }
    rules.sort_by(|a, b| a.priority.cmp(&b.priority).then_with(|| a.id.cmp(&b.id)));
    Ok(RuleSet { rules })
}

/// Reads, sorts, and checks every target against `table` when given.
pub fn load_rules(path: &Path, table: Option<&MappingTable>) -> Result<RuleSet, RuleError> {
    let rs = parse_rules(&std::fs::read_to_string(path)?)?;
    if let Some(t) = table {
        rs.validate(t)?;
    }
    Ok(rs)
}

impl RuleSet {
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn validate(&self, table: &MappingTable) -> Result<(), RuleError> {
        for r in &self.rules {
            let ok = table.regions().any(|c1| table.valid_triple(c1, &r.cat2, &r.cat3));
            if !ok {
                return Err(RuleError::InvalidTarget {
                    id: r.id.clone(),
                    cat2: r.cat2.to_string(),
                    cat3: r.cat3.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Canonical DSL text, one rule per line in sorted order.
    pub fn to_text(&self) -> String {
        let join = |ks: &[Keyword]| ks.iter().map(|k| k.text.as_str()).collect::<Vec<_>>().join(",");
        self.rules
            .iter()
            .map(|r| {
                format!(
                    "{}|{}|all:{}|any:{}|lit:{}|{}|{}|{}\n",
                    r.priority,
                    r.id,
                    join(&r.all_of),
                    join(&r.any_of),
                    r.literals.join(","),
                    r.cat2,
                    r.cat3,
                    if r.terminal { "terminal" } else { "" }
                )
            })
            .collect()
    }
}

struct Fields {
    streams: [TokenStream; 3],
    lowered: [String; 3],
}

impl Fields {
    fn of(ce: &CleanEmail) -> Self {
        let none = Stopwords::empty();
        let texts = [&ce.title, &ce.body, &ce.ocr_text];
        Self {
            streams: texts.map(|t| tokenize(t, &none)),
            lowered: texts.map(|t| t.to_lowercase()),
        }
    }

    fn has_keyword(&self, k: &Keyword) -> bool {
        self.streams.iter().any(|s| s.contains_sequence(&k.tokens))
    }

    fn has_literal(&self, lit: &str) -> bool {
        let lit = lit.to_lowercase();
        self.lowered.iter().any(|f| f.contains(&lit))
    }
}

fn evaluate(rule: &Rule, f: &Fields) -> Option<Vec<String>> {
    let mut matched = Vec::new();
    for k in &rule.all_of {
        if !f.has_keyword(k) {
            return None;
        }
        matched.push(k.text.clone());
    }
    if !rule.any_of.is_empty() {
        let hits: Vec<String> = rule
            .any_of
            .iter()
            .filter(|k| f.has_keyword(k))
            .map(|k| k.text.clone())
            .collect();
        if hits.is_empty() {
            return None;
        }
        matched.extend(hits);
    }
    if !rule.literals.is_empty() {
        let hits: Vec<String> = rule.literals.iter().filter(|l| f.has_literal(l)).cloned().collect();
        if hits.is_empty() {
            return None;
        }
        matched.extend(hits);
    }
    Some(matched)
}

/// First rule in (priority, id) order that fires.
pub fn apply_rules(ce: &CleanEmail, rs: &RuleSet) -> Option<RuleMatch> {
    matching_rules(ce, rs).into_iter().next()
}

/// Every rule that fires, in (priority, id) order.
pub fn matching_rules(ce: &CleanEmail, rs: &RuleSet) -> Vec<RuleMatch> {
    if rs.is_empty() {
        return Vec::new();
    }
    let fields = Fields::of(ce);
    rs.rules
        .iter()
        .filter_map(|r| {
            evaluate(r, &fields).map(|matched_terms| RuleMatch {
                rule_id: r.id.clone(),
                cat2: r.cat2.clone(),
                cat3: r.cat3.clone(),
                terminal: r.terminal,
                matched_terms,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = "\
# sure-shot codes
5|late|all:|any:password|lit:|SAP|UserUnlock|terminal
1|zx|all:|any:zx01|lit:|SAP|UserID|terminal
2|lock|all:user,locked|any:|lit:ZX02|SAP|UserUnlock|
";

    fn email(title: &str, body: &str) -> CleanEmail {
        CleanEmail {
            id: "e".into(),
            cat1: None,
            title: title.into(),
            body: body.into(),
            ocr_text: String::new(),
            is_forwarded: false,
            thread_id: None,
        }
    }

    #[test]
    fn loads_sorted() {
        let rs = parse_rules(FIXTURE).unwrap();
        let ids: Vec<&str> = rs.rules().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["zx", "lock", "late"]);
        assert!(!rs.rules()[1].terminal);
        assert!(parse_rules("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_and_malformed() {
        let dup = "1|a|all:x|any:|lit:|P|I|\n2|a|all:y|any:|lit:|P|I|\n";
        assert!(matches!(parse_rules(dup), Err(RuleError::DuplicateId { line: 2, .. })));
        assert!(matches!(
            parse_rules("1|a|all:|any:|lit:|P|I|"),
            Err(RuleError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_rules("x|a|all:q|any:|lit:|P|I|"),
            Err(RuleError::Parse { .. })
        ));
        assert!(matches!(
            parse_rules("1|a|any:q|all:|lit:|P|I|"),
            Err(RuleError::Parse { .. })
        ));
        assert!(matches!(
            parse_rules("1|a|all:q|any:|lit:|P|I|yes"),
            Err(RuleError::Parse { .. })
        ));
    }

    #[test]
    fn token_match_and_precedence() {
        let rs = parse_rules(FIXTURE).unwrap();
        let m = apply_rules(&email("help", "tcode zx01 broken"), &rs).unwrap();
        assert_eq!(m.rule_id, "zx");
        assert_eq!(m.cat3.as_str(), "UserID");
        assert_eq!(m.matched_terms, ["zx01"]);
        // Matches both "zx" (priority 1) and "late" (priority 5).
        let m = apply_rules(&email("ZX01 password", ""), &rs).unwrap();
        assert_eq!(m.rule_id, "zx");
        assert!(apply_rules(&email("printer", "toner empty"), &rs).is_none());
    }

    #[test]
    fn all_and_literal_clauses() {
        let rs = parse_rules(FIXTURE).unwrap();
        // Stemming makes "locked" match "LOCKED"; the literal is required too.
        assert!(apply_rules(&email("User LOCKED", "nothing"), &rs).is_none());
        let m = apply_rules(&email("User LOCKED", "code zx02"), &rs).unwrap();
        assert_eq!(m.rule_id, "lock");
        assert_eq!(m.matched_terms, ["user", "locked", "ZX02"]);
        assert!(apply_rules(&email("user", "zx02"), &rs).is_none());
    }

    #[test]
    fn phrase_keywords_are_contiguous() {
        let rs = parse_rules("1|p|all:sales order|any:|lit:|SAP|UserID|terminal").unwrap();
        assert!(apply_rules(&email("", "my sales order failed"), &rs).is_some());
        assert!(apply_rules(&email("", "order for sales"), &rs).is_none());
    }

    #[test]
    fn target_validation() {
        let table = MappingTable::read_csv("cat1,cat2,cat3,admin_group\nColombo,SAP,UserID,g\n".as_bytes()).unwrap();
        assert!(parse_rules("1|a|any:x|all:|lit:|SAP|UserID|").is_err());
        let ok = parse_rules("1|a|all:x|any:|lit:|SAP|UserID|").unwrap();
        ok.validate(&table).unwrap();
        let bad = parse_rules("1|a|all:x|any:|lit:|SAP|Planning|").unwrap();
        assert!(matches!(bad.validate(&table), Err(RuleError::InvalidTarget { .. })));
    }

    proptest! {
        #[test]
        fn file_order_is_irrelevant(perm in Just(FIXTURE.lines().skip(1).collect::<Vec<_>>()).prop_shuffle()) {
            let text = perm.join("\n");
            let a = parse_rules(&text).unwrap();
            prop_assert_eq!(&a, &parse_rules(FIXTURE).unwrap());
            prop_assert_eq!(parse_rules(&a.to_text()).unwrap(), a);
        }
    }
}
