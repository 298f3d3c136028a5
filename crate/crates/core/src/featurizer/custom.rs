//! Region-aware indicator features from the mapping table.
//!
//! For every plant there are two indicators: mentioned-and-available in the
//! sender's region, mentioned-but-unavailable. Issues get the same pair,
//! where "available" means some plant in the region can raise the issue.
//! A final flag marks an unknown region, in which case nothing else fires.
//! Dimension = 2·|plants| + 2·|issues| + 1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::text::{tokenize, Stopwords, TokenStream};
use super::FeatureVector;
use crate::taxonomy::{Category1, MappingTable};

/// Splits `UserUnlock`, `NonSAP`, `SAPUser`, `City-1` into word parts.
fn split_name(name: &str) -> Vec<String> {
    let chars: Vec<char> = name.chars().collect();
    let mut parts = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                parts.push(std::mem::take(&mut current));
            }
            continue;
        }
        if let Some(&prev) = i.checked_sub(1).and_then(|j| chars.get(j)) {
            let next = chars.get(i + 1).copied();
            let boundary = (prev.is_lowercase() && c.is_uppercase())
                || (prev.is_uppercase() && c.is_uppercase() && next.is_some_and(char::is_lowercase))
                || (prev.is_alphabetic() != c.is_alphabetic() && prev.is_alphanumeric());
            if boundary && !current.is_empty() {
                parts.push(std::mem::take(&mut current));
            }
        }
        current.push(c);
    }
    if !current.is_empty() {
        parts.push(current);
    }
    parts
}

/// Token sequences that count as a mention of a category name: the split
/// and stemmed parts in order, or the whole name as one lowercase token.
fn lexicon_for(name: &str) -> Vec<Vec<String>> {
    let none = Stopwords::empty();
    let parts = tokenize(&split_name(name).join(" "), &none).tokens;
    let joined = tokenize(&name.replace(|c: char| !c.is_alphanumeric(), ""), &none).tokens;
    let mut alts = vec![];
    if !parts.is_empty() {
        alts.push(parts);
    }
    if !joined.is_empty() && !alts.contains(&joined) {
        alts.push(joined);
    }
    alts
}

fn mentions(ts: &TokenStream, lexicon: &[Vec<String>]) -> bool {
    lexicon.iter().any(|seq| ts.contains_sequence(seq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomFeatureLayout {
    plants: Vec<String>,
    issues: Vec<String>,
    plant_lexicon: Vec<Vec<Vec<String>>>,
    issue_lexicon: Vec<Vec<Vec<String>>>,
    region_plants: BTreeMap<Category1, BTreeSet<usize>>,
    region_issues: BTreeMap<Category1, BTreeSet<usize>>,
}

impl CustomFeatureLayout {
    pub fn from_table(table: &MappingTable) -> Self {
        let plants: Vec<String> = table.plants().iter().map(|p| p.to_string()).collect();
        let issues: Vec<String> = table.issues().iter().map(|i| i.to_string()).collect();
        let plant_idx: BTreeMap<&str, usize> = plants.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        let issue_idx: BTreeMap<&str, usize> = issues.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        let mut region_plants: BTreeMap<Category1, BTreeSet<usize>> = BTreeMap::new();
        let mut region_issues: BTreeMap<Category1, BTreeSet<usize>> = BTreeMap::new();
        for e in table.entries() {
            region_plants
                .entry(e.cat1.clone())
                .or_default()
                .insert(plant_idx[e.cat2.as_str()]);
            region_issues
                .entry(e.cat1.clone())
                .or_default()
                .insert(issue_idx[e.cat3.as_str()]);
        }
        Self {
            plant_lexicon: plants.iter().map(|p| lexicon_for(p)).collect(),
            issue_lexicon: issues.iter().map(|i| lexicon_for(i)).collect(),
            plants,
            issues,
            region_plants,
            region_issues,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.plants.len() + 2 * self.issues.len() + 1
    }

    pub fn plant_index(&self, name: &str) -> Option<usize> {
        self.plants.iter().position(|p| p == name)
    }

    pub fn issue_index(&self, name: &str) -> Option<usize> {
        self.issues.iter().position(|p| p == name)
    }

    /// Index of the plant "mentioned and available" indicator; the
    /// "unavailable" indicator follows it.
    pub fn plant_dim(&self, plant: usize) -> usize {
        2 * plant
    }

    pub fn issue_dim(&self, issue: usize) -> usize {
        2 * self.plants.len() + 2 * issue
    }

    pub fn unknown_region_dim(&self) -> usize {
        self.dim() - 1
    }

    pub fn features(&self, cat1: Option<&Category1>, ts: &TokenStream) -> FeatureVector {
        let known = cat1.and_then(|c| self.region_plants.get(c).map(|p| (c, p)));
        let Some((cat1, plants)) = known else {
            return FeatureVector::from_sorted(self.dim(), vec![(self.unknown_region_dim() as u32, 1.0)]);
        };
        let issues = &self.region_issues[cat1];
        let mut entries = Vec::new();
        for (i, lex) in self.plant_lexicon.iter().enumerate() {
            if mentions(ts, lex) {
                let d = self.plant_dim(i) + usize::from(!plants.contains(&i));
                entries.push((d as u32, 1.0));
            }
        }
        for (j, lex) in self.issue_lexicon.iter().enumerate() {
            if mentions(ts, lex) {
                let d = self.issue_dim(j) + usize::from(!issues.contains(&j));
                entries.push((d as u32, 1.0));
            }
        }
        FeatureVector::from_sorted(self.dim(), entries)
    }
}

/// Builds the layout from `table` and evaluates it in one call.
pub fn custom_mapping_features(cat1: Option<&Category1>, ts: &TokenStream, table: &MappingTable) -> FeatureVector {
    CustomFeatureLayout::from_table(table).features(cat1, ts)
}
