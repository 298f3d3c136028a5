//! Labeled email CSV, seeded synthetic corpora, and stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{Category1, Category2, Category3, MappingEntry, MappingTable, SenderDirectory, TaxonomyError};

pub const CORPUS_HEADER: [&str; 9] = ["title", "body", "ocr", "from", "to", "cc", "cat1", "cat2", "cat3"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("class {label:?} has {count} rows; at least 2 are needed to split")]
    TooFewSamples { label: String, count: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("row {row}: triple {cat1}/{cat2}/{cat3} is not in the mapping table")]
    InvalidTriple {
        row: usize,
        cat1: String,
        cat2: String,
        cat3: String,
    },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabeledEmail {
    pub title: String,
    pub body: String,
    pub ocr: String,
    pub from: String,
    pub to: String,
    pub cc: String,
    pub cat1: String,
    pub cat2: String,
    pub cat3: String,
}

impl LabeledEmail {
    /// The merged `cat2/cat3` target label.
    pub fn label(&self) -> String {
        format!("{}/{}", self.cat2, self.cat3)
    }

    pub fn triple(&self) -> Option<(Category1, Category2, Category3)> {
        Some((
            Category1::new(self.cat1.clone())?,
            Category2::new(self.cat2.clone())?,
            Category3::new(self.cat3.clone())?,
        ))
    }
}

pub fn write_csv<W: Write>(rows: &[LabeledEmail], w: W) -> Result<(), CorpusError> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CorpusError::Io(std::io::Error::other(e));
    wtr.write_record(CORPUS_HEADER).map_err(io)?;
    for r in rows {
        wtr.write_record([
            &r.title, &r.body, &r.ocr, &r.from, &r.to, &r.cc, &r.cat1, &r.cat2, &r.cat3,
        ])
        .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<LabeledEmail>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CorpusError::Malformed {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            if rec.iter().ne(CORPUS_HEADER) {
                return Err(CorpusError::Malformed {
                    line,
                    message: format!("expected header {}", CORPUS_HEADER.join(",")),
                });
            }
            continue;
        }
        if rec.len() != CORPUS_HEADER.len() {
            return Err(CorpusError::Malformed {
                line,
                message: format!("expected {} fields, got {}", CORPUS_HEADER.len(), rec.len()),
            });
        }
        let f = |k: usize| rec[k].to_string();
        out.push(LabeledEmail {
            title: f(0),
            body: f(1),
            ocr: f(2),
            from: f(3),
            to: f(4),
            cc: f(5),
            cat1: f(6),
            cat2: f(7),
            cat3: f(8),
        });
    }
    if out.is_empty() && rdr.position().line() <= 1 && rdr.position().byte() == 0 {
        return Err(CorpusError::Malformed {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(out)
}

pub fn save_csv(rows: &[LabeledEmail], path: &Path) -> Result<(), CorpusError> {
    write_csv(rows, std::fs::File::create(path)?)
}

pub fn load_csv(path: &Path) -> Result<Vec<LabeledEmail>, CorpusError> {
    read_csv(std::fs::File::open(path)?)
}

/// Checks every row's triple against the mapping table.
pub fn validate(rows: &[LabeledEmail], table: &MappingTable) -> Result<(), CorpusError> {
    for (i, r) in rows.iter().enumerate() {
        let ok = r.triple().is_some_and(|(a, b, c)| table.valid_triple(&a, &b, &c));
        if !ok {
            return Err(CorpusError::InvalidTriple {
                row: i + 1,
                cat1: r.cat1.clone(),
                cat2: r.cat2.clone(),
                cat3: r.cat3.clone(),
            });
        }
    }
    Ok(())
}

/// Stratified split: per class, `round(test_ratio · n)` rows clamped to
/// `[1, n − 1]` go to test. Both halves keep input order.
pub fn stratified_split<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> String,
    test_ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(label(it)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = BTreeSet::new();
    for (l, mut idx) in by_class {
        let n = idx.len();
        if n < 2 {
            return Err(CorpusError::TooFewSamples { label: l, count: n });
        }
        let k = ((test_ratio * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        test_idx.extend(idx.into_iter().take(k));
    }
    let mut train = Vec::with_capacity(items.len() - test_idx.len());
    let mut test = Vec::with_capacity(test_idx.len());
    for (i, it) in items.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    Ok((train, test))
}

/// 80:20 stratified split on the `cat2/cat3` label.
pub fn split(rows: &[LabeledEmail], seed: u64) -> Result<(Vec<LabeledEmail>, Vec<LabeledEmail>), CorpusError> {
    stratified_split(rows, LabeledEmail::label, 0.2, seed)
}

/// Knobs for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_regions: usize,
    pub n_plants: usize,
    pub n_categories: usize,
    pub emails_per_category: usize,
    /// Probability that a content token is replaced by a distractor.
    pub noise: f64,
    /// Spread of per-category noise: each category uses
    /// `noise · (1 − spread + 2·spread·u)` for a seeded `u ∈ [0, 1)`.
    pub noise_spread: f64,
    /// Share of distractors drawn from a sibling category's lexicon
    /// (same plant or same issue) instead of shared filler.
    pub sibling_bias: f64,
    pub core_vocab: usize,
    pub shared_vocab: usize,
    pub title_tokens: (usize, usize),
    pub body_tokens: (usize, usize),
    pub ocr_tokens: (usize, usize),
    pub ocr_rate: f64,
    /// Fraction of body tokens that are shared filler regardless of noise;
    /// at least two body tokens are always content.
    pub filler_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_regions: 4,
            n_plants: 4,
            n_categories: 20,
            emails_per_category: 100,
            noise: 0.35,
            noise_spread: 0.9,
            sibling_bias: 0.9,
            core_vocab: 8,
            shared_vocab: 80,
            title_tokens: (1, 3),
            body_tokens: (4, 8),
            ocr_tokens: (4, 10),
            ocr_rate: 0.3,
            filler_rate: 0.6,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.into()));
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1)");
        }
        if self.emails_per_category < 2 {
            return bad("emails_per_category must be >= 2");
        }
        if self.n_regions == 0 || self.n_plants == 0 || self.n_categories == 0 {
            return bad("taxonomy sizes must be positive");
        }
        if self.n_categories < self.n_plants {
            return bad("n_categories must be >= n_plants");
        }
        if self.core_vocab == 0 || self.shared_vocab == 0 {
            return bad("vocabulary sizes must be positive");
        }
        for (lo, hi) in [self.title_tokens, self.body_tokens, self.ocr_tokens] {
            if lo == 0 || lo > hi {
                return bad("token ranges must satisfy 1 <= lo <= hi");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub emails: Vec<LabeledEmail>,
    pub table: MappingTable,
    pub senders: SenderDirectory,
}

impl SyntheticCorpus {
    /// Writes `corpus.csv`, `mapping.csv` and `senders.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        save_csv(&self.emails, &dir.join("corpus.csv"))?;
        self.table.write_csv(std::fs::File::create(dir.join("mapping.csv"))?)?;
        self.senders
            .write_csv(std::fs::File::create(dir.join("senders.csv"))?)?;
        Ok(())
    }
}

const REGIONS: &[&str] = &[
    "Colombo", "Kandy", "Newyork", "Battaya", "Delhi", "Galle", "Jaffna", "Negombo", "Matara", "Trinco",
];
const PLANTS: &[&str] = &[
    "SAP",
    "Darwin",
    "NonSAP",
    "Infrastructure",
    "Ariba",
    "Maximo",
    "Kronos",
    "Workday",
];
const ISSUES: &[&str] = &[
    "UserUnlock",
    "UserID",
    "Planning",
    "Delivery",
    "Purchasing",
    "PasswordReset",
    "Invoice",
    "Access",
    "Reporting",
    "Printing",
    "Payroll",
    "Shipping",
    "Backup",
    "Licensing",
    "Network",
    "Quality",
];

fn name_from(pool: &[&str], i: usize) -> String {
    let base = pool[i % pool.len()];
    match i / pool.len() {
        0 => base.to_string(),
        k => format!("{base}{}", k + 1),
    }
}

/// Pronounceable pseudo-words ending in a vowel other than `e`, so the
/// stemmer leaves them intact.
fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*C.choose(rng).unwrap() as char);
            w.push(*V.choose(rng).unwrap() as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

const MIN_BODY_CONTENT: usize = 2;

struct Category {
    plant: usize,
    issue: usize,
    noise: f64,
    core: Vec<String>,
}

/// Deterministic synthetic corpus and taxonomy from `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regions: Vec<String> = (0..spec.n_regions).map(|i| name_from(REGIONS, i)).collect();
    let plants: Vec<String> = (0..spec.n_plants).map(|i| name_from(PLANTS, i)).collect();
    let n_issues = spec.n_categories.div_ceil(spec.n_plants);
    let issues: Vec<String> = (0..n_issues).map(|i| name_from(ISSUES, i)).collect();

    let mut taken: BTreeSet<String> = BTreeSet::new();
    let shared = pseudo_words(&mut rng, spec.shared_vocab, &mut taken);
    let categories: Vec<Category> = (0..spec.n_categories)
        .map(|i| {
            let u: f64 = rng.random();
            Category {
                plant: i % spec.n_plants,
                issue: i / spec.n_plants,
                noise: (spec.noise * (1.0 - spec.noise_spread + 2.0 * spec.noise_spread * u)).clamp(0.0, 0.95),
                core: pseudo_words(&mut rng, spec.core_vocab, &mut taken),
            }
        })
        .collect();

    // Every region hosts a seeded subset of plants; each category is valid
    // in at least one region.
    let mut region_cats: Vec<Vec<usize>> = vec![Vec::new(); spec.n_regions];
    let mut cat_regions: Vec<Vec<usize>> = vec![Vec::new(); spec.n_categories];
    for (r, cats) in region_cats.iter_mut().enumerate() {
        let mut hosted: Vec<usize> = (0..spec.n_plants).filter(|_| rng.random::<f64>() < 0.75).collect();
        if hosted.is_empty() {
            hosted.push(r % spec.n_plants);
        }
        for (c, cat) in categories.iter().enumerate() {
            if hosted.contains(&cat.plant) {
                cats.push(c);
                cat_regions[c].push(r);
            }
        }
    }
    for (c, regs) in cat_regions.iter_mut().enumerate() {
        if regs.is_empty() {
            let r = c % spec.n_regions;
            regs.push(r);
            region_cats[r].push(c);
        }
    }
    let mut entries = Vec::new();
    for (r, cats) in region_cats.iter_mut().enumerate() {
        cats.sort_unstable();
        for &c in cats.iter() {
            let cat = &categories[c];
            entries.push(MappingEntry {
                cat1: Category1::new(regions[r].clone()).expect("non-empty"),
                cat2: Category2::new(plants[cat.plant].clone()).expect("non-empty"),
                cat3: Category3::new(issues[cat.issue].clone()).expect("non-empty"),
                admin_group: format!("{}-{}-{}", regions[r], plants[cat.plant], issues[cat.issue]),
            });
        }
    }
    let table = MappingTable::from_entries(entries)?;
    let mut senders = SenderDirectory::new();
    for r in &regions {
        senders.insert(
            &format!("{}.corp.example", r.to_lowercase()),
            Category1::new(r.clone()).expect("non-empty"),
        );
    }

    let siblings: Vec<Vec<usize>> = (0..categories.len())
        .map(|c| {
            (0..categories.len())
                .filter(|&o| {
                    o != c && (categories[o].plant == categories[c].plant || categories[o].issue == categories[c].issue)
                })
                .collect()
        })
        .collect();

    let mut emails = Vec::with_capacity(spec.n_categories * spec.emails_per_category);
    for (c, cat) in categories.iter().enumerate() {
        for k in 0..spec.emails_per_category {
            let content = |rng: &mut ChaCha8Rng| -> String {
                if rng.random::<f64>() < cat.noise {
                    match siblings[c].choose(rng) {
                        Some(&s) if rng.random::<f64>() < spec.sibling_bias => {
                            categories[s].core.choose(rng).unwrap().clone()
                        }
                        _ => shared.choose(rng).unwrap().clone(),
                    }
                } else {
                    cat.core.choose(rng).unwrap().clone()
                }
            };
            let n_title = rng.random_range(spec.title_tokens.0..=spec.title_tokens.1);
            let mut title: Vec<String> = (0..n_title).map(|_| content(&mut rng)).collect();
            if rng.random::<f64>() < 0.4 {
                title.insert(0, plants[cat.plant].clone());
            }
            let n_body = rng.random_range(spec.body_tokens.0..=spec.body_tokens.1);
            let n_content = ((1.0 - spec.filler_rate) * n_body as f64)
                .round()
                .max(MIN_BODY_CONTENT as f64) as usize;
            let mut body: Vec<String> = (0..n_body.max(n_content))
                .map(|i| {
                    if i < n_content {
                        content(&mut rng)
                    } else {
                        shared.choose(&mut rng).unwrap().clone()
                    }
                })
                .collect();
            body.shuffle(&mut rng);
            let ocr: Vec<String> = if rng.random::<f64>() < spec.ocr_rate {
                let n = rng.random_range(spec.ocr_tokens.0..=spec.ocr_tokens.1);
                (0..n).map(|_| content(&mut rng)).collect()
            } else {
                Vec::new()
            };
            let region = *cat_regions[c].choose(&mut rng).unwrap();
            let cc = if rng.random::<f64>() < 0.3 {
                format!("lead{}@corp.example", rng.random_range(0..20))
            } else {
                String::new()
            };
            emails.push(LabeledEmail {
                title: title.join(" "),
                body: body.join(" "),
                ocr: ocr.join(" "),
                from: format!("user{}.{k}@{}.corp.example", c, regions[region].to_lowercase()),
                to: "helpdesk@corp.example".into(),
                cc,
                cat1: regions[region].clone(),
                cat2: plants[cat.plant].clone(),
                cat3: issues[cat.issue].clone(),
            });
        }
    }
    Ok(SyntheticCorpus { emails, table, senders })
}
