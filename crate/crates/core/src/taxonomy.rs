//! Three-level category system and the region/plant/issue mapping table.
//!
//! A region (`Category1`) hosts plant applications (`Category2`), and each
//! plant in a region can raise a fixed set of issue types (`Category3`).
//! Every valid triple maps to exactly one admin group. Admin groups are
//! opaque strings read from the mapping file; legacy naming in real tables
//! does not follow the category names, so they are never derived.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: duplicate triple {cat1}/{cat2}/{cat3}")]
    DuplicateTriple {
        row: usize,
        cat1: String,
        cat2: String,
        cat3: String,
    },
    #[error("row {row}: region {cat1:?} is not present in the mapping table")]
    DanglingCategory { row: usize, cat1: String },
    #[error("row {row}: duplicate sender domain {domain:?}")]
    DuplicateDomain { row: usize, domain: String },
    #[error("unknown region for sender {0:?}")]
    UnknownRegion(String),
    #[error("invalid triple {0}/{1}/{2}")]
    InvalidTriple(String, String, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! category_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            /// Returns `None` for an empty (or whitespace-only) name.
            pub fn new(name: impl Into<String>) -> Option<Self> {
                let name = name.into();
                let trimmed = name.trim();
                if trimmed.is_empty() {
                    None
                } else {
                    Some(Self(trimmed.to_string()))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

category_newtype!(
    /// Regional branch, e.g. "Colombo".
    Category1
);
category_newtype!(
    /// Plant application, e.g. "SAP".
    Category2
);
category_newtype!(
    /// Issue type, e.g. "UserUnlock".
    Category3
);

/// Merged plant/issue pair used as the classification target.
///
/// The canonical label is `cat2/cat3`; plant names may not contain `/`, so
/// the label splits back unambiguously at the first slash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UniqueCategory {
    pub cat2: Category2,
    pub cat3: Category3,
}

impl UniqueCategory {
    pub fn new(cat2: Category2, cat3: Category3) -> Self {
        Self { cat2, cat3 }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.cat2, self.cat3)
    }

    pub fn parse(label: &str) -> Option<Self> {
        let (cat2, cat3) = label.split_once('/')?;
        Some(Self {
            cat2: Category2::new(cat2)?,
            cat3: Category3::new(cat3)?,
        })
    }
}

impl fmt::Display for UniqueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.cat2, self.cat3)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub cat1: Category1,
    pub cat2: Category2,
    pub cat3: Category3,
    pub admin_group: String,
}

type Triple = (Category1, Category2, Category3);

/// Region → plant → issue → admin group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MappingEntry>", into = "Vec<MappingEntry>")]
pub struct MappingTable {
    entries: Vec<MappingEntry>,
    by_triple: BTreeMap<Triple, usize>,
    plants_by_region: BTreeMap<Category1, BTreeSet<Category2>>,
    issues_by_plant: BTreeMap<(Category1, Category2), BTreeSet<Category3>>,
}

impl MappingTable {
    /// Builds a table, rejecting duplicate triples and empty admin groups.
    pub fn from_entries(entries: Vec<MappingEntry>) -> Result<Self, TaxonomyError> {
        let mut table = MappingTable::default();
        for (i, entry) in entries.into_iter().enumerate() {
            table.insert(entry, i + 1)?;
        }
        Ok(table)
    }

    fn insert(&mut self, entry: MappingEntry, row: usize) -> Result<(), TaxonomyError> {
        if entry.admin_group.trim().is_empty() {
            return Err(TaxonomyError::Parse {
                row,
                message: "empty admin_group".into(),
            });
        }
        if entry.cat2.as_str().contains('/') {
            return Err(TaxonomyError::Parse {
                row,
                message: format!("cat2 {:?} may not contain '/'", entry.cat2.as_str()),
            });
        }
        let key = (entry.cat1.clone(), entry.cat2.clone(), entry.cat3.clone());
        if self.by_triple.contains_key(&key) {
            return Err(TaxonomyError::DuplicateTriple {
                row,
                cat1: key.0.to_string(),
                cat2: key.1.to_string(),
                cat3: key.2.to_string(),
            });
        }
        self.plants_by_region
            .entry(entry.cat1.clone())
            .or_default()
            .insert(entry.cat2.clone());
        self.issues_by_plant
            .entry((entry.cat1.clone(), entry.cat2.clone()))
            .or_default()
            .insert(entry.cat3.clone());
        self.by_triple.insert(key, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TaxonomyError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut table = MappingTable::default();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| TaxonomyError::Parse {
                row: e.position().map_or(i + 1, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let row = record.position().map_or(i + 1, |p| p.line() as usize);
            if row == 1 {
                let header: Vec<&str> = record.iter().collect();
                if header != ["cat1", "cat2", "cat3", "admin_group"] {
                    return Err(TaxonomyError::Parse {
                        row,
                        message: format!("expected header cat1,cat2,cat3,admin_group, got {header:?}"),
                    });
                }
                continue;
            }
            if record.len() != 4 {
                return Err(TaxonomyError::Parse {
                    row,
                    message: format!("expected 4 columns, got {}", record.len()),
                });
            }
            let field = |idx: usize, name: &str| -> Result<String, TaxonomyError> {
                let value = record[idx].to_string();
                if value.is_empty() {
                    Err(TaxonomyError::Parse {
                        row,
                        message: format!("empty {name}"),
                    })
                } else {
                    Ok(value)
                }
            };
            let entry = MappingEntry {
                cat1: Category1(field(0, "cat1")?),
                cat2: Category2(field(1, "cat2")?),
                cat3: Category3(field(2, "cat3")?),
                admin_group: field(3, "admin_group")?,
            };
            table.insert(entry, row)?;
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TaxonomyError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| TaxonomyError::Io(e.into());
        wtr.write_record(["cat1", "cat2", "cat3", "admin_group"]).map_err(io)?;
        for e in &self.entries {
            wtr.write_record([e.cat1.as_str(), e.cat2.as_str(), e.cat3.as_str(), &e.admin_group])
                .map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_region(&self, cat1: &Category1) -> bool {
        self.plants_by_region.contains_key(cat1)
    }

    pub fn regions(&self) -> impl Iterator<Item = &Category1> {
        self.plants_by_region.keys()
    }

    /// All distinct plants across regions, sorted.
    pub fn plants(&self) -> BTreeSet<Category2> {
        self.entries.iter().map(|e| e.cat2.clone()).collect()
    }

    /// All distinct issue types across regions, sorted.
    pub fn issues(&self) -> BTreeSet<Category3> {
        self.entries.iter().map(|e| e.cat3.clone()).collect()
    }

    /// All distinct (cat2, cat3) pairs, sorted.
    pub fn unique_categories(&self) -> BTreeSet<UniqueCategory> {
        self.entries
            .iter()
            .map(|e| UniqueCategory::new(e.cat2.clone(), e.cat3.clone()))
            .collect()
    }

    pub fn plants_in(&self, cat1: &Category1) -> Option<&BTreeSet<Category2>> {
        self.plants_by_region.get(cat1)
    }

    pub fn issues_for(&self, cat1: &Category1, cat2: &Category2) -> Option<&BTreeSet<Category3>> {
        self.issues_by_plant.get(&(cat1.clone(), cat2.clone()))
    }

    /// Every (cat2, cat3) pair that is valid for a region, sorted.
    pub fn valid_pairs(&self, cat1: &Category1) -> Vec<UniqueCategory> {
        let Some(plants) = self.plants_by_region.get(cat1) else {
            return Vec::new();
        };
        plants
            .iter()
            .flat_map(|p| {
                self.issues_by_plant[&(cat1.clone(), p.clone())]
                    .iter()
                    .map(move |i| UniqueCategory::new(p.clone(), i.clone()))
            })
            .collect()
    }

    pub fn valid_triple(&self, cat1: &Category1, cat2: &Category2, cat3: &Category3) -> bool {
        self.by_triple.contains_key(&(cat1.clone(), cat2.clone(), cat3.clone()))
    }

    pub fn lookup_admin_group(
        &self,
        cat1: &Category1,
        cat2: &Category2,
        cat3: &Category3,
    ) -> Result<&str, TaxonomyError> {
        self.by_triple
            .get(&(cat1.clone(), cat2.clone(), cat3.clone()))
            .map(|&i| self.entries[i].admin_group.as_str())
            .ok_or_else(|| TaxonomyError::InvalidTriple(cat1.to_string(), cat2.to_string(), cat3.to_string()))
    }
}

impl TryFrom<Vec<MappingEntry>> for MappingTable {
    type Error = TaxonomyError;

    fn try_from(entries: Vec<MappingEntry>) -> Result<Self, Self::Error> {
        Self::from_entries(entries)
    }
}

impl From<MappingTable> for Vec<MappingEntry> {
    fn from(table: MappingTable) -> Self {
        table.entries
    }
}

/// Lowercase sender domain → region.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderDirectory {
    domain_to_region: BTreeMap<String, Category1>,
}

impl SenderDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the domain was already present.
    pub fn insert(&mut self, domain: &str, cat1: Category1) -> bool {
        self.domain_to_region
            .insert(domain.trim().to_lowercase(), cat1)
            .is_none()
    }

    pub fn len(&self) -> usize {
        self.domain_to_region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_to_region.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = (&str, &Category1)> {
        self.domain_to_region.iter().map(|(d, c)| (d.as_str(), c))
    }

    /// Region for a sender address, by case-insensitive domain.
    pub fn cat1_from_sender(&self, sender: &str) -> Result<Category1, TaxonomyError> {
        let domain = sender
            .trim()
            .rsplit_once('@')
            .map(|(_, d)| d.trim_end_matches('>').to_lowercase())
            .ok_or_else(|| TaxonomyError::UnknownRegion(sender.to_string()))?;
        self.domain_to_region
            .get(&domain)
            .cloned()
            .ok_or_else(|| TaxonomyError::UnknownRegion(sender.to_string()))
    }

    /// Reads `domain,cat1` rows; every region must exist in `table`.
    pub fn read_csv<R: Read>(reader: R, table: &MappingTable) -> Result<Self, TaxonomyError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut dir = SenderDirectory::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| TaxonomyError::Parse {
                row: e.position().map_or(i + 1, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let row = record.position().map_or(i + 1, |p| p.line() as usize);
            if row == 1 {
                if record.iter().collect::<Vec<_>>() != ["domain", "cat1"] {
                    return Err(TaxonomyError::Parse {
                        row,
                        message: "expected header domain,cat1".into(),
                    });
                }
                continue;
            }
            if record.len() != 2 || record[0].is_empty() || record[1].is_empty() {
                return Err(TaxonomyError::Parse {
                    row,
                    message: "expected non-empty domain and cat1".into(),
                });
            }
            let cat1 = Category1(record[1].to_string());
            if !table.contains_region(&cat1) {
                return Err(TaxonomyError::DanglingCategory {
                    row,
                    cat1: cat1.to_string(),
                });
            }
            if !dir.insert(&record[0], cat1) {
                return Err(TaxonomyError::DuplicateDomain {
                    row,
                    domain: record[0].to_lowercase(),
                });
            }
        }
        Ok(dir)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TaxonomyError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| TaxonomyError::Io(e.into());
        wtr.write_record(["domain", "cat1"]).map_err(io)?;
        for (d, c) in &self.domain_to_region {
            wtr.write_record([d.as_str(), c.as_str()]).map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Loads the mapping table and the sender directory from their CSV files.
pub fn load_taxonomy(
    mapping_path: &Path,
    senders_path: &Path,
) -> Result<(MappingTable, SenderDirectory), TaxonomyError> {
    let table = MappingTable::read_csv(std::fs::File::open(mapping_path)?)?;
    let dir = SenderDirectory::read_csv(std::fs::File::open(senders_path)?, &table)?;
    Ok((table, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_I: &str = "cat1,cat2,cat3,admin_group
Newyork,Darwin,Planning,Kandy-Darwin-Planning
Battaya,NonSAP,Delivery,Battay-NonSAP-Delivery
Colombo,SAP,UserUnlock,Colombo-Sap-UserUnlock
Colombo,SAP,UserID,Colombo-sap-UserID
City-1,Infrastructure,Purchasing,Delhi-Infra-Purchasing
";

    fn c1(s: &str) -> Category1 {
        Category1::new(s).unwrap()
    }
    fn c2(s: &str) -> Category2 {
        Category2::new(s).unwrap()
    }
    fn c3(s: &str) -> Category3 {
        Category3::new(s).unwrap()
    }

    #[test]
    fn loads_table_one() {
        let t = MappingTable::read_csv(TABLE_I.as_bytes()).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(
            t.lookup_admin_group(&c1("Colombo"), &c2("SAP"), &c3("UserUnlock"))
                .unwrap(),
            "Colombo-Sap-UserUnlock"
        );
        // Legacy group names are kept verbatim.
        assert_eq!(
            t.lookup_admin_group(&c1("Newyork"), &c2("Darwin"), &c3("Planning"))
                .unwrap(),
            "Kandy-Darwin-Planning"
        );
        assert!(matches!(
            t.lookup_admin_group(&c1("Colombo"), &c2("SAP"), &c3("Planning")),
            Err(TaxonomyError::InvalidTriple(..))
        ));
        assert_eq!(t.plants_in(&c1("Colombo")).unwrap().len(), 1);
        assert_eq!(t.valid_pairs(&c1("Colombo")).len(), 2);
    }

    #[test]
    fn empty_file_is_empty_table() {
        let t = MappingTable::read_csv("".as_bytes()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn duplicate_triple_rejected() {
        let data = "cat1,cat2,cat3,admin_group\nColombo,SAP,UserID,a\nColombo,SAP,UserID,b\n";
        match MappingTable::read_csv(data.as_bytes()) {
            Err(TaxonomyError::DuplicateTriple { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_rows_report_row_number() {
        let data = "cat1,cat2,cat3,admin_group\nColombo,SAP,UserID,a\nColombo,SAP,,b\n";
        match MappingTable::read_csv(data.as_bytes()) {
            Err(TaxonomyError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sender_lookup() {
        let t = MappingTable::read_csv(TABLE_I.as_bytes()).unwrap();
        let d = SenderDirectory::read_csv("domain,cat1\ncolombo.corp.example,Colombo\n".as_bytes(), &t).unwrap();
        assert_eq!(d.cat1_from_sender("a@colombo.corp.example").unwrap(), c1("Colombo"));
        assert_eq!(d.cat1_from_sender("A@COLOMBO.CORP.EXAMPLE").unwrap(), c1("Colombo"));
        assert!(matches!(
            d.cat1_from_sender("a@nowhere.example"),
            Err(TaxonomyError::UnknownRegion(_))
        ));
        assert!(d.cat1_from_sender("no-at-sign").is_err());
    }

    #[test]
    fn dangling_region_in_directory() {
        let t = MappingTable::read_csv(TABLE_I.as_bytes()).unwrap();
        let r = SenderDirectory::read_csv("domain,cat1\nx.example,Atlantis\n".as_bytes(), &t);
        assert!(matches!(r, Err(TaxonomyError::DanglingCategory { row: 2, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let t = MappingTable::read_csv(TABLE_I.as_bytes()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = MappingTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(t.entries(), back.entries());
    }

    #[test]
    fn lookup_iff_valid_over_cross_product() {
        let t = MappingTable::read_csv(TABLE_I.as_bytes()).unwrap();
        let regions: Vec<_> = t.regions().cloned().collect();
        for r in &regions {
            for p in t.plants() {
                for i in t.issues() {
                    assert_eq!(t.lookup_admin_group(r, &p, &i).is_ok(), t.valid_triple(r, &p, &i));
                }
            }
        }
    }

    #[test]
    fn unique_category_label_bijection() {
        let u = UniqueCategory::new(c2("SAP"), c3("User/Unlock"));
        assert_eq!(u.label(), "SAP/User/Unlock");
        assert_eq!(UniqueCategory::parse(&u.label()).unwrap(), u);
    }
}
