//! Inverse document frequency tables.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureVector};

/// idf(t) = ln((1 + N) / (1 + df(t))) + 1 when smoothed,
/// ln(N / df(t)) + 1 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable<K: Ord> {
    pub n_docs: usize,
    pub smooth: bool,
    idf: BTreeMap<K, f64>,
}

impl<K: Ord + Clone> IdfTable<K> {
    /// Fits document frequencies; each document counts a key at most once.
    pub fn fit<'a, D, I>(docs: D, smooth: bool) -> Result<Self, FeatureError>
    where
        D: IntoIterator<Item = I>,
        I: IntoIterator<Item = &'a K>,
        K: 'a,
    {
        let mut df: BTreeMap<K, usize> = BTreeMap::new();
        let mut n_docs = 0usize;
        for doc in docs {
            n_docs += 1;
            let unique: BTreeSet<&K> = doc.into_iter().collect();
            for k in unique {
                *df.entry(k.clone()).or_insert(0) += 1;
            }
        }
        if n_docs == 0 {
            return Err(FeatureError::EmptyCorpus);
        }
        let n = n_docs as f64;
        let idf = df
            .into_iter()
            .map(|(k, d)| {
                let d = d as f64;
                let w = if smooth {
                    ((1.0 + n) / (1.0 + d)).ln() + 1.0
                } else {
                    (n / d).ln() + 1.0
                };
                (k, w)
            })
            .collect();
        Ok(Self { n_docs, smooth, idf })
    }

    pub fn idf(&self, key: &K) -> Option<f64> {
        self.idf.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.idf.keys()
    }
}

impl IdfTable<String> {
    /// Vocabulary position of a term (sorted order).
    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.idf.keys().position(|k| k == term)
    }

    /// Raw tf times idf over the fitted vocabulary. Unseen terms are
    /// ignored. Indices are vocabulary positions in sorted order.
    pub fn transform(&self, grams: &[String]) -> FeatureVector {
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for g in grams {
            if self.idf.contains_key(g) {
                *tf.entry(g.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let mut entries = Vec::with_capacity(tf.len());
        // Both maps iterate in sorted key order, so a single merge pass
        // yields vocabulary positions.
        let mut pending = tf.into_iter().peekable();
        for (pos, (term, idf)) in self.idf.iter().enumerate() {
            match pending.peek() {
                Some((t, _)) if *t == term.as_str() => {
                    let (_, count) = pending.next().unwrap();
                    entries.push((pos as u32, count * idf));
                }
                None => break,
                _ => {}
            }
        }
        FeatureVector::from_sorted(self.idf.len(), entries)
    }
}

/// Fits IDF over gram lists.
pub fn tfidf_fit(corpus: &[Vec<String>], smooth: bool) -> Result<IdfTable<String>, FeatureError> {
    IdfTable::fit(corpus.iter(), smooth)
}

pub fn tfidf_transform(grams: &[String], idf: &IdfTable<String>) -> FeatureVector {
    idf.transform(grams)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter().map(|d| d.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn hand_computed_idf() {
        let corpus = docs(&[&["a"], &["a"], &["b"]]);
        let idf = tfidf_fit(&corpus, true).unwrap();
        assert!((idf.idf(&"a".into()).unwrap() - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-12);
        assert!((idf.idf(&"b".into()).unwrap() - ((4.0f64 / 2.0).ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn three_document_weights() {
        let corpus = docs(&[&["a", "b", "a"], &["b", "c"], &["a", "c", "c", "d"]]);
        let idf = tfidf_fit(&corpus, true).unwrap();
        // df: a=2, b=2, c=2, d=1; N=3
        let i2 = (4.0f64 / 3.0).ln() + 1.0;
        let i1 = (4.0f64 / 2.0).ln() + 1.0;
        let v = idf.transform(&corpus[0]);
        assert_eq!(v.entries().len(), 2);
        assert!((v.get(0) - 2.0 * i2).abs() < 1e-9);
        assert!((v.get(1) - i2).abs() < 1e-9);
        let v = idf.transform(&corpus[2]);
        assert!((v.get(2) - 2.0 * i2).abs() < 1e-9);
        assert!((v.get(3) - i1).abs() < 1e-9);
        assert_eq!(v.dim(), 4);
    }

    #[test]
    fn term_in_every_doc_has_unit_idf() {
        let corpus = docs(&[&["x", "y"], &["x"], &["x", "z"]]);
        let idf = tfidf_fit(&corpus, true).unwrap();
        assert!((idf.idf(&"x".into()).unwrap() - 1.0).abs() < 1e-12);
        let raw = tfidf_fit(&corpus, false).unwrap();
        assert!((raw.idf(&"x".into()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_terms_ignored() {
        let idf = tfidf_fit(&docs(&[&["a"]]), true).unwrap();
        assert!(idf.transform(&["zzz".to_string()]).is_empty());
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(tfidf_fit(&[], true), Err(FeatureError::EmptyCorpus)));
    }
}
