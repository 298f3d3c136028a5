//! Feature hashing with 64-bit FNV-1a.

use std::collections::BTreeMap;

use super::FeatureVector;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the UTF-8 bytes of `s`. Stable across runs and platforms.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn bucket(gram: &str, hash_dim: usize) -> u32 {
    (fnv1a64(gram) % hash_dim as u64) as u32
}

/// Occurrence counts per hash bucket; colliding grams add up.
pub fn hash_features(grams: &[String], hash_dim: usize) -> FeatureVector {
    assert!(hash_dim > 0, "hash_dim must be positive");
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for g in grams {
        *counts.entry(bucket(g, hash_dim)).or_insert(0.0) += 1.0;
    }
    FeatureVector::from_sorted(hash_dim, counts.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64("foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn deterministic_and_bounded() {
        let grams: Vec<String> = (0..500).map(|i| format!("gram{i}")).collect();
        let a = hash_features(&grams, 12000);
        let b = hash_features(&grams, 12000);
        assert_eq!(a, b);
        assert!(a.entries().iter().all(|&(i, _)| (i as usize) < 12000));
        let total: f64 = a.entries().iter().map(|e| e.1).sum();
        assert_eq!(total, 500.0);
    }

    #[test]
    fn collisions_merge() {
        // Brute-force search for two distinct grams sharing a bucket.
        let dim = 97;
        let mut seen: BTreeMap<u32, String> = BTreeMap::new();
        let (a, b) = (0..)
            .map(|i| format!("w{i}"))
            .find_map(|g| {
                let k = bucket(&g, dim);
                match seen.get(&k) {
                    Some(prev) => Some((prev.clone(), g)),
                    None => {
                        seen.insert(k, g);
                        None
                    }
                }
            })
            .unwrap();
        let v = hash_features(&[a.clone(), b], dim);
        assert_eq!(v.entries().len(), 1);
        assert_eq!(v.get(bucket(&a, dim) as usize), 2.0);
    }
}
