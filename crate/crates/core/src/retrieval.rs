//! TF-IDF index over the training pairs: prototype retrieval, most-similar
//! document lookup and random negative sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::error::{Error, Result};

pub const INDEX_VERSION: u32 = 1;

/// Sparse vector as `(term id, weight)` sorted by term id, no zero entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector(pub Vec<(u32, f64)>);

impl SparseVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dot product over the shared support.
pub fn similarity(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    let (a, b) = (&a.0, &b.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                total += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfIndex {
    version: u32,
    terms: BTreeMap<String, u32>,
    doc_freq: Vec<u32>,
    pairs: Vec<Pair>,
    vectors: Vec<SparseVector>,
    attractive: Vec<usize>,
    unattractive: Vec<usize>,
}

/// Text a pair is indexed and queried by: document followed by headline.
fn pair_text(pair: &Pair) -> impl Iterator<Item = &String> {
    pair.document.iter().chain(&pair.headline)
}

impl TfIdfIndex {
    /// weight(t, d) = tf(t, d) * ln(N / df(t)); terms present in every
    /// document get weight zero and are dropped from the vectors.
    pub fn build(pairs: &[Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut terms: BTreeMap<String, u32> = BTreeMap::new();
        for p in pairs {
            for t in pair_text(p) {
                terms.entry(t.clone()).or_insert(0);
            }
        }
        for (i, v) in terms.values_mut().enumerate() {
            *v = i as u32;
        }
        let mut doc_freq = vec![0u32; terms.len()];
        let counts: Vec<BTreeMap<u32, u32>> = pairs
            .iter()
            .map(|p| {
                let mut tf = BTreeMap::new();
                for t in pair_text(p) {
                    *tf.entry(terms[t]).or_insert(0) += 1;
                }
                tf
            })
            .collect();
        for tf in &counts {
            for &t in tf.keys() {
                doc_freq[t as usize] += 1;
            }
        }
        let n = pairs.len() as f64;
        let vectors = counts
            .iter()
            .map(|tf| {
                SparseVector(
                    tf.iter()
                        .map(|(&t, &c)| (t, c as f64 * (n / doc_freq[t as usize] as f64).ln()))
                        .filter(|(_, w)| *w != 0.0)
                        .collect(),
                )
            })
            .collect();
        let (attractive, unattractive) = (0..pairs.len()).partition(|&i| pairs[i].attractive());
        Ok(Self { version: INDEX_VERSION, terms, doc_freq, pairs: pairs.to_vec(), vectors, attractive, unattractive })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn vector(&self, i: usize) -> &SparseVector {
        &self.vectors[i]
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.terms.get(term).map(|&t| self.doc_freq[t as usize])
    }

    pub fn term_id(&self, term: &str) -> Option<u32> {
        self.terms.get(term).copied()
    }

    pub fn attractive_pool(&self) -> &[usize] {
        &self.attractive
    }

    pub fn unattractive_pool(&self) -> &[usize] {
        &self.unattractive
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.pairs.iter().position(|p| p.id == id)
    }

    /// TF-IDF vector of arbitrary tokens under this index's statistics;
    /// unseen terms are ignored.
    pub fn vectorize<'a>(&self, tokens: impl IntoIterator<Item = &'a String>) -> SparseVector {
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for t in tokens {
            if let Some(&id) = self.terms.get(t) {
                *tf.entry(id).or_insert(0) += 1;
            }
        }
        let n = self.pairs.len() as f64;
        SparseVector(
            tf.into_iter()
                .map(|(t, c)| (t, c as f64 * (n / self.doc_freq[t as usize] as f64).ln()))
                .filter(|(_, w)| *w != 0.0)
                .collect(),
        )
    }

    /// Index position of the best match for `query`, skipping `exclude`.
    /// Ties go to the smallest id.
    pub fn best_match(&self, query: &SparseVector, exclude: Option<&str>) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.pairs.iter().enumerate() {
            if exclude == Some(p.id.as_str()) {
                continue;
            }
            let s = similarity(query, &self.vectors[i]);
            best = match best {
                Some((j, bs)) if bs > s || (bs == s && self.pairs[j].id <= p.id) => Some((j, bs)),
                _ => Some((i, s)),
            };
        }
        best.map(|(i, _)| i).ok_or_else(|| Error::NoCandidates(exclude.unwrap_or_default().to_owned()))
    }

    /// Most similar training pair to `query`, never the query itself.
    pub fn retrieve_prototype(&self, query: &Pair) -> Result<&Pair> {
        let v = self.vectorize(pair_text(query));
        Ok(&self.pairs[self.best_match(&v, Some(&query.id))?])
    }

    /// Prototype retrieval for an input whose headline is not known yet.
    pub fn retrieve_prototype_for_document(&self, id: &str, document: &[String]) -> Result<&Pair> {
        let v = self.vectorize(document);
        Ok(&self.pairs[self.best_match(&v, Some(id))?])
    }

    /// Most similar other pair to an indexed prototype.
    pub fn retrieve_similar_document(&self, proto: &Pair) -> Result<&Pair> {
        let v = match self.position(&proto.id) {
            Some(i) => self.vectors[i].clone(),
            None => self.vectorize(pair_text(proto)),
        };
        Ok(&self.pairs[self.best_match(&v, Some(&proto.id))?])
    }

    /// Uniform draws of an attractive headline, an unattractive headline and
    /// a random document other than `prototype_id`.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, prototype_id: &str, rng: &mut R) -> Result<Negatives<'_>> {
        if self.attractive.is_empty() {
            return Err(Error::EmptyPool("attractive"));
        }
        if self.unattractive.is_empty() {
            return Err(Error::EmptyPool("unattractive"));
        }
        let attractive = &self.pairs[self.attractive[rng.gen_range(0..self.attractive.len())]];
        let unattractive = &self.pairs[self.unattractive[rng.gen_range(0..self.unattractive.len())]];
        let excluded = self.position(prototype_id);
        let n = self.pairs.len() - usize::from(excluded.is_some());
        if n == 0 {
            return Err(Error::NoCandidates(prototype_id.to_owned()));
        }
        let mut k = rng.gen_range(0..n);
        if let Some(e) = excluded {
            if k >= e {
                k += 1;
            }
        }
        Ok(Negatives { attractive, unattractive, random_doc: &self.pairs[k] })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(crate::error::at(path))?;
        let probe: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != INDEX_VERSION {
            return Err(Error::Version { what: "index", found, expected: INDEX_VERSION });
        }
        Ok(serde_json::from_value(probe)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Negatives<'a> {
    pub attractive: &'a Pair,
    pub unattractive: &'a Pair,
    pub random_doc: &'a Pair,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(id: &str, doc: &str, comments: u64) -> Pair {
        Pair::new(id, doc, "h", comments).unwrap()
    }

    #[test]
    fn shared_terms_vanish() {
        let idx = TfIdfIndex::build(&[pair("a", "x y", 30), pair("b", "y x", 1)]).unwrap();
        assert!(idx.vector(0).is_empty() && idx.vector(1).is_empty());
        assert!(TfIdfIndex::build(&[]).is_err());
    }

    #[test]
    fn hand_computed_weight() {
        let idx = TfIdfIndex::build(&[pair("a", "x x x", 30), pair("b", "y", 1)]).unwrap();
        let x = idx.term_id("x").unwrap();
        let w = idx.vector(0).entries().iter().find(|e| e.0 == x).unwrap().1;
        assert!((w - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(idx.doc_freq("h"), Some(2));
    }

    #[test]
    fn similarity_basics() {
        let a = SparseVector(vec![(0, 1.0), (2, 2.0)]);
        let b = SparseVector(vec![(1, 5.0), (3, 1.0)]);
        assert_eq!(similarity(&a, &b), 0.0);
        assert_eq!(similarity(&a, &a), 5.0);
    }

    #[test]
    fn retrieval_excludes_self_and_breaks_ties_by_id() {
        let pairs = vec![pair("d1", "p q", 30), pair("d2", "r s", 30), pair("d3", "r s", 1), pair("d7", "z w", 1)];
        let idx = TfIdfIndex::build(&pairs).unwrap();
        let q = pair("query", "z", 30);
        assert_eq!(idx.retrieve_prototype(&q).unwrap().id, "d7");
        assert_eq!(idx.retrieve_prototype(&pairs[1]).unwrap().id, "d3");
        assert_eq!(idx.retrieve_similar_document(&pairs[2]).unwrap().id, "d2");
        let q = pair("q", "r s", 30);
        assert_eq!(idx.retrieve_prototype(&q).unwrap().id, "d2");
        let single = TfIdfIndex::build(&[pair("only", "a", 30)]).unwrap();
        assert!(matches!(single.retrieve_similar_document(&single.pairs()[0]), Err(Error::NoCandidates(_))));
    }

    #[test]
    fn negatives_are_seeded_and_exclude_prototype() {
        let pairs = vec![pair("a", "x", 30), pair("b", "y", 1), pair("c", "z", 5)];
        let idx = TfIdfIndex::build(&pairs).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = idx.sample_negatives("a", &mut rng).unwrap();
            (n.attractive.id.clone(), n.unattractive.id.clone(), n.random_doc.id.clone())
        };
        assert_eq!(draw(4), draw(4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = idx.sample_negatives("a", &mut rng).unwrap();
            assert_eq!(n.attractive.id, "a");
            assert_ne!(n.random_doc.id, "a");
        }
        let no_neg = TfIdfIndex::build(&[pair("a", "x", 30)]).unwrap();
        assert!(matches!(no_neg.sample_negatives("a", &mut rng), Err(Error::EmptyPool("unattractive"))));
    }

    #[test]
    fn save_load_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.json");
        let idx = TfIdfIndex::build(&[pair("a", "x y", 30), pair("b", "y", 1)]).unwrap();
        idx.save(&path).unwrap();
        assert_eq!(TfIdfIndex::load(&path).unwrap(), idx);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v["version"] = 99.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(TfIdfIndex::load(&path), Err(Error::Version { found: 99, .. })));
    }
}
