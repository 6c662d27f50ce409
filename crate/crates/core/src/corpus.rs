//! Document/headline corpora, vocabulary, and padded batches with
//! extended-vocabulary ids for copying.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Comment count above which a headline counts as attractive.
pub const ATTRACTIVE_COMMENTS: u64 = 20;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const STOP: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Splits pre-segmented text on whitespace. Unsegmented text containing CJK
/// characters falls back to one token per character.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyText);
    }
    if trimmed.contains(char::is_whitespace) || !trimmed.chars().any(is_cjk) {
        return Ok(trimmed.split_whitespace().map(str::to_owned).collect());
    }
    Ok(trimmed.chars().map(String::from).collect())
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F | 0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF | 0xFF00..=0xFFEF | 0x20000..=0x2FA1F)
}

/// One line of a JSONL corpus file. Attractiveness is derived from the
/// comment count and never stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub document: String,
    pub headline: String,
    #[serde(default)]
    pub comment_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub document: Vec<String>,
    pub headline: Vec<String>,
    pub comment_count: u64,
}

impl Pair {
    pub fn new(id: impl Into<String>, document: &str, headline: &str, comment_count: u64) -> Result<Self> {
        let id = id.into();
        let invalid = |what: &str| Error::InvalidPair { id: id.clone(), reason: format!("empty {what}") };
        let document = tokenize(document).map_err(|_| invalid("document"))?;
        let headline = tokenize(headline).map_err(|_| invalid("headline"))?;
        Ok(Self { id, document, headline, comment_count })
    }

    pub fn attractive(&self) -> bool {
        self.comment_count > ATTRACTIVE_COMMENTS
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            id: self.id.clone(),
            document: self.document.join(" "),
            headline: self.headline.join(" "),
            comment_count: self.comment_count,
        }
    }
}

impl TryFrom<PairRecord> for Pair {
    type Error = Error;

    fn try_from(r: PairRecord) -> Result<Self> {
        Pair::new(r.id, &r.document, &r.headline, r.comment_count)
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(crate::error::at(path))?);
    let mut pairs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { path: path.display().to_string(), line: n + 1, reason };
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        pairs.push(Pair::try_from(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(pairs)
}

pub fn write_jsonl(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, &p.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary over documents and headlines, ties broken
    /// lexicographically, with the four specials at ids 0..4.
    pub fn build(pairs: &[Pair], cap: usize) -> Result<Self> {
        if cap < SPECIALS.len() + 1 {
            return Err(Error::Config(format!("vocabulary cap {cap} must be at least 5")));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for p in pairs {
            for t in p.document.iter().chain(&p.headline) {
                if !SPECIALS.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(cap)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A token line encoded against the base vocabulary and the per-line
/// extended vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedEncoding {
    pub ids: Vec<usize>,
    pub extended_ids: Vec<usize>,
    pub oovs: Vec<String>,
}

/// In-vocabulary tokens keep their id; each distinct OOV token is numbered
/// `|V| + k` in order of first occurrence and is UNK in the base ids.
pub fn encode_extended(tokens: &[String], vocab: &Vocabulary) -> ExtendedEncoding {
    let mut ids = Vec::with_capacity(tokens.len());
    let mut extended_ids = Vec::with_capacity(tokens.len());
    let mut oovs: Vec<String> = Vec::new();
    for t in tokens {
        match vocab.id(t) {
            Some(id) => {
                ids.push(id);
                extended_ids.push(id);
            }
            None => {
                let k = oovs.iter().position(|o| o == t).unwrap_or_else(|| {
                    oovs.push(t.clone());
                    oovs.len() - 1
                });
                ids.push(UNK);
                extended_ids.push(vocab.len() + k);
            }
        }
    }
    ExtendedEncoding { ids, extended_ids, oovs }
}

/// Target-side encoding: OOV tokens present in the source OOV list get their
/// extended id, other OOVs become UNK.
pub fn encode_target(tokens: &[String], vocab: &Vocabulary, source_oovs: &[String]) -> (Vec<usize>, Vec<usize>) {
    tokens
        .iter()
        .map(|t| match vocab.id(t) {
            Some(id) => (id, id),
            None => match source_oovs.iter().position(|o| o == t) {
                Some(k) => (UNK, vocab.len() + k),
                None => (UNK, UNK),
            },
        })
        .unzip()
}

/// Inverse of [`encode_extended`]; ids beyond the known range map to `<unk>`.
pub fn decode_extended(ids: &[usize], vocab: &Vocabulary, oovs: &[String]) -> Vec<String> {
    ids.iter()
        .map(|&id| {
            vocab
                .token(id)
                .or_else(|| id.checked_sub(vocab.len()).and_then(|k| oovs.get(k)).map(String::as_str))
                .unwrap_or(SPECIALS[UNK])
                .to_owned()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub doc: usize,
    pub proto: usize,
    pub headline: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { doc: 400, proto: 30, headline: 30 }
    }
}

/// Row-major `[rows x cols]` id matrix padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl PaddedIds {
    /// Truncates every row to `cols` (keeping the prefix) and right-pads.
    pub fn from_rows(rows: &[Vec<usize>], cols: usize) -> Self {
        let mut ids = vec![PAD; rows.len() * cols];
        let mut lengths = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let n = row.len().min(cols);
            ids[r * cols..r * cols + n].copy_from_slice(&row[..n]);
            lengths.push(n);
        }
        Self { ids, lengths, rows: rows.len(), cols }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Unpadded prefix of row `r`.
    pub fn valid(&self, r: usize) -> &[usize] {
        &self.row(r)[..self.lengths[r]]
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.rows * self.cols).map(|i| i % self.cols < self.lengths[i / self.cols]).collect()
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> PaddedIds {
        let cols = self.lengths.iter().copied().max().unwrap_or(0);
        let rows: Vec<Vec<usize>> = (0..self.rows).map(|r| self.valid(r).to_vec()).collect();
        PaddedIds::from_rows(&rows, cols)
    }

    /// Row-wise concatenation of several matrices with the same width.
    pub fn stack(parts: &[&PaddedIds]) -> PaddedIds {
        let cols = parts.iter().map(|p| p.cols).max().unwrap_or(0);
        let rows: Vec<Vec<usize>> = parts.iter().flat_map(|p| (0..p.rows).map(|r| p.valid(r).to_vec())).collect();
        PaddedIds::from_rows(&rows, cols)
    }
}

/// A training or inference example with its retrieval links resolved.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub pair: &'a Pair,
    pub prototype: &'a Pair,
    pub similar: &'a Pair,
    pub attractive: &'a Pair,
    pub unattractive: &'a Pair,
    pub random_doc: &'a Pair,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub doc: PaddedIds,
    pub doc_extended: PaddedIds,
    pub doc_oovs: Vec<Vec<String>>,
    pub proto_doc: PaddedIds,
    pub proto_headline: PaddedIds,
    pub similar_doc: PaddedIds,
    pub random_doc: PaddedIds,
    pub attractive_headline: PaddedIds,
    pub unattractive_headline: PaddedIds,
    pub target: PaddedIds,
    pub target_extended: PaddedIds,
    pub proto_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Widest extended-vocabulary OOV list in the batch.
    pub fn max_oovs(&self) -> usize {
        self.doc_oovs.iter().map(Vec::len).max().unwrap_or(0)
    }
}

pub fn make_batch(examples: &[Example<'_>], vocab: &Vocabulary, limits: Limits) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let base = |tokens: &[String]| tokens.iter().map(|t| vocab.id_or_unk(t)).collect::<Vec<_>>();
    let mut doc = Vec::new();
    let mut doc_ext = Vec::new();
    let mut doc_oovs = Vec::new();
    let mut target = Vec::new();
    let mut target_ext = Vec::new();
    for ex in examples {
        let kept = &ex.pair.document[..ex.pair.document.len().min(limits.doc)];
        let enc = encode_extended(kept, vocab);
        let head = &ex.pair.headline[..ex.pair.headline.len().min(limits.headline)];
        let (t, te) = encode_target(head, vocab, &enc.oovs);
        doc.push(enc.ids);
        doc_ext.push(enc.extended_ids);
        doc_oovs.push(enc.oovs);
        target.push(t);
        target_ext.push(te);
    }
    let docs = |f: for<'x> fn(&'x Example<'x>) -> &'x Pair| -> PaddedIds {
        let rows: Vec<_> = examples.iter().map(|e| base(&f(e).document)).collect();
        PaddedIds::from_rows(&rows, limits.doc)
    };
    let heads = |f: for<'x> fn(&'x Example<'x>) -> &'x Pair| -> PaddedIds {
        let rows: Vec<_> = examples.iter().map(|e| base(&f(e).headline)).collect();
        PaddedIds::from_rows(&rows, limits.proto)
    };
    Ok(Batch {
        ids: examples.iter().map(|e| e.pair.id.clone()).collect(),
        doc: PaddedIds::from_rows(&doc, limits.doc),
        doc_extended: PaddedIds::from_rows(&doc_ext, limits.doc),
        doc_oovs,
        proto_doc: docs(|e| e.prototype),
        proto_headline: heads(|e| e.prototype),
        similar_doc: docs(|e| e.similar),
        random_doc: docs(|e| e.random_doc),
        attractive_headline: heads(|e| e.attractive),
        unattractive_headline: heads(|e| e.unattractive),
        target: PaddedIds::from_rows(&target, limits.headline),
        target_extended: PaddedIds::from_rows(&target_ext, limits.headline),
        proto_ids: examples.iter().map(|e| e.prototype.id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("a b c").unwrap(), toks("a b c"));
        assert!(matches!(tokenize(""), Err(Error::EmptyText)));
        assert!(matches!(tokenize("   "), Err(Error::EmptyText)));
        assert_eq!(tokenize("今天天气").unwrap(), vec!["今", "天", "天", "气"]);
        assert_eq!(tokenize("hello").unwrap(), vec!["hello"]);
        assert_eq!(tokenize("今天 天气").unwrap(), vec!["今天", "天气"]);
    }

    #[test]
    fn attractiveness_is_derived() {
        assert!(!Pair::new("a", "x", "y", 20).unwrap().attractive());
        assert!(Pair::new("a", "x", "y", 21).unwrap().attractive());
        assert!(Pair::new("a", "", "y", 21).is_err());
        assert!(Pair::new("a", "x", " ", 21).is_err());
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_lexicographically() {
        let p = Pair::new("1", "a a b", "a", 0).unwrap();
        let v = Vocabulary::build(&[p], 6).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<s>", "</s>", "a", "b"]);
        let p = Pair::new("1", "b a b", "a", 0).unwrap();
        let v = Vocabulary::build(&[p], 5).unwrap();
        assert_eq!(v.tokens().last().unwrap(), "a");
        assert_eq!(v.id("b"), None);
        assert!(Vocabulary::build(&[], 10).is_err());
        assert!(Vocabulary::build(&[Pair::new("1", "a", "a", 0).unwrap()], 4).is_err());
    }

    #[test]
    fn extended_encoding_numbers_oovs_by_first_occurrence() {
        let p = Pair::new("1", "x y z", "x", 0).unwrap();
        let v = Vocabulary::build(&[p], 10).unwrap();
        let e = encode_extended(&toks("x y"), &v);
        assert_eq!(e.ids, e.extended_ids);
        assert!(e.oovs.is_empty());
        let e = encode_extended(&toks("x q q r"), &v);
        let n = v.len();
        assert_eq!(e.extended_ids, vec![v.id("x").unwrap(), n, n, n + 1]);
        assert_eq!(e.ids, vec![v.id("x").unwrap(), UNK, UNK, UNK]);
        assert_eq!(e.oovs, toks("q r"));
        let (t, te) = encode_target(&toks("r x w"), &v, &e.oovs);
        assert_eq!(t, vec![UNK, v.id("x").unwrap(), UNK]);
        assert_eq!(te, vec![n + 1, v.id("x").unwrap(), UNK]);
    }

    #[test]
    fn batch_truncates_and_pads() {
        let long: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let long = Pair::new("long", &long.join(" "), "h", 30).unwrap();
        let short = Pair::new("short", &(0..10).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "), "h", 3).unwrap();
        let v = Vocabulary::build(&[long.clone(), short.clone()], 1000).unwrap();
        let ex = |p| Example { pair: p, prototype: p, similar: p, attractive: &long, unattractive: &short, random_doc: p };
        let b = make_batch(&[ex(&long), ex(&short)], &v, Limits::default()).unwrap();
        assert_eq!(b.doc.cols, 400);
        assert_eq!(b.doc.valid(0), &long.document[..400].iter().map(|t| v.id(t).unwrap()).collect::<Vec<_>>()[..]);
        assert_eq!(b.doc.lengths[1], 10);
        assert_eq!(b.doc.mask()[400..800].iter().filter(|m| **m).count(), 10);
        assert_eq!(b.doc.row(1)[10..].iter().filter(|&&i| i == PAD).count(), 390);
        assert_eq!(b.proto_headline.cols, 30);
        assert!(matches!(make_batch(&[], &v, Limits::default()), Err(Error::EmptyBatch)));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let pairs = vec![Pair::new("a", "x y", "z", 25).unwrap(), Pair::new("b", "今天", "好", 1).unwrap()];
        write_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("attractive"));
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }

    proptest! {
        #[test]
        fn extended_round_trip(line in proptest::collection::vec("[a-f]{1,2}", 1..30)) {
            let corpus = Pair::new("v", "a b c d e", "a", 0).unwrap();
            let v = Vocabulary::build(&[corpus], 7).unwrap();
            let e = encode_extended(&line, &v);
            prop_assert_eq!(decode_extended(&e.extended_ids, &v, &e.oovs), line.clone());
            for (b, x) in e.ids.iter().zip(&e.extended_ids) {
                prop_assert!(*x < v.len() + e.oovs.len());
                prop_assert_eq!(*b == UNK && *x >= v.len(), *x >= v.len());
            }
        }

        #[test]
        fn mask_sum_matches_lengths(lens in proptest::collection::vec(0usize..12, 1..6), cols in 1usize..10) {
            let rows: Vec<Vec<usize>> = lens.iter().map(|&n| vec![5; n]).collect();
            let p = PaddedIds::from_rows(&rows, cols);
            let mask = p.mask();
            for (r, &n) in lens.iter().enumerate() {
                let s = mask[r * cols..(r + 1) * cols].iter().filter(|m| **m).count();
                prop_assert_eq!(s, n.min(cols));
                prop_assert_eq!(p.valid(r), &rows[r][..n.min(cols)]);
            }
        }
    }
}
