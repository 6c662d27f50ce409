//! ROUGE-N, ROUGE-L and corpus BLEU over token sequences, plus corpus
//! evaluation of a trained model against references.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Limits, Pair, Vocabulary};
use crate::error::Result;
use crate::generator::BeamConfig;
use crate::model::Dahg;
use crate::retrieval::TfIdfIndex;

/// Precision, recall and F1 of one comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, cand: usize, reference: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { hits as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { hits as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Multiset of the `n`-grams of `tokens`.
pub fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap `sum min(count_cand, count_ref)`.
fn clipped_overlap<T: Eq + Hash>(cand: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    cand.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let cand = ngrams(candidate, n);
    let refs = ngrams(reference, n);
    let hits = clipped_overlap(&cand, &refs);
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    Prf::from_counts(hits, total(&cand), total(&refs))
}

/// Longest common subsequence length, O(|a| |b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub bleu: f64,
    /// Modified n-gram precisions `p_1..p_max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Corpus BLEU without smoothing: any zero precision gives 0.
pub fn bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(candidates: &[C], references: &[R], max_n: usize) -> Bleu {
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    let mut hits = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let cg = ngrams(cand, n);
            hits[n - 1] += clipped_overlap(&cg, &ngrams(reference, n));
            totals[n - 1] += cg.values().sum::<usize>();
        }
    }
    let precisions: Vec<f64> =
        hits.iter().zip(&totals).map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 }).collect();
    let brevity_penalty = if c_len == 0 { 0.0 } else { (1.0 - r_len as f64 / c_len as f64).exp().min(1.0) };
    let bleu = if max_n == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Bleu { bleu, precisions, brevity_penalty, candidate_len: c_len, reference_len: r_len }
}

const SENTENCE_END: [&str; 8] = [".", "!", "?", "。", "！", "？", "…", ";"];

/// The Lead baseline: source tokens up to and including the first sentence
/// terminator, capped at `max_len`.
pub fn lead(document: &[String], max_len: usize) -> Vec<String> {
    let end = document.iter().position(|t| SENTENCE_END.contains(&t.as_str())).map_or(document.len(), |i| i + 1);
    document[..end.min(max_len)].to_vec()
}

/// Scores of one generated headline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub system: String,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub headline: String,
    pub reference: String,
}

/// Corpus averages for one system; ROUGE values are mean F1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub examples: usize,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub examples: Vec<ExampleScore>,
    pub summaries: Vec<SystemSummary>,
}

/// Scores `(id, candidate, reference)` triples as one system.
pub fn score_system(system: &str, rows: &[(String, Vec<String>, Vec<String>)]) -> (Vec<ExampleScore>, SystemSummary) {
    let mut examples = Vec::with_capacity(rows.len());
    for (id, cand, reference) in rows {
        examples.push(ExampleScore {
            id: id.clone(),
            system: system.to_owned(),
            rouge_1: rouge_n(cand, reference, 1).f1,
            rouge_2: rouge_n(cand, reference, 2).f1,
            rouge_l: rouge_l(cand, reference).f1,
            headline: cand.join(" "),
            reference: reference.join(" "),
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ExampleScore) -> f64| examples.iter().map(f).sum::<f64>() / n;
    let cands: Vec<&[String]> = rows.iter().map(|r| r.1.as_slice()).collect();
    let refs: Vec<&[String]> = rows.iter().map(|r| r.2.as_slice()).collect();
    let b = bleu(&cands, &refs, 4);
    let summary = SystemSummary {
        system: system.to_owned(),
        examples: rows.len(),
        rouge_1: mean(|e| e.rouge_1),
        rouge_2: mean(|e| e.rouge_2),
        rouge_l: mean(|e| e.rouge_l),
        bleu: b.bleu,
        bleu_1: b.precisions[0],
        bleu_2: b.precisions[1],
        bleu_3: b.precisions[2],
        bleu_4: b.precisions[3],
    };
    (examples, summary)
}

impl Report {
    pub fn add_system(&mut self, system: &str, rows: &[(String, Vec<String>, Vec<String>)]) {
        let (examples, summary) = score_system(system, rows);
        self.examples.extend(examples);
        self.summaries.push(summary);
    }

    pub fn summary(&self, system: &str) -> Option<&SystemSummary> {
        self.summaries.iter().find(|s| s.system == system)
    }

    /// Per-example CSV and a pretty JSON summary.
    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        for e in &self.examples {
            w.serialize(e)?;
        }
        w.flush()?;
        std::fs::write(json_path, serde_json::to_string_pretty(&self.summaries)?)?;
        Ok(())
    }
}

/// Decodes every test pair against prototypes from the training index and
/// scores the model next to the Lead baseline.
pub fn evaluate(
    model: &Dahg,
    vocab: &Vocabulary,
    index: &TfIdfIndex,
    test: &[Pair],
    limits: Limits,
    beam: BeamConfig,
) -> Result<Report> {
    let mut rows = Vec::with_capacity(test.len());
    for p in test {
        let out = model.generate(vocab, index, &p.id, &p.document, limits, beam)?;
        rows.push((p.id.clone(), out.tokens, p.headline.clone()));
    }
    let mut report = Report::default();
    report.add_system("dahg", &rows);
    report.add_system("lead", &lead_rows(test, limits.headline));
    Ok(report)
}

pub fn lead_rows(test: &[Pair], max_len: usize) -> Vec<(String, Vec<String>, Vec<String>)> {
    test.iter().map(|p| (p.id.clone(), lead(&p.document, max_len), p.headline.clone())).collect()
}

/// Logistic-regression probe fit by full-batch gradient descent on the first
/// `train` rows and scored on the rest. Features are standardised with the
/// training rows' statistics. Returns held-out accuracy.
pub fn linear_probe(features: &[Vec<f64>], labels: &[bool], train: usize, epochs: usize) -> f64 {
    assert_eq!(features.len(), labels.len());
    assert!(train > 0 && train < features.len(), "need rows on both sides of the split");
    let dim = features[0].len();
    let n = train as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features[..train].iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (features[..train].iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let x: Vec<Vec<f64>> =
        features.iter().map(|f| f.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect()).collect();
    let logit = |w: &[f64], b: f64, row: &[f64]| b + w.iter().zip(row).map(|(a, c)| a * c).sum::<f64>();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..epochs {
        let (mut gw, mut gb) = (vec![0.0; dim], 0.0);
        for (row, &y) in x[..train].iter().zip(labels) {
            let err = 1.0 / (1.0 + (-logit(&w, b, row)).exp()) - f64::from(u8::from(y));
            gb += err;
            for (g, v) in gw.iter_mut().zip(row) {
                *g += err * v;
            }
        }
        b -= 0.5 * gb / n;
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= 0.5 * (g / n + 1e-3 * *wj);
        }
    }
    let held = &x[train..];
    let correct = held.iter().zip(&labels[train..]).filter(|(row, &y)| (logit(&w, b, row) > 0.0) == y).count();
    correct as f64 / held.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_one_prefix_case() {
        let r = rouge_n(&toks("the cat"), &toks("the cat sat"), 1);
        assert_eq!(r.precision, 1.0);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rouge_edges() {
        let empty: [&str; 0] = [];
        assert_eq!(rouge_n(&empty, &toks("a b"), 1), Prf::default());
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 1).f1, 0.0);
        assert_eq!(rouge_n(&toks("a b c"), &toks("a b c"), 2).f1, 1.0);
        // clipping: repeated candidate token counts once per reference copy
        let r = rouge_n(&toks("a a a"), &toks("a b"), 1);
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_cases() {
        let r = rouge_l(&toks("a b c"), &toks("a x c"));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a c"), &toks("a b c")).precision, 1.0);
        assert_eq!(lcs_len(&toks("a b c b d a b"), &toks("b d c a b a")), 4);
    }

    #[test]
    fn bleu_cases() {
        let c = [toks("a b c d e f")];
        assert_eq!(bleu(&c, &c, 4).bleu, 1.0);
        let half = [toks("a b c d")];
        let full = [toks("a b c d a b c d")];
        let b = bleu(&half, &full, 4);
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!((b.bleu - (-1.0f64).exp()).abs() < 1e-12);
        let b = bleu(&[toks("a b x y")], &[toks("a b c d")], 4);
        assert_eq!(b.bleu, 0.0);
        assert_eq!(b.precisions[0], 0.5);
    }

    #[test]
    fn probe_separates_shifted_clusters() {
        let features: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f64 * 0.37).sin()]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        assert_eq!(linear_probe(&features, &labels, 20, 200), 1.0);
    }

    #[test]
    fn lead_takes_first_sentence() {
        let doc: Vec<String> = toks("x y . z w .").iter().map(|s| s.to_string()).collect();
        assert_eq!(lead(&doc, 30), vec!["x", "y", "."]);
        assert_eq!(lead(&doc, 2), vec!["x", "y"]);
    }
}
