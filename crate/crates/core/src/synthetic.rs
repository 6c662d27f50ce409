//! Seeded toy corpora for desk-scale runs, demos and tests.
//!
//! Content is carried by token identity (each topic owns a block of words);
//! style is carried by a surface marker appended to the headline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Pair, ATTRACTIVE_COMMENTS};

/// Marker closing attractive headlines.
pub const ATTRACTIVE_MARKER: [&str; 2] = ["!", "wow"];
/// Marker closing unattractive headlines.
pub const PLAIN_MARKER: [&str; 2] = [".", "report"];

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub doc_len: usize,
    /// Topic words in the headline, before the style marker.
    pub headline_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { pairs: 200, topics: 8, words_per_topic: 6, doc_len: 16, headline_words: 4, seed: 7 }
    }
}

fn word(topic: usize, k: usize) -> String {
    format!("t{topic}w{k}")
}

const FILLER: [&str; 6] = ["the", "of", "and", "in", "on", "said"];

/// Pairs alternate attractive / unattractive; documents mix topic words
/// with shared filler and a sentence terminator after the first half.
pub fn style_marker_corpus(spec: SyntheticSpec) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.pairs)
        .map(|i| {
            let topic = rng.gen_range(0..spec.topics);
            let attractive = i % 2 == 0;
            let mut document = Vec::with_capacity(spec.doc_len + 1);
            for t in 0..spec.doc_len {
                if t == spec.doc_len / 2 {
                    document.push(".".to_owned());
                }
                if rng.gen_bool(0.7) {
                    document.push(word(topic, rng.gen_range(0..spec.words_per_topic)));
                } else {
                    document.push((*FILLER.choose(&mut rng).expect("non-empty")).to_owned());
                }
            }
            let mut headline: Vec<String> =
                (0..spec.headline_words).map(|_| word(topic, rng.gen_range(0..spec.words_per_topic))).collect();
            let marker = if attractive { ATTRACTIVE_MARKER } else { PLAIN_MARKER };
            headline.extend(marker.iter().map(|s| s.to_string()));
            let comment_count = if attractive {
                ATTRACTIVE_COMMENTS + 1 + rng.gen_range(0..50)
            } else {
                rng.gen_range(0..=ATTRACTIVE_COMMENTS)
            };
            Pair { id: format!("s{i:05}"), document, headline, comment_count }
        })
        .collect()
}

/// Whether a headline carries the attractive marker.
pub fn has_attractive_marker(headline: &[String]) -> bool {
    headline.len() >= 2 && headline[headline.len() - 2..] == ATTRACTIVE_MARKER
}

/// Ten pairs whose headlines are 10 to 12 tokens long, for overfitting runs.
/// Each headline copies a run of its own document so both generation and
/// copy paths can reach it.
pub fn memorization_fixture() -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..10)
        .map(|i| {
            let len = 10 + i % 3;
            let document: Vec<String> = (0..14).map(|k| word(i, k)).collect();
            let start = rng.gen_range(0..=document.len() - len);
            let headline = document[start..start + len].to_vec();
            let comment_count = if i % 2 == 0 { 40 } else { 3 };
            Pair { id: format!("m{i:02}"), document, headline, comment_count }
        })
        .collect()
}

/// The 50-pair smoke-test corpus.
pub fn desk_fixture() -> Vec<Pair> {
    style_marker_corpus(SyntheticSpec { pairs: 50, topics: 5, doc_len: 12, seed: 3, ..SyntheticSpec::default() })
}
