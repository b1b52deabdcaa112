//! Deterministic synthetic text: a small mixed prose/numeric corpus and
//! matched stimulus sets. Used by the test suites and handy for demo runs;
//! any real text files work just as well for training.

use crate::analysis::StimulusSet;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "it", "was", "is", "that", "on", "with", "as", "for",
    "but", "at", "by", "from", "they", "we", "she", "he", "you", "this", "had", "not", "are",
    "or", "her", "his", "an", "were", "been", "have", "their", "one", "all", "would", "there",
    "what", "so", "out", "up", "if", "about", "who", "get", "which", "when", "make", "can",
    "like", "time", "just", "him", "know", "take", "people", "into", "year", "your", "good",
    "some", "could", "them", "see", "other", "than", "then", "now", "look", "only", "come",
    "its", "over", "think", "also", "back", "after", "use", "two", "how", "our", "work",
    "first", "well", "way", "even", "new", "want", "because", "any", "these", "give", "day",
    "most", "us", "water", "long", "little", "very", "still", "old", "say", "under", "might",
    "house", "keep", "tree", "river", "stone", "light", "night", "morning", "hand", "eye",
    "word", "letter", "sound", "story", "garden", "road", "wind", "rain", "bird", "field",
];

fn word_sampler(rng: &mut ChaCha12Rng) -> impl FnMut(&mut ChaCha12Rng) -> &'static str {
    // Zipf-ish weights over the fixed list
    let weights: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i as f64 + 1.5)).collect();
    let dist = WeightedIndex::new(&weights).expect("weights are positive");
    let _ = rng;
    move |rng: &mut ChaCha12Rng| WORDS[dist.sample(rng)]
}

fn word_sentence(rng: &mut ChaCha12Rng, sample: &mut impl FnMut(&mut ChaCha12Rng) -> &'static str) -> String {
    let len = rng.random_range(5..=12);
    let words: Vec<&str> = (0..len).map(|_| sample(rng)).collect();
    format!("{}.", words.join(" "))
}

fn digit_run(rng: &mut ChaCha12Rng) -> String {
    let groups = rng.random_range(3..=8);
    let parts: Vec<String> = (0..groups)
        .map(|_| {
            let digits = rng.random_range(1..=4);
            (0..digits).map(|_| char::from(b'0' + rng.random_range(0..10))).collect()
        })
        .collect();
    format!("{}.", parts.join(" "))
}

/// Mixed prose and digit-run text of roughly `target_bytes` bytes.
/// About a quarter of the sentences are numeric.
pub fn corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sample = word_sampler(&mut rng);
    let mut out = String::with_capacity(target_bytes + 128);
    while out.len() < target_bytes {
        let sentence = if rng.random_range(0..4) == 0 {
            digit_run(&mut rng)
        } else {
            word_sentence(&mut rng, &mut sample)
        };
        out.push_str(&sentence);
        out.push(if rng.random_range(0..12) == 0 { '\n' } else { ' ' });
    }
    out
}

/// Two-condition contrast set: digit-heavy strings vs word sentences,
/// labeled `digits` and `letters`.
pub fn contrast_stimuli(seed: u64, per_condition: usize) -> StimulusSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sample = word_sampler(&mut rng);
    let mut items = Vec::with_capacity(2 * per_condition);
    for _ in 0..per_condition {
        items.push(("digits".to_string(), digit_run(&mut rng)));
        items.push(("letters".to_string(), word_sentence(&mut rng, &mut sample)));
    }
    StimulusSet::from_items(items)
}

fn nonword(rng: &mut ChaCha12Rng) -> String {
    let len = rng.random_range(3..=8);
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26))).collect()
}

/// Localizer-style set: word sentences vs length-matched strings of random
/// letters, labeled `sentences` and `nonwords`.
pub fn localizer_stimuli(seed: u64, per_condition: usize) -> StimulusSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sample = word_sampler(&mut rng);
    let mut items = Vec::with_capacity(2 * per_condition);
    for _ in 0..per_condition {
        items.push(("sentences".to_string(), word_sentence(&mut rng, &mut sample)));
        let words = rng.random_range(5..=12);
        let junk: Vec<String> = (0..words).map(|_| nonword(&mut rng)).collect();
        items.push(("nonwords".to_string(), format!("{}.", junk.join(" "))));
    }
    StimulusSet::from_items(items)
}
