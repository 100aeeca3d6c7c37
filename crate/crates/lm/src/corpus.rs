use std::path::Path;

use lavo::rng::RngState;

use crate::{LmError, Result};

/// Raw training bytes with a held-out tail and a seeded batch sampler.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    bytes: Vec<u8>,
    train_end: usize,
    rng: RngState,
}

/// Share of the corpus kept out of training.
pub const HELD_OUT_FRACTION: f64 = 0.1;

/// Sampler stream index, kept apart from the streams used for weights.
const SAMPLER_STREAM: u64 = 4096;

impl CorpusStream {
    pub fn from_bytes(bytes: Vec<u8>, seed: u64) -> Self {
        let train_end = bytes.len() - (bytes.len() as f64 * HELD_OUT_FRACTION).ceil() as usize;
        Self { bytes, train_end, rng: RngState::stream(seed, SAMPLER_STREAM) }
    }

    /// Concatenation of the given files, in order.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], seed: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        for p in paths {
            let p = p.as_ref();
            bytes.extend(std::fs::read(p).map_err(|source| LmError::Io { path: p.to_path_buf(), source })?);
        }
        Ok(Self::from_bytes(bytes, seed))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[..self.train_end]
    }

    pub fn held_out_bytes(&self) -> &[u8] {
        &self.bytes[self.train_end..]
    }

    /// `batch` random windows of the training part: inputs are `ctx` bytes,
    /// targets the same window shifted by one.
    pub fn sample_batch(&mut self, batch: usize, ctx: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let train = &self.bytes[..self.train_end];
        if train.len() < ctx + 1 {
            return Err(LmError::Data(format!("training split of {} bytes is shorter than ctx + 1 = {}", train.len(), ctx + 1)));
        }
        let starts = train.len() - ctx;
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = self.rng.below(starts);
            inputs.push(train[s..s + ctx].iter().map(|&b| b as usize).collect());
            targets.push(train[s + 1..s + ctx + 1].iter().map(|&b| b as usize).collect());
        }
        Ok((inputs, targets))
    }
}

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "no", "her", "his", "their", "our"];
const ADJECTIVES: &[&str] = &[
    "old", "young", "quiet", "bright", "dark", "small", "large", "cold", "warm", "green", "heavy", "gentle", "strange",
    "narrow", "broad", "silent", "distant", "early", "late", "simple", "careful", "golden", "hollow", "ancient",
];
const NOUNS: &[&str] = &[
    "man", "woman", "child", "house", "river", "road", "tree", "door", "window", "letter", "garden", "village",
    "mountain", "ship", "horse", "king", "friend", "morning", "evening", "night", "fire", "stone", "field", "hand",
    "voice", "book", "table", "city", "sea", "wind", "light", "bridge", "forest", "winter", "summer", "doctor",
    "captain", "mother", "father", "stranger", "soldier", "lamp", "path", "wall", "bird", "heart", "story", "song",
];
const VERBS: &[&str] = &[
    "saw", "found", "left", "took", "held", "watched", "followed", "opened", "closed", "carried", "remembered",
    "heard", "crossed", "reached", "kept", "lost", "built", "painted", "loved", "feared", "answered", "called",
    "met", "passed", "wrote", "read",
];
const PREPOSITIONS: &[&str] =
    &["in", "on", "near", "behind", "across", "under", "beyond", "through", "toward", "beside", "after", "before"];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so", "when"];
const NAMES: &[&str] = &["Mary", "John", "Elinor", "Thomas", "Anne", "Henry", "Clara", "Walter"];

/// Zipf-like pick: lower indices are more frequent.
fn pick<'a>(rng: &mut RngState, words: &[&'a str]) -> &'a str {
    let u = rng.uniform();
    let i = ((words.len() as f64 + 1.0).powf(u) - 1.0) as usize;
    words[i.min(words.len() - 1)]
}

fn noun_phrase(rng: &mut RngState, out: &mut Vec<String>) {
    if rng.below(6) == 0 {
        out.push(pick(rng, NAMES).to_string());
        return;
    }
    out.push(pick(rng, DETERMINERS).to_string());
    if rng.below(2) == 0 {
        out.push(pick(rng, ADJECTIVES).to_string());
    }
    out.push(pick(rng, NOUNS).to_string());
}

fn clause(rng: &mut RngState, out: &mut Vec<String>) {
    noun_phrase(rng, out);
    out.push(pick(rng, VERBS).to_string());
    noun_phrase(rng, out);
    if rng.below(3) == 0 {
        out.push(pick(rng, PREPOSITIONS).to_string());
        noun_phrase(rng, out);
    }
}

/// Deterministic English-like prose: sentences from a small phrase grammar
/// over a fixed lexicon, grouped into paragraphs.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = RngState::new(seed);
    let mut text = String::with_capacity(len + 256);
    while text.len() < len {
        let sentences = 3 + rng.below(5);
        for s in 0..sentences {
            let mut words = Vec::new();
            clause(&mut rng, &mut words);
            if rng.below(3) == 0 {
                let last = words.pop().expect("clause is never empty");
                words.push(format!("{last},"));
                words.push(pick(&mut rng, CONNECTIVES).to_string());
                clause(&mut rng, &mut words);
            }
            let mut sentence = words.join(" ");
            if let Some(first) = sentence.get(0..1) {
                sentence.replace_range(0..1, &first.to_uppercase());
            }
            sentence.push(match rng.below(10) {
                0 => '?',
                1 => '!',
                _ => '.',
            });
            text.push_str(&sentence);
            if s + 1 < sentences {
                text.push(' ');
            }
        }
        text.push_str("\n\n");
    }
    text.truncate(len);
    text.into_bytes()
}
