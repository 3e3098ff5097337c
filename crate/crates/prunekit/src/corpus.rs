//! Byte-level corpora: ingestion with a contiguous 90/5/5 split, and a
//! seeded generator of English-like text for tests and demos.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Result};
use prunekit_core::Error as CoreError;

/// Smallest corpus accepted for the default toy model.
pub const MIN_CORPUS_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Splits raw bytes into train/val/test token streams (first 90%, next
/// 5%, last 5%).
pub fn split_bytes(bytes: &[u8], min_len: usize) -> Result<Splits> {
    if bytes.len() < min_len {
        return Err(CoreError::Data(format!("corpus has {} bytes; at least {min_len} are required", bytes.len())).into());
    }
    let n = bytes.len();
    let train_end = n * 90 / 100;
    let val_end = n * 95 / 100;
    let tok = |s: &[u8]| s.iter().map(|&b| b as usize).collect::<Vec<_>>();
    Ok(Splits { train: tok(&bytes[..train_end]), val: tok(&bytes[train_end..val_end]), test: tok(&bytes[val_end..]) })
}

/// Reads a file as bytes and splits it, requiring [`MIN_CORPUS_BYTES`].
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Splits> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    split_bytes(&bytes, MIN_CORPUS_BYTES)
}

const ONSETS: [&str; 18] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "gr"];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: [&str; 10] = ["", "", "n", "r", "s", "t", "l", "nd", "x", "m"];
// Invented words containing these are redrawn.
const AVOID: [&str; 12] = ["fu", "cum", "tit", "cun", "dic", "ass", "sex", "rap", "nig", "pis", "slu", "hor"];

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    names: Vec<String>,
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(NUCLEI.choose(rng).unwrap());
            w.push_str(CODAS.choose(rng).unwrap());
        }
        if !AVOID.iter().any(|a| w.contains(a)) {
            return w;
        }
    }
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut list = |count: usize, max_syl: usize| -> Vec<String> {
            (0..count)
                .map(|_| {
                    let syl = rng.random_range(1..=max_syl);
                    word(rng, syl)
                })
                .collect()
        };
        let nouns = list(60, 2);
        let verbs = list(30, 2);
        let adjectives = list(25, 2);
        let names = list(12, 3)
            .into_iter()
            .map(|n| {
                let mut c = n.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                std::iter::once(first).chain(c).collect()
            })
            .collect();
        Self { nouns, verbs, adjectives, names }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn noun_phrase(lex: &Lexicon, rng: &mut ChaCha8Rng, plural: bool) -> String {
    let det = if plural { ["the", "some", "many", "two"].choose(rng).unwrap() } else { ["the", "a", "one", "every"].choose(rng).unwrap() };
    let noun = lex.nouns.choose(rng).unwrap();
    let noun = if plural { format!("{noun}s") } else { noun.clone() };
    if rng.random_bool(0.4) {
        format!("{det} {} {noun}", lex.adjectives.choose(rng).unwrap())
    } else {
        format!("{det} {noun}")
    }
}

fn sentence(lex: &Lexicon, rng: &mut ChaCha8Rng) -> String {
    let plural = rng.random_bool(0.4);
    let subject = if rng.random_bool(0.25) { lex.names.choose(rng).unwrap().clone() } else { noun_phrase(lex, rng, plural) };
    let plural = plural && !subject.starts_with(|c: char| c.is_ascii_uppercase());
    let verb = lex.verbs.choose(rng).unwrap();
    let verb = match (rng.random_range(0..3), plural) {
        (0, _) => format!("{verb}ed"),
        (1, false) => format!("{verb}s"),
        (1, true) => verb.clone(),
        _ => format!("will {verb}"),
    };
    let object_plural = rng.random_bool(0.3);
    let object = noun_phrase(lex, rng, object_plural);
    let mut s = format!("{} {verb} {object}", capitalize(&subject));
    match rng.random_range(0..6) {
        0 => s.push_str(&format!(" in {}", rng.random_range(1700..2000))),
        1 => s.push_str(&format!(" and {} {}", lex.verbs.choose(rng).unwrap(), noun_phrase(lex, rng, false))),
        2 => s.push_str(&format!(", because {} was {}", noun_phrase(lex, rng, false), lex.adjectives.choose(rng).unwrap())),
        _ => {}
    }
    if rng.random_bool(0.1) {
        format!("\"{s}?\" asked {}.", lex.names.choose(rng).unwrap())
    } else {
        s + "."
    }
}

/// Seeded English-like text of exactly `bytes` bytes: sentences over a
/// fixed invented lexicon with agreement, tense, numbers, quotations and
/// paragraph breaks.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::new(&mut rng);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.random_range(2..6);
        let para: Vec<String> = (0..n).map(|_| sentence(&lex, &mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push('\n');
    }
    out.truncate(bytes);
    out
}
