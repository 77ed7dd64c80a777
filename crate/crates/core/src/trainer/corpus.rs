use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level text split into a training stream and a held-out tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Fraction of bytes held out for evaluation (taken from the end).
pub const EVAL_FRACTION: f64 = 0.1;

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Data(format!("corpus of {} bytes is too small", bytes.len())));
        }
        let cut = bytes.len() - ((bytes.len() as f64 * EVAL_FRACTION).round() as usize).max(2);
        let ids = |s: &[u8]| s.iter().map(|&b| b as usize).collect();
        Ok(Self { train: ids(&bytes[..cut]), eval: ids(&bytes[cut..]) })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Token rows for training step `step`: `rows` windows of `seq + 1`
    /// bytes at offsets drawn from `(seed, step)` alone, returned as
    /// `(inputs, targets)`.
    pub fn batch(&self, seed: u64, step: u64, rows: usize, seq: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.train.len() < seq + 1 {
            return Err(Error::Data(format!("training stream of {} tokens is shorter than one sequence of {}", self.train.len(), seq + 1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 + step);
        let hi = self.train.len() - seq - 1;
        let mut inputs = Vec::with_capacity(rows * seq);
        let mut targets = Vec::with_capacity(rows * seq);
        for _ in 0..rows {
            let s = rng.random_range(0..=hi);
            inputs.extend_from_slice(&self.train[s..s + seq]);
            targets.extend_from_slice(&self.train[s + 1..s + seq + 1]);
        }
        Ok((inputs, targets))
    }
}

const NAMES: &[&str] = &[
    "Andrea", "Richard", "Oprah", "Mary", "John", "Elizabeth", "Maria", "David", "Sarah", "Michael", "Laura", "James", "Anna",
    "Robert", "Linda", "Thomas", "Helen", "Peter", "Susan", "Daniel",
];
const TITLES: &[&str] =
    &["secretary", "minister", "commander", "winner", "professor", "CEO", "director", "senator", "governor", "president", "chairman", "editor"];
const SPEECH: &[&str] = &["said", "explained", "told reporters", "asked", "claimed", "announced", "added", "noted", "stated", "argued"];
const DISCOURSE: &[&str] = &["However", "Therefore", "Actually", "Especially", "Particularly", "Meanwhile", "Indeed", "Still"];
const MANNER: &[&str] = &["quickly", "carefully", "successfully", "directly", "properly", "slowly", "openly", "quietly"];
const TIME_ADV: &[&str] = &["now", "today", "recently", "always", "sometimes", "currently", "often", "soon"];
const NATIONS: &[&str] = &["American", "British", "Chinese", "European", "Japanese", "French", "German", "Indian", "Canadian", "Mexican"];
const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];
const MONTHS: &[&str] =
    &["January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December"];
const PARTS: &[&str] = &["morning", "afternoon", "evening", "summer", "winter", "spring", "week", "year"];
const ADJ: &[&str] = &["good", "new", "important", "political", "economic", "public", "large", "small", "local", "national", "final", "major"];
const NOUNS: &[&str] = &[
    "plan", "report", "project", "company", "city", "market", "school", "team", "budget", "bridge", "river", "museum", "hospital",
    "policy", "program", "festival", "election", "study",
];
const ABSTRACT: &[&str] = &["decision", "agreement", "development", "investment", "discussion", "movement", "awareness", "position", "treatment", "statement"];
const AGENTS: &[&str] = &["players", "workers", "teachers", "farmers", "actors", "visitors", "voters", "researchers", "officers", "builders"];
const ING: &[&str] = &["running", "building", "planning", "working", "growing", "opening", "testing", "moving", "writing", "reading"];
const ED: &[&str] = &["created", "approved", "reported", "opened", "started", "finished", "changed", "reviewed", "launched", "signed"];
const PLACES: &[&str] = &["London", "Paris", "Tokyo", "Boston", "Berlin", "Madrid", "Chicago", "Toronto", "Sydney", "Denver"];
const QUANT: &[&str] = &["all", "many", "most", "several", "some", "few"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn ordinal(n: u32) -> String {
    let suffix = match (n % 10, n % 100) {
        (1, x) if x != 11 => "st",
        (2, x) if x != 12 => "nd",
        (3, x) if x != 13 => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let title = pick(rng, TITLES);
    let nation = pick(rng, NATIONS);
    let noun = pick(rng, NOUNS);
    let adj = pick(rng, ADJ);
    match rng.random_range(0..14) {
        0 => format!("{name} {} that the {nation} {title} {} the {adj} {noun} on {}.", pick(rng, SPEECH), pick(rng, ED), pick(rng, DAYS)),
        1 => format!(
            "In {}, {} percent of {nation} {} {} {} the {noun}.",
            rng.random_range(1990..2025),
            rng.random_range(2..98),
            pick(rng, AGENTS),
            pick(rng, MANNER),
            pick(rng, ED)
        ),
        2 => format!("{}, the {} is {} {} a {adj} {noun} in {}.", pick(rng, DISCOURSE), pick(rng, ABSTRACT), pick(rng, TIME_ADV), pick(rng, ING), pick(rng, PLACES)),
        3 => format!("\"We are {} the {noun} {},\" {name} {}.", pick(rng, ING), pick(rng, MANNER), pick(rng, SPEECH)),
        4 => format!("The {} {title}, {name}, {} the {} in {} {}.", nation, pick(rng, ED), pick(rng, ABSTRACT), pick(rng, MONTHS), rng.random_range(1990..2025)),
        5 => format!(
            "{} {} said the {} would take {} {}s.",
            pick(rng, NAMES),
            ["told", "asked"][rng.random_range(0..2)],
            noun,
            rng.random_range(2..30),
            pick(rng, PARTS)
        ),
        6 => format!("On the {} of {}, {} {} gathered in {}.", ordinal(rng.random_range(1..29)), pick(rng, MONTHS), pick(rng, QUANT), pick(rng, AGENTS), pick(rng, PLACES)),
        7 => format!("Is the {adj} {noun} {} {}? {name} {} it is.", pick(rng, TIME_ADV), pick(rng, ED), pick(rng, SPEECH)),
        8 => format!("The {} ({}) was {} by {} {}.", pick(rng, ABSTRACT), pick(rng, PLACES), pick(rng, ED), rng.random_range(3..900), pick(rng, AGENTS)),
        9 => format!("He {} the {title}; she {} the {noun}.", pick(rng, ED), pick(rng, ED)),
        10 => format!("Every {} {} {} {} because the {noun} is {adj}.", pick(rng, PARTS), pick(rng, AGENTS), pick(rng, TIME_ADV), ["go", "make", "take", "know", "get"][rng.random_range(0..5)]),
        11 => format!("{}, {} million {} {} {} the {} {noun}.", pick(rng, DISCOURSE), rng.random_range(1..60), nation, pick(rng, AGENTS), pick(rng, ED), adj),
        12 => format!("At {} on {}, the {title} {} a {}!", ["noon", "night", "dawn"][rng.random_range(0..3)], pick(rng, DAYS), pick(rng, ED), pick(rng, ABSTRACT)),
        _ => format!("{name} and {} {} {} {} with the {nation} {noun}.", pick(rng, NAMES), pick(rng, TIME_ADV), ["have", "are"][rng.random_range(0..2)], pick(rng, ING)),
    }
}

/// Deterministic English-like text of at least `min_bytes` bytes built from
/// templated sentences grouped into paragraphs.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let n = rng.random_range(3..8);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng));
        }
        out.push_str("\n\n");
    }
    out
}
