//! Synthetic language pair for desk-scale experiments.
//!
//! Target sentences come from an order-2 Markov grammar over a small word
//! list. The source side is a deterministic word-level transduction of the
//! target: a many-to-one word remap (so some target words are only
//! recoverable from context) followed by swapping adjacent class-A/class-B
//! word pairs.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const TARGET_CONSONANTS: &[u8] = b"bdgklmnprst";
const SOURCE_CONSONANTS: &[u8] = b"fhjvwzcx";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub target_words: usize,
    /// Successors kept per two-word context.
    pub successors: usize,
    /// Chance of drawing a word from the unigram distribution instead.
    pub noise: f64,
    /// Zipf exponent of the unigram noise distribution.
    pub zipf: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Pairs of target words that share one source word.
    pub homophone_pairs: usize,
    /// Fraction of the word list placed in each reordering class.
    pub reorder_class_fraction: f64,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            target_words: 48,
            successors: 4,
            noise: 0.05,
            zipf: 1.0,
            min_len: 4,
            max_len: 10,
            homophone_pairs: 12,
            reorder_class_fraction: 0.2,
            dev_size: 500,
            test_size: 500,
        }
    }
}

/// Generated corpora as whitespace-tokenised text.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    /// `(source, target)` training pairs.
    pub train: Vec<(String, String)>,
    /// Target-side monolingual sentences.
    pub mono: Vec<String>,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// The grammar and transducer behind a task; cheap to rebuild from a seed.
#[derive(Clone, Debug)]
pub struct Grammar {
    config: GrammarConfig,
    target: Vec<String>,
    source_of: Vec<String>,
    /// 0 = neither, 1 = class A, 2 = class B.
    class: Vec<u8>,
    /// Successor table indexed by `prev2 * (n + 1) + prev1`; index `n` is the
    /// sentence-start symbol.
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    unigram: WeightedIndex<f64>,
}

fn make_words(rng: &mut ChaCha8Rng, consonants: &[u8], n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(1..=2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*consonants.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

impl Grammar {
    pub fn new(seed: u64, config: &GrammarConfig) -> Result<Self> {
        let n = config.target_words;
        if n < 2 || config.successors == 0 {
            return Err(Error::invalid("grammar needs >= 2 words and >= 1 successor"));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::invalid("sentence length range is empty"));
        }
        if !(0.0..=1.0).contains(&config.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        if 2 * config.homophone_pairs > n {
            return Err(Error::invalid("too many homophone pairs for the word list"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_616d);
        let target = make_words(&mut rng, TARGET_CONSONANTS, n);
        let distinct = n - config.homophone_pairs;
        let source_words = make_words(&mut rng, SOURCE_CONSONANTS, distinct);

        // words 2k and 2k+1 collapse onto one source word for k < pairs
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut source_of = vec![String::new(); n];
        let mut next = 0;
        for (k, chunk) in perm.chunks(2).enumerate() {
            if k < config.homophone_pairs {
                for &w in chunk {
                    source_of[w] = source_words[next].clone();
                }
                next += 1;
            } else {
                for &w in chunk {
                    source_of[w] = source_words[next].clone();
                    next += 1;
                }
            }
        }

        let per_class = ((n as f64) * config.reorder_class_fraction).round() as usize;
        let mut class = vec![0u8; n];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &w in order.iter().take(per_class) {
            class[w] = 1;
        }
        for &w in order.iter().skip(per_class).take(per_class) {
            class[w] = 2;
        }

        let zipf: Vec<f64> = (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf)).collect();
        let unigram = WeightedIndex::new(&zipf).map_err(|e| Error::invalid(e.to_string()))?;
        let k = config.successors.min(n);
        let weights: Vec<f64> = (0..k).map(|j| 1.0 / (j + 1) as f64).collect();
        let mut successors = Vec::with_capacity((n + 1) * (n + 1));
        for _ in 0..(n + 1) * (n + 1) {
            let mut next: Vec<usize> = (0..n).collect();
            next.shuffle(&mut rng);
            next.truncate(k);
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
            successors.push((next, dist));
        }
        Ok(Grammar {
            config: config.clone(),
            target,
            source_of,
            class,
            successors,
            unigram,
        })
    }

    pub fn target_words(&self) -> &[String] {
        &self.target
    }

    /// Draws one target sentence as word indices.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.target.len();
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let (mut p2, mut p1) = (n, n);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let w = if rng.gen::<f64>() < self.config.noise {
                self.unigram.sample(rng)
            } else {
                let (next, dist) = &self.successors[p2 * (n + 1) + p1];
                next[dist.sample(rng)]
            };
            out.push(w);
            p2 = p1;
            p1 = w;
        }
        out
    }

    /// Source indices in output order: a left-to-right pass swaps each
    /// class-A word with an immediately following class-B word.
    fn reorder(&self, target: &[usize]) -> Vec<usize> {
        let mut out = target.to_vec();
        let mut i = 0;
        while i + 1 < out.len() {
            if self.class[out[i]] == 1 && self.class[out[i + 1]] == 2 {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }

    pub fn render_target(&self, words: &[usize]) -> String {
        words.iter().map(|&w| self.target[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn render_source(&self, words: &[usize]) -> String {
        self.reorder(words)
            .iter()
            .map(|&w| self.source_of[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn split_rng(seed: u64, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    rng
}

/// Draws `count` sentences not in `exclude`, adding each to `exclude` when
/// `unique` is set.
fn draw(
    grammar: &Grammar,
    rng: &mut ChaCha8Rng,
    count: usize,
    exclude: &mut HashSet<Vec<usize>>,
    unique: bool,
) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = grammar.sample(rng);
        if exclude.contains(&s) {
            continue;
        }
        if unique {
            exclude.insert(s.clone());
        }
        out.push(s);
    }
    out
}

/// Generates train, monolingual, dev and test splits. Dev and test are drawn
/// first and never reappear in train or mono.
pub fn synth_task_generate(
    seed: u64,
    n_parallel: usize,
    n_mono: usize,
    config: &GrammarConfig,
) -> Result<SynthTask> {
    if n_parallel == 0 || n_mono == 0 || config.dev_size == 0 || config.test_size == 0 {
        return Err(Error::invalid("split sizes must be positive"));
    }
    let grammar = Grammar::new(seed, config)?;
    let mut held_out = HashSet::new();
    let dev = draw(&grammar, &mut split_rng(seed, 1), config.dev_size, &mut held_out, true);
    let test = draw(&grammar, &mut split_rng(seed, 2), config.test_size, &mut held_out, true);
    let train = draw(&grammar, &mut split_rng(seed, 3), n_parallel, &mut held_out.clone(), false);
    let mono = draw(&grammar, &mut split_rng(seed, 4), n_mono, &mut held_out, false);
    let pairs = |s: &[Vec<usize>]| -> Vec<(String, String)> {
        s.iter()
            .map(|w| (grammar.render_source(w), grammar.render_target(w)))
            .collect()
    };
    Ok(SynthTask {
        train: pairs(&train),
        mono: mono.iter().map(|w| grammar.render_target(w)).collect(),
        dev: pairs(&dev),
        test: pairs(&test),
    })
}
