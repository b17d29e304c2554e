//! Byte-pair encoding over characters.
//!
//! Word-final symbols carry an `</w>` suffix while learning merges. Segmented
//! output marks every non-final subword with a trailing `@@`, so stripping
//! `"@@ "` restores the original text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use super::io::{read_lines, write_lines_atomic};
use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
const VERSION_LINE: &str = "#version: 0.2";

type Pair = (String, String);

/// Ordered merge operations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpeCodes {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Merges every non-overlapping occurrence of `pair`, left to right.
fn merge_pair(symbols: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeCodes {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeCodes { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Learns up to `num_merges` merges from whitespace-tokenised sentences.
    /// Several corpora may be chained for joint BPE. At each step the most
    /// frequent adjacent pair is merged; ties go to the lexicographically
    /// smallest `(left, right)`.
    pub fn train<'s, I>(sentences: I, num_merges: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'s str>,
    {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for s in sentences {
            for w in s.split_whitespace() {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("BPE training corpus"));
        }
        let mut words: Vec<(Vec<String>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (word_symbols(w), c))
            .collect();

        let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
        let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
        for (wi, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_insert(0) += *c as i64;
                where_.entry(key).or_default().insert(wi);
            }
        }

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|(p, _)| p.clone());
            let Some(best) = best else { break };
            let mut affected: Vec<usize> = where_
                .remove(&best)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            for wi in affected {
                let (syms, c) = &words[wi];
                let c = *c as i64;
                let merged = merge_pair(syms, &best);
                if merged.len() == syms.len() {
                    continue;
                }
                for p in syms.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    if let Some(v) = pair_counts.get_mut(&key) {
                        *v -= c;
                    }
                }
                for p in merged.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    *pair_counts.entry(key.clone()).or_insert(0) += c;
                    where_.entry(key).or_default().insert(wi);
                }
                words[wi].0 = merged;
            }
            pair_counts.retain(|_, v| *v > 0);
            merges.push(best);
        }
        Ok(Self::from_merges(merges))
    }

    /// Symbols of one word after applying merges (still carrying `</w>`).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, p[0].clone(), p[1].clone()))
                })
                .min();
            match best {
                Some((_, l, r)) => syms = merge_pair(&syms, &(l, r)),
                None => return syms,
            }
        }
    }

    /// Segments a whitespace-tokenised sentence into marked subwords.
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut cache = HashMap::new();
        self.apply_cached(sentence, &mut cache)
    }

    fn apply_cached(&self, sentence: &str, cache: &mut HashMap<String, Vec<String>>) -> Vec<String> {
        let mut out = Vec::new();
        for w in sentence.split_whitespace() {
            let seg = cache
                .entry(w.to_string())
                .or_insert_with(|| mark_subwords(self.segment_word(w)));
            out.extend(seg.iter().cloned());
        }
        out
    }

    /// Applies to many sentences, sharing a per-word cache.
    pub fn apply_all<'s, I>(&self, sentences: I) -> Vec<Vec<String>>
    where
        I: IntoIterator<Item = &'s str>,
    {
        let mut cache = HashMap::new();
        sentences
            .into_iter()
            .map(|s| self.apply_cached(s, &mut cache))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines = vec![VERSION_LINE.to_string()];
        lines.extend(self.merges.iter().map(|(l, r)| format!("{l} {r}")));
        write_lines_atomic(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_lines(path)?)
    }

    pub fn parse(lines: &[String]) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if i == 0 && line.starts_with("#version") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::format(
                        "BPE codes",
                        format!("line {}: {line:?}", i + 1),
                    ))
                }
            }
        }
        Ok(Self::from_merges(merges))
    }
}

fn mark_subwords(symbols: Vec<String>) -> Vec<String> {
    let n = symbols.len();
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i + 1 == n {
                s.strip_suffix(END_OF_WORD).unwrap_or(&s).to_string()
            } else {
                format!("{s}{CONTINUATION}")
            }
        })
        .collect()
}

/// Undoes segmentation: joins subwords and removes continuation markers.
pub fn strip_bpe(tokens: &[impl AsRef<str>]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}
