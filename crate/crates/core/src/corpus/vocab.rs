use std::collections::HashMap;
use std::path::Path;

use super::io::{read_lines, write_lines_atomic};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token strings with reserved ids `0..4` for pad, bos, eos and unk.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string(), 0);
        }
        v
    }

    fn push(&mut self, token: String, count: u64) {
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
        self.counts.push(count);
    }

    /// Builds from tokenised sentences; most frequent first, ties by token.
    /// `max_size` bounds the number of non-reserved entries.
    pub fn build<'a, I, S>(sentences: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(m) = max_size {
            entries.truncate(m);
        }
        let mut v = Self::with_reserved();
        for (t, c) in entries {
            v.push(t.to_string(), c);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Maps tokens to ids, unknown ones to `UNK`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect()
    }

    /// TSV `token<TAB>count`; reserved entries are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<String> = self
            .tokens
            .iter()
            .zip(&self.counts)
            .skip(RESERVED.len())
            .map(|(t, c)| format!("{t}\t{c}"))
            .collect();
        write_lines_atomic(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_lines(path)?)
    }

    pub fn parse(lines: &[String]) -> Result<Self> {
        let mut v = Self::with_reserved();
        for (i, line) in lines.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: no tab", i + 1)))?;
            let count = count.parse::<u64>().map_err(|e| {
                Error::format("vocabulary", format!("line {}: {e}", i + 1))
            })?;
            if tok.is_empty() || v.index.contains_key(tok) {
                return Err(Error::format(
                    "vocabulary",
                    format!("line {}: empty or duplicate token {tok:?}", i + 1),
                ));
            }
            v.push(tok.to_string(), count);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_ordering() {
        let s1: Vec<String> = ["b", "a", "b"].iter().map(|s| s.to_string()).collect();
        let s2: Vec<String> = ["c", "a"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::build([s1.as_slice(), s2.as_slice()], None);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(EOS), Some("</s>"));
        // a and b both twice: tie broken by token
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(v.encode(&["c", "zzz"]), vec![6, UNK]);
        assert_eq!(v.decode(&[BOS, 4, 6, EOS]), vec!["a", "c"]);
    }

    #[test]
    fn bijection_and_tsv_round_trip() {
        let s: Vec<String> = "x y z x".split(' ').map(String::from).collect();
        let v = Vocabulary::build([s.as_slice()], Some(2));
        assert_eq!(v.len(), 6);
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x\t2\ny\t1\n");
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(Vocabulary::parse(&["a\t1".into(), "a\t2".into()]).is_err());
    }
}
