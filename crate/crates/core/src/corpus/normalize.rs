use std::collections::BTreeMap;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

/// Character substitutions applied after lower-casing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FoldMap {
    map: BTreeMap<char, String>,
    /// Drop combining marks after canonical decomposition.
    strip_marks: bool,
}

impl FoldMap {
    pub fn none() -> Self {
        Self::default()
    }

    /// Explicit map only; no decomposition.
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (char, S)>,
        S: Into<String>,
    {
        FoldMap {
            map: pairs.into_iter().map(|(c, s)| (c, s.into())).collect(),
            strip_marks: false,
        }
    }

    /// Latin-script diacritic removal: canonical decomposition with combining
    /// marks dropped, plus dotless/dotted i which do not decompose.
    pub fn latin_diacritics() -> Self {
        FoldMap {
            map: [('ı', "i"), ('İ', "i")]
                .into_iter()
                .map(|(c, s)| (c, s.to_string()))
                .collect(),
            strip_marks: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty() && !self.strip_marks
    }

    pub fn strips_marks(&self) -> bool {
        self.strip_marks
    }

    pub fn entries(&self) -> impl Iterator<Item = (char, &str)> {
        self.map.iter().map(|(c, s)| (*c, s.as_str()))
    }

    fn apply(&self, text: &str) -> String {
        let mapped: String = text
            .chars()
            .map(|c| match self.map.get(&c) {
                Some(s) => s.clone(),
                None => c.to_string(),
            })
            .collect();
        if self.strip_marks {
            mapped.nfd().filter(|&c| !is_combining_mark(c)).nfc().collect()
        } else {
            mapped
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizeConfig {
    pub lowercase: bool,
    pub fold: FoldMap,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            lowercase: true,
            fold: FoldMap::none(),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || (!c.is_alphanumeric() && !c.is_whitespace() && !is_combining_mark(c))
}

/// Lower-cases, folds characters and splits punctuation into separate
/// whitespace-delimited tokens.
pub fn normalize(text: &str, cfg: &NormalizeConfig) -> String {
    let lowered = if cfg.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let folded = if cfg.fold.is_empty() {
        lowered
    } else {
        cfg.fold.apply(&lowered)
    };
    let mut spaced = String::with_capacity(folded.len() + 8);
    for c in folded.chars() {
        if is_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [`normalize`] over raw bytes, rejecting invalid UTF-8.
pub fn normalize_bytes(bytes: &[u8], cfg: &NormalizeConfig) -> Result<String> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::format("UTF-8 text", e.to_string()))?;
    Ok(normalize(text, cfg))
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        let cfg = NormalizeConfig::default();
        assert_eq!(normalize("Hello, World!", &cfg), "hello , world !");
        assert_eq!(normalize("", &cfg), "");
        assert_eq!(normalize("  a\t\tb  ", &cfg), "a b");
    }

    #[test]
    fn explicit_fold_map() {
        let cfg = NormalizeConfig {
            lowercase: true,
            fold: FoldMap::from_pairs([('ı', "i"), ('ş', "s")]),
        };
        assert_eq!(normalize("ışık", &cfg), "isik");
    }

    #[test]
    fn latin_default_strips_marks() {
        let cfg = NormalizeConfig {
            lowercase: true,
            fold: FoldMap::latin_diacritics(),
        };
        assert_eq!(normalize("Işık çöğü İstanbul", &cfg), "isik cogu istanbul");
        assert_eq!(normalize("Eestis ütleb", &cfg), "eestis utleb");
    }

    #[test]
    fn invalid_utf8_is_an_error() {
        assert!(normalize_bytes(&[0x66, 0xff, 0x66], &NormalizeConfig::default()).is_err());
        assert_eq!(
            normalize_bytes(b"A.", &NormalizeConfig::default()).unwrap(),
            "a ."
        );
    }

    #[test]
    fn continuation_marker_cannot_survive_normalisation() {
        let out = normalize("x@@ y", &NormalizeConfig::default());
        assert!(!out.contains("@@"));
    }
}
