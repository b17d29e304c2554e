//! Checkpoints that carry their vocabularies, so a model file is enough to
//! decode with.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lmfusion::corpus::{Vocabulary, RESERVED};
use lmfusion::fusion::FusionConfig;
use lmfusion::lm::LmModel;
use lmfusion::seq2seq::TmModel;
use lmfusion::training::{load_lm, load_tm, Checkpoint};

pub const SOURCE_VOCAB: &str = "source_vocab";
pub const TARGET_VOCAB: &str = "target_vocab";
pub const FUSION: &str = "fusion";

/// Space-separated `token<TAB>count` entries; tokens never hold whitespace.
pub fn vocab_to_meta(v: &Vocabulary) -> String {
    (RESERVED.len()..v.len())
        .map(|i| {
            let id = i as u32;
            format!("{}\t{}", v.token(id).expect("id in range"), v.count(id))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn vocab_from_meta(ck: &Checkpoint, key: &str) -> Result<Vocabulary> {
    let text = ck.get(key).ok_or_else(|| anyhow!("checkpoint has no {key}"))?;
    let lines: Vec<String> = text.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
    Ok(Vocabulary::parse(&lines)?)
}

pub struct LoadedLm {
    pub model: LmModel,
    pub vocab: Vocabulary,
}

pub fn load_lm_file(path: &Path) -> Result<LoadedLm> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = load_lm(&ck)?;
    let vocab = vocab_from_meta(&ck, TARGET_VOCAB)?;
    if vocab.len() != model.vocab_size() {
        bail!("{}: vocabulary does not match the model", path.display());
    }
    Ok(LoadedLm { model, vocab })
}

pub fn load_lms(paths: &[PathBuf]) -> Result<Vec<LoadedLm>> {
    let lms: Vec<LoadedLm> = paths.iter().map(|p| load_lm_file(p)).collect::<Result<_>>()?;
    if lms.windows(2).any(|w| w[0].vocab != w[1].vocab) {
        bail!("language models use different vocabularies");
    }
    Ok(lms)
}

pub struct LoadedTm {
    pub model: TmModel,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub fusion: FusionConfig,
}

pub fn load_tm_file(path: &Path) -> Result<LoadedTm> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = load_tm(&ck)?;
    let fusion = match ck.get(FUSION) {
        Some(f) => f.parse()?,
        None => FusionConfig::baseline(),
    };
    Ok(LoadedTm {
        source_vocab: vocab_from_meta(&ck, SOURCE_VOCAB)?,
        target_vocab: vocab_from_meta(&ck, TARGET_VOCAB)?,
        model,
        fusion,
    })
}
