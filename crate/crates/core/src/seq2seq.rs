//! Attention-based encoder-decoder translation model.
//!
//! The encoder's first layer is bidirectional; its two directions are
//! concatenated and projected back to the hidden size before a second layer
//! that runs right to left. The decoder is a stack of LSTMs whose top output
//! attends over the encoder annotations with dot-product attention; a tanh
//! layer over `[h ; context]` feeds the output projection, which yields the
//! raw logits `S_TM`.
//!
//! Batches are time-major: row `t * batch + i` belongs to sentence `i`.
//! Sources within one batch must share a length.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS, PAD};
use crate::fusion::ColdFusionParams;
use crate::numerics::layers::zeros;
use crate::numerics::{Embedding, Graph, Linear, LstmCell, NodeId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TmConfig {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub decoder_layers: usize,
    /// Width of the LM feature in the cold-fusion gate; `None` disables it.
    pub cold_fusion: Option<usize>,
}

impl TmConfig {
    pub fn new(source_vocab: usize, target_vocab: usize, embed: usize, hidden: usize) -> Self {
        TmConfig {
            source_vocab,
            target_vocab,
            embed,
            hidden,
            decoder_layers: 2,
            cold_fusion: None,
        }
    }
}

impl fmt::Display for TmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "source_vocab={} target_vocab={} embed={} hidden={} decoder_layers={} cold_fusion={}",
            self.source_vocab,
            self.target_vocab,
            self.embed,
            self.hidden,
            self.decoder_layers,
            self.cold_fusion.unwrap_or(0)
        )
    }
}

impl FromStr for TmConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = TmConfig::new(0, 0, 0, 0);
        for field in s.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format("tm config", format!("bad field {field:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::format("tm config", format!("bad value in {field:?}")))?;
            match k {
                "source_vocab" => cfg.source_vocab = v,
                "target_vocab" => cfg.target_vocab = v,
                "embed" => cfg.embed = v,
                "hidden" => cfg.hidden = v,
                "decoder_layers" => cfg.decoder_layers = v,
                "cold_fusion" => cfg.cold_fusion = (v > 0).then_some(v),
                _ => return Err(Error::format("tm config", format!("unknown field {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

/// Encoder result for a batch of equal-length sources.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `(steps * batch) x hidden`, time-major.
    pub annotations: Tensor,
    pub batch: usize,
    pub steps: usize,
    /// Initial decoder `(h, c)` per layer, each `batch x hidden`.
    pub init: Vec<(Tensor, Tensor)>,
}

/// Incremental decoding state of one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// Attention context from the previous step.
    pub context: Vec<f64>,
    pub last: u32,
}

/// Nodes of a teacher-forced decoder pass.
pub struct DecoderOutput {
    /// `(steps * batch) x target_vocab` raw scores.
    pub logits: NodeId,
    /// Attentional hidden state that feeds the output projection.
    pub feature: NodeId,
    /// `(steps * batch) x source_steps` attention weights.
    pub attention: Vec<f64>,
    pub targets: Vec<u32>,
    pub mask: Vec<f64>,
    pub steps: usize,
}

/// One decoder step for several hypotheses.
pub struct StepOutput {
    /// `hyps x target_vocab` raw scores.
    pub logits: Tensor,
    /// `hyps x hidden` feature for cold fusion.
    pub feature: Tensor,
    pub attention: Vec<Vec<f64>>,
    pub states: Vec<DecoderState>,
}

#[derive(Clone, Debug)]
pub struct TmModel {
    config: TmConfig,
    store: ParamStore,
    src_embed: Embedding,
    enc_fwd: LstmCell,
    enc_bwd: LstmCell,
    enc_proj: Linear,
    enc_rev: LstmCell,
    dec_init: Linear,
    tgt_embed: Embedding,
    dec: Vec<LstmCell>,
    combine: Linear,
    output: Linear,
    cold: Option<ColdFusionParams>,
}

impl TmModel {
    pub fn new(config: TmConfig, seed: u64) -> Result<Self> {
        let TmConfig {
            source_vocab,
            target_vocab,
            embed,
            hidden,
            decoder_layers,
            cold_fusion,
        } = config;
        if source_vocab <= EOS as usize || target_vocab <= EOS as usize {
            return Err(Error::invalid("vocabularies must extend past the reserved ids"));
        }
        if embed == 0 || hidden == 0 || decoder_layers == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &mut ParamStore::new();
        let r = &mut rng;
        let src_embed = Embedding::new(s, "tm.src_embed", source_vocab, embed, r)?;
        let enc_fwd = LstmCell::new(s, "tm.enc.fwd", embed, hidden, r)?;
        let enc_bwd = LstmCell::new(s, "tm.enc.bwd", embed, hidden, r)?;
        let enc_proj = Linear::new(s, "tm.enc.proj", 2 * hidden, hidden, true, r)?;
        let enc_rev = LstmCell::new(s, "tm.enc.rev", hidden, hidden, r)?;
        let dec_init = Linear::new(s, "tm.dec.init", 2 * hidden, 2 * hidden * decoder_layers, true, r)?;
        let tgt_embed = Embedding::new(s, "tm.tgt_embed", target_vocab, embed, r)?;
        let dec = (0..decoder_layers)
            .map(|l| {
                let input = if l == 0 { embed } else { hidden };
                LstmCell::new(s, &format!("tm.dec.lstm{l}"), input, hidden, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let combine = Linear::new(s, "tm.dec.combine", 2 * hidden, hidden, true, r)?;
        let output = Linear::new(s, "tm.out", hidden, target_vocab, true, r)?;
        let cold = match cold_fusion {
            Some(width) => Some(ColdFusionParams::new(s, "tm.cold", hidden, target_vocab, width, r)?),
            None => None,
        };
        Ok(TmModel {
            config,
            store: std::mem::take(s),
            src_embed,
            enc_fwd,
            enc_bwd,
            enc_proj,
            enc_rev,
            dec_init,
            tgt_embed,
            dec,
            combine,
            output,
            cold,
        })
    }

    pub fn config(&self) -> &TmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn cold_fusion(&self) -> Option<&ColdFusionParams> {
        self.cold.as_ref()
    }

    fn check(ids: &[u32], vocab: usize) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Encodes equal-length sources; returns the annotation node and the
    /// initial decoder `(h, c)` nodes per layer.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        sources: &[&[u32]],
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        let b = sources.len();
        let steps = sources.first().map(|s| s.len()).unwrap_or(0);
        if b == 0 || steps == 0 {
            return Err(Error::Empty("source"));
        }
        if sources.iter().any(|s| s.len() != steps) {
            return Err(Error::shape("encode", "sources in one batch must share a length"));
        }
        let mut ids = Vec::with_capacity(b * steps);
        for t in 0..steps {
            for s in sources {
                ids.push(s[t]);
            }
        }
        Self::check(&ids, self.config.source_vocab)?;
        let h = self.config.hidden;
        let x = self.src_embed.forward(g, &ids)?;
        let z = zeros(g, b, h)?;
        let fwd = self.enc_fwd.run(g, x, b, z, z, false)?;
        let bwd = self.enc_bwd.run(g, x, b, z, z, true)?;
        let f = g.concat_rows(&fwd.outputs)?;
        let bk = g.concat_rows(&bwd.outputs)?;
        let both = g.concat_cols(&[f, bk])?;
        let proj = self.enc_proj.forward(g, both)?;
        let rev = self.enc_rev.run(g, proj, b, z, z, true)?;
        let annotations = g.concat_rows(&rev.outputs)?;
        let last = g.concat_cols(&[rev.h, rev.c])?;
        let init = self.dec_init.forward(g, last)?;
        let states = (0..self.dec.len())
            .map(|l| {
                let hs = g.slice_cols(init, 2 * l * h, h)?;
                let cs = g.slice_cols(init, (2 * l + 1) * h, h)?;
                Ok((hs, cs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((annotations, states))
    }

    pub fn encode(&self, sources: &[&[u32]]) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.store, false);
        let (ann, init) = self.encode_graph(&mut g, sources)?;
        Ok(EncoderOutput {
            annotations: g.value(ann).clone(),
            batch: sources.len(),
            steps: sources[0].len(),
            init: init
                .into_iter()
                .map(|(h, c)| (g.value(h).clone(), g.value(c).clone()))
                .collect(),
        })
    }

    /// Teacher-forced decoder over `targets` (without `<s>`/`</s>`). Row
    /// `t * batch + i` predicts token `t` of `targets[i]`, then `</s>`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        annotations: NodeId,
        init: &[(NodeId, NodeId)],
        targets: &[&[u32]],
    ) -> Result<DecoderOutput> {
        let b = targets.len();
        if b == 0 {
            return Err(Error::Empty("target batch"));
        }
        for t in targets {
            Self::check(t, self.config.target_vocab)?;
        }
        let steps = targets.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(steps * b);
        let mut gold = Vec::with_capacity(steps * b);
        let mut mask = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for s in targets {
                inputs.push(if t == 0 { BOS } else { s.get(t - 1).copied().unwrap_or(PAD) });
                let (y, m) = match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => (s[t], 1.0),
                    std::cmp::Ordering::Equal => (EOS, 1.0),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                gold.push(y);
                mask.push(m);
            }
        }
        let mut x = self.tgt_embed.forward(g, &inputs)?;
        for (cell, &(h0, c0)) in self.dec.iter().zip(init) {
            let run = cell.run(g, x, b, h0, c0, false)?;
            x = g.concat_rows(&run.outputs)?;
        }
        let ctx = g.attention(x, annotations, annotations, b)?;
        let attention = g.attention_weights(ctx).expect("attention node").to_vec();
        let (feature, logits) = self.head(g, x, ctx)?;
        Ok(DecoderOutput {
            logits,
            feature,
            attention,
            targets: gold,
            mask,
            steps,
        })
    }

    fn head(&self, g: &mut Graph<'_>, top: NodeId, ctx: NodeId) -> Result<(NodeId, NodeId)> {
        let hc = g.concat_cols(&[top, ctx])?;
        let pre = self.combine.forward(g, hc)?;
        let feature = g.tanh(pre)?;
        let logits = self.output.forward(g, feature)?;
        Ok((feature, logits))
    }

    /// Encoder and teacher-forced decoder in one graph.
    pub fn forward(&self, g: &mut Graph<'_>, sources: &[&[u32]], targets: &[&[u32]]) -> Result<DecoderOutput> {
        if sources.len() != targets.len() {
            return Err(Error::shape(
                "forward",
                format!("{} sources, {} targets", sources.len(), targets.len()),
            ));
        }
        let (ann, init) = self.encode_graph(g, sources)?;
        self.decode_graph(g, ann, &init, targets)
    }

    /// Starting decoder state of every sentence in `enc`.
    pub fn initial_states(&self, enc: &EncoderOutput) -> Vec<DecoderState> {
        (0..enc.batch)
            .map(|i| DecoderState {
                h: enc.init.iter().map(|(h, _)| h.row(i).to_vec()).collect(),
                c: enc.init.iter().map(|(_, c)| c.row(i).to_vec()).collect(),
                context: vec![0.0; self.config.hidden],
                last: BOS,
            })
            .collect()
    }

    /// Feeds `tokens[r]` to `states[r]`. Hypothesis `r` attends over sentence
    /// `r % enc.batch` of the encoder output.
    pub fn decoder_step(
        &self,
        enc: &EncoderOutput,
        states: &[DecoderState],
        tokens: &[u32],
    ) -> Result<StepOutput> {
        let n = states.len();
        if n == 0 || tokens.len() != n {
            return Err(Error::shape("decoder_step", format!("{n} states, {} tokens", tokens.len())));
        }
        Self::check(tokens, self.config.target_vocab)?;
        let hd = self.config.hidden;
        let layers = self.dec.len();
        if states.iter().any(|s| s.h.len() != layers || s.c.len() != layers) {
            return Err(Error::invalid("decoder state has the wrong number of layers"));
        }
        let mut g = Graph::new(&self.store, false);
        let ann = g.input_ref(&enc.annotations)?;
        let mut x = self.tgt_embed.forward(&mut g, tokens)?;
        let mut hs = Vec::with_capacity(layers);
        let mut cs = Vec::with_capacity(layers);
        for (l, cell) in self.dec.iter().enumerate() {
            let stack = |f: &dyn Fn(&DecoderState) -> &[f64]| -> Result<Tensor> {
                let mut d = Vec::with_capacity(n * hd);
                states.iter().for_each(|s| d.extend_from_slice(f(s)));
                Tensor::matrix(n, hd, d)
            };
            let h = g.input(stack(&|s| &s.h[l])?)?;
            let c = g.input(stack(&|s| &s.c[l])?)?;
            let (h2, c2) = cell.step(&mut g, x, h, c)?;
            hs.push(h2);
            cs.push(c2);
            x = h2;
        }
        let ctx = g.attention(x, ann, ann, enc.batch)?;
        let weights = g.attention_weights(ctx).expect("attention node");
        let attention = weights.chunks(enc.steps).map(|w| w.to_vec()).collect();
        let (feature, logits) = self.head(&mut g, x, ctx)?;
        let next = (0..n)
            .map(|r| DecoderState {
                h: hs.iter().map(|&id| g.value(id).row(r).to_vec()).collect(),
                c: cs.iter().map(|&id| g.value(id).row(r).to_vec()).collect(),
                context: g.value(ctx).row(r).to_vec(),
                last: tokens[r],
            })
            .collect();
        Ok(StepOutput {
            logits: g.value(logits).clone(),
            feature: g.value(feature).clone(),
            attention,
            states: next,
        })
    }

    /// Teacher-forced per-step raw scores for one pair, `(len + 1) x vocab`.
    pub fn teacher_forced_logits(&self, source: &[u32], target: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, &[source], &[target])?;
        Ok(g.value(out.logits).clone())
    }

    /// Cold-fusion logits on top of a decoder pass; `lm_logp` holds the
    /// fixed LM's log-probabilities for the same rows.
    pub fn cold_logits(
        &self,
        g: &mut Graph<'_>,
        out: &DecoderOutput,
        lm_logp: NodeId,
    ) -> Result<NodeId> {
        let cold = self
            .cold
            .as_ref()
            .ok_or_else(|| Error::invalid("model was built without cold-fusion parameters"))?;
        cold.logits(g, out.feature, out.logits, lm_logp)
    }
}

/// Indices of `sources` grouped by length, groups ordered by length and
/// members by index.
pub fn group_by_length<S: AsRef<[u32]>>(sources: &[S]) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in sources.iter().enumerate() {
        groups.entry(s.as_ref().len()).or_default().push(i);
    }
    groups.into_values().collect()
}
