//! Target-side language models behind one incremental scoring interface.
//!
//! All log-probabilities are natural-log. A model predicts the token that
//! follows the tokens it has consumed; scoring a sentence `y` means feeding
//! `<s> y_1 .. y_n` and reading off `y_1 .. y_n </s>`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS, PAD};
use crate::numerics::layers::zeros;
use crate::numerics::{Embedding, Graph, Linear, LstmCell, NodeId, ParamStore, Tensor};
use crate::{par, Error, Result};

/// Sentences scored together in one batched pass.
const SCORE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LmArch {
    /// Stacked LSTM over token embeddings.
    Recurrent {
        layers: usize,
        embed: usize,
        hidden: usize,
    },
    /// Fixed-window n-gram network: `order - 1` concatenated context
    /// embeddings, two tanh layers, then the output projection.
    FeedForward {
        order: usize,
        embed: usize,
        hidden: [usize; 2],
    },
    Uniform,
}

impl fmt::Display for LmArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LmArch::Recurrent {
                layers,
                embed,
                hidden,
            } => write!(f, "recurrent layers={layers} embed={embed} hidden={hidden}"),
            LmArch::FeedForward {
                order,
                embed,
                hidden,
            } => write!(
                f,
                "feedforward order={order} embed={embed} hidden={},{}",
                hidden[0], hidden[1]
            ),
            LmArch::Uniform => write!(f, "uniform"),
        }
    }
}

impl FromStr for LmArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::format("lm architecture", format!("bad field {p:?}")))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("lm architecture", format!("missing or bad {k}")))
        };
        match kind {
            "recurrent" => Ok(LmArch::Recurrent {
                layers: num("layers")?,
                embed: num("embed")?,
                hidden: num("hidden")?,
            }),
            "feedforward" => {
                let hidden = fields
                    .get("hidden")
                    .and_then(|v| v.split_once(','))
                    .and_then(|(a, b)| Some([a.parse().ok()?, b.parse().ok()?]))
                    .ok_or_else(|| Error::format("lm architecture", "bad hidden sizes"))?;
                Ok(LmArch::FeedForward {
                    order: num("order")?,
                    embed: num("embed")?,
                    hidden,
                })
            }
            "uniform" => Ok(LmArch::Uniform),
            other => Err(Error::format("lm architecture", format!("unknown kind {other:?}"))),
        }
    }
}

/// Per-hypothesis scoring state.
#[derive(Clone, Debug, PartialEq)]
pub enum LmState {
    Recurrent {
        h: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        last: u32,
    },
    /// The most recent `order - 1` tokens, oldest first.
    NGram { context: Vec<u32> },
    Uniform,
}

#[derive(Clone, Debug)]
enum Net {
    Recurrent {
        embedding: Embedding,
        cells: Vec<LstmCell>,
        output: Linear,
    },
    FeedForward {
        embedding: Embedding,
        hidden: [Linear; 2],
        output: Linear,
        order: usize,
    },
    Uniform,
}

/// Log-probability rows for a padded batch, time-major.
pub struct BatchScores {
    /// `(steps * batch) x vocab` log-probabilities.
    pub logp: NodeId,
    pub targets: Vec<u32>,
    /// 1 for real positions, 0 for padding.
    pub mask: Vec<f64>,
    pub steps: usize,
}

/// A language model. Parameters live in an owned store that nothing outside
/// the training module mutates.
#[derive(Clone, Debug)]
pub struct LmModel {
    arch: LmArch,
    vocab: usize,
    store: ParamStore,
    net: Net,
}

impl LmModel {
    pub fn new(arch: LmArch, vocab: usize, seed: u64) -> Result<Self> {
        if vocab <= EOS as usize {
            return Err(Error::invalid(format!("vocabulary of {vocab} has no room for tokens")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match arch {
            LmArch::Recurrent {
                layers,
                embed,
                hidden,
            } => {
                if layers == 0 || embed == 0 || hidden == 0 {
                    return Err(Error::invalid("recurrent LM dimensions must be positive"));
                }
                let embedding = Embedding::new(&mut store, "lm.embed", vocab, embed, &mut rng)?;
                let cells = (0..layers)
                    .map(|l| {
                        let input = if l == 0 { embed } else { hidden };
                        LstmCell::new(&mut store, &format!("lm.lstm{l}"), input, hidden, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let output = Linear::new(&mut store, "lm.out", hidden, vocab, true, &mut rng)?;
                Net::Recurrent {
                    embedding,
                    cells,
                    output,
                }
            }
            LmArch::FeedForward {
                order,
                embed,
                hidden,
            } => {
                if order < 2 || embed == 0 || hidden.contains(&0) {
                    return Err(Error::invalid("feedforward LM needs order >= 2 and positive sizes"));
                }
                let embedding = Embedding::new(&mut store, "lm.embed", vocab, embed, &mut rng)?;
                let h0 = Linear::new(
                    &mut store,
                    "lm.hidden0",
                    (order - 1) * embed,
                    hidden[0],
                    true,
                    &mut rng,
                )?;
                let h1 = Linear::new(&mut store, "lm.hidden1", hidden[0], hidden[1], true, &mut rng)?;
                let output = Linear::new(&mut store, "lm.out", hidden[1], vocab, true, &mut rng)?;
                Net::FeedForward {
                    embedding,
                    hidden: [h0, h1],
                    output,
                    order,
                }
            }
            LmArch::Uniform => Net::Uniform,
        };
        Ok(LmModel {
            arch,
            vocab,
            store,
            net,
        })
    }

    /// Uniform distribution over `vocab` tokens.
    pub fn uniform(vocab: usize) -> Result<Self> {
        Self::new(LmArch::Uniform, vocab, 0)
    }

    pub fn arch(&self) -> &LmArch {
        &self.arch
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, token: u32) -> Result<()> {
        if token as usize >= self.vocab {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// State before any token: zero recurrent state with `<s>` pending, or a
    /// context window filled with `<s>`.
    pub fn start(&self) -> LmState {
        match &self.net {
            Net::Recurrent { cells, .. } => {
                let zeros: Vec<Vec<f64>> = cells.iter().map(|c| vec![0.0; c.hidden]).collect();
                LmState::Recurrent {
                    h: zeros.clone(),
                    c: zeros,
                    last: BOS,
                }
            }
            Net::FeedForward { order, .. } => LmState::NGram {
                context: vec![BOS; order - 1],
            },
            Net::Uniform => LmState::Uniform,
        }
    }

    /// Consumes `token` and returns the distribution over the next token.
    pub fn step(&self, state: &LmState, token: u32) -> Result<(Vec<f64>, LmState)> {
        let (logp, mut states) = self.step_batch(std::slice::from_ref(state), &[token])?;
        Ok((logp.into_data(), states.pop().expect("one state")))
    }

    /// [`LmModel::step`] for many hypotheses at once; returns a
    /// `states x vocab` tensor.
    pub fn step_batch(&self, states: &[LmState], tokens: &[u32]) -> Result<(Tensor, Vec<LmState>)> {
        if states.len() != tokens.len() || states.is_empty() {
            return Err(Error::shape(
                "lm_step",
                format!("{} states, {} tokens", states.len(), tokens.len()),
            ));
        }
        for &t in tokens {
            self.check(t)?;
        }
        let b = states.len();
        match &self.net {
            Net::Uniform => Ok((
                Tensor::full(&[b, self.vocab], -(self.vocab as f64).ln()),
                states.iter().map(|_| LmState::Uniform).collect(),
            )),
            Net::FeedForward { order, .. } => {
                let contexts = states
                    .iter()
                    .zip(tokens)
                    .map(|(s, &t)| match s {
                        LmState::NGram { context } if context.len() == order - 1 => {
                            let mut next = context[1..].to_vec();
                            next.push(t);
                            Ok(next)
                        }
                        _ => Err(Error::invalid("state does not belong to this n-gram LM")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut g = Graph::new(&self.store, false);
                let logp = self.ffn_log_probs(&mut g, &contexts)?;
                Ok((
                    g.value(logp).clone(),
                    contexts.into_iter().map(|context| LmState::NGram { context }).collect(),
                ))
            }
            Net::Recurrent {
                embedding,
                cells,
                output,
            } => {
                let mut hs: Vec<Vec<f64>> = vec![Vec::with_capacity(b); cells.len()];
                let mut cs: Vec<Vec<f64>> = vec![Vec::with_capacity(b); cells.len()];
                for s in states {
                    match s {
                        LmState::Recurrent { h, c, .. } if h.len() == cells.len() => {
                            for l in 0..cells.len() {
                                hs[l].extend_from_slice(&h[l]);
                                cs[l].extend_from_slice(&c[l]);
                            }
                        }
                        _ => return Err(Error::invalid("state does not belong to this recurrent LM")),
                    }
                }
                let mut g = Graph::new(&self.store, false);
                let mut x = embedding.forward(&mut g, tokens)?;
                let mut new_h = Vec::with_capacity(cells.len());
                let mut new_c = Vec::with_capacity(cells.len());
                for (l, cell) in cells.iter().enumerate() {
                    let h = g.input(Tensor::matrix(b, cell.hidden, std::mem::take(&mut hs[l]))?)?;
                    let c = g.input(Tensor::matrix(b, cell.hidden, std::mem::take(&mut cs[l]))?)?;
                    let (h2, c2) = cell.step(&mut g, x, h, c)?;
                    new_h.push(h2);
                    new_c.push(c2);
                    x = h2;
                }
                let logits = output.forward(&mut g, x)?;
                let logp = g.log_softmax(logits)?;
                let next = (0..b)
                    .map(|i| LmState::Recurrent {
                        h: new_h.iter().map(|&n| g.value(n).row(i).to_vec()).collect(),
                        c: new_c.iter().map(|&n| g.value(n).row(i).to_vec()).collect(),
                        last: tokens[i],
                    })
                    .collect();
                Ok((g.value(logp).clone(), next))
            }
        }
    }

    fn ffn_log_probs(&self, g: &mut Graph<'_>, contexts: &[Vec<u32>]) -> Result<NodeId> {
        let Net::FeedForward {
            embedding,
            hidden,
            output,
            order,
        } = &self.net
        else {
            unreachable!("only called for feedforward models")
        };
        let parts = (0..order - 1)
            .map(|k| {
                let ids: Vec<u32> = contexts.iter().map(|c| c[k]).collect();
                embedding.forward(g, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = g.concat_cols(&parts)?;
        for layer in hidden {
            let y = layer.forward(g, x)?;
            x = g.tanh(y)?;
        }
        let logits = output.forward(g, x)?;
        g.log_softmax(logits)
    }

    /// Batched teacher-forced pass over `sentences` (without `<s>`/`</s>`).
    /// Row `t * batch + i` predicts token `t` of `sentences[i]` followed by
    /// `</s>`; rows past the end are padding.
    pub fn batch_log_probs(&self, g: &mut Graph<'_>, sentences: &[&[u32]]) -> Result<BatchScores> {
        if sentences.is_empty() {
            return Err(Error::Empty("lm batch"));
        }
        for s in sentences {
            for &t in s.iter() {
                self.check(t)?;
            }
        }
        let b = sentences.len();
        let steps = sentences.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(steps * b);
        let mut targets = Vec::with_capacity(steps * b);
        let mut mask = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for s in sentences {
                inputs.push(match t {
                    0 => BOS,
                    _ => s.get(t - 1).copied().unwrap_or(PAD),
                });
                let (target, m) = match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => (s[t], 1.0),
                    std::cmp::Ordering::Equal => (EOS, 1.0),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                targets.push(target);
                mask.push(m);
            }
        }
        let logp = match &self.net {
            Net::Uniform => g.input(Tensor::full(&[steps * b, self.vocab], -(self.vocab as f64).ln()))?,
            Net::Recurrent {
                embedding,
                cells,
                output,
            } => {
                let mut x = embedding.forward(g, &inputs)?;
                for cell in cells {
                    let h0 = zeros(g, b, cell.hidden)?;
                    let c0 = zeros(g, b, cell.hidden)?;
                    let run = cell.run(g, x, b, h0, c0, false)?;
                    x = g.concat_rows(&run.outputs)?;
                }
                let logits = output.forward(g, x)?;
                g.log_softmax(logits)?
            }
            Net::FeedForward { order, .. } => {
                let n = order - 1;
                let contexts: Vec<Vec<u32>> = (0..steps * b)
                    .map(|row| {
                        let (t, i) = (row / b, row % b);
                        (0..n)
                            .map(|k| {
                                // position of context slot k relative to the prediction at t
                                let back = n - k;
                                if back > t {
                                    BOS
                                } else {
                                    sentences[i].get(t - back).copied().unwrap_or(PAD)
                                }
                            })
                            .collect()
                    })
                    .collect();
                self.ffn_log_probs(g, &contexts)?
            }
        };
        Ok(BatchScores {
            logp,
            targets,
            mask,
            steps,
        })
    }

    /// Summed label-smoothed negative log-likelihood and the number of
    /// predicted tokens.
    pub fn loss(&self, g: &mut Graph<'_>, sentences: &[&[u32]], smoothing: f64) -> Result<(NodeId, usize)> {
        let scores = self.batch_log_probs(g, sentences)?;
        let tokens = scores.mask.iter().filter(|&&m| m > 0.0).count();
        let loss = g.smoothed_nll(scores.logp, &scores.targets, &scores.mask, smoothing)?;
        Ok((loss, tokens))
    }

    /// Per-sentence `(len + 1) x vocab` log-probability rows, one pass per
    /// batch of sentences.
    pub fn score(&self, sentences: &[Vec<u32>]) -> Result<Vec<Tensor>> {
        let chunks: Vec<&[Vec<u32>]> = sentences.chunks(SCORE_BATCH).collect();
        let scored = par::try_map(&chunks, |chunk| {
            let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
            let mut g = Graph::new(&self.store, false);
            let scores = self.batch_log_probs(&mut g, &refs)?;
            let all = g.value(scores.logp);
            let b = refs.len();
            refs.iter()
                .enumerate()
                .map(|(i, s)| {
                    let rows: Vec<&[f64]> = (0..=s.len()).map(|t| all.row(t * b + i)).collect();
                    Tensor::from_rows(&rows)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(scored.into_iter().flatten().collect())
    }

    /// Log-probability of `sentence` followed by `</s>`.
    pub fn sentence_log_prob(&self, sentence: &[u32]) -> Result<f64> {
        let rows = self.score(&[sentence.to_vec()])?.pop().expect("one sentence");
        Ok(sentence
            .iter()
            .chain(std::iter::once(&EOS))
            .enumerate()
            .map(|(t, &y)| rows.row(t)[y as usize])
            .sum())
    }

    /// `exp` of the mean per-token negative log-likelihood, `</s>` included.
    pub fn perplexity(&self, corpus: &[Vec<u32>]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Empty("perplexity corpus"));
        }
        let rows = self.score(corpus)?;
        let mut nll = 0.0;
        let mut count = 0usize;
        for (s, r) in corpus.iter().zip(&rows) {
            for (t, &y) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
                nll -= r.row(t)[y as usize];
                count += 1;
            }
        }
        Ok((nll / count as f64).exp())
    }
}
