//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use super::network::{Forward, MemoryKv};
use super::{ModelConfig, ModelParams};
use crate::data_synth::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numeric::{log_softmax_row, Real, Tape, Tensor, Var};

/// Anything that can score the next token given a `bos`-prefixed history.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary for the token after `prefix`.
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A partial or complete decoded title.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationHypothesis {
    /// Generated tokens, excluding the leading `bos`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl GenerationHypothesis {
    pub fn score(&self) -> f64 {
        length_normalized(self.log_prob, self.tokens.len())
    }
}

/// Accumulated log-probability divided by the number of generated tokens.
pub fn length_normalized(log_prob: f64, len: usize) -> f64 {
    if len == 0 {
        log_prob
    } else {
        log_prob / len as f64
    }
}

fn generable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

fn with_bos(tokens: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(BOS);
    v.extend_from_slice(tokens);
    v
}

/// Picks the most likely token at every step until `eos` or `max_len` tokens.
pub fn greedy_decode<S: NextTokenScorer>(
    scorer: &mut S,
    max_len: usize,
) -> Result<GenerationHypothesis> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut hyp = GenerationHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = scorer.log_probs(&with_bos(&hyp.tokens))?;
        let (tok, best) = lp.iter().enumerate().filter(|(t, _)| generable(*t)).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |(bt, bv), (t, &v)| {
                if v > bv {
                    (t, v)
                } else {
                    (bt, bv)
                }
            },
        );
        if tok == usize::MAX {
            return Err(Error::contract("scorer assigns no finite probability"));
        }
        hyp.tokens.push(tok);
        hyp.log_prob += best;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

struct Ranked {
    hyp: GenerationHypothesis,
    finish_order: usize,
}

/// Higher normalized score first, then the lexicographically smaller token
/// sequence, then the earlier finish.
fn rank(a: &Ranked, b: &Ranked) -> Ordering {
    b.hyp
        .score()
        .partial_cmp(&a.hyp.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.hyp.tokens.cmp(&b.hyp.tokens))
        .then_with(|| a.finish_order.cmp(&b.finish_order))
}

/// Length-normalized beam search.
///
/// Each step expands every live hypothesis by every generable token and keeps
/// the `beam_size` best by accumulated log-probability; candidates ending in
/// `eos` leave the beam as finished hypotheses. The greedy path is always in
/// the final candidate pool, so the result never scores below greedy decoding.
pub fn beam_search<S: NextTokenScorer>(
    scorer: &mut S,
    beam_size: usize,
    max_len: usize,
) -> Result<GenerationHypothesis> {
    if beam_size == 0 {
        return Err(Error::contract("beam_size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let vocab = scorer.vocab_size();
    let mut alive = vec![GenerationHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Ranked> = Vec::new();

    for _ in 0..max_len {
        // (score, hypothesis index, token)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * vocab);
        for (hi, h) in alive.iter().enumerate() {
            let lp = scorer.log_probs(&with_bos(&h.tokens))?;
            for (tok, &l) in lp.iter().enumerate() {
                if generable(tok) && l.is_finite() {
                    candidates.push((h.log_prob + l, hi, tok));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| alive[a.1].tokens.cmp(&alive[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam_size);
        for &(score, hi, tok) in candidates.iter().take(beam_size) {
            let mut tokens = alive[hi].tokens.clone();
            tokens.push(tok);
            let hyp = GenerationHypothesis {
                tokens,
                log_prob: score,
                finished: tok == EOS,
            };
            if hyp.finished {
                let finish_order = finished.len();
                finished.push(Ranked { hyp, finish_order });
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }

    let mut pool = finished;
    if beam_size > 1 {
        let greedy = greedy_decode(scorer, max_len)?;
        let finish_order = pool.len();
        pool.push(Ranked {
            hyp: greedy,
            finish_order,
        });
    }
    if pool.is_empty() {
        pool = alive
            .into_iter()
            .enumerate()
            .map(|(i, hyp)| Ranked {
                hyp,
                finish_order: i,
            })
            .collect();
    }
    pool.sort_by(rank);
    pool.into_iter()
        .next()
        .map(|r| r.hyp)
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

/// Scores next tokens with the trained decoder over fixed memory.
///
/// Cross-attention keys and values are projected once at construction.
pub struct DecoderScorer<'p, F: Real> {
    params: &'p ModelParams<F>,
    config: &'p ModelConfig,
    kv: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<'p, F: Real> DecoderScorer<'p, F> {
    pub fn new(
        params: &'p ModelParams<F>,
        config: &'p ModelConfig,
        memory: &Tensor<F>,
    ) -> Result<Self> {
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(params, config);
        let m = tape.input(memory);
        let kv = fwd.memory_kv(&mut tape, m)?;
        let kv = kv
            .iter()
            .map(|p| (tape.tensor(p.keys), tape.tensor(p.values)))
            .collect();
        Ok(DecoderScorer { params, config, kv })
    }
}

impl<F: Real> NextTokenScorer for DecoderScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(self.params, self.config);
        let kv: Vec<MemoryKv> = self
            .kv
            .iter()
            .map(|(k, v)| MemoryKv {
                keys: tape.input(k),
                values: tape.input(v),
            })
            .collect();
        let h = fwd.decoder_hidden(&mut tape, prefix, &kv)?;
        let last: Var = tape.slice_rows(h, prefix.len() - 1, 1)?;
        let logits = fwd.output_logits(&mut tape, last)?;
        Ok(log_softmax_row(tape.value(logits))
            .into_iter()
            .map(Real::as_f64)
            .collect())
    }
}

/// Decodes a title for `memory` with the trained decoder.
pub fn generate<F: Real>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    memory: &Tensor<F>,
    beam_size: usize,
) -> Result<GenerationHypothesis> {
    let mut scorer = DecoderScorer::new(params, config, memory)?;
    beam_search(&mut scorer, beam_size, config.max_title_len)
}
