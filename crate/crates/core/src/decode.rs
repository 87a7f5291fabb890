//! Greedy, beam and exhaustive caption decoding.
//!
//! `max_len` counts decode steps; emitting END uses a step. Hypotheses still
//! live after `max_len` steps compete with finished ones.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageFeatures;
use crate::model::Model;
use crate::tensor::{log_softmax_row, Element};
use crate::text::{Vocabulary, END, START, UNK};

/// Search-space ceiling for [`brute_force_decode`].
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Next-token log-probabilities given the tokens emitted so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// `prefix` excludes START.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model conditioned on one image.
pub struct ModelScorer<'a, T: Element> {
    pub model: &'a Model<T>,
    pub features: &'a ImageFeatures,
}

impl<'a, T: Element> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, features: &'a ImageFeatures) -> Self {
        ModelScorer { model, features }
    }
}

impl<T: Element> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(START);
        input.extend_from_slice(prefix);
        let logits = self.model.logits(self.features, &input)?;
        Ok(log_softmax_row(logits.row(prefix.len())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, without START and END.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// END was emitted.
    pub finished: bool,
}

impl Hypothesis {
    /// Decode steps consumed.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Rank final hypotheses by log-prob per step instead of the raw sum.
    pub length_norm: bool,
    pub suppress_unk: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_len: 16,
            length_norm: false,
            suppress_unk: false,
        }
    }
}

impl DecodeOptions {
    pub fn with_max_len(max_len: usize) -> Self {
        DecodeOptions {
            max_len,
            ..DecodeOptions::default()
        }
    }

    fn rank_score(&self, h: &Hypothesis) -> f64 {
        if self.length_norm && h.steps() > 0 {
            h.logprob / h.steps() as f64
        } else {
            h.logprob
        }
    }
}

fn step_scores(scorer: &dyn StepScorer, prefix: &[usize], opts: &DecodeOptions) -> Result<Vec<f64>> {
    let mut lp = scorer.log_probs(prefix)?;
    if opts.suppress_unk && UNK < lp.len() {
        lp[UNK] = f64::NEG_INFINITY;
    }
    Ok(lp)
}

/// Per-step argmax, lowest index on ties.
pub fn greedy_decode(scorer: &dyn StepScorer, opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    for _ in 0..opts.max_len {
        let lp = step_scores(scorer, &h.tokens, opts)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        h.logprob += lp[best];
        if best == END {
            h.finished = true;
            break;
        }
        h.tokens.push(best);
    }
    Ok(h)
}

/// Result of [`beam_search`]: the best hypothesis first, then the rest of
/// the completed pool in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub nbest: Vec<Hypothesis>,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[0]
    }
}

/// Standard beam search over summed log-probabilities.
///
/// Every live hypothesis is expanded over the full vocabulary and the top
/// `width` candidates survive (ties resolved by token index, then parent
/// rank). Candidates ending in END move to the completed pool.
pub fn beam_search(scorer: &dyn StepScorer, width: usize, opts: &DecodeOptions) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (rank, h) in live.iter().enumerate() {
            let lp = step_scores(scorer, &h.tokens, opts)?;
            for (tok, &v) in lp.iter().enumerate() {
                candidates.push((h.logprob + v, tok, rank));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, tok, rank) in candidates {
            let mut tokens = live[rank].tokens.clone();
            if tok == END {
                completed.push(Hypothesis {
                    tokens,
                    logprob: score,
                    finished: true,
                });
            } else {
                tokens.push(tok);
                next.push(Hypothesis {
                    tokens,
                    logprob: score,
                    finished: false,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    completed.extend(live);
    // Stable sort keeps pool order among equal scores.
    completed.sort_by(|a, b| opts.rank_score(b).total_cmp(&opts.rank_score(a)));
    Ok(BeamResult { nbest: completed })
}

/// Exhaustive argmax over every sequence the decoder can emit within
/// `max_len` steps; also returns how many sequences were scored.
pub fn brute_force_decode(scorer: &dyn StepScorer, opts: &DecodeOptions) -> Result<(Hypothesis, usize)> {
    let v = scorer.vocab_size() as u128;
    let size = (0..opts.max_len)
        .try_fold(1u128, |acc, _| acc.checked_mul(v))
        .unwrap_or(u128::MAX);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpace {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut best: Option<Hypothesis> = None;
    let mut count = 0usize;
    let mut prefix = Vec::new();
    explore(scorer, opts, &mut prefix, 0.0, &mut best, &mut count)?;
    let best = best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    });
    Ok((best, count))
}

fn explore(
    scorer: &dyn StepScorer,
    opts: &DecodeOptions,
    prefix: &mut Vec<usize>,
    score: f64,
    best: &mut Option<Hypothesis>,
    count: &mut usize,
) -> Result<()> {
    if prefix.len() == opts.max_len {
        consider(opts, prefix, score, false, best, count);
        return Ok(());
    }
    let lp = step_scores(scorer, prefix, opts)?;
    for (tok, &v) in lp.iter().enumerate() {
        if tok == END {
            consider(opts, prefix, score + v, true, best, count);
        } else {
            prefix.push(tok);
            explore(scorer, opts, prefix, score + v, best, count)?;
            prefix.pop();
        }
    }
    Ok(())
}

fn consider(
    opts: &DecodeOptions,
    tokens: &[usize],
    logprob: f64,
    finished: bool,
    best: &mut Option<Hypothesis>,
    count: &mut usize,
) {
    *count += 1;
    let h = Hypothesis {
        tokens: tokens.to_vec(),
        logprob,
        finished,
    };
    if best.as_ref().is_none_or(|b| opts.rank_score(&h) > opts.rank_score(b)) {
        *best = Some(h);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    pub rank: usize,
    pub tokens: Vec<String>,
    pub logprob: f64,
}

/// Appends one image's n-best list as JSON lines.
pub fn write_nbest(mut w: impl Write, id: &str, hyps: &[Hypothesis], vocab: &Vocabulary) -> Result<()> {
    for (rank, h) in hyps.iter().enumerate() {
        let rec = NBestRecord {
            id: id.to_string(),
            rank,
            tokens: vocab.decode(&h.tokens)?,
            logprob: h.logprob,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}
