//! Greedy, beam and exact decoding for either output head.
//!
//! Conventions shared by every decoder:
//!
//! * output token lists exclude the leading BOS and end with EOS when finished;
//! * a length bound `max_len` counts output tokens including EOS;
//! * PAD and BOS are never emitted, while scores still normalise over the full
//!   vocabulary (softmax) or use the raw per-token sigmoid (SCONES);
//! * ties go to the lowest token id.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::{TokenId, BOS, EOS, PAD};
use crate::exec::{try_map_indexed, Exec};
use crate::losses::Head;
use crate::model::{ModelError, StepModel};

/// Cap on explored states per sentence for exact search.
pub const DEFAULT_MAX_STATES: u64 = 1_000_000;
/// Beam size whose result seeds the exact-search bound.
pub const DEFAULT_SEED_BEAM: usize = 4;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed target: {0}")]
    MalformedTarget(String),
    #[error("invalid decoder argument: {0}")]
    InvalidArgument(String),
    #[error("result lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Default length bound for a source of `source_len` tokens.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    /// Last token is EOS.
    pub finished: bool,
    /// Set only by exact search that finished below its state cap.
    pub exact: bool,
    pub states_explored: u64,
    pub wall_time: Duration,
}

impl DecodeResult {
    /// Tokens without the trailing EOS.
    pub fn words(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn emittable(t: usize) -> bool {
    t != PAD as usize && t != BOS as usize
}

/// Highest-logit emittable token, lowest id on ties.
fn argmax_emittable(logits: &[f64]) -> TokenId {
    let mut best = None::<(usize, f64)>;
    for (t, &v) in logits.iter().enumerate() {
        if emittable(t) && best.map_or(true, |(_, b)| v > b) {
            best = Some((t, v));
        }
    }
    best.expect("vocabulary has emittable tokens").0 as TokenId
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(DecodeError::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Picks the highest raw logit at every step. The reported score is the
/// head's sequence log score of the output.
pub fn greedy_decode<M: StepModel>(model: &M, head: Head, source: &[TokenId], max_len: usize) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    let t0 = Instant::now();
    let mut state = model.start(source)?;
    let mut logits = model.push(&mut state, BOS)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut states = 1;
    loop {
        let tok = argmax_emittable(&logits);
        score += head.log_scores(&logits)[tok as usize];
        tokens.push(tok);
        if tok == EOS || tokens.len() == max_len {
            break;
        }
        logits = model.push(&mut state, tok)?;
        states += 1;
    }
    Ok(DecodeResult {
        finished: tokens.last() == Some(&EOS),
        tokens,
        score,
        exact: false,
        states_explored: states,
        wall_time: t0.elapsed(),
    })
}

struct Hyp<S> {
    tokens: Vec<TokenId>,
    score: f64,
    finished: bool,
    state: Option<S>,
    /// Logits for the next position; empty once finished.
    logits: Vec<f64>,
}

struct Candidate {
    parent: usize,
    token: Option<TokenId>,
    score: f64,
    logit: f64,
}

/// Best first; ties by parent rank, then higher logit, then lower token id.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.parent.cmp(&b.parent))
        .then(b.logit.partial_cmp(&a.logit).unwrap_or(Ordering::Equal))
        .then(a.token.cmp(&b.token))
}

/// Vanilla beam search without length normalisation.
///
/// Finished hypotheses stay in the beam and compete with expansions of the
/// unfinished ones. Search stops when all survivors are finished or after
/// `max_len` steps. The n-best list puts finished hypotheses first, each group
/// sorted by score.
pub fn beam_decode<M: StepModel>(
    model: &M,
    head: Head,
    source: &[TokenId],
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<DecodeResult>> {
    check_max_len(max_len)?;
    if beam_size == 0 {
        return Err(DecodeError::InvalidArgument("beam size must be at least 1".into()));
    }
    let t0 = Instant::now();
    let mut state = model.start(source)?;
    let logits = model.push(&mut state, BOS)?;
    let mut states = 1;
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        state: Some(state),
        logits,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut cands = Vec::new();
        for (p, h) in beam.iter().enumerate() {
            if h.finished {
                cands.push(Candidate {
                    parent: p,
                    token: None,
                    score: h.score,
                    logit: f64::INFINITY,
                });
                continue;
            }
            let ls = head.log_scores(&h.logits);
            for (t, &s) in ls.iter().enumerate() {
                if emittable(t) {
                    cands.push(Candidate {
                        parent: p,
                        token: Some(t as TokenId),
                        score: h.score + s,
                        logit: h.logits[t],
                    });
                }
            }
        }
        let k = beam_size.min(cands.len());
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, candidate_order);
            cands.truncate(k);
        }
        cands.sort_by(candidate_order);
        let mut next = Vec::with_capacity(k);
        for c in &cands {
            let parent = &beam[c.parent];
            let Some(tok) = c.token else {
                next.push(Hyp {
                    tokens: parent.tokens.clone(),
                    score: parent.score,
                    finished: true,
                    state: None,
                    logits: Vec::new(),
                });
                continue;
            };
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let at_limit = tokens.len() == max_len;
            let (state, logits) = if tok == EOS || at_limit {
                (None, Vec::new())
            } else {
                let mut st = parent.state.clone().expect("unfinished hypothesis keeps its state");
                let l = model.push(&mut st, tok)?;
                states += 1;
                (Some(st), l)
            };
            next.push(Hyp {
                tokens,
                score: c.score,
                finished: tok == EOS,
                state,
                logits,
            });
        }
        beam = next;
    }
    let wall = t0.elapsed();
    let mut out: Vec<DecodeResult> = beam
        .into_iter()
        .map(|h| DecodeResult {
            tokens: h.tokens,
            score: h.score,
            finished: h.finished,
            exact: false,
            states_explored: states,
            wall_time: wall,
        })
        .collect();
    out.sort_by(|a, b| {
        b.finished
            .cmp(&a.finished)
            .then(b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal))
    });
    Ok(out)
}

/// Best hypothesis of a beam search.
pub fn beam_best<M: StepModel>(
    model: &M,
    head: Head,
    source: &[TokenId],
    beam_size: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    Ok(beam_decode(model, head, source, beam_size, max_len)?.swap_remove(0))
}

struct Dfs<'a, M: StepModel> {
    model: &'a M,
    head: Head,
    max_len: usize,
    max_states: u64,
    states: u64,
    capped: bool,
    best_score: f64,
    best: Option<Vec<TokenId>>,
    prefix: Vec<TokenId>,
}

impl<M: StepModel> Dfs<'_, M> {
    fn visit(&mut self, state: &mut M::State, logits: &[f64], score: f64) -> Result<()> {
        let ls = self.head.log_scores(logits);
        let mut order: Vec<usize> = if self.prefix.len() + 1 >= self.max_len {
            vec![EOS as usize]
        } else {
            (0..logits.len()).filter(|&t| emittable(t)).collect()
        };
        // Log score is increasing in the logit for both heads, so once one
        // child cannot beat the bound neither can any later one.
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for t in order {
            let s = score + ls[t];
            if s <= self.best_score {
                break;
            }
            self.prefix.push(t as TokenId);
            if t == EOS as usize {
                self.best_score = s;
                self.best = Some(self.prefix.clone());
            } else {
                if self.states >= self.max_states {
                    self.capped = true;
                    self.prefix.pop();
                    return Ok(());
                }
                self.states += 1;
                let depth = self.prefix.len();
                let child = self.model.push(state, t as TokenId)?;
                self.visit(state, &child, s)?;
                self.model.truncate(state, depth);
                if self.capped {
                    self.prefix.pop();
                    return Ok(());
                }
            }
            self.prefix.pop();
        }
        Ok(())
    }
}

/// Depth-first search for the highest-scoring EOS-terminated output of at
/// most `max_len` tokens.
///
/// A prefix is abandoned as soon as its score is no better than the best
/// finished output so far, which is sound because every per-token log score
/// is at most zero. `seed` (usually a beam result) initialises that bound; an
/// unfinished seed is ignored. Hitting `max_states` returns the best output
/// found so far with `exact == false`.
pub fn exact_decode<M: StepModel>(
    model: &M,
    head: Head,
    source: &[TokenId],
    max_len: usize,
    max_states: u64,
    seed: Option<&DecodeResult>,
) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    if max_states == 0 {
        return Err(DecodeError::InvalidArgument("max_states must be at least 1".into()));
    }
    let t0 = Instant::now();
    let mut state = model.start(source)?;
    let logits = model.push(&mut state, BOS)?;
    let seed = seed.filter(|s| s.finished && s.tokens.len() <= max_len);
    let mut dfs = Dfs {
        model,
        head,
        max_len,
        max_states,
        states: 1,
        capped: false,
        best_score: seed.map_or(f64::NEG_INFINITY, |s| s.score),
        best: seed.map(|s| s.tokens.clone()),
        prefix: Vec::new(),
    };
    dfs.visit(&mut state, &logits, 0.0)?;
    let tokens = dfs.best.unwrap_or_default();
    Ok(DecodeResult {
        finished: tokens.last() == Some(&EOS),
        tokens,
        score: dfs.best_score,
        exact: !dfs.capped,
        states_explored: dfs.states,
        wall_time: t0.elapsed(),
    })
}

/// Exact search seeded with the beam-4 result, as used by the experiments.
pub fn exact_decode_seeded<M: StepModel>(
    model: &M,
    head: Head,
    source: &[TokenId],
    max_len: usize,
    max_states: u64,
) -> Result<DecodeResult> {
    let seed = beam_best(model, head, source, DEFAULT_SEED_BEAM, max_len)?;
    exact_decode(model, head, source, max_len, max_states, Some(&seed))
}

/// Sum of per-step head log scores of `target` (which must end in EOS and
/// contain no other EOS, PAD or BOS). The implicit empty-prefix term is zero.
pub fn sequence_logprob<M: StepModel>(model: &M, head: Head, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
    match target.split_last() {
        Some((&EOS, body)) => {
            if let Some(bad) = body.iter().find(|&&t| t == EOS || t == PAD || t == BOS) {
                return Err(DecodeError::MalformedTarget(format!("reserved id {bad} inside target")));
            }
        }
        _ => return Err(DecodeError::MalformedTarget("target must end with EOS".into())),
    }
    let v = model.vocab_size();
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= v) {
        return Err(ModelError::TokenOutOfRange { id: bad, vocab: v }.into());
    }
    let mut state = model.start(source)?;
    let mut logits = model.push(&mut state, BOS)?;
    let mut total = 0.0;
    for (i, &t) in target.iter().enumerate() {
        total += head.log_scores(&logits)[t as usize];
        if i + 1 < target.len() {
            logits = model.push(&mut state, t)?;
        }
    }
    Ok(total)
}

/// Score of a forced output; the empty translation is `[EOS]`.
pub fn force_score<M: StepModel>(model: &M, head: Head, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
    sequence_logprob(model, head, source, target)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchErrors {
    /// Errors over counted sentences; zero when nothing was counted.
    pub rate: f64,
    pub errors: usize,
    pub counted: usize,
    /// Sentences skipped because exact search hit its state cap.
    pub approximate: usize,
}

/// Fraction of sentences where beam output differs from the exact mode.
/// Sentences whose exact search was capped are excluded and counted apart.
pub fn search_error_rate(beam: &[DecodeResult], exact: &[DecodeResult]) -> Result<SearchErrors> {
    if beam.len() != exact.len() {
        return Err(DecodeError::LengthMismatch(beam.len(), exact.len()));
    }
    let (mut errors, mut counted, mut approximate) = (0, 0, 0);
    for (b, e) in beam.iter().zip(exact) {
        if !e.exact {
            approximate += 1;
            continue;
        }
        counted += 1;
        if b.tokens != e.tokens {
            errors += 1;
        }
    }
    Ok(SearchErrors {
        rate: if counted == 0 { 0.0 } else { errors as f64 / counted as f64 },
        errors,
        counted,
        approximate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchMode {
    Greedy,
    Beam(usize),
    Exact { max_states: u64 },
}

/// Decodes every source independently; `max_len` of `None` uses the
/// per-sentence default.
pub fn decode_all<M: StepModel>(
    model: &M,
    head: Head,
    sources: &[Vec<TokenId>],
    mode: SearchMode,
    max_len: Option<usize>,
    exec: Exec,
) -> Result<Vec<DecodeResult>> {
    try_map_indexed(exec, sources.len(), |i| {
        let src = &sources[i];
        let ml = max_len.unwrap_or_else(|| default_max_len(src.len()));
        match mode {
            SearchMode::Greedy => greedy_decode(model, head, src, ml),
            SearchMode::Beam(k) => beam_best(model, head, src, k, ml),
            SearchMode::Exact { max_states } => exact_decode_seeded(model, head, src, ml, max_states),
        }
    })
}
