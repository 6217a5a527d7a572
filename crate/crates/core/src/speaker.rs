//! Conditional LSTM language model `P(r | o)` with likelihood and
//! max-margin training losses, ancestral sampling and beam search.

use std::cmp::Ordering;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::autodiff::{Array, Graph, Linear, Lstm, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{pad, ModelConfig, EMBED};
use crate::rng::Rng;
use crate::world::{BEGIN, END};

#[derive(Clone, Debug)]
pub struct Speaker {
    pub input: Linear,
    pub lstm: Lstm,
    pub out: Linear,
    pub word_dropout: f64,
    pub lstm_dropout: f64,
}

impl Speaker {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cond = if cfg.listener_input {
            cfg.embed + cfg.joint
        } else {
            cfg.embed
        };
        Self {
            input: Linear::new("speaker.in", cond, cfg.embed),
            lstm: Lstm::new("speaker.lstm", cfg.embed, cfg.hidden),
            out: Linear::new("speaker.out", cfg.hidden, cfg.vocab_size),
            word_dropout: cfg.word_dropout,
            lstm_dropout: cfg.lstm_dropout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.input.init(store, rng)?;
        self.lstm.init(store, rng)?;
        self.out.init(store, rng)
    }

    /// Step zero: the projected visual conditioning is the first LSTM input.
    pub fn start(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<(Var, Var)> {
        let x = self.input.forward(g, store, cond)?;
        let rows = g.value(x).rows();
        let (h, c) = self.lstm.zero_state(g, rows);
        self.lstm.step(g, store, x, h, c)
    }

    /// Feeds `prev` and returns next-token logits with the new state.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: (Var, Var),
        prev: &[usize],
        rng: &mut Rng,
    ) -> Result<(Var, (Var, Var))> {
        let table = g.param(store, EMBED)?;
        let x = g.embedding(table, prev)?;
        let x = g.dropout(x, self.word_dropout, rng)?;
        let (h, c) = self.lstm.step(g, store, x, state.0, state.1)?;
        let hd = g.dropout(h, self.lstm_dropout, rng)?;
        let logits = self.out.forward(g, store, hd)?;
        Ok((logits, (h, c)))
    }

    /// `log P(r | o)` for every row under teacher forcing; each expression
    /// ends with END and its probability is included. Returns `n x 1`.
    pub fn log_likelihood<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cond: Var,
        exprs: &[S],
        rng: &mut Rng,
    ) -> Result<Var> {
        let n = exprs.len();
        if g.value(cond).rows() != n {
            return Err(Error::Shape {
                op: "log_likelihood",
                lhs: g.value(cond).shape().to_vec(),
                rhs: vec![n],
            });
        }
        let p = pad(exprs)?;
        let mut state = self.start(g, store, cond)?;
        let mut prev = vec![BEGIN; n];
        let mut total: Option<Var> = None;
        for (tokens, mask) in p.steps.iter().zip(p.masks) {
            let (logits, next) = self.step(g, store, state, &prev, rng)?;
            let lp = g.log_softmax(logits)?;
            let picked = g.pick(lp, tokens)?;
            let m = g.constant(mask);
            let term = g.mul(picked, m)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
            state = next;
            prev.clone_from(tokens);
        }
        total.ok_or(Error::Empty("token sequence"))
    }

    pub fn policy<'a>(
        &'a self,
        g: &mut Graph,
        store: &'a ParamStore,
        cond: Var,
        dropout_rng: &'a mut Rng,
    ) -> Result<SpeakerPolicy<'a>> {
        let state = self.start(g, store, cond)?;
        Ok(SpeakerPolicy {
            speaker: self,
            store,
            state,
            rows: g.value(cond).rows(),
            rng: dropout_rng,
        })
    }
}

/// Weights and margin of a two-sided ranking hinge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    pub margin: f64,
    pub object_weight: f64,
    pub expression_weight: f64,
}

/// Batch mean of
/// `w1 * max(0, M + neg_obj - pos) + w2 * max(0, M + neg_expr - pos)`,
/// where masked-out rows contribute zero to their term.
pub fn ranking_loss(
    g: &mut Graph,
    pos: Var,
    neg_obj: Var,
    neg_expr: Var,
    obj_mask: &[f64],
    expr_mask: &[f64],
    m: Margins,
) -> Result<Var> {
    let n = g.value(pos).rows();
    let mut terms = Vec::with_capacity(2);
    for (neg, mask, w) in [
        (neg_obj, obj_mask, m.object_weight),
        (neg_expr, expr_mask, m.expression_weight),
    ] {
        if w == 0.0 {
            continue;
        }
        let d = g.sub(neg, pos)?;
        let d = g.add_scalar(d, m.margin)?;
        let h = g.hinge(d);
        let mask = g.constant(Array::new(vec![n, 1], mask.to_vec())?);
        let h = g.mul(h, mask)?;
        terms.push(g.scale(h, w));
    }
    let sum = match terms[..] {
        [] => {
            let z = g.constant(Array::zeros(&[n, 1]));
            return g.mean(z);
        }
        [a] => a,
        [a, b] => g.add(a, b)?,
        _ => unreachable!(),
    };
    g.mean(sum)
}

/// Generalised MMI margin loss over speaker log-likelihoods of the positive
/// pair, the object negative and the expression negative.
pub fn mmi_loss(
    g: &mut Graph,
    lp_pos: Var,
    lp_neg_obj: Var,
    lp_neg_expr: Var,
    obj_mask: &[f64],
    expr_mask: &[f64],
    m: Margins,
) -> Result<Var> {
    ranking_loss(g, lp_pos, lp_neg_obj, lp_neg_expr, obj_mask, expr_mask, m)
}

/// A left-to-right token distribution built inside a graph.
pub trait SequencePolicy {
    fn rows(&self) -> usize;
    /// Logits of the next token for every row, given each row's previous token.
    fn next_logits(&mut self, g: &mut Graph, prev: &[usize]) -> Result<Var>;
}

pub struct SpeakerPolicy<'a> {
    speaker: &'a Speaker,
    store: &'a ParamStore,
    state: (Var, Var),
    rows: usize,
    rng: &'a mut Rng,
}

impl SequencePolicy for SpeakerPolicy<'_> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn next_logits(&mut self, g: &mut Graph, prev: &[usize]) -> Result<Var> {
        let (logits, state) = self
            .speaker
            .step(g, self.store, self.state, prev, self.rng)?;
        self.state = state;
        Ok(logits)
    }
}

/// Sampled sequences with their differentiable log-probabilities.
#[derive(Debug)]
pub struct Samples {
    /// Tokens of every row, END included.
    pub sequences: Vec<Vec<usize>>,
    /// Rows that hit the length cap; their END carries no probability term.
    pub truncated: Vec<bool>,
    /// `n x 1` sum of the log-probabilities of the drawn tokens.
    pub log_prob: Var,
}

/// Draws one sequence per row, token by token from the softmax of
/// `logits / temperature`; temperature 0 takes the argmax. Rows stop at END
/// or after `max_len` other tokens.
pub fn sample_sequences<P: SequencePolicy>(
    g: &mut Graph,
    policy: &mut P,
    temperature: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Samples> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature {temperature} must be >= 0"
        )));
    }
    let n = policy.rows();
    let mut sequences: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut total = g.constant(Array::zeros(&[n, 1]));
    let mut prev = vec![BEGIN; n];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let logits = policy.next_logits(g, &prev)?;
        let scaled = if temperature > 0.0 && temperature != 1.0 {
            g.scale(logits, 1.0 / temperature)
        } else {
            logits
        };
        let lp = g.log_softmax(scaled)?;
        let mut picks = vec![END; n];
        let mut mask = vec![0.0; n];
        let values = g.value(lp).clone();
        for r in 0..n {
            if done[r] {
                continue;
            }
            let row = values.row(r);
            let tok = if temperature == 0.0 {
                argmax(row)
            } else {
                let w: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::Config(format!("sampling weights: {e}")))?
                    .sample(rng)
            };
            g.record_discrete(tok as u64);
            picks[r] = tok;
            mask[r] = 1.0;
            sequences[r].push(tok);
            if tok == END {
                done[r] = true;
            }
        }
        let picked = g.pick(lp, &picks)?;
        let m = g.constant(Array::new(vec![n, 1], mask)?);
        let term = g.mul(picked, m)?;
        total = g.add(total, term)?;
        prev = picks;
    }
    let truncated: Vec<bool> = done.iter().map(|d| !d).collect();
    for (s, &t) in sequences.iter_mut().zip(&truncated) {
        if t {
            s.push(END);
        }
    }
    Ok(Samples {
        sequences,
        truncated,
        log_prob: total,
    })
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Next-token log-probabilities for a batch of decoding states.
pub trait StepModel {
    type State: Clone;
    fn initial(&self) -> Result<Self::State>;
    fn advance(
        &self,
        states: &[Self::State],
        prev: &[usize],
    ) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Tokens, END included.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
}

/// Descending score, then ascending token sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beam` best partial sequences by summed log-probability; a
/// hypothesis completes on END or at `max_len` tokens. Returns up to `beam`
/// completed hypotheses, best first.
pub fn beam_search<M: StepModel>(
    model: &M,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    struct Live<S> {
        tokens: Vec<usize>,
        log_prob: f64,
        state: S,
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial()?,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    if max_len == 0 {
        return Ok(vec![Hypothesis {
            tokens: vec![END],
            log_prob: 0.0,
            truncated: true,
        }]);
    }
    while !live.is_empty() && done.len() < beam {
        let states: Vec<M::State> = live.iter().map(|l| l.state.clone()).collect();
        let prev: Vec<usize> = live
            .iter()
            .map(|l| l.tokens.last().copied().unwrap_or(BEGIN))
            .collect();
        let stepped = model.advance(&states, &prev)?;
        let mut cands: Vec<(Hypothesis, usize)> = Vec::new();
        for (i, (lp, _)) in stepped.iter().enumerate() {
            for (w, &l) in lp.iter().enumerate() {
                let mut tokens = live[i].tokens.clone();
                tokens.push(w);
                let finished = w == END || tokens.len() == max_len;
                let truncated = w != END && finished;
                if truncated {
                    tokens.push(END);
                }
                cands.push((
                    Hypothesis {
                        tokens,
                        log_prob: live[i].log_prob + l,
                        truncated,
                    },
                    i,
                ));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(beam - done.len());
        let mut next = Vec::new();
        for (h, i) in cands {
            if *h.tokens.last().expect("non-empty") == END {
                done.push(h);
            } else {
                next.push(Live {
                    tokens: h.tokens,
                    log_prob: h.log_prob,
                    state: stepped[i].1.clone(),
                });
            }
        }
        live = next;
    }
    done.sort_by(rank);
    done.truncate(beam);
    Ok(done)
}

/// Argmax decoding.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.initial()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = BEGIN;
    while tokens.len() < max_len {
        let (lp, next) = model
            .advance(std::slice::from_ref(&state), &[prev])?
            .pop()
            .expect("one row");
        let w = argmax(&lp);
        log_prob += lp[w];
        tokens.push(w);
        if w == END {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                truncated: false,
            });
        }
        state = next;
        prev = w;
    }
    tokens.push(END);
    Ok(Hypothesis {
        tokens,
        log_prob,
        truncated: true,
    })
}

/// The speaker conditioned on one fused visual input, decoded without dropout.
pub struct SpeakerStepper<'a> {
    pub speaker: &'a Speaker,
    pub store: &'a ParamStore,
    pub cond: Vec<f64>,
}

/// Hidden and cell rows of one decoding state.
pub type LstmState = (Vec<f64>, Vec<f64>);

impl StepModel for SpeakerStepper<'_> {
    type State = LstmState;

    fn initial(&self) -> Result<LstmState> {
        let mut g = Graph::eval();
        let cond = g.constant(Array::from_rows(&[&self.cond[..]])?);
        let (h, c) = self.speaker.start(&mut g, self.store, cond)?;
        Ok((g.value(h).row(0).to_vec(), g.value(c).row(0).to_vec()))
    }

    fn advance(&self, states: &[LstmState], prev: &[usize]) -> Result<Vec<(Vec<f64>, LstmState)>> {
        let mut g = Graph::eval();
        let hs: Vec<&[f64]> = states.iter().map(|s| &s.0[..]).collect();
        let cs: Vec<&[f64]> = states.iter().map(|s| &s.1[..]).collect();
        let h = g.constant(Array::from_rows(&hs)?);
        let c = g.constant(Array::from_rows(&cs)?);
        let mut unused = crate::rng::seeded(0);
        let (logits, (h, c)) = self
            .speaker
            .step(&mut g, self.store, (h, c), prev, &mut unused)?;
        let lp = g.log_softmax(logits)?;
        let (lp, h, c) = (g.value(lp), g.value(h), g.value(c));
        Ok((0..states.len())
            .map(|r| (lp.row(r).to_vec(), (h.row(r).to_vec(), c.row(r).to_vec())))
            .collect())
    }
}
