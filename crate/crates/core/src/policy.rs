//! Shared-backbone autoregressive policy.
//!
//! One parameter vector serves both the pairwise evaluator (EVAL mode) and
//! the reprompter (REPROMPT mode). A step distribution is
//!
//! ```text
//! c      = W_ctx · r                      r = [pool(alias); pool(p0); mode; ψ]
//! s      = tanh(W_h · [c; m] + b_h)       m = mean embedding of the prefix
//! logits = W_v · s + b_v
//! ```
//!
//! followed by a softmax, renormalized over the grammar-allowed tokens when
//! the mask is on. Gradients are computed in closed form.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::vecmath::dot;
use crate::vocab::{TokenId, TokenSeq, Vocab, ANS_CLOSE, ANS_OPEN, EOS, NO, THINK_CLOSE, THINK_OPEN, YES};
use crate::world::{Condition, Image, Instruction, WorldSpec};

/// Length of the pair-feature block ψ.
pub const PAIR_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Eval,
    Reprompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    pub fn token(self) -> TokenId {
        match self {
            Verdict::Yes => YES,
            Verdict::No => NO,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Verdict::Yes => Verdict::No,
            Verdict::No => Verdict::Yes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn raw_context(&self) -> usize {
        2 * self.hidden + 2 + PAIR_FEATURES
    }

    pub fn param_count(&self) -> usize {
        let (v, h, r) = (self.vocab, self.hidden, self.raw_context());
        v * h + h * r + h * 2 * h + h + v * h + v
    }
}

/// Flattened θ in the fixed order Eemb, W_ctx, W_h, b_h, W_v, b_v
/// (matrices row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    dims: Dims,
    data: Vec<f64>,
}

struct Offsets {
    w_ctx: usize,
    w_h: usize,
    b_h: usize,
    w_v: usize,
    b_v: usize,
}

impl Dims {
    fn offsets(&self) -> Offsets {
        let (v, h, r) = (self.vocab, self.hidden, self.raw_context());
        let w_ctx = v * h;
        let w_h = w_ctx + h * r;
        let b_h = w_h + h * 2 * h;
        let w_v = b_h + h;
        let b_v = w_v + v * h;
        Offsets {
            w_ctx,
            w_h,
            b_h,
            w_v,
            b_v,
        }
    }
}

impl PolicyParams {
    pub fn zeros(dims: Dims) -> Self {
        PolicyParams {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Weights ~ N(0, scale²), biases zero.
    pub fn init(dims: Dims, stream: &mut Stream, scale: f64) -> Self {
        let mut p = Self::zeros(dims);
        let o = dims.offsets();
        for i in 0..p.data.len() {
            let is_bias = (o.b_h..o.w_v).contains(&i) || i >= o.b_v;
            if !is_bias {
                let z: f64 = StandardNormal.sample(stream);
                p.data[i] = scale * z;
            }
        }
        p
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(Error::Contract(format!(
                "parameter vector has {} entries, expected {}",
                data.len(),
                dims.param_count()
            )));
        }
        Ok(PolicyParams { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn emb(&self, t: TokenId) -> &[f64] {
        let h = self.dims.hidden;
        &self.data[t * h..(t + 1) * h]
    }

    fn w_ctx(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o.w_ctx..o.w_h]
    }

    fn w_h(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o.w_h..o.b_h]
    }

    fn b_h(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o.b_h..o.w_v]
    }

    fn w_v(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o.w_v..o.b_v]
    }

    fn b_v(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o.b_v..]
    }

    fn pool(&self, seq: &[TokenId]) -> Vec<f64> {
        let h = self.dims.hidden;
        let mut out = vec![0.0; h];
        if seq.is_empty() {
            return out;
        }
        for &t in seq {
            for (o, e) in out.iter_mut().zip(self.emb(t)) {
                *o += e;
            }
        }
        let n = seq.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }

    /// Stable content hash of the parameter bits.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        crate::config::hash_hex(&bytes)
    }
}

/// Parameter-independent conditioning: which alias/prompt tokens are pooled,
/// the mode, and the pair features ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextInput {
    pub mode: Mode,
    pub alias: TokenSeq,
    pub prompt: TokenSeq,
    pub pair: [f64; PAIR_FEATURES],
}

impl ContextInput {
    /// Textual-only conditioning; ψ is identically zero.
    pub fn reprompt(a: &Instruction, p0: &[TokenId]) -> Self {
        ContextInput {
            mode: Mode::Reprompt,
            alias: a.alias.clone(),
            prompt: p0.to_vec(),
            pair: [0.0; PAIR_FEATURES],
        }
    }

    /// Pairwise-judge conditioning on `(x1, x2)` under the given condition.
    pub fn eval(world: &WorldSpec, cond: Condition<'_>, x1: &Image, x2: &Image) -> Result<Self> {
        let mut pair = [0.0; PAIR_FEATURES];
        if let Some(a) = cond.instruction {
            pair[0] = dot(&x1.v, &a.target);
            pair[1] = dot(&x2.v, &a.target);
        }
        if let Some(p0) = cond.prompt {
            let v0 = world.anchor(p0)?;
            pair[2] = dot(&x1.v, &v0);
            pair[3] = dot(&x2.v, &v0);
        }
        pair[4] = x1.quality;
        pair[5] = x2.quality;
        pair[6] = dot(&x1.v, &x2.v);
        Ok(ContextInput {
            mode: Mode::Eval,
            alias: cond.instruction.map(|a| a.alias.clone()).unwrap_or_default(),
            prompt: cond.prompt.map(<[TokenId]>::to_vec).unwrap_or_default(),
            pair,
        })
    }
}

/// Context projected under a specific parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub mode: Mode,
    pub raw: Vec<f64>,
    pub projected: Vec<f64>,
}

/// Builds the context for `mode`. `pair` must be present iff mode is EVAL.
pub fn encode_context(
    world: &WorldSpec,
    params: &PolicyParams,
    mode: Mode,
    a: Option<&Instruction>,
    p0: &[TokenId],
    pair: Option<(&Image, &Image)>,
) -> Result<Context> {
    let input = match (mode, pair) {
        (Mode::Eval, Some((x1, x2))) => ContextInput::eval(
            world,
            Condition {
                instruction: a,
                prompt: Some(p0),
            },
            x1,
            x2,
        )?,
        (Mode::Reprompt, None) => {
            let a = a.ok_or_else(|| Error::Contract("REPROMPT mode needs an instruction".into()))?;
            ContextInput::reprompt(a, p0)
        }
        (Mode::Eval, None) => return Err(Error::Contract("EVAL mode needs an image pair".into())),
        (Mode::Reprompt, Some(_)) => return Err(Error::Contract("REPROMPT mode takes no image pair".into())),
    };
    Ok(project(params, &input))
}

pub fn project(params: &PolicyParams, input: &ContextInput) -> Context {
    let h = params.dims.hidden;
    let rlen = params.dims.raw_context();
    let mut raw = Vec::with_capacity(rlen);
    raw.extend(params.pool(&input.alias));
    raw.extend(params.pool(&input.prompt));
    raw.push(f64::from(u8::from(input.mode == Mode::Eval)));
    raw.push(f64::from(u8::from(input.mode == Mode::Reprompt)));
    raw.extend_from_slice(&input.pair);
    let w = params.w_ctx();
    let projected = (0..h).map(|i| dot(&w[i * rlen..(i + 1) * rlen], &raw)).collect();
    Context {
        mode: input.mode,
        raw,
        projected,
    }
}

/// Content caps plus the mask switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoding {
    pub grammar_mask: bool,
    pub max_think: usize,
    pub max_answer: usize,
}

impl Decoding {
    pub fn from_config(config: &crate::config::RunConfig) -> Self {
        Decoding {
            grammar_mask: config.grammar_mask,
            max_think: config.max_think_len,
            max_answer: config.max_answer_len,
        }
    }

    pub fn hard_cap(&self) -> usize {
        self.max_think + self.max_answer + 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    ThinkOpen,
    Think(usize),
    AnsOpen,
    Answer(usize),
    Eos,
    Done,
}

/// Position in the output skeleton; drives the grammar mask and termination.
#[derive(Debug, Clone, Copy)]
struct Grammar {
    mode: Mode,
    dec: Decoding,
    slot: Slot,
    emitted: usize,
}

impl Grammar {
    fn new(mode: Mode, dec: Decoding) -> Self {
        Grammar {
            mode,
            dec,
            slot: Slot::ThinkOpen,
            emitted: 0,
        }
    }

    fn finished(&self) -> bool {
        if self.dec.grammar_mask {
            self.slot == Slot::Done
        } else {
            self.slot == Slot::Done || self.emitted >= self.dec.hard_cap()
        }
    }

    /// Allowed-token mask at the current slot; all-true without the grammar.
    fn allowed(&self, vocab: &Vocab, out: &mut Vec<bool>) {
        out.clear();
        out.resize(vocab.len(), !self.dec.grammar_mask);
        if !self.dec.grammar_mask {
            return;
        }
        let content = vocab.content();
        match self.slot {
            Slot::ThinkOpen => out[THINK_OPEN] = true,
            Slot::Think(n) => {
                if n < self.dec.max_think {
                    out[content].iter_mut().for_each(|b| *b = true);
                }
                out[THINK_CLOSE] = true;
            }
            Slot::AnsOpen => out[ANS_OPEN] = true,
            Slot::Answer(n) => match self.mode {
                Mode::Eval => {
                    if n == 0 {
                        out[YES] = true;
                        out[NO] = true;
                    } else {
                        out[ANS_CLOSE] = true;
                    }
                }
                Mode::Reprompt => {
                    if n < self.dec.max_answer {
                        out[content].iter_mut().for_each(|b| *b = true);
                    }
                    if n > 0 {
                        out[ANS_CLOSE] = true;
                    }
                }
            },
            Slot::Eos => out[EOS] = true,
            Slot::Done => {}
        }
    }

    fn is_answer_content_slot(&self) -> bool {
        matches!(self.slot, Slot::Answer(_)) && self.mode == Mode::Reprompt
    }

    fn advance(&mut self, token: TokenId) {
        self.emitted += 1;
        self.slot = match (self.slot, token) {
            (_, EOS) => Slot::Done,
            (Slot::ThinkOpen, THINK_OPEN) => Slot::Think(0),
            (Slot::Think(_), THINK_CLOSE) => Slot::AnsOpen,
            (Slot::Think(n), _) => Slot::Think(n + 1),
            (Slot::AnsOpen, ANS_OPEN) => Slot::Answer(0),
            (Slot::Answer(_), ANS_CLOSE) => Slot::Eos,
            (Slot::Answer(n), _) => Slot::Answer(n + 1),
            // Free-form output that left the skeleton: keep going until EOS/cap.
            (s, _) => s,
        };
    }
}

/// Categorical distribution at one step over the full vocabulary.
#[derive(Debug, Clone)]
pub struct StepDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub allowed: Vec<bool>,
    pub logits: Vec<f64>,
}

impl StepDist {
    fn from_logits(logits: Vec<f64>, allowed: Vec<bool>) -> Self {
        let max = logits
            .iter()
            .zip(&allowed)
            .filter(|(_, &a)| a)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(l, _)| (l - max).exp())
                .sum::<f64>()
                .ln();
        let mut probs = vec![0.0; logits.len()];
        let mut log_probs = vec![f64::NEG_INFINITY; logits.len()];
        for i in 0..logits.len() {
            if allowed[i] {
                log_probs[i] = logits[i] - lse;
                probs[i] = log_probs[i].exp();
            }
        }
        StepDist {
            probs,
            log_probs,
            allowed,
            logits,
        }
    }

    /// Argmax over allowed tokens, ties broken by lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = None;
        for (i, (&l, &a)) in self.logits.iter().zip(&self.allowed).enumerate() {
            if a && best.is_none_or(|(_, bl)| l > bl) {
                best = Some((i, l));
            }
        }
        best.expect("at least one allowed token").0
    }

    fn sample(&self, stream: &mut Stream) -> TokenId {
        let u: f64 = stream.random();
        let mut acc = 0.0;
        let mut last = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = Some(i);
                if u < acc {
                    return i;
                }
            }
        }
        last.expect("distribution has support")
    }
}

/// Hidden-state cache for one step, kept for the backward pass.
struct StepCache {
    mean: Vec<f64>,
    hidden: Vec<f64>,
    dist: StepDist,
}

fn step_forward(
    params: &PolicyParams,
    ctx: &Context,
    prefix_sum: &[f64],
    prefix_len: usize,
    allowed: Vec<bool>,
) -> StepCache {
    let h = params.dims.hidden;
    let v = params.dims.vocab;
    let mean: Vec<f64> = if prefix_len == 0 {
        vec![0.0; h]
    } else {
        prefix_sum.iter().map(|x| x / prefix_len as f64).collect()
    };
    let w_h = params.w_h();
    let b_h = params.b_h();
    let mut hidden = vec![0.0; h];
    for i in 0..h {
        let row = &w_h[i * 2 * h..(i + 1) * 2 * h];
        let z = dot(&row[..h], &ctx.projected) + dot(&row[h..], &mean) + b_h[i];
        hidden[i] = z.tanh();
    }
    let w_v = params.w_v();
    let b_v = params.b_v();
    let logits: Vec<f64> = (0..v)
        .map(|k| dot(&w_v[k * h..(k + 1) * h], &hidden) + b_v[k])
        .collect();
    StepCache {
        mean,
        hidden,
        dist: StepDist::from_logits(logits, allowed),
    }
}

/// Distribution of the next token after `prefix`.
pub fn step_distribution(
    params: &PolicyParams,
    vocab: &Vocab,
    ctx: &Context,
    dec: Decoding,
    prefix: &[TokenId],
) -> StepDist {
    let h = params.dims.hidden;
    let mut grammar = Grammar::new(ctx.mode, dec);
    let mut sum = vec![0.0; h];
    for &t in prefix {
        grammar.advance(t);
        for (s, e) in sum.iter_mut().zip(params.emb(t)) {
            *s += e;
        }
    }
    let mut allowed = Vec::new();
    grammar.allowed(vocab, &mut allowed);
    if !allowed.iter().any(|&a| a) {
        // Past the end of the skeleton; report the free distribution.
        allowed.iter_mut().for_each(|a| *a = true);
    }
    step_forward(params, ctx, &sum, prefix.len(), allowed).dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mode: Mode,
    pub tokens: TokenSeq,
    pub logprobs: Vec<f64>,
}

/// Parsed `THINK_OPEN z THINK_CLOSE ANS_OPEN o ANS_CLOSE EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub think: TokenSeq,
    pub answer: TokenSeq,
    pub verdict: Option<Verdict>,
    pub valid: bool,
}

impl Trajectory {
    pub fn parse(&self, vocab: &Vocab) -> Parsed {
        parse_answer(vocab, self.mode, &self.tokens)
    }
}

fn invalid() -> Parsed {
    Parsed {
        think: Vec::new(),
        answer: Vec::new(),
        verdict: None,
        valid: false,
    }
}

pub fn parse_answer(vocab: &Vocab, mode: Mode, tokens: &[TokenId]) -> Parsed {
    if tokens.first() != Some(&THINK_OPEN) {
        return invalid();
    }
    let Some(tc) = tokens.iter().position(|&t| t == THINK_CLOSE) else {
        return invalid();
    };
    let think = &tokens[1..tc];
    if think.iter().any(|&t| !vocab.contains(t) || !vocab.is_content(t)) {
        return invalid();
    }
    if tokens.get(tc + 1) != Some(&ANS_OPEN) {
        return invalid();
    }
    let start = tc + 2;
    let Some(rel) = tokens[start..].iter().position(|&t| t == ANS_CLOSE) else {
        return invalid();
    };
    let close = start + rel;
    if tokens.len() != close + 2 || tokens[close + 1] != EOS {
        return invalid();
    }
    let answer = &tokens[start..close];
    if answer.is_empty() || answer.iter().any(|&t| !vocab.contains(t)) {
        return invalid();
    }
    let verdict = match mode {
        Mode::Eval => match answer {
            [YES] => Some(Verdict::Yes),
            [NO] => Some(Verdict::No),
            _ => return invalid(),
        },
        Mode::Reprompt => {
            if answer.iter().any(|&t| !vocab.is_content(t)) {
                return invalid();
            }
            None
        }
    };
    Parsed {
        think: think.to_vec(),
        answer: answer.to_vec(),
        verdict,
        valid: true,
    }
}

fn decode(
    params: &PolicyParams,
    vocab: &Vocab,
    ctx: &Context,
    dec: Decoding,
    mut choose: impl FnMut(&StepDist) -> TokenId,
) -> Trajectory {
    let h = params.dims.hidden;
    let mut grammar = Grammar::new(ctx.mode, dec);
    let mut sum = vec![0.0; h];
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut allowed = Vec::new();
    while !grammar.finished() {
        grammar.allowed(vocab, &mut allowed);
        let cache = step_forward(params, ctx, &sum, tokens.len(), allowed.clone());
        let t = choose(&cache.dist);
        logprobs.push(cache.dist.log_probs[t]);
        tokens.push(t);
        grammar.advance(t);
        for (s, e) in sum.iter_mut().zip(params.emb(t)) {
            *s += e;
        }
    }
    Trajectory {
        mode: ctx.mode,
        tokens,
        logprobs,
    }
}

pub fn sample_trajectory(
    params: &PolicyParams,
    vocab: &Vocab,
    ctx: &Context,
    dec: Decoding,
    stream: &mut Stream,
) -> Trajectory {
    decode(params, vocab, ctx, dec, |d| d.sample(stream))
}

pub fn greedy_trajectory(params: &PolicyParams, vocab: &Vocab, ctx: &Context, dec: Decoding) -> Trajectory {
    decode(params, vocab, ctx, dec, StepDist::argmax)
}

/// Forward pass over a fixed token sequence, keeping per-step caches.
struct Replay {
    steps: Vec<StepCache>,
}

fn replay(params: &PolicyParams, vocab: &Vocab, ctx: &Context, dec: Decoding, tokens: &[TokenId]) -> Result<Replay> {
    let h = params.dims.hidden;
    let mut grammar = Grammar::new(ctx.mode, dec);
    let mut sum = vec![0.0; h];
    let mut steps = Vec::with_capacity(tokens.len());
    let mut allowed = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab.len() || grammar.finished() {
            return Err(Error::ImpossibleTrajectory { step: i, token: t });
        }
        grammar.allowed(vocab, &mut allowed);
        let cache = step_forward(params, ctx, &sum, i, allowed.clone());
        if cache.dist.probs[t] <= 0.0 {
            return Err(Error::ImpossibleTrajectory { step: i, token: t });
        }
        steps.push(cache);
        grammar.advance(t);
        for (s, e) in sum.iter_mut().zip(params.emb(t)) {
            *s += e;
        }
    }
    Ok(Replay { steps })
}

/// Exact per-step log π(u_t | u_<t, context).
pub fn logprob(
    params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    let ctx = project(params, input);
    let r = replay(params, vocab, &ctx, dec, tokens)?;
    Ok(r.steps.iter().zip(tokens).map(|(s, &t)| s.dist.log_probs[t]).collect())
}

/// KL(p‖q) over the common support of two masked distributions.
pub fn categorical_kl(p: &StepDist, q: &StepDist) -> Result<f64> {
    if p.allowed != q.allowed {
        return Err(Error::Contract(
            "KL between distributions with different supports".into(),
        ));
    }
    Ok(p.probs
        .iter()
        .zip(&p.log_probs)
        .zip(&q.log_probs)
        .filter(|((&pp, _), _)| pp > 0.0)
        .map(|((&pp, &lp), &lq)| pp * (lp - lq))
        .sum())
}

/// Exact categorical KL(π_θ ‖ π_ref) at the step following `prefix`.
pub fn step_kl(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    prefix: &[TokenId],
) -> Result<f64> {
    let p = step_distribution(params, vocab, &project(params, input), dec, prefix);
    let q = step_distribution(ref_params, vocab, &project(ref_params, input), dec, prefix);
    categorical_kl(&p, &q)
}

/// Per-trajectory quantities the surrogate needs under current and reference params.
pub struct TrajectoryEval {
    pub logprobs: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Backward pass: given ∂objective/∂logits for every step, accumulate ∇θ into `grad`.
fn backward(
    params: &PolicyParams,
    input: &ContextInput,
    ctx: &Context,
    tokens: &[TokenId],
    replay: &Replay,
    dlogits: &[Vec<f64>],
    grad: &mut [f64],
) {
    let dims = params.dims;
    let (h, v, rlen) = (dims.hidden, dims.vocab, dims.raw_context());
    let o = dims.offsets();
    let w_v = params.w_v();
    let w_h = params.w_h();
    let mut dc = vec![0.0; h];
    // dm_t / t for every step, later spread over the prefix tokens.
    let mut dmean_scaled: Vec<Option<Vec<f64>>> = vec![None; tokens.len()];
    let mut ds = vec![0.0; h];
    let mut dz = vec![0.0; h];
    for (t, (step, dl)) in replay.steps.iter().zip(dlogits).enumerate() {
        if dl.iter().all(|&x| x == 0.0) {
            continue;
        }
        ds.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..v {
            let g = dl[k];
            if g == 0.0 {
                continue;
            }
            grad[o.b_v + k] += g;
            let row = &mut grad[o.w_v + k * h..o.w_v + (k + 1) * h];
            for (r, s) in row.iter_mut().zip(&step.hidden) {
                *r += g * s;
            }
            for (d, w) in ds.iter_mut().zip(&w_v[k * h..(k + 1) * h]) {
                *d += g * w;
            }
        }
        for i in 0..h {
            dz[i] = ds[i] * (1.0 - step.hidden[i] * step.hidden[i]);
        }
        let mut dm = vec![0.0; h];
        for i in 0..h {
            let g = dz[i];
            if g == 0.0 {
                continue;
            }
            grad[o.b_h + i] += g;
            let base = o.w_h + i * 2 * h;
            for j in 0..h {
                grad[base + j] += g * ctx.projected[j];
                grad[base + h + j] += g * step.mean[j];
            }
            let row = &w_h[i * 2 * h..(i + 1) * 2 * h];
            for j in 0..h {
                dc[j] += g * row[j];
                dm[j] += g * row[h + j];
            }
        }
        if t > 0 {
            let inv = 1.0 / t as f64;
            dm.iter_mut().for_each(|x| *x *= inv);
            dmean_scaled[t] = Some(dm);
        }
    }
    // Token at position j sits in the prefix of every step t > j.
    let mut carry = vec![0.0; h];
    for j in (0..tokens.len()).rev() {
        if let Some(next) = dmean_scaled.get(j + 1).and_then(Option::as_ref) {
            for (c, x) in carry.iter_mut().zip(next) {
                *c += x;
            }
        }
        if carry.iter().any(|&x| x != 0.0) {
            let row = &mut grad[tokens[j] * h..(tokens[j] + 1) * h];
            for (r, c) in row.iter_mut().zip(&carry) {
                *r += c;
            }
        }
    }
    if dc.iter().all(|&x| x == 0.0) {
        return;
    }
    let w_ctx = params.w_ctx();
    let mut draw = vec![0.0; rlen];
    for i in 0..h {
        let g = dc[i];
        if g == 0.0 {
            continue;
        }
        let base = o.w_ctx + i * rlen;
        for j in 0..rlen {
            grad[base + j] += g * ctx.raw[j];
            draw[j] += g * w_ctx[i * rlen + j];
        }
    }
    for (seq, offset) in [(&input.alias, 0), (&input.prompt, h)] {
        if seq.is_empty() {
            continue;
        }
        let inv = 1.0 / seq.len() as f64;
        for &t in seq.iter() {
            let row = &mut grad[t * h..(t + 1) * h];
            for (r, d) in row.iter_mut().zip(&draw[offset..offset + h]) {
                *r += d * inv;
            }
        }
    }
}

/// ∇θ Σ_t w_t · log π_θ(u_t | u_<t, context), accumulated into `grad`.
pub fn accumulate_weighted_logprob_grad(
    params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
    weights: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    accumulate_objective_grad(params, None, vocab, input, dec, tokens, weights, 0.0, grad).map(|_| ())
}

pub fn weighted_logprob_grad(
    params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    accumulate_weighted_logprob_grad(params, vocab, input, dec, tokens, weights, &mut grad)?;
    Ok(grad)
}

/// Gradient of Σ_t [w_t log π_θ(u_t) − kl_weight · KL_t(π_θ ‖ π_ref)].
/// Returns the forward values (log-probs and KL per step) for the current params.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_objective_grad(
    params: &PolicyParams,
    ref_params: Option<&PolicyParams>,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
    weights: &[f64],
    kl_weight: f64,
    grad: &mut [f64],
) -> Result<TrajectoryEval> {
    accumulate_objective_grad_with(
        params,
        ref_params,
        vocab,
        input,
        dec,
        tokens,
        |_| Ok(weights.to_vec()),
        kl_weight,
        grad,
    )
}

/// As [`accumulate_objective_grad`], with weights derived from the forward
/// values so a single replay serves both.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_objective_grad_with(
    params: &PolicyParams,
    ref_params: Option<&PolicyParams>,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
    weights_of: impl FnOnce(&TrajectoryEval) -> Result<Vec<f64>>,
    kl_weight: f64,
    grad: &mut [f64],
) -> Result<TrajectoryEval> {
    let ctx = project(params, input);
    let rep = replay(params, vocab, &ctx, dec, tokens)?;
    let (kl, ref_dists) = match ref_params {
        Some(rp) => {
            let rctx = project(rp, input);
            let rrep = replay(rp, vocab, &rctx, dec, tokens)?;
            let mut kl = Vec::with_capacity(tokens.len());
            for (p, q) in rep.steps.iter().zip(&rrep.steps) {
                kl.push(categorical_kl(&p.dist, &q.dist)?);
            }
            (kl, Some(rrep))
        }
        None => (vec![0.0; tokens.len()], None),
    };
    let logprobs = rep
        .steps
        .iter()
        .zip(tokens)
        .map(|(s, &t)| s.dist.log_probs[t])
        .collect();
    let eval = TrajectoryEval { logprobs, kl };
    let weights = weights_of(&eval)?;
    if weights.len() != tokens.len() {
        return Err(Error::Contract("one weight per step required".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("step weight {w}")));
    }
    let v = params.dims.vocab;
    let mut dlogits = Vec::with_capacity(tokens.len());
    for (t, step) in rep.steps.iter().enumerate() {
        let mut dl = vec![0.0; v];
        let w = weights[t];
        if w != 0.0 {
            for k in 0..v {
                if step.dist.allowed[k] {
                    dl[k] -= w * step.dist.probs[k];
                }
            }
            dl[tokens[t]] += w;
        }
        if let (Some(rr), true) = (&ref_dists, kl_weight != 0.0) {
            let q = &rr.steps[t].dist;
            for k in 0..v {
                let p = step.dist.probs[k];
                if p > 0.0 {
                    dl[k] -= kl_weight * p * (step.dist.log_probs[k] - q.log_probs[k] - eval.kl[t]);
                }
            }
        }
        dlogits.push(dl);
    }
    backward(params, input, &ctx, tokens, &rep, &dlogits, grad);
    Ok(eval)
}

/// Forward-only evaluation of log-probs and per-step KL against `ref_params`.
pub fn evaluate_trajectory(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
) -> Result<TrajectoryEval> {
    let ctx = project(params, input);
    let rep = replay(params, vocab, &ctx, dec, tokens)?;
    let rctx = project(ref_params, input);
    let rrep = replay(ref_params, vocab, &rctx, dec, tokens)?;
    let mut kl = Vec::with_capacity(tokens.len());
    for (p, q) in rep.steps.iter().zip(&rrep.steps) {
        kl.push(categorical_kl(&p.dist, &q.dist)?);
    }
    let logprobs = rep
        .steps
        .iter()
        .zip(tokens)
        .map(|(s, &t)| s.dist.log_probs[t])
        .collect();
    Ok(TrajectoryEval { logprobs, kl })
}

/// Per-step distributions along a fixed trajectory (diagnostics).
pub fn trajectory_distributions(
    params: &PolicyParams,
    vocab: &Vocab,
    input: &ContextInput,
    dec: Decoding,
    tokens: &[TokenId],
) -> Result<Vec<(bool, StepDist)>> {
    let ctx = project(params, input);
    let mut grammar = Grammar::new(ctx.mode, dec);
    let h = params.dims.hidden;
    let mut sum = vec![0.0; h];
    let mut out = Vec::new();
    let mut allowed = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        grammar.allowed(vocab, &mut allowed);
        let answer_slot = grammar.is_answer_content_slot();
        let cache = step_forward(params, &ctx, &sum, i, allowed.clone());
        if cache.dist.probs.get(t).copied().unwrap_or(0.0) <= 0.0 {
            return Err(Error::ImpossibleTrajectory { step: i, token: t });
        }
        out.push((answer_slot, cache.dist));
        grammar.advance(t);
        for (s, e) in sum.iter_mut().zip(params.emb(t)) {
            *s += e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng::seeded_stream;
    use crate::world::{Category, Split};

    struct Fixture {
        world: WorldSpec,
        params: PolicyParams,
        inst: Instruction,
        p0: TokenSeq,
        dec: Decoding,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut c = RunConfig::desk();
        c.feature_dim = 8;
        c.hidden_dim = 8;
        c.n_objects = 4;
        c.n_concrete = 6;
        c.n_abstract = 4;
        c.seed = seed;
        let world = WorldSpec::build(&c).unwrap();
        let dims = Dims {
            vocab: world.vocab().len(),
            hidden: 8,
        };
        let params = PolicyParams::init(dims, &mut seeded_stream(seed, "init"), 0.5);
        let con = world.vocab().concrete();
        let abs = world.vocab().abstract_descriptors();
        let inst = Instruction::new(
            &world,
            0,
            Category::Attribute,
            vec![con.start, con.start + 2],
            vec![abs.start, abs.start + 1],
            Split::Train,
        )
        .unwrap();
        let p0 = vec![world.vocab().objects().start, world.vocab().objects().start + 1];
        Fixture {
            world,
            params,
            inst,
            p0,
            dec: Decoding {
                grammar_mask: true,
                max_think: 3,
                max_answer: 4,
            },
        }
    }

    fn eval_input(f: &Fixture) -> ContextInput {
        let x1 = f.world.generate(&[f.p0[0], f.inst.witnesses[0]]).unwrap();
        let x2 = f.world.generate(&f.p0).unwrap();
        ContextInput::eval(&f.world, Condition::full(&f.inst, &f.p0), &x1, &x2).unwrap()
    }

    #[test]
    fn reprompt_context_has_zero_pair_features() {
        let f = fixture(1);
        let c = encode_context(&f.world, &f.params, Mode::Reprompt, Some(&f.inst), &f.p0, None).unwrap();
        let h = f.params.dims().hidden;
        assert!(c.raw[2 * h + 2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_images_give_symmetric_pair_features() {
        let f = fixture(1);
        let x = f.world.generate(&[f.p0[0], f.inst.witnesses[1]]).unwrap();
        let input = ContextInput::eval(&f.world, Condition::full(&f.inst, &f.p0), &x, &x).unwrap();
        let psi = input.pair;
        assert_eq!(psi[0], psi[1]);
        assert_eq!(psi[2], psi[3]);
        assert_eq!(psi[4], psi[5]);
        assert!((psi[6] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prompt_pools_to_zero() {
        let f = fixture(1);
        let input = ContextInput {
            mode: Mode::Reprompt,
            alias: f.inst.alias.clone(),
            prompt: vec![],
            pair: [0.0; PAIR_FEATURES],
        };
        let c = project(&f.params, &input);
        let h = f.params.dims().hidden;
        assert!(c.raw[h..2 * h].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eval_mode_requires_pair() {
        let f = fixture(1);
        let err = encode_context(&f.world, &f.params, Mode::Eval, Some(&f.inst), &f.p0, None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn distributions_normalize_with_and_without_mask() {
        let f = fixture(2);
        let ctx = project(&f.params, &eval_input(&f));
        for mask in [true, false] {
            let dec = Decoding {
                grammar_mask: mask,
                ..f.dec
            };
            for prefix in [vec![], vec![THINK_OPEN], vec![THINK_OPEN, 12, 13]] {
                let d = step_distribution(&f.params, f.world.vocab(), &ctx, dec, &prefix);
                let s: f64 = d.probs.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifting_logits_leaves_distribution_unchanged() {
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let allowed = vec![true; 4];
        let a = StepDist::from_logits(logits.clone(), allowed.clone());
        let b = StepDist::from_logits(logits.iter().map(|x| x + 5.5).collect(), allowed);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_slots_have_zero_probability() {
        let f = fixture(2);
        let ctx = project(&f.params, &eval_input(&f));
        let d = step_distribution(&f.params, f.world.vocab(), &ctx, f.dec, &[]);
        assert_eq!(d.probs[THINK_OPEN], 1.0);
        assert!(d.probs.iter().enumerate().all(|(i, &p)| i == THINK_OPEN || p == 0.0));
    }

    #[test]
    fn masked_samples_always_parse_and_respect_caps() {
        let f = fixture(3);
        let mut stream = seeded_stream(3, "rollout");
        let dec = Decoding {
            grammar_mask: true,
            max_think: 8,
            max_answer: 12,
        };
        for input in [eval_input(&f), ContextInput::reprompt(&f.inst, &f.p0)] {
            let ctx = project(&f.params, &input);
            for _ in 0..50 {
                let traj = sample_trajectory(&f.params, f.world.vocab(), &ctx, dec, &mut stream);
                assert!(traj.parse(f.world.vocab()).valid, "{:?}", traj.tokens);
                assert!(traj.tokens.len() <= 25);
                let lp = logprob(&f.params, f.world.vocab(), &input, dec, &traj.tokens).unwrap();
                assert_eq!(lp, traj.logprobs);
                assert!(lp.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_steps() {
        let f = fixture(1);
        let params = PolicyParams::zeros(f.params.dims());
        let dec = Decoding {
            grammar_mask: false,
            ..f.dec
        };
        let input = ContextInput::reprompt(&f.inst, &f.p0);
        let tokens = vec![THINK_OPEN, 9, THINK_CLOSE];
        let lp = logprob(&params, f.world.vocab(), &input, dec, &tokens).unwrap();
        let v = f.world.vocab().len() as f64;
        for x in lp {
            assert!((x + v.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_on_desk_vocab() {
        let w = WorldSpec::build(&RunConfig::desk()).unwrap();
        let dims = Dims {
            vocab: w.vocab().len(),
            hidden: 8,
        };
        let params = PolicyParams::zeros(dims);
        let input = ContextInput {
            mode: Mode::Reprompt,
            alias: vec![],
            prompt: vec![],
            pair: [0.0; PAIR_FEATURES],
        };
        let dec = Decoding {
            grammar_mask: false,
            max_think: 8,
            max_answer: 12,
        };
        let lp = logprob(&params, w.vocab(), &input, dec, &[THINK_OPEN]).unwrap();
        assert!((lp[0] + 3.7377).abs() < 1e-4);
    }

    #[test]
    fn masked_out_token_is_impossible() {
        let f = fixture(1);
        let input = ContextInput::reprompt(&f.inst, &f.p0);
        let err = logprob(&f.params, f.world.vocab(), &input, f.dec, &[ANS_OPEN]).unwrap_err();
        assert!(matches!(err, Error::ImpossibleTrajectory { step: 0, .. }));
    }

    #[test]
    fn kl_identities() {
        let f = fixture(4);
        let input = eval_input(&f);
        let prefix = [THINK_OPEN, 10];
        let kl = step_kl(&f.params, &f.params, f.world.vocab(), &input, f.dec, &prefix).unwrap();
        assert!(kl.abs() < 1e-12);
        let other = PolicyParams::init(f.params.dims(), &mut seeded_stream(9, "init"), 0.5);
        let kl = step_kl(&f.params, &other, f.world.vocab(), &input, f.dec, &prefix).unwrap();
        assert!(kl > 0.0);
    }

    #[test]
    fn two_token_kl_value() {
        let ln = |x: f64| x.ln();
        let p = StepDist::from_logits(vec![ln(0.9), ln(0.1), 0.0], vec![true, true, false]);
        let q = StepDist::from_logits(vec![0.0, 0.0, 3.0], vec![true, true, false]);
        let kl = categorical_kl(&p, &q).unwrap();
        assert!((kl - 0.3681).abs() < 1e-3);
    }

    #[test]
    fn kl_support_mismatch_is_contract_violation() {
        let p = StepDist::from_logits(vec![0.0, 0.0], vec![true, true]);
        let q = StepDist::from_logits(vec![0.0, 0.0], vec![true, false]);
        assert!(categorical_kl(&p, &q).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let f = fixture(5);
        let input = eval_input(&f);
        let ctx = project(&f.params, &input);
        let traj = sample_trajectory(&f.params, f.world.vocab(), &ctx, f.dec, &mut seeded_stream(5, "r"));
        let g = weighted_logprob_grad(
            &f.params,
            f.world.vocab(),
            &input,
            f.dec,
            &traj.tokens,
            &vec![0.0; traj.tokens.len()],
        )
        .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    fn fd_check(f: &Fixture, input: &ContextInput, dec: Decoding, tokens: &[TokenId]) {
        let weights: Vec<f64> = (0..tokens.len()).map(|i| 0.3 + 0.17 * i as f64).collect();
        let analytic = weighted_logprob_grad(&f.params, f.world.vocab(), input, dec, tokens, &weights).unwrap();
        let objective = |p: &PolicyParams| -> f64 {
            logprob(p, f.world.vocab(), input, dec, tokens)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(l, w)| l * w)
                .sum()
        };
        let step = 1e-5;
        let mut num = vec![0.0; analytic.len()];
        let mut p = f.params.clone();
        for i in 0..analytic.len() {
            let orig = p.data[i];
            p.data[i] = orig + step;
            let up = objective(&p);
            p.data[i] = orig - step;
            let down = objective(&p);
            p.data[i] = orig;
            num[i] = (up - down) / (2.0 * step);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / scale <= 1e-5, "relative error {}", diff / scale);
    }

    #[test]
    fn weighted_logprob_gradient_matches_finite_differences() {
        for seed in [11, 12, 13] {
            let f = fixture(seed);
            let mut stream = seeded_stream(seed, "rollout");
            for input in [eval_input(&f), ContextInput::reprompt(&f.inst, &f.p0)] {
                for mask in [true, false] {
                    let dec = Decoding {
                        grammar_mask: mask,
                        ..f.dec
                    };
                    let ctx = project(&f.params, &input);
                    let traj = sample_trajectory(&f.params, f.world.vocab(), &ctx, dec, &mut stream);
                    fd_check(&f, &input, dec, &traj.tokens);
                }
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let f = fixture(6);
        let input = ContextInput::reprompt(&f.inst, &f.p0);
        let ctx = project(&f.params, &input);
        let traj = sample_trajectory(&f.params, f.world.vocab(), &ctx, f.dec, &mut seeded_stream(6, "r"));
        let n = traj.tokens.len();
        let w1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let w2: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let g = |w: &[f64]| weighted_logprob_grad(&f.params, f.world.vocab(), &input, f.dec, &traj.tokens, w).unwrap();
        let (g1, g2, g12) = (g(&w1), g(&w2), g(&sum));
        for i in 0..g1.len() {
            assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn reprompt_logits_ignore_image_pair() {
        let f = fixture(7);
        let mut input = ContextInput::reprompt(&f.inst, &f.p0);
        let a = project(&f.params, &input);
        // A REPROMPT context never carries ψ; building one from images is an error path.
        input.pair = [0.0; PAIR_FEATURES];
        let b = project(&f.params, &input);
        let da = step_distribution(&f.params, f.world.vocab(), &a, f.dec, &[THINK_OPEN]);
        let db = step_distribution(&f.params, f.world.vocab(), &b, f.dec, &[THINK_OPEN]);
        assert_eq!(da.logits, db.logits);
        let err = encode_context(
            &f.world,
            &f.params,
            Mode::Reprompt,
            Some(&f.inst),
            &f.p0,
            Some((&Image::blank(8), &Image::blank(8))),
        );
        assert!(err.is_err());
    }

    #[test]
    fn parse_rules() {
        let v = Vocab::from_counts(3, 3, 3).unwrap();
        let ok = [THINK_OPEN, 9, THINK_CLOSE, ANS_OPEN, YES, ANS_CLOSE, EOS];
        let p = parse_answer(&v, Mode::Eval, &ok);
        assert!(p.valid);
        assert_eq!(p.verdict, Some(Verdict::Yes));

        let missing_close = [THINK_OPEN, THINK_CLOSE, ANS_OPEN, YES, EOS];
        assert!(!parse_answer(&v, Mode::Eval, &missing_close).valid);

        let reprompt = [THINK_OPEN, THINK_CLOSE, ANS_OPEN, 9, 12, 15, ANS_CLOSE, EOS];
        let p = parse_answer(&v, Mode::Reprompt, &reprompt);
        assert!(p.valid);
        assert_eq!(p.answer, vec![9, 12, 15]);

        let empty = [THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, EOS];
        assert!(!parse_answer(&v, Mode::Reprompt, &empty).valid);

        let with_verdict = [THINK_OPEN, THINK_CLOSE, ANS_OPEN, 9, NO, ANS_CLOSE, EOS];
        assert!(!parse_answer(&v, Mode::Reprompt, &with_verdict).valid);

        let two_verdicts = [THINK_OPEN, THINK_CLOSE, ANS_OPEN, YES, NO, ANS_CLOSE, EOS];
        assert!(!parse_answer(&v, Mode::Eval, &two_verdicts).valid);
    }

    #[test]
    fn greedy_is_deterministic_and_valid() {
        let f = fixture(8);
        let input = eval_input(&f);
        let ctx = project(&f.params, &input);
        let a = greedy_trajectory(&f.params, f.world.vocab(), &ctx, f.dec);
        let b = greedy_trajectory(&f.params, f.world.vocab(), &ctx, f.dec);
        assert_eq!(a, b);
        assert!(a.parse(f.world.vocab()).valid);
    }
}
