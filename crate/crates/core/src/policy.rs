//! Autoregressive per-turn token policies.
//!
//! A policy scores the next action token given a conditioning context
//! (optional hidden info, the interaction history) and the action prefix
//! generated so far. Two parameterizations share one interface:
//!
//! - `TabularExact`: one logit vector per exact context, lazily created at
//!   zero. Exact enough to enumerate small MDPs.
//! - `LinearHashed`: logits are a sum of weight rows selected by hashed
//!   n-gram features of the context ([`crate::features`]).
//!
//! Untouched parameters are zero, so a fresh model is uniform over its vocab.

use std::collections::HashMap;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{dedup, FeatureConfig, FeatureHasher, Segment};
use crate::loss::{logsumexp, softmax_into};
use crate::{Error, Result, Token};

const CHECKPOINT_VERSION: u32 = 1;

/// Output vocabulary of a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    end: Option<usize>,
}

impl Vocab {
    /// `end_token`, when given, must be in `tokens`; sampling stops on it.
    pub fn new(tokens: Vec<Token>, end_token: Option<&str>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("vocabulary"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let end = match end_token {
            Some(e) => Some(
                *index
                    .get(e)
                    .ok_or_else(|| Error::UnknownToken(e.to_owned()))?,
            ),
            None => None,
        };
        Ok(Self { tokens, index, end })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn end(&self) -> Option<usize> {
        self.end
    }

    pub fn end_token(&self) -> Option<&Token> {
        self.end.map(|i| &self.tokens[i])
    }

    pub fn encode(&self, action: &[Token]) -> Result<Vec<usize>> {
        action.iter().map(|t| self.id(t)).collect()
    }
}

/// What a policy conditions on besides the action prefix.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub hidden: Option<&'a [Token]>,
    pub history: &'a [Token],
}

impl<'a> Context<'a> {
    pub fn actor(history: &'a [Token]) -> Self {
        Self {
            hidden: None,
            history,
        }
    }

    /// Hidden info is serialized ahead of the history.
    pub fn with_hidden(hidden: &'a [Token], history: &'a [Token]) -> Self {
        Self {
            hidden: Some(hidden),
            history,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    TabularExact,
    LinearHashed(FeatureConfig),
}

/// Identity of a (context, prefix) pair as seen by the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ContextKey {
    Exact(String),
    Hashed(Vec<u32>),
}

const TOKEN_SEP: char = '\u{1f}';
const SEGMENT_SEP: char = '\u{1e}';

fn push_tokens(key: &mut String, tokens: &[Token]) {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            key.push(TOKEN_SEP);
        }
        key.push_str(t);
    }
}

fn exact_head(ctx: &Context<'_>) -> String {
    let mut key = String::new();
    match ctx.hidden {
        Some(h) => {
            key.push('1');
            push_tokens(&mut key, h);
        }
        None => key.push('0'),
    }
    key.push(SEGMENT_SEP);
    push_tokens(&mut key, ctx.history);
    key.push(SEGMENT_SEP);
    key
}

/// A parameter row: one logit (or gradient) per vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Context(String),
    Feature(u32),
}

/// Sparse gradient over parameter rows, in first-touch order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: IndexMap<Slot, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    fn row_mut(&mut self, slot: Slot, width: usize) -> &mut Vec<f64> {
        self.rows.entry(slot).or_insert_with(|| vec![0.0; width])
    }

    pub fn add_row(&mut self, slot: Slot, values: &[f64], scale: f64) {
        let row = self.row_mut(slot, values.len());
        for (r, v) in row.iter_mut().zip(values) {
            *r += scale * v;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (slot, values) in &other.rows {
            self.add_row(slot.clone(), values, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, slot: &Slot, token: usize) -> f64 {
        self.rows.get(slot).map_or(0.0, |r| r[token])
    }

    pub fn row(&self, slot: &Slot) -> Option<&[f64]> {
        self.rows.get(slot).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Slot, &[f64])> {
        self.rows.iter().map(|(s, r)| (s, r.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute componentwise difference over the union of rows.
    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        let mut worst: f64 = 0.0;
        for (slot, row) in &self.rows {
            for (i, v) in row.iter().enumerate() {
                worst = worst.max((v - other.get(slot, i)).abs());
            }
        }
        for (slot, row) in &other.rows {
            if !self.rows.contains_key(slot) {
                for v in row {
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogprob {
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Params {
    Tabular(IndexMap<String, Vec<f64>>),
    Linear(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    mode: ModelMode,
    vocab: Arc<Vocab>,
    hash_seed: u64,
    params: Params,
}

/// Per-context state reused across positions and candidate actions.
pub struct Prepared<'m, 'c> {
    model: &'m PolicyModel,
    ctx: Context<'c>,
    head: String,
    /// Context features and their summed logits, one entry per weight set.
    slot_features: Vec<Vec<u32>>,
    slot_logits: Vec<Vec<f64>>,
}

impl PolicyModel {
    pub fn fresh(mode: ModelMode, vocab: Arc<Vocab>, hash_seed: u64) -> Self {
        let params = match mode {
            ModelMode::TabularExact => Params::Tabular(IndexMap::new()),
            ModelMode::LinearHashed(cfg) => Params::Linear(vec![0.0; cfg.width * vocab.len()]),
        };
        Self {
            mode,
            vocab,
            hash_seed,
            params,
        }
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    fn hasher(&self) -> Option<FeatureHasher> {
        match self.mode {
            ModelMode::LinearHashed(cfg) => Some(FeatureHasher::new(cfg, self.hash_seed)),
            ModelMode::TabularExact => None,
        }
    }

    pub fn context_key(&self, ctx: &Context<'_>, prefix: &[Token]) -> ContextKey {
        match self.hasher() {
            None => {
                let mut key = exact_head(ctx);
                push_tokens(&mut key, prefix);
                ContextKey::Exact(key)
            }
            Some(h) => {
                let mut feats = slot_features(&h, &base_features(&h, ctx, self.vocab.end_token()), h.context_slot(prefix.len()));
                h.suffix(ctx.history, prefix, &mut feats);
                h.position(prefix.len(), &mut feats);
                ContextKey::Hashed(feats)
            }
        }
    }

    pub fn prepare<'c>(&self, ctx: &Context<'c>) -> Prepared<'_, 'c> {
        let v = self.vocab.len();
        match (&self.params, self.hasher()) {
            (Params::Linear(w), Some(h)) => {
                let base = base_features(&h, ctx, self.vocab.end_token());
                let slot_features: Vec<Vec<u32>> = (0..h.config.context_positions.max(1))
                    .map(|slot| slot_features(&h, &base, slot))
                    .collect();
                let slot_logits = slot_features
                    .iter()
                    .map(|fs| {
                        let mut out = vec![0.0; v];
                        for &f in fs {
                            let row = &w[f as usize * v..(f as usize + 1) * v];
                            for (b, x) in out.iter_mut().zip(row) {
                                *b += x;
                            }
                        }
                        out
                    })
                    .collect();
                Prepared {
                    model: self,
                    ctx: *ctx,
                    head: String::new(),
                    slot_features,
                    slot_logits,
                }
            }
            _ => Prepared {
                model: self,
                ctx: *ctx,
                head: exact_head(ctx),
                slot_features: Vec::new(),
                slot_logits: Vec::new(),
            },
        }
    }

    pub fn token_logprob(&self, ctx: &Context<'_>, prefix: &[Token], token: &str) -> Result<f64> {
        let id = self.vocab.id(token)?;
        let prefix = self.vocab.encode(prefix)?;
        let p = self.prepare(ctx);
        let logits = p.logits_at(&prefix).0;
        Ok(logits[id] - logsumexp(&logits))
    }

    /// Log-probabilities of every vocabulary token after an already encoded prefix.
    pub fn token_logprobs(&self, ctx: &Context<'_>, prefix: &[usize]) -> Vec<f64> {
        let logits = self.prepare(ctx).logits_at(prefix).0;
        let lse = logsumexp(&logits);
        logits.into_iter().map(|z| z - lse).collect()
    }

    pub fn action_logprob(&self, ctx: &Context<'_>, action: &[Token]) -> Result<ActionLogprob> {
        let ids = self.encode_action(action)?;
        Ok(self.prepare(ctx).action_logprob(&ids, None, 0.0))
    }

    /// Gradient of the total action log-probability with respect to the parameters.
    pub fn logprob_grad(&self, ctx: &Context<'_>, action: &[Token]) -> Result<Gradient> {
        let mut g = Gradient::new();
        self.accumulate_logprob_grad(&mut g, 1.0, ctx, action)?;
        Ok(g)
    }

    /// Adds `scale * ∇ log π(action | ctx)` into `grad` and returns the log-probability.
    pub fn accumulate_logprob_grad(
        &self,
        grad: &mut Gradient,
        scale: f64,
        ctx: &Context<'_>,
        action: &[Token],
    ) -> Result<ActionLogprob> {
        let ids = self.encode_action(action)?;
        Ok(self.prepare(ctx).action_logprob(&ids, Some(grad), scale))
    }

    fn encode_action(&self, action: &[Token]) -> Result<Vec<usize>> {
        if action.is_empty() {
            return Err(Error::Invalid("action must be nonempty".into()));
        }
        self.vocab.encode(action)
    }

    /// Ancestral sampling until the end token or `max_len` tokens.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        ctx: &Context<'_>,
        rng: &mut R,
        max_len: usize,
    ) -> Vec<Token> {
        self.prepare(ctx).sample(rng, max_len)
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy_action(&self, ctx: &Context<'_>, max_len: usize) -> Vec<Token> {
        let p = self.prepare(ctx);
        let mut ids = Vec::new();
        for _ in 0..max_len.max(1) {
            let (logits, _) = p.logits_at(&ids);
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            ids.push(best);
            if Some(best) == self.vocab.end() {
                break;
            }
        }
        ids.into_iter().map(|i| self.vocab.token(i).clone()).collect()
    }

    /// `params += scale * grad`.
    pub fn apply(&mut self, grad: &Gradient, scale: f64) {
        let v = self.vocab.len();
        match &mut self.params {
            Params::Tabular(table) => {
                for (slot, row) in grad.rows() {
                    if let Slot::Context(key) = slot {
                        let target = table.entry(key.clone()).or_insert_with(|| vec![0.0; v]);
                        for (t, g) in target.iter_mut().zip(row) {
                            *t += scale * g;
                        }
                    }
                }
            }
            Params::Linear(w) => {
                for (slot, row) in grad.rows() {
                    if let Slot::Feature(f) = slot {
                        let target = &mut w[*f as usize * v..(*f as usize + 1) * v];
                        for (t, g) in target.iter_mut().zip(row) {
                            *t += scale * g;
                        }
                    }
                }
            }
        }
    }

    /// Sets the logits of one exact context (tabular mode only).
    pub fn set_logits(&mut self, ctx: &Context<'_>, prefix: &[Token], logits: &[f64]) -> Result<()> {
        if logits.len() != self.vocab.len() {
            return Err(Error::Invalid("logit vector length differs from vocab".into()));
        }
        let key = match self.context_key(ctx, prefix) {
            ContextKey::Exact(k) => k,
            ContextKey::Hashed(_) => {
                return Err(Error::Invalid("set_logits requires tabular mode".into()))
            }
        };
        match &mut self.params {
            Params::Tabular(t) => {
                t.insert(key, logits.to_vec());
                Ok(())
            }
            Params::Linear(_) => unreachable!(),
        }
    }

    /// Raw weight matrix (linear mode only), row-major `[feature][token]`.
    pub fn linear_weights_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.params {
            Params::Linear(w) => Some(w),
            Params::Tabular(_) => None,
        }
    }

    /// Adds zero rows for every tabular context the gradient touches.
    pub fn materialize(&mut self, grad: &Gradient) {
        self.apply(grad, 0.0);
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            Params::Tabular(t) => t.len() * self.vocab.len(),
            Params::Linear(w) => w.len(),
        }
    }

    /// Parameters as one flat vector (tabular: materialized contexts in insertion order).
    pub fn flat_params(&self) -> Vec<f64> {
        match &self.params {
            Params::Tabular(t) => t.values().flatten().copied().collect(),
            Params::Linear(w) => w.clone(),
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Invalid("flat parameter length mismatch".into()));
        }
        let v = self.vocab.len();
        match &mut self.params {
            Params::Tabular(t) => {
                for (row, chunk) in t.values_mut().zip(flat.chunks(v)) {
                    row.copy_from_slice(chunk);
                }
            }
            Params::Linear(w) => w.copy_from_slice(flat),
        }
        Ok(())
    }

    /// Lays a gradient out like [`Self::flat_params`]. Rows for tabular
    /// contexts that are not materialized are an error.
    pub fn flatten_gradient(&self, grad: &Gradient) -> Result<Vec<f64>> {
        let v = self.vocab.len();
        let mut flat = vec![0.0; self.param_count()];
        for (slot, row) in grad.rows() {
            let offset = match (&self.params, slot) {
                (Params::Tabular(t), Slot::Context(k)) => t
                    .get_index_of(k)
                    .ok_or_else(|| Error::Invalid("gradient row for unmaterialized context".into()))?,
                (Params::Linear(_), Slot::Feature(f)) => *f as usize,
                _ => return Err(Error::Invalid("gradient does not match model mode".into())),
            };
            for (i, g) in row.iter().enumerate() {
                flat[offset * v + i] += g;
            }
        }
        Ok(flat)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let (tabular, linear) = match &self.params {
            Params::Tabular(t) => (
                Some(
                    t.iter()
                        .filter(|(_, row)| row.iter().any(|&x| x != 0.0))
                        .map(|(k, row)| (k.clone(), row.clone()))
                        .collect(),
                ),
                None,
            ),
            Params::Linear(w) => (
                None,
                Some(
                    w.iter()
                        .enumerate()
                        .filter(|(_, &x)| x != 0.0)
                        .map(|(i, &x)| (i, x))
                        .collect(),
                ),
            ),
        };
        let ckpt = Checkpoint {
            v: CHECKPOINT_VERSION,
            mode: self.mode,
            vocab: self.vocab.tokens.clone(),
            end_token: self.vocab.end_token().cloned(),
            hash_seed: self.hash_seed,
            tabular,
            linear,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.v != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.v)));
        }
        let vocab = Arc::new(Vocab::new(ckpt.vocab, ckpt.end_token.as_deref())?);
        let mut model = PolicyModel::fresh(ckpt.mode, vocab, ckpt.hash_seed);
        match (&mut model.params, ckpt.tabular, ckpt.linear) {
            (Params::Tabular(t), Some(rows), None) => {
                for (k, row) in rows {
                    if row.len() != model.vocab.len() {
                        return Err(Error::Checkpoint("tabular row width mismatch".into()));
                    }
                    t.insert(k, row);
                }
            }
            (Params::Linear(w), None, Some(entries)) => {
                for (i, x) in entries {
                    *w.get_mut(i)
                        .ok_or_else(|| Error::Checkpoint("weight index out of range".into()))? = x;
                }
            }
            _ => return Err(Error::Checkpoint("parameters do not match mode".into())),
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    v: u32,
    mode: ModelMode,
    vocab: Vec<Token>,
    end_token: Option<Token>,
    hash_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tabular: Option<Vec<(String, Vec<f64>)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    linear: Option<Vec<(usize, f64)>>,
}

fn base_features(h: &FeatureHasher, ctx: &Context<'_>, end: Option<&Token>) -> Vec<u32> {
    let mut feats = Vec::new();
    h.bias(&mut feats);
    if let Some(end) = end {
        h.turns(ctx.history, end, &mut feats);
    }
    if let Some(hidden) = ctx.hidden {
        h.bag(Segment::Hidden, hidden, &mut feats);
    }
    h.bag(Segment::History, ctx.history, &mut feats);
    dedup(&mut feats);
    feats
}

fn slot_features(h: &FeatureHasher, base: &[u32], slot: usize) -> Vec<u32> {
    let mut out: Vec<u32> = base.iter().map(|&f| h.at_slot(f, slot)).collect();
    dedup(&mut out);
    out
}

enum StepSlot {
    Exact(String),
    Features(Vec<u32>),
}

impl Prepared<'_, '_> {
    fn logits_at(&self, prefix: &[usize]) -> (Vec<f64>, StepSlot) {
        let model = self.model;
        let v = model.vocab.len();
        match &model.params {
            Params::Tabular(t) => {
                let mut key = self.head.clone();
                let toks: Vec<Token> = prefix.iter().map(|&i| model.vocab.token(i).clone()).collect();
                push_tokens(&mut key, &toks);
                let logits = t.get(&key).cloned().unwrap_or_else(|| vec![0.0; v]);
                (logits, StepSlot::Exact(key))
            }
            Params::Linear(w) => {
                let h = model.hasher().expect("linear mode has a hasher");
                let toks: Vec<Token> = prefix.iter().map(|&i| model.vocab.token(i).clone()).collect();
                let mut feats = Vec::new();
                h.suffix(self.ctx.history, &toks, &mut feats);
                h.position(prefix.len(), &mut feats);
                let mut logits = self.slot_logits[h.context_slot(prefix.len())].clone();
                for &f in &feats {
                    let row = &w[f as usize * v..(f as usize + 1) * v];
                    for (z, x) in logits.iter_mut().zip(row) {
                        *z += x;
                    }
                }
                (logits, StepSlot::Features(feats))
            }
        }
    }

    /// Log-probability of an encoded action; optionally accumulates
    /// `scale * ∇ log π` into `grad`.
    pub fn action_logprob(
        &self,
        ids: &[usize],
        mut grad: Option<&mut Gradient>,
        scale: f64,
    ) -> ActionLogprob {
        let v = self.model.vocab.len();
        let mut per_token = Vec::with_capacity(ids.len());
        let mut probs = Vec::with_capacity(v);
        let mut slot_acc = vec![vec![0.0; v]; self.slot_features.len()];
        for (l, &a) in ids.iter().enumerate() {
            let (logits, slot) = self.logits_at(&ids[..l]);
            per_token.push(logits[a] - logsumexp(&logits));
            if let Some(g) = grad.as_deref_mut() {
                softmax_into(&logits, &mut probs);
                let mut step: Vec<f64> = probs.iter().map(|p| -p).collect();
                step[a] += 1.0;
                match slot {
                    StepSlot::Exact(key) => g.add_row(Slot::Context(key), &step, scale),
                    StepSlot::Features(feats) => {
                        for f in feats {
                            g.add_row(Slot::Feature(f), &step, scale);
                        }
                        let slot = self.model.hasher().expect("linear").context_slot(l);
                        for (b, s) in slot_acc[slot].iter_mut().zip(&step) {
                            *b += s;
                        }
                    }
                }
            }
        }
        if let Some(g) = grad {
            for (fs, acc) in self.slot_features.iter().zip(&slot_acc) {
                if acc.iter().any(|&x| x != 0.0) {
                    for &f in fs {
                        g.add_row(Slot::Feature(f), acc, scale);
                    }
                }
            }
        }
        let total = per_token.iter().sum();
        ActionLogprob { total, per_token }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<Token> {
        let vocab = &self.model.vocab;
        let mut ids = Vec::new();
        let mut probs = Vec::with_capacity(vocab.len());
        for _ in 0..max_len.max(1) {
            let (logits, _) = self.logits_at(&ids);
            softmax_into(&logits, &mut probs);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            ids.push(pick);
            if Some(pick) == vocab.end() {
                break;
            }
        }
        ids.into_iter().map(|i| vocab.token(i).clone()).collect()
    }
}

/// An immutable snapshot of a policy, used as `π_ref`.
#[derive(Debug, Clone)]
pub struct FrozenPolicy(Arc<PolicyModel>);

impl Deref for FrozenPolicy {
    type Target = PolicyModel;

    fn deref(&self) -> &PolicyModel {
        &self.0
    }
}

impl FrozenPolicy {
    /// Stable fingerprint of the frozen parameters.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.0.to_json()?.as_bytes())))
    }
}

pub fn freeze_reference(model: &PolicyModel) -> FrozenPolicy {
    FrozenPolicy(Arc::new(model.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn vocab4() -> Arc<Vocab> {
        Arc::new(Vocab::new(toks("a b c END"), Some("END")).unwrap())
    }

    fn small_linear() -> ModelMode {
        ModelMode::LinearHashed(FeatureConfig {
            width: 64,
            ..FeatureConfig::default()
        })
    }

    fn randomize(model: &mut PolicyModel, rng: &mut ChaCha8Rng, scale: f64) {
        let mut flat = model.flat_params();
        for x in flat.iter_mut() {
            *x = rng.gen_range(-scale..scale);
        }
        model.set_flat_params(&flat).unwrap();
    }

    #[test]
    fn fresh_model_is_uniform() {
        for mode in [ModelMode::TabularExact, small_linear()] {
            let m = PolicyModel::fresh(mode, vocab4(), 1);
            let hist = toks("x y");
            let ctx = Context::actor(&hist);
            for t in ["a", "b", "c", "END"] {
                let lp = m.token_logprob(&ctx, &[], t).unwrap();
                assert!((lp - 0.25f64.ln()).abs() < 1e-12);
            }
            let lp = m.action_logprob(&ctx, &toks("a b c")).unwrap();
            assert!((lp.total - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_token_errors() {
        let m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let h = toks("x");
        assert!(matches!(
            m.token_logprob(&Context::actor(&h), &[], "zzz"),
            Err(Error::UnknownToken(_))
        ));
        assert!(m.action_logprob(&Context::actor(&h), &[]).is_err());
    }

    #[test]
    fn saturated_logit_and_logsumexp_fixture() {
        let v = Arc::new(Vocab::new(toks("a b c"), None).unwrap());
        let mut m = PolicyModel::fresh(ModelMode::TabularExact, v, 1);
        let h = toks("x");
        let ctx = Context::actor(&h);
        m.set_logits(&ctx, &[], &[50.0, 0.0, 0.0]).unwrap();
        assert!(m.token_logprob(&ctx, &[], "a").unwrap().abs() < 1e-20);
        m.set_logits(&ctx, &[], &[1.0, 2.0, 3.0]).unwrap();
        let lp = m.token_logprob(&ctx, &[], "c").unwrap();
        let oracle = 3.0 - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lp - oracle).abs() < 1e-14);
        assert!((lp + 0.407606).abs() < 1e-6);
    }

    #[test]
    fn per_token_conditions_on_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [ModelMode::TabularExact, small_linear()] {
            let mut m = PolicyModel::fresh(mode, vocab4(), 3);
            let h = toks("x y");
            let ctx = Context::actor(&h);
            let action = toks("b a END");
            let g = m.logprob_grad(&ctx, &action).unwrap();
            m.materialize(&g);
            randomize(&mut m, &mut rng, 1.0);
            let lp = m.action_logprob(&ctx, &action).unwrap();
            for l in 0..action.len() {
                let direct = m.token_logprob(&ctx, &action[..l], &action[l]).unwrap();
                assert!((direct - lp.per_token[l]).abs() < 1e-12);
            }
            let single = m.action_logprob(&ctx, &action[..1]).unwrap();
            assert_eq!(single.total, m.token_logprob(&ctx, &[], "b").unwrap());
            let prod: f64 = lp.per_token.iter().map(|x| x.exp()).product();
            assert!((lp.total.exp() - prod).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_respects_max_len_and_end() {
        let m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = toks("x");
        for _ in 0..200 {
            assert_eq!(m.sample_action(&Context::actor(&h), &mut rng, 1).len(), 1);
            let a = m.sample_action(&Context::actor(&h), &mut rng, 5);
            assert!(!a.is_empty() && a.len() <= 5);
            if a.len() < 5 {
                assert_eq!(a.last().unwrap(), "END");
            }
            assert!(a[..a.len() - 1].iter().all(|t| t != "END"));
        }
    }

    #[test]
    fn deterministic_model_samples_fixed_sequence() {
        let mut m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let h = toks("x");
        let ctx = Context::actor(&h);
        m.set_logits(&ctx, &[], &[0.0, 50.0, 0.0, 0.0]).unwrap();
        m.set_logits(&ctx, &toks("b"), &[50.0, 0.0, 0.0, 0.0]).unwrap();
        m.set_logits(&ctx, &toks("b a"), &[0.0, 0.0, 0.0, 50.0]).unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(m.sample_action(&ctx, &mut rng, 6), toks("b a END"));
        }
        assert_eq!(m.greedy_action(&ctx, 6), toks("b a END"));
    }

    #[test]
    fn first_token_frequencies_match_uniform() {
        // 10^5 draws from a fresh 4-token model; the standard error per
        // frequency is about 0.0014, so ±0.01 is ~7 sigma.
        let m = PolicyModel::fresh(small_linear(), vocab4(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = toks("x");
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let a = m.sample_action(&Context::actor(&h), &mut rng, 3);
            counts[m.vocab().id(&a[0]).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let h = toks("x");
        let ctx = Context::actor(&h);
        let action = toks("a c END");
        m.materialize(&m.logprob_grad(&ctx, &action).unwrap());
        randomize(&mut m, &mut rng, 2.0);
        let g = m.logprob_grad(&ctx, &action).unwrap();
        assert_eq!(g.rows().count(), 3);
        for (_, row) in g.rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_softmax_has_vanishing_gradient() {
        let mut m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let h = toks("x");
        let ctx = Context::actor(&h);
        m.set_logits(&ctx, &[], &[50.0, 0.0, 0.0, 0.0]).unwrap();
        let g = m.logprob_grad(&ctx, &toks("a")).unwrap();
        assert!(g.norm() < 1e-20);
    }

    fn central_difference_check(mode: ModelMode, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = PolicyModel::fresh(mode, vocab4(), seed);
        let hidden = toks("c1 c2");
        let hist = toks("p q r");
        let ctx = Context::with_hidden(&hidden, &hist);
        let action = toks("b b a END");
        m.materialize(&m.logprob_grad(&ctx, &action).unwrap());
        randomize(&mut m, &mut rng, 1.5);
        let g = m.logprob_grad(&ctx, &action).unwrap();
        let analytic = m.flatten_gradient(&g).unwrap();
        let base = m.flat_params();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut probe = m.clone();
            let mut p = base.clone();
            p[i] += eps;
            probe.set_flat_params(&p).unwrap();
            let up = probe.action_logprob(&ctx, &action).unwrap().total;
            p[i] -= 2.0 * eps;
            probe.set_flat_params(&p).unwrap();
            let down = probe.action_logprob(&ctx, &action).unwrap().total;
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            if analytic[i].abs() > 1e-6 || fd.abs() > 1e-6 {
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..3 {
            assert!(central_difference_check(ModelMode::TabularExact, seed) < 1e-5);
            let lin = ModelMode::LinearHashed(FeatureConfig {
                width: 16,
                ..FeatureConfig::default()
            });
            assert!(central_difference_check(lin, seed) < 1e-5);
        }
    }

    #[test]
    fn frozen_reference_is_isolated() {
        let mut m = PolicyModel::fresh(small_linear(), vocab4(), 1);
        let h = toks("x y");
        let ctx = Context::actor(&h);
        let action = toks("a END");
        let frozen = freeze_reference(&m);
        assert_eq!(
            frozen.action_logprob(&ctx, &action).unwrap(),
            m.action_logprob(&ctx, &action).unwrap()
        );
        let before = frozen.action_logprob(&ctx, &action).unwrap();
        let g = m.logprob_grad(&ctx, &action).unwrap();
        m.apply(&g, 1.0);
        assert_ne!(m.action_logprob(&ctx, &action).unwrap(), before);
        assert_eq!(frozen.action_logprob(&ctx, &action).unwrap(), before);
        let fresh = freeze_reference(&PolicyModel::fresh(small_linear(), vocab4(), 1));
        let lp = fresh.token_logprob(&ctx, &[], "b").unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [ModelMode::TabularExact, small_linear()] {
            let mut m = PolicyModel::fresh(mode, vocab4(), 77);
            let h = toks("x y z");
            let ctx = Context::actor(&h);
            let action = toks("c a END");
            for _ in 0..3 {
                let g = m.logprob_grad(&ctx, &action).unwrap();
                m.apply(&g, rng.gen_range(0.1..1.0));
            }
            let back = PolicyModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(
                back.action_logprob(&ctx, &action).unwrap(),
                m.action_logprob(&ctx, &action).unwrap()
            );
            assert_eq!(back.flat_params(), m.flat_params());
        }
    }

    #[test]
    fn exact_keys_separate_hidden_from_history() {
        let m = PolicyModel::fresh(ModelMode::TabularExact, vocab4(), 1);
        let a = toks("x");
        let b = toks("y");
        let k1 = m.context_key(&Context::with_hidden(&a, &b), &[]);
        let k2 = m.context_key(&Context::actor(&toks("x y")), &[]);
        let k3 = m.context_key(&Context::with_hidden(&[], &toks("x y")), &[]);
        assert_ne!(k1, k2);
        assert_ne!(k2, k3);
    }

    /// Contexts of one token with unigram-suffix-only features are one-hot,
    /// so the hashed model is a relabelled table once no two contexts collide.
    #[test]
    fn linear_reproduces_tabular_without_collisions() {
        let contexts = ["p", "q", "r", "s", "t"];
        let features = FeatureConfig {
            width: 8,
            bag_order: 0,
            suffix_order: 1,
            bias: false,
            position: false,
            turns: false,
            context_positions: 1,
        };
        let seed = (0..10_000u64)
            .find(|&s| {
                let h = FeatureHasher::new(features, s);
                let mut seen: Vec<u32> = contexts
                    .iter()
                    .map(|c| h.hash_tokens(Segment::Suffix, [&c.to_string()]))
                    .collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len() == contexts.len()
            })
            .expect("collision-free seed");
        let v = Arc::new(Vocab::new(toks("a b c"), None).unwrap());
        let mut tab = PolicyModel::fresh(ModelMode::TabularExact, v.clone(), seed);
        let mut lin = PolicyModel::fresh(ModelMode::LinearHashed(features), v, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 0..200 {
            let c = vec![contexts[step % contexts.len()].to_string()];
            let action = vec![["a", "b", "c"][rng.gen_range(0..3)].to_string()];
            let ctx = Context::actor(&c);
            let lr = 0.3;
            let gt = tab.logprob_grad(&ctx, &action).unwrap();
            let gl = lin.logprob_grad(&ctx, &action).unwrap();
            tab.apply(&gt, lr);
            lin.apply(&gl, lr);
        }
        for c in contexts {
            let c = vec![c.to_string()];
            for t in ["a", "b", "c"] {
                let x = tab.token_logprob(&Context::actor(&c), &[], t).unwrap();
                let y = lin.token_logprob(&Context::actor(&c), &[], t).unwrap();
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_normalizes_on_random_contexts(
            seed in 0u64..1000,
            hist in prop::collection::vec(prop::sample::select(vec!["a", "b", "x", "y", "="]), 1..8),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = PolicyModel::fresh(small_linear(), vocab4(), seed);
            randomize(&mut m, &mut rng, 3.0);
            let hist: Vec<Token> = hist.into_iter().map(String::from).collect();
            let ctx = Context::actor(&hist);
            let total: f64 = ["a", "b", "c", "END"]
                .iter()
                .map(|t| m.token_logprob(&ctx, &[], t).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
