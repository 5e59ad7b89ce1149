//! Question/relation-path scorer with hand-written gradients.
//!
//! Questions are embedded token by token; a candidate relation path is the
//! mean over its relations of `0.5 * relation embedding + 0.5 * mean word
//! embedding of the relation's label tokens`. Scores are cosines, either
//! against the pooled question (`MeanPool`) or against an attention-weighted
//! question vector (`Attentive`).
//!
//! With `positional` enabled, a learned position vector is added to each
//! question token (by token index) and to each relation of a path (by hop
//! index). Without it both encoders are order-free.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::datagen::stream_rng;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    MeanPool,
    Attentive,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MeanPool => "meanpool",
            Variant::Attentive => "attentive",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanpool" => Ok(Variant::MeanPool),
            "attentive" => Ok(Variant::Attentive),
            other => Err(Error::Config(format!("unknown scorer variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub variant: Variant,
    pub dim: usize,
    pub positional: bool,
    pub max_positions: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            variant: Variant::Attentive,
            dim: 64,
            positional: true,
            max_positions: 32,
            init_scale: 0.08,
            seed: 0,
        }
    }
}

pub const UNK: &str = "<unk>";

/// Word index. Index 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Relation label tokens first (by relation id), then question tokens in
    /// first-appearance order.
    pub fn build<'a, I>(questions: I, graph: &KnowledgeGraph) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut v = Vocab {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for r in 0..graph.num_relations() {
            for t in graph.tokens(RelationId(r as u32)) {
                v.insert(t);
            }
        }
        for q in questions {
            for t in q {
                v.insert(t);
            }
        }
        v
    }

    fn insert(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
        }
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{i}\n"))
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (w, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::Checkpoint(format!("vocab line {}: missing tab", i + 1)))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("vocab line {}: bad index", i + 1)))?;
            if idx != i {
                return Err(Error::Checkpoint(format!(
                    "vocab line {}: index {idx} out of order",
                    i + 1
                )));
            }
            words.push(w.to_string());
        }
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint("vocab index 0 must be <unk>".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab { words, index })
    }
}

/// Trainable tensors. The same struct doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub word_emb: Array2<f64>,
    pub rel_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    /// `d x d` for the attentive variant, `d x 2d` for mean-pool.
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            word_emb: Array2::zeros(other.word_emb.raw_dim()),
            rel_emb: Array2::zeros(other.rel_emb.raw_dim()),
            pos_emb: Array2::zeros(other.pos_emb.raw_dim()),
            proj_w: Array2::zeros(other.proj_w.raw_dim()),
            proj_b: Array1::zeros(other.proj_b.raw_dim()),
        }
    }

    pub const NAMES: [&'static str; 5] = ["word_emb", "rel_emb", "pos_emb", "proj_w", "proj_b"];

    /// Flat mutable views of every tensor, in [`Params::NAMES`] order.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.word_emb.as_slice_mut().expect("standard layout"),
            self.rel_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
            self.proj_w.as_slice_mut().expect("standard layout"),
            self.proj_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.word_emb.as_slice().expect("standard layout"),
            self.rel_emb.as_slice().expect("standard layout"),
            self.pos_emb.as_slice().expect("standard layout"),
            self.proj_w.as_slice().expect("standard layout"),
            self.proj_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Encoded question. `attention` caches the weights of the most recent
/// attentive score call.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRepr {
    pub token_ids: Vec<usize>,
    pub token_vecs: Array2<f64>,
    pub pooled: Array1<f64>,
    pub attention: Option<Vec<f64>>,
}

/// Gradient w.r.t. one question state.
#[derive(Debug, Clone)]
struct QuestionGrad {
    tokens: Array2<f64>,
    pooled: Array1<f64>,
}

impl QuestionGrad {
    fn zeros(q: &QuestionRepr) -> Self {
        QuestionGrad {
            tokens: Array2::zeros(q.token_vecs.raw_dim()),
            pooled: Array1::zeros(q.pooled.raw_dim()),
        }
    }
}

#[derive(Debug, Clone)]
struct ScoreForward {
    value: f64,
    /// Vector compared against the path: pooled question or attended sum.
    query: Array1<f64>,
    attention: Option<Vec<f64>>,
    degenerate: bool,
}

#[derive(Debug)]
pub struct Model {
    pub config: ScorerConfig,
    pub vocab: Vocab,
    pub params: Params,
    relation_labels: Vec<String>,
    rel_tokens: Vec<Vec<usize>>,
    degenerate: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            relation_labels: self.relation_labels.clone(),
            rel_tokens: self.rel_tokens.clone(),
            degenerate: AtomicUsize::new(self.degenerate.load(Ordering::Relaxed)),
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

impl Model {
    /// Fresh model: embeddings uniform in `[-init_scale, init_scale]`, the
    /// update projection starts as identity (`[I | 0]` for mean-pool) with
    /// zero bias.
    pub fn new(config: ScorerConfig, vocab: Vocab, graph: &KnowledgeGraph) -> Self {
        let d = config.dim;
        let mut rng = stream_rng(config.seed, 100);
        let scale = config.init_scale;
        let mut uniform =
            |rows: usize| Array2::from_shape_simple_fn((rows, d), || rng.gen_range(-scale..=scale));
        let word_emb = uniform(vocab.len());
        let rel_emb = uniform(graph.num_relations());
        let pos_emb = uniform(config.max_positions.max(1));
        let proj_w = match config.variant {
            Variant::Attentive => Array2::eye(d),
            Variant::MeanPool => {
                let mut w = Array2::zeros((d, 2 * d));
                for i in 0..d {
                    w[[i, i]] = 1.0;
                }
                w
            }
        };
        let params = Params {
            word_emb,
            rel_emb,
            pos_emb,
            proj_w,
            proj_b: Array1::zeros(d),
        };
        Self::from_parts(
            config,
            vocab,
            params,
            graph.relation_labels().to_vec(),
            graph,
        )
    }

    fn from_parts(
        config: ScorerConfig,
        vocab: Vocab,
        params: Params,
        relation_labels: Vec<String>,
        graph: &KnowledgeGraph,
    ) -> Self {
        let rel_tokens = (0..graph.num_relations())
            .map(|r| {
                graph
                    .tokens(RelationId(r as u32))
                    .iter()
                    .map(|t| vocab.lookup(t))
                    .collect()
            })
            .collect();
        Model {
            config,
            vocab,
            params,
            relation_labels,
            rel_tokens,
            degenerate: AtomicUsize::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Number of score calls that hit a zero-norm vector and returned 0.
    pub fn degenerate_scores(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    fn position(&self, i: usize) -> usize {
        i.min(self.params.pos_emb.nrows() - 1)
    }

    pub fn encode_question(&self, tokens: &[String]) -> Result<QuestionRepr> {
        if tokens.is_empty() {
            return Err(Error::EmptyQuestion);
        }
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.lookup(t)).collect();
        let d = self.dim();
        let mut vecs = Array2::zeros((ids.len(), d));
        for (i, &w) in ids.iter().enumerate() {
            let mut row = vecs.row_mut(i);
            row.assign(&self.params.word_emb.row(w));
            if self.config.positional {
                row += &self.params.pos_emb.row(self.position(i));
            }
        }
        let pooled = vecs.mean_axis(Axis(0)).expect("non-empty");
        Ok(QuestionRepr {
            token_ids: ids,
            token_vecs: vecs,
            pooled,
            attention: None,
        })
    }

    pub fn encode_path(&self, path: &[RelationId]) -> Result<Array1<f64>> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        let d = self.dim();
        let mut acc = Array1::zeros(d);
        for (j, &r) in path.iter().enumerate() {
            let toks = self
                .rel_tokens
                .get(r.index())
                .ok_or_else(|| Error::UnknownRelation(format!("#{}", r.0)))?;
            acc.scaled_add(0.5, &self.params.rel_emb.row(r.index()));
            let w = 0.5 / toks.len() as f64;
            for &t in toks {
                acc.scaled_add(w, &self.params.word_emb.row(t));
            }
            if self.config.positional {
                acc += &self.params.pos_emb.row(self.position(j));
            }
        }
        acc /= path.len() as f64;
        Ok(acc)
    }

    fn attention(&self, q: &QuestionRepr, p: ArrayView1<f64>) -> Vec<f64> {
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        let logits: Vec<f64> = q
            .token_vecs
            .rows()
            .into_iter()
            .map(|t| t.dot(&p) * inv_sqrt_d)
            .collect();
        softmax(&logits)
    }

    fn score_forward(&self, q: &QuestionRepr, p: ArrayView1<f64>) -> ScoreForward {
        let (query, attention) = match self.variant() {
            Variant::MeanPool => (q.pooled.clone(), None),
            Variant::Attentive => {
                let a = self.attention(q, p);
                let mut att = Array1::zeros(self.dim());
                for (ai, t) in a.iter().zip(q.token_vecs.rows()) {
                    att.scaled_add(*ai, &t);
                }
                (att, Some(a))
            }
        };
        let nq = norm(query.view());
        let np = norm(p);
        let degenerate = nq == 0.0 || np == 0.0;
        let value = if degenerate {
            0.0
        } else {
            query.dot(&p) / (nq * np)
        };
        ScoreForward {
            value,
            query,
            attention,
            degenerate,
        }
    }

    /// Cosine score in `[-1, 1]`; the attentive variant stores its attention
    /// weights in `q`. Zero-norm inputs score 0 and are counted.
    pub fn score(&self, q: &mut QuestionRepr, p: &Array1<f64>) -> f64 {
        let fwd = self.score_forward(q, p.view());
        if fwd.degenerate {
            self.degenerate.fetch_add(1, Ordering::Relaxed);
        }
        if fwd.attention.is_some() {
            q.attention = fwd.attention;
        }
        fwd.value
    }

    /// Accumulates `g * d score / d (q, p)` into `dq` and `dp`.
    fn score_backward(
        &self,
        q: &QuestionRepr,
        p: ArrayView1<f64>,
        fwd: &ScoreForward,
        g: f64,
        dq: &mut QuestionGrad,
        dp: &mut Array1<f64>,
    ) {
        if fwd.degenerate || g == 0.0 {
            return;
        }
        let u = &fwd.query;
        let nu = norm(u.view());
        let nv = norm(p);
        let s = fwd.value;
        // d cos / du and d cos / dv
        let mut du = p.to_owned() * (g / (nu * nv));
        du.scaled_add(-g * s / (nu * nu), u);
        dp.scaled_add(g / (nu * nv), u);
        dp.scaled_add(-g * s / (nv * nv), &p);

        match &fwd.attention {
            None => dq.pooled += &du,
            Some(a) => {
                let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
                let da: Vec<f64> = q
                    .token_vecs
                    .rows()
                    .into_iter()
                    .map(|t| t.dot(&du))
                    .collect();
                let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for (i, t) in q.token_vecs.rows().into_iter().enumerate() {
                    let dl = a[i] * (da[i] - mean_da);
                    let mut dt = dq.tokens.row_mut(i);
                    dt.scaled_add(a[i], &du);
                    dt.scaled_add(dl * inv_sqrt_d, &p);
                    dp.scaled_add(dl * inv_sqrt_d, &t);
                }
            }
        }
    }

    /// Dynamic question update against the accepted path representation `p`.
    ///
    /// Attentive: each token becomes `W (t_i - a_i p) + B` using the attention
    /// weights cached in `q` by the last score call, and the pooled vector is
    /// recomputed. Mean-pool: `pooled' = W [pooled ; p] + B`.
    pub fn update_question(&self, q: &QuestionRepr, p: &Array1<f64>) -> Result<QuestionRepr> {
        match self.variant() {
            Variant::Attentive => {
                let a = q.attention.as_ref().ok_or(Error::MissingAttention)?;
                Ok(self.attentive_update(q, p.view(), a))
            }
            Variant::MeanPool => Ok(self.meanpool_update(q, p.view())),
        }
    }

    fn attentive_update(&self, q: &QuestionRepr, p: ArrayView1<f64>, a: &[f64]) -> QuestionRepr {
        let mut shifted = q.token_vecs.clone();
        for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
            row.scaled_add(-a[i], &p);
        }
        let mut vecs = shifted.dot(&self.params.proj_w.t());
        vecs += &self.params.proj_b;
        let pooled = vecs.mean_axis(Axis(0)).expect("non-empty");
        QuestionRepr {
            token_ids: q.token_ids.clone(),
            token_vecs: vecs,
            pooled,
            attention: None,
        }
    }

    fn meanpool_update(&self, q: &QuestionRepr, p: ArrayView1<f64>) -> QuestionRepr {
        let d = self.dim();
        let mut cat = Array1::zeros(2 * d);
        cat.slice_mut(ndarray::s![..d]).assign(&q.pooled);
        cat.slice_mut(ndarray::s![d..]).assign(&p);
        let pooled = self.params.proj_w.dot(&cat) + &self.params.proj_b;
        QuestionRepr {
            token_ids: q.token_ids.clone(),
            token_vecs: q.token_vecs.clone(),
            pooled,
            attention: None,
        }
    }

    fn path_backward(&self, path: &[RelationId], dp: &Array1<f64>, grads: &mut Params) {
        let k = path.len() as f64;
        for (j, &r) in path.iter().enumerate() {
            let mut row = grads.rel_emb.row_mut(r.index());
            row.scaled_add(0.5 / k, dp);
            let toks = &self.rel_tokens[r.index()];
            let w = 0.5 / (k * toks.len() as f64);
            for &t in toks {
                grads.word_emb.row_mut(t).scaled_add(w, dp);
            }
            if self.config.positional {
                grads
                    .pos_emb
                    .row_mut(self.position(j))
                    .scaled_add(1.0 / k, dp);
            }
        }
    }

    fn question_backward(&self, q: &QuestionRepr, dq: &QuestionGrad, grads: &mut Params) {
        let n = q.token_ids.len() as f64;
        for (i, &w) in q.token_ids.iter().enumerate() {
            let mut dt = dq.tokens.row(i).to_owned();
            dt.scaled_add(1.0 / n, &dq.pooled);
            grads.word_emb.row_mut(w).scaled_add(1.0, &dt);
            if self.config.positional {
                grads.pos_emb.row_mut(self.position(i)).scaled_add(1.0, &dt);
            }
        }
    }

    pub(crate) fn set_relation_labels(&mut self, labels: Vec<String>) {
        self.relation_labels = labels;
    }

    pub(crate) fn assemble(
        config: ScorerConfig,
        vocab: Vocab,
        params: Params,
        graph: &KnowledgeGraph,
    ) -> Self {
        Self::from_parts(
            config,
            vocab,
            params,
            graph.relation_labels().to_vec(),
            graph,
        )
    }
}

/// Something that scores relation paths for a question. The engine drives
/// search through this trait so the learned model and test oracles are
/// interchangeable.
pub trait PathScorer: Sync {
    type State: Clone + Send;

    fn begin(&self, question: &[String]) -> Result<Self::State>;

    fn score(&self, state: &mut Self::State, path: &[RelationId]) -> Result<f64>;

    /// Called once per accepted hop when the dynamic question update is on.
    /// The most recent `score` call on `state` was against `accepted`.
    fn advance(&self, state: &mut Self::State, accepted: &[RelationId]) -> Result<()>;
}

impl PathScorer for Model {
    type State = QuestionRepr;

    fn begin(&self, question: &[String]) -> Result<QuestionRepr> {
        self.encode_question(question)
    }

    fn score(&self, state: &mut QuestionRepr, path: &[RelationId]) -> Result<f64> {
        let p = self.encode_path(path)?;
        Ok(Model::score(self, state, &p))
    }

    fn advance(&self, state: &mut QuestionRepr, accepted: &[RelationId]) -> Result<()> {
        let p = self.encode_path(accepted)?;
        *state = self.update_question(state, &p)?;
        Ok(())
    }
}

impl<T: PathScorer> PathScorer for &T {
    type State = T::State;

    fn begin(&self, question: &[String]) -> Result<T::State> {
        (**self).begin(question)
    }

    fn score(&self, state: &mut T::State, path: &[RelationId]) -> Result<f64> {
        (**self).score(state, path)
    }

    fn advance(&self, state: &mut T::State, accepted: &[RelationId]) -> Result<()> {
        (**self).advance(state, accepted)
    }
}

/// Scores gold prefixes of length `k` as `k / H` and everything else 0, so
/// the gold path strictly beats both its prefixes and its extensions.
#[derive(Debug, Clone)]
pub struct PrefixOracle {
    pub gold: Vec<RelationId>,
}

impl PathScorer for PrefixOracle {
    type State = ();

    fn begin(&self, _question: &[String]) -> Result<()> {
        Ok(())
    }

    fn score(&self, _state: &mut (), path: &[RelationId]) -> Result<f64> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        Ok(if self.gold.starts_with(path) {
            path.len() as f64 / self.gold.len() as f64
        } else {
            0.0
        })
    }

    fn advance(&self, _state: &mut (), _accepted: &[RelationId]) -> Result<()> {
        Ok(())
    }
}

/// Every path gets the same score.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl PathScorer for ConstantScorer {
    type State = ();

    fn begin(&self, _question: &[String]) -> Result<()> {
        Ok(())
    }

    fn score(&self, _state: &mut (), _path: &[RelationId]) -> Result<f64> {
        Ok(self.0)
    }

    fn advance(&self, _state: &mut (), _accepted: &[RelationId]) -> Result<()> {
        Ok(())
    }
}

struct PairRecord {
    state: usize,
    path: Vec<RelationId>,
    p: Array1<f64>,
    fwd: ScoreForward,
}

struct UpdateRecord {
    path: Vec<RelationId>,
    p: Array1<f64>,
    attention: Option<Vec<f64>>,
}

/// Recorded forward computation for one training example: a chain of
/// question states (one per dynamic update) and every scored pair. Loss
/// gradients enter as one coefficient per scored pair.
pub struct Tape<'m> {
    model: &'m Model,
    states: Vec<QuestionRepr>,
    updates: Vec<UpdateRecord>,
    pairs: Vec<PairRecord>,
}

impl<'m> Tape<'m> {
    pub fn new(model: &'m Model, question: &[String]) -> Result<Self> {
        Ok(Tape {
            model,
            states: vec![model.encode_question(question)?],
            updates: Vec::new(),
            pairs: Vec::new(),
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Scores `path` against the current question state. Returns the pair
    /// index (for [`Tape::backward`]) and the score.
    pub fn score(&mut self, path: &[RelationId]) -> Result<(usize, f64)> {
        let p = self.model.encode_path(path)?;
        let state = self.states.len() - 1;
        let fwd = self.model.score_forward(&self.states[state], p.view());
        let value = fwd.value;
        self.pairs.push(PairRecord {
            state,
            path: path.to_vec(),
            p,
            fwd,
        });
        Ok((self.pairs.len() - 1, value))
    }

    /// Applies the dynamic update for an accepted path.
    pub fn advance(&mut self, accepted: &[RelationId]) -> Result<()> {
        let model = self.model;
        let p = model.encode_path(accepted)?;
        let q = self.states.last().expect("at least one state");
        let (next, attention) = match model.variant() {
            Variant::Attentive => {
                let a = model.attention(q, p.view());
                (model.attentive_update(q, p.view(), &a), Some(a))
            }
            Variant::MeanPool => (model.meanpool_update(q, p.view()), None),
        };
        self.states.push(next);
        self.updates.push(UpdateRecord {
            path: accepted.to_vec(),
            p,
            attention,
        });
        Ok(())
    }

    /// Accumulates `sum_k coefs[k] * d score_k / d params` into `grads`.
    pub fn backward(&self, coefs: &[f64], grads: &mut Params) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::NoForward);
        }
        assert_eq!(coefs.len(), self.pairs.len(), "one coefficient per pair");
        let model = self.model;
        let mut dstates: Vec<QuestionGrad> = self.states.iter().map(QuestionGrad::zeros).collect();
        for (pair, &c) in self.pairs.iter().zip(coefs) {
            if c == 0.0 {
                continue;
            }
            let mut dp = Array1::zeros(model.dim());
            model.score_backward(
                &self.states[pair.state],
                pair.p.view(),
                &pair.fwd,
                c,
                &mut dstates[pair.state],
                &mut dp,
            );
            model.path_backward(&pair.path, &dp, grads);
        }
        for s in (1..self.states.len()).rev() {
            let upd = &self.updates[s - 1];
            let (before, after) = dstates.split_at_mut(s);
            let dnext = &after[0];
            let dprev = &mut before[s - 1];
            let mut dp = Array1::zeros(model.dim());
            match model.variant() {
                Variant::Attentive => {
                    let a = upd
                        .attention
                        .as_ref()
                        .expect("attentive update records weights");
                    self.attentive_update_backward(s - 1, upd, a, dnext, dprev, &mut dp, grads);
                }
                Variant::MeanPool => {
                    self.meanpool_update_backward(s - 1, upd, dnext, dprev, &mut dp, grads);
                }
            }
            model.path_backward(&upd.path, &dp, grads);
        }
        model.question_backward(&self.states[0], &dstates[0], grads);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attentive_update_backward(
        &self,
        prev: usize,
        upd: &UpdateRecord,
        a: &[f64],
        dnext: &QuestionGrad,
        dprev: &mut QuestionGrad,
        dp: &mut Array1<f64>,
        grads: &mut Params,
    ) {
        let model = self.model;
        let q = &self.states[prev];
        let p = &upd.p;
        let n = q.token_ids.len() as f64;
        // pooled of an attentive state is the token mean
        let mut g = dnext.tokens.clone();
        for mut row in g.rows_mut() {
            row.scaled_add(1.0 / n, &dnext.pooled);
        }
        let mut shifted = q.token_vecs.clone();
        for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
            row.scaled_add(-a[i], p);
        }
        grads.proj_w += &g.t().dot(&shifted);
        grads.proj_b += &g.sum_axis(Axis(0));
        let dshift = g.dot(&model.params.proj_w);

        let inv_sqrt_d = 1.0 / (model.dim() as f64).sqrt();
        let da: Vec<f64> = dshift.rows().into_iter().map(|r| -r.dot(p)).collect();
        let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for (i, t) in q.token_vecs.rows().into_iter().enumerate() {
            let drow = dshift.row(i);
            dp.scaled_add(-a[i], &drow);
            let dl = a[i] * (da[i] - mean_da);
            let mut dt = dprev.tokens.row_mut(i);
            dt += &drow;
            dt.scaled_add(dl * inv_sqrt_d, p);
            dp.scaled_add(dl * inv_sqrt_d, &t);
        }
    }

    fn meanpool_update_backward(
        &self,
        prev: usize,
        upd: &UpdateRecord,
        dnext: &QuestionGrad,
        dprev: &mut QuestionGrad,
        dp: &mut Array1<f64>,
        grads: &mut Params,
    ) {
        let model = self.model;
        let d = model.dim();
        let q = &self.states[prev];
        let mut cat = Array1::zeros(2 * d);
        cat.slice_mut(ndarray::s![..d]).assign(&q.pooled);
        cat.slice_mut(ndarray::s![d..]).assign(&upd.p);
        let g = &dnext.pooled;
        for (i, gi) in g.iter().enumerate() {
            grads.proj_w.row_mut(i).scaled_add(*gi, &cat);
        }
        grads.proj_b += g;
        let dcat = model.params.proj_w.t().dot(g);
        dprev.pooled += &dcat.slice(ndarray::s![..d]);
        *dp += &dcat.slice(ndarray::s![d..]);
        // tokens pass through unchanged
        dprev.tokens += &dnext.tokens;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "uhop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    /// Text checkpoint: a header, the relation labels, then each tensor as
    /// `tensor <name> <rows> <cols>` followed by one line per row.
    pub fn checkpoint_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "variant {}", c.variant);
        let _ = writeln!(out, "dim {}", c.dim);
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        let _ = writeln!(out, "relations {}", self.relation_labels.len());
        let _ = writeln!(out, "positional {}", c.positional);
        let _ = writeln!(out, "max_positions {}", self.params.pos_emb.nrows());
        for l in &self.relation_labels {
            let _ = writeln!(out, "relation {l}");
        }
        let p = &self.params;
        let proj_b = p.proj_b.view().insert_axis(Axis(0));
        let tensors = [
            ("word_emb", p.word_emb.view()),
            ("rel_emb", p.rel_emb.view()),
            ("pos_emb", p.pos_emb.view()),
            ("proj_w", p.proj_w.view()),
            ("proj_b", proj_b),
        ];
        for (name, t) in tensors {
            let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    /// Writes the checkpoint to `path` and the vocabulary to `vocab.tsv`
    /// in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.checkpoint_text()).map_err(|e| Error::io(path, e))?;
        let vocab = vocab_path(path);
        fs::write(&vocab, self.vocab.to_tsv()).map_err(|e| Error::io(&vocab, e))
    }

    pub fn load(path: impl AsRef<Path>, graph: &KnowledgeGraph) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vpath = vocab_path(path);
        let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        Self::from_checkpoint_text(&text, Vocab::parse_tsv(&vtext)?, graph)
    }

    pub fn from_checkpoint_text(text: &str, vocab: Vocab, graph: &KnowledgeGraph) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| bad("truncated checkpoint".into()))
        };

        let header = next()?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(String::from)
                .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
        };
        let parse_usize = |s: String, what: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(format!("bad {what} {s:?}")))
        };
        let variant: Variant = field("variant")?.parse()?;
        let dim = parse_usize(field("dim")?, "dim")?;
        let n_vocab = parse_usize(field("vocab")?, "vocab size")?;
        let n_rel = parse_usize(field("relations")?, "relation count")?;
        let positional = match field("positional")?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("bad positional flag {other:?}"))),
        };
        let max_positions = parse_usize(field("max_positions")?, "max_positions")?;
        let mut labels = Vec::with_capacity(n_rel);
        for _ in 0..n_rel {
            labels.push(field("relation")?);
        }
        if n_vocab != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "checkpoint expects {n_vocab} words, vocab file has {}",
                vocab.len()
            )));
        }
        if labels.as_slice() != graph.relation_labels() {
            return Err(Error::VocabMismatch(
                "checkpoint relations differ from the graph's relations".into(),
            ));
        }

        let w_cols = match variant {
            Variant::Attentive => dim,
            Variant::MeanPool => 2 * dim,
        };
        let expected = [
            ("word_emb", n_vocab, dim),
            ("rel_emb", n_rel, dim),
            ("pos_emb", max_positions, dim),
            ("proj_w", dim, w_cols),
            ("proj_b", 1, dim),
        ];
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, rows, cols) in expected {
            let head = next()?;
            let want = format!("tensor {name} {rows} {cols}");
            if head != want {
                return Err(bad(format!("expected {want:?}, found {head:?}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = next()?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|_| bad(format!("{name} row {r}: bad float {tok:?}")))?,
                    );
                }
                if data.len() - before != cols {
                    return Err(bad(format!(
                        "{name} row {r}: expected {cols} values, found {}",
                        data.len() - before
                    )));
                }
            }
            tensors.push(Array2::from_shape_vec((rows, cols), data).expect("shape checked"));
        }
        let mut it = tensors.into_iter();
        let params = Params {
            word_emb: it.next().unwrap(),
            rel_emb: it.next().unwrap(),
            pos_emb: it.next().unwrap(),
            proj_w: it.next().unwrap(),
            proj_b: it.next().unwrap().row(0).to_owned(),
        };
        if !params.is_finite() {
            return Err(bad("non-finite parameter values".into()));
        }
        let config = ScorerConfig {
            variant,
            dim,
            positional,
            max_positions,
            ..ScorerConfig::default()
        };
        let mut model = Model::assemble(config, vocab, params, graph);
        model.set_relation_labels(labels);
        Ok(model)
    }
}

pub fn vocab_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_file_name("vocab.tsv")
}
