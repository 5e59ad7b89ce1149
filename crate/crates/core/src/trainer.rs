//! Joint training of hop extraction and termination with pairwise hinge
//! losses, teacher-forced along gold paths.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::datagen::{stream_rng, QaExample};
use crate::engine::{enumerate_paths, run_chain_baseline, run_uhop, EngineConfig};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::scorer::{Model, Params, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    RmsProp { rho: f64, eps: f64 },
    Sgd,
}

/// What the scorer is trained to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Per-hop extraction plus termination losses.
    Uhop,
    /// Rank the gold path above every path up to `max_hops` from the topic.
    Chain { max_hops: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub use_dynamic_question: bool,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 0.001,
            optimizer: Optimizer::RmsProp {
                rho: 0.9,
                eps: 1e-8,
            },
            epochs: 30,
            batch_size: 32,
            patience: 5,
            seed: 0,
            use_dynamic_question: true,
            objective: Objective::Uhop,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::Config(format!(
                "margin {} outside (0, 1]",
                self.margin
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Objective::Chain { max_hops: 0 } = self.objective {
            return Err(Error::Config("chain objective needs max_hops >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn hinge(gap: f64, margin: f64) -> f64 {
    (margin - gap).max(0.0)
}

/// Mean over negatives of `max(0, M - (s_gold - s_neg))`; 0 with no negatives.
pub fn loss_re(s_gold: f64, s_negs: &[f64], margin: f64) -> f64 {
    if s_negs.is_empty() {
        return 0.0;
    }
    s_negs
        .iter()
        .map(|&n| hinge(s_gold - n, margin))
        .sum::<f64>()
        / s_negs.len() as f64
}

pub fn loss_td_continue(s_next_gold: f64, s_current: f64, margin: f64) -> f64 {
    hinge(s_next_gold - s_current, margin)
}

pub fn loss_td_stop(s_path: f64, s_extensions: &[f64], margin: f64) -> f64 {
    loss_re(s_path, s_extensions, margin)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HopLosses {
    pub re: Vec<f64>,
    pub td: Vec<f64>,
}

impl HopLosses {
    pub fn total(&self) -> f64 {
        self.re.iter().sum::<f64>() + self.td.iter().sum::<f64>()
    }

    pub fn total_re(&self) -> f64 {
        self.re.iter().sum()
    }

    pub fn total_td(&self) -> f64 {
        self.td.iter().sum()
    }
}

/// A question resolved against a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldExample {
    pub tokens: Vec<String>,
    pub topic: EntityId,
    pub path: Vec<RelationId>,
}

impl GoldExample {
    pub fn resolve(graph: &KnowledgeGraph, ex: &QaExample) -> Result<Self> {
        let topic = graph
            .entity(&ex.topic_entity)
            .ok_or_else(|| Error::UnknownEntity(ex.topic_entity.clone()))?;
        let path = graph.relation_path(&ex.gold_path)?;
        if path.is_empty() || graph.execute(topic, &path).is_none() {
            return Err(Error::Transit {
                entity: ex.topic_entity.clone(),
                relation: ex.gold_path.join(" > "),
            });
        }
        Ok(GoldExample {
            tokens: ex.question_tokens.clone(),
            topic,
            path,
        })
    }
}

/// Resolves examples, skipping (with a warning) any whose gold path does not
/// execute.
pub fn resolve_all(graph: &KnowledgeGraph, examples: &[QaExample]) -> Vec<GoldExample> {
    examples
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| match GoldExample::resolve(graph, ex) {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("skipping example {i}: {e}");
                None
            }
        })
        .collect()
}

/// Accumulates hinge terms and the per-pair loss derivative.
struct LossBuilder {
    coefs: Vec<f64>,
    margin: f64,
}

impl LossBuilder {
    fn coef(&mut self, pair: usize) -> &mut f64 {
        if self.coefs.len() <= pair {
            self.coefs.resize(pair + 1, 0.0);
        }
        &mut self.coefs[pair]
    }

    /// `weight * max(0, M - (s_pos - s_neg))`, recording d/ds.
    fn pair(&mut self, pos: (usize, f64), neg: (usize, f64), weight: f64) -> f64 {
        let l = hinge(pos.1 - neg.1, self.margin);
        // subgradient 0 at the kink
        if l > 0.0 {
            *self.coef(pos.0) -= weight;
            *self.coef(neg.0) += weight;
        }
        weight * l
    }

    fn mean_vs(&mut self, pos: (usize, f64), negs: &[(usize, f64)]) -> f64 {
        if negs.is_empty() {
            return 0.0;
        }
        let w = 1.0 / negs.len() as f64;
        negs.iter().map(|&n| self.pair(pos, n, w)).sum()
    }
}

/// Forward pass of one example; returns the tape, per-pair loss derivatives,
/// and the loss terms.
pub fn example_forward<'m>(
    model: &'m Model,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    config: &TrainConfig,
) -> Result<(Tape<'m>, Vec<f64>, HopLosses)> {
    let mut tape = Tape::new(model, &ex.tokens)?;
    let mut lb = LossBuilder {
        coefs: Vec::new(),
        margin: config.margin,
    };
    let mut losses = HopLosses::default();
    match config.objective {
        Objective::Uhop => uhop_terms(&mut tape, &mut lb, &mut losses, ex, graph, config)?,
        Objective::Chain { max_hops } => {
            chain_terms(&mut tape, &mut lb, &mut losses, ex, graph, max_hops)?
        }
    }
    let mut coefs = lb.coefs;
    coefs.resize(tape.num_pairs(), 0.0);
    Ok((tape, coefs, losses))
}

fn uhop_terms(
    tape: &mut Tape<'_>,
    lb: &mut LossBuilder,
    losses: &mut HopLosses,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    config: &TrainConfig,
) -> Result<()> {
    let gold = &ex.path;
    let hops = gold.len();
    let mut frontier = vec![ex.topic];
    let mut path: Vec<RelationId> = Vec::with_capacity(hops + 1);
    for i in 0..hops {
        // extraction: gold prefix extended by every frontier relation
        let mut pos = None;
        let mut negs = Vec::new();
        for r in graph.frontier_relations(&frontier) {
            path.push(r);
            let scored = tape.score(&path)?;
            path.pop();
            if r == gold[i] {
                pos = Some(scored);
            } else {
                negs.push(scored);
            }
        }
        let pos = pos.ok_or_else(|| Error::Transit {
            entity: graph.entity_label(ex.topic).to_string(),
            relation: graph.relation_label(gold[i]).to_string(),
        })?;
        losses.re.push(lb.mean_vs(pos, &negs));

        path.push(gold[i]);
        frontier = graph.step(&frontier, gold[i]);

        // termination
        if i + 1 < hops {
            path.push(gold[i + 1]);
            let next = tape.score(&path)?;
            path.pop();
            let current = tape.score(&path)?;
            losses.td.push(lb.pair(next, current, 1.0));
            if config.use_dynamic_question {
                tape.advance(&path)?;
            }
        } else {
            let mut exts = Vec::new();
            for r in graph.frontier_relations(&frontier) {
                path.push(r);
                exts.push(tape.score(&path)?);
                path.pop();
            }
            let current = tape.score(&path)?;
            losses.td.push(lb.mean_vs(current, &exts));
        }
    }
    Ok(())
}

fn chain_terms(
    tape: &mut Tape<'_>,
    lb: &mut LossBuilder,
    losses: &mut HopLosses,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    max_hops: usize,
) -> Result<()> {
    let mut pos = None;
    let mut negs = Vec::new();
    for p in enumerate_paths(graph, ex.topic, max_hops, usize::MAX)? {
        let scored = tape.score(&p)?;
        if p == ex.path {
            pos = Some(scored);
        } else {
            negs.push(scored);
        }
    }
    // a gold path longer than max_hops cannot be ranked
    if let Some(pos) = pos {
        losses.re.push(lb.mean_vs(pos, &negs));
    } else {
        losses.re.push(0.0);
    }
    Ok(())
}

/// Forward, loss and gradient accumulation for one example (scaled by
/// `weight`, typically `1 / batch size`).
pub fn train_example(
    model: &Model,
    grads: &mut Params,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    config: &TrainConfig,
    weight: f64,
) -> Result<HopLosses> {
    let (tape, mut coefs, losses) = example_forward(model, ex, graph, config)?;
    if coefs.iter().any(|&c| c != 0.0) {
        coefs.iter_mut().for_each(|c| *c *= weight);
        tape.backward(&coefs, grads)?;
    }
    Ok(losses)
}

pub fn example_loss(
    model: &Model,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    config: &TrainConfig,
) -> Result<f64> {
    Ok(example_forward(model, ex, graph, config)?.2.total())
}

/// Optimizer state over a parameter set.
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    cache: Option<Params>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, params: &Params) -> Self {
        let cache = match kind {
            Optimizer::RmsProp { .. } => Some(Params::zeros_like(params)),
            Optimizer::Sgd => None,
        };
        OptimizerState { kind, lr, cache }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        match (self.kind, self.cache.as_mut()) {
            (Optimizer::RmsProp { rho, eps }, Some(cache)) => {
                for ((p, g), c) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(cache.tensors_mut())
                {
                    for ((p, &g), c) in p.iter_mut().zip(g).zip(c.iter_mut()) {
                        *c = rho * *c + (1.0 - rho) * g * g;
                        *p -= self.lr * g / (c.sqrt() + eps);
                    }
                }
            }
            _ => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, &g) in p.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_loss_re: f64,
    pub mean_loss_td: f64,
    pub valid_path_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_valid: f64,
}

/// Exact-match path accuracy under the objective's own decoder.
pub fn path_accuracy(
    model: &Model,
    examples: &[GoldExample],
    graph: &KnowledgeGraph,
    objective: Objective,
    engine: &EngineConfig,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct: usize = examples
        .par_iter()
        .map(|ex| {
            let pred = match objective {
                Objective::Uhop => {
                    run_uhop(model, &ex.tokens, ex.topic, graph, engine).map(|r| r.0)
                }
                Objective::Chain { max_hops } => run_chain_baseline(
                    model,
                    &ex.tokens,
                    ex.topic,
                    graph,
                    max_hops,
                    engine.chain_budget,
                )
                .map(|r| r.0),
            };
            usize::from(pred.is_ok_and(|p| p == ex.path))
        })
        .sum();
    correct as f64 / examples.len() as f64
}

/// Epoch loop with seeded shuffling, per-epoch validation accuracy, best-model
/// tracking and early stopping on validation accuracy.
pub fn fit(
    model: Model,
    train: &[GoldExample],
    valid: &[GoldExample],
    graph: &KnowledgeGraph,
    config: &TrainConfig,
    engine: &EngineConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let engine = EngineConfig {
        use_dynamic_question: config.use_dynamic_question,
        ..engine.clone()
    };
    let mut model = model;
    let mut best = model.clone();
    let mut best_valid = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &model.params);
    let mut grads = Params::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut rng = stream_rng(config.seed, 10_000 + epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut sum_re, mut sum_td) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let l = train_example(&model, &mut grads, &train[i], graph, config, w)?;
                let total = l.total();
                if !total.is_finite() {
                    return Err(Error::NonFinite {
                        example: i,
                        value: total,
                    });
                }
                sum += total;
                sum_re += l.total_re();
                sum_td += l.total_td();
            }
            opt.step(&mut model.params, &grads);
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite {
                example: usize::MAX,
                value: f64::NAN,
            });
        }
        let valid_acc = path_accuracy(&model, valid, graph, config.objective, &engine);
        let n = train.len() as f64;
        log.push(EpochLog {
            epoch,
            mean_loss: sum / n,
            mean_loss_re: sum_re / n,
            mean_loss_td: sum_td / n,
            valid_path_acc: valid_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.5} valid acc {:.4}",
            sum / n,
            valid_acc
        );
        if valid_acc > best_valid {
            best_valid = valid_acc;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if log.is_empty() {
        best_valid = 0.0;
    }
    Ok(FitResult {
        model: best,
        log,
        best_epoch,
        best_valid,
    })
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out =
        String::from("epoch,mean_loss,mean_loss_re,mean_loss_td,valid_path_acc,seconds\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            e.epoch, e.mean_loss, e.mean_loss_re, e.mean_loss_td, e.valid_path_acc, e.seconds
        );
    }
    out
}

/// Writes `best.ckpt`, `vocab.tsv`, `best.meta` and `train_log.csv` to `dir`.
pub fn save_fit(dir: impl AsRef<Path>, fit: &FitResult) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fit.model.save(dir.join("best.ckpt"))?;
    let meta = dir.join("best.meta");
    fs::write(
        &meta,
        format!(
            "epoch = {}\nvalid_path_acc = {}\n",
            fit.best_epoch, fit.best_valid
        ),
    )
    .map_err(|e| Error::io(&meta, e))?;
    let log = dir.join("train_log.csv");
    fs::write(&log, log_csv(&fit.log)).map_err(|e| Error::io(&log, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_hinge_values() {
        assert_eq!(loss_re(1.0, &[0.0], 0.5), 0.0);
        assert!((loss_re(0.2, &[0.6], 0.5) - 0.9).abs() < 1e-12);
        assert!((loss_re(0.2, &[0.6, -1.0], 0.5) - 0.45).abs() < 1e-12);
        assert_eq!(loss_re(0.2, &[], 0.5), 0.0);
        assert_eq!(loss_td_continue(0.9, 0.2, 0.5), 0.0);
        assert!((loss_td_continue(0.2, 0.2, 0.5) - 0.5).abs() < 1e-12);
        assert!((loss_td_continue(0.0, 0.6, 0.5) - 1.1).abs() < 1e-12);
        assert_eq!(loss_td_stop(1.0, &[0.0, 0.1], 0.5), 0.0);
        assert!((loss_td_stop(0.5, &[0.5], 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(loss_td_stop(0.5, &[], 0.5), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.margin = 0.0;
        assert!(c.validate().is_err());
        c.margin = 1.0;
        assert!(c.validate().is_ok());
        c.margin = 1.01;
        assert!(c.validate().is_err());
        c.margin = 0.5;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sgd_step() {
        let mut p = Params {
            word_emb: ndarray::Array2::from_elem((1, 2), 1.0),
            rel_emb: ndarray::Array2::zeros((1, 2)),
            pos_emb: ndarray::Array2::zeros((1, 2)),
            proj_w: ndarray::Array2::zeros((2, 2)),
            proj_b: ndarray::Array1::zeros(2),
        };
        let mut g = Params::zeros_like(&p);
        g.word_emb.fill(2.0);
        let mut opt = OptimizerState::new(Optimizer::Sgd, 0.1, &p);
        opt.step(&mut p, &g);
        assert!((p.word_emb[[0, 0]] - 0.8).abs() < 1e-15);

        let mut opt = OptimizerState::new(Optimizer::RmsProp { rho: 0.9, eps: 0.0 }, 0.1, &p);
        opt.step(&mut p, &g);
        // cache = 0.1 * 4 = 0.4, step = 0.1 * 2 / sqrt(0.4)
        let expected = 0.8 - 0.1 * 2.0 / 0.4f64.sqrt();
        assert!((p.word_emb[[0, 1]] - expected).abs() < 1e-12);
    }
}
