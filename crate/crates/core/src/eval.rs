//! Path accuracy, error attribution and search-space accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{count_paths, run_chain_baseline, run_uhop, trace_json, EngineConfig};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId};
use crate::scorer::{Model, PathScorer, PrefixOracle, ScorerConfig, Vocab};
use crate::trainer::{fit, FitResult, GoldExample, Objective, TrainConfig};

/// Outcome of one prediction against its gold path. Hops are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    /// Wrong relation at this hop while both paths were still going.
    Re(usize),
    /// Stopped before this gold hop, all earlier relations correct.
    TdEarly(usize),
    /// Went on to this hop past the end of a fully matched gold path.
    TdLate(usize),
}

/// Classifies a prediction. A capped search never chose to stop, so it is a
/// termination failure even when its relations match the gold path.
pub fn attribute_error(predicted: &[RelationId], gold: &[RelationId], capped: bool) -> Outcome {
    for (j, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p != g {
            return Outcome::Re(j + 1);
        }
    }
    if predicted.len() < gold.len() {
        Outcome::TdEarly(predicted.len() + 1)
    } else if predicted.len() > gold.len() {
        Outcome::TdLate(gold.len() + 1)
    } else if capped {
        Outcome::TdLate(gold.len())
    } else {
        Outcome::Correct
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopErrors {
    pub re: usize,
    pub td_early: usize,
    pub td_late: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub n_examples: usize,
    pub correct: usize,
    pub per_hop: BTreeMap<usize, HopErrors>,
    pub mean_uhop_candidates: Option<f64>,
    pub mean_chain_candidates: Option<f64>,
    pub chain_overflow: usize,
    pub runtime_seconds: f64,
}

impl EvalReport {
    fn new(split: &str) -> Self {
        EvalReport {
            split: split.to_string(),
            n_examples: 0,
            correct: 0,
            per_hop: BTreeMap::new(),
            mean_uhop_candidates: None,
            mean_chain_candidates: None,
            chain_overflow: 0,
            runtime_seconds: 0.0,
        }
    }

    fn record(&mut self, outcome: Outcome) {
        self.n_examples += 1;
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Re(h) => self.per_hop.entry(h).or_default().re += 1,
            Outcome::TdEarly(h) => self.per_hop.entry(h).or_default().td_early += 1,
            Outcome::TdLate(h) => self.per_hop.entry(h).or_default().td_late += 1,
        }
    }

    pub fn path_accuracy(&self) -> f64 {
        if self.n_examples == 0 {
            0.0
        } else {
            self.correct as f64 / self.n_examples as f64
        }
    }

    pub fn re_errors(&self) -> usize {
        self.per_hop.values().map(|h| h.re).sum()
    }

    pub fn td_early(&self) -> usize {
        self.per_hop.values().map(|h| h.td_early).sum()
    }

    pub fn td_late(&self) -> usize {
        self.per_hop.values().map(|h| h.td_late).sum()
    }

    pub fn td_errors(&self) -> usize {
        self.td_early() + self.td_late()
    }
}

/// Runs the search for every example. `make_scorer` builds the scorer for an
/// example (the learned model ignores it; oracles need the gold path).
pub fn evaluate_with<S, F>(
    split: &str,
    examples: &[GoldExample],
    graph: &KnowledgeGraph,
    engine: &EngineConfig,
    make_scorer: F,
) -> Result<(EvalReport, Vec<String>)>
where
    S: PathScorer,
    F: Fn(&GoldExample) -> S + Sync,
{
    let start = Instant::now();
    let results: Vec<Result<(Outcome, usize, String)>> = examples
        .par_iter()
        .map(|ex| {
            let scorer = make_scorer(ex);
            let (path, trace) = run_uhop(&scorer, &ex.tokens, ex.topic, graph, engine)?;
            let gold_labels = graph.path_labels(&ex.path);
            let json = trace_json(graph, &ex.tokens, ex.topic, &trace, Some(&gold_labels));
            Ok((
                attribute_error(&path, &ex.path, trace.capped),
                trace.scored_candidate_count,
                json,
            ))
        })
        .collect();
    let mut report = EvalReport::new(split);
    let mut traces = Vec::with_capacity(examples.len());
    let mut total = 0usize;
    for r in results {
        let (outcome, count, json) = r?;
        report.record(outcome);
        total += count;
        traces.push(json);
    }
    if !examples.is_empty() {
        report.mean_uhop_candidates = Some(total as f64 / examples.len() as f64);
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok((report, traces))
}

/// Chain-baseline evaluation. Examples over budget count as errors and are
/// excluded from the candidate mean.
pub fn evaluate_chain<S: PathScorer>(
    split: &str,
    examples: &[GoldExample],
    graph: &KnowledgeGraph,
    scorer: &S,
    max_hops: usize,
    budget: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let results: Vec<Result<Option<(Outcome, usize)>>> = examples
        .par_iter()
        .map(
            |ex| match run_chain_baseline(scorer, &ex.tokens, ex.topic, graph, max_hops, budget) {
                Ok((path, count)) => Ok(Some((attribute_error(&path, &ex.path, false), count))),
                Err(Error::Budget { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect();
    let mut report = EvalReport::new(split);
    let (mut total, mut counted) = (0usize, 0usize);
    for (ex, r) in examples.iter().zip(results) {
        match r? {
            Some((outcome, count)) => {
                report.record(outcome);
                total += count;
                counted += 1;
            }
            None => {
                report.chain_overflow += 1;
                report.record(Outcome::Re(1.min(ex.path.len())));
            }
        }
    }
    if counted > 0 {
        report.mean_chain_candidates = Some(total as f64 / counted as f64);
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Share of OOV question tokens above which a checkpoint is considered to
/// belong to a different dataset.
pub const MAX_OOV_SHARE: f64 = 0.5;

pub fn check_vocab(vocab: &Vocab, examples: &[GoldExample]) -> Result<()> {
    let (mut total, mut oov) = (0usize, 0usize);
    for ex in examples {
        for t in &ex.tokens {
            total += 1;
            oov += usize::from(!vocab.contains(t));
        }
    }
    if total > 0 && oov as f64 / total as f64 > MAX_OOV_SHARE {
        return Err(Error::VocabMismatch(format!(
            "{oov} of {total} question tokens are unknown to the checkpoint"
        )));
    }
    Ok(())
}

/// Evaluates a trained model and writes `report.csv`, `errors.csv` and
/// `traces.jsonl` into `out_dir`.
pub fn evaluate(
    model: &Model,
    split: &str,
    examples: &[GoldExample],
    graph: &KnowledgeGraph,
    engine: &EngineConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    check_vocab(&model.vocab, examples)?;
    let (report, traces) = evaluate_with(split, examples, graph, engine, |_| model)?;
    if let Some(dir) = out_dir {
        write_reports(dir, std::slice::from_ref(&report))?;
        let path = dir.join("traces.jsonl");
        let mut body = traces.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

pub const REPORT_HEADER: &str = "split,n_examples,correct,path_accuracy,re_errors,td_early,td_late,td_errors,mean_uhop_candidates,mean_chain_candidates,chain_overflow,seconds";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.split,
            r.n_examples,
            r.correct,
            r.path_accuracy(),
            r.re_errors(),
            r.td_early(),
            r.td_late(),
            r.td_errors(),
            opt(r.mean_uhop_candidates),
            opt(r.mean_chain_candidates),
            r.chain_overflow,
            r.runtime_seconds
        );
    }
    out
}

/// Per-hop error table; the merged `td` column sums early and late stops.
pub fn errors_csv(report: &EvalReport) -> String {
    let mut out = String::from("split,hop,re,td_early,td_late,td\n");
    for (hop, e) in &report.per_hop {
        let _ = writeln!(
            out,
            "{},{hop},{},{},{},{}",
            report.split,
            e.re,
            e.td_early,
            e.td_late,
            e.td_early + e.td_late
        );
    }
    out
}

pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.csv");
    fs::write(&path, report_csv(reports)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("errors.csv");
    let mut body = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = errors_csv(r);
        body.push_str(if i == 0 {
            &csv
        } else {
            csv.split_once('\n').unwrap().1
        });
    }
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Row of `report.csv`, as parsed back.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub n_examples: usize,
    pub correct: usize,
    pub path_accuracy: f64,
    pub re_errors: usize,
    pub td_early: usize,
    pub td_late: usize,
    pub td_errors: usize,
    pub mean_uhop_candidates: Option<f64>,
    pub mean_chain_candidates: Option<f64>,
    pub chain_overflow: usize,
    pub seconds: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

// ---------------------------------------------------------------------------
// Search-space accounting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceMode {
    Uhop,
    Chain(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceReport {
    /// `None` marks a chain enumeration that overflowed the budget.
    pub per_example: Vec<Option<usize>>,
    pub mean: Option<f64>,
    pub excluded: usize,
}

impl SpaceReport {
    fn from_counts(per_example: Vec<Option<usize>>) -> Self {
        let counted: Vec<usize> = per_example.iter().flatten().copied().collect();
        let mean = (!counted.is_empty())
            .then(|| counted.iter().sum::<usize>() as f64 / counted.len() as f64);
        SpaceReport {
            excluded: per_example.len() - counted.len(),
            per_example,
            mean,
        }
    }

    pub fn csv(&self, mode: SpaceMode) -> String {
        let label = match mode {
            SpaceMode::Uhop => "uhop".to_string(),
            SpaceMode::Chain(l) => format!("chain{l}"),
        };
        let mut out = String::from("example,mode,candidates\n");
        for (i, c) in self.per_example.iter().enumerate() {
            let v = c
                .map(|c| c.to_string())
                .unwrap_or_else(|| "overflow".into());
            let _ = writeln!(out, "{i},{label},{v}");
        }
        let _ = writeln!(
            out,
            "mean,{label},{}",
            self.mean.map(|m| m.to_string()).unwrap_or_default()
        );
        let _ = writeln!(out, "excluded,{label},{}", self.excluded);
        out
    }
}

/// Scored-candidate counts per example. UHop mode runs the search with the
/// given scorer factory; chain mode counts enumerable paths.
pub fn count_search_space<S, F>(
    examples: &[GoldExample],
    graph: &KnowledgeGraph,
    mode: SpaceMode,
    engine: &EngineConfig,
    make_scorer: F,
) -> Result<SpaceReport>
where
    S: PathScorer,
    F: Fn(&GoldExample) -> S + Sync,
{
    let counts: Vec<Result<Option<usize>>> = examples
        .par_iter()
        .map(|ex| match mode {
            SpaceMode::Uhop => {
                let scorer = make_scorer(ex);
                run_uhop(&scorer, &ex.tokens, ex.topic, graph, engine)
                    .map(|(_, t)| Some(t.scored_candidate_count))
            }
            SpaceMode::Chain(l) => match count_paths(graph, ex.topic, l, engine.chain_budget) {
                Ok(c) => Ok(Some(c)),
                Err(Error::Budget { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        })
        .collect();
    let counts = counts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SpaceReport::from_counts(counts))
}

pub fn oracle_for(ex: &GoldExample) -> PrefixOracle {
    PrefixOracle {
        gold: ex.path.clone(),
    }
}

// ---------------------------------------------------------------------------
// Cross-length transfer

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub uhop: EvalReport,
    pub chain: EvalReport,
    pub uhop_fit: FitResult,
    pub chain_fit: FitResult,
}

/// Trains a UHop scorer and a fixed-length chain scorer (`chain_hops`) on
/// the same data, then evaluates both on `test`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_experiment(
    train: &[GoldExample],
    valid: &[GoldExample],
    test: &[GoldExample],
    graph: &KnowledgeGraph,
    vocab: &Vocab,
    scorer: &ScorerConfig,
    train_cfg: &TrainConfig,
    engine: &EngineConfig,
    chain_hops: usize,
) -> Result<TransferReport> {
    let uhop_cfg = TrainConfig {
        objective: Objective::Uhop,
        ..train_cfg.clone()
    };
    let chain_cfg = TrainConfig {
        objective: Objective::Chain {
            max_hops: chain_hops,
        },
        use_dynamic_question: false,
        ..train_cfg.clone()
    };
    let init = Model::new(scorer.clone(), vocab.clone(), graph);
    let uhop_fit = fit(init.clone(), train, valid, graph, &uhop_cfg, engine)?;
    let chain_fit = fit(init, train, valid, graph, &chain_cfg, engine)?;
    let engine = EngineConfig {
        use_dynamic_question: uhop_cfg.use_dynamic_question,
        ..engine.clone()
    };
    let (uhop, _) = evaluate_with("uhop", test, graph, &engine, |_| &uhop_fit.model)?;
    let chain = evaluate_chain(
        &format!("chain{chain_hops}"),
        test,
        graph,
        &chain_fit.model,
        chain_hops,
        engine.chain_budget,
    )?;
    Ok(TransferReport {
        uhop,
        chain,
        uhop_fit,
        chain_fit,
    })
}
