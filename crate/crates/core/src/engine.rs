//! Hop-by-hop relation path search.
//!
//! Each hop extends the current path by the best-scoring outbound relation
//! of the frontier, then compares the extended path against every one-hop
//! extension of it; the search stops when none scores higher.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::scorer::PathScorer;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Safety bound on path length. Reaching it sets `capped` in the trace.
    pub hop_cap: usize,
    pub use_dynamic_question: bool,
    /// Maximum number of paths the chain baseline may enumerate.
    pub chain_budget: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            hop_cap: 16,
            use_dynamic_question: true,
            chain_budget: 1_000_000,
        }
    }
}

/// Candidates of one hop: each extension is scored as `base_path : r`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub hop: usize,
    pub base_path: Vec<RelationId>,
    pub extensions: Vec<RelationId>,
    pub scores: Vec<f64>,
}

impl CandidateSet {
    /// Highest-scoring extension; ties go to the lowest relation id.
    pub fn best(&self) -> Option<(RelationId, f64)> {
        let mut best: Option<(RelationId, f64)> = None;
        // extensions are ascending by id, so strict > keeps the lowest on ties
        for (&r, &s) in self.extensions.iter().zip(&self.scores) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((r, s));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Stop,
    Continue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Termination {
    pub decision: Decision,
    /// Score of the extracted path itself; `None` on a sink frontier.
    pub path_score: Option<f64>,
    pub extensions: CandidateSet,
    pub forced: bool,
}

impl Termination {
    pub fn best_extension_score(&self) -> Option<f64> {
        self.extensions.best().map(|(_, s)| s)
    }

    /// Pairs scored for this decision.
    pub fn scored(&self) -> usize {
        self.extensions.extensions.len() + usize::from(self.path_score.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopTrace {
    pub candidates: CandidateSet,
    pub chosen: RelationId,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace {
    pub hops: Vec<HopTrace>,
    pub capped: bool,
    pub forced_stop: bool,
    pub scored_candidate_count: usize,
}

impl SearchTrace {
    pub fn path(&self) -> Vec<RelationId> {
        self.hops.iter().map(|h| h.chosen).collect()
    }
}

/// Picks the best `base_path : r` over the frontier's outbound relations.
/// A sink frontier yields `Ok(None)`.
pub fn extract_hop<S: PathScorer>(
    scorer: &S,
    state: &mut S::State,
    base_path: &[RelationId],
    frontier: &[EntityId],
    graph: &KnowledgeGraph,
) -> Result<Option<(RelationId, CandidateSet)>> {
    let extensions = graph.frontier_relations(frontier);
    if extensions.is_empty() {
        return Ok(None);
    }
    let set = score_extensions(scorer, state, base_path, extensions, base_path.len() + 1)?;
    let (chosen, _) = set.best().expect("non-empty candidate set");
    Ok(Some((chosen, set)))
}

fn score_extensions<S: PathScorer>(
    scorer: &S,
    state: &mut S::State,
    base_path: &[RelationId],
    extensions: Vec<RelationId>,
    hop: usize,
) -> Result<CandidateSet> {
    let mut path = base_path.to_vec();
    path.push(RelationId(0));
    let mut scores = Vec::with_capacity(extensions.len());
    for &r in &extensions {
        *path.last_mut().unwrap() = r;
        scores.push(scorer.score(state, &path)?);
    }
    Ok(CandidateSet {
        hop,
        base_path: base_path.to_vec(),
        extensions,
        scores,
    })
}

/// Stops iff the extracted path scores at least as high as every one-hop
/// extension from the new frontier. Ties stop; a sink frontier stops
/// without scoring. The extracted path is scored last so attention state
/// left in `state` refers to it.
pub fn decide_termination<S: PathScorer>(
    scorer: &S,
    state: &mut S::State,
    extracted: &[RelationId],
    new_frontier: &[EntityId],
    graph: &KnowledgeGraph,
) -> Result<Termination> {
    if extracted.is_empty() {
        return Err(Error::EmptyPath);
    }
    let next = graph.frontier_relations(new_frontier);
    if next.is_empty() {
        return Ok(Termination {
            decision: Decision::Stop,
            path_score: None,
            extensions: CandidateSet {
                hop: extracted.len() + 1,
                base_path: extracted.to_vec(),
                extensions: Vec::new(),
                scores: Vec::new(),
            },
            forced: true,
        });
    }
    let extensions = score_extensions(scorer, state, extracted, next, extracted.len() + 1)?;
    let path_score = scorer.score(state, extracted)?;
    let best = extensions.best().map(|(_, s)| s).expect("non-empty");
    let decision = if path_score >= best {
        Decision::Stop
    } else {
        Decision::Continue
    };
    Ok(Termination {
        decision,
        path_score: Some(path_score),
        extensions,
        forced: false,
    })
}

/// Full search from `topic`. Errors if the topic has no outbound relations.
pub fn run_uhop<S: PathScorer>(
    scorer: &S,
    question: &[String],
    topic: EntityId,
    graph: &KnowledgeGraph,
    config: &EngineConfig,
) -> Result<(Vec<RelationId>, SearchTrace)> {
    assert!(config.hop_cap >= 1, "hop_cap must be at least 1");
    graph.outbound(topic)?;
    let mut state = scorer.begin(question)?;
    let mut frontier = vec![topic];
    let mut path: Vec<RelationId> = Vec::new();
    let mut trace = SearchTrace::default();

    loop {
        let Some((chosen, candidates)) = extract_hop(scorer, &mut state, &path, &frontier, graph)?
        else {
            // only reachable at the topic: later sinks stop in decide_termination
            return Err(Error::SinkTopic(graph.entity_label(topic).to_string()));
        };
        path.push(chosen);
        frontier = graph.step(&frontier, chosen);
        let termination = decide_termination(scorer, &mut state, &path, &frontier, graph)?;
        trace.scored_candidate_count += candidates.extensions.len() + termination.scored();
        let decision = termination.decision;
        trace.forced_stop = termination.forced;
        trace.hops.push(HopTrace {
            candidates,
            chosen,
            termination,
        });
        if decision == Decision::Stop {
            break;
        }
        if path.len() >= config.hop_cap {
            trace.capped = true;
            break;
        }
        if config.use_dynamic_question {
            scorer.advance(&mut state, &path)?;
        }
    }
    Ok((path, trace))
}

/// Every distinct relation sequence of length `1..=max_hops` executable from
/// `topic`, in breadth-first, ascending-id order. Fails past `budget` paths.
pub fn enumerate_paths(
    graph: &KnowledgeGraph,
    topic: EntityId,
    max_hops: usize,
    budget: usize,
) -> Result<Vec<Vec<RelationId>>> {
    let mut out: Vec<Vec<RelationId>> = Vec::new();
    let mut layer: Vec<(Vec<RelationId>, Vec<EntityId>)> = vec![(Vec::new(), vec![topic])];
    for _ in 0..max_hops {
        let mut next_layer = Vec::new();
        for (path, frontier) in &layer {
            for r in graph.frontier_relations(frontier) {
                if out.len() >= budget {
                    return Err(Error::Budget { budget });
                }
                let mut p = path.clone();
                p.push(r);
                out.push(p.clone());
                next_layer.push((p, graph.step(frontier, r)));
            }
        }
        layer = next_layer;
    }
    Ok(out)
}

/// Number of enumerable paths without materializing them.
pub fn count_paths(
    graph: &KnowledgeGraph,
    topic: EntityId,
    max_hops: usize,
    budget: usize,
) -> Result<usize> {
    fn walk(
        graph: &KnowledgeGraph,
        frontier: &[EntityId],
        depth_left: usize,
        count: &mut usize,
        budget: usize,
    ) -> Result<()> {
        if depth_left == 0 {
            return Ok(());
        }
        for r in graph.frontier_relations(frontier) {
            *count += 1;
            if *count > budget {
                return Err(Error::Budget { budget });
            }
            walk(
                graph,
                &graph.step(frontier, r),
                depth_left - 1,
                count,
                budget,
            )?;
        }
        Ok(())
    }
    let mut count = 0;
    walk(graph, &[topic], max_hops, &mut count, budget)?;
    Ok(count)
}

/// Relation-chain baseline: score every path up to `max_hops` against the
/// unmodified question and return the best, with the number scored. Ties go
/// to the earlier path in enumeration order (shorter, then lower ids).
pub fn run_chain_baseline<S: PathScorer>(
    scorer: &S,
    question: &[String],
    topic: EntityId,
    graph: &KnowledgeGraph,
    max_hops: usize,
    budget: usize,
) -> Result<(Vec<RelationId>, usize)> {
    assert!(max_hops >= 1, "max_hops must be at least 1");
    let paths = enumerate_paths(graph, topic, max_hops, budget)?;
    if paths.is_empty() {
        return Err(Error::SinkTopic(graph.entity_label(topic).to_string()));
    }
    let mut state = scorer.begin(question)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in paths.iter().enumerate() {
        let s = scorer.score(&mut state, p)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let count = paths.len();
    let (i, _) = best.expect("non-empty");
    let mut paths = paths;
    Ok((paths.swap_remove(i), count))
}

// ---------------------------------------------------------------------------
// Trace export

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Serialize)]
struct HopRecord {
    hop: usize,
    candidates: Vec<String>,
    scores: Vec<f64>,
    chosen: String,
    path_score: Option<f64>,
    extension_candidates: Vec<String>,
    extension_scores: Vec<f64>,
    best_extension_score: Option<f64>,
    decision: Decision,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    question: String,
    topic: &'a str,
    path: Vec<String>,
    gold: Option<&'a [String]>,
    hops: Vec<HopRecord>,
    capped: bool,
    forced_stop: bool,
    scored_candidates: usize,
}

/// One JSON object (no trailing newline) describing a search; scores are
/// rounded to 6 decimals.
pub fn trace_json(
    graph: &KnowledgeGraph,
    question: &[String],
    topic: EntityId,
    trace: &SearchTrace,
    gold: Option<&[String]>,
) -> String {
    let labels = |rs: &[RelationId]| graph.path_labels(rs);
    let hops = trace
        .hops
        .iter()
        .map(|h| HopRecord {
            hop: h.candidates.hop,
            candidates: labels(&h.candidates.extensions),
            scores: h.candidates.scores.iter().copied().map(round6).collect(),
            chosen: graph.relation_label(h.chosen).to_string(),
            path_score: h.termination.path_score.map(round6),
            extension_candidates: labels(&h.termination.extensions.extensions),
            extension_scores: h
                .termination
                .extensions
                .scores
                .iter()
                .copied()
                .map(round6)
                .collect(),
            best_extension_score: h.termination.best_extension_score().map(round6),
            decision: h.termination.decision,
        })
        .collect();
    let rec = TraceRecord {
        question: question.join(" "),
        topic: graph.entity_label(topic),
        path: labels(&trace.path()),
        gold,
        hops,
        capped: trace.capped,
        forced_stop: trace.forced_stop,
        scored_candidates: trace.scored_candidate_count,
    };
    serde_json::to_string(&rec).expect("trace serializes")
}
