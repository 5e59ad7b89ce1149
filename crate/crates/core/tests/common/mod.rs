#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhop::datagen::{gen_gridworld, GridSpec};
use uhop::scorer::{Model, Params, ScorerConfig, Variant, Vocab};
use uhop::trainer::{example_loss, train_example, GoldExample, TrainConfig};
use uhop::KnowledgeGraph;

/// Central-difference gradient of the full per-example loss at every
/// coordinate, computed only through forward evaluations.
pub fn numeric_gradient(
    model: &Model,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
    eps: f64,
) -> Vec<f64> {
    let mut m = model.clone();
    let mut out = Vec::new();
    for t in 0..5 {
        let len = m.params.tensors()[t].len();
        for i in 0..len {
            let orig = m.params.tensors()[t][i];
            m.params.tensors_mut()[t][i] = orig + eps;
            let plus = example_loss(&m, ex, graph, cfg).unwrap();
            m.params.tensors_mut()[t][i] = orig - eps;
            let minus = example_loss(&m, ex, graph, cfg).unwrap();
            m.params.tensors_mut()[t][i] = orig;
            out.push((plus - minus) / (2.0 * eps));
        }
    }
    out
}

pub fn analytic_gradient(
    model: &Model,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
) -> Vec<f64> {
    let mut g = Params::zeros_like(&model.params);
    train_example(model, &mut g, ex, graph, cfg, 1.0).unwrap();
    g.tensors().iter().flat_map(|t| t.iter().copied()).collect()
}

/// Relative agreement; coordinates where both values are numerically zero
/// (below 1e-7) count as agreeing.
pub fn agrees(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// A random small instance: 5x5 grid, a 3-hop walk as the example, a tiny
/// model with large random weights so hinges are active.
pub fn random_instance(
    seed: u64,
    variant: Variant,
    dynamic: bool,
) -> (Model, GoldExample, KnowledgeGraph, TrainConfig) {
    let ds = gen_gridworld(&GridSpec {
        side: 5,
        hop_bucket: (3, 3),
        counts: (4, 1, 1),
        seed,
    })
    .unwrap();
    let graph = ds.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = ds.train[0].clone();
    // add a filler token so the question is longer than the path
    ex.question_tokens.push("please".into());
    let vocab = Vocab::build(
        ds.train.iter().map(|e| e.question_tokens.as_slice()),
        &graph,
    );
    let mut model = Model::new(
        ScorerConfig {
            variant,
            dim: 6,
            positional: true,
            max_positions: 6,
            init_scale: 0.6,
            seed,
        },
        vocab,
        &graph,
    );
    // perturb the projection away from identity so its gradient is generic
    for w in model.params.proj_w.iter_mut() {
        *w += rng.gen_range(-0.3..0.3);
    }
    for b in model.params.proj_b.iter_mut() {
        *b = rng.gen_range(-0.2..0.2);
    }
    let cfg = TrainConfig {
        margin: 1.0,
        use_dynamic_question: dynamic,
        ..TrainConfig::default()
    };
    let gold = GoldExample::resolve(&graph, &ex).unwrap();
    (model, gold, graph, cfg)
}

/// Every entity has exactly `n` outbound relations, one tail each, so any
/// relation sequence executes from any entity.
pub fn uniform_graph(n: usize, entities: usize) -> KnowledgeGraph {
    let mut tsv = String::new();
    for e in 0..entities {
        for r in 0..n {
            let tail = (e * n + r + 1) % entities;
            tsv.push_str(&format!("e{e}\tuni.rel_{r}\te{tail}\n"));
        }
    }
    KnowledgeGraph::parse_tsv(&tsv).unwrap()
}

/// `count` random gold paths of length `k` from random topics.
pub fn uniform_examples(
    graph: &KnowledgeGraph,
    k: usize,
    count: usize,
    seed: u64,
) -> Vec<GoldExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.num_relations() as u32;
    (0..count)
        .map(|_| GoldExample {
            tokens: vec!["q".into()],
            topic: uhop::EntityId(rng.gen_range(0..graph.num_entities() as u32)),
            path: (0..k)
                .map(|_| uhop::RelationId(rng.gen_range(0..n)))
                .collect(),
        })
        .collect()
}
