mod common;

use common::random_instance;
use uhop::datagen::{gen_gridworld, GridSpec};
use uhop::engine::EngineConfig;
use uhop::scorer::{Model, Params, ScorerConfig, Variant, Vocab};
use uhop::trainer::{
    example_loss, fit, loss_re, loss_td_continue, loss_td_stop, resolve_all, train_example,
    GoldExample, Optimizer, TrainConfig,
};
use uhop::{KnowledgeGraph, RelationId};

/// Per-example loss rebuilt from public scorer calls, hop by hop.
fn recomputed_loss(
    model: &Model,
    ex: &GoldExample,
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
) -> f64 {
    let mut q = model.encode_question(&ex.tokens).unwrap();
    let score = |q: &mut uhop::scorer::QuestionRepr, path: &[RelationId]| {
        let p = model.encode_path(path).unwrap();
        model.score(q, &p)
    };
    let h = ex.path.len();
    let mut frontier = vec![ex.topic];
    let mut total = 0.0;
    for i in 0..h {
        let prefix = &ex.path[..i];
        let with = |r: RelationId| {
            let mut p = prefix.to_vec();
            p.push(r);
            p
        };
        let gold = score(&mut q, &with(ex.path[i]));
        let negs: Vec<f64> = graph
            .frontier_relations(&frontier)
            .into_iter()
            .filter(|&r| r != ex.path[i])
            .map(|r| score(&mut q, &with(r)))
            .collect();
        total += loss_re(gold, &negs, cfg.margin);
        frontier = graph.step(&frontier, ex.path[i]);
        let current_path = &ex.path[..=i];
        if i + 1 < h {
            let next = score(&mut q, &ex.path[..=i + 1]);
            let current = score(&mut q, current_path);
            total += loss_td_continue(next, current, cfg.margin);
            if cfg.use_dynamic_question {
                let p = model.encode_path(current_path).unwrap();
                model.score(&mut q, &p);
                q = model.update_question(&q, &p).unwrap();
            }
        } else {
            let exts: Vec<f64> = graph
                .frontier_relations(&frontier)
                .into_iter()
                .map(|r| {
                    let mut p = current_path.to_vec();
                    p.push(r);
                    score(&mut q, &p)
                })
                .collect();
            let current = score(&mut q, current_path);
            total += loss_td_stop(current, &exts, cfg.margin);
        }
    }
    total
}

#[test]
fn three_hop_loss_matches_recomputation() {
    for seed in 0..6 {
        let variant = if seed % 2 == 0 {
            Variant::Attentive
        } else {
            Variant::MeanPool
        };
        let (model, ex, graph, cfg) = random_instance(seed, variant, seed < 4);
        assert_eq!(ex.path.len(), 3);
        let got = example_loss(&model, &ex, &graph, &cfg).unwrap();
        let want = recomputed_loss(&model, &ex, &graph, &cfg);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        assert!(got > 0.0);
    }
}

#[test]
fn single_hop_has_one_term_of_each_kind() {
    let (model, mut ex, graph, cfg) = random_instance(2, Variant::Attentive, true);
    ex.path.truncate(1);
    let mut grads = Params::zeros_like(&model.params);
    let losses = train_example(&model, &mut grads, &ex, &graph, &cfg, 1.0).unwrap();
    assert_eq!(losses.re.len(), 1);
    assert_eq!(losses.td.len(), 1);
    let want = recomputed_loss(&model, &ex, &graph, &cfg);
    assert!((losses.total() - want).abs() < 1e-9);
    assert!(losses.re.iter().chain(&losses.td).all(|&l| l >= 0.0));
}

/// Two copies of one graph whose relation ids differ, with parameters mapped
/// across by label so both models compute the same function.
fn permuted_pair() -> (
    Model,
    KnowledgeGraph,
    Model,
    KnowledgeGraph,
    GoldExample,
    GoldExample,
) {
    let (model, ex, graph, _) = random_instance(5, Variant::Attentive, false);
    let mut lines: Vec<String> = graph.to_tsv().lines().map(str::to_string).collect();
    lines.sort_by_key(|l| std::cmp::Reverse(l.split('\t').nth(1).unwrap().to_string()));
    let g2 = KnowledgeGraph::parse_tsv(&(lines.join("\n") + "\n")).unwrap();
    assert_ne!(g2.relation_labels(), graph.relation_labels());
    let words: Vec<String> = model
        .vocab
        .to_tsv()
        .lines()
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    let vocab2 = Vocab::build(std::iter::once(words.as_slice()), &g2);
    let mut m2 = Model::new(model.config.clone(), vocab2, &g2);
    for (i, w) in words.iter().enumerate() {
        let j = m2.vocab.lookup(w);
        m2.params
            .word_emb
            .row_mut(j)
            .assign(&model.params.word_emb.row(i));
    }
    for label in graph.relation_labels() {
        let (a, b) = (graph.relation(label).unwrap(), g2.relation(label).unwrap());
        m2.params
            .rel_emb
            .row_mut(b.index())
            .assign(&model.params.rel_emb.row(a.index()));
    }
    m2.params.pos_emb.assign(&model.params.pos_emb);
    m2.params.proj_w.assign(&model.params.proj_w);
    m2.params.proj_b.assign(&model.params.proj_b);
    let labels: Vec<String> = graph.path_labels(&ex.path);
    let ex2 = GoldExample {
        tokens: ex.tokens.clone(),
        topic: g2.entity(graph.entity_label(ex.topic)).unwrap(),
        path: g2.relation_path(&labels).unwrap(),
    };
    (model, graph, m2, g2, ex, ex2)
}

#[test]
fn static_question_loss_ignores_negative_order() {
    let (m1, g1, m2, g2, ex1, ex2) = permuted_pair();
    let cfg = TrainConfig {
        margin: 1.0,
        use_dynamic_question: false,
        ..TrainConfig::default()
    };
    let mut grads1 = Params::zeros_like(&m1.params);
    let mut grads2 = Params::zeros_like(&m2.params);
    let l1 = train_example(&m1, &mut grads1, &ex1, &g1, &cfg, 1.0).unwrap();
    let l2 = train_example(&m2, &mut grads2, &ex2, &g2, &cfg, 1.0).unwrap();
    assert!((l1.total() - l2.total()).abs() < 1e-12);
    for label in g1.relation_labels() {
        let (a, b) = (g1.relation(label).unwrap(), g2.relation(label).unwrap());
        let diff = &grads1.rel_emb.row(a.index()) - &grads2.rel_emb.row(b.index());
        assert!(diff.iter().all(|x| x.abs() < 1e-12));
    }
    assert!((&grads1.proj_w - &grads2.proj_w)
        .iter()
        .all(|x| x.abs() < 1e-12));
}

#[test]
fn satisfied_margins_give_zero_loss_and_gradient() {
    // one relation, so no negatives and no extensions: every term is an empty mean
    let g = KnowledgeGraph::parse_tsv("a\tonly.rel\tb\n").unwrap();
    let ex = GoldExample {
        tokens: vec!["q".into()],
        topic: g.entity("a").unwrap(),
        path: vec![g.relation("only.rel").unwrap()],
    };
    let vocab = Vocab::build([ex.tokens.as_slice()], &g);
    let model = Model::new(ScorerConfig::default(), vocab, &g);
    let mut grads = Params::zeros_like(&model.params);
    let l = train_example(&model, &mut grads, &ex, &g, &TrainConfig::default(), 1.0).unwrap();
    assert_eq!(l.total(), 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

fn small_grid(seed: u64) -> (KnowledgeGraph, Vec<GoldExample>, Vec<GoldExample>) {
    let ds = gen_gridworld(&GridSpec {
        side: 5,
        hop_bucket: (2, 3),
        counts: (64, 16, 1),
        seed,
    })
    .unwrap();
    let g = ds.graph();
    let (train, valid) = (resolve_all(&g, &ds.train), resolve_all(&g, &ds.valid));
    (g, train, valid)
}

fn fresh(g: &KnowledgeGraph, train: &[GoldExample], seed: u64) -> Model {
    let vocab = Vocab::build(train.iter().map(|e| e.tokens.as_slice()), g);
    Model::new(
        ScorerConfig {
            dim: 12,
            seed,
            ..ScorerConfig::default()
        },
        vocab,
        g,
    )
}

#[test]
fn zero_epochs_returns_initial_params() {
    let (g, train, valid) = small_grid(1);
    let model = fresh(&g, &train, 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = fit(
        model.clone(),
        &train,
        &valid,
        &g,
        &cfg,
        &EngineConfig::default(),
    )
    .unwrap();
    assert_eq!(r.model.params, model.params);
    assert!(r.log.is_empty());
    assert_eq!(r.best_epoch, 0);
}

#[test]
fn sgd_training_is_bitwise_deterministic() {
    let (g, train, valid) = small_grid(2);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 0.05,
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = || {
        fit(
            fresh(&g, &train, 2),
            &train,
            &valid,
            &g,
            &cfg,
            &EngineConfig::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    let losses = |r: &uhop::trainer::FitResult| -> Vec<(u64, u64, f64)> {
        r.log
            .iter()
            .map(|e| {
                (
                    e.mean_loss.to_bits(),
                    e.mean_loss_td.to_bits(),
                    e.valid_path_acc,
                )
            })
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn non_finite_loss_aborts() {
    let (g, train, valid) = small_grid(3);
    let mut model = fresh(&g, &train, 3);
    model.params.word_emb[[0, 0]] = f64::NAN;
    model.params.rel_emb.fill(f64::NAN);
    let err = fit(
        model,
        &train,
        &valid,
        &g,
        &TrainConfig::default(),
        &EngineConfig::default(),
    );
    assert!(matches!(err, Err(uhop::Error::NonFinite { .. })), "{err:?}");
}

#[test]
fn early_epochs_reduce_grid_loss_for_most_seeds() {
    // desk preset data; three epochs per seed
    let ds = gen_gridworld(&GridSpec {
        side: 8,
        hop_bucket: (2, 4),
        counts: (10_000, 1_000, 2_000),
        seed: 0,
    })
    .unwrap();
    let g = ds.graph();
    let train = resolve_all(&g, &ds.train);
    let valid = resolve_all(&g, &ds.valid);
    let mut monotone = 0;
    for seed in 0..5 {
        let vocab = Vocab::build(train.iter().map(|e| e.tokens.as_slice()), &g);
        let model = Model::new(
            ScorerConfig {
                seed,
                ..ScorerConfig::default()
            },
            vocab,
            &g,
        );
        let cfg = TrainConfig {
            epochs: 3,
            seed,
            ..TrainConfig::default()
        };
        let r = fit(model, &train, &valid, &g, &cfg, &EngineConfig::default()).unwrap();
        let l: Vec<f64> = r.log.iter().map(|e| e.mean_loss).collect();
        monotone += usize::from(l.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(monotone >= 4, "{monotone}/5 seeds non-increasing");
}
