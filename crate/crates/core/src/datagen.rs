//! Seeded dataset generators and the JSON-lines question format.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`), seeded with the generator seed
//! and a fixed stream number per purpose, so every split reproduces on any
//! platform regardless of the order splits are generated in.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question_tokens: Vec<String>,
    pub topic_entity: String,
    pub gold_path: Vec<String>,
    pub answer_entity: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    question: String,
    topic: String,
    path: Vec<String>,
    answer: String,
}

impl From<&QaExample> for Record {
    fn from(ex: &QaExample) -> Self {
        Record {
            question: ex.question_tokens.join(" "),
            topic: ex.topic_entity.clone(),
            path: ex.gold_path.clone(),
            answer: ex.answer_entity.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 2,
            Split::Valid => 3,
            Split::Test => 4,
        }
    }
}

const GRAPH_STREAM: u64 = 0;
const LEXICON_STREAM: u64 = 1;

/// Independent ChaCha8 stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A generated graph plus its train/valid/test question splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub triples_tsv: String,
    pub train: Vec<QaExample>,
    pub valid: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl Dataset {
    pub fn graph(&self) -> KnowledgeGraph {
        KnowledgeGraph::parse_tsv(&self.triples_tsv).expect("generator emits well-formed TSV")
    }

    pub fn split(&self, split: Split) -> &[QaExample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes `kg.tsv`, `train.jsonl`, `valid.jsonl` and `test.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kg = dir.join("kg.tsv");
        fs::write(&kg, &self.triples_tsv).map_err(|e| Error::io(&kg, e))?;
        for split in Split::ALL {
            write_examples(
                dir.join(format!("{}.jsonl", split.name())),
                self.split(split),
            )?;
        }
        Ok(())
    }
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, &Record::from(ex))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads JSON-lines questions in file order. With a graph, every gold path
/// must execute from its topic and reach the annotated answer.
pub fn load_examples(
    path: impl AsRef<Path>,
    graph: Option<&KnowledgeGraph>,
) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let ex = QaExample {
            question_tokens: rec.question.split_whitespace().map(String::from).collect(),
            topic_entity: rec.topic,
            gold_path: rec.path,
            answer_entity: rec.answer,
        };
        if ex.gold_path.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty gold path".into(),
            });
        }
        if let Some(g) = graph {
            validate_example(g, &ex).map_err(|message| Error::Validation {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })?;
        }
        out.push(ex);
    }
    Ok(out)
}

/// Replays the gold path; returns a reason when it does not reach the answer.
pub fn validate_example(g: &KnowledgeGraph, ex: &QaExample) -> std::result::Result<(), String> {
    let topic = g
        .entity(&ex.topic_entity)
        .ok_or_else(|| format!("unknown topic entity {}", ex.topic_entity))?;
    let path = g.relation_path(&ex.gold_path).map_err(|e| e.to_string())?;
    let reached = g
        .execute(topic, &path)
        .ok_or_else(|| format!("path {:?} dead-ends", ex.gold_path))?;
    let answer = g
        .entity(&ex.answer_entity)
        .ok_or_else(|| format!("unknown answer entity {}", ex.answer_entity))?;
    if reached.contains(&answer) {
        Ok(())
    } else {
        Err(format!("path does not reach answer {}", ex.answer_entity))
    }
}

// ---------------------------------------------------------------------------
// Grid World

/// Compass directions as (label, row delta, col delta); rows grow southward.
pub const DIRECTIONS: [(&str, i64, i64); 8] = [
    ("North", -1, 0),
    ("NorthEast", -1, 1),
    ("East", 0, 1),
    ("SouthEast", 1, 1),
    ("South", 1, 0),
    ("SouthWest", 1, -1),
    ("West", 0, -1),
    ("NorthWest", -1, -1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub side: usize,
    pub hop_bucket: (usize, usize),
    pub counts: (usize, usize, usize),
    pub seed: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hop_bucket;
        if self.side < 2 {
            return Err(Error::InvalidSpec(format!("grid side {} < 2", self.side)));
        }
        if lo < 2 || lo > hi {
            return Err(Error::InvalidSpec(format!(
                "hop bucket ({lo}, {hi}) must satisfy 2 <= min <= max"
            )));
        }
        let (a, b, c) = self.counts;
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::InvalidSpec("split counts must be positive".into()));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.counts.0,
            Split::Valid => self.counts.1,
            Split::Test => self.counts.2,
        }
    }
}

pub fn cell_label(row: usize, col: usize) -> String {
    format!("({row},{col})")
}

fn legal_moves(side: usize, row: usize, col: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    DIRECTIONS
        .iter()
        .enumerate()
        .filter_map(move |(d, &(_, dr, dc))| {
            let r = row as i64 + dr;
            let c = col as i64 + dc;
            let n = side as i64;
            (r >= 0 && r < n && c >= 0 && c < n).then_some((d, r as usize, c as usize))
        })
}

pub fn gridworld_tsv(side: usize) -> String {
    let mut out = String::new();
    for row in 0..side {
        for col in 0..side {
            for (d, r, c) in legal_moves(side, row, col) {
                out.push_str(&cell_label(row, col));
                out.push('\t');
                out.push_str(DIRECTIONS[d].0);
                out.push('\t');
                out.push_str(&cell_label(r, c));
                out.push('\n');
            }
        }
    }
    out
}

pub fn gen_gridworld(spec: &GridSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut splits = Split::ALL.iter().map(|&split| {
        let mut rng = stream_rng(spec.seed, split.stream());
        (0..spec.count(split))
            .map(|_| grid_walk(spec, &mut rng))
            .collect::<Vec<_>>()
    });
    Ok(Dataset {
        triples_tsv: gridworld_tsv(spec.side),
        train: splits.next().unwrap(),
        valid: splits.next().unwrap(),
        test: splits.next().unwrap(),
    })
}

fn grid_walk(spec: &GridSpec, rng: &mut ChaCha8Rng) -> QaExample {
    let side = spec.side;
    let (lo, hi) = spec.hop_bucket;
    let (mut row, mut col) = (rng.gen_range(0..side), rng.gen_range(0..side));
    let topic = cell_label(row, col);
    let hops = rng.gen_range(lo..=hi);
    let mut path = Vec::with_capacity(hops);
    for _ in 0..hops {
        let moves: Vec<_> = legal_moves(side, row, col).collect();
        let (d, r, c) = moves[rng.gen_range(0..moves.len())];
        path.push(DIRECTIONS[d].0.to_string());
        row = r;
        col = c;
    }
    QaExample {
        question_tokens: path.iter().map(|d| d.to_lowercase()).collect(),
        topic_entity: topic,
        gold_path: path,
        answer_entity: cell_label(row, col),
    }
}

// ---------------------------------------------------------------------------
// Synthetic PathQuestion-style data

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub branching: usize,
    /// `(hops, train count)`; valid and test each get `ceil(count / 8)`.
    pub hop_mix: Vec<(usize, usize)>,
    pub n_templates: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 2000,
            n_relations: 32,
            branching: 4,
            hop_mix: vec![(2, 1275), (3, 1649)],
            n_templates: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::InvalidSpec("branching must be >= 2".into()));
        }
        if self.branching > self.n_relations {
            return Err(Error::InvalidSpec(
                "branching cannot exceed the number of relations".into(),
            ));
        }
        if self.n_entities < 2 {
            return Err(Error::InvalidSpec("need at least 2 entities".into()));
        }
        if self.n_templates == 0 {
            return Err(Error::InvalidSpec("need at least one template".into()));
        }
        if self.hop_mix.is_empty() || self.hop_mix.iter().any(|&(h, c)| h == 0 || c == 0) {
            return Err(Error::InvalidSpec(
                "hop mix entries need hops >= 1 and count >= 1".into(),
            ));
        }
        Ok(())
    }

    fn count(&self, split: Split, base: usize) -> usize {
        match split {
            Split::Train => base,
            Split::Valid | Split::Test => base.div_ceil(8),
        }
    }
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable pseudo-words, drawn without repetition.
fn lexicon(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.gen_range(0..ONSETS.len())],
                    NUCLEI[rng.gen_range(0..NUCLEI.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct SynthWorld {
    graph: KnowledgeGraph,
    /// Per relation id, the phrases a question may use for it.
    templates: Vec<Vec<Vec<String>>>,
}

fn build_synth_world(spec: &SynthSpec) -> (String, Vec<String>, Vec<Vec<Vec<String>>>) {
    let mut lex_rng = stream_rng(spec.seed, LEXICON_STREAM);
    let domains = lexicon(&mut lex_rng, 4);
    let words = lexicon(&mut lex_rng, spec.n_relations * (1 + spec.n_templates) + 8);
    let mut words = words.into_iter().filter(|w| !domains.contains(w));

    let mut labels = Vec::with_capacity(spec.n_relations);
    let mut templates = Vec::with_capacity(spec.n_relations);
    for i in 0..spec.n_relations {
        let name = words.next().expect("lexicon large enough");
        let domain = &domains[i % domains.len()];
        labels.push(format!("{domain}.{domain}.{name}"));
        let mut phrases = vec![vec![name.clone()]];
        for _ in 1..spec.n_templates {
            let syn = words.next().expect("lexicon large enough");
            phrases.push(vec![syn]);
        }
        templates.push(phrases);
    }

    let mut rng = stream_rng(spec.seed, GRAPH_STREAM);
    let mut tsv = String::new();
    for e in 0..spec.n_entities {
        let mut rels = sample(&mut rng, spec.n_relations, spec.branching).into_vec();
        rels.sort_unstable();
        for r in rels {
            let mut t = rng.gen_range(0..spec.n_entities - 1);
            if t >= e {
                t += 1;
            }
            tsv.push_str(&format!("m.{e:05x}\t{}\tm.{t:05x}\n", labels[r]));
        }
    }
    (tsv, labels, templates)
}

pub fn gen_synth(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (tsv, labels, by_label) = build_synth_world(spec);
    let graph = KnowledgeGraph::parse_tsv(&tsv).expect("generator emits well-formed TSV");
    // Relation ids follow first appearance in the TSV, not label order.
    let mut templates = vec![Vec::new(); graph.num_relations()];
    for (label, phrases) in labels.iter().zip(by_label) {
        if let Some(r) = graph.relation(label) {
            templates[r.index()] = phrases;
        }
    }
    let world = SynthWorld { graph, templates };

    let mut out: Vec<Vec<QaExample>> = Vec::with_capacity(3);
    for split in Split::ALL {
        let mut rng = stream_rng(spec.seed, split.stream());
        let mut examples = Vec::new();
        for &(hops, base) in &spec.hop_mix {
            let n = spec.count(split, base);
            let mut accepted = 0usize;
            let mut attempts = 0usize;
            while accepted < n {
                attempts += 1;
                if let Some(ex) = synth_question(&world, hops, &mut rng) {
                    examples.push(ex);
                    accepted += 1;
                }
                if attempts >= 1000 && accepted * 100 < attempts {
                    return Err(Error::Infeasible(format!(
                        "{}-hop questions rejected {} of {} attempts",
                        hops,
                        attempts - accepted,
                        attempts
                    )));
                }
            }
        }
        out.push(examples);
    }
    let mut it = out.into_iter();
    Ok(Dataset {
        triples_tsv: tsv,
        train: it.next().unwrap(),
        valid: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

fn synth_question(world: &SynthWorld, hops: usize, rng: &mut ChaCha8Rng) -> Option<QaExample> {
    let g = &world.graph;
    let topic = EntityId(rng.gen_range(0..g.num_entities() as u32));
    let mut frontier = vec![topic];
    let mut path = Vec::with_capacity(hops);
    for _ in 0..hops {
        let rels = g.frontier_relations(&frontier);
        if rels.is_empty() {
            return None;
        }
        let r = rels[rng.gen_range(0..rels.len())];
        path.push(r);
        frontier = g.step(&frontier, r);
    }
    if has_competing_path(g, topic, &path) {
        return None;
    }
    let answer = frontier[rng.gen_range(0..frontier.len())];

    // "what is the <rH> of the ... of the <r1> of <topic>"
    let mut tokens: Vec<String> = vec!["what".into(), "is".into()];
    for (i, r) in path.iter().rev().enumerate() {
        if i > 0 {
            tokens.push("of".into());
        }
        tokens.push("the".into());
        let phrases = &world.templates[r.index()];
        tokens.extend(phrases[rng.gen_range(0..phrases.len())].iter().cloned());
    }
    tokens.push("of".into());
    tokens.push(g.entity_label(topic).to_string());

    Some(QaExample {
        question_tokens: tokens,
        topic_entity: g.entity_label(topic).to_string(),
        gold_path: g.path_labels(&path),
        answer_entity: g.entity_label(answer).to_string(),
    })
}

/// True when another executable path from `topic` uses only relations the
/// question mentions (as a sub-multiset of the gold relations) without being
/// a prefix of the gold path. Such a question has ambiguous template evidence.
pub fn has_competing_path(
    g: &KnowledgeGraph,
    topic: EntityId,
    gold: &[crate::kg::RelationId],
) -> bool {
    let mut budget: HashMap<crate::kg::RelationId, usize> = HashMap::new();
    for &r in gold {
        *budget.entry(r).or_default() += 1;
    }
    let mut prefix = Vec::with_capacity(gold.len());
    competing_dfs(g, &[topic], gold, &mut budget, &mut prefix)
}

fn competing_dfs(
    g: &KnowledgeGraph,
    frontier: &[EntityId],
    gold: &[crate::kg::RelationId],
    budget: &mut HashMap<crate::kg::RelationId, usize>,
    prefix: &mut Vec<crate::kg::RelationId>,
) -> bool {
    if prefix.len() == gold.len() {
        return false;
    }
    for r in g.frontier_relations(frontier) {
        let Some(left) = budget.get_mut(&r) else {
            continue;
        };
        if *left == 0 {
            continue;
        }
        *left -= 1;
        prefix.push(r);
        let found = if !gold.starts_with(prefix) {
            true
        } else {
            let next = g.step(frontier, r);
            competing_dfs(g, &next, gold, budget, prefix)
        };
        prefix.pop();
        *budget.get_mut(&r).unwrap() += 1;
        if found {
            return true;
        }
    }
    false
}
