//! Immutable triple store with a per-entity outbound relation index.
//!
//! Entities and relations get dense ids in first-appearance order while
//! loading, so the same file always produces the same ids. The outbound
//! index groups triples by head, then relation, with tails ascending.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Splits a relation label into lowercase word tokens on `.`, `_` and `/`.
///
/// Labels without any word characters fall back to the whole lowercased label
/// so the token sequence is never empty.
pub fn relation_tokens(label: &str) -> Vec<String> {
    let tokens: Vec<String> = label
        .split(['.', '_', '/'])
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        vec![label.to_lowercase()]
    } else {
        tokens
    }
}

#[derive(Debug, Default, Clone)]
struct Interner {
    labels: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_string());
        self.ids.insert(label.to_string(), id);
        id
    }
}

/// One `(relation, tails)` group of an entity's outbound index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub relation: RelationId,
    pub tails: Vec<EntityId>,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    relation_tokens: Vec<Vec<String>>,
    triples: BTreeSet<(EntityId, RelationId, EntityId)>,
    outbound: Vec<Vec<Outbound>>,
}

impl KnowledgeGraph {
    /// Builds a graph from labelled triples. Duplicates collapse.
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut g = KnowledgeGraph::default();
        for (h, r, t) in triples {
            let h = EntityId(g.entities.intern(h));
            let rid = g.relations.intern(r);
            if rid as usize == g.relation_tokens.len() {
                g.relation_tokens.push(relation_tokens(r));
            }
            let t = EntityId(g.entities.intern(t));
            g.triples.insert((h, RelationId(rid), t));
        }
        g.build_index();
        g
    }

    fn build_index(&mut self) {
        let mut outbound: Vec<Vec<Outbound>> = vec![Vec::new(); self.entities.labels.len()];
        // BTreeSet order is (head, relation, tail), which is exactly the index order.
        for &(h, r, t) in &self.triples {
            let groups = &mut outbound[h.index()];
            match groups.last_mut() {
                Some(last) if last.relation == r => last.tails.push(t),
                _ => groups.push(Outbound {
                    relation: r,
                    tails: vec![t],
                }),
            }
        }
        self.outbound = outbound;
    }

    /// Loads `head<TAB>relation<TAB>tail` lines. Blank lines are rejected like
    /// any other malformed line, except for a trailing newline at end of file.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    /// Parses TSV text; on failure returns the 1-based line number and reason.
    pub fn parse_tsv(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err((
                    i + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err((i + 1, "empty field".to_string()));
            }
            rows.push((fields[0], fields[1], fields[2]));
        }
        Ok(Self::from_triples(rows))
    }

    /// Canonical TSV: triples in (head, relation, tail) id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &(h, r, t) in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(h),
                self.relation_label(r),
                self.entity_label(t)
            );
        }
        out
    }

    pub fn num_entities(&self) -> usize {
        self.entities.labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.labels.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = (EntityId, RelationId, EntityId)> + '_ {
        self.triples.iter().copied()
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entities.ids.get(label).copied().map(EntityId)
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relations.ids.get(label).copied().map(RelationId)
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entities.labels[e.index()]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations.labels[r.index()]
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relations.labels
    }

    pub fn tokens(&self, r: RelationId) -> &[String] {
        &self.relation_tokens[r.index()]
    }

    /// Outbound relations of `e`, ascending by relation id.
    pub fn outbound(&self, e: EntityId) -> Result<&[Outbound]> {
        self.outbound
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownEntity(format!("#{}", e.0)))
    }

    /// Tails of `(e, r)` in ascending id order.
    pub fn transit(&self, e: EntityId, r: RelationId) -> Result<&[EntityId]> {
        let groups = self.outbound(e)?;
        groups
            .binary_search_by_key(&r, |o| o.relation)
            .map(|i| groups[i].tails.as_slice())
            .map_err(|_| Error::Transit {
                entity: self.entity_label(e).to_string(),
                relation: self
                    .relations
                    .labels
                    .get(r.index())
                    .cloned()
                    .unwrap_or_else(|| format!("#{}", r.0)),
            })
    }

    /// Deduplicated union of outbound relations over a frontier, ascending.
    pub fn frontier_relations(&self, frontier: &[EntityId]) -> Vec<RelationId> {
        let mut rels = BTreeSet::new();
        for &e in frontier {
            if let Some(groups) = self.outbound.get(e.index()) {
                rels.extend(groups.iter().map(|o| o.relation));
            }
        }
        rels.into_iter().collect()
    }

    /// Union of tails reached through `r` from every frontier entity that has it.
    pub fn step(&self, frontier: &[EntityId], r: RelationId) -> Vec<EntityId> {
        let mut next = BTreeSet::new();
        for &e in frontier {
            if let Ok(tails) = self.transit(e, r) {
                next.extend(tails.iter().copied());
            }
        }
        next.into_iter().collect()
    }

    /// Folds [`step`](Self::step) over a path; `None` if any hop dead-ends.
    pub fn execute(&self, start: EntityId, path: &[RelationId]) -> Option<Vec<EntityId>> {
        let mut frontier = vec![start];
        for &r in path {
            frontier = self.step(&frontier, r);
            if frontier.is_empty() {
                return None;
            }
        }
        Some(frontier)
    }

    pub fn relation_path(&self, labels: &[String]) -> Result<Vec<RelationId>> {
        labels
            .iter()
            .map(|l| {
                self.relation(l)
                    .ok_or_else(|| Error::UnknownRelation(l.clone()))
            })
            .collect()
    }

    pub fn path_labels(&self, path: &[RelationId]) -> Vec<String> {
        path.iter()
            .map(|&r| self.relation_label(r).to_string())
            .collect()
    }
}
