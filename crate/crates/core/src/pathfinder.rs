//! Relational path extraction between a user's behavior items and a target
//! item, on the similarity graph and on the knowledge graph.
//!
//! Both extractors enumerate simple paths breadth-first, one hop level at a
//! time, and stop after the first level at which `k` paths have been found.
//! Candidates are then ranked under a fixed total order and the best `k` are
//! kept:
//!
//! * similarity graph: fewer hops, then larger product of edge scores, then
//!   the lexicographically smaller item sequence;
//! * knowledge graph: fewer hops, then the lexicographically smaller
//!   node/relation sequence.
//!
//! A backwards breadth-first search from the target bounds the search:
//! a partial path is only extended to nodes that can still reach the target
//! within the remaining hop budget.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::data::{EntityId, Instance, ItemId, RelationId};
use crate::graphs::{KgNode, KnowledgeGraph, SimGraph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathToken {
    Item(ItemId),
    Entity(EntityId),
    Relation(RelationId),
    /// Similarity score of the edge between the neighboring items.
    Score(f64),
}

impl From<KgNode> for PathToken {
    fn from(n: KgNode) -> Self {
        match n {
            KgNode::Item(i) => PathToken::Item(i),
            KgNode::Entity(e) => PathToken::Entity(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceGraph {
    Cf,
    Kg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub tokens: Vec<PathToken>,
    pub source: SourceGraph,
    pub hops: usize,
}

impl Path {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks endpoint, alternation, and length constraints.
    pub fn is_well_formed(&self, behaviors: &[ItemId], target: ItemId, max_path_len: usize) -> bool {
        let n = self.tokens.len();
        if n < 3 || n.is_multiple_of(2) || n > max_path_len || self.hops != n / 2 {
            return false;
        }
        let starts_at_behavior = matches!(self.tokens[0], PathToken::Item(b) if behaviors.contains(&b));
        let ends_at_target = self.tokens[n - 1] == PathToken::Item(target);
        let alternates = self.tokens.iter().enumerate().all(|(i, t)| match (self.source, i % 2, t) {
            (SourceGraph::Cf, 0, PathToken::Item(_)) => true,
            (SourceGraph::Cf, 1, PathToken::Score(s)) => (0.0..=1.0).contains(s),
            (SourceGraph::Kg, 0, PathToken::Item(_) | PathToken::Entity(_)) => true,
            (SourceGraph::Kg, 1, PathToken::Relation(_)) => true,
            _ => false,
        });
        starts_at_behavior && ends_at_target && alternates
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSet {
    pub cf: Vec<Path>,
    pub kg: Vec<Path>,
}

impl PathSet {
    pub fn total(&self) -> usize {
        self.cf.len() + self.kg.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractConfig {
    pub max_hops_cf: usize,
    pub max_hops_kg: usize,
    pub k_cf: usize,
    pub k_kg: usize,
    /// Upper bound on tokens per path; a path of `h` hops has `2h + 1`.
    pub max_path_len: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { max_hops_cf: 3, max_hops_kg: 3, k_cf: 50, k_kg: 50, max_path_len: 7 }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<(), PathError> {
        if self.max_hops_cf == 0 || self.max_hops_kg == 0 {
            return Err(PathError::InvalidConfig("max hops must be at least 1"));
        }
        if self.k_cf == 0 || self.k_kg == 0 {
            return Err(PathError::InvalidConfig("k must be at least 1"));
        }
        if self.max_path_len < 3 {
            return Err(PathError::InvalidConfig("max path length must allow at least one hop (3 tokens)"));
        }
        Ok(())
    }

    fn hops_within_len(&self, max_hops: usize) -> usize {
        max_hops.min((self.max_path_len - 1) / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathError {
    InvalidConfig(&'static str),
}

impl fmt::Display for PathError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathError::InvalidConfig(msg) => write!(f, "invalid path extraction config: {msg}"),
        }
    }
}

/// Hop distance from each node to `target`, following `predecessors`
/// backwards, for nodes within `max_hops`.
fn distances_to<N, I>(target: N, max_hops: usize, predecessors: impl Fn(N) -> I) -> BTreeMap<N, usize>
where
    N: Copy + Ord,
    I: Iterator<Item = N>,
{
    let mut dist = BTreeMap::new();
    dist.insert(target, 0);
    let mut queue = VecDeque::from([target]);
    while let Some(n) = queue.pop_front() {
        let d = dist[&n];
        if d == max_hops {
            continue;
        }
        for p in predecessors(n) {
            if let alloc::collections::btree_map::Entry::Vacant(e) = dist.entry(p) {
                e.insert(d + 1);
                queue.push_back(p);
            }
        }
    }
    dist
}

struct Partial<N, E> {
    nodes: Vec<N>,
    edges: Vec<E>,
}

/// All simple paths from `sources` to `target` with at most `max_hops`
/// edges, level by level, stopping after the first level that brings the
/// total to `k` or more.
fn enumerate<N, E, I>(
    sources: &[N],
    target: N,
    max_hops: usize,
    k: usize,
    dist: &BTreeMap<N, usize>,
    expand: impl Fn(N) -> I,
) -> Vec<Partial<N, E>>
where
    N: Copy + Ord,
    E: Copy,
    I: Iterator<Item = (E, N)>,
{
    let mut seen = BTreeSet::new();
    let mut frontier: Vec<Partial<N, E>> = sources
        .iter()
        .filter(|&&s| s != target && dist.get(&s).is_some_and(|&d| d <= max_hops) && seen.insert(s))
        .map(|&s| Partial { nodes: alloc::vec![s], edges: Vec::new() })
        .collect();
    let mut done = Vec::new();
    for depth in 1..=max_hops {
        let remaining = max_hops - depth;
        let mut next = Vec::new();
        for p in &frontier {
            let last = *p.nodes.last().expect("partial paths are non-empty");
            for (e, n) in expand(last) {
                if p.nodes.contains(&n) {
                    continue;
                }
                let reached = n == target;
                if !reached && dist.get(&n).is_none_or(|&d| d > remaining) {
                    continue;
                }
                let mut nodes = p.nodes.clone();
                nodes.push(n);
                let mut edges = p.edges.clone();
                edges.push(e);
                let ext = Partial { nodes, edges };
                if reached {
                    done.push(ext);
                } else {
                    next.push(ext);
                }
            }
        }
        if done.len() >= k {
            break;
        }
        frontier = next;
    }
    done
}

/// Product of edge scores, multiplied left to right.
pub fn score_product(scores: &[f64]) -> f64 {
    scores.iter().fold(1.0, |acc, s| acc * s)
}

/// Ranking of similarity-graph paths given as item sequences with edge scores.
pub fn cf_rank(a_items: &[ItemId], a_scores: &[f64], b_items: &[ItemId], b_scores: &[f64]) -> Ordering {
    a_scores
        .len()
        .cmp(&b_scores.len())
        .then_with(|| score_product(b_scores).total_cmp(&score_product(a_scores)))
        .then_with(|| a_items.cmp(b_items))
}

/// Ranking of knowledge-graph paths given as node sequences with relations.
pub fn kg_rank(a_nodes: &[KgNode], a_rels: &[RelationId], b_nodes: &[KgNode], b_rels: &[RelationId]) -> Ordering {
    a_rels.len().cmp(&b_rels.len()).then_with(|| {
        a_nodes[0].cmp(&b_nodes[0]).then_with(|| {
            let a = a_rels.iter().zip(&a_nodes[1..]);
            let b = b_rels.iter().zip(&b_nodes[1..]);
            a.cmp(b)
        })
    })
}

/// Best `k` simple paths from any behavior item to `target` on the
/// similarity graph, following each item's neighbor list.
pub fn extract_cf_paths(behaviors: &[ItemId], target: ItemId, graph: &SimGraph, max_hops: usize, k: usize) -> Vec<Path> {
    if max_hops == 0 || k == 0 {
        return Vec::new();
    }
    let dist = distances_to(target, max_hops, |n| graph.predecessors(n).iter().copied());
    let mut found = enumerate(behaviors, target, max_hops, k, &dist, |n| {
        graph.neighbors(n).iter().map(|&(j, s)| (s, j))
    });
    found.sort_by(|a, b| cf_rank(&a.nodes, &a.edges, &b.nodes, &b.edges));
    found.truncate(k);
    found
        .into_iter()
        .map(|p| {
            let mut tokens = Vec::with_capacity(2 * p.nodes.len() - 1);
            tokens.push(PathToken::Item(p.nodes[0]));
            for (s, n) in p.edges.iter().zip(&p.nodes[1..]) {
                tokens.push(PathToken::Score(*s));
                tokens.push(PathToken::Item(*n));
            }
            Path { tokens, source: SourceGraph::Cf, hops: p.edges.len() }
        })
        .collect()
}

/// Best `k` simple paths from any behavior item to `target` on the
/// knowledge graph, traversing triples in either direction.
pub fn extract_kg_paths(
    behaviors: &[ItemId],
    target: ItemId,
    graph: &KnowledgeGraph,
    max_hops: usize,
    k: usize,
) -> Vec<Path> {
    if max_hops == 0 || k == 0 {
        return Vec::new();
    }
    let target = KgNode::Item(target);
    let sources: Vec<KgNode> = behaviors.iter().map(|&b| KgNode::Item(b)).collect();
    let dist = distances_to(target, max_hops, |n| graph.neighbors(n).iter().map(|&(_, m)| m));
    let mut found = enumerate(&sources, target, max_hops, k, &dist, |n| graph.neighbors(n).iter().copied());
    found.sort_by(|a, b| kg_rank(&a.nodes, &a.edges, &b.nodes, &b.edges));
    found.truncate(k);
    found
        .into_iter()
        .map(|p| {
            let mut tokens = Vec::with_capacity(2 * p.nodes.len() - 1);
            tokens.push(PathToken::from(p.nodes[0]));
            for (r, n) in p.edges.iter().zip(&p.nodes[1..]) {
                tokens.push(PathToken::Relation(*r));
                tokens.push(PathToken::from(*n));
            }
            Path { tokens, source: SourceGraph::Kg, hops: p.edges.len() }
        })
        .collect()
}

pub fn extract_path_set(instance: &Instance, sim: &SimGraph, kg: &KnowledgeGraph, config: &ExtractConfig) -> PathSet {
    PathSet {
        cf: extract_cf_paths(
            &instance.behaviors,
            instance.target,
            sim,
            config.hops_within_len(config.max_hops_cf),
            config.k_cf,
        ),
        kg: extract_kg_paths(
            &instance.behaviors,
            instance.target,
            kg,
            config.hops_within_len(config.max_hops_kg),
            config.k_kg,
        ),
    }
}

/// One path set per instance, in instance order.
pub fn extract_all(
    instances: &[Instance],
    sim: &SimGraph,
    kg: &KnowledgeGraph,
    config: &ExtractConfig,
) -> Result<Vec<PathSet>, PathError> {
    config.validate()?;
    Ok(instances.iter().map(|i| extract_path_set(i, sim, kg, config)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::Triple;
    use alloc::vec;

    #[test]
    fn direct_edge_gives_one_path() {
        let g = SimGraph::from_edges([(ItemId(1), ItemId(2), 0.6)]).unwrap();
        let paths = extract_cf_paths(&[ItemId(1)], ItemId(2), &g, 3, 5);
        assert_eq!(paths.len(), 1);
        assert_eq!(
            paths[0].tokens,
            vec![PathToken::Item(ItemId(1)), PathToken::Score(0.6), PathToken::Item(ItemId(2))]
        );
        assert_eq!(paths[0].hops, 1);
    }

    #[test]
    fn unreachable_target_gives_nothing() {
        let g = SimGraph::from_edges([(ItemId(1), ItemId(2), 0.6), (ItemId(2), ItemId(3), 0.5)]).unwrap();
        assert!(extract_cf_paths(&[ItemId(1)], ItemId(3), &g, 1, 5).is_empty());
        assert!(extract_cf_paths(&[ItemId(3)], ItemId(1), &g, 3, 5).is_empty());
        assert_eq!(extract_cf_paths(&[ItemId(1)], ItemId(3), &g, 2, 5).len(), 1);
    }

    #[test]
    fn shorter_paths_rank_first_then_stronger() {
        let g = SimGraph::from_edges([
            (ItemId(1), ItemId(9), 0.1),
            (ItemId(1), ItemId(2), 0.9),
            (ItemId(2), ItemId(9), 0.9),
            (ItemId(3), ItemId(9), 0.4),
        ])
        .unwrap();
        let paths = extract_cf_paths(&[ItemId(1), ItemId(3)], ItemId(9), &g, 3, 5);
        let firsts: Vec<_> = paths.iter().map(|p| (p.hops, p.tokens[0])).collect();
        assert_eq!(
            firsts,
            vec![(1, PathToken::Item(ItemId(3))), (1, PathToken::Item(ItemId(1))), (2, PathToken::Item(ItemId(1)))]
        );
    }

    #[test]
    fn kg_path_through_shared_category() {
        let (b1, v) = (ItemId(0), ItemId(1));
        let longuette = KgNode::Entity(EntityId(0));
        let category = RelationId(0);
        let kg = KnowledgeGraph::from_triples([
            Triple { head: KgNode::Item(b1), relation: category, tail: longuette },
            Triple { head: KgNode::Item(v), relation: category, tail: longuette },
        ]);
        let paths = extract_kg_paths(&[b1], v, &kg, 2, 5);
        assert_eq!(paths.len(), 1);
        assert_eq!(
            paths[0].tokens,
            vec![
                PathToken::Item(b1),
                PathToken::Relation(category),
                PathToken::Entity(EntityId(0)),
                PathToken::Relation(category),
                PathToken::Item(v),
            ]
        );
        assert!(paths[0].is_well_formed(&[b1], v, 7));
    }

    #[test]
    fn kg_isolated_behavior_gives_nothing() {
        let kg = KnowledgeGraph::from_triples([Triple {
            head: KgNode::Item(ItemId(5)),
            relation: RelationId(0),
            tail: KgNode::Entity(EntityId(0)),
        }]);
        assert!(extract_kg_paths(&[ItemId(5)], ItemId(1), &kg, 3, 5).is_empty());
    }

    #[test]
    fn empty_behaviors_give_empty_set() {
        let inst = Instance {
            user: crate::data::UserId(0),
            target: ItemId(0),
            timestamp: 0,
            behaviors: vec![],
            label: true,
            user_profile: vec![],
            target_profile: vec![],
        };
        let sets = extract_all(&[inst], &SimGraph::default(), &KnowledgeGraph::default(), &ExtractConfig::default())
            .unwrap();
        assert_eq!(sets, vec![PathSet::default()]);
    }

    #[test]
    fn max_path_len_caps_hops() {
        let g = SimGraph::from_edges([(ItemId(1), ItemId(2), 0.5), (ItemId(2), ItemId(3), 0.5)]).unwrap();
        let inst = Instance {
            user: crate::data::UserId(0),
            target: ItemId(3),
            timestamp: 0,
            behaviors: vec![ItemId(1)],
            label: true,
            user_profile: vec![],
            target_profile: vec![],
        };
        let kg = KnowledgeGraph::default();
        let short = ExtractConfig { max_path_len: 3, ..ExtractConfig::default() };
        assert!(extract_path_set(&inst, &g, &kg, &short).cf.is_empty());
        let long = ExtractConfig { max_path_len: 5, ..ExtractConfig::default() };
        assert_eq!(extract_path_set(&inst, &g, &kg, &long).cf.len(), 1);
        assert!(ExtractConfig { max_path_len: 2, ..long }.validate().is_err());
    }
}
