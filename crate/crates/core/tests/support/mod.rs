//! Brute-force reference implementations and random fixtures shared by the
//! integration tests. Everything here is written for clarity over speed and
//! avoids the library's own helpers.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use mtbrn_core::data::{EntityId, Instance, ItemId, RelationId, UserId};
use mtbrn_core::graphs::{KgNode, SimGraph, Triple};
use mtbrn_core::pathfinder::{Path, PathSet, PathToken, SourceGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ------------------------------------------------------------ random worlds

/// A small world for path extraction: a similarity graph, a triple list, and
/// one instance, all over at most 20 nodes per graph.
pub struct TinyWorld {
    pub n_items: u32,
    pub sim_edges: Vec<(ItemId, ItemId, f64)>,
    pub triples: Vec<Triple>,
    pub instance: Instance,
    pub max_hops: usize,
    pub k: usize,
}

/// Scores come from a small grid so that equal score products occur.
const SCORE_GRID: [f64; 5] = [0.2, 0.25, 0.5, 0.8, 1.0];

pub fn tiny_world(seed: u64) -> TinyWorld {
    let mut r = rng(seed);
    let n_items = r.random_range(2..=12u32);
    let n_entities = r.random_range(0..=(20 - n_items).min(8));
    let n_relations = r.random_range(1..=3u32);
    let mut sim_edges = Vec::new();
    let density = r.random_range(0.1..0.5);
    for i in 0..n_items {
        for j in 0..n_items {
            if i != j && r.random_bool(density) {
                sim_edges.push((ItemId(i), ItemId(j), SCORE_GRID[r.random_range(0..SCORE_GRID.len())]));
            }
        }
    }
    let node = |r: &mut ChaCha8Rng| {
        if n_entities > 0 && r.random_bool(0.5) {
            KgNode::Entity(EntityId(r.random_range(0..n_entities)))
        } else {
            KgNode::Item(ItemId(r.random_range(0..n_items)))
        }
    };
    let n_triples = r.random_range(0..=3 * (n_items + n_entities) as usize);
    let mut triples = Vec::new();
    for _ in 0..n_triples {
        let head = node(&mut r);
        let tail = node(&mut r);
        let relation = RelationId(r.random_range(0..n_relations));
        triples.push(Triple { head, relation, tail });
        if r.random_bool(0.1) {
            // exact duplicate or a reversed copy
            triples.push(if r.random_bool(0.5) { Triple { head, relation, tail } } else { Triple { head: tail, relation, tail: head } });
        }
    }
    let target = ItemId(r.random_range(0..n_items));
    let n_behaviors = r.random_range(0..=4);
    // may repeat items or include the target; extraction must cope
    let behaviors = (0..n_behaviors).map(|_| ItemId(r.random_range(0..n_items))).collect();
    let instance = Instance {
        user: UserId(0),
        target,
        timestamp: 0,
        behaviors,
        label: false,
        user_profile: Vec::new(),
        target_profile: Vec::new(),
    };
    TinyWorld { n_items, sim_edges, triples, instance, max_hops: r.random_range(1..=3), k: r.random_range(1..=8) }
}

// -------------------------------------------------------- exhaustive paths

fn distinct_sources(behaviors: &[ItemId], target: ItemId) -> Vec<ItemId> {
    let set: BTreeSet<ItemId> = behaviors.iter().copied().filter(|&b| b != target).collect();
    set.into_iter().collect()
}

/// Every simple path from a behavior to the target with at most `max_hops`
/// edges, found by depth-first search over the raw edge list.
pub fn all_cf_paths(
    edges: &[(ItemId, ItemId, f64)],
    behaviors: &[ItemId],
    target: ItemId,
    max_hops: usize,
) -> Vec<(Vec<ItemId>, Vec<f64>)> {
    fn dfs(
        edges: &[(ItemId, ItemId, f64)],
        target: ItemId,
        max_hops: usize,
        nodes: &mut Vec<ItemId>,
        scores: &mut Vec<f64>,
        out: &mut Vec<(Vec<ItemId>, Vec<f64>)>,
    ) {
        if scores.len() == max_hops {
            return;
        }
        let last = *nodes.last().unwrap();
        for &(a, b, s) in edges {
            if a != last || nodes.contains(&b) {
                continue;
            }
            nodes.push(b);
            scores.push(s);
            if b == target {
                out.push((nodes.clone(), scores.clone()));
            } else {
                dfs(edges, target, max_hops, nodes, scores, out);
            }
            nodes.pop();
            scores.pop();
        }
    }
    let mut out = Vec::new();
    for s in distinct_sources(behaviors, target) {
        dfs(edges, target, max_hops, &mut vec![s], &mut Vec::new(), &mut out);
    }
    out
}

/// Fewer hops first, then larger score product, then smaller item sequence.
fn cf_order(a: &(Vec<ItemId>, Vec<f64>), b: &(Vec<ItemId>, Vec<f64>)) -> Ordering {
    let prod = |s: &[f64]| {
        let mut p = 1.0;
        for x in s {
            p *= x;
        }
        p
    };
    a.1.len()
        .cmp(&b.1.len())
        .then(prod(&b.1).partial_cmp(&prod(&a.1)).unwrap())
        .then(a.0.cmp(&b.0))
}

pub fn cf_oracle(edges: &[(ItemId, ItemId, f64)], behaviors: &[ItemId], target: ItemId, max_hops: usize, k: usize) -> Vec<Path> {
    let mut all = all_cf_paths(edges, behaviors, target, max_hops);
    all.sort_by(cf_order);
    all.truncate(k);
    all.into_iter()
        .map(|(nodes, scores)| {
            let mut tokens = vec![PathToken::Item(nodes[0])];
            for (s, n) in scores.iter().zip(&nodes[1..]) {
                tokens.push(PathToken::Score(*s));
                tokens.push(PathToken::Item(*n));
            }
            Path { tokens, source: SourceGraph::Cf, hops: scores.len() }
        })
        .collect()
}

/// Undirected multigraph view of the triples: each distinct
/// `(node, relation, neighbor)` once, self-loops dropped.
fn kg_steps(triples: &[Triple]) -> BTreeSet<(KgNode, RelationId, KgNode)> {
    let mut steps = BTreeSet::new();
    for t in triples {
        if t.head != t.tail {
            steps.insert((t.head, t.relation, t.tail));
            steps.insert((t.tail, t.relation, t.head));
        }
    }
    steps
}

pub fn all_kg_paths(
    triples: &[Triple],
    behaviors: &[ItemId],
    target: ItemId,
    max_hops: usize,
) -> Vec<(Vec<KgNode>, Vec<RelationId>)> {
    let steps = kg_steps(triples);
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<KgNode>, Vec<RelationId>)> = distinct_sources(behaviors, target)
        .into_iter()
        .map(|s| (vec![KgNode::Item(s)], Vec::new()))
        .collect();
    let target = KgNode::Item(target);
    while let Some((nodes, rels)) = stack.pop() {
        if rels.len() == max_hops {
            continue;
        }
        let last = *nodes.last().unwrap();
        for &(a, r, b) in &steps {
            if a != last || nodes.contains(&b) {
                continue;
            }
            let mut n2 = nodes.clone();
            n2.push(b);
            let mut r2 = rels.clone();
            r2.push(r);
            if b == target {
                out.push((n2, r2));
            } else {
                stack.push((n2, r2));
            }
        }
    }
    out
}

/// Fewer hops first, then the token sequence compared left to right.
fn kg_order(a: &(Vec<KgNode>, Vec<RelationId>), b: &(Vec<KgNode>, Vec<RelationId>)) -> Ordering {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    enum Tok {
        Node(KgNode),
        Rel(RelationId),
    }
    let seq = |p: &(Vec<KgNode>, Vec<RelationId>)| {
        let mut v = vec![Tok::Node(p.0[0])];
        for (r, n) in p.1.iter().zip(&p.0[1..]) {
            v.push(Tok::Rel(*r));
            v.push(Tok::Node(*n));
        }
        v
    };
    a.1.len().cmp(&b.1.len()).then_with(|| seq(a).cmp(&seq(b)))
}

pub fn kg_oracle(triples: &[Triple], behaviors: &[ItemId], target: ItemId, max_hops: usize, k: usize) -> Vec<Path> {
    let mut all = all_kg_paths(triples, behaviors, target, max_hops);
    all.sort_by(kg_order);
    all.truncate(k);
    all.into_iter()
        .map(|(nodes, rels)| {
            let mut tokens = vec![PathToken::from(nodes[0])];
            for (r, n) in rels.iter().zip(&nodes[1..]) {
                tokens.push(PathToken::Relation(*r));
                tokens.push(PathToken::from(*n));
            }
            Path { tokens, source: SourceGraph::Kg, hops: rels.len() }
        })
        .collect()
}

// ----------------------------------------------------- similarity, densely

/// A random binary users x items matrix, as rows.
pub fn random_matrix(seed: u64) -> Vec<Vec<u8>> {
    let mut r = rng(seed);
    let users = r.random_range(1..=50);
    let items = r.random_range(1..=30);
    let density = r.random_range(0.02..0.5);
    (0..users).map(|_| (0..items).map(|_| u8::from(r.random_bool(density))).collect()).collect()
}

pub fn dense_cosine(y: &[Vec<u8>], i: usize, j: usize) -> f64 {
    let col = |c: usize| y.iter().map(move |row| f64::from(row[c]));
    let dot: f64 = col(i).zip(col(j)).map(|(a, b)| a * b).sum();
    let ni = col(i).map(|a| a * a).sum::<f64>().sqrt();
    let nj = col(j).map(|a| a * a).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return 0.0;
    }
    dot / (ni * nj)
}

/// For each item, the co-interacted items ranked by descending cosine then
/// ascending id, cut to `top_k`.
pub fn dense_neighbors(y: &[Vec<u8>], top_k: usize) -> Vec<Vec<(usize, f64)>> {
    let items = y.first().map_or(0, Vec::len);
    (0..items)
        .map(|i| {
            let mut list: Vec<(usize, f64)> = (0..items)
                .filter(|&j| j != i && y.iter().any(|row| row[i] == 1 && row[j] == 1))
                .map(|j| (j, dense_cosine(y, i, j)))
                .collect();
            list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            list.truncate(top_k);
            list
        })
        .collect()
}

/// Checks one neighbor list against the dense oracle. Exact ties may be
/// reported in either order by the two computations only when their scores
/// differ in the last bits, so positions are compared by score and each
/// reported neighbor's own oracle score is checked.
pub fn compare_neighbors(
    item: usize,
    got: &[(ItemId, f64)],
    want: &[(usize, f64)],
    y: &[Vec<u8>],
    tol: f64,
) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("item {item}: {} neighbors, oracle has {}", got.len(), want.len()));
    }
    let mut seen = BTreeSet::new();
    for (p, (&(j, s), &(wj, ws))) in got.iter().zip(want).enumerate() {
        if (s - ws).abs() > tol {
            return Err(format!("item {item} position {p}: score {s} vs oracle {ws} (oracle neighbor {wj})"));
        }
        let own = dense_cosine(y, item, j.index());
        if (own - s).abs() > tol || own == 0.0 {
            return Err(format!("item {item} neighbor {}: score {s}, dense cosine {own}", j.0));
        }
        if !seen.insert(j) {
            return Err(format!("item {item}: neighbor {} listed twice", j.0));
        }
    }
    Ok(())
}

pub fn sim_graph_edges(g: &SimGraph) -> Vec<(ItemId, ItemId, f64)> {
    g.edges().collect()
}

// ----------------------------------------------------------------- metrics

/// Pairwise AUC: each (positive, negative) pair scores 2 when ordered
/// correctly and 1 when tied, over twice the pair count.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut half_wins: u64 = 0;
    for p in &pos {
        for n in &neg {
            if p > n {
                half_wins += 2;
            } else if p == n {
                half_wins += 1;
            }
        }
    }
    half_wins as f64 / (2 * pos.len() * neg.len()) as f64
}

pub fn direct_logloss(scores: &[(f64, bool)]) -> f64 {
    let eps = 1e-12;
    let mut total = 0.0;
    for &(p, y) in scores {
        let p = p.clamp(eps, 1.0 - eps);
        total += if y { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / scores.len() as f64
}

/// Spearman correlation for tie-free data: ranks by sorting, then
/// `1 - 6 Σd² / (n (n² - 1))` evaluated as one exact ratio.
pub fn rank_sort_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<i64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        for w in idx.windows(2) {
            assert!(v[w[0]] != v[w[1]], "oracle requires tie-free data");
        }
        let mut r = vec![0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as i64 + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as i64;
    let d2: i64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    let denom = n * (n * n - 1);
    (denom - 6 * d2) as f64 / denom as f64
}

// ------------------------------------------------------------ path analysis

pub fn fixture_instance(label: bool) -> Instance {
    Instance {
        user: UserId(0),
        target: ItemId(9),
        timestamp: 0,
        behaviors: Vec::new(),
        label,
        user_profile: Vec::new(),
        target_profile: Vec::new(),
    }
}

pub fn dummy_path(source: SourceGraph, hops: usize) -> Path {
    let mut tokens = vec![PathToken::Item(ItemId(0))];
    for _ in 0..hops {
        tokens.push(match source {
            SourceGraph::Cf => PathToken::Score(0.5),
            SourceGraph::Kg => PathToken::Relation(RelationId(0)),
        });
        tokens.push(PathToken::Item(ItemId(9)));
    }
    Path { tokens, source, hops }
}

/// Six instances whose click rate mostly rises with the path count.
pub fn spearman_fixture() -> (Vec<Instance>, Vec<PathSet>) {
    // (cf path count, kg path count, label)
    let rows = [(0, 0, false), (0, 1, true), (1, 2, true), (2, 2, true), (2, 2, true), (2, 1, false)];
    let instances = rows.iter().map(|r| fixture_instance(r.2)).collect();
    let sets = rows
        .iter()
        .map(|&(c, k, _)| PathSet {
            cf: (0..c).map(|h| dummy_path(SourceGraph::Cf, h + 1)).collect(),
            kg: (0..k).map(|h| dummy_path(SourceGraph::Kg, h + 1)).collect(),
        })
        .collect();
    (instances, sets)
}
