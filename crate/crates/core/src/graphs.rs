//! The item-item similarity graph and the knowledge-graph index that paths
//! are mined from.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::data::{EntityId, Instance, ItemId, RelationId, UserId};

/// Default neighbor count kept per item.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    UnknownItem(ItemId),
    SelfSimilarity(ItemId),
    InvalidEdge { item: ItemId, neighbor: ItemId, score: f64 },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::UnknownItem(i) => write!(f, "unknown item id {}", i.0),
            GraphError::SelfSimilarity(i) => write!(f, "similarity of item {} with itself requested", i.0),
            GraphError::InvalidEdge { item, neighbor, score } => {
                write!(f, "invalid similarity edge {} -> {} with score {score}", item.0, neighbor.0)
            }
        }
    }
}

/// Binary user-item matrix stored column-major: one sorted user list per item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    n_users: usize,
    columns: Vec<Vec<UserId>>,
}

impl InteractionMatrix {
    /// Builds the matrix from `(user, item)` pairs; repeats collapse to one entry.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: impl IntoIterator<Item = (UserId, ItemId)>) -> Self {
        let mut columns = vec![Vec::new(); n_items];
        let mut n_users = n_users;
        for (u, i) in pairs {
            if i.index() >= columns.len() {
                columns.resize(i.index() + 1, Vec::new());
            }
            n_users = n_users.max(u.index() + 1);
            columns[i.index()].push(u);
        }
        for col in &mut columns {
            col.sort_unstable();
            col.dedup();
        }
        Self { n_users, columns }
    }

    /// Clicked `(user, target)` pairs of the graph-source partition.
    pub fn from_clicks(n_users: usize, n_items: usize, instances: &[Instance]) -> Self {
        Self::from_pairs(n_users, n_items, instances.iter().filter(|i| i.label).map(|i| (i.user, i.target)))
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, item: ItemId) -> Option<&[UserId]> {
        self.columns.get(item.index()).map(Vec::as_slice)
    }

    pub fn get(&self, user: UserId, item: ItemId) -> bool {
        self.column(item).is_some_and(|c| c.binary_search(&user).is_ok())
    }

    /// Cosine similarity of two item columns; zero when either column is empty.
    pub fn cosine_similarity(&self, i: ItemId, j: ItemId) -> Result<f64, GraphError> {
        if i == j {
            return Err(GraphError::SelfSimilarity(i));
        }
        let a = self.column(i).ok_or(GraphError::UnknownItem(i))?;
        let b = self.column(j).ok_or(GraphError::UnknownItem(j))?;
        Ok(cosine_from_counts(sorted_intersection(a, b), a.len(), b.len()))
    }
}

fn sorted_intersection(a: &[UserId], b: &[UserId]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            Ordering::Less => x += 1,
            Ordering::Greater => y += 1,
            Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// `dot / (‖a‖₂ ‖b‖₂)` for binary columns with `dot` shared users.
fn cosine_from_counts(dot: usize, len_a: usize, len_b: usize) -> f64 {
    if len_a == 0 || len_b == 0 {
        return 0.0;
    }
    dot as f64 / libm::sqrt(len_a as f64 * len_b as f64)
}

/// Weighted directed item graph: each item's strongest neighbors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimGraph {
    adjacency: Vec<Vec<(ItemId, f64)>>,
    reverse: Vec<Vec<ItemId>>,
}

/// Descending score, then ascending neighbor id.
fn neighbor_order(a: &(ItemId, f64), b: &(ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl SimGraph {
    /// Builds a graph from explicit edges, e.g. when reloading a persisted graph.
    /// Neighbor lists are re-sorted into canonical order.
    pub fn from_edges(edges: impl IntoIterator<Item = (ItemId, ItemId, f64)>) -> Result<Self, GraphError> {
        let mut adjacency: Vec<Vec<(ItemId, f64)>> = Vec::new();
        for (item, neighbor, score) in edges {
            if item == neighbor || !(0.0..=1.0).contains(&score) {
                return Err(GraphError::InvalidEdge { item, neighbor, score });
            }
            let need = item.index().max(neighbor.index()) + 1;
            if adjacency.len() < need {
                adjacency.resize(need, Vec::new());
            }
            adjacency[item.index()].push((neighbor, score));
        }
        for list in &mut adjacency {
            list.sort_by(neighbor_order);
        }
        Ok(Self::with_adjacency(adjacency))
    }

    fn with_adjacency(adjacency: Vec<Vec<(ItemId, f64)>>) -> Self {
        let mut reverse = vec![Vec::new(); adjacency.len()];
        for (i, list) in adjacency.iter().enumerate() {
            for &(j, _) in list {
                reverse[j.index()].push(ItemId(i as u32));
            }
        }
        Self { adjacency, reverse }
    }

    pub fn n_items(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbors of `item`, strongest first.
    pub fn neighbors(&self, item: ItemId) -> &[(ItemId, f64)] {
        self.adjacency.get(item.index()).map_or(&[], Vec::as_slice)
    }

    /// Items that list `item` as a neighbor.
    pub fn predecessors(&self, item: ItemId) -> &[ItemId] {
        self.reverse.get(item.index()).map_or(&[], Vec::as_slice)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// All edges as `(item, neighbor, score)`, items ascending, neighbors in list order.
    pub fn edges(&self) -> impl Iterator<Item = (ItemId, ItemId, f64)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&(j, s)| (ItemId(i as u32), j, s)))
    }
}

/// Keeps each item's `top_k` most similar items among those sharing at
/// least one user with it.
///
/// Candidate pairs come from an inverted user index, so the work is
/// proportional to co-interaction counts rather than all item pairs.
pub fn build_sim_graph(matrix: &InteractionMatrix, top_k: usize) -> SimGraph {
    let n_items = matrix.n_items();
    let mut user_items: Vec<Vec<ItemId>> = vec![Vec::new(); matrix.n_users()];
    for (i, col) in matrix.columns.iter().enumerate() {
        for u in col {
            user_items[u.index()].push(ItemId(i as u32));
        }
    }
    let mut counts = vec![0usize; n_items];
    let mut touched: Vec<ItemId> = Vec::new();
    let mut adjacency = Vec::with_capacity(n_items);
    for (i, col) in matrix.columns.iter().enumerate() {
        for u in col {
            for &j in &user_items[u.index()] {
                if j.index() == i {
                    continue;
                }
                if counts[j.index()] == 0 {
                    touched.push(j);
                }
                counts[j.index()] += 1;
            }
        }
        let mut list: Vec<(ItemId, f64)> = touched
            .iter()
            .map(|&j| (j, cosine_from_counts(counts[j.index()], col.len(), matrix.columns[j.index()].len())))
            .collect();
        for &j in &touched {
            counts[j.index()] = 0;
        }
        touched.clear();
        list.sort_by(neighbor_order);
        list.truncate(top_k);
        adjacency.push(list);
    }
    SimGraph::with_adjacency(adjacency)
}

/// A knowledge-graph node: either a catalog item or another entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KgNode {
    Item(ItemId),
    Entity(EntityId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: KgNode,
    pub relation: RelationId,
    pub tail: KgNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Backward,
}

/// Triple store indexed both ways.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    out_index: BTreeMap<KgNode, Vec<(RelationId, KgNode, Direction)>>,
    in_index: BTreeMap<KgNode, Vec<(RelationId, KgNode, Direction)>>,
    undirected: BTreeMap<KgNode, Vec<(RelationId, KgNode)>>,
}

impl KnowledgeGraph {
    /// Indexes the triples; exact duplicates are stored once.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let triples: BTreeSet<Triple> = triples.into_iter().collect();
        let mut out_index: BTreeMap<KgNode, Vec<_>> = BTreeMap::new();
        let mut in_index: BTreeMap<KgNode, Vec<_>> = BTreeMap::new();
        let mut undirected: BTreeMap<KgNode, Vec<_>> = BTreeMap::new();
        for t in &triples {
            out_index.entry(t.head).or_default().push((t.relation, t.tail, Direction::Forward));
            in_index.entry(t.tail).or_default().push((t.relation, t.head, Direction::Backward));
            if t.head != t.tail {
                undirected.entry(t.head).or_default().push((t.relation, t.tail));
                undirected.entry(t.tail).or_default().push((t.relation, t.head));
            }
        }
        for list in undirected.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { triples, out_index, in_index, undirected }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples in canonical (sorted) order.
    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn outgoing(&self, node: KgNode) -> &[(RelationId, KgNode, Direction)] {
        self.out_index.get(&node).map_or(&[], Vec::as_slice)
    }

    pub fn incoming(&self, node: KgNode) -> &[(RelationId, KgNode, Direction)] {
        self.in_index.get(&node).map_or(&[], Vec::as_slice)
    }

    /// Edges usable in either direction, sorted by `(relation, neighbor)`
    /// with self-loops dropped.
    pub fn neighbors(&self, node: KgNode) -> &[(RelationId, KgNode)] {
        self.undirected.get(&node).map_or(&[], Vec::as_slice)
    }

    pub fn item_nodes(&self) -> BTreeSet<ItemId> {
        self.out_index
            .keys()
            .chain(self.in_index.keys())
            .filter_map(|n| match n {
                KgNode::Item(i) => Some(*i),
                KgNode::Entity(_) => None,
            })
            .collect()
    }
}
