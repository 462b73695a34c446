//! Interaction log, labeled instances, chronological splitting, and negative
//! sampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default behavior window length.
pub const DEFAULT_MAX_BEHAVIORS: usize = 10;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(UserId);
id_type!(ItemId);
id_type!(
    /// A non-item knowledge-graph node.
    EntityId
);
id_type!(RelationId);
id_type!(
    /// Position of a feature field within one side's (user or item) schema.
    FieldId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: u64,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureKind {
    Sparse,
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureData {
    /// Categorical token id.
    Sparse(u32),
    Numerical(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureValue {
    pub field: FieldId,
    pub data: FeatureData,
}

impl FeatureValue {
    pub fn sparse(field: FieldId, token: u32) -> Self {
        Self { field, data: FeatureData::Sparse(token) }
    }

    pub fn numerical(field: FieldId, value: f64) -> Self {
        Self { field, data: FeatureData::Numerical(value) }
    }

    pub fn kind(&self) -> FeatureKind {
        match self.data {
            FeatureData::Sparse(_) => FeatureKind::Sparse,
            FeatureData::Numerical(_) => FeatureKind::Numerical,
        }
    }
}

/// One labeled prediction example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub user: UserId,
    pub target: ItemId,
    pub timestamp: u64,
    /// Most recent clicks before `timestamp`, oldest first.
    pub behaviors: Vec<ItemId>,
    pub label: bool,
    pub user_profile: Vec<FeatureValue>,
    pub target_profile: Vec<FeatureValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Train,
    Test,
    GraphSource,
}

impl DatasetRole {
    pub fn name(self) -> &'static str {
        match self {
            DatasetRole::Train => "train",
            DatasetRole::Test => "test",
            DatasetRole::GraphSource => "graph-source",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: DatasetRole,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub graph_source: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    InvalidRatio,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidRatio => write!(f, "negative sampling ratio must be at least 1"),
        }
    }
}

/// The behavior window for predicting `target`: the most recent distinct
/// clicked items from `clicks` (oldest first), never including the target.
pub fn behavior_window(clicks: &[ItemId], target: ItemId, max_behaviors: usize) -> Vec<ItemId> {
    let mut seen = BTreeSet::new();
    let mut recent = Vec::with_capacity(max_behaviors);
    for &item in clicks.iter().rev() {
        if recent.len() == max_behaviors {
            break;
        }
        if item != target && seen.insert(item) {
            recent.push(item);
        }
    }
    recent.reverse();
    recent
}

/// Turns every logged interaction into an instance whose behaviors are the
/// user's clicks at strictly earlier timestamps.
///
/// Output is ordered by user id, then timestamp; equal timestamps keep log
/// order. Profiles are left empty.
pub fn build_instances(log: &[Interaction], max_behaviors: usize) -> Vec<Instance> {
    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by_key(|&i| (log[i].user, log[i].timestamp));

    let mut out = Vec::with_capacity(log.len());
    let mut start = 0;
    while start < order.len() {
        let user = log[order[start]].user;
        let mut end = start;
        while end < order.len() && log[order[end]].user == user {
            end += 1;
        }
        let mut clicks: Vec<ItemId> = Vec::new();
        let mut i = start;
        while i < end {
            let ts = log[order[i]].timestamp;
            let mut j = i;
            while j < end && log[order[j]].timestamp == ts {
                j += 1;
            }
            for &k in &order[i..j] {
                let it = log[k];
                out.push(Instance {
                    user,
                    target: it.item,
                    timestamp: ts,
                    behaviors: behavior_window(&clicks, it.item, max_behaviors),
                    label: it.label,
                    user_profile: Vec::new(),
                    target_profile: Vec::new(),
                });
            }
            clicks.extend(order[i..j].iter().filter(|&&k| log[k].label).map(|&k| log[k].item));
            i = j;
        }
        start = end;
    }
    out
}

/// Per user, in chronological order: the last `test_tail` instances go to
/// test, the `train_window` before them to train, and anything older is
/// reserved for graph construction. Users with fewer than `test_tail`
/// instances contribute only to the graph-source partition.
pub fn chronological_split(instances: Vec<Instance>, test_tail: usize, train_window: usize) -> Split {
    let mut by_user: BTreeMap<UserId, Vec<Instance>> = BTreeMap::new();
    for inst in instances {
        by_user.entry(inst.user).or_default().push(inst);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut graph = Vec::new();
    for (_, mut list) in by_user {
        // stable: equal timestamps keep input order
        list.sort_by_key(|i| i.timestamp);
        let n = list.len();
        if n < test_tail {
            graph.extend(list);
            continue;
        }
        let test_start = n - test_tail;
        let train_start = test_start.saturating_sub(train_window);
        let mut rest = list;
        let test_part = rest.split_off(test_start);
        let train_part = rest.split_off(train_start);
        graph.extend(rest);
        train.extend(train_part);
        test.extend(test_part);
    }
    Split {
        train: Dataset { role: DatasetRole::Train, instances: train },
        test: Dataset { role: DatasetRole::Test, instances: test },
        graph_source: Dataset { role: DatasetRole::GraphSource, instances: graph },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    /// Each positive followed by its sampled negatives.
    pub instances: Vec<Instance>,
    /// Positives whose eligible pool held fewer than `ratio` items.
    pub short_pools: usize,
}

/// Draws `ratio` negatives per positive, uniformly without replacement from
/// the catalog minus the items that user interacted with. Negatives copy the
/// positive's user profile, behaviors, and timestamp and take the sampled
/// item's profile from `item_profiles` when present.
pub fn negative_sample(
    positives: &[Instance],
    catalog: &BTreeSet<ItemId>,
    interacted: &BTreeMap<UserId, BTreeSet<ItemId>>,
    item_profiles: &BTreeMap<ItemId, Vec<FeatureValue>>,
    ratio: usize,
    seed: u64,
) -> Result<NegativeSample, DataError> {
    if ratio == 0 {
        return Err(DataError::InvalidRatio);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = BTreeSet::new();
    let mut pools: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));
    let mut short_pools = 0;
    for pos in positives {
        let pool = pools.entry(pos.user).or_insert_with(|| {
            let seen = interacted.get(&pos.user).unwrap_or(&empty);
            catalog.iter().copied().filter(|i| !seen.contains(i)).collect()
        });
        out.push(pos.clone());
        let take = if pool.len() < ratio {
            short_pools += 1;
            pool.len()
        } else {
            ratio
        };
        for k in index::sample(&mut rng, pool.len(), take) {
            let item = pool[k];
            out.push(Instance {
                target: item,
                label: false,
                target_profile: item_profiles.get(&item).cloned().unwrap_or_default(),
                ..pos.clone()
            });
        }
    }
    Ok(NegativeSample { instances: out, short_pools })
}
