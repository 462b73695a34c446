//! Synthetic worlds with planted relational structure.
//!
//! Items come in small co-click clusters, and each cluster belongs to one
//! latent theme and one brand. The knowledge graph reveals the theme and
//! brand of each item only with some probability, plus noise `style` links.
//! Users favor one cluster and its theme. An impression is clicked with
//! probability
//!
//! ```text
//! σ(bias + w_kg·sat(kg) + w_cf·sat(cf) + w_noise·ε),   sat(c) = min(c, 3) / 3
//! ```
//!
//! where `kg` counts behaviors sharing an observed theme or brand link with
//! the target, `cf` counts behaviors from the target's cluster, and
//! `ε ~ N(0, 1)`. Behaviors are the user's clicks before the impression,
//! windowed exactly as [`crate::data::build_instances`] does.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{behavior_window, FeatureValue, FieldId, Instance, Interaction, ItemId, UserId};
use crate::eval::{auc, EvalError};
use crate::graphs::{KgNode, Triple};
use crate::data::{EntityId, RelationId};
use crate::tensor::sigmoid;

pub const RELATION_NAMES: [&str; 4] = ["theme_of", "brand", "style", "parent"];
pub const REL_THEME: RelationId = RelationId(0);
pub const REL_BRAND: RelationId = RelationId(1);
pub const REL_STYLE: RelationId = RelationId(2);
pub const REL_PARENT: RelationId = RelationId(3);
pub const PARENT_COUNT: u32 = 2;
/// Profile schema: field id is the position.
pub const USER_FIELDS: [&str; 2] = ["uid", "age"];
pub const ITEM_FIELDS: [&str; 2] = ["iid", "price"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticWorldConfig {
    pub n_users: u32,
    pub n_items: u32,
    pub n_entities: u32,
    pub n_relations: u32,
    pub theme_count: u32,
    pub cluster_size: u32,
    pub impressions_per_user: u32,
    pub max_behaviors: usize,
    pub p_theme_link: f64,
    pub p_brand_link: f64,
    pub p_style_link: f64,
    /// Chance an impression comes from the user's favorite cluster.
    pub p_focus_cluster: f64,
    /// Chance it comes from the favorite theme; otherwise uniform.
    pub p_focus_theme: f64,
    pub bias: f64,
    pub w_kg: f64,
    pub w_cf: f64,
    pub w_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 300,
            n_entities: 60,
            n_relations: 4,
            theme_count: 8,
            cluster_size: 6,
            impressions_per_user: 48,
            max_behaviors: crate::data::DEFAULT_MAX_BEHAVIORS,
            p_theme_link: 0.55,
            p_brand_link: 0.5,
            p_style_link: 0.5,
            p_focus_cluster: 0.3,
            p_focus_theme: 0.3,
            bias: -2.0,
            w_kg: 2.2,
            w_cf: 2.2,
            w_noise: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    InvalidConfig(String),
    MissingInstance { user: UserId, timestamp: u64 },
    Eval(EvalError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidConfig(msg) => write!(f, "invalid synthetic world config: {msg}"),
            SynthError::MissingInstance { user, timestamp } => {
                write!(f, "no ground truth for user {} at time {timestamp}", user.0)
            }
            SynthError::Eval(e) => write!(f, "{e}"),
        }
    }
}

/// How the entity id range is carved up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityLayout {
    pub themes: u32,
    pub parents: u32,
    pub brands: u32,
    pub styles: u32,
}

impl EntityLayout {
    pub fn theme(&self, t: u32) -> EntityId {
        EntityId(t)
    }

    pub fn parent(&self, p: u32) -> EntityId {
        EntityId(self.themes + p)
    }

    pub fn brand(&self, b: u32) -> EntityId {
        EntityId(self.themes + self.parents + b)
    }

    pub fn style(&self, s: u32) -> EntityId {
        EntityId(self.themes + self.parents + self.brands + s)
    }

    pub fn name(&self, e: EntityId) -> String {
        let mut k = e.0;
        for (prefix, n) in [("theme", self.themes), ("parent", self.parents), ("brand", self.brands)] {
            if k < n {
                return format!("{prefix}{k}");
            }
            k -= n;
        }
        format!("style{k}")
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<EntityLayout, SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.n_users == 0 || self.n_items == 0 || self.theme_count == 0 || self.cluster_size == 0 {
            return bad("counts must be at least 1");
        }
        if self.impressions_per_user == 0 {
            return bad("impressions_per_user must be at least 1");
        }
        if self.n_relations as usize != RELATION_NAMES.len() {
            return bad("the relation vocabulary has exactly 4 relations");
        }
        if self.n_entities < self.theme_count + PARENT_COUNT + 2 {
            return bad("n_entities must cover themes, parents, and at least one brand and one style");
        }
        let probs = [self.p_theme_link, self.p_brand_link, self.p_style_link, self.p_focus_cluster, self.p_focus_theme];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p_focus_cluster + self.p_focus_theme > 1.0 {
            return bad("probabilities must lie in [0, 1] and focus shares must sum to at most 1");
        }
        if ![self.bias, self.w_kg, self.w_cf, self.w_noise].iter().all(|w| w.is_finite()) {
            return bad("click-model weights must be finite");
        }
        let rest = self.n_entities - self.theme_count - PARENT_COUNT;
        let brands = (rest * 2 / 5).max(1);
        Ok(EntityLayout { themes: self.theme_count, parents: PARENT_COUNT, brands, styles: rest - brands })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpressionTruth {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: u64,
    pub kg_count: usize,
    pub cf_count: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub item_theme: Vec<u32>,
    pub item_cluster: Vec<u32>,
    /// One entry per emitted interaction, in the same order.
    pub impressions: Vec<ImpressionTruth>,
}

impl GroundTruth {
    pub fn probability(&self, user: UserId, timestamp: u64) -> Option<f64> {
        self.impressions
            .binary_search_by_key(&(user, timestamp), |t| (t.user, t.timestamp))
            .ok()
            .map(|k| self.impressions[k].probability)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: SyntheticWorldConfig,
    pub layout: EntityLayout,
    /// Sorted by user, then timestamp; timestamps are `1..=impressions_per_user`.
    pub interactions: Vec<Interaction>,
    pub triples: Vec<Triple>,
    pub user_profiles: Vec<Vec<FeatureValue>>,
    pub item_profiles: Vec<Vec<FeatureValue>>,
    pub ground_truth: GroundTruth,
}

impl World {
    pub fn entity_names(&self) -> Vec<String> {
        (0..self.config.n_entities).map(|e| self.layout.name(EntityId(e))).collect()
    }
}

fn saturate(c: usize) -> f64 {
    c.min(3) as f64 / 3.0
}

pub fn generate_world(config: &SyntheticWorldConfig) -> Result<World, SynthError> {
    let layout = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_items = config.n_items as usize;
    let n_clusters = n_items.div_ceil(config.cluster_size as usize) as u32;

    let cluster_theme: Vec<u32> = (0..n_clusters).map(|c| c % config.theme_count).collect();
    let cluster_brand: Vec<Option<u32>> = cluster_theme
        .iter()
        .map(|&t| {
            let own: Vec<u32> = (0..layout.brands).filter(|b| b % config.theme_count == t).collect();
            (!own.is_empty()).then(|| own[rng.random_range(0..own.len())])
        })
        .collect();
    let item_cluster: Vec<u32> = (0..config.n_items).map(|i| i / config.cluster_size).collect();
    let item_theme: Vec<u32> = item_cluster.iter().map(|&c| cluster_theme[c as usize]).collect();

    let mut triples = Vec::new();
    let mut theme_link: Vec<Option<u32>> = alloc::vec![None; n_items];
    let mut brand_link: Vec<Option<u32>> = alloc::vec![None; n_items];
    for i in 0..n_items {
        let node = KgNode::Item(ItemId(i as u32));
        if rng.random_bool(config.p_theme_link) {
            theme_link[i] = Some(item_theme[i]);
            triples.push(Triple {
                head: node,
                relation: REL_THEME,
                tail: KgNode::Entity(layout.theme(item_theme[i])),
            });
        }
        let brand = cluster_brand[item_cluster[i] as usize];
        if let Some(b) = brand {
            if rng.random_bool(config.p_brand_link) {
                brand_link[i] = Some(b);
                triples.push(Triple { head: node, relation: REL_BRAND, tail: KgNode::Entity(layout.brand(b)) });
            }
        }
        if layout.styles > 0 && rng.random_bool(config.p_style_link) {
            let s = rng.random_range(0..layout.styles);
            triples.push(Triple { head: node, relation: REL_STYLE, tail: KgNode::Entity(layout.style(s)) });
        }
    }
    for t in 0..config.theme_count {
        triples.push(Triple {
            head: KgNode::Entity(layout.theme(t)),
            relation: REL_PARENT,
            tail: KgNode::Entity(layout.parent(t % PARENT_COUNT)),
        });
    }

    let item_profiles: Vec<Vec<FeatureValue>> = (0..config.n_items)
        .map(|i| {
            let price: f64 = rng.random();
            alloc::vec![FeatureValue::sparse(FieldId(0), i), FeatureValue::numerical(FieldId(1), price)]
        })
        .collect();

    let mut theme_items: Vec<Vec<ItemId>> = alloc::vec![Vec::new(); config.theme_count as usize];
    let mut cluster_items: Vec<Vec<ItemId>> = alloc::vec![Vec::new(); n_clusters as usize];
    for i in 0..config.n_items {
        theme_items[item_theme[i as usize] as usize].push(ItemId(i));
        cluster_items[item_cluster[i as usize] as usize].push(ItemId(i));
    }

    let related = |a: ItemId, b: ItemId| -> bool {
        let (a, b) = (a.index(), b.index());
        let theme = theme_link[a].is_some() && theme_link[a] == theme_link[b];
        let brand = brand_link[a].is_some() && brand_link[a] == brand_link[b];
        theme || brand
    };

    let mut user_profiles = Vec::with_capacity(config.n_users as usize);
    let mut interactions = Vec::new();
    let mut impressions = Vec::new();
    for u in 0..config.n_users {
        let user = UserId(u);
        let age: f64 = rng.random();
        user_profiles.push(alloc::vec![FeatureValue::sparse(FieldId(0), u), FeatureValue::numerical(FieldId(1), age)]);
        let fav_cluster = rng.random_range(0..n_clusters);
        let fav_theme = cluster_theme[fav_cluster as usize];
        let mut clicks: Vec<ItemId> = Vec::new();
        for t in 1..=u64::from(config.impressions_per_user) {
            let r: f64 = rng.random();
            let pool: &[ItemId] = if r < config.p_focus_cluster {
                &cluster_items[fav_cluster as usize]
            } else if r < config.p_focus_cluster + config.p_focus_theme {
                &theme_items[fav_theme as usize]
            } else {
                &[]
            };
            let item = if pool.is_empty() {
                ItemId(rng.random_range(0..config.n_items))
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            let behaviors = behavior_window(&clicks, item, config.max_behaviors);
            let kg_count = behaviors.iter().filter(|&&b| related(b, item)).count();
            let cf_count = behaviors.iter().filter(|b| item_cluster[b.index()] == item_cluster[item.index()]).count();
            let eps: f64 = rng.sample(StandardNormal);
            let z = config.bias + config.w_kg * saturate(kg_count) + config.w_cf * saturate(cf_count) + config.w_noise * eps;
            let probability = sigmoid(z);
            let label = rng.random_bool(probability.clamp(0.0, 1.0));
            if label {
                clicks.push(item);
            }
            interactions.push(Interaction { user, item, timestamp: t, label });
            impressions.push(ImpressionTruth { user, item, timestamp: t, kg_count, cf_count, probability });
        }
    }

    Ok(World {
        config: *config,
        layout,
        interactions,
        triples,
        user_profiles,
        item_profiles,
        ground_truth: GroundTruth { item_theme, item_cluster, impressions },
    })
}

/// Attaches each world profile to instances built from the world's log.
pub fn attach_profiles(world: &World, instances: &mut [Instance]) {
    for inst in instances {
        inst.user_profile = world.user_profiles[inst.user.index()].clone();
        inst.target_profile = world.item_profiles[inst.target.index()].clone();
    }
}

/// AUC of the true generative click probability on `instances`.
pub fn bayes_oracle_auc(truth: &GroundTruth, instances: &[Instance]) -> Result<f64, SynthError> {
    let scores = instances
        .iter()
        .map(|i| {
            truth
                .probability(i.user, i.timestamp)
                .map(|p| (p, i.label))
                .ok_or(SynthError::MissingInstance { user: i.user, timestamp: i.timestamp })
        })
        .collect::<Result<Vec<_>, _>>()?;
    auc(&scores).map_err(SynthError::Eval)
}

/// Mean generative probability per key, e.g. per path count.
pub fn mean_probability_by<K: Ord>(
    truth: &GroundTruth,
    instances: &[Instance],
    mut key: impl FnMut(usize) -> K,
) -> Result<BTreeMap<K, f64>, SynthError> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, i) in instances.iter().enumerate() {
        let p = truth
            .probability(i.user, i.timestamp)
            .ok_or(SynthError::MissingInstance { user: i.user, timestamp: i.timestamp })?;
        let e = acc.entry(key(k)).or_insert((0.0, 0));
        e.0 += p;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}
