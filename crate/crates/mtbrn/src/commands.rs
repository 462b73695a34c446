//! One function per subcommand. Each resolves its settings, does the work,
//! and writes its outputs followed by a run manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mtbrn_core::data::{
    build_instances, chronological_split, negative_sample, Instance, Interaction, ItemId, UserId,
};
use mtbrn_core::eval::{self, path_validity_analysis, Bucket, GraphPathStats};
use mtbrn_core::gradcheck::{check_model, micro_problem};
use mtbrn_core::graphs::{build_sim_graph, InteractionMatrix, KgNode, KnowledgeGraph, SimGraph, Triple};
use mtbrn_core::model::{Example, ModelVariant};
use mtbrn_core::pathfinder::{extract_path_set, ExtractConfig, PathSet};
use mtbrn_core::synth::{bayes_oracle_auc, generate_world, SyntheticWorldConfig, ITEM_FIELDS, RELATION_NAMES, USER_FIELDS};
use mtbrn_core::train::{init_params, predict_all, train_with, TrainConfig, DEFAULT_EPSILON, DEFAULT_INIT_RANGE};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{model_config, Checkpoint, Hyperparameters};
use crate::cli::{
    AnalyzePathsArgs, BuildSimgraphArgs, Command, EvaluateArgs, ExtractPathsArgs, Format, GenSynthArgs,
    GradCheckArgs, TrainArgs,
};
use crate::config::Resolver;
use crate::dataset::{group_profiles, Catalog, Mode};
use crate::error::{Error, Result};
use crate::formats::{
    self, parse_interactions, parse_profiles, parse_simgraph, parse_triples, read_instances, read_paths, write_json,
    write_jsonl, write_text, EntityKind, InteractionRow, ProfileRow, RawValue, SimEdgeRow, TripleRow,
};
use crate::manifest::ManifestBuilder;

/// Desk-scale defaults, sized so the whole pipeline runs in about a minute.
pub mod defaults {
    pub const SEED: u64 = 7;
    pub const TOP_K: usize = mtbrn_core::graphs::DEFAULT_TOP_K;
    pub const MAX_BEHAVIORS: usize = mtbrn_core::data::DEFAULT_MAX_BEHAVIORS;
    pub const TEST_TAIL: usize = 10;
    pub const TRAIN_WINDOW: usize = 22;
    pub const MAX_HOPS: usize = 3;
    pub const K_PATHS: usize = 10;
    pub const MAX_PATH_LEN: usize = 7;
    pub const EPOCHS: usize = 5;
    pub const BATCH_SIZE: usize = 32;
    pub const LEARNING_RATE: f64 = 0.05;
    pub const EMBEDDING_DIM: usize = 4;
    pub const HIDDEN: usize = 8;
    pub const MLP_HIDDEN: [usize; 3] = [32, 16, 8];
    pub const GRAD_TOLERANCE: f64 = 1e-4;
    pub const GRAD_STEP: f64 = 1e-5;
}

/// What a command reports back to `main`.
pub struct Outcome {
    pub warnings: Vec<String>,
    /// Human-readable summary for stdout.
    pub summary: String,
    /// Nonzero when the command ran but its check failed.
    pub failed: bool,
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::BuildSimgraph(a) => build_simgraph(a),
        Command::ExtractPaths(a) => extract_paths(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AnalyzePaths(a) => analyze_paths(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn manifest_path(explicit: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    explicit.clone().unwrap_or(default)
}

/// `out/paths.jsonl` -> `out/paths.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn done(res: Resolver, summary: String) -> Outcome {
    Outcome { warnings: res.warnings, summary, failed: false }
}

// ---------------------------------------------------------------- gen-synth

#[derive(Debug, Serialize)]
struct SynthSettings {
    out: PathBuf,
    n_users: u32,
    n_items: u32,
    n_entities: u32,
    n_relations: u32,
    theme_count: u32,
    cluster_size: u32,
    impressions_per_user: u32,
    max_behaviors: usize,
    p_theme_link: f64,
    p_brand_link: f64,
    p_style_link: f64,
    p_focus_cluster: f64,
    p_focus_theme: f64,
    bias: f64,
    w_kg: f64,
    w_cf: f64,
    w_noise: f64,
    seed: u64,
}

impl SynthSettings {
    fn new(out: PathBuf, c: &SyntheticWorldConfig) -> Self {
        Self {
            out,
            n_users: c.n_users,
            n_items: c.n_items,
            n_entities: c.n_entities,
            n_relations: c.n_relations,
            theme_count: c.theme_count,
            cluster_size: c.cluster_size,
            impressions_per_user: c.impressions_per_user,
            max_behaviors: c.max_behaviors,
            p_theme_link: c.p_theme_link,
            p_brand_link: c.p_brand_link,
            p_style_link: c.p_style_link,
            p_focus_cluster: c.p_focus_cluster,
            p_focus_theme: c.p_focus_theme,
            bias: c.bias,
            w_kg: c.w_kg,
            w_cf: c.w_cf,
            w_noise: c.w_noise,
            seed: c.seed,
        }
    }
}

pub fn user_name(u: UserId) -> String {
    format!("u{}", u.0)
}

pub fn item_name(i: ItemId) -> String {
    format!("i{}", i.0)
}

fn gen_synth(a: GenSynthArgs) -> Result<Outcome> {
    let mut res = Resolver::load(a.common.config.as_deref())?;
    let f = res.file().clone();
    let d = SyntheticWorldConfig::default();
    let cfg = SyntheticWorldConfig {
        n_users: res.pick("n_users", "--n-users", a.n_users, f.n_users, d.n_users),
        n_items: res.pick("n_items", "--n-items", a.n_items, f.n_items, d.n_items),
        n_entities: res.pick("n_entities", "--n-entities", a.n_entities, f.n_entities, d.n_entities),
        theme_count: res.pick("theme_count", "--theme-count", a.theme_count, f.theme_count, d.theme_count),
        impressions_per_user: res.pick(
            "impressions_per_user",
            "--impressions-per-user",
            a.impressions_per_user,
            f.impressions_per_user,
            d.impressions_per_user,
        ),
        bias: res.pick("bias", "--bias", a.bias, f.bias, d.bias),
        w_kg: res.pick("w_kg", "--w-kg", a.w_kg, f.w_kg, d.w_kg),
        w_cf: res.pick("w_cf", "--w-cf", a.w_cf, f.w_cf, d.w_cf),
        w_noise: res.pick("w_noise", "--w-noise", a.w_noise, f.w_noise, d.w_noise),
        seed: res.pick("seed", "--seed", a.seed, f.seed, d.seed),
        ..d
    };
    let layout = cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.n_entities < cfg.theme_count + mtbrn_core::synth::PARENT_COUNT + 2 {
        return Err(res.conflict(
            ("n_entities", &cfg.n_entities),
            ("theme_count", &cfg.theme_count),
            "entities must cover every theme, both parents, a brand and a style",
        ));
    }
    let world = generate_world(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let settings = SynthSettings::new(a.out.clone(), &cfg);
    let mut manifest = ManifestBuilder::new("gen-synth", &settings, Some(cfg.seed));

    let entity_names = world.entity_names();
    let node_name = |n: KgNode| match n {
        KgNode::Item(i) => item_name(i),
        KgNode::Entity(e) => entity_names[e.index()].clone(),
    };
    let interactions: Vec<InteractionRow> = world
        .interactions
        .iter()
        .map(|i| InteractionRow { user: user_name(i.user), item: item_name(i.item), timestamp: i.timestamp, label: i.label })
        .collect();
    let mut profiles = Vec::new();
    for (kind, names, rows) in [
        (EntityKind::User, &USER_FIELDS, &world.user_profiles),
        (EntityKind::Item, &ITEM_FIELDS, &world.item_profiles),
    ] {
        for (k, features) in rows.iter().enumerate() {
            let entity = match kind {
                EntityKind::User => user_name(UserId(k as u32)),
                EntityKind::Item => item_name(ItemId(k as u32)),
            };
            for fv in features {
                let value = match fv.data {
                    mtbrn_core::data::FeatureData::Sparse(t) => RawValue::Token(t),
                    mtbrn_core::data::FeatureData::Numerical(x) => RawValue::Number(x),
                };
                profiles.push(ProfileRow {
                    entity_kind: kind,
                    entity: entity.clone(),
                    field: names[fv.field.index()].to_owned(),
                    value,
                });
            }
        }
    }
    let triples: Vec<TripleRow> = world
        .triples
        .iter()
        .map(|t| TripleRow {
            head: node_name(t.head),
            relation: RELATION_NAMES[t.relation.index()].to_owned(),
            tail: node_name(t.tail),
        })
        .collect();
    let mut truth = String::new();
    for t in &world.ground_truth.impressions {
        writeln!(truth, "{}\t{}\t{}\t{}", user_name(t.user), item_name(t.item), t.timestamp, t.probability).unwrap();
    }

    let files = [
        ("interactions.tsv", a.out.join("interactions.tsv")),
        ("profiles.tsv", a.out.join("profiles.tsv")),
        ("triples.tsv", a.out.join("triples.tsv")),
        ("ground_truth.tsv", a.out.join("ground_truth.tsv")),
    ];
    formats::write_interactions(&files[0].1, &interactions)?;
    formats::write_profiles(&files[1].1, &profiles)?;
    formats::write_triples(&files[2].1, &triples)?;
    write_text(&files[3].1, &truth)?;

    let instances = build_instances(&world.interactions, cfg.max_behaviors);
    let split = chronological_split(instances.clone(), defaults::TEST_TAIL, defaults::TRAIN_WINDOW);
    let bayes_all = bayes_oracle_auc(&world.ground_truth, &instances).map_err(Error::core)?;
    let bayes_test = bayes_oracle_auc(&world.ground_truth, &split.test.instances).map_err(Error::core)?;
    let mut hashes = BTreeMap::new();
    for (name, path) in &files {
        hashes.insert(*name, formats::sha256_file(path)?);
    }
    let world_manifest = json!({
        "config": settings,
        "entities": { "themes": layout.themes, "parents": layout.parents, "brands": layout.brands, "styles": layout.styles },
        "impressions": world.interactions.len(),
        "clicks": world.interactions.iter().filter(|i| i.label).count(),
        "bayes_auc_all": bayes_all,
        "bayes_auc_test": bayes_test,
        "default_split": { "test_tail": defaults::TEST_TAIL, "train_window": defaults::TRAIN_WINDOW },
        "files": hashes,
    });
    let wm = a.out.join("world_manifest.json");
    write_json(&wm, &world_manifest)?;
    for (_, path) in &files {
        manifest.output(path)?;
    }
    manifest.output(&wm)?;
    manifest.finish(&manifest_path(&a.common.manifest, a.out.join("manifest.json")))?;
    let summary = format!(
        "wrote {} impressions, {} triples; Bayes-oracle AUC {:.4} (all) {:.4} (default test split)",
        interactions.len(),
        triples.len(),
        bayes_all,
        bayes_test
    );
    Ok(done(res, summary))
}

// ----------------------------------------------------------- build-simgraph

#[derive(Debug, Serialize)]
struct SimgraphSettings {
    interactions: PathBuf,
    profiles: PathBuf,
    out: PathBuf,
    top_k: usize,
    max_behaviors: usize,
    test_tail: usize,
    train_window: usize,
    negatives: usize,
    seed: u64,
}

fn build_simgraph(a: BuildSimgraphArgs) -> Result<Outcome> {
    let mut res = Resolver::load(a.common.config.as_deref())?;
    let f = res.file().clone();
    let s = SimgraphSettings {
        interactions: a.interactions.clone(),
        profiles: a.profiles.clone(),
        out: a.out.clone(),
        top_k: res.pick("top_k", "--top-k", a.top_k, f.top_k, defaults::TOP_K),
        max_behaviors: res.pick("max_behaviors", "--max-behaviors", a.max_behaviors, f.max_behaviors, defaults::MAX_BEHAVIORS),
        test_tail: res.pick("test_tail", "--test-tail", a.test_tail, f.test_tail, defaults::TEST_TAIL),
        train_window: res.pick("train_window", "--train-window", a.train_window, f.train_window, defaults::TRAIN_WINDOW),
        negatives: res.pick("negatives", "--negatives", a.negatives, f.negatives, 0),
        seed: res.pick("seed", "--seed", a.seed, f.seed, defaults::SEED),
    };
    for (key, v) in [("top_k", s.top_k), ("max_behaviors", s.max_behaviors), ("test_tail", s.test_tail), ("train_window", s.train_window)] {
        if v == 0 {
            return Err(res.invalid(key, &v, "must be at least 1"));
        }
    }
    let mut manifest = ManifestBuilder::new("build-simgraph", &s, Some(s.seed));
    let rows = parse_interactions(&s.interactions)?;
    let profile_rows = parse_profiles(&s.profiles)?;
    manifest.input(&s.interactions)?;
    manifest.input(&s.profiles)?;

    let mut catalog = Catalog::default();
    let profiles = group_profiles(&s.profiles, &profile_rows, &mut catalog)?;
    for u in &profiles.user_order {
        catalog.users.intern(u);
    }
    for i in &profiles.item_order {
        catalog.items.intern(i);
    }
    let log: Vec<Interaction> = rows
        .iter()
        .filter(|r| s.negatives == 0 || r.label)
        .map(|r| Interaction {
            user: UserId(catalog.users.intern(&r.user)),
            item: ItemId(catalog.items.intern(&r.item)),
            timestamp: r.timestamp,
            label: r.label,
        })
        .collect();
    let user_profile = |u: UserId, c: &Catalog| profiles.users.get(c.users.name(u.0)).cloned().unwrap_or_default();
    let item_profile = |i: ItemId, c: &Catalog| profiles.items.get(c.items.name(i.0)).cloned().unwrap_or_default();

    let mut instances = build_instances(&log, s.max_behaviors);
    for inst in &mut instances {
        inst.user_profile = user_profile(inst.user, &catalog);
        inst.target_profile = item_profile(inst.target, &catalog);
    }
    let mut split = chronological_split(instances, s.test_tail, s.train_window);
    let mut short_pools = 0;
    if s.negatives > 0 {
        let all_items: BTreeSet<ItemId> = (0..catalog.items.len() as u32).map(ItemId).collect();
        let item_profiles: BTreeMap<ItemId, _> = all_items.iter().map(|&i| (i, item_profile(i, &catalog))).collect();
        let mut interacted: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for r in &rows {
            let (u, i) = (catalog.users.get(&r.user).unwrap(), catalog.items.get(&r.item).unwrap());
            interacted.entry(UserId(u)).or_default().insert(ItemId(i));
        }
        for (part, salt) in [(&mut split.train, 1u64), (&mut split.test, 2u64)] {
            let sample = negative_sample(&part.instances, &all_items, &interacted, &item_profiles, s.negatives, s.seed ^ salt)
                .map_err(|e| Error::Config(e.to_string()))?;
            short_pools += sample.short_pools;
            part.instances = sample.instances;
        }
    }

    let matrix = InteractionMatrix::from_clicks(catalog.users.len(), catalog.items.len(), &split.graph_source.instances);
    let graph = build_sim_graph(&matrix, s.top_k);
    let edges: Vec<SimEdgeRow> = graph
        .edges()
        .map(|(i, j, score)| SimEdgeRow {
            item: catalog.items.name(i.0).to_owned(),
            neighbor: catalog.items.name(j.0).to_owned(),
            score,
        })
        .collect();
    let sim_path = s.out.join("simgraph.tsv");
    formats::write_simgraph(&sim_path, &edges)?;
    manifest.output(&sim_path)?;
    for (name, part) in [("train", &split.train), ("test", &split.test), ("graph_source", &split.graph_source)] {
        let records: Vec<_> = part.instances.iter().map(|i| catalog.instance_to_record(i)).collect();
        let path = s.out.join(format!("{name}.jsonl"));
        write_jsonl(&path, &records)?;
        manifest.output(&path)?;
    }
    manifest.finish(&manifest_path(&a.common.manifest, s.out.join("manifest.json")))?;
    let mut summary = format!(
        "{} similarity edges over {} items; {} train / {} test / {} graph-source instances",
        edges.len(),
        catalog.items.len(),
        split.train.instances.len(),
        split.test.instances.len(),
        split.graph_source.instances.len()
    );
    if short_pools > 0 {
        write!(summary, "; {short_pools} positives had fewer eligible negatives than requested").unwrap();
    }
    Ok(done(res, summary))
}

// ------------------------------------------------------------ extract-paths

#[derive(Debug, Serialize)]
struct ExtractSettings {
    simgraph: PathBuf,
    triples: PathBuf,
    profiles: PathBuf,
    instances: PathBuf,
    out: PathBuf,
    max_hops_cf: usize,
    max_hops_kg: usize,
    k_cf: usize,
    k_kg: usize,
    max_path_len: usize,
    /// Does not affect outputs, so it is left out of the manifest.
    #[serde(skip)]
    threads: usize,
}

/// Graphs and instances with ids assigned, ready for extraction.
pub struct ExtractionInput {
    pub catalog: Catalog,
    pub sim: SimGraph,
    pub kg: KnowledgeGraph,
    pub instances: Vec<Instance>,
}

pub fn load_extraction_input(simgraph: &Path, triples: &Path, profiles: &Path, instances: &Path) -> Result<ExtractionInput> {
    let mut catalog = Catalog::default();
    let profile_rows = parse_profiles(profiles)?;
    let grouped = group_profiles(profiles, &profile_rows, &mut catalog)?;
    for i in &grouped.item_order {
        catalog.items.intern(i);
    }
    let edges = parse_simgraph(simgraph)?;
    for e in &edges {
        catalog.items.intern(&e.item);
        catalog.items.intern(&e.neighbor);
    }
    let records = read_instances(instances)?;
    let instances = records
        .iter()
        .map(|r| catalog.instance_from_record(r, Mode::Grow, false))
        .collect::<Result<Vec<_>>>()?;
    let sim = SimGraph::from_edges(
        edges.iter().map(|e| (ItemId(catalog.items.get(&e.item).unwrap()), ItemId(catalog.items.get(&e.neighbor).unwrap()), e.score)),
    )
    .map_err(|e| Error::Invalid(format!("{}: {e}", simgraph.display())))?;
    let triple_rows = parse_triples(triples)?;
    let node = |name: &str, c: &mut Catalog| match c.items.get(name) {
        Some(i) => KgNode::Item(ItemId(i)),
        None => KgNode::Entity(mtbrn_core::data::EntityId(c.entities.intern(name))),
    };
    let mut kg_triples = Vec::with_capacity(triple_rows.len());
    for t in &triple_rows {
        let head = node(&t.head, &mut catalog);
        let relation = mtbrn_core::data::RelationId(catalog.relations.intern(&t.relation));
        let tail = node(&t.tail, &mut catalog);
        kg_triples.push(Triple { head, relation, tail });
    }
    Ok(ExtractionInput { catalog, sim, kg: KnowledgeGraph::from_triples(kg_triples), instances })
}

/// Extracts on `threads` workers over contiguous chunks, merged in order.
pub fn extract_parallel(input: &ExtractionInput, config: &ExtractConfig, threads: usize) -> Vec<PathSet> {
    let n = input.instances.len();
    let chunk = n.div_ceil(threads.max(1)).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = input
            .instances
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|i| extract_path_set(i, &input.sim, &input.kg, config)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("extraction worker panicked")).collect()
    })
}

fn extract_paths(a: ExtractPathsArgs) -> Result<Outcome> {
    let mut res = Resolver::load(a.common.config.as_deref())?;
    let f = res.file().clone();
    let s = ExtractSettings {
        simgraph: a.simgraph.clone(),
        triples: a.triples.clone(),
        profiles: a.profiles.clone(),
        instances: a.instances.clone(),
        out: a.out.clone(),
        max_hops_cf: res.pick("max_hops_cf", "--max-hops-cf", a.max_hops_cf, f.max_hops_cf, defaults::MAX_HOPS),
        max_hops_kg: res.pick("max_hops_kg", "--max-hops-kg", a.max_hops_kg, f.max_hops_kg, defaults::MAX_HOPS),
        k_cf: res.pick("k_cf", "--k-cf", a.k_cf, f.k_cf, defaults::K_PATHS),
        k_kg: res.pick("k_kg", "--k-kg", a.k_kg, f.k_kg, defaults::K_PATHS),
        max_path_len: res.pick("max_path_len", "--max-path-len", a.max_path_len, f.max_path_len, defaults::MAX_PATH_LEN),
        threads: res.pick("threads", "--threads", a.threads, f.threads, 1),
    };
    for (key, v) in [("max_hops_cf", s.max_hops_cf), ("max_hops_kg", s.max_hops_kg), ("k_cf", s.k_cf), ("k_kg", s.k_kg), ("threads", s.threads)] {
        if v == 0 {
            return Err(res.invalid(key, &v, "must be at least 1"));
        }
    }
    if s.max_path_len < 3 {
        return Err(res.invalid("max_path_len", &s.max_path_len, "must be at least 3 (one hop)"));
    }
    for (key, hops) in [("max_hops_cf", s.max_hops_cf), ("max_hops_kg", s.max_hops_kg)] {
        let explicit = res.source(key) != crate::config::Source::Default;
        if explicit && 2 * hops + 1 > s.max_path_len {
            return Err(res.conflict(
                (key, &hops),
                ("max_path_len", &s.max_path_len),
                "a path with that many hops needs 2 * hops + 1 tokens",
            ));
        }
    }
    let config = ExtractConfig {
        max_hops_cf: s.max_hops_cf,
        max_hops_kg: s.max_hops_kg,
        k_cf: s.k_cf,
        k_kg: s.k_kg,
        max_path_len: s.max_path_len,
    };
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut manifest = ManifestBuilder::new("extract-paths", &s, None);
    let input = load_extraction_input(&s.simgraph, &s.triples, &s.profiles, &s.instances)?;
    for p in [&s.simgraph, &s.triples, &s.profiles, &s.instances] {
        manifest.input(p)?;
    }
    let sets = extract_parallel(&input, &config, s.threads);
    let records: Vec<_> = sets.iter().enumerate().map(|(k, set)| input.catalog.path_set_to_record(k, set)).collect();
    write_jsonl(&s.out, &records)?;
    manifest.output(&s.out)?;
    manifest.finish(&manifest_path(&a.common.manifest, sibling_manifest(&s.out)))?;
    let cf: usize = sets.iter().map(|p| p.cf.len()).sum();
    let kg: usize = sets.iter().map(|p| p.kg.len()).sum();
    Ok(done(res, format!("{} instances: {cf} similarity-graph paths, {kg} knowledge-graph paths", sets.len())))
}

// -------------------------------------------------------------------- train

#[derive(Debug, Serialize)]
struct TrainSettings {
    instances: PathBuf,
    paths: PathBuf,
    out: PathBuf,
    variant: String,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    init_range: f64,
    embedding_dim: usize,
    hidden: usize,
    mlp_hidden: [usize; 3],
    seed: u64,
}

/// Instances and aligned path sets, with ids from `catalog`.
pub fn load_examples(
    catalog: &mut Catalog,
    instances: &Path,
    paths: &Path,
    mode: Mode,
    with_features: bool,
) -> Result<(Vec<Instance>, Vec<PathSet>)> {
    let records = read_instances(instances)?;
    let path_records = read_paths(paths)?;
    if records.len() != path_records.len() {
        return Err(Error::Invalid(format!(
            "{} has {} instances but {} has {} path records",
            instances.display(),
            records.len(),
            paths.display(),
            path_records.len()
        )));
    }
    let inst = records
        .iter()
        .map(|r| catalog.instance_from_record(r, mode, with_features))
        .collect::<Result<Vec<_>>>()?;
    let sets = path_records
        .iter()
        .map(|r| catalog.path_set_from_record(r, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok((inst, sets))
}

fn examples<'a>(instances: &'a [Instance], sets: &'a [PathSet]) -> Vec<Example<'a>> {
    instances.iter().zip(sets).map(|(instance, paths)| Example { instance, paths }).collect()
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let mut res = Resolver::load(a.common.config.as_deref())?;
    let f = res.file().clone();
    let mlp_flag = a.mlp_hidden.as_ref().map(|v| [v[0], v[1], v[2]]);
    let s = TrainSettings {
        instances: a.instances.clone(),
        paths: a.paths.clone(),
        out: a.out.clone(),
        variant: res.pick("variant", "--variant", a.variant.clone(), f.variant.clone(), "full".to_owned()),
        epochs: res.pick("epochs", "--epochs", a.epochs, f.epochs, defaults::EPOCHS),
        batch_size: res.pick("batch_size", "--batch-size", a.batch_size, f.batch_size, defaults::BATCH_SIZE),
        learning_rate: res.pick("learning_rate", "--learning-rate", a.learning_rate, f.learning_rate, defaults::LEARNING_RATE),
        init_range: res.pick("init_range", "--init-range", a.init_range, f.init_range, DEFAULT_INIT_RANGE),
        embedding_dim: res.pick("embedding_dim", "--embedding-dim", a.embedding_dim, f.embedding_dim, defaults::EMBEDDING_DIM),
        hidden: res.pick("hidden", "--hidden", a.hidden, f.hidden, defaults::HIDDEN),
        mlp_hidden: res.pick("mlp_hidden", "--mlp-hidden", mlp_flag, f.mlp_hidden, defaults::MLP_HIDDEN),
        seed: res.pick("seed", "--seed", a.seed, f.seed, defaults::SEED),
    };
    let variant = ModelVariant::parse(&s.variant).ok_or_else(|| res.invalid("variant", &s.variant, "is not a known variant"))?;
    if s.batch_size == 0 {
        return Err(res.invalid("batch_size", &s.batch_size, "must be at least 1"));
    }
    if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
        return Err(res.invalid("learning_rate", &s.learning_rate, "must be positive"));
    }
    if !(s.init_range > 0.0 && s.init_range.is_finite()) {
        return Err(res.invalid("init_range", &s.init_range, "must be positive"));
    }
    if s.embedding_dim == 0 || s.hidden == 0 || s.mlp_hidden.contains(&0) {
        return Err(Error::Config("embedding_dim, hidden, and mlp_hidden must be positive".into()));
    }
    if s.embedding_dim > 2 * s.hidden {
        return Err(res.conflict(
            ("embedding_dim", &s.embedding_dim),
            ("hidden", &s.hidden),
            "the baselines pad a behavior vector of embedding_dim into a block of 2 * hidden",
        ));
    }
    let mut manifest = ManifestBuilder::new("train", &s, Some(s.seed));
    let mut catalog = Catalog::default();
    let (instances, sets) = load_examples(&mut catalog, &s.instances, &s.paths, Mode::Grow, true)?;
    manifest.input(&s.instances)?;
    manifest.input(&s.paths)?;
    let tc = TrainConfig {
        batch_size: s.batch_size,
        epochs: s.epochs,
        seed: s.seed,
        init_range: s.init_range,
        learning_rate: s.learning_rate,
        epsilon: DEFAULT_EPSILON,
        variant,
    };
    let hyper = Hyperparameters {
        embedding_dim: s.embedding_dim,
        hidden: s.hidden,
        mlp_hidden: s.mlp_hidden,
        batch_size: tc.batch_size,
        epochs: tc.epochs,
        seed: tc.seed,
        init_range: tc.init_range,
        learning_rate: tc.learning_rate,
        epsilon: tc.epsilon,
    };
    let dims = model_config(&hyper, &catalog);
    let mut params = init_params(&tc, dims).map_err(Error::core)?;
    let ex = examples(&instances, &sets);
    let log = train_with(&mut params, &ex, &tc, |r| {
        eprintln!("epoch {} step {} mean loss {:.6}", r.epoch, r.step, r.mean_loss)
    })
    .map_err(Error::core)?;
    let mut csv = String::from("epoch,step,mean_loss,worker\n");
    for r in &log {
        writeln!(csv, "{},{},{},0", r.epoch, r.step, r.mean_loss).unwrap();
    }
    let ckpt_path = s.out.join("checkpoint.json");
    let log_path = s.out.join("loss_log.csv");
    Checkpoint::from_model(&params, variant, hyper, catalog).save(&ckpt_path)?;
    write_text(&log_path, &csv)?;
    manifest.output(&ckpt_path)?;
    manifest.output(&log_path)?;
    manifest.finish(&manifest_path(&a.common.manifest, s.out.join("manifest.json")))?;
    let last = log.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    let first = log.first().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    Ok(done(res, format!("trained {variant} on {} instances: loss {first:.6} -> {last:.6}", instances.len())))
}

// ----------------------------------------------------------------- evaluate

#[derive(Debug, Serialize)]
struct EvaluateSettings {
    checkpoint: PathBuf,
    instances: PathBuf,
    paths: PathBuf,
    out: PathBuf,
    format: &'static str,
    predictions: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateReport {
    pub variant: String,
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes_auc: Option<f64>,
}

fn read_ground_truth(path: &Path) -> Result<HashMap<(String, u64), f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (k, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::schema(path, k + 1, None, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let ts = f[2].parse().map_err(|_| Error::schema(path, k + 1, Some(3), "timestamp is not an integer"))?;
        let p: f64 = f[3].parse().map_err(|_| Error::schema(path, k + 1, Some(4), "probability is not a number"))?;
        out.insert((f[0].to_owned(), ts), p);
    }
    Ok(out)
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome> {
    let res = Resolver::load(a.common.config.as_deref())?;
    let s = EvaluateSettings {
        checkpoint: a.checkpoint.clone(),
        instances: a.instances.clone(),
        paths: a.paths.clone(),
        out: a.out.clone(),
        format: match a.format {
            Format::Json => "json",
            Format::Csv => "csv",
        },
        predictions: a.predictions.clone(),
        ground_truth: a.ground_truth.clone(),
    };
    let mut manifest = ManifestBuilder::new("evaluate", &s, None);
    let ckpt = Checkpoint::load(&s.checkpoint)?;
    let variant = ckpt.variant()?;
    let params = ckpt.to_model()?;
    let mut catalog = ckpt.vocab.clone();
    let (instances, sets) = load_examples(&mut catalog, &s.instances, &s.paths, Mode::Frozen, true)?;
    for p in [&s.checkpoint, &s.instances, &s.paths] {
        manifest.input(p)?;
    }
    let preds = predict_all(&params, &examples(&instances, &sets), variant, 256).map_err(Error::core)?;
    let scores: Vec<(f64, bool)> = preds.iter().zip(&instances).map(|(p, i)| (*p, i.label)).collect();
    let report = eval::evaluate(&scores).map_err(Error::core)?;
    let bayes_auc = match &s.ground_truth {
        Some(gt_path) => {
            let truth = read_ground_truth(gt_path)?;
            manifest.input(gt_path)?;
            let records = read_instances(&s.instances)?;
            let mut oracle = Vec::with_capacity(records.len());
            for r in &records {
                let p = truth.get(&(r.user.clone(), r.timestamp)).ok_or_else(|| {
                    Error::Invalid(format!("no ground truth for user {} at time {}", r.user, r.timestamp))
                })?;
                oracle.push((*p, r.label == 1));
            }
            eval::auc(&oracle).ok()
        }
        None => None,
    };
    let report = EvaluateReport {
        variant: variant.name().to_owned(),
        auc: report.auc,
        logloss: report.logloss,
        n_pos: report.n_pos,
        n_neg: report.n_neg,
        bayes_auc,
    };
    match a.format {
        Format::Json => write_json(&s.out, &report)?,
        Format::Csv => {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let text = format!(
                "variant,auc,logloss,n_pos,n_neg,bayes_auc\n{},{},{},{},{},{}\n",
                report.variant,
                opt(report.auc),
                report.logloss,
                report.n_pos,
                report.n_neg,
                opt(report.bayes_auc)
            );
            write_text(&s.out, &text)?;
        }
    }
    manifest.output(&s.out)?;
    if let Some(p) = &s.predictions {
        let mut text = String::from("instance_idx,prediction,label\n");
        for (k, (pred, label)) in scores.iter().enumerate() {
            writeln!(text, "{k},{pred},{}", u8::from(*label)).unwrap();
        }
        write_text(p, &text)?;
        manifest.output(p)?;
    }
    manifest.finish(&manifest_path(&a.common.manifest, sibling_manifest(&s.out)))?;
    let summary = serde_json::to_string(&report).expect("report serializes");
    Ok(done(res, summary))
}

// ------------------------------------------------------------ analyze-paths

#[derive(Debug, Serialize)]
struct BucketOut {
    key: usize,
    instances: usize,
    clicks: usize,
    click_rate: f64,
}

#[derive(Debug, Serialize)]
struct GraphStatsOut {
    count_spearman: Option<f64>,
    length_spearman: Option<f64>,
    by_count: Vec<BucketOut>,
    by_length: Vec<BucketOut>,
}

fn buckets_out(b: &[Bucket]) -> Vec<BucketOut> {
    b.iter().map(|b| BucketOut { key: b.key, instances: b.instances, clicks: b.clicks, click_rate: b.click_rate }).collect()
}

fn graph_stats_out(g: &GraphPathStats) -> GraphStatsOut {
    GraphStatsOut {
        count_spearman: g.count_spearman,
        length_spearman: g.length_spearman,
        by_count: buckets_out(&g.by_count),
        by_length: buckets_out(&g.by_length),
    }
}

fn analyze_paths(a: AnalyzePathsArgs) -> Result<Outcome> {
    let res = Resolver::load(a.common.config.as_deref())?;
    #[derive(Serialize)]
    struct Settings<'a> {
        instances: &'a Path,
        paths: &'a Path,
        out: &'a Path,
    }
    let mut manifest =
        ManifestBuilder::new("analyze-paths", &Settings { instances: &a.instances, paths: &a.paths, out: &a.out }, None);
    let mut catalog = Catalog::default();
    let (instances, sets) = load_examples(&mut catalog, &a.instances, &a.paths, Mode::Grow, false)?;
    manifest.input(&a.instances)?;
    manifest.input(&a.paths)?;
    let report = path_validity_analysis(&instances, &sets).map_err(Error::core)?;
    let json_out = json!({ "cf": graph_stats_out(&report.cf), "kg": graph_stats_out(&report.kg) });
    let mut csv = String::from("graph,grouping,key,instances,clicks,click_rate\n");
    for (graph, stats) in [("cf", &report.cf), ("kg", &report.kg)] {
        for (grouping, buckets) in [("path_count", &stats.by_count), ("mean_path_length", &stats.by_length)] {
            for b in buckets.iter() {
                writeln!(csv, "{graph},{grouping},{},{},{},{}", b.key, b.instances, b.clicks, b.click_rate).unwrap();
            }
        }
    }
    let json_path = a.out.join("path_stats.json");
    let csv_path = a.out.join("path_buckets.csv");
    write_json(&json_path, &json_out)?;
    write_text(&csv_path, &csv)?;
    manifest.output(&json_path)?;
    manifest.output(&csv_path)?;
    manifest.finish(&manifest_path(&a.common.manifest, a.out.join("manifest.json")))?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    let summary = format!(
        "Spearman(path count, click rate): cf {} kg {}",
        fmt(report.cf.count_spearman),
        fmt(report.kg.count_spearman)
    );
    Ok(done(res, summary))
}

// --------------------------------------------------------------- grad-check

fn grad_check(a: GradCheckArgs) -> Result<Outcome> {
    let mut res = Resolver::load(a.common.config.as_deref())?;
    let f = res.file().clone();
    let variant_name = res.pick("variant", "--variant", a.variant.clone(), f.variant.clone(), "full".to_owned());
    let seed = res.pick("seed", "--seed", a.seed, f.seed, defaults::SEED);
    let tolerance = res.pick("tolerance", "--tolerance", a.tolerance, f.tolerance, defaults::GRAD_TOLERANCE);
    let step = res.pick("step", "--step", a.step, f.step, defaults::GRAD_STEP);
    let variant = ModelVariant::parse(&variant_name).ok_or_else(|| res.invalid("variant", &variant_name, "is not a known variant"))?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(res.invalid("step", &step, "must be positive"));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(res.invalid("tolerance", &tolerance, "must be positive"));
    }
    let settings = json!({ "variant": variant_name, "seed": seed, "tolerance": tolerance, "step": step, "out": a.out });
    let mut manifest = ManifestBuilder::new("grad-check", &settings, Some(seed));
    let mut problem = micro_problem(seed);
    let report = check_model(&mut problem, variant, step, tolerance).map_err(Error::core)?;
    let params: Vec<_> = report
        .params
        .iter()
        .map(|p| json!({ "name": p.name, "max_rel_error": p.max_rel_error, "checked": p.checked, "kinks": p.kinks }))
        .collect();
    let out = json!({
        "variant": variant_name,
        "seed": seed,
        "step": step,
        "tolerance": tolerance,
        "max_rel_error": report.max_rel_error,
        "kinks_excluded": report.kinks,
        "passed": report.passed,
        "params": params,
    });
    write_json(&a.out, &out)?;
    manifest.output(&a.out)?;
    manifest.finish(&manifest_path(&a.common.manifest, sibling_manifest(&a.out)))?;
    let summary = format!(
        "max relative error {:.3e} ({} kink elements excluded)\n{} at tolerance {:e}",
        report.max_rel_error,
        report.kinks,
        if report.passed { "PASS" } else { "FAIL" },
        tolerance
    );
    Ok(Outcome { warnings: res.warnings, summary, failed: !report.passed })
}
