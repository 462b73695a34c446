//! The multiplex target-behavior relation network.
//!
//! A forward pass over a minibatch runs, in order:
//!
//! 1. profile embedding: each feature field's vector, scaled by the feature
//!    value for numerical fields, concatenated in schema order;
//! 2. path encoding: every path's token embeddings are read by a forward and
//!    a backward peephole LSTM, and the two final hidden states concatenated;
//!    one encoder per graph, shared across that graph's paths;
//! 3. path fusion: element-wise products of every pair of path encodings of
//!    an instance, drawn from both graphs together;
//! 4. activation: a softmax over `hᵢᵀ W x_v` within each path set, weighting
//!    the set's encodings into one vector;
//! 5. a three-layer ReLU perceptron over
//!    `x_u ⊕ x_v ⊕ A_cf ⊕ A_kg ⊕ A_fu` and a sigmoid output unit.
//!
//! Paths of equal token count are encoded together as the rows of one
//! matrix, so the recurrence always runs over the true length. Weight
//! matrices are stored input-major (`in x out`) and applied as `x · W`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{FeatureData, FeatureKind, FeatureValue, Instance, ItemId};
use crate::pathfinder::{Path, PathSet, PathToken};
use crate::tensor::{ParamId, ParamRole, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    InvalidConfig(String),
    UnknownField { side: Side, field: u32 },
    FieldKindMismatch { side: Side, field: u32 },
    EmptyBatch,
    EmptySequence,
    MissingParameter(String),
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::UnknownField { side, field } => write!(f, "unknown {} feature field {field}", side.name()),
            ModelError::FieldKindMismatch { side, field } => {
                write!(f, "{} feature field {field} has the wrong kind", side.name())
            }
            ModelError::EmptyBatch => write!(f, "empty batch"),
            ModelError::EmptySequence => write!(f, "cannot encode an empty sequence"),
            ModelError::MissingParameter(name) => write!(f, "parameter `{name}` missing"),
            ModelError::ParameterShape { name, expected, found } => {
                write!(f, "parameter `{name}` has shape {found:?}, model expects {expected:?}")
            }
        }
    }
}

type Result<T> = core::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelVariant {
    Full,
    CfOnly,
    KgOnly,
    NoFusion,
    AvgPoolBaseline,
    ProdAttnBaseline,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Full,
        ModelVariant::CfOnly,
        ModelVariant::KgOnly,
        ModelVariant::NoFusion,
        ModelVariant::AvgPoolBaseline,
        ModelVariant::ProdAttnBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::CfOnly => "cf_only",
            ModelVariant::KgOnly => "kg_only",
            ModelVariant::NoFusion => "no_fusion",
            ModelVariant::AvgPoolBaseline => "avgpool_baseline",
            ModelVariant::ProdAttnBaseline => "prodattn_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn uses_cf(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::CfOnly | ModelVariant::NoFusion)
    }

    fn uses_kg(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::KgOnly | ModelVariant::NoFusion)
    }

    fn uses_fusion(self) -> bool {
        self == ModelVariant::Full
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One feature field of a profile schema. Field ids index the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub kind: FeatureKind,
    /// Number of known tokens for sparse fields; ignored for numerical ones.
    pub vocab_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: [usize; 3],
    pub user_fields: Vec<FieldSpec>,
    pub item_fields: Vec<FieldSpec>,
    pub n_items: u32,
    pub n_entities: u32,
    pub n_relations: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 {
            return Err(ModelError::InvalidConfig("embedding and hidden sizes must be positive".into()));
        }
        if self.embedding_dim > 2 * self.hidden {
            // the behavior-pooling baselines pad a d-wide block to 2H
            return Err(ModelError::InvalidConfig("embedding size must not exceed twice the hidden size".into()));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("MLP layers must be non-empty".into()));
        }
        if self.item_fields.is_empty() {
            return Err(ModelError::InvalidConfig("the item profile needs at least one field".into()));
        }
        Ok(())
    }

    pub fn user_dim(&self) -> usize {
        self.user_fields.len() * self.embedding_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_fields.len() * self.embedding_dim
    }

    pub fn path_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.user_dim() + self.item_dim() + 3 * self.path_dim()
    }
}

/// Embedding partitions. Every sparse table has one extra trailing row for
/// ids outside its vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub user_fields: Vec<ParamId>,
    pub item_fields: Vec<ParamId>,
    pub items: ParamId,
    pub entities: ParamId,
    pub relations: ParamId,
    /// Single row shared by all similarity-score tokens.
    pub score: ParamId,
}

/// Peephole LSTM cell weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub w_ci: ParamId,
    pub b_i: ParamId,
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub w_cf: ParamId,
    pub b_f: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub b_c: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub w_co: ParamId,
    pub b_o: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathEncoder {
    Cf,
    Kg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// All trainable parameters plus the ids that address them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingTable,
    pub encoder_cf: BiLstmEncoder,
    pub encoder_kg: BiLstmEncoder,
    pub attn_cf: ParamId,
    pub attn_kg: ParamId,
    pub attn_fu: ParamId,
    pub mlp: [DenseLayer; 3],
    pub output: DenseLayer,
}

/// A labeled instance with its extracted paths.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub instance: &'a Instance,
    pub paths: &'a PathSet,
}

fn add_zeros(store: &mut ParamStore, name: &str, role: ParamRole, rows: usize, cols: usize) -> Result<ParamId> {
    Ok(store.add(name, role, Tensor::zeros(vec![rows, cols]))?)
}

fn add_cell(store: &mut ParamStore, prefix: &str, d: usize, h: usize) -> Result<LstmCell> {
    let mut w = |n: &str, rows: usize| add_zeros(store, &format!("{prefix}.{n}"), ParamRole::Weight, rows, h);
    let (w_xi, w_hi, w_ci) = (w("w_xi", d)?, w("w_hi", h)?, w("w_ci", h)?);
    let (w_xf, w_hf, w_cf) = (w("w_xf", d)?, w("w_hf", h)?, w("w_cf", h)?);
    let (w_xc, w_hc) = (w("w_xc", d)?, w("w_hc", h)?);
    let (w_xo, w_ho, w_co) = (w("w_xo", d)?, w("w_ho", h)?, w("w_co", h)?);
    let mut b = |n: &str| add_zeros(store, &format!("{prefix}.{n}"), ParamRole::Bias, 1, h);
    Ok(LstmCell {
        w_xi,
        w_hi,
        w_ci,
        b_i: b("b_i")?,
        w_xf,
        w_hf,
        w_cf,
        b_f: b("b_f")?,
        w_xc,
        w_hc,
        b_c: b("b_c")?,
        w_xo,
        w_ho,
        w_co,
        b_o: b("b_o")?,
    })
}

fn sparse_rows(vocab: u32) -> usize {
    vocab as usize + 1
}

fn vocab_row(id: u32, vocab: u32) -> usize {
    id.min(vocab) as usize
}

impl ModelParams {
    /// Allocates every parameter at zero; see `train::init_params` for
    /// random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let h = config.hidden;
        let mut store = ParamStore::new();
        let field_tables = |side: &str, fields: &[FieldSpec], store: &mut ParamStore| -> Result<Vec<ParamId>> {
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let rows = match f.kind {
                        FeatureKind::Sparse => sparse_rows(f.vocab_size),
                        FeatureKind::Numerical => 1,
                    };
                    add_zeros(store, &format!("embedding.{side}.{i}"), ParamRole::Embedding, rows, d)
                })
                .collect()
        };
        let user_fields = field_tables("user", &config.user_fields, &mut store)?;
        let item_fields = field_tables("item", &config.item_fields, &mut store)?;
        let embeddings = EmbeddingTable {
            user_fields,
            item_fields,
            items: add_zeros(&mut store, "embedding.path_item", ParamRole::Embedding, sparse_rows(config.n_items), d)?,
            entities: add_zeros(
                &mut store,
                "embedding.path_entity",
                ParamRole::Embedding,
                sparse_rows(config.n_entities),
                d,
            )?,
            relations: add_zeros(
                &mut store,
                "embedding.path_relation",
                ParamRole::Embedding,
                sparse_rows(config.n_relations),
                d,
            )?,
            score: add_zeros(&mut store, "embedding.path_score", ParamRole::Embedding, 1, d)?,
        };
        let encoder_cf = BiLstmEncoder {
            forward: add_cell(&mut store, "encoder_cf.forward", d, h)?,
            backward: add_cell(&mut store, "encoder_cf.backward", d, h)?,
        };
        let encoder_kg = BiLstmEncoder {
            forward: add_cell(&mut store, "encoder_kg.forward", d, h)?,
            backward: add_cell(&mut store, "encoder_kg.backward", d, h)?,
        };
        let dv = config.item_dim();
        let attn_cf = add_zeros(&mut store, "attention_cf.w", ParamRole::Weight, 2 * h, dv)?;
        let attn_kg = add_zeros(&mut store, "attention_kg.w", ParamRole::Weight, 2 * h, dv)?;
        let attn_fu = add_zeros(&mut store, "attention_fu.w", ParamRole::Weight, 2 * h, dv)?;
        let mut width = config.mlp_input_dim();
        let mut layers = Vec::with_capacity(3);
        for (i, &units) in config.mlp_hidden.iter().enumerate() {
            layers.push(DenseLayer {
                weight: add_zeros(&mut store, &format!("mlp.{i}.w"), ParamRole::Weight, width, units)?,
                bias: add_zeros(&mut store, &format!("mlp.{i}.b"), ParamRole::Bias, 1, units)?,
            });
            width = units;
        }
        let output = DenseLayer {
            weight: add_zeros(&mut store, "output.w", ParamRole::Weight, width, 1)?,
            bias: add_zeros(&mut store, "output.b", ParamRole::Bias, 1, 1)?,
        };
        Ok(Self {
            config,
            store,
            embeddings,
            encoder_cf,
            encoder_kg,
            attn_cf,
            attn_kg,
            attn_fu,
            mlp: [layers[0], layers[1], layers[2]],
            output,
        })
    }

    /// Replaces parameter values by name, e.g. from a checkpoint. Every
    /// model parameter must be supplied with its exact shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>) -> Result<()> {
        let mut supplied: BTreeMap<&str, (&[usize], &[f64])> = BTreeMap::new();
        for (name, shape, data) in values {
            supplied.insert(name, (shape, data));
        }
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = self.store.get_mut(id);
            let (shape, data) = supplied
                .get(p.name.as_str())
                .ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
            if *shape != p.value.shape() || data.len() != p.value.len() {
                return Err(ModelError::ParameterShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: shape.to_vec(),
                });
            }
            p.value.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    fn fields(&self, side: Side) -> (&[FieldSpec], &[ParamId]) {
        match side {
            Side::User => (&self.config.user_fields, &self.embeddings.user_fields),
            Side::Item => (&self.config.item_fields, &self.embeddings.item_fields),
        }
    }

    /// Embeds one profile per row: `v₁x₁ ⊕ v₂x₂ ⊕ …` in schema order, with
    /// `x = 1` for sparse fields and a zero block for absent fields.
    pub fn embed_features(&self, tape: &mut Tape, side: Side, profiles: &[&[FeatureValue]]) -> Result<Var> {
        if profiles.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let (specs, tables) = self.fields(side);
        for profile in profiles {
            for fv in profile.iter() {
                let spec = specs
                    .get(fv.field.index())
                    .ok_or(ModelError::UnknownField { side, field: fv.field.0 })?;
                if spec.kind != fv.kind() {
                    return Err(ModelError::FieldKindMismatch { side, field: fv.field.0 });
                }
            }
        }
        let mut blocks = Vec::with_capacity(specs.len());
        for (f, (spec, &table)) in specs.iter().zip(tables).enumerate() {
            let entries = profiles
                .iter()
                .map(|profile| match profile.iter().find(|fv| fv.field.index() == f) {
                    Some(FeatureValue { data: FeatureData::Sparse(t), .. }) => {
                        (table, vocab_row(*t, spec.vocab_size), 1.0)
                    }
                    Some(FeatureValue { data: FeatureData::Numerical(x), .. }) => (table, 0, *x),
                    None => (table, 0, 0.0),
                })
                .collect();
            blocks.push(tape.lookup(&self.store, entries)?);
        }
        if blocks.is_empty() {
            return Ok(tape.constant(Tensor::zeros(vec![profiles.len(), 0]))?);
        }
        Ok(tape.concat_cols(&blocks)?)
    }

    fn token_entry(&self, token: &PathToken) -> (ParamId, usize, f64) {
        let e = &self.embeddings;
        let c = &self.config;
        match *token {
            PathToken::Item(i) => (e.items, vocab_row(i.0, c.n_items), 1.0),
            PathToken::Entity(x) => (e.entities, vocab_row(x.0, c.n_entities), 1.0),
            PathToken::Relation(r) => (e.relations, vocab_row(r.0, c.n_relations), 1.0),
            PathToken::Score(s) => (e.score, 0, s),
        }
    }

    /// Step inputs for paths of equal length: entry `t` is the `n x d`
    /// matrix of every path's `t`-th token embedding. Score tokens use the
    /// shared score row scaled by the score.
    pub fn embed_paths(&self, tape: &mut Tape, paths: &[&Path]) -> Result<Vec<Var>> {
        let len = paths.first().ok_or(ModelError::EmptyBatch)?.len();
        if paths.iter().any(|p| p.len() != len) {
            return Err(ModelError::InvalidConfig("paths embedded together must share a length".into()));
        }
        (0..len)
            .map(|t| {
                let entries = paths.iter().map(|p| self.token_entry(&p.tokens[t])).collect();
                Ok(tape.lookup(&self.store, entries)?)
            })
            .collect()
    }

    /// `[e₁; …; e_k]` for a single path, each `1 x d`.
    pub fn embed_path(&self, tape: &mut Tape, path: &Path) -> Result<Vec<Var>> {
        self.embed_paths(tape, &[path])
    }

    pub fn encoder(&self, which: PathEncoder) -> BiLstmEncoder {
        match which {
            PathEncoder::Cf => self.encoder_cf,
            PathEncoder::Kg => self.encoder_kg,
        }
    }

    /// Runs both directions over `steps` (each `n x d`) from zero state and
    /// returns `h_fwd ⊕ h_bwd` as an `n x 2H` matrix.
    pub fn encode_path(&self, tape: &mut Tape, which: PathEncoder, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let enc = self.encoder(which);
        let fwd = CellVars::load(tape, &self.store, &enc.forward)?.run(tape, steps.iter().copied())?;
        let bwd = CellVars::load(tape, &self.store, &enc.backward)?.run(tape, steps.iter().rev().copied())?;
        Ok(tape.concat_cols(&[fwd, bwd])?)
    }

    /// Encodes every `(segment, path)` row; output rows follow input order.
    fn encode_rows(&self, tape: &mut Tape, which: PathEncoder, rows: &[(usize, &Path)]) -> Result<Option<Var>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, (_, p)) in rows.iter().enumerate() {
            if p.is_empty() {
                return Err(ModelError::EmptySequence);
            }
            by_len.entry(p.len()).or_default().push(k);
        }
        let mut parts = Vec::with_capacity(by_len.len());
        let mut position = vec![0usize; rows.len()];
        let mut offset = 0;
        for members in by_len.values() {
            let paths: Vec<&Path> = members.iter().map(|&k| rows[k].1).collect();
            let steps = self.embed_paths(tape, &paths)?;
            parts.push(self.encode_path(tape, which, &steps)?);
            for (r, &k) in members.iter().enumerate() {
                position[k] = offset + r;
            }
            offset += members.len();
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        if position.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(Some(stacked));
        }
        Ok(Some(tape.gather_rows(stacked, position)?))
    }

    /// Target-aware attention pooling. Row `r` of `h` belongs to segment
    /// `segments[r]`; segment `s` is scored against row `s` of `x_v`.
    /// Returns the pooled `n_segments x 2H` matrix and the attention weights.
    /// Segments without rows pool to zero.
    pub fn activate_paths(
        &self,
        tape: &mut Tape,
        h: Option<Var>,
        segments: &[usize],
        x_v: Var,
        attn: ParamId,
    ) -> Result<(Var, Option<Var>)> {
        let n_segments = tape.value(x_v).dims("activate_paths")?.0;
        let Some(h) = h else {
            let zeros = tape.constant(Tensor::zeros(vec![n_segments, self.config.path_dim()]))?;
            return Ok((zeros, None));
        };
        let w = tape.param(&self.store, attn)?;
        let wt = tape.transpose(w)?;
        let query = tape.matmul(x_v, wt)?;
        let per_row = tape.gather_rows(query, segments.to_vec())?;
        let prod = tape.mul(h, per_row)?;
        let logits = tape.row_sum(prod)?;
        let weights = tape.segment_softmax(logits, segments.to_vec())?;
        let weighted = tape.scale_rows(h, weights)?;
        let pooled = tape.segment_sum(weighted, segments.to_vec(), n_segments)?;
        Ok((pooled, Some(weights)))
    }

    /// `hᵢ ⊙ hⱼ` for every pair `i < j` of the rows of `h`.
    pub fn fuse_paths(&self, tape: &mut Tape, h: Var) -> Result<Option<Var>> {
        let k = tape.value(h).dims("fuse_paths")?.0;
        let (left, right): (Vec<usize>, Vec<usize>) = pair_indices(&(0..k).collect::<Vec<_>>()).into_iter().unzip();
        fuse_pairs(tape, h, left, right)
    }

    /// Probabilities for a minibatch as a `B x 1` column.
    pub fn forward(&self, tape: &mut Tape, batch: &[Example<'_>], variant: ModelVariant) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let b = batch.len();
        let user_profiles: Vec<&[FeatureValue]> = batch.iter().map(|e| e.instance.user_profile.as_slice()).collect();
        let item_profiles: Vec<&[FeatureValue]> = batch.iter().map(|e| e.instance.target_profile.as_slice()).collect();
        let x_u = self.embed_features(tape, Side::User, &user_profiles)?;
        let x_v = self.embed_features(tape, Side::Item, &item_profiles)?;

        let width = self.config.path_dim();
        let zeros = tape.constant(Tensor::zeros(vec![b, width]))?;
        let blocks = match variant {
            ModelVariant::AvgPoolBaseline | ModelVariant::ProdAttnBaseline => {
                let pooled = self.pool_behaviors(tape, batch, variant)?;
                [pooled, zeros, zeros]
            }
            _ => self.path_blocks(tape, batch, variant, x_v, zeros)?,
        };
        let input = tape.concat_cols(&[x_u, x_v, blocks[0], blocks[1], blocks[2]])?;
        let mut h = input;
        for layer in &self.mlp {
            h = self.dense(tape, h, layer)?;
            h = tape.relu(h)?;
        }
        let logit = self.dense(tape, h, &self.output)?;
        Ok(tape.sigmoid(logit)?)
    }

    fn dense(&self, tape: &mut Tape, x: Var, layer: &DenseLayer) -> Result<Var> {
        let w = tape.param(&self.store, layer.weight)?;
        let b = tape.param(&self.store, layer.bias)?;
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_row(xw, b)?)
    }

    fn path_blocks(
        &self,
        tape: &mut Tape,
        batch: &[Example<'_>],
        variant: ModelVariant,
        x_v: Var,
        zeros: Var,
    ) -> Result<[Var; 3]> {
        let cf_rows: Vec<(usize, &Path)> = if variant.uses_cf() {
            batch.iter().enumerate().flat_map(|(s, e)| e.paths.cf.iter().map(move |p| (s, p))).collect()
        } else {
            Vec::new()
        };
        let kg_rows: Vec<(usize, &Path)> = if variant.uses_kg() {
            batch.iter().enumerate().flat_map(|(s, e)| e.paths.kg.iter().map(move |p| (s, p))).collect()
        } else {
            Vec::new()
        };
        let h_cf = self.encode_rows(tape, PathEncoder::Cf, &cf_rows)?;
        let h_kg = self.encode_rows(tape, PathEncoder::Kg, &kg_rows)?;
        let cf_segs: Vec<usize> = cf_rows.iter().map(|r| r.0).collect();
        let kg_segs: Vec<usize> = kg_rows.iter().map(|r| r.0).collect();

        let a_cf = if variant.uses_cf() {
            self.activate_paths(tape, h_cf, &cf_segs, x_v, self.attn_cf)?.0
        } else {
            zeros
        };
        let a_kg = if variant.uses_kg() {
            self.activate_paths(tape, h_kg, &kg_segs, x_v, self.attn_kg)?.0
        } else {
            zeros
        };
        if !variant.uses_fusion() {
            return Ok([a_cf, a_kg, zeros]);
        }

        // rows of `all` are H_cf followed by H_kg; pair within each instance
        let all = match (h_cf, h_kg) {
            (Some(c), Some(k)) => Some(tape.concat_rows(&[c, k])?),
            (c, k) => c.or(k),
        };
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        for (r, &s) in cf_segs.iter().chain(&kg_segs).enumerate() {
            members[s].push(r);
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut fu_segs = Vec::new();
        for (s, rows) in members.iter().enumerate() {
            for (i, j) in pair_indices(rows) {
                left.push(i);
                right.push(j);
                fu_segs.push(s);
            }
        }
        let h_fu = match all {
            Some(all) => fuse_pairs(tape, all, left, right)?,
            None => None,
        };
        let a_fu = self.activate_paths(tape, h_fu, &fu_segs, x_v, self.attn_fu)?.0;
        Ok([a_cf, a_kg, a_fu])
    }

    /// Behavior summary for the two baselines, zero-padded to the path block width.
    fn pool_behaviors(&self, tape: &mut Tape, batch: &[Example<'_>], variant: ModelVariant) -> Result<Var> {
        let b = batch.len();
        let d = self.config.embedding_dim;
        let table = self.embeddings.items;
        let n_items = self.config.n_items;
        let mut entries = Vec::new();
        let mut targets = Vec::new();
        let mut segs = Vec::new();
        for (s, e) in batch.iter().enumerate() {
            let n = e.instance.behaviors.len();
            for &item in &e.instance.behaviors {
                let scale = match variant {
                    ModelVariant::AvgPoolBaseline => 1.0 / n as f64,
                    _ => 1.0,
                };
                entries.push((table, vocab_row(item.0, n_items), scale));
                targets.push((table, vocab_row(e.instance.target.0, n_items), 1.0));
                segs.push(s);
            }
        }
        let pooled = if entries.is_empty() {
            tape.constant(Tensor::zeros(vec![b, d]))?
        } else {
            let behaviors = tape.lookup(&self.store, entries)?;
            let weighted = if variant == ModelVariant::ProdAttnBaseline {
                let target = tape.lookup(&self.store, targets)?;
                let prod = tape.mul(behaviors, target)?;
                let logits = tape.row_sum(prod)?;
                let weights = tape.segment_softmax(logits, segs.clone())?;
                tape.scale_rows(behaviors, weights)?
            } else {
                behaviors
            };
            tape.segment_sum(weighted, segs, b)?
        };
        let pad = self.config.path_dim() - d;
        if pad == 0 {
            return Ok(pooled);
        }
        let zeros = tape.constant(Tensor::zeros(vec![b, pad]))?;
        Ok(tape.concat_cols(&[pooled, zeros])?)
    }

    /// Predicted click probabilities without recording a graph.
    pub fn predict_batch(&self, batch: &[Example<'_>], variant: ModelVariant) -> Result<Vec<f64>> {
        let mut tape = Tape::without_grad();
        let out = self.forward(&mut tape, batch, variant)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict(&self, example: Example<'_>, variant: ModelVariant) -> Result<f64> {
        Ok(self.predict_batch(&[example], variant)?[0])
    }

    /// Mean cross-entropy of `B x 1` predictions against labels.
    pub fn bce_loss(&self, tape: &mut Tape, predictions: Var, labels: &[bool]) -> Result<Var> {
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        Ok(tape.bce(predictions, &y)?)
    }

    /// Forward pass plus loss for one minibatch.
    pub fn loss(&self, tape: &mut Tape, batch: &[Example<'_>], variant: ModelVariant) -> Result<Var> {
        let preds = self.forward(tape, batch, variant)?;
        let labels: Vec<bool> = batch.iter().map(|e| e.instance.label).collect();
        self.bce_loss(tape, preds, &labels)
    }
}

fn pair_indices(rows: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            out.push((i, j));
        }
    }
    out
}

fn fuse_pairs(tape: &mut Tape, h: Var, left: Vec<usize>, right: Vec<usize>) -> Result<Option<Var>> {
    if left.is_empty() {
        return Ok(None);
    }
    let l = tape.gather_rows(h, left)?;
    let r = tape.gather_rows(h, right)?;
    Ok(Some(tape.mul(l, r)?))
}

/// Cell parameters placed on a tape once per encoding call.
struct CellVars {
    w_xi: Var,
    w_hi: Var,
    w_ci: Var,
    b_i: Var,
    w_xf: Var,
    w_hf: Var,
    w_cf: Var,
    b_f: Var,
    w_xc: Var,
    w_hc: Var,
    b_c: Var,
    w_xo: Var,
    w_ho: Var,
    w_co: Var,
    b_o: Var,
}

impl CellVars {
    fn load(tape: &mut Tape, store: &ParamStore, c: &LstmCell) -> Result<Self> {
        let mut p = |id| tape.param(store, id);
        Ok(Self {
            w_xi: p(c.w_xi)?,
            w_hi: p(c.w_hi)?,
            w_ci: p(c.w_ci)?,
            b_i: p(c.b_i)?,
            w_xf: p(c.w_xf)?,
            w_hf: p(c.w_hf)?,
            w_cf: p(c.w_cf)?,
            b_f: p(c.b_f)?,
            w_xc: p(c.w_xc)?,
            w_hc: p(c.w_hc)?,
            b_c: p(c.b_c)?,
            w_xo: p(c.w_xo)?,
            w_ho: p(c.w_ho)?,
            w_co: p(c.w_co)?,
            b_o: p(c.b_o)?,
        })
    }

    /// `x W_x + h W_h [+ c W_c] + b`; recurrent terms are skipped while the
    /// state is still the zero initial state.
    fn affine(
        tape: &mut Tape,
        x: Var,
        w_x: Var,
        h: Option<(Var, Var)>,
        c: Option<(Var, Var)>,
        b: Var,
    ) -> core::result::Result<Var, TensorError> {
        let mut acc = tape.matmul(x, w_x)?;
        for (s, w) in [h, c].into_iter().flatten() {
            let t = tape.matmul(s, w)?;
            acc = tape.add(acc, t)?;
        }
        tape.add_row(acc, b)
    }

    /// Final hidden state after reading `steps` in the given order.
    fn run(&self, tape: &mut Tape, steps: impl Iterator<Item = Var>) -> Result<Var> {
        let mut state: Option<(Var, Var)> = None;
        for x in steps {
            let h_prev = state.map(|(h, _)| h);
            let c_prev = state.map(|(_, c)| c);
            let zi = Self::affine(tape, x, self.w_xi, h_prev.map(|h| (h, self.w_hi)), c_prev.map(|c| (c, self.w_ci)), self.b_i)?;
            let i = tape.sigmoid(zi)?;
            let zf = Self::affine(tape, x, self.w_xf, h_prev.map(|h| (h, self.w_hf)), c_prev.map(|c| (c, self.w_cf)), self.b_f)?;
            let f = tape.sigmoid(zf)?;
            let zc = Self::affine(tape, x, self.w_xc, h_prev.map(|h| (h, self.w_hc)), None, self.b_c)?;
            let g = tape.tanh(zc)?;
            let ig = tape.mul(i, g)?;
            let c = match c_prev {
                Some(c_prev) => {
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let zo = Self::affine(tape, x, self.w_xo, h_prev.map(|h| (h, self.w_ho)), Some((c, self.w_co)), self.b_o)?;
            let o = tape.sigmoid(zo)?;
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            state = Some((h, c));
        }
        state.map(|(h, _)| h).ok_or(ModelError::EmptySequence)
    }
}

/// Helper for tests and tools: an item id as a path token.
pub fn item_token(i: ItemId) -> PathToken {
    PathToken::Item(i)
}
