//! Conversion between file records and core types.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use mtbrn_core::data::{EntityId, FeatureData, FeatureValue, FieldId, Instance, ItemId, RelationId, UserId};
use mtbrn_core::pathfinder::{Path, PathSet, PathToken, SourceGraph};
use serde::{Deserialize, Serialize};

use crate::catalog::{Kind, Schema, Vocab};
use crate::error::{Error, Result};
use crate::formats::{EntityKind, FeatureRecord, InstanceRecord, PathRecord, ProfileRow, RawValue, TokenRecord};

/// Whether unseen names extend a vocabulary or map to its OOV id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Grow,
    Frozen,
}

fn id(v: &mut Vocab, name: &str, mode: Mode) -> u32 {
    match mode {
        Mode::Grow => v.intern(name),
        Mode::Frozen => v.get_or_oov(name),
    }
}

fn name(v: &Vocab, id: u32) -> &str {
    if (id as usize) < v.len() {
        v.name(id)
    } else {
        "<oov>"
    }
}

/// Every vocabulary a run needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(skip)]
    pub users: Vocab,
    #[serde(with = "vocab_names")]
    pub items: Vocab,
    #[serde(with = "vocab_names")]
    pub entities: Vocab,
    #[serde(with = "vocab_names")]
    pub relations: Vocab,
    pub user_fields: Schema,
    pub item_fields: Schema,
}

mod vocab_names {
    use super::Vocab;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vocab, s: S) -> Result<S::Ok, S::Error> {
        v.names().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vocab, D::Error> {
        Ok(Vocab::from_names(Vec::<String>::deserialize(d)?))
    }
}

impl Catalog {
    pub fn schema(&self, side: EntityKind) -> &Schema {
        match side {
            EntityKind::User => &self.user_fields,
            EntityKind::Item => &self.item_fields,
        }
    }

    fn schema_mut(&mut self, side: EntityKind) -> &mut Schema {
        match side {
            EntityKind::User => &mut self.user_fields,
            EntityKind::Item => &mut self.item_fields,
        }
    }

    pub fn features_from_records(
        &mut self,
        side: EntityKind,
        records: &[FeatureRecord],
        mode: Mode,
    ) -> Result<Vec<FeatureValue>> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let (kind, data) = match *r {
                FeatureRecord::Sparse { value, .. } => (Kind::Sparse, FeatureData::Sparse(value)),
                FeatureRecord::Numerical { value, .. } => {
                    if !value.is_finite() {
                        return Err(Error::Invalid(format!("{} feature `{}` is not finite", side.name(), r.field())));
                    }
                    (Kind::Numerical, FeatureData::Numerical(value))
                }
            };
            let schema = self.schema_mut(side);
            let pos = match mode {
                Mode::Grow => {
                    let token = match data {
                        FeatureData::Sparse(t) => Some(t),
                        FeatureData::Numerical(_) => None,
                    };
                    schema.observe(r.field(), kind.clone(), token)
                }
                Mode::Frozen => schema.position(r.field()).filter(|&p| schema.fields[p].kind == kind),
            };
            let pos = pos.ok_or_else(|| {
                Error::Invalid(format!("unknown {} feature field `{}` or wrong kind", side.name(), r.field()))
            })?;
            out.push(FeatureValue { field: FieldId(pos as u32), data });
        }
        Ok(out)
    }

    pub fn features_to_records(&self, side: EntityKind, features: &[FeatureValue]) -> Vec<FeatureRecord> {
        let schema = self.schema(side);
        features
            .iter()
            .map(|f| {
                let field = schema.fields[f.field.index()].name.clone();
                match f.data {
                    FeatureData::Sparse(value) => FeatureRecord::Sparse { field, value },
                    FeatureData::Numerical(value) => FeatureRecord::Numerical { field, value },
                }
            })
            .collect()
    }

    pub fn instance_from_record(&mut self, r: &InstanceRecord, mode: Mode, with_features: bool) -> Result<Instance> {
        let user = UserId(self.users.intern(&r.user));
        let target = ItemId(id(&mut self.items, &r.target, mode));
        let behaviors = r.behaviors.iter().map(|b| ItemId(id(&mut self.items, b, mode))).collect();
        let (user_profile, target_profile) = if with_features {
            (
                self.features_from_records(EntityKind::User, &r.user_features, mode)?,
                self.features_from_records(EntityKind::Item, &r.target_features, mode)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Instance { user, target, timestamp: r.timestamp, behaviors, label: r.label == 1, user_profile, target_profile })
    }

    pub fn instance_to_record(&self, i: &Instance) -> InstanceRecord {
        InstanceRecord {
            user: self.users.name(i.user.0).to_owned(),
            target: name(&self.items, i.target.0).to_owned(),
            timestamp: i.timestamp,
            behaviors: i.behaviors.iter().map(|b| name(&self.items, b.0).to_owned()).collect(),
            label: u8::from(i.label),
            user_features: self.features_to_records(EntityKind::User, &i.user_profile),
            target_features: self.features_to_records(EntityKind::Item, &i.target_profile),
        }
    }

    pub fn path_to_record(&self, p: &Path) -> Vec<TokenRecord> {
        p.tokens
            .iter()
            .map(|t| match *t {
                PathToken::Item(i) => TokenRecord::Item(name(&self.items, i.0).to_owned()),
                PathToken::Entity(e) => TokenRecord::Entity(name(&self.entities, e.0).to_owned()),
                PathToken::Relation(r) => TokenRecord::Relation(name(&self.relations, r.0).to_owned()),
                PathToken::Score(s) => TokenRecord::Score(s),
            })
            .collect()
    }

    pub fn path_set_to_record(&self, instance_idx: usize, set: &PathSet) -> PathRecord {
        PathRecord {
            instance_idx,
            cf: set.cf.iter().map(|p| self.path_to_record(p)).collect(),
            kg: set.kg.iter().map(|p| self.path_to_record(p)).collect(),
        }
    }

    fn path_from_record(&mut self, tokens: &[TokenRecord], source: SourceGraph, mode: Mode) -> Result<Path> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty path".into()));
        }
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            out.push(match (t, source) {
                (TokenRecord::Item(n), _) => PathToken::Item(ItemId(id(&mut self.items, n, mode))),
                (TokenRecord::Score(s), SourceGraph::Cf) if s.is_finite() => PathToken::Score(*s),
                (TokenRecord::Entity(n), SourceGraph::Kg) => PathToken::Entity(EntityId(id(&mut self.entities, n, mode))),
                (TokenRecord::Relation(n), SourceGraph::Kg) => {
                    PathToken::Relation(RelationId(id(&mut self.relations, n, mode)))
                }
                (other, _) => {
                    return Err(Error::Invalid(format!("token {other:?} not allowed in a {source:?} path")));
                }
            });
        }
        Ok(Path { hops: tokens.len() / 2, tokens: out, source })
    }

    pub fn path_set_from_record(&mut self, r: &PathRecord, mode: Mode) -> Result<PathSet> {
        Ok(PathSet {
            cf: r.cf.iter().map(|p| self.path_from_record(p, SourceGraph::Cf, mode)).collect::<Result<_>>()?,
            kg: r.kg.iter().map(|p| self.path_from_record(p, SourceGraph::Kg, mode)).collect::<Result<_>>()?,
        })
    }
}

/// Profile rows grouped by entity, with per-side schemas in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Profiles {
    pub users: BTreeMap<String, Vec<FeatureValue>>,
    pub items: BTreeMap<String, Vec<FeatureValue>>,
    /// Entity names in first-seen order, per side.
    pub user_order: Vec<String>,
    pub item_order: Vec<String>,
}

pub fn group_profiles(path: &FsPath, rows: &[ProfileRow], catalog: &mut Catalog) -> Result<Profiles> {
    let mut out = Profiles::default();
    for (k, r) in rows.iter().enumerate() {
        let (kind, token, data) = match r.value {
            RawValue::Token(t) => (Kind::Sparse, Some(t), FeatureData::Sparse(t)),
            RawValue::Number(x) => (Kind::Numerical, None, FeatureData::Numerical(x)),
        };
        let pos = catalog.schema_mut(r.entity_kind).observe(&r.field, kind, token).ok_or_else(|| {
            Error::schema(path, k + 1, Some(4), format!("field `{}` was declared with another kind", r.field))
        })?;
        let (map, order) = match r.entity_kind {
            EntityKind::User => (&mut out.users, &mut out.user_order),
            EntityKind::Item => (&mut out.items, &mut out.item_order),
        };
        let entry = map.entry(r.entity.clone()).or_insert_with(|| {
            order.push(r.entity.clone());
            Vec::new()
        });
        if entry.iter().any(|f| f.field.index() == pos) {
            return Err(Error::schema(path, k + 1, Some(3), format!("duplicate field `{}` for {}", r.field, r.entity)));
        }
        entry.push(FeatureValue { field: FieldId(pos as u32), data });
    }
    Ok(out)
}
