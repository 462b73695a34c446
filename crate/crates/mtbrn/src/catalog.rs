//! String-keyed vocabularies mapping file ids to dense integer ids.

use std::collections::HashMap;

use mtbrn_core::data::FeatureKind;
use serde::{Deserialize, Serialize};

/// Names in first-insertion order; the position is the id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::new();
        for n in names {
            v.intern(&n);
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    /// The id, or `len()` (the out-of-vocabulary row) when unknown.
    pub fn get_or_oov(&self, name: &str) -> u32 {
        self.get(name).unwrap_or(self.names.len() as u32)
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Sparse,
    Numerical,
}

impl From<Kind> for FeatureKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Sparse => FeatureKind::Sparse,
            Kind::Numerical => FeatureKind::Numerical,
        }
    }
}

impl From<FeatureKind> for Kind {
    fn from(k: FeatureKind) -> Self {
        match k {
            FeatureKind::Sparse => Kind::Sparse,
            FeatureKind::Numerical => Kind::Numerical,
        }
    }
}

impl Kind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sparse" => Some(Kind::Sparse),
            "numerical" => Some(Kind::Numerical),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: Kind,
    /// Sparse fields: one more than the largest token seen.
    pub vocab_size: u32,
}

/// Feature fields of one profile side; the position is the field id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldDef>,
}

impl Schema {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Registers a use of `name`; returns its id, or `None` when the field
    /// already exists with another kind.
    pub fn observe(&mut self, name: &str, kind: Kind, token: Option<u32>) -> Option<usize> {
        let pos = match self.position(name) {
            Some(p) => {
                if self.fields[p].kind != kind {
                    return None;
                }
                p
            }
            None => {
                self.fields.push(FieldDef { name: name.to_owned(), kind, vocab_size: 0 });
                self.fields.len() - 1
            }
        };
        if let Some(t) = token {
            let f = &mut self.fields[pos];
            f.vocab_size = f.vocab_size.max(t + 1);
        }
        Some(pos)
    }
}
