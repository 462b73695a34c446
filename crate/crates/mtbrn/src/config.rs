//! Settings layered from defaults, an optional TOML file, and flags.
//!
//! Flags win over the file. When both set a key to different values the
//! override is kept and a warning naming both sources is recorded.
//! Cross-field checks name the source of every value involved.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

/// Every key a config file may hold. Commands read the keys they use.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    // gen-synth
    pub n_users: Option<u32>,
    pub n_items: Option<u32>,
    pub n_entities: Option<u32>,
    pub theme_count: Option<u32>,
    pub impressions_per_user: Option<u32>,
    pub bias: Option<f64>,
    pub w_kg: Option<f64>,
    pub w_cf: Option<f64>,
    pub w_noise: Option<f64>,
    // build-simgraph
    pub top_k: Option<usize>,
    pub max_behaviors: Option<usize>,
    pub test_tail: Option<usize>,
    pub train_window: Option<usize>,
    pub negatives: Option<usize>,
    // extract-paths
    pub max_hops_cf: Option<usize>,
    pub max_hops_kg: Option<usize>,
    pub k_cf: Option<usize>,
    pub k_kg: Option<usize>,
    pub max_path_len: Option<usize>,
    pub threads: Option<usize>,
    // train
    pub variant: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub init_range: Option<f64>,
    pub embedding_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub mlp_hidden: Option<[usize; 3]>,
    // grad-check
    pub tolerance: Option<f64>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File(PathBuf),
    Flag(&'static str),
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::File(p) => write!(f, "config file {}", p.display()),
            Source::Flag(flag) => f.write_str(flag),
        }
    }
}

#[derive(Debug, Default)]
pub struct Resolver {
    path: Option<PathBuf>,
    file: FileConfig,
    sources: BTreeMap<&'static str, Source>,
    pub warnings: Vec<String>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(Self { path: Some(path.to_owned()), file, ..Self::default() })
    }

    pub fn file(&self) -> &FileConfig {
        &self.file
    }

    /// Resolves `key` from `flag` (named `flag_name`), then the file, then `default`.
    pub fn pick<T: Clone + PartialEq + Debug>(
        &mut self,
        key: &'static str,
        flag_name: &'static str,
        flag: Option<T>,
        file: Option<T>,
        default: T,
    ) -> T {
        let (value, source) = match (flag, file) {
            (Some(f), Some(c)) => {
                if f != c {
                    self.warnings.push(format!(
                        "{flag_name} = {f:?} overrides {key} = {c:?} from config file {}",
                        self.path.as_deref().unwrap_or(Path::new("?")).display()
                    ));
                }
                (f, Source::Flag(flag_name))
            }
            (Some(f), None) => (f, Source::Flag(flag_name)),
            (None, Some(c)) => (c, Source::File(self.path.clone().unwrap_or_default())),
            (None, None) => (default, Source::Default),
        };
        self.sources.insert(key, source);
        value
    }

    pub fn source(&self, key: &str) -> Source {
        self.sources.get(key).cloned().unwrap_or(Source::Default)
    }

    /// A cross-field conflict error naming where each value came from.
    pub fn conflict(&self, a: (&str, &dyn Debug), b: (&str, &dyn Debug), why: &str) -> Error {
        Error::Config(format!(
            "{} = {:?} (from {}) conflicts with {} = {:?} (from {}): {why}",
            a.0,
            a.1,
            self.source(a.0),
            b.0,
            b.1,
            self.source(b.0)
        ))
    }

    /// A single-field validation error naming the value's source.
    pub fn invalid(&self, key: &str, value: &dyn Debug, why: &str) -> Error {
        Error::Config(format!("{key} = {value:?} (from {}) {why}", self.source(key)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_and_warns() {
        let mut r = Resolver {
            path: Some("c.toml".into()),
            file: FileConfig { k_cf: Some(50), ..Default::default() },
            ..Default::default()
        };
        let k = r.pick("k_cf", "--k-cf", Some(20), r.file.k_cf, 10);
        assert_eq!(k, 20);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("--k-cf") && r.warnings[0].contains("c.toml"));
        let k = r.pick("k_kg", "--k-kg", None, r.file.k_kg, 10);
        assert_eq!(k, 10);
        assert_eq!(r.source("k_kg"), Source::Default);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("k_cf = 3\nbogus = 1\n").is_err());
        assert_eq!(toml::from_str::<FileConfig>("k_cf = 3\n").unwrap().k_cf, Some(3));
    }
}
