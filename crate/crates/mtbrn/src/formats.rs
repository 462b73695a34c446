//! Readers and writers for every on-disk artifact.
//!
//! TSV files have no header and exactly the documented number of fields per
//! line. Malformed lines are errors carrying the 1-based line and field
//! number; nothing is skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::Kind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRow {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawValue {
    Token(u32),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub entity_kind: EntityKind,
    pub entity: String,
    pub field: String,
    pub value: RawValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRow {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEdgeRow {
    pub item: String,
    pub neighbor: String,
    pub score: f64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    open(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Error::io(path, e)))
        .collect()
}

/// Rows of a TSV file, each checked for exactly `n` fields.
fn tsv(path: &Path, n: usize) -> Result<Vec<(usize, Vec<String>)>> {
    lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let fields: Vec<String> = text.split('\t').map(str::to_owned).collect();
            if fields.len() != n {
                return Err(Error::schema(
                    path,
                    line,
                    None,
                    format!("expected {n} tab-separated fields, found {}", fields.len()),
                ));
            }
            if let Some(k) = fields.iter().position(String::is_empty) {
                return Err(Error::schema(path, line, Some(k + 1), "empty field"));
            }
            Ok((line, fields))
        })
        .collect()
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_rows<I, R>(path: &Path, rows: I, mut fmt: impl FnMut(&mut BufWriter<File>, R) -> std::io::Result<()>) -> Result<()>
where
    I: IntoIterator<Item = R>,
{
    let mut w = create(path)?;
    for r in rows {
        fmt(&mut w, r).map_err(|e| Error::io(path, e))?;
    }
    finish(path, w)
}

pub fn parse_label(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

pub fn parse_interactions(path: &Path) -> Result<Vec<InteractionRow>> {
    tsv(path, 4)?
        .into_iter()
        .map(|(line, f)| {
            let timestamp = f[2]
                .parse::<u64>()
                .map_err(|_| Error::schema(path, line, Some(3), format!("timestamp `{}` is not a nonnegative integer", f[2])))?;
            let label = parse_label(&f[3])
                .ok_or_else(|| Error::schema(path, line, Some(4), format!("label `{}` is not 0 or 1", f[3])))?;
            let mut f = f.into_iter();
            Ok(InteractionRow { user: f.next().unwrap(), item: f.next().unwrap(), timestamp, label })
        })
        .collect()
}

pub fn write_interactions<'a>(path: &Path, rows: impl IntoIterator<Item = &'a InteractionRow>) -> Result<()> {
    write_rows(path, rows, |w, r| writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, r.timestamp, u8::from(r.label)))
}

pub fn parse_profiles(path: &Path) -> Result<Vec<ProfileRow>> {
    tsv(path, 5)?
        .into_iter()
        .map(|(line, f)| {
            let entity_kind = match f[0].as_str() {
                "user" => EntityKind::User,
                "item" => EntityKind::Item,
                other => return Err(Error::schema(path, line, Some(1), format!("entity kind `{other}` is not user or item"))),
            };
            let kind = Kind::parse(&f[3])
                .ok_or_else(|| Error::schema(path, line, Some(4), format!("kind `{}` is not sparse or numerical", f[3])))?;
            let value = match kind {
                Kind::Sparse => RawValue::Token(f[4].parse::<u32>().map_err(|_| {
                    Error::schema(path, line, Some(5), format!("sparse value `{}` is not a nonnegative integer", f[4]))
                })?),
                Kind::Numerical => {
                    let x = f[4].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                        Error::schema(path, line, Some(5), format!("numerical value `{}` is not a finite number", f[4]))
                    })?;
                    RawValue::Number(x)
                }
            };
            Ok(ProfileRow { entity_kind, entity: f[1].clone(), field: f[2].clone(), value })
        })
        .collect()
}

pub fn write_profiles<'a>(path: &Path, rows: impl IntoIterator<Item = &'a ProfileRow>) -> Result<()> {
    write_rows(path, rows, |w, r| {
        let (kind, value) = match r.value {
            RawValue::Token(t) => ("sparse", t.to_string()),
            RawValue::Number(x) => ("numerical", x.to_string()),
        };
        writeln!(w, "{}\t{}\t{}\t{kind}\t{value}", r.entity_kind.name(), r.entity, r.field)
    })
}

pub fn parse_triples(path: &Path) -> Result<Vec<TripleRow>> {
    Ok(tsv(path, 3)?
        .into_iter()
        .map(|(_, f)| {
            let mut f = f.into_iter();
            TripleRow { head: f.next().unwrap(), relation: f.next().unwrap(), tail: f.next().unwrap() }
        })
        .collect())
}

pub fn write_triples<'a>(path: &Path, rows: impl IntoIterator<Item = &'a TripleRow>) -> Result<()> {
    write_rows(path, rows, |w, r| writeln!(w, "{}\t{}\t{}", r.head, r.relation, r.tail))
}

pub fn parse_simgraph(path: &Path) -> Result<Vec<SimEdgeRow>> {
    tsv(path, 3)?
        .into_iter()
        .map(|(line, f)| {
            let score = f[2]
                .parse::<f64>()
                .ok()
                .filter(|s| (0.0..=1.0).contains(s))
                .ok_or_else(|| Error::schema(path, line, Some(3), format!("score `{}` is not in [0, 1]", f[2])))?;
            let mut f = f.into_iter();
            Ok(SimEdgeRow { item: f.next().unwrap(), neighbor: f.next().unwrap(), score })
        })
        .collect()
}

/// Scores are written with six decimals.
pub fn write_simgraph<'a>(path: &Path, rows: impl IntoIterator<Item = &'a SimEdgeRow>) -> Result<()> {
    write_rows(path, rows, |w, r| writeln!(w, "{}\t{}\t{:.6}", r.item, r.neighbor, r.score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureRecord {
    Sparse { field: String, value: u32 },
    Numerical { field: String, value: f64 },
}

impl FeatureRecord {
    pub fn field(&self) -> &str {
        match self {
            FeatureRecord::Sparse { field, .. } | FeatureRecord::Numerical { field, .. } => field,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub user: String,
    pub target: String,
    pub timestamp: u64,
    /// Oldest first.
    pub behaviors: Vec<String>,
    pub label: u8,
    pub user_features: Vec<FeatureRecord>,
    pub target_features: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TokenRecord {
    #[serde(rename = "i")]
    Item(String),
    #[serde(rename = "e")]
    Entity(String),
    #[serde(rename = "r")]
    Relation(String),
    #[serde(rename = "s")]
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathRecord {
    pub instance_idx: usize,
    pub cf: Vec<Vec<TokenRecord>>,
    pub kg: Vec<Vec<TokenRecord>>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::schema(path, line, None, e.to_string()))
        })
        .collect()
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    write_rows(path, rows, |w, r| {
        serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

pub fn read_instances(path: &Path) -> Result<Vec<InstanceRecord>> {
    let rows: Vec<InstanceRecord> = read_jsonl(path)?;
    if let Some(k) = rows.iter().position(|r| r.label > 1) {
        return Err(Error::schema(path, k + 1, None, "label must be 0 or 1"));
    }
    Ok(rows)
}

/// Path records, checked to be numbered `0..n` in order.
pub fn read_paths(path: &Path) -> Result<Vec<PathRecord>> {
    let rows: Vec<PathRecord> = read_jsonl(path)?;
    if let Some(k) = rows.iter().enumerate().position(|(k, r)| r.instance_idx != k) {
        return Err(Error::schema(
            path,
            k + 1,
            None,
            format!("instance_idx {} out of sequence (expected {k})", rows[k].instance_idx),
        ));
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::schema(path, e.line(), None, e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut r = open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = std::io::Read::read(&mut r, &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
