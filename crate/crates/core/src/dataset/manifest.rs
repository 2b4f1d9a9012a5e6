use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::{parse_label, Label, LabelKind};

pub const MANIFEST_HEADER: &str = "path\tsource\tkind\tlabel\tsplit";

/// Placeholder for an absent label or an unassigned split.
const NONE_FIELD: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line. `label_id` is in the source's own numbering; `label`
/// is its canonical resolution. `split` is `None` until assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub source: String,
    pub label_kind: LabelKind,
    pub label_id: Option<i64>,
    pub label: Option<Label>,
    pub split: Option<Split>,
}

impl ManifestRecord {
    pub fn basic_label(&self) -> Option<usize> {
        match self.label {
            Some(Label::Basic(b)) => Some(b.id()),
            _ => None,
        }
    }

    pub fn compound_label(&self) -> Option<usize> {
        match self.label {
            Some(Label::Compound(c)) => Some(c.id()),
            _ => None,
        }
    }

    /// The same record with `label_id` rewritten to the canonical id.
    pub fn canonicalized(&self) -> Self {
        Self {
            label_id: self.label.map(|l| l.id() as i64),
            ..self.clone()
        }
    }
}

/// Maps one source's integer ids onto canonical class names.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaMap {
    source: String,
    mapping: BTreeMap<i64, Label>,
}

impl SchemaMap {
    /// Builds a map, rejecting unknown names and non-injective mappings.
    pub fn new<S: AsRef<str>>(
        source: impl Into<String>,
        entries: impl IntoIterator<Item = (i64, S)>,
    ) -> Result<Self> {
        let source = source.into();
        let mut mapping = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (id, name) in entries {
            let label = parse_label(name.as_ref())?;
            if !seen.insert((label.kind().as_str(), label.id())) {
                return Err(Error::Config(format!(
                    "schema `{source}` maps several ids to `{}`",
                    label.name()
                )));
            }
            if mapping.insert(id, label).is_some() {
                return Err(Error::Config(format!(
                    "schema `{source}` lists id {id} twice"
                )));
            }
        }
        Ok(Self { source, mapping })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, id: i64) -> Option<Label> {
        self.mapping.get(&id).copied()
    }
}

/// Parses a schema file: lines of `source_id<TAB>canonical_name`.
pub fn read_schema_map(source: &str, path: &Path) -> Result<SchemaMap> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::ManifestParse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `id<TAB>name`".into()))?;
        let id: i64 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad id `{id}`")))?;
        entries.push((id, name.trim().to_string()));
    }
    SchemaMap::new(source, entries)
}

/// Schema maps for every source appearing in a manifest.
///
/// Sources registered with [`SchemaSet::add_identity`] use the canonical
/// ids of the record's label kind directly.
#[derive(Debug, Clone, Default)]
pub struct SchemaSet {
    maps: HashMap<String, SchemaMap>,
    identity: BTreeSet<String>,
    all_identity: bool,
}

impl SchemaSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A set where `canonical` and `synthetic` sources resolve by canonical id.
    pub fn with_canonical() -> Self {
        let mut set = Self::new();
        set.add_identity("canonical");
        set.add_identity("synthetic");
        set
    }

    /// A set where every source resolves by canonical id, as in manifests
    /// written after unification.
    pub fn unified() -> Self {
        Self {
            all_identity: true,
            ..Self::default()
        }
    }

    pub fn add(&mut self, map: SchemaMap) {
        self.maps.insert(map.source.clone(), map);
    }

    pub fn add_identity(&mut self, source: impl Into<String>) {
        self.identity.insert(source.into());
    }

    pub fn resolve(&self, source: &str, kind: LabelKind, id: i64) -> Result<Label> {
        let unknown = || Error::UnknownSourceId {
            source_tag: source.to_string(),
            id,
        };
        let label = if let Some(map) = self.maps.get(source) {
            map.get(id).ok_or_else(unknown)?
        } else if self.all_identity || self.identity.contains(source) {
            usize::try_from(id)
                .ok()
                .and_then(|id| Label::from_kind_id(kind, id))
                .ok_or_else(unknown)?
        } else {
            return Err(unknown());
        };
        if label.kind() != kind {
            return Err(Error::Config(format!(
                "source `{source}` id {id} maps to {} label `{}` but the record is {}",
                label.kind().as_str(),
                label.name(),
                kind.as_str()
            )));
        }
        Ok(label)
    }
}

/// Reads a manifest from disk. See [`parse_manifest`].
pub fn load_manifest(path: &Path, schemas: &SchemaSet) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path)?;
    parse_manifest(file, path, schemas)
}

/// Parses manifest text, resolving labels through `schemas`. `origin` is
/// only used in diagnostics.
pub fn parse_manifest(
    reader: impl Read,
    origin: &Path,
    schemas: &SchemaSet,
) -> Result<Vec<ManifestRecord>> {
    let parse_err = |line: usize, message: String| Error::ManifestParse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rows = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_reader(reader)
        .into_records();
    match rows.next() {
        Some(header) => {
            let header = header.map_err(|e| parse_err(1, e.to_string()))?;
            let header: Vec<&str> = header.iter().collect();
            if header.join("\t").trim_end_matches('\r') != MANIFEST_HEADER {
                return Err(parse_err(1, format!("bad header `{}`", header.join("\t"))));
            }
        }
        None => return Err(parse_err(1, "missing header".into())),
    }
    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        let mut fields: Vec<&str> = row.iter().collect();
        if let Some(last) = fields.last_mut() {
            *last = last.trim_end_matches('\r');
        }
        if fields.len() != 5 {
            return Err(parse_err(
                line_no,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(parse_err(line_no, "empty image path".into()));
        }
        let label_kind: LabelKind = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad label kind `{}`", fields[2])))?;
        let label_id = match fields[3] {
            NONE_FIELD => None,
            s => Some(
                s.parse::<i64>()
                    .map_err(|_| parse_err(line_no, format!("bad label id `{s}`")))?,
            ),
        };
        let split = match fields[4] {
            NONE_FIELD => None,
            s => Some(
                s.parse::<Split>()
                    .map_err(|_| parse_err(line_no, format!("bad split `{s}`")))?,
            ),
        };
        let source = fields[1].to_string();
        let label = match label_id {
            Some(id) => Some(schemas.resolve(&source, label_kind, id).map_err(|e| match e {
                e @ Error::UnknownSourceId { .. } => e,
                other => parse_err(line_no, other.to_string()),
            })?),
            None => None,
        };
        records.push(ManifestRecord {
            image_path: PathBuf::from(fields[0]),
            source,
            label_kind,
            label_id,
            label,
            split,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_manifest_to(&mut out, records)?;
    out.flush()?;
    Ok(())
}

pub(crate) fn write_manifest_to(out: &mut impl Write, records: &[ManifestRecord]) -> Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for r in records {
        let label = r
            .label_id
            .map_or_else(|| NONE_FIELD.to_string(), |id| id.to_string());
        let split = r.split.map_or(NONE_FIELD, Split::as_str);
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.image_path.display(),
            r.source,
            r.label_kind.as_str(),
            label,
            split
        )?;
    }
    Ok(())
}

/// Assigns train/val to every record whose split is unset.
///
/// `round(val_fraction * n)` of the `n` unassigned records go to val, chosen
/// by a seeded shuffle; the rest go to train.
pub fn split_manifest(
    mut records: Vec<ManifestRecord>,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut open: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split.is_none())
        .map(|(i, _)| i)
        .collect();
    let n_val = (val_fraction * open.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    open.shuffle(&mut rng);
    for (k, &i) in open.iter().enumerate() {
        records[i].split = Some(if k < n_val { Split::Val } else { Split::Train });
    }
    Ok(records)
}
