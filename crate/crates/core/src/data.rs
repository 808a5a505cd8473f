//! Dataset and entity-catalog ingestion, validation against known statistics,
//! and low-resource subsampling.
//!
//! Both file kinds are newline-delimited JSON, one record per line, which is
//! how the public MEL benchmarks are distributed after preprocessing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded;

/// One mention with its multimodal context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub id: String,
    pub mention_word: String,
    pub context: String,
    #[serde(rename = "image")]
    pub image_ref: Option<String>,
    #[serde(rename = "gold_entity")]
    pub gold_entity_id: String,
    #[serde(default)]
    pub enhanced_context: Option<String>,
}

/// One catalog entity: name, textual attributes, optional image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub name: String,
    pub attributes: String,
    #[serde(rename = "image")]
    pub image_ref: Option<String>,
    #[serde(rename = "qid", default)]
    pub kb_qid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        };
        f.write_str(s)
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Ordered mentions of one split. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    split_name: SplitName,
    mentions: Vec<MentionRecord>,
}

impl DatasetSplit {
    pub fn new(split_name: SplitName, mentions: Vec<MentionRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &mentions {
            if !seen.insert(m.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate mention id {:?}", m.id)));
            }
        }
        Ok(DatasetSplit {
            split_name,
            mentions,
        })
    }

    pub fn split_name(&self) -> SplitName {
        self.split_name
    }

    pub fn mentions(&self) -> &[MentionRecord] {
        &self.mentions
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }
}

/// Id-keyed entity collection with its exact image coverage.
#[derive(Debug, Clone)]
pub struct EntityCatalog {
    entities: HashMap<String, EntityRecord>,
    /// Ids in file order, for deterministic iteration.
    order: Vec<String>,
    image_coverage: f64,
}

impl EntityCatalog {
    pub fn new(records: Vec<EntityRecord>) -> Result<Self> {
        let mut entities = HashMap::with_capacity(records.len());
        let mut order = Vec::with_capacity(records.len());
        let mut with_image = 0usize;
        for r in records {
            if r.name.is_empty() {
                return Err(Error::Integrity(format!(
                    "entity {:?} has empty name",
                    r.entity_id
                )));
            }
            if r.image_ref.is_some() {
                with_image += 1;
            }
            order.push(r.entity_id.clone());
            if entities.insert(r.entity_id.clone(), r).is_some() {
                let dup = order.last().unwrap();
                return Err(Error::Integrity(format!("duplicate entity id {dup:?}")));
            }
        }
        let image_coverage = if order.is_empty() {
            0.0
        } else {
            with_image as f64 / order.len() as f64
        };
        Ok(EntityCatalog {
            entities,
            order,
            image_coverage,
        })
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.entities.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn image_coverage(&self) -> f64 {
        self.image_coverage
    }

    /// Entities in file order.
    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.order.iter().map(|id| &self.entities[id])
    }
}

/// Expected counts for one split; absent fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSpec {
    #[serde(default)]
    pub mentions: Option<usize>,
    #[serde(default)]
    pub mentions_with_image: Option<usize>,
}

/// Stats-spec file: split name -> expected counts.
pub type StatsSpecFile = HashMap<String, StatsSpec>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountCheck {
    pub actual: usize,
    pub expected: Option<usize>,
    pub pass: bool,
}

impl CountCheck {
    fn new(actual: usize, expected: Option<usize>) -> Self {
        let pass = expected.is_none_or(|e| e == actual);
        CountCheck {
            actual,
            expected,
            pass,
        }
    }
}

/// Outcome of validating a split against a catalog and expected statistics.
/// Failures are entries here, never errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub split: String,
    pub mentions: CountCheck,
    pub mentions_with_image: CountCheck,
    pub unresolved_gold_ids: usize,
    pub pass: bool,
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file).lines())
}

/// Load one split from a mention file. Records come back in file order;
/// blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>, split_name: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut mentions = Vec::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MentionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&display, lineno, e.to_string()))?;
        if record.mention_word.is_empty() {
            return Err(Error::parse(&display, lineno, "mention_word is empty"));
        }
        if let Some(enh) = &record.enhanced_context {
            if !enh.starts_with(&record.context) {
                return Err(Error::parse(
                    &display,
                    lineno,
                    "enhanced_context does not start with context",
                ));
            }
        }
        mentions.push(record);
    }
    DatasetSplit::new(split_name, mentions)
}

/// Write a split back out, one JSON record per line, in order.
pub fn save_split(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(&display, e))?);
    for m in split.mentions() {
        let line = serde_json::to_string(m).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Load the entity catalog from an entity file.
pub fn build_entity_catalog(path: impl AsRef<Path>) -> Result<EntityCatalog> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in read_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EntityRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&display, lineno, e.to_string()))?;
        records.push(record);
    }
    EntityCatalog::new(records)
}

/// Count mentions, mentions with images and unresolved gold ids, and compare
/// against expectations. Inputs are untouched.
pub fn validate_dataset(
    split: &DatasetSplit,
    catalog: &EntityCatalog,
    expected: &StatsSpec,
) -> StatsReport {
    let mentions = split.len();
    let with_image = split
        .mentions()
        .iter()
        .filter(|m| m.image_ref.is_some())
        .count();
    let unresolved = split
        .mentions()
        .iter()
        .filter(|m| !catalog.contains(&m.gold_entity_id))
        .count();
    let mentions_check = CountCheck::new(mentions, expected.mentions);
    let image_check = CountCheck::new(with_image, expected.mentions_with_image);
    let pass = mentions_check.pass && image_check.pass && unresolved == 0;
    StatsReport {
        split: split.split_name().to_string(),
        mentions: mentions_check,
        mentions_with_image: image_check,
        unresolved_gold_ids: unresolved,
        pass,
    }
}

/// Uniform sample of floor(fraction * n) mentions without replacement,
/// deterministic for a fixed seed ("chacha8-v1"). File order is preserved
/// in the result.
pub fn subsample_low_resource(
    train: &DatasetSplit,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must be in (0,1], got {fraction}"
        )));
    }
    let take = (fraction * train.len() as f64).floor() as usize;
    let mut rng = seeded::rng(seed);
    let mut picked = seeded::sample_indices(&mut rng, train.len(), take);
    picked.sort_unstable();
    let mentions = picked
        .iter()
        .map(|&i| train.mentions()[i].clone())
        .collect();
    DatasetSplit::new(train.split_name(), mentions)
}

/// Load a stats-spec file ({"train": {...}, "valid": {...}, ...}).
pub fn load_stats_spec(path: impl AsRef<Path>) -> Result<StatsSpecFile> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&display, e.line(), e.to_string()))
}
