//! Adapters from source annotation files to normalized [`Record`] streams.
//!
//! Fixture formats:
//!
//! * **SEED** (`<root>/seed.json`, or `root` itself when it is a file): a JSON array of
//!   `{"question_id", "question", "choice_a".."choice_d", "answer": "A".."D",
//!   "data_id": <image>, "question_type_id": <task>}`.
//! * **VL-Checklist** (`<root>/<partition>.json`, one file per partition): a JSON array
//!   of `[<image>, {"POS": [caption, ..], "NEG": [caption, ..]}]`.
//! * **Classification** (`<root>/labels.jsonl`, or `root` itself when it is a file):
//!   one `{"image": <path>, "label": <class name>}` per line.
//! * **Replay** (see [`load_replay`]): a LLaVA-style JSON array of
//!   `{"id", "image"?, "conversations": [{"from": "human"|"gpt", "value"}]}` or canonical
//!   conversation JSONL.
//!
//! Malformed items are skipped with a reason; more than 1% skips is a hard failure.

use crate::model::{
    seed_task_kind, ConceptKind, Conversation, ImageRef, Payload, Provenance, Record, Role, Source, TaskType, Turn,
    CLASSIFICATION_DATASETS, VLC_PARTITIONS,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

/// Skips are tolerated up to this fraction of considered items.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub source: Source,
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_or_partition_filter: Option<Vec<String>>,
    /// Classification dataset name (`dogs`, `cub`, `flowers`, `food101`, `cars`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl SourceManifest {
    pub fn new(source: Source, root: impl Into<PathBuf>) -> Self {
        SourceManifest { source, root: root.into(), task_or_partition_filter: None, dataset: None }
    }

    pub fn with_filter<I, S>(mut self, filter: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.task_or_partition_filter = Some(filter.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = Some(dataset.into());
        self
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::Io(path.into(), e))?;
        let mut manifest: SourceManifest =
            serde_json::from_str(&text).map_err(|e| IngestError::Manifest(path.into(), e.to_string()))?;
        if manifest.root.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.root = dir.join(&manifest.root);
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skip {
    /// Zero-based position of the item in its source file.
    pub item: usize,
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Ingested {
    pub records: Vec<Record>,
    pub skips: Vec<Skip>,
    /// Items excluded by the manifest filter.
    pub filtered_out: usize,
    pub total_items: usize,
    pub warnings: Vec<String>,
}

impl Ingested {
    fn check_skip_budget(self) -> Result<Self, IngestError> {
        let considered = self.total_items - self.filtered_out;
        if considered > 0 && self.skips.len() as f64 > MAX_SKIP_FRACTION * considered as f64 {
            return Err(IngestError::TooManySkips {
                skips: self.skips.len(),
                considered,
                first: self.skips[0].clone(),
            });
        }
        Ok(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("bad manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error("manifest source is {found:?}, adapter expects {expected:?}")]
    WrongSource { expected: Source, found: Source },
    #[error("root {0} does not exist")]
    RootMissing(PathBuf),
    #[error("{0}: not a valid annotation file: {1}")]
    Format(PathBuf, String),
    #[error("unknown partition {0:?}")]
    UnknownPartition(String),
    #[error("unknown classification dataset {0:?}")]
    UnknownDataset(String),
    #[error("classification manifest needs a dataset name")]
    MissingDataset,
    #[error("image {image:?} labelled both {first:?} and {second:?}")]
    ImageInTwoClasses { image: String, first: String, second: String },
    #[error("{skips} of {considered} items skipped (more than 1%); first: item {} in {}: {}", first.item, first.file, first.reason)]
    TooManySkips { skips: usize, considered: usize, first: Skip },
}

/// Dispatches on `manifest.source`.
pub fn ingest(manifest: &SourceManifest) -> Result<Ingested, IngestError> {
    match manifest.source {
        Source::Seed => ingest_seed(manifest),
        Source::Vlchecklist => ingest_vlchecklist(manifest),
        Source::Classification => ingest_classification(manifest),
        Source::LlavaReplay => Err(IngestError::Manifest(
            manifest.root.clone(),
            "replay data is loaded as conversations, not records".into(),
        )),
    }
}

/// Ingests several manifests on separate threads; output order follows the input order.
pub fn ingest_all(manifests: &[SourceManifest]) -> Vec<Result<Ingested, IngestError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = manifests.iter().map(|m| scope.spawn(move || ingest(m))).collect();
        handles.into_iter().map(|h| h.join().expect("ingest thread panicked")).collect()
    })
}

fn expect_source(manifest: &SourceManifest, expected: Source) -> Result<(), IngestError> {
    if manifest.source != expected {
        return Err(IngestError::WrongSource { expected, found: manifest.source });
    }
    if !manifest.root.exists() {
        return Err(IngestError::RootMissing(manifest.root.clone()));
    }
    Ok(())
}

fn annotation_file(root: &Path, default_name: &str) -> PathBuf {
    if root.is_dir() {
        root.join(default_name)
    } else {
        root.to_path_buf()
    }
}

fn read_json_array(path: &Path) -> Result<Vec<Value>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io(path.into(), e))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Array(items)) => Ok(items),
        Ok(_) => Err(IngestError::Format(path.into(), "expected a JSON array".into())),
        Err(e) => Err(IngestError::Format(path.into(), e.to_string())),
    }
}

fn display_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_seed_filter(filter: &[String]) -> Result<BTreeSet<u32>, IngestError> {
    filter
        .iter()
        .map(|f| {
            f.strip_prefix("seed/")
                .unwrap_or(f)
                .strip_prefix("task")
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(|| IngestError::UnknownPartition(f.clone()))
        })
        .collect()
}

fn seed_item(value: &Value) -> Result<(String, Record), String> {
    let obj = value.as_object().ok_or("item is not an object")?;
    let text = |key: &str| -> Result<String, String> {
        match obj.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(Value::Number(n)) if key == "question_id" => Ok(n.to_string()),
            _ => Err(format!("missing {key}")),
        }
    };
    let qid = text("question_id")?;
    let question = text("question")?;
    let options =
        ["choice_a", "choice_b", "choice_c", "choice_d"].iter().map(|k| text(k)).collect::<Result<Vec<_>, _>>()?;
    let answer = text("answer")?;
    let answer_index = match answer.trim() {
        "A" => 0,
        "B" => 1,
        "C" => 2,
        "D" => 3,
        other => return Err(format!("answer {other:?} is not one of A-D")),
    };
    let image = text("data_id")?;
    let task = match obj.get("question_type_id") {
        Some(Value::Number(n)) => n.as_u64().ok_or("question_type_id is not a task number")?,
        Some(Value::String(s)) => s.parse::<u64>().map_err(|_| "question_type_id is not a task number")?,
        _ => return Err("missing question_type_id".into()),
    } as u32;
    let record = Record {
        id: format!("seed-{qid}"),
        image: ImageRef(image),
        source: Source::Seed,
        partition: format!("seed/task{task}"),
        concept_kind: seed_task_kind(task),
        payload: Payload {
            question: Some(question),
            options: Some(options),
            answer_index: Some(answer_index),
            ..Payload::default()
        },
    };
    Ok((qid, record))
}

/// SEED-Bench items → one record per item in partition `seed/task<k>`.
pub fn ingest_seed(manifest: &SourceManifest) -> Result<Ingested, IngestError> {
    expect_source(manifest, Source::Seed)?;
    let filter = manifest.task_or_partition_filter.as_deref().map(parse_seed_filter).transpose()?;
    let path = annotation_file(&manifest.root, "seed.json");
    let items = read_json_array(&path)?;
    let file = display_name(&path);
    let mut out = Ingested { total_items: items.len(), ..Ingested::default() };
    let mut seen = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        match seed_item(item) {
            Ok((qid, record)) => {
                let task: u32 = record.partition["seed/task".len()..].parse().unwrap();
                if filter.as_ref().is_some_and(|f| !f.contains(&task)) {
                    out.filtered_out += 1;
                } else if !seen.insert(qid.clone()) {
                    out.skips.push(Skip {
                        item: i,
                        file: file.clone(),
                        reason: format!("duplicate question_id {qid}"),
                    });
                } else {
                    out.records.push(record);
                }
            }
            Err(reason) => out.skips.push(Skip { item: i, file: file.clone(), reason }),
        }
    }
    out.check_skip_budget()
}

fn vlc_kind(name: &str) -> Option<ConceptKind> {
    VLC_PARTITIONS.iter().find(|(n, _)| *n == name).map(|(_, k)| *k)
}

fn first_caption(captions: Option<&Value>, key: &str) -> Result<String, String> {
    match captions {
        Some(Value::Array(list)) => match list.first() {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            _ => Err(format!("missing {key} caption")),
        },
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        _ => Err(format!("missing {key} caption")),
    }
}

fn vlc_item(value: &Value) -> Result<(String, String, String), String> {
    let pair = value.as_array().filter(|a| a.len() == 2).ok_or("item is not an [image, captions] pair")?;
    let image = pair[0].as_str().filter(|s| !s.is_empty()).ok_or("missing image")?;
    let captions = pair[1].as_object().ok_or("captions are not an object")?;
    let pos = first_caption(captions.get("POS"), "positive")?;
    let neg = first_caption(captions.get("NEG"), "negative")?;
    Ok((image.to_string(), pos, neg))
}

/// VL-Checklist partition files → records in `vlc/<name>` carrying the native
/// positive/negative caption pair.
pub fn ingest_vlchecklist(manifest: &SourceManifest) -> Result<Ingested, IngestError> {
    expect_source(manifest, Source::Vlchecklist)?;
    let wanted: Option<BTreeSet<String>> = match &manifest.task_or_partition_filter {
        Some(filter) => Some(
            filter
                .iter()
                .map(|f| {
                    let name = f.strip_prefix("vlc/").unwrap_or(f);
                    vlc_kind(name).map(|_| name.to_string()).ok_or_else(|| IngestError::UnknownPartition(f.clone()))
                })
                .collect::<Result<_, _>>()?,
        ),
        None => None,
    };
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    if manifest.root.is_dir() {
        let entries = fs::read_dir(&manifest.root).map_err(|e| IngestError::Io(manifest.root.clone(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| IngestError::Io(manifest.root.clone(), e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            files.push((stem, path));
        }
    } else {
        let stem = manifest.root.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        files.push((stem, manifest.root.clone()));
    }
    files.sort();

    let mut out = Ingested::default();
    for (name, path) in files {
        let kind = vlc_kind(&name).ok_or_else(|| IngestError::UnknownPartition(name.clone()))?;
        let items = read_json_array(&path)?;
        out.total_items += items.len();
        if wanted.as_ref().is_some_and(|w| !w.contains(&name)) {
            out.filtered_out += items.len();
            continue;
        }
        let file = display_name(&path);
        for (i, item) in items.iter().enumerate() {
            match vlc_item(item) {
                Ok((image, pos, neg)) => out.records.push(Record {
                    id: format!("vlc-{name}-{i:06}"),
                    image: ImageRef(image),
                    source: Source::Vlchecklist,
                    partition: format!("vlc/{name}"),
                    concept_kind: kind,
                    payload: Payload { caption: Some(pos), negative_caption: Some(neg), ..Payload::default() },
                }),
                Err(reason) => out.skips.push(Skip { item: i, file: file.clone(), reason }),
            }
        }
    }
    out.check_skip_budget()
}

/// Lowercase slug used as the class part of a classification partition.
pub fn class_slug(label: &str) -> String {
    let mut slug = String::with_capacity(label.len());
    let mut pending_sep = false;
    for c in label.trim().chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_sep && !slug.is_empty() {
                slug.push('_');
            }
            pending_sep = false;
            slug.push(c);
        } else {
            pending_sep = true;
        }
    }
    slug
}

#[derive(Deserialize)]
struct LabelLine {
    image: String,
    label: String,
}

/// Class-label manifests (`image → class`) → records in `<dataset>/<class>`.
pub fn ingest_classification(manifest: &SourceManifest) -> Result<Ingested, IngestError> {
    expect_source(manifest, Source::Classification)?;
    let dataset = manifest.dataset.as_deref().ok_or(IngestError::MissingDataset)?;
    if !CLASSIFICATION_DATASETS.contains(&dataset) {
        return Err(IngestError::UnknownDataset(dataset.to_string()));
    }
    let wanted: Option<BTreeSet<String>> = manifest.task_or_partition_filter.as_ref().map(|f| {
        f.iter()
            .map(|c| c.strip_prefix(&format!("{dataset}/")).map(String::from).unwrap_or_else(|| class_slug(c)))
            .collect()
    });
    let path = annotation_file(&manifest.root, "labels.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| IngestError::Io(path.clone(), e))?;
    let file = display_name(&path);
    let mut out = Ingested::default();
    let mut label_of: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        out.total_items += 1;
        let parsed: LabelLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                out.skips.push(Skip { item: i, file: file.clone(), reason: e.to_string() });
                continue;
            }
        };
        let slug = class_slug(&parsed.label);
        if parsed.image.trim().is_empty() || slug.is_empty() {
            out.skips.push(Skip { item: i, file: file.clone(), reason: "empty image or label".into() });
            continue;
        }
        if let Some(prev) = label_of.get(&parsed.image) {
            if *prev != parsed.label {
                return Err(IngestError::ImageInTwoClasses {
                    image: parsed.image,
                    first: prev.clone(),
                    second: parsed.label,
                });
            }
            out.skips.push(Skip { item: i, file: file.clone(), reason: format!("duplicate image {}", parsed.image) });
            continue;
        }
        label_of.insert(parsed.image.clone(), parsed.label.clone());
        if wanted.as_ref().is_some_and(|w| !w.contains(&slug)) {
            out.filtered_out += 1;
            continue;
        }
        out.records.push(Record {
            id: format!("{dataset}-{i:06}"),
            image: ImageRef(parsed.image),
            source: Source::Classification,
            partition: format!("{dataset}/{slug}"),
            concept_kind: ConceptKind::Category,
            payload: Payload { class_label: Some(parsed.label), ..Payload::default() },
        });
    }
    let classes: BTreeSet<&str> = out.records.iter().map(|r| r.partition.as_str()).collect();
    if classes.len() < 2 {
        out.warnings.push(format!("{dataset}: insufficient classes for 2-way episodes ({} found)", classes.len()));
    }
    out.check_skip_budget()
}

#[derive(Deserialize)]
struct LlavaTurn {
    from: String,
    value: String,
}

#[derive(Deserialize)]
struct LlavaItem {
    id: Value,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    images: Option<Vec<String>>,
    conversations: Vec<LlavaTurn>,
}

pub const REPLAY_PARTITION: &str = "llava_replay/default";

/// Loads replay conversations: a LLaVA-style JSON array, or canonical conversation JSONL
/// when the file ends in `.jsonl`.
pub fn load_replay(path: &Path) -> Result<Vec<Conversation>, IngestError> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        return crate::jsonl::read(path).map_err(|e| IngestError::Format(path.into(), e.to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io(path.into(), e))?;
    let items: Vec<LlavaItem> =
        serde_json::from_str(&text).map_err(|e| IngestError::Format(path.into(), e.to_string()))?;
    items
        .into_iter()
        .map(|item| {
            let id = match item.id {
                Value::String(s) => s,
                other => other.to_string(),
            };
            let turns = item
                .conversations
                .into_iter()
                .map(|t| {
                    let role = match t.from.as_str() {
                        "human" | "user" => Role::Human,
                        "gpt" | "assistant" => Role::Gpt,
                        other => return Err(IngestError::Format(path.into(), format!("{id}: unknown role {other:?}"))),
                    };
                    Ok(Turn { role, text: t.value })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let images = item.images.or(item.image.map(|i| vec![i])).unwrap_or_default();
            Ok(Conversation {
                turns,
                images: images.into_iter().map(ImageRef).collect(),
                task_type: TaskType::Replay,
                partition: REPLAY_PARTITION.into(),
                provenance: vec![Provenance {
                    record_id: id,
                    partition: REPLAY_PARTITION.into(),
                    task_type: TaskType::Replay,
                    option_order: None,
                }],
            })
        })
        .collect()
}
