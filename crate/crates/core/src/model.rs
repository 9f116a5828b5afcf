//! Shared domain types and their validation. No I/O lives here.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Literal tag that marks where an image is spliced into a human turn.
pub const IMAGE_TAG: &str = "<image>";

/// Opaque reference to an image (path or URI). Pixels are never decoded.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Seed,
    Vlchecklist,
    Classification,
    LlavaReplay,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Seed => "seed",
            Source::Vlchecklist => "vlchecklist",
            Source::Classification => "classification",
            Source::LlavaReplay => "llava_replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Attribute,
    Relation,
    Category,
    Instance,
    Other,
}

impl ConceptKind {
    /// The four kinds a mix can assign ratios to.
    pub const MIXABLE: [ConceptKind; 4] =
        [ConceptKind::Attribute, ConceptKind::Relation, ConceptKind::Category, ConceptKind::Instance];

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptKind::Attribute => "attribute",
            ConceptKind::Relation => "relation",
            ConceptKind::Category => "category",
            ConceptKind::Instance => "instance",
            ConceptKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    OpenQa,
    MultiChoice,
    Captioning,
    Replay,
}

impl TaskType {
    /// The three ICL instruction formats a mix can assign ratios to.
    pub const FORMATS: [TaskType; 3] = [TaskType::OpenQa, TaskType::MultiChoice, TaskType::Captioning];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::OpenQa => "open_qa",
            TaskType::MultiChoice => "multi_choice",
            TaskType::Captioning => "captioning",
            TaskType::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Gpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ExactMatch,
    PerplexityChoice,
}

/// Source-specific annotation. At least one field is present.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

impl Payload {
    pub fn is_empty(&self) -> bool {
        self.question.is_none()
            && self.options.is_none()
            && self.answer_index.is_none()
            && self.answer.is_none()
            && self.caption.is_none()
            && self.negative_caption.is_none()
            && self.class_label.is_none()
    }
}

/// One normalized source-dataset item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: ImageRef,
    pub source: Source,
    pub partition: String,
    pub concept_kind: ConceptKind,
    pub payload: Payload,
}

impl Record {
    pub fn validate(&self) -> Vec<Violation> {
        validate_record(self)
    }
}

/// Where a shot came from. Option order is kept for multiple-choice shots so the
/// shuffle can be audited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub partition: String,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_order: Option<Vec<usize>>,
}

/// One in-context demonstration: `s1 <image> s2` answered by `response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub s1: String,
    pub s2: String,
    pub image: ImageRef,
    pub response: String,
    pub provenance: Provenance,
}

impl Shot {
    pub fn human_text(&self) -> String {
        format!("{}{}{}", self.s1, IMAGE_TAG, self.s2)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.s1.contains(IMAGE_TAG) || self.s2.contains(IMAGE_TAG) {
            out.push(Violation::ExtraImageTag);
        }
        if self.response.trim().is_empty() {
            out.push(Violation::EmptyResponse);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn { role: Role::Human, text: text.into() }
    }

    pub fn gpt(text: impl Into<String>) -> Self {
        Turn { role: Role::Gpt, text: text.into() }
    }
}

/// Ordered Human/GPT turns plus the images their `<image>` tags refer to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
    pub images: Vec<ImageRef>,
    pub task_type: TaskType,
    pub partition: String,
    pub provenance: Vec<Provenance>,
}

impl Conversation {
    pub fn validate(&self) -> Vec<Violation> {
        validate_conversation(self)
    }

    pub fn concept_kind(&self) -> ConceptKind {
        concept_kind_for_partition(&self.partition)
    }

    pub fn record_ids(&self) -> impl Iterator<Item = &str> {
        self.provenance.iter().map(|p| p.record_id.as_str())
    }
}

/// An evaluation instance: `k` context shots, one query with its answer withheld.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub task_id: String,
    pub partition: String,
    pub context_shots: Vec<Shot>,
    pub query: Shot,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub eval_mode: EvalMode,
}

impl Episode {
    pub fn validate(&self) -> Vec<Violation> {
        validate_episode(self)
    }

    pub fn record_ids(&self) -> impl Iterator<Item = &str> {
        self.context_shots.iter().chain(std::iter::once(&self.query)).map(|s| s.provenance.record_id.as_str())
    }

    /// Index of the ground-truth option for choice tasks.
    pub fn answer_index(&self) -> Option<usize> {
        self.options.as_ref()?;
        letter_index(&self.ground_truth)
    }
}

/// An invariant violation. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    PartitionEmpty,
    PartitionMalformed(String),
    PartitionSourceMismatch { partition: String, source: Source },
    PayloadEmpty,
    OptionCount { expected: usize, found: usize },
    AnswerIndexOutOfRange { index: usize, options: usize },
    MissingField(&'static str),
    DuplicateId(String),
    ExtraImageTag,
    EmptyResponse,
    NoTurns,
    RolesNotAlternating { at: usize },
    ImageTagInGptTurn { at: usize },
    TagImageMismatch { tags: usize, images: usize },
    CoherenceBroken { partitions: Vec<String> },
    MixedTaskTypes,
    ProvenanceCount { shots: usize, provenance: usize },
    QueryAnswerLeaked,
    GroundTruthNotAnOption(String),
    FineGrainedClasses { found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "id empty"),
            Violation::PartitionEmpty => write!(f, "partition empty"),
            Violation::PartitionMalformed(p) => write!(f, "partition {p:?} is not lowercase <source>/<subpartition>"),
            Violation::PartitionSourceMismatch { partition, source } => {
                write!(f, "partition {partition:?} does not belong to source {}", source.as_str())
            }
            Violation::PayloadEmpty => write!(f, "payload empty"),
            Violation::OptionCount { expected, found } => {
                write!(f, "option count ≠ {expected} (found {found})")
            }
            Violation::AnswerIndexOutOfRange { index, options } => {
                write!(f, "answer index {index} outside 0..{options}")
            }
            Violation::MissingField(name) => write!(f, "missing {name}"),
            Violation::DuplicateId(id) => write!(f, "duplicate id {id:?}"),
            Violation::ExtraImageTag => write!(f, "shot text contains an extra image tag"),
            Violation::EmptyResponse => write!(f, "empty response"),
            Violation::NoTurns => write!(f, "conversation has no turns"),
            Violation::RolesNotAlternating { at } => write!(f, "roles do not alternate at turn {at}"),
            Violation::ImageTagInGptTurn { at } => write!(f, "image tag in gpt turn {at}"),
            Violation::TagImageMismatch { tags, images } => {
                write!(f, "tag/image mismatch ({tags} tags, {images} images)")
            }
            Violation::CoherenceBroken { partitions } => {
                write!(f, "coherence broken across partitions {}", partitions.join(", "))
            }
            Violation::MixedTaskTypes => write!(f, "shots mix task types"),
            Violation::ProvenanceCount { shots, provenance } => {
                write!(f, "{shots} shots but {provenance} provenance entries")
            }
            Violation::QueryAnswerLeaked => write!(f, "query response must be withheld"),
            Violation::GroundTruthNotAnOption(gt) => write!(f, "ground truth {gt:?} does not index an option"),
            Violation::FineGrainedClasses { found } => {
                write!(f, "2-way episode context covers {found} classes, expected 2")
            }
        }
    }
}

/// Fine-grained classification datasets with a fixed partition prefix.
pub const CLASSIFICATION_DATASETS: [&str; 5] = ["dogs", "cub", "flowers", "food101", "cars"];

/// VL-Checklist partitions and the concept kind each one carries.
pub const VLC_PARTITIONS: [(&str, ConceptKind); 13] = [
    ("material", ConceptKind::Attribute),
    ("size", ConceptKind::Attribute),
    ("action", ConceptKind::Attribute),
    ("color", ConceptKind::Attribute),
    ("state", ConceptKind::Attribute),
    ("rel_action", ConceptKind::Relation),
    ("rel_spatial", ConceptKind::Relation),
    ("obj_large", ConceptKind::Category),
    ("obj_small", ConceptKind::Category),
    ("obj_medium", ConceptKind::Category),
    ("loc_center", ConceptKind::Category),
    ("loc_margin", ConceptKind::Category),
    ("loc_mid", ConceptKind::Category),
];

pub fn seed_task_kind(task: u32) -> ConceptKind {
    match task {
        1 => ConceptKind::Category,
        2 => ConceptKind::Instance,
        3 => ConceptKind::Attribute,
        4 => ConceptKind::Relation,
        5 => ConceptKind::Instance,
        6 | 7 => ConceptKind::Relation,
        _ => ConceptKind::Other,
    }
}

/// Concept kind implied by a partition name. This is the join key the mixer and
/// auditor use; it agrees with what the ingest adapters assign.
pub fn concept_kind_for_partition(partition: &str) -> ConceptKind {
    let Some((prefix, rest)) = partition.split_once('/') else {
        return ConceptKind::Other;
    };
    match prefix {
        "seed" => {
            rest.strip_prefix("task").and_then(|n| n.parse().ok()).map(seed_task_kind).unwrap_or(ConceptKind::Other)
        }
        "vlc" => {
            VLC_PARTITIONS.iter().find(|(name, _)| *name == rest).map(|(_, kind)| *kind).unwrap_or(ConceptKind::Other)
        }
        p if CLASSIFICATION_DATASETS.contains(&p) => ConceptKind::Category,
        _ => ConceptKind::Other,
    }
}

fn partition_belongs_to(partition: &str, source: Source) -> bool {
    let prefix = partition.split('/').next().unwrap_or("");
    match source {
        Source::Seed => prefix == "seed",
        Source::Vlchecklist => prefix == "vlc",
        Source::Classification => CLASSIFICATION_DATASETS.contains(&prefix),
        Source::LlavaReplay => prefix == "llava_replay",
    }
}

/// True for lowercase `<source>/<subpartition>` names.
pub fn is_well_formed_partition(partition: &str) -> bool {
    match partition.split_once('/') {
        Some((a, b)) => {
            !a.is_empty() && !b.is_empty() && !b.contains('/') && partition.chars().all(|c| !c.is_uppercase())
        }
        None => false,
    }
}

pub fn validate_record(r: &Record) -> Vec<Violation> {
    let mut out = Vec::new();
    if r.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if r.partition.is_empty() {
        out.push(Violation::PartitionEmpty);
    } else if !is_well_formed_partition(&r.partition) {
        out.push(Violation::PartitionMalformed(r.partition.clone()));
    } else if !partition_belongs_to(&r.partition, r.source) {
        out.push(Violation::PartitionSourceMismatch { partition: r.partition.clone(), source: r.source });
    }
    if r.payload.is_empty() {
        out.push(Violation::PayloadEmpty);
    }
    let p = &r.payload;
    match r.source {
        Source::Seed => {
            if p.question.is_none() {
                out.push(Violation::MissingField("question"));
            }
            match &p.options {
                Some(opts) if opts.len() != 4 => out.push(Violation::OptionCount { expected: 4, found: opts.len() }),
                Some(_) => {}
                None => out.push(Violation::OptionCount { expected: 4, found: 0 }),
            }
            match p.answer_index {
                Some(i) if i >= 4 => out.push(Violation::AnswerIndexOutOfRange { index: i, options: 4 }),
                Some(_) => {}
                None => out.push(Violation::MissingField("answer_index")),
            }
        }
        Source::Vlchecklist => {
            if p.caption.as_deref().is_none_or(str::is_empty) {
                out.push(Violation::MissingField("caption"));
            }
            if p.negative_caption.as_deref().is_none_or(str::is_empty) {
                out.push(Violation::MissingField("negative_caption"));
            }
        }
        Source::Classification => {
            if p.class_label.as_deref().is_none_or(str::is_empty) {
                out.push(Violation::MissingField("class_label"));
            }
        }
        Source::LlavaReplay => {}
    }
    out
}

/// Validates every record and additionally checks id uniqueness across the store.
pub fn validate_store(records: &[Record]) -> Vec<(String, Violation)> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        for v in validate_record(r) {
            out.push((r.id.clone(), v));
        }
        if !seen.insert(r.id.as_str()) {
            out.push((r.id.clone(), Violation::DuplicateId(r.id.clone())));
        }
    }
    out
}

pub fn validate_conversation(c: &Conversation) -> Vec<Violation> {
    let mut out = Vec::new();
    if c.turns.is_empty() {
        out.push(Violation::NoTurns);
    }
    if c.partition.is_empty() {
        out.push(Violation::PartitionEmpty);
    }
    let mut tags = 0;
    for (i, turn) in c.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::Human } else { Role::Gpt };
        if turn.role != expected {
            out.push(Violation::RolesNotAlternating { at: i });
        }
        let n = turn.text.matches(IMAGE_TAG).count();
        match turn.role {
            Role::Human => tags += n,
            Role::Gpt if n > 0 => out.push(Violation::ImageTagInGptTurn { at: i }),
            Role::Gpt => {}
        }
    }
    if tags != c.images.len() {
        out.push(Violation::TagImageMismatch { tags, images: c.images.len() });
    }
    if c.task_type != TaskType::Replay {
        let shots = c.turns.iter().filter(|t| t.role == Role::Human).count();
        if c.provenance.len() != shots {
            out.push(Violation::ProvenanceCount { shots, provenance: c.provenance.len() });
        }
        let partitions: BTreeSet<&str> =
            c.provenance.iter().map(|p| p.partition.as_str()).chain(std::iter::once(c.partition.as_str())).collect();
        if partitions.len() > 1 {
            out.push(Violation::CoherenceBroken { partitions: partitions.into_iter().map(String::from).collect() });
        }
        if c.provenance.iter().any(|p| p.task_type != c.task_type) {
            out.push(Violation::MixedTaskTypes);
        }
    }
    out
}

pub fn validate_episode(e: &Episode) -> Vec<Violation> {
    let mut out = Vec::new();
    for shot in &e.context_shots {
        out.extend(shot.validate());
    }
    if e.query.s1.contains(IMAGE_TAG) || e.query.s2.contains(IMAGE_TAG) {
        out.push(Violation::ExtraImageTag);
    }
    if !e.query.response.is_empty() {
        out.push(Violation::QueryAnswerLeaked);
    }
    if e.ground_truth.trim().is_empty() {
        out.push(Violation::MissingField("ground_truth"));
    }
    if let Some(options) = &e.options {
        match letter_index(&e.ground_truth) {
            Some(i) if i < options.len() => {}
            _ => out.push(Violation::GroundTruthNotAnOption(e.ground_truth.clone())),
        }
    }
    let in_scope =
        |p: &str| p == e.partition || p.strip_prefix(e.partition.as_str()).is_some_and(|r| r.starts_with('/'));
    let shots = || e.context_shots.iter().chain(std::iter::once(&e.query));
    let foreign: BTreeSet<&str> = shots().map(|s| s.provenance.partition.as_str()).filter(|p| !in_scope(p)).collect();
    if !foreign.is_empty() {
        let mut partitions: Vec<String> = foreign.into_iter().map(String::from).collect();
        partitions.insert(0, e.partition.clone());
        out.push(Violation::CoherenceBroken { partitions });
    }
    // Dataset-level partition means a 2-way fine-grained episode.
    if !e.partition.contains('/') && !e.context_shots.is_empty() {
        let classes: BTreeSet<&str> = e.context_shots.iter().map(|s| s.provenance.partition.as_str()).collect();
        if classes.len() != 2 || !classes.contains(e.query.provenance.partition.as_str()) {
            out.push(Violation::FineGrainedClasses { found: classes.len() });
        }
    }
    out
}

/// Letter for option `i` (`0 → 'A'`).
pub fn option_letter(i: usize) -> char {
    assert!(i < 26, "option index {i} has no letter");
    (b'A' + i as u8) as char
}

/// Inverse of [`option_letter`] for a single uppercase or lowercase letter.
pub fn letter_index(s: &str) -> Option<usize> {
    let mut chars = s.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_alphabetic() {
        return None;
    }
    Some((c.to_ascii_uppercase() as u8 - b'A') as usize)
}

/// Records grouped by partition, each group sorted by id.
pub fn group_by_partition(records: &[Record]) -> BTreeMap<String, Vec<Record>> {
    let mut groups: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for r in records {
        groups.entry(r.partition.clone()).or_default().push(r.clone());
    }
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.id.cmp(&b.id));
    }
    groups
}
