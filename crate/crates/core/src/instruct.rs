//! Turns records into shots of the three ICL task types and assembles multi-turn
//! conversations.
//!
//! Wording of questions and caption requests is this toolkit's own and is versioned
//! through [`TemplateBank::version`].

use crate::model::{option_letter, Conversation, Provenance, Record, Shot, Source, TaskType, Turn, IMAGE_TAG};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Shots per conversation allowed by the default context budget.
pub const DEFAULT_MAX_SHOTS: usize = 3;

pub const TEMPLATE_BANK_VERSION: &str = "icl-templates-1";

/// Partitions whose positive captions are used for ICL captioning.
pub const CAPTION_PARTITIONS: [&str; 7] =
    ["vlc/color", "vlc/state", "vlc/material", "vlc/size", "vlc/action", "vlc/rel_action", "seed/task23"];

const MC_SUFFIX: &str = "Answer with the option's letter from the given choices directly.";
const BLANK_FRAME: &str = "Fill in the blank to describe <image>: \"{blanked}\"";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub version: String,
    pub caption_templates: Vec<String>,
    /// Question frame per VL-Checklist partition name. A frame holds exactly one
    /// `<image>` and may use `{subject}` (shared caption tail) or `{blanked}` (positive
    /// caption with the varying span replaced by `___`).
    pub qa_frames: BTreeMap<String, String>,
}

impl Default for TemplateBank {
    fn default() -> Self {
        let caption_templates = [
            "Describe the image concisely.",
            "Provide a brief description of the given image.",
            "Offer a succinct explanation of the picture presented.",
            "Summarize the visual content of the image.",
            "Give a short and clear explanation of the subsequent image.",
            "Share a concise interpretation of the image provided.",
            "Present a compact description of the photo's key features.",
            "Write a terse but informative summary of the picture.",
        ]
        .map(String::from)
        .to_vec();
        let qa_frames = [
            ("color", "What color is the {subject} in <image>?"),
            ("material", "What material is the {subject} made of in <image>?"),
            ("size", "What size is the {subject} in <image>?"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        TemplateBank { version: TEMPLATE_BANK_VERSION.into(), caption_templates, qa_frames }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("record {0} has no payload convertible to an open question")]
    NotQaConvertible(String),
    #[error("record {0} has fewer than two candidate answers")]
    NotEnoughOptions(String),
    #[error("record {id} repeats option {option:?}")]
    DuplicateOption { id: String, option: String },
    #[error("option order {0:?} is not a permutation of the record's options")]
    BadOrder(Vec<usize>),
    #[error("partition {0} is not captioning-enabled")]
    NotCaptionPartition(String),
    #[error("record {0} has no caption")]
    MissingCaption(String),
    #[error("conversation needs at least one shot")]
    NoShots,
    #[error("{shots} shots exceed the budget of {max}")]
    OverBudget { shots: usize, max: usize },
    #[error("shots mix task types")]
    MixedTaskTypes,
    #[error("shots come from partitions {0:?}")]
    Incoherent(Vec<String>),
    #[error("invalid shot from record {id}: {reason}")]
    InvalidShot { id: String, reason: String },
}

fn provenance(r: &Record, task_type: TaskType, option_order: Option<Vec<usize>>) -> Provenance {
    Provenance { record_id: r.id.clone(), partition: r.partition.clone(), task_type, option_order }
}

/// Minimal token-level difference between two captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionDiff {
    pub prefix: Vec<String>,
    pub positive_span: Vec<String>,
    pub negative_span: Vec<String>,
    pub suffix: Vec<String>,
}

/// Splits two captions into shared prefix, differing spans and shared suffix.
pub fn caption_diff(positive: &str, negative: &str) -> CaptionDiff {
    let pos: Vec<&str> = positive.split_whitespace().collect();
    let neg: Vec<&str> = negative.split_whitespace().collect();
    let prefix = pos.iter().zip(&neg).take_while(|(a, b)| a == b).count();
    let max_suffix = pos.len().min(neg.len()) - prefix;
    let suffix = pos.iter().rev().zip(neg.iter().rev()).take(max_suffix).take_while(|(a, b)| a == b).count();
    let owned = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    CaptionDiff {
        prefix: owned(&pos[..prefix]),
        positive_span: owned(&pos[prefix..pos.len() - suffix]),
        negative_span: owned(&neg[prefix..neg.len() - suffix]),
        suffix: owned(&pos[pos.len() - suffix..]),
    }
}

fn split_frame(frame: &str) -> (String, String) {
    let (s1, s2) = frame.split_once(IMAGE_TAG).expect("frames carry one image tag");
    (s1.to_string(), s2.to_string())
}

fn vlc_question(r: &Record, bank: &TemplateBank) -> Option<(String, String, String)> {
    let pos = r.payload.caption.as_deref()?;
    let neg = r.payload.negative_caption.as_deref()?;
    let diff = caption_diff(pos, neg);
    if diff.positive_span.is_empty() {
        return None;
    }
    let name = r.partition.strip_prefix("vlc/").unwrap_or(&r.partition);
    let subject = diff.suffix.join(" ");
    let frame = match bank.qa_frames.get(name) {
        Some(f) if !(f.contains("{subject}") && subject.is_empty()) => f.as_str(),
        _ => BLANK_FRAME,
    };
    let blanked = diff.prefix.iter().map(String::as_str).chain(["___"]).chain(diff.suffix.iter().map(String::as_str));
    let blanked = blanked.collect::<Vec<_>>().join(" ");
    let text = frame.replace("{subject}", &subject).replace("{blanked}", &blanked);
    let (s1, s2) = split_frame(&text);
    Some((s1, s2, diff.positive_span.join(" ")))
}

/// Open question around the image; the response is natural-language text.
pub fn build_open_qa_shot<R: Rng + ?Sized>(r: &Record, bank: &TemplateBank, _rng: &mut R) -> Result<Shot, BuildError> {
    let p = &r.payload;
    let (s1, s2, response) = match r.source {
        Source::Vlchecklist => vlc_question(r, bank).ok_or_else(|| BuildError::NotQaConvertible(r.id.clone()))?,
        Source::Classification => {
            let label = p.class_label.clone().ok_or_else(|| BuildError::NotQaConvertible(r.id.clone()))?;
            ("What is the name of the category shown in ".into(), "?".into(), label)
        }
        _ => {
            let question = p.question.clone().ok_or_else(|| BuildError::NotQaConvertible(r.id.clone()))?;
            let answer = match (&p.options, p.answer_index, &p.answer) {
                (_, _, Some(a)) => a.clone(),
                (Some(opts), Some(i), None) if i < opts.len() => opts[i].clone(),
                _ => return Err(BuildError::NotQaConvertible(r.id.clone())),
            };
            (String::new(), format!("\n{question}"), answer)
        }
    };
    if response.trim().is_empty() {
        return Err(BuildError::NotQaConvertible(r.id.clone()));
    }
    Ok(Shot { s1, s2, image: r.image.clone(), response, provenance: provenance(r, TaskType::OpenQa, None) })
}

/// Question, candidate answers and the index of the correct one.
pub fn mc_candidates(r: &Record) -> Result<(String, Vec<String>, usize), BuildError> {
    let p = &r.payload;
    let (question, options, correct) = match (r.source, &p.options, p.answer_index) {
        (Source::Vlchecklist, None, _) => {
            let pos = p.caption.clone().ok_or_else(|| BuildError::NotEnoughOptions(r.id.clone()))?;
            let neg = p.negative_caption.clone().ok_or_else(|| BuildError::NotEnoughOptions(r.id.clone()))?;
            ("Which caption describes the image?".to_string(), vec![pos, neg], 0)
        }
        (Source::Classification, Some(opts), Some(i)) => {
            ("What is the category of the object in the image?".to_string(), opts.clone(), i)
        }
        (_, Some(opts), Some(i)) => {
            let q = p.question.clone().unwrap_or_else(|| "Which option is correct?".into());
            (q, opts.clone(), i)
        }
        _ => return Err(BuildError::NotEnoughOptions(r.id.clone())),
    };
    if options.len() < 2 || correct >= options.len() {
        return Err(BuildError::NotEnoughOptions(r.id.clone()));
    }
    let mut seen = BTreeSet::new();
    for o in &options {
        if !seen.insert(o.as_str()) {
            return Err(BuildError::DuplicateOption { id: r.id.clone(), option: o.clone() });
        }
    }
    Ok((question, options, correct))
}

/// `s2` body of a multiple-choice shot: question, lettered options, answer instruction.
pub fn format_choices(question: &str, options: &[String]) -> String {
    let mut s = format!("\n{question}\n");
    for (i, o) in options.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", option_letter(i), o));
    }
    s.push_str(MC_SUFFIX);
    s
}

/// Multiple-choice shot with options shown in `order` (`order[j]` is the original index
/// displayed at position `j`).
pub fn build_mc_shot_with_order(r: &Record, order: &[usize]) -> Result<Shot, BuildError> {
    let (question, options, correct) = mc_candidates(r)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..options.len()).collect::<Vec<_>>() {
        return Err(BuildError::BadOrder(order.to_vec()));
    }
    let shown: Vec<String> = order.iter().map(|&i| options[i].clone()).collect();
    let position = order.iter().position(|&i| i == correct).unwrap();
    Ok(Shot {
        s1: String::new(),
        s2: format_choices(&question, &shown),
        image: r.image.clone(),
        response: option_letter(position).to_string(),
        provenance: provenance(r, TaskType::MultiChoice, Some(order.to_vec())),
    })
}

/// Multiple-choice shot with options in a random order drawn by [`rng::permutation`].
pub fn build_mc_shot<R: Rng + ?Sized>(r: &Record, rng: &mut R) -> Result<Shot, BuildError> {
    let (_, options, _) = mc_candidates(r)?;
    let order = rng::permutation(options.len(), rng);
    build_mc_shot_with_order(r, &order)
}

pub fn is_caption_partition(partition: &str) -> bool {
    CAPTION_PARTITIONS.contains(&partition)
}

/// Describe-the-image request answered by the record's positive caption.
pub fn build_caption_shot<R: Rng + ?Sized>(r: &Record, bank: &TemplateBank, rng: &mut R) -> Result<Shot, BuildError> {
    if !is_caption_partition(&r.partition) {
        return Err(BuildError::NotCaptionPartition(r.partition.clone()));
    }
    let p = &r.payload;
    let caption = match (&p.caption, &p.options, p.answer_index) {
        (Some(c), _, _) => c.clone(),
        (None, Some(opts), Some(i)) if i < opts.len() => opts[i].clone(),
        _ => return Err(BuildError::MissingCaption(r.id.clone())),
    };
    let template = &bank.caption_templates[rng.random_range(0..bank.caption_templates.len())];
    Ok(Shot {
        s1: format!("{template}\n"),
        s2: String::new(),
        image: r.image.clone(),
        response: caption,
        provenance: provenance(r, TaskType::Captioning, None),
    })
}

pub fn build_shot<R: Rng + ?Sized>(
    r: &Record,
    task_type: TaskType,
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<Shot, BuildError> {
    match task_type {
        TaskType::OpenQa => build_open_qa_shot(r, bank, rng),
        TaskType::MultiChoice => build_mc_shot(r, rng),
        TaskType::Captioning => build_caption_shot(r, bank, rng),
        TaskType::Replay => Err(BuildError::NotQaConvertible(r.id.clone())),
    }
}

/// Whether `build_shot(r, task_type, ..)` can succeed for this record.
pub fn supports(r: &Record, task_type: TaskType, bank: &TemplateBank) -> bool {
    match task_type {
        TaskType::OpenQa => build_open_qa_shot(r, bank, &mut rng::stream(0, "", 0)).is_ok(),
        TaskType::MultiChoice => mc_candidates(r).is_ok(),
        TaskType::Captioning => is_caption_partition(&r.partition),
        TaskType::Replay => false,
    }
}

/// `Human: s1<image>s2` / `GPT: response` for each shot, images in shot order.
pub fn assemble_conversation(
    shots: &[Shot],
    task_type: TaskType,
    partition: &str,
    max_shots: usize,
) -> Result<Conversation, BuildError> {
    if shots.is_empty() {
        return Err(BuildError::NoShots);
    }
    if shots.len() > max_shots {
        return Err(BuildError::OverBudget { shots: shots.len(), max: max_shots });
    }
    if shots.iter().any(|s| s.provenance.task_type != task_type) {
        return Err(BuildError::MixedTaskTypes);
    }
    let partitions: BTreeSet<&str> = shots.iter().map(|s| s.provenance.partition.as_str()).chain([partition]).collect();
    if partitions.len() > 1 {
        return Err(BuildError::Incoherent(partitions.into_iter().map(String::from).collect()));
    }
    let mut turns = Vec::with_capacity(shots.len() * 2);
    for s in shots {
        if let Some(v) = s.validate().first() {
            return Err(BuildError::InvalidShot { id: s.provenance.record_id.clone(), reason: v.to_string() });
        }
        turns.push(Turn::human(s.human_text()));
        turns.push(Turn::gpt(&s.response));
    }
    Ok(Conversation {
        turns,
        images: shots.iter().map(|s| s.image.clone()).collect(),
        task_type,
        partition: partition.to_string(),
        provenance: shots.iter().map(|s| s.provenance.clone()).collect(),
    })
}
