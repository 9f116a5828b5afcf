//! End-to-end generation: split records, build training pools, compose a mix, and
//! build evaluation episodes from the held-out side.

use crate::eval::EndpointConfig;
use crate::instruct::{self, BuildError, TemplateBank};
use crate::layout::BudgetConfig;
use crate::mix::{self, AuditReport, Cell, MixConfig, MixError, MixSpec};
use crate::model::{group_by_partition, ConceptKind, Conversation, Episode, ImageRef, Record, Role, Source, TaskType};
use crate::rng;
use crate::sampler::{self, SampleError, Split, SplitAssignment, SplitSpec, Suite};
use crate::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error("{0}")]
    Config(String),
}

/// What a partition's records are used for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    Train,
    Split(f64),
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPolicy {
    #[serde(default = "default_vlc_fraction")]
    pub vlc_train_fraction: f64,
    #[serde(default = "default_seed_ic_fraction")]
    pub seed_ic_train_fraction: f64,
}

fn default_vlc_fraction() -> f64 {
    0.7
}

fn default_seed_ic_fraction() -> f64 {
    0.9
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy { vlc_train_fraction: default_vlc_fraction(), seed_ic_train_fraction: default_seed_ic_fraction() }
    }
}

impl SplitPolicy {
    /// SEED tasks 1-4 train only, task 5 split, the rest of SEED held out; VL-Checklist
    /// split; classification datasets held out.
    pub fn usage(&self, partition: &str) -> Usage {
        match partition.split_once('/') {
            Some(("seed", "task1" | "task2" | "task3" | "task4")) => Usage::Train,
            Some(("seed", "task5")) => Usage::Split(self.seed_ic_train_fraction),
            Some(("vlc", _)) => Usage::Split(self.vlc_train_fraction),
            _ => Usage::Eval,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partitioned {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    pub assignments: Vec<SplitAssignment>,
}

/// Applies `policy` to every partition. Output is grouped by partition and sorted by id.
pub fn split_records(records: &[Record], policy: &SplitPolicy, seed: u64) -> Result<Partitioned, PipelineError> {
    let mut out = Partitioned::default();
    for (partition, group) in group_by_partition(records) {
        if group.iter().any(|r| r.source == Source::LlavaReplay) {
            continue;
        }
        match policy.usage(&partition) {
            Usage::Train => out.train.extend(group),
            Usage::Eval => out.test.extend(group),
            Usage::Split(fraction) => {
                let spec = SplitSpec::new(fraction, seed);
                let split = sampler::split_partition(&group, &spec)?;
                out.assignments.push(SplitAssignment::from_split(&partition, &spec, &split));
                let Split { train, test } = split;
                out.train.extend(train);
                out.test.extend(test);
            }
        }
    }
    Ok(out)
}

/// One conversation per (anchor record, format) the record supports. The anchor is the
/// last shot; up to `shots - 1` context shots come from the same partition with distinct
/// images.
pub fn build_pools(
    train: &[Record],
    bank: &TemplateBank,
    shots: usize,
    seed: u64,
) -> Result<BTreeMap<Cell, Vec<Conversation>>, PipelineError> {
    if !(1..=sampler::MAX_GROUP_SHOTS).contains(&shots) {
        return Err(SampleError::BadShotCount(shots).into());
    }
    let mut pools: BTreeMap<Cell, Vec<Conversation>> = BTreeMap::new();
    for (partition, records) in group_by_partition(train) {
        let kind = records[0].concept_kind;
        if !ConceptKind::MIXABLE.contains(&kind) {
            continue;
        }
        for format in TaskType::FORMATS {
            let eligible: Vec<Record> =
                records.iter().filter(|r| instruct::supports(r, format, bank)).cloned().collect();
            let images = eligible.iter().map(|r| &r.image).collect::<BTreeSet<_>>().len();
            let k = shots.min(images);
            let label = format!("pool:{}:{partition}", format.as_str());
            let mut sorted: Vec<&Record> = eligible.iter().collect();
            sorted.sort_by(|a, b| a.id.cmp(&b.id));
            let mut by_image: BTreeMap<&ImageRef, Vec<&Record>> = BTreeMap::new();
            for r in sorted {
                by_image.entry(&r.image).or_default().push(r);
            }
            let by_image: Vec<(&ImageRef, Vec<&Record>)> = by_image.into_iter().collect();
            for (i, anchor) in eligible.iter().enumerate() {
                let mut g = rng::stream(seed, &label, i as u64);
                let mut group = if k > 1 {
                    // Same draws as sampling from the partition minus the anchor's image.
                    let skip = by_image.binary_search_by(|(img, _)| (*img).cmp(&anchor.image)).unwrap();
                    rng::sample_indices(by_image.len() - 1, k - 1, &mut g)
                        .into_iter()
                        .map(|j| {
                            let candidates = &by_image[if j >= skip { j + 1 } else { j }].1;
                            candidates[g.random_range(0..candidates.len())].clone()
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                group.push(anchor.clone());
                let built = group
                    .iter()
                    .map(|r| instruct::build_shot(r, format, bank, &mut g))
                    .collect::<Result<Vec<_>, _>>()?;
                let conv = instruct::assemble_conversation(&built, format, &partition, shots)?;
                pools.entry((kind, format)).or_default().push(conv);
            }
        }
    }
    Ok(pools)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutput<S> {
    pub conversations: Vec<Conversation>,
    pub audit: AuditReport<S>,
    #[serde(skip)]
    pub assignments: Vec<SplitAssignment>,
}

/// Split, pool, compose and audit.
pub fn gen_train<S: Scalar>(
    records: &[Record],
    policy: &SplitPolicy,
    spec: &MixSpec<S>,
    replay: Option<&[Conversation]>,
    bank: &TemplateBank,
    shots: usize,
    seed: u64,
) -> Result<TrainOutput<S>, PipelineError> {
    let parts = split_records(records, policy, seed)?;
    let pools = build_pools(&parts.train, bank, shots, seed)?;
    let conversations = mix::compose(spec, &pools, replay)?;
    let audit = mix::audit(&conversations);
    Ok(TrainOutput { conversations, audit, assignments: parts.assignments })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOutput {
    pub episodes: Vec<Episode>,
    /// Suites or datasets with nothing to evaluate, plus skipped episode anchors.
    pub notes: Vec<String>,
}

/// Episodes for `suites` (from the held-out side) and few-shot episodes for each
/// classification dataset in `fewshot`.
pub fn gen_eval(
    records: &[Record],
    policy: &SplitPolicy,
    suites: &[Suite],
    fewshot: &[String],
    k: usize,
    seed: u64,
    bank: &TemplateBank,
) -> Result<EvalOutput, PipelineError> {
    let parts = split_records(records, policy, seed)?;
    let mut out = EvalOutput::default();
    for &suite in suites {
        let pool: Vec<Record> = parts.test.iter().filter(|r| suite.accepts(&r.partition)).cloned().collect();
        if pool.is_empty() {
            out.notes.push(format!("suite {suite}: no held-out records"));
            continue;
        }
        out.episodes.extend(sampler::build_eval_suite(&pool, suite, k, seed, bank)?);
    }
    for dataset in fewshot {
        let prefix = format!("{dataset}/");
        let pool: Vec<Record> = parts
            .test
            .iter()
            .filter(|r| r.source == Source::Classification && r.partition.starts_with(&prefix))
            .cloned()
            .collect();
        if pool.is_empty() {
            out.notes.push(format!("fewshot {dataset}: no records"));
            continue;
        }
        let suite = sampler::build_fewshot_suite(&pool, seed)?;
        out.notes.extend(suite.skips.iter().map(|(id, why)| format!("fewshot {dataset}: skipped {id}: {why}")));
        out.episodes.extend(suite.episodes);
    }
    Ok(out)
}

/// Record ids used both by a training conversation and by an evaluation episode.
pub fn leaked_ids(conversations: &[Conversation], episodes: &[Episode]) -> BTreeSet<String> {
    let train: BTreeSet<&str> = conversations.iter().flat_map(|c| c.record_ids()).collect();
    episodes.iter().flat_map(|e| e.record_ids()).filter(|id| train.contains(id)).map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlavaTurn {
    pub from: String,
    pub value: String,
}

/// A conversation in the visual-instruction-tuning JSON convention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlavaItem {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<String>>,
    pub conversations: Vec<LlavaTurn>,
}

/// Single-image conversations use `image`; multi-image ones use `images`.
pub fn to_llava(c: &Conversation, id: String) -> LlavaItem {
    let images: Vec<String> = c.images.iter().map(|i| i.0.clone()).collect();
    let (image, images) = match images.len() {
        0 => (None, None),
        1 => (images.into_iter().next(), None),
        _ => (None, Some(images)),
    };
    let conversations = c
        .turns
        .iter()
        .map(|t| LlavaTurn {
            from: match t.role {
                Role::Human => "human",
                Role::Gpt => "gpt",
            }
            .into(),
            value: t.text.clone(),
        })
        .collect();
    LlavaItem { id, image, images, conversations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_shots")]
    pub shots: usize,
}

fn default_shots() -> usize {
    instruct::DEFAULT_MAX_SHOTS
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { shots: default_shots() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub fewshot: Vec<String>,
    #[serde(default = "default_eval_shots")]
    pub k: usize,
}

fn default_eval_shots() -> usize {
    sampler::DEFAULT_EVAL_SHOTS
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { suites: Suite::ALL.to_vec(), fewshot: Vec::new(), k: default_eval_shots() }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitPolicy,
    #[serde(default)]
    pub mix: Option<MixConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub layout: Option<BudgetConfig>,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageRef, Payload};

    fn vlc(name: &str, i: usize) -> Record {
        Record {
            id: format!("vlc-{name}-{i:06}"),
            image: ImageRef::new(format!("{name}/{i}.jpg")),
            source: Source::Vlchecklist,
            partition: format!("vlc/{name}"),
            concept_kind: crate::model::concept_kind_for_partition(&format!("vlc/{name}")),
            payload: Payload {
                caption: Some(format!("a red car number {i}")),
                negative_caption: Some(format!("a blue car number {i}")),
                ..Payload::default()
            },
        }
    }

    fn seed(task: u32, i: usize) -> Record {
        Record {
            id: format!("seed-{task}-{i:05}"),
            image: ImageRef::new(format!("seed/{i}.jpg")),
            source: Source::Seed,
            partition: format!("seed/task{task}"),
            concept_kind: crate::model::seed_task_kind(task),
            payload: Payload {
                question: Some(format!("How many things {i}?")),
                options: Some(vec!["1".into(), "2".into(), "3".into(), "4".into()]),
                answer_index: Some(i % 4),
                ..Payload::default()
            },
        }
    }

    fn corpus() -> Vec<Record> {
        let mut rs: Vec<Record> = (0..40).map(|i| vlc("color", i)).collect();
        rs.extend((0..30).map(|i| vlc("rel_spatial", i)));
        rs.extend((0..30).map(|i| vlc("object", i)));
        rs.extend((0..40).map(|i| seed(5, i)));
        rs.extend((0..10).map(|i| seed(7, i)));
        rs
    }

    #[test]
    fn policy_usage() {
        let p = SplitPolicy::default();
        assert_eq!(p.usage("seed/task2"), Usage::Train);
        assert_eq!(p.usage("seed/task5"), Usage::Split(0.9));
        assert_eq!(p.usage("seed/task23"), Usage::Eval);
        assert_eq!(p.usage("vlc/size"), Usage::Split(0.7));
        assert_eq!(p.usage("dogs/pug"), Usage::Eval);
    }

    #[test]
    fn split_sides_are_image_disjoint() {
        let parts = split_records(&corpus(), &SplitPolicy::default(), 3).unwrap();
        let train: BTreeSet<(&str, &ImageRef)> = parts.train.iter().map(|r| (r.partition.as_str(), &r.image)).collect();
        assert!(parts.test.iter().all(|r| !train.contains(&(r.partition.as_str(), &r.image))));
        assert_eq!(parts.train.iter().filter(|r| r.partition == "vlc/color").count(), 28);
        assert_eq!(parts.test.iter().filter(|r| r.partition == "seed/task7").count(), 10);
        assert_eq!(parts.assignments.len(), 4);
    }

    #[test]
    fn pools_are_coherent() {
        let parts = split_records(&corpus(), &SplitPolicy::default(), 3).unwrap();
        let pools = build_pools(&parts.train, &TemplateBank::default(), 3, 3).unwrap();
        assert!(pools.contains_key(&(ConceptKind::Attribute, TaskType::Captioning)));
        assert!(!pools.contains_key(&(ConceptKind::Relation, TaskType::Captioning)));
        for (cell, convs) in &pools {
            for c in convs {
                assert!(c.validate().is_empty(), "{cell:?}: {:?}", c.validate());
                assert_eq!(c.turns.len(), 6);
                assert_eq!((c.concept_kind(), c.task_type), *cell);
            }
        }
    }

    #[test]
    fn train_and_eval_do_not_share_records() {
        let records = corpus();
        let mut spec = MixSpec::<f64>::from_percentages([50.0, 25.0, 0.0, 25.0], [50.0, 50.0, 0.0], false, 40, 9);
        spec.joint = mix::JointRule::Fitted;
        let bank = TemplateBank::default();
        let train = gen_train(&records, &SplitPolicy::default(), &spec, None, &bank, 3, 3).unwrap();
        assert_eq!(train.conversations.len(), 40);
        let eval = gen_eval(&records, &SplitPolicy::default(), &Suite::ALL, &[], 2, 3, &bank).unwrap();
        assert!(!eval.episodes.is_empty());
        assert!(eval.notes.iter().any(|n| n.contains("seed_23")));
        assert!(leaked_ids(&train.conversations, &eval.episodes).is_empty());
    }

    #[test]
    fn llava_export_shape() {
        let parts = split_records(&corpus(), &SplitPolicy::default(), 3).unwrap();
        let pools = build_pools(&parts.train, &TemplateBank::default(), 1, 3).unwrap();
        let c = &pools[&(ConceptKind::Attribute, TaskType::OpenQa)][0];
        let item = to_llava(c, "x".into());
        let json = serde_json::to_value(&item).unwrap();
        assert!(json["image"].is_string());
        assert!(json.get("images").is_none());
        assert_eq!(json["conversations"][0]["from"], "human");
    }

    #[test]
    fn config_round_trip() {
        let cfg = Config::from_toml(
            "seed = 5\n[mix]\nattributes = 100\nmultiple_choice = 100\ntarget_count = 10\n[eval]\nsuites = [\"seed_ic\"]\nfewshot = [\"dogs\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.eval.suites, vec![Suite::SeedIc]);
        assert_eq!(cfg.eval.k, 2);
        assert_eq!(cfg.train.shots, 3);
        assert!(Config::from_toml("bogus = 1").is_err());
    }
}
