//! Image-disjoint splitting, coherent k-shot groups and evaluation episodes.
//!
//! All sampling sorts its input by record id first and draws from [`rng::stream`]s keyed
//! by partition, so results depend only on the input set and the seed.

use crate::instruct::{self, build_mc_shot_with_order, build_shot, BuildError, TemplateBank};
use crate::model::{option_letter, Episode, EvalMode, ImageRef, Record, Shot, TaskType};
use crate::rng::{self, StreamRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Context shots per episode unless a suite asks otherwise.
pub const DEFAULT_EVAL_SHOTS: usize = 2;
/// Largest k-shot group a training conversation can hold.
pub const MAX_GROUP_SHOTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    #[default]
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub unit: SplitUnit,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec { train_fraction, seed, unit: SplitUnit::Image }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("partition {partition} has {images} distinct image(s); unsplittable")]
    Unsplittable { partition: String, images: usize },
    #[error("train fraction {0} outside (0, 1)")]
    FractionOutOfRange(f64),
    #[error("records span several partitions: {0:?}")]
    MixedPartitions(Vec<String>),
    #[error("partition {partition} too small: {images} distinct image(s) for {needed} shots")]
    PartitionTooSmall { partition: String, images: usize, needed: usize },
    #[error("group size {0} outside 1..={MAX_GROUP_SHOTS}")]
    BadShotCount(usize),
    #[error("class {0} has a single image")]
    SingleImageClass(String),
    #[error("{found} class(es) available; 2-way episodes need at least 2")]
    NotEnoughClasses { found: usize },
    #[error("suite {suite} cannot use partition {partition}")]
    WrongPool { suite: Suite, partition: String },
    #[error(transparent)]
    Build(#[from] BuildError),
}

fn single_partition(records: &[Record]) -> Result<String, SampleError> {
    let partitions: BTreeSet<&str> = records.iter().map(|r| r.partition.as_str()).collect();
    match partitions.len() {
        0 => Ok(String::new()),
        1 => Ok(partitions.into_iter().next().unwrap().to_string()),
        _ => Err(SampleError::MixedPartitions(partitions.into_iter().map(String::from).collect())),
    }
}

fn sorted_by_id(records: &[Record]) -> Vec<Record> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Number of training images for `n` images at `fraction`, kept within `1..n`.
pub fn train_image_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits one partition so that no image lands on both sides.
///
/// Distinct images are sorted, shuffled with `stream(seed, partition, 0)`, and the first
/// `round(train_fraction · images)` go to train.
pub fn split_partition(records: &[Record], spec: &SplitSpec) -> Result<Split, SampleError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(SampleError::FractionOutOfRange(spec.train_fraction));
    }
    let partition = single_partition(records)?;
    let mut images: Vec<&ImageRef> = records.iter().map(|r| &r.image).collect::<BTreeSet<_>>().into_iter().collect();
    if images.len() < 2 {
        return Err(SampleError::Unsplittable { partition, images: images.len() });
    }
    let mut g = rng::stream(spec.seed, &partition, 0);
    rng::shuffle(&mut images, &mut g);
    let n_train = train_image_count(images.len(), spec.train_fraction);
    let train_images: BTreeSet<&ImageRef> = images[..n_train].iter().copied().collect();
    let (train, test) = sorted_by_id(records).into_iter().partition(|r| train_images.contains(&r.image));
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Test,
}

/// Audit trail of a split, persisted as `<partition>.split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub partition: String,
    pub seed: u64,
    pub train_fraction: f64,
    pub assignments: BTreeMap<String, Side>,
}

impl SplitAssignment {
    pub fn from_split(partition: &str, spec: &SplitSpec, split: &Split) -> Self {
        let mut assignments = BTreeMap::new();
        for r in &split.train {
            assignments.insert(r.image.0.clone(), Side::Train);
        }
        for r in &split.test {
            assignments.insert(r.image.0.clone(), Side::Test);
        }
        SplitAssignment {
            partition: partition.into(),
            seed: spec.seed,
            train_fraction: spec.train_fraction,
            assignments,
        }
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.split.json", self.partition))
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, crate::jsonl::JsonlError> {
        let path = self.path_in(dir);
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        crate::jsonl::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// `k` records from one partition with pairwise distinct images.
///
/// Distinct images are drawn uniformly without replacement, then one record per chosen
/// image uniformly among the records showing it.
pub fn sample_icl_group<R: Rng + ?Sized>(pool: &[Record], k: usize, rng: &mut R) -> Result<Vec<Record>, SampleError> {
    if !(1..=MAX_GROUP_SHOTS).contains(&k) {
        return Err(SampleError::BadShotCount(k));
    }
    let partition = single_partition(pool)?;
    sample_distinct_images(&sorted_by_id(pool), k, &partition, rng)
}

fn sample_distinct_images<R: Rng + ?Sized>(
    sorted_pool: &[Record],
    k: usize,
    partition: &str,
    rng: &mut R,
) -> Result<Vec<Record>, SampleError> {
    let mut by_image: BTreeMap<&ImageRef, Vec<&Record>> = BTreeMap::new();
    for r in sorted_pool {
        by_image.entry(&r.image).or_default().push(r);
    }
    if by_image.len() < k {
        return Err(SampleError::PartitionTooSmall { partition: partition.into(), images: by_image.len(), needed: k });
    }
    let images: Vec<&Vec<&Record>> = by_image.values().collect();
    Ok(rng::sample_indices(images.len(), k, rng)
        .into_iter()
        .map(|i| {
            let candidates = images[i];
            candidates[rng.random_range(0..candidates.len())].clone()
        })
        .collect())
}

fn class_label(r: &Record) -> String {
    r.payload.class_label.clone().unwrap_or_else(|| r.partition.rsplit('/').next().unwrap_or_default().to_string())
}

fn dataset_of(partition: &str) -> &str {
    partition.split('/').next().unwrap_or(partition)
}

fn with_choice(r: &Record, options: &[String], answer: usize) -> Record {
    let mut r = r.clone();
    r.payload.options = Some(options.to_vec());
    r.payload.answer_index = Some(answer);
    r
}

fn withhold(mut query: Shot) -> (Shot, String) {
    let gt = std::mem::take(&mut query.response);
    (query, gt)
}

/// One 2-way / 1-shot episode for `query`.
///
/// Draw order: same-class record (image ≠ query image), distractor class (uniform over
/// the other classes), distractor record, then the A/B order of the two class names.
/// Context shots are listed in option order.
pub fn sample_fewshot_episode<R: Rng + ?Sized>(
    by_class: &BTreeMap<String, Vec<Record>>,
    query: &Record,
    rng: &mut R,
) -> Result<Episode, SampleError> {
    if by_class.len() < 2 {
        return Err(SampleError::NotEnoughClasses { found: by_class.len() });
    }
    let same: Vec<&Record> = by_class
        .get(&query.partition)
        .map(|rs| rs.iter().filter(|r| r.image != query.image).collect())
        .unwrap_or_default();
    if same.is_empty() {
        return Err(SampleError::SingleImageClass(query.partition.clone()));
    }
    let same_shot = same[rng.random_range(0..same.len())];
    let others: Vec<&String> = by_class.keys().filter(|c| **c != query.partition).collect();
    let other_class = others[rng.random_range(0..others.len())];
    let other_pool = &by_class[other_class];
    let other_shot = &other_pool[rng.random_range(0..other_pool.len())];

    let labels = [class_label(query), class_label(other_shot)];
    let order = rng::permutation(2, rng);
    let options: Vec<String> = order.iter().map(|&i| labels[i].clone()).collect();
    let position_of = |label_index: usize| order.iter().position(|&i| i == label_index).unwrap();

    let mut context: Vec<(usize, &Record)> = vec![(position_of(0), same_shot), (position_of(1), other_shot)];
    context.sort_by_key(|(pos, _)| *pos);
    let identity = [0, 1];
    let context_shots = context
        .into_iter()
        .map(|(pos, r)| build_mc_shot_with_order(&with_choice(r, &options, pos), &identity))
        .collect::<Result<Vec<_>, _>>()?;
    let query_shot = build_mc_shot_with_order(&with_choice(query, &options, position_of(0)), &identity)?;
    let (query_shot, ground_truth) = withhold(query_shot);
    let dataset = dataset_of(&query.partition);
    Ok(Episode {
        id: format!("fewshot/{dataset}:{}", query.id),
        task_id: format!("fewshot/{dataset}"),
        partition: dataset.to_string(),
        context_shots,
        query: query_shot,
        ground_truth,
        options: Some(options),
        eval_mode: EvalMode::ExactMatch,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FewshotSuite {
    pub episodes: Vec<Episode>,
    /// `(record id, reason)` for test images that could not anchor an episode.
    pub skips: Vec<(String, String)>,
}

/// One episode per test image of a single classification dataset.
pub fn build_fewshot_suite(records: &[Record], seed: u64) -> Result<FewshotSuite, SampleError> {
    let datasets: BTreeSet<&str> = records.iter().map(|r| dataset_of(&r.partition)).collect();
    if datasets.len() > 1 {
        return Err(SampleError::MixedPartitions(datasets.into_iter().map(String::from).collect()));
    }
    let by_class = crate::model::group_by_partition(records);
    if by_class.len() < 2 {
        return Err(SampleError::NotEnoughClasses { found: by_class.len() });
    }
    let dataset = datasets.into_iter().next().unwrap_or_default();
    let label = format!("fewshot/{dataset}");
    let mut suite = FewshotSuite::default();
    for (i, query) in sorted_by_id(records).iter().enumerate() {
        let mut g = rng::stream(seed, &label, i as u64);
        match sample_fewshot_episode(&by_class, query, &mut g) {
            Ok(e) => suite.episodes.push(e),
            Err(SampleError::SingleImageClass(class)) => {
                suite.skips.push((query.id.clone(), format!("class {class} has a single image")))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(suite)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    VlcMc,
    VlcQa,
    VlcCap,
    SeedIc,
    SeedUnseen,
    Seed23,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Seed23, Suite::SeedUnseen, Suite::SeedIc, Suite::VlcMc, Suite::VlcQa, Suite::VlcCap];

    pub fn task_id(self) -> &'static str {
        match self {
            Suite::VlcMc => "vlc_mc",
            Suite::VlcQa => "vlc_qa",
            Suite::VlcCap => "vlc_cap",
            Suite::SeedIc => "seed_ic",
            Suite::SeedUnseen => "seed_unseen",
            Suite::Seed23 => "seed_23",
        }
    }

    pub fn task_type(self) -> TaskType {
        match self {
            Suite::VlcQa => TaskType::OpenQa,
            Suite::VlcCap | Suite::Seed23 => TaskType::Captioning,
            Suite::VlcMc | Suite::SeedIc | Suite::SeedUnseen => TaskType::MultiChoice,
        }
    }

    pub fn eval_mode(self) -> EvalMode {
        match self {
            Suite::Seed23 => EvalMode::PerplexityChoice,
            _ => EvalMode::ExactMatch,
        }
    }

    /// Whether records of `partition` belong in this suite's pool.
    pub fn accepts(self, partition: &str) -> bool {
        match self {
            Suite::VlcMc | Suite::VlcQa => partition.starts_with("vlc/"),
            Suite::VlcCap => partition.starts_with("vlc/") && instruct::is_caption_partition(partition),
            Suite::SeedIc => partition == "seed/task5",
            Suite::SeedUnseen => matches!(partition, "seed/task6" | "seed/task7" | "seed/task8"),
            Suite::Seed23 => partition == "seed/task23",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.task_id())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.task_id() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

fn query_shot(
    suite: Suite,
    r: &Record,
    bank: &TemplateBank,
    g: &mut StreamRng,
) -> Result<(Shot, String, Option<Vec<String>>), SampleError> {
    match suite {
        Suite::Seed23 => {
            let shot = build_shot(r, TaskType::Captioning, bank, g)?;
            let (options, answer) = match (&r.payload.options, r.payload.answer_index) {
                (Some(o), Some(a)) if a < o.len() => (o.clone(), a),
                _ => return Err(BuildError::NotEnoughOptions(r.id.clone()).into()),
            };
            let (shot, _) = withhold(shot);
            Ok((shot, option_letter(answer).to_string(), Some(options)))
        }
        _ => {
            let shot = build_shot(r, suite.task_type(), bank, g)?;
            let options = shot.provenance.option_order.as_ref().map(|order| {
                let (_, opts, _) = instruct::mc_candidates(r).expect("mc shot was built");
                order.iter().map(|&i| opts[i].clone()).collect()
            });
            let (shot, gt) = withhold(shot);
            Ok((shot, gt, options))
        }
    }
}

/// One episode per pool record, each with `k` context shots from the query's partition
/// (never showing the query image).
pub fn build_eval_suite(
    pool: &[Record],
    suite: Suite,
    k: usize,
    seed: u64,
    bank: &TemplateBank,
) -> Result<Vec<Episode>, SampleError> {
    if k > MAX_GROUP_SHOTS {
        return Err(SampleError::BadShotCount(k));
    }
    if let Some(bad) = pool.iter().find(|r| !suite.accepts(&r.partition)) {
        return Err(SampleError::WrongPool { suite, partition: bad.partition.clone() });
    }
    let mut episodes = Vec::with_capacity(pool.len());
    for (partition, records) in crate::model::group_by_partition(pool) {
        let label = format!("{}:{partition}", suite.task_id());
        for (i, query) in records.iter().enumerate() {
            let mut g = rng::stream(seed, &label, i as u64);
            let context_records = if k == 0 {
                Vec::new()
            } else {
                let candidates: Vec<Record> = records.iter().filter(|r| r.image != query.image).cloned().collect();
                sample_distinct_images(&candidates, k, &partition, &mut g)?
            };
            let context_shots = context_records
                .iter()
                .map(|r| build_shot(r, suite.task_type(), bank, &mut g))
                .collect::<Result<Vec<_>, _>>()?;
            let (query, ground_truth, options) = query_shot(suite, query, bank, &mut g)?;
            episodes.push(Episode {
                id: format!("{}:{}", suite.task_id(), query.provenance.record_id),
                task_id: suite.task_id().into(),
                partition: partition.clone(),
                context_shots,
                query,
                ground_truth,
                options,
                eval_mode: suite.eval_mode(),
            });
        }
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_episode, ConceptKind, Payload, Source};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rec(partition: &str, id: &str, image: &str) -> Record {
        Record {
            id: id.into(),
            image: ImageRef::new(image),
            source: Source::Vlchecklist,
            partition: partition.into(),
            concept_kind: ConceptKind::Attribute,
            payload: Payload {
                caption: Some("a red car".into()),
                negative_caption: Some("a blue car".into()),
                ..Payload::default()
            },
        }
    }

    fn class_rec(class: &str, i: usize) -> Record {
        Record {
            id: format!("dogs-{class}-{i}"),
            image: ImageRef::new(format!("{class}/{i}.jpg")),
            source: Source::Classification,
            partition: format!("dogs/{class}"),
            concept_kind: ConceptKind::Category,
            payload: Payload { class_label: Some(class.to_uppercase()), ..Payload::default() },
        }
    }

    #[test]
    fn seventy_thirty_on_single_image_records() {
        let records: Vec<Record> =
            (0..100).map(|i| rec("vlc/color", &format!("r{i:03}"), &format!("{i}.jpg"))).collect();
        let split = split_partition(&records, &SplitSpec::new(0.7, 11)).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (70, 30));
    }

    #[test]
    fn shared_image_stays_on_one_side() {
        let mut records: Vec<Record> =
            (0..20).map(|i| rec("vlc/color", &format!("r{i:02}"), &format!("{i}.jpg"))).collect();
        records.push(rec("vlc/color", "dup", "3.jpg"));
        for seed in 0..20 {
            let split = split_partition(&records, &SplitSpec::new(0.5, seed)).unwrap();
            let in_train = split.train.iter().filter(|r| r.image.0 == "3.jpg").count();
            let in_test = split.test.iter().filter(|r| r.image.0 == "3.jpg").count();
            assert!(in_train == 2 && in_test == 0 || in_train == 0 && in_test == 2);
        }
    }

    #[test]
    fn split_errors() {
        let one = vec![rec("vlc/color", "a", "1.jpg"), rec("vlc/color", "b", "1.jpg")];
        assert!(matches!(
            split_partition(&one, &SplitSpec::new(0.7, 0)),
            Err(SampleError::Unsplittable { images: 1, .. })
        ));
        let mixed = vec![rec("vlc/color", "a", "1.jpg"), rec("vlc/size", "b", "2.jpg")];
        assert!(matches!(split_partition(&mixed, &SplitSpec::new(0.7, 0)), Err(SampleError::MixedPartitions(_))));
        assert!(matches!(split_partition(&mixed, &SplitSpec::new(1.0, 0)), Err(SampleError::FractionOutOfRange(_))));
    }

    #[test]
    fn split_ignores_input_order() {
        let records: Vec<Record> =
            (0..50).map(|i| rec("vlc/color", &format!("r{i:02}"), &format!("{i}.jpg"))).collect();
        let mut reversed = records.clone();
        reversed.reverse();
        let spec = SplitSpec::new(0.7, 5);
        assert_eq!(split_partition(&records, &spec).unwrap(), split_partition(&reversed, &spec).unwrap());
    }

    #[test]
    fn split_file_lists_every_image() {
        let records: Vec<Record> = (0..10).map(|i| rec("vlc/color", &format!("r{i}"), &format!("{i}.jpg"))).collect();
        let spec = SplitSpec::new(0.7, 1);
        let split = split_partition(&records, &spec).unwrap();
        let audit = SplitAssignment::from_split("vlc/color", &spec, &split);
        assert_eq!(audit.assignments.len(), 10);
        assert_eq!(audit.assignments.values().filter(|s| **s == Side::Train).count(), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = audit.write_to(dir.path()).unwrap();
        assert!(path.ends_with("vlc/color.split.json"));
    }

    #[test]
    fn group_of_three_from_ten() {
        let pool: Vec<Record> = (0..10).map(|i| rec("vlc/color", &format!("r{i}"), &format!("{i}.jpg"))).collect();
        let group = sample_icl_group(&pool, 3, &mut rng::stream(0, "g", 0)).unwrap();
        assert_eq!(group.len(), 3);
        let ids: BTreeSet<&str> = group.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 3);
        assert!(group.iter().all(|r| r.partition == "vlc/color"));
    }

    #[test]
    fn group_larger_than_pool_fails() {
        let pool: Vec<Record> = (0..2).map(|i| rec("vlc/color", &format!("r{i}"), &format!("{i}.jpg"))).collect();
        let err = sample_icl_group(&pool, 3, &mut rng::stream(0, "g", 0)).unwrap_err();
        assert!(matches!(err, SampleError::PartitionTooSmall { images: 2, needed: 3, .. }));
        assert_eq!(sample_icl_group(&pool, 0, &mut rng::stream(0, "g", 0)), Err(SampleError::BadShotCount(0)));
    }

    #[test]
    fn pairs_are_uniform() {
        let pool: Vec<Record> = (0..5).map(|i| rec("vlc/color", &format!("r{i}"), &format!("{i}.jpg"))).collect();
        // Oracle: all C(5,2) unordered pairs, equally likely.
        let mut pairs = Vec::new();
        for a in 0..5 {
            for b in a + 1..5 {
                pairs.push((format!("r{a}"), format!("r{b}")));
            }
        }
        assert_eq!(pairs.len(), 10);
        let mut counts = vec![0usize; pairs.len()];
        let mut g = rng::stream(2024, "pairs", 0);
        let draws = 10_000;
        for _ in 0..draws {
            let group = sample_icl_group(&pool, 2, &mut g).unwrap();
            let mut ids = [group[0].id.clone(), group[1].id.clone()];
            ids.sort();
            let i = pairs.iter().position(|p| p.0 == ids[0] && p.1 == ids[1]).unwrap();
            counts[i] += 1;
        }
        let expected = draws as f64 / pairs.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((pairs.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn fewshot_episode_within_enumeration() {
        // 2 classes × 2 images.
        let records = vec![class_rec("pug", 0), class_rec("pug", 1), class_rec("husky", 0), class_rec("husky", 1)];
        let by_class = crate::model::group_by_partition(&records);
        let query = &records[0];
        // Enumerate: same-class shot is forced (pug/1), distractor ∈ {husky/0, husky/1},
        // option order ∈ {[PUG, HUSKY], [HUSKY, PUG]}.
        let mut universe = BTreeSet::new();
        for distractor in ["dogs-husky-0", "dogs-husky-1"] {
            for options in [["PUG", "HUSKY"], ["HUSKY", "PUG"]] {
                let gt = if options[0] == "PUG" { "A" } else { "B" };
                let shots: Vec<&str> =
                    if options[0] == "PUG" { vec!["dogs-pug-1", distractor] } else { vec![distractor, "dogs-pug-1"] };
                universe.insert((shots.join(","), options.join(","), gt.to_string()));
            }
        }
        assert_eq!(universe.len(), 4);
        let mut seen = BTreeSet::new();
        for s in 0..200 {
            let e = sample_fewshot_episode(&by_class, query, &mut rng::stream(s, "fs", 0)).unwrap();
            assert!(validate_episode(&e).is_empty(), "{:?}", validate_episode(&e));
            let shots: Vec<&str> = e.context_shots.iter().map(|s| s.provenance.record_id.as_str()).collect();
            let key = (shots.join(","), e.options.clone().unwrap().join(","), e.ground_truth.clone());
            assert!(universe.contains(&key), "{key:?}");
            seen.insert(key);
        }
        assert_eq!(seen, universe);
    }

    #[test]
    fn fewshot_context_answers_match_their_classes() {
        let records: Vec<Record> = ["a", "b", "c"].iter().flat_map(|c| (0..3).map(move |i| class_rec(c, i))).collect();
        let suite = build_fewshot_suite(&records, 3).unwrap();
        assert_eq!(suite.episodes.len(), 9);
        for e in &suite.episodes {
            let options = e.options.as_ref().unwrap();
            for shot in &e.context_shots {
                let idx = crate::model::letter_index(&shot.response).unwrap();
                assert_eq!(options[idx], shot.provenance.partition.rsplit('/').next().unwrap().to_uppercase());
            }
        }
    }

    #[test]
    fn fewshot_single_image_class_is_skipped() {
        let records = vec![class_rec("pug", 0), class_rec("husky", 0), class_rec("husky", 1)];
        let suite = build_fewshot_suite(&records, 0).unwrap();
        assert_eq!(suite.episodes.len(), 2);
        assert_eq!(suite.skips.len(), 1);
        assert_eq!(suite.skips[0].0, "dogs-pug-0");
        assert!(matches!(build_fewshot_suite(&records[..1], 0), Err(SampleError::NotEnoughClasses { found: 1 })));
    }

    #[test]
    fn k_zero_episodes_have_empty_context() {
        let pool: Vec<Record> = (0..6).map(|i| rec("vlc/color", &format!("r{i}"), &format!("{i}.jpg"))).collect();
        let episodes = build_eval_suite(&pool, Suite::VlcMc, 0, 1, &TemplateBank::default()).unwrap();
        assert_eq!(episodes.len(), 6);
        for e in &episodes {
            assert!(e.context_shots.is_empty());
            assert!(validate_episode(e).is_empty());
        }
    }

    #[test]
    fn vlc_cap_rejects_non_caption_partition() {
        let pool = vec![rec("vlc/rel_spatial", "a", "1.jpg")];
        let err = build_eval_suite(&pool, Suite::VlcCap, 2, 0, &TemplateBank::default()).unwrap_err();
        assert!(matches!(err, SampleError::WrongPool { suite: Suite::VlcCap, .. }));
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.task_id().parse::<Suite>().unwrap(), s);
        }
        assert!("vlc-mc".parse::<Suite>().is_ok());
        assert!("mme".parse::<Suite>().is_err());
    }
}
