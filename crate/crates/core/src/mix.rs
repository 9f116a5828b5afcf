//! Corpus composition from concept-kind × instruction-format pools.
//!
//! Joint cell quotas are the product of the two marginal ratios, rounded with the
//! largest-remainder method so they add up to `target_count` exactly.

use crate::model::{ConceptKind, Conversation, TaskType};
use crate::rng;
use crate::scalar::{fraction, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

pub type Cell = (ConceptKind, TaskType);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec<S> {
    pub concept_ratios: BTreeMap<ConceptKind, S>,
    pub format_ratios: BTreeMap<TaskType, S>,
    pub include_replay: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_source: Option<PathBuf>,
    pub target_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub joint: JointRule,
}

/// How marginal ratios become per-cell weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointRule {
    /// Product of the two marginals.
    #[default]
    Independent,
    /// Product of the marginals restricted to cells with supply, rescaled by iterative
    /// proportional fitting until both marginals hold again.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub cell: Cell,
    pub needed: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MixError {
    #[error("invalid mix: {0}")]
    Invalid(String),
    #[error("undersupplied cells:\n{}", ShortfallTable(.0))]
    Undersupplied(Vec<Shortfall>),
    #[error("mix includes replay data but none was supplied")]
    MissingReplay,
}

struct ShortfallTable<'a>(&'a [Shortfall]);

impl fmt::Display for ShortfallTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<13} {:>8} {:>10} {:>9}", "concept", "format", "needed", "available", "shortfall")?;
        for s in self.0 {
            writeln!(
                f,
                "{:<10} {:<13} {:>8} {:>10} {:>9}",
                s.cell.0.as_str(),
                s.cell.1.as_str(),
                s.needed,
                s.available,
                s.needed - s.available
            )?;
        }
        Ok(())
    }
}

impl<S: Scalar> MixSpec<S> {
    /// Builds a spec from percentages in the column order of the ablation table:
    /// attributes, relations, categories, instances; open questions, multiple choice,
    /// captioning.
    pub fn from_percentages(
        concepts: [f64; 4],
        formats: [f64; 3],
        include_replay: bool,
        target_count: usize,
        seed: u64,
    ) -> Self {
        let pct = |v: f64| S::from_f64(v).unwrap() / S::hundred();
        MixSpec {
            concept_ratios: ConceptKind::MIXABLE.into_iter().zip(concepts.map(pct)).collect(),
            format_ratios: TaskType::FORMATS.into_iter().zip(formats.map(pct)).collect(),
            include_replay,
            replay_source: None,
            target_count,
            seed,
            joint: JointRule::Independent,
        }
    }

    /// Rows of the data-mix ablation table. Row 6 has concept ratios
    /// summing to 99.54%, so it is renormalized.
    pub fn ablation_row(row: u8, target_count: usize, seed: u64) -> Option<Self> {
        let (concepts, formats, replay) = match row {
            1 => ([0.0, 0.0, 0.0, 100.0], [0.0, 100.0, 0.0], false),
            2 => ([0.0, 0.0, 0.0, 100.0], [0.0, 100.0, 0.0], true),
            3 => ([66.67, 0.0, 0.0, 33.33], [50.0, 50.0, 0.0], true),
            4 => ([75.0, 12.5, 0.0, 12.5], [65.0, 5.0, 30.0], true),
            5 => ([45.45, 15.15, 36.36, 3.04], [39.40, 42.42, 18.18], true),
            6 => ([46.87, 15.62, 37.05, 0.0], [40.625, 40.625, 18.75], true),
            7 => ([45.45, 15.15, 36.36, 3.04], [39.40, 42.42, 18.18], false),
            _ => return None,
        };
        Some(Self::from_percentages(concepts, formats, replay, target_count, seed).normalized())
    }

    /// Each ratio group divided by its own sum.
    pub fn normalized(mut self) -> Self {
        fn norm<K, S: Scalar>(m: &mut BTreeMap<K, S>) {
            let sum = m.values().fold(S::zero(), |a, &b| a + b);
            if sum > S::zero() {
                m.values_mut().for_each(|v| *v = *v / sum);
            }
        }
        norm(&mut self.concept_ratios);
        norm(&mut self.format_ratios);
        self
    }

    pub fn validate(&self) -> Result<(), MixError> {
        fn group<K: fmt::Debug + PartialEq, S: Scalar>(
            name: &str,
            m: &BTreeMap<K, S>,
            allowed: &[K],
        ) -> Result<(), MixError> {
            let mut sum = S::zero();
            for (k, &v) in m {
                if !allowed.contains(k) {
                    return Err(MixError::Invalid(format!("{name} ratio for {k:?} is not allowed")));
                }
                if !(v >= S::zero() && v <= S::one()) {
                    return Err(MixError::Invalid(format!("{name} ratio for {k:?} is {v}, outside [0, 1]")));
                }
                sum = sum + v;
            }
            if (sum - S::one()).abs() > S::sum_tolerance() {
                return Err(MixError::Invalid(format!("{name} ratios sum to {sum}, not 1")));
            }
            Ok(())
        }
        group("concept", &self.concept_ratios, &ConceptKind::MIXABLE)?;
        group("format", &self.format_ratios, &TaskType::FORMATS)
    }

    pub fn concept_ratio(&self, kind: ConceptKind) -> S {
        self.concept_ratios.get(&kind).copied().unwrap_or_else(S::zero)
    }

    pub fn format_ratio(&self, format: TaskType) -> S {
        self.format_ratios.get(&format).copied().unwrap_or_else(S::zero)
    }

    /// Joint quota per concept × format cell under the independent rule; quotas sum to
    /// `target_count`.
    pub fn cell_quotas(&self) -> BTreeMap<Cell, usize> {
        let weights: Vec<S> = all_cells().iter().map(|&(k, f)| self.concept_ratio(k) * self.format_ratio(f)).collect();
        all_cells().into_iter().zip(largest_remainder(&weights, self.target_count)).collect()
    }

    /// Joint quotas under `self.joint`, where `supported` lists the cells that have any
    /// supply. The independent rule ignores `supported`.
    pub fn cell_quotas_given(&self, supported: &BTreeSet<Cell>) -> Result<BTreeMap<Cell, usize>, MixError> {
        match self.joint {
            JointRule::Independent => Ok(self.cell_quotas()),
            JointRule::Fitted => {
                let weights = self.fitted_weights(supported)?;
                let w: Vec<S> = all_cells().iter().map(|c| weights[c]).collect();
                Ok(all_cells().into_iter().zip(largest_remainder(&w, self.target_count)).collect())
            }
        }
    }

    /// Iterative proportional fitting of the masked product to both marginals.
    pub fn fitted_weights(&self, supported: &BTreeSet<Cell>) -> Result<BTreeMap<Cell, S>, MixError> {
        let mut w: BTreeMap<Cell, S> = all_cells()
            .into_iter()
            .map(|c| {
                let p =
                    if supported.contains(&c) { self.concept_ratio(c.0) * self.format_ratio(c.1) } else { S::zero() };
                (c, p)
            })
            .collect();
        let sum_where = |w: &BTreeMap<Cell, S>, pred: &dyn Fn(&Cell) -> bool| {
            w.iter().filter(|(c, _)| pred(c)).fold(S::zero(), |a, (_, &v)| a + v)
        };
        for (kind, target) in ConceptKind::MIXABLE.map(|k| (k, self.concept_ratio(k))) {
            if target > S::zero() && sum_where(&w, &|c| c.0 == kind) <= S::zero() {
                return Err(MixError::Invalid(format!("no supported cell for concept {}", kind.as_str())));
            }
        }
        for (format, target) in TaskType::FORMATS.map(|f| (f, self.format_ratio(f))) {
            if target > S::zero() && sum_where(&w, &|c| c.1 == format) <= S::zero() {
                return Err(MixError::Invalid(format!("no supported cell for format {}", format.as_str())));
            }
        }
        let tolerance = S::sum_tolerance();
        for _ in 0..10_000 {
            for kind in ConceptKind::MIXABLE {
                let have = sum_where(&w, &|c| c.0 == kind);
                if have > S::zero() {
                    let scale = self.concept_ratio(kind) / have;
                    w.iter_mut().filter(|(c, _)| c.0 == kind).for_each(|(_, v)| *v = *v * scale);
                }
            }
            let mut worst = S::zero();
            for format in TaskType::FORMATS {
                let have = sum_where(&w, &|c| c.1 == format);
                worst = worst.max((have - self.format_ratio(format)).abs());
                if have > S::zero() {
                    let scale = self.format_ratio(format) / have;
                    w.iter_mut().filter(|(c, _)| c.1 == format).for_each(|(_, v)| *v = *v * scale);
                }
            }
            if worst <= tolerance {
                return Ok(w);
            }
        }
        Err(MixError::Invalid("marginals cannot be met with the supported cells".into()))
    }
}

fn all_cells() -> Vec<Cell> {
    ConceptKind::MIXABLE.into_iter().flat_map(|k| TaskType::FORMATS.into_iter().map(move |f| (k, f))).collect()
}

/// Apportions `total` units across `weights` (normalized by their sum) with the
/// largest-remainder method. Ties go to the earlier index; zero weights get nothing.
pub fn largest_remainder<S: Scalar>(weights: &[S], total: usize) -> Vec<usize> {
    let sum = weights.iter().fold(S::zero(), |a, &b| a + b);
    if sum <= S::zero() || total == 0 {
        return vec![0; weights.len()];
    }
    let total_s = S::from_usize_lossy(total);
    let exact: Vec<S> = weights.iter().map(|&w| w / sum * total_s).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor().to_usize().unwrap_or(0)).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > S::zero()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

fn canonical_key(c: &Conversation) -> String {
    serde_json::to_string(c).expect("conversations serialize")
}

/// Selects each cell's quota from its pool and appends replay data, then shuffles the
/// whole corpus with the mix seed.
///
/// Pools are sorted by their canonical JSON before sampling, so the input order of a
/// pool never changes the result.
pub fn compose<S: Scalar>(
    spec: &MixSpec<S>,
    pools: &BTreeMap<Cell, Vec<Conversation>>,
    replay: Option<&[Conversation]>,
) -> Result<Vec<Conversation>, MixError> {
    spec.validate()?;
    let supported: BTreeSet<Cell> = pools.iter().filter(|(_, p)| !p.is_empty()).map(|(c, _)| *c).collect();
    let quotas = spec.cell_quotas_given(&supported)?;
    let shortfalls: Vec<Shortfall> = quotas
        .iter()
        .filter_map(|(&cell, &needed)| {
            let available = pools.get(&cell).map_or(0, Vec::len);
            (needed > available).then_some(Shortfall { cell, needed, available })
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(MixError::Undersupplied(shortfalls));
    }
    let replay = match (spec.include_replay, replay) {
        (true, Some(r)) => r,
        (true, None) => return Err(MixError::MissingReplay),
        (false, _) => &[],
    };

    let mut out = Vec::with_capacity(spec.target_count + replay.len());
    for (&(kind, format), &quota) in &quotas {
        if quota == 0 {
            continue;
        }
        let mut pool: Vec<(String, &Conversation)> =
            pools[&(kind, format)].iter().map(|c| (canonical_key(c), c)).collect();
        pool.sort_by(|a, b| a.0.cmp(&b.0));
        let mut g = rng::stream(spec.seed, &format!("cell:{}/{}", kind.as_str(), format.as_str()), 0);
        out.extend(rng::sample_indices(pool.len(), quota, &mut g).into_iter().map(|i| pool[i].1.clone()));
    }
    out.extend(replay.iter().cloned());
    rng::shuffle(&mut out, &mut rng::stream(spec.seed, "mix", 0));
    Ok(out)
}

/// Realized composition of a corpus. Concept and format ratios are over ICL
/// (non-replay) conversations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport<S> {
    pub total: usize,
    pub icl_count: usize,
    pub replay_count: usize,
    pub replay_fraction: S,
    pub concept_ratios: BTreeMap<ConceptKind, S>,
    pub format_ratios: BTreeMap<TaskType, S>,
    pub cell_counts: BTreeMap<String, usize>,
    pub partition_counts: BTreeMap<String, usize>,
}

impl<S: Scalar> AuditReport<S> {
    /// Largest absolute gap to the spec's marginals, in percentage points.
    pub fn max_deviation_pp(&self, spec: &MixSpec<S>) -> S {
        let concept = ConceptKind::MIXABLE
            .iter()
            .map(|k| (self.concept_ratios.get(k).copied().unwrap_or_else(S::zero) - spec.concept_ratio(*k)).abs());
        let format = TaskType::FORMATS
            .iter()
            .map(|f| (self.format_ratios.get(f).copied().unwrap_or_else(S::zero) - spec.format_ratio(*f)).abs());
        concept.chain(format).fold(S::zero(), S::max) * S::hundred()
    }
}

pub fn audit<S: Scalar>(mix: &[Conversation]) -> AuditReport<S> {
    let mut concept_counts: BTreeMap<ConceptKind, usize> = ConceptKind::MIXABLE.iter().map(|&k| (k, 0)).collect();
    let mut format_counts: BTreeMap<TaskType, usize> = TaskType::FORMATS.iter().map(|&f| (f, 0)).collect();
    let mut cell_counts = BTreeMap::new();
    let mut partition_counts = BTreeMap::new();
    let mut replay_count = 0;
    for c in mix {
        *partition_counts.entry(c.partition.clone()).or_insert(0) += 1;
        if c.task_type == TaskType::Replay {
            replay_count += 1;
            continue;
        }
        let kind = c.concept_kind();
        *concept_counts.entry(kind).or_insert(0) += 1;
        *format_counts.entry(c.task_type).or_insert(0) += 1;
        *cell_counts.entry(format!("{}/{}", kind.as_str(), c.task_type.as_str())).or_insert(0) += 1;
    }
    let icl_count = mix.len() - replay_count;
    AuditReport {
        total: mix.len(),
        icl_count,
        replay_count,
        replay_fraction: fraction(replay_count, mix.len()),
        concept_ratios: concept_counts.into_iter().map(|(k, n)| (k, fraction(n, icl_count))).collect(),
        format_ratios: format_counts.into_iter().map(|(f, n)| (f, fraction(n, icl_count))).collect(),
        cell_counts,
        partition_counts,
    }
}

/// Mix section of a config file. Ratios are percentages, matching the columns of the
/// data-mix ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub llava_data: bool,
    #[serde(default)]
    pub attributes: f64,
    #[serde(default)]
    pub relations: f64,
    #[serde(default)]
    pub categories: f64,
    #[serde(default)]
    pub instances: f64,
    #[serde(default)]
    pub open_questions: f64,
    #[serde(default)]
    pub multiple_choice: f64,
    #[serde(default)]
    pub captioning: f64,
    pub target_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replay_source: Option<PathBuf>,
    /// Divide each ratio group by its sum before validation.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub joint: JointRule,
}

impl MixConfig {
    pub fn to_spec<S: Scalar>(&self) -> Result<MixSpec<S>, MixError> {
        let mut spec = MixSpec::from_percentages(
            [self.attributes, self.relations, self.categories, self.instances],
            [self.open_questions, self.multiple_choice, self.captioning],
            self.llava_data,
            self.target_count,
            self.seed,
        );
        spec.replay_source = self.replay_source.clone();
        spec.joint = self.joint;
        if self.normalize {
            spec = spec.normalized();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, Turn};

    fn conv(partition: &str, task_type: TaskType, i: usize) -> Conversation {
        Conversation {
            turns: vec![Turn::human(format!("q{i} <image>")), Turn::gpt(format!("a{i}"))],
            images: vec![crate::model::ImageRef::new(format!("{partition}/{i}.jpg"))],
            task_type,
            partition: partition.into(),
            provenance: vec![Provenance {
                record_id: format!("{partition}-{i}"),
                partition: partition.into(),
                task_type,
                option_order: None,
            }],
        }
    }

    fn partition_for(kind: ConceptKind) -> &'static str {
        match kind {
            ConceptKind::Attribute => "vlc/color",
            ConceptKind::Relation => "vlc/rel_action",
            ConceptKind::Category => "vlc/obj_large",
            _ => "seed/task5",
        }
    }

    fn pools(per_cell: usize) -> BTreeMap<Cell, Vec<Conversation>> {
        let mut out = BTreeMap::new();
        for kind in ConceptKind::MIXABLE {
            for format in TaskType::FORMATS {
                out.insert((kind, format), (0..per_cell).map(|i| conv(partition_for(kind), format, i)).collect());
            }
        }
        out
    }

    #[test]
    fn largest_remainder_hits_total() {
        assert_eq!(largest_remainder(&[0.5f64, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[1.0f64, 0.0, 0.0], 7), vec![7, 0, 0]);
        assert_eq!(largest_remainder(&[0.1f64, 0.2, 0.7], 0), vec![0, 0, 0]);
        let q = largest_remainder(&[0.4545f64, 0.1515, 0.3636, 0.0304], 1001);
        assert_eq!(q.iter().sum::<usize>(), 1001);
    }

    #[test]
    fn table_rows_validate() {
        for row in 1..=7 {
            let spec = MixSpec::<f64>::ablation_row(row, 100, 0).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.cell_quotas().values().sum::<usize>(), 100);
        }
        assert!(MixSpec::<f32>::ablation_row(5, 10, 0).unwrap().validate().is_ok());
        assert!(MixSpec::<f64>::ablation_row(8, 10, 0).is_none());
    }

    #[test]
    fn unnormalized_row_six_is_rejected() {
        let spec = MixSpec::<f64>::from_percentages([46.87, 15.62, 37.05, 0.0], [40.625, 40.625, 18.75], true, 10, 0);
        assert!(matches!(spec.validate(), Err(MixError::Invalid(_))));
    }

    #[test]
    fn mix_two_is_all_instance_multiple_choice() {
        let spec = MixSpec::<f64>::ablation_row(2, 500, 3).unwrap();
        let replay: Vec<Conversation> = (0..40).map(|i| conv("llava_replay/default", TaskType::Replay, i)).collect();
        let out = compose(&spec, &pools(600), Some(&replay)).unwrap();
        assert_eq!(out.len(), 540);
        for c in out.iter().filter(|c| c.task_type != TaskType::Replay) {
            assert_eq!((c.concept_kind(), c.task_type), (ConceptKind::Instance, TaskType::MultiChoice));
        }
    }

    #[test]
    fn replay_only() {
        let mut spec = MixSpec::<f64>::ablation_row(2, 0, 1).unwrap();
        spec.target_count = 0;
        let replay: Vec<Conversation> = (0..25).map(|i| conv("llava_replay/default", TaskType::Replay, i)).collect();
        let out = compose(&spec, &BTreeMap::new(), Some(&replay)).unwrap();
        let mut a: Vec<String> = out.iter().map(canonical_key).collect();
        let mut b: Vec<String> = replay.iter().map(canonical_key).collect();
        assert_ne!(a, b, "expected a shuffled order");
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_replay_is_an_error() {
        let spec = MixSpec::<f64>::ablation_row(2, 10, 1).unwrap();
        assert_eq!(compose(&spec, &pools(20), None), Err(MixError::MissingReplay));
    }

    #[test]
    fn undersupply_lists_each_cell() {
        let spec = MixSpec::<f64>::ablation_row(7, 1000, 1).unwrap();
        let err = compose(&spec, &pools(50), None).unwrap_err();
        let MixError::Undersupplied(cells) = &err else { panic!("{err:?}") };
        assert!(cells.len() > 1);
        assert!(cells.iter().all(|s| s.needed > s.available));
        assert!(err.to_string().contains("shortfall"));
    }

    #[test]
    fn pool_order_does_not_matter() {
        let spec = MixSpec::<f64>::ablation_row(7, 300, 9).unwrap();
        let a = compose(&spec, &pools(200), None).unwrap();
        let mut reversed = pools(200);
        reversed.values_mut().for_each(|v| v.reverse());
        let b = compose(&spec, &reversed, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn audit_of_empty_mix() {
        let r = audit::<f64>(&[]);
        assert_eq!(r.total, 0);
        assert_eq!(r.replay_fraction, 0.0);
        assert!(r.concept_ratios.values().all(|&v| v == 0.0));
        assert!(r.format_ratios.values().all(|&v| v == 0.0));
        assert_eq!(r.concept_ratios.len(), 4);
        assert_eq!(r.format_ratios.len(), 3);
    }

    #[test]
    fn audit_of_half_and_half() {
        let mut mix: Vec<Conversation> = (0..10).map(|i| conv("vlc/color", TaskType::OpenQa, i)).collect();
        mix.extend((0..10).map(|i| conv("seed/task5", TaskType::MultiChoice, i)));
        let r = audit::<f64>(&mix);
        assert_eq!(r.concept_ratios[&ConceptKind::Attribute], 0.5);
        assert_eq!(r.concept_ratios[&ConceptKind::Instance], 0.5);
        assert_eq!(r.format_ratios[&TaskType::OpenQa], 0.5);
        assert_eq!(r.format_ratios[&TaskType::MultiChoice], 0.5);
    }

    #[test]
    fn config_percentages() {
        let cfg: MixConfig = toml::from_str(
            "llava_data = true\nattributes = 45.45\nrelations = 15.15\ncategories = 36.36\ninstances = 3.04\n\
             open_questions = 39.40\nmultiple_choice = 42.42\ncaptioning = 18.18\ntarget_count = 10\nseed = 4\n",
        )
        .unwrap();
        let spec = cfg.to_spec::<f64>().unwrap();
        assert!((spec.concept_ratio(ConceptKind::Attribute) - 0.4545).abs() < 1e-12);
        assert!(spec.include_replay);
    }

    #[test]
    fn fitted_rule_keeps_marginals_without_unsupplied_cells() {
        let mut spec = MixSpec::<f64>::ablation_row(5, 1000, 3).unwrap();
        spec.joint = JointRule::Fitted;
        let supported: BTreeSet<Cell> = all_cells()
            .into_iter()
            .filter(|&(k, f)| f != TaskType::Captioning || matches!(k, ConceptKind::Attribute | ConceptKind::Relation))
            .collect();
        let w = spec.fitted_weights(&supported).unwrap();
        for kind in ConceptKind::MIXABLE {
            let sum: f64 = w.iter().filter(|(c, _)| c.0 == kind).map(|(_, v)| v).sum();
            assert!((sum - spec.concept_ratio(kind)).abs() < 1e-9);
        }
        for format in TaskType::FORMATS {
            let sum: f64 = w.iter().filter(|(c, _)| c.1 == format).map(|(_, v)| v).sum();
            assert!((sum - spec.format_ratio(format)).abs() < 1e-9);
        }
        assert_eq!(w[&(ConceptKind::Instance, TaskType::Captioning)], 0.0);
        let quotas = spec.cell_quotas_given(&supported).unwrap();
        assert_eq!(quotas.values().sum::<usize>(), 1000);
        assert_eq!(quotas[&(ConceptKind::Category, TaskType::Captioning)], 0);
    }

    #[test]
    fn fitted_rule_rejects_infeasible_support() {
        let mut spec = MixSpec::<f64>::ablation_row(5, 100, 3).unwrap();
        spec.joint = JointRule::Fitted;
        let supported: BTreeSet<Cell> = all_cells().into_iter().filter(|c| c.1 != TaskType::Captioning).collect();
        assert!(matches!(spec.fitted_weights(&supported), Err(MixError::Invalid(_))));
    }
}
