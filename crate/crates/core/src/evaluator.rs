//! Accuracy measurement: q-error summaries and the robustness protocols.
//!
//! The headline metric is the q-error — how many times off an estimate
//! is, in whichever direction — summarized per split as median, 95th
//! percentile, and mean (the mean is kept because tail failures vanish
//! in medians). Reports partition queries into seen/unseen join
//! templates and break results down per template. The shift suites wrap
//! the full train-then-evaluate loop for distribution-shift experiments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoding::Normalizer;
use crate::error::{Error, Result};
use crate::composer::EstimateSession;
use crate::models::{CardModelRegistry, ModelBundle};
use crate::oracle::Dataset;
use crate::schema::Schema;
use crate::template::canonical_template;
use crate::trainer::{fit, TrainConfig, TrainReport};
use crate::util::derive_seed;
use crate::workload::{
    apply_cardinality_shift, apply_granularity_shift, generate_workload, LabeledQuery,
    WorkloadSpec,
};

/// How many times off an estimate is: max(ĉ/c, c/ĉ), after clamping
/// both sides up to one. Estimates at or below zero therefore score as
/// if they were one row; callers count those separately.
pub fn qerror(estimate: f64, label: f64) -> f64 {
    let e = estimate.max(1.0);
    let c = label.max(1.0);
    (e / c).max(c / e)
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Canonical join-shape identity.
    pub template: String,
    /// Whether that shape appeared in training.
    pub seen: bool,
    /// Served estimate.
    pub estimate: f64,
    /// Raw composed estimate, before serving repairs.
    pub raw: f64,
    pub label: u64,
    pub qerror: f64,
}

impl QueryRecord {
    pub fn nonpositive(&self) -> bool {
        self.raw <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
    /// Queries whose raw estimate was at or below zero.
    pub negative_count: usize,
}

impl SplitStats {
    fn from_records<'r>(records: impl Iterator<Item = &'r QueryRecord>) -> Option<SplitStats> {
        let records: Vec<&QueryRecord> = records.collect();
        if records.is_empty() {
            return None;
        }
        let mut qerrors: Vec<f64> = records.iter().map(|r| r.qerror).collect();
        qerrors.sort_by(|a, b| a.total_cmp(b));
        Some(SplitStats {
            count: records.len(),
            median: percentile(&qerrors, 50.0),
            p95: percentile(&qerrors, 95.0),
            mean: qerrors.iter().sum::<f64>() / qerrors.len() as f64,
            negative_count: records.iter().filter(|r| r.nonpositive()).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: SplitStats,
    pub seen: Option<SplitStats>,
    pub unseen: Option<SplitStats>,
    pub per_template: BTreeMap<String, SplitStats>,
    pub records: Vec<QueryRecord>,
}

/// Aggregates per-query records into a report. Aggregation is pure
/// arithmetic over the records, so any consumer can recheck it.
pub fn aggregate_records(records: Vec<QueryRecord>) -> Result<EvalReport> {
    let overall = SplitStats::from_records(records.iter())
        .ok_or_else(|| Error::Workload("cannot evaluate an empty workload".into()))?;
    let seen = SplitStats::from_records(records.iter().filter(|r| r.seen));
    let unseen = SplitStats::from_records(records.iter().filter(|r| !r.seen));
    let mut per_template = BTreeMap::new();
    let keys: BTreeSet<&String> = records.iter().map(|r| &r.template).collect();
    for key in keys {
        let stats =
            SplitStats::from_records(records.iter().filter(|r| &r.template == key)).unwrap();
        per_template.insert(key.clone(), stats);
    }
    Ok(EvalReport {
        overall,
        seen,
        unseen,
        per_template,
        records,
    })
}

/// Evaluates the bundle on a labeled workload. `seen_templates` holds
/// the canonical template keys that appeared in training; membership is
/// the only thing that decides a query's seen/unseen label.
pub fn evaluate_split(
    bundle: &ModelBundle,
    workload: &[LabeledQuery],
    seen_templates: &BTreeSet<String>,
) -> Result<EvalReport> {
    let mut session = EstimateSession::new(bundle);
    let mut records = Vec::with_capacity(workload.len());
    for lq in workload {
        let (template, _) = canonical_template(&lq.query, &bundle.schema)?;
        let key = template.key();
        let served = session.estimate(&lq.query)?;
        records.push(QueryRecord {
            seen: seen_templates.contains(&key),
            template: key,
            estimate: served.served,
            raw: served.raw,
            label: lq.cardinality,
            qerror: qerror(served.served, lq.cardinality as f64),
        });
    }
    aggregate_records(records)
}

/// The two sides of a distribution-shift experiment, sharing one
/// trained bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReports {
    pub in_distribution: EvalReport,
    pub shifted: EvalReport,
    pub training: TrainReport,
}

/// Settings for building a fresh bundle inside a suite run.
#[derive(Debug, Clone)]
pub struct BundleOptions {
    pub card_kind: String,
    pub sketch_dim: usize,
    pub seed: u64,
}

impl Default for BundleOptions {
    fn default() -> BundleOptions {
        BundleOptions {
            card_kind: "auto".into(),
            sketch_dim: crate::models::sketch::DEFAULT_DIM,
            seed: 0,
        }
    }
}

fn build_bundle(
    schema: &Schema,
    options: &BundleOptions,
    queries: &[LabeledQuery],
) -> Result<ModelBundle> {
    let registry = CardModelRegistry::with_builtins();
    let qs: Vec<_> = queries.iter().map(|lq| lq.query.clone()).collect();
    let normalizer = Normalizer::fit(schema, &qs)?;
    ModelBundle::build(
        schema,
        &registry,
        &options.card_kind,
        options.sketch_dim,
        normalizer,
        options.seed,
    )
}

/// Generic shift run: train on a workload generated from `train_spec`,
/// then evaluate workloads generated from the two test specs with a
/// fresh literal stream. Identical specs therefore yield identical
/// reports — the control condition for any shift claim.
pub fn shift_suite(
    schema: &Schema,
    dataset: &Dataset,
    train_spec: &WorkloadSpec,
    in_dist_spec: &WorkloadSpec,
    shifted_spec: &WorkloadSpec,
    options: &BundleOptions,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<ShiftReports> {
    let train = generate_workload(schema, dataset, train_spec, derive_seed(seed, "train"))?;
    let eval_seed = derive_seed(seed, "eval");
    let in_dist = generate_workload(schema, dataset, in_dist_spec, eval_seed)?;
    let shifted = generate_workload(schema, dataset, shifted_spec, eval_seed)?;

    let mut bundle = build_bundle(schema, options, &train)?;
    let training = fit(&mut bundle, &train, train_config)?;

    let seen: BTreeSet<String> = train
        .iter()
        .map(|lq| Ok(canonical_template(&lq.query, schema)?.0.key()))
        .collect::<Result<_>>()?;
    Ok(ShiftReports {
        in_distribution: evaluate_split(&bundle, &in_dist, &seen)?,
        shifted: evaluate_split(&bundle, &shifted, &seen)?,
        training,
    })
}

/// Range-width shift: training ranges avoid widths near one half, test
/// ranges are exactly one half of each domain.
pub fn granularity_shift_suite(
    schema: &Schema,
    dataset: &Dataset,
    base_spec: &WorkloadSpec,
    options: &BundleOptions,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<ShiftReports> {
    let (train_spec, test_spec) = apply_granularity_shift(base_spec);
    shift_suite(
        schema,
        dataset,
        &train_spec,
        &train_spec,
        &test_spec,
        options,
        train_config,
        seed,
    )
}

/// Result-size shift: train on the smallest-labeled third of one
/// workload, evaluate on the lower and upper thirds of an independently
/// drawn one.
pub fn cardinality_shift_suite(
    schema: &Schema,
    dataset: &Dataset,
    spec: &WorkloadSpec,
    options: &BundleOptions,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<ShiftReports> {
    let full = generate_workload(schema, dataset, spec, derive_seed(seed, "train"))?;
    let (train, _) = apply_cardinality_shift(&full)?;
    let eval_full = generate_workload(schema, dataset, spec, derive_seed(seed, "eval"))?;
    let (in_dist, shifted) = apply_cardinality_shift(&eval_full)?;

    let mut bundle = build_bundle(schema, options, &train)?;
    let training = fit(&mut bundle, &train, train_config)?;
    let seen: BTreeSet<String> = train
        .iter()
        .map(|lq| Ok(canonical_template(&lq.query, schema)?.0.key()))
        .collect::<Result<_>>()?;
    Ok(ShiftReports {
        in_distribution: evaluate_split(&bundle, &in_dist, &seen)?,
        shifted: evaluate_split(&bundle, &shifted, &seen)?,
        training,
    })
}
