//! Manufacturing labeled workloads with controlled imperfection.
//!
//! A workload is a list of (query, true cardinality) pairs. This module
//! generates them from a schema plus a generated dataset — literals are
//! sampled from schema domain hints, never from rows, so the only thing
//! a workload reveals about the data is its labels — and provides the
//! knobs the robustness experiments turn: template coverage (how many
//! join shapes the training set spans), class imbalance (how unevenly
//! queries spread over shapes), and distribution shifts in range width
//! or result size between training and test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{execute_cardinality, int_domain, Dataset, ZipfDraw};
use crate::query::{PredOp, Predicate, Query, Scalar};
use crate::schema::{ColumnKind, Schema};
use crate::template::{canonical_template, enumerate_schema_templates, JoinTemplate};
use crate::util::derive_seed;

/// First line of every workload file; readers reject anything else.
pub const WORKLOAD_HEADER: &str = "#cardcomp-workload v1";

/// A query with its true result size on the generating dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    #[serde(flatten)]
    pub query: Query,
    pub cardinality: u64,
}

/// How literals are placed within a column's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum LiteralLaw {
    /// Every admissible position equally likely.
    Uniform,
    /// Low positions favored with weight (rank+1)^-s.
    Zipf { s: f64 },
}

impl Default for LiteralLaw {
    fn default() -> LiteralLaw {
        LiteralLaw::Uniform
    }
}

/// Distribution of the normalized width g of generated ranges. A range
/// covers g of the column domain: endpoints [l, l + g·width], with l
/// placed so the range fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum GranularityLaw {
    /// g uniform over (0, 1].
    Uniform,
    /// Every range has the same normalized width.
    Constant { g: f64 },
    /// g uniform over (0, 1] minus the band [lo, hi] — the training side
    /// of a width-shift experiment.
    UniformExcluding { lo: f64, hi: f64 },
}

impl Default for GranularityLaw {
    fn default() -> GranularityLaw {
        GranularityLaw::Uniform
    }
}

impl GranularityLaw {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            GranularityLaw::Uniform => true,
            GranularityLaw::Constant { g } => *g > 0.0 && *g <= 1.0,
            GranularityLaw::UniformExcluding { lo, hi } => {
                *lo > 0.0 && lo < hi && *hi < 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Workload(
                "granularity law parameters must lie in (0, 1] with lo < hi".into(),
            ))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            GranularityLaw::Uniform => 1.0 - rng.gen::<f64>(),
            GranularityLaw::Constant { g } => *g,
            GranularityLaw::UniformExcluding { lo, hi } => loop {
                let g = 1.0 - rng.gen::<f64>();
                if g < *lo || g > *hi {
                    break g;
                }
            },
        }
    }
}

/// A join shape given explicitly instead of drawn from the schema
/// universe: aliases plus join conditions, exactly as in a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub joins: Vec<(String, String)>,
}

fn default_queries_per_template() -> usize {
    100
}

fn default_predicate_prob() -> f64 {
    0.8
}

/// Declarative recipe for a workload, loadable from configuration text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_queries_per_template")]
    pub queries_per_template: usize,
    /// Chance that any given filterable column receives a predicate.
    #[serde(default = "default_predicate_prob")]
    pub predicate_prob: f64,
    #[serde(default)]
    pub literals: LiteralLaw,
    #[serde(default)]
    pub granularity: GranularityLaw,
    /// Shapes to generate for; empty means every join template the
    /// schema admits (each table used at most once).
    #[serde(default, rename = "template")]
    pub templates: Vec<TemplateSpec>,
}

impl Default for WorkloadSpec {
    fn default() -> WorkloadSpec {
        WorkloadSpec {
            queries_per_template: default_queries_per_template(),
            predicate_prob: default_predicate_prob(),
            literals: LiteralLaw::default(),
            granularity: GranularityLaw::default(),
            templates: Vec::new(),
        }
    }
}

impl WorkloadSpec {
    pub fn from_toml_str(text: &str) -> Result<WorkloadSpec> {
        let spec: WorkloadSpec = toml::from_str(text)
            .map_err(|e| Error::Workload(format!("workload spec parse failure: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries_per_template == 0 {
            return Err(Error::Workload("queries_per_template must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.predicate_prob) {
            return Err(Error::Workload("predicate_prob must lie in [0, 1]".into()));
        }
        if let LiteralLaw::Zipf { s } = self.literals {
            if !(s >= 0.0) {
                return Err(Error::Workload("zipf exponent must be >= 0".into()));
            }
        }
        self.granularity.validate()
    }

    /// The concrete templates this spec draws from: the listed shapes,
    /// canonicalized and deduplicated, or the schema's full universe.
    pub fn resolve_templates(&self, schema: &Schema) -> Result<Vec<JoinTemplate>> {
        if self.templates.is_empty() {
            return enumerate_schema_templates(schema);
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.templates {
            let skeleton = Query {
                aliases: t.aliases.clone(),
                joins: t.joins.clone(),
                predicates: Vec::new(),
            };
            skeleton.validate(schema)?;
            let (template, _) = canonical_template(&skeleton, schema)?;
            if seen.insert(template.key()) {
                out.push(template);
            }
        }
        Ok(out)
    }
}

fn draw_index(law: &LiteralLaw, n: usize, rng: &mut ChaCha8Rng) -> usize {
    debug_assert!(n >= 1);
    match law {
        LiteralLaw::Uniform => rng.gen_range(0..n),
        LiteralLaw::Zipf { s } => ZipfDraw::new(n, *s).sample(rng),
    }
}

/// Samples predicates for one realization of a template skeleton.
fn sample_predicates(
    schema: &Schema,
    skeleton: &Query,
    spec: &WorkloadSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Predicate>> {
    let mut predicates = Vec::new();
    for (alias, table_name) in &skeleton.aliases {
        let table = schema.table(table_name)?;
        for col in schema.filterable_columns(table) {
            if !rng.gen_bool(spec.predicate_prob) {
                continue;
            }
            match col.kind {
                ColumnKind::Int => {
                    let (lo, hi) = int_domain(col);
                    let width = hi - lo;
                    let g = spec.granularity.draw(rng);
                    let span = (g * width as f64).round() as i64;
                    let max_left = (hi - span).max(lo);
                    let left = lo + draw_index(&spec.literals, (max_left - lo + 1) as usize, rng)
                        as i64;
                    let right = (left + span).min(hi);
                    predicates.push(Predicate {
                        alias: alias.clone(),
                        column: col.name.clone(),
                        op: PredOp::Ge,
                        literals: vec![Scalar::Int(left)],
                    });
                    predicates.push(Predicate {
                        alias: alias.clone(),
                        column: col.name.clone(),
                        op: PredOp::Le,
                        literals: vec![Scalar::Int(right)],
                    });
                }
                ColumnKind::Categorical => {
                    let n = col.distinct.unwrap_or(10).max(1) as usize;
                    if rng.gen_bool(0.5) {
                        let i = draw_index(&spec.literals, n, rng);
                        predicates.push(Predicate {
                            alias: alias.clone(),
                            column: col.name.clone(),
                            op: PredOp::Eq,
                            literals: vec![Scalar::Str(format!("v{i}"))],
                        });
                    } else {
                        let len = rng.gen_range(1..=5usize);
                        let picks: BTreeSet<usize> =
                            (0..len).map(|_| rng.gen_range(0..n)).collect();
                        predicates.push(Predicate {
                            alias: alias.clone(),
                            column: col.name.clone(),
                            op: PredOp::In,
                            literals: picks.into_iter().map(|i| Scalar::Str(format!("v{i}"))).collect(),
                        });
                    }
                }
                // No hint describes the value pool of a text column, so
                // the factory cannot invent literals for one.
                ColumnKind::Text => {}
            }
        }
    }
    Ok(predicates)
}

/// Generates `counts[i]` labeled queries for `templates[i]`. Each
/// template draws from its own seeded stream keyed by its identity, so
/// output is independent of template order and of the other templates'
/// presence.
pub fn generate_with_counts(
    schema: &Schema,
    dataset: &Dataset,
    spec: &WorkloadSpec,
    templates: &[JoinTemplate],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<LabeledQuery>> {
    spec.validate()?;
    if templates.len() != counts.len() {
        return Err(Error::Workload(
            "one query count per template is required".into(),
        ));
    }
    let mut out = Vec::new();
    for (template, count) in templates.iter().zip(counts) {
        let skeleton = template.to_query(schema)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("wl/{}", template.key())));
        for _ in 0..*count {
            let predicates = sample_predicates(schema, &skeleton, spec, &mut rng)?;
            let query = Query {
                aliases: skeleton.aliases.clone(),
                joins: skeleton.joins.clone(),
                predicates,
            };
            let cardinality = execute_cardinality(dataset, schema, &query)?;
            out.push(LabeledQuery { query, cardinality });
        }
    }
    Ok(out)
}

/// Generates `spec`'s full workload: every resolved template at
/// `queries_per_template`, labeled by exact evaluation on `dataset`.
pub fn generate_workload(
    schema: &Schema,
    dataset: &Dataset,
    spec: &WorkloadSpec,
    seed: u64,
) -> Result<Vec<LabeledQuery>> {
    let templates = spec.resolve_templates(schema)?;
    let counts = vec![spec.queries_per_template; templates.len()];
    generate_with_counts(schema, dataset, spec, &templates, &counts, seed)
}

/// Splits templates into (train, unseen) with |train| = round(ratio·n).
/// The selection is a seeded sample; both sides preserve input order.
pub fn apply_tcr_split(
    templates: &[JoinTemplate],
    target_tcr: f64,
    seed: u64,
) -> Result<(Vec<JoinTemplate>, Vec<JoinTemplate>)> {
    if !(target_tcr > 0.0 && target_tcr <= 1.0) {
        return Err(Error::Workload(
            "template coverage ratio must lie in (0, 1]".into(),
        ));
    }
    let n_train = (target_tcr * templates.len() as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::Workload(
            "coverage ratio leaves no training templates".into(),
        ));
    }
    let mut indices: Vec<usize> = (0..templates.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "tcr-split")));
    let chosen: BTreeSet<usize> = indices.into_iter().take(n_train).collect();
    let mut train = Vec::new();
    let mut unseen = Vec::new();
    for (i, t) in templates.iter().enumerate() {
        if chosen.contains(&i) {
            train.push(t.clone());
        } else {
            unseen.push(t.clone());
        }
    }
    Ok((train, unseen))
}

/// Skews per-template query counts toward a target imbalance ratio:
/// walking down from the largest count, each successive template's count
/// is divided by `decay` until largest/current reaches the target; every
/// later template keeps that threshold count (the decay does not
/// continue past it).
pub fn apply_cir_imbalance(counts: &[u64], target_cir: f64, decay: f64) -> Result<Vec<u64>> {
    if !(target_cir >= 1.0) {
        return Err(Error::Workload("imbalance ratio must be >= 1".into()));
    }
    if !(decay > 1.0) {
        return Err(Error::Workload("decay must be > 1".into()));
    }
    if counts.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Workload(
            "counts must be sorted in descending order".into(),
        ));
    }
    let Some(&largest) = counts.first() else {
        return Ok(Vec::new());
    };
    if largest == 0 {
        return Err(Error::Workload("counts must be positive".into()));
    }
    let mut out = vec![largest];
    let mut cur = largest;
    for _ in 1..counts.len() {
        if (largest as f64) / (cur as f64) < target_cir {
            cur = ((cur as f64 / decay).floor() as u64).max(1);
        }
        out.push(cur);
    }
    Ok(out)
}

/// Derives the two sides of a range-width shift: training draws widths
/// from (0, 1] with the band around one half removed, test fixes the
/// width at exactly one half.
pub fn apply_granularity_shift(spec: &WorkloadSpec) -> (WorkloadSpec, WorkloadSpec) {
    let mut train = spec.clone();
    train.granularity = GranularityLaw::UniformExcluding { lo: 0.45, hi: 0.55 };
    let mut test = spec.clone();
    test.granularity = GranularityLaw::Constant { g: 0.5 };
    (train, test)
}

/// Derives the two sides of a result-size shift: training keeps the
/// smallest-labeled third of the workload, test the largest-labeled
/// third (ties broken by position; the middle third is dropped).
pub fn apply_cardinality_shift(
    workload: &[LabeledQuery],
) -> Result<(Vec<LabeledQuery>, Vec<LabeledQuery>)> {
    let tercile = workload.len() / 3;
    if tercile == 0 {
        return Err(Error::Workload(
            "too few queries to split into label terciles".into(),
        ));
    }
    let mut order: Vec<usize> = (0..workload.len()).collect();
    order.sort_by_key(|&i| (workload[i].cardinality, i));
    let lower: BTreeSet<usize> = order[..tercile].iter().copied().collect();
    let upper: BTreeSet<usize> = order[workload.len() - tercile..].iter().copied().collect();
    let train = lower.iter().map(|&i| workload[i].clone()).collect();
    let test = upper.iter().map(|&i| workload[i].clone()).collect();
    Ok((train, test))
}

/// Measures (template coverage, class imbalance) of a workload: the
/// fraction of the schema's template universe it touches, and the ratio
/// of the most- to least-populated observed template.
pub fn measure_tcr_cir(workload: &[LabeledQuery], schema: &Schema) -> Result<(f64, f64)> {
    if workload.is_empty() {
        return Err(Error::Workload("cannot measure an empty workload".into()));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for lq in workload {
        let (template, _) = canonical_template(&lq.query, schema)?;
        *counts.entry(template.key()).or_insert(0) += 1;
    }
    let universe = enumerate_schema_templates(schema)?.len();
    let tcr = counts.len() as f64 / universe as f64;
    let max = *counts.values().max().unwrap() as f64;
    let min = *counts.values().min().unwrap() as f64;
    Ok((tcr, max / min))
}

/// Serializes a workload: version header, then one record per line.
pub fn workload_to_string(workload: &[LabeledQuery]) -> Result<String> {
    let mut out = String::from(WORKLOAD_HEADER);
    out.push('\n');
    for lq in workload {
        let line = serde_json::to_string(lq)
            .map_err(|e| Error::Workload(format!("record serialization failure: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn workload_from_str(text: &str) -> Result<Vec<LabeledQuery>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim_end() == WORKLOAD_HEADER => {}
        _ => {
            return Err(Error::Workload(format!(
                "missing workload header {WORKLOAD_HEADER:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lq: LabeledQuery = serde_json::from_str(line)
            .map_err(|e| Error::Workload(format!("bad record on line {}: {e}", i + 2)))?;
        out.push(lq);
    }
    Ok(out)
}

pub fn save_workload(path: &Path, workload: &[LabeledQuery]) -> Result<()> {
    std::fs::write(path, workload_to_string(workload)?)
        .map_err(|e| Error::Workload(format!("cannot write {}: {e}", path.display())))
}

pub fn load_workload(path: &Path) -> Result<Vec<LabeledQuery>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Workload(format!("cannot read {}: {e}", path.display())))?;
    workload_from_str(&text)
}
