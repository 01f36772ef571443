//! Ground truth: synthetic datasets, exact query execution, and key
//! frequency extraction.
//!
//! This module is the only place that touches rows. The estimator side
//! (encoding, models, composer) sees schemas and workload files, never
//! data; keeping that wall intact is what makes the label-only training
//! setup honest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::{AliasQuery, PredOp, Predicate, Query, Scalar};
use crate::schema::{Column, ColumnKind, Schema};
use crate::template;
use crate::util::derive_seed;

/// One cell. NULL never matches any predicate except IS NULL and never
/// joins with anything, NULL on the other side included.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Int(i64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableData {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl TableData {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Dataset(format!("no column {name:?} in table data")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tables: BTreeMap<String, TableData>,
}

impl Dataset {
    pub fn table(&self, name: &str) -> Result<&TableData> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::Dataset(format!("no data for table {name:?}")))
    }
}

/// First line of every dataset file; readers reject anything else.
pub const DATASET_HEADER: &str = "#cardcomp-dataset v1";

pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let body = serde_json::to_string(dataset)
        .map_err(|e| Error::Dataset(format!("dataset serialization failure: {e}")))?;
    Ok(format!("{DATASET_HEADER}\n{body}\n"))
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let Some((first, body)) = text.split_once('\n') else {
        return Err(Error::Dataset(format!(
            "missing dataset header {DATASET_HEADER:?}"
        )));
    };
    if first.trim_end() != DATASET_HEADER {
        return Err(Error::Dataset(format!(
            "missing dataset header {DATASET_HEADER:?}"
        )));
    }
    serde_json::from_str(body).map_err(|e| Error::Dataset(format!("bad dataset body: {e}")))
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(dataset)?)
        .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    dataset_from_str(&text)
}

/// Exact counts of join-key values among the rows a per-table query keeps.
/// Absent keys count zero; NULL keys are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyVector {
    pub counts: BTreeMap<Value, u64>,
    pub total: u64,
}

// ---------------------------------------------------------------------------
// generation

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenKnobs {
    /// Zipf exponent for join-key draws; 0 means uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_skew: Option<f64>,
    /// Strength of the monotone coupling between a table's first join key
    /// and its attribute columns, in [0, 1]. 0 = independent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    /// Probability that an attribute cell is NULL, in [0, 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_prob: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default)]
    pub defaults: GenKnobs,
    #[serde(default)]
    pub table: BTreeMap<String, GenKnobs>,
}

impl GenConfig {
    pub fn from_toml_str(text: &str) -> Result<GenConfig> {
        toml::from_str(text).map_err(|e| Error::Dataset(format!("gen config parse failure: {e}")))
    }

    fn resolved(&self, table: &str) -> (f64, f64, f64) {
        let o = self.table.get(table);
        let pick = |f: fn(&GenKnobs) -> Option<f64>, d: f64| {
            o.and_then(f).or_else(|| f(&self.defaults)).unwrap_or(d)
        };
        (
            pick(|k| k.key_skew, 0.0),
            pick(|k| k.correlation, 0.0),
            pick(|k| k.null_prob, 0.0),
        )
    }

    fn validate(&self, schema: &Schema) -> Result<()> {
        for name in self.table.keys() {
            schema.table(name).map_err(|_| {
                Error::Dataset(format!("gen config overrides unknown table {name:?}"))
            })?;
        }
        for (label, k) in std::iter::once(("defaults", &self.defaults))
            .chain(self.table.iter().map(|(n, k)| (n.as_str(), k)))
        {
            if let Some(s) = k.key_skew {
                if !(s >= 0.0) {
                    return Err(Error::Dataset(format!("[{label}] key_skew must be >= 0")));
                }
            }
            if let Some(c) = k.correlation {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Dataset(format!(
                        "[{label}] correlation must lie in [0, 1]"
                    )));
                }
            }
            if let Some(p) = k.null_prob {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Dataset(format!(
                        "[{label}] null_prob must lie in [0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Integer domain of a column, from its hints; columns without hints get a
/// small default domain.
pub(crate) fn int_domain(col: &Column) -> (i64, i64) {
    match (col.min, col.max) {
        (Some(lo), Some(hi)) => (lo, hi),
        (Some(lo), None) => (lo, lo + 99),
        (None, Some(hi)) => (hi - 99, hi),
        (None, None) => (1, 100),
    }
}

/// The shared domain of a join-key group: the hint of its first member
/// that carries one (members were validated to be kind-consistent).
fn group_domain(schema: &Schema, group_id: &str) -> Result<(i64, i64)> {
    let g = schema.group(group_id)?;
    for m in &g.members {
        let (t, c) = crate::schema::split_column_ref(m)?;
        let col = schema.table(&t)?.column(&c).unwrap();
        if col.min.is_some() || col.max.is_some() {
            return Ok(int_domain(col));
        }
    }
    Ok((1, 100))
}

/// Draws from {0, .., n-1} with probability proportional to (k+1)^-s.
/// s = 0 degenerates to uniform.
pub(crate) struct ZipfDraw {
    cumulative: Vec<f64>,
}

impl ZipfDraw {
    pub(crate) fn new(n: usize, s: f64) -> ZipfDraw {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for k in 0..n {
            acc += ((k + 1) as f64).powf(-s);
            cumulative.push(acc);
        }
        ZipfDraw { cumulative }
    }

    pub(crate) fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c < u)
    }
}

/// Generates a dataset for the schema: exactly `cardinality` rows per
/// table, join keys drawn zipf-skewed from the group domain, attribute
/// columns coupled to the table's first join key by a noisy monotone map
/// of strength `correlation`. Deterministic in `seed`.
pub fn generate_dataset(schema: &Schema, config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate(schema)?;
    let mut dataset = Dataset::default();
    for table in &schema.tables {
        let (skew, correlation, null_prob) = config.resolved(&table.name);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("data/{}", table.name)));

        // Pre-resolve per-column plans.
        enum Plan {
            Key { lo: i64, hi: i64, zipf: ZipfDraw },
            IntAttr { lo: i64, hi: i64 },
            PoolAttr { pool: Vec<String> },
        }
        let mut plans = Vec::new();
        for col in &table.columns {
            if let Some(g) = schema.group_of(&table.name, &col.name) {
                if col.kind != ColumnKind::Int {
                    return Err(Error::Dataset(format!(
                        "generator only supports integer join keys ({}.{})",
                        table.name, col.name
                    )));
                }
                let (lo, hi) = group_domain(schema, &g.id)?;
                if hi < lo {
                    return Err(Error::Dataset(format!(
                        "group {:?} has empty domain",
                        g.id
                    )));
                }
                let n = (hi - lo + 1) as usize;
                plans.push(Plan::Key {
                    lo,
                    hi,
                    zipf: ZipfDraw::new(n, skew),
                });
            } else {
                match col.kind {
                    ColumnKind::Int => {
                        let (lo, hi) = int_domain(col);
                        plans.push(Plan::IntAttr { lo, hi });
                    }
                    ColumnKind::Categorical | ColumnKind::Text => {
                        let distinct = col.distinct.unwrap_or(match col.kind {
                            ColumnKind::Categorical => 10,
                            _ => 50,
                        }) as usize;
                        let distinct = distinct.max(1);
                        let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            seed,
                            &format!("pool/{}/{}", table.name, col.name),
                        ));
                        let pool = (0..distinct)
                            .map(|i| match col.kind {
                                ColumnKind::Categorical => format!("v{i}"),
                                _ => random_word(&mut pool_rng),
                            })
                            .collect();
                        plans.push(Plan::PoolAttr { pool });
                    }
                }
            }
        }

        // Index of the first key column, the correlation anchor.
        let anchor = plans.iter().position(|p| matches!(p, Plan::Key { .. }));

        let mut rows = Vec::with_capacity(table.cardinality as usize);
        for _ in 0..table.cardinality {
            let mut row: Vec<Value> = Vec::with_capacity(plans.len());
            // keys first so the anchor exists before attributes are drawn
            let mut anchor_frac = 0.0f64;
            for (i, plan) in plans.iter().enumerate() {
                let v = match plan {
                    Plan::Key { lo, hi, zipf } => {
                        let k = *lo + zipf.sample(&mut rng) as i64;
                        if Some(i) == anchor {
                            let span = (*hi - *lo).max(1) as f64;
                            anchor_frac = (k - *lo) as f64 / span;
                        }
                        Value::Int(k)
                    }
                    _ => Value::Null, // placeholder, filled below
                };
                row.push(v);
            }
            for (i, plan) in plans.iter().enumerate() {
                if matches!(plan, Plan::Key { .. }) {
                    continue;
                }
                if null_prob > 0.0 && rng.gen::<f64>() < null_prob {
                    row[i] = Value::Null;
                    continue;
                }
                row[i] = match plan {
                    Plan::IntAttr { lo, hi } => {
                        let noise = rng.gen_range(*lo..=*hi) as f64;
                        let v = if anchor.is_some() {
                            let base = *lo as f64 + anchor_frac * (*hi - *lo) as f64;
                            correlation * base + (1.0 - correlation) * noise
                        } else {
                            noise
                        };
                        Value::Int((v.round() as i64).clamp(*lo, *hi))
                    }
                    Plan::PoolAttr { pool } => {
                        let noise = rng.gen_range(0..pool.len()) as f64;
                        let idx = if anchor.is_some() {
                            let base = anchor_frac * (pool.len() - 1) as f64;
                            (correlation * base + (1.0 - correlation) * noise).round() as usize
                        } else {
                            noise as usize
                        };
                        Value::Str(pool[idx.min(pool.len() - 1)].clone())
                    }
                    Plan::Key { .. } => unreachable!(),
                };
            }
            rows.push(row);
        }
        dataset.tables.insert(
            table.name.clone(),
            TableData {
                columns: table.columns.iter().map(|c| c.name.clone()).collect(),
                rows,
            },
        );
    }
    Ok(dataset)
}

fn random_word(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(3..=8);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect()
}

// ---------------------------------------------------------------------------
// the built-in demo instance

/// Schema of the built-in demo instance, as schema-file text so tools can
/// materialize it on disk.
pub const DEMO_SCHEMA_TOML: &str = r#"
[[table]]
name = "A"
cardinality = 5
[[table.column]]
name = "x"
kind = "int"
min = 1
max = 2
[[table.column]]
name = "a"
kind = "int"
min = 0
max = 5

[[table]]
name = "B"
cardinality = 5
[[table.column]]
name = "x"
kind = "int"
min = 1
max = 2
[[table.column]]
name = "b"
kind = "int"
min = 1
max = 4

[[table]]
name = "D"
cardinality = 5
[[table.column]]
name = "x"
kind = "int"
min = 1
max = 2
[[table.column]]
name = "d"
kind = "int"
min = 3
max = 7

[[group]]
id = "x"
members = ["A.x", "B.x", "D.x"]
"#;

/// A three-table instance small enough to verify by hand: A, B, D share
/// join key x with domain {1, 2}, five rows each. Used by the docs, the
/// CLI demo fixture, and the exactness tests.
pub fn demo_fixture() -> (Schema, Dataset) {
    let schema = Schema::from_toml_str(DEMO_SCHEMA_TOML).expect("demo schema is well-formed");

    let mut dataset = Dataset::default();
    let table = |pairs: &[(i64, i64)], cols: [&str; 2]| TableData {
        columns: cols.iter().map(|s| s.to_string()).collect(),
        rows: pairs
            .iter()
            .map(|(x, v)| vec![Value::Int(*x), Value::Int(*v)])
            .collect(),
    };
    dataset.tables.insert(
        "A".into(),
        table(&[(1, 1), (2, 2), (1, 3), (1, 4), (2, 5)], ["x", "a"]),
    );
    dataset.tables.insert(
        "B".into(),
        table(&[(1, 2), (1, 2), (2, 3), (1, 4), (2, 4)], ["x", "b"]),
    );
    dataset.tables.insert(
        "D".into(),
        table(&[(1, 4), (1, 5), (1, 5), (2, 6), (2, 7)], ["x", "d"]),
    );
    (schema, dataset)
}

// ---------------------------------------------------------------------------
// execution

fn scalar_to_value(lit: &Scalar) -> Value {
    match lit {
        Scalar::Int(v) => Value::Int(*v),
        Scalar::Str(s) => Value::Str(s.clone()),
    }
}

/// SQL-flavored LIKE with % as the only wildcard.
fn like_match(s: &str, pattern: &str) -> bool {
    let parts: Vec<&str> = pattern.split('%').collect();
    if parts.len() == 1 {
        return s == pattern;
    }
    let prefix = parts[0];
    let suffix = parts[parts.len() - 1];
    if !s.starts_with(prefix) {
        return false;
    }
    if s.len() < prefix.len() + suffix.len() || !s.ends_with(suffix) {
        return false;
    }
    let mut pos = prefix.len();
    let limit = s.len() - suffix.len();
    for seg in &parts[1..parts.len() - 1] {
        if seg.is_empty() {
            continue;
        }
        match s[pos..limit].find(seg) {
            Some(i) => pos += i + seg.len(),
            None => return false,
        }
    }
    true
}

/// Whether a single predicate accepts a cell value.
pub fn predicate_matches(pred: &Predicate, value: &Value) -> bool {
    match (pred.op, value) {
        (PredOp::IsNull, Value::Null) => true,
        (PredOp::NotNull, Value::Null) => false,
        (_, Value::Null) => false,
        (PredOp::IsNull, _) => false,
        (PredOp::NotNull, _) => true,
        (PredOp::Eq, v) => *v == scalar_to_value(&pred.literals[0]),
        (PredOp::In, v) => pred.literals.iter().any(|l| *v == scalar_to_value(l)),
        (PredOp::Lt, Value::Int(v)) => matches!(pred.literals[0], Scalar::Int(l) if *v < l),
        (PredOp::Le, Value::Int(v)) => matches!(pred.literals[0], Scalar::Int(l) if *v <= l),
        (PredOp::Gt, Value::Int(v)) => matches!(pred.literals[0], Scalar::Int(l) if *v > l),
        (PredOp::Ge, Value::Int(v)) => matches!(pred.literals[0], Scalar::Int(l) if *v >= l),
        (PredOp::Like, Value::Str(s)) => {
            matches!(&pred.literals[0], Scalar::Str(p) if like_match(s, p))
        }
        _ => false,
    }
}

/// Row indices of one table that satisfy all predicates of a per-alias view.
fn filtered_rows(data: &TableData, aq: &AliasQuery) -> Result<Vec<usize>> {
    let mut idx = Vec::new();
    let cols: Vec<usize> = aq
        .predicates
        .iter()
        .map(|p| data.column_index(&p.column))
        .collect::<Result<_>>()?;
    'rows: for (ri, row) in data.rows.iter().enumerate() {
        for (p, ci) in aq.predicates.iter().zip(&cols) {
            if !predicate_matches(p, &row[*ci]) {
                continue 'rows;
            }
        }
        idx.push(ri);
    }
    Ok(idx)
}

/// Exact cardinality of a validated query: filters every alias, then runs
/// a message-passing count along the query's (tree-shaped) join structure.
/// NULL join keys never match.
pub fn execute_cardinality(dataset: &Dataset, schema: &Schema, query: &Query) -> Result<u64> {
    query.validate(schema)?;
    let alias_rows: BTreeMap<&str, (usize, Vec<usize>)> = {
        let mut m = BTreeMap::new();
        for aq in query.alias_queries() {
            let data = dataset.table(aq.table)?;
            let rows = filtered_rows(data, &aq)?;
            m.insert(aq.alias, (0usize, rows));
        }
        m
    };

    let aliases: Vec<&str> = query.aliases.keys().map(String::as_str).collect();
    if aliases.len() == 1 {
        return Ok(alias_rows[aliases[0]].1.len() as u64);
    }

    // Tree edges from the canonical chain rendering of each cluster.
    let cls = template::clusters(query, schema)?;
    let mut adj: BTreeMap<&str, Vec<(&str, String)>> = BTreeMap::new();
    let mut chain_storage: Vec<(String, String, String)> = Vec::new();
    for c in &cls {
        let members: Vec<&String> = c.aliases.iter().collect();
        for w in members.windows(2) {
            chain_storage.push((w[0].clone(), w[1].clone(), c.group_id.clone()));
        }
    }
    for (a, b, g) in &chain_storage {
        adj.entry(a.as_str()).or_default().push((b.as_str(), g.clone()));
        adj.entry(b.as_str()).or_default().push((a.as_str(), g.clone()));
    }

    // Rooted DFS order (the structure is a tree by validation).
    let root = aliases[0];
    let mut order: Vec<(&str, Option<(&str, String)>)> = Vec::new();
    let mut stack = vec![(root, None::<(&str, String)>)];
    let mut seen: BTreeMap<&str, bool> = aliases.iter().map(|a| (*a, false)).collect();
    while let Some((u, parent)) = stack.pop() {
        if seen[u] {
            continue;
        }
        seen.insert(u, true);
        order.push((u, parent.clone()));
        if let Some(nb) = adj.get(u) {
            for (v, g) in nb {
                if !seen[*v] {
                    stack.push((v, Some((u, g.clone()))));
                }
            }
        }
    }

    // Bottom-up: each alias sends its parent a map key-value -> count of
    // join-consistent sub-assignments under it.
    let mut messages: BTreeMap<&str, BTreeMap<Value, u128>> = BTreeMap::new();
    let mut total: u128 = 0;
    for (u, parent) in order.iter().rev() {
        let table_name = &query.aliases[*u];
        let data = dataset.table(table_name)?;
        // key column per adjacent edge group
        let child_edges: Vec<(&str, String)> = adj
            .get(u)
            .map(|nb| {
                nb.iter()
                    .filter(|(v, _)| parent.as_ref().map(|(p, _)| p != v).unwrap_or(true))
                    .map(|(v, g)| (*v, g.clone()))
                    .collect()
            })
            .unwrap_or_default();
        let child_cols: Vec<(usize, &str)> = child_edges
            .iter()
            .map(|(v, g)| {
                let col = schema.key_column(table_name, g)?;
                Ok((data.column_index(&col)?, *v))
            })
            .collect::<Result<_>>()?;
        let parent_col = parent
            .as_ref()
            .map(|(_, g)| {
                let col = schema.key_column(table_name, g)?;
                data.column_index(&col)
            })
            .transpose()?;

        let mut msg: BTreeMap<Value, u128> = BTreeMap::new();
        let mut root_total: u128 = 0;
        for &ri in &alias_rows[*u].1 {
            let row = &data.rows[ri];
            let mut w: u128 = 1;
            for (ci, v) in &child_cols {
                let key = &row[*ci];
                if *key == Value::Null {
                    w = 0;
                    break;
                }
                w *= messages
                    .get(v)
                    .and_then(|m| m.get(key))
                    .copied()
                    .unwrap_or(0);
                if w == 0 {
                    break;
                }
            }
            if w == 0 {
                continue;
            }
            match parent_col {
                Some(ci) => {
                    let key = &row[ci];
                    if *key != Value::Null {
                        *msg.entry(key.clone()).or_insert(0) += w;
                    }
                }
                None => root_total += w,
            }
        }
        if parent.is_some() {
            messages.insert(u, msg);
        } else {
            total = root_total;
        }
    }

    u64::try_from(total)
        .map_err(|_| Error::Dataset("join cardinality exceeds u64 range".into()))
}

/// Frequencies of one table's key for `group_id` among the rows kept by a
/// per-table query.
pub fn join_key_frequencies(
    dataset: &Dataset,
    schema: &Schema,
    aq: &AliasQuery,
    group_id: &str,
) -> Result<FrequencyVector> {
    let data = dataset.table(aq.table)?;
    let key_col = schema.key_column(aq.table, group_id)?;
    let ci = data.column_index(&key_col)?;
    let mut counts: BTreeMap<Value, u64> = BTreeMap::new();
    let mut total = 0;
    for ri in filtered_rows(data, aq)? {
        let v = &data.rows[ri][ci];
        if *v == Value::Null {
            continue;
        }
        *counts.entry(v.clone()).or_insert(0) += 1;
        total += 1;
    }
    Ok(FrequencyVector { counts, total })
}

// ---------------------------------------------------------------------------
// on-disk form

const DATASET_MAGIC: &str = "#cardcomp-dataset v1";
const NULL_SENTINEL: &str = "\\N";

/// Writes one tab-separated file per table into `dir`. Strings must be free
/// of tabs, newlines, and backslashes; the generator only produces such
/// strings, and the writer rejects anything else rather than escaping.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, data) in &dataset.tables {
        let mut out = String::new();
        out.push_str(DATASET_MAGIC);
        out.push('\n');
        out.push_str(&format!("table={name}\n"));
        out.push_str(&data.columns.join("\t"));
        out.push('\n');
        for row in &data.rows {
            let mut cells = Vec::with_capacity(row.len());
            for v in row {
                cells.push(match v {
                    Value::Null => NULL_SENTINEL.to_string(),
                    Value::Int(i) => i.to_string(),
                    Value::Str(s) => {
                        if s.contains('\t') || s.contains('\n') || s.contains('\\') {
                            return Err(Error::Dataset(format!(
                                "string value {s:?} cannot be exported (tab/newline/backslash)"
                            )));
                        }
                        s.clone()
                    }
                });
            }
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        std::fs::write(dir.join(format!("{name}.tbl")), out)?;
    }
    Ok(())
}

/// Reads the files `export_dataset` wrote, checking them against the schema.
pub fn import_dataset(schema: &Schema, dir: &Path) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    for table in &schema.tables {
        let path = dir.join(format!("{}.tbl", table.name));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Dataset(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut lines = text.lines();
        if lines.next() != Some(DATASET_MAGIC) {
            return Err(Error::Dataset(format!(
                "{} is not a dataset file (bad header)",
                path.display()
            )));
        }
        if lines.next() != Some(&format!("table={}", table.name)) {
            return Err(Error::Dataset(format!(
                "{} names a different table",
                path.display()
            )));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Dataset(format!("{} is truncated", path.display())))?;
        let columns: Vec<String> = header.split('\t').map(str::to_string).collect();
        let expected: Vec<String> = table.columns.iter().map(|c| c.name.clone()).collect();
        if columns != expected {
            return Err(Error::Dataset(format!(
                "{} column list {columns:?} does not match schema {expected:?}",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != columns.len() {
                return Err(Error::Dataset(format!(
                    "{} row {} has {} cells, expected {}",
                    path.display(),
                    ln + 4,
                    cells.len(),
                    columns.len()
                )));
            }
            let mut row = Vec::with_capacity(cells.len());
            for (cell, col) in cells.iter().zip(&table.columns) {
                let v = if *cell == NULL_SENTINEL {
                    Value::Null
                } else {
                    match col.kind {
                        ColumnKind::Int => Value::Int(cell.parse::<i64>().map_err(|_| {
                            Error::Dataset(format!(
                                "{} row {}: {cell:?} is not an integer",
                                path.display(),
                                ln + 4
                            ))
                        })?),
                        _ => Value::Str(cell.to_string()),
                    }
                };
                row.push(v);
            }
            rows.push(row);
        }
        if rows.len() as u64 != table.cardinality {
            return Err(Error::Dataset(format!(
                "{} holds {} rows but the schema declares {}",
                path.display(),
                rows.len(),
                table.cardinality
            )));
        }
        dataset
            .tables
            .insert(table.name.clone(), TableData { columns, rows });
    }
    Ok(dataset)
}
