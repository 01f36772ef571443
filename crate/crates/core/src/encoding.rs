//! Turning predicates into model inputs.
//!
//! Two encodings live here. Range-style models consume per-column interval
//! bounds in normalized [0,1] space (`encode_interval_bounds`). Set-style
//! models consume one fixed-width feature row per predicate
//! (`FeatureLayout::featurize`), pooled by the model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::{AliasQuery, PredOp, Predicate, Query, Scalar};
use crate::schema::{ColumnKind, Schema, Table};
use crate::util::fnv1a64;

/// Dimensions of the signed-hash slice in predicate features.
pub const HASH_DIMS: usize = 64;

/// Maps integer column values onto [0,1] per (table, column).
///
/// The range is the union of the schema hints and every literal seen in
/// the fitting workload, so test-time literals inside the training span
/// normalize consistently; values outside clamp to the edges.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    ranges: BTreeMap<String, (i64, i64)>,
}

fn range_key(table: &str, column: &str) -> String {
    format!("{table}.{column}")
}

impl Normalizer {
    /// Builds ranges from schema hints widened by workload literals.
    pub fn fit(schema: &Schema, queries: &[Query]) -> Result<Normalizer> {
        let mut ranges: BTreeMap<String, (i64, i64)> = BTreeMap::new();
        for table in &schema.tables {
            for col in &table.columns {
                if col.kind != ColumnKind::Int {
                    continue;
                }
                if let (Some(lo), Some(hi)) = (col.min, col.max) {
                    ranges.insert(range_key(&table.name, &col.name), (lo, hi));
                }
            }
        }
        for q in queries {
            for pred in &q.predicates {
                let table = q
                    .aliases
                    .get(&pred.alias)
                    .ok_or_else(|| Error::Query(format!("unknown alias {}", pred.alias)))?;
                let key = range_key(table, &pred.column);
                for lit in &pred.literals {
                    if let Scalar::Int(v) = lit {
                        ranges
                            .entry(key.clone())
                            .and_modify(|(lo, hi)| {
                                *lo = (*lo).min(*v);
                                *hi = (*hi).max(*v);
                            })
                            .or_insert((*v, *v));
                    }
                }
            }
        }
        Ok(Normalizer { ranges })
    }

    pub fn range(&self, table: &str, column: &str) -> Option<(i64, i64)> {
        self.ranges.get(&range_key(table, column)).copied()
    }

    /// Position of `v` in the column's range, clamped to [0,1]. A column
    /// whose range collapsed to one point maps everything at or above it
    /// to 1 and everything below to 0, preserving threshold semantics.
    pub fn normalize(&self, table: &str, column: &str, v: i64) -> Result<f64> {
        let (lo, hi) = self.range(table, column).ok_or_else(|| {
            Error::Model(format!("no value range known for {table}.{column}"))
        })?;
        if hi == lo {
            return Ok(if v >= lo { 1.0 } else { 0.0 });
        }
        let t = (v - lo) as f64 / (hi - lo) as f64;
        Ok(t.clamp(0.0, 1.0))
    }
}

/// Interval constraint on one column in normalized space. `upper` is
/// always present (1.0 when unconstrained); `lower` only when the
/// predicates bound the column from below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalBound {
    pub upper: f64,
    pub lower: Option<f64>,
}

/// Folds an alias's predicates into one interval per filterable column,
/// ordered as in the schema. Works on integer columns only; a cumulative
/// model reads `count(col <= x)` off these, so inclusive/strict variants
/// shift the integer threshold before normalizing:
/// `col <= u` keeps u, `col < u` uses u-1, `col >= l` excludes l-1,
/// `col > l` excludes l, and equality is the one-point interval (v-1, v].
pub fn encode_interval_bounds(
    schema: &Schema,
    table: &Table,
    aq: &AliasQuery<'_>,
    norm: &Normalizer,
) -> Result<Vec<IntervalBound>> {
    fn tighten_upper(map: &mut BTreeMap<String, i64>, name: &str, v: i64) {
        map.entry(name.to_string())
            .and_modify(|u| *u = (*u).min(v))
            .or_insert(v);
    }
    fn tighten_lower(map: &mut BTreeMap<String, i64>, name: &str, v: i64) {
        map.entry(name.to_string())
            .and_modify(|l| *l = (*l).max(v))
            .or_insert(v);
    }

    let cols = schema.filterable_columns(table);
    let mut upper_raw: BTreeMap<String, i64> = BTreeMap::new();
    let mut lower_raw: BTreeMap<String, i64> = BTreeMap::new();
    for pred in &aq.predicates {
        let col = cols
            .iter()
            .find(|c| c.name == pred.column)
            .ok_or_else(|| {
                Error::Model(format!(
                    "column {}.{} is not filterable",
                    table.name, pred.column
                ))
            })?;
        if col.kind != ColumnKind::Int {
            return Err(Error::Model(format!(
                "interval encoding requires integer columns; {}.{} is not",
                table.name, pred.column
            )));
        }
        let lit = |i: usize| -> Result<i64> {
            match pred.literals.get(i) {
                Some(Scalar::Int(v)) => Ok(*v),
                _ => Err(Error::Model(format!(
                    "expected integer literal on {}.{}",
                    table.name, pred.column
                ))),
            }
        };
        let name = col.name.as_str();
        match pred.op {
            PredOp::Eq => {
                let v = lit(0)?;
                tighten_upper(&mut upper_raw, name, v);
                tighten_lower(&mut lower_raw, name, v - 1);
            }
            PredOp::Le => tighten_upper(&mut upper_raw, name, lit(0)?),
            PredOp::Lt => tighten_upper(&mut upper_raw, name, lit(0)? - 1),
            PredOp::Ge => tighten_lower(&mut lower_raw, name, lit(0)? - 1),
            PredOp::Gt => tighten_lower(&mut lower_raw, name, lit(0)?),
            other => {
                return Err(Error::Model(format!(
                    "interval encoding does not support operator {}",
                    other.as_str()
                )))
            }
        }
    }
    let mut out = Vec::with_capacity(cols.len());
    for col in &cols {
        let upper = match upper_raw.get(col.name.as_str()) {
            Some(u) => norm.normalize(&table.name, &col.name, *u)?,
            None => 1.0,
        };
        let lower = match lower_raw.get(col.name.as_str()) {
            Some(l) => Some(norm.normalize(&table.name, &col.name, *l)?),
            None => None,
        };
        out.push(IntervalBound { upper, lower });
    }
    Ok(out)
}

/// Fixed-width per-predicate featurization for one table: column one-hot,
/// operator one-hot, a normalized numeric slot, a signed hash slice for
/// literal identity, and a trailing flag used by the single all-zero row
/// emitted when the alias has no predicates at all.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureLayout {
    pub table: String,
    columns: Vec<String>,
}

impl FeatureLayout {
    pub fn new(schema: &Schema, table: &Table) -> FeatureLayout {
        FeatureLayout {
            table: table.name.clone(),
            columns: schema
                .filterable_columns(table)
                .iter()
                .map(|c| c.name.clone())
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len() + PredOp::ALL.len() + 1 + HASH_DIMS + 1
    }

    /// One row per predicate; an alias with no predicates yields exactly
    /// one row with only the trailing no-filter flag set.
    pub fn featurize(&self, aq: &AliasQuery<'_>, norm: &Normalizer) -> Result<Vec<Vec<f64>>> {
        let width = self.width();
        if aq.predicates.is_empty() {
            let mut row = vec![0.0; width];
            row[width - 1] = 1.0;
            return Ok(vec![row]);
        }
        let mut rows = Vec::with_capacity(aq.predicates.len());
        for pred in &aq.predicates {
            let col_idx = self
                .columns
                .iter()
                .position(|c| *c == pred.column)
                .ok_or_else(|| {
                    Error::Model(format!(
                        "column {}.{} is not filterable",
                        self.table, pred.column
                    ))
                })?;
            let mut row = vec![0.0; width];
            row[col_idx] = 1.0;
            let op_base = self.columns.len();
            row[op_base + pred.op.index()] = 1.0;
            let numeric_slot = op_base + PredOp::ALL.len();
            let hash_base = numeric_slot + 1;

            let ints: Vec<i64> = pred
                .literals
                .iter()
                .filter_map(|l| match l {
                    Scalar::Int(v) => Some(*v),
                    Scalar::Str(_) => None,
                })
                .collect();
            if !ints.is_empty() {
                let mut acc = 0.0;
                for v in &ints {
                    acc += norm.normalize(&self.table, &pred.column, *v)?;
                }
                row[numeric_slot] = acc / ints.len() as f64;
            }
            for token in literal_tokens(pred) {
                let (idx, sign) = signed_slot(&token);
                row[hash_base + idx] += sign;
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Hash tokens carrying a predicate's literal identity. Plain literals
/// contribute one token each (so `in` becomes a bag of its members);
/// patterns contribute character trigrams of their fixed segments, which
/// lets patterns sharing substrings share feature mass.
fn literal_tokens(pred: &Predicate) -> Vec<String> {
    match pred.op {
        PredOp::Like => match pred.literals.first() {
            Some(Scalar::Str(pat)) => pattern_tokens(pat),
            _ => Vec::new(),
        },
        _ => pred
            .literals
            .iter()
            .map(|l| match l {
                Scalar::Int(v) => format!("i:{v}"),
                Scalar::Str(s) => format!("s:{s}"),
            })
            .collect(),
    }
}

/// Trigrams of each non-wildcard segment; segments shorter than three
/// characters stand as whole tokens.
pub fn pattern_tokens(pattern: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for segment in pattern.split('%') {
        if segment.is_empty() {
            continue;
        }
        let chars: Vec<char> = segment.chars().collect();
        if chars.len() < 3 {
            tokens.push(format!("t:{segment}"));
        } else {
            for w in chars.windows(3) {
                tokens.push(format!("t:{}", w.iter().collect::<String>()));
            }
        }
    }
    tokens
}

fn signed_slot(token: &str) -> (usize, f64) {
    let h = fnv1a64(token.as_bytes());
    let idx = (h % HASH_DIMS as u64) as usize;
    let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
    (idx, sign)
}
