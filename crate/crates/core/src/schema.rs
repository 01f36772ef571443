//! Schema catalog: tables, columns, and join-key groups.
//!
//! The schema is deliberately data-free. It records structure (which
//! columns exist, which keys are mutually joinable) plus optional domain
//! hints, and everything downstream — encoding, models, the composer —
//! works from this structure alone. Only the dataset side of the code
//! base ever sees rows.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage class of a column. Numeric columns are integer-valued; that is
/// the only numeric flavor the engine supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Int,
    Categorical,
    Text,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Inclusive numeric domain bounds, if known ahead of time. Used to
    /// widen workload-fitted normalizers; only meaningful for `Int`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<i64>,
    /// Expected number of distinct values, if known. Only a hint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distinct: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub name: String,
    /// Row count: the generator produces exactly this many rows, and the
    /// estimator uses it to scale selectivities into cardinalities.
    pub cardinality: u64,
    #[serde(rename = "column")]
    pub columns: Vec<Column>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// A set of mutually joinable key columns ("table.column" references).
/// Any two members may appear in an equi-join condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinKeyGroup {
    pub id: String,
    pub members: Vec<String>,
}

impl JoinKeyGroup {
    pub fn member_pairs(&self) -> Result<Vec<(String, String)>> {
        self.members.iter().map(|m| split_column_ref(m)).collect()
    }
}

/// Names end up spliced into references ("A.x") and canonical alias labels
/// ("A#0"), so they must stay plain words.
fn check_ident(what: &str, s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !s.chars().next().unwrap().is_ascii_digit();
    if ok {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "{what} {s:?} must be a plain identifier (letters, digits, underscore; no leading digit)"
        )))
    }
}

/// Splits a "table.column" reference. Both halves must be non-empty.
pub fn split_column_ref(s: &str) -> Result<(String, String)> {
    match s.split_once('.') {
        Some((t, c)) if !t.is_empty() && !c.is_empty() => Ok((t.to_string(), c.to_string())),
        _ => Err(Error::Schema(format!(
            "malformed column reference {s:?}, expected \"table.column\""
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(rename = "table")]
    pub tables: Vec<Table>,
    #[serde(rename = "group", default)]
    pub groups: Vec<JoinKeyGroup>,
}

impl Schema {
    /// Parses and validates a schema document.
    pub fn from_toml_str(text: &str) -> Result<Schema> {
        let schema: Schema =
            toml::from_str(text).map_err(|e| Error::Schema(format!("parse failure: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(format!("serialize failure: {e}")))
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown table {name:?}")))
    }

    pub fn group(&self, id: &str) -> Result<&JoinKeyGroup> {
        self.groups
            .iter()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::Schema(format!("unknown join-key group {id:?}")))
    }

    /// The group a column belongs to, if any. A column is a join key iff
    /// this returns `Some`.
    pub fn group_of(&self, table: &str, column: &str) -> Option<&JoinKeyGroup> {
        self.groups
            .iter()
            .find(|g| g.members.iter().any(|m| m == &format!("{table}.{column}")))
    }

    pub fn is_join_key(&self, table: &str, column: &str) -> bool {
        self.group_of(table, column).is_some()
    }

    /// Columns of `table` that predicates may touch (everything that is
    /// not a join key).
    pub fn filterable_columns<'a>(&self, table: &'a Table) -> Vec<&'a Column> {
        table
            .columns
            .iter()
            .filter(|c| !self.is_join_key(&table.name, &c.name))
            .collect()
    }

    /// The groups a table participates in, in group-id order.
    pub fn groups_of_table(&self, table: &str) -> Vec<&JoinKeyGroup> {
        let mut gs: Vec<&JoinKeyGroup> = self
            .groups
            .iter()
            .filter(|g| {
                g.members
                    .iter()
                    .any(|m| m.split_once('.').map(|(t, _)| t == table).unwrap_or(false))
            })
            .collect();
        gs.sort_by(|a, b| a.id.cmp(&b.id));
        gs
    }

    /// The key column of `table` inside `group`.
    pub fn key_column(&self, table: &str, group_id: &str) -> Result<String> {
        let group = self.group(group_id)?;
        for m in &group.members {
            let (t, c) = split_column_ref(m)?;
            if t == table {
                return Ok(c);
            }
        }
        Err(Error::Schema(format!(
            "table {table:?} is not a member of group {group_id:?}"
        )))
    }

    fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::Schema("schema declares no tables".into()));
        }
        let mut names = BTreeSet::new();
        for t in &self.tables {
            check_ident("table name", &t.name)?;
            if !names.insert(t.name.clone()) {
                return Err(Error::Schema(format!("duplicate table name {:?}", t.name)));
            }
            if t.cardinality == 0 {
                return Err(Error::Schema(format!(
                    "table {:?} has cardinality 0; tables must be non-empty",
                    t.name
                )));
            }
            if t.columns.is_empty() {
                return Err(Error::Schema(format!("table {:?} has no columns", t.name)));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                check_ident("column name", &c.name)?;
                if !cols.insert(c.name.clone()) {
                    return Err(Error::Schema(format!(
                        "duplicate column {:?} in table {:?}",
                        c.name, t.name
                    )));
                }
                if let (Some(lo), Some(hi)) = (c.min, c.max) {
                    if lo > hi {
                        return Err(Error::Schema(format!(
                            "column {}.{} has empty domain hint [{lo}, {hi}]",
                            t.name, c.name
                        )));
                    }
                }
                if (c.min.is_some() || c.max.is_some()) && c.kind != ColumnKind::Int {
                    return Err(Error::Schema(format!(
                        "column {}.{} carries numeric bounds but is not int",
                        t.name, c.name
                    )));
                }
            }
        }

        // Group hygiene: ids unique, members resolve, kinds agree, and no
        // column sits in two groups.
        let mut gids = BTreeSet::new();
        let mut claimed: BTreeMap<String, String> = BTreeMap::new();
        for g in &self.groups {
            check_ident("group id", &g.id)?;
            if !gids.insert(g.id.clone()) {
                return Err(Error::Schema(format!("duplicate group id {:?}", g.id)));
            }
            if g.members.len() < 2 {
                return Err(Error::Schema(format!(
                    "group {:?} needs at least two members to be joinable",
                    g.id
                )));
            }
            let mut kind: Option<ColumnKind> = None;
            let mut seen_tables = BTreeSet::new();
            for m in &g.members {
                let (t, c) = split_column_ref(m)?;
                let table = self.table(&t).map_err(|_| {
                    Error::Schema(format!("group {:?} references unknown table {t:?}", g.id))
                })?;
                let col = table.column(&c).ok_or_else(|| {
                    Error::Schema(format!("group {:?} references unknown column {m:?}", g.id))
                })?;
                if let Some(k) = kind {
                    if k != col.kind {
                        return Err(Error::Schema(format!(
                            "group {:?} mixes column kinds ({m} differs)",
                            g.id
                        )));
                    }
                } else {
                    kind = Some(col.kind);
                }
                if !seen_tables.insert(t.clone()) {
                    return Err(Error::Schema(format!(
                        "group {:?} lists table {t:?} twice; one key column per table per group",
                        g.id
                    )));
                }
                if let Some(prev) = claimed.insert(m.clone(), g.id.clone()) {
                    return Err(Error::Schema(format!(
                        "column {m:?} belongs to both group {prev:?} and group {:?}",
                        g.id
                    )));
                }
            }
        }
        Ok(())
    }
}
