//! Query model: conjunctive select-project-join queries over a schema.
//!
//! A query names table aliases, equi-join conditions between key columns,
//! and per-alias filter predicates. Everything is plain data; evaluation
//! against rows lives with the dataset code, and estimation lives with
//! the models.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, Schema};

/// A literal appearing in a predicate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Str(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Str(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredOp {
    Eq,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    Like,
    IsNull,
    NotNull,
}

impl PredOp {
    pub const ALL: [PredOp; 9] = [
        PredOp::Eq,
        PredOp::Lt,
        PredOp::Le,
        PredOp::Gt,
        PredOp::Ge,
        PredOp::In,
        PredOp::Like,
        PredOp::IsNull,
        PredOp::NotNull,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|o| *o == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PredOp::Eq => "eq",
            PredOp::Lt => "lt",
            PredOp::Le => "le",
            PredOp::Gt => "gt",
            PredOp::Ge => "ge",
            PredOp::In => "in",
            PredOp::Like => "like",
            PredOp::IsNull => "is_null",
            PredOp::NotNull => "not_null",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub alias: String,
    pub column: String,
    pub op: PredOp,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub literals: Vec<Scalar>,
}

impl Predicate {
    /// Stable textual form, used in cache keys and diagnostics.
    pub fn signature(&self) -> String {
        let lits: Vec<String> = self.literals.iter().map(|l| l.to_string()).collect();
        format!(
            "{}.{} {} [{}]",
            self.alias,
            self.column,
            self.op.as_str(),
            lits.join(",")
        )
    }
}

/// One join condition: equality between two "alias.column" key references.
pub type JoinCond = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    /// alias -> table name. BTreeMap keeps serialization deterministic.
    pub aliases: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joins: Vec<JoinCond>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<Predicate>,
}

/// The restriction of a query to one alias: the table plus the predicates
/// that touch it. This is the unit the per-table models consume.
#[derive(Debug, Clone)]
pub struct AliasQuery<'q> {
    pub alias: &'q str,
    pub table: &'q str,
    pub predicates: Vec<&'q Predicate>,
}

impl Query {
    pub fn single(alias: &str, table: &str, predicates: Vec<Predicate>) -> Query {
        let mut aliases = BTreeMap::new();
        aliases.insert(alias.to_string(), table.to_string());
        Query {
            aliases,
            joins: Vec::new(),
            predicates,
        }
    }

    pub fn alias_query<'q>(&'q self, alias: &'q str) -> Result<AliasQuery<'q>> {
        let table = self
            .aliases
            .get(alias)
            .ok_or_else(|| Error::Query(format!("unknown alias {alias:?}")))?;
        Ok(AliasQuery {
            alias,
            table,
            predicates: self.predicates.iter().filter(|p| p.alias == alias).collect(),
        })
    }

    /// All per-alias views, in alias order.
    pub fn alias_queries(&self) -> Vec<AliasQuery<'_>> {
        self.aliases
            .iter()
            .map(|(a, t)| AliasQuery {
                alias: a,
                table: t,
                predicates: self.predicates.iter().filter(|p| &p.alias == a).collect(),
            })
            .collect()
    }

    /// Checks the query against a schema: aliases resolve, joins connect
    /// key columns of one group, predicates fit their columns, and the
    /// join structure is connected and cycle-free.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.aliases.is_empty() {
            return Err(Error::Query("query has no aliases".into()));
        }
        for (alias, table) in &self.aliases {
            schema
                .table(table)
                .map_err(|_| Error::Query(format!("alias {alias:?} names unknown table {table:?}")))?;
        }

        for (left, right) in &self.joins {
            let (la, lc) = self.split_alias_ref(left)?;
            let (ra, rc) = self.split_alias_ref(right)?;
            if la == ra {
                return Err(Error::Query(format!(
                    "join condition {left} = {right} relates an alias to itself"
                )));
            }
            let lt = &self.aliases[&la];
            let rt = &self.aliases[&ra];
            let lg = schema.group_of(lt, &lc).ok_or_else(|| {
                Error::Query(format!("join column {left} is not a join key"))
            })?;
            let rg = schema.group_of(rt, &rc).ok_or_else(|| {
                Error::Query(format!("join column {right} is not a join key"))
            })?;
            if lg.id != rg.id {
                return Err(Error::Query(format!(
                    "join {left} = {right} crosses groups {:?} and {:?}",
                    lg.id, rg.id
                )));
            }
        }

        for p in &self.predicates {
            let table = self
                .aliases
                .get(&p.alias)
                .ok_or_else(|| Error::Query(format!("predicate on unknown alias {:?}", p.alias)))?;
            let col = schema
                .table(table)?
                .column(&p.column)
                .ok_or_else(|| {
                    Error::Query(format!("predicate on unknown column {}.{}", p.alias, p.column))
                })?;
            if schema.is_join_key(table, &p.column) {
                return Err(Error::Query(format!(
                    "predicate on join key {}.{}; keys may only appear in join conditions",
                    p.alias, p.column
                )));
            }
            let arity_ok = match p.op {
                PredOp::IsNull | PredOp::NotNull => p.literals.is_empty(),
                PredOp::In => !p.literals.is_empty(),
                _ => p.literals.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Query(format!(
                    "predicate {} has wrong literal count",
                    p.signature()
                )));
            }
            for lit in &p.literals {
                let compatible = match (col.kind, lit) {
                    (ColumnKind::Int, Scalar::Int(_)) => true,
                    (ColumnKind::Categorical | ColumnKind::Text, Scalar::Str(_)) => true,
                    _ => false,
                };
                if !compatible {
                    return Err(Error::Query(format!(
                        "literal {lit} does not fit column kind of {}.{}",
                        p.alias, p.column
                    )));
                }
            }
            match p.op {
                PredOp::Lt | PredOp::Le | PredOp::Gt | PredOp::Ge if col.kind != ColumnKind::Int => {
                    return Err(Error::Query(format!(
                        "range predicate {} on non-numeric column",
                        p.signature()
                    )));
                }
                PredOp::Like if col.kind != ColumnKind::Text => {
                    return Err(Error::Query(format!(
                        "LIKE predicate {} on non-text column",
                        p.signature()
                    )));
                }
                PredOp::Like => {
                    if let Some(Scalar::Str(pat)) = p.literals.first() {
                        if pat.contains('_') {
                            return Err(Error::Query(
                                "LIKE supports only the % wildcard".into(),
                            ));
                        }
                    }
                }
                _ => {}
            }
        }

        crate::template::check_join_structure(self, schema)?;
        Ok(())
    }

    /// Splits "alias.column" and checks the alias exists.
    pub fn split_alias_ref(&self, s: &str) -> Result<(String, String)> {
        let (a, c) = s
            .split_once('.')
            .ok_or_else(|| Error::Query(format!("malformed reference {s:?}")))?;
        if !self.aliases.contains_key(a) {
            return Err(Error::Query(format!("reference {s:?} names unknown alias")));
        }
        Ok((a.to_string(), c.to_string()))
    }
}
