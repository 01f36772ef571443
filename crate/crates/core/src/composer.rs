//! Composing per-table estimates into join-query cardinalities.
//!
//! The estimate for an acyclic join is assembled from per-alias
//! primitives alone: one cardinality estimate and one key-distribution
//! vector per join-key group for each alias. Join-key clusters are
//! consumed one at a time (always one sharing an alias with what came
//! before, so the partial result stays a connected join); each cluster
//! contributes the bucketwise product of its members' key vectors,
//! collapsed to its sum, and each alias contributes its cardinality the
//! first time it appears. Because inputs are per-alias only, templates
//! never seen during training compose exactly like seen ones.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{NodeId, Tape};
use crate::encoding::Normalizer;
use crate::error::{Error, Result};
use crate::models::{Binding, ModelBundle};
use crate::oracle::{execute_cardinality, join_key_frequencies, Dataset, Value};
use crate::query::{AliasQuery, Query};
use crate::template::{
    canonical_template, clusters, connected_alias_subsets, find_next_group, restrict_clusters,
    QueryGroup,
};
use crate::schema::Schema;

/// Serving-time floor factor: estimates never drop below this fraction of
/// the smallest involved table, so downstream consumers never see a
/// zero-cost join.
pub const SERVING_FLOOR_FACTOR: f64 = 1e-6;

/// Source of per-alias primitives. One provider instance serves exactly
/// one tape; implementations may cache bindings keyed to that tape.
pub trait PerAliasProvider {
    /// Raw estimated row count for the alias's single-table restriction.
    /// May be non-positive for models built on signed expansions.
    fn alias_cardinality(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<NodeId>;

    /// Normalized key vectors for every group the alias's table joins,
    /// produced by a single primitive-model invocation.
    fn alias_sketches(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<BTreeMap<String, NodeId>>;
}

/// Per-alias nodes prepared once and reused across every subquery.
pub struct AliasNodes {
    pub card: NodeId,
    pub sketches: BTreeMap<String, NodeId>,
}

/// A composed estimate with the pieces serving needs: the raw scalar
/// node plus the per-alias cardinality and per-cluster dot-product nodes
/// it was assembled from.
pub struct Composition {
    pub estimate: NodeId,
    pub alias_cards: BTreeMap<String, NodeId>,
    pub cluster_dots: Vec<NodeId>,
}

/// Computes each alias's primitives exactly once: one cardinality call
/// per alias, plus one sketch call per alias that participates in a join.
pub fn prepare_alias_nodes(
    tape: &Tape,
    schema: &Schema,
    query: &Query,
    provider: &mut dyn PerAliasProvider,
) -> Result<BTreeMap<String, AliasNodes>> {
    let cls = clusters(query, schema)?;
    let joined: BTreeSet<&String> = cls.iter().flat_map(|c| c.aliases.iter()).collect();
    let mut out = BTreeMap::new();
    for alias in query.aliases.keys() {
        let aq = query.alias_query(alias)?;
        let card = provider.alias_cardinality(tape, schema, &aq)?;
        let sketches = if joined.contains(alias) {
            provider.alias_sketches(tape, schema, &aq)?
        } else {
            BTreeMap::new()
        };
        out.insert(alias.clone(), AliasNodes { card, sketches });
    }
    Ok(out)
}

/// The consumption loop over a set of join-key clusters restricted to
/// `scope`. `nodes` must cover every alias in scope.
pub fn compose_scope(
    tape: &Tape,
    all_clusters: &[QueryGroup],
    scope: &BTreeSet<String>,
    nodes: &BTreeMap<String, AliasNodes>,
) -> Result<Composition> {
    let mut remaining = restrict_clusters(all_clusters, scope);
    let mut consumed: BTreeSet<String> = BTreeSet::new();
    let mut estimate = tape.scalar_const(1.0);
    let mut alias_cards = BTreeMap::new();
    let mut cluster_dots = Vec::new();

    let card_of = |alias: &String| -> Result<NodeId> {
        nodes
            .get(alias)
            .map(|n| n.card)
            .ok_or_else(|| Error::Model(format!("no prepared estimate for alias {alias}")))
    };

    while !remaining.is_empty() {
        let idx = find_next_group(&consumed, &remaining)?;
        let grp = remaining.remove(idx);
        // bucketwise product of the members' key vectors, seeded with ones
        let dim = {
            let first = grp.aliases.iter().next().expect("non-empty cluster");
            let sk = nodes[first].sketches.get(&grp.group_id).ok_or_else(|| {
                Error::Model(format!(
                    "alias {first} has no key vector for group {}",
                    grp.group_id
                ))
            })?;
            tape.shape(*sk)[0]
        };
        let mut joint = tape.constant(vec![dim], vec![1.0; dim]);
        for alias in &grp.aliases {
            let sk = nodes[alias].sketches.get(&grp.group_id).ok_or_else(|| {
                Error::Model(format!(
                    "alias {alias} has no key vector for group {}",
                    grp.group_id
                ))
            })?;
            joint = tape.mul(joint, *sk)?;
            if consumed.insert(alias.clone()) {
                let card = card_of(alias)?;
                alias_cards.insert(alias.clone(), card);
                estimate = tape.mul(estimate, card)?;
            }
        }
        let dot = tape.sum(joint);
        cluster_dots.push(dot);
        estimate = tape.mul(estimate, dot)?;
    }
    // aliases outside every cluster: single-table scopes
    for alias in scope {
        if !consumed.contains(alias) {
            let card = card_of(alias)?;
            alias_cards.insert(alias.clone(), card);
            estimate = tape.mul(estimate, card)?;
        }
    }
    Ok(Composition {
        estimate,
        alias_cards,
        cluster_dots,
    })
}

/// One-shot composition of a full query on the caller's tape. The raw
/// scalar keeps gradients flowing for training; serving wraps it with
/// [`serve`] semantics instead.
pub fn compose(
    tape: &Tape,
    schema: &Schema,
    query: &Query,
    provider: &mut dyn PerAliasProvider,
) -> Result<Composition> {
    query.validate(schema)?;
    let nodes = prepare_alias_nodes(tape, schema, query, provider)?;
    let cls = clusters(query, schema)?;
    let scope: BTreeSet<String> = query.aliases.keys().cloned().collect();
    compose_scope(tape, &cls, &scope, &nodes)
}

/// A finished estimate. `raw` is the model output as composed; `served`
/// replaces non-positive per-alias factors with one-row equivalents and
/// floors the result, which is what optimizers consume. `negative`
/// records that the raw composition came out below zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServedEstimate {
    pub raw: f64,
    pub served: f64,
    pub negative: bool,
}

/// Applies the serving policy to a composed graph: per-alias estimates
/// at or below zero count as one row, and the final value is floored at
/// a fixed fraction of the smallest involved table.
pub fn serve(
    tape: &Tape,
    schema: &Schema,
    query: &Query,
    composition: &Composition,
) -> Result<ServedEstimate> {
    let raw = tape.scalar(composition.estimate)?;
    let mut served = 1.0;
    for cards in composition.alias_cards.values() {
        let v = tape.scalar(*cards)?;
        served *= if v <= 0.0 { 1.0 } else { v };
    }
    for dot in &composition.cluster_dots {
        served *= tape.scalar(*dot)?;
    }
    let mut min_rows = f64::INFINITY;
    for table in query.aliases.values() {
        min_rows = min_rows.min(schema.table(table)?.cardinality as f64);
    }
    let served = served.max(SERVING_FLOOR_FACTOR * min_rows);
    Ok(ServedEstimate {
        raw,
        served,
        negative: raw < 0.0,
    })
}

// ---------------------------------------------------------------------------
// providers

/// Primitives drawn from trained models. Valid for exactly one tape;
/// bindings are created lazily, so only the tables a batch touches get
/// bound (and only those accumulate gradients).
pub struct LearnedProvider<'a> {
    bundle: &'a ModelBundle,
    trainable: bool,
    card_bindings: BTreeMap<String, Binding>,
    sketch_bindings: BTreeMap<String, Binding>,
    pub card_calls: usize,
    pub sketch_calls: usize,
}

impl<'a> LearnedProvider<'a> {
    pub fn new(bundle: &'a ModelBundle, trainable: bool) -> LearnedProvider<'a> {
        LearnedProvider {
            bundle,
            trainable,
            card_bindings: BTreeMap::new(),
            sketch_bindings: BTreeMap::new(),
            card_calls: 0,
            sketch_calls: 0,
        }
    }

    pub fn total_calls(&self) -> usize {
        self.card_calls + self.sketch_calls
    }

    /// Binding used for a table's cardinality model, if the provider has
    /// touched it on this tape.
    pub fn card_binding(&self, table: &str) -> Option<&Binding> {
        self.card_bindings.get(table)
    }

    pub fn sketch_binding(&self, table: &str) -> Option<&Binding> {
        self.sketch_bindings.get(table)
    }

    /// Tables whose cardinality models this provider has bound — exactly
    /// the models that can carry gradient after a backward pass.
    pub fn bound_card_tables(&self) -> Vec<String> {
        self.card_bindings.keys().cloned().collect()
    }

    pub fn bound_sketch_tables(&self) -> Vec<String> {
        self.sketch_bindings.keys().cloned().collect()
    }

    fn norm(&self) -> &Normalizer {
        &self.bundle.normalizer
    }
}

impl PerAliasProvider for LearnedProvider<'_> {
    fn alias_cardinality(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<NodeId> {
        let model = self.bundle.card_model(aq.table)?;
        if !self.card_bindings.contains_key(aq.table) {
            let binding = if self.trainable {
                Binding::trainable(tape, model.params())
            } else {
                Binding::frozen(tape, model.params())
            };
            self.card_bindings.insert(aq.table.to_string(), binding);
        }
        let binding = &self.card_bindings[aq.table];
        self.card_calls += 1;
        let sel = model.selectivity(tape, binding, schema, aq, &self.bundle.normalizer)?;
        let rows = schema.table(aq.table)?.cardinality as f64;
        Ok(tape.mul_scalar(sel, rows))
    }

    fn alias_sketches(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<BTreeMap<String, NodeId>> {
        let _ = schema;
        let model = self.bundle.sketch_model(aq.table)?;
        if !self.sketch_bindings.contains_key(aq.table) {
            let binding = if self.trainable {
                Binding::trainable(tape, model.params())
            } else {
                Binding::frozen(tape, model.params())
            };
            self.sketch_bindings.insert(aq.table.to_string(), binding);
        }
        let binding = &self.sketch_bindings[aq.table];
        self.sketch_calls += 1;
        let norm = self.norm();
        model.sketches(tape, binding, aq, norm)
    }
}

/// Primitives computed exactly from a dataset: true filtered counts and
/// true normalized key distributions over each group's full value
/// domain. Exists to validate the composition machinery — with these
/// inputs, single-cluster estimates equal true join sizes identically.
pub struct OracleProvider<'a> {
    dataset: &'a Dataset,
    /// group id -> every distinct non-null key value in any member table.
    domains: BTreeMap<String, BTreeMap<Value, usize>>,
    pub card_calls: usize,
    pub sketch_calls: usize,
}

impl<'a> OracleProvider<'a> {
    pub fn new(schema: &Schema, dataset: &'a Dataset) -> Result<OracleProvider<'a>> {
        let mut domains = BTreeMap::new();
        for group in &schema.groups {
            let mut values: BTreeSet<Value> = BTreeSet::new();
            for member in &group.members {
                let (table, column) = crate::schema::split_column_ref(member)?;
                let data = dataset.table(&table)?;
                let ci = data.column_index(&column)?;
                for row in &data.rows {
                    if row[ci] != Value::Null {
                        values.insert(row[ci].clone());
                    }
                }
            }
            let index: BTreeMap<Value, usize> = values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            domains.insert(group.id.clone(), index);
        }
        Ok(OracleProvider {
            dataset,
            domains,
            card_calls: 0,
            sketch_calls: 0,
        })
    }
}

impl PerAliasProvider for OracleProvider<'_> {
    fn alias_cardinality(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<NodeId> {
        self.card_calls += 1;
        let single = Query::single(
            aq.alias,
            aq.table,
            aq.predicates.iter().map(|p| (*p).clone()).collect(),
        );
        let count = execute_cardinality(self.dataset, schema, &single)?;
        Ok(tape.scalar_const(count as f64))
    }

    fn alias_sketches(
        &mut self,
        tape: &Tape,
        schema: &Schema,
        aq: &AliasQuery<'_>,
    ) -> Result<BTreeMap<String, NodeId>> {
        self.sketch_calls += 1;
        let mut out = BTreeMap::new();
        for group in schema.groups_of_table(aq.table) {
            let index = &self.domains[&group.id];
            let freq = join_key_frequencies(self.dataset, schema, aq, &group.id)?;
            let mut probs = vec![0.0; index.len().max(1)];
            if freq.total > 0 {
                let total = freq.total as f64;
                for (value, count) in &freq.counts {
                    let slot = index
                        .get(value)
                        .ok_or_else(|| Error::Model("key value outside group domain".into()))?;
                    probs[*slot] = *count as f64 / total;
                }
            }
            out.insert(group.id.clone(), tape.constant(vec![probs.len()], probs));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// serving session

/// The standalone query equivalent to restricting `query` to `subset`:
/// same tables and predicates, joins rendered as one chain per surviving
/// cluster.
pub fn restrict_query(query: &Query, schema: &Schema, subset: &BTreeSet<String>) -> Result<Query> {
    let mut aliases = BTreeMap::new();
    for alias in subset {
        let table = query
            .aliases
            .get(alias)
            .ok_or_else(|| Error::Query(format!("unknown alias {alias}")))?;
        aliases.insert(alias.clone(), table.clone());
    }
    let mut joins = Vec::new();
    for cluster in restrict_clusters(&clusters(query, schema)?, subset) {
        let members: Vec<&String> = cluster.aliases.iter().collect();
        for pair in members.windows(2) {
            let left_col = schema.key_column(&query.aliases[pair[0]], &cluster.group_id)?;
            let right_col = schema.key_column(&query.aliases[pair[1]], &cluster.group_id)?;
            joins.push((
                format!("{}.{left_col}", pair[0]),
                format!("{}.{right_col}", pair[1]),
            ));
        }
    }
    let predicates = query
        .predicates
        .iter()
        .filter(|p| subset.contains(&p.alias))
        .cloned()
        .collect();
    Ok(Query {
        aliases,
        joins,
        predicates,
    })
}

/// Cache key: the canonical join shape plus every predicate rewritten
/// into canonical alias labels, so the same subquery posed twice — under
/// any alias names — hits the same entry, while any literal change
/// misses.
fn cache_key(query: &Query, schema: &Schema) -> Result<String> {
    let (template, labels) = canonical_template(query, schema)?;
    let mut preds: Vec<String> = query
        .predicates
        .iter()
        .map(|p| {
            format!(
                "{}.{} {} {}",
                labels[&p.alias],
                p.column,
                p.op.as_str(),
                serde_json::to_string(&p.literals).expect("literals serialize")
            )
        })
        .collect();
    preds.sort();
    Ok(format!("{}||{}", template.key(), preds.join(";")))
}

/// One estimate of a connected subquery, in the original query's aliases.
#[derive(Debug, Clone)]
pub struct SubqueryEstimate {
    pub aliases: BTreeSet<String>,
    pub query: Query,
    pub estimate: ServedEstimate,
}

/// Serving-side estimator with a session cache. Estimates are cached by
/// canonical subquery, so repeated questions cost zero model calls, and
/// enumerating a query's subqueries reuses one set of per-alias
/// primitives across all of them.
pub struct EstimateSession<'a> {
    bundle: &'a ModelBundle,
    cache: BTreeMap<String, ServedEstimate>,
    /// Primitive-model invocations performed so far.
    pub model_calls: usize,
}

impl<'a> EstimateSession<'a> {
    pub fn new(bundle: &'a ModelBundle) -> EstimateSession<'a> {
        EstimateSession {
            bundle,
            cache: BTreeMap::new(),
            model_calls: 0,
        }
    }

    /// Estimate one query, consulting and filling the cache.
    pub fn estimate(&mut self, query: &Query) -> Result<ServedEstimate> {
        query.validate(&self.bundle.schema)?;
        let key = cache_key(query, &self.bundle.schema)?;
        if let Some(hit) = self.cache.get(&key) {
            return Ok(*hit);
        }
        let tape = Tape::new();
        let mut provider = LearnedProvider::new(self.bundle, false);
        let composition = compose(&tape, &self.bundle.schema, query, &mut provider)?;
        let served = serve(&tape, &self.bundle.schema, query, &composition)?;
        self.model_calls += provider.total_calls();
        self.cache.insert(key, served);
        Ok(served)
    }

    /// Estimates every connected subquery of `query` (the query itself
    /// included), ascending by size. Per-alias primitives are computed
    /// once for all of them: k cardinality calls plus k sketch calls for
    /// a k-alias join, and zero calls when every subquery is cached.
    pub fn estimate_all_subqueries(&mut self, query: &Query) -> Result<Vec<SubqueryEstimate>> {
        let schema = &self.bundle.schema;
        query.validate(schema)?;
        let all: BTreeSet<String> = query.aliases.keys().cloned().collect();
        let subsets = connected_alias_subsets(&all, &clusters(query, schema)?);
        let mut entries: Vec<(BTreeSet<String>, Query, String)> = Vec::new();
        let mut all_hit = true;
        for subset in subsets {
            let sub = restrict_query(query, schema, &subset)?;
            let key = cache_key(&sub, schema)?;
            all_hit &= self.cache.contains_key(&key);
            entries.push((subset, sub, key));
        }

        if !all_hit {
            let tape = Tape::new();
            let mut provider = LearnedProvider::new(self.bundle, false);
            let nodes = prepare_alias_nodes(&tape, schema, query, &mut provider)?;
            let cls = clusters(query, schema)?;
            for (subset, sub, key) in &entries {
                if self.cache.contains_key(key) {
                    continue;
                }
                let composition = compose_scope(&tape, &cls, subset, &nodes)?;
                let served = serve(&tape, schema, sub, &composition)?;
                self.cache.insert(key.clone(), served);
            }
            self.model_calls += provider.total_calls();
        }

        Ok(entries
            .into_iter()
            .map(|(aliases, query, key)| SubqueryEstimate {
                aliases,
                estimate: self.cache[&key],
                query,
            })
            .collect())
    }
}
