//! Learned join-key distribution models.
//!
//! For every table that participates in a join-key group the sketch model
//! predicts, per group, a probability vector over a fixed number of
//! buckets: its guess at how the rows surviving a filter spread over the
//! join key. Composed estimates multiply these vectors bucketwise across
//! the tables of a join cluster and sum, so two tables whose filtered
//! keys concentrate in the same buckets yield large joins and disjoint
//! ones yield nothing. All of a table's groups share one predicate
//! encoder; only the output heads differ, and a single forward pass
//! produces every group's vector. With one bucket the vector is
//! identically [1.0] and composition degenerates to the plain
//! cardinality product, which is the ablation baseline.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoding::{FeatureLayout, Normalizer};
use crate::error::{Error, Result};
use crate::oracle::{join_key_frequencies, Dataset};
use crate::query::AliasQuery;
use crate::schema::{Schema, Table};
use crate::util::derive_seed;

use super::{xavier, Binding, ParamSet};

/// Width of the shared predicate encoder.
pub const ENCODER_HIDDEN: usize = 256;

/// Default number of buckets per join-key vector.
pub const DEFAULT_DIM: usize = 100;

#[derive(Debug)]
pub struct SketchModel {
    table: String,
    groups: Vec<String>,
    layout: FeatureLayout,
    dim: usize,
    params: ParamSet,
}

impl SketchModel {
    pub fn build(schema: &Schema, table: &Table, dim: usize, seed: u64) -> Result<SketchModel> {
        if dim == 0 {
            return Err(Error::Model("sketch dimension must be at least 1".into()));
        }
        let groups: Vec<String> = schema
            .groups_of_table(&table.name)
            .iter()
            .map(|g| g.id.clone())
            .collect();
        if groups.is_empty() {
            return Err(Error::Model(format!(
                "table {} joins nothing; it needs no join-key model",
                table.name
            )));
        }
        let layout = FeatureLayout::new(schema, table);
        let width = layout.width();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sketch-init"));
        let mut params = ParamSet::new();
        params.insert(
            "enc.w",
            vec![width, ENCODER_HIDDEN],
            xavier(&mut rng, width, ENCODER_HIDDEN),
        );
        params.insert("enc.b", vec![ENCODER_HIDDEN], vec![0.0; ENCODER_HIDDEN]);
        for gid in &groups {
            params.insert(
                &format!("head.{gid}.w"),
                vec![ENCODER_HIDDEN, dim],
                xavier(&mut rng, ENCODER_HIDDEN, dim),
            );
            params.insert(&format!("head.{gid}.b"), vec![dim], vec![0.0; dim]);
        }
        Ok(SketchModel {
            table: table.name.clone(),
            groups,
            layout,
            dim,
            params,
        })
    }

    pub fn table(&self) -> &str {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_ids(&self) -> &[String] {
        &self.groups
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Predicted key distributions for every group the table joins, from
    /// one shared encoder pass.
    pub fn sketches(
        &self,
        tape: &Tape,
        binding: &Binding,
        aq: &AliasQuery<'_>,
        norm: &Normalizer,
    ) -> Result<BTreeMap<String, NodeId>> {
        let rows = self.layout.featurize(aq, norm)?;
        let n = rows.len();
        let ew = binding.node("enc.w")?;
        let eb = binding.node("enc.b")?;
        let mut pooled: Option<NodeId> = None;
        for row in rows {
            let x = tape.constant(vec![self.layout.width()], row);
            let lin = tape.matmul(x, ew)?;
            let lin = tape.add(lin, eb)?;
            let emb = tape.softplus(lin);
            pooled = Some(match pooled {
                None => emb,
                Some(acc) => tape.add(acc, emb)?,
            });
        }
        let enc = tape.mul_scalar(pooled.expect("at least one feature row"), 1.0 / n as f64);
        let mut out = BTreeMap::new();
        for gid in &self.groups {
            let lin = tape.matmul(enc, binding.node(&format!("head.{gid}.w"))?)?;
            let lin = tape.add(lin, binding.node(&format!("head.{gid}.b"))?)?;
            let probs = tape.softmax(lin)?;
            out.insert(gid.clone(), probs);
        }
        Ok(out)
    }
}

/// How well a table's predicted key vector matches the data under one
/// filter, measured on self-collision mass: sum of squared probabilities
/// for the predicted vector versus the exact filtered key distribution.
/// The two agree for a perfect sketch with enough buckets; the gap is a
/// bucket-resolution and model-error diagnostic. Returns (predicted,
/// exact). Needs the dataset — serving paths never call this.
pub fn approximation_quality(
    dataset: &Dataset,
    schema: &Schema,
    model: &SketchModel,
    norm: &Normalizer,
    aq: &AliasQuery<'_>,
    group_id: &str,
) -> Result<(f64, f64)> {
    if !model.groups.iter().any(|g| g == group_id) {
        return Err(Error::Model(format!(
            "table {} has no key in group {group_id}",
            model.table
        )));
    }
    let tape = Tape::new();
    let binding = Binding::frozen(&tape, model.params());
    let sketches = model.sketches(&tape, &binding, aq, norm)?;
    let predicted: f64 = tape
        .value(sketches[group_id])
        .iter()
        .map(|p| p * p)
        .sum();

    let freq = join_key_frequencies(dataset, schema, aq, group_id)?;
    if freq.total == 0 {
        return Err(Error::Model(
            "no rows satisfy the filter; collision mass is undefined".into(),
        ));
    }
    let total = freq.total as f64;
    let exact: f64 = freq
        .counts
        .values()
        .map(|c| {
            let p = *c as f64 / total;
            p * p
        })
        .sum();
    Ok((predicted, exact))
}
