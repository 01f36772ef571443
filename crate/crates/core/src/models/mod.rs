//! Learned per-table estimators.
//!
//! Two families of cardinality models live behind the [`CardModel`]
//! trait and are chosen at runtime through [`CardModelRegistry`]: a
//! cumulative-distribution model for tables whose filterable columns are
//! all integers, and a pooled predicate-set regressor for everything
//! else. Join-key distribution models ([`sketch::SketchModel`]) sit
//! alongside them, one per table that participates in any join-key
//! group. Parameters are plain `f64` arrays owned by a [`ParamSet`];
//! each forward pass binds them onto a fresh autodiff tape.

pub mod cdf_model;
pub mod set_model;
pub mod sketch;
pub mod spline;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoding::Normalizer;
use crate::error::{Error, Result};
use crate::query::AliasQuery;
use crate::schema::{ColumnKind, Schema, Table};
use crate::util::derive_seed;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A model's parameters, keyed by stable names. Iteration order is the
/// name order, which training, checkpointing, and binding all rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name} shape/data mismatch"
        );
        let prev = self.entries.insert(name.to_string(), Param { shape, data });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name}")))
    }

    /// Replaces the data of an existing parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name}")))?;
        if data.len() != p.data.len() {
            return Err(Error::Model(format!(
                "parameter {name} expects {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }
}

/// Parameters of one model placed onto one tape, either as trainable
/// leaves or as constants (serving). Lives for a single forward pass.
pub struct Binding {
    nodes: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn trainable(tape: &Tape, params: &ParamSet) -> Binding {
        Binding {
            nodes: params
                .iter()
                .map(|(name, p)| (name.clone(), tape.param(p.shape.clone(), p.data.clone())))
                .collect(),
        }
    }

    pub fn frozen(tape: &Tape, params: &ParamSet) -> Binding {
        Binding {
            nodes: params
                .iter()
                .map(|(name, p)| {
                    (name.clone(), tape.constant(p.shape.clone(), p.data.clone()))
                })
                .collect(),
        }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {name} is not bound")))
    }

    /// Reads accumulated gradients after a backward pass; parameters the
    /// loss never touched come back as zeros.
    pub fn gradients(&self, tape: &Tape, params: &ParamSet) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, p) in params.iter() {
            let id = self.node(name)?;
            let g = tape.grad(id).unwrap_or_else(|| vec![0.0; p.data.len()]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Uniform init with the usual fan-based scale.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// A per-table selectivity estimator. Implementations build their whole
/// forward computation on the caller's tape so composed estimates stay
/// differentiable end to end; multiply by the table's row count to get a
/// cardinality.
pub trait CardModel {
    /// Registry name of the family this model belongs to.
    fn kind(&self) -> &'static str;

    fn table(&self) -> &str;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Estimated fraction of the table's rows kept by the alias's
    /// predicates, as a scalar node. May go negative for models built on
    /// signed expansions; serving layers clamp, training sees the raw
    /// value.
    fn selectivity(
        &self,
        tape: &Tape,
        binding: &Binding,
        schema: &Schema,
        aq: &AliasQuery<'_>,
        norm: &Normalizer,
    ) -> Result<NodeId>;
}

pub type CardModelFactory = fn(&Schema, &Table, u64) -> Result<Box<dyn CardModel>>;

/// Runtime-selected model families, keyed by name. `build` accepts the
/// pseudo-kind `auto`, which picks per table: integer-only tables get the
/// cumulative model, tables with categorical or text filters get the set
/// regressor.
pub struct CardModelRegistry {
    factories: BTreeMap<String, CardModelFactory>,
}

impl CardModelRegistry {
    pub fn empty() -> CardModelRegistry {
        CardModelRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> CardModelRegistry {
        let mut r = CardModelRegistry::empty();
        r.register(cdf_model::KIND, cdf_model::build);
        r.register(set_model::KIND, set_model::build);
        r
    }

    pub fn register(&mut self, name: &str, factory: CardModelFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn resolve_auto(schema: &Schema, table: &Table) -> &'static str {
        let all_int = schema
            .filterable_columns(table)
            .iter()
            .all(|c| c.kind == ColumnKind::Int);
        if all_int {
            cdf_model::KIND
        } else {
            set_model::KIND
        }
    }

    pub fn build(
        &self,
        kind: &str,
        schema: &Schema,
        table: &Table,
        seed: u64,
    ) -> Result<Box<dyn CardModel>> {
        let resolved = if kind == "auto" {
            Self::resolve_auto(schema, table)
        } else {
            kind
        };
        let factory = self.factories.get(resolved).ok_or_else(|| {
            Error::Model(format!(
                "unknown cardinality model {resolved:?}; available: {}",
                self.names().join(", ")
            ))
        })?;
        factory(schema, table, seed)
    }
}

/// Everything the estimator needs at serving time: one cardinality model
/// per table, one join-key distribution model per joining table, and the
/// literal normalizer they were trained with.
pub struct ModelBundle {
    pub schema: Schema,
    pub normalizer: Normalizer,
    pub card_models: BTreeMap<String, Box<dyn CardModel>>,
    pub sketch_models: BTreeMap<String, sketch::SketchModel>,
    pub sketch_dim: usize,
}

impl ModelBundle {
    /// Freshly initialized models for every table in the schema.
    pub fn build(
        schema: &Schema,
        registry: &CardModelRegistry,
        card_kind: &str,
        sketch_dim: usize,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<ModelBundle> {
        if sketch_dim == 0 {
            return Err(Error::Model("sketch dimension must be at least 1".into()));
        }
        let mut card_models = BTreeMap::new();
        let mut sketch_models = BTreeMap::new();
        for table in &schema.tables {
            let card = registry.build(
                card_kind,
                schema,
                table,
                derive_seed(seed, &format!("card/{}", table.name)),
            )?;
            card_models.insert(table.name.clone(), card);
            if !schema.groups_of_table(&table.name).is_empty() {
                let sk = sketch::SketchModel::build(
                    schema,
                    table,
                    sketch_dim,
                    derive_seed(seed, &format!("sketch/{}", table.name)),
                )?;
                sketch_models.insert(table.name.clone(), sk);
            }
        }
        Ok(ModelBundle {
            schema: schema.clone(),
            normalizer,
            card_models,
            sketch_models,
            sketch_dim,
        })
    }

    pub fn card_model(&self, table: &str) -> Result<&dyn CardModel> {
        self.card_models
            .get(table)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Model(format!("no cardinality model for table {table}")))
    }

    pub fn sketch_model(&self, table: &str) -> Result<&sketch::SketchModel> {
        self.sketch_models
            .get(table)
            .ok_or_else(|| Error::Model(format!("no join-key model for table {table}")))
    }
}
