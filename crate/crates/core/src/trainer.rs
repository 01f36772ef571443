//! End-to-end training of the per-table models through the composer.
//!
//! Every query in a batch is composed into one differentiable estimate,
//! compared against its true cardinality, and the gradient of the mean
//! loss flows back through the composition into exactly the models whose
//! tables the batch touches. Queries are batched within a join template
//! (shared graph shape), template order is shuffled each epoch, and an
//! adaptive-moment optimizer applies the updates. Training never reads
//! rows; labels are all it knows about the data.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::composer::{compose, LearnedProvider};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::template::canonical_template;
use crate::util::derive_seed;
use crate::workload::LabeledQuery;

/// Which discrepancy the optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared difference of logs when the estimate is positive; squared
    /// relative error otherwise (logs are undefined there, and the
    /// fallback keeps pushing a negative estimate toward the label).
    Sle,
    /// Squared relative error everywhere.
    Se,
    /// Mean of the two.
    Mixed,
}

impl Default for LossKind {
    fn default() -> LossKind {
        LossKind::Sle
    }
}

fn default_batch_size() -> usize {
    128
}

fn default_max_epochs() -> usize {
    50
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Stop after validation loss has failed to improve this many epochs
    /// past its best; 0 stops one epoch after the best.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            learning_rate: default_learning_rate(),
            loss: LossKind::default(),
            seed: 0,
            patience: default_patience(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::Training(format!("training config parse failure: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Training("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Training("epoch budget must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Training("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Loss between a raw estimate and a label, by value. Labels below one
/// are clamped up to one so the logarithmic branch is always defined.
pub fn loss_value(kind: LossKind, estimate: f64, label: f64) -> Result<f64> {
    if !estimate.is_finite() || !label.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss inputs (estimate {estimate}, label {label})"
        )));
    }
    let c = label.max(1.0);
    let rel = (estimate - c) / c;
    let se = rel * rel;
    let sle = if estimate > 0.0 {
        let d = estimate.ln() - c.ln();
        d * d
    } else {
        se
    };
    Ok(match kind {
        LossKind::Sle => sle,
        LossKind::Se => se,
        LossKind::Mixed => 0.5 * (sle + se),
    })
}

/// Builds the loss as a graph over the raw estimate node. The branch is
/// chosen by the estimate's current value; both branches are
/// differentiable where they apply. Returns the node and whether the
/// non-positive fallback engaged.
pub fn loss_node(
    tape: &Tape,
    estimate: NodeId,
    label: f64,
    kind: LossKind,
) -> Result<(NodeId, bool)> {
    let value = tape.scalar(estimate)?;
    if !value.is_finite() || !label.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss inputs (estimate {value}, label {label})"
        )));
    }
    let c = label.max(1.0);
    let se = || -> Result<NodeId> {
        let rel = tape.add_scalar(tape.mul_scalar(estimate, 1.0 / c), -1.0);
        tape.mul(rel, rel)
    };
    let fell_back = value <= 0.0;
    let sle = || -> Result<NodeId> {
        if fell_back {
            se()
        } else {
            let d = tape.add_scalar(tape.log(estimate)?, -c.ln());
            tape.mul(d, d)
        }
    };
    let node = match kind {
        LossKind::Sle => sle()?,
        LossKind::Se => se()?,
        LossKind::Mixed => tape.mul_scalar(tape.add(sle()?, se()?)?, 0.5),
    };
    Ok((node, fell_back))
}

/// Adaptive-moment gradient descent with per-tensor first/second moment
/// state, keyed by tensor identity.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &str, data: &mut [f64], grad: &[f64]) {
        assert_eq!(data.len(), grad.len(), "gradient size mismatch for {key}");
        let slot = self.slots.entry(key.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
        for i in 0..data.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of training estimates this epoch that came out at or
    /// below zero (the loss fallback engaged).
    pub negative_rate: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub total_wall_ms: u64,
}

struct EpochOutcome {
    mean_loss: f64,
    nonpositive: usize,
    queries: usize,
}

/// Indices of `workload`, grouped by canonical template key.
fn template_groups(
    bundle: &ModelBundle,
    workload: &[LabeledQuery],
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, lq) in workload.iter().enumerate() {
        let (template, _) = canonical_template(&lq.query, &bundle.schema)?;
        groups.entry(template.key()).or_default().push(i);
    }
    Ok(groups)
}

/// One optimization pass over the workload: template groups in shuffled
/// order, queries shuffled within each group, one update per mini-batch.
fn run_epoch(
    bundle: &mut ModelBundle,
    workload: &[LabeledQuery],
    groups: &BTreeMap<String, Vec<usize>>,
    config: &TrainConfig,
    adam: &mut Adam,
    epoch: usize,
) -> Result<EpochOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("epoch/{epoch}")));
    let mut keys: Vec<&String> = groups.keys().collect();
    keys.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut nonpositive = 0;
    let mut queries = 0;
    for key in keys {
        let mut indices = groups[key].clone();
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(config.batch_size) {
            let mut card_grads: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
            let mut sketch_grads: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
            {
                let tape = Tape::new();
                let mut provider = LearnedProvider::new(&*bundle, true);
                let mut total = tape.scalar_const(0.0);
                for &qi in chunk {
                    let lq = &workload[qi];
                    let composition =
                        compose(&tape, &bundle.schema, &lq.query, &mut provider)?;
                    let (node, fell_back) =
                        loss_node(&tape, composition.estimate, lq.cardinality as f64, config.loss)?;
                    nonpositive += fell_back as usize;
                    total = tape.add(total, node)?;
                }
                let mean = tape.mul_scalar(total, 1.0 / chunk.len() as f64);
                let mean_value = tape.scalar(mean)?;
                if !mean_value.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite batch loss (epoch {epoch}, template {key}, \
                         batch of {})",
                        chunk.len()
                    )));
                }
                loss_sum += mean_value * chunk.len() as f64;
                queries += chunk.len();
                tape.backward(mean)?;

                for table in provider.bound_card_tables() {
                    let model = bundle.card_model(&table)?;
                    let binding = provider.card_binding(&table).expect("bound");
                    card_grads.insert(table.clone(), binding.gradients(&tape, model.params())?);
                }
                for table in provider.bound_sketch_tables() {
                    let model = bundle.sketch_model(&table)?;
                    let binding = provider.sketch_binding(&table).expect("bound");
                    sketch_grads.insert(table.clone(), binding.gradients(&tape, model.params())?);
                }
            }
            for (table, grads) in card_grads {
                let model = bundle.card_models.get_mut(&table).expect("model exists");
                for (name, param) in model.params_mut().iter_mut() {
                    if let Some(g) = grads.get(name) {
                        adam.step(&format!("card/{table}/{name}"), &mut param.data, g);
                    }
                }
            }
            for (table, grads) in sketch_grads {
                let model = bundle.sketch_models.get_mut(&table).expect("model exists");
                for (name, param) in model.params_mut().iter_mut() {
                    if let Some(g) = grads.get(name) {
                        adam.step(&format!("sketch/{table}/{name}"), &mut param.data, g);
                    }
                }
            }
        }
    }
    Ok(EpochOutcome {
        mean_loss: loss_sum / queries.max(1) as f64,
        nonpositive,
        queries,
    })
}

/// Mean loss of the bundle over a workload, forward-only.
pub fn workload_loss(
    bundle: &ModelBundle,
    workload: &[LabeledQuery],
    kind: LossKind,
) -> Result<f64> {
    if workload.is_empty() {
        return Err(Error::Training("cannot score an empty workload".into()));
    }
    let tape = Tape::new();
    let mut provider = LearnedProvider::new(bundle, false);
    let mut sum = 0.0;
    for lq in workload {
        let composition = compose(&tape, &bundle.schema, &lq.query, &mut provider)?;
        let raw = tape.scalar(composition.estimate)?;
        sum += loss_value(kind, raw, lq.cardinality as f64)?;
    }
    Ok(sum / workload.len() as f64)
}

/// Splits a workload into (train, validation) with roughly `fraction` of
/// each template's queries held out, selected by seeded draw. Templates
/// too small to spare a query keep everything in train.
pub fn split_validation(
    workload: &[LabeledQuery],
    bundle: &ModelBundle,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledQuery>, Vec<LabeledQuery>)> {
    let groups = template_groups(bundle, workload)?;
    let mut val_indices = std::collections::BTreeSet::new();
    for (key, indices) in &groups {
        let n_val = (indices.len() as f64 * fraction).floor() as usize;
        if n_val == 0 {
            continue;
        }
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &format!("val/{key}"),
        )));
        val_indices.extend(shuffled.into_iter().take(n_val));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, lq) in workload.iter().enumerate() {
        if val_indices.contains(&i) {
            val.push(lq.clone());
        } else {
            train.push(lq.clone());
        }
    }
    Ok((train, val))
}

/// Trains the bundle on a labeled workload: epochs of template-batched
/// updates, validation on a held-out tenth, early stop on plateau.
pub fn fit(
    bundle: &mut ModelBundle,
    workload: &[LabeledQuery],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if workload.is_empty() {
        return Err(Error::Training("cannot train on an empty workload".into()));
    }
    let started = Instant::now();
    let (train, val) = split_validation(workload, bundle, 0.1, config.seed)?;
    let groups = template_groups(bundle, &train)?;
    let mut adam = Adam::new(config.learning_rate);

    let mut epochs = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let epoch_started = Instant::now();
        let outcome = run_epoch(bundle, &train, &groups, config, &mut adam, epoch)?;
        // validation falls back to the training loss when every template
        // was too small to hold queries out
        let val_loss = if val.is_empty() {
            outcome.mean_loss
        } else {
            workload_loss(bundle, &val, config.loss)?
        };
        epochs.push(EpochMetrics {
            epoch,
            train_loss: outcome.mean_loss,
            val_loss,
            negative_rate: outcome.nonpositive as f64 / outcome.queries.max(1) as f64,
            wall_ms: epoch_started.elapsed().as_millis() as u64,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
        } else if epoch - best_epoch > config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        total_wall_ms: started.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CardModelRegistry;
    use crate::encoding::Normalizer;
    use crate::oracle::{generate_dataset, GenConfig};
    use crate::schema::Schema;
    use crate::workload::{generate_workload, TemplateSpec, WorkloadSpec};

    fn tiny_setup() -> (Schema, ModelBundle, Vec<LabeledQuery>) {
        let schema = Schema::from_toml_str(
            r#"
            [[table]]
            name = "S"
            cardinality = 80
            [[table.column]]
            name = "k"
            kind = "int"
            min = 1
            max = 4
            [[table.column]]
            name = "u"
            kind = "int"
            min = 0
            max = 9

            [[table]]
            name = "T"
            cardinality = 60
            [[table.column]]
            name = "k"
            kind = "int"
            min = 1
            max = 4
            [[table.column]]
            name = "w"
            kind = "int"
            min = 0
            max = 9

            [[table]]
            name = "U"
            cardinality = 30
            [[table.column]]
            name = "k"
            kind = "int"
            min = 1
            max = 4
            [[table.column]]
            name = "z"
            kind = "int"
            min = 0
            max = 9

            [[group]]
            id = "g"
            members = ["S.k", "T.k", "U.k"]
            "#,
        )
        .unwrap();
        let dataset = generate_dataset(&schema, &GenConfig::default(), 77).unwrap();
        let spec = WorkloadSpec {
            queries_per_template: 24,
            templates: vec![TemplateSpec {
                aliases: [("S".into(), "S".into()), ("T".into(), "T".into())].into(),
                joins: vec![("S.k".into(), "T.k".into())],
            }],
            ..WorkloadSpec::default()
        };
        let workload = generate_workload(&schema, &dataset, &spec, 5).unwrap();
        let registry = CardModelRegistry::with_builtins();
        let norm = Normalizer::fit(
            &schema,
            &workload.iter().map(|lq| lq.query.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let bundle = ModelBundle::build(&schema, &registry, "auto", 4, norm, 42).unwrap();
        (schema, bundle, workload)
    }

    #[test]
    fn loss_values_match_the_contract() {
        for kind in [LossKind::Sle, LossKind::Se, LossKind::Mixed] {
            assert_eq!(loss_value(kind, 10.0, 10.0).unwrap(), 0.0);
        }
        let e = std::f64::consts::E;
        assert!((loss_value(LossKind::Sle, e * 7.0, 7.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loss_value(LossKind::Sle, -2.0, 1.0).unwrap(), 9.0);
        assert_eq!(loss_value(LossKind::Se, 3.0, 1.0).unwrap(), 4.0);
        let mixed = loss_value(LossKind::Mixed, e * 7.0, 7.0).unwrap();
        let se = loss_value(LossKind::Se, e * 7.0, 7.0).unwrap();
        assert!((mixed - 0.5 * (1.0 + se)).abs() < 1e-12);
        // labels clamp up to one
        assert_eq!(loss_value(LossKind::Sle, 1.0, 0.0).unwrap(), 0.0);
        assert!(loss_value(LossKind::Sle, f64::NAN, 1.0).is_err());
        assert!(loss_value(LossKind::Sle, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn loss_graph_agrees_with_loss_values() {
        for kind in [LossKind::Sle, LossKind::Se, LossKind::Mixed] {
            for (est, label) in [(25.0, 10.0), (1.0, 400.0), (-3.0, 10.0), (0.0, 2.0)] {
                let tape = Tape::new();
                let e = tape.param(vec![], vec![est]);
                let (node, fell_back) = loss_node(&tape, e, label, kind).unwrap();
                assert_eq!(fell_back, est <= 0.0);
                let want = loss_value(kind, est, label).unwrap();
                let got = tape.scalar(node).unwrap();
                assert!(
                    (got - want).abs() <= 1e-12 * want.max(1.0),
                    "{kind:?} ({est}, {label}): graph {got} vs value {want}"
                );
                // the chosen branch must carry gradient
                tape.backward(node).unwrap();
                let g = tape.grad(e).unwrap()[0];
                if want > 0.0 {
                    assert!(g != 0.0, "{kind:?} ({est}, {label}): zero gradient");
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let (_, bundle_a, workload) = tiny_setup();
        let config = TrainConfig {
            max_epochs: 6,
            batch_size: 8,
            patience: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut a = bundle_a;
        let report_a = fit(&mut a, &workload, &config).unwrap();

        let (_, mut b, _) = tiny_setup();
        let report_b = fit(&mut b, &workload, &config).unwrap();
        assert_eq!(report_a.epochs.len(), report_b.epochs.len());
        for (x, y) in report_a.epochs.iter().zip(&report_b.epochs) {
            assert_eq!(x.train_loss, y.train_loss, "epoch {} diverged", x.epoch);
            assert_eq!(x.val_loss, y.val_loss);
        }

        assert!(
            report_a.epochs.last().unwrap().train_loss < report_a.epochs[0].train_loss,
            "loss failed to fall: {:?}",
            report_a.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn patience_zero_stops_one_epoch_after_best() {
        let (_, mut bundle, workload) = tiny_setup();
        let config = TrainConfig {
            max_epochs: 40,
            batch_size: 8,
            learning_rate: 0.5, // oversized on purpose: guarantees bouncing
            patience: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = fit(&mut bundle, &workload, &config).unwrap();
        assert!(report.stopped_early, "expected an early stop");
        assert_eq!(report.epochs.len(), report.best_epoch + 2);
    }

    #[test]
    fn uninvolved_tables_receive_no_updates() {
        let (_, mut bundle, workload) = tiny_setup();
        // the workload joins S and T only; U must stay untouched
        let u_card_before = bundle.card_model("U").unwrap().params().clone();
        let u_sketch_before = bundle.sketch_model("U").unwrap().params().clone();
        let s_card_before = bundle.card_model("S").unwrap().params().clone();
        let config = TrainConfig {
            max_epochs: 2,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        fit(&mut bundle, &workload, &config).unwrap();
        assert_eq!(*bundle.card_model("U").unwrap().params(), u_card_before);
        assert_eq!(*bundle.sketch_model("U").unwrap().params(), u_sketch_before);
        assert_ne!(*bundle.card_model("S").unwrap().params(), s_card_before);
    }

    #[test]
    fn non_finite_losses_abort_with_diagnostics() {
        let (_, mut bundle, workload) = tiny_setup();
        let count = bundle
            .card_model("S")
            .unwrap()
            .params()
            .get("net.w1")
            .unwrap()
            .data
            .len();
        bundle
            .card_models
            .get_mut("S")
            .unwrap()
            .params_mut()
            .assign("net.w1", vec![f64::NAN; count])
            .unwrap();
        let config = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let err = fit(&mut bundle, &workload, &config).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn config_and_empty_workload_are_rejected() {
        let (_, mut bundle, workload) = tiny_setup();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(fit(&mut bundle, &workload, &bad).is_err());
        let bad = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(fit(&mut bundle, &workload, &bad).is_err());
        assert!(fit(&mut bundle, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn validation_split_is_stratified_and_disjoint() {
        let (_, bundle, workload) = tiny_setup();
        let (train, val) = split_validation(&workload, &bundle, 0.25, 4).unwrap();
        assert_eq!(train.len() + val.len(), workload.len());
        assert_eq!(val.len(), 6, "a quarter of 24 per template");
        // same fraction from the only template; different seeds move it
        let (_, val_b) = split_validation(&workload, &bundle, 0.25, 5).unwrap();
        assert_eq!(val_b.len(), 6);
        assert_ne!(
            val.iter().map(|l| l.cardinality).collect::<Vec<_>>(),
            val_b.iter().map(|l| l.cardinality).collect::<Vec<_>>()
        );
    }
}
