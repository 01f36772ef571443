//! Versioned persistence for trained model bundles.
//!
//! A checkpoint is structured text: format version, a fingerprint of the
//! schema file it was trained against, the fitted normalizer, and one
//! section per model with flat parameter arrays. Loading verifies the
//! version and the fingerprint, then rebuilds each model through the
//! registry and overwrites its freshly initialized parameters — so a
//! round trip reproduces estimates bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{CardModelRegistry, ModelBundle};
use crate::schema::Schema;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex digest identifying the exact schema file a checkpoint belongs to.
pub fn schema_fingerprint(schema_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(schema_text.as_bytes());
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CardSection {
    kind: String,
    params: BTreeMap<String, ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SketchSection {
    params: BTreeMap<String, ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    schema_fingerprint: String,
    normalizer: crate::encoding::Normalizer,
    sketch_dim: usize,
    card_models: BTreeMap<String, CardSection>,
    sketch_models: BTreeMap<String, SketchSection>,
    train_config: Option<TrainConfig>,
}

fn collect_params(
    params: &crate::models::ParamSet,
    owner: &str,
) -> Result<BTreeMap<String, ParamRecord>> {
    let mut out = BTreeMap::new();
    for (name, p) in params.iter() {
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "{owner} parameter {name} contains non-finite values"
            )));
        }
        out.insert(
            name.clone(),
            ParamRecord {
                shape: p.shape.clone(),
                data: p.data.clone(),
            },
        );
    }
    Ok(out)
}

fn restore_params(
    params: &mut crate::models::ParamSet,
    records: &BTreeMap<String, ParamRecord>,
    owner: &str,
) -> Result<()> {
    let expected = params.names();
    let got: Vec<String> = records.keys().cloned().collect();
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "{owner} parameter names mismatch: model has [{}], file has [{}]",
            expected.join(", "),
            got.join(", ")
        )));
    }
    for (name, record) in records {
        if record.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "{owner} parameter {name} contains non-finite values"
            )));
        }
        if record.shape != params.get(name)?.shape {
            return Err(Error::Checkpoint(format!(
                "{owner} parameter {name} shape mismatch"
            )));
        }
        params.assign(name, record.data.clone())?;
    }
    Ok(())
}

/// Serializes a bundle against the schema file text it was built from.
pub fn checkpoint_to_string(
    bundle: &ModelBundle,
    schema_text: &str,
    train_config: Option<&TrainConfig>,
) -> Result<String> {
    let mut card_models = BTreeMap::new();
    for (table, model) in &bundle.card_models {
        card_models.insert(
            table.clone(),
            CardSection {
                kind: model.kind().to_string(),
                params: collect_params(model.params(), &format!("table {table}"))?,
            },
        );
    }
    let mut sketch_models = BTreeMap::new();
    for (table, model) in &bundle.sketch_models {
        sketch_models.insert(
            table.clone(),
            SketchSection {
                params: collect_params(model.params(), &format!("table {table} join-key"))?,
            },
        );
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        schema_fingerprint: schema_fingerprint(schema_text),
        normalizer: bundle.normalizer.clone(),
        sketch_dim: bundle.sketch_dim,
        card_models,
        sketch_models,
        train_config: train_config.cloned(),
    };
    serde_json::to_string_pretty(&checkpoint)
        .map_err(|e| Error::Checkpoint(format!("serialization failure: {e}")))
}

/// Rebuilds a bundle from checkpoint text plus the schema file text it
/// was saved against. Version and fingerprint must match.
pub fn checkpoint_from_str(
    text: &str,
    schema_text: &str,
) -> Result<(ModelBundle, Option<TrainConfig>)> {
    let checkpoint: Checkpoint = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("parse failure: {e}")))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (this build reads {})",
            checkpoint.version, CHECKPOINT_VERSION
        )));
    }
    let fingerprint = schema_fingerprint(schema_text);
    if checkpoint.schema_fingerprint != fingerprint {
        return Err(Error::Checkpoint(format!(
            "schema fingerprint mismatch: checkpoint was saved against {}, \
             the provided schema file hashes to {fingerprint}",
            checkpoint.schema_fingerprint
        )));
    }
    let schema = Schema::from_toml_str(schema_text)?;
    let registry = CardModelRegistry::with_builtins();

    let mut card_models = BTreeMap::new();
    for table in &schema.tables {
        let section = checkpoint.card_models.get(&table.name).ok_or_else(|| {
            Error::Checkpoint(format!("no model section for table {}", table.name))
        })?;
        let mut model = registry.build(&section.kind, &schema, table, 0)?;
        restore_params(
            model.params_mut(),
            &section.params,
            &format!("table {}", table.name),
        )?;
        card_models.insert(table.name.clone(), model);
    }
    let mut sketch_models = BTreeMap::new();
    for table in &schema.tables {
        if schema.groups_of_table(&table.name).is_empty() {
            continue;
        }
        let section = checkpoint.sketch_models.get(&table.name).ok_or_else(|| {
            Error::Checkpoint(format!("no join-key section for table {}", table.name))
        })?;
        let mut model =
            crate::models::sketch::SketchModel::build(&schema, table, checkpoint.sketch_dim, 0)?;
        restore_params(
            model.params_mut(),
            &section.params,
            &format!("table {} join-key", table.name),
        )?;
        sketch_models.insert(table.name.clone(), model);
    }
    Ok((
        ModelBundle {
            schema,
            normalizer: checkpoint.normalizer,
            card_models,
            sketch_models,
            sketch_dim: checkpoint.sketch_dim,
        },
        checkpoint.train_config,
    ))
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    schema_text: &str,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(bundle, schema_text, train_config)?)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, schema_text: &str) -> Result<(ModelBundle, Option<TrainConfig>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_str(&text, schema_text)
}
