//! Command-line front end for the estimation engine.
//!
//! Subcommands cover the whole workflow: `gen-data` and `gen-workload`
//! materialize synthetic instances and labeled query sets, `train` fits
//! the per-table models and writes a checkpoint, `estimate`, `evaluate`,
//! and `inspect` consume checkpoints. Only the two generation commands
//! ever open a dataset file — everything downstream of training sees
//! queries and labels alone.
//!
//! One global `--seed` per subcommand threads all randomness; internal
//! streams are derived from it by keyed hashing, so equal invocations
//! give byte-equal outputs. Progress and timing go to standard error,
//! results to standard output or the requested files. Exit codes: 0 on
//! success, 2 for bad input (flags or file contents), 1 for runtime
//! failures.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cardcomp::checkpoint::{checkpoint_from_str, checkpoint_to_string, CHECKPOINT_VERSION};
use cardcomp::composer::EstimateSession;
use cardcomp::encoding::Normalizer;
use cardcomp::evaluator::{evaluate_split, SplitStats};
use cardcomp::models::{sketch::DEFAULT_DIM, CardModelRegistry, ModelBundle};
use cardcomp::oracle::{
    dataset_from_str, dataset_to_string, demo_fixture, generate_dataset, Dataset, GenConfig,
    DEMO_SCHEMA_TOML,
};
use cardcomp::query::Query;
use cardcomp::schema::Schema;
use cardcomp::template::canonical_template;
use cardcomp::trainer::{fit, LossKind, TrainConfig};
use cardcomp::util::derive_seed;
use cardcomp::workload::{
    apply_cardinality_shift, apply_cir_imbalance, apply_granularity_shift, apply_tcr_split,
    generate_with_counts, generate_workload, measure_tcr_cir, workload_from_str,
    workload_to_string, LabeledQuery, WorkloadSpec,
};

#[derive(Parser)]
#[command(
    name = "cardcomp",
    version,
    about = "Compositional cardinality estimation for join queries",
    long_about = "Generates synthetic datasets and labeled workloads, trains per-table \
                  cardinality and join-key models, and composes them into estimates for \
                  arbitrary acyclic join queries — including join shapes never trained on."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or materialize the built-in demo instance
    GenData(GenDataArgs),
    /// Generate a labeled query workload against a dataset
    GenWorkload(GenWorkloadArgs),
    /// Train models on a labeled workload and write a checkpoint
    Train(TrainArgs),
    /// Estimate cardinalities from a checkpoint
    Estimate(EstimateArgs),
    /// Score a checkpoint's estimates against a labeled workload
    Evaluate(EvaluateArgs),
    /// Summarize a checkpoint without touching any data
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Schema file (TOML) to generate rows for
    #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
    schema: Option<PathBuf>,
    /// Built-in instance to materialize instead of generating (available: demo)
    #[arg(long, requires = "schema_out")]
    fixture: Option<String>,
    /// Where to write the fixture's schema file
    #[arg(long, requires = "fixture")]
    schema_out: Option<PathBuf>,
    /// Generation knobs (TOML): key skew, key-attribute correlation, null probability
    #[arg(long, conflicts_with = "fixture")]
    gen_config: Option<PathBuf>,
    /// Root of all generation randomness
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenWorkloadArgs {
    /// Schema file (TOML)
    #[arg(long)]
    schema: PathBuf,
    /// Dataset file to label queries against
    #[arg(long)]
    data: PathBuf,
    /// Workload spec (TOML); without it, every join template the schema admits
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Root of all sampling randomness
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output workload file
    #[arg(long)]
    out: PathBuf,
    /// Keep this fraction of templates in the main output; the rest go to --held-out
    #[arg(
        long,
        requires = "held_out",
        conflicts_with_all = ["cir", "granularity_shift", "cardinality_shift"]
    )]
    tcr: Option<f64>,
    /// Skew per-template query counts toward this imbalance ratio
    #[arg(long, conflicts_with_all = ["granularity_shift", "cardinality_shift", "held_out"])]
    cir: Option<f64>,
    /// Per-template decay applied while walking toward --cir
    #[arg(long, default_value_t = 1.5)]
    cir_decay: f64,
    /// Range-width shift: main output avoids half-domain ranges, --held-out pins them
    #[arg(long, requires = "held_out", conflicts_with = "cardinality_shift")]
    granularity_shift: bool,
    /// Result-size shift: main output keeps small-result queries, --held-out large ones
    #[arg(long, requires = "held_out")]
    cardinality_shift: bool,
    /// Second output file for the held-out side of a split or shift
    #[arg(long)]
    held_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Schema file (TOML); its hash is stamped into the checkpoint
    #[arg(long)]
    schema: PathBuf,
    /// Labeled workload to fit on
    #[arg(long)]
    workload: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Cardinality model family: auto, spline-cdf, or set-regressor
    #[arg(long, default_value = "auto")]
    card_model: String,
    /// Width of the learned join-key sketches
    #[arg(long, default_value_t = DEFAULT_DIM)]
    sketch_dim: usize,
    /// Training config file (TOML); the flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Epochs past the best validation loss before stopping
    #[arg(long)]
    patience: Option<usize>,
    /// Loss to minimize: sle, se, or mixed
    #[arg(long)]
    loss: Option<String>,
    /// Root of initialization and shuffling randomness
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Schema file (TOML) the checkpoint was trained against
    #[arg(long)]
    schema: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single query (JSON) to estimate
    #[arg(long, conflicts_with = "workload", required_unless_present = "workload")]
    query: Option<PathBuf>,
    /// Workload file; every query in it is estimated (labels ignored)
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Also estimate every connected subquery of --query
    #[arg(long, requires = "query")]
    subqueries: bool,
    /// Write records here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Schema file (TOML) the checkpoint was trained against
    #[arg(long)]
    schema: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled workload to score
    #[arg(long)]
    workload: PathBuf,
    /// Workload whose templates count as seen, enabling the seen/unseen split
    #[arg(long)]
    train_workload: Option<PathBuf>,
    /// Write the report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Schema file (TOML) the checkpoint was trained against
    #[arg(long)]
    schema: PathBuf,
    /// Checkpoint to summarize
    #[arg(long)]
    checkpoint: PathBuf,
}

/// A problem with flags or input files, as opposed to a failure while
/// doing the work; decides the exit code.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<cardcomp::Error>() {
            return if c.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
    }
    1
}

fn read_input(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {what} file {}: {e}", path.display())))
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Prints to the given file, or standard output when none was asked for.
fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_output(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_schema(path: &Path) -> Result<(Schema, String)> {
    let text = read_input(path, "schema")?;
    let schema = Schema::from_toml_str(&text)
        .with_context(|| format!("schema file {}", path.display()))?;
    Ok((schema, text))
}

fn load_dataset_file(path: &Path) -> Result<Dataset> {
    let text = read_input(path, "dataset")?;
    dataset_from_str(&text).with_context(|| format!("dataset file {}", path.display()))
}

fn load_workload_file(path: &Path) -> Result<Vec<LabeledQuery>> {
    let text = read_input(path, "workload")?;
    workload_from_str(&text).with_context(|| format!("workload file {}", path.display()))
}

fn load_checkpoint_file(
    path: &Path,
    schema_text: &str,
) -> Result<(ModelBundle, Option<TrainConfig>)> {
    let text = read_input(path, "checkpoint")?;
    checkpoint_from_str(&text, schema_text)
        .with_context(|| format!("checkpoint file {}", path.display()))
}

fn save_workload_file(path: &Path, workload: &[LabeledQuery]) -> Result<()> {
    write_output(path, &workload_to_string(workload)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::GenWorkload(args) => gen_workload(args),
        Command::Train(args) => train(args),
        Command::Estimate(args) => estimate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Inspect(args) => inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let start = Instant::now();
    let dataset = match (&args.fixture, &args.schema) {
        (Some(name), None) => {
            if name != "demo" {
                return Err(usage(format!("unknown fixture {name:?}; available: demo")));
            }
            let (_, dataset) = demo_fixture();
            let schema_out = args.schema_out.as_ref().expect("clap pairs it with --fixture");
            write_output(schema_out, DEMO_SCHEMA_TOML.trim_start())?;
            eprintln!("wrote demo schema to {}", schema_out.display());
            dataset
        }
        (None, Some(path)) => {
            let (schema, _) = load_schema(path)?;
            let config = match &args.gen_config {
                Some(p) => {
                    let text = read_input(p, "generation config")?;
                    GenConfig::from_toml_str(&text)
                        .with_context(|| format!("generation config file {}", p.display()))?
                }
                None => GenConfig::default(),
            };
            generate_dataset(&schema, &config, args.seed)?
        }
        _ => unreachable!("clap admits exactly one of --schema / --fixture"),
    };
    let rows: usize = dataset.tables.values().map(|t| t.rows.len()).sum();
    write_output(&args.out, &dataset_to_string(&dataset)?)?;
    eprintln!(
        "wrote {} tables, {rows} rows to {} in {} ms",
        dataset.tables.len(),
        args.out.display(),
        start.elapsed().as_millis()
    );
    Ok(())
}

fn describe_workload(label: &str, path: &Path, wl: &[LabeledQuery], schema: &Schema) -> Result<()> {
    if wl.is_empty() {
        eprintln!("{label}: 0 queries -> {}", path.display());
        return Ok(());
    }
    let (tcr, cir) = measure_tcr_cir(wl, schema)?;
    eprintln!(
        "{label}: {} queries -> {} (template coverage {tcr:.3}, count imbalance {cir:.3})",
        wl.len(),
        path.display()
    );
    Ok(())
}

fn gen_workload(args: GenWorkloadArgs) -> Result<()> {
    let start = Instant::now();
    let (schema, _) = load_schema(&args.schema)?;
    let dataset = load_dataset_file(&args.data)?;
    let spec = match &args.spec {
        Some(p) => {
            let text = read_input(p, "workload spec")?;
            WorkloadSpec::from_toml_str(&text)
                .with_context(|| format!("workload spec file {}", p.display()))?
        }
        None => WorkloadSpec::default(),
    };
    if args.held_out.is_some()
        && args.tcr.is_none()
        && !args.granularity_shift
        && !args.cardinality_shift
    {
        return Err(usage(
            "--held-out needs one of --tcr, --granularity-shift, --cardinality-shift",
        ));
    }

    if let Some(ratio) = args.tcr {
        let held_out = args.held_out.as_ref().expect("clap pairs it with --tcr");
        let templates = spec.resolve_templates(&schema)?;
        let (kept, held) = apply_tcr_split(&templates, ratio, args.seed)?;
        let main = generate_with_counts(
            &schema,
            &dataset,
            &spec,
            &kept,
            &vec![spec.queries_per_template; kept.len()],
            args.seed,
        )?;
        let unseen = generate_with_counts(
            &schema,
            &dataset,
            &spec,
            &held,
            &vec![spec.queries_per_template; held.len()],
            args.seed,
        )?;
        save_workload_file(&args.out, &main)?;
        save_workload_file(held_out, &unseen)?;
        eprintln!(
            "split {} templates: {} kept, {} held out",
            templates.len(),
            kept.len(),
            held.len()
        );
        describe_workload("kept", &args.out, &main, &schema)?;
        describe_workload("held out", held_out, &unseen, &schema)?;
    } else if let Some(target) = args.cir {
        let templates = spec.resolve_templates(&schema)?;
        let base = vec![spec.queries_per_template as u64; templates.len()];
        let skewed = apply_cir_imbalance(&base, target, args.cir_decay)?;
        let counts: Vec<usize> = skewed.iter().map(|&c| c as usize).collect();
        let wl = generate_with_counts(&schema, &dataset, &spec, &templates, &counts, args.seed)?;
        save_workload_file(&args.out, &wl)?;
        describe_workload("workload", &args.out, &wl, &schema)?;
    } else if args.granularity_shift {
        let held_out = args.held_out.as_ref().expect("clap pairs it with the shift");
        let (train_spec, test_spec) = apply_granularity_shift(&spec);
        let main = generate_workload(&schema, &dataset, &train_spec, args.seed)?;
        let shifted = generate_workload(
            &schema,
            &dataset,
            &test_spec,
            derive_seed(args.seed, "held-out"),
        )?;
        save_workload_file(&args.out, &main)?;
        save_workload_file(held_out, &shifted)?;
        describe_workload("off-band widths", &args.out, &main, &schema)?;
        describe_workload("half-domain widths", held_out, &shifted, &schema)?;
    } else if args.cardinality_shift {
        let held_out = args.held_out.as_ref().expect("clap pairs it with the shift");
        let full = generate_workload(&schema, &dataset, &spec, args.seed)?;
        let (small, large) = apply_cardinality_shift(&full)?;
        save_workload_file(&args.out, &small)?;
        save_workload_file(held_out, &large)?;
        describe_workload("small results", &args.out, &small, &schema)?;
        describe_workload("large results", held_out, &large, &schema)?;
    } else {
        let wl = generate_workload(&schema, &dataset, &spec, args.seed)?;
        save_workload_file(&args.out, &wl)?;
        describe_workload("workload", &args.out, &wl, &schema)?;
    }
    eprintln!("done in {} ms", start.elapsed().as_millis());
    Ok(())
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "sle" => Ok(LossKind::Sle),
        "se" => Ok(LossKind::Se),
        "mixed" => Ok(LossKind::Mixed),
        other => Err(usage(format!(
            "unknown loss {other:?}; expected sle, se, or mixed"
        ))),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let (schema, schema_text) = load_schema(&args.schema)?;
    let workload = load_workload_file(&args.workload)?;

    let mut config = match &args.config {
        Some(p) => {
            let text = read_input(p, "training config")?;
            TrainConfig::from_toml_str(&text)
                .map_err(|e| usage(format!("training config file {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.epochs {
        config.max_epochs = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.patience {
        config.patience = v;
    }
    if let Some(s) = &args.loss {
        config.loss = parse_loss(s)?;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let registry = CardModelRegistry::with_builtins();
    if args.card_model != "auto" && !registry.names().contains(&args.card_model) {
        return Err(usage(format!(
            "unknown cardinality model {:?}; available: auto, {}",
            args.card_model,
            registry.names().join(", ")
        )));
    }
    if args.sketch_dim == 0 {
        return Err(usage("--sketch-dim must be at least 1"));
    }

    let queries: Vec<Query> = workload.iter().map(|lq| lq.query.clone()).collect();
    let normalizer = Normalizer::fit(&schema, &queries)?;
    let mut bundle = ModelBundle::build(
        &schema,
        &registry,
        &args.card_model,
        args.sketch_dim,
        normalizer,
        derive_seed(config.seed, "model-init"),
    )?;

    let templates: BTreeSet<String> = workload
        .iter()
        .map(|lq| Ok(canonical_template(&lq.query, &schema)?.0.key()))
        .collect::<cardcomp::Result<_>>()?;
    eprintln!(
        "training on {} queries across {} templates (batch {}, lr {}, up to {} epochs)",
        workload.len(),
        templates.len(),
        config.batch_size,
        config.learning_rate,
        config.max_epochs
    );

    let report = fit(&mut bundle, &workload, &config)?;
    for m in &report.epochs {
        eprintln!(
            "epoch {:>3}: train loss {:.6}, val loss {:.6}, negatives {:.1}% ({} ms)",
            m.epoch,
            m.train_loss,
            m.val_loss,
            100.0 * m.negative_rate,
            m.wall_ms
        );
    }
    eprintln!(
        "best epoch {} (val loss {:.6}); {} ms total{}",
        report.best_epoch,
        report.best_val_loss,
        report.total_wall_ms,
        if report.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );

    write_output(&args.out, &checkpoint_to_string(&bundle, &schema_text, Some(&config))?)?;
    eprintln!("wrote checkpoint to {}", args.out.display());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let (_, schema_text) = load_schema(&args.schema)?;
    let (bundle, _) = load_checkpoint_file(&args.checkpoint, &schema_text)?;
    let mut session = EstimateSession::new(&bundle);
    let start = Instant::now();

    let mut lines = Vec::new();
    if let Some(query_path) = &args.query {
        let text = read_input(query_path, "query")?;
        let query: Query = serde_json::from_str(&text)
            .map_err(|e| usage(format!("query file {}: {e}", query_path.display())))?;
        if args.subqueries {
            for sub in session.estimate_all_subqueries(&query)? {
                lines.push(
                    serde_json::json!({
                        "aliases": sub.aliases.iter().collect::<Vec<_>>(),
                        "raw": sub.estimate.raw,
                        "served": sub.estimate.served,
                        "negative": sub.estimate.negative,
                    })
                    .to_string(),
                );
            }
        } else {
            let e = session.estimate(&query)?;
            lines.push(
                serde_json::json!({
                    "raw": e.raw,
                    "served": e.served,
                    "negative": e.negative,
                })
                .to_string(),
            );
        }
    } else {
        let path = args.workload.as_ref().expect("clap requires one input");
        let workload = load_workload_file(path)?;
        for (index, lq) in workload.iter().enumerate() {
            let e = session.estimate(&lq.query)?;
            lines.push(
                serde_json::json!({
                    "index": index,
                    "raw": e.raw,
                    "served": e.served,
                    "negative": e.negative,
                })
                .to_string(),
            );
        }
    }
    eprintln!(
        "estimated {} records with {} model calls in {} ms",
        lines.len(),
        session.model_calls,
        start.elapsed().as_millis()
    );
    emit(args.out.as_ref(), &(lines.join("\n") + "\n"))
}

fn describe_split(label: &str, stats: &SplitStats) {
    eprintln!(
        "{label}: {} queries, q-error median {:.3}, p95 {:.3}, mean {:.3}, {} nonpositive",
        stats.count, stats.median, stats.p95, stats.mean, stats.negative_count
    );
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (schema, schema_text) = load_schema(&args.schema)?;
    let (bundle, _) = load_checkpoint_file(&args.checkpoint, &schema_text)?;
    let workload = load_workload_file(&args.workload)?;
    let seen: BTreeSet<String> = match &args.train_workload {
        Some(p) => load_workload_file(p)?
            .iter()
            .map(|lq| Ok(canonical_template(&lq.query, &schema)?.0.key()))
            .collect::<cardcomp::Result<_>>()?,
        None => BTreeSet::new(),
    };

    let start = Instant::now();
    let report = evaluate_split(&bundle, &workload, &seen)?;
    describe_split("overall", &report.overall);
    if let Some(s) = &report.seen {
        describe_split("seen templates", s);
    }
    if let Some(u) = &report.unseen {
        describe_split("unseen templates", u);
    }
    eprintln!("evaluated in {} ms", start.elapsed().as_millis());
    emit(
        args.out.as_ref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (_, schema_text) = load_schema(&args.schema)?;
    let (bundle, config) = load_checkpoint_file(&args.checkpoint, &schema_text)?;

    println!("checkpoint {}", args.checkpoint.display());
    println!(
        "  format version {CHECKPOINT_VERSION}, schema fingerprint {}",
        &cardcomp::checkpoint::schema_fingerprint(&schema_text)[..12]
    );
    println!("  join-key sketch width {}", bundle.sketch_dim);
    for table in &bundle.schema.tables {
        let card = bundle.card_model(&table.name)?;
        let mut line = format!(
            "  {}: {} ({} parameters)",
            table.name,
            card.kind(),
            card.params().value_count()
        );
        if let Ok(sketch) = bundle.sketch_model(&table.name) {
            line.push_str(&format!(
                ", sketch ({} parameters)",
                sketch.params().value_count()
            ));
        }
        println!("{line}");
    }
    if let Some(config) = config {
        println!("  trained with {}", serde_json::to_string(&config)?);
    }
    Ok(())
}
