//! Operator surface: the `protoclip` binary's argument grammar, the JSON
//! run-config schema, and the five subcommands (`synth`, `train`, `eval`,
//! `infer`, `attention`).
//!
//! Conventions:
//!
//! * one JSON config file drives a run; unknown keys are rejected so typos
//!   in hyperparameters fail loudly instead of silently using a default;
//! * every seed derives from the single explicit `seed` field (no
//!   wall-clock defaults anywhere), so a config reproduces byte-identical
//!   outputs;
//! * all diagnostics go to stderr; data goes to files in the output
//!   directory;
//! * exit codes: 0 success, 2 config/schema/usage error, 3 numerical
//!   failure (divergence, non-finite values).
//!
//! The run-config schema (all blocks optional unless noted):
//!
//! ```json
//! {
//!   "seed": 7,                      // required; master seed for everything
//!   "out": "runs/demo",             // output directory (default "."),
//!                                   // overridden by --out
//!   "dataset": {                    // required: exactly one of the two
//!     "synthetic": { "n": 600, "d_image": 64, "sigma": 0.1,
//!                    "modalities": [ {"name": "biomarkers", "dim": 8,
//!                                     "k_signal": 3} ] },
//!     "csv": { "path": "data.csv",
//!              "modalities": [ {"name": "biomarkers", "prefix": "bio_"} ] }
//!   },
//!   "split": { "fractions": {"train": 0.7, "val": 0.15, "test": 0.15},
//!              "balanced": true },
//!   "encoders": {                   // each block optional; defaults below
//!     "image":   { "kind": "image_mlp", "hidden_dims": [64] },
//!     "label":   { "kind": "label_mlp", "hidden_dims": [64] },
//!     "tabular": { "biomarkers": { "kind": "tabular_mlp",
//!                                  "hidden_dims": [64] } }
//!   },
//!   "train": { "epochs": 64, "batch_size": 32, "lr": 1e-4 },
//!   "eval":  { "runs": 5, "grid_points": 101 }
//! }
//! ```
//!
//! Encoder blocks may omit `seed` (derived from the master seed and the
//! encoder's role name) and `input_dim` (filled from the dataset: the image
//! width for the image encoder, 1 for the label encoder, and the
//! preprocessed feature width for each tabular encoder). Omitted encoder
//! blocks get a single-hidden-layer MLP of width 64. The synthetic dataset
//! block may likewise omit `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::attention::rank_features;
use crate::checkpoint::Checkpoint;
use crate::data::{
    fit_preprocess, load_csv, make_splits, save_csv, synth_generate, DatasetTable, ModalitySpec,
    SplitFractions, SynthConfig,
};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::infer::{
    evaluate, evaluate_from_checkpoint, label_grid, predict, predictions_to_csv, EvalConfig,
    LabelTable, Prediction, SearchStrategy, IMAGE_MODALITY,
};
use crate::train::{history_to_csv, modality_seed, train_full, TrainConfig};

/// Environment variable capping the inference worker pool (default 1).
pub const THREADS_ENV: &str = "PROTOCLIP_THREADS";

/// Command-line grammar.
#[derive(Debug, Parser)]
#[command(
    name = "protoclip",
    version,
    about = "Multimodal contrastive alignment: synthesize, train, evaluate, infer, rank features",
    propagate_version = true
)]
pub struct Cli {
    /// Path to the JSON run config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Search strategy flag for `infer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchArg {
    Exhaustive,
    Ternary,
}

impl From<SearchArg> for SearchStrategy {
    fn from(s: SearchArg) -> SearchStrategy {
        match s {
            SearchArg::Exhaustive => SearchStrategy::Exhaustive,
            SearchArg::Ternary => SearchStrategy::Ternary,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained checkpoint to predict with.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Input CSV (same schema as the training dataset).
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Comma-separated part names (`image` and/or tabular modality names).
    /// Default: image plus every tabular modality in the checkpoint.
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub modalities: Vec<String>,
    /// Label search strategy.
    #[arg(long, value_enum, default_value_t = SearchArg::Exhaustive)]
    pub search: SearchArg,
    /// Label grid resolution.
    #[arg(long, default_value_t = 101, value_name = "N")]
    pub grid_points: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV plus its ground-truth signal mask.
    Synth,
    /// Run two-phase training and write the best checkpoint plus history.
    Train {
        /// Override the config's epoch cap (0 stores the initialization).
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Multi-run evaluation: per-modality and fused accuracy plus confusion.
    Eval {
        /// Take encoder/training configs from this checkpoint's metadata
        /// instead of the run config (each run still retrains on its own
        /// split; weights are not reused).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Predict labels for a CSV with a trained checkpoint.
    Infer(InferArgs),
    /// Write per-modality `column,score` feature rankings from the gates.
    Attention {
        /// Trained checkpoint holding the tabular gates.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Dataset block: exactly one of `synthetic` or `csv`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    /// Synthetic generator settings (`SynthConfig`; `seed` may be omitted).
    #[serde(default)]
    pub synthetic: Option<Value>,
    /// On-disk CSV dataset.
    #[serde(default)]
    pub csv: Option<CsvBlock>,
}

/// CSV dataset reference.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvBlock {
    /// Dataset path, resolved relative to the working directory.
    pub path: PathBuf,
    /// Modality schemas claiming the CSV's columns.
    #[serde(default)]
    pub modalities: Vec<ModalitySpec>,
}

/// Train/val/test split settings.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBlock {
    #[serde(default)]
    pub fractions: SplitFractions,
    /// Stratify by snapped class (default true).
    #[serde(default = "default_true")]
    pub balanced: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock { fractions: SplitFractions::default(), balanced: true }
    }
}

/// Encoder blocks; every field optional (see module docs for defaults).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodersBlock {
    #[serde(default)]
    pub image: Option<Value>,
    #[serde(default)]
    pub label: Option<Value>,
    /// Keyed by tabular modality name.
    #[serde(default)]
    pub tabular: BTreeMap<String, Value>,
}

/// The parsed run config.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed derives from it deterministically.
    pub seed: u64,
    /// Output directory (default `.`).
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub split: SplitBlock,
    #[serde(default)]
    pub encoders: EncodersBlock,
    /// `TrainConfig`; `seed` may be omitted (master seed is used).
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

/// Deserialize `value` into `T`, reporting the JSON field path on failure.
fn parse_block<T: DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    let mut track = serde_path_to_error::Track::new();
    let de = serde_path_to_error::Deserializer::new(value, &mut track);
    T::deserialize(de).map_err(|e| {
        let path = track.path().to_string();
        if path == "." {
            Error::Config(format!("{what}: {e}"))
        } else {
            Error::Config(format!("{what}.{path}: {e}"))
        }
    })
}

/// Insert `key: make()` into a JSON object when the key is absent (or when
/// it is explicitly `null`).
fn fill_default(value: &mut Value, key: &str, make: impl FnOnce() -> Value) {
    if let Value::Object(map) = value {
        if matches!(map.get(key), None | Some(Value::Null)) {
            map.insert(key.to_string(), make());
        }
    }
}

/// Load and parse the run config, applying the `--seed`/`--out` overrides.
pub fn load_run_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config `{}` is not valid JSON: {e}", path.display())))?;
    let mut config: RunConfig = parse_block(value, "config")?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let out = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(ResolvedConfig { config, out })
}

/// A run config with the output directory resolved.
#[derive(Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub out: PathBuf,
}

/// Image, label, and named per-modality tabular encoder configurations, in
/// the dataset's modality order.
pub type ResolvedEncoders = (EncoderConfig, EncoderConfig, Vec<(String, EncoderConfig)>);

impl ResolvedConfig {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// The synthetic block parsed into a generator config, with the master
    /// seed filled in when absent.
    pub fn synth_config(&self) -> Result<Option<SynthConfig>> {
        match &self.config.dataset.synthetic {
            None => Ok(None),
            Some(v) => {
                let mut v = v.clone();
                let seed = self.seed();
                fill_default(&mut v, "seed", || Value::from(seed));
                Ok(Some(parse_block(v, "config.dataset.synthetic")?))
            }
        }
    }

    /// Materialize the dataset: generate the synthetic table or load the
    /// CSV. Exactly one dataset source must be configured.
    pub fn load_dataset(&self) -> Result<DatasetTable> {
        match (&self.config.dataset.synthetic, &self.config.dataset.csv) {
            (Some(_), Some(_)) => Err(Error::Config(
                "config.dataset: give either `synthetic` or `csv`, not both".to_string(),
            )),
            (None, None) => Err(Error::Config(
                "config.dataset: one of `synthetic` or `csv` is required".to_string(),
            )),
            (Some(_), None) => {
                let synth = self.synth_config()?.expect("synthetic block present");
                let (table, _) = synth_generate(&synth)?;
                Ok(table)
            }
            (None, Some(csv)) => {
                if !csv.path.exists() {
                    return Err(Error::Config(format!(
                        "config.dataset.csv.path: `{}` does not exist",
                        csv.path.display()
                    )));
                }
                load_csv(&csv.path, &csv.modalities)
            }
        }
    }

    /// The modality schemas of the configured dataset (for parsing other
    /// CSVs with the same column layout, e.g. an inference input).
    pub fn dataset_specs(&self) -> Result<Vec<ModalitySpec>> {
        if let Some(synth) = self.synth_config()? {
            let (specs, _) = synth.schema();
            return Ok(specs);
        }
        match &self.config.dataset.csv {
            Some(csv) => Ok(csv.modalities.clone()),
            None => Err(Error::Config(
                "config.dataset: one of `synthetic` or `csv` is required".to_string(),
            )),
        }
    }

    /// The training config with the master seed filled in when absent.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut v = self.config.train.clone().unwrap_or_else(|| Value::Object(Default::default()));
        let seed = self.seed();
        fill_default(&mut v, "seed", || Value::from(seed));
        let config: TrainConfig = parse_block(v, "config.train")?;
        config.validate()?;
        Ok(config)
    }

    /// The evaluation config (defaults when the block is absent).
    pub fn eval_config(&self) -> EvalConfig {
        self.config.eval.clone().unwrap_or_default()
    }

    /// Resolve one encoder block: fill `seed` (derived from the master seed
    /// and `role`) and `input_dim` when omitted, defaulting the whole block
    /// to a single-hidden-layer MLP of width 64.
    fn encoder_config(
        &self,
        block: Option<&Value>,
        role: &str,
        kind: EncoderKind,
        input_dim: usize,
    ) -> Result<EncoderConfig> {
        let mut v = block.cloned().unwrap_or_else(|| Value::Object(Default::default()));
        let kind_value = serde_json::to_value(kind).expect("kind serializes");
        fill_default(&mut v, "kind", || kind_value);
        fill_default(&mut v, "seed", || {
            Value::from(modality_seed(self.seed(), &format!("encoder.{role}")))
        });
        let parsed_kind: EncoderKind = match &v {
            Value::Object(map) => parse_block(
                map.get("kind").cloned().unwrap_or(Value::Null),
                &format!("config.encoders.{role}.kind"),
            )?,
            _ => kind,
        };
        // CNNs derive their input width from image_shape and may have an
        // empty dense stack; MLP kinds get the width-64 default layer and
        // the dataset-derived input width.
        if parsed_kind != EncoderKind::ImageCnn {
            fill_default(&mut v, "hidden_dims", || serde_json::json!([64]));
            fill_default(&mut v, "input_dim", || Value::from(input_dim));
        }
        let config: EncoderConfig = parse_block(v, &format!("config.encoders.{role}"))?;
        config.validate()?;
        Ok(config)
    }

    /// Resolve the image, label, and per-modality tabular encoder configs
    /// against a concrete dataset (for input widths). The tabular list
    /// follows the dataset's modality order.
    pub fn encoder_configs(&self, table: &DatasetTable) -> Result<ResolvedEncoders> {
        let image = self.encoder_config(
            self.config.encoders.image.as_ref(),
            "image",
            EncoderKind::ImageMlp,
            table.image_dim,
        )?;
        let label = self.encoder_config(
            self.config.encoders.label.as_ref(),
            "label",
            EncoderKind::LabelMlp,
            1,
        )?;
        // Preprocessed feature widths need fitted stats; fit on a throwaway
        // all-train split so widths are available before real training.
        let mut probe = table.clone();
        for sample in &mut probe.samples {
            sample.split = Some(crate::data::Split::Train);
        }
        let stats = fit_preprocess(&probe)?;
        let known: Vec<String> = stats.modalities.iter().map(|m| m.name.clone()).collect();
        for name in self.config.encoders.tabular.keys() {
            if !known.contains(name) {
                return Err(Error::Config(format!(
                    "config.encoders.tabular: unknown modality `{name}` (dataset has: {})",
                    known.join(", ")
                )));
            }
        }
        let mut tabular = Vec::with_capacity(stats.modalities.len());
        for m in &stats.modalities {
            let config = self.encoder_config(
                self.config.encoders.tabular.get(&m.name),
                &m.name,
                EncoderKind::TabularMlp,
                m.width(),
            )?;
            tabular.push((m.name.clone(), config));
        }
        Ok((image, label, tabular))
    }
}

fn require_config(cli_config: Option<&Path>) -> Result<&Path> {
    cli_config.ok_or_else(|| Error::Config("--config PATH is required for this command".into()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// `synth`: write `synthetic.csv` and `signal_mask.csv`.
pub fn cmd_synth(resolved: &ResolvedConfig) -> Result<()> {
    let synth = resolved.synth_config()?.ok_or_else(|| {
        Error::Config("config.dataset.synthetic is required for `synth`".to_string())
    })?;
    let (table, mask) = synth_generate(&synth)?;
    ensure_out(&resolved.out)?;
    let csv_path = resolved.out.join("synthetic.csv");
    let mask_path = resolved.out.join("signal_mask.csv");
    save_csv(&table, &csv_path)?;
    mask.write_csv(&mask_path)?;
    let counts = table.class_counts();
    let dims: Vec<String> = table
        .specs
        .iter()
        .zip(&table.columns)
        .map(|(s, cols)| format!("{}({})", s.name, cols.len()))
        .collect();
    eprintln!(
        "synth: n={} image_dim={} modalities=[{}] classes CN={} MCI={} AD={} -> {}, {}",
        table.len(),
        table.image_dim,
        dims.join(", "),
        counts[0],
        counts[1],
        counts[2],
        csv_path.display(),
        mask_path.display()
    );
    Ok(())
}

/// `train`: two-phase training; write `checkpoint.pclp` and `history.csv`.
pub fn cmd_train(resolved: &ResolvedConfig, epochs_override: Option<usize>) -> Result<()> {
    let mut table = resolved.load_dataset()?;
    make_splits(
        &mut table,
        resolved.seed(),
        resolved.config.split.fractions,
        resolved.config.split.balanced,
    )?;
    let (image_cfg, label_cfg, tabular_cfgs) = resolved.encoder_configs(&table)?;
    let mut train_cfg = resolved.train_config()?;
    if let Some(epochs) = epochs_override {
        train_cfg.epochs = epochs;
    }
    let model = train_full(&table, &image_cfg, &label_cfg, &tabular_cfgs, &train_cfg)?;
    ensure_out(&resolved.out)?;
    let ckpt_path = resolved.out.join("checkpoint.pclp");
    let history_path = resolved.out.join("history.csv");
    Checkpoint::from_model(&model).save(&ckpt_path)?;
    write_file(&history_path, &history_to_csv(&model.history))?;
    eprintln!(
        "train: best phase-1 val loss {} at epoch {}; {} tabular modalities -> {}, {}",
        model.best_val,
        model.best_epoch,
        model.tabular.len(),
        ckpt_path.display(),
        history_path.display()
    );
    Ok(())
}

/// `eval`: the multi-run protocol; write `eval_summary.json` and
/// `confusion.csv`.
pub fn cmd_eval(resolved: &ResolvedConfig, checkpoint: Option<&Path>) -> Result<()> {
    let table = resolved.load_dataset()?;
    let eval_cfg = resolved.eval_config();
    let summary = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            evaluate_from_checkpoint(&ckpt, &table, &eval_cfg)?
        }
        None => {
            let (image_cfg, label_cfg, tabular_cfgs) = resolved.encoder_configs(&table)?;
            let train_cfg = resolved.train_config()?;
            evaluate(&table, &image_cfg, &label_cfg, &tabular_cfgs, &train_cfg, &eval_cfg)?
        }
    };
    ensure_out(&resolved.out)?;
    let summary_path = resolved.out.join("eval_summary.json");
    let confusion_path = resolved.out.join("confusion.csv");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(Error::from)?;
    write_file(&summary_path, &json)?;
    write_file(&confusion_path, &summary.confusion_last_run.to_csv())?;
    for row in &summary.configurations {
        eprintln!(
            "eval: {:<12} all-labels {:.3} ± {:.3}   AD-vs-CN {:.3} ± {:.3}",
            row.name, row.all_labels.mean, row.all_labels.std, row.ad_vs_cn.mean, row.ad_vs_cn.std
        );
    }
    eprintln!("eval: {} runs -> {}, {}", summary.runs, summary_path.display(), confusion_path.display());
    Ok(())
}

/// Worker-pool size from `PROTOCLIP_THREADS` (default 1).
fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{s}`"
            ))),
        },
    }
}

/// Predict every sample, optionally across a worker pool. Output order and
/// content are independent of the thread count.
fn predict_all(
    ckpt: &Checkpoint,
    table: &DatasetTable,
    modalities: &[String],
    search: SearchStrategy,
    labels: &LabelTable,
    threads: usize,
) -> Result<Vec<Prediction>> {
    let n = table.len();
    if threads <= 1 || n <= 1 {
        return table
            .samples
            .iter()
            .map(|s| predict(ckpt, s, modalities, search, labels))
            .collect();
    }
    let workers = threads.min(n);
    let chunk = n.div_ceil(workers);
    let mut slots: Vec<Option<Result<Prediction>>> = Vec::new();
    slots.resize_with(n, || None);
    // Contiguous chunks keep slot/sample alignment trivially; each worker
    // owns a disjoint mutable slice, so no synchronization is needed and
    // the output is identical to the sequential path.
    std::thread::scope(|scope| {
        for (slot_chunk, sample_chunk) in
            slots.chunks_mut(chunk).zip(table.samples.chunks(chunk))
        {
            scope.spawn(move || {
                for (slot, sample) in slot_chunk.iter_mut().zip(sample_chunk) {
                    *slot = Some(predict(ckpt, sample, modalities, search, labels));
                }
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        out.push(slot.expect("every slot is filled by its worker")?);
    }
    Ok(out)
}

/// `infer`: predictions CSV for an input dataset; with the ternary search,
/// also reports its agreement rate against the exhaustive oracle.
pub fn cmd_infer(resolved: &ResolvedConfig, args: &InferArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        return Err(Error::Config(format!(
            "--checkpoint `{}` does not exist",
            args.checkpoint.display()
        )));
    }
    if !args.input.exists() {
        return Err(Error::Config(format!("--input `{}` does not exist", args.input.display())));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let specs = resolved.dataset_specs()?;
    let table = load_csv(&args.input, &specs)?;
    let modalities: Vec<String> = if args.modalities.is_empty() {
        let mut all = vec![IMAGE_MODALITY.to_string()];
        all.extend(ckpt.modality_names());
        all
    } else {
        args.modalities.clone()
    };
    let labels = LabelTable::new(&ckpt.label, label_grid(args.grid_points))?;
    let threads = thread_count()?;
    let search: SearchStrategy = args.search.into();
    let predictions = predict_all(&ckpt, &table, &modalities, search, &labels, threads)?;
    if search == SearchStrategy::Ternary {
        let oracle = predict_all(
            &ckpt,
            &table,
            &modalities,
            SearchStrategy::Exhaustive,
            &labels,
            threads,
        )?;
        let agree = predictions
            .iter()
            .zip(&oracle)
            .filter(|(t, e)| t.y_hat.to_bits() == e.y_hat.to_bits())
            .count();
        eprintln!(
            "infer: ternary vs exhaustive agreement {agree}/{} ({:.1}%)",
            predictions.len(),
            100.0 * agree as f64 / predictions.len() as f64
        );
    }
    ensure_out(&resolved.out)?;
    let out_path = resolved.out.join("predictions.csv");
    write_file(&out_path, &predictions_to_csv(&predictions))?;
    eprintln!(
        "infer: {} predictions with [{}] -> {}",
        predictions.len(),
        modalities.join(", "),
        out_path.display()
    );
    Ok(())
}

/// `attention`: per-modality `column,score` rankings (one-hot groups
/// aggregated to their source column by maximum score).
pub fn cmd_attention(out: &Path, checkpoint: &Path) -> Result<()> {
    if !checkpoint.exists() {
        return Err(Error::Config(format!(
            "--checkpoint `{}` does not exist",
            checkpoint.display()
        )));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.tabular.is_empty() {
        return Err(Error::Config("no tabular gates present".to_string()));
    }
    ensure_out(out)?;
    let mut written = Vec::new();
    for (name, params) in &ckpt.tabular {
        let gate = params
            .gate
            .as_ref()
            .ok_or_else(|| Error::Config("no tabular gates present".to_string()))?;
        let names = ckpt.stats.modality(name)?.output_names();
        let report = rank_features(gate, &names, true)?;
        let path = out.join(format!("attention_{name}.csv"));
        write_file(&path, &report.to_csv())?;
        written.push(path.display().to_string());
    }
    eprintln!("attention: wrote {}", written.join(", "));
    Ok(())
}

/// Dispatch a parsed command line. Returns the process exit code.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let path = require_config(cli.config.as_deref())?;
            let resolved = load_run_config(path, cli.seed, cli.out.as_deref())?;
            cmd_synth(&resolved)
        }
        Command::Train { epochs } => {
            let path = require_config(cli.config.as_deref())?;
            let resolved = load_run_config(path, cli.seed, cli.out.as_deref())?;
            cmd_train(&resolved, *epochs)
        }
        Command::Eval { checkpoint } => {
            let path = require_config(cli.config.as_deref())?;
            let resolved = load_run_config(path, cli.seed, cli.out.as_deref())?;
            cmd_eval(&resolved, checkpoint.as_deref())
        }
        Command::Infer(args) => {
            let path = require_config(cli.config.as_deref())?;
            let resolved = load_run_config(path, cli.seed, cli.out.as_deref())?;
            cmd_infer(&resolved, args)
        }
        Command::Attention { checkpoint } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            cmd_attention(&out, checkpoint)
        }
    }
}
