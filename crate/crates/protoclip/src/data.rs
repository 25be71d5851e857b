//! Dataset handling: modality schemas, label encoding, preprocessing,
//! deterministic splits, the synthetic generator, and CSV round-trips.
//!
//! A [`DatasetTable`] holds one row per sample: a required continuous label in
//! `[0, 1]`, an optional image vector, and one group of columns per tabular
//! modality. Preprocessing statistics are always fitted on the training split
//! only and frozen into [`PreprocessStats`] so that validation, test, and
//! later inference all see the same transform.
//!
//! Conventions kept throughout the crate:
//! * numeric columns are z-scored with the population standard deviation
//!   (divide by `n`); a constant column is flagged and maps to `0.0`;
//! * missing numeric cells become `0.0` *after* normalization (the train mean);
//! * categorical columns are one-hot encoded against a vocabulary frozen from
//!   the training split (declared order if given, sorted unique tokens
//!   otherwise); unknown or missing tokens at application time encode as the
//!   all-zeros vector;
//! * class labels map as `CN -> 0.0`, `MCI -> 0.5`, `AD -> 1.0`; numeric label
//!   strings pass through unchanged after a range check; continuous labels
//!   snap back to the nearest class with ties toward the lower class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// The three canonical diagnosis classes, in fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CanonicalClass {
    /// Cognitively normal (`0.0`).
    Cn,
    /// Mild cognitive impairment (`0.5`).
    Mci,
    /// Alzheimer's disease (`1.0`).
    Ad,
}

impl CanonicalClass {
    /// All classes in reporting order.
    pub const ALL: [CanonicalClass; 3] = [CanonicalClass::Cn, CanonicalClass::Mci, CanonicalClass::Ad];

    /// The canonical continuous value for this class.
    pub fn value(self) -> f64 {
        match self {
            CanonicalClass::Cn => 0.0,
            CanonicalClass::Mci => 0.5,
            CanonicalClass::Ad => 1.0,
        }
    }

    /// Stable display token (`CN`, `MCI`, `AD`).
    pub fn as_str(self) -> &'static str {
        match self {
            CanonicalClass::Cn => "CN",
            CanonicalClass::Mci => "MCI",
            CanonicalClass::Ad => "AD",
        }
    }

    /// Index into [`CanonicalClass::ALL`].
    pub fn index(self) -> usize {
        match self {
            CanonicalClass::Cn => 0,
            CanonicalClass::Mci => 1,
            CanonicalClass::Ad => 2,
        }
    }
}

impl fmt::Display for CanonicalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Snap a continuous label in `[0, 1]` to the nearest canonical class.
///
/// Boundaries fall at the midpoints `0.25` and `0.75`; a label exactly on a
/// boundary snaps toward the *lower* class, so `0.25 -> CN` and `0.75 -> MCI`.
pub fn snap_to_class(y: f64) -> CanonicalClass {
    if y <= 0.25 {
        CanonicalClass::Cn
    } else if y <= 0.75 {
        CanonicalClass::Mci
    } else {
        CanonicalClass::Ad
    }
}

/// Parse a raw label token into a continuous value in `[0, 1]`.
///
/// Class tokens (`CN`, `MCI`, `AD`) are matched after trimming whitespace and
/// uppercasing. Anything else must parse as a float inside `[0, 1]`.
pub fn encode_label_value(raw: &str) -> Result<f64> {
    let token = raw.trim();
    match token.to_ascii_uppercase().as_str() {
        "CN" => return Ok(0.0),
        "MCI" => return Ok(0.5),
        "AD" => return Ok(1.0),
        _ => {}
    }
    if let Ok(value) = token.parse::<f64>() {
        if (0.0..=1.0).contains(&value) {
            return Ok(value);
        }
        return Err(Error::LabelOutOfRange { value });
    }
    Err(Error::LabelToken { token: token.to_string() })
}

/// One-hot encode `token` against `vocab` as a `1 x |vocab|` row.
///
/// The vocabulary must be non-empty and free of duplicates. A token that is
/// not in the vocabulary encodes as the all-zeros row rather than an error, so
/// unseen categories at inference time degrade gracefully.
pub fn one_hot(token: &str, vocab: &[String]) -> Result<Matrix> {
    if vocab.is_empty() {
        return Err(Error::Data("one-hot vocabulary is empty".to_string()));
    }
    let mut seen = BTreeSet::new();
    for entry in vocab {
        if !seen.insert(entry.as_str()) {
            return Err(Error::Data(format!("one-hot vocabulary has duplicate token `{entry}`")));
        }
    }
    let mut row = vec![0.0; vocab.len()];
    if let Some(pos) = vocab.iter().position(|v| v == token) {
        row[pos] = 1.0;
    }
    Ok(Matrix::new(1, vocab.len(), row))
}

/// Which of the three dataset partitions a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One tabular cell: a number, a raw categorical token, or missing.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Num(f64),
    Text(String),
    Missing,
}

impl CellValue {
    /// The token this cell contributes to a categorical column, if any.
    fn token(&self) -> Option<String> {
        match self {
            CellValue::Num(x) => Some(format!("{x}")),
            CellValue::Text(t) => Some(t.clone()),
            CellValue::Missing => None,
        }
    }
}

/// Schema for one tabular modality: which CSV columns it claims and which of
/// those are categorical.
///
/// Columns are claimed by the `prefix` (every non-reserved header starting
/// with it, in header order) plus any explicitly listed categorical columns.
/// A column listed in `categorical` or keyed in `vocab` is treated as
/// categorical even if its cells look numeric; otherwise a column is
/// categorical when any training cell is non-numeric text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    /// Modality name, e.g. `biomarkers`.
    pub name: String,
    /// Column-name prefix this modality claims, e.g. `bio_`.
    pub prefix: String,
    /// Column names forced to categorical (vocabulary inferred from train).
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Declared vocabularies; keys are also forced to categorical. The given
    /// order is frozen as the one-hot order.
    #[serde(default)]
    pub vocab: BTreeMap<String, Vec<String>>,
}

impl ModalitySpec {
    /// A spec with just a name and prefix (everything auto-detected).
    pub fn with_prefix(name: &str, prefix: &str) -> Self {
        ModalitySpec {
            name: name.to_string(),
            prefix: prefix.to_string(),
            categorical: Vec::new(),
            vocab: BTreeMap::new(),
        }
    }

    fn is_declared_categorical(&self, column: &str) -> bool {
        self.categorical.iter().any(|c| c == column) || self.vocab.contains_key(column)
    }
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identifier, unique within the table.
    pub id: String,
    /// Flattened image vector (`1 x image_dim`; `image_dim` may be zero).
    pub image: Matrix,
    /// Raw tabular cells, indexed `[modality][column]`.
    pub cells: Vec<Vec<CellValue>>,
    /// Continuous label in `[0, 1]`.
    pub label: f64,
    /// Partition tag; `None` until [`make_splits`] runs.
    pub split: Option<Split>,
}

/// An in-memory dataset: modality schemas, claimed column names, and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    /// Modality schemas, in declaration order.
    pub specs: Vec<ModalitySpec>,
    /// Claimed column names per modality, in column order.
    pub columns: Vec<Vec<String>>,
    /// Flattened image vector length (zero when the table carries no images).
    pub image_dim: usize,
    /// Rows in file order.
    pub samples: Vec<Sample>,
}

impl DatasetTable {
    /// Number of rows.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Whether the table has no rows.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index of the modality called `name`.
    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.specs.iter().position(|s| s.name == name).ok_or_else(|| Error::UnknownModality {
            name: name.to_string(),
            available: self.specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>().join(", "),
        })
    }

    /// Row indices assigned to `split`, in row order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class row counts over the whole table, in reporting order.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for sample in &self.samples {
            counts[snap_to_class(sample.label).index()] += 1;
        }
        counts
    }

    /// Stack the image vectors of `indices` into an `n x image_dim` matrix.
    pub fn images(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.image_dim);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Matrix::new(indices.len(), self.image_dim, data)
    }

    /// Labels of `indices` as an `n x 1` column.
    pub fn labels(&self, indices: &[usize]) -> Matrix {
        let data: Vec<f64> = indices.iter().map(|&i| self.samples[i].label).collect();
        Matrix::new(indices.len(), 1, data)
    }
}

/// Frozen statistics for one column of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnStat {
    /// A z-scored numeric column.
    Numeric {
        name: String,
        mean: f64,
        /// Population standard deviation (divide by `n`).
        std: f64,
        /// True when the training column was constant (or all missing); the
        /// normalized output is then forced to `0.0`.
        constant: bool,
    },
    /// A one-hot categorical column with its frozen vocabulary.
    Categorical { name: String, vocab: Vec<String> },
}

impl ColumnStat {
    /// Raw column name.
    pub fn name(&self) -> &str {
        match self {
            ColumnStat::Numeric { name, .. } => name,
            ColumnStat::Categorical { name, .. } => name,
        }
    }

    /// Number of output features this column expands to.
    pub fn width(&self) -> usize {
        match self {
            ColumnStat::Numeric { .. } => 1,
            ColumnStat::Categorical { vocab, .. } => vocab.len(),
        }
    }
}

/// Preprocessing statistics for every modality, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    /// Per-modality column statistics, `[modality][column]`, in table order.
    pub modalities: Vec<ModalityStats>,
}

/// Preprocessing statistics for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    /// Modality name (matches the table spec).
    pub name: String,
    /// Per-column statistics in claimed-column order.
    pub columns: Vec<ColumnStat>,
}

impl ModalityStats {
    /// Total preprocessed feature width for this modality.
    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnStat::width).sum()
    }

    /// Names of the preprocessed output features, in order. Numeric columns
    /// keep their name; a categorical column `c` with vocabulary token `t`
    /// yields `c=t`.
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for col in &self.columns {
            match col {
                ColumnStat::Numeric { name, .. } => names.push(name.clone()),
                ColumnStat::Categorical { name, vocab } => {
                    for token in vocab {
                        names.push(format!("{name}={token}"));
                    }
                }
            }
        }
        names
    }
}

impl PreprocessStats {
    /// Statistics for the modality called `name`.
    pub fn modality(&self, name: &str) -> Result<&ModalityStats> {
        self.modalities.iter().find(|m| m.name == name).ok_or_else(|| Error::UnknownModality {
            name: name.to_string(),
            available: self.modalities.iter().map(|m| m.name.clone()).collect::<Vec<_>>().join(", "),
        })
    }
}

/// Fit preprocessing statistics on the training split of `table`.
///
/// Numeric columns record the train mean and population standard deviation
/// (`sqrt(sum((x - mean)^2) / n)`); a column whose train values are constant
/// or entirely missing is flagged `constant`. Categorical vocabularies use
/// the declared order when the spec pins one, otherwise the sorted unique
/// train tokens. Statistics never look at validation or test rows.
pub fn fit_preprocess(table: &DatasetTable) -> Result<PreprocessStats> {
    let train = table.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data(
            "cannot fit preprocessing statistics: training split is empty (run make_splits first)"
                .to_string(),
        ));
    }
    let mut modalities = Vec::with_capacity(table.specs.len());
    for (mi, spec) in table.specs.iter().enumerate() {
        let mut columns = Vec::with_capacity(table.columns[mi].len());
        for (ci, col_name) in table.columns[mi].iter().enumerate() {
            let declared = spec.is_declared_categorical(col_name);
            let has_text = train
                .iter()
                .any(|&r| matches!(table.samples[r].cells[mi][ci], CellValue::Text(_)));
            if declared || has_text {
                let vocab = match spec.vocab.get(col_name) {
                    Some(declared_vocab) => {
                        if declared_vocab.is_empty() {
                            return Err(Error::Data(format!(
                                "declared vocabulary for column `{col_name}` of modality `{}` is empty",
                                spec.name
                            )));
                        }
                        declared_vocab.clone()
                    }
                    None => {
                        let tokens: BTreeSet<String> = train
                            .iter()
                            .filter_map(|&r| table.samples[r].cells[mi][ci].token())
                            .collect();
                        if tokens.is_empty() {
                            return Err(Error::Data(format!(
                                "categorical column `{col_name}` of modality `{}` has no training tokens",
                                spec.name
                            )));
                        }
                        tokens.into_iter().collect()
                    }
                };
                columns.push(ColumnStat::Categorical { name: col_name.clone(), vocab });
            } else {
                let mut values = Vec::new();
                for &r in &train {
                    match &table.samples[r].cells[mi][ci] {
                        CellValue::Num(x) => values.push(*x),
                        CellValue::Missing => {}
                        CellValue::Text(t) => {
                            return Err(Error::Data(format!(
                                "numeric column `{col_name}` of modality `{}` has text cell `{t}`",
                                spec.name
                            )))
                        }
                    }
                }
                let (mean, std, constant) = if values.is_empty() {
                    (0.0, 0.0, true)
                } else if values.iter().all(|&x| x == values[0]) {
                    // Constancy is decided by value equality: the accumulated
                    // mean of n equal values need not be exactly that value,
                    // and the near-zero deviations it leaves behind would
                    // otherwise blow up into spurious +-1 z-scores.
                    (values[0], 0.0, true)
                } else {
                    let n = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let std = var.sqrt();
                    (mean, std, std == 0.0)
                };
                columns.push(ColumnStat::Numeric { name: col_name.clone(), mean, std, constant });
            }
        }
        modalities.push(ModalityStats { name: spec.name.clone(), columns });
    }
    Ok(PreprocessStats { modalities })
}

/// Preprocess one sample's cells for modality `mi` into a `1 x width` row.
///
/// Numeric cells z-score against the frozen train statistics; a constant
/// column, a missing numeric cell, and an unknown or missing categorical
/// token all map to zeros.
pub fn apply_preprocess_modality(
    sample: &Sample,
    stats: &PreprocessStats,
    mi: usize,
) -> Result<Matrix> {
    let modality = &stats.modalities[mi];
    if sample.cells[mi].len() != modality.columns.len() {
        return Err(Error::Data(format!(
            "sample `{}` has {} cells for modality `{}` but statistics cover {} columns",
            sample.id,
            sample.cells[mi].len(),
            modality.name,
            modality.columns.len()
        )));
    }
    let mut row = Vec::with_capacity(modality.width());
    for (ci, col) in modality.columns.iter().enumerate() {
        match col {
            ColumnStat::Numeric { name, mean, std, constant } => match &sample.cells[mi][ci] {
                CellValue::Num(x) => {
                    if *constant {
                        row.push(0.0);
                    } else {
                        row.push((x - mean) / std);
                    }
                }
                CellValue::Missing => row.push(0.0),
                CellValue::Text(t) => {
                    return Err(Error::Data(format!(
                        "numeric column `{name}` of modality `{}` has text cell `{t}` in sample `{}`",
                        modality.name, sample.id
                    )))
                }
            },
            ColumnStat::Categorical { vocab, .. } => {
                let token = sample.cells[mi][ci].token();
                let mut hot = vec![0.0; vocab.len()];
                if let Some(token) = token {
                    if let Some(pos) = vocab.iter().position(|v| *v == token) {
                        hot[pos] = 1.0;
                    }
                }
                row.extend_from_slice(&hot);
            }
        }
    }
    Ok(Matrix::new(1, modality.width(), row))
}

/// Preprocess one sample for every modality, in table order.
pub fn apply_preprocess(sample: &Sample, stats: &PreprocessStats) -> Result<Vec<Matrix>> {
    (0..stats.modalities.len())
        .map(|mi| apply_preprocess_modality(sample, stats, mi))
        .collect()
}

/// Stack the preprocessed rows of `indices` for modality `mi` into a matrix.
pub fn preprocessed_matrix(
    table: &DatasetTable,
    stats: &PreprocessStats,
    mi: usize,
    indices: &[usize],
) -> Result<Matrix> {
    let width = stats.modalities[mi].width();
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        let row = apply_preprocess_modality(&table.samples[i], stats, mi)?;
        data.extend_from_slice(row.data());
    }
    Ok(Matrix::new(indices.len(), width, data))
}

/// Split fractions for train/validation/test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.15, test: 0.15 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        for (label, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction `{label}` must lie in [0, 1], got {f}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Assign every row of `table` to train/val/test in place.
///
/// Rows are shuffled with a seeded generator, so the same seed always yields
/// the same partition. Sizes are computed by flooring `val` and `test` counts
/// and assigning every remainder row to train. With `balanced: true` the
/// procedure runs independently inside each snapped class (in `CN, MCI, AD`
/// order), and a present class with fewer than three rows is an error.
pub fn make_splits(
    table: &mut DatasetTable,
    seed: u64,
    fractions: SplitFractions,
    balanced: bool,
) -> Result<()> {
    fractions.validate()?;
    if table.is_empty() {
        return Err(Error::Data("cannot split an empty table".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata: Vec<Vec<usize>> = if balanced {
        let mut groups: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (i, sample) in table.samples.iter().enumerate() {
            groups[snap_to_class(sample.label).index()].push(i);
        }
        for (class, group) in CanonicalClass::ALL.iter().zip(&groups) {
            if !group.is_empty() && group.len() < 3 {
                return Err(Error::Data(format!(
                    "balanced split needs at least 3 samples per class, but class {class} has {}",
                    group.len()
                )));
            }
        }
        groups.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![(0..table.len()).collect()]
    };
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let n = stratum.len();
        let n_val = (fractions.val * n as f64).floor() as usize;
        let n_test = (fractions.test * n as f64).floor() as usize;
        let n_train = n - n_val - n_test;
        for (pos, &row) in stratum.iter().enumerate() {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            table.samples[row].split = Some(split);
        }
    }
    Ok(())
}

/// One tabular modality in the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModality {
    /// Modality name (also selects the default column prefix).
    pub name: String,
    /// Number of numeric columns.
    pub dim: usize,
    /// How many of the numeric columns carry signal (linear in the latent).
    pub k_signal: usize,
    /// Column prefix override; defaults per modality name.
    #[serde(default)]
    pub prefix: Option<String>,
}

impl SynthModality {
    /// Construct with the default prefix.
    pub fn new(name: &str, dim: usize, k_signal: usize) -> Self {
        SynthModality { name: name.to_string(), dim, k_signal, prefix: None }
    }

    /// The effective column prefix.
    pub fn effective_prefix(&self) -> String {
        if let Some(p) = &self.prefix {
            return p.clone();
        }
        match self.name.as_str() {
            "biomarkers" => "bio_".to_string(),
            "cognitive" => "cog_".to_string(),
            "volumetric" => "vol_".to_string(),
            "history" => "hist_".to_string(),
            other => format!("{other}_"),
        }
    }
}

/// Configuration for the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of samples.
    pub n: usize,
    /// Flattened image vector length.
    pub d_image: usize,
    /// Gaussian noise level added to image and signal columns.
    pub sigma: f64,
    /// When true (default), classes are generated round-robin with the latent
    /// drawn uniformly inside the class band; when false the latent is drawn
    /// uniformly over `[0, 1]`.
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Tabular modalities to generate.
    pub modalities: Vec<SynthModality>,
    /// Generator seed.
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic config needs n >= 1".to_string()));
        }
        if self.d_image == 0 {
            return Err(Error::Config("synthetic config needs d_image >= 1".to_string()));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            if m.name.is_empty() {
                return Err(Error::Config("synthetic modality name must be non-empty".to_string()));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate synthetic modality name `{}`", m.name)));
            }
            if m.dim == 0 {
                return Err(Error::Config(format!("modality `{}` needs dim >= 1", m.name)));
            }
            if m.k_signal > m.dim {
                return Err(Error::Config(format!(
                    "modality `{}` requests k_signal = {} signal columns but only has dim = {} columns",
                    m.name, m.k_signal, m.dim
                )));
            }
        }
        Ok(())
    }

    /// The table schema this generator produces: one spec per modality (the
    /// band column declared categorical) and the per-modality column names
    /// (`{prefix}f00..` plus `{prefix}band`). A CSV written by the generator
    /// can be reloaded with these specs.
    pub fn schema(&self) -> (Vec<ModalitySpec>, Vec<Vec<String>>) {
        let mut specs = Vec::with_capacity(self.modalities.len());
        let mut columns = Vec::with_capacity(self.modalities.len());
        for m in &self.modalities {
            let prefix = m.effective_prefix();
            let mut names: Vec<String> = (0..m.dim).map(|j| format!("{prefix}f{j:02}")).collect();
            names.push(format!("{prefix}band"));
            let mut spec = ModalitySpec::with_prefix(&m.name, &prefix);
            spec.categorical.push(format!("{prefix}band"));
            specs.push(spec);
            columns.push(names);
        }
        (specs, columns)
    }
}

/// Ground-truth record of which generated numeric columns carry signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMask {
    pub entries: Vec<MaskEntry>,
}

/// One row of the signal mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub modality: String,
    pub column: String,
    pub is_signal: bool,
}

impl SignalMask {
    /// Names of the signal columns of `modality`, in column order.
    pub fn signal_columns(&self, modality: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.modality == modality && e.is_signal)
            .map(|e| e.column.clone())
            .collect()
    }

    /// Render as CSV with header `modality,column,is_signal`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,column,is_signal\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.modality, e.column, e.is_signal));
        }
        out
    }

    /// Write the CSV rendering to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse the CSV rendering produced by [`SignalMask::to_csv`].
    pub fn from_csv_str(text: &str) -> Result<SignalMask> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for record in reader.deserialize::<MaskEntry>() {
            entries.push(record?);
        }
        Ok(SignalMask { entries })
    }
}

/// Generate a synthetic dataset; see [`synth_generate_with_latents`] for the
/// construction. Latents are drawn here: uniformly over `[0, 1]` when
/// `balanced` is false, otherwise round-robin over the classes with the
/// latent uniform inside the class band (`[0, 0.25]`, `(0.25, 0.75]`,
/// `(0.75, 1]`).
pub fn synth_generate(config: &SynthConfig) -> Result<(DatasetTable, SignalMask)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut latents = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let u: f64 = rng.gen();
        let z = if config.balanced {
            match i % 3 {
                0 => 0.25 * u,
                1 => 0.25 + 0.5 * u,
                _ => 0.75 + 0.25 * u,
            }
        } else {
            u
        };
        latents.push(z);
    }
    generate_from_latents(config, &latents, &mut rng)
}

/// Generate a synthetic dataset with caller-supplied latents (useful for
/// pinning exact labels in tests). `latents` must contain `config.n` values
/// in `[0, 1]`; `config.balanced` is ignored.
pub fn synth_generate_with_latents(
    config: &SynthConfig,
    latents: &[f64],
) -> Result<(DatasetTable, SignalMask)> {
    config.validate()?;
    if latents.len() != config.n {
        return Err(Error::Config(format!(
            "expected {} latents, got {}",
            config.n,
            latents.len()
        )));
    }
    for &z in latents {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::Config(format!("latent {z} lies outside [0, 1]")));
        }
    }
    // Consume the latent draws so the downstream stream matches synth_generate
    // structure; the caller's latents replace the drawn ones.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.n {
        let _: f64 = rng.gen();
    }
    generate_from_latents(config, latents, &mut rng)
}

/// Shared generator body. The latent drives everything observable:
/// * image: fixed random projection of `(z, z^2, sin 2*pi*z)` plus
///   `gaussian(0, sigma)` noise per component;
/// * signal columns: `a * z + gaussian(0, sigma)` with `|a|` uniform in
///   `[1, 2]` and a random sign, fixed per column;
/// * noise columns: standard normal draws, independent of `z`;
/// * one categorical column per modality: `z` thresholded at 1/3 and 2/3
///   into tokens `lo`, `mid`, `hi`;
/// * label: `z` snapped to the nearest class value.
fn generate_from_latents(
    config: &SynthConfig,
    latents: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(DatasetTable, SignalMask)> {
    // Per-modality structure: which columns carry signal, and their coefficients.
    let mut signal_sets: Vec<BTreeSet<usize>> = Vec::new();
    let mut coefficients: Vec<BTreeMap<usize, f64>> = Vec::new();
    for m in &config.modalities {
        let mut indices: Vec<usize> = (0..m.dim).collect();
        indices.shuffle(rng);
        let chosen: BTreeSet<usize> = indices.into_iter().take(m.k_signal).collect();
        let mut coeffs = BTreeMap::new();
        for &c in &chosen {
            let magnitude = rng.gen_range(1.0..2.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            coeffs.insert(c, sign * magnitude);
        }
        signal_sets.push(chosen);
        coefficients.push(coeffs);
    }
    // Fixed image projection, d_image x 3, entries N(0, 1/3).
    let mut projection = Vec::with_capacity(config.d_image * 3);
    for _ in 0..config.d_image * 3 {
        let g: f64 = rng.sample(StandardNormal);
        projection.push(g / 3f64.sqrt());
    }

    let (specs, columns) = config.schema();

    let mut samples = Vec::with_capacity(config.n);
    for (i, &z) in latents.iter().enumerate() {
        let features = [z, z * z, (2.0 * std::f64::consts::PI * z).sin()];
        let mut image = Vec::with_capacity(config.d_image);
        for d in 0..config.d_image {
            let mut v = 0.0;
            for (f, feat) in features.iter().enumerate() {
                v += projection[d * 3 + f] * feat;
            }
            let noise: f64 = rng.sample(StandardNormal);
            image.push(v + config.sigma * noise);
        }
        let mut cells = Vec::with_capacity(config.modalities.len());
        for (mi, m) in config.modalities.iter().enumerate() {
            let mut row = Vec::with_capacity(m.dim + 1);
            for j in 0..m.dim {
                let noise: f64 = rng.sample(StandardNormal);
                let value = match coefficients[mi].get(&j) {
                    Some(a) => a * z + config.sigma * noise,
                    None => noise,
                };
                row.push(CellValue::Num(value));
            }
            let token = if z < 1.0 / 3.0 {
                "lo"
            } else if z < 2.0 / 3.0 {
                "mid"
            } else {
                "hi"
            };
            row.push(CellValue::Text(token.to_string()));
            cells.push(row);
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            image: Matrix::new(1, config.d_image, image),
            cells,
            label: snap_to_class(z).value(),
            split: None,
        });
    }

    let mut entries = Vec::new();
    for (mi, m) in config.modalities.iter().enumerate() {
        for (j, column) in columns[mi].iter().enumerate().take(m.dim) {
            entries.push(MaskEntry {
                modality: m.name.clone(),
                column: column.clone(),
                is_signal: signal_sets[mi].contains(&j),
            });
        }
    }

    Ok((
        DatasetTable { specs, columns, image_dim: config.d_image, samples },
        SignalMask { entries },
    ))
}

const RESERVED_COLUMNS: [&str; 3] = ["sample_id", "label", "image_path"];

fn is_reserved(header: &str) -> bool {
    RESERVED_COLUMNS.contains(&header) || header.starts_with("img_")
}

/// Write `table` to CSV at `path`.
///
/// Columns are `sample_id,label`, then `img_0..img_{p-1}` when the table
/// carries images, then each modality's claimed columns in order. Numeric
/// cells print with Rust's shortest round-trip float formatting, so a
/// load/save cycle reproduces the file's values exactly; missing cells print
/// as the empty string. Split tags are not persisted.
pub fn save_csv(table: &DatasetTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    for d in 0..table.image_dim {
        header.push(format!("img_{d}"));
    }
    for cols in &table.columns {
        header.extend(cols.iter().cloned());
    }
    writer.write_record(&header)?;
    for sample in &table.samples {
        let mut record = vec![sample.id.clone(), format!("{}", sample.label)];
        for d in 0..table.image_dim {
            record.push(format!("{}", sample.image.data()[d]));
        }
        for cells in &sample.cells {
            for cell in cells {
                record.push(match cell {
                    CellValue::Num(x) => format!("{x}"),
                    CellValue::Text(t) => t.clone(),
                    CellValue::Missing => String::new(),
                });
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a flattened image vector from a raw little-endian `f32` file.
pub fn read_image_file(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open image file `{}`: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "image file `{}` has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "image file `{}` contains a non-finite value",
                path.display()
            )));
        }
        values.push(f64::from(v));
    }
    Ok(values)
}

/// Load a dataset from CSV at `path` using the given modality specs.
///
/// Requires `sample_id` and `label` columns. Images come either from inline
/// `img_0..img_{p-1}` columns (which must be contiguous from zero) or from an
/// `image_path` column naming raw little-endian `f32` files (relative paths
/// resolve against the CSV's directory); with neither, the table has
/// `image_dim = 0`. Each modality claims its explicitly declared categorical
/// columns plus every non-reserved header starting with its prefix, in header
/// order; headers claimed by no modality are ignored, and a header claimed by
/// two modalities is an error. Empty cells load as missing; cells that parse
/// as floats load as numbers; everything else is a categorical token.
pub fn load_csv(path: &Path, specs: &[ModalitySpec]) -> Result<DatasetTable> {
    let mut names = BTreeSet::new();
    for spec in specs {
        if !names.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("duplicate modality name `{}`", spec.name)));
        }
    }
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let id_col = find("sample_id")
        .ok_or_else(|| Error::Data(format!("`{}` has no `sample_id` column", path.display())))?;
    let label_col = find("label")
        .ok_or_else(|| Error::Data(format!("`{}` has no `label` column", path.display())))?;
    let image_path_col = find("image_path");

    // Inline image columns img_0..img_{p-1}, required contiguous from zero.
    let mut img_cols: Vec<(usize, usize)> = Vec::new();
    for (idx, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix("img_") {
            let d: usize = rest.parse().map_err(|_| {
                Error::Data(format!("image column `{h}` does not end in an index"))
            })?;
            img_cols.push((d, idx));
        }
    }
    img_cols.sort_unstable();
    for (expect, &(d, _)) in img_cols.iter().enumerate() {
        if d != expect {
            return Err(Error::Data(format!(
                "image columns must be contiguous img_0..img_{{p-1}}; missing img_{expect}"
            )));
        }
    }
    if image_path_col.is_some() && !img_cols.is_empty() {
        return Err(Error::Data(
            "dataset has both `image_path` and inline `img_*` columns; use one".to_string(),
        ));
    }

    // Claim tabular columns per modality.
    let mut claimed: BTreeMap<usize, usize> = BTreeMap::new(); // header index -> modality
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); specs.len()];
    let mut column_idx: Vec<Vec<usize>> = vec![Vec::new(); specs.len()];
    for (mi, spec) in specs.iter().enumerate() {
        for (idx, h) in headers.iter().enumerate() {
            if is_reserved(h) {
                continue;
            }
            let explicit = spec.is_declared_categorical(h);
            if explicit || h.starts_with(&spec.prefix) {
                if let Some(&other) = claimed.get(&idx) {
                    return Err(Error::Data(format!(
                        "column `{h}` is claimed by both modality `{}` and modality `{}`",
                        specs[other].name, spec.name
                    )));
                }
                claimed.insert(idx, mi);
                columns[mi].push(h.clone());
                column_idx[mi].push(idx);
            }
        }
        for declared in spec.categorical.iter().chain(spec.vocab.keys()) {
            if !headers.iter().any(|h| h == declared) {
                return Err(Error::Data(format!(
                    "declared categorical column `{declared}` of modality `{}` is not in the header",
                    spec.name
                )));
            }
        }
    }

    let base_dir = path.parent().map(PathBuf::from).unwrap_or_default();
    let mut samples = Vec::new();
    let mut image_dim: Option<usize> = if img_cols.is_empty() && image_path_col.is_none() {
        Some(0)
    } else if !img_cols.is_empty() {
        Some(img_cols.len())
    } else {
        None // determined by the first image file
    };
    let mut seen_ids = BTreeSet::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("row {} has an empty sample_id", row_no + 1)));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate sample_id `{id}`")));
        }
        let label = encode_label_value(record.get(label_col).unwrap_or(""))?;

        let image_values: Vec<f64> = if !img_cols.is_empty() {
            let mut values = Vec::with_capacity(img_cols.len());
            for &(d, idx) in &img_cols {
                let raw = record.get(idx).unwrap_or("").trim();
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Data(format!("sample `{id}`: image cell img_{d} `{raw}` is not a number"))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "sample `{id}`: image cell img_{d} is not finite"
                    )));
                }
                values.push(v);
            }
            values
        } else if let Some(pc) = image_path_col {
            let rel = record.get(pc).unwrap_or("").trim();
            if rel.is_empty() {
                return Err(Error::Data(format!("sample `{id}` has an empty image_path")));
            }
            let mut file = PathBuf::from(rel);
            if file.is_relative() {
                file = base_dir.join(file);
            }
            read_image_file(&file)?
        } else {
            Vec::new()
        };
        match image_dim {
            Some(p) => {
                if image_values.len() != p {
                    return Err(Error::Data(format!(
                        "sample `{id}` has an image of length {}, expected {p}",
                        image_values.len()
                    )));
                }
            }
            None => image_dim = Some(image_values.len()),
        }

        let mut cells = Vec::with_capacity(specs.len());
        for modality_columns in &column_idx {
            let mut row = Vec::with_capacity(modality_columns.len());
            for &idx in modality_columns {
                let raw = record.get(idx).unwrap_or("").trim();
                let cell = if raw.is_empty() {
                    CellValue::Missing
                } else if let Ok(x) = raw.parse::<f64>() {
                    if !x.is_finite() {
                        return Err(Error::Data(format!(
                            "sample `{id}`: cell `{}` is not finite",
                            headers[idx]
                        )));
                    }
                    CellValue::Num(x)
                } else {
                    CellValue::Text(raw.to_string())
                };
                row.push(cell);
            }
            cells.push(row);
        }
        let p = image_values.len();
        samples.push(Sample {
            id,
            image: Matrix::new(1, p, image_values),
            cells,
            label,
            split: None,
        });
    }
    let image_dim = image_dim.unwrap_or(0);
    Ok(DatasetTable { specs: specs.to_vec(), columns, image_dim, samples })
}
