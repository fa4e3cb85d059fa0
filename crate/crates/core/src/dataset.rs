//! Labeled permission datasets: ingestion from the supported on-disk formats,
//! rare-family grouping, the versioned JSON cache, and the stratified k-fold
//! and leave-one-class-out split plans.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permissions::{
    build_vocabulary, encode, filter_system_permissions, PermissionName, PermissionVector,
    PermissionVocabulary,
};

/// Dummy class pooling rare families. It never participates in training and
/// serves as the novel pool in the k-fold protocol.
pub const OTHERS_FAMILY: &str = "others";

/// Reserved label string for samples flagged as novel; never a family name.
pub const NOVEL_LABEL: &str = "NOVEL";

pub(crate) const SCHEMA_VERSION: &str = "1.0";
pub(crate) const SUPPORTED_SCHEMA_MAJOR: u32 = 1;

pub(crate) fn check_schema_version(found: &str) -> Result<()> {
    let major = found
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    match major {
        Some(m) if m == SUPPORTED_SCHEMA_MAJOR => Ok(()),
        _ => Err(Error::SchemaVersion {
            found: found.to_string(),
            supported: SUPPORTED_SCHEMA_MAJOR,
        }),
    }
}

/// Either a known malware family or the Novel sentinel assigned at test time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyLabel {
    Known(String),
    Novel,
}

impl FamilyLabel {
    pub fn known(name: impl Into<String>) -> Self {
        FamilyLabel::Known(name.into())
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, FamilyLabel::Novel)
    }

    pub fn is_others(&self) -> bool {
        matches!(self, FamilyLabel::Known(name) if name == OTHERS_FAMILY)
    }

    pub fn family_name(&self) -> Option<&str> {
        match self {
            FamilyLabel::Known(name) => Some(name),
            FamilyLabel::Novel => None,
        }
    }
}

impl fmt::Display for FamilyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyLabel::Known(name) => f.write_str(name),
            FamilyLabel::Novel => f.write_str(NOVEL_LABEL),
        }
    }
}

/// One application: its encoded permission vector and family label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub label: FamilyLabel,
    pub vector: PermissionVector,
}

/// An immutable corpus of labeled samples sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    vocab: PermissionVocabulary,
}

impl Dataset {
    /// Validates vector lengths against the vocabulary and that no sample
    /// carries the Novel sentinel (novelty is assigned by split plans, never
    /// stored in a dataset).
    pub fn new(samples: Vec<LabeledSample>, vocab: PermissionVocabulary) -> Result<Self> {
        for sample in &samples {
            if sample.vector.len() != vocab.len() {
                return Err(Error::DimensionMismatch {
                    expected: vocab.len(),
                    got: sample.vector.len(),
                });
            }
            if sample.label.is_novel() {
                return Err(Error::Dataset(format!(
                    "sample {:?} is labeled {NOVEL_LABEL}; datasets hold known families only",
                    sample.id
                )));
            }
        }
        Ok(Self { samples, vocab })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn vocab(&self) -> &PermissionVocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimensionality P.
    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    /// Sample counts per family name, `others` included.
    pub fn family_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for sample in &self.samples {
            if let Some(name) = sample.label.family_name() {
                *counts.entry(name.to_string()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// The known families available for training: every family present except
    /// the `others` pool.
    pub fn known_families(&self) -> BTreeSet<String> {
        self.family_counts()
            .into_keys()
            .filter(|name| name != OTHERS_FAMILY)
            .collect()
    }

    /// Indices of samples labeled `others`.
    pub fn others_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label.is_others())
            .map(|(i, _)| i)
            .collect()
    }

    /// Clones the selected samples into a new dataset sharing the vocabulary.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            vocab: self.vocab.clone(),
        }
    }

    /// Re-encodes every sample against a different vocabulary (e.g. the one a
    /// model was trained with). Returns the new dataset and the total number
    /// of set permissions that the target vocabulary does not know.
    pub fn reencode(&self, vocab: &PermissionVocabulary) -> (Dataset, usize) {
        let mut ignored_total = 0;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let names: Vec<PermissionName> = (0..s.vector.len())
                    .filter(|&i| s.vector.is_set(i))
                    .map(|i| self.vocab.names()[i].clone())
                    .collect();
                let (vector, ignored) = encode(&names, vocab);
                ignored_total += ignored;
                LabeledSample {
                    id: s.id.clone(),
                    label: s.label.clone(),
                    vector,
                }
            })
            .collect();
        (
            Dataset {
                samples,
                vocab: vocab.clone(),
            },
            ignored_total,
        )
    }

    fn cache_repr(&self) -> CacheFile {
        CacheFile {
            schema_version: SCHEMA_VERSION.to_string(),
            vocab: self.vocab.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| CacheSample {
                    id: s.id.clone(),
                    label: s.label.to_string(),
                    bits: s.vector.to_base64(),
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonical cache serialization; identifies the exact
    /// corpus (bits, labels, vocabulary order).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&self.cache_repr()).expect("cache repr serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Writes the versioned JSON cache file.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(&self.cache_repr())?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file written by [`save_cache`](Self::save_cache).
    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text)?;
        check_schema_version(&file.schema_version)?;
        let dim = file.vocab.len();
        let samples = file
            .samples
            .into_iter()
            .map(|s| {
                if s.label == NOVEL_LABEL {
                    return Err(Error::Dataset(format!(
                        "sample {:?} uses the reserved label {NOVEL_LABEL}",
                        s.id
                    )));
                }
                Ok(LabeledSample {
                    id: s.id,
                    label: FamilyLabel::known(s.label),
                    vector: PermissionVector::from_base64(&s.bits, dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, file.vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    schema_version: String,
    vocab: PermissionVocabulary,
    samples: Vec<CacheSample>,
}

#[derive(Serialize, Deserialize)]
struct CacheSample {
    id: String,
    label: String,
    bits: String,
}

/// On-disk formats understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Directory of one text file per sample (`category::value` lines) plus a
    /// label CSV `id,family`.
    DrebinDir,
    /// CSV with header `label,perm_1,...` (0/1 cells) or `label,permissions`
    /// (semicolon-joined names).
    Csv,
    /// The versioned JSON cache written by [`Dataset::save_cache`].
    Cache,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drebin-dir" => Ok(DatasetFormat::DrebinDir),
            "csv" => Ok(DatasetFormat::Csv),
            "cache" => Ok(DatasetFormat::Cache),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset format {other:?} (expected drebin-dir, csv, or cache)"
            ))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::DrebinDir => "drebin-dir",
            DatasetFormat::Csv => "csv",
            DatasetFormat::Cache => "cache",
        })
    }
}

/// Loads a labeled dataset, building the vocabulary from the loaded corpus.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DatasetFormat::DrebinDir => load_drebin_dir(path),
        DatasetFormat::Csv => load_csv(path),
        DatasetFormat::Cache => Dataset::load_cache(path),
    }
}

fn validate_family_name(raw: &str, file: &str, line: usize) -> Result<String> {
    let name = raw.trim();
    if name.is_empty() {
        return Err(Error::MalformedLine {
            file: file.to_string(),
            line,
            message: "empty family label".into(),
        });
    }
    if name == NOVEL_LABEL {
        return Err(Error::MalformedLine {
            file: file.to_string(),
            line,
            message: format!("{NOVEL_LABEL} is a reserved label"),
        });
    }
    Ok(name.to_string())
}

fn load_drebin_dir(dir: &Path) -> Result<Dataset> {
    let meta = std::fs::metadata(dir).map_err(|e| Error::io(dir, e))?;
    if !meta.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            dir.display()
        )));
    }

    let feature_dir = {
        let nested = dir.join("feature_vectors");
        if nested.is_dir() {
            nested
        } else {
            dir.to_path_buf()
        }
    };

    let labels_path = find_labels_csv(dir)?;
    let labels = read_labels_csv(&labels_path)?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(&feature_dir)
        .map_err(|e| Error::io(&feature_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map_or(true, |ext| ext != "csv"))
        .collect();
    files.sort();

    let mut ids = Vec::with_capacity(files.len());
    let mut permission_sets = Vec::with_capacity(files.len());
    for file in &files {
        let id = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let mut names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (category, value) = line.split_once("::").ok_or_else(|| Error::MalformedLine {
                file: file.display().to_string(),
                line: lineno + 1,
                message: "expected `category::value`".into(),
            })?;
            if category != "permission" {
                continue;
            }
            names.push(
                PermissionName::new(value).map_err(|e| Error::MalformedLine {
                    file: file.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?,
            );
        }
        ids.push(id);
        permission_sets.push(filter_system_permissions(&names));
    }

    let vocab = build_vocabulary(&permission_sets);
    let samples = ids
        .into_iter()
        .zip(permission_sets)
        .map(|(id, names)| {
            let family = labels
                .get(&id)
                .ok_or_else(|| Error::UnlabeledSample { id: id.clone() })?;
            let (vector, _) = encode(&names, &vocab);
            Ok(LabeledSample {
                id,
                label: FamilyLabel::known(family.clone()),
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, vocab)
}

fn find_labels_csv(dir: &Path) -> Result<PathBuf> {
    let preferred = dir.join("sha256_family.csv");
    if preferred.is_file() {
        return Ok(preferred);
    }
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    candidates.sort();
    match candidates.len() {
        0 => Err(Error::Dataset(format!(
            "no label CSV found in {}",
            dir.display()
        ))),
        1 => Ok(candidates.remove(0)),
        _ => Err(Error::Dataset(format!(
            "multiple CSV files in {}; expected a single label file",
            dir.display()
        ))),
    }
}

fn read_labels_csv(path: &Path) -> Result<HashMap<String, String>> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{file}: {e}")))?;
    let mut labels = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{file}: {e}")))?;
        let line = i + 1;
        if record.len() < 2 {
            return Err(Error::MalformedLine {
                file: file.clone(),
                line,
                message: "expected `id,family`".into(),
            });
        }
        let id = record[0].trim().to_string();
        // Tolerate a header row.
        if i == 0 && matches!(id.to_ascii_lowercase().as_str(), "id" | "sha256") {
            continue;
        }
        let family = validate_family_name(&record[1], &file, line)?;
        labels.insert(id, family);
    }
    Ok(labels)
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{file}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{file}: {e}")))?
        .clone();
    if headers.is_empty() || !headers[0].trim().eq_ignore_ascii_case("label") {
        return Err(Error::MalformedLine {
            file,
            line: 1,
            message: "first column must be `label`".into(),
        });
    }

    let wide_columns: Option<Vec<PermissionName>> =
        if headers.len() == 2 && headers[1].trim() == "permissions" {
            None
        } else {
            let names = headers
                .iter()
                .skip(1)
                .map(|h| {
                    PermissionName::new(h.trim()).map_err(|e| Error::MalformedLine {
                        file: file.clone(),
                        line: 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(names)
        };

    let mut labels = Vec::new();
    let mut permission_sets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{file}: {e}")))?;
        let line = i + 2; // 1-based, after the header
        let family = validate_family_name(&record[0], &file, line)?;
        let names = match &wide_columns {
            None => {
                let cell = record.get(1).unwrap_or("");
                cell.split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        PermissionName::new(s).map_err(|e| Error::MalformedLine {
                            file: file.clone(),
                            line,
                            message: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Some(columns) => {
                if record.len() != columns.len() + 1 {
                    return Err(Error::MalformedLine {
                        file: file.clone(),
                        line,
                        message: format!(
                            "expected {} fields, found {}",
                            columns.len() + 1,
                            record.len()
                        ),
                    });
                }
                let mut names = Vec::new();
                for (j, col) in columns.iter().enumerate() {
                    match record[j + 1].trim() {
                        "0" => {}
                        "1" => names.push(col.clone()),
                        other => {
                            return Err(Error::MalformedLine {
                                file: file.clone(),
                                line,
                                message: format!("expected 0 or 1, found {other:?}"),
                            })
                        }
                    }
                }
                names
            }
        };
        labels.push(family);
        permission_sets.push(names);
    }

    let vocab = match wide_columns {
        // The declared columns are the feature space, sorted like any built
        // vocabulary, even when a column never fires.
        Some(columns) => build_vocabulary(&[columns]),
        None => build_vocabulary(&permission_sets),
    };
    let samples = labels
        .into_iter()
        .zip(permission_sets)
        .enumerate()
        .map(|(i, (family, names))| {
            let (vector, _) = encode(&names, &vocab);
            LabeledSample {
                id: format!("row{}", i + 1),
                label: FamilyLabel::known(family),
                vector,
            }
        })
        .collect();
    Dataset::new(samples, vocab)
}

/// Relabels every family with fewer than `min_count` samples as `others`.
pub fn group_rare_families(d: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count < 1 {
        return Err(Error::InvalidConfig("min_count must be >= 1".into()));
    }
    let counts = d.family_counts();
    let samples = d
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(name) = s.label.family_name() {
                if name != OTHERS_FAMILY && counts[name] < min_count {
                    s.label = FamilyLabel::known(OTHERS_FAMILY);
                }
            }
            s
        })
        .collect();
    Dataset::new(samples, d.vocab.clone())
}

/// Keeps the `k` most populous families as known and relabels the remaining
/// samples as `others`. Ties on count break lexicographically by family name.
pub fn top_k_families(d: &Dataset, k: usize) -> Result<Dataset> {
    let counts = d.family_counts();
    let mut candidates: Vec<(&String, usize)> = counts
        .iter()
        .filter(|(name, _)| name.as_str() != OTHERS_FAMILY)
        .map(|(name, &count)| (name, count))
        .collect();
    if k > candidates.len() {
        return Err(Error::InvalidConfig(format!(
            "top_k = {k} exceeds the {} available families",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep: BTreeSet<&str> = candidates[..k].iter().map(|(name, _)| name.as_str()).collect();
    let samples = d
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(name) = s.label.family_name() {
                if !keep.contains(name) {
                    s.label = FamilyLabel::known(OTHERS_FAMILY);
                }
            }
            s
        })
        .collect();
    Dataset::new(samples, d.vocab.clone())
}

/// How the calibration indices of a fold were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationSource {
    /// The training fold doubles as TT (the paper's practice; underestimates
    /// the test-time false positive rate).
    TrainingFold,
    /// A held-out TT disjoint from the samples used to fit the model.
    ExternalTt,
}

impl fmt::Display for CalibrationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationSource::TrainingFold => "training-fold",
            CalibrationSource::ExternalTt => "external-TT",
        })
    }
}

/// One train/calibrate/test split. Indices refer to the dataset the plan was
/// built from. Test samples whose family is in `novel_families` are treated
/// as Novel ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// Family held out by a leave-one-class-out iteration, if any.
    pub held_out_family: Option<String>,
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
    pub novel_families: BTreeSet<String>,
}

impl Fold {
    /// Ground-truth label of a test sample under this fold's novelty rule.
    pub fn effective_label(&self, sample: &LabeledSample) -> FamilyLabel {
        match sample.label.family_name() {
            Some(name) if self.novel_families.contains(name) => FamilyLabel::Novel,
            _ => sample.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitKind {
    KFold { k: usize, seed: u64 },
    LeaveOneClassOut { inner_k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub calibration_source: CalibrationSource,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold over the known families. `others` samples never enter a
/// training fold; they are appended to every test fold and evaluated as
/// Novel. Deterministic given the seed.
pub fn stratified_kfold(d: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    stratified_kfold_with_tt(d, k, seed, None)
}

/// As [`stratified_kfold`], optionally carving a held-out TT fraction out of
/// each training fold for threshold calibration.
pub fn stratified_kfold_with_tt(
    d: &Dataset,
    k: usize,
    seed: u64,
    tt_fraction: Option<f64>,
) -> Result<SplitPlan> {
    validate_tt_fraction(tt_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let known = d.known_families();
    if known.is_empty() {
        return Err(Error::Dataset("dataset has no known families".into()));
    }
    let novel_families: BTreeSet<String> = [OTHERS_FAMILY.to_string()].into();
    let folds = build_stratified_folds(
        d,
        &known,
        &d.others_indices(),
        &novel_families,
        None,
        k,
        tt_fraction,
        &mut rng,
    )?;
    Ok(SplitPlan {
        kind: SplitKind::KFold { k, seed },
        calibration_source: calibration_source(tt_fraction),
        folds,
    })
}

/// One iteration per known family `f`: the model trains on the remaining
/// known families (stratified k-fold within the iteration) and every sample
/// of `f` is appended to each test fold as Novel. `others` samples do not
/// participate in leave-one-class-out iterations.
pub fn leave_one_class_out(d: &Dataset, inner_k: usize, seed: u64) -> Result<SplitPlan> {
    leave_one_class_out_with_tt(d, inner_k, seed, None)
}

pub fn leave_one_class_out_with_tt(
    d: &Dataset,
    inner_k: usize,
    seed: u64,
    tt_fraction: Option<f64>,
) -> Result<SplitPlan> {
    validate_tt_fraction(tt_fraction)?;
    let known = d.known_families();
    if known.len() < 2 {
        return Err(Error::Dataset(format!(
            "leave-one-class-out needs at least 2 known families, found {}",
            known.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = Vec::new();
    for held_out in &known {
        let retained: BTreeSet<String> = known.iter().filter(|f| *f != held_out).cloned().collect();
        let novel_pool: Vec<usize> = d
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label.family_name() == Some(held_out))
            .map(|(i, _)| i)
            .collect();
        let novel_families: BTreeSet<String> = [held_out.clone()].into();
        folds.extend(build_stratified_folds(
            d,
            &retained,
            &novel_pool,
            &novel_families,
            Some(held_out.clone()),
            inner_k,
            tt_fraction,
            &mut rng,
        )?);
    }
    Ok(SplitPlan {
        kind: SplitKind::LeaveOneClassOut {
            inner_k,
            seed,
        },
        calibration_source: calibration_source(tt_fraction),
        folds,
    })
}

fn calibration_source(tt_fraction: Option<f64>) -> CalibrationSource {
    if tt_fraction.is_some() {
        CalibrationSource::ExternalTt
    } else {
        CalibrationSource::TrainingFold
    }
}

fn validate_tt_fraction(tt_fraction: Option<f64>) -> Result<()> {
    match tt_fraction {
        Some(f) if !(f > 0.0 && f < 1.0) => Err(Error::InvalidConfig(
            "tt fraction must lie strictly between 0 and 1".into(),
        )),
        _ => Ok(()),
    }
}

/// Shuffles each family once and deals its samples round-robin onto the `k`
/// folds, so per-family test counts differ by at most one across folds.
#[allow(clippy::too_many_arguments)]
fn build_stratified_folds(
    d: &Dataset,
    families: &BTreeSet<String>,
    novel_pool: &[usize],
    novel_families: &BTreeSet<String>,
    held_out_family: Option<String>,
    k: usize,
    tt_fraction: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidConfig(
            "k-fold needs k >= 2 (k = 1 is the degenerate whole-set split)".into(),
        ));
    }

    let mut per_family_test: Vec<Vec<Vec<usize>>> = Vec::new(); // family -> fold -> indices
    let mut family_members: Vec<Vec<usize>> = Vec::new();
    for family in families {
        let mut members: Vec<usize> = d
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label.family_name() == Some(family))
            .map(|(i, _)| i)
            .collect();
        if members.len() < k {
            return Err(Error::FamilyTooSmall {
                family: family.clone(),
                count: members.len(),
                k,
            });
        }
        members.shuffle(rng);
        let mut fold_assignment = vec![Vec::new(); k];
        for (j, idx) in members.iter().enumerate() {
            fold_assignment[j % k].push(*idx);
        }
        per_family_test.push(fold_assignment);
        family_members.push(members);
    }

    let mut sorted_novel_pool = novel_pool.to_vec();
    sorted_novel_pool.sort_unstable();

    let mut folds = Vec::with_capacity(k);
    for fold_index in 0..k {
        let mut test: Vec<usize> = per_family_test
            .iter()
            .flat_map(|assignment| assignment[fold_index].iter().copied())
            .collect();
        test.sort_unstable();
        let mut train: Vec<usize> = family_members
            .iter()
            .flatten()
            .copied()
            .filter(|idx| test.binary_search(idx).is_err())
            .collect();
        train.sort_unstable();
        test.extend(&sorted_novel_pool);

        let (train, calibration) = match tt_fraction {
            None => (train.clone(), train),
            Some(fraction) => carve_tt(d, train, fraction, rng)?,
        };

        folds.push(Fold {
            held_out_family: held_out_family.clone(),
            fold_index,
            train,
            calibration,
            test,
            novel_families: novel_families.clone(),
        });
    }
    Ok(folds)
}

/// Splits a training fold into (fit, TT) parts, stratified per family.
fn carve_tt(
    d: &Dataset,
    train: Vec<usize>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_family: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &idx in &train {
        let name = d.samples[idx]
            .label
            .family_name()
            .expect("training folds hold known families");
        per_family.entry(name).or_default().push(idx);
    }
    let mut fit = Vec::new();
    let mut tt = Vec::new();
    for (_, mut members) in per_family {
        members.shuffle(rng);
        let take = ((members.len() as f64) * fraction).floor() as usize;
        let take = take.min(members.len().saturating_sub(1)); // keep at least one to fit on
        tt.extend(members.drain(..take));
        fit.extend(members);
    }
    if tt.is_empty() {
        return Err(Error::InvalidConfig(
            "tt fraction too small: no calibration samples were carved out".into(),
        ));
    }
    fit.sort_unstable();
    tt.sort_unstable();
    Ok((fit, tt))
}
