//! Dataset ingestion, normalization and a synthetic multityped corpus.
//!
//! On disk a dataset is a JSON manifest next to one headerless CSV file per
//! view and one JSON-lines file per target. Paths in the manifest are
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::heads::{TaskKind, TaskTarget};
use crate::math::{sigmoid, softmax};
use crate::rbm::UnitType;
use crate::FORMAT;

/// One typed feature block, `instances × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub unit_type: UnitType,
    pub data: Array2<f64>,
}

/// One supervised outcome per instance, `None` where absent.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetColumn {
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub values: Vec<Option<TaskTarget>>,
}

impl TargetColumn {
    pub fn select(&self, rows: &[usize]) -> Vec<Option<TaskTarget>> {
        rows.iter().map(|&r| self.values[r].clone()).collect()
    }

    /// Label sets of a multilabel column; absent rows give empty sets.
    pub fn label_sets(&self, rows: &[usize]) -> Result<Vec<Vec<usize>>> {
        if self.kind != TaskKind::Multilabel {
            return Err(Error::Config(format!(
                "target `{}` is {}, not multilabel",
                self.name, self.kind
            )));
        }
        Ok(rows
            .iter()
            .map(|&r| match &self.values[r] {
                Some(TaskTarget::Labels(ls)) => ls.clone(),
                _ => Vec::new(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    #[serde(default)]
    pub calibrate: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instance_count: usize,
    pub views: Vec<View>,
    pub targets: Vec<TargetColumn>,
    pub splits: Splits,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instance_count
    }

    pub fn is_empty(&self) -> bool {
        self.instance_count == 0
    }

    pub fn view(&self, name: &str) -> Option<&View> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn target(&self, name: &str) -> Option<&TargetColumn> {
        self.targets.iter().find(|t| t.name == name)
    }

    /// The given rows, in the given order, with empty splits.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.instance_count) {
            return Err(Error::Contract(format!(
                "row {bad} out of range for {} instances",
                self.instance_count
            )));
        }
        Ok(Dataset {
            instance_count: rows.len(),
            views: self
                .views
                .iter()
                .map(|v| View {
                    name: v.name.clone(),
                    unit_type: v.unit_type,
                    data: v.data.select(Axis(0), rows),
                })
                .collect(),
            targets: self
                .targets
                .iter()
                .map(|t| TargetColumn {
                    values: t.select(rows),
                    ..t.clone()
                })
                .collect(),
            splits: Splits::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for view in &self.views {
            if !names.insert(view.name.as_str()) {
                return Err(Error::Config(format!("view `{}` declared twice", view.name)));
            }
            if view.data.nrows() != self.instance_count {
                return Err(Error::dim("view rows", self.instance_count, view.data.nrows()));
            }
        }
        let mut names = HashSet::new();
        for target in &self.targets {
            if !names.insert(target.name.as_str()) {
                return Err(Error::Config(format!("target `{}` declared twice", target.name)));
            }
            if target.values.len() != self.instance_count {
                return Err(Error::dim("target rows", self.instance_count, target.values.len()));
            }
        }
        let s = &self.splits;
        for &r in s.train.iter().chain(&s.calibrate).chain(&s.test) {
            if r >= self.instance_count {
                return Err(Error::Config(format!("split index {r} out of range")));
            }
        }
        Ok(())
    }
}

/// The JSON manifest describing a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub instance_count: usize,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub targets: Vec<TargetEntry>,
    #[serde(default)]
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub name: String,
    pub unit_type: UnitType,
    pub dim: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub name: String,
    /// Kept as text so an unknown kind can be reported with its file.
    pub kind: String,
    #[serde(default)]
    pub labels: Vec<String>,
    pub path: PathBuf,
}

fn data_error(path: &Path, row: usize, detail: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        row,
        detail: detail.into(),
    }
}

/// Reads a manifest and every file it names. Row numbers in errors are
/// 1-based lines of the offending file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| data_error(manifest_path, e.line(), e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(data_error(
            manifest_path,
            0,
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let n = manifest.instance_count;

    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let data = read_view(&base.join(&entry.path), entry.unit_type, entry.dim, n)?;
        views.push(View {
            name: entry.name.clone(),
            unit_type: entry.unit_type,
            data,
        });
    }

    let mut targets = Vec::with_capacity(manifest.targets.len());
    for entry in &manifest.targets {
        let kind: TaskKind = entry
            .kind
            .parse()
            .map_err(|e: Error| data_error(manifest_path, 0, format!("target `{}`: {e}", entry.name)))?;
        let path = base.join(&entry.path);
        let values = read_targets(&path, kind, &entry.labels, n)?;
        targets.push(TargetColumn {
            name: entry.name.clone(),
            kind,
            labels: entry.labels.clone(),
            values,
        });
    }

    let dataset = Dataset {
        instance_count: n,
        views,
        targets,
        splits: manifest.splits,
    };
    dataset
        .validate()
        .map_err(|e| data_error(manifest_path, 0, e.to_string()))?;
    Ok(dataset)
}

fn read_view(path: &Path, unit_type: UnitType, dim: usize, rows: usize) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| data_error(path, 0, e.to_string()))?;
    let mut values = Vec::with_capacity(rows * dim);
    let mut count = 0;
    for (r, record) in reader.records().enumerate() {
        let line = r + 1;
        let record = record.map_err(|e| data_error(path, line, e.to_string()))?;
        if record.len() != dim {
            return Err(data_error(
                path,
                line,
                format!("expected {dim} columns, found {}", record.len()),
            ));
        }
        for (c, field) in record.iter().enumerate() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| data_error(path, line, format!("column {}: `{field}` is not a number", c + 1)))?;
            if !unit_type.admits(x) {
                return Err(data_error(
                    path,
                    line,
                    format!("column {}: {x} is not a valid {unit_type} value", c + 1),
                ));
            }
            values.push(x);
        }
        count += 1;
    }
    if count != rows {
        return Err(data_error(path, count, format!("expected {rows} rows, found {count}")));
    }
    Array2::from_shape_vec((rows, dim), values).map_err(|e| data_error(path, 0, e.to_string()))
}

fn label_position(labels: &[String], name: &Value) -> std::result::Result<usize, String> {
    let name = name.as_str().ok_or_else(|| format!("label {name} is not a string"))?;
    labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| format!("undeclared label `{name}`"))
}

fn label_list(labels: &[String], value: Option<&Value>) -> std::result::Result<Vec<usize>, String> {
    let items = value.and_then(Value::as_array).ok_or("expected a list of labels")?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let l = label_position(labels, item)?;
        if out.contains(&l) {
            return Err(format!("label `{}` repeated", labels[l]));
        }
        out.push(l);
    }
    Ok(out)
}

fn parse_target(kind: TaskKind, labels: &[String], line: &Value) -> std::result::Result<TaskTarget, String> {
    let field = |key: &str| line.get(key);
    Ok(match kind {
        TaskKind::Regression => {
            let y = field("value")
                .and_then(Value::as_f64)
                .ok_or("expected numeric `value`")?;
            TaskTarget::Real(y)
        }
        TaskKind::Logistic => match field("label").and_then(Value::as_i64) {
            Some(1) => TaskTarget::Sign(1.0),
            Some(-1) => TaskTarget::Sign(-1.0),
            _ => return Err("expected `label` of 1 or -1".into()),
        },
        TaskKind::Poisson => TaskTarget::Count(
            field("count")
                .and_then(Value::as_u64)
                .ok_or("expected nonnegative integer `count`")?,
        ),
        TaskKind::Multiclass => TaskTarget::Class(label_position(labels, field("label").ok_or("missing `label`")?)?),
        TaskKind::Ranking => TaskTarget::Ranking(label_list(labels, field("ranking"))?),
        TaskKind::Multilabel => TaskTarget::Labels(label_list(labels, field("labels"))?),
    })
}

fn read_targets(path: &Path, kind: TaskKind, labels: &[String], rows: usize) -> Result<Vec<Option<TaskTarget>>> {
    if kind.is_structured() && labels.len() < 2 && kind != TaskKind::Multilabel {
        return Err(data_error(path, 0, format!("{kind} target needs at least two labels")));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = vec![None; rows];
    for (r, line) in BufReader::new(file).lines().enumerate() {
        let row = r + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value = serde_json::from_str(&line).map_err(|e| data_error(path, row, e.to_string()))?;
        let id = obj
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| data_error(path, row, "missing integer `id`"))? as usize;
        if id >= rows {
            return Err(data_error(
                path,
                row,
                format!("id {id} out of range for {rows} instances"),
            ));
        }
        let line_kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| data_error(path, row, "missing `kind`"))?;
        let line_kind: TaskKind = line_kind
            .parse()
            .map_err(|e: Error| data_error(path, row, e.to_string()))?;
        if line_kind != kind {
            return Err(data_error(path, row, format!("{line_kind} entry in a {kind} target")));
        }
        let target = parse_target(kind, labels, &obj).map_err(|d| data_error(path, row, d))?;
        if values[id].replace(target).is_some() {
            return Err(data_error(path, row, format!("id {id} repeated")));
        }
    }
    Ok(values)
}

fn target_payload(target: &TaskTarget, labels: &[String]) -> Value {
    let names = |ls: &[usize]| ls.iter().map(|&l| labels[l].clone()).collect::<Vec<_>>();
    match target {
        TaskTarget::Real(y) => json!({ "value": y }),
        TaskTarget::Sign(y) => json!({ "label": *y as i64 }),
        TaskTarget::Count(y) => json!({ "count": y }),
        TaskTarget::Class(l) => json!({ "label": labels[*l] }),
        TaskTarget::Ranking(ls) => json!({ "ranking": names(ls) }),
        TaskTarget::Labels(ls) => json!({ "labels": names(ls) }),
    }
}

/// Writes `dataset` as `manifest.json` plus one file per view and target
/// under `dir`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest {
        format: FORMAT.into(),
        instance_count: dataset.instance_count,
        views: Vec::new(),
        targets: Vec::new(),
        splits: dataset.splits.clone(),
    };
    for view in &dataset.views {
        let file = PathBuf::from(format!("view_{}.csv", view.name));
        let path = dir.join(&file);
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| data_error(&path, 0, e.to_string()))?;
        for row in view.data.rows() {
            writer
                .write_record(row.iter().map(|x| x.to_string()))
                .map_err(|e| data_error(&path, 0, e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
        manifest.views.push(ViewEntry {
            name: view.name.clone(),
            unit_type: view.unit_type,
            dim: view.data.ncols(),
            path: file,
        });
    }
    for target in &dataset.targets {
        let file = PathBuf::from(format!("target_{}.jsonl", target.name));
        let path = dir.join(&file);
        let handle = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(handle);
        for (id, value) in target.values.iter().enumerate() {
            let Some(value) = value else { continue };
            let mut obj = target_payload(value, &target.labels);
            obj["id"] = json!(id);
            obj["kind"] = json!(target.kind.as_str());
            writeln!(out, "{obj}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        manifest.targets.push(TargetEntry {
            name: target.name.clone(),
            kind: target.kind.as_str().into(),
            labels: target.labels.clone(),
            path: file,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Scales each row to unit L2 norm; zero rows stay zero.
pub fn unit_normalize_rows(data: &Array2<f64>) -> Array2<f64> {
    let mut out = data.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Train-split statistics of a real view after the unit-norm stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub view: String,
    pub recipe: String,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Dimensions with zero train variance, given std 1.
    pub constant_dims: Vec<usize>,
}

pub const REAL_RECIPE: &str = "unit-l2+zscore";

impl NormalizationStats {
    /// Population mean and standard deviation of `rows`.
    pub fn fit(view: &str, data: &Array2<f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract(format!("no training rows to fit view `{view}`")));
        }
        let train = data.select(Axis(0), rows);
        let mean = train.mean_axis(Axis(0)).expect("rows are nonempty");
        let mut std = train.std_axis(Axis(0), 0.0);
        let mut constant_dims = Vec::new();
        for (d, s) in std.iter_mut().enumerate() {
            if *s <= 0.0 || !s.is_finite() {
                *s = 1.0;
                constant_dims.push(d);
            }
        }
        Ok(NormalizationStats {
            view: view.into(),
            recipe: REAL_RECIPE.into(),
            mean,
            std,
            constant_dims,
        })
    }

    pub fn apply(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::dim("normalized view", self.mean.len(), data.ncols()));
        }
        Ok((data - &self.mean) / &self.std)
    }
}

/// Unit L2 norm per row, then a z-score with train statistics. When
/// `stats` is given it is reused instead of being fitted on `train`.
pub fn normalize_real_view(
    view: &View,
    train: &[usize],
    stats: Option<&NormalizationStats>,
) -> Result<(View, NormalizationStats)> {
    if view.unit_type != UnitType::Real {
        return Err(Error::Config(format!(
            "view `{}` is {}, not real",
            view.name, view.unit_type
        )));
    }
    let unit = unit_normalize_rows(&view.data);
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormalizationStats::fit(&view.name, &unit, train)?,
    };
    let data = stats.apply(&unit)?;
    Ok((
        View {
            name: view.name.clone(),
            unit_type: UnitType::Real,
            data,
        },
        stats,
    ))
}

/// How `log(1 + c)` is brought back to the count domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountRounding {
    #[default]
    Round,
    Floor,
    /// Keep `log(1 + c)` unrounded; the view becomes real-valued.
    Identity,
}

/// Maps every count `c` to `log(1 + c)`, rounded per `mode`.
pub fn transform_counts(view: &View, mode: CountRounding) -> Result<View> {
    if view.unit_type != UnitType::Count {
        return Err(Error::Config(format!(
            "view `{}` is {}, not count",
            view.name, view.unit_type
        )));
    }
    let log = view.data.mapv(f64::ln_1p);
    let (unit_type, data) = match mode {
        CountRounding::Round => (UnitType::Count, log.mapv_into(f64::round)),
        CountRounding::Floor => (UnitType::Count, log.mapv_into(f64::floor)),
        CountRounding::Identity => (UnitType::Real, log),
    };
    Ok(View {
        name: view.name.clone(),
        unit_type,
        data,
    })
}

/// Parameters of the planted-cluster corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub real_dim: usize,
    pub count_dim: usize,
    pub binary_dim: usize,
    /// Std of the Gaussian noise around a real prototype.
    pub real_noise: f64,
    /// Spread of the prototypes themselves.
    pub separation: f64,
    /// Mixing weight toward uniform word rates.
    pub count_noise: f64,
    pub doc_length: f64,
    /// Mixing weight toward a fair coin.
    pub binary_noise: f64,
    /// Extra columns per view that carry no cluster signal: Gaussian with
    /// the real noise std, Poisson words at the mean informative rate, and
    /// fair coins.
    pub nuisance_dims: usize,
    pub train_fraction: f64,
    pub calibrate_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 4,
            per_cluster: 50,
            real_dim: 10,
            count_dim: 16,
            binary_dim: 12,
            real_noise: 1.0,
            separation: 1.0,
            count_noise: 0.5,
            doc_length: 20.0,
            binary_noise: 0.5,
            nuisance_dims: 0,
            train_fraction: 0.6,
            calibrate_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.clusters == 0 || self.per_cluster == 0 {
            return bad("needs at least one cluster and one instance per cluster");
        }
        if self.real_dim == 0 || self.count_dim == 0 || self.binary_dim == 0 {
            return bad("view dimensions must be positive");
        }
        if !(self.real_noise >= 0.0 && self.separation >= 0.0 && self.doc_length > 0.0) {
            return bad("noise, separation and document length must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.count_noise) || !(0.0..=1.0).contains(&self.binary_noise) {
            return bad("mixing weights must lie in [0, 1]");
        }
        let (t, c) = (self.train_fraction, self.calibrate_fraction);
        if !(t > 0.0 && c >= 0.0 && t + c <= 1.0) {
            return bad("split fractions must be nonnegative, with a nonempty train split, summing to at most 1");
        }
        Ok(())
    }
}

/// Cluster of each row of a generated corpus.
pub fn synthetic_cluster(spec: &SyntheticSpec, row: usize) -> usize {
    row / spec.per_cluster
}

/// A corpus of `C` planted clusters with a real, a count and a binary view.
///
/// Targets: `concepts` (multilabel, exactly the cluster's concept), `tags`
/// (multilabel, each of the cluster's two tags with probability 0.8 and any
/// other tag with probability 0.05) and `groups` (partial ranking of the two
/// clusters whose real prototypes lie nearest the instance).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c_count = spec.clusters;
    let n = c_count * spec.per_cluster;
    let proto = Normal::new(0.0, spec.separation).expect("separation validated");
    let noise = Normal::new(0.0, spec.real_noise).expect("noise validated");

    let real_protos = Array2::from_shape_simple_fn((c_count, spec.real_dim), || proto.sample(&mut rng));
    let rate_protos: Vec<Array1<f64>> = (0..c_count)
        .map(|_| {
            let logits = Array1::from_shape_simple_fn(spec.count_dim, || 2.0 * proto.sample(&mut rng));
            let uniform = 1.0 / spec.count_dim as f64;
            softmax(logits.view())
                .mapv(|p| spec.doc_length * ((1.0 - spec.count_noise) * p + spec.count_noise * uniform))
        })
        .collect();
    let bit_protos: Vec<Array1<f64>> = (0..c_count)
        .map(|_| {
            Array1::from_shape_simple_fn(spec.binary_dim, || {
                let p = sigmoid(3.0 * proto.sample(&mut rng));
                (1.0 - spec.binary_noise) * p + spec.binary_noise * 0.5
            })
        })
        .collect();

    let extra = spec.nuisance_dims;
    let nuisance_rate = spec.doc_length / spec.count_dim as f64;
    let mut real = Array2::zeros((n, spec.real_dim + extra));
    let mut counts = Array2::zeros((n, spec.count_dim + extra));
    let mut bits = Array2::zeros((n, spec.binary_dim + extra));
    for r in 0..n {
        let c = synthetic_cluster(spec, r);
        for d in 0..spec.real_dim {
            real[[r, d]] = real_protos[[c, d]] + noise.sample(&mut rng);
        }
        for (d, &rate) in rate_protos[c].iter().enumerate() {
            counts[[r, d]] = if rate > 0.0 {
                Poisson::new(rate).expect("rate is positive").sample(&mut rng)
            } else {
                0.0
            };
        }
        for (d, &p) in bit_protos[c].iter().enumerate() {
            bits[[r, d]] = f64::from(rng.random_bool(p));
        }
        for d in 0..extra {
            real[[r, spec.real_dim + d]] = noise.sample(&mut rng);
            counts[[r, spec.count_dim + d]] = Poisson::new(nuisance_rate).expect("rate is positive").sample(&mut rng);
            bits[[r, spec.binary_dim + d]] = f64::from(rng.random_bool(0.5));
        }
    }

    let concept_labels: Vec<String> = (0..c_count).map(|c| format!("concept_{c}")).collect();
    let concepts = (0..n)
        .map(|r| Some(TaskTarget::Labels(vec![synthetic_cluster(spec, r)])))
        .collect();

    let n_tags = 2 * c_count;
    let tag_labels: Vec<String> = (0..n_tags).map(|t| format!("tag_{t}")).collect();
    let tags = (0..n)
        .map(|r| {
            let c = synthetic_cluster(spec, r);
            let set: Vec<usize> = (0..n_tags)
                .filter(|&t| rng.random_bool(if t / 2 == c { 0.8 } else { 0.05 }))
                .collect();
            Some(TaskTarget::Labels(set))
        })
        .collect();

    let group_labels: Vec<String> = (0..c_count).map(|c| format!("group_{c}")).collect();
    let groups = (0..n)
        .map(|r| {
            let dist = |c: usize| {
                let diff = &real.slice(ndarray::s![r, ..spec.real_dim]) - &real_protos.row(c);
                diff.dot(&diff)
            };
            let mut order: Vec<usize> = (0..c_count).collect();
            order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)));
            order.truncate(2.min(c_count));
            Some(TaskTarget::Ranking(order))
        })
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let n_train = ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n);
    let n_cal = ((n as f64 * spec.calibrate_fraction).round() as usize).min(n - n_train);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&perm[..n_train]),
        calibrate: sorted(&perm[n_train..n_train + n_cal]),
        test: sorted(&perm[n_train + n_cal..]),
    };

    let mut targets = vec![TargetColumn {
        name: "concepts".into(),
        kind: TaskKind::Multilabel,
        labels: concept_labels,
        values: concepts,
    }];
    targets.push(TargetColumn {
        name: "tags".into(),
        kind: TaskKind::Multilabel,
        labels: tag_labels,
        values: tags,
    });
    if c_count >= 2 {
        targets.push(TargetColumn {
            name: "groups".into(),
            kind: TaskKind::Ranking,
            labels: group_labels,
            values: groups,
        });
    }

    let dataset = Dataset {
        instance_count: n,
        views: vec![
            View {
                name: "real".into(),
                unit_type: UnitType::Real,
                data: real,
            },
            View {
                name: "count".into(),
                unit_type: UnitType::Count,
                data: counts,
            },
            View {
                name: "binary".into(),
                unit_type: UnitType::Binary,
                data: bits,
            },
        ],
        targets,
        splits,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            per_cluster: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unsupervised_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.targets.clear();
        let back = load_dataset(&write_dataset(&ds, dir.path()).unwrap()).unwrap();
        assert!(back.targets.is_empty());
        assert_eq!(back.views.len(), 3);
    }

    #[test]
    fn negative_count_names_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("view_count.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[2].split(',').collect();
        fields[0] = "-1";
        lines[2] = fields.join(",");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_dataset(&manifest) {
            Err(Error::Data { path: p, row, .. }) => {
                assert_eq!(p, path);
                assert_eq!(row, 3);
            }
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn row_count_mismatch_and_unknown_kind_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("view_real.csv");
        let text = fs::read_to_string(&path).unwrap();
        let short: Vec<&str> = text.lines().skip(1).collect();
        fs::write(&path, short.join("\n") + "\n").unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("view_real.csv"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"ranking\"", "\"ordinal\"");
        fs::write(&manifest, text).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("ordinal"), "{err}");
    }

    #[test]
    fn generated_dims_match_spec() {
        let spec = SyntheticSpec::default();
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 200);
        let dims: Vec<usize> = ds.views.iter().map(|v| v.data.ncols()).collect();
        assert_eq!(dims, vec![spec.real_dim, spec.count_dim, spec.binary_dim]);
        let s = &ds.splits;
        assert_eq!(s.train.len() + s.calibrate.len() + s.test.len(), 200);
        assert_eq!(s.train.len(), 120);
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(
            other.views[0].data,
            generate_synthetic(&SyntheticSpec::default()).unwrap().views[0].data
        );
    }

    #[test]
    fn zero_noise_rows_repeat_within_cluster() {
        let spec = SyntheticSpec {
            real_noise: 0.0,
            per_cluster: 6,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let real = &ds.views[0].data;
        for r in 0..ds.len() {
            let first = synthetic_cluster(&spec, r) * spec.per_cluster;
            assert_eq!(real.row(r), real.row(first));
        }
    }

    #[test]
    fn single_cluster_shares_labels() {
        let ds = generate_synthetic(&SyntheticSpec {
            clusters: 1,
            ..Default::default()
        })
        .unwrap();
        let concepts = ds.target("concepts").unwrap();
        assert!(concepts.values.iter().all(|v| v == &Some(TaskTarget::Labels(vec![0]))));
        assert!(ds.target("groups").is_none());
    }

    #[test]
    fn unit_stage_hand_value() {
        let view = View {
            name: "h".into(),
            unit_type: UnitType::Real,
            data: array![[3.0, 4.0], [0.0, 0.0]],
        };
        let unit = unit_normalize_rows(&view.data);
        assert_eq!(unit, array![[0.6, 0.8], [0.0, 0.0]]);
    }

    #[test]
    fn identical_train_rows_normalize_to_zero() {
        let view = View {
            name: "h".into(),
            unit_type: UnitType::Real,
            data: Array2::from_elem((5, 3), 2.0),
        };
        let (out, stats) = normalize_real_view(&view, &[0, 1, 2, 3, 4], None).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
        assert_eq!(stats.std, Array1::from_elem(3, 1.0));
        assert_eq!(stats.constant_dims, vec![0, 1, 2]);
    }

    #[test]
    fn refitting_normalized_data_gives_standard_stats() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let train = ds.splits.train.clone();
        let (out, _) = normalize_real_view(&ds.views[0], &train, None).unwrap();
        let refit = NormalizationStats::fit("real", &out.data, &train).unwrap();
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-9));
        assert!(refit.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn stats_ignore_non_train_rows() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let view = &ds.views[0];
        let (_, stats) = normalize_real_view(view, &ds.splits.train, None).unwrap();
        let mut shuffled = view.clone();
        let test = &ds.splits.test;
        for (i, &r) in test.iter().enumerate() {
            let src = test[(i + 1) % test.len()];
            shuffled.data.row_mut(r).assign(&view.data.row(src));
        }
        let (_, again) = normalize_real_view(&shuffled, &ds.splits.train, None).unwrap();
        assert_eq!(stats, again);
    }

    #[test]
    fn count_transform_hand_values() {
        let view = View {
            name: "w".into(),
            unit_type: UnitType::Count,
            data: array![[0.0, 1.0, 100.0]],
        };
        let round = transform_counts(&view, CountRounding::Round).unwrap();
        assert_eq!(round.data, array![[0.0, 1.0, 5.0]]);
        assert_eq!(round.unit_type, UnitType::Count);
        let floor = transform_counts(&view, CountRounding::Floor).unwrap();
        assert_eq!(floor.data, array![[0.0, 0.0, 4.0]]);
        let raw = transform_counts(&view, CountRounding::Identity).unwrap();
        assert_eq!(raw.unit_type, UnitType::Real);
        assert!((raw.data[[0, 2]] - 101f64.ln()).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn count_transform_stays_in_domain(counts in proptest::collection::vec(0u32..100_000, 1..20)) {
            let n = counts.len();
            let view = View {
                name: "w".into(),
                unit_type: UnitType::Count,
                data: Array2::from_shape_vec((1, n), counts.into_iter().map(f64::from).collect()).unwrap(),
            };
            for mode in [CountRounding::Round, CountRounding::Floor] {
                let out = transform_counts(&view, mode).unwrap();
                proptest::prop_assert!(out.data.iter().all(|&x| UnitType::Count.admits(x)));
            }
        }
    }
}
