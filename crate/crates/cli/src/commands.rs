//! One function per subcommand. Outputs are plain files under `out`, named
//! after the command; nothing time-dependent is ever written.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use mtdbn::data::{
    generate_synthetic, load_dataset, normalize_real_view, transform_counts, write_dataset, NormalizationStats,
    SyntheticSpec,
};
use mtdbn::finetune::{finetune, LossTrace, TrainingSet};
use mtdbn::heads::{calibrate_threshold, predict};
use mtdbn::metrics::{concat_baseline_embed, evaluate_retrieval, multilabel_metrics, KnnMultilabel};
use mtdbn::stack::{embed_corpus, pretrain, PretrainTraces};
use mtdbn::{Dataset, DeepNet, EvalReport, RelevanceJudge, TaskHead, TaskKind, UnitType, ViewSpec};
use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const PRETRAINED: &str = "pretrained.mtdbn";
pub const FINETUNED: &str = "finetuned.mtdbn";

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| data_err(path, e))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "input".into(), |n| n.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct RunMetadata {
    command: String,
    config_sha256: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// Writes `run_<tag>.json` describing one command invocation.
fn write_metadata(
    cfg: &RunConfig,
    out: &Path,
    tag: &str,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<PathBuf, CliError> {
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(file_name(p), sha256_file(p)?);
    }
    let meta = RunMetadata {
        command: tag.into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        versions: BTreeMap::from([("mtdbn", env!("CARGO_PKG_VERSION")), ("format", mtdbn::FORMAT)]),
        inputs: input_hashes,
        outputs: outputs.iter().map(|p| file_name(p)).collect(),
    };
    let path = out.join(format!("run_{tag}.json"));
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// The raw dataset and its preprocessed copy.
pub struct Prepared {
    pub raw: Dataset,
    pub data: Dataset,
    pub stats: Vec<NormalizationStats>,
}

/// Loads the configured dataset and applies the preprocessing recipe with
/// statistics from the train split.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let raw = load_dataset(&cfg.dataset_path())?;
    cfg.check_against(&raw)?;
    if raw.splits.train.is_empty() {
        return Err(CliError::Data("dataset has an empty train split".into()));
    }
    let mut data = raw.clone();
    let mut stats = Vec::new();
    for view in &mut data.views {
        match view.unit_type {
            UnitType::Real if cfg.preprocess.normalize_real => {
                let (normalized, s) = normalize_real_view(view, &raw.splits.train, None)?;
                *view = normalized;
                stats.push(s);
            }
            UnitType::Count => {
                if let Some(mode) = cfg.preprocess.count_rounding {
                    *view = transform_counts(view, mode)?;
                }
            }
            _ => {}
        }
    }
    Ok(Prepared { raw, data, stats })
}

fn view_specs(cfg: &RunConfig, data: &Dataset) -> Result<Vec<ViewSpec>, CliError> {
    cfg.architecture
        .views
        .iter()
        .map(|arch| {
            let view = data
                .view(&arch.name)
                .ok_or_else(|| CliError::Config(format!("unknown view `{}`", arch.name)))?;
            Ok(ViewSpec {
                name: arch.name.clone(),
                unit_type: view.unit_type,
                dim: view.data.ncols(),
                hidden: arch.hidden,
            })
        })
        .collect()
}

fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,reconstruction_error\n");
    for (e, x) in trace.iter().enumerate() {
        out.push_str(&format!("{e},{x}\n"));
    }
    out
}

pub struct PretrainOutput {
    pub net_path: PathBuf,
    pub traces: PretrainTraces,
}

/// Layerwise unsupervised pretraining on the train split.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutput, CliError> {
    let prepared = prepare(cfg)?;
    let specs = view_specs(cfg, &prepared.data)?;
    let train = prepared.data.subset(&prepared.data.splits.train)?;
    let view_cfgs: Vec<_> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| cfg.view_cd_config(i, s.unit_type))
        .collect();
    let (net, traces) = pretrain(
        &train,
        &specs,
        &view_cfgs,
        cfg.architecture.top_hidden,
        &cfg.joint_cd_config(),
    )?;

    let net_path = out.join(PRETRAINED);
    write_file(&net_path, &net.to_bytes()?)?;
    let stats_path = out.join("normalization.json");
    let stats = serde_json::to_string_pretty(&prepared.stats).expect("stats serialize") + "\n";
    write_file(&stats_path, stats.as_bytes())?;
    let mut outputs = vec![net_path.clone(), stats_path];
    for (name, trace) in &traces.views {
        let p = out.join(format!("trace_pretrain_{name}.csv"));
        write_file(&p, trace_csv(trace).as_bytes())?;
        outputs.push(p);
    }
    let p = out.join("trace_pretrain_joint.csv");
    write_file(&p, trace_csv(&traces.joint).as_bytes())?;
    outputs.push(p);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_metadata(cfg, out, "pretrain", &[&cfg.dataset_path()], &refs)?;
    Ok(PretrainOutput { net_path, traces })
}

fn load_net(path: &Path) -> Result<DeepNet, CliError> {
    DeepNet::load(path).map_err(CliError::from)
}

pub struct FinetuneOutput {
    pub net_path: PathBuf,
    pub trace: LossTrace,
    pub thresholds: BTreeMap<String, f64>,
}

/// Attaches the declared heads, fine-tunes on the train split and
/// calibrates multilabel thresholds on the calibrate split (the train
/// split when no calibrate rows exist).
pub fn cmd_finetune(cfg: &RunConfig, net_path: &Path, out: &Path) -> Result<FinetuneOutput, CliError> {
    let prepared = prepare(cfg)?;
    let data = &prepared.data;
    let mut net = load_net(net_path)?;
    for decl in &cfg.heads {
        let target = data.target(decl.target_name()).expect("checked against the dataset");
        if let Some(existing) = net.head_mut(&decl.name) {
            existing.auxiliary = decl.auxiliary;
            continue;
        }
        let mut head = TaskHead::new(decl.name.clone(), target.kind, target.labels.clone(), net.top_dim())?;
        head.task_weight = decl.weight;
        head.auxiliary = decl.auxiliary;
        net.heads.push(head);
    }
    net.validate()?;
    let bindings: Vec<Option<&str>> = net
        .heads
        .iter()
        .map(|h| cfg.heads.iter().find(|d| d.name == h.name).map(|d| d.target_name()))
        .collect();
    let set = TrainingSet::from_dataset(&net, data, &data.splits.train, &bindings)?;
    let result = finetune(&net, &set, &cfg.finetune_config())?;
    let mut net = result.net;

    let cal_rows = if data.splits.calibrate.is_empty() {
        &data.splits.train
    } else {
        &data.splits.calibrate
    };
    let features = embed_corpus(&net, &data.subset(cal_rows)?)?;
    let mut thresholds = BTreeMap::new();
    for (i, binding) in bindings.iter().enumerate() {
        let (Some(target), TaskKind::Multilabel) = (binding, net.heads[i].kind) else {
            continue;
        };
        let column = data.target(target).expect("bound above");
        let keep: Vec<usize> = (0..cal_rows.len())
            .filter(|&j| column.values[cal_rows[j]].is_some())
            .collect();
        let truth = column.label_sets(&keep.iter().map(|&j| cal_rows[j]).collect::<Vec<_>>())?;
        let rows = features.select(Axis(0), &keep);
        match calibrate_threshold(&mut net.heads[i], rows.view(), &truth) {
            Ok(tau) => {
                thresholds.insert(net.heads[i].name.clone(), tau);
            }
            // An auxiliary head may lack positives on the calibration rows;
            // it is never used for prediction, so it stays uncalibrated.
            Err(_) if net.heads[i].auxiliary => {}
            Err(e) => return Err(e.into()),
        }
    }

    let out_net = out.join(FINETUNED);
    write_file(&out_net, &net.to_bytes()?)?;
    let trace_path = out.join("trace_finetune.csv");
    write_file(&trace_path, result.trace.to_csv().as_bytes())?;
    let thr_path = out.join("thresholds.json");
    write_file(
        &thr_path,
        (serde_json::to_string_pretty(&thresholds).expect("map serializes") + "\n").as_bytes(),
    )?;
    write_metadata(
        cfg,
        out,
        "finetune",
        &[&cfg.dataset_path(), net_path],
        &[&out_net, &trace_path, &thr_path],
    )?;
    Ok(FinetuneOutput {
        net_path: out_net,
        trace: result.trace,
        thresholds,
    })
}

/// Unit-norm concatenation of the raw configured views.
pub fn baseline_embeddings(cfg: &RunConfig, raw: &Dataset) -> Result<Array2<f64>, CliError> {
    let views: Vec<ArrayView2<f64>> = cfg
        .architecture
        .views
        .iter()
        .map(|a| raw.view(&a.name).expect("checked against the dataset").data.view())
        .collect();
    Ok(concat_baseline_embed(&views)?)
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.rows() {
        w.write_record(row.iter().map(f64::to_string))
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8")
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(path, format!("row {}: {e}", r + 1)))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(data_err(path, format!("row {}: ragged row", r + 1)));
        }
        for field in record.iter() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| data_err(path, format!("row {}: `{field}` is not a number", r + 1)))?;
            values.push(x);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| data_err(path, e))
}

/// Embeds every instance with the net, or with the concatenation baseline.
pub fn cmd_embed(cfg: &RunConfig, net_path: Option<&Path>, baseline: bool, out: &Path) -> Result<PathBuf, CliError> {
    let prepared = prepare(cfg)?;
    let (emb, name, inputs) = if baseline {
        (
            baseline_embeddings(cfg, &prepared.raw)?,
            "embeddings_baseline",
            vec![cfg.dataset_path()],
        )
    } else {
        let net_path = net_path.ok_or_else(|| CliError::Config("embed needs --net or --baseline".into()))?;
        let net = load_net(net_path)?;
        (
            embed_corpus(&net, &prepared.data)?,
            "embeddings",
            vec![cfg.dataset_path(), net_path.to_path_buf()],
        )
    };
    let path = out.join(format!("{name}.csv"));
    write_file(&path, matrix_csv(&emb).as_bytes())?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_metadata(cfg, out, &format!("embed_{name}"), &refs, &[&path])?;
    Ok(path)
}

/// Rows scored in evaluation: the test split, or everything without one.
fn eval_rows(data: &Dataset) -> Vec<usize> {
    if data.splits.test.is_empty() {
        (0..data.len()).collect()
    } else {
        data.splits.test.clone()
    }
}

fn write_report(report: &EvalReport, out: &Path, name: &str, per_query: bool) -> Result<Vec<PathBuf>, CliError> {
    let mut stripped = report.clone();
    stripped.per_query = None;
    let json_path = out.join(format!("{name}.json"));
    write_file(
        &json_path,
        (serde_json::to_string_pretty(&stripped).expect("report serializes") + "\n").as_bytes(),
    )?;
    let txt_path = out.join(format!("{name}.txt"));
    write_file(&txt_path, report.to_table().as_bytes())?;
    let mut paths = vec![json_path, txt_path];
    if per_query {
        let p = out.join(format!("{name}_per_query.csv"));
        write_file(&p, report.per_query_csv().as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

/// Cosine retrieval among the test rows, judged by shared labels of the
/// configured relevance target.
pub fn cmd_retrieve(cfg: &RunConfig, embeddings: &Path, per_query: bool, out: &Path) -> Result<EvalReport, CliError> {
    let data = load_dataset(&cfg.dataset_path())?;
    let emb = read_matrix_csv(embeddings)?;
    if emb.nrows() != data.len() {
        return Err(data_err(
            embeddings,
            format!("{} rows for {} instances", emb.nrows(), data.len()),
        ));
    }
    let relevance = data
        .target(&cfg.eval.relevance)
        .ok_or_else(|| CliError::Config(format!("relevance target `{}` is absent", cfg.eval.relevance)))?;
    let rows = eval_rows(&data);
    let judge = RelevanceJudge::new(relevance.label_sets(&rows)?);
    let settings = cfg.eval.retrieval_settings();
    let scores = evaluate_retrieval(emb.select(Axis(0), &rows).view(), &judge, &settings)?;
    let report = EvalReport::retrieval(file_name(embeddings), &settings, scores);
    let name = format!("report_retrieve_{}", stem(embeddings));
    let outputs = write_report(&report, out, &name, per_query)?;
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_metadata(
        cfg,
        out,
        &format!("retrieve_{}", stem(embeddings)),
        &[&cfg.dataset_path(), embeddings],
        &refs,
    )?;
    Ok(report)
}

fn prediction_line(id: usize, head: &str, kind: TaskKind, payload: Value) -> String {
    let mut obj = json!({ "id": id, "head": head, "kind": kind.as_str() });
    if let (Value::Object(o), Value::Object(p)) = (&mut obj, payload) {
        o.extend(p);
    }
    obj.to_string()
}

/// Predictions for the test rows as JSON lines, from a net head or from
/// the kNN baseline over concatenated views.
pub fn cmd_predict(
    cfg: &RunConfig,
    net_path: Option<&Path>,
    head_name: &str,
    knn: Option<usize>,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let prepared = prepare(cfg)?;
    let rows = eval_rows(&prepared.data);
    let mut lines = Vec::with_capacity(rows.len());
    let (path, inputs) = if let Some(k) = knn {
        let target_name = cfg
            .heads
            .iter()
            .find(|d| d.name == head_name)
            .map_or(head_name, |d| d.target_name());
        let column = prepared
            .raw
            .target(target_name)
            .ok_or_else(|| CliError::Config(format!("unknown target `{target_name}`")))?;
        let train = &prepared.raw.splits.train;
        let emb = baseline_embeddings(cfg, &prepared.raw)?;
        let model = KnnMultilabel::fit(
            emb.select(Axis(0), train),
            column.label_sets(train)?,
            column.labels.len(),
            k,
        )?;
        let predicted = model.predict(emb.select(Axis(0), &rows).view());
        for (&id, labels) in rows.iter().zip(&predicted) {
            let names: Vec<&str> = labels.iter().map(|&l| column.labels[l].as_str()).collect();
            lines.push(prediction_line(
                id,
                head_name,
                TaskKind::Multilabel,
                json!({ "labels": names }),
            ));
        }
        (
            out.join(format!("predictions_{head_name}_knn.jsonl")),
            vec![cfg.dataset_path()],
        )
    } else {
        let net_path = net_path.ok_or_else(|| CliError::Config("predict needs --net or --knn".into()))?;
        let net = load_net(net_path)?;
        let head = net
            .head(head_name)
            .ok_or_else(|| CliError::Config(format!("the net has no head `{head_name}`")))?;
        let features = embed_corpus(&net, &prepared.data.subset(&rows)?)?;
        for (&id, f) in rows.iter().zip(features.rows()) {
            let p = predict(head, f)?;
            lines.push(prediction_line(id, head_name, head.kind, p.payload(&head.labels)));
        }
        (
            out.join(format!("predictions_{head_name}.jsonl")),
            vec![cfg.dataset_path(), net_path.to_path_buf()],
        )
    };
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_metadata(cfg, out, &format!("predict_{}", stem(&path)), &refs, &[&path])?;
    Ok(path)
}

/// Multilabel recall, precision and macro-F1 of a predictions file.
pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let data = load_dataset(&cfg.dataset_path())?;
    let file = fs::File::open(predictions).map_err(|e| data_err(predictions, e))?;
    let mut head: Option<String> = None;
    let mut predicted: Vec<(usize, Vec<String>)> = Vec::new();
    for (r, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| data_err(predictions, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| data_err(predictions, format!("row {}: {d}", r + 1));
        let obj: Value = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let id = obj
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing `id`"))? as usize;
        let h = obj
            .get("head")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing `head`"))?;
        if head.get_or_insert_with(|| h.to_string()) != h {
            return Err(bad("predictions for more than one head"));
        }
        if obj.get("kind").and_then(Value::as_str) != Some(TaskKind::Multilabel.as_str()) {
            return Err(CliError::Config("eval scores multilabel predictions only".into()));
        }
        let labels = obj
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing `labels`"))?
            .iter()
            .map(|v| v.as_str().map(String::from).ok_or_else(|| bad("label is not a string")))
            .collect::<Result<Vec<_>, _>>()?;
        if id >= data.len() {
            return Err(bad("id out of range"));
        }
        predicted.push((id, labels));
    }
    let head = head.ok_or_else(|| data_err(predictions, "no predictions"))?;
    let target_name = cfg
        .heads
        .iter()
        .find(|d| d.name == head)
        .map_or(head.as_str(), |d| d.target_name());
    let column = data
        .target(target_name)
        .ok_or_else(|| CliError::Config(format!("unknown target `{target_name}`")))?;
    let ids: Vec<usize> = predicted.iter().map(|(id, _)| *id).collect();
    let truth = column.label_sets(&ids)?;
    let pred_idx = predicted
        .iter()
        .map(|(_, names)| {
            names
                .iter()
                .map(|n| {
                    column
                        .labels
                        .iter()
                        .position(|l| l == n)
                        .ok_or_else(|| data_err(predictions, format!("undeclared label `{n}`")))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores = multilabel_metrics(&pred_idx, &truth, column.labels.len())?;
    let report = EvalReport::multilabel(file_name(predictions), ids.len(), scores);
    let name = format!("report_eval_{}", stem(predictions));
    let outputs = write_report(&report, out, &name, false)?;
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_metadata(
        cfg,
        out,
        &format!("eval_{}", stem(predictions)),
        &[&cfg.dataset_path(), predictions],
        &refs,
    )?;
    Ok(report)
}

/// Writes a synthetic planted-cluster corpus; returns the manifest path.
pub fn cmd_generate(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf, CliError> {
    let dataset = generate_synthetic(spec)?;
    Ok(write_dataset(&dataset, out)?)
}
