//! Retrieval and multilabel evaluation.
//!
//! Retrieval ranks a corpus by cosine similarity to each query (the query
//! itself excluded) and scores the top of the list with MAP@T and NDCG@T.
//! By default both follow the cutoff-normalized forms: average precision is
//! the mean of `Precision(n)` over every cutoff `n = 1..T`, and NDCG divides
//! by the DCG of an all-relevant top-`T` list. The conventional variants
//! (divide by the number of relevant hits; achievable ideal) are available
//! through [`ApMode`] and [`NdcgIdeal`].

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{calibrate_from_probabilities, select_labels};

/// `x·y / (‖x‖‖y‖)`; zero when either vector is zero.
pub fn cosine_similarity(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let denom = x.dot(&x).sqrt() * y.dot(&y).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        x.dot(&y) / denom
    }
}

fn row_norms(corpus: ArrayView2<f64>) -> Array1<f64> {
    corpus.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn ranked_by_similarity(
    query: ArrayView1<f64>,
    corpus: ArrayView2<f64>,
    norms: &Array1<f64>,
    exclude: Option<usize>,
    t: usize,
) -> Vec<usize> {
    let qn = query.dot(&query).sqrt();
    let mut scored: Vec<(usize, f64)> = corpus
        .outer_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, row)| {
            let denom = qn * norms[i];
            let sim = if denom == 0.0 { 0.0 } else { query.dot(&row) / denom };
            (i, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(t);
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Indices of the `t` corpus rows most cosine-similar to `query`, best
/// first, skipping `exclude`. Ties go to the lower index.
pub fn retrieve(query: ArrayView1<f64>, corpus: ArrayView2<f64>, exclude: Option<usize>, t: usize) -> Vec<usize> {
    ranked_by_similarity(query, corpus, &row_norms(corpus), exclude, t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// `(1/T) Σ_{n=1..T} Precision(n)`.
    #[default]
    Cutoff,
    /// `Σ_{n: rel_n} Precision(n) / #relevant`.
    Relevant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdcgIdeal {
    /// Normalize by the DCG of `T` relevant results.
    #[default]
    AllRelevant,
    /// Normalize by the best DCG reachable given the relevant items that exist.
    Achievable,
}

/// Cutoff-normalized average precision of a ranked relevance list; `T` is
/// the list length.
pub fn average_precision(rel: &[bool]) -> f64 {
    average_precision_with(rel, ApMode::Cutoff)
}

pub fn average_precision_with(rel: &[bool], mode: ApMode) -> f64 {
    if rel.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut cutoff_sum = 0.0;
    let mut relevant_sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
        }
        let precision = hits as f64 / (i + 1) as f64;
        cutoff_sum += precision;
        if r {
            relevant_sum += precision;
        }
    }
    match mode {
        ApMode::Cutoff => cutoff_sum / rel.len() as f64,
        ApMode::Relevant if hits == 0 => 0.0,
        ApMode::Relevant => relevant_sum / hits as f64,
    }
}

fn dcg(rel: &[bool], t: usize) -> f64 {
    rel.iter()
        .take(t)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

fn ideal_dcg(t: usize) -> f64 {
    (1..=t).map(|n| 1.0 / ((n + 1) as f64).log2()).sum()
}

/// `DCG@T / Σ_{n=1..T} 1/log₂(n+1)`.
pub fn ndcg_at(rel: &[bool], t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    dcg(rel, t) / ideal_dcg(t)
}

/// NDCG normalized by the best ordering of the `n_relevant` relevant items
/// that exist for the query.
pub fn ndcg_achievable(rel: &[bool], t: usize, n_relevant: usize) -> f64 {
    let ideal = ideal_dcg(t.min(n_relevant));
    if ideal == 0.0 {
        return 0.0;
    }
    dcg(rel, t) / ideal
}

/// Two items are relevant to each other when they share at least one label.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceJudge {
    labels: Vec<Vec<usize>>,
}

impl RelevanceJudge {
    pub fn new(mut labels: Vec<Vec<usize>>) -> Self {
        for set in &mut labels {
            set.sort_unstable();
            set.dedup();
        }
        RelevanceJudge { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn relevant(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.labels[a], &self.labels[b]);
        let (mut i, mut j) = (0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Equal => return true,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        false
    }

    /// Number of other items relevant to `query`.
    pub fn relevant_count(&self, query: usize) -> usize {
        (0..self.len())
            .filter(|&d| d != query && self.relevant(query, d))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub t_map: usize,
    pub t_ndcg: usize,
    pub ap_mode: ApMode,
    pub ndcg_ideal: NdcgIdeal,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            t_map: 100,
            t_ndcg: 10,
            ap_mode: ApMode::Cutoff,
            ndcg_ideal: NdcgIdeal::AllRelevant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query: usize,
    pub average_precision: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub ndcg: f64,
    pub per_query: Vec<QueryTrace>,
}

/// Every row of `embeddings` queries all the other rows.
pub fn evaluate_retrieval(
    embeddings: ArrayView2<f64>,
    judge: &RelevanceJudge,
    settings: &RetrievalSettings,
) -> Result<RetrievalScores> {
    if embeddings.nrows() != judge.len() {
        return Err(Error::dim("judge rows", embeddings.nrows(), judge.len()));
    }
    let norms = row_norms(embeddings);
    let depth = settings.t_map.max(settings.t_ndcg);
    let per_query: Vec<QueryTrace> = (0..embeddings.nrows())
        .into_par_iter()
        .map(|q| {
            let hits = ranked_by_similarity(embeddings.row(q), embeddings, &norms, Some(q), depth);
            let rel: Vec<bool> = hits.iter().map(|&d| judge.relevant(q, d)).collect();
            let ap_len = settings.t_map.min(rel.len());
            let ndcg = match settings.ndcg_ideal {
                NdcgIdeal::AllRelevant => ndcg_at(&rel, settings.t_ndcg),
                NdcgIdeal::Achievable => ndcg_achievable(&rel, settings.t_ndcg, judge.relevant_count(q)),
            };
            QueryTrace {
                query: q,
                average_precision: average_precision_with(&rel[..ap_len], settings.ap_mode),
                ndcg,
            }
        })
        .collect();
    let n = per_query.len().max(1) as f64;
    let map = per_query.iter().map(|t| t.average_precision).sum::<f64>() / n;
    let ndcg = per_query.iter().map(|t| t.ndcg).sum::<f64>() / n;
    Ok(RetrievalScores { map, ndcg, per_query })
}

/// Mean cutoff-normalized average precision over all queries at depth `t`.
pub fn map_at(embeddings: ArrayView2<f64>, judge: &RelevanceJudge, t: usize) -> Result<f64> {
    let settings = RetrievalSettings {
        t_map: t,
        t_ndcg: 0,
        ..Default::default()
    };
    Ok(evaluate_retrieval(embeddings, judge, &settings)?.map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilabelScores {
    /// Mean per-label recall.
    pub recall: f64,
    /// Mean per-label precision.
    pub precision: f64,
    /// Mean per-label F1.
    pub macro_f1: f64,
}

/// Per-label precision, recall and F1 from counts over all instances,
/// averaged with equal weight per label. Undefined ratios count as 0.
pub fn multilabel_metrics(predicted: &[Vec<usize>], truth: &[Vec<usize>], n_labels: usize) -> Result<MultilabelScores> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("prediction rows", truth.len(), predicted.len()));
    }
    if n_labels == 0 {
        return Err(Error::Contract("multilabel metrics need at least one label".into()));
    }
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    let mut in_truth = vec![false; n_labels];
    let mut in_pred = vec![false; n_labels];
    for (pred, real) in predicted.iter().zip(truth) {
        in_truth.iter_mut().for_each(|x| *x = false);
        in_pred.iter_mut().for_each(|x| *x = false);
        for &l in real {
            *in_truth
                .get_mut(l)
                .ok_or_else(|| Error::Contract(format!("label {l} out of range")))? = true;
        }
        for &l in pred {
            *in_pred
                .get_mut(l)
                .ok_or_else(|| Error::Contract(format!("label {l} out of range")))? = true;
        }
        for l in 0..n_labels {
            match (in_pred[l], in_truth[l]) {
                (true, true) => tp[l] += 1,
                (true, false) => fp[l] += 1,
                (false, true) => fn_[l] += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut recall, mut precision, mut f1) = (0.0, 0.0, 0.0);
    for l in 0..n_labels {
        recall += ratio(tp[l], tp[l] + fn_[l]);
        precision += ratio(tp[l], tp[l] + fp[l]);
        f1 += ratio(2 * tp[l], 2 * tp[l] + fp[l] + fn_[l]);
    }
    let n = n_labels as f64;
    Ok(MultilabelScores {
        recall: recall / n,
        precision: precision / n,
        macro_f1: f1 / n,
    })
}

/// Scales each view's rows to unit L2 norm (zero rows stay zero) and
/// concatenates the views.
pub fn concat_baseline_embed(views: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let rows = views.first().map_or(0, |v| v.nrows());
    let cols = views.iter().map(|v| v.ncols()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut offset = 0;
    for view in views {
        if view.nrows() != rows {
            return Err(Error::dim("baseline view rows", rows, view.nrows()));
        }
        for (r, row) in view.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                for (c, &x) in row.iter().enumerate() {
                    out[[r, offset + c]] = x / norm;
                }
            }
        }
        offset += view.ncols();
    }
    Ok(out)
}

/// k-nearest-neighbor multilabel predictor: a label's probability is the
/// share of the `k` most cosine-similar training rows that carry it, and
/// labels at or above a threshold calibrated on the training rows
/// (leave-one-out neighborhoods) are selected.
#[derive(Clone, Debug)]
pub struct KnnMultilabel {
    train: Array2<f64>,
    labels: Vec<Vec<usize>>,
    n_labels: usize,
    k: usize,
    threshold: f64,
}

impl KnnMultilabel {
    pub fn fit(train: Array2<f64>, labels: Vec<Vec<usize>>, n_labels: usize, k: usize) -> Result<Self> {
        if train.nrows() != labels.len() {
            return Err(Error::dim("kNN training labels", train.nrows(), labels.len()));
        }
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        let mut model = KnnMultilabel {
            train,
            labels,
            n_labels,
            k,
            threshold: 0.0,
        };
        let loo = model.probabilities_excluding(model.train.view(), true);
        let (tau, _) = calibrate_from_probabilities(loo.view(), &model.labels)?;
        model.threshold = tau;
        Ok(model)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probabilities_excluding(&self, queries: ArrayView2<f64>, leave_one_out: bool) -> Array2<f64> {
        let norms = row_norms(self.train.view());
        let rows: Vec<Array1<f64>> = (0..queries.nrows())
            .into_par_iter()
            .map(|q| {
                let exclude = leave_one_out.then_some(q);
                let hits = ranked_by_similarity(queries.row(q), self.train.view(), &norms, exclude, self.k);
                let mut p = Array1::zeros(self.n_labels);
                for &h in &hits {
                    for &l in &self.labels[h] {
                        p[l] += 1.0;
                    }
                }
                if !hits.is_empty() {
                    p /= hits.len() as f64;
                }
                p
            })
            .collect();
        let mut out = Array2::zeros((rows.len(), self.n_labels));
        for (r, p) in rows.iter().enumerate() {
            out.row_mut(r).assign(p);
        }
        out
    }

    pub fn probabilities(&self, queries: ArrayView2<f64>) -> Array2<f64> {
        self.probabilities_excluding(queries, false)
    }

    pub fn predict(&self, queries: ArrayView2<f64>) -> Vec<Vec<usize>> {
        select_labels(self.probabilities(queries).view(), self.threshold)
    }
}

/// Fits a [`KnnMultilabel`] and predicts label sets for `test`.
pub fn knn_multilabel(
    train: ArrayView2<f64>,
    train_labels: &[Vec<usize>],
    test: ArrayView2<f64>,
    n_labels: usize,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let model = KnnMultilabel::fit(train.to_owned(), train_labels.to_vec(), n_labels, k)?;
    Ok(model.predict(test))
}

/// Evaluation summary written by the command-line front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub t_map: usize,
    pub t_ndcg: usize,
    pub queries: usize,
    pub map_at_t: Option<f64>,
    pub ndcg_at_t: Option<f64>,
    pub multilabel: Option<MultilabelScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query: Option<Vec<QueryTrace>>,
}

impl EvalReport {
    pub fn retrieval(source: impl Into<String>, settings: &RetrievalSettings, scores: RetrievalScores) -> Self {
        EvalReport {
            source: source.into(),
            t_map: settings.t_map,
            t_ndcg: settings.t_ndcg,
            queries: scores.per_query.len(),
            map_at_t: Some(scores.map),
            ndcg_at_t: Some(scores.ndcg),
            multilabel: None,
            per_query: Some(scores.per_query),
        }
    }

    pub fn multilabel(source: impl Into<String>, instances: usize, scores: MultilabelScores) -> Self {
        EvalReport {
            source: source.into(),
            t_map: 0,
            t_ndcg: 0,
            queries: instances,
            map_at_t: None,
            ndcg_at_t: None,
            multilabel: Some(scores),
            per_query: None,
        }
    }

    /// Every reported metric lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        let mut values = vec![self.map_at_t, self.ndcg_at_t];
        if let Some(m) = self.multilabel {
            values.extend([Some(m.recall), Some(m.precision), Some(m.macro_f1)]);
        }
        values.into_iter().flatten().all(|v| (0.0..=1.0).contains(&v))
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("source".into(), self.source.clone()),
            ("queries".into(), self.queries.to_string()),
        ];
        if let Some(m) = self.map_at_t {
            rows.push((format!("MAP@{}", self.t_map), format!("{m:.4}")));
        }
        if let Some(n) = self.ndcg_at_t {
            rows.push((format!("NDCG@{}", self.t_ndcg), format!("{n:.4}")));
        }
        if let Some(ml) = self.multilabel {
            rows.push(("recall".into(), format!("{:.4}", ml.recall)));
            rows.push(("precision".into(), format!("{:.4}", ml.precision)));
            rows.push(("macro-F1".into(), format!("{:.4}", ml.macro_f1)));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }

    /// Per-query CSV trace: `query,average_precision,ndcg`.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query,average_precision,ndcg\n");
        for t in self.per_query.iter().flatten() {
            let _ = writeln!(out, "{},{},{}", t.query, t.average_precision, t.ndcg);
        }
        out
    }
}
