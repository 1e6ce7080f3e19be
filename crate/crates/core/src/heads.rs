//! Typed task heads on top of the shared representation.
//!
//! Every head scores the top-layer features affinely, `g = bias + V f`.
//! Unstructured heads (regression, logistic, Poisson) have one output row;
//! structured heads (multiclass, ranking, multilabel) have one row per label
//! and share a sequential softmax: the `j`-th chosen label is drawn from the
//! softmax of the scores restricted to a candidate set `L_j`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::math::{ln_factorial, log_sum_exp, sigmoid, softmax, softplus};
use crate::metrics::multilabel_metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Logistic,
    Poisson,
    Multiclass,
    Ranking,
    Multilabel,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Regression,
        TaskKind::Logistic,
        TaskKind::Poisson,
        TaskKind::Multiclass,
        TaskKind::Ranking,
        TaskKind::Multilabel,
    ];

    pub fn is_structured(self) -> bool {
        matches!(self, TaskKind::Multiclass | TaskKind::Ranking | TaskKind::Multilabel)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Logistic => "logistic",
            TaskKind::Poisson => "poisson",
            TaskKind::Multiclass => "multiclass",
            TaskKind::Ranking => "ranking",
            TaskKind::Multilabel => "multilabel",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// One typed output task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub name: String,
    pub kind: TaskKind,
    /// `outputs × width`; one row per label for structured kinds.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub labels: Vec<String>,
    /// Calibrated selection threshold, multilabel heads only.
    pub threshold: Option<f64>,
    pub task_weight: f64,
    /// Auxiliary heads only shape the representation during training.
    pub auxiliary: bool,
}

impl TaskHead {
    /// A zero-initialized head reading `width` features.
    pub fn new(name: impl Into<String>, kind: TaskKind, labels: Vec<String>, width: usize) -> Result<Self> {
        let name = name.into();
        let outputs = if kind.is_structured() {
            if labels.len() < 2 {
                return Err(Error::Config(format!(
                    "{kind} head `{name}` needs at least two labels, got {}",
                    labels.len()
                )));
            }
            labels.len()
        } else {
            if !labels.is_empty() {
                return Err(Error::Config(format!("{kind} head `{name}` takes no labels")));
            }
            1
        };
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Config(format!("head `{name}` declares label `{dup}` twice")));
        }
        Ok(TaskHead {
            name,
            kind,
            weights: Array2::zeros((outputs, width)),
            bias: Array1::zeros(outputs),
            labels,
            threshold: None,
            task_weight: 1.0,
            auxiliary: false,
        })
    }

    pub fn with_random_weights<R: Rng + ?Sized>(mut self, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("weight std must be finite and nonnegative");
        self.weights.mapv_inplace(|_| normal.sample(rng));
        self
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn target_error(&self, detail: impl Into<String>) -> Error {
        Error::Target {
            head: self.name.clone(),
            detail: detail.into(),
        }
    }

    /// Checks that `target` matches this head's kind and label set.
    pub fn validate_target(&self, target: &TaskTarget) -> Result<()> {
        if target.kind() != self.kind {
            return Err(self.target_error(format!("{} target for a {} head", target.kind(), self.kind)));
        }
        let n = self.outputs();
        match target {
            TaskTarget::Real(y) if !y.is_finite() => Err(self.target_error("non-finite value")),
            TaskTarget::Sign(y) if *y != 1.0 && *y != -1.0 => {
                Err(self.target_error(format!("logistic target {y} must be +1 or -1")))
            }
            TaskTarget::Class(l) if *l >= n => Err(self.target_error(format!("label index {l} out of range"))),
            TaskTarget::Ranking(ls) | TaskTarget::Labels(ls) => {
                let mut seen = vec![false; n];
                for &l in ls {
                    if l >= n {
                        return Err(self.target_error(format!("label index {l} out of range")));
                    }
                    if std::mem::replace(&mut seen[l], true) {
                        return Err(self.target_error(format!("duplicate label `{}`", self.labels[l])));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A supervised outcome for one head and one instance. Label payloads are
/// indices into the head's label list.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    Real(f64),
    /// `+1` or `-1`.
    Sign(f64),
    Count(u64),
    Class(usize),
    /// Best first; may stop before all labels are ranked.
    Ranking(Vec<usize>),
    Labels(Vec<usize>),
}

impl TaskTarget {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskTarget::Real(_) => TaskKind::Regression,
            TaskTarget::Sign(_) => TaskKind::Logistic,
            TaskTarget::Count(_) => TaskKind::Poisson,
            TaskTarget::Class(_) => TaskKind::Multiclass,
            TaskTarget::Ranking(_) => TaskKind::Ranking,
            TaskTarget::Labels(_) => TaskKind::Multilabel,
        }
    }
}

/// Affine score `bias + V f`.
pub fn head_score(head: &TaskHead, f: ArrayView1<f64>) -> Result<Array1<f64>> {
    if f.len() != head.width() {
        return Err(Error::dim("head input", head.width(), f.len()));
    }
    Ok(head.weights.dot(&f) + &head.bias)
}

pub fn loss_regression(y: f64, g: f64) -> f64 {
    0.5 * (y - g) * (y - g)
}

/// `log(1 + exp(-y g))` for `y ∈ {-1, +1}`.
pub fn loss_logistic(y: f64, g: f64) -> f64 {
    softplus(-y * g)
}

/// Trainable part of the Poisson negative log-likelihood with rate `e^g`:
/// `-y g + e^g`. The constant `log(y!)` is left out.
pub fn loss_poisson(y: u64, g: f64) -> f64 {
    -(y as f64) * g + g.exp()
}

/// Full Poisson negative log-likelihood `log(y!) - y g + e^g`.
pub fn loss_poisson_full(y: u64, g: f64) -> f64 {
    ln_factorial(y as f64) + loss_poisson(y, g)
}

fn restricted_log_prob(scores: ArrayView1<f64>, label: usize, candidates: &[usize]) -> f64 {
    scores[label] - log_sum_exp(candidates.iter().map(|&c| scores[c]))
}

/// Probability of choosing `label` from `candidates` under the softmax of
/// the head's scores restricted to `candidates`.
pub fn structured_prob(head: &TaskHead, f: ArrayView1<f64>, label: usize, candidates: &[usize]) -> Result<f64> {
    if !head.kind.is_structured() {
        return Err(Error::Contract(format!("{} head has no label distribution", head.kind)));
    }
    if candidates.iter().any(|&c| c >= head.outputs()) {
        return Err(Error::Contract("candidate label out of range".into()));
    }
    if !candidates.contains(&label) {
        return Err(Error::Contract(format!("label {label} is not among the candidates")));
    }
    let scores = head_score(head, f)?;
    Ok(restricted_log_prob(scores.view(), label, candidates).exp())
}

/// The `(chosen label, candidate set)` sequence a structured target expands to.
///
/// * multiclass: one pair, candidates = all labels
/// * ranking: the `j`-th ranked label against all labels not ranked above it;
///   a partial ranking stops at its last ranked label
/// * multilabel: one pair per positive label, each against all labels
pub fn candidate_sets(kind: TaskKind, target: &TaskTarget, n_labels: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let all: Vec<usize> = (0..n_labels).collect();
    let check = |l: usize| {
        if l < n_labels {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "label index {l} out of range for {n_labels} labels"
            )))
        }
    };
    match (kind, target) {
        (TaskKind::Multiclass, TaskTarget::Class(l)) => {
            check(*l)?;
            Ok(vec![(*l, all)])
        }
        (TaskKind::Ranking, TaskTarget::Ranking(order)) => {
            let mut remaining = all;
            let mut out = Vec::with_capacity(order.len());
            for &l in order {
                check(l)?;
                let Some(pos) = remaining.iter().position(|&r| r == l) else {
                    return Err(Error::Contract(format!("label {l} appears twice in a ranking")));
                };
                out.push((l, remaining.clone()));
                remaining.remove(pos);
            }
            Ok(out)
        }
        (TaskKind::Multilabel, TaskTarget::Labels(set)) => {
            let mut seen = vec![false; n_labels];
            set.iter()
                .map(|&l| {
                    check(l)?;
                    if std::mem::replace(&mut seen[l], true) {
                        return Err(Error::Contract(format!("label {l} appears twice in a label set")));
                    }
                    Ok((l, all.clone()))
                })
                .collect()
        }
        (kind, target) => Err(Error::Contract(format!(
            "{} target cannot drive a {kind} head",
            target.kind()
        ))),
    }
}

/// `-Σ_j log P_j(y_j)` over the target's candidate sets.
pub fn loss_structured(head: &TaskHead, f: ArrayView1<f64>, target: &TaskTarget) -> Result<f64> {
    let scores = head_score(head, f)?;
    Ok(structured_loss_and_grad(head, scores.view(), target)?.0)
}

fn structured_loss_and_grad(
    head: &TaskHead,
    scores: ArrayView1<f64>,
    target: &TaskTarget,
) -> Result<(f64, Array1<f64>)> {
    let mut loss = 0.0;
    let mut grad = Array1::zeros(scores.len());
    for (label, candidates) in candidate_sets(head.kind, target, head.outputs())? {
        let log_norm = log_sum_exp(candidates.iter().map(|&c| scores[c]));
        loss -= scores[label] - log_norm;
        for &c in &candidates {
            grad[c] += (scores[c] - log_norm).exp();
        }
        grad[label] -= 1.0;
    }
    Ok((loss, grad))
}

/// Loss of one head given its scores, with the gradient of the loss with
/// respect to those scores.
pub fn loss_and_score_gradient(
    head: &TaskHead,
    scores: ArrayView1<f64>,
    target: &TaskTarget,
) -> Result<(f64, Array1<f64>)> {
    head.validate_target(target)?;
    if scores.len() != head.outputs() {
        return Err(Error::dim("head scores", head.outputs(), scores.len()));
    }
    let g = scores[0];
    let (loss, dg) = match *target {
        TaskTarget::Real(y) => (loss_regression(y, g), g - y),
        TaskTarget::Sign(y) => (loss_logistic(y, g), -y * sigmoid(-y * g)),
        TaskTarget::Count(y) => (loss_poisson(y, g), g.exp() - y as f64),
        _ => return structured_loss_and_grad(head, scores, target),
    };
    Ok((loss, Array1::from_elem(1, dg)))
}

/// Training loss of one head at features `f`.
pub fn head_loss(head: &TaskHead, f: ArrayView1<f64>, target: &TaskTarget) -> Result<f64> {
    let scores = head_score(head, f)?;
    Ok(loss_and_score_gradient(head, scores.view(), target)?.0)
}

/// `P(l | f)` for every label, the softmax over the full label set.
pub fn label_probabilities(head: &TaskHead, f: ArrayView1<f64>) -> Result<Array1<f64>> {
    if !head.kind.is_structured() {
        return Err(Error::Contract(format!("{} head has no label distribution", head.kind)));
    }
    Ok(softmax(head_score(head, f)?.view()))
}

/// Candidate thresholds: every distinct probability plus the midpoints
/// between consecutive distinct values, ascending. Zero is left out so a
/// label with no support is never selected.
pub fn threshold_grid(probabilities: ArrayView2<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = probabilities.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut grid = Vec::with_capacity(values.len() * 2);
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            grid.push(0.5 * (values[i - 1] + v));
        }
        grid.push(v);
    }
    grid.retain(|&t| t > 0.0);
    grid
}

/// Labels whose probability reaches `threshold`, per row.
pub fn select_labels(probabilities: ArrayView2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    probabilities
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &p)| p >= threshold)
                .map(|(l, _)| l)
                .collect()
        })
        .collect()
}

/// Picks the grid threshold maximizing macro-F1 of `P(l) ≥ τ` selection
/// against `truth`, preferring the larger threshold on ties.
pub fn calibrate_from_probabilities(probabilities: ArrayView2<f64>, truth: &[Vec<usize>]) -> Result<(f64, f64)> {
    if probabilities.nrows() != truth.len() {
        return Err(Error::dim("calibration rows", probabilities.nrows(), truth.len()));
    }
    if probabilities.nrows() == 0 || truth.iter().all(|t| t.is_empty()) {
        return Err(Error::Calibration("calibration set has no positive labels".into()));
    }
    let n_labels = probabilities.ncols();
    let mut best: Option<(f64, f64)> = None;
    for tau in threshold_grid(probabilities) {
        let predicted = select_labels(probabilities, tau);
        let score = multilabel_metrics(&predicted, truth, n_labels)?.macro_f1;
        // Ascending grid: `>=` lets a later, larger threshold win ties.
        if best.is_none_or(|(_, s)| score >= s) {
            best = Some((tau, score));
        }
    }
    best.ok_or_else(|| Error::Calibration("every probability is zero".into()))
}

/// Calibrates a multilabel head's threshold on `(features, targets)` and
/// stores it in the head. Returns `τ*`.
pub fn calibrate_threshold(head: &mut TaskHead, features: ArrayView2<f64>, targets: &[Vec<usize>]) -> Result<f64> {
    if head.kind != TaskKind::Multilabel {
        return Err(Error::Calibration(format!(
            "{} head `{}` has no threshold",
            head.kind, head.name
        )));
    }
    if features.nrows() != targets.len() {
        return Err(Error::dim("calibration rows", features.nrows(), targets.len()));
    }
    let mut probs = Array2::zeros((features.nrows(), head.outputs()));
    for (row, f) in features.outer_iter().enumerate() {
        probs.row_mut(row).assign(&label_probabilities(head, f)?);
    }
    for t in targets {
        head.validate_target(&TaskTarget::Labels(t.clone()))?;
    }
    let (tau, _) = calibrate_from_probabilities(probs.view(), targets)?;
    head.threshold = Some(tau);
    Ok(tau)
}

/// A head's decision for one instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Regression output `g`.
    Value(f64),
    /// Poisson head: `g` and rate `e^g`.
    Rate {
        score: f64,
        rate: f64,
    },
    /// Logistic head: `sign(g)` and `σ(g)`.
    Binary {
        label: i8,
        probability: f64,
    },
    Class(usize),
    Ranking(Vec<usize>),
    Labels(Vec<usize>),
}

impl Prediction {
    /// JSON payload with label indices resolved to names.
    pub fn payload(&self, labels: &[String]) -> serde_json::Value {
        let names = |ls: &[usize]| ls.iter().map(|&l| labels[l].clone()).collect::<Vec<_>>();
        match self {
            Prediction::Value(g) => json!({ "value": g }),
            Prediction::Rate { score, rate } => json!({ "value": score, "rate": rate }),
            Prediction::Binary { label, probability } => json!({ "label": label, "probability": probability }),
            Prediction::Class(l) => json!({ "label": labels[*l] }),
            Prediction::Ranking(ls) => json!({ "ranking": names(ls) }),
            Prediction::Labels(ls) => json!({ "labels": names(ls) }),
        }
    }
}

/// Kind-matched prediction. Ranking ties keep label declaration order;
/// multilabel heads must be calibrated first.
pub fn predict(head: &TaskHead, f: ArrayView1<f64>) -> Result<Prediction> {
    let scores = head_score(head, f)?;
    Ok(match head.kind {
        TaskKind::Regression => Prediction::Value(scores[0]),
        TaskKind::Poisson => Prediction::Rate {
            score: scores[0],
            rate: scores[0].exp(),
        },
        TaskKind::Logistic => Prediction::Binary {
            label: if scores[0] >= 0.0 { 1 } else { -1 },
            probability: sigmoid(scores[0]),
        },
        TaskKind::Multiclass => {
            let mut best = 0;
            for (l, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = l;
                }
            }
            Prediction::Class(best)
        }
        TaskKind::Ranking => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));
            Prediction::Ranking(order)
        }
        TaskKind::Multilabel => {
            let tau = head.threshold.ok_or_else(|| {
                Error::Calibration(format!("multilabel head `{}` has not been calibrated", head.name))
            })?;
            let probs = softmax(scores.view());
            Prediction::Labels((0..probs.len()).filter(|&l| probs[l] >= tau).collect())
        }
    })
}
