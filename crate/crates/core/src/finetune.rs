//! Supervised fine-tuning of a whole [`DeepNet`] by back-propagation.
//!
//! The loss of one instance is `Σ_t w_t L_t` over the heads that have a
//! target for it. Gradients flow through both sigmoid layers into every
//! first-layer weight matrix and hidden bias. Visible biases do not enter
//! the feedforward map, so their gradient is identically zero; they are
//! carried in the bundle for shape parity and frozen unless asked otherwise.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{head_score, loss_and_score_gradient, TaskTarget};
use crate::rbm::{hidden_posterior, DIVERGENCE_LIMIT};
use crate::stack::{view_matrices, DeepNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Minibatch gradient descent with momentum.
    #[default]
    Sgd,
    /// Full-batch Polak–Ribière conjugate gradient with backtracking.
    Cg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: Optimizer,
    /// SGD step size; initial trial step of the CG line search.
    pub learning_rate: f64,
    pub momentum: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    /// Overrides of per-head task weights, by head name.
    pub task_weights: BTreeMap<String, f64>,
    pub rng_seed: u64,
    pub train_visible_biases: bool,
    /// CG restarts along the steepest descent every this many iterations.
    pub cg_restart: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            momentum: 0.9,
            minibatch_size: 100,
            epochs: 50,
            task_weights: BTreeMap::new(),
            rng_seed: 0,
            train_visible_biases: false,
            cg_restart: 10,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be positive".into());
        }
        if self.cg_restart == 0 {
            return bad("cg_restart must be positive".into());
        }
        if let Some((name, w)) = self.task_weights.iter().find(|(_, &w)| !(w > 0.0 && w.is_finite())) {
            return bad(format!("task weight of `{name}` must be positive, got {w}"));
        }
        Ok(())
    }
}

/// Partials for every trainable array of a net, in a fixed group order:
/// per view `W`, `b`, `a`; then the joint `W`, `b`; then per head `V`, `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub groups: Vec<(String, ArrayD<f64>)>,
}

fn param_views(net: &DeepNet) -> Vec<(String, ArrayViewD<'_, f64>)> {
    let mut out = Vec::new();
    for layer in &net.views {
        let name = &layer.spec.name;
        out.push((format!("view[{name}].W"), layer.params.weights.view().into_dyn()));
        out.push((format!("view[{name}].b"), layer.params.hidden_bias.view().into_dyn()));
        out.push((format!("view[{name}].a"), layer.params.visible_bias.view().into_dyn()));
    }
    out.push(("joint.W".into(), net.joint.weights.view().into_dyn()));
    out.push(("joint.b".into(), net.joint.hidden_bias.view().into_dyn()));
    for head in &net.heads {
        out.push((format!("head[{}].V", head.name), head.weights.view().into_dyn()));
        out.push((format!("head[{}].c", head.name), head.bias.view().into_dyn()));
    }
    out
}

fn param_views_mut(net: &mut DeepNet) -> Vec<ArrayViewMutD<'_, f64>> {
    let mut out = Vec::new();
    for layer in &mut net.views {
        let p = &mut layer.params;
        out.push(p.weights.view_mut().into_dyn());
        out.push(p.hidden_bias.view_mut().into_dyn());
        out.push(p.visible_bias.view_mut().into_dyn());
    }
    out.push(net.joint.weights.view_mut().into_dyn());
    out.push(net.joint.hidden_bias.view_mut().into_dyn());
    for head in &mut net.heads {
        out.push(head.weights.view_mut().into_dyn());
        out.push(head.bias.view_mut().into_dyn());
    }
    out
}

/// Every trainable parameter of `net` in bundle order.
pub fn flatten_params(net: &DeepNet) -> Vec<f64> {
    param_views(net)
        .into_iter()
        .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
        .collect()
}

/// Inverse of [`flatten_params`].
pub fn assign_params(net: &mut DeepNet, values: &[f64]) -> Result<()> {
    let total: usize = param_views(net).iter().map(|(_, v)| v.len()).sum();
    if values.len() != total {
        return Err(Error::dim("flat parameters", total, values.len()));
    }
    let mut it = values.iter();
    for mut view in param_views_mut(net) {
        for x in view.iter_mut() {
            *x = *it.next().expect("length checked");
        }
    }
    Ok(())
}

impl GradientBundle {
    pub fn zeros_like(net: &DeepNet) -> Self {
        GradientBundle {
            groups: param_views(net)
                .into_iter()
                .map(|(name, v)| (name, ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.groups.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().all(|(_, a)| a.iter().all(|&x| x == 0.0))
    }

    /// `self += scale · other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for ((_, a), (_, b)) in self.groups.iter_mut().zip(&other.groups) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in &mut self.groups {
            *a *= s;
        }
    }

    fn check_finite(&self) -> Result<()> {
        match self.groups.iter().find(|(_, a)| a.iter().any(|x| !x.is_finite())) {
            Some((name, _)) => Err(Error::NonFiniteGradient { group: name.clone() }),
            None => Ok(()),
        }
    }

    fn zero_visible_biases(&mut self) {
        for (name, a) in &mut self.groups {
            if name.starts_with("view[") && name.ends_with("].a") {
                a.fill(0.0);
            }
        }
    }
}

fn check_targets(net: &DeepNet, targets: &[Option<TaskTarget>]) -> Result<()> {
    if targets.len() != net.heads.len() {
        return Err(Error::dim("targets per head", net.heads.len(), targets.len()));
    }
    for (head, target) in net.heads.iter().zip(targets) {
        if let Some(t) = target {
            head.validate_target(t)?;
        }
    }
    Ok(())
}

struct Activations {
    lower: Vec<Array1<f64>>,
    joint_in: Array1<f64>,
    top: Array1<f64>,
}

fn activations(net: &DeepNet, instance: &[ArrayView1<f64>]) -> Result<Activations> {
    if instance.len() != net.views.len() {
        return Err(Error::dim("instance views", net.views.len(), instance.len()));
    }
    let lower = net
        .views
        .iter()
        .zip(instance)
        .map(|(layer, v)| hidden_posterior(&layer.params, *v))
        .collect::<Result<Vec<_>>>()?;
    let joint_in = ndarray::concatenate(Axis(0), &lower.iter().map(|h| h.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Contract(e.to_string()))?;
    let top = hidden_posterior(&net.joint, joint_in.view())?;
    Ok(Activations { lower, joint_in, top })
}

/// Weighted losses of every head; absent targets give 0.
fn head_losses(net: &DeepNet, top: ArrayView1<f64>, targets: &[Option<TaskTarget>]) -> Result<Vec<f64>> {
    net.heads
        .iter()
        .zip(targets)
        .map(|(head, target)| match target {
            None => Ok(0.0),
            Some(t) if head.task_weight == 0.0 => head.validate_target(t).map(|_| 0.0),
            Some(t) => {
                let g = head_score(head, top)?;
                Ok(head.task_weight * loss_and_score_gradient(head, g.view(), t)?.0)
            }
        })
        .collect()
}

/// `Σ_t w_t L_t` over the heads with a target; `targets` is aligned with
/// `net.heads`.
pub fn total_loss(net: &DeepNet, instance: &[ArrayView1<f64>], targets: &[Option<TaskTarget>]) -> Result<f64> {
    check_targets(net, targets)?;
    if targets.iter().all(Option::is_none) {
        return Ok(0.0);
    }
    let act = activations(net, instance)?;
    Ok(head_losses(net, act.top.view(), targets)?.iter().sum())
}

/// Loss and its exact gradient for one instance.
pub fn loss_and_gradient(
    net: &DeepNet,
    instance: &[ArrayView1<f64>],
    targets: &[Option<TaskTarget>],
) -> Result<(f64, GradientBundle)> {
    let mut grad = GradientBundle::zeros_like(net);
    let loss = accumulate(net, instance, targets, &mut grad)?;
    grad.check_finite()?;
    Ok((loss, grad))
}

/// Exact gradient of [`total_loss`] for one instance.
pub fn backward(net: &DeepNet, instance: &[ArrayView1<f64>], targets: &[Option<TaskTarget>]) -> Result<GradientBundle> {
    Ok(loss_and_gradient(net, instance, targets)?.1)
}

fn outer(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
    let col = x.insert_axis(Axis(1));
    let row = y.insert_axis(Axis(0));
    &col * &row
}

/// Adds one instance's gradient into `grad`; returns its loss.
fn accumulate(
    net: &DeepNet,
    instance: &[ArrayView1<f64>],
    targets: &[Option<TaskTarget>],
    grad: &mut GradientBundle,
) -> Result<f64> {
    check_targets(net, targets)?;
    if net
        .heads
        .iter()
        .zip(targets)
        .all(|(h, t)| t.is_none() || h.task_weight == 0.0)
    {
        return Ok(0.0);
    }
    let act = activations(net, instance)?;
    let f = act.top.view();
    let n_view_groups = 3 * net.views.len();
    let head_base = n_view_groups + 2;

    let mut loss = 0.0;
    let mut df = Array1::<f64>::zeros(f.len());
    for (i, (head, target)) in net.heads.iter().zip(targets).enumerate() {
        let Some(t) = target else { continue };
        if head.task_weight == 0.0 {
            continue;
        }
        let g = head_score(head, f)?;
        let (l, dg) = loss_and_score_gradient(head, g.view(), t)?;
        let dg = dg * head.task_weight;
        loss += head.task_weight * l;
        grad.groups[head_base + 2 * i].1 += &outer(dg.view(), f).into_dyn();
        grad.groups[head_base + 2 * i + 1].1 += &dg.view().into_dyn();
        df += &head.weights.t().dot(&dg);
    }

    let dz2 = &df * &f.mapv(|p| p * (1.0 - p));
    grad.groups[n_view_groups].1 += &outer(act.joint_in.view(), dz2.view()).into_dyn();
    grad.groups[n_view_groups + 1].1 += &dz2.view().into_dyn();
    let dh1 = net.joint.weights.dot(&dz2);

    let mut offset = 0;
    for (s, (layer, h)) in net.views.iter().zip(&act.lower).enumerate() {
        let k = layer.spec.hidden;
        let dz1 = &dh1.slice(ndarray::s![offset..offset + k]) * &h.mapv(|p| p * (1.0 - p));
        grad.groups[3 * s].1 += &outer(instance[s], dz1.view()).into_dyn();
        grad.groups[3 * s + 1].1 += &dz1.view().into_dyn();
        offset += k;
    }
    Ok(loss)
}

/// Per-group result of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_relative_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| !g.flagged)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }
}

fn per_head_losses(net: &DeepNet, instance: &[ArrayView1<f64>], targets: &[Option<TaskTarget>]) -> Result<Vec<f64>> {
    let act = activations(net, instance)?;
    head_losses(net, act.top.view(), targets)
}

/// Central differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter. The
/// difference is taken per head and then summed, which cancels less than
/// differencing the total.
pub fn numeric_gradient(
    net: &DeepNet,
    instance: &[ArrayView1<f64>],
    targets: &[Option<TaskTarget>],
    eps: f64,
) -> Result<GradientBundle> {
    check_targets(net, targets)?;
    let theta = flatten_params(net);
    let numeric = (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = net.clone();
            let mut shifted = theta.clone();
            shifted[i] = theta[i] + eps;
            assign_params(&mut probe, &shifted)?;
            let plus = per_head_losses(&probe, instance, targets)?;
            shifted[i] = theta[i] - eps;
            assign_params(&mut probe, &shifted)?;
            let minus = per_head_losses(&probe, instance, targets)?;
            Ok(plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut bundle = GradientBundle::zeros_like(net);
    let mut it = numeric.into_iter();
    for (_, a) in &mut bundle.groups {
        a.iter_mut()
            .for_each(|x| *x = it.next().expect("one value per parameter"));
    }
    Ok(bundle)
}

/// Compares a supplied gradient against central differences. The error of
/// a group is `|a − n| / max(|a|, |n|, 1e-8)` with `|·|` the largest
/// absolute entry of the group.
pub fn gradient_check_against(
    net: &DeepNet,
    instance: &[ArrayView1<f64>],
    targets: &[Option<TaskTarget>],
    analytic: &GradientBundle,
    eps: f64,
    tol: f64,
) -> Result<GradientCheckReport> {
    let numeric = numeric_gradient(net, instance, targets, eps)?;
    if analytic.groups.len() != numeric.groups.len() {
        return Err(Error::dim(
            "gradient groups",
            numeric.groups.len(),
            analytic.groups.len(),
        ));
    }
    let max_abs = |a: &ArrayD<f64>| a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let groups = analytic
        .groups
        .iter()
        .zip(&numeric.groups)
        .map(|((name, a), (_, n))| {
            if a.shape() != n.shape() {
                return Err(Error::Contract(format!("gradient group {name} has the wrong shape")));
            }
            let diff = max_abs(&(a - n));
            let err = diff / max_abs(a).max(max_abs(n)).max(1e-8);
            Ok(GroupCheck {
                group: name.clone(),
                max_relative_error: err,
                flagged: err.is_nan() || err >= tol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientCheckReport { groups, tolerance: tol })
}

/// [`backward`] checked against central differences.
pub fn gradient_check(
    net: &DeepNet,
    instance: &[ArrayView1<f64>],
    targets: &[Option<TaskTarget>],
    eps: f64,
    tol: f64,
) -> Result<GradientCheckReport> {
    let analytic = backward(net, instance, targets)?;
    gradient_check_against(net, instance, targets, &analytic, eps, tol)
}

/// View matrices in net order with one target column per head.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub views: Vec<Array2<f64>>,
    /// `targets[head][row]`.
    pub targets: Vec<Vec<Option<TaskTarget>>>,
}

impl TrainingSet {
    pub fn new(net: &DeepNet, views: Vec<Array2<f64>>, targets: Vec<Vec<Option<TaskTarget>>>) -> Result<Self> {
        if views.len() != net.views.len() {
            return Err(Error::dim("training views", net.views.len(), views.len()));
        }
        if targets.len() != net.heads.len() {
            return Err(Error::dim("target columns", net.heads.len(), targets.len()));
        }
        let rows = views.first().map_or(0, |v| v.nrows());
        for (layer, v) in net.views.iter().zip(&views) {
            if v.nrows() != rows || v.ncols() != layer.spec.dim {
                return Err(Error::MissingView(layer.spec.name.clone()));
            }
        }
        for (head, column) in net.heads.iter().zip(&targets) {
            if column.len() != rows {
                return Err(Error::dim("target rows", rows, column.len()));
            }
            for t in column.iter().flatten() {
                head.validate_target(t)?;
            }
        }
        Ok(TrainingSet { views, targets })
    }

    /// Rows `rows` of `dataset`; head `i` reads the target column named
    /// `target_names[i]`, or none at all.
    pub fn from_dataset(
        net: &DeepNet,
        dataset: &Dataset,
        rows: &[usize],
        target_names: &[Option<&str>],
    ) -> Result<Self> {
        let views = view_matrices(net, dataset)?
            .into_iter()
            .map(|v| v.select(Axis(0), rows))
            .collect();
        if target_names.len() != net.heads.len() {
            return Err(Error::dim("head target bindings", net.heads.len(), target_names.len()));
        }
        let targets = net
            .heads
            .iter()
            .zip(target_names)
            .map(|(head, name)| match name {
                None => Ok(vec![None; rows.len()]),
                Some(name) => {
                    let column = dataset
                        .target(name)
                        .ok_or_else(|| Error::Config(format!("head `{}` reads unknown target `{name}`", head.name)))?;
                    if column.kind != head.kind {
                        return Err(Error::Config(format!(
                            "head `{}` is {} but target `{name}` is {}",
                            head.name, head.kind, column.kind
                        )));
                    }
                    if column.labels != head.labels {
                        return Err(Error::Config(format!(
                            "head `{}` and target `{name}` declare different labels",
                            head.name
                        )));
                    }
                    Ok(column.select(rows))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TrainingSet::new(net, views, targets)
    }

    pub fn len(&self) -> usize {
        self.views.first().map_or(0, |v| v.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_targets(&self, row: usize) -> Vec<Option<TaskTarget>> {
        self.targets.iter().map(|c| c[row].clone()).collect()
    }

    fn instance(&self, row: usize) -> Vec<ArrayView1<'_, f64>> {
        self.views.iter().map(|v| v.row(row)).collect()
    }
}

/// Rows are reduced in chunks of this size so the summation order never
/// depends on the thread count.
const CHUNK: usize = 16;

/// Mean loss and mean gradient over `rows`.
fn batch_gradient(net: &DeepNet, set: &TrainingSet, rows: &[usize]) -> Result<(f64, GradientBundle)> {
    let partials = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = GradientBundle::zeros_like(net);
            let mut loss = 0.0;
            for &r in chunk {
                loss += accumulate(net, &set.instance(r), &set.row_targets(r), &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = GradientBundle::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grad.add_scaled(g, 1.0);
    }
    let scale = 1.0 / rows.len().max(1) as f64;
    grad.scale(scale);
    grad.check_finite()?;
    Ok((loss * scale, grad))
}

/// Mean weighted loss over all rows: total, then per head.
pub fn mean_losses(net: &DeepNet, set: &TrainingSet) -> Result<(f64, Vec<f64>)> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let partials = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sums = vec![0.0; net.heads.len()];
            for &r in chunk {
                let targets = set.row_targets(r);
                if targets.iter().all(Option::is_none) {
                    continue;
                }
                let act = activations(net, &set.instance(r))?;
                for (s, l) in sums.iter_mut().zip(head_losses(net, act.top.view(), &targets)?) {
                    *s += l;
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_head = vec![0.0; net.heads.len()];
    for sums in &partials {
        for (p, s) in per_head.iter_mut().zip(sums) {
            *p += s;
        }
    }
    let n = set.len().max(1) as f64;
    per_head.iter_mut().for_each(|p| *p /= n);
    Ok((per_head.iter().sum(), per_head))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub per_head: Vec<f64>,
}

/// Mean training loss at initialization (epoch 0) and after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    pub heads: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string(), "total".to_string()];
        header.extend(self.heads.iter().cloned());
        w.write_record(&header).expect("writing to memory");
        for row in &self.rows {
            let mut record = vec![row.epoch.to_string(), row.total.to_string()];
            record.extend(row.per_head.iter().map(f64::to_string));
            w.write_record(&record).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub net: DeepNet,
    pub trace: LossTrace,
}

fn divergence(net: &DeepNet, epoch: usize, batch: usize) -> Result<()> {
    for (name, view) in param_views(net) {
        if let Some(x) = view.iter().find(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                layer: "finetune".into(),
                epoch,
                batch,
                detail: format!("{name} reached {x}"),
            });
        }
    }
    Ok(())
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Trains every parameter of `net` on `set`.
pub fn finetune(net: &DeepNet, set: &TrainingSet, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    cfg.validate()?;
    let mut net = net.clone();
    for (name, &w) in &cfg.task_weights {
        net.head_mut(name)
            .ok_or_else(|| Error::Config(format!("task weight given for unknown head `{name}`")))?
            .task_weight = w;
    }
    let mut trace = LossTrace {
        heads: net.heads.iter().map(|h| h.name.clone()).collect(),
        rows: Vec::with_capacity(cfg.epochs + 1),
    };
    let record = |net: &DeepNet, epoch: usize, trace: &mut LossTrace| -> Result<()> {
        let (total, per_head) = mean_losses(net, set)?;
        trace.rows.push(TraceRow { epoch, total, per_head });
        Ok(())
    };
    record(&net, 0, &mut trace)?;
    if cfg.epochs == 0 || set.is_empty() || net.heads.is_empty() {
        for epoch in 1..=cfg.epochs {
            record(&net, epoch, &mut trace)?;
        }
        return Ok(FinetuneResult { net, trace });
    }
    let gradient = |net: &DeepNet, rows: &[usize]| -> Result<(f64, Vec<f64>)> {
        let (loss, mut g) = batch_gradient(net, set, rows)?;
        if !cfg.train_visible_biases {
            g.zero_visible_biases();
        }
        Ok((loss, g.flatten()))
    };

    match cfg.optimizer {
        Optimizer::Sgd => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            let mut order: Vec<usize> = (0..set.len()).collect();
            let mut theta = flatten_params(&net);
            let mut velocity = vec![0.0; theta.len()];
            for epoch in 1..=cfg.epochs {
                order.shuffle(&mut rng);
                for (batch, rows) in order.chunks(cfg.minibatch_size).enumerate() {
                    let (_, g) = gradient(&net, rows)?;
                    for ((v, t), g) in velocity.iter_mut().zip(theta.iter_mut()).zip(&g) {
                        *v = cfg.momentum * *v - cfg.learning_rate * g;
                        *t += *v;
                    }
                    assign_params(&mut net, &theta)?;
                    divergence(&net, epoch, batch)?;
                }
                record(&net, epoch, &mut trace)?;
            }
        }
        Optimizer::Cg => {
            const ARMIJO: f64 = 1e-4;
            const MAX_HALVINGS: usize = 50;
            let all: Vec<usize> = (0..set.len()).collect();
            let mut theta = flatten_params(&net);
            let (mut loss, mut g) = gradient(&net, &all)?;
            let mut dir: Vec<f64> = g.iter().map(|x| -x).collect();
            let mut since_restart = 0;
            let mut step = cfg.learning_rate;
            let mut probe = net.clone();
            for epoch in 1..=cfg.epochs {
                let mut slope = dot(&g, &dir);
                if slope >= 0.0 {
                    dir = g.iter().map(|x| -x).collect();
                    slope = dot(&g, &dir);
                    since_restart = 0;
                }
                let mut alpha = step;
                let mut accepted = None;
                if slope < 0.0 {
                    for _ in 0..MAX_HALVINGS {
                        let mut trial = theta.clone();
                        axpy(&mut trial, alpha, &dir);
                        assign_params(&mut probe, &trial)?;
                        let (trial_loss, _) = mean_losses(&probe, set)?;
                        if trial_loss.is_finite() && trial_loss <= loss + ARMIJO * alpha * slope {
                            accepted = Some(trial);
                            break;
                        }
                        alpha *= 0.5;
                    }
                }
                match accepted {
                    Some(next) => {
                        theta = next;
                        assign_params(&mut net, &theta)?;
                        divergence(&net, epoch, 0)?;
                        let (next_loss, next_g) = gradient(&net, &all)?;
                        since_restart += 1;
                        let beta = if since_restart >= cfg.cg_restart {
                            since_restart = 0;
                            0.0
                        } else {
                            let diff: Vec<f64> = next_g.iter().zip(&g).map(|(a, b)| a - b).collect();
                            (dot(&next_g, &diff) / dot(&g, &g).max(f64::MIN_POSITIVE)).max(0.0)
                        };
                        dir = dir.iter().zip(&next_g).map(|(d, gn)| -gn + beta * d).collect();
                        loss = next_loss;
                        g = next_g;
                        step = 2.0 * alpha;
                    }
                    None => {
                        // No acceptable step along this direction: restart.
                        dir = g.iter().map(|x| -x).collect();
                        since_restart = 0;
                        step = cfg.learning_rate;
                    }
                }
                record(&net, epoch, &mut trace)?;
            }
        }
    }
    Ok(FinetuneResult { net, trace })
}
