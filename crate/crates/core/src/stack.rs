//! The two-layer multityped stack.
//!
//! Layer one is one typed RBM per view. Layer two is a binary RBM over the
//! concatenated view posteriors. Posterior probabilities, never samples,
//! feed the joint layer both while pretraining and at inference, so the
//! top-layer features are the deterministic map
//!
//! ```text
//! f_k = σ(b2_k + Σ_s Σ_m W2_smk · σ(b1_sm + Σ_i W1_sim v_si))
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{TaskHead, TaskKind};
use crate::rbm::{
    concat_columns, hidden_posterior, hidden_posteriors, read_f64s, read_u64, train_rbm_named, RbmParams,
    SparseCdConfig, TrainedRbm, UnitType, VisibleBatch,
};

/// Magic prefix of a serialized [`DeepNet`].
pub const NET_MAGIC: &[u8; 10] = b"MTDBN1-NET";

/// Declares one input view and the width of its first hidden layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub unit_type: UnitType,
    pub dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewLayer {
    pub spec: ViewSpec,
    pub params: RbmParams,
}

/// Per-view RBMs, the joint RBM and any attached task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepNet {
    pub views: Vec<ViewLayer>,
    pub joint: RbmParams,
    pub heads: Vec<TaskHead>,
}

impl DeepNet {
    pub fn new(views: Vec<ViewLayer>, joint: RbmParams, heads: Vec<TaskHead>) -> Result<Self> {
        let net = DeepNet { views, joint, heads };
        net.validate()?;
        Ok(net)
    }

    /// A net with every parameter zero; mostly useful in tests.
    pub fn zeros(specs: &[ViewSpec], top_hidden: usize) -> Result<Self> {
        let views = specs
            .iter()
            .map(|s| ViewLayer {
                spec: s.clone(),
                params: RbmParams::zeros(s.unit_type, s.dim, s.hidden),
            })
            .collect::<Vec<_>>();
        let joint_in = specs.iter().map(|s| s.hidden).sum();
        DeepNet::new(views, RbmParams::zeros(UnitType::Binary, joint_in, top_hidden), vec![])
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("a net needs at least one view".into()));
        }
        let mut names = std::collections::HashSet::new();
        for layer in &self.views {
            let s = &layer.spec;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("view `{}` declared twice", s.name)));
            }
            if s.dim == 0 || s.hidden == 0 {
                return Err(Error::Config(format!("view `{}` needs positive sizes", s.name)));
            }
            if layer.params.unit_type != s.unit_type
                || layer.params.n_visible() != s.dim
                || layer.params.n_hidden() != s.hidden
            {
                return Err(Error::Config(format!(
                    "view `{}` parameters do not match its spec",
                    s.name
                )));
            }
        }
        if self.joint.unit_type != UnitType::Binary {
            return Err(Error::Config("the joint layer must be binary".into()));
        }
        if self.joint.n_visible() != self.joint_input_dim() {
            return Err(Error::dim(
                "joint input",
                self.joint_input_dim(),
                self.joint.n_visible(),
            ));
        }
        let mut head_names = std::collections::HashSet::new();
        for head in &self.heads {
            if !head_names.insert(head.name.as_str()) {
                return Err(Error::Config(format!("head `{}` attached twice", head.name)));
            }
            if head.width() != self.top_dim() {
                return Err(Error::dim("head width", self.top_dim(), head.width()));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ViewSpec> {
        self.views.iter().map(|v| v.spec.clone()).collect()
    }

    /// `Σ_s K_s`.
    pub fn joint_input_dim(&self) -> usize {
        self.views.iter().map(|v| v.spec.hidden).sum()
    }

    pub fn top_dim(&self) -> usize {
        self.joint.n_hidden()
    }

    pub fn head(&self, name: &str) -> Option<&TaskHead> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn head_mut(&mut self, name: &str) -> Option<&mut TaskHead> {
        self.heads.iter_mut().find(|h| h.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::Format {
            what: "net container",
            detail: e.to_string(),
        })?;
        Ok(buf)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let manifest = NetManifest {
            format: crate::FORMAT.into(),
            views: self.specs(),
            top_hidden: self.top_dim(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadManifest {
                    name: h.name.clone(),
                    kind: h.kind,
                    labels: h.labels.clone(),
                    threshold: h.threshold,
                    task_weight: h.task_weight,
                    auxiliary: h.auxiliary,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
        out.write_all(NET_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for layer in &self.views {
            layer.params.write_to(out)?;
        }
        self.joint.write_to(out)?;
        for head in &self.heads {
            for x in head.weights.iter().chain(head.bias.iter()) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "net container",
            detail,
        };
        let mut magic = [0u8; 10];
        input.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != NET_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let len = read_u64(input).map_err(|e| bad(e.to_string()))? as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
        let manifest: NetManifest = serde_json::from_slice(&json)?;
        if manifest.format != crate::FORMAT {
            return Err(bad(format!("unsupported format `{}`", manifest.format)));
        }
        let views = manifest
            .views
            .into_iter()
            .map(|spec| {
                Ok(ViewLayer {
                    spec,
                    params: RbmParams::read_from(input)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let joint = RbmParams::read_from(input)?;
        let width = manifest.top_hidden;
        let mut heads = Vec::with_capacity(manifest.heads.len());
        for h in manifest.heads {
            let mut head = TaskHead::new(h.name, h.kind, h.labels, width)?;
            let rows = head.outputs();
            let values = read_f64s(input, rows * width + rows).map_err(|e| bad(e.to_string()))?;
            head.weights = Array2::from_shape_vec((rows, width), values[..rows * width].to_vec())
                .map_err(|e| bad(e.to_string()))?;
            head.bias = Array1::from(values[rows * width..].to_vec());
            head.threshold = h.threshold;
            head.task_weight = h.task_weight;
            head.auxiliary = h.auxiliary;
            heads.push(head);
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        DeepNet::new(views, joint, heads)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct NetManifest {
    format: String,
    views: Vec<ViewSpec>,
    top_hidden: usize,
    heads: Vec<HeadManifest>,
}

#[derive(Serialize, Deserialize)]
struct HeadManifest {
    name: String,
    kind: TaskKind,
    labels: Vec<String>,
    threshold: Option<f64>,
    task_weight: f64,
    auxiliary: bool,
}

/// Output of layer-one pretraining, in declaration order.
#[derive(Clone, Debug)]
pub struct PretrainedViews {
    pub layers: Vec<ViewLayer>,
    /// Hidden posteriors of every training row, one matrix per view.
    pub posteriors: Vec<Array2<f64>>,
    pub traces: Vec<Vec<f64>>,
}

/// Trains one typed RBM per declared view, independently.
pub fn pretrain_views(dataset: &Dataset, specs: &[ViewSpec], configs: &[SparseCdConfig]) -> Result<PretrainedViews> {
    if specs.len() != configs.len() {
        return Err(Error::dim("per-view configs", specs.len(), configs.len()));
    }
    let mut out = PretrainedViews {
        layers: Vec::with_capacity(specs.len()),
        posteriors: Vec::with_capacity(specs.len()),
        traces: Vec::with_capacity(specs.len()),
    };
    for (spec, cfg) in specs.iter().zip(configs) {
        let view = dataset
            .view(&spec.name)
            .filter(|v| v.data.nrows() == dataset.len())
            .ok_or_else(|| Error::MissingView(spec.name.clone()))?;
        if view.unit_type != spec.unit_type || view.data.ncols() != spec.dim {
            return Err(Error::Config(format!(
                "view `{}` is {} with {} columns but declared {} with {}",
                spec.name,
                view.unit_type,
                view.data.ncols(),
                spec.unit_type,
                spec.dim
            )));
        }
        let batch = VisibleBatch::new(spec.unit_type, view.data.clone())?;
        let TrainedRbm { params, trace } = train_rbm_named(&batch, spec.hidden, cfg, &spec.name)?;
        out.posteriors.push(hidden_posteriors(&params, batch.data())?);
        out.layers.push(ViewLayer {
            spec: spec.clone(),
            params,
        });
        out.traces.push(trace);
    }
    Ok(out)
}

/// Trains the joint binary RBM on the row-wise concatenation of the view
/// posteriors, fed as probabilities.
pub fn pretrain_joint(posteriors: &[Array2<f64>], top_hidden: usize, cfg: &SparseCdConfig) -> Result<TrainedRbm> {
    if posteriors.is_empty() {
        return Err(Error::Contract("joint pretraining needs at least one view".into()));
    }
    let input = concat_columns(posteriors)?;
    let batch = VisibleBatch::from_probabilities(input)?;
    train_rbm_named(&batch, top_hidden, cfg, "joint")
}

/// Reconstruction traces of a full unsupervised pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainTraces {
    pub views: Vec<(String, Vec<f64>)>,
    pub joint: Vec<f64>,
}

/// Layer one, then layer two; returns a net with no heads.
pub fn pretrain(
    dataset: &Dataset,
    specs: &[ViewSpec],
    view_configs: &[SparseCdConfig],
    top_hidden: usize,
    joint_config: &SparseCdConfig,
) -> Result<(DeepNet, PretrainTraces)> {
    let lower = pretrain_views(dataset, specs, view_configs)?;
    let joint = pretrain_joint(&lower.posteriors, top_hidden, joint_config)?;
    let traces = PretrainTraces {
        views: specs.iter().map(|s| s.name.clone()).zip(lower.traces).collect(),
        joint: joint.trace,
    };
    Ok((DeepNet::new(lower.layers, joint.params, vec![])?, traces))
}

fn check_instance(net: &DeepNet, instance: &[ArrayView1<f64>]) -> Result<()> {
    if instance.len() != net.views.len() {
        return Err(Error::dim("instance views", net.views.len(), instance.len()));
    }
    for (layer, v) in net.views.iter().zip(instance) {
        if v.len() != layer.spec.dim {
            return Err(Error::MissingView(layer.spec.name.clone()));
        }
        if let Some((col, &value)) = v.iter().enumerate().find(|(_, &x)| !layer.spec.unit_type.admits(x)) {
            return Err(Error::Domain {
                unit: layer.spec.unit_type.as_str(),
                row: 0,
                col,
                value,
            });
        }
    }
    Ok(())
}

/// First-layer posteriors concatenated in view order.
pub(crate) fn lower_features(net: &DeepNet, instance: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let mut x = Array1::zeros(net.joint_input_dim());
    let mut offset = 0;
    for (layer, v) in net.views.iter().zip(instance) {
        let h = hidden_posterior(&layer.params, *v)?;
        x.slice_mut(ndarray::s![offset..offset + h.len()]).assign(&h);
        offset += h.len();
    }
    Ok(x)
}

/// Top-layer features of one instance; `instance[s]` is view `s` in net order.
pub fn forward(net: &DeepNet, instance: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    check_instance(net, instance)?;
    let x = lower_features(net, instance)?;
    hidden_posterior(&net.joint, x.view())
}

/// View matrices of `dataset` in the net's view order.
pub fn view_matrices<'a>(net: &DeepNet, dataset: &'a Dataset) -> Result<Vec<ArrayView2<'a, f64>>> {
    net.views
        .iter()
        .map(|layer| {
            let view = dataset
                .view(&layer.spec.name)
                .filter(|v| v.data.nrows() == dataset.len())
                .ok_or_else(|| Error::MissingView(layer.spec.name.clone()))?;
            if view.unit_type != layer.spec.unit_type {
                return Err(Error::Config(format!(
                    "view `{}` is {} but the net expects {}",
                    layer.spec.name, view.unit_type, layer.spec.unit_type
                )));
            }
            Ok(view.data.view())
        })
        .collect()
}

/// [`forward`] applied to every row; row order is preserved.
pub fn embed_views(net: &DeepNet, views: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let rows = views.first().map_or(0, |v| v.nrows());
    if let Some(bad) = views.iter().find(|v| v.nrows() != rows) {
        return Err(Error::dim("view rows", rows, bad.nrows()));
    }
    let features: Vec<Array1<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let instance: Vec<ArrayView1<f64>> = views.iter().map(|v| v.row(r)).collect();
            forward(net, &instance)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows, net.top_dim()));
    for (r, f) in features.iter().enumerate() {
        out.row_mut(r).assign(f);
    }
    Ok(out)
}

pub fn embed_corpus(net: &DeepNet, dataset: &Dataset) -> Result<Array2<f64>> {
    embed_views(net, &view_matrices(net, dataset)?)
}
