//! Type-specific restricted Boltzmann machines.
//!
//! Three visible unit types share one bipartite structure and one hidden
//! posterior `P(h_k = 1 | v) = σ(b_k + Σ_i W_ik v_i)`; they differ only in the
//! energy and in the generative distribution `P(v_i | h)`:
//!
//! * binary: Bernoulli with mean `σ(a_i + Σ_k W_ik h_k)`
//! * real: unit-variance Gaussian with mean `μ_i(h) = a_i + Σ_k W_ik h_k`
//! * count: constrained Poisson with rate `λ_i(h) = M · softmax(μ(h))_i`,
//!   where `M` is the document length of the row being modelled.
//!
//! Training is sparse contrastive divergence (see [`cd_update`]).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::math::sigmoid;
use crate::math::{ln_factorial, log_sum_exp};

/// Magic prefix of a serialized [`RbmParams`] block.
pub const RBM_MAGIC: &[u8; 6] = b"MTDBN1";

/// Weights beyond this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitType {
    Binary,
    Real,
    Count,
}

impl UnitType {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitType::Binary => "binary",
            UnitType::Real => "real",
            UnitType::Count => "count",
        }
    }

    fn tag(self) -> u8 {
        match self {
            UnitType::Binary => 0,
            UnitType::Real => 1,
            UnitType::Count => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(UnitType::Binary),
            1 => Some(UnitType::Real),
            2 => Some(UnitType::Count),
            _ => None,
        }
    }

    /// Checks a single value against the strict domain of this unit type.
    pub fn admits(self, value: f64) -> bool {
        match self {
            UnitType::Binary => value == 0.0 || value == 1.0,
            UnitType::Real => value.is_finite(),
            UnitType::Count => value.is_finite() && value >= 0.0 && value.fract() == 0.0,
        }
    }
}

impl fmt::Display for UnitType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnitType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(UnitType::Binary),
            "real" => Ok(UnitType::Real),
            "count" => Ok(UnitType::Count),
            other => Err(Error::Config(format!("unknown unit type `{other}`"))),
        }
    }
}

/// Parameters of one RBM layer: `weights` is visible × hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    pub unit_type: UnitType,
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
}

impl RbmParams {
    pub fn new(
        unit_type: UnitType,
        weights: Array2<f64>,
        visible_bias: Array1<f64>,
        hidden_bias: Array1<f64>,
    ) -> Result<Self> {
        let (n, k) = weights.dim();
        if visible_bias.len() != n {
            return Err(Error::dim("visible bias", n, visible_bias.len()));
        }
        if hidden_bias.len() != k {
            return Err(Error::dim("hidden bias", k, hidden_bias.len()));
        }
        let params = RbmParams {
            unit_type,
            weights,
            visible_bias,
            hidden_bias,
        };
        if let Some(detail) = params.divergence() {
            return Err(Error::Contract(detail));
        }
        Ok(params)
    }

    pub fn zeros(unit_type: UnitType, n_visible: usize, n_hidden: usize) -> Self {
        RbmParams {
            unit_type,
            weights: Array2::zeros((n_visible, n_hidden)),
            visible_bias: Array1::zeros(n_visible),
            hidden_bias: Array1::zeros(n_hidden),
        }
    }

    /// Weights drawn from `Normal(0, std²)`, biases zero.
    pub fn random<R: Rng + ?Sized>(
        unit_type: UnitType,
        n_visible: usize,
        n_hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("weight std must be finite and nonnegative");
        let weights = Array2::from_shape_simple_fn((n_visible, n_hidden), || normal.sample(rng));
        RbmParams {
            weights,
            ..RbmParams::zeros(unit_type, n_visible, n_hidden)
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.ncols()
    }

    /// Describes the first non-finite or exploding parameter, if any.
    pub fn divergence(&self) -> Option<String> {
        if let Some(w) = self
            .weights
            .iter()
            .find(|w| !w.is_finite() || w.abs() > DIVERGENCE_LIMIT)
        {
            return Some(format!("weight value {w}"));
        }
        if self.visible_bias.iter().any(|x| !x.is_finite()) {
            return Some("non-finite visible bias".into());
        }
        if self.hidden_bias.iter().any(|x| !x.is_finite()) {
            return Some("non-finite hidden bias".into());
        }
        None
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(RBM_MAGIC)?;
        out.write_all(&[self.unit_type.tag()])?;
        out.write_all(&(self.n_visible() as u64).to_le_bytes())?;
        out.write_all(&(self.n_hidden() as u64).to_le_bytes())?;
        for x in self
            .weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
        {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "RBM block",
            detail,
        };
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != RBM_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag).map_err(|e| bad(e.to_string()))?;
        let unit_type = UnitType::from_tag(tag[0]).ok_or_else(|| bad(format!("unit tag {}", tag[0])))?;
        let n = read_u64(input).map_err(|e| bad(e.to_string()))? as usize;
        let k = read_u64(input).map_err(|e| bad(e.to_string()))? as usize;
        let count = n
            .checked_mul(k)
            .and_then(|nk| nk.checked_add(n + k))
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        let values = read_f64s(input, count).map_err(|e| bad(e.to_string()))?;
        let weights = Array2::from_shape_vec((n, k), values[..n * k].to_vec()).map_err(|e| bad(e.to_string()))?;
        let visible_bias = Array1::from(values[n * k..n * k + n].to_vec());
        let hidden_bias = Array1::from(values[n * k + n..].to_vec());
        RbmParams::new(unit_type, weights, visible_bias, hidden_bias)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(6 + 1 + 16 + 8 * (self.weights.len() + self.n_visible() + self.n_hidden()));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut raw = vec![0u8; count * 8];
    input.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Hyperparameters of sparse contrastive-divergence training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseCdConfig {
    pub learning_rate: f64,
    /// Desired activation probability of every hidden unit.
    pub sparsity_target: f64,
    pub sparsity_weight: f64,
    pub cd_steps: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for SparseCdConfig {
    fn default() -> Self {
        SparseCdConfig {
            learning_rate: 0.1,
            sparsity_target: 0.2,
            sparsity_weight: 0.01,
            cd_steps: 1,
            minibatch_size: 100,
            epochs: 20,
            rng_seed: 0,
        }
    }
}

impl SparseCdConfig {
    /// Defaults with the learning rate suited to the unit type:
    /// 0.1 for binary, 0.01 for real and 0.02 for count units.
    pub fn for_unit(unit_type: UnitType) -> Self {
        let learning_rate = match unit_type {
            UnitType::Binary => 0.1,
            UnitType::Real => 0.01,
            UnitType::Count => 0.02,
        };
        SparseCdConfig {
            learning_rate,
            ..Default::default()
        }
    }

    /// Checks the ranges the update rule relies on. A zero learning rate is
    /// accepted so that the update can be exercised as an identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(self.sparsity_target > 0.0 && self.sparsity_target < 1.0) {
            return Err(Error::Config(format!(
                "sparsity_target {} must lie in (0, 1)",
                self.sparsity_target
            )));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return Err(Error::Config(format!(
                "sparsity_weight {} must be >= 0",
                self.sparsity_weight
            )));
        }
        if self.cd_steps == 0 {
            return Err(Error::Config("cd_steps must be positive".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A block of visible rows of one unit type. Count batches carry the
/// per-row document length `M = Σ_i v_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleBatch {
    unit_type: UnitType,
    data: Array2<f64>,
    doc_lengths: Option<Array1<f64>>,
}

impl VisibleBatch {
    /// Validates every entry against the strict domain of `unit_type`.
    pub fn new(unit_type: UnitType, data: Array2<f64>) -> Result<Self> {
        for ((row, col), &value) in data.indexed_iter() {
            if !unit_type.admits(value) {
                return Err(Error::Domain {
                    unit: unit_type.as_str(),
                    row,
                    col,
                    value,
                });
            }
        }
        let doc_lengths = (unit_type == UnitType::Count).then(|| data.sum_axis(Axis(1)));
        Ok(VisibleBatch {
            unit_type,
            data,
            doc_lengths,
        })
    }

    /// A binary batch whose entries are probabilities in `[0, 1]` rather than
    /// samples. This is how the joint layer consumes lower-layer posteriors.
    pub fn from_probabilities(data: Array2<f64>) -> Result<Self> {
        for ((row, col), &value) in data.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Domain {
                    unit: "probability",
                    row,
                    col,
                    value,
                });
            }
        }
        Ok(VisibleBatch {
            unit_type: UnitType::Binary,
            data,
            doc_lengths: None,
        })
    }

    pub fn unit_type(&self) -> UnitType {
        self.unit_type
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn doc_length(&self, row: usize) -> Option<f64> {
        self.doc_lengths.as_ref().map(|m| m[row])
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(context, expected, actual));
    }
    Ok(())
}

/// Energy `E(v, h)` of a joint configuration under the unit type's energy.
pub fn energy(params: &RbmParams, v: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
    check_len("energy visible vector", params.n_visible(), v.len())?;
    check_len("energy hidden vector", params.n_hidden(), h.len())?;
    for (col, &x) in v.iter().enumerate() {
        if !params.unit_type.admits(x) {
            return Err(Error::Domain {
                unit: params.unit_type.as_str(),
                row: 0,
                col,
                value: x,
            });
        }
    }
    if let Some((col, &x)) = h.iter().enumerate().find(|(_, &x)| x != 0.0 && x != 1.0) {
        return Err(Error::Domain {
            unit: "hidden",
            row: 0,
            col,
            value: x,
        });
    }
    let interaction = v.dot(&params.weights.dot(&h));
    let hidden_term = params.hidden_bias.dot(&h);
    let visible_term = match params.unit_type {
        UnitType::Binary => -params.visible_bias.dot(&v),
        UnitType::Real => 0.5 * (&v - &params.visible_bias).mapv(|d| d * d).sum(),
        UnitType::Count => v
            .iter()
            .zip(params.visible_bias.iter())
            .map(|(&vi, &ai)| ln_factorial(vi) - ai * vi)
            .sum(),
    };
    Ok(visible_term - hidden_term - interaction)
}

/// `P(h_k = 1 | v) = σ(b_k + Σ_i W_ik v_i)`, the same for every unit type.
pub fn hidden_posterior(params: &RbmParams, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_len("visible vector", params.n_visible(), v.len())?;
    let mut z = v.dot(&params.weights);
    z += &params.hidden_bias;
    Ok(z.mapv_into(sigmoid))
}

/// Row-wise [`hidden_posterior`] over a data matrix.
pub fn hidden_posteriors(params: &RbmParams, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_len("visible matrix columns", params.n_visible(), data.ncols())?;
    let mut z = data.dot(&params.weights);
    z += &params.hidden_bias;
    Ok(z.mapv_into(sigmoid))
}

/// Mean of `P(v | h)`: Bernoulli probabilities, Gaussian means, or
/// constrained-Poisson rates that sum to `doc_length`.
pub fn visible_mean(params: &RbmParams, h: ArrayView1<f64>, doc_length: Option<f64>) -> Result<Array1<f64>> {
    check_len("hidden vector", params.n_hidden(), h.len())?;
    let mut mu = params.weights.dot(&h);
    mu += &params.visible_bias;
    match params.unit_type {
        UnitType::Binary => Ok(mu.mapv_into(sigmoid)),
        UnitType::Real => Ok(mu),
        UnitType::Count => {
            let m =
                doc_length.ok_or_else(|| Error::Contract("count visible mean requires the document length".into()))?;
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Contract(format!("document length {m} must be >= 0")));
            }
            let log_norm = log_sum_exp(mu.iter().copied());
            Ok(mu.mapv_into(|x| m * (x - log_norm).exp()))
        }
    }
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Draws `h_k ~ Bernoulli(P(h_k = 1 | v))` independently.
pub fn sample_hidden<R: Rng + ?Sized>(params: &RbmParams, v: ArrayView1<f64>, rng: &mut R) -> Result<Array1<f64>> {
    Ok(hidden_posterior(params, v)?.mapv_into(|p| bernoulli(p, rng)))
}

/// Draws a visible vector from `P(v | h)` for the layer's unit type.
pub fn sample_visible<R: Rng + ?Sized>(
    params: &RbmParams,
    h: ArrayView1<f64>,
    doc_length: Option<f64>,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let mean = visible_mean(params, h, doc_length)?;
    match params.unit_type {
        UnitType::Binary => Ok(mean.mapv_into(|p| bernoulli(p, rng))),
        UnitType::Real => {
            let mut out = mean;
            for x in out.iter_mut() {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                *x += noise;
            }
            Ok(out)
        }
        UnitType::Count => {
            let mut out = mean;
            for x in out.iter_mut() {
                *x = if *x > 0.0 {
                    Poisson::new(*x)
                        .map_err(|e| Error::Contract(format!("poisson rate {x}: {e}")))?
                        .sample(rng)
                } else {
                    0.0
                };
            }
            Ok(out)
        }
    }
}

fn divergence_error(detail: String) -> Error {
    Error::Divergence {
        layer: "rbm".into(),
        epoch: 0,
        batch: 0,
        detail,
    }
}

/// One sparse CD step averaged over every row of `batch`.
///
/// Positive statistics use the data `v` and posterior `h̄`. The negative
/// chain starts at `v`: `ĥ ~ P(h | v)`, then `cd_steps - 1` further
/// alternations `v' ~ P(v | ĥ)`, `ĥ ~ P(h | v')`. The reconstruction
/// statistic is the type-specific mean `v̄ = E[v | ĥ]`. Updates:
///
/// ```text
/// W_ik += η (v_i h̄_k − v̄_i ĥ_k) + γ v_i (q − h̄_k)
/// b_k  += η (h̄_k − ĥ_k) + γ (q − h̄_k)
/// a_i  += η (v_i − v̄_i)
/// ```
pub fn cd_update<R: Rng + ?Sized>(
    params: &RbmParams,
    batch: &VisibleBatch,
    cfg: &SparseCdConfig,
    rng: &mut R,
) -> Result<RbmParams> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    cd_update_rows(params, batch, &rows, cfg, rng)
}

pub(crate) fn cd_update_rows<R: Rng + ?Sized>(
    params: &RbmParams,
    batch: &VisibleBatch,
    rows: &[usize],
    cfg: &SparseCdConfig,
    rng: &mut R,
) -> Result<RbmParams> {
    if batch.unit_type() != params.unit_type {
        return Err(Error::Contract(format!(
            "batch of {} units fed to a {} RBM",
            batch.unit_type(),
            params.unit_type
        )));
    }
    check_len("batch columns", params.n_visible(), batch.dim())?;
    if rows.is_empty() {
        return Ok(params.clone());
    }
    let (n, k) = params.weights.dim();
    let q = cfg.sparsity_target;

    let mut data_rows = Array2::zeros((rows.len(), n));
    let mut posteriors = Array2::zeros((rows.len(), k));
    let mut recon = Array2::zeros((rows.len(), n));
    let mut hidden_samples = Array2::zeros((rows.len(), k));

    for (slot, &row) in rows.iter().enumerate() {
        let v = batch.data.row(row);
        let m = batch.doc_length(row);
        let h_bar = hidden_posterior(params, v)?;
        let mut h_hat = h_bar.mapv(|p| bernoulli(p, rng));
        for _ in 1..cfg.cd_steps {
            let v_sample = sample_visible(params, h_hat.view(), m, rng)?;
            h_hat = sample_hidden(params, v_sample.view(), rng)?;
        }
        let v_bar = visible_mean(params, h_hat.view(), m)?;
        data_rows.row_mut(slot).assign(&v);
        posteriors.row_mut(slot).assign(&h_bar);
        recon.row_mut(slot).assign(&v_bar);
        hidden_samples.row_mut(slot).assign(&h_hat);
    }

    let scale = 1.0 / rows.len() as f64;
    let sparsity_residual = posteriors.mapv(|h| q - h);
    let positive = data_rows.t().dot(&posteriors);
    let negative = recon.t().dot(&hidden_samples);
    let sparse_w = data_rows.t().dot(&sparsity_residual);

    let mut next = params.clone();
    next.weights
        .scaled_add(cfg.learning_rate * scale, &(positive - negative));
    next.weights.scaled_add(cfg.sparsity_weight * scale, &sparse_w);

    let hidden_delta = posteriors.sum_axis(Axis(0)) - hidden_samples.sum_axis(Axis(0));
    next.hidden_bias.scaled_add(cfg.learning_rate * scale, &hidden_delta);
    next.hidden_bias
        .scaled_add(cfg.sparsity_weight * scale, &sparsity_residual.sum_axis(Axis(0)));

    let visible_delta = data_rows.sum_axis(Axis(0)) - recon.sum_axis(Axis(0));
    next.visible_bias.scaled_add(cfg.learning_rate * scale, &visible_delta);

    match next.divergence() {
        Some(detail) => Err(divergence_error(detail)),
        None => Ok(next),
    }
}

/// Mean per-row reconstruction loss under the deterministic mean-field pass
/// `v → h̄(v) → E[v | h̄]`: Bernoulli cross-entropy for binary units,
/// half squared error for real units and multinomial cross-entropy
/// `−Σ v_i log(λ_i / M)` for count units.
pub fn reconstruction_error(params: &RbmParams, batch: &VisibleBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let posteriors = hidden_posteriors(params, batch.data())?;
    let mut total = 0.0;
    for (row, v) in batch.data.outer_iter().enumerate() {
        let mean = visible_mean(params, posteriors.row(row), batch.doc_length(row))?;
        total += match params.unit_type {
            UnitType::Binary => v
                .iter()
                .zip(mean.iter())
                .map(|(&x, &p)| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    -(x * p.ln() + (1.0 - x) * (1.0 - p).ln())
                })
                .sum::<f64>(),
            UnitType::Real => 0.5 * (&v - &mean).mapv(|d| d * d).sum(),
            UnitType::Count => {
                let m = batch.doc_length(row).unwrap_or(0.0);
                if m > 0.0 {
                    v.iter()
                        .zip(mean.iter())
                        .filter(|(&x, _)| x > 0.0)
                        .map(|(&x, &rate)| -x * (rate / m).max(1e-300).ln())
                        .sum::<f64>()
                } else {
                    0.0
                }
            }
        };
    }
    Ok(total / batch.len() as f64)
}

/// Trained parameters plus the reconstruction-error trace. `trace[0]` is
/// measured at initialization and `trace[e]` after epoch `e`.
#[derive(Clone, Debug)]
pub struct TrainedRbm {
    pub params: RbmParams,
    pub trace: Vec<f64>,
}

/// Initial weight scale.
pub const INIT_WEIGHT_STD: f64 = 0.01;

/// Trains a fresh RBM with `n_hidden` units on `batch`: weights start at
/// `Normal(0, 0.01²)`, biases at zero, and each epoch visits the rows in a
/// freshly shuffled order, one [`cd_update`] per minibatch.
pub fn train_rbm(batch: &VisibleBatch, n_hidden: usize, cfg: &SparseCdConfig) -> Result<TrainedRbm> {
    train_rbm_named(batch, n_hidden, cfg, "rbm")
}

pub(crate) fn train_rbm_named(
    batch: &VisibleBatch,
    n_hidden: usize,
    cfg: &SparseCdConfig,
    layer: &str,
) -> Result<TrainedRbm> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract(format!("{layer}: no training rows")));
    }
    if n_hidden == 0 {
        return Err(Error::Config(format!("{layer}: hidden size must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = RbmParams::random(batch.unit_type(), batch.dim(), n_hidden, INIT_WEIGHT_STD, &mut rng);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    trace.push(reconstruction_error(&params, batch)?);

    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (index, chunk) in order.chunks(cfg.minibatch_size).enumerate() {
            params = cd_update_rows(&params, batch, chunk, cfg, &mut rng).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    layer: layer.to_string(),
                    epoch,
                    batch: index,
                    detail,
                },
                other => other,
            })?;
        }
        trace.push(reconstruction_error(&params, batch)?);
    }
    Ok(TrainedRbm { params, trace })
}

/// Concatenates hidden posterior matrices column-wise; all must share a row count.
pub fn concat_columns(blocks: &[Array2<f64>]) -> Result<Array2<f64>> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut offset = 0;
    for block in blocks {
        check_len("posterior block rows", rows, block.nrows())?;
        out.slice_mut(s![.., offset..offset + block.ncols()]).assign(block);
        offset += block.ncols();
    }
    Ok(out)
}
