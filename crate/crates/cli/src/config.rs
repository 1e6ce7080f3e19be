//! The JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mtdbn::data::CountRounding;
use mtdbn::metrics::{ApMode, NdcgIdeal, RetrievalSettings};
use mtdbn::{Dataset, FinetuneConfig, SparseCdConfig, TaskKind, UnitType};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest, relative to the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub architecture: Architecture,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub heads: Vec<HeadDecl>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory the relative paths above are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Unit L2 norm per row, then train-split z-scoring, on real views.
    pub normalize_real: bool,
    /// `log(1 + c)` on count views; `null` leaves counts untouched.
    pub count_rounding: Option<CountRounding>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            normalize_real: true,
            count_rounding: Some(CountRounding::Round),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewArch {
    pub name: String,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub views: Vec<ViewArch>,
    pub top_hidden: usize,
}

/// CD settings per visible unit type plus the joint layer. Fields left out
/// of the JSON keep the unit type's defaults, including its learning rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainConfig {
    pub binary: SparseCdConfig,
    pub real: SparseCdConfig,
    pub count: SparseCdConfig,
    pub joint: SparseCdConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            binary: SparseCdConfig::for_unit(UnitType::Binary),
            real: SparseCdConfig::for_unit(UnitType::Real),
            count: SparseCdConfig::for_unit(UnitType::Count),
            joint: SparseCdConfig::for_unit(UnitType::Binary),
        }
    }
}

impl PretrainConfig {
    pub fn for_unit(&self, unit: UnitType) -> &SparseCdConfig {
        match unit {
            UnitType::Binary => &self.binary,
            UnitType::Real => &self.real,
            UnitType::Count => &self.count,
        }
    }
}

fn overlay<E: serde::de::Error>(base: SparseCdConfig, patch: Value) -> Result<SparseCdConfig, E> {
    let Value::Object(patch) = patch else {
        return Err(E::custom("expected an object of CD settings"));
    };
    let mut merged = serde_json::to_value(base).map_err(E::custom)?;
    let obj = merged.as_object_mut().expect("configs serialize as objects");
    for (k, v) in patch {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(E::custom)
}

impl<'de> Deserialize<'de> for PretrainConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = BTreeMap::<String, Value>::deserialize(d)?;
        let mut cfg = PretrainConfig::default();
        for (key, patch) in raw {
            let slot = match key.as_str() {
                "binary" => &mut cfg.binary,
                "real" => &mut cfg.real,
                "count" => &mut cfg.count,
                "joint" => &mut cfg.joint,
                other => {
                    return Err(D::Error::unknown_field(other, &["binary", "real", "count", "joint"]));
                }
            };
            *slot = overlay(slot.clone(), patch)?;
        }
        Ok(cfg)
    }
}

/// A supervised head and the target column it learns from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDecl {
    pub name: String,
    /// Target column; defaults to the head name.
    #[serde(default)]
    pub target: Option<String>,
    /// Must agree with the target column when given.
    #[serde(default)]
    pub kind: Option<TaskKind>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub auxiliary: bool,
}

fn one() -> f64 {
    1.0
}

impl HeadDecl {
    pub fn target_name(&self) -> &str {
        self.target.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub t_map: usize,
    pub t_ndcg: usize,
    pub knn_k: usize,
    /// Multilabel target whose shared labels define relevance.
    pub relevance: String,
    pub ap_mode: ApMode,
    pub ndcg_ideal: NdcgIdeal,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            t_map: 100,
            t_ndcg: 10,
            knn_k: 30,
            relevance: "concepts".into(),
            ap_mode: ApMode::Cutoff,
            ndcg_ideal: NdcgIdeal::AllRelevant,
        }
    }
}

impl EvalConfig {
    pub fn retrieval_settings(&self) -> RetrievalSettings {
        RetrievalSettings {
            t_map: self.t_map,
            t_ndcg: self.t_ndcg,
            ap_mode: self.ap_mode,
            ndcg_ideal: self.ndcg_ideal,
        }
    }
}

/// SplitMix64 step; decorrelates the per-stage seeds drawn from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_json(&text, &base)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.base_dir.join(&self.dataset)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.architecture.views.is_empty() {
            return bad("architecture declares no views".into());
        }
        if self.architecture.top_hidden == 0 || self.architecture.views.iter().any(|v| v.hidden == 0) {
            return bad("hidden layer sizes must be positive".into());
        }
        for cd in [
            &self.pretrain.binary,
            &self.pretrain.real,
            &self.pretrain.count,
            &self.pretrain.joint,
        ] {
            cd.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.finetune.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let mut names = std::collections::HashSet::new();
        for h in &self.heads {
            if !names.insert(h.name.as_str()) {
                return bad(format!("head `{}` declared twice", h.name));
            }
            if !(h.weight > 0.0 && h.weight.is_finite()) {
                return bad(format!("head `{}` needs a positive weight", h.name));
            }
        }
        if self.eval.knn_k == 0 {
            return bad("eval.knn_k must be positive".into());
        }
        Ok(())
    }

    /// Checks declared views and heads against a loaded dataset.
    pub fn check_against(&self, dataset: &Dataset) -> Result<(), CliError> {
        for v in &self.architecture.views {
            if dataset.view(&v.name).is_none() {
                return Err(CliError::Config(format!(
                    "architecture names view `{}` absent from the dataset",
                    v.name
                )));
            }
        }
        for h in &self.heads {
            let target = dataset.target(h.target_name()).ok_or_else(|| {
                CliError::Config(format!(
                    "head `{}` reads target `{}` absent from the dataset",
                    h.name,
                    h.target_name()
                ))
            })?;
            if h.kind.is_some_and(|k| k != target.kind) {
                return Err(CliError::Config(format!(
                    "head `{}` declared {} but target `{}` is {}",
                    h.name,
                    h.kind.expect("checked"),
                    target.name,
                    target.kind
                )));
            }
        }
        Ok(())
    }

    /// Seed overrides applied: the run seed drives every stochastic stage.
    pub fn seeded(&self, seed: Option<u64>) -> RunConfig {
        let mut cfg = self.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg
    }

    pub fn view_cd_config(&self, index: usize, unit: UnitType) -> SparseCdConfig {
        SparseCdConfig {
            rng_seed: derive_seed(self.seed, index as u64),
            ..self.pretrain.for_unit(unit).clone()
        }
    }

    pub fn joint_cd_config(&self) -> SparseCdConfig {
        SparseCdConfig {
            rng_seed: derive_seed(self.seed, 1_000),
            ..self.pretrain.joint.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let mut cfg = self.finetune.clone();
        cfg.rng_seed = derive_seed(self.seed, 2_000);
        for h in &self.heads {
            cfg.task_weights.entry(h.name.clone()).or_insert(h.weight);
        }
        cfg
    }

    /// SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": "data/manifest.json",
        "architecture": { "views": [{ "name": "real", "hidden": 4 }], "top_hidden": 3 }
    }"#;

    #[test]
    fn typed_learning_rate_defaults() {
        let cfg = RunConfig::from_json(MINIMAL, Path::new("/x")).unwrap();
        assert_eq!(cfg.pretrain.binary.learning_rate, 0.1);
        assert_eq!(cfg.pretrain.real.learning_rate, 0.01);
        assert_eq!(cfg.pretrain.count.learning_rate, 0.02);
        assert_eq!(cfg.dataset_path(), Path::new("/x/data/manifest.json"));
    }

    #[test]
    fn partial_cd_settings_keep_unit_defaults() {
        let text = MINIMAL.replace(
            "\"architecture\"",
            "\"pretrain\": { \"real\": { \"epochs\": 3 } }, \"architecture\"",
        );
        let cfg = RunConfig::from_json(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.pretrain.real.epochs, 3);
        assert_eq!(cfg.pretrain.real.learning_rate, 0.01);
        let bad = MINIMAL.replace(
            "\"architecture\"",
            "\"pretrain\": { \"ordinal\": {} }, \"architecture\"",
        );
        assert!(matches!(
            RunConfig::from_json(&bad, Path::new(".")),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn hash_ignores_output_directory_but_not_seed() {
        let a = RunConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.seeded(Some(9)).hash());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        let seeds = [
            cfg.view_cd_config(0, UnitType::Real).rng_seed,
            cfg.view_cd_config(1, UnitType::Real).rng_seed,
            cfg.joint_cd_config().rng_seed,
            cfg.finetune_config().rng_seed,
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
