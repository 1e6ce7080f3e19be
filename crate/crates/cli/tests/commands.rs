use std::path::Path;

use mtdbn::data::{load_dataset, write_dataset, SyntheticSpec};
use mtdbn::{Dataset, DeepNet, Splits, UnitType, View};
use mtdbn_cli::{
    cmd_embed, cmd_eval, cmd_finetune, cmd_generate, cmd_predict, cmd_pretrain, cmd_retrieve, read_matrix_csv,
    RunConfig, FINETUNED, PRETRAINED,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RUN: &str = r#"{
  "dataset": "data/manifest.json",
  "seed": 5,
  "architecture": {
    "views": [{"name": "real", "hidden": 4}, {"name": "count", "hidden": 4}, {"name": "binary", "hidden": 4}],
    "top_hidden": 6
  },
  "pretrain": {"real": {"epochs": 3}, "count": {"epochs": 3}, "binary": {"epochs": 3}, "joint": {"epochs": 3}},
  "finetune": {"epochs": 10, "minibatch_size": 10},
  "heads": [{"name": "concepts"}, {"name": "groups", "auxiliary": true}],
  "eval": {"t_map": 10, "knn_k": 5}
}"#;

fn corpus(dir: &Path, clusters: usize) {
    let spec = SyntheticSpec {
        clusters,
        per_cluster: 15,
        real_dim: 5,
        count_dim: 6,
        binary_dim: 4,
        ..Default::default()
    };
    cmd_generate(&spec, &dir.join("data")).unwrap();
}

fn config(dir: &Path, patch: impl FnOnce(&mut serde_json::Value)) -> RunConfig {
    let mut v: serde_json::Value = serde_json::from_str(RUN).unwrap();
    patch(&mut v);
    RunConfig::from_json(&v.to_string(), dir).unwrap()
}

#[test]
fn zero_epoch_pretrain_writes_initial_net() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let cfg = config(dir.path(), |v| {
        for view in ["real", "count", "binary", "joint"] {
            v["pretrain"][view]["epochs"] = 0.into();
        }
    });
    let done = cmd_pretrain(&cfg, dir.path()).unwrap();
    assert!(done.traces.joint.len() == 1 && done.traces.views.iter().all(|(_, t)| t.len() == 1));
    let net = DeepNet::load(&done.net_path).unwrap();
    assert!(net.heads.is_empty());
    assert!(net.views.iter().all(|l| l.params.hidden_bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn pretrain_is_byte_reproducible_with_three_view_blocks() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let cfg = config(dir.path(), |_| {});
    let a = std::fs::read(cmd_pretrain(&cfg, &dir.path().join("a")).unwrap().net_path).unwrap();
    let b = std::fs::read(cmd_pretrain(&cfg, &dir.path().join("b")).unwrap().net_path).unwrap();
    assert_eq!(a, b);
    let net = DeepNet::from_bytes(&a).unwrap();
    let names: Vec<&str> = net.views.iter().map(|l| l.spec.name.as_str()).collect();
    assert_eq!(names, ["real", "count", "binary"]);
    assert_eq!(net.joint_input_dim(), 12);

    let other = config(dir.path(), |v| v["seed"] = 6.into());
    let c = std::fs::read(cmd_pretrain(&other, &dir.path().join("c")).unwrap().net_path).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_epoch_finetune_only_attaches_heads() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let cfg = config(dir.path(), |v| v["finetune"]["epochs"] = 0.into());
    let out = dir.path().join("out");
    let pre = cmd_pretrain(&cfg, &out).unwrap();
    let done = cmd_finetune(&cfg, &pre.net_path, &out).unwrap();
    let before = DeepNet::load(&pre.net_path).unwrap();
    let after = DeepNet::load(&done.net_path).unwrap();
    assert_eq!(after.views, before.views);
    assert_eq!(after.joint, before.joint);
    let heads: Vec<(&str, bool)> = after.heads.iter().map(|h| (h.name.as_str(), h.auxiliary)).collect();
    assert_eq!(heads, [("concepts", false), ("groups", true)]);
    assert!(after.heads.iter().all(|h| h.weights.iter().all(|&w| w == 0.0)));
    assert_eq!(done.trace.rows.len(), 1);
}

#[test]
fn finetuned_net_embeds_without_targets() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let cfg = config(dir.path(), |_| {});
    let out = dir.path().join("out");
    cmd_pretrain(&cfg, &out).unwrap();
    let done = cmd_finetune(&cfg, &out.join(PRETRAINED), &out).unwrap();
    let totals = done.trace.totals();
    assert!(totals.last() < totals.first());

    let mut unlabeled = load_dataset(&cfg.dataset_path()).unwrap();
    unlabeled.targets.clear();
    let bare = dir.path().join("bare");
    write_dataset(&unlabeled, &bare.join("data")).unwrap();
    let bare_cfg = config(&bare, |v| v["heads"] = serde_json::json!([]));
    let path = cmd_embed(&bare_cfg, Some(&out.join(FINETUNED)), false, &bare).unwrap();
    let emb = read_matrix_csv(&path).unwrap();
    assert_eq!(emb.dim(), (unlabeled.len(), 6));
    assert!(emb.iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn baseline_echoes_a_unit_norm_view() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut data: Array2<f64> = Array2::from_shape_simple_fn((12, 3), || rng.random_range(-1.0..1.0));
    for mut row in data.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let ds = Dataset {
        instance_count: 12,
        views: vec![View {
            name: "real".into(),
            unit_type: UnitType::Real,
            data: data.clone(),
        }],
        targets: vec![],
        splits: Splits {
            train: (0..12).collect(),
            calibrate: vec![],
            test: vec![],
        },
    };
    write_dataset(&ds, &dir.path().join("data")).unwrap();
    let cfg = RunConfig::from_json(
        r#"{"dataset": "data/manifest.json", "architecture": {"views": [{"name": "real", "hidden": 2}], "top_hidden": 2}}"#,
        dir.path(),
    )
    .unwrap();
    let emb = read_matrix_csv(&cmd_embed(&cfg, None, true, dir.path()).unwrap()).unwrap();
    assert!(emb.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn one_cluster_corpus_retrieves_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 1);
    let cfg = config(dir.path(), |v| v["heads"] = serde_json::json!([{"name": "concepts"}]));
    let emb = cmd_embed(&cfg, None, true, dir.path()).unwrap();
    let report = cmd_retrieve(&cfg, &emb, true, dir.path()).unwrap();
    assert_eq!(report.map_at_t, Some(1.0));
    assert!(dir
        .path()
        .join("report_retrieve_embeddings_baseline_per_query.csv")
        .exists());
}

#[test]
fn end_to_end_reports_lie_in_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let cfg = config(dir.path(), |_| {});
    let out = dir.path().join("out");
    cmd_pretrain(&cfg, &out).unwrap();
    cmd_finetune(&cfg, &out.join(PRETRAINED), &out).unwrap();
    let net = out.join(FINETUNED);
    let mut reports = Vec::new();
    for emb in [
        cmd_embed(&cfg, Some(&net), false, &out).unwrap(),
        cmd_embed(&cfg, None, true, &out).unwrap(),
    ] {
        reports.push(cmd_retrieve(&cfg, &emb, false, &out).unwrap());
    }
    for preds in [
        cmd_predict(&cfg, Some(&net), "concepts", None, &out).unwrap(),
        cmd_predict(&cfg, None, "concepts", Some(5), &out).unwrap(),
    ] {
        reports.push(cmd_eval(&cfg, &preds, &out).unwrap());
    }
    assert!(reports.iter().all(|r| r.in_unit_range()));
    for name in [
        "report_retrieve_embeddings.json",
        "report_eval_predictions_concepts_knn.json",
    ] {
        let written: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(name)).unwrap()).unwrap();
        assert!(written.get("per_query").is_none());
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("run_finetune.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["config_sha256"], cfg.hash());
}
