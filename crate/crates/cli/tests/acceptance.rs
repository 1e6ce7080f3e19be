//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any FAIL.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mtdbn::data::SyntheticSpec;
use mtdbn::finetune::gradient_check;
use mtdbn::heads::{calibrate_from_probabilities, select_labels, structured_prob};
use mtdbn::metrics::{average_precision, map_at, ndcg_at};
use mtdbn::rbm::{energy, hidden_posterior, train_rbm, visible_mean};
use mtdbn::stack::ViewLayer;
use mtdbn::{
    DeepNet, RbmParams, RelevanceJudge, SparseCdConfig, TaskHead, TaskKind, TaskTarget, UnitType, ViewSpec,
    VisibleBatch,
};
use mtdbn_cli::{
    cmd_embed, cmd_eval, cmd_finetune, cmd_generate, cmd_predict, cmd_pretrain, cmd_retrieve, RunConfig, FINETUNED,
    PRETRAINED,
};
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_net(rng: &mut ChaCha8Rng) -> (DeepNet, Vec<Array1<f64>>, Vec<Option<TaskTarget>>) {
    let types = [
        ("real", UnitType::Real),
        ("count", UnitType::Count),
        ("binary", UnitType::Binary),
    ];
    let mut views = Vec::new();
    for (name, unit_type) in types {
        let spec = ViewSpec {
            name: name.into(),
            unit_type,
            dim: rng.random_range(1..=6),
            hidden: rng.random_range(1..=6),
        };
        let mut params = RbmParams::random(unit_type, spec.dim, spec.hidden, 0.5, rng);
        params.hidden_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        views.push(ViewLayer { spec, params });
    }
    let top = rng.random_range(1..=6);
    let joint_in = views.iter().map(|l| l.spec.hidden).sum();
    let mut joint = RbmParams::random(UnitType::Binary, joint_in, top, 0.5, rng);
    joint.hidden_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let mut heads = Vec::new();
    let mut targets = Vec::new();
    for kind in TaskKind::ALL {
        let n = if kind.is_structured() {
            rng.random_range(2..=5)
        } else {
            0
        };
        let labels = (0..n).map(|i| format!("l{i}")).collect();
        let mut head = TaskHead::new(kind.as_str(), kind, labels, top)
            .unwrap()
            .with_random_weights(0.5, rng);
        head.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        targets.push(Some(match kind {
            TaskKind::Regression => TaskTarget::Real(rng.random_range(-2.0..2.0)),
            TaskKind::Logistic => TaskTarget::Sign(if rng.random_bool(0.5) { 1.0 } else { -1.0 }),
            TaskKind::Poisson => TaskTarget::Count(rng.random_range(0..6)),
            TaskKind::Multiclass => TaskTarget::Class(perm[0]),
            TaskKind::Ranking => TaskTarget::Ranking(perm.clone()),
            TaskKind::Multilabel => TaskTarget::Labels(perm[..rng.random_range(1..=n)].to_vec()),
        }));
        heads.push(head);
    }
    let instance = views
        .iter()
        .map(|l| {
            Array1::from_shape_simple_fn(l.spec.dim, || match l.spec.unit_type {
                UnitType::Real => rng.random_range(-1.5..1.5),
                UnitType::Count => f64::from(rng.random_range(0u32..5)),
                UnitType::Binary => f64::from(rng.random_bool(0.5)),
            })
        })
        .collect();
    (DeepNet::new(views, joint, heads).unwrap(), instance, targets)
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (net, x, targets) = random_net(&mut rng);
        let views: Vec<ArrayView1<f64>> = x.iter().map(|v| v.view()).collect();
        let report = gradient_check(&net, &views, &targets, 1e-6, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(report.worst());
        if !report.passed() {
            let bad: Vec<&str> = report
                .groups
                .iter()
                .filter(|g| g.flagged)
                .map(|g| g.group.as_str())
                .collect();
            return Err(format!("flagged groups {bad:?}"));
        }
    }
    Ok(format!("20 nets, worst group error {worst:.2e}"))
}

fn boltzmann_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut p = RbmParams::random(UnitType::Binary, n, k, 1.5, &mut rng);
        p.visible_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        p.hidden_bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        let v = Array1::from_shape_fn(n, |_| f64::from(rng.random_bool(0.5)));
        let states: Vec<Array1<f64>> = (0..1u32 << k)
            .map(|bits| Array1::from_shape_fn(k, |j| f64::from((bits >> j) & 1)))
            .collect();
        let weights: Vec<f64> = states
            .iter()
            .map(|h| (-energy(&p, v.view(), h.view()).unwrap()).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        let closed = hidden_posterior(&p, v.view()).map_err(|e| e.to_string())?;
        for j in 0..k {
            let marginal: f64 = states
                .iter()
                .zip(&weights)
                .filter(|(h, _)| h[j] == 1.0)
                .map(|(_, w)| w)
                .sum::<f64>()
                / z;
            worst = worst.max((marginal - closed[j]).abs());
        }
    }
    check(worst < 1e-10, format!("500 models, max deviation {worst:.2e}"))
}

fn rate_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n, k) = (rng.random_range(1..=30), rng.random_range(1..=10));
        let mut p = RbmParams::random(UnitType::Count, n, k, 2.0, &mut rng);
        p.visible_bias.mapv_inplace(|_| rng.random_range(-4.0..4.0));
        let h = Array1::from_shape_fn(k, |_| f64::from(rng.random_bool(0.5)));
        let m = f64::from(rng.random_range(1u32..10_000));
        let rates = visible_mean(&p, h.view(), Some(m)).map_err(|e| e.to_string())?;
        worst = worst.max(((rates.sum() - m) / m).abs());
    }
    check(worst < 1e-9, format!("1000 draws, max relative error {worst:.2e}"))
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

fn plackett_luce_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for n in 3..=5 {
        for _ in 0..20 {
            let labels = (0..n).map(|i| format!("l{i}")).collect();
            let head = TaskHead::new("rank", TaskKind::Ranking, labels, 4)
                .unwrap()
                .with_random_weights(2.0, &mut rng);
            let f = Array1::from_shape_fn(4, |_| rng.random_range(0.0..1.0));
            let mut total = 0.0;
            for order in permutations(&(0..n).collect::<Vec<_>>()) {
                let mut prob = 1.0;
                for j in 0..n {
                    prob *= structured_prob(&head, f.view(), order[j], &order[j..]).map_err(|e| e.to_string())?;
                }
                total += prob;
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    check(
        worst < 1e-9,
        format!("60 heads over 3-5 labels, max |sum - 1| {worst:.2e}"),
    )
}

fn metric_unit_values() -> Outcome {
    let ap = average_precision(&[true, false, true, false]);
    let ndcg = ndcg_at(&[false, true, true], 3);
    let dcg_ideal = 1.0 + 1.0 / 3f64.log2() + 0.5;
    let dcg = 1.0 / 3f64.log2() + 0.5;
    check(
        ap == 2.0 / 3.0 && (ndcg - 0.5307).abs() <= 5e-4 && (ndcg - dcg / dcg_ideal).abs() < 1e-12,
        format!("AP {ap}, NDCG@3 {ndcg:.4}"),
    )
}

fn cd_learning_signal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = Array2::from_shape_fn((200, 8), |(r, c)| {
        let bit = (c < 4) == (r % 2 == 0);
        f64::from(bit != rng.random_bool(0.1))
    });
    let batch = VisibleBatch::new(UnitType::Binary, data).map_err(|e| e.to_string())?;
    let cfg = SparseCdConfig {
        minibatch_size: 20,
        epochs: 50,
        rng_seed: 7,
        ..SparseCdConfig::for_unit(UnitType::Binary)
    };
    let trace = train_rbm(&batch, 4, &cfg).map_err(|e| e.to_string())?.trace;
    let (first, last) = (trace[0], trace[50]);
    check(
        last < 0.7 * first,
        format!("cross-entropy {first:.4} -> {last:.4} ({:.3}x)", last / first),
    )
}

const CORPUS: &str = r#"{"clusters": 4, "per_cluster": 100, "train_fraction": 0.5, "calibrate_fraction": 0.0,
    "nuisance_dims": 20, "seed": 8}"#;

const RUN: &str = r#"{
  "dataset": "data/manifest.json",
  "seed": 3,
  "preprocess": {"count_rounding": null},
  "architecture": {
    "views": [{"name": "real", "hidden": 32}, {"name": "count", "hidden": 32}, {"name": "binary", "hidden": 32}],
    "top_hidden": 32
  },
  "pretrain": {
    "real": {"epochs": 50, "minibatch_size": 10, "learning_rate": 0.05},
    "count": {"epochs": 50, "minibatch_size": 10, "learning_rate": 0.1},
    "binary": {"epochs": 50, "minibatch_size": 10, "learning_rate": 0.5},
    "joint": {"epochs": 50, "minibatch_size": 10, "learning_rate": 0.5}
  },
  "finetune": {"epochs": 60, "minibatch_size": 20, "learning_rate": 0.1},
  "heads": [{"name": "concepts"}, {"name": "groups", "auxiliary": true}],
  "eval": {"t_map": 20, "knn_k": 30}
}"#;

/// Generates the corpus under `dir/data` and loads the run config with `dir` as its base.
fn setup(dir: &Path, run: &str) -> Result<RunConfig, String> {
    let spec: SyntheticSpec = serde_json::from_str(CORPUS).map_err(|e| e.to_string())?;
    cmd_generate(&spec, &dir.join("data")).map_err(|e| e.to_string())?;
    RunConfig::from_json(run, dir).map_err(|e| e.to_string())
}

/// Every command in order; returns the deep and baseline MAP@T.
fn pipeline(cfg: &RunConfig, out: &Path) -> Result<(f64, f64), String> {
    let e = |e: mtdbn_cli::CliError| e.to_string();
    cmd_pretrain(cfg, out).map_err(e)?;
    cmd_finetune(cfg, &out.join(PRETRAINED), out).map_err(e)?;
    let net = out.join(FINETUNED);
    let deep = cmd_embed(cfg, Some(&net), false, out).map_err(e)?;
    let base = cmd_embed(cfg, None, true, out).map_err(e)?;
    let deep_map = cmd_retrieve(cfg, &deep, true, out).map_err(e)?.map_at_t.unwrap_or(0.0);
    let base_map = cmd_retrieve(cfg, &base, false, out).map_err(e)?.map_at_t.unwrap_or(0.0);
    let predicted = cmd_predict(cfg, Some(&net), "concepts", None, out).map_err(e)?;
    cmd_eval(cfg, &predicted, out).map_err(e)?;
    let knn = cmd_predict(cfg, None, "concepts", Some(cfg.eval.knn_k), out).map_err(e)?;
    cmd_eval(cfg, &knn, out).map_err(e)?;
    Ok((deep_map, base_map))
}

/// Mean and standard deviation of MAP@`t` for random embeddings against `judge`.
fn null_map(judge: &RelevanceJudge, dim: usize, t: usize, draws: u64) -> (f64, f64) {
    let maps: Vec<f64> = (0..draws)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let emb = Array2::from_shape_simple_fn((judge.len(), dim), || rng.random_range(-1.0..1.0));
            map_at(emb.view(), judge, t).unwrap()
        })
        .collect();
    let n = maps.len() as f64;
    let mean = maps.iter().sum::<f64>() / n;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn directional_retrieval(work: &Path) -> Outcome {
    let cfg = setup(work, RUN)?;
    let (deep, base) = pipeline(&cfg, &work.join("out"))?;
    let data = mtdbn::data::load_dataset(&cfg.dataset_path()).map_err(|e| e.to_string())?;
    if data.splits.train.len() != 200 || data.splits.test.len() != 200 {
        return Err("corpus is not 200 train / 200 test".into());
    }
    let labels = data
        .target("concepts")
        .unwrap()
        .label_sets(&data.splits.test)
        .map_err(|e| e.to_string())?;
    let (_, sigma) = null_map(&RelevanceJudge::new(labels), 32, 20, 200);
    let bar = 0.25 + 3.0 * sigma;
    check(
        deep >= base && base > bar,
        format!("deep MAP@20 {deep:.4}, baseline {base:.4}, null bar {bar:.4}"),
    )
}

fn macro_f1_oracle(probs: &Array2<f64>, truth: &[Vec<usize>], tau: f64) -> f64 {
    let n_labels = probs.ncols();
    let mut f1 = 0.0;
    for l in 0..n_labels {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (r, t) in truth.iter().enumerate() {
            match (probs[[r, l]] >= tau, t.contains(&l)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    f1 / n_labels as f64
}

fn threshold_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let (rows, labels) = (rng.random_range(5..40), rng.random_range(2..6));
        let truth: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..labels).filter(|_| rng.random_bool(0.4)).collect())
            .collect();
        let probs = Array2::from_shape_fn((rows, labels), |(r, l)| {
            let signal = if truth[r].contains(&l) { 0.3 } else { 0.0 };
            ((rng.random_range(0.0..0.7f64) + signal) * 100.0).round() / 100.0
        });
        let Ok((tau, reported)) = calibrate_from_probabilities(probs.view(), &truth) else {
            continue;
        };
        let attained = macro_f1_oracle(&probs, &truth, tau);
        let scan = (1..=1000)
            .map(|i| f64::from(i) / 1000.0)
            .chain(probs.iter().copied().filter(|&p| p > 0.0));
        let best = scan.map(|t| macro_f1_oracle(&probs, &truth, t)).fold(0.0, f64::max);
        if (attained - best).abs() > 1e-12 || (reported - attained).abs() > 1e-12 {
            return Err(format!("trial {trial}: tau {tau} gives {attained}, scan best {best}"));
        }
        debug_assert_eq!(select_labels(probs.view(), tau).len(), rows);
    }
    Ok("50 random calibration sets match the exhaustive scan".into())
}

fn knn_sanity(work: &Path) -> Outcome {
    let cfg = setup(work, RUN)?;
    let out = work.join("out");
    let e = |e: mtdbn_cli::CliError| e.to_string();
    let predicted = cmd_predict(&cfg, None, "concepts", Some(30), &out).map_err(e)?;
    let report = cmd_eval(&cfg, &predicted, &out).map_err(e)?;
    let f1 = report.multilabel.map_or(0.0, |m| m.macro_f1);
    check(f1 >= 0.9, format!("k=30 macro-F1 {f1:.4}"))
}

fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(work: &Path) -> Outcome {
    let small = RUN
        .replace("\"hidden\": 32", "\"hidden\": 8")
        .replace("\"top_hidden\": 32", "\"top_hidden\": 8")
        .replace("\"epochs\": 50", "\"epochs\": 5")
        .replace("\"epochs\": 60", "\"epochs\": 5");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = work.join(name);
        let cfg = setup(&dir, &small)?;
        pipeline(&cfg, &dir.join("out"))?;
        runs.push(artifacts(&dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<_> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(
        a.len() == b.len() && differing.is_empty() && a.len() > 20,
        format!(
            "{} artifacts compared, {} differ {differing:?}",
            a.len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let dir = |name: &str| work.path().join(name);
    let d7 = dir("retrieval");
    let d9 = dir("knn");
    let d10 = dir("determinism");
    #[allow(clippy::type_complexity)]
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        (
            "gradient fidelity",
            Duration::from_secs(10),
            Box::new(gradient_fidelity),
        ),
        (
            "brute-force conditional oracle",
            Duration::from_secs(5),
            Box::new(boltzmann_oracle),
        ),
        ("rate conservation", Duration::from_secs(2), Box::new(rate_conservation)),
        (
            "Plackett-Luce normalization",
            Duration::from_secs(2),
            Box::new(plackett_luce_normalization),
        ),
        (
            "metric unit values",
            Duration::from_secs(1),
            Box::new(metric_unit_values),
        ),
        (
            "CD learning signal",
            Duration::from_secs(30),
            Box::new(cd_learning_signal),
        ),
        (
            "directional retrieval",
            Duration::from_secs(180),
            Box::new(move || directional_retrieval(&d7)),
        ),
        (
            "threshold optimality",
            Duration::from_secs(2),
            Box::new(threshold_optimality),
        ),
        (
            "kNN baseline sanity",
            Duration::from_secs(30),
            Box::new(move || knn_sanity(&d9)),
        ),
        (
            "determinism",
            Duration::from_secs(600),
            Box::new(move || determinism(&d10)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {:>2} {name}: {detail} [{:.2}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
