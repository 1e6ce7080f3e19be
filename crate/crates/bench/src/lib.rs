//! Fixtures shared by the benchmarks.

use mtdbn::data::{generate_synthetic, SyntheticSpec};
use mtdbn::heads::TaskHead;
use mtdbn::stack::{ViewLayer, ViewSpec};
use mtdbn::{Dataset, DeepNet, RbmParams, TaskKind, UnitType};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The default synthetic corpus scaled to `per_cluster` rows per cluster.
pub fn corpus(per_cluster: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        per_cluster,
        ..Default::default()
    })
    .expect("default spec is valid")
}

/// A randomly initialized net over `corpus` with a multilabel head on
/// `concepts`.
pub fn net_for(corpus: &Dataset, hidden: usize, top: usize) -> DeepNet {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let views = corpus
        .views
        .iter()
        .map(|v| {
            let spec = ViewSpec {
                name: v.name.clone(),
                unit_type: v.unit_type,
                dim: v.data.ncols(),
                hidden,
            };
            let params = RbmParams::random(v.unit_type, spec.dim, hidden, 0.1, &mut rng);
            ViewLayer { spec, params }
        })
        .collect::<Vec<_>>();
    let joint = RbmParams::random(UnitType::Binary, hidden * views.len(), top, 0.1, &mut rng);
    let labels = corpus
        .target("concepts")
        .expect("generated corpora carry concepts")
        .labels
        .clone();
    let head = TaskHead::new("concepts", TaskKind::Multilabel, labels, top)
        .expect("at least two clusters")
        .with_random_weights(0.1, &mut rng);
    DeepNet::new(views, joint, vec![head]).expect("shapes agree")
}
