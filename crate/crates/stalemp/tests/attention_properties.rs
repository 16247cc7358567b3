//! Property tests for the attention mechanics and batch bookkeeping: simplex
//! structure of every softmax segment, the monotone response of out-of-batch
//! coefficients to staleness and centrality, exact neighborhood partitioning,
//! and bitwise run-to-run determinism.

use std::rc::Rc;

use proptest::prelude::*;

use stalemp::dataset::{synth_sbm, SbmConfig};
use stalemp::graph::{self, Centrality, Graph, Partition};
use stalemp::history::HistoryStore;
use stalemp::layer::{AugmentMode, ForwardOpts, Model, ModelConfig};
use stalemp::tape::{Matrix, Tape};
use stalemp::train::{TrainConfig, Trainer};

/// Star graph: node 0 is the center, nodes 1..=d are leaves. Batch {0} puts
/// every leaf on the cached frontier, giving one attention segment of width d.
fn star_fixture(d: usize, seed: u64) -> (Graph, Model, Partition) {
    let edges: Vec<(usize, usize)> = (1..=d).map(|j| (0, j)).collect();
    let g = Graph::from_edges(d + 1, &edges).unwrap();
    let cfg = ModelConfig {
        feat_dim: 3,
        hidden: 4,
        num_classes: 2,
        num_layers: 2,
        augment: AugmentMode::None,
        penalty_enabled: true,
    };
    let model = Model::new(cfg, seed).unwrap();
    let mut assignment = vec![1; d + 1];
    assignment[0] = 0;
    let part = Partition {
        num_clusters: 2,
        assignment,
    };
    (g, model, part)
}

/// Hidden-layer attention coefficients over the frontier for batch {0},
/// ordered by frontier position.
fn frontier_alphas(
    model: &Model,
    g: &Graph,
    part: &Partition,
    store: &HistoryStore,
    cent: &Centrality,
    epoch_t: u64,
) -> Vec<f64> {
    let bc = graph::make_batch(g, part, &[0]).unwrap();
    let mut tape = Tape::new();
    let opts = ForwardOpts {
        epoch_t,
        ..Default::default()
    };
    let art = model.forward_batch(&mut tape, store, &bc, cent, &opts).unwrap();
    let alpha = art.out_alphas[1].expect("frontier is nonempty");
    let vals = tape.values(alpha).to_vec();
    // Reorder edge-slot values into frontier order via the source positions.
    let mut by_src = vec![0.0; vals.len()];
    for (slot, &src) in art.out_src.iter().enumerate() {
        by_src[src] = vals[slot];
    }
    by_src
}

fn seeded_store(model: &Model, g: &Graph, s: &[f64], seed: u64) -> HistoryStore {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let n = g.num_nodes;
    let mut feats = Matrix::zeros(n, 3);
    for v in feats.data.iter_mut() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    let mut store = HistoryStore::new(&feats, &model.hidden_dims());
    store.begin_iteration();
    let all: Vec<usize> = (0..n).collect();
    let mut rows = Matrix::zeros(n, 4);
    for v in rows.data.iter_mut() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    store.push(1, &all, &rows).unwrap();
    store.record_grad_norms(1, &all, s).unwrap();
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Every nonempty softmax segment is a simplex: entries in [0,1], sums
    /// within 1e-12 of one.
    #[test]
    fn segmented_softmax_is_a_simplex(
        sizes in prop::collection::vec(1usize..6, 1..8),
        raw in prop::collection::vec(-12.0f64..12.0, 40),
    ) {
        let total: usize = sizes.iter().sum();
        prop_assume!(total <= raw.len());
        let mut offsets = vec![0usize];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut tape = Tape::new();
        let scores = tape.leaf(Matrix::from_vec(total, 1, raw[..total].to_vec()));
        let alpha = tape.segmented_softmax(scores, Rc::new(offsets.clone())).unwrap();
        let vals = tape.values(alpha);
        for w in offsets.windows(2) {
            let seg = &vals[w[0]..w[1]];
            let sum: f64 = seg.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "segment sum {sum}");
            for &a in seg {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    /// Raising one cached neighbor's staleness score strictly lowers its
    /// attention coefficient and weakly raises everyone else's.
    #[test]
    fn staleness_raises_penalty_lowers_coefficient(
        d in 2usize..6,
        seed in 0u64..500,
        target in 0usize..6,
        bump in 0.25f64..2.0,
        epoch_t in 1u64..4,
        s_raw in prop::collection::vec(0.0f64..2.0, 6),
    ) {
        let target = target % d;
        let (g, model, part) = star_fixture(d, seed);
        let cent = graph::degree_centrality(&g);
        let mut s = vec![0.0; d + 1];
        for j in 0..d {
            s[j + 1] = s_raw[j];
        }
        let store = seeded_store(&model, &g, &s, seed ^ 0xabcd);
        let before = frontier_alphas(&model, &g, &part, &store, &cent, epoch_t);

        s[target + 1] += bump;
        let store = seeded_store(&model, &g, &s, seed ^ 0xabcd);
        let after = frontier_alphas(&model, &g, &part, &store, &cent, epoch_t);

        prop_assert_eq!(before.len(), d);
        let sum: f64 = after.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(
            after[target] < before[target],
            "alpha must drop strictly: {} -> {}", before[target], after[target]
        );
        for j in 0..d {
            if j != target {
                prop_assert!(after[j] >= before[j] - 1e-12);
            }
        }
    }

    /// With positive staleness fixed, a more central cached neighbor is
    /// penalized harder: its coefficient strictly drops as its centrality
    /// rises.
    #[test]
    fn centrality_raises_penalty_lowers_coefficient(
        d in 2usize..6,
        seed in 0u64..500,
        target in 0usize..6,
        c_bump in 0.5f64..3.0,
        epoch_t in 1u64..4,
        s_raw in prop::collection::vec(0.1f64..2.0, 6),
    ) {
        let target = target % d;
        let (g, model, part) = star_fixture(d, seed);
        let mut s = vec![0.0; d + 1];
        for j in 0..d {
            s[j + 1] = s_raw[j];
        }
        let store = seeded_store(&model, &g, &s, seed ^ 0x77);
        let mut cent = graph::degree_centrality(&g);
        let before = frontier_alphas(&model, &g, &part, &store, &cent, epoch_t);

        cent.c[target + 1] += c_bump;
        let after = frontier_alphas(&model, &g, &part, &store, &cent, epoch_t);

        prop_assert!(
            after[target] < before[target],
            "alpha must drop strictly: {} -> {}", before[target], after[target]
        );
        for j in 0..d {
            if j != target {
                prop_assert!(after[j] >= before[j] - 1e-12);
            }
        }
    }

    /// For every in-batch node, the live and cached neighbor splits partition
    /// its neighborhood exactly — nothing dropped, nothing duplicated.
    #[test]
    fn batch_splits_partition_each_neighborhood(
        n in 4usize..24,
        k in 1usize..5,
        seed in 0u64..1000,
        edges_raw in prop::collection::vec((0usize..24, 0usize..24), 4..60),
    ) {
        let edges: Vec<(usize, usize)> = edges_raw
            .into_iter()
            .map(|(u, v)| (u % n, v % n))
            .filter(|(u, v)| u != v)
            .collect();
        prop_assume!(!edges.is_empty());
        let g = Graph::from_edges(n, &edges).unwrap();
        let k = k.min(n);
        let part = graph::partition_greedy(&g, k, seed).unwrap();

        let mut seen = vec![0usize; n];
        for cluster in 0..k {
            let bc = graph::make_batch(&g, &part, &[cluster]).unwrap();
            for (pos, &node) in bc.in_batch.iter().enumerate() {
                seen[node] += 1;
                prop_assert_eq!(
                    bc.in_degree(pos) + bc.out_degree(pos),
                    g.degrees[node],
                    "neighbor split of node {} must cover its degree", node
                );
            }
            for &f in &bc.frontier {
                let adjacent = bc
                    .in_batch
                    .iter()
                    .any(|&b| g.neighbors_of(b).contains(&f));
                prop_assert!(adjacent, "frontier node {} must touch the batch", f);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1), "every node in exactly one batch");
    }
}

#[test]
fn identical_seeds_reproduce_training_bitwise() {
    let sbm = SbmConfig {
        n: 40,
        feat_dim: 6,
        ..SbmConfig::default()
    };
    let (g, feats, labels) = synth_sbm(&sbm).unwrap();
    let mcfg = ModelConfig {
        feat_dim: 6,
        hidden: 5,
        num_classes: 2,
        num_layers: 2,
        augment: AugmentMode::Concat,
        penalty_enabled: true,
    };
    let tcfg = TrainConfig {
        num_clusters: 4,
        ..TrainConfig::default()
    };

    let mut run = || {
        let model = Model::new(mcfg.clone(), 9).unwrap();
        let mut tr = Trainer::new(g.clone(), feats.clone(), labels.clone(), model, tcfg.clone())
            .unwrap();
        for _ in 0..2 {
            tr.train_epoch().unwrap();
        }
        let params: Vec<Vec<f64>> = tr
            .model
            .flat_params()
            .iter()
            .map(|p| p.value.data.clone())
            .collect();
        (params, tr.loss_history.clone(), tr.partition.assignment.clone())
    };

    let (p1, l1, a1) = run();
    let (p2, l2, a2) = run();
    assert_eq!(a1, a2, "partition must be seed-deterministic");
    assert_eq!(l1.len(), l2.len());
    for (x, y) in l1.iter().zip(&l2) {
        assert!(x.to_bits() == y.to_bits(), "loss history must match bitwise");
    }
    for (pa, pb) in p1.iter().zip(&p2) {
        for (x, y) in pa.iter().zip(pb) {
            assert!(x.to_bits() == y.to_bits(), "parameters must match bitwise");
        }
    }
}
