//! Forward-pass throughput: thread-pool parallelism against a single thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stalemp::dataset::{synth_sbm, SbmConfig};
use stalemp::graph::{self, Partition};
use stalemp::history::HistoryStore;
use stalemp::layer::{AugmentMode, ForwardOpts, Model, ModelConfig};
use stalemp::tape::Tape;

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("full_graph_forward");
    for &n in &[500usize, 2000] {
        let (g, f, _) = synth_sbm(&SbmConfig {
            n,
            blocks: 4,
            p_in: 40.0 / n as f64,
            p_out: 8.0 / n as f64,
            feat_dim: 32,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let g = g.with_self_loops();
        let model = Model::new(
            ModelConfig {
                feat_dim: 32,
                hidden: 32,
                num_classes: 4,
                num_layers: 2,
                augment: AugmentMode::None,
                penalty_enabled: false,
            },
            3,
        )
        .unwrap();
        let store = HistoryStore::new(&f, &model.hidden_dims());
        let cent = graph::degree_centrality(&g);
        let part = Partition {
            num_clusters: 1,
            assignment: vec![0; n],
        };
        let bc = graph::make_batch(&g, &part, &[0]).unwrap();
        group.bench_with_input(BenchmarkId::new("tape", n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let art = model
                    .forward_batch(&mut tape, &store, &bc, &cent, &ForwardOpts::default())
                    .unwrap();
                criterion::black_box(tape.values(art.logits)[0]);
            })
        });
        group.bench_with_input(BenchmarkId::new("oracle", n), &n, |b, _| {
            b.iter(|| {
                let out = stalemp::oracle::full_batch_forward(&model, &g, &f).unwrap();
                criterion::black_box(out[1].data[0]);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
