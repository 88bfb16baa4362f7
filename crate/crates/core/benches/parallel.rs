//! Sequential versus rayon execution of the two data-parallel hot paths:
//! batch gradients and finite-difference checking.

use cmfusion::data::make_batches;
use cmfusion::gradcheck::check_graph_loss;
use cmfusion::model::{CmRobertaModel, ModelConfig};
use cmfusion::synth::{synthesize, SyntheticSpec};
use cmfusion::train::{batch_gradients, cross_entropy};
use cmfusion::ExecMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn batch_gradient_bench(c: &mut Criterion) {
    let split = synthesize(&SyntheticSpec {
        n_dialogues: 32,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let batch = make_batches(&split, 32, 0).unwrap().remove(0);
    let model = CmRobertaModel::new(ModelConfig {
        d_audio_in: 24,
        d_text_in: 16,
        d_model: 32,
        audio_lld_dim: 12,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| batch_gradients(&model, &batch, mode).unwrap())
        });
    }
    group.finish();
}

fn gradcheck_bench(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_dialogues: 1,
        min_utterances: 2,
        max_utterances: 2,
        d_audio: 4,
        d_text: 4,
        n_classes: 3,
        ..SyntheticSpec::default()
    };
    let d = synthesize(&spec).unwrap().dialogues.remove(0);
    let labels: Vec<i64> = d.labels.iter().map(|&l| l as i64).collect();
    let model = CmRobertaModel::new(ModelConfig {
        d_audio_in: 4,
        d_text_in: 4,
        d_model: 4,
        n_sca_layers: 1,
        n_classes: 3,
        audio_lld_dim: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| {
                check_graph_loss(model.params(), 1e-4, mode, |g, store| {
                    let mut m = model.clone();
                    *m.params_mut() = store.clone();
                    let out = m.forward(g, &d.audio, &d.text, &[true, true])?;
                    cross_entropy(g, out.logits, &labels, &[true, true])
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradient_bench, gradcheck_bench);
criterion_main!(benches);
