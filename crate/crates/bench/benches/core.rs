use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsleak::autograd::{ParamStore, Tape};
use tsleak::data::{generate_cohort, make_sofa_samples, Batch, SynthConfig};
use tsleak::nn::masked_mse;
use tsleak::seqmodels::{EncoderConfig, EncoderKind, Task, TaskModel};
use tsleak::training::auc;

fn matmul_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::default();
    let w = store.add("w", Array2::from_shape_fn((64, 64), |_| rng.random_range(-0.1..0.1)));
    let x = Array2::from_shape_fn((512, 64), |_| rng.random_range(-1.0..1.0));
    c.bench_function("autograd/matmul_tanh_backward_512x64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(&store, w);
            let h = t.matmul(xv, wv);
            let h = t.tanh(h);
            let loss = t.mean(h);
            black_box(t.backward(loss))
        })
    });
}

fn encoders(c: &mut Criterion) {
    let synth = SynthConfig { n_records: 32, m: 8, t_range: [48, 72], seed: 1, ..Default::default() };
    let samples = make_sofa_samples(&generate_cohort(&synth).unwrap(), 24);
    let idx: Vec<usize> = (0..samples.len().min(32)).collect();
    let batch = Batch::from_samples(&samples, &idx);
    let mut group = c.benchmark_group("encoder_step");
    group.sample_size(10);
    for kind in [EncoderKind::Lstm, EncoderKind::Tcn, EncoderKind::Transformer] {
        let model = TaskModel::new(&EncoderConfig { kind, ..Default::default() }, Task::Sofa, 8, 0).unwrap();
        let tsleak::data::BatchTargets::Sofa { values, mask } = &batch.targets else { unreachable!() };
        let n = values.len();
        let y = values.clone().into_shape_with_order((n, 1)).unwrap();
        let m = mask.clone().into_shape_with_order((n, 1)).unwrap();
        group.bench_with_input(BenchmarkId::new("forward_backward", kind.name()), &kind, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let x = t.constant(batch.tokens());
                let h = model.encoder.forward(&mut t, &model.params, x, batch.size(), batch.t_max());
                let o = model.head.forward(&mut t, &model.params, h);
                let loss = masked_mse(&mut t, o, &y, &m);
                black_box(t.backward(loss))
            })
        });
    }
    group.finish();
}

fn auc_ties(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 100.0).round()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    c.bench_function("metrics/auc_10k_tied", |b| b.iter(|| black_box(auc(&scores, &labels).unwrap())));
}

fn cohort(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    group.sample_size(10);
    let synth = SynthConfig { n_records: 200, m: 8, t_range: [36, 96], seed: 3, ..Default::default() }.with_leak("sex", 2.0);
    group.bench_function("generate_cohort_200", |b| b.iter(|| black_box(generate_cohort(&synth).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul_backward, encoders, auc_ties, cohort);
criterion_main!(benches);
