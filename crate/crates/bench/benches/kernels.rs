use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use marrnet::autograd::Graph;
use marrnet::data::{sample_pair_batch, sample_triplet_batch, ClassIndex, Modality, Spectrum};
use marrnet::eval::{evaluate, RawEmbedder};
use marrnet::model::{ArchConfig, Mode, ModelParams, Network};
use marrnet::rng;
use marrnet::synth::{gen_dataset, PerClass, SynthConfig};
use marrnet::train::{train_step, StepRates, TrainConfig, TrainState};
use marrnet::Tensor;

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.5).collect())
}

fn data(length: usize) -> Vec<Spectrum> {
    gen_dataset(&SynthConfig {
        n_classes: 40,
        per_class_m1: PerClass::Fixed(2),
        per_class_m2: PerClass::Fixed(2),
        gap_level: 0.6,
        noise_sigma: 0.01,
        length,
        seed: 0,
    })
}

fn conv(c: &mut Criterion) {
    let (x, w, b) = (ramp(&[32, 16, 1024]), ramp(&[64, 32, 3]), ramp(&[64]));
    c.bench_function("conv1d forward+backward 32->64 ch, 16x1024", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.variable(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
            let y = g.conv1d(xv, wv, bv);
            let s = g.dot_const(y, &ramp(&[64, 16, 1024]));
            g.backward(s)
        })
    });
}

fn encoder(c: &mut Criterion) {
    let arch = ArchConfig::default();
    let p = ModelParams::init(&arch, 0).unwrap();
    let d = data(arch.input_length);
    let rows: Vec<&[f64]> = d.iter().take(64).map(|s| s.values.as_slice()).collect();
    c.bench_function("embed 64 spectra, L=1024", |bench| bench.iter(|| p.embed(Modality::M1, &rows)));
    c.bench_function("encoder train-mode forward, 16 spectra", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let mut net = Network::new(&mut g, Mode::Train);
            let x = net.input_rows(&rows[..16]);
            net.encode(&p.e1, "e1", x).bottleneck
        })
    });
}

fn step(c: &mut Criterion) {
    let arch = ArchConfig { input_length: 256, ..ArchConfig::default() };
    let d = data(256);
    let idx = ClassIndex::new(&d);
    let mut r = rng::stream(0, "bench", 0);
    let m1: Vec<usize> = (0..d.len()).filter(|&i| d[i].modality == Modality::M1).take(16).collect();
    let pair = sample_pair_batch(&d, &idx, &m1, &mut r);
    let triplets: Vec<_> =
        Modality::BOTH.iter().map(|&m| sample_triplet_batch(&d, &idx, 5, m, &mut r).unwrap()).collect();
    let init = TrainState::new(ModelParams::init(&arch, 0).unwrap());
    let rates = StepRates { main: 1e-4, disc: 1e-3 };
    let mut group = c.benchmark_group("train step, 16 pairs, L=256");
    group.sample_size(10);
    for (name, cfg) in [
        ("full loss", TrainConfig::default()),
        ("triplet only", TrainConfig { weights: marrnet::LossWeights::triplet_only(), ..Default::default() }),
    ] {
        group.bench_function(name, |bench| {
            bench.iter_batched(
                || init.clone(),
                |mut s| train_step(&mut s, &cfg, &pair, &triplets, rates).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let d = data(256);
    c.bench_function("evaluate raw spectra, 160 items", |bench| bench.iter(|| evaluate(&RawEmbedder, &d, &[1, 3, 5])));
}

criterion_group!(benches, conv, encoder, step, metrics);
criterion_main!(benches);
