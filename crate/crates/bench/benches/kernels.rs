use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use partsep::baselines::{closest_pitch, fit_zones, Onsets, ZoneSearch};
use partsep::features::{encode, FeatureConfig, Hints};
use partsep::neural::{Arch, Model, ModelConfig};
use partsep_bench::random_mixture;

fn features(c: &mut Criterion) {
    let m = random_mixture(250, 1);
    let config = FeatureConfig::default();
    c.bench_function("encode 250 notes", |b| b.iter(|| encode(black_box(&m), &Hints::none(), &config).unwrap()));
}

fn baselines(c: &mut Criterion) {
    let corpus: Vec<_> = (0..300).map(|s| random_mixture(250, s)).collect();
    let refs: Vec<_> = corpus.iter().collect();
    c.bench_function("fit_zones 300 songs", |b| b.iter(|| fit_zones(black_box(&refs), ZoneSearch::default()).unwrap()));
    let m = &corpus[0];
    let onsets = Onsets::from_mixture(m);
    c.bench_function("closest_pitch 250 notes", |b| b.iter(|| closest_pitch(black_box(m), &onsets, true).unwrap()));
}

fn neural(c: &mut Criterion) {
    let m = random_mixture(250, 2);
    for arch in Arch::ALL {
        let model = Model::<f32>::new(ModelConfig::new(arch, 4), 0).unwrap();
        c.bench_function(&format!("{arch} predict 250 notes"), |b| {
            b.iter(|| model.predict(black_box(&m), &Hints::none(), arch.mode()).unwrap())
        });
    }
    // one live event: encode a single note and advance the stream
    for arch in [Arch::Lstm, Arch::TransformerDec] {
        let model = Model::<f32>::new(ModelConfig::new(arch, 4), 0).unwrap();
        let rows: Vec<_> = (0..m.len())
            .map(|i| encode(&m, &Hints::none(), &model.config.features).unwrap().slice(i, i + 1))
            .collect();
        c.bench_function(&format!("{arch} stream step after 200 notes"), |b| {
            b.iter_batched(
                || {
                    let mut state = model.start_stream().unwrap();
                    for row in &rows[..200] {
                        model.stream_step(&mut state, row).unwrap();
                    }
                    state
                },
                |mut state| model.stream_step(&mut state, black_box(&rows[200])).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = features, baselines, neural
}
criterion_main!(benches);
