use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use svimo::config::RunConfig;
use svimo::latent_codec::{decode_lossless, encode_lossless};
use svimo::metrics::block_flow;
use svimo::synth_data::{generate_dataset, generate_sample, SampleRecord};
use svimo::vid::chamfer;
use svimo::{ShapeConfig, Trainer};
use svimo_bench::{randn, shifted_pair, small_config};

fn chamfer_bench(c: &mut Criterion) {
    let a = randn(1, &[298, 3]);
    let b = randn(2, &[298, 3]);
    c.bench_function("chamfer 298x298", |bench| bench.iter(|| chamfer(&a, &b).unwrap()));
}

fn codec_bench(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let rec = generate_sample(0, &cfg.synth()).unwrap();
    let shapes = ShapeConfig::desk();
    c.bench_function("lossless encode+decode desk video", |bench| {
        bench.iter(|| decode_lossless(&encode_lossless(&rec.video, &shapes).unwrap(), &shapes, false).unwrap())
    });
}

fn flow_bench(c: &mut Criterion) {
    let (a, b) = shifted_pair(32, 48, 2);
    c.bench_function("block_flow 32x48", |bench| bench.iter(|| block_flow(&a, &b)));
}

fn synth_bench(c: &mut Criterion) {
    let cfg = RunConfig::desk().synth();
    c.bench_function("generate_sample desk", |bench| bench.iter(|| generate_sample(7, &cfg).unwrap()));
}

fn step_bench(c: &mut Criterion) {
    let cfg = small_config();
    let recs = generate_dataset(0, 2, &cfg.synth()).unwrap();
    let refs: Vec<&SampleRecord> = recs.iter().collect();
    let mut group = c.benchmark_group("trainer");
    group.sample_size(10);
    group.bench_function("joint step (small)", |bench| {
        bench.iter_batched(
            || {
                let mut tr = Trainer::new(&cfg).unwrap();
                let s = tr.prepare(&refs).unwrap();
                (tr, s)
            },
            |(mut tr, s)| tr.joint_step(&s, None).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let mut tr = Trainer::new(&cfg).unwrap();
    let s = tr.prepare(&refs).unwrap();
    group.bench_function("warm-up step (small)", |bench| bench.iter(|| tr.warmup_step(&s).unwrap()));
    group.bench_function("generate 10 steps (small)", |bench| {
        bench.iter(|| tr.generate(&recs[0].image, &recs[0].prompt, 10, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, chamfer_bench, codec_bench, flow_bench, synth_bench, step_bench);
criterion_main!(benches);
