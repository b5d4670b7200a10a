use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use croprot_core::dataset::{generate_synthetic, SyntheticConfig};
use croprot_core::encoders::EncoderDims;
use croprot_core::heads::HeadVariant;
use croprot_core::model::{Architecture, Model};
use croprot_core::training::{predict, YearFilter};

fn inference(c: &mut Criterion) {
    let ds = generate_synthetic(&SyntheticConfig::reference_shaped(64, 3)).unwrap();
    let dims = EncoderDims {
        channels: ds.channels,
        ..EncoderDims::default()
    };
    let model = Model::<f32>::new(Architecture::new(dims, ds.classes, HeadVariant::Dec), 1).unwrap();

    let sample = ds.parcels[0].year(1);
    c.bench_function("encode_year default dims", |b| {
        b.iter(|| black_box(model.descriptor(sample, 5).unwrap()))
    });

    let parcels: Vec<usize> = (0..ds.parcels.len()).collect();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    group.throughput(Throughput::Elements((parcels.len() * ds.years) as u64));
    group.bench_function("parcel-years", |b| {
        b.iter(|| black_box(predict(&model, &ds, &parcels, YearFilter::All, 0).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
