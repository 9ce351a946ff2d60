use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use maskbench_bench::{noise, speech};
use maskbench_core::masks::{apply_mask, build_mask, oracle_snr, DEFAULT_SNR_FLOOR};
use maskbench_core::metrics::{NcmConfig, NcmReference};
use maskbench_core::morphology::{mask_rmse, CurveSpec};
use maskbench_core::spectral::{analyze, synthesize};
use maskbench_core::{MaskParams, StftConfig};

fn gains(c: &mut Criterion) {
    let xi: Vec<f64> = (0..10_000).map(|i| 10f64.powf((i as f64 / 10_000.0 - 0.5) * 12.0)).collect();
    for params in [
        MaskParams::Wiener,
        MaskParams::ParametricWiener { beta: 0.3, eta: 39.0 },
        MaskParams::Conformable { gamma: 2.5, mu: 0.3 },
    ] {
        c.bench_function(&format!("gain_10k/{}", params.label()), |b| {
            b.iter(|| black_box(&xi).iter().map(|&x| params.gain(x)).sum::<f64>())
        });
    }
}

fn stft(c: &mut Criterion) {
    let x = speech();
    let cfg = StftConfig::default();
    c.bench_function("stft_round_trip_2s", |b| b.iter(|| synthesize(&analyze(black_box(&x), &cfg).unwrap()).unwrap()));
    let (clean, v) = (analyze(&x, &cfg).unwrap(), analyze(&noise(), &cfg).unwrap());
    let snr = oracle_snr(&clean, &v, DEFAULT_SNR_FLOOR).unwrap();
    let mask = build_mask(&MaskParams::Conformable { gamma: 2.0, mu: 1.0 }, &snr);
    c.bench_function("mask_apply_synthesize_2s", |b| {
        b.iter(|| synthesize(&apply_mask(&mask, black_box(&clean)).unwrap()).unwrap())
    });
}

fn morphology(c: &mut Criterion) {
    let a = CurveSpec::new(MaskParams::Conformable { gamma: 0.5, mu: 3.1623 });
    let w = CurveSpec::new(MaskParams::Wiener);
    c.bench_function("mask_rmse_0.001dB", |b| b.iter(|| mask_rmse(black_box(&a), &w).unwrap()));
}

fn ncm(c: &mut Criterion) {
    let x = speech();
    let y = x.add(&noise()).unwrap();
    let cfg = NcmConfig::default();
    c.bench_function("ncm_reference_2s", |b| b.iter(|| NcmReference::new(black_box(&x), &cfg).unwrap()));
    let reference = NcmReference::new(&x, &cfg).unwrap();
    c.bench_function("ncm_score_2s", |b| b.iter(|| reference.score(black_box(&y)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = gains, stft, morphology, ncm
}
criterion_main!(benches);
