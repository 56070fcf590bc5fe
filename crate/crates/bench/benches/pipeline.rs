use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use drone_ear::doa::{das_beamform, energy_doa, energy_windows, PolarGrid, ScanGrid};
use drone_ear::pipeline::{run_pipeline, PipelineConfig};
use drone_ear::simulator::{equilateral_array, logamp_adc, SceneConfig};
use drone_ear::frontend::FrontEnd;
use drone_ear::{ArrayGeometry, LogAmpModel, SpectrumAnalyzer};

fn scene(seconds: f64) -> SceneConfig {
    let mut cfg = SceneConfig::drone("quad-small", [3.0, 4.0, 0.0], seconds, 1).unwrap();
    cfg.noise_db = Some(-40.0);
    cfg
}

fn benches(c: &mut Criterion) {
    let geom = ArrayGeometry::with_unit_gains(equilateral_array(0.5)).unwrap();
    let short = scene(1.0);
    let stream = short.render_decimated().unwrap();
    let analyzer = SpectrumAnalyzer::new();
    let frame = analyzer.frame(&stream, 5).unwrap();

    c.bench_function("front_end_one_second", |b| {
        let (block, _) = logamp_adc(&short.render_analog().unwrap(), &short.adc_settings(), 2).unwrap();
        b.iter(|| FrontEnd::process(LogAmpModel::default(), black_box(&block)).unwrap())
    });
    c.bench_function("spectrum_frame", |b| b.iter(|| analyzer.frame(black_box(&stream), 5).unwrap()));
    c.bench_function("beamformer_scan_1deg", |b| {
        let scan = ScanGrid::azimuth(1.0);
        let weights = vec![1.0; 1024];
        b.iter(|| das_beamform(black_box(&frame), &geom, &weights, &scan, 343.0).unwrap())
    });
    c.bench_function("energy_doa_window", |b| {
        let windows = energy_windows(&stream);
        let grid = PolarGrid::default();
        b.iter(|| energy_doa(black_box(&windows[2]), &geom, &grid).unwrap())
    });

    let long = scene(10.0).render_decimated().unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("run_10s", |b| {
        let mut cfg = PipelineConfig::new(geom.clone(), 1e-3);
        cfg.beamformer = true;
        b.iter(|| run_pipeline(black_box(&long), None, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
