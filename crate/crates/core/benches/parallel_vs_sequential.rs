use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ami_core::fixtures;
use ami_core::inference::{BlobDetector, BoundingBox, Detection, LoadedStages};
use ami_core::par::Execution;
use ami_core::synthgen::{render_range, CropAsset, ReviewState, SceneConfig};
use ami_core::tracking::{cost_matrix, CostWeights};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|index| {
            let (x, y) = (rng.gen_range(0.0..1800.0), rng.gen_range(0.0..1000.0));
            let (w, h) = (rng.gen_range(10.0..120.0), rng.gen_range(10.0..120.0));
            Detection {
                index,
                bbox: BoundingBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h },
                det_score: 1.0,
                binary: None,
                species: None,
                feature: Some((0..256).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
            }
        })
        .collect()
}

fn bench_cost_matrix(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prev = random_detections(&mut rng, 160);
    let next = random_detections(&mut rng, 160);
    let rows: Vec<&Detection> = prev.iter().collect();
    let w = CostWeights::default();
    let diag = 1920f64.hypot(1080.0);
    let mut g = c.benchmark_group("cost_matrix_160x160");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| cost_matrix(&rows, &next, &w, diag, exec).unwrap()));
    }
    g.finish();
}

fn speckled_frames(n: usize) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|_| {
            let mut img = RgbImage::from_pixel(960, 720, Rgb([220, 220, 210]));
            for _ in 0..40 {
                let (x0, y0) = (rng.gen_range(0..920), rng.gen_range(0..680));
                let (w, h) = (rng.gen_range(12..40), rng.gen_range(12..40));
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        img.put_pixel(x, y, Rgb([40, 30, 25]));
                    }
                }
            }
            img
        })
        .collect()
}

fn bench_blob(c: &mut Criterion) {
    let frames = speckled_frames(16);
    let det = BlobDetector::default();
    let mut g = c.benchmark_group("blob_detect_16_frames");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| det.detect_batch(&frames, exec)));
    }
    g.finish();
}

fn bench_stages(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let night = fixtures::write_night(dir.path(), "bench", 24, &[]).unwrap();
    let stages = LoadedStages::load(&night.specs).unwrap();
    let frames = fixtures::frames(24);
    let mut g = c.benchmark_group("stages_24_frames");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| stages.run_batch(&frames, 5, exec)));
    }
    g.finish();
}

fn bench_scenes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let crops: Vec<CropAsset> = (0..12)
        .map(|i| {
            let (w, h) = (rng.gen_range(30..70), rng.gen_range(30..70));
            let img = RgbaImage::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
                if dx * dx + dy * dy < 0.25 { Rgba([90, 60, 40, 255]) } else { Rgba([0, 0, 0, 0]) }
            });
            CropAsset::new(img, format!("c{i}"), ReviewState::Approved).unwrap()
        })
        .collect();
    let backgrounds = vec![RgbImage::from_pixel(640, 480, Rgb([200, 200, 190]))];
    let config = SceneConfig::default();
    let out = tempfile::tempdir().unwrap();
    let mut g = c.benchmark_group("render_32_scenes");
    g.sample_size(10).measurement_time(Duration::from_secs(15));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| render_range(out.path(), &backgrounds, &crops, &config, 7, 0..32, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_cost_matrix, bench_blob, bench_stages, bench_scenes);
criterion_main!(benches);
