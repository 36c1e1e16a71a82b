use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedbev::eval::rotated_iou;
use fedbev::fed::KdTree;
use fedbev::geom::RotatedBox;
use fedbev::grad::{Tape, Tensor};
use fedbev::runner::{build_model, preset};
use fedbev::scene::{build_test_set, ModalityPolicy, WeatherMix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[16, 32, 32]);
    let k = random(&mut rng, &[16, 16, 3, 3]);
    c.bench_function("conv2d 16x32x32 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let kv = t.leaf(k.clone());
            let y = t.conv2d(xv, kv, 1, 1).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn iou(c: &mut Criterion) {
    let a = RotatedBox::new(10.0, 10.0, 6.0, 2.5, 0.3, true);
    let b = RotatedBox::new(11.0, 10.5, 7.0, 2.2, 1.1, false);
    c.bench_function("rotated_iou", |bch| bch.iter(|| rotated_iou(black_box(&a), black_box(&b))));
}

fn kdtree(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let points: Vec<Vec<f64>> = (0..40).map(|_| (0..64).map(|_| rng.random()).collect()).collect();
    let refs: Vec<(usize, &[f64])> = points.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
    let tree = KdTree::build(&refs, None).unwrap();
    c.bench_function("kd-tree build 40x64", |b| b.iter(|| KdTree::build(black_box(&refs), None).unwrap()));
    c.bench_function("kd-tree 8-nn query", |b| {
        b.iter(|| tree.query_knn(black_box(&points[3]), 8, Some(3)).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let cfg = preset("desk-lite").unwrap();
    let (det, params) = build_model(&cfg).unwrap();
    let sample = build_test_set(&cfg.data.scene, 1, 1, &WeatherMix::default(), &ModalityPolicy::none())
        .unwrap()
        .remove(0);
    c.bench_function("detector infer 32x32", |b| b.iter(|| det.infer(&params, black_box(&sample)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, iou, kdtree, detector
}
criterion_main!(benches);
