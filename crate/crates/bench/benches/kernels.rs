use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use querywise::numerics::{ema_update_in_place, softmax_with_temperature};
use querywise::querywise::{labeled_loss, unlabeled_loss, LossConfig};
use querywise::selection::select_kcenter;
use querywise::Classifier;
use querywise_bench::{conv_net, images, labels, matrix};

fn network(c: &mut Criterion) {
    let net = conv_net(0);
    let x = images(32, 1);
    let dlogits = matrix(32, 3, 0.1, 2);
    c.bench_function("conv_forward_b32", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("conv_backward_b32", |b| {
        b.iter(|| net.backward(black_box(&x), black_box(&dlogits)).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let cfg = LossConfig {
        la_priors: vec![0.5, 0.3, 0.2],
        ..LossConfig::default()
    };
    let (s, t, a) = (matrix(32, 3, 4.0, 3), matrix(32, 3, 4.0, 4), matrix(32, 3, 6.0, 5));
    let y = labels(32, 3, 6);
    c.bench_function("labeled_loss_b32", |b| b.iter(|| labeled_loss(black_box(&s), &a, &y, &cfg).unwrap()));
    c.bench_function("unlabeled_loss_b32", |b| b.iter(|| unlabeled_loss(black_box(&s), &t, &a, &cfg).unwrap()));
    let net = conv_net(7);
    let student = net.params().to_vec();
    c.bench_function("ema_update", |b| {
        b.iter_batched(
            || conv_net(8).params().to_vec(),
            |mut teacher| ema_update_in_place(&mut teacher, &student, 0.999).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn selection(c: &mut Criterion) {
    let probs = softmax_with_temperature(&matrix(4000, 3, 5.0, 9), 1.0).unwrap();
    let seeds: Vec<usize> = (0..100).collect();
    c.bench_function("kcenter_4000x3_pick100", |b| {
        b.iter(|| select_kcenter(black_box(&probs), &seeds, 100).unwrap())
    });
}

criterion_group!(benches, network, losses, selection);
criterion_main!(benches);
