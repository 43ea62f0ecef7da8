use proptest::prelude::*;
use querywise::data::{Augment, ImageBatch, ImageShape};
use querywise::datapool::{split_train_val, LabeledSet, SplitSpec};
use querywise::metrics::{agreement, macro_f1, ConfusionMatrix};
use querywise::numerics::{
    argmax, cross_entropy_with_grad, ema_update, kl_divergence, softmax_with_temperature,
};
use querywise::querywise::{confidence_mask, distillation_loss, labeled_loss, unlabeled_loss, KdOrder, LossConfig};
use querywise::selection::{cycle_sizes, select_kcenter, select_random};
use querywise::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-8.0f64..8.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn prob_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

/// Straightforward softmax, computed without max-shifting, for small logits.
fn naive_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|z| (z / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Greedy farthest-point selection written from its definition.
fn brute_kcenter(points: &[Vec<f64>], selected: &[usize], k: usize) -> Vec<usize> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut centers = selected.to_vec();
    let mut picks = Vec::new();
    for _ in 0..k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if centers.contains(&i) {
                continue;
            }
            let d = centers.iter().map(|&c| dist(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let b = best.unwrap();
        centers.push(b);
        picks.push(b);
    }
    picks
}

fn plain_cfg() -> LossConfig {
    LossConfig {
        la_enabled: false,
        ..LossConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions(z in logits_strategy(4, 3), tau in 0.1f64..10.0) {
        let p = softmax_with_temperature(&z, tau).unwrap();
        for (row, zr) in p.iter_rows().zip(z.iter_rows()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            for (a, b) in row.iter().zip(naive_softmax(zr, tau)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_a_constant_shift(z in logits_strategy(3, 4), shift in -50.0f64..50.0, tau in 0.5f64..4.0) {
        let mut shifted = z.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += shift);
        let a = softmax_with_temperature(&z, tau).unwrap();
        let b = softmax_with_temperature(&shifted, tau).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_tends_to_uniform(z in logits_strategy(2, 5)) {
        let p = softmax_with_temperature(&z, 1e6).unwrap();
        prop_assert!(p.as_slice().iter().all(|v| (v - 0.2).abs() < 1e-4));
    }

    #[test]
    fn temperature_preserves_argmax(z in logits_strategy(5, 3), tau in 0.2f64..20.0) {
        let p = softmax_with_temperature(&z, tau).unwrap();
        for (pr, zr) in p.iter_rows().zip(z.iter_rows()) {
            prop_assert_eq!(argmax(pr), argmax(zr));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs(p in prob_vec(4), q in prob_vec(4)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences(z in logits_strategy(3, 3), labels in prop::collection::vec(0usize..3, 3)) {
        let (_, g) = cross_entropy_with_grad(&z, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..9 {
            let mut up = z.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = z.clone();
            down.as_mut_slice()[idx] -= h;
            let fd = (cross_entropy_with_grad(&up, &labels).unwrap().0 - cross_entropy_with_grad(&down, &labels).unwrap().0) / (2.0 * h);
            prop_assert!((fd - g.as_slice()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn distillation_gradient_matches_differences(
        s in logits_strategy(3, 3),
        t in logits_strategy(3, 3),
        tau in 1.1f64..3.0,
        student_first in any::<bool>(),
    ) {
        let order = if student_first { KdOrder::StudentFirst } else { KdOrder::TargetFirst };
        let g = distillation_loss(&s, &t, tau, order, None).unwrap().grad;
        let h = 1e-5;
        for idx in 0..9 {
            let mut up = s.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = s.clone();
            down.as_mut_slice()[idx] -= h;
            let f = |m: &Matrix| distillation_loss(m, &t, tau, order, None).unwrap().value;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            prop_assert!((fd - g.as_slice()[idx]).abs() < 1e-6, "fd {fd} analytic {}", g.as_slice()[idx]);
        }
    }

    #[test]
    fn raising_rho_never_admits_more_samples(a in logits_strategy(8, 3), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let m_lo = confidence_mask(&a, lo).unwrap();
        let m_hi = confidence_mask(&a, hi).unwrap();
        for (l, h) in m_lo.iter().zip(&m_hi) {
            prop_assert!(!h || *l);
        }
    }

    #[test]
    fn masked_rows_carry_no_gradient(s in logits_strategy(6, 3), t in logits_strategy(6, 3), a in logits_strategy(6, 3), rho in 0.3f64..0.99) {
        let cfg = LossConfig { rho, ..plain_cfg() };
        let u = unlabeled_loss(&s, &t, &a, &cfg).unwrap();
        for (i, &pass) in u.mask.iter().enumerate() {
            if !pass {
                prop_assert!(u.grad.row(i).iter().all(|&g| g == 0.0));
            }
        }
        prop_assert!(u.value >= 0.0);
    }

    #[test]
    fn labeled_loss_interpolates_its_terms(s in logits_strategy(4, 3), a in logits_strategy(4, 3), labels in prop::collection::vec(0usize..3, 4), alpha in 0.0f64..=1.0) {
        let at = |alpha| labeled_loss(&s, &a, &labels, &LossConfig { alpha, ..plain_cfg() }).unwrap().value;
        let expected = (1.0 - alpha) * at(0.0) + alpha * at(1.0);
        prop_assert!((at(alpha) - expected).abs() < 1e-9 * (1.0 + expected.abs()));
    }

    #[test]
    fn ema_is_a_convex_combination(
        pair in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..32),
        m in 0.0f64..=1.0,
    ) {
        let (t, s): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let out = ema_update(&t, &s, m).unwrap();
        for ((o, a), b) in out.iter().zip(&t).zip(&s) {
            prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
            prop_assert!((o - (m * a + (1.0 - m) * b)).abs() <= 1e-9 * (1.0 + a.abs() + b.abs()));
        }
        prop_assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t.clone());
        prop_assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s.clone());
    }

    #[test]
    fn kcenter_matches_brute_force(
        pts in prop::collection::vec(prop::collection::vec(-3i32..3, 2), 2..16),
        seed_idx in 0usize..16,
        k in 0usize..8,
    ) {
        // Integer coordinates force plenty of distance ties.
        let points: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
        let n = points.len();
        let seed = seed_idx % n;
        let k = k.min(n - 1);
        let m = Matrix::from_rows(&points).unwrap();
        prop_assert_eq!(select_kcenter(&m, &[seed], k).unwrap(), brute_kcenter(&points, &[seed], k));
    }

    #[test]
    fn random_selection_avoids_exclusions(pool in 1usize..60, excl in prop::collection::vec(0usize..60, 0..20), seed in any::<u64>()) {
        let excl: Vec<usize> = excl.into_iter().filter(|&i| i < pool).collect();
        let mut unique = excl.clone();
        unique.sort_unstable();
        unique.dedup();
        let free = pool - unique.len();
        let n = free / 2;
        let picks = select_random(pool, &excl, n, seed).unwrap();
        prop_assert_eq!(picks.len(), n);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert!(picks.iter().all(|p| *p < pool && !unique.contains(p)));
        prop_assert_eq!(select_random(pool, &excl, n, seed).unwrap(), picks);
        prop_assert!(select_random(pool, &excl, free + 1, seed).is_err());
    }

    #[test]
    fn cycle_sizes_partition_the_budget(total in 0usize..10_000, cycles in 1usize..12) {
        let sizes = cycle_sizes(total, cycles).unwrap();
        prop_assert_eq!(sizes.len(), cycles);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn split_partitions_the_labeled_set(n in 2usize..120, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let shape = ImageShape::new(1, 2, 2);
        let set = LabeledSet {
            ids: (0..n).map(|i| format!("s{i:04}")).collect(),
            images: ImageBatch::new(shape, (0..n * 4).map(|v| v as f64).collect()).unwrap(),
            labels: (0..n).map(|i| i % 3).collect(),
            num_classes: 3,
        };
        let spec = SplitSpec { val_fraction: frac, seed };
        let (train, val) = split_train_val(&set, &spec).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(val.len(), spec.val_size(n));
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<String> = train.ids.iter().chain(&val.ids).cloned().collect();
        all.sort();
        prop_assert_eq!(all, set.ids.clone());
        prop_assert!(train.ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn confusion_accuracy_is_trace_over_total(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..80)) {
        let (truth, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &preds, 3).unwrap();
        let hits = truth.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(cm.accuracy().unwrap(), hits as f64 / truth.len() as f64);
        prop_assert_eq!(agreement(&truth, &preds).unwrap(), agreement(&preds, &truth).unwrap());
        let f1 = macro_f1(&truth, &preds, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        for pos in 0..3 {
            if let Some(s) = cm.sensitivity(pos) { prop_assert!((0.0..=1.0).contains(&s)); }
            if let Some(s) = cm.specificity(pos) { prop_assert!((0.0..=1.0).contains(&s)); }
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range(vals in prop::collection::vec(0.0f64..1.0, 3 * 16), seed in any::<u64>()) {
        let batch = ImageBatch::new(ImageShape::new(1, 4, 4), vals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = Augment { flip: true, max_shift: 2 }.apply(&batch, &mut rng);
        prop_assert_eq!(out.shape(), batch.shape());
        prop_assert_eq!(out.len(), batch.len());
        prop_assert!(out.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
        prop_assert_eq!(Augment::NONE.apply(&batch, &mut rng), batch);
    }
}
