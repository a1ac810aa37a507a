use damel::averaging::{EmaState, SwaState};
use damel::data::{group_partition, long_tail_counts, subsample_longtail, Dataset, LongTailSpec};
use damel::evaluation::{bias_variance_decompose, PredictionMatrix};
use damel::model::{DamelConfig, DamelModel, Variant};
use damel::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn l2_normalize_is_unit_and_idempotent(x in matrix(3, 5)) {
        prop_assume!((0..3).all(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let tape = Tape::new();
        let once = tape.l2_normalize(&x, 1, 1e-12).unwrap();
        let twice = tape.l2_normalize(&once, 1, 1e-12).unwrap();
        for r in 0..3 {
            let norm: f64 = once.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-10);
        }
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_weights_equal_unweighted_ce(x in matrix(4, 3), labels in prop::collection::vec(0usize..3, 4)) {
        let tape = Tape::new();
        let a = tape.softmax_cross_entropy(&x, &labels, None).unwrap();
        let b = tape.softmax_cross_entropy(&x, &labels, Some(&[1.0, 1.0, 1.0])).unwrap();
        prop_assert_eq!(a.item(), b.item());
    }

    #[test]
    fn gradient_never_crosses_detach(x in matrix(3, 4), w in matrix(4, 2)) {
        let tape = Tape::new();
        let xl = tape.leaf(&x);
        let wl = tape.leaf(&w);
        let h = tape.relu(&tape.matmul(&xl, &wl).unwrap()).unwrap();
        let cut = tape.detach(&h);
        let v = tape.leaf(&Tensor::vector(vec![0.5, -1.5]));
        let loss = tape.sum(&tape.mul(&tape.add(&cut, &v).unwrap(), &cut).unwrap()).unwrap();
        let g = tape.backward(&loss).unwrap();
        prop_assert!(g.values_or_zeros(&xl).iter().all(|&v| v == 0.0));
        prop_assert!(g.values_or_zeros(&wl).iter().all(|&v| v == 0.0));
        prop_assert!(g.values(&v).is_some());
    }

    #[test]
    fn long_tail_is_monotone_with_exact_endpoints(classes in 2usize..60, n1 in 1usize..3000, gamma in 1.0f64..200.0) {
        prop_assume!(n1 as f64 / gamma >= 1.0);
        let spec = long_tail_counts(classes, n1, gamma).unwrap();
        let c = spec.counts();
        prop_assert_eq!(c.len(), classes);
        prop_assert_eq!(c[0], n1);
        prop_assert_eq!(c[classes - 1], ((n1 as f64 / gamma) + 0.5).floor() as usize);
        prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn groups_partition_the_classes(classes in 2usize..40, gamma in 1.0f64..100.0, hi in 21usize..200) {
        let spec = long_tail_counts(classes, 500, gamma).unwrap();
        let part = group_partition(&spec, hi, 20).unwrap();
        let mut all: Vec<usize> = part.many.iter().chain(&part.medium).chain(&part.few).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
    }

    #[test]
    fn subsampling_copies_rows_exactly(seed in any::<u64>(), per_class in 6usize..12) {
        let classes = 3;
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let features: Vec<f64> = (0..labels.len() * 2).map(|i| (i as f64).sqrt() * 0.1).collect();
        let source = Dataset::new(features, 2, labels, classes).unwrap();
        let spec = LongTailSpec::from_counts(vec![6, 3, 1]).unwrap();
        let sub = subsample_longtail(&source, &spec, seed).unwrap();
        prop_assert_eq!(sub.counts(), vec![6, 3, 1]);
        for i in 0..sub.len() {
            let row = sub.row(i);
            let found = (0..source.len()).any(|j| source.row(j) == row && source.labels()[j] == sub.labels()[i]);
            prop_assert!(found);
        }
    }

    #[test]
    fn ema_coefficients_favor_recent_snapshots(beta in 0.01f64..0.99, n in 2usize..30) {
        // Feed unit vectors so the state holds the coefficients directly.
        let mut ema = EmaState::new(beta).unwrap();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            ema.update(&e).unwrap();
        }
        let c = ema.weights().unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(c[1..].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn swa_coefficients_are_uniform(n in 1usize..30) {
        let mut swa = SwaState::new();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            swa.update(&e).unwrap();
        }
        for &c in swa.weights().unwrap() {
            prop_assert!((c - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_never_mutates_the_live_weights(theta in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut ema = EmaState::new(0.1).unwrap();
        let copy = theta.clone();
        ema.update(&theta).unwrap();
        ema.update(&theta.iter().map(|v| v * 2.0).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(theta, copy);
    }

    #[test]
    fn decomposition_identity_and_symmetries(
        s in 2usize..6,
        m in 1usize..8,
        classes in 2usize..5,
        raw in prop::collection::vec(0usize..100, 48 + 8),
    ) {
        let labels: Vec<usize> = (0..m).map(|i| raw[i] % classes).collect();
        let preds: Vec<PredictionMatrix> = (0..s)
            .map(|k| {
                let idx: Vec<usize> = (0..m).map(|i| raw[8 + k * 8 + i] % classes).collect();
                PredictionMatrix::one_hot(&idx, classes).unwrap()
            })
            .collect();
        let y = PredictionMatrix::one_hot(&labels, classes).unwrap();
        let r = bias_variance_decompose(&preds, &y, false).unwrap();
        prop_assert!((r.bias_sq + r.variance - r.mse).abs() < 1e-9);
        let identical = preds.iter().all(|p| p == &preds[0]);
        prop_assert_eq!(r.variance == 0.0, identical);
        let mut reversed = preds.clone();
        reversed.reverse();
        let rr = bias_variance_decompose(&reversed, &y, false).unwrap();
        prop_assert!((rr.bias_sq - r.bias_sq).abs() < 1e-12);
        prop_assert!((rr.variance - r.variance).abs() < 1e-12);
        prop_assert!((rr.mse - r.mse).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cosine_logits_stay_within_alpha(seed in any::<u64>(), alpha in 1.0f64..30.0, x in matrix(5, 6)) {
        for variant in [Variant::Standard, Variant::AggregatePredictions, Variant::AverageRepresentations, Variant::CapacityControlled] {
            let cfg = DamelConfig { experts: 2, input_dim: 6, hidden_dim: 8, rep_dim: 4, classes: 3, alpha, variant, ..DamelConfig::default() };
            let mut model = DamelModel::init(&cfg, seed).unwrap();
            let out = model.forward(&Tape::new(), None, &x).unwrap();
            for t in out.expert_logits.iter().chain(&out.aux_logits) {
                prop_assert!(t.values().iter().all(|v| v.abs() <= alpha + 1e-9));
            }
        }
    }

    #[test]
    fn positive_input_scaling_keeps_expert_logits(seed in any::<u64>(), c in 0.1f64..10.0, x in matrix(4, 5)) {
        // Bias-free, norm-free network: relu layers are positively homogeneous.
        let cfg = DamelConfig { experts: 2, input_dim: 5, hidden_dim: 7, rep_dim: 4, classes: 3, use_norm_layers: false, ..DamelConfig::default() };
        let mut model = DamelModel::init(&cfg, seed).unwrap();
        for affine in model.params.backbone.iter_mut() {
            affine.bias.values_mut().iter_mut().for_each(|b| *b = 0.0);
        }
        for block in model.params.experts.iter_mut() {
            block.layer.bias.values_mut().iter_mut().for_each(|b| *b = 0.0);
        }
        let scaled = Tensor::matrix(4, 5, x.values().iter().map(|v| v * c).collect()).unwrap();
        let a = model.forward(&Tape::new(), None, &x).unwrap();
        let b = model.forward(&Tape::new(), None, &scaled).unwrap();
        for (la, lb) in a.expert_logits.iter().zip(&b.expert_logits) {
            for (u, v) in la.values().iter().zip(lb.values()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
