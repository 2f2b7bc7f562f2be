use muse_core::distill::{image_loss, nucleus_loss, teacher_probs};
use muse_core::evalsuite::detection_f1_scores;
use muse_core::finetune::{lambda_cons_schedule, suppress, Detection};
use muse_core::gradsuite::probe_model;
use muse_core::matching::match_points;
use muse_core::model::init_params;
use muse_core::numerics::{bilinear_sample, cross_entropy, ema_update, entropy, softmax_t};
use muse_core::sampler::MatchSet;
use muse_core::synth::NucleusRecord;
use muse_core::{FeatureBundle, SeededRng, Tensor};
use proptest::prelude::*;

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, k)
}

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..40.0, 0.0f64..40.0), 0..max)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits(7), tau in 0.01f64..2.0) {
        let p = softmax_t(&z, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cross_entropy_bounds_entropy(a in logits(6), b in logits(6), ta in 0.04f64..1.0, tb in 0.04f64..1.0) {
        let p = softmax_t(&a, ta).unwrap();
        let q = softmax_t(&b, tb).unwrap();
        prop_assert!(cross_entropy(&p, &q).unwrap() >= entropy(&p) - 1e-9);
        prop_assert!((cross_entropy(&p, &p).unwrap() - entropy(&p)).abs() < 1e-9);
    }

    #[test]
    fn centering_with_own_logits_is_uniform(z in logits(5), tau in 0.02f64..1.0) {
        let p = teacher_probs(&z, &z, tau).unwrap();
        prop_assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn uniform_teacher_gives_log_k(s in prop::collection::vec(logits(4), 2..6), c in logits(4)) {
        let t = vec![c.clone(), c.clone()];
        let l = image_loss(&t, &s, &c, 0.04, 0.1).unwrap();
        let pairs = 2 * (s.len() - 1);
        let expected: f64 = (0..2)
            .flat_map(|g| (0..s.len()).filter(move |&v| v != g))
            .map(|v| {
                let q = softmax_t(&s[v], 0.1).unwrap();
                -q.iter().map(|x| x.max(1e-12).ln()).sum::<f64>() / 4.0
            })
            .sum::<f64>()
            / pairs as f64;
        prop_assert!((l - expected).abs() < 1e-9);
    }

    #[test]
    fn bilinear_sampling_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 5),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 5),
        x in 0.0f64..20.0,
        y in 0.0f64..20.0,
        ca in -3.0f64..3.0,
        cb in -3.0f64..3.0,
    ) {
        let ta = Tensor::new(vec![2, 5, 5], a.clone()).unwrap();
        let tb = Tensor::new(vec![2, 5, 5], b.clone()).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| ca * p + cb * q).collect();
        let tm = Tensor::new(vec![2, 5, 5], mix).unwrap();
        let sa = bilinear_sample(&ta, x, y, 4.0).unwrap();
        let sb = bilinear_sample(&tb, x, y, 4.0).unwrap();
        let sm = bilinear_sample(&tm, x, y, 4.0).unwrap();
        for c in 0..2 {
            prop_assert!((sm.data()[c] - (ca * sa.data()[c] + cb * sb.data()[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_endpoints(t in prop::collection::vec(-2.0f64..2.0, 6), s in prop::collection::vec(-2.0f64..2.0, 6), m in 0.0f64..1.0) {
        let (tt, ts) = (Tensor::from_vec(t.clone()), Tensor::from_vec(s.clone()));
        prop_assert_eq!(ema_update(&tt, &ts, 1.0).unwrap(), tt.clone());
        prop_assert_eq!(ema_update(&tt, &ts, 0.0).unwrap(), ts.clone());
        let mid = ema_update(&tt, &ts, m).unwrap();
        for ((v, a), b) in mid.data().iter().zip(&t).zip(&s) {
            prop_assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn lambda_cons_is_monotone(n in 1usize..60, lmax in 0.0f64..1.0) {
        let v: Vec<f64> = (0..=n).map(|i| lambda_cons_schedule(i, n, lmax).unwrap()).collect();
        prop_assert_eq!(v[0], 0.0);
        prop_assert_eq!(v[n], lmax);
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn matching_is_one_to_one_within_radius(p in points(8), g in points(8), r in 0.5f64..10.0) {
        let pairs = match_points(&p, &g, r);
        let mut seen_p = vec![false; p.len()];
        let mut seen_g = vec![false; g.len()];
        for &(i, j) in &pairs {
            prop_assert!(!seen_p[i] && !seen_g[j]);
            seen_p[i] = true;
            seen_g[j] = true;
            prop_assert!((p[i].0 - g[j].0).hypot(p[i].1 - g[j].1) <= r);
        }
    }

    #[test]
    fn f1_ignores_prediction_order(p in points(7), g in points(7), seed in 0u64..1000, r in 1.0f64..8.0) {
        let det: Vec<Detection> = p
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Detection { x, y, class_id: 1 + i % 2, score: 1.0 })
            .collect();
        let gt: Vec<NucleusRecord> = g
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| NucleusRecord { index: i, x, y, class_id: i % 2 })
            .collect();
        let mut shuffled = det.clone();
        SeededRng::new(seed).shuffle(&mut shuffled);
        let (a, b) = (detection_f1_scores(&det, &gt, r, 2), detection_f1_scores(&shuffled, &gt, r, 2));
        prop_assert!((a.1 - b.1).abs() < 1e-12);
        prop_assert!(a.1 >= 0.0 && a.1 <= 1.0);
    }

    #[test]
    fn suppression_leaves_separated_points(p in points(12), r in 0.5f64..12.0) {
        let cands: Vec<Detection> = p
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Detection { x, y, class_id: 1, score: (i * 7 % 5) as f64 })
            .collect();
        let kept = suppress(cands.clone(), r);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!((a.x - b.x).hypot(a.y - b.y) > r);
            }
        }
        for c in &cands {
            prop_assert!(kept.iter().any(|k| (k.x - c.x).hypot(k.y - c.y) <= r || k == c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nucleus_loss_ignores_pair_order(seed in 0u64..10_000, n in 1usize..6) {
        let m = probe_model(0.3);
        let mut rng = SeededRng::new(seed);
        let tp = init_params(&m, &mut rng.child("t", 0)).unwrap();
        let sp = init_params(&m, &mut rng.child("s", 0)).unwrap();
        let c = m.fmap_channels();
        let bundle = |rng: &mut SeededRng| FeatureBundle {
            f_cls: Tensor::zeros(&[m.dim]),
            f_map: Tensor::new(vec![c, 4, 4], (0..c * 16).map(|_| rng.normal()).collect()).unwrap(),
            stride: 4.0,
        };
        let (tb, sb) = (bundle(&mut rng), bundle(&mut rng));
        let tc: Vec<(f64, f64)> = (0..n).map(|_| (16.0 * rng.uniform(), 16.0 * rng.uniform())).collect();
        let sc: Vec<(f64, f64)> = (0..n).map(|_| (16.0 * rng.uniform(), 16.0 * rng.uniform())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, order[i])).collect();
        let mut shuffled = pairs.clone();
        rng.shuffle(&mut shuffled);
        let center: Vec<f64> = (0..m.proto_nu).map(|_| 0.1 * rng.normal()).collect();
        let a = nucleus_loss((&tp, &tb, &tc), (&sp, &sb, &sc), &MatchSet { pairs }, &center, 0.04, 0.1).unwrap();
        let b = nucleus_loss((&tp, &tb, &tc), (&sp, &sb, &sc), &MatchSet { pairs: shuffled }, &center, 0.04, 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }
}
