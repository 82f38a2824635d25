mod common;

use agrisplat::eval::{chamfer_distance, count_accuracy, precision_recall_f1, volume_accuracy, NearestIndex};
use nalgebra::Point3;
use common::oracles::{brute_metrics, brute_nn, random_cloud};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..60 {
        let (np, nq) = (rng.gen_range(1..=500), rng.gen_range(1..=500));
        let p = random_cloud(&mut rng, np, 0.2);
        let q = random_cloud(&mut rng, nq, 0.2);
        let tau = rng.gen_range(0.002..0.03);
        let (cd, prec, rec, f1) = brute_metrics(&p, &q, tau);

        assert!((chamfer_distance(&p, &q).unwrap() - cd).abs() < 1e-9);
        let pr = precision_recall_f1(&p, &q, tau).unwrap();
        assert!((pr.precision - prec).abs() < 1e-9);
        assert!((pr.recall - rec).abs() < 1e-9);
        assert!((pr.f1 - f1).abs() < 1e-9);

        let index = NearestIndex::new(&q);
        for x in p.iter().take(50) {
            assert!((index.distance(x) - brute_nn(x, &q)).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_clouds_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in [1, 10, 64, 65, 500] {
        let p = random_cloud(&mut rng, n, 0.3);
        let pr = precision_recall_f1(&p, &p, 0.005).unwrap();
        assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
        assert_eq!((pr.precision, pr.recall, pr.f1), (1.0, 1.0, 1.0));
    }
}

#[test]
fn undefined_metrics_are_errors() {
    let p = vec![Point3::origin()];
    assert!(chamfer_distance(&p, &[]).is_err());
    assert!(precision_recall_f1(&[], &p, 0.01).is_err());
    assert!(volume_accuracy(1.0, 0.0).is_err());
    assert!(count_accuracy(3, 0).is_err());
    assert_eq!(volume_accuracy(0.5, 2.0).unwrap(), 25.0);
    assert_eq!(count_accuracy(11, 10).unwrap(), 110.0);
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_nonnegative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (np, nq) = (rng.gen_range(1..100), rng.gen_range(1..100));
        let p = random_cloud(&mut rng, np, 0.1);
        let q = random_cloud(&mut rng, nq, 0.1);
        let a = chamfer_distance(&p, &q).unwrap();
        let b = chamfer_distance(&q, &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
        let pr = precision_recall_f1(&p, &q, 0.01).unwrap();
        let rp = precision_recall_f1(&q, &p, 0.01).unwrap();
        prop_assert_eq!(pr.precision, rp.recall);
        prop_assert!(pr.f1 <= pr.precision.max(pr.recall) + 1e-12);
    }
}
