mod oracle;

use evomerge_core::merge::{dare, elect, trim, TaskSet};
use evomerge_core::{KeyFilter, MergeConfig, Tensor, TensorMap};
use proptest::prelude::*;

fn flat(data: Vec<f32>) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::vector(data));
    m
}

fn values() -> impl Strategy<Value = f32> {
    prop_oneof![
        4 => -4.0f32..4.0,
        1 => Just(0.0f32),
        1 => (-3i32..3).prop_map(|v| v as f32),
    ]
}

/// (init, fine-tuned, k, c, lambda)
type Instance = (Vec<f32>, Vec<Vec<f32>>, Vec<f64>, Vec<f64>, f64);

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=64, 1usize..=4).prop_flat_map(|(d, tasks)| {
        (
            prop::collection::vec(values(), d),
            prop::collection::vec(prop::collection::vec(values(), d), tasks),
            prop::collection::vec(0.0f64..=1.0, tasks),
            prop::collection::vec(0.0f64..=2.0, tasks),
            0.0f64..=2.0,
        )
    })
}

proptest! {
    #[test]
    fn matches_naive_oracle((init, fts, k, c, lambda) in instance()) {
        let base = flat(init.clone());
        let models: Vec<TensorMap> = fts.iter().cloned().map(flat).collect();
        let refs: Vec<&TensorMap> = models.iter().collect();
        let cfg = MergeConfig { k: k.clone(), c: c.clone(), lambda, ..MergeConfig::identity(fts.len()) };
        let out = TaskSet::new(&base, &refs, &KeyFilter::all()).unwrap().merge(&cfg).unwrap();
        let expected = oracle::ties_reference(&init, &fts, &k, &c, lambda);
        let got = out.get("w").unwrap().data();
        prop_assert!(got.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()),
            "got {:?} expected {:?}", got, expected);
    }

    #[test]
    fn single_model_recovery(init in prop::collection::vec(-10.0f32..10.0, 1..200),
                             delta in prop::collection::vec(-1.0f32..1.0, 200)) {
        let ft: Vec<f32> = init.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let base = flat(init);
        let model = flat(ft);
        let set = TaskSet::new(&base, &[&model], &KeyFilter::all()).unwrap();
        let out = set.merge(&MergeConfig::identity(1)).unwrap();
        prop_assert!(out.bit_eq(&model));
    }

    #[test]
    fn trim_is_idempotent(data in prop::collection::vec(values(), 1..80), k in 0.0f64..=1.0) {
        let base = flat(vec![0.0; data.len()]);
        let tau = evomerge_core::merge::task_vector(&flat(data), &base, &KeyFilter::all()).unwrap();
        let once = trim(&tau, k).unwrap();
        prop_assert_eq!(trim(&once, k).unwrap(), once);
    }

    #[test]
    fn elect_is_antisymmetric(
        tasks in prop::collection::vec(prop::collection::vec(values(), 16), 1..5)
    ) {
        let base = flat(vec![0.0; 16]);
        let pos: Vec<_> = tasks.iter().map(|t| evomerge_core::merge::task_vector(&flat(t.clone()), &base, &KeyFilter::all()).unwrap()).collect();
        let neg: Vec<_> = tasks.iter().map(|t| {
            let n: Vec<f32> = t.iter().map(|v| -v).collect();
            evomerge_core::merge::task_vector(&flat(n), &base, &KeyFilter::all()).unwrap()
        }).collect();
        let a = elect(&pos).unwrap();
        let b = elect(&neg).unwrap();
        prop_assert!(a.0.iter().zip(&b.0).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn merge_output_is_affine_in_lambda((init, fts, k, c, _) in instance(),
                                        l1 in 0.0f64..=2.0, l2 in 0.0f64..=2.0) {
        let base = flat(init.clone());
        let models: Vec<TensorMap> = fts.iter().cloned().map(flat).collect();
        let refs: Vec<&TensorMap> = models.iter().collect();
        let set = TaskSet::new(&base, &refs, &KeyFilter::all()).unwrap();
        let cfg = MergeConfig { k, c, lambda: l1, ..MergeConfig::identity(fts.len()) };
        let merged = set.merged_vector(&cfg).unwrap();
        let a = set.merge(&cfg).unwrap();
        let b = set.merge(&MergeConfig { lambda: l2, ..cfg }).unwrap();
        let (a, b) = (a.get("w").unwrap().data(), b.get("w").unwrap().data());
        for p in 0..init.len() {
            let expected = (l1 - l2) * merged.values()[p];
            let diff = a[p] as f64 - b[p] as f64;
            // each side is rounded to f32 once
            let tol = 2.0 * f32::EPSILON as f64 * (a[p].abs().max(b[p].abs()) as f64).max(1e-30);
            prop_assert!((diff - expected).abs() <= tol, "p={} diff={} expected={}", p, diff, expected);
        }
    }

    #[test]
    fn dare_is_deterministic(data in prop::collection::vec(values(), 1..64), alpha in 0.0f64..=0.9, seed: u64) {
        let base = flat(vec![0.0; data.len()]);
        let tau = evomerge_core::merge::task_vector(&flat(data), &base, &KeyFilter::all()).unwrap();
        prop_assert_eq!(dare(&tau, alpha, seed).unwrap(), dare(&tau, alpha, seed).unwrap());
    }
}

#[test]
fn dare_unbiased_over_many_seeds() {
    let taus = [1.0f32, -0.5, 2.0, 0.25];
    let base = flat(vec![0.0; 4]);
    let tau =
        evomerge_core::merge::task_vector(&flat(taus.to_vec()), &base, &KeyFilter::all()).unwrap();
    let runs = 10_000;
    for &alpha in &[0.1, 0.5, 0.9] {
        let mut sums = [0.0f64; 4];
        for seed in 0..runs {
            let out = dare(&tau, alpha, seed).unwrap();
            for (s, v) in sums.iter_mut().zip(out.values()) {
                *s += v;
            }
        }
        for (p, &t) in taus.iter().enumerate() {
            let mean = sums[p] / runs as f64;
            let sigma = (t as f64).abs() * (alpha / ((1.0 - alpha) * runs as f64)).sqrt();
            assert!(
                (mean - t as f64).abs() < 4.0 * sigma,
                "alpha={alpha} p={p} mean={mean}"
            );
        }
    }
}

#[test]
fn worked_example_matches_oracle() {
    let init = vec![0.0f32; 3];
    let fts = vec![vec![4.0f32, -2.0, 0.1], vec![-2.0, -2.0, 3.0]];
    let k = [2.0 / 3.0, 2.0 / 3.0];
    let expected = oracle::ties_reference(&init, &fts, &k, &[1.0, 1.0], 1.0);
    assert_eq!(expected, vec![4.0, -2.0, 3.0]);
}
