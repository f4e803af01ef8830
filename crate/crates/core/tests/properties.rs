//! Invariants over randomly generated inputs.

use proptest::prelude::*;

use cloth::data::{batch_iter, read_cache, write_cache, Dataset, Domain};
use cloth::engine::compare_plans;
use cloth::engine::losses::entropy_from_probs;
use cloth::hmm::{hm_bruteforce, hm_kernel, MomentOrder};
use cloth::numerics::{softmax, softmax_into, Matrix, SeededStream, LOG_FLOOR};
use cloth::ot::{sinkhorn, CostMatrix, Marginals, SinkhornOptions};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn sized(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

fn row_softmax(mut m: Matrix) -> Matrix {
    for i in 0..m.rows() {
        let r = m.row(i).to_vec();
        softmax_into(&r, m.row_mut(i));
    }
    m
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_form_equals_explicit_moments(
        (u, v) in (1usize..=4, 1usize..=6, 1usize..=6)
            .prop_flat_map(|(p, nu, nv)| (matrix(nu, p, -2.0, 2.0), matrix(nv, p, -2.0, 2.0))),
        q in 1u32..=3,
    ) {
        let q = MomentOrder::new(q).unwrap();
        let brute = hm_bruteforce(&u, &v, q).unwrap();
        let kern = hm_kernel(&u, &v, q, 1.0).unwrap();
        prop_assert!((kern - brute).abs() <= 1e-10 * brute.abs().max(1.0));
        prop_assert!(kern >= -1e-10);
        prop_assert!(hm_kernel(&u, &u, q, 1.0).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn sinkhorn_meets_marginals_and_dual_rises(
        (c, a, b) in (1usize..=10, 1usize..=10)
            .prop_flat_map(|(n, m)| (matrix(n, m, 0.0, 1.0), simplex(n), simplex(m))),
        eps in prop::sample::select(vec![0.05, 0.2, 1.0]),
    ) {
        let marg = Marginals::new(a, b).unwrap();
        let r = sinkhorn(&CostMatrix::new(c).unwrap(), &marg, SinkhornOptions { epsilon: eps, max_iter: 50_000, tol: 1e-9 }).unwrap();
        prop_assert!(r.plan.marginal_violation(&marg) <= 1e-6);
        prop_assert!(r.plan.matrix().as_slice().iter().all(|v| *v >= 0.0));
        for w in r.dual_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn entropy_loss_stays_in_range(logits in sized(40, 8, -15.0, 15.0)) {
        prop_assume!(logits.rows() >= 2 && logits.cols() >= 2);
        let m = logits.cols();
        let (v, g) = entropy_from_probs(&row_softmax(logits), LOG_FLOOR).unwrap();
        prop_assert!(v <= 1e-9 && v >= -(m as f64).ln() - 1e-9, "{v}");
        prop_assert!(g.is_finite());
    }

    #[test]
    fn amortized_never_beats_free_marginal_optimum(
        (c, t) in (1usize..=30, 2usize..=5).prop_flat_map(|(n, m)| (matrix(n, m, 0.0, 3.0), matrix(n, m, -4.0, 4.0))),
    ) {
        let r = compare_plans(&row_softmax(t), &CostMatrix::new(c).unwrap(), SinkhornOptions::default(), 0.1).unwrap();
        prop_assert!(r.amortized >= r.exact_free_pi - 1e-12);
        prop_assert!(r.ratio_amortized_exact >= 1.0 - 1e-12 || r.exact_free_pi == 0.0);
        prop_assert!((r.induced_pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn batches_cover_each_epoch_without_repeats(n in 2usize..200, b in 1usize..64, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let mut it = batch_iter(n, b, SeededStream::new(seed)).unwrap();
        let per_epoch = n / b;
        for _ in 0..2 {
            let mut seen = vec![false; n];
            for _ in 0..per_epoch {
                let batch = it.next().unwrap();
                prop_assert_eq!(batch.len(), b);
                for i in batch {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
        }
    }

    #[test]
    fn cache_round_trips(x in sized(20, 6, -1e6, 1e6), m in 1usize..5, labelled in any::<bool>(), seed in any::<u64>()) {
        let mut s = SeededStream::new(seed);
        let labels = labelled.then(|| (0..x.rows()).map(|_| s.below(m)).collect::<Vec<_>>());
        let ds = Dataset::new(x, labels, m, Domain::Target).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        write_cache(&p, &ds).unwrap();
        prop_assert_eq!(read_cache(&p, Domain::Target).unwrap(), ds);
    }

    #[test]
    fn split_partitions_rows(n in 1usize..300, frac in 0.0f64..0.5, seed in any::<u64>()) {
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let ds = Dataset::new(x, Some(vec![0; n]), 1, Domain::Source).unwrap();
        let (rest, held) = ds.split(frac, &mut SeededStream::new(seed));
        let mut all: Vec<f64> = rest.features().as_slice().iter().chain(held.features().as_slice()).copied().collect();
        all.sort_by(f64::total_cmp);
        prop_assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
    }
}
