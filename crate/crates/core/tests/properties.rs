//! Randomized property tests for the numeric substrate: metric axioms for
//! total variation, condition-number algebra, the Kronecker pseudo-inverse
//! factorization, tensor layout round trips, simplex closure of every
//! prior's sampler, and the generalized Pinsker inequality.

use proptest::prelude::*;

use topicssl::generative::{
    ctm_covariance, gen_topic_word_matrix, sample_w, PriorSpec, TopicMatrixKind,
};
use topicssl::linalg::{
    kron, l1_cond_number, pinv_left, tv_distance, Matrix, MomentTensor, ProbVec,
    DEFAULT_RANK_TOL,
};
use topicssl::rng::stream_rng;

fn prob_vec(dim: usize) -> impl Strategy<Value = ProbVec> {
    prop::collection::vec(1e-4..1.0f64, dim)
        .prop_map(|v| ProbVec::from_normalizing(v).expect("positive entries normalize"))
}

fn prob_triple() -> impl Strategy<Value = (ProbVec, ProbVec, ProbVec)> {
    (2usize..12).prop_flat_map(|d| (prob_vec(d), prob_vec(d), prob_vec(d)))
}

fn small_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).expect("finite entries"))
    })
}

fn topic_matrix_params() -> impl Strategy<Value = (usize, usize, f64, u64)> {
    (2usize..4, 0usize..5, 0.5..3.0f64, any::<u64>())
        .prop_map(|(k, extra, alpha, seed)| (k, 2 * k + extra, alpha, seed))
}

proptest! {
    #[test]
    fn tv_is_a_metric((p, q, r) in prob_triple()) {
        let pq = tv_distance(&p, &q).unwrap();
        let qp = tv_distance(&q, &p).unwrap();
        let pp = tv_distance(&p, &p).unwrap();
        let pr = tv_distance(&p, &r).unwrap();
        let qr = tv_distance(&q, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!((pq - qp).abs() <= 1e-15);
        prop_assert!(pp == 0.0);
        prop_assert!(pr <= pq + qr + 1e-12);
        // Identity of indiscernibles: positive distance unless equal.
        let equal = p.as_slice() == q.as_slice();
        prop_assert_eq!(pq == 0.0, equal);
    }

    #[test]
    fn l1_cond_number_is_scale_homogeneous(b in small_matrix(), c in -5.0..5.0f64) {
        let scaled = Matrix::new(
            b.rows(),
            b.cols(),
            b.as_slice().iter().map(|x| c * x).collect(),
        ).unwrap();
        let lhs = l1_cond_number(&scaled);
        let rhs = c.abs() * l1_cond_number(&b);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn l1_cond_number_squares_under_kron(b in small_matrix()) {
        let bb = kron(&b, &b).unwrap();
        let lhs = l1_cond_number(&bb);
        let rhs = l1_cond_number(&b).powi(2);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn pinv_is_a_left_inverse_of_generated_matrices(
        (k, v, alpha, seed) in topic_matrix_params(),
    ) {
        let a = gen_topic_word_matrix(TopicMatrixKind::Independent, alpha, k, v, seed).unwrap();
        let pinv = pinv_left(a.matrix(), DEFAULT_RANK_TOL).unwrap();
        let prod = pinv.matmul(a.matrix()).unwrap();
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!(
                    (prod.get(i, j) - expect).abs() <= 1e-8,
                    "pinv(A)A[{i},{j}] = {}",
                    prod.get(i, j)
                );
            }
        }
    }

    #[test]
    fn pinv_of_kron_factorizes(
        (k, v, alpha, seed) in topic_matrix_params(),
    ) {
        let a = gen_topic_word_matrix(TopicMatrixKind::Independent, alpha, k, v, seed).unwrap();
        let aa = kron(a.matrix(), a.matrix()).unwrap();
        let lhs = pinv_left(&aa, DEFAULT_RANK_TOL).unwrap();
        let p = pinv_left(a.matrix(), DEFAULT_RANK_TOL).unwrap();
        let rhs = kron(&p, &p).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn moment_tensor_layout_round_trips(
        (order, side) in (1usize..4, 2usize..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let len = side.pow(order as u32);
        let mut rng = stream_rng(seed, 0);
        let data: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let tensor = MomentTensor::from_vec(order, side, data.clone()).unwrap();
        prop_assert_eq!(tensor.as_slice(), &data[..]);
        // Last-index-fastest: enumerating multi-indices odometer-style walks
        // the flat buffer in order.
        let mut idx = vec![0usize; order];
        for flat in 0..len {
            prop_assert_eq!(tensor.flat_index(&idx).unwrap(), flat);
            for slot in (0..order).rev() {
                idx[slot] += 1;
                if idx[slot] < side {
                    break;
                }
                idx[slot] = 0;
            }
        }
    }

    #[test]
    fn symmetrize_is_the_frobenius_projection(
        side in 2usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = stream_rng(seed, 1);
        let data: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>()).collect();
        let tensor = MomentTensor::from_vec(2, side, data.clone()).unwrap();
        let sym = tensor.symmetrize();
        for i in 0..side {
            for j in 0..side {
                let got = sym.as_slice()[i * side + j];
                let expect = 0.5 * (data[i * side + j] + data[j * side + i]);
                prop_assert!((got - expect).abs() <= 1e-15);
            }
        }
        // Idempotent.
        let twice = sym.symmetrize();
        prop_assert_eq!(twice.as_slice(), sym.as_slice());
    }
}

fn arb_prior() -> impl Strategy<Value = (PriorSpec, usize)> {
    let pure = (2usize..9).prop_map(|k| (PriorSpec::Pure, k));
    let lda = (2usize..9, 0.1..5.0f64)
        .prop_map(|(k, alpha_doc)| (PriorSpec::Lda { alpha_doc }, k));
    let ctm = (prop::sample::select(vec![4usize, 8]), 0.5..16.0f64, -0.9..0.9f64, -1.0..1.0f64)
        .prop_map(|(k, diag, rho, mu)| {
            let sigma = ctm_covariance(k, diag, rho).expect("valid covariance");
            (PriorSpec::Ctm { mu: vec![mu; k], sigma }, k)
        });
    let pam = (2usize..9, 1usize..5, 0.2..4.0f64, 0.2..4.0f64).prop_map(
        |(k, super_topics, alpha_super, alpha_sub)| {
            (PriorSpec::Pam { super_topics, alpha_super, alpha_sub }, k)
        },
    );
    prop_oneof![pure, lda, ctm, pam]
}

proptest! {
    #[test]
    fn every_prior_samples_onto_the_simplex((prior, k) in arb_prior(), seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let w = sample_w(&prior, k, &mut rng).unwrap();
        let s = w.as_slice();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.iter().all(|&x| x >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

}

#[test]
fn pinsker_holds_in_both_directions_randomized() {
    use rand::Rng;
    use topicssl::eval::pinsker_check;
    let mut rng = stream_rng(0xB0B, 0);
    for trial in 0..2000 {
        let dim = rng.gen_range(2..50);
        let rows = rng.gen_range(1..6);
        let mut p = vec![0.0; dim];
        let mut q = vec![0.0; dim];
        for i in 0..dim {
            p[i] = rng.gen::<f64>() + 1e-4;
            q[i] = rng.gen::<f64>() + 1e-4;
        }
        let p = ProbVec::from_normalizing(p).unwrap();
        let q = ProbVec::from_normalizing(q).unwrap();
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
        let b = Matrix::new(rows, dim, data).unwrap();
        for (x, y) in [(&p, &q), (&q, &p)] {
            let check = pinsker_check(x, y, &b).unwrap();
            assert!(!check.vacuous, "strictly positive inputs have finite KL");
            assert!(
                check.holds,
                "trial {trial}: lhs {} > rhs {}",
                check.lhs, check.rhs
            );
        }
    }
}
