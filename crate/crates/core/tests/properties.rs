use std::collections::{BTreeMap, BTreeSet};

use matsae_core::interp::greedy_dissimilar;
use matsae_core::metrics::{jaccard, r_squared, rank_configs, ConfigResult};
use matsae_core::probe::roc_auc;
use matsae_core::retrieval::{fingerprint, retrieve, sparse_cosine, Fingerprint, FingerprintSource, RetrievalIndex};
use matsae_core::sae::SparseCode;
use matsae_core::store::format::EmbBlock;
use ndarray::Array2;
use proptest::prelude::*;

fn code_strategy(max_dict: usize) -> impl Strategy<Value = SparseCode> {
    proptest::collection::btree_map(0..max_dict, 0.01f64..10.0, 0..12).prop_map(|m| SparseCode {
        level: 1,
        entries: m.into_iter().collect(),
    })
}

fn fp_strategy() -> impl Strategy<Value = Fingerprint> {
    code_strategy(32).prop_map(|c| fingerprint(&c, 32))
}

/// Givens rotation in the `(p, q)` plane.
fn rotation(d: usize, p: usize, q: usize, theta: f64) -> Array2<f64> {
    let mut r = Array2::eye(d);
    r[[p, p]] = theta.cos();
    r[[q, q]] = theta.cos();
    r[[p, q]] = -theta.sin();
    r[[q, p]] = theta.sin();
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_flips_under_negation(scores in proptest::collection::btree_set(-1000i32..1000, 2..40), flips in proptest::collection::vec(any::<bool>(), 40)) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 7.0).collect();
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let a = roc_auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        let mono: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
        prop_assert_eq!(roc_auc(&mono, &labels).unwrap(), a);
    }

    #[test]
    fn auc_matches_pair_count(scores in proptest::collection::vec(0u8..6, 2..30), flips in proptest::collection::vec(any::<bool>(), 30)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut y = flips[..s.len()].to_vec();
        y[0] = true;
        y[1] = false;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((roc_auc(&s, &y).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn sparse_cosine_symmetric_bounded_scale_free(a in fp_strategy(), b in fp_strategy(), c in 1e-3f64..1e3) {
        let ab = sparse_cosine(&a, &b);
        prop_assert_eq!(ab, sparse_cosine(&b, &a));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let scaled = Fingerprint {
            entries: a.entries.iter().map(|&(i, v)| (i, v * c)).collect(),
            source: FingerprintSource::Query,
        };
        prop_assert!((sparse_cosine(&scaled, &b) - ab).abs() < 1e-12);
    }

    #[test]
    fn fingerprints_nest(code in code_strategy(64), k1 in 1usize..10, extra in 0usize..10) {
        let small: BTreeSet<(usize, u64)> = fingerprint(&code, k1).entries.iter().map(|&(i, v)| (i, v.to_bits())).collect();
        let big: BTreeSet<(usize, u64)> = fingerprint(&code, k1 + extra).entries.iter().map(|&(i, v)| (i, v.to_bits())).collect();
        prop_assert!(small.is_subset(&big));
        prop_assert!(small.len() <= k1);
    }

    #[test]
    fn retrieval_stable_under_index_permutation(fps in proptest::collection::vec(fp_strategy(), 2..20), q in fp_strategy(), seed in any::<u64>()) {
        let n = fps.len();
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:03}")).collect();
        let dense = EmbBlock { d: 1, n, data: vec![1.0; n] };
        let idx = RetrievalIndex::new(ids.clone(), fps.clone(), dense.clone()).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let perm = RetrievalIndex::new(
            order.iter().map(|&i| ids[i].clone()).collect(),
            order.iter().map(|&i| fps[i].clone()).collect(),
            dense,
        ).unwrap();
        prop_assert_eq!(retrieve(&q, &idx, n, None).unwrap(), retrieve(&q, &perm, n, None).unwrap());
    }

    #[test]
    fn r_squared_invariant_under_rotation(
        x in proptest::collection::vec(-5.0f64..5.0, 24),
        noise in proptest::collection::vec(-0.5f64..0.5, 24),
        p in 0usize..4, q in 0usize..4, theta in 0.0f64..6.0,
    ) {
        prop_assume!(p != q);
        let x = Array2::from_shape_vec((6, 4), x).unwrap();
        let xh = &x + &Array2::from_shape_vec((6, 4), noise).unwrap();
        let r = rotation(4, p, q, theta);
        let base = r_squared(x.view(), xh.view());
        prop_assume!(base.is_ok());
        let rot = r_squared(x.dot(&r).view(), xh.dot(&r).view()).unwrap();
        prop_assert!((base.unwrap() - rot).abs() < 1e-9);
    }

    #[test]
    fn ranking_is_order_free_permutation(ms in proptest::collection::vec((0u8..5, 0u8..5), 1..12), rot in 0usize..12) {
        let results: Vec<ConfigResult> = ms.iter().enumerate().map(|(i, &(m, r))| ConfigResult {
            id: format!("c{i:02}"),
            dict_sizes: vec![8],
            k_values: vec![1],
            seed: 0,
            r2: 0.0,
            mean_l0: 0.0,
            alive: 0,
            m_config: m as f64 / 4.0,
            dense_auc: 1.0,
            sparse_auc: 1.0,
            recovery: BTreeMap::from([(10, r as f64 / 4.0)]),
        }).collect();
        let a = rank_configs(&results).unwrap();
        let mut shifted = results.clone();
        shifted.rotate_left(rot % results.len());
        prop_assert_eq!(&a, &rank_configs(&shifted).unwrap());
        let ids: BTreeSet<&str> = a.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(ids.len(), results.len());
        for w in a.windows(2) {
            prop_assert!(w[0].combined <= w[1].combined);
        }
    }

    #[test]
    fn greedy_size_and_anchor(vs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..15), m in 1usize..8) {
        let ids: Vec<String> = (0..vs.len()).map(|i| format!("s{i:02}")).collect();
        let pick = greedy_dissimilar(&ids, &vs, m).unwrap();
        prop_assert_eq!(pick.len(), m.min(vs.len()));
        prop_assert_eq!(pick[0], 0);
        let uniq: BTreeSet<usize> = pick.iter().copied().collect();
        prop_assert_eq!(uniq.len(), pick.len());
    }

    #[test]
    fn jaccard_bounded_symmetric(a in proptest::collection::btree_set(0u8..10, 0..6), b in proptest::collection::btree_set(0u8..10, 0..6)) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
    }
}
