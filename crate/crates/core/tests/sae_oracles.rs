//! Independent reference computations for the SAE forward/backward path.

#![allow(clippy::needless_range_loop)]

use matsae_core::sae::{
    backward, batch_topk, decode, encode_pre, forward_train, init_params, update_thresholds,
    SaeConfig, SaeParams, SparseCode,
};
use matsae_core::store::{synth_dataset, SynthSpec};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn random_instance(seed: u64, d: usize, sizes: &[usize], ks: &[usize], b: usize) -> (SaeConfig, SaeParams, Array2<f64>) {
    let cfg = SaeConfig::new(d, sizes.to_vec(), ks.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut p = init_params(&cfg, seed, &mean).unwrap();
    // break the unit-norm init so the normalization Jacobian matters
    for mut row in p.w.rows_mut() {
        let s: f64 = rng.random_range(0.5..2.0);
        row.mapv_inplace(|v| v * s);
    }
    p.b_enc.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    let x = random_matrix(&mut rng, b, d, 1.5);
    (cfg, p, x)
}

/// Masks: per level, the (row, feature) pairs BatchTopK selected.
fn masks_of(p: &SaeParams, x: &Array2<f64>, cfg: &SaeConfig) -> Vec<Vec<(usize, usize)>> {
    let fwd = forward_train(p, x.view(), cfg).unwrap();
    fwd.codes
        .iter()
        .map(|codes| {
            codes
                .iter()
                .enumerate()
                .flat_map(|(i, c)| c.entries.iter().map(move |&(j, _)| (i, j)))
                .collect()
        })
        .collect()
}

/// Loop-based loss with selections frozen; activations stay linear in the
/// parameters on the selected set.
fn naive_loss(p: &SaeParams, x: &Array2<f64>, masks: &[Vec<(usize, usize)>]) -> f64 {
    let (b, d) = x.dim();
    let mut total = 0.0;
    for mask in masks {
        let mut recon = vec![vec![0.0f64; d]; b];
        for row in recon.iter_mut() {
            for t in 0..d {
                row[t] = p.b_pre[t];
            }
        }
        for &(i, j) in mask {
            let mut z = p.b_enc[j];
            let mut norm2 = 0.0;
            for t in 0..d {
                z += p.w[[j, t]] * (x[[i, t]] - p.b_pre[t]);
                norm2 += p.w[[j, t]] * p.w[[j, t]];
            }
            let norm = norm2.sqrt();
            for t in 0..d {
                recon[i][t] += z * p.w[[j, t]] / norm;
            }
        }
        let mut sse = 0.0;
        for i in 0..b {
            for t in 0..d {
                let e = recon[i][t] - x[[i, t]];
                sse += e * e;
            }
        }
        total += sse / (b * d) as f64;
    }
    total / masks.len() as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check_gradients(seed: u64, d: usize, sizes: &[usize], ks: &[usize], b: usize) -> f64 {
    let (cfg, p, x) = random_instance(seed, d, sizes, ks, b);
    let masks = masks_of(&p, &x, &cfg);
    let g = backward(&p, x.view(), &cfg).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;

    let fd = |perturb: &dyn Fn(&mut SaeParams, f64)| {
        let mut plus = p.clone();
        perturb(&mut plus, h);
        let mut minus = p.clone();
        perturb(&mut minus, -h);
        (naive_loss(&plus, &x, &masks) - naive_loss(&minus, &x, &masks)) / (2.0 * h)
    };

    for j in 0..p.w.nrows() {
        for t in 0..d {
            let n = fd(&|q: &mut SaeParams, e| q.w[[j, t]] += e);
            worst = worst.max(rel_err(g.w[[j, t]], n));
        }
        let n = fd(&|q: &mut SaeParams, e| q.b_enc[j] += e);
        worst = worst.max(rel_err(g.b_enc[j], n));
    }
    for t in 0..d {
        let n = fd(&|q: &mut SaeParams, e| q.b_pre[t] += e);
        worst = worst.max(rel_err(g.b_pre[t], n));
    }
    worst
}

#[test]
fn gradients_match_central_differences_small_config() {
    let worst = check_gradients(17, 6, &[4, 8], &[2, 3], 5);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_central_differences_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..20 {
        let d = rng.random_range(2..=8);
        let levels = rng.random_range(1..=3);
        let mut sizes = Vec::new();
        let mut size = 0;
        for _ in 0..levels {
            size += rng.random_range(1..=5);
            sizes.push(size.min(16));
        }
        sizes.dedup();
        let ks: Vec<usize> = sizes.iter().map(|&s| rng.random_range(1..=s)).collect();
        let b = rng.random_range(1..=8);
        let worst = check_gradients(1000 + case, d, &sizes, &ks, b);
        assert!(worst < 1e-4, "case {case}: d={d} sizes={sizes:?} ks={ks:?} b={b}: {worst}");
    }
}

#[test]
fn encode_pre_matches_naive_product() {
    let (_, p, x) = random_instance(3, 7, &[5, 11], &[2, 4], 6);
    let z = encode_pre(&p, x.view()).unwrap();
    for i in 0..x.nrows() {
        for j in 0..p.w.nrows() {
            let mut acc = p.b_enc[j];
            for t in 0..x.ncols() {
                acc += p.w[[j, t]] * (x[[i, t]] - p.b_pre[t]);
            }
            assert!((z[[i, j]] - acc.max(0.0)).abs() < 1e-5);
        }
    }
}

#[test]
fn decode_matches_dense_oracle() {
    let (_, p, _) = random_instance(4, 5, &[9], &[3], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codes: Vec<SparseCode> = (0..4)
        .map(|_| {
            let mut entries = Vec::new();
            for j in 0..9 {
                if rng.random_bool(0.4) {
                    entries.push((j, rng.random_range(0.1..2.0)));
                }
            }
            SparseCode { level: 1, entries }
        })
        .collect();
    let out = decode(&p, &codes).unwrap();

    let mut dense = Array2::<f64>::zeros((4, 9));
    for (i, c) in codes.iter().enumerate() {
        for &(j, v) in &c.entries {
            dense[[i, j]] = v;
        }
    }
    let norms = p.w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut dec = p.w.clone();
    for (mut row, n) in dec.rows_mut().into_iter().zip(norms) {
        row /= n;
    }
    let expected = dense.dot(&dec) + &p.b_pre;
    for (a, b) in out.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn orthonormal_dictionary_reconstructs_exactly() {
    let d = 6;
    let cfg = SaeConfig::new(d, vec![d], vec![1]).unwrap();
    let mut p = init_params(&cfg, 0, &vec![0.0; d]).unwrap();
    p.w = Array2::eye(d);
    let mut x = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        x[[i, i]] = 0.5 + i as f64 * 0.2;
    }
    let fwd = forward_train(&p, x.view(), &cfg).unwrap();
    assert!(fwd.loss < 1e-20, "loss {}", fwd.loss);
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let (cfg, p, x) = random_instance(21, 5, &[4, 10], &[1, 3], 8);
    let base = forward_train(&p, x.view(), &cfg).unwrap().loss;
    let mut perm: Vec<usize> = (0..8).collect();
    perm.reverse();
    perm.swap(0, 3);
    let shuffled = x.select(Axis(0), &perm);
    let other = forward_train(&p, shuffled.view(), &cfg).unwrap().loss;
    assert!((base - other).abs() < 1e-12 * base.max(1.0));
}

#[test]
fn threshold_ema_matches_scalar_reference() {
    fn reference(seq: &[f64], momentum: f64) -> Vec<f64> {
        let mut m = 0.0;
        let mut out = Vec::new();
        for (t, &v) in seq.iter().enumerate() {
            m = momentum * m + (1.0 - momentum) * v;
            out.push(m / (1.0 - momentum.powi(t as i32 + 1)));
        }
        out
    }
    let cfg = SaeConfig::new(2, vec![2], vec![1]).unwrap();
    let mut p = init_params(&cfg, 0, &[0.0, 0.0]).unwrap();
    let seq = [1.0, 2.0, 0.5, 3.0];
    let expected = reference(&seq, 0.5);
    assert!((expected[0] - 1.0).abs() < 1e-15);
    assert!((expected[1] - 1.25 / 0.75).abs() < 1e-15);
    for (v, e) in seq.iter().zip(expected) {
        update_thresholds(&mut p, &[*v], 0.5).unwrap();
        assert!((p.thresholds[0] - e).abs() < 1e-15);
    }
}

#[test]
fn synthetic_two_atom_samples_lie_in_their_span() {
    let spec = SynthSpec {
        d: 10,
        n_truth: 6,
        n_samples: 40,
        s_active: 2,
        noise_sigma: 0.0,
        seed: 5,
    };
    let (ds, atoms) = synth_dataset(&spec).unwrap();
    for rec in ds.records() {
        let idx: Vec<usize> = rec
            .organ_set()
            .iter()
            .map(|l| l.trim_start_matches("atom_").parse().unwrap())
            .collect();
        assert_eq!(idx.len(), 2);
        let (a, b) = (atoms.row(idx[0]), atoms.row(idx[1]));
        let x: Vec<f64> = rec.embedding.iter().map(|&v| v as f64).collect();
        // 2x2 normal equations
        let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
        let xa: f64 = x.iter().zip(a).map(|(p, q)| p * q).sum();
        let xb: f64 = x.iter().zip(b).map(|(p, q)| p * q).sum();
        let det = aa * bb - ab * ab;
        let ca = (xa * bb - xb * ab) / det;
        let cb = (xb * aa - xa * ab) / det;
        let resid: f64 = x
            .iter()
            .enumerate()
            .map(|(t, v)| (v - ca * a[t] - cb * b[t]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid < 1e-6, "residual {resid}");
    }
}

/// Brute-force BatchTopK: full sort of every eligible entry.
fn topk_oracle(z: &Array2<f64>, width: usize, k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..z.nrows() {
        for j in 0..width {
            if z[[i, j]] > 0.0 {
                all.push((z[[i, j]], i, j));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.truncate(k * z.nrows());
    let mut kept: Vec<(usize, usize)> = all.into_iter().map(|(_, i, j)| (i, j)).collect();
    kept.sort();
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn batch_topk_keeps_exact_budget(
        b in 1usize..8,
        seed in any::<u64>(),
        k1 in 1usize..4,
        k2 in 1usize..9,
        quantize in any::<bool>(),
    ) {
        let cfg = SaeConfig::new(3, vec![4, 12], vec![k1.min(4), k2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((b, 12), |_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if quantize { (v * 3.0).round() / 3.0 } else { v }
        });
        for level in 1..=2 {
            let width = cfg.dict_size(level);
            let k = cfg.k(level);
            let codes = batch_topk(z.view(), level, &cfg).unwrap();
            let positives = z.iter().enumerate().filter(|(n, v)| n % 12 < width && **v > 0.0).count();
            let kept: usize = codes.iter().map(|c| c.l0()).sum();
            prop_assert_eq!(kept, (k * b).min(positives));
            prop_assert!(kept as f64 / b as f64 <= k as f64);
            let mut got = Vec::new();
            for (i, c) in codes.iter().enumerate() {
                prop_assert!(c.entries.windows(2).all(|w| w[0].0 < w[1].0));
                for &(j, v) in &c.entries {
                    prop_assert!(j < width);
                    prop_assert!(v > 0.0);
                    prop_assert_eq!(v, z[[i, j]]);
                    got.push((i, j));
                }
            }
            prop_assert_eq!(got, topk_oracle(&z, width, k));
        }
    }
}
