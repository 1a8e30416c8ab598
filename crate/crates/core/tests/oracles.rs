mod common;

use std::collections::BTreeMap;

use common::*;
use nad_core::ablation::{ablation_curve, default_fractions, rank_components, AblationEvaluator, ComponentKind};
use nad_core::analysis::{inertia, point_biserial};
use nad_core::directions::principal_directions;
use nad_core::segmentation::{miou, stitch_windows, WindowLayout, IGNORE_LABEL};
use nad_core::sparse_text::{decode, omp, TextDictionary};
use nad_core::zeroshot::ClassBank;
use nad_core::{AttnPoolWeights, ComponentKey, ContributionSamples, ContributionStore};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Helmert basis of the vectors orthogonal to `(1, …, 1)`, as `(m−1) × m` rows.
fn helmert(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m - 1, m, |k, j| {
        let n = (k + 1) as f64;
        let s = 1.0 / (n * (n + 1.0)).sqrt();
        match j.cmp(&(k + 1)) {
            std::cmp::Ordering::Less => s,
            std::cmp::Ordering::Equal => -n * s,
            std::cmp::Ordering::Greater => 0.0,
        }
    })
}

/// Singular values and right singular vectors of a column-centered matrix,
/// largest first. Centering puts `(1, …, 1)` in the left null space; mapping
/// through the Helmert basis removes that exact zero so the dense SVD only
/// sees the remaining spectrum, factored in its tall orientation.
fn reference_svd(a: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m, d) = a.dim();
    let reduced = helmert(m) * to_dmatrix(a);
    let (mut values, mut vectors): (Vec<f64>, Vec<Vec<f64>>) = if m > d {
        let svd = reduced.svd(false, true);
        let v_t = svd.v_t.unwrap();
        let vecs = (0..v_t.nrows()).map(|k| v_t.row(k).iter().copied().collect()).collect();
        (svd.singular_values.iter().copied().collect(), vecs)
    } else {
        let svd = reduced.transpose().svd(true, false);
        let u = svd.u.unwrap();
        let vecs = (0..u.ncols()).map(|k| u.column(k).iter().copied().collect()).collect();
        (svd.singular_values.iter().copied().collect(), vecs)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&x, &y| values[y].total_cmp(&values[x]));
    vectors = order.iter().map(|&k| vectors[k].clone()).collect();
    values = order.iter().map(|&k| values[k]).collect();
    values.resize(m.min(d), 0.0);
    (values, vectors)
}

#[test]
fn principal_directions_match_reference_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..40 {
        let m = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=64);
        let a = random_matrix(&mut rng, m, d, 1.0);
        let ids = (0..m).map(|i| i.to_string()).collect();
        let samples = ContributionSamples::new(ComponentKey::Neuron(0), a.clone(), ids).unwrap();
        let r = m.min(d);
        let dirs = principal_directions(&samples, r, m).unwrap();

        let mean = a.mean_axis(ndarray::Axis(0)).unwrap();
        let (values, vectors) = reference_svd(&(&a - &mean));
        for k in 0..r {
            let sv = values[k];
            assert!(
                (dirs[k].singular_value - sv).abs() < 1e-8,
                "case {case}: σ_{k} {} vs {sv}",
                dirs[k].singular_value
            );
            if sv > 1e-6 {
                let v = &vectors[k];
                let dot: f64 = (0..d).map(|j| v[j] * dirs[k].r_hat[j]).sum();
                let sign = dot.signum();
                for j in 0..d {
                    assert!((dirs[k].r_hat[j] - sign * v[j]).abs() < 1e-6, "case {case}: vector {k}");
                }
            }
        }
    }
}

#[test]
fn omp_first_atom_is_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let v = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=32);
        let dict = TextDictionary::normalized(random_matrix(&mut rng, v, d, 1.0), words(v)).unwrap();
        let y = random_vector(&mut rng, d, 1.0);
        let corr: Vec<f64> = (0..v).map(|j| dict.atoms.row(j).dot(&y).abs()).collect();
        let oracle = (0..v).fold(0, |b, j| if corr[j] > corr[b] { j } else { b });
        let code = omp(y.view(), &dict, 1).unwrap();
        assert_eq!(code.indices, vec![oracle]);

        let mut prev = l2(y.as_slice().unwrap());
        for m in 1..=v.min(d) {
            let code = omp(y.view(), &dict, m).unwrap();
            for pair in code.residual_history.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
            assert!(code.residual_norm <= prev * (1.0 + 1e-12) + 1e-12);
            prev = code.residual_norm;
            let res = &y - &decode(&code, &dict).unwrap();
            for &j in &code.indices {
                assert!(res.dot(&dict.atoms.row(j)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn omp_coefficients_solve_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let v = rng.gen_range(4..=40);
        let d = rng.gen_range(4..=20);
        let dict = TextDictionary::normalized(random_matrix(&mut rng, v, d, 1.0), words(v)).unwrap();
        let y = random_vector(&mut rng, d, 1.0);
        let m = rng.gen_range(1..=v.min(d));
        let code = omp(y.view(), &dict, m).unwrap();
        let k = code.indices.len();
        let a = DMatrix::from_fn(d, k, |i, j| dict.atoms[[code.indices[j], i]]);
        let b = DMatrix::from_fn(d, 1, |i, _| y[i]);
        let ls = a.svd(true, true).solve(&b, 1e-14).unwrap();
        for j in 0..k {
            assert!((code.coefficients[j] - ls[(j, 0)]).abs() < 1e-8);
        }
    }
}

#[test]
fn statistics_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..100 {
        let n = rng.gen_range(2..60);
        let mut flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        flags[0] = true;
        flags[n - 1] = false;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = flags.iter().map(|&f| f as u8 as f64).collect();
        let (mb, mx) = (b.iter().sum::<f64>() / n as f64, x.iter().sum::<f64>() / n as f64);
        let cov: f64 = b.iter().zip(&x).map(|(p, q)| (p - mb) * (q - mx)).sum();
        let sb: f64 = b.iter().map(|p| (p - mb).powi(2)).sum::<f64>().sqrt();
        let sx: f64 = x.iter().map(|q| (q - mx).powi(2)).sum::<f64>().sqrt();
        assert!((point_biserial(&flags, &x).unwrap() - cov / (sb * sx)).abs() < 1e-12);
    }
    for _ in 0..50 {
        let d = rng.gen_range(1..20);
        let row = random_vector(&mut rng, d, 1.0);
        let dup = Array2::from_shape_fn((5, d), |(_, j)| row[j]);
        assert_eq!(inertia(dup.view(), false).unwrap(), 0.0);
        let a = random_vector(&mut rng, d, 1.0);
        let b = random_vector(&mut rng, d, 1.0);
        let two = ndarray::stack![ndarray::Axis(0), a, b];
        let diff = &a - &b;
        assert!((inertia(two.view(), false).unwrap() - diff.dot(&diff) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn miou_matches_confusion_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..50 {
        let gt = Array2::from_shape_simple_fn((8, 8), || {
            if rng.gen_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..3)
            }
        });
        let pred = Array2::from_shape_simple_fn((8, 8), || rng.gen_range(0..3usize));
        let mut cm = [[0u64; 3]; 3];
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g != IGNORE_LABEL {
                cm[g][p] += 1;
            }
        }
        let mut ious = Vec::new();
        for c in 0..3 {
            let tp = cm[c][c];
            let fp: u64 = (0..3).filter(|&g| g != c).map(|g| cm[g][c]).sum();
            let fn_: u64 = (0..3).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(miou(pred.view(), gt.view(), 3, IGNORE_LABEL).unwrap().mean, expect);
    }
}

#[test]
fn stitching_matches_dense_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..30 {
        let win = rng.gen_range(2..8);
        let stride = rng.gen_range(1..=win);
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let layout = WindowLayout::new((h, w), win, stride).unwrap();
        let logits: Vec<Array3<f64>> = layout
            .offsets
            .iter()
            .map(|_| Array3::from_shape_simple_fn((2, win, win), || rng.gen_range(-1.0..1.0)))
            .collect();
        let got = stitch_windows(&logits, &layout).unwrap();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let (mut sum, mut cnt) = (0.0, 0);
                    for (l, &(oy, ox)) in logits.iter().zip(&layout.offsets) {
                        if (oy..oy + win).contains(&y) && (ox..ox + win).contains(&x) {
                            sum += l[[c, y - oy, x - ox]];
                            cnt += 1;
                        }
                    }
                    assert!(cnt > 0);
                    assert_eq!(got[[c, y, x]], sum / cnt as f64);
                }
            }
        }
    }
}

/// Pooling where every neuron writes its own output axis and attention is
/// uniform, so the embedding is the per-channel spatial mean of `Z` plus `b_o`.
fn identity_pooling(c: usize, b_o: Array1<f64>) -> AttnPoolWeights<f64> {
    let d = b_o.len();
    let mut w_o = Array2::zeros((c, d));
    for n in 0..c {
        w_o[[n, n]] = 1.0;
    }
    AttnPoolWeights::new(
        Array2::zeros((c, c)),
        Array1::zeros(c),
        Array2::zeros((c, c)),
        Array1::zeros(c),
        Array2::eye(c),
        Array1::zeros(c),
        w_o,
        b_o,
        Array2::zeros((2, c)),
        1,
        (1, 1),
    )
    .unwrap()
}

#[test]
fn ablation_curve_rises_to_baseline_on_separable_fixture() {
    let c = 10;
    let d = c + 1;
    let mut b_o = Array1::zeros(d);
    b_o[c] = 1.0;
    let w = identity_pooling(c, b_o);
    // class 0 leans on the bias axis, class 1 does not
    let mut t0 = Array1::from_elem(d, 1.0);
    t0[c] = 3.0;
    let mut t1 = Array1::from_elem(d, -1.0);
    t1[c] = 0.0;
    let bank = ClassBank::new(
        ndarray::stack![ndarray::Axis(0), t0, t1],
        vec!["a".into(), "b".into()],
        "{class}",
    )
    .unwrap();

    let scales = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];
    let n = 2 * scales.len();
    let mut zs = Array4::zeros((n, c, 1, 1));
    let mut labels = Vec::new();
    for (k, &lam) in scales.iter().enumerate() {
        for (j, sign) in [(0usize, 1.0), (1, -1.0)] {
            for ch in 0..c {
                zs[[2 * k + j, ch, 0, 0]] = sign * lam * (c - ch) as f64;
            }
            labels.push(j);
        }
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    let store = ContributionStore::collect(zs.view(), &w, ids).unwrap();
    let ranking = rank_components(&store.neuron_norms(), 10.0, ComponentKind::Neuron, "fixture").unwrap();
    assert_eq!(ranking.keys, (0..c).collect::<Vec<_>>());
    let means = store.neuron_means();
    let eval = AblationEvaluator {
        weights: &w,
        activations: zs.view(),
        labels: &labels,
        bank: &bank,
    };
    let curve = ablation_curve(&ranking, &default_fractions(), |keep| {
        eval.accuracy(ComponentKind::Neuron, keep, means.view())
    })
    .unwrap();
    let acc: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
    assert!(acc.windows(2).all(|p| p[1] >= p[0]), "{acc:?}");
    assert_eq!(*acc.last().unwrap(), 1.0);
    assert!(acc[0] < 1.0);
    let mut grouped = BTreeMap::new();
    for p in &curve {
        grouped.insert((p.fraction * 10.0).round() as usize, p.accuracy);
    }
    assert_eq!(grouped.len(), 10);
}
