use proptest::prelude::*;

use super::*;
use crate::numerics::{orthonormal_basis, RngStream};

fn random_unit_dictionary(seed: u64, m: usize, p: usize) -> Dictionary {
    let mut rng = RngStream::new(seed, 77);
    let mut a = DenseMatrix::zeros(m, p);
    for v in a.as_mut_slice() {
        *v = rng.standard_normal();
    }
    Dictionary::normalized(a).unwrap()
}

/// Dictionary whose Gram matrix equals `g`, via a Cholesky factor.
fn dictionary_with_gram(g: &[Vec<f64>]) -> Dictionary {
    let n = g.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = g[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            let mut s = g[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    // column i of the atoms is row i of L
    Dictionary::normalized(DenseMatrix::from_cols(&l).unwrap()).unwrap()
}

fn three_atom_example() -> Dictionary {
    dictionary_with_gram(&[
        vec![1.0, 0.5, 0.3],
        vec![0.5, 1.0, 0.2],
        vec![0.3, 0.2, 1.0],
    ])
}

/// μ₁(r) by enumerating every set S of size r and every j ∉ S.
fn babel_by_enumeration(d: &Dictionary, r: usize) -> f64 {
    let g = gram(d);
    let p = d.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << p) {
        if mask.count_ones() as usize != r {
            continue;
        }
        for j in 0..p {
            if mask & (1 << j) != 0 {
                continue;
            }
            let s: f64 = (0..p).filter(|i| mask & (1 << i) != 0).map(|i| g[(i, j)].abs()).sum();
            best = best.max(s);
        }
    }
    best
}

#[test]
fn gram_of_identity_columns() {
    let d = Dictionary::from_atoms(DenseMatrix::identity(4), NormMode::ExactUnit).unwrap();
    assert_eq!(gram(&d), DenseMatrix::identity(4));
}

#[test]
fn gram_of_atoms_at_sixty_degrees() {
    let a = DenseMatrix::from_cols(&[vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0]]).unwrap();
    let d = Dictionary::from_atoms(a, NormMode::ExactUnit).unwrap();
    assert!((gram(&d)[(0, 1)] - 0.5).abs() < 1e-12);
}

#[test]
fn gram_matches_scalar_loop() {
    let d = random_unit_dictionary(3, 8, 12);
    let g = gram(&d);
    for i in 0..12 {
        for j in 0..12 {
            let mut s = 0.0;
            for k in 0..8 {
                s += d.atoms()[(k, i)] * d.atoms()[(k, j)];
            }
            assert!((g[(i, j)] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn norm_modes_enforced() {
    let a = DenseMatrix::from_cols(&[vec![2.0, 0.0]]).unwrap();
    assert!(Dictionary::from_atoms(a.clone(), NormMode::ExactUnit).is_err());
    assert!(Dictionary::from_atoms(a, NormMode::UnitBall).is_err());
    let b = DenseMatrix::from_cols(&[vec![0.5, 0.0]]).unwrap();
    assert!(Dictionary::from_atoms(b, NormMode::UnitBall).is_ok());
}

#[test]
fn babel_of_orthonormal_is_zero() {
    let q = orthonormal_basis(&mut RngStream::new(1, 0), 6, 6).unwrap();
    let d = Dictionary::from_atoms(q, NormMode::ExactUnit).unwrap();
    for r in 1..6 {
        assert!(babel(&d, r).unwrap() < 1e-12);
    }
}

#[test]
fn babel_three_atom_example() {
    let d = three_atom_example();
    assert!((babel(&d, 1).unwrap() - 0.5).abs() < 1e-12);
    assert!((babel(&d, 2).unwrap() - 0.8).abs() < 1e-12);
    assert!((babel_by_enumeration(&d, 1) - 0.5).abs() < 1e-12);
    assert!((babel_by_enumeration(&d, 2) - 0.8).abs() < 1e-12);
}

#[test]
fn babel_rejects_bad_order() {
    let d = three_atom_example();
    assert!(babel(&d, 0).is_err());
    assert!(babel(&d, 3).is_err());
}

#[test]
fn babel_nondecreasing_in_order() {
    for seed in 0..10 {
        let d = random_unit_dictionary(seed, 5, 9);
        let curve = babel_curve(&d, 8).unwrap();
        assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        for r in 1..=8 {
            assert_eq!(curve[r - 1], babel(&d, r).unwrap());
        }
    }
}

#[test]
fn coactivated_babel_cases() {
    let q = orthonormal_basis(&mut RngStream::new(1, 0), 5, 5).unwrap();
    let d = Dictionary::from_atoms(q, NormMode::ExactUnit).unwrap();
    let res = babel_coactivated(&d, &[vec![0, 1], vec![2, 4]], 1).unwrap();
    assert!(res.mean.abs() < 1e-12);

    let d3 = three_atom_example();
    let res = babel_coactivated(&d3, &[vec![0, 1, 2]], 1).unwrap();
    assert!((res.mean - 0.5).abs() < 1e-12);

    // pair {0,2} has μ₁(1) = 0.3, pair {1,2} has 0.2
    let res = babel_coactivated(&d3, &[vec![0, 2], vec![1, 2], vec![0]], 1).unwrap();
    assert!((res.mean - 0.25).abs() < 1e-12);
    assert_eq!((res.used, res.skipped), (2, 1));

    assert!(matches!(
        babel_coactivated(&d3, &[vec![0]], 1),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn conditional_orthogonality_cases() {
    let q = orthonormal_basis(&mut RngStream::new(2, 0), 4, 4).unwrap();
    let d = Dictionary::from_atoms(q.clone(), NormMode::ExactUnit).unwrap();
    let levels = LevelMap::new(vec![1, 2, 1, 2], vec![None, Some(0), None, Some(2)]).unwrap();
    assert!(conditional_orthogonality_violation(&d, &levels).unwrap() < 1e-10);

    let flat = LevelMap::flat(4);
    assert_eq!(conditional_orthogonality_violation(&d, &flat).unwrap(), 0.0);

    let mut copy = q;
    let parent = copy.col(0);
    copy.set_col(1, &parent);
    let d = Dictionary::from_atoms(copy, NormMode::ExactUnit).unwrap();
    assert!((conditional_orthogonality_violation(&d, &levels).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn level_map_validates_parent_levels() {
    assert!(LevelMap::new(vec![1, 1], vec![None, Some(0)]).is_err());
    assert!(LevelMap::new(vec![1, 2], vec![None, None]).is_err());
    let l = LevelMap::new(vec![1, 2, 2], vec![None, Some(0), Some(0)]).unwrap();
    assert_eq!(l.children_of(0), vec![1, 2]);
}

#[test]
fn matching_recovers_permutation_and_sign() {
    let gt = random_unit_dictionary(5, 6, 5);
    let perm = [3usize, 0, 4, 1, 2];
    let mut cols: Vec<Vec<f64>> = perm.iter().map(|&j| gt.atom(j)).collect();
    let a = match_to_ground_truth(&Dictionary::normalized(DenseMatrix::from_cols(&cols).unwrap()).unwrap(), &gt)
        .unwrap();
    for (learned_idx, &gt_idx) in perm.iter().enumerate() {
        assert_eq!(a.get(gt_idx), Some(learned_idx));
    }
    assert!((a.score() - 5.0).abs() < 1e-12);

    cols[2].iter_mut().for_each(|v| *v = -*v);
    let learned = Dictionary::normalized(DenseMatrix::from_cols(&cols).unwrap()).unwrap();
    let b = match_to_ground_truth(&learned, &gt).unwrap();
    assert_eq!(a.mapping(), b.mapping());
    assert!((b.score() - 5.0).abs() < 1e-12);
}

#[test]
fn matching_rejects_mismatched_shapes() {
    let gt = random_unit_dictionary(1, 4, 3);
    assert!(match_to_ground_truth(&random_unit_dictionary(2, 5, 3), &gt).is_err());
    assert!(match_to_ground_truth(&random_unit_dictionary(2, 4, 2), &gt).is_err());
}

fn best_injective_score(w: &DenseMatrix) -> f64 {
    fn rec(w: &DenseMatrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == w.rows() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..w.cols() {
            if !used[j] {
                used[j] = true;
                best = best.max(w[(row, j)] + rec(w, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    rec(w, 0, &mut vec![false; w.cols()])
}

#[test]
fn matching_equals_exhaustive_search() {
    for seed in 0..25 {
        let gt = random_unit_dictionary(seed, 5, 4);
        let learned = random_unit_dictionary(seed + 1000, 5, 6);
        let a = match_to_ground_truth(&learned, &gt).unwrap();
        let w = abs_cosine_matrix(&gt, &learned);
        assert!((a.score() - best_injective_score(&w)).abs() < 1e-12, "seed {seed}");
    }
}

fn tree_levels() -> LevelMap {
    // two parents, each with two children
    LevelMap::new(vec![1, 1, 2, 2, 2, 2], vec![None, None, Some(0), Some(0), Some(1), Some(1)]).unwrap()
}

#[test]
fn mse_metrics_vanish_on_ground_truth() {
    let gt = Dictionary::from_atoms(orthonormal_basis(&mut RngStream::new(8, 0), 6, 6).unwrap(), NormMode::ExactUnit)
        .unwrap();
    let levels = tree_levels();
    let a = match_to_ground_truth(&gt, &gt).unwrap();
    assert!(flat_mse(&gt, &gt, &levels, &a).unwrap() < 1e-20);
    assert!(hierarchical_mse(&gt, &gt, &levels, &a).unwrap() < 1e-18);
}

#[test]
fn flat_mse_sibling_correlation_against_orthonormal() {
    // ground truth: siblings (2,3) and (4,5) at cosine 0.3, everything else orthogonal
    let mut g = vec![vec![0.0; 6]; 6];
    for (i, row) in g.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(a, b) in &[(2usize, 3usize), (4, 5)] {
        g[a][b] = 0.3;
        g[b][a] = 0.3;
    }
    let gt = dictionary_with_gram(&g);
    let learned = Dictionary::from_atoms(DenseMatrix::identity(6), NormMode::ExactUnit).unwrap();
    let levels = tree_levels();
    let a = Assignment::from_partial((0..6).map(Some).collect(), &gt, &learned).unwrap();
    // ordered same-level pairs: level 1 has 2, level 2 has 12; four of them are sibling pairs
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..6 {
        for j in 0..6 {
            if i != j && levels.level(i) == levels.level(j) {
                sum += (0.0 - g[i][j]).powi(2);
                count += 1;
            }
        }
    }
    let want = sum / count as f64;
    assert!((want - 4.0 * 0.09 / 14.0).abs() < 1e-15);
    assert!((flat_mse(&learned, &gt, &levels, &a).unwrap() - want).abs() < 1e-12);
}

#[test]
fn hierarchical_mse_counts_absorbed_child() {
    let q = orthonormal_basis(&mut RngStream::new(9, 0), 6, 6).unwrap();
    let gt = Dictionary::from_atoms(q.clone(), NormMode::ExactUnit).unwrap();
    let mut absorbed = q;
    let parent = absorbed.col(0);
    absorbed.set_col(2, &parent);
    let learned = Dictionary::from_atoms(absorbed, NormMode::ExactUnit).unwrap();
    let levels = tree_levels();
    let a = Assignment::from_partial((0..6).map(Some).collect(), &gt, &learned).unwrap();
    // ordered cross-level pairs: 2·4·2 = 16, two of them are (0,2)/(2,0) with |cos| 1
    let h = hierarchical_mse(&learned, &gt, &levels, &a).unwrap();
    assert!((h - 2.0 / 16.0).abs() < 1e-12);
}

#[test]
fn hierarchical_mse_matches_double_loop() {
    let gt = Dictionary::from_atoms(orthonormal_basis(&mut RngStream::new(4, 0), 6, 6).unwrap(), NormMode::ExactUnit)
        .unwrap();
    let learned = random_unit_dictionary(44, 6, 6);
    let levels = tree_levels();
    let a = Assignment::from_partial((0..6).map(Some).collect(), &gt, &learned).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..6 {
        for j in 0..6 {
            if levels.level(i) != levels.level(j) {
                let ci = learned.atom(i);
                let cj = learned.atom(j);
                let d: f64 = ci.iter().zip(&cj).map(|(x, y)| x * y).sum();
                sum += d * d;
                count += 1;
            }
        }
    }
    let h = hierarchical_mse(&learned, &gt, &levels, &a).unwrap();
    assert!((h - sum / count as f64).abs() < 1e-12);
}

#[test]
fn mse_metrics_need_pairs() {
    let gt = Dictionary::from_atoms(DenseMatrix::identity(2), NormMode::ExactUnit).unwrap();
    let a = Assignment::from_partial(vec![Some(0), Some(1)], &gt, &gt).unwrap();
    assert!(hierarchical_mse(&gt, &gt, &LevelMap::flat(2), &a).is_err());
    let lv = LevelMap::new(vec![1, 2], vec![None, Some(0)]).unwrap();
    assert!(flat_mse(&gt, &gt, &lv, &a).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn babel_equals_enumeration(seed in 0u64..10_000, m in 2usize..6, p in 2usize..9) {
        let d = random_unit_dictionary(seed, m, p);
        for r in 1..p {
            let fast = babel(&d, r).unwrap();
            let slow = babel_by_enumeration(&d, r);
            prop_assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_invariant_to_permutation_and_sign(seed in 0u64..10_000) {
        let gt = random_unit_dictionary(seed, 5, 4);
        let learned = random_unit_dictionary(seed ^ 0xabcdef, 5, 6);
        let base = match_to_ground_truth(&learned, &gt).unwrap();
        let mut rng = RngStream::new(seed, 5);
        let perm = rng.permutation(6);
        let cols: Vec<Vec<f64>> = perm.iter().map(|&j| {
            let mut c = learned.atom(j);
            if rng.uniform() < 0.5 { c.iter_mut().for_each(|v| *v = -*v); }
            c
        }).collect();
        let shuffled = Dictionary::from_atoms(DenseMatrix::from_cols(&cols).unwrap(), NormMode::ExactUnit).unwrap();
        let other = match_to_ground_truth(&shuffled, &gt).unwrap();
        prop_assert!((base.score() - other.score()).abs() < 1e-12);
    }
}
