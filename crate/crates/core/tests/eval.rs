mod common;

use common::{random_unit, random_units};
use mohn::eval::{knn_predict, knn_scores, knn_top1, EmbeddingIndex, KnnConfig};
use mohn::numeric::{dot, Matrix};
use mohn::rng::SeededRng;
use proptest::prelude::*;

/// Full sort of every row by (similarity desc, index asc), then a plain vote.
fn brute_force(rows: &Matrix, labels: &[usize], query: &[f64], k: usize, tau: f64) -> usize {
    let mut all: Vec<(f64, usize)> = rows.iter_rows().enumerate().map(|(i, r)| (dot(query, r), i)).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().unwrap() + 1;
    let mut score = vec![0.0; classes];
    for &(s, i) in &all[..k] {
        score[labels[i]] += (s / tau).exp();
    }
    let mut best = 0;
    for c in 1..classes {
        if score[c] > score[best] {
            best = c;
        }
    }
    best
}

/// Rows drawn from a small grid of directions so that exact ties occur.
fn instance(rng: &mut SeededRng, n: usize, dim: usize, classes: usize, coarse: bool) -> (Matrix, Vec<usize>) {
    let rows = if coarse {
        let pool = random_units(rng, 6, dim);
        let picked: Vec<Vec<f64>> = (0..n).map(|_| pool.row(rng.below(6)).to_vec()).collect();
        Matrix::from_rows(&picked).unwrap()
    } else {
        random_units(rng, n, dim)
    };
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    (rows, labels)
}

#[test]
fn agrees_with_brute_force_on_small_instances() {
    let mut rng = SeededRng::new(11);
    for case in 0..500 {
        let n = 1 + rng.below(100);
        let dim = 2 + rng.below(6);
        let classes = 1 + rng.below(5);
        let (rows, labels) = instance(&mut rng, n, dim, classes, case % 3 == 0);
        let index = EmbeddingIndex::new(rows.clone(), labels.clone()).unwrap();
        let k = 1 + rng.below(n);
        let tau = [0.05, 0.1, 0.5, 1.0][rng.below(4)];
        let q = if case % 2 == 0 { rows.row(rng.below(n)).to_vec() } else { random_unit(&mut rng, dim) };
        let cfg = KnnConfig { neighbors: k, temperature: tau };
        assert_eq!(knn_predict(&index, &q, &cfg).unwrap(), brute_force(&rows, &labels, &q, k, tau), "case {case}");
    }
}

#[test]
fn random_labels_sit_at_chance() {
    let mut rng = SeededRng::new(5);
    let (n, dim) = (4000, 32);
    let train = random_units(&mut rng, n, dim);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let test = random_units(&mut rng, 2000, dim);
    let test_labels: Vec<usize> = (0..2000).map(|_| rng.below(2)).collect();
    let train = EmbeddingIndex::new(train, labels).unwrap();
    let test = EmbeddingIndex::new(test, test_labels).unwrap();
    let acc = knn_top1(&train, &test, &KnnConfig::default()).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn self_retrieval_with_one_neighbor() {
    let mut rng = SeededRng::new(8);
    let rows = random_units(&mut rng, 300, 16);
    let labels: Vec<usize> = (0..300).map(|_| rng.below(7)).collect();
    let index = EmbeddingIndex::new(rows, labels).unwrap();
    let cfg = KnnConfig { neighbors: 1, temperature: 0.1 };
    assert_eq!(knn_top1(&index, &index, &cfg).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_ignores_row_order(seed in any::<u64>(), n in 2usize..60, k_frac in 0.0f64..1.0) {
        let mut rng = SeededRng::new(seed);
        let (rows, labels) = instance(&mut rng, n, 5, 4, false);
        let q = random_unit(&mut rng, 5);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let cfg = KnnConfig { neighbors: k, temperature: 0.1 };
        let perm = rng.permutation(n);
        let permuted = rows.select_rows(&perm);
        let permuted_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = knn_predict(&EmbeddingIndex::new(rows, labels).unwrap(), &q, &cfg).unwrap();
        let b = knn_predict(&EmbeddingIndex::new(permuted, permuted_labels).unwrap(), &q, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn duplicate_of_query_never_lowers_its_class(seed in any::<u64>(), n in 1usize..60, k_frac in 0.0f64..1.0, c in 0usize..4) {
        let mut rng = SeededRng::new(seed);
        let (rows, labels) = instance(&mut rng, n, 5, 4, seed % 2 == 0);
        let q = random_unit(&mut rng, 5);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let cfg = KnnConfig { neighbors: k, temperature: 0.2 };
        let before = knn_scores(&EmbeddingIndex::new(rows.clone(), labels.clone()).unwrap(), &q, &cfg).unwrap();

        let mut grown: Vec<Vec<f64>> = rows.iter_rows().map(<[f64]>::to_vec).collect();
        grown.push(q.clone());
        let mut grown_labels = labels;
        grown_labels.push(c);
        let after = knn_scores(&EmbeddingIndex::new(Matrix::from_rows(&grown).unwrap(), grown_labels).unwrap(), &q, &cfg).unwrap();
        prop_assert!(after[c] >= before.get(c).copied().unwrap_or(0.0));
    }
}
