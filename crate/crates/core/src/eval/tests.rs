use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn set(rows: &[&[f64]]) -> EmbeddingSet {
    EmbeddingSet::from_rows(rows).unwrap()
}

fn basis(n: usize) -> EmbeddingSet {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    EmbeddingSet::from_rows(&rows).unwrap()
}

#[test]
fn cosine_closed_forms() {
    assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm { .. })));
}

#[test]
fn self_retrieval_is_perfect() {
    let s = set(&[&[1.0, 0.2], &[0.1, 1.0], &[-1.0, 0.3]]);
    assert_eq!(retrieval_accuracy(&s, &s).unwrap().metric("accuracy"), Some(1.0));
}

#[test]
fn crossed_pairs_score_zero() {
    // Row 0 of src is closest to row 1 of tgt and vice versa.
    let src = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let tgt = set(&[&[0.1, 1.0], &[1.0, 0.1]]);
    assert_eq!(retrieval_accuracy(&src, &tgt).unwrap().metric("accuracy"), Some(0.0));
}

#[test]
fn retrieval_size_mismatch_is_a_contract_error() {
    let a = basis(2);
    let b = basis(3);
    assert!(matches!(retrieval_accuracy(&a, &b), Err(Error::Contract(_))));
}

#[test]
fn retrieval_ties_go_to_lowest_index() {
    let src = set(&[&[1.0, 0.0]]);
    let tgt = set(&[&[0.0, 1.0], &[0.0, 2.0]]);
    assert_eq!(nearest_neighbors(&src, &tgt).unwrap(), vec![0]);
}

#[test]
fn mining_threshold_one_is_empty() {
    let b = basis(3);
    assert!(mine_bitext(&b, &b, 1.0, Matching::Greedy).unwrap().is_empty());
}

#[test]
fn mining_orthonormal_basis_gives_diagonal() {
    let b = basis(4);
    let pairs = mine_bitext(&b, &b, 0.5, Matching::Greedy).unwrap();
    assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
}

#[test]
fn mining_keeps_only_the_best_partner() {
    let a = set(&[&[1.0, 0.0, 0.0]]);
    let b = set(&[&[1.0, 0.3, 0.0], &[1.0, 0.1, 0.0]]);
    assert_eq!(mine_bitext(&a, &b, 0.5, Matching::Greedy).unwrap(), vec![(0, 1)]);
    assert_eq!(mine_bitext(&a, &b, 0.5, Matching::Strict).unwrap(), vec![(0, 1), (0, 0)]);
}

#[test]
fn f1_cases() {
    let p = f1_score(&[(0, 0), (1, 1)], &[(0, 0), (1, 1)]);
    assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    let p = f1_score(&[(0, 1)], &[(0, 0)]);
    assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    let pred = [(0, 0), (1, 1), (2, 2), (3, 9)];
    let gold = [(0, 0), (1, 1), (2, 2), (4, 4), (5, 5)];
    let p = f1_score(&pred, &gold);
    assert_eq!(p.precision, 0.75);
    assert_eq!(p.recall, 0.6);
    assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(f1_score(&[], &[]).precision, 1.0);
    assert_eq!(f1_score(&[], &[(0, 0)]).precision, 0.0);
}

#[test]
fn tuning_on_separated_similarities_is_perfect() {
    let b = basis(5);
    let gold: Vec<Pair> = (0..5).map(|i| (i, i)).collect();
    let choice = tune_threshold(&b, &b, &gold, Matching::Greedy).unwrap();
    assert_eq!(choice.scores.f1, 1.0);
    assert!(choice.threshold > 0.0 && choice.threshold < 1.0);
    let mined = mine_bitext(&b, &b, choice.threshold, Matching::Greedy).unwrap();
    assert_eq!(f1_score(&mined, &gold).f1, 1.0);
}

#[test]
fn tuning_singleton_dev_pair() {
    let a = set(&[&[1.0, 0.5]]);
    let b = set(&[&[0.3, 1.0]]);
    let choice = tune_threshold(&a, &b, &[(0, 0)], Matching::Greedy).unwrap();
    assert_eq!(choice.scores.f1, 1.0);
    assert!(choice.threshold < cosine(a.row(0), b.row(0)).unwrap());
}

#[test]
fn tuning_tolerates_impossible_gold() {
    let b = basis(3);
    let gold: Vec<Pair> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let choice = tune_threshold(&b, &b, &gold, Matching::Greedy).unwrap();
    assert!(choice.scores.f1 < 1.0);
}

#[test]
fn tuning_rejects_empty_inputs() {
    let b = basis(2);
    assert!(matches!(tune_threshold(&b, &b, &[], Matching::Greedy), Err(Error::Contract(_))));
    let e = EmbeddingSet::empty(2);
    assert!(matches!(tune_threshold(&e, &b, &[(0, 0)], Matching::Greedy), Err(Error::Contract(_))));
}

#[test]
fn spearman_cases() {
    assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman_rho(&[3.0, 2.0, 1.0], &[10.0, 20.0, 30.0]).unwrap(), -1.0);
    // Ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]: 4.5 / sqrt(4.5 * 5) = 3 / sqrt(10).
    let rho = spearman_rho(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((rho - 0.948_683_298_050_513_8).abs() < 1e-15);
    assert!(matches!(spearman_rho(&[1.0], &[1.0]), Err(Error::Contract(_))));
    assert!(matches!(spearman_rho(&[1.0, 2.0], &[1.0]), Err(Error::Contract(_))));
    assert!(matches!(spearman_rho(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedCorrelation)));
}

#[test]
fn report_validation_checks_task_metrics() {
    let r = EvalReport::new(Task::Sts, [("spearman_rho", -0.5)], 3);
    r.validate().unwrap();
    let r = EvalReport::new(Task::Sts, [("f1", 0.5)], 3);
    assert!(r.validate().is_err());
    let r = EvalReport::new(Task::Mining, [("f1", 1.5)], 3);
    assert!(r.validate().is_err());
}

#[test]
fn embedding_set_invariants() {
    assert!(matches!(
        EmbeddingSet::from_rows(&[[1.0, 0.0], [0.0, 0.0]]),
        Err(Error::ZeroNorm { row: 1 })
    ));
    let dup = EmbeddingSet::new(1, vec![1.0, 2.0], vec!["a".into(), "a".into()], vec!["x".into(), "x".into()]);
    assert!(matches!(dup, Err(Error::Data(_))));
}

#[test]
fn embedding_file_layout() {
    let s = EmbeddingSet::new(2, vec![1.0, 2.0, 3.0, 4.0], vec!["s0".into(), "s1".into()], vec!["en".into(), "fr".into()]).unwrap();
    let bytes = encode_embeddings(&s, Precision::F64).unwrap();
    assert_eq!(&bytes[..5], b"MSTE1");
    assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
    assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
    assert_eq!(bytes[13], 8);
    assert_eq!(&bytes[14..22], &1.0f64.to_le_bytes());
    assert_eq!(&bytes[46..], b"s0\ns1\nen\nfr\n");
    let (back, p) = decode_embeddings(&bytes).unwrap();
    assert_eq!(back, s);
    assert_eq!(p, Precision::F64);

    let small = encode_embeddings(&s, Precision::F32).unwrap();
    assert_eq!(small[13], 4);
    assert_eq!(small.len(), 14 + 16 + 12);
    assert_eq!(decode_embeddings(&small).unwrap().0.row(1), &[3.0, 4.0]);

    let empty = encode_embeddings(&EmbeddingSet::empty(8), Precision::F64).unwrap();
    assert_eq!(empty.len(), 14);
    assert_eq!(decode_embeddings(&empty).unwrap().0.len(), 0);
    assert!(decode_embeddings(b"MSTE2").is_err());
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 2usize..5).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(0.1f64..1.0, d), n))
}

proptest! {
    #[test]
    fn embedding_file_roundtrip(rows in rows_strategy()) {
        let s = EmbeddingSet::from_rows(&rows).unwrap();
        let bytes = encode_embeddings(&s, Precision::F64).unwrap();
        prop_assert_eq!(decode_embeddings(&bytes).unwrap().0, s);
    }

    #[test]
    fn retrieval_is_scale_invariant(rows in rows_strategy(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let s = EmbeddingSet::from_rows(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, c)| r.iter().map(|v| v * c).collect()).collect();
        let t = EmbeddingSet::from_rows(&scaled).unwrap();
        let acc = retrieval_accuracy(&s, &t).unwrap().metric("accuracy").unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(nearest_neighbors(&s, &t).unwrap(), nearest_neighbors(&s, &s).unwrap());
    }

    #[test]
    fn mined_pairs_form_a_matching(rows in rows_strategy(), thr in -1.0f64..1.0) {
        let s = EmbeddingSet::from_rows(&rows).unwrap();
        let pairs = mine_bitext(&s, &s, thr, Matching::Greedy).unwrap();
        let mut a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        a.sort();
        a.dedup();
        b.sort();
        b.dedup();
        prop_assert_eq!(a.len(), pairs.len());
        prop_assert_eq!(b.len(), pairs.len());
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(
        xs in prop::collection::vec(-5i32..5, 3..12),
        ys in prop::collection::vec(-5i32..5, 12),
    ) {
        let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = ys[..x.len()].iter().map(|&v| v as f64).collect();
        if let Ok(rho) = spearman_rho(&x, &y) {
            let fx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 - 1.0).collect();
            let fy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            let rho2 = spearman_rho(&fx, &fy).unwrap();
            prop_assert!((rho - rho2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }
}
