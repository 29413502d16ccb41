//! Classification accuracy and recall@k in feature space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    pub recall_at_1: f64,
    pub n: usize,
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::data("accuracy of an empty set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::dim(format!("{} score rows for {} labels", logits.len(), labels.len())));
    }
    let hits = logits.iter().zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of samples with at least one same-class sample among their `k`
/// nearest Euclidean neighbors. The query itself is never a candidate and
/// equal distances are ordered by sample index.
pub fn recall_at_k(features: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::dim(format!("{n} feature rows for {} labels", labels.len())));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if n < 2 {
        return Err(Error::data("recall@k needs at least two samples"));
    }
    if k >= n {
        return Err(Error::config(format!("k = {k} must be below the sample count {n}")));
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (sq_dist(&features[i], &features[j]), j)).collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            usize::from(cand[..k].iter().any(|&(_, j)| labels[j] == labels[i]))
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        let logits = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        assert!((accuracy(&logits, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn ties_go_to_lower_class() {
        assert_eq!(accuracy(&[vec![0.5, 0.5]], &[0]).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let logits: Vec<Vec<f64>> = (0..n).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let acc = accuracy(&logits, &labels).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "acc {acc}");
    }

    #[test]
    fn recall_examples() {
        let f = vec![vec![0.0], vec![0.1], vec![5.0]];
        assert!((recall_at_k(&f, &[0, 0, 1], 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let dup = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-3.0, 0.0], vec![-3.0, 0.0]];
        assert_eq!(recall_at_k(&dup, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&f, &[0, 0, 1], 3), Err(Error::Config(_))));
    }

    fn oracle(features: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let n = features.len();
        let mut hits = 0;
        for i in 0..n {
            let mut taken = vec![false; n];
            taken[i] = true;
            let mut found = false;
            for _ in 0..k {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if taken[j] {
                        continue;
                    }
                    let d: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
                let (_, j) = best.unwrap();
                taken[j] = true;
                found |= labels[j] == labels[i];
            }
            hits += usize::from(found);
        }
        hits as f64 / n as f64
    }

    #[test]
    fn recall_matches_quadratic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        // Coarse integer grid so distance ties actually occur.
        let f: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        for k in [1, 2, 5] {
            assert_eq!(recall_at_k(&f, &labels, k).unwrap(), oracle(&f, &labels, k));
        }
    }
}
