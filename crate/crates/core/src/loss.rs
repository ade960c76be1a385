//! Triplet hinge loss and its batch-all form over every valid
//! (anchor, positive, negative) triple of a mini-batch.

use crate::error::{Error, Result};
use crate::numerics::{norm, pairwise_sq_dist, sq_dist, Matrix};
use crate::ClassId;

const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// L2-normalized embeddings of one mini-batch with their class ids.
#[derive(Debug, Clone)]
pub struct TripletBatchView {
    embeddings: Matrix,
    labels: Vec<ClassId>,
}

impl TripletBatchView {
    pub fn new(embeddings: Matrix, labels: Vec<ClassId>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::invalid("a triplet batch needs at least two records"));
        }
        for (i, row) in embeddings.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("embedding {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }
}

/// How the summed hinge terms are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Plain sum over all valid triplets.
    #[default]
    Sum,
    /// Divide by the number of valid triplets.
    MeanValid,
    /// Divide by the number of triplets with a positive hinge.
    MeanActive,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean_valid" | "mean-valid" => Ok(Self::MeanValid),
            "mean_active" | "mean-active" => Ok(Self::MeanActive),
            other => Err(Error::invalid(format!("unknown loss normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::MeanValid => "mean_valid",
            Self::MeanActive => "mean_active",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub total_loss: f64,
    /// Gradient of `total_loss` with respect to each embedding row.
    pub grad: Matrix,
    pub active_triplets: u64,
    pub valid_triplets: u64,
}

/// `max(d(a, p) − d(a, n) + margin, 0)` with `d` the squared Euclidean
/// distance.
pub fn triplet_loss_single(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid(format!(
            "triplet dimensions differ: {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    check_margin(margin)?;
    Ok((sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0))
}

/// Number of ordered `(a, p, n)` with `label[a] = label[p]`, `a ≠ p` and
/// `label[n] ≠ label[a]`.
pub fn valid_triplet_count(labels: &[ClassId]) -> u64 {
    let mut sizes = std::collections::HashMap::<ClassId, u64>::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    let n = labels.len() as u64;
    sizes.values().map(|&s| s * (s - 1) * (n - s)).sum()
}

/// Batch-all triplet loss with exact gradients.
///
/// Each active triplet with scale `s` adds `2s(xₙ − xₚ)` to the anchor row,
/// `−2s(xₐ − xₚ)` to the positive row and `2s(xₐ − xₙ)` to the negative row.
/// A hinge of exactly zero counts as inactive.
pub fn batch_all_loss(batch: &TripletBatchView, margin: f64, normalization: Normalization) -> Result<LossResult> {
    batch_all_loss_unchecked(&batch.embeddings, &batch.labels, margin, normalization)
}

/// Same as [`batch_all_loss`] without the unit-norm check on the rows.
pub(crate) fn batch_all_loss_unchecked(
    x: &Matrix,
    labels: &[ClassId],
    margin: f64,
    normalization: Normalization,
) -> Result<LossResult> {
    check_margin(margin)?;
    let valid = valid_triplet_count(labels);
    if valid == 0 {
        return Err(no_valid_triplet(labels));
    }
    let n = labels.len();
    let dist = pairwise_sq_dist(x)?;

    // pair_weight[i][j] accumulates the signed number of active triplets in
    // which d(i, j) appears: +1 as anchor-positive, -1 as anchor-negative
    let mut pair_weight = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut active = 0u64;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = dist[(a, p)];
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let hinge = d_ap - dist[(a, neg)] + margin;
                if hinge > 0.0 {
                    total += hinge;
                    active += 1;
                    pair_weight[(a, p)] += 1.0;
                    pair_weight[(a, neg)] -= 1.0;
                }
            }
        }
    }

    let scale = match normalization {
        Normalization::Sum => 1.0,
        Normalization::MeanValid => 1.0 / valid as f64,
        Normalization::MeanActive if active > 0 => 1.0 / active as f64,
        Normalization::MeanActive => 1.0,
    };

    let dim = x.cols();
    let mut grad = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..n {
            let w = pair_weight[(i, j)] + pair_weight[(j, i)];
            if w == 0.0 {
                continue;
            }
            let coeff = 2.0 * scale * w;
            let xi = x.row(i);
            let xj = x.row(j);
            for ((g, &a), &b) in grad.row_mut(i).iter_mut().zip(xi).zip(xj) {
                *g += coeff * (a - b);
            }
        }
    }

    Ok(LossResult {
        total_loss: total * scale,
        grad,
        active_triplets: active,
        valid_triplets: valid,
    })
}

/// Reference batch-all loss (plain sum) by an explicit loop over every
/// `(a, p, n)` triple. `O(n³ · dim)`; intended for audits and tests.
pub fn brute_force_batch_all(batch: &TripletBatchView, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    let labels = &batch.labels;
    let x = &batch.embeddings;
    let n = labels.len();
    let mut total = 0.0;
    let mut valid = 0u64;
    for a in 0..n {
        for p in 0..n {
            for neg in 0..n {
                if a == p || labels[a] != labels[p] || labels[neg] == labels[a] {
                    continue;
                }
                valid += 1;
                total += triplet_loss_single(x.row(a), x.row(p), x.row(neg), margin)?;
            }
        }
    }
    if valid == 0 {
        return Err(no_valid_triplet(labels));
    }
    Ok(total)
}

fn check_margin(margin: f64) -> Result<()> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(Error::invalid(format!("margin must be a finite non-negative number, got {margin}")));
    }
    Ok(())
}

fn no_valid_triplet(labels: &[ClassId]) -> Error {
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    Error::NoValidTriplet(format!(
        "{} records across {} class(es) admit no anchor-positive-negative triple",
        labels.len(),
        classes.len()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_view(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: u32) -> TripletBatchView {
        let raw = Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut labels: Vec<ClassId> = (0..n as u32).map(|i| i % classes).collect();
        // shuffle so classes are interleaved arbitrarily
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        TripletBatchView::new(l2_normalize_rows(&raw).unwrap(), labels).unwrap()
    }

    #[test]
    fn single_triplet_examples() {
        assert_eq!(triplet_loss_single(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 0.2).unwrap(), 0.0);
        let v = triplet_loss_single(&[0.0, 0.0], &[0.0, 1.0], &[1.05, 0.0], 0.2).unwrap();
        assert!((v - 0.0975).abs() < 1e-12);
        assert_eq!(triplet_loss_single(&[0.3, 0.1], &[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 0.7);
        assert!(triplet_loss_single(&[0.0], &[1.0, 0.0], &[0.0, 2.0], 0.2).is_err());
    }

    #[test]
    fn triplet_counts() {
        assert_eq!(valid_triplet_count(&[0, 0, 1, 1]), 8);
        let labels: Vec<ClassId> = (0..30).map(|i| i / 3).collect();
        assert_eq!(valid_triplet_count(&labels), 30 * 2 * 27);
        assert_eq!(valid_triplet_count(&[4, 4, 4]), 0);
        // unbalanced: sizes 3 and 1 -> 3 * 2 * 1
        assert_eq!(valid_triplet_count(&[0, 0, 0, 1]), 6);
    }

    #[test]
    fn identical_embeddings_hit_the_margin() {
        let x = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
        let view = TripletBatchView::new(x, vec![0, 0, 1, 1]).unwrap();
        let r = batch_all_loss(&view, 0.2, Normalization::Sum).unwrap();
        assert!((r.total_loss - 1.6).abs() < 1e-12);
        assert_eq!(r.active_triplets, 8);
        assert_eq!(r.valid_triplets, 8);
        let mean = batch_all_loss(&view, 0.2, Normalization::MeanValid).unwrap();
        assert!((mean.total_loss - 0.2).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_clusters() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let view = TripletBatchView::new(x, vec![0, 0, 1, 1]).unwrap();
        let r = batch_all_loss(&view, 0.2, Normalization::Sum).unwrap();
        assert_eq!(r.total_loss, 0.0);
        assert_eq!(r.active_triplets, 0);
        assert!(r.grad.as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(brute_force_batch_all(&view, 0.2).unwrap(), 0.0);
        assert!((brute_force_batch_all(&view, 10.0).unwrap() - 64.0).abs() < 1e-12);
        let mean_active = batch_all_loss(&view, 0.2, Normalization::MeanActive).unwrap();
        assert_eq!(mean_active.total_loss, 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let view = TripletBatchView::new(x, vec![3, 3]).unwrap();
        assert!(matches!(batch_all_loss(&view, 0.2, Normalization::Sum), Err(Error::NoValidTriplet(_))));
        assert!(matches!(brute_force_batch_all(&view, 0.2), Err(Error::NoValidTriplet(_))));
    }

    #[test]
    fn rejects_non_unit_rows() {
        let x = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(TripletBatchView::new(x, vec![0, 1]).is_err());
    }

    #[test]
    fn random_batch_matches_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let view = random_view(&mut rng, 9, 4, 3);
        let r = batch_all_loss(&view, 0.2, Normalization::Sum).unwrap();
        assert!((r.total_loss - brute_force_batch_all(&view, 0.2).unwrap()).abs() < 1e-9);

        // gradient oracle: accumulate each active triplet's terms directly
        let x = view.embeddings();
        let l = view.labels();
        let mut oracle = Matrix::zeros(9, 4);
        for a in 0..9 {
            for p in 0..9 {
                for q in 0..9 {
                    if a == p || l[a] != l[p] || l[q] == l[a] {
                        continue;
                    }
                    if triplet_loss_single(x.row(a), x.row(p), x.row(q), 0.2).unwrap() > 0.0 {
                        for k in 0..4 {
                            oracle[(a, k)] += 2.0 * (x[(q, k)] - x[(p, k)]);
                            oracle[(p, k)] += -2.0 * (x[(a, k)] - x[(p, k)]);
                            oracle[(q, k)] += 2.0 * (x[(a, k)] - x[(q, k)]);
                        }
                    }
                }
            }
        }
        assert!(r.grad.max_abs_diff(&oracle) < 1e-9);

        // finite differences on the embeddings themselves
        let h = 1e-6;
        for i in 0..9 {
            for k in 0..4 {
                let mut plus = x.clone();
                plus[(i, k)] += h;
                let mut minus = x.clone();
                minus[(i, k)] -= h;
                let lp = batch_all_loss_unchecked(&plus, l, 0.2, Normalization::Sum).unwrap().total_loss;
                let lm = batch_all_loss_unchecked(&minus, l, 0.2, Normalization::Sum).unwrap().total_loss;
                let fd = (lp - lm) / (2.0 * h);
                let a = r.grad[(i, k)];
                assert!((a - fd).abs() <= 1e-6 * fd.abs().max(1.0), "({i},{k}): {a} vs {fd}");
            }
        }
    }

    #[test]
    fn single_triplet_forces_cancel() {
        let raw = Matrix::from_rows(&[[0.2, 0.9, -0.1], [0.5, 0.4, 0.3], [0.3, 0.8, 0.0]]).unwrap();
        let view = TripletBatchView::new(l2_normalize_rows(&raw).unwrap(), vec![0, 0, 1]).unwrap();
        // labels [0,0,1] give two triplets (each of the pair as anchor); both
        // are internal to the three rows, so the row sum must vanish
        let r = batch_all_loss(&view, 1.0, Normalization::Sum).unwrap();
        assert!(r.active_triplets > 0);
        for k in 0..3 {
            let s: f64 = (0..3).map(|i| r.grad[(i, k)]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn sum_matches_brute_force(seed in any::<u64>(), n in 2usize..=12, dim in 1usize..=8, classes in 2u32..=4, margin in 0.0f64..1.5) {
            prop_assume!(n as u32 >= classes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let view = random_view(&mut rng, n, dim, classes);
            prop_assume!(valid_triplet_count(view.labels()) > 0);
            let fast = batch_all_loss(&view, margin, Normalization::Sum).unwrap();
            let slow = brute_force_batch_all(&view, margin).unwrap();
            prop_assert!((fast.total_loss - slow).abs() < 1e-9);
            prop_assert!(fast.active_triplets <= fast.valid_triplets);
            prop_assert_eq!(fast.total_loss == 0.0, fast.active_triplets == 0);
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>(), n in 4usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let view = random_view(&mut rng, n, 3, 2);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let rows: Vec<&[f64]> = perm.iter().map(|&i| view.embeddings().row(i)).collect();
            let labels = perm.iter().map(|&i| view.labels()[i]).collect();
            let permuted = TripletBatchView::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
            let a = batch_all_loss(&view, 0.3, Normalization::Sum).unwrap();
            let b = batch_all_loss(&permuted, 0.3, Normalization::Sum).unwrap();
            prop_assert!((a.total_loss - b.total_loss).abs() < 1e-12);
            for (dst, &src) in perm.iter().enumerate() {
                for k in 0..3 {
                    prop_assert!((b.grad[(dst, k)] - a.grad[(src, k)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn monotone_in_margin(seed in any::<u64>(), m1 in 0.0f64..2.0, m2 in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let view = random_view(&mut rng, 8, 3, 3);
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let a = batch_all_loss(&view, lo, Normalization::Sum).unwrap().total_loss;
            let b = batch_all_loss(&view, hi, Normalization::Sum).unwrap().total_loss;
            prop_assert!(a <= b);
        }
    }
}
