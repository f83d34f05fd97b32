//! Worst-case-oriented attack evaluation and a data-space model-quality
//! surrogate.
//!
//! The ROC is an exact threshold sweep over the observed scores (no
//! parametric fitting, no interpolation): TPR@FPR uses the conservative
//! step convention, and requests below the empirical resolution floor
//! `1/n_nonmembers` report the TPR at zero false positives, flagged as
//! below-floor rather than extrapolated.
//!
//! Model quality uses the Frechet distance between Gaussian fits in raw
//! data space; the covariance square root comes from a symmetric Jacobi
//! eigendecomposition with negative eigenvalues clamped at zero.

use crate::attacks::{AttackScoreSet, Orientation};
use crate::error::{AuditError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The fixed FPR levels reported throughout.
pub const TPR_FPR_LEVELS: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

/// One TPR@FPR entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TprAtFpr<F> {
    pub target_fpr: f64,
    pub tpr: F,
    /// True when `target_fpr < 1/n_nonmembers`: the value is the TPR at
    /// zero false positives, not an interpolation.
    pub below_floor: bool,
}

/// Empirical ROC plus derived worst-case and average-case summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RocReport<F> {
    /// (fpr, tpr), sorted by fpr, deduplicated, endpoints included.
    pub points: Vec<(F, F)>,
    pub auc: F,
    pub tpr_at_fpr: Vec<TprAtFpr<F>>,
    pub best_accuracy: F,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

fn oriented_scores<F: Scalar>(set: &AttackScoreSet<F>) -> Result<(Vec<F>, Vec<F>)> {
    if set.member_scores.is_empty() || set.nonmember_scores.is_empty() {
        return Err(AuditError::Contract("roc needs non-empty score sets".into()));
    }
    if set
        .member_scores
        .iter()
        .chain(&set.nonmember_scores)
        .any(|v| v.is_nan())
    {
        return Err(AuditError::Contract("NaN score in roc input".into()));
    }
    let flip = match set.orientation {
        Orientation::HigherIsMember => F::one(),
        Orientation::LowerIsMember => -F::one(),
    };
    Ok((
        set.member_scores.iter().map(|&s| s * flip).collect(),
        set.nonmember_scores.iter().map(|&s| s * flip).collect(),
    ))
}

/// Exact threshold-sweep ROC over the union of observed scores.
pub fn roc<F: Scalar>(set: &AttackScoreSet<F>) -> Result<RocReport<F>> {
    let (members, nonmembers) = oriented_scores(set)?;
    let (p, n) = (members.len(), nonmembers.len());

    let mut all: Vec<(F, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let pf = F::from_usize(p).expect("count fits scalar");
    let nf = F::from_usize(n).expect("count fits scalar");
    let mut points: Vec<(F, F)> = vec![(F::zero(), F::zero())];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = (
            F::from_usize(fp).expect("count fits scalar") / nf,
            F::from_usize(tp).expect("count fits scalar") / pf,
        );
        if *points.last().expect("seeded with origin") != point {
            points.push(point);
        }
    }

    let mut auc = F::zero();
    for w in points.windows(2) {
        let ((x1, y1), (x2, y2)) = (w[0], w[1]);
        auc = auc + (x2 - x1) * (y2 + y1) / F::lit(2.0);
    }

    let tpr_levels = TPR_FPR_LEVELS
        .iter()
        .map(|&level| TprAtFpr {
            target_fpr: level,
            tpr: tpr_at_points(&points, F::lit(level)),
            below_floor: level < 1.0 / n as f64,
        })
        .collect();

    Ok(RocReport {
        auc,
        tpr_at_fpr: tpr_levels,
        best_accuracy: best_accuracy(set)?,
        n_members: p,
        n_nonmembers: n,
        points,
    })
}

fn tpr_at_points<F: Scalar>(points: &[(F, F)], target: F) -> F {
    let mut best = F::zero();
    for &(fpr, tpr) in points {
        if fpr <= target && tpr > best {
            best = tpr;
        }
    }
    best
}

/// TPR of the ROC point with the largest FPR at or below `target_fpr`
/// (conservative step convention; no interpolation).
pub fn tpr_at_fpr<F: Scalar>(report: &RocReport<F>, target_fpr: F) -> F {
    tpr_at_points(&report.points, target_fpr)
}

/// Best achievable accuracy over all thresholds with the set's declared
/// orientation (ties decide nonmember).
pub fn best_accuracy<F: Scalar>(set: &AttackScoreSet<F>) -> Result<F> {
    use crate::attacks::decide;
    if set.member_scores.is_empty() || set.nonmember_scores.is_empty() {
        return Err(AuditError::Contract("best_accuracy needs non-empty sets".into()));
    }
    let all_member_threshold = match set.orientation {
        Orientation::LowerIsMember => F::infinity(),
        Orientation::HigherIsMember => F::neg_infinity(),
    };
    let candidates = set
        .member_scores
        .iter()
        .chain(&set.nonmember_scores)
        .copied()
        .chain(std::iter::once(all_member_threshold));

    let total = F::from_usize(set.member_scores.len() + set.nonmember_scores.len())
        .expect("count fits scalar");
    let mut best = F::zero();
    for threshold in candidates {
        let tp = set
            .member_scores
            .iter()
            .filter(|&&s| decide(s, threshold, set.orientation))
            .count();
        let tn = set
            .nonmember_scores
            .iter()
            .filter(|&&s| !decide(s, threshold, set.orientation))
            .count();
        let acc = F::from_usize(tp + tn).expect("count fits scalar") / total;
        if acc > best {
            best = acc;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

/// Mean and sample covariance (ddof = 1) of an `[n, m]` point set.
pub fn fit_gaussian<F: Scalar>(set: &Tensor<F>) -> Result<(Vec<F>, Vec<F>)> {
    if set.shape().len() != 2 {
        return Err(AuditError::Contract("fit_gaussian expects an [n, m] tensor".into()));
    }
    let (n, m) = (set.shape()[0], set.shape()[1]);
    if n < m + 1 {
        return Err(AuditError::Contract(format!(
            "need at least dimension+1 = {} samples for a covariance fit, got {n}",
            m + 1
        )));
    }
    let nf = F::from_usize(n).expect("count fits scalar");
    let mut mean = vec![F::zero(); m];
    for row in 0..n {
        for j in 0..m {
            mean[j] = mean[j] + set.data()[row * m + j];
        }
    }
    for v in mean.iter_mut() {
        *v = *v / nf;
    }
    let mut cov = vec![F::zero(); m * m];
    for row in 0..n {
        for i in 0..m {
            let di = set.data()[row * m + i] - mean[i];
            for j in 0..m {
                let dj = set.data()[row * m + j] - mean[j];
                cov[i * m + j] = cov[i * m + j] + di * dj;
            }
        }
    }
    let denom = F::from_usize(n - 1).expect("count fits scalar");
    for v in cov.iter_mut() {
        *v = *v / denom;
    }
    Ok((mean, cov))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns (eigenvalues, eigenvectors as columns, row-major).
fn jacobi_eigh<F: Scalar>(mat: &[F], m: usize) -> (Vec<F>, Vec<F>) {
    let mut a = mat.to_vec();
    let mut v = vec![F::zero(); m * m];
    for i in 0..m {
        v[i * m + i] = F::one();
    }
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..m {
            for q in 0..m {
                if p != q {
                    off = off + a[p * m + q] * a[p * m + q];
                }
            }
        }
        if off < F::lit(1e-28) {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq.abs() < F::lit(1e-300) {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (F::lit(2.0) * apq);
                let t = {
                    let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..m).map(|i| a[i * m + i]).collect();
    (eig, v)
}

fn matmul_sq<F: Scalar>(a: &[F], b: &[F], m: usize) -> Vec<F> {
    crate::tensor::matmul_kernel(a, b, m, m, m)
}

/// Symmetric PSD square root with negative eigenvalues clamped at zero.
fn sqrtm_psd<F: Scalar>(mat: &[F], m: usize) -> Vec<F> {
    let (eig, v) = jacobi_eigh(mat, m);
    // V diag(sqrt(clamp(eig))) V^T
    let mut scaled = vec![F::zero(); m * m];
    for i in 0..m {
        let root = eig[i].max(F::zero()).sqrt();
        for k in 0..m {
            scaled[k * m + i] = v[k * m + i] * root;
        }
    }
    let mut vt = vec![F::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            vt[i * m + j] = v[j * m + i];
        }
    }
    matmul_sq(&scaled, &vt, m)
}

fn trace<F: Scalar>(mat: &[F], m: usize) -> F {
    (0..m).fold(F::zero(), |acc, i| acc + mat[i * m + i])
}

/// Frechet distance between two Gaussians given their parameters:
/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`.
pub fn frechet_distance_gaussians<F: Scalar>(
    mu_a: &[F],
    cov_a: &[F],
    mu_b: &[F],
    cov_b: &[F],
) -> Result<F> {
    let m = mu_a.len();
    if mu_b.len() != m || cov_a.len() != m * m || cov_b.len() != m * m {
        return Err(AuditError::Contract("gaussian parameter dimension mismatch".into()));
    }
    let mean_term = mu_a
        .iter()
        .zip(mu_b)
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    // Tr((Sa Sb)^(1/2)) computed via the symmetric form
    // Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), stable under the PSD clamp.
    let sa_half = sqrtm_psd(cov_a, m);
    let inner = matmul_sq(&matmul_sq(&sa_half, cov_b, m), &sa_half, m);
    let cross = trace(&sqrtm_psd(&inner, m), m);
    let d = mean_term + trace(cov_a, m) + trace(cov_b, m) - F::lit(2.0) * cross;
    Ok(d.max(F::zero()))
}

/// Frechet distance between Gaussian fits of two sample sets.
pub fn frechet_distance<F: Scalar>(set_a: &Tensor<F>, set_b: &Tensor<F>) -> Result<F> {
    let (mu_a, cov_a) = fit_gaussian(set_a)?;
    let (mu_b, cov_b) = fit_gaussian(set_b)?;
    frechet_distance_gaussians(&mu_a, &cov_a, &mu_b, &cov_b)
}
