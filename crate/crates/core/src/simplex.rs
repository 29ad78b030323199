//! Dense and sparse normalizers onto the probability simplex.
//!
//! `sparsemax` is the Euclidean projection onto the simplex computed by the
//! sort-and-threshold rule; `simplex_project_oracle` solves the same
//! quadratic program by exhaustive active-set enumeration and exists to
//! cross-check it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability vector together with its support (indices with `p > 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector<T> {
    pub probs: Vec<T>,
    pub support: Vec<usize>,
}

impl<T: Scalar> SimplexVector<T> {
    fn from_probs(probs: Vec<T>) -> Self {
        let support = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > T::zero())
            .map(|(i, _)| i)
            .collect();
        Self { probs, support }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `|support| / k`.
    pub fn support_fraction(&self) -> f64 {
        if self.probs.is_empty() {
            return 0.0;
        }
        self.support.len() as f64 / self.probs.len() as f64
    }
}

pub fn softmax<T: Scalar>(r: &[T]) -> SimplexVector<T> {
    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = r.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    SimplexVector::from_probs(exps.into_iter().map(|e| e / total).collect())
}

/// `J·v = p ⊙ (v − <p, v>)`.
pub fn softmax_vjp<T: Scalar>(p: &[T], upstream: &[T]) -> Vec<T> {
    let pv = p
        .iter()
        .zip(upstream)
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    p.iter()
        .zip(upstream)
        .map(|(&pi, &vi)| pi * (vi - pv))
        .collect()
}

/// Threshold `τ` such that `sparsemax(r)_i = max(r_i − τ, 0)`.
pub fn sparsemax_threshold<T: Scalar>(r: &[T]) -> T {
    let mut z = r.to_vec();
    z.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut rho = 1usize;
    let mut rho_sum = z[0];
    for (j, &zj) in z.iter().enumerate() {
        cumsum += zj;
        let k = T::from_usize_lossy(j + 1);
        if T::one() + k * zj > cumsum {
            rho = j + 1;
            rho_sum = cumsum;
        }
    }
    (rho_sum - T::one()) / T::from_usize_lossy(rho)
}

pub fn sparsemax<T: Scalar>(r: &[T]) -> SimplexVector<T> {
    assert!(!r.is_empty(), "sparsemax of an empty vector");
    let tau = sparsemax_threshold(r);
    SimplexVector::from_probs(r.iter().map(|&v| (v - tau).max(T::zero())).collect())
}

/// Jacobian-vector product `(diag(1_S) − 1_S·1_Sᵀ/|S|)·v` for a known support.
pub fn sparsemax_vjp_on_support<T: Scalar>(support: &[usize], upstream: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); upstream.len()];
    if support.is_empty() {
        return out;
    }
    let mean = support
        .iter()
        .fold(T::zero(), |acc, &i| acc + upstream[i])
        / T::from_usize_lossy(support.len());
    for &i in support {
        out[i] = upstream[i] - mean;
    }
    out
}

/// Jacobian of `sparsemax` at `r` applied to `upstream` (the Jacobian is
/// symmetric, so this is also the VJP). Uses the support computed at `r`.
pub fn sparsemax_vjp<T: Scalar>(r: &[T], upstream: &[T]) -> Vec<T> {
    let p = sparsemax(r);
    sparsemax_vjp_on_support(&p.support, upstream)
}

/// Largest dimension accepted by the exhaustive oracle.
pub const ORACLE_MAX_DIM: usize = 16;

/// Solves `argmin_{p ∈ Δ} ‖p − r‖²` by enumerating every candidate support.
///
/// For a support `S` the equality-constrained minimizer is
/// `p_S = r_S − (Σ_S r − 1)/|S|`; candidates with a negative coordinate are
/// infeasible. The feasible candidate with the smallest objective wins.
pub fn simplex_project_oracle<T: Scalar>(r: &[T]) -> Result<SimplexVector<T>> {
    let k = r.len();
    if k == 0 {
        return Err(Error::Empty {
            op: "simplex_project_oracle",
        });
    }
    if k > ORACLE_MAX_DIM {
        return Err(Error::TooLarge {
            op: "simplex_project_oracle",
            size: k,
            limit: ORACLE_MAX_DIM,
        });
    }
    let rf: Vec<f64> = r.iter().map(|v| v.to_f64_lossy()).collect();
    let mut best: Option<(f64, u32)> = None;
    for mask in 1u32..(1u32 << k) {
        let count = mask.count_ones() as f64;
        let sum: f64 = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| rf[i]).sum();
        let shift = (sum - 1.0) / count;
        let mut feasible = true;
        let mut objective = 0.0;
        for (i, &ri) in rf.iter().enumerate() {
            let p = if mask & (1 << i) != 0 { ri - shift } else { 0.0 };
            if p < -1e-12 {
                feasible = false;
                break;
            }
            objective += (p - ri) * (p - ri);
        }
        if feasible && best.is_none_or(|(b, _)| objective < b) {
            best = Some((objective, mask));
        }
    }
    let (_, mask) = best.expect("the full support or a singleton is always feasible");
    let count = mask.count_ones() as f64;
    let sum: f64 = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| rf[i]).sum();
    let shift = (sum - 1.0) / count;
    let probs = rf
        .iter()
        .enumerate()
        .map(|(i, &ri)| {
            if mask & (1 << i) != 0 {
                T::lit((ri - shift).max(0.0))
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(SimplexVector::from_probs(probs))
}
