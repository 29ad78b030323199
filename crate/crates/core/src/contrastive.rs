//! Cosine similarity matrix and the symmetric InfoNCE objective.

use crate::error::{Error, Result};
use crate::numkit::ops::{l2_normalize_rows, l2_normalize_rows_vjp, matmul_nt, matmul, matmul_tn};
use crate::numkit::tensor::Tensor;
use crate::scalar::Scalar;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
/// Zero-row guard used when normalizing features.
pub const COSINE_EPS: f64 = 1e-12;

/// `s[i][j]` = cosine similarity of image `i` and text `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub s: Tensor<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn size(&self) -> usize {
        self.s.rows()
    }
}

/// Log-parameterized temperature, clamped to `[TAU_MIN, TAU_MAX]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature<T> {
    pub log_tau: T,
    pub learnable: bool,
}

impl<T: Scalar> Temperature<T> {
    pub fn new(tau: T, learnable: bool) -> Self {
        let mut t = Self {
            log_tau: tau.ln(),
            learnable,
        };
        t.clamp();
        t
    }

    pub fn tau(&self) -> T {
        self.log_tau
            .exp()
            .max(T::lit(TAU_MIN))
            .min(T::lit(TAU_MAX))
    }

    /// Whether `tau()` is strictly inside the clamp range, so `log_tau`
    /// receives gradient.
    pub fn is_free(&self) -> bool {
        let t = self.log_tau.exp();
        t > T::lit(TAU_MIN) && t < T::lit(TAU_MAX)
    }

    /// Projects `log_tau` back into the clamp range.
    pub fn clamp(&mut self) {
        self.log_tau = self
            .log_tau
            .max(T::lit(TAU_MIN.ln()))
            .min(T::lit(TAU_MAX.ln()));
    }
}

pub fn cosine_sim_matrix<T: Scalar>(fv: &Tensor<T>, ft: &Tensor<T>) -> Result<SimilarityMatrix<T>> {
    if fv.shape() != ft.shape() || !fv.is_matrix() {
        return Err(Error::Shape {
            op: "cosine_sim_matrix",
            left: fv.shape().to_vec(),
            right: ft.shape().to_vec(),
        });
    }
    let eps = T::lit(COSINE_EPS);
    let s = matmul_nt(&l2_normalize_rows(fv, eps), &l2_normalize_rows(ft, eps))?;
    Ok(SimilarityMatrix { s })
}

/// Returns `(grad_fv, grad_ft)` for an upstream gradient on `s`.
pub fn cosine_sim_matrix_vjp<T: Scalar>(
    fv: &Tensor<T>,
    ft: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let eps = T::lit(COSINE_EPS);
    let nv = l2_normalize_rows(fv, eps);
    let nt = l2_normalize_rows(ft, eps);
    let g_nv = matmul(upstream, &nt)?;
    let g_nt = matmul_tn(upstream, &nv)?;
    Ok((
        l2_normalize_rows_vjp(fv, eps, &g_nv),
        l2_normalize_rows_vjp(ft, eps, &g_nt),
    ))
}

/// Loss value with gradients with respect to `s` and `log_tau`.
#[derive(Clone, Debug)]
pub struct InfoNceOutput<T> {
    pub loss: T,
    pub grad_s: Tensor<T>,
    /// Zero when the temperature is fixed or clamped.
    pub grad_log_tau: T,
}

/// `−log softmax(v)[target]`, stable for large logits.
fn neg_log_softmax_at<T: Scalar>(v: &[T], target: usize) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = v.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
    (m - v[target]) + sum.ln()
}

/// Symmetric InfoNCE: image→text over rows plus text→image over columns of
/// `s/τ`, each averaged over the batch.
pub fn infonce<T: Scalar>(sim: &SimilarityMatrix<T>, tau: &Temperature<T>) -> InfoNceOutput<T> {
    let n = sim.size();
    let t = tau.tau();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let z = sim.s.scaled(T::one() / t);
    let zt = z.transpose();

    let mut loss = T::zero();
    let mut grad_z = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = z.row(i);
        loss += neg_log_softmax_at(row, i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
        for j in 0..n {
            let p = (row[j] - m).exp() / sum;
            let g = if i == j { p - T::one() } else { p };
            grad_z.set(i, j, grad_z.at(i, j) + g * inv_n);
        }
    }
    for j in 0..n {
        let col = zt.row(j);
        loss += neg_log_softmax_at(col, j);
        let m = col.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = col.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
        for i in 0..n {
            let p = (col[i] - m).exp() / sum;
            let g = if i == j { p - T::one() } else { p };
            grad_z.set(i, j, grad_z.at(i, j) + g * inv_n);
        }
    }
    loss *= inv_n;

    let grad_log_tau = if tau.learnable && tau.is_free() {
        -grad_z.dot(&z)
    } else {
        T::zero()
    };
    InfoNceOutput {
        loss,
        grad_s: grad_z.scaled(T::one() / t),
        grad_log_tau,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix<f64> {
        SimilarityMatrix { s: Tensor::from_f64_rows(rows).unwrap() }
    }

    fn fixed(tau: f64) -> Temperature<f64> {
        Temperature::new(tau, false)
    }

    #[test]
    fn cosine_examples() {
        let f = Tensor::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let s = cosine_sim_matrix(&f, &f).unwrap();
        assert_eq!(s.s.data(), &[1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::<f64>::from_f64_rows(&[&[3.0, 4.0]]).unwrap();
        let b = Tensor::from_f64_rows(&[&[4.0, 3.0]]).unwrap();
        let s: SimilarityMatrix<f64> = cosine_sim_matrix(&a, &b).unwrap();
        assert!((s.s.data()[0] - 24.0 / 25.0).abs() < 1e-15);
        assert!(cosine_sim_matrix(&a, &f).is_err());
    }

    #[test]
    fn infonce_closed_values() {
        assert_eq!(infonce(&sim(&[&[0.3]]), &fixed(0.07)).loss, 0.0);
        for n in [2usize, 8, 64] {
            let s = SimilarityMatrix { s: Tensor::filled(&[n, n], 0.25) };
            let l = infonce(&s, &fixed(0.07)).loss;
            assert!((l - 2.0 * (n as f64).ln()).abs() < 1e-9);
        }
        let l = infonce(&sim(&[&[1.0, -1.0], &[-1.0, 1.0]]), &fixed(0.07)).loss;
        let expected = 2.0 * (-2.0f64 / 0.07).exp().ln_1p();
        assert!(l < 1e-12 && (l - expected).abs() < 1e-14);
    }

    #[test]
    fn temperature_clamps() {
        let mut t = Temperature::new(5.0f64, true);
        assert_eq!(t.tau(), 1.0);
        t.log_tau = -20.0;
        assert_eq!(t.tau(), 0.01);
        t.clamp();
        assert!((t.log_tau - 0.01f64.ln()).abs() < 1e-15);
    }

    fn random_sim(rng: &mut Rng, n: usize) -> SimilarityMatrix<f64> {
        SimilarityMatrix {
            s: Tensor::from_parts(vec![n, n], (0..n * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap(),
        }
    }

    #[test]
    fn grad_s_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let h = 1e-6;
        for _ in 0..10 {
            let n = rng.range_inclusive(2, 6);
            let s = random_sim(&mut rng, n);
            let tau = Temperature::new(rng.uniform_in(0.05, 0.5), true);
            let out = infonce(&s, &tau);
            for k in 0..n * n {
                let mut p = s.clone();
                p.s.data_mut()[k] += h;
                let mut m = s.clone();
                m.s.data_mut()[k] -= h;
                let num = (infonce(&p, &tau).loss - infonce(&m, &tau).loss) / (2.0 * h);
                let a = out.grad_s.data()[k];
                assert!((num - a).abs() / a.abs().max(num.abs()).max(1.0) < 1e-5);
            }
            let mut tp = tau;
            tp.log_tau += h;
            let mut tm = tau;
            tm.log_tau -= h;
            let num = (infonce(&s, &tp).loss - infonce(&s, &tm).loss) / (2.0 * h);
            assert!((num - out.grad_log_tau).abs() / num.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn cosine_vjp_matches_finite_differences() {
        use crate::numkit::gradcheck::{finite_diff_check, FnMap};
        let mut rng = Rng::new(22);
        let ft = Tensor::from_parts(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let fv = Tensor::from_parts(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let map = FnMap {
            name: "cosine".into(),
            forward: |x: &Tensor<f64>| cosine_sim_matrix(x, &ft).unwrap().s,
            vjp: |x: &Tensor<f64>, g: &Tensor<f64>| cosine_sim_matrix_vjp(x, &ft, g).unwrap().0,
        };
        assert!(finite_diff_check(&map, &fv, 1e-6).passed);
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_shift_invariant(seed in 0u64..1000, n in 2usize..10, c in -0.5f64..0.5) {
            let mut rng = Rng::new(seed);
            let s = random_sim(&mut rng, n);
            let tau = fixed(0.1);
            let l = infonce(&s, &tau).loss;
            prop_assert!(l > 0.0);
            let shifted = SimilarityMatrix { s: s.s.map(|v| v + c) };
            prop_assert!((infonce(&shifted, &tau).loss - l).abs() < 1e-9);
        }

        #[test]
        fn loss_invariant_to_relabeling(seed in 0u64..1000, n in 2usize..8) {
            let mut rng = Rng::new(seed);
            let s = random_sim(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let mut p = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    p.set(i, j, s.s.at(perm[i], perm[j]));
                }
            }
            let tau = fixed(0.2);
            let a = infonce(&s, &tau).loss;
            let b = infonce(&SimilarityMatrix { s: p }, &tau).loss;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cosine_entries_bounded(seed in 0u64..1000, n in 1usize..6, d in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = Tensor::from_parts(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap();
            let b = Tensor::from_parts(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap();
            let s = cosine_sim_matrix(&a, &b).unwrap();
            prop_assert!(s.s.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        }
    }
}
