//! Forward operations and their vector-Jacobian products.
//!
//! Every `*_vjp` takes the forward inputs plus an upstream gradient with the
//! shape of the forward output, and returns gradients shaped like the inputs.

use crate::error::{Error, Result};
use crate::numkit::tensor::{dot, Tensor};
use crate::scalar::Scalar;

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        })
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    for t in 0..a.rows() {
        let ar = a.row(t);
        let br = b.row(t);
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Returns `(grad_a, grad_b) = (G·bᵀ, aᵀ·G)`.
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

/// `y = x·w + b`, with `b` broadcast over rows.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 1 || b.len() != w.cols() {
        return Err(Error::Shape {
            op: "affine",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut y = matmul(x, w)?;
    let q = b.len();
    for row in y.data_mut().chunks_mut(q) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn affine_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gx, gw) = matmul_vjp(x, w, upstream)?;
    let q = upstream.cols();
    let mut gb = vec![T::zero(); q];
    for row in upstream.data().chunks(q) {
        for (g, &u) in gb.iter_mut().zip(row) {
            *g += u;
        }
    }
    Ok((gx, gw, Tensor::vector(gb)))
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

/// d/dx of the exact-erf GELU: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-half * x * x).exp() / (T::lit(2.0) * T::PI()).sqrt();
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_vjp<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data).expect("same shape")
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut out = x.clone();
    if x.cols() == 0 {
        return out;
    }
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let denom = dot(row, row).sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Rowwise `(I − yyᵀ)·g / ‖x‖` when `‖x‖ ≥ eps`, else `g / eps`.
pub fn l2_normalize_rows_vjp<T: Scalar>(x: &Tensor<T>, eps: T, upstream: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    if x.cols() == 0 {
        return out;
    }
    for i in 0..x.rows() {
        let xr = x.row(i);
        let g = upstream.row(i);
        let norm = dot(xr, xr).sqrt();
        let o = out.row_mut(i);
        if norm >= eps {
            let yg = dot(xr, g) / norm;
            for ((ov, &xv), &gv) in o.iter_mut().zip(xr).zip(g) {
                *ov = (gv - xv / norm * yg) / norm;
            }
        } else {
            for (ov, &gv) in o.iter_mut().zip(g) {
                *ov = gv / eps;
            }
        }
    }
    out
}

/// Columnwise maximum over rows. `argmax[i]` is the smallest row attaining
/// the maximum of column `i`.
pub fn max_reduce_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    require_matrix("max_reduce_rows", x)?;
    if x.rows() == 0 {
        return Err(Error::Empty {
            op: "max_reduce_rows",
        });
    }
    let c = x.cols();
    let mut values = x.row(0).to_vec();
    let mut argmax = vec![0usize; c];
    for r in 1..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            if v > values[j] {
                values[j] = v;
                argmax[j] = r;
            }
        }
    }
    Ok((Tensor::vector(values), argmax))
}

/// Routes each column's upstream gradient to its argmax row only.
pub fn max_reduce_rows_vjp<T: Scalar>(
    rows: usize,
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Tensor<T> {
    let c = argmax.len();
    let mut out = Tensor::zeros(&[rows, c]);
    for (j, &r) in argmax.iter().enumerate() {
        out.set(r, j, upstream.data()[j]);
    }
    out
}

/// `Σ_i w[i]·m[i]`.
pub fn weighted_sum_rows<T: Scalar>(w: &[T], m: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("weighted_sum_rows", m)?;
    if w.len() != m.rows() {
        return Err(Error::Shape {
            op: "weighted_sum_rows",
            left: vec![w.len()],
            right: m.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m.cols()];
    for (i, &wi) in w.iter().enumerate() {
        if wi == T::zero() {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += wi * v;
        }
    }
    Ok(Tensor::vector(out))
}

/// Returns `(grad_w, grad_m)` with `grad_w[i] = <g, m[i]>`, `grad_m[i] = w[i]·g`.
pub fn weighted_sum_rows_vjp<T: Scalar>(
    w: &[T],
    m: &Tensor<T>,
    upstream: &[T],
) -> (Vec<T>, Tensor<T>) {
    let gw = (0..m.rows()).map(|i| dot(upstream, m.row(i))).collect();
    let mut gm = Tensor::zeros(m.shape());
    for (i, &wi) in w.iter().enumerate() {
        for (o, &g) in gm.row_mut(i).iter_mut().zip(upstream) {
            *o = wi * g;
        }
    }
    (gw, gm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_parts(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selection() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let c = matmul(&t(&[&[1.0, 0.0]]), &t(&[&[2.0], &[5.0]])).unwrap();
        assert_eq!(c.data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), naive_matmul(&a, &b));
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn affine_cases() {
        let w = t(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let y = affine(&Tensor::zeros(&[3, 2]), &w, &b).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[1.0, 2.0]);
        }
        let x = t(&[&[1.5, -2.0]]);
        let y = affine(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);

        // 2×3 input, 3×2 weights, hand-expanded.
        let x = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 2.0]]);
        let w = t(&[&[1.0, 0.0], &[0.5, -1.0], &[2.0, 1.0]]);
        let b = Tensor::vector(vec![0.1, -0.2]);
        let y = affine(&x, &w, &b).unwrap();
        let expected = [
            1.0 * 1.0 + 2.0 * 0.5 + 3.0 * 2.0 + 0.1,
            1.0 * 0.0 + 2.0 * -1.0 + 3.0 * 1.0 - 0.2,
            -1.0 * 1.0 + 0.0 * 0.5 + 2.0 * 2.0 + 0.1,
            -1.0 * 0.0 + 0.0 * -1.0 + 2.0 * 1.0 - 0.2,
        ];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(affine(&x, &w, &Tensor::vector(vec![0.0; 3])).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-12);
        // 0.5·(1 + erf(1/√2)) = Φ(1) = 0.8413447460685429 (high-precision erf).
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn normalize_cases() {
        let y = l2_normalize_rows(&t(&[&[3.0, 4.0]]), 1e-8);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let unit = t(&[&[0.6, 0.8]]);
        assert_eq!(l2_normalize_rows(&unit, 1e-8), unit);
        let zero = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(l2_normalize_rows(&zero, 1e-8), zero);
    }

    #[test]
    fn max_reduce_cases() {
        let (v, a) = max_reduce_rows(&t(&[&[1.0, 5.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(v.data(), &[3.0, 5.0]);
        assert_eq!(a, vec![1, 0]);
        let (v, a) = max_reduce_rows(&t(&[&[1.0, -2.0]])).unwrap();
        assert_eq!(v.data(), &[1.0, -2.0]);
        assert_eq!(a, vec![0, 0]);
        let (v, a) = max_reduce_rows(&t(&[&[1.0, -2.0], &[1.0, -2.0]])).unwrap();
        assert_eq!(v.data(), &[1.0, -2.0]);
        assert_eq!(a, vec![0, 0]);
        assert!(matches!(
            max_reduce_rows(&Tensor::<f64>::zeros(&[0, 3])),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn weighted_sum_cases() {
        let m = t(&[&[1.0, 2.0], &[3.0, -4.0], &[5.0, 0.0]]);
        assert_eq!(
            weighted_sum_rows(&[0.0, 1.0, 0.0], &m).unwrap().data(),
            m.row(1)
        );
        let mean = weighted_sum_rows(&[1.0 / 3.0; 3], &m).unwrap();
        assert!((mean.data()[0] - 3.0).abs() < 1e-15);
        assert!((mean.data()[1] + 2.0 / 3.0).abs() < 1e-15);
        let c = weighted_sum_rows(&[0.6, 0.4], &Tensor::identity(2)).unwrap();
        assert_eq!(c.data(), &[0.6, 0.4]);
        assert!(weighted_sum_rows(&[1.0], &m).is_err());
    }
}
