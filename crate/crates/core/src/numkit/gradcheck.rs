//! Central finite-difference checks of analytic vector-Jacobian products.

use serde::Serialize;

use crate::numkit::tensor::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// A map `R^n → R^m` with an analytic VJP.
pub trait DifferentiableMap<T: Scalar> {
    fn name(&self) -> String;

    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;

    fn vjp(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T>;

    /// Discrete state that selects the active smooth piece (argmax indices,
    /// sparsemax supports). Points where it changes under a finite-difference
    /// step are not valid check points.
    fn regime(&self, _x: &Tensor<T>) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub point_count: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Combines reports for the same op evaluated at several points.
    pub fn merge(op_name: String, tolerance: f64, reports: &[GradCheckReport]) -> Self {
        let max_rel_error = reports
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        let point_count = reports.iter().map(|r| r.point_count).sum();
        Self {
            op_name,
            max_rel_error,
            point_count,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

/// Finite-difference step for coordinate value `x`: `∛ε · (1 + |x|)`.
pub fn fd_step<T: Scalar>(x: T) -> T {
    T::epsilon().cbrt() * (T::one() + x.abs())
}

/// Relative error with a unit floor on the denominator, so that near-zero
/// gradient entries are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// True when `op.regime` is unchanged by a ±step along every coordinate.
pub fn regime_stable<T: Scalar, M: DifferentiableMap<T> + ?Sized>(op: &M, point: &Tensor<T>) -> bool {
    let base = op.regime(point);
    if base.is_empty() {
        return true;
    }
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        let h = fd_step(x);
        for delta in [h, -h] {
            probe.data_mut()[i] = x + delta;
            if op.regime(&probe) != base {
                return false;
            }
        }
        probe.data_mut()[i] = x;
    }
    true
}

/// Compares `op.vjp(point, u)` with central differences of `<u, op(x)>` for a
/// seeded random upstream `u`.
pub fn finite_diff_check<T: Scalar, M: DifferentiableMap<T> + ?Sized>(
    op: &M,
    point: &Tensor<T>,
    tol: f64,
) -> GradCheckReport {
    let out = op.forward(point);
    let mut rng = Rng::new(0x0067_7261_6463_686b);
    let upstream = Tensor::from_parts(
        out.shape().to_vec(),
        (0..out.len()).map(|_| T::lit(rng.normal())).collect(),
    )
    .expect("shape from forward output");
    let analytic = op.vjp(point, &upstream);
    let mut probe = point.clone();
    let mut max_rel_error = 0.0f64;
    for i in 0..point.len() {
        let x = point.data()[i];
        let h = fd_step(x);
        probe.data_mut()[i] = x + h;
        let plus = op.forward(&probe).dot(&upstream);
        probe.data_mut()[i] = x - h;
        let minus = op.forward(&probe).dot(&upstream);
        probe.data_mut()[i] = x;
        let numeric = ((plus - minus) / (h + h)).to_f64_lossy();
        let err = rel_error(analytic.data()[i].to_f64_lossy(), numeric);
        if !err.is_finite() {
            max_rel_error = f64::INFINITY;
        } else {
            max_rel_error = max_rel_error.max(err);
        }
    }
    GradCheckReport {
        op_name: op.name(),
        max_rel_error,
        point_count: 1,
        tolerance: tol,
        passed: max_rel_error <= tol,
    }
}

/// Adapts a pair of closures into a [`DifferentiableMap`].
pub struct FnMap<F, V> {
    pub name: String,
    pub forward: F,
    pub vjp: V,
}

impl<T, F, V> DifferentiableMap<T> for FnMap<F, V>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Tensor<T>,
    V: Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        (self.forward)(x)
    }

    fn vjp(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
        (self.vjp)(x, upstream)
    }
}
