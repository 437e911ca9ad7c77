//! Central finite-difference check of analytic gradients.

use super::{KernelError, Tensor};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// A deterministic scalar function of a parameter list.
pub trait LossFunction {
    fn loss(&self, params: &[Tensor]) -> Result<f64, KernelError>;

    /// Analytic gradient, one buffer per parameter.
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>, KernelError>;
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Element with the largest relative error.
    pub worst_element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_relative_error < self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| t.max_relative_error >= self.tolerance)
    }
}

/// Compares `f.gradient` with `(f(x+h) - f(x-h)) / 2h` for every element of
/// every parameter tensor.
pub fn finite_diff_check<F: LossFunction + ?Sized>(
    f: &F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, KernelError> {
    let analytic = f.gradient(params)?;
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            index,
            shape: params[index].shape().to_vec(),
            max_relative_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for j in 0..params[index].len() {
            let orig = work[index].data()[j];
            work[index].data_mut()[j] = orig + h;
            let plus = f.loss(&work)?;
            work[index].data_mut()[j] = orig - h;
            let minus = f.loss(&work)?;
            work[index].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(grad[j], numeric);
            check.max_abs_error = check.max_abs_error.max((grad[j] - numeric).abs());
            if rel > check.max_relative_error {
                check.max_relative_error = rel;
                check.worst_element = j;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        tensors,
    })
}
