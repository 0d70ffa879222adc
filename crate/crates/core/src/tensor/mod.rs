//! Dense float32 tensors with reverse-mode automatic differentiation.
//!
//! The graph is an append-only arena: every operation records its inputs
//! and computes its output eagerly, so node indices are already in
//! topological order and `backward` is a single reverse sweep. Cycles are
//! unrepresentable by construction. All reductions accumulate in a fixed
//! sequential row-major order, which makes gradients bit-deterministic
//! for identical graphs and inputs.

mod check;
mod graph;
mod ops;

pub use check::finite_diff_check;
pub use graph::{Graph, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("non-finite value detected in {op}")]
    NonFinite { op: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major float32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the data; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a matrix (or 1 for a vector/scalar).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix (or the length for a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Fails if any data (or gradient) entry is NaN or infinite.
    pub fn validate_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: format!("{ctx} (data)") });
        }
        if let Some(g) = &self.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: format!("{ctx} (grad)") });
            }
        }
        Ok(())
    }

    /// Little-endian byte image of the data, used for freezing checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Row-level trainability mask for a 2-D parameter: after `backward`, rows
/// not listed here have exactly-zero gradient, and optimizers must not
/// touch them.
#[derive(Debug, Clone)]
pub struct GradMask {
    param: String,
    rows: Vec<usize>,
}

impl GradMask {
    /// `rows` must be unique and smaller than `num_rows`.
    pub fn new(param: impl Into<String>, mut rows: Vec<usize>, num_rows: usize) -> Result<Self> {
        rows.sort_unstable();
        for w in rows.windows(2) {
            if w[0] == w[1] {
                return Err(TensorError::Invalid {
                    op: "GradMask::new",
                    msg: format!("duplicate row index {}", w[0]),
                });
            }
        }
        if let Some(&last) = rows.last() {
            if last >= num_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "GradMask::new",
                    index: last,
                    bound: num_rows,
                });
            }
        }
        Ok(GradMask { param: param.into(), rows })
    }

    pub fn param(&self) -> &str {
        &self.param
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn allows(&self, row: usize) -> bool {
        self.rows.binary_search(&row).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn validate_finite_flags_nan_and_inf() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.validate_finite("x").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.validate_finite("x").is_err());
        t.data_mut()[1] = f32::INFINITY;
        assert!(t.validate_finite("x").is_err());
    }

    #[test]
    fn grad_mask_rejects_duplicates_and_out_of_range() {
        assert!(GradMask::new("w", vec![0, 1, 1], 4).is_err());
        assert!(GradMask::new("w", vec![4], 4).is_err());
        let m = GradMask::new("w", vec![3, 1], 4).unwrap();
        assert!(m.allows(1) && m.allows(3) && !m.allows(0));
    }
}
