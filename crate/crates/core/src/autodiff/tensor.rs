use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
///
/// A tensor never holds NaN or infinity; constructors reject them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("tensor entry {pos} ({})", values[pos]),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Builds a `rows.len() x width` matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != width {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {width}", r.len()),
                ));
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape(
                "set_grad",
                format!(
                    "grad has {} entries, tensor has {}",
                    grad.len(),
                    self.values.len()
                ),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: what.to_string(),
            })
        }
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.cols() != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("incompatible part {:?}", p.shape),
                ));
            }
            rows += p.rows();
            values.extend_from_slice(&p.values);
        }
        Tensor::new(vec![rows, cols], values)
    }

    /// Copies rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            values: self.values[start * c..end * c].to_vec(),
            grad: None,
        }
    }
}

/// Euclidean norm of all gradients of `tensors`, taken as one flat vector.
///
/// Every tensor must carry a gradient.
pub fn grad_l2_norm(tensors: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, t) in tensors.iter().enumerate() {
        let g = t
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {i} has no gradient")))?;
        sum += g.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(sum.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(g: Vec<f64>) -> Tensor {
        let mut t = Tensor::zeros(vec![g.len()]);
        t.set_grad(g).unwrap();
        t
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(grad_l2_norm(&[with_grad(vec![3.0, 4.0])]).unwrap(), 5.0);
        assert_eq!(
            grad_l2_norm(&[with_grad(vec![0.0, 0.0]), with_grad(vec![0.0])]).unwrap(),
            0.0
        );
        let ts = [
            with_grad(vec![1.0]),
            with_grad(vec![2.0]),
            with_grad(vec![2.0]),
        ];
        assert_eq!(grad_l2_norm(&ts).unwrap(), 3.0);
    }

    #[test]
    fn norm_requires_grads() {
        let ts = [with_grad(vec![1.0]), Tensor::zeros(vec![1])];
        assert!(matches!(grad_l2_norm(&ts), Err(Error::Contract(_))));
    }
}
