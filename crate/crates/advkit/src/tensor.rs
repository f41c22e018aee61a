use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// The gradient slot is populated by [`crate::tape::Tape::backward`] for
/// tensors registered with `requires_grad`, and consumed by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", format!("zero dimension in {shape:?}")));
        }
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} expects {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Row vector `[1, n]` — convenient for single-sample batches.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { shape: vec![1, n], data: values, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension, i.e. the batch size of a `[B, ...]` tensor.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        let mut out = self.clone();
        out.shape = shape;
        Ok(out)
    }

    /// Stack equally shaped tensors along a new leading batch axis.
    pub fn stack(rows: &[Tensor]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("Tensor::stack", "empty input".to_string()))?;
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(rows.len() * first.numel());
        for (i, r) in rows.iter().enumerate() {
            if r.shape != first.shape {
                return Err(Error::shape(
                    "Tensor::stack",
                    format!("row {i} has shape {:?}, expected {:?}", r.shape, first.shape),
                ));
            }
            data.extend_from_slice(&r.data);
        }
        Tensor::new(shape, data)
    }

    /// Row `b` of a `[B, ...]` tensor as its own tensor.
    pub fn row_at(&self, b: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let data = self.data[b * stride..(b + 1) * stride].to_vec();
        Tensor { shape: self.shape[1..].to_vec(), data, requires_grad: false, grad: None }
    }

    /// Index of the largest entry; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Per-row argmax of a `[B, K]` tensor, lowest-index tie-break.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = *self.shape.last().unwrap();
        self.data.chunks(k).map(|row| argmax_slice(row)).collect()
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Lowest-index argmax of a slice.
pub fn argmax_slice(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a flat `[rows, k]` buffer, written into a new vector.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(t.argmax(), 1);
        let rows = Tensor::new(vec![2, 2], vec![5.0, 5.0, 0.0, 1.0]).unwrap();
        assert_eq!(rows.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 3);
        for row in p.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_and_row_at_round_trip() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.row_at(0).data(), a.data());
    }
}
