//! Dense row-major `f64` tensors and the numeric kernels used by both the
//! differentiable tape and the tape-free inference path.
//!
//! Broadcasting is deliberately limited to bias addition over rows; every
//! other shape combination must match exactly.

use crate::error::{FlameError, Result};

/// Dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(FlameError::ShapeMismatch(format!(
                "shape {shape:?} wants {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Row vector (1×n) from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (its last dimension).
    pub fn cols(&self) -> usize {
        match self.shape.last() {
            Some(&c) => c,
            None => 1,
        }
    }

    fn check_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(FlameError::ShapeMismatch(format!(
                "{what} expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FlameError::shapes(what, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul lhs")?;
        let (k2, n) = other.check_2d("matmul rhs")?;
        if k != k2 {
            return Err(FlameError::shapes("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        // matrixmultiply expects raw strides; tensors are row-major.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.check_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Add a bias row (shape `[n]` or `[1, n]`) to every row of a 2-D tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.check_2d("add_bias input")?;
        if bias.len() != n {
            return Err(FlameError::shapes("add_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = self.check_2d("softmax_rows")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Contiguous rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.check_2d("slice_rows")?;
        if start + len > m {
            return Err(FlameError::Range(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        Ok(Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Contiguous columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.check_2d("slice_cols")?;
        if start + len > n {
            return Err(FlameError::Range(format!(
                "slice_cols [{start}, {}) out of {n} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Ok(Tensor {
            shape: vec![m, len],
            data,
        })
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(FlameError::InvalidArgument("concat_rows of nothing".into()));
        }
        let n = parts[0].check_2d("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, nc) = p.check_2d("concat_rows")?;
            if nc != n {
                return Err(FlameError::shapes("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, n],
            data,
        })
    }

    /// Concatenate 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(FlameError::InvalidArgument("concat_cols of nothing".into()));
        }
        let m = parts[0].check_2d("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (mr, nc) = p.check_2d("concat_cols")?;
            if mr != m {
                return Err(FlameError::shapes("concat_cols", &parts[0].shape, &p.shape));
            }
            total += nc;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let n = p.shape[1];
                data.extend_from_slice(&p.data[i * n..(i + 1) * n]);
            }
        }
        Ok(Tensor {
            shape: vec![m, total],
            data,
        })
    }

    /// Embed a 2-D tensor into a wider zero matrix at column `offset`.
    pub fn pad_cols(&self, total: usize, offset: usize) -> Result<Tensor> {
        let (m, n) = self.check_2d("pad_cols")?;
        if offset + n > total {
            return Err(FlameError::Range(format!(
                "pad_cols: {n} cols at offset {offset} exceed {total}"
            )));
        }
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            out.data[i * total + offset..i * total + offset + n]
                .copy_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(out)
    }

    /// Sum of every row, producing a `[1, n]` tensor.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.check_2d("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![1, n],
            data: out,
        })
    }

    /// Row-wise layer normalization with per-column affine parameters.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (_, n) = self.check_2d("layer_norm_rows")?;
        if gamma.len() != n || beta.len() != n {
            return Err(FlameError::shapes("layer_norm", &self.shape, &gamma.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gamma.data[j] + beta.data[j];
            }
        }
        Ok(out)
    }

    /// Sum of elementwise standard-normal log densities.
    pub fn gaussian_logpdf_sum(&self) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
        self.data.iter().map(|&v| -HALF_LN_2PI - 0.5 * v * v).sum()
    }
}

/// GELU with the tanh approximation; smooth everywhere, which keeps
/// finite-difference gradient checks clean.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let id = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = id.matmul(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_on_equal_row() {
        let x = Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
        let s = x.softmax_rows().unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_large_inputs() {
        let x = Tensor::from_vec(&[2, 3], vec![1e3, -1e3, 500.0, 0.0, 1e3, 999.0]).unwrap();
        let s = x.softmax_rows().unwrap();
        assert!(s.all_finite());
        for row in s.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let top = x.slice_rows(0, 1).unwrap();
        let rest = x.slice_rows(1, 2).unwrap();
        let back = Tensor::concat_rows(&[&top, &rest]).unwrap();
        assert_eq!(back, x);

        let left = x.slice_cols(0, 1).unwrap();
        let right = x.slice_cols(1, 1).unwrap();
        let back = Tensor::concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn pad_cols_places_block() {
        let x = Tensor::from_vec(&[1, 2], vec![7.0, 8.0]).unwrap();
        let p = x.pad_cols(5, 2).unwrap();
        assert_eq!(p.data(), &[0., 0., 7., 8., 0.]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::from_vec(&[1, 4], vec![1., 2., 3., 4.]).unwrap();
        let g = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm_rows(&g, &b, 1e-9).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softplus_stable_for_large_magnitudes() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
    }
}
