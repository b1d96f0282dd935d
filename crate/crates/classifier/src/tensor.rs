//! Dense NCHW tensors of `f64` and the matrix-product kernel behind the layers.

/// Four-dimensional `(batch, channels, height, width)` tensor, row-major.
/// Feature vectors use `height = width = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Concatenates `(N, A, 1, 1)` and `(N, B, 1, 1)` along channels.
    pub fn concat_features(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.batch(), b.batch());
        let (fa, fb) = (a.item_len(), b.item_len());
        let mut out = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.batch() {
            out.extend_from_slice(a.item(n));
            out.extend_from_slice(b.item(n));
        }
        Tensor::from_vec([a.batch(), fa + fb, 1, 1], out)
    }

    /// Inverse of [`Tensor::concat_features`]: splits after `first` channels.
    pub fn split_features(&self, first: usize) -> (Tensor, Tensor) {
        let f = self.item_len();
        let second = f - first;
        let mut a = Vec::with_capacity(self.batch() * first);
        let mut b = Vec::with_capacity(self.batch() * second);
        for n in 0..self.batch() {
            let item = self.item(n);
            a.extend_from_slice(&item[..first]);
            b.extend_from_slice(&item[first..]);
        }
        (
            Tensor::from_vec([self.batch(), first, 1, 1], a),
            Tensor::from_vec([self.batch(), second, 1, 1], b),
        )
    }
}

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major `(r, cols)` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a * b + beta * c` with `a: (m, k)`, `b: (k, n)`, `c: (m, n)` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above keep every strided access of a, b and c in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product_and_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), 0.0, &mut c);
        let expected = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as (k, m)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, MatRef::transposed(&at, m), MatRef::rows(&b, n), 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_concat_round_trip() {
        let a = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 1, 1, 1], vec![5.0, 6.0]);
        let c = Tensor::concat_features(&a, &b);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (a2, b2) = c.split_features(2);
        assert_eq!((a2, b2), (a, b));
    }
}
