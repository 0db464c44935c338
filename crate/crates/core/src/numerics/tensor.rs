//! Dense row-major matrices with cheap clones.
//!
//! Everything in the model is at most two-dimensional; row vectors are
//! `1 x d` and scalars are `1 x 1`. Data sits behind an `Arc` so tape nodes
//! and parameter stores can share buffers without copying.

use std::sync::Arc;

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows * cols");
        Self { rows, cols, data: Arc::new(data) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![S::ZERO; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single element of a `1 x 1` tensor.
    pub fn item(&self) -> S {
        assert_eq!((self.rows, self.cols), (1, 1), "item() requires a 1x1 tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_access() {
        let t = Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f32);
        assert_eq!(t.shape(), (2, 3));
        assert_eq!(t.get(1, 2), 5.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    #[should_panic(expected = "data length")]
    fn length_shape_mismatch_panics() {
        let _ = Tensor::from_vec(2, 2, vec![1.0f32; 3]);
    }

    #[test]
    fn clones_share_until_written() {
        let mut a = Tensor::filled(2, 2, 1.0f64);
        let b = a.clone();
        a.data_mut()[0] = 5.0;
        assert_eq!(b.get(0, 0), 1.0);
        assert_eq!(a.get(0, 0), 5.0);
    }

    #[test]
    fn finite_check_catches_nan() {
        let t = Tensor::from_vec(1, 2, vec![1.0f32, f32::NAN]);
        assert!(!t.is_all_finite());
    }
}
