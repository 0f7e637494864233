use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Scalar, Tensor};

/// Orthogonal initialisation scaled by `gain`.
///
/// The shape is viewed as a matrix `(prod(shape[..-1]), shape[-1])`. A
/// standard-normal matrix is QR-decomposed and the sign of each column of
/// `Q` is matched to the diagonal of `R`, so the result has orthonormal
/// columns when it is tall and orthonormal rows when it is wide.
pub fn orthogonal_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    assert!(!shape.is_empty(), "orthogonal_init needs at least one dimension");
    let cols = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    let (tall_rows, tall_cols) = if rows >= cols { (rows, cols) } else { (cols, rows) };

    let a = DMatrix::<f64>::from_fn(tall_rows, tall_cols, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };

    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::cast(gain * q[(i, j)]));
        }
    }
    Tensor::new(shape.to_vec(), data)
}
