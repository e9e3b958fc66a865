//! Numeric kernels for the layer zoo.
//!
//! All kernels work on flat `f64` slices in NHWC layout with explicit
//! dimensions. Parallel splits only ever go along axes whose per-item work is
//! internally sequential (samples for forward/input-gradient passes, output
//! channels or units for weight-gradient passes), which keeps accumulation
//! order — and therefore every bit of the result — identical between the
//! rayon and sequential builds.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;

use crate::par;

/// ReLU in place.
pub fn relu_inplace(data: &mut [f64]) {
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// ReLU backward: zero the gradient wherever the forward output was <= 0.
pub fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, &y) in grad.iter_mut().zip(output.iter()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    par::for_each_chunk_mut(data, cols, |_, row| {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_masks_negatives() {
        let mut data = vec![-1.0, 0.0, 2.0];
        relu_inplace(&mut data);
        assert_eq!(data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut data = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows(&mut data, 3);
        let s0: f64 = data[..3].iter().sum();
        let s1: f64 = data[3..].iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!((s1 - 1.0).abs() < 1e-12);
        assert!(data[2] > data[1] && data[1] > data[0]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut data = vec![1000.0, 1000.0];
        softmax_rows(&mut data, 2);
        assert!((data[0] - 0.5).abs() < 1e-12);
    }
}
