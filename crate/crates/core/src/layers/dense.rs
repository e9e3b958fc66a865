//! Fully connected layer. Weights are `[units, n_in]`, one contiguous row
//! per output unit.

use crate::par;

/// `output[b, j] = bias[j] + sum_i input[b, i] * weights[j, i]`
pub fn forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    n_in: usize,
    units: usize,
    batch: usize,
    output: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * n_in);
    debug_assert_eq!(output.len(), batch * units);
    par::for_each_chunk_mut(output, units, |b, out| {
        let row = &input[b * n_in..(b + 1) * n_in];
        for (j, o) in out.iter_mut().enumerate() {
            let wrow = &weights[j * n_in..(j + 1) * n_in];
            let mut sum = bias[j];
            for i in 0..n_in {
                sum += row[i] * wrow[i];
            }
            *o = sum;
        }
    });
}

/// Weight and bias gradients; batch accumulation in ascending sample order
/// per unit.
pub fn backward_params(
    input: &[f64],
    grad_out: &[f64],
    n_in: usize,
    units: usize,
    batch: usize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) {
    par::for_each_chunk_mut(grad_weights, n_in, |j, gw| {
        for v in gw.iter_mut() {
            *v = 0.0;
        }
        for b in 0..batch {
            let g = grad_out[b * units + j];
            if g == 0.0 {
                continue;
            }
            let row = &input[b * n_in..(b + 1) * n_in];
            for i in 0..n_in {
                gw[i] += g * row[i];
            }
        }
    });
    par::for_each_chunk_mut(grad_bias, 1, |j, gb| {
        let mut sum = 0.0;
        for b in 0..batch {
            sum += grad_out[b * units + j];
        }
        gb[0] = sum;
    });
}

/// `grad_in[b, i] = sum_j grad_out[b, j] * weights[j, i]`
pub fn backward_input(
    grad_out: &[f64],
    weights: &[f64],
    n_in: usize,
    units: usize,
    batch: usize,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), batch * n_in);
    par::for_each_chunk_mut(grad_in, n_in, |b, gin| {
        for v in gin.iter_mut() {
            *v = 0.0;
        }
        for j in 0..units {
            let g = grad_out[b * units + j];
            if g == 0.0 {
                continue;
            }
            let wrow = &weights[j * n_in..(j + 1) * n_in];
            for i in 0..n_in {
                gin[i] += g * wrow[i];
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_hand_example() {
        // 2 inputs -> 2 units, batch 1.
        let input = [1.0, 2.0];
        let weights = [1.0, 0.5, -1.0, 2.0]; // row 0: [1, 0.5], row 1: [-1, 2]
        let bias = [0.1, 0.2];
        let mut out = [0.0; 2];
        forward(&input, &weights, &bias, 2, 2, 1, &mut out);
        assert!((out[0] - 2.1).abs() < 1e-15);
        assert!((out[1] - 3.2).abs() < 1e-15);
    }

    #[test]
    fn grads_hand_example() {
        let input = [1.0, 2.0];
        let grad_out = [3.0, -1.0];
        let mut gw = [0.0; 4];
        let mut gb = [0.0; 2];
        backward_params(&input, &grad_out, 2, 2, 1, &mut gw, &mut gb);
        assert_eq!(gw, [3.0, 6.0, -1.0, -2.0]);
        assert_eq!(gb, [3.0, -1.0]);

        let weights = [1.0, 0.5, -1.0, 2.0];
        let mut gin = [0.0; 2];
        backward_input(&grad_out, &weights, 2, 2, 1, &mut gin);
        // gin[0] = 3*1 + (-1)*(-1) = 4 ; gin[1] = 3*0.5 + (-1)*2 = -0.5
        assert_eq!(gin, [4.0, -0.5]);
    }
}
