//! Per-channel batch normalization on NHWC activations.
//!
//! Train mode standardizes with batch statistics (population variance,
//! epsilon inside the square root) and reports the batch mean/variance so
//! the caller can fold them into the moving averages. Eval mode uses the
//! stored moving statistics. Statistics are reduced per channel with a fixed
//! accumulation order; the elementwise rescale parallelizes over rows.

use crate::par;

pub const EPS: f64 = 1e-5;

/// Per-channel quantities saved by a train-mode forward for backward and
/// for the moving-average update.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Train-mode forward over `rows = batch * h * w` positions.
pub fn forward_train(
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    channels: usize,
    output: &mut [f64],
) -> BatchStats {
    let rows = input.len() / channels;
    let per_channel = par::map_collect(channels, |c| {
        let mut sum = 0.0;
        for r in 0..rows {
            sum += input[r * channels + c];
        }
        let mean = sum / rows as f64;
        let mut sq = 0.0;
        for r in 0..rows {
            let d = input[r * channels + c] - mean;
            sq += d * d;
        }
        let var = sq / rows as f64;
        (mean, var, 1.0 / (var + EPS).sqrt())
    });
    let mut stats = BatchStats {
        mean: Vec::with_capacity(channels),
        var: Vec::with_capacity(channels),
        inv_std: Vec::with_capacity(channels),
    };
    for (m, v, i) in per_channel {
        stats.mean.push(m);
        stats.var.push(v);
        stats.inv_std.push(i);
    }
    let (mean, inv_std) = (&stats.mean, &stats.inv_std);
    par::for_each_chunk_mut(output, channels, |r, row| {
        let src = &input[r * channels..(r + 1) * channels];
        for c in 0..channels {
            row[c] = (src[c] - mean[c]) * inv_std[c] * gamma[c] + beta[c];
        }
    });
    stats
}

/// Eval-mode forward with moving statistics.
pub fn forward_eval(
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    moving_mean: &[f64],
    moving_var: &[f64],
    channels: usize,
    output: &mut [f64],
) {
    let inv_std: Vec<f64> = moving_var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
    par::for_each_chunk_mut(output, channels, |r, row| {
        let src = &input[r * channels..(r + 1) * channels];
        for c in 0..channels {
            row[c] = (src[c] - moving_mean[c]) * inv_std[c] * gamma[c] + beta[c];
        }
    });
}

/// Backward through the batch-statistics path.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    input: &[f64],
    grad_out: &[f64],
    gamma: &[f64],
    stats: &BatchStats,
    channels: usize,
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let rows = input.len() / channels;
    let n = rows as f64;
    let sums = par::map_collect(channels, |c| {
        let mean = stats.mean[c];
        let inv_std = stats.inv_std[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for r in 0..rows {
            let i = r * channels + c;
            let xhat = (input[i] - mean) * inv_std;
            sum_dy += grad_out[i];
            sum_dy_xhat += grad_out[i] * xhat;
        }
        (sum_dy, sum_dy_xhat)
    });
    for (c, &(sum_dy, sum_dy_xhat)) in sums.iter().enumerate() {
        grad_beta[c] = sum_dy;
        grad_gamma[c] = sum_dy_xhat;
    }
    par::for_each_chunk_mut(grad_in, channels, |r, row| {
        let src = &input[r * channels..(r + 1) * channels];
        let g_row = &grad_out[r * channels..(r + 1) * channels];
        for c in 0..channels {
            let (sum_dy, sum_dy_xhat) = sums[c];
            let xhat = (src[c] - stats.mean[c]) * stats.inv_std[c];
            // Fused form: dx = g*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
            row[c] = gamma[c] * stats.inv_std[c] / n * (n * g_row[c] - sum_dy - xhat * sum_dy_xhat);
        }
    });
}

/// Fold batch statistics into moving averages:
/// `m <- momentum * m + (1 - momentum) * batch`.
pub fn update_moving(
    moving_mean: &mut [f64],
    moving_var: &mut [f64],
    stats: &BatchStats,
    momentum: f64,
) {
    for (m, &b) in moving_mean.iter_mut().zip(stats.mean.iter()) {
        *m = momentum * *m + (1.0 - momentum) * b;
    }
    for (v, &b) in moving_var.iter_mut().zip(stats.var.iter()) {
        *v = momentum * *v + (1.0 - momentum) * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_standardized_then_affine() {
        // One channel, four positions: mean 2.5, var 1.25.
        let input = [1.0, 2.0, 3.0, 4.0];
        let gamma = [2.0];
        let beta = [10.0];
        let mut out = [0.0; 4];
        let st = forward_train(&input, &gamma, &beta, 1, &mut out);
        assert!((st.mean[0] - 2.5).abs() < 1e-15);
        assert!((st.var[0] - 1.25).abs() < 1e-15);
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        assert!((m - 10.0).abs() < 1e-12, "mean should be beta, got {m}");
        let var: f64 = out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        // std should be |gamma| up to the epsilon in the denominator
        assert!((var.sqrt() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn eval_uses_moving_statistics() {
        let input = [3.0, 5.0];
        let gamma = [1.0];
        let beta = [0.0];
        let mm = [4.0];
        let mv = [4.0];
        let mut out = [0.0; 2];
        forward_eval(&input, &gamma, &beta, &mm, &mv, 1, &mut out);
        let inv = 1.0 / (4.0f64 + EPS).sqrt();
        assert!((out[0] - -inv).abs() < 1e-15);
        assert!((out[1] - inv).abs() < 1e-15);
    }

    #[test]
    fn moving_update_rule() {
        let mut mm = vec![1.0];
        let mut mv = vec![1.0];
        let st = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            inv_std: vec![0.0],
        };
        update_moving(&mut mm, &mut mv, &st, 0.99);
        assert!((mm[0] - (0.99 + 0.01 * 2.0)).abs() < 1e-15);
        assert!((mv[0] - (0.99 + 0.01 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn backward_input_grads_sum_to_zero() {
        // The normalized output is invariant to shifting the whole batch, so
        // per-channel input gradients must sum to ~0.
        let input = [1.0, 2.0, 4.0, 8.0];
        let gamma = [1.5];
        let beta = [0.0];
        let mut out = [0.0; 4];
        let st = forward_train(&input, &gamma, &beta, 1, &mut out);
        let grad_out = [0.3, -0.7, 1.1, 0.2];
        let mut gin = [0.0; 4];
        let mut gg = [0.0; 1];
        let mut gb = [0.0; 1];
        backward(
            &input, &grad_out, &gamma, &st, 1, &mut gin, &mut gg, &mut gb,
        );
        let s: f64 = gin.iter().sum();
        assert!(s.abs() < 1e-12, "shift invariance violated: {s}");
        assert!((gb[0] - 0.9).abs() < 1e-15);
    }
}
