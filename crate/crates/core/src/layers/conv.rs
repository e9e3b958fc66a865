//! 3x3 convolution, stride 1, same padding, NHWC layout.
//!
//! Weights are laid out `[out_channels, 3, 3, in_channels]` so the innermost
//! product runs over contiguous input channels.

use crate::par;

pub const KERNEL: usize = 3;
const PAD: isize = 1;

/// Spatial dimensions of one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvDims {
    pub fn weight_len(&self) -> usize {
        self.c_out * KERNEL * KERNEL * self.c_in
    }
    pub fn in_len(&self) -> usize {
        self.h * self.w * self.c_in
    }
    pub fn out_len(&self) -> usize {
        self.h * self.w * self.c_out
    }
}

/// Forward pass over a batch; `output` must hold `batch * dims.out_len()`.
pub fn forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    dims: ConvDims,
    batch: usize,
    output: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * dims.in_len());
    debug_assert_eq!(output.len(), batch * dims.out_len());
    let (h, w, c_in, c_out) = (dims.h, dims.w, dims.c_in, dims.c_out);
    par::for_each_chunk_mut(output, dims.out_len(), |b, out| {
        let sample = &input[b * dims.in_len()..(b + 1) * dims.in_len()];
        for y in 0..h {
            for x in 0..w {
                let out_base = (y * w + x) * c_out;
                for oc in 0..c_out {
                    let mut sum = bias[oc];
                    for ky in 0..KERNEL {
                        let iy = y as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = x as isize + kx as isize - PAD;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_off = ((iy as usize) * w + ix as usize) * c_in;
                            let w_off = ((oc * KERNEL + ky) * KERNEL + kx) * c_in;
                            for ic in 0..c_in {
                                sum += sample[in_off + ic] * weights[w_off + ic];
                            }
                        }
                    }
                    out[out_base + oc] = sum;
                }
            }
        }
    });
}

/// Gradients w.r.t. weights and bias. Accumulation over the batch runs in
/// ascending sample order per output channel.
pub fn backward_params(
    input: &[f64],
    grad_out: &[f64],
    dims: ConvDims,
    batch: usize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (h, w, c_in, c_out) = (dims.h, dims.w, dims.c_in, dims.c_out);
    let per_oc = KERNEL * KERNEL * c_in;
    par::for_each_chunk_mut(grad_weights, per_oc, |oc, gw| {
        for v in gw.iter_mut() {
            *v = 0.0;
        }
        for b in 0..batch {
            let sample = &input[b * dims.in_len()..(b + 1) * dims.in_len()];
            let gout = &grad_out[b * dims.out_len()..(b + 1) * dims.out_len()];
            for y in 0..h {
                for x in 0..w {
                    let g = gout[(y * w + x) * c_out + oc];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..KERNEL {
                        let iy = y as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = x as isize + kx as isize - PAD;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_off = ((iy as usize) * w + ix as usize) * c_in;
                            let w_off = (ky * KERNEL + kx) * c_in;
                            for ic in 0..c_in {
                                gw[w_off + ic] += g * sample[in_off + ic];
                            }
                        }
                    }
                }
            }
        }
    });
    par::for_each_chunk_mut(grad_bias, 1, |oc, gb| {
        let mut sum = 0.0;
        for b in 0..batch {
            let gout = &grad_out[b * dims.out_len()..(b + 1) * dims.out_len()];
            for y in 0..h {
                for x in 0..w {
                    sum += gout[(y * w + x) * c_out + oc];
                }
            }
        }
        gb[0] = sum;
    });
}

/// Gradient w.r.t. the input (full correlation with flipped kernel).
pub fn backward_input(
    grad_out: &[f64],
    weights: &[f64],
    dims: ConvDims,
    batch: usize,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), batch * dims.in_len());
    let (h, w, c_in, c_out) = (dims.h, dims.w, dims.c_in, dims.c_out);
    par::for_each_chunk_mut(grad_in, dims.in_len(), |b, gin| {
        for v in gin.iter_mut() {
            *v = 0.0;
        }
        let gout = &grad_out[b * dims.out_len()..(b + 1) * dims.out_len()];
        for y in 0..h {
            for x in 0..w {
                let g_base = (y * w + x) * c_out;
                for ky in 0..KERNEL {
                    let iy = y as isize + ky as isize - PAD;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = x as isize + kx as isize - PAD;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = ((iy as usize) * w + ix as usize) * c_in;
                        for oc in 0..c_out {
                            let g = gout[g_base + oc];
                            if g == 0.0 {
                                continue;
                            }
                            let w_off = ((oc * KERNEL + ky) * KERNEL + kx) * c_in;
                            for ic in 0..c_in {
                                gin[in_off + ic] += g * weights[w_off + ic];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    // 1x1 image, 1 channel: same-padded 3x3 conv reduces to center tap.
    #[test]
    fn single_pixel_uses_center_weight() {
        let dims = ConvDims {
            h: 1,
            w: 1,
            c_in: 1,
            c_out: 1,
        };
        let input = [2.0];
        let mut weights = vec![0.0; 9];
        weights[4] = 3.0; // center (ky=1, kx=1)
        let bias = [0.5];
        let mut out = [0.0];
        forward(&input, &weights, &bias, dims, 1, &mut out);
        assert_eq!(out[0], 6.5);
    }

    #[test]
    fn identity_kernel_preserves_interior() {
        let dims = ConvDims {
            h: 3,
            w: 3,
            c_in: 1,
            c_out: 1,
        };
        let input: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut weights = vec![0.0; 9];
        weights[4] = 1.0;
        let bias = [0.0];
        let mut out = vec![0.0; 9];
        forward(&input, &weights, &bias, dims, 1, &mut out);
        assert_eq!(out, input);
    }

    // Hand-check a 2x2 average-style kernel including the padded border.
    #[test]
    fn padding_contributes_zeros() {
        let dims = ConvDims {
            h: 2,
            w: 2,
            c_in: 1,
            c_out: 1,
        };
        let input = [1.0, 2.0, 3.0, 4.0];
        let weights = vec![1.0; 9]; // sum of the 3x3 neighborhood
        let bias = [0.0];
        let mut out = vec![0.0; 4];
        forward(&input, &weights, &bias, dims, 1, &mut out);
        // Every output sees all four pixels (rest is zero padding).
        assert_eq!(out, vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn weight_grad_matches_hand_computation() {
        // 1x1 input: dL/dw_center = g * x, dL/db = g, all other taps see
        // only padding.
        let dims = ConvDims {
            h: 1,
            w: 1,
            c_in: 1,
            c_out: 1,
        };
        let input = [2.0];
        let grad_out = [5.0];
        let mut gw = vec![0.0; 9];
        let mut gb = vec![0.0; 1];
        backward_params(&input, &grad_out, dims, 1, &mut gw, &mut gb);
        assert_eq!(gw[4], 10.0);
        assert_eq!(gw.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(gb[0], 5.0);
    }

    #[test]
    fn input_grad_matches_hand_computation() {
        let dims = ConvDims {
            h: 1,
            w: 1,
            c_in: 1,
            c_out: 1,
        };
        let mut weights = vec![0.0; 9];
        weights[4] = 3.0;
        let grad_out = [5.0];
        let mut gin = vec![0.0; 1];
        backward_input(&grad_out, &weights, dims, 1, &mut gin);
        assert_eq!(gin[0], 15.0);
    }
}
