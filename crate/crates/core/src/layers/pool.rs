//! 2x2 max pooling with stride 2, NHWC layout.
//!
//! Forward records the argmax position (0..3, row-major within the window)
//! so backward can scatter gradients to the winning inputs.

use crate::par;

#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl PoolDims {
    pub fn out_h(&self) -> usize {
        self.h / 2
    }
    pub fn out_w(&self) -> usize {
        self.w / 2
    }
    pub fn in_len(&self) -> usize {
        self.h * self.w * self.c
    }
    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w() * self.c
    }
}

pub fn forward(input: &[f64], dims: PoolDims, batch: usize, output: &mut [f64], argmax: &mut [u8]) {
    debug_assert_eq!(input.len(), batch * dims.in_len());
    let (w, c) = (dims.w, dims.c);
    let (oh, ow) = (dims.out_h(), dims.out_w());
    par::for_each_chunk_pair_mut(
        output,
        dims.out_len(),
        argmax,
        dims.out_len(),
        |b, out, arg| {
            let sample = &input[b * dims.in_len()..(b + 1) * dims.in_len()];
            for py in 0..oh {
                for px in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u8;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let iy = py * 2 + dy;
                                let ix = px * 2 + dx;
                                let v = sample[(iy * w + ix) * c + ch];
                                if v > best {
                                    best = v;
                                    best_idx = (dy * 2 + dx) as u8;
                                }
                            }
                        }
                        let o = (py * ow + px) * c + ch;
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                }
            }
        },
    );
}

pub fn backward(
    grad_out: &[f64],
    argmax: &[u8],
    dims: PoolDims,
    batch: usize,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), batch * dims.in_len());
    let (w, c) = (dims.w, dims.c);
    let (oh, ow) = (dims.out_h(), dims.out_w());
    par::for_each_chunk_mut(grad_in, dims.in_len(), |b, gin| {
        for v in gin.iter_mut() {
            *v = 0.0;
        }
        let gout = &grad_out[b * dims.out_len()..(b + 1) * dims.out_len()];
        let arg = &argmax[b * dims.out_len()..(b + 1) * dims.out_len()];
        for py in 0..oh {
            for px in 0..ow {
                for ch in 0..c {
                    let o = (py * ow + px) * c + ch;
                    let a = arg[o] as usize;
                    let iy = py * 2 + a / 2;
                    let ix = px * 2 + a % 2;
                    gin[(iy * w + ix) * c + ch] += gout[o];
                }
            }
        }
    });
}
