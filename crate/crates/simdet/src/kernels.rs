//! Raw numeric loops behind the tape operations.
//!
//! The convolution kernels accumulate every output element over
//! `(c_in, kernel offsets...)` in lexicographic order. Tests compare them bit
//! for bit against a naive nested-loop oracle that sums in the same order, so
//! the accumulation order here is part of the contract: do not reassociate.

/// Dot product with four partial accumulators for instruction-level
/// parallelism. Not order-sensitive; used where bit-exactness is not required.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += w * *v;
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// 1-D valid cross-correlation: input `[n, c_in, iw]`, kernel `[c_out, c_in, kw]`.
pub(crate) fn conv1d_forward(
    input: &[f64],
    kernel: &[f64],
    d: ConvDims,
    iw: usize,
    kw: usize,
    sw: usize,
    out: &mut [f64],
    ow: usize,
) {
    for b in 0..d.n {
        for co in 0..d.c_out {
            let out_row = (b * d.c_out + co) * ow;
            for ci in 0..d.c_in {
                let in_row = (b * d.c_in + ci) * iw;
                for dk in 0..kw {
                    let w = kernel[(co * d.c_in + ci) * kw + dk];
                    if sw == 1 {
                        axpy(&mut out[out_row..out_row + ow], w, &input[in_row + dk..in_row + dk + ow]);
                    } else {
                        for o in 0..ow {
                            out[out_row + o] += w * input[in_row + o * sw + dk];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_input(
    grad_out: &[f64],
    kernel: &[f64],
    d: ConvDims,
    iw: usize,
    kw: usize,
    sw: usize,
    grad_in: &mut [f64],
    ow: usize,
) {
    for b in 0..d.n {
        for co in 0..d.c_out {
            let go_row = (b * d.c_out + co) * ow;
            for ci in 0..d.c_in {
                let gi_row = (b * d.c_in + ci) * iw;
                for dk in 0..kw {
                    let w = kernel[(co * d.c_in + ci) * kw + dk];
                    if sw == 1 {
                        axpy(&mut grad_in[gi_row + dk..gi_row + dk + ow], w, &grad_out[go_row..go_row + ow]);
                    } else {
                        for o in 0..ow {
                            grad_in[gi_row + o * sw + dk] += w * grad_out[go_row + o];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_kernel(
    grad_out: &[f64],
    input: &[f64],
    d: ConvDims,
    iw: usize,
    kw: usize,
    sw: usize,
    grad_k: &mut [f64],
    ow: usize,
) {
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for dk in 0..kw {
                let mut acc = 0.0;
                for b in 0..d.n {
                    let go_row = (b * d.c_out + co) * ow;
                    let in_row = (b * d.c_in + ci) * iw;
                    if sw == 1 {
                        acc += dot(&grad_out[go_row..go_row + ow], &input[in_row + dk..in_row + dk + ow]);
                    } else {
                        for o in 0..ow {
                            acc += grad_out[go_row + o] * input[in_row + o * sw + dk];
                        }
                    }
                }
                grad_k[(co * d.c_in + ci) * kw + dk] += acc;
            }
        }
    }
}

/// 2-D valid cross-correlation: input `[n, c_in, ih, iw]`, kernel
/// `[c_out, c_in, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    d: ConvDims,
    (ih, iw): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for b in 0..d.n {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * oh * ow;
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * ih * iw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let w = kernel[((co * d.c_in + ci) * kh + dy) * kw + dx];
                        for oy in 0..oh {
                            let in_row = in_base + (oy * sh + dy) * iw;
                            let out_row = out_base + oy * ow;
                            if sw == 1 {
                                axpy(
                                    &mut out[out_row..out_row + ow],
                                    w,
                                    &input[in_row + dx..in_row + dx + ow],
                                );
                            } else {
                                for ox in 0..ow {
                                    out[out_row + ox] += w * input[in_row + ox * sw + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_grad_input(
    grad_out: &[f64],
    kernel: &[f64],
    d: ConvDims,
    (ih, iw): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    grad_in: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for b in 0..d.n {
        for co in 0..d.c_out {
            let go_base = (b * d.c_out + co) * oh * ow;
            for ci in 0..d.c_in {
                let gi_base = (b * d.c_in + ci) * ih * iw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let w = kernel[((co * d.c_in + ci) * kh + dy) * kw + dx];
                        for oy in 0..oh {
                            let gi_row = gi_base + (oy * sh + dy) * iw;
                            let go_row = go_base + oy * ow;
                            if sw == 1 {
                                axpy(
                                    &mut grad_in[gi_row + dx..gi_row + dx + ow],
                                    w,
                                    &grad_out[go_row..go_row + ow],
                                );
                            } else {
                                for ox in 0..ow {
                                    grad_in[gi_row + ox * sw + dx] += w * grad_out[go_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_grad_kernel(
    grad_out: &[f64],
    input: &[f64],
    d: ConvDims,
    (ih, iw): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    grad_k: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for dy in 0..kh {
                for dx in 0..kw {
                    let mut acc = 0.0;
                    for b in 0..d.n {
                        let go_base = (b * d.c_out + co) * oh * ow;
                        let in_base = (b * d.c_in + ci) * ih * iw;
                        for oy in 0..oh {
                            let go_row = go_base + oy * ow;
                            let in_row = in_base + (oy * sh + dy) * iw;
                            if sw == 1 {
                                acc += dot(
                                    &grad_out[go_row..go_row + ow],
                                    &input[in_row + dx..in_row + dx + ow],
                                );
                            } else {
                                for ox in 0..ow {
                                    acc += grad_out[go_row + ox] * input[in_row + ox * sw + dx];
                                }
                            }
                        }
                    }
                    grad_k[((co * d.c_in + ci) * kh + dy) * kw + dx] += acc;
                }
            }
        }
    }
}

/// Max pooling (window 2, stride 2) over the trailing spatial axes of
/// `[n, c, spatial...]`. Returns per-output argmax as flat input indices;
/// ties go to the first element in scan order.
pub(crate) fn maxpool_forward(
    input: &[f64],
    shape: &[usize],
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let (n, c) = (shape[0], shape[1]);
    match shape.len() {
        3 => {
            let iw = shape[2];
            let ow = iw / 2;
            let mut out = vec![0.0; n * c * ow];
            let mut arg = vec![0usize; out.len()];
            for bc in 0..n * c {
                for o in 0..ow {
                    let i0 = bc * iw + 2 * o;
                    let (v, a) = if input[i0 + 1] > input[i0] {
                        (input[i0 + 1], i0 + 1)
                    } else {
                        (input[i0], i0)
                    };
                    out[bc * ow + o] = v;
                    arg[bc * ow + o] = a;
                }
            }
            (out, arg, vec![n, c, ow])
        }
        4 => {
            let (ih, iw) = (shape[2], shape[3]);
            let (oh, ow) = (ih / 2, iw / 2);
            let mut out = vec![0.0; n * c * oh * ow];
            let mut arg = vec![0usize; out.len()];
            for bc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (bc * ih + 2 * oy + dy) * iw + 2 * ox + dx;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[(bc * oh + oy) * ow + ox] = best;
                        arg[(bc * oh + oy) * ow + ox] = best_i;
                    }
                }
            }
            (out, arg, vec![n, c, oh, ow])
        }
        _ => unreachable!("pool expects rank 3 or 4"),
    }
}
