//! Per-sample layer kernels. Tensors here are plain `c x h x w` slices.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: Dims,
    pub output: Dims,
}

impl ConvGeom {
    /// Output columns `x` for which input column `x*stride + kx - pad` is in range.
    fn valid(&self, kx: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // x*s + off >= 0  and  x*s + off <= in_len - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(out_len as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

/// Weights are `[out_c, in_c, k, k]` followed by `out_c` biases.
pub(crate) fn conv_forward(g: &ConvGeom, params: &[f64], input: &[f64], out: &mut [f64]) {
    let (ci, co, k) = (g.input.c, g.output.c, g.k);
    let (ih, iw, oh, ow) = (g.input.h, g.input.w, g.output.h, g.output.w);
    let (weights, bias) = params.split_at(co * ci * k * k);
    for o in 0..co {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
    }
    for o in 0..co {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ci {
            let in_plane = &input[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, oh, ih);
                for kx in 0..k {
                    let w = weights[((o * ci + i) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, ow, iw);
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let out_row = &mut out_plane[y * ow..(y + 1) * ow];
                        if g.stride == 1 {
                            let src = &in_row[x0 + kx - g.pad..x1 + kx - g.pad];
                            for (o, &v) in out_row[x0..x1].iter_mut().zip(src) {
                                *o += w * v;
                            }
                        } else {
                            for x in x0..x1 {
                                out_row[x] += w * in_row[x * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates parameter gradients into `grad_params` and writes the input
/// gradient into `grad_in` (if requested).
pub(crate) fn conv_backward(
    g: &ConvGeom,
    params: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_params: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let (ci, co, k) = (g.input.c, g.output.c, g.k);
    let (ih, iw, oh, ow) = (g.input.h, g.input.w, g.output.h, g.output.w);
    let nw = co * ci * k * k;
    let (gw, gb) = grad_params.split_at_mut(nw);
    for o in 0..co {
        gb[o] += grad_out[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
    }
    for o in 0..co {
        let go_plane = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ci {
            let in_plane = &input[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, oh, ih);
                for kx in 0..k {
                    let (x0, x1) = g.valid(kx, ow, iw);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.pad;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let go_row = &go_plane[y * ow..(y + 1) * ow];
                        if g.stride == 1 {
                            let src = &in_row[x0 + kx - g.pad..x1 + kx - g.pad];
                            acc += go_row[x0..x1].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for x in x0..x1 {
                                acc += go_row[x] * in_row[x * g.stride + kx - g.pad];
                            }
                        }
                    }
                    gw[((o * ci + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    let Some(grad_in) = grad_in else { return };
    grad_in.fill(0.0);
    for o in 0..co {
        let go_plane = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ci {
            let gi_plane = &mut grad_in[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, oh, ih);
                for kx in 0..k {
                    let w = params[((o * ci + i) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, ow, iw);
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.pad;
                        let gi_row = &mut gi_plane[iy * iw..(iy + 1) * iw];
                        let go_row = &go_plane[y * ow..(y + 1) * ow];
                        if g.stride == 1 {
                            let dst = &mut gi_row[x0 + kx - g.pad..x1 + kx - g.pad];
                            for (d, &v) in dst.iter_mut().zip(&go_row[x0..x1]) {
                                *d += w * v;
                            }
                        } else {
                            for x in x0..x1 {
                                gi_row[x * g.stride + kx - g.pad] += w * go_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

/// Gradient passes where the forward output was positive.
pub(crate) fn relu_backward(output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    for ((gi, &go), &y) in grad_in.iter_mut().zip(grad_out).zip(output) {
        *gi = if y > 0.0 { go } else { 0.0 };
    }
}

/// Max pooling without padding; records the flat input index of each maximum
/// (first occurrence wins).
pub(crate) fn maxpool_forward(
    k: usize,
    stride: usize,
    input_dims: Dims,
    output_dims: Dims,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (ih, iw) = (input_dims.h, input_dims.w);
    let (oh, ow) = (output_dims.h, output_dims.w);
    for c in 0..input_dims.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = c * ih * iw + (y * stride + dy) * iw + x * stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = c * oh * ow + y * ow + x;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn maxpool_backward(argmax: &[usize], grad_out: &[f64], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx] += g;
    }
}

/// Weights are `[outputs, inputs]` followed by `outputs` biases.
pub(crate) fn dense_forward(inputs: usize, outputs: usize, params: &[f64], x: &[f64], out: &mut [f64]) {
    let (w, b) = params.split_at(inputs * outputs);
    for o in 0..outputs {
        let row = &w[o * inputs..(o + 1) * inputs];
        out[o] = b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    inputs: usize,
    outputs: usize,
    params: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_params: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let (gw, gb) = grad_params.split_at_mut(inputs * outputs);
    for o in 0..outputs {
        let g = grad_out[o];
        gb[o] += g;
        for (gwi, &xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
            *gwi += g * xi;
        }
    }
    if let Some(grad_in) = grad_in {
        grad_in.fill(0.0);
        for o in 0..outputs {
            let g = grad_out[o];
            for (gi, &w) in grad_in.iter_mut().zip(&params[o * inputs..(o + 1) * inputs]) {
                *gi += g * w;
            }
        }
    }
}
