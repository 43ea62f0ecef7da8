//! Per-sample kernels. Every function works on one image so that batches can
//! be spread across threads and reduced in a fixed order afterwards.

/// 3x3 convolution with unit stride and zero padding of one.
pub(crate) fn conv3x3_forward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; out_ch * plane];
    for o in 0..out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            let k = &weight[(o * in_ch + i) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        for x in x0..x1 {
                            drow[x] += wv * srow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dinput: bool,
) -> Vec<f64> {
    let plane = h * w;
    let mut din = if need_dinput {
        vec![0.0; in_ch * plane]
    } else {
        Vec::new()
    };
    for o in 0..out_ch {
        let g = &dout[o * plane..(o + 1) * plane];
        dbias[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            let widx = (o * in_ch + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        for x in x0..x1 {
                            acc += g[y * w + x] * src[sy * w + x + kx - 1];
                        }
                    }
                    dweight[widx + ky * 3 + kx] += acc;
                    if need_dinput {
                        let wv = weight[widx + ky * 3 + kx];
                        let dsrc = &mut din[i * plane..(i + 1) * plane];
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            for x in x0..x1 {
                                dsrc[sy * w + x + kx - 1] += wv * g[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// 2x2 max pooling; returns the pooled map and the flat argmax index per output.
pub(crate) fn maxpool2_forward(
    input: &[f64],
    ch: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut idx = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = c * h * w + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = c * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// `out = W x + b` with `W` stored row-major `out_dim x in_dim`.
pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let in_dim = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * in_dim..(o + 1) * in_dim]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

pub(crate) fn dense_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let mut dx = vec![0.0; in_dim];
    for (o, &g) in dout.iter().enumerate() {
        dbias[o] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = &weight[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dweight[o * in_dim..(o + 1) * in_dim];
        for k in 0..in_dim {
            drow[k] += g * x[k];
            dx[k] += g * wrow[k];
        }
    }
    dx
}
