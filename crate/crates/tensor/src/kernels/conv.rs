//! Convolution kernels on contiguous channels-first slices.
//!
//! 1D layout: input `[n, c_in, len]`, kernel `[c_out, c_in, k]`, output `[n, c_out, len]`
//! with symmetric zero padding `(k - 1) / 2`.
//!
//! 2D layout: input `[n, c_in, h, w]`, kernel `[c_out, c_in, k, k]`. The 2D path goes
//! through im2col and a GEMM.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
}

pub fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: Conv1dDims) -> Vec<f64> {
    let Conv1dDims { batch, in_channels, out_channels, len, kernel } = d;
    let pad = (kernel - 1) / 2;
    let mut y = vec![0.0; batch * out_channels * len];
    for n in 0..batch {
        for co in 0..out_channels {
            let out = &mut y[(n * out_channels + co) * len..][..len];
            out.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..in_channels {
                let xin = &x[(n * in_channels + ci) * len..][..len];
                let wk = &w[(co * in_channels + ci) * kernel..][..kernel];
                for (j, &wj) in wk.iter().enumerate() {
                    // output t reads input t + j - pad
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    for t in lo..hi {
                        out[t] += wj * xin[t + j - pad];
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_input, grad_kernel, grad_bias)`; the input gradient is skipped when
/// `need_input` is false.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: Conv1dDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let Conv1dDims { batch, in_channels, out_channels, len, kernel } = d;
    let pad = (kernel - 1) / 2;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; out_channels];
    for n in 0..batch {
        for co in 0..out_channels {
            let g = &gy[(n * out_channels + co) * len..][..len];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..in_channels {
                let xin = &x[(n * in_channels + ci) * len..][..len];
                let base = (co * in_channels + ci) * kernel;
                for j in 0..kernel {
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += g[t] * xin[t + j - pad];
                    }
                    gw[base + j] += acc;
                    if let Some(gx) = gx.as_mut() {
                        let wj = w[base + j];
                        let gxin = &mut gx[(n * in_channels + ci) * len..][..len];
                        for t in lo..hi {
                            gxin[t + j - pad] += wj * g[t];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dDims {
    pub fn out_height(&self) -> usize {
        out_extent(self.height, self.kernel, self.stride, self.padding, self.dilation)
    }

    pub fn out_width(&self) -> usize {
        out_extent(self.width, self.kernel, self.stride, self.padding, self.dilation)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

pub fn out_extent(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    if len + 2 * padding < span {
        0
    } else {
        (len + 2 * padding - span) / stride + 1
    }
}

fn im2col(x: &[f64], d: &Conv2dDims, cols: &mut [f64]) {
    let (ho, wo) = (d.out_height(), d.out_width());
    let p = ho * wo;
    let k = d.kernel;
    for ci in 0..d.in_channels {
        let plane = &x[ci * d.height * d.width..][..d.height * d.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * d.stride + ky * d.dilation) as isize - d.padding as isize;
                    let dst = &mut row[oy * wo..][..wo];
                    if iy < 0 || iy >= d.height as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.width..][..d.width];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx * d.dilation) as isize - d.padding as isize;
                        *v = if ix < 0 || ix >= d.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &Conv2dDims, gx: &mut [f64]) {
    let (ho, wo) = (d.out_height(), d.out_width());
    let p = ho * wo;
    let k = d.kernel;
    for ci in 0..d.in_channels {
        let plane = &mut gx[ci * d.height * d.width..][..d.height * d.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * d.stride + ky * d.dilation) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.width..][..d.width];
                    for ox in 0..wo {
                        let ix = (ox * d.stride + kx * d.dilation) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.width as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
/// `a` is `m×k` (or `k×m` stored when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index reachable from the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward 2D convolution. Returns the output and the per-sample im2col buffers,
/// which the backward pass reuses.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, d: Conv2dDims) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (d.out_height(), d.out_width());
    let p = ho * wo;
    let rows = d.col_rows();
    let in_plane = d.in_channels * d.height * d.width;
    let mut cols = vec![0.0; d.batch * rows * p];
    let mut y = vec![0.0; d.batch * d.out_channels * p];
    for n in 0..d.batch {
        let col = &mut cols[n * rows * p..][..rows * p];
        im2col(&x[n * in_plane..][..in_plane], &d, col);
        let out = &mut y[n * d.out_channels * p..][..d.out_channels * p];
        if let Some(b) = b {
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        gemm(d.out_channels, rows, p, w, false, col, false, 1.0, out);
    }
    (y, cols)
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward(
    cols: &[f64],
    w: &[f64],
    gy: &[f64],
    d: Conv2dDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (d.out_height(), d.out_width());
    let p = ho * wo;
    let rows = d.col_rows();
    let in_plane = d.in_channels * d.height * d.width;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.out_channels];
    let mut gx = need_input.then(|| vec![0.0; d.batch * in_plane]);
    let mut gcol = vec![0.0; if need_input { rows * p } else { 0 }];
    for n in 0..d.batch {
        let g = &gy[n * d.out_channels * p..][..d.out_channels * p];
        for (co, chunk) in g.chunks(p).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        let col = &cols[n * rows * p..][..rows * p];
        gemm(d.out_channels, p, rows, g, false, col, true, 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            gemm(rows, d.out_channels, p, w, true, g, false, 0.0, &mut gcol);
            col2im(&gcol, &d, &mut gx[n * in_plane..][..in_plane]);
        }
    }
    (gx, gw, gb)
}
