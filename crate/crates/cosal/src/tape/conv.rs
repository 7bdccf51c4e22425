//! Convolution (cross-correlation convention) and bilinear upsampling.
//!
//! conv2d runs as im2col + gemm; the backward pass recomputes the column
//! matrix instead of keeping it on the tape.

use super::{Tape, ValueId};
use crate::error::{CosalError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;


fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let num = h + 2 * pad;
    if num < k {
        return Err(CosalError::shape(format!("kernel {k} larger than padded input {num}")));
    }
    if (num - k) % stride != 0 {
        return Err(CosalError::shape(format!(
            "non-integer conv output: ({h} + 2*{pad} - {k}) not divisible by stride {stride}"
        )));
    }
    let out = (num - k) / stride + 1;
    if out == 0 {
        return Err(CosalError::shape("conv output dimension is zero".to_string()));
    }
    Ok(out)
}

/// col is (Cin*k*k) × (Ho*Wo) for a single image.
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    debug_assert_eq!(col.len(), cin * k * k * ho * wo);
    let mut row = 0usize;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let base = oy * wo;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut dst[base..base + wo] {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src_row = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[base + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into an image buffer.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    let mut row = 0usize;
    for c in 0..cin {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xc[iy as usize * w + ix as usize] += src[base + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// conv2d: x N×Cin×H×W, w Cout×Cin×k×k, b Cout; odd k only.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let vb = self.value(b).clone();
        if vx.rank() != 4 || vw.rank() != 4 {
            return Err(CosalError::shape("conv2d expects 4-D x and w".to_string()));
        }
        let (n, cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, cin_w, k, k2) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
        if cin != cin_w {
            return Err(CosalError::shape(format!("conv2d channels {cin} vs {cin_w}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(CosalError::invalid(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
        }
        if vb.shape != vec![cout] {
            return Err(CosalError::shape(format!("conv2d bias shape {:?}, want [{cout}]", vb.shape)));
        }
        if stride == 0 {
            return Err(CosalError::invalid("conv2d stride must be >= 1".to_string()));
        }
        let ho = conv_out_size(h, k, stride, pad)?;
        let wo = conv_out_size(wd, k, stride, pad)?;

        let ckk = cin * k * k;
        let mut col = vec![S::zero(); ckk * ho * wo];
        let mut out = vec![S::zero(); n * cout * ho * wo];
        for img in 0..n {
            im2col(&vx.data[img * cin * h * wd..], cin, h, wd, k, stride, pad, ho, wo, &mut col);
            let out_img = &mut out[img * cout * ho * wo..(img + 1) * cout * ho * wo];
            S::gemm(cout, ckk, ho * wo, S::one(), &vw.data, &col, S::zero(), out_img);
            for c in 0..cout {
                let bias = vb.data[c];
                for v in &mut out_img[c * ho * wo..(c + 1) * ho * wo] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::from_vec(vec![n, cout, ho, wo], out);

        Ok(self.record(out, &[x, w, b], move |g| {
            let mut col = vec![S::zero(); ckk * ho * wo];
            let mut dw = vec![S::zero(); cout * ckk];
            let mut dx = vec![S::zero(); n * cin * h * wd];
            let mut db = vec![S::zero(); cout];
            let mut dcol = vec![S::zero(); ckk * ho * wo];
            // w transposed once: (ckk × cout)
            let mut wt = vec![S::zero(); ckk * cout];
            for c in 0..cout {
                for r in 0..ckk {
                    wt[r * cout + c] = vw.data[c * ckk + r];
                }
            }
            for img in 0..n {
                im2col(&vx.data[img * cin * h * wd..], cin, h, wd, k, stride, pad, ho, wo, &mut col);
                let g_img = &g.data[img * cout * ho * wo..(img + 1) * cout * ho * wo];
                // dW += g_img · colᵀ  (via gemm on col transposed implicitly:
                // gemm expects row-major; colᵀ is (ho*wo × ckk))
                let mut colt = vec![S::zero(); ho * wo * ckk];
                for r in 0..ckk {
                    for cidx in 0..ho * wo {
                        colt[cidx * ckk + r] = col[r * ho * wo + cidx];
                    }
                }
                S::gemm(cout, ho * wo, ckk, S::one(), g_img, &colt, S::one(), &mut dw);
                // dcol = wᵀ · g_img
                S::gemm(ckk, cout, ho * wo, S::one(), &wt, g_img, S::zero(), &mut dcol);
                col2im(
                    &dcol, cin, h, wd, k, stride, pad, ho, wo,
                    &mut dx[img * cin * h * wd..(img + 1) * cin * h * wd],
                );
                for c in 0..cout {
                    let mut s = S::zero();
                    for &v in &g_img[c * ho * wo..(c + 1) * ho * wo] {
                        s += v;
                    }
                    db[c] += s;
                }
            }
            vec![
                (x.0, Tensor::from_vec(vec![n, cin, h, wd], dx)),
                (w.0, Tensor::from_vec(vec![cout, cin, k, k], dw)),
                (b.0, Tensor::from_vec(vec![cout], db)),
            ]
        }))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let vx = self.value(x).clone();
        if vx.rank() != 4 {
            return Err(CosalError::shape("avg_pool2 expects N×C×H×W".to_string()));
        }
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CosalError::shape(format!("avg_pool2 needs even dims, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = S::from_f(0.25);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &vx.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, ho, wo], out);
        Ok(self.record(out, &[x], move |g| {
            let mut gin = vec![S::zero(); n * c * h * w];
            for plane in 0..n * c {
                let gs = &g.data[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gin[plane * h * w..(plane + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[oy * wo + ox] * quarter;
                        let base = 2 * oy * w + 2 * ox;
                        dst[base] += gv;
                        dst[base + 1] += gv;
                        dst[base + w] += gv;
                        dst[base + w + 1] += gv;
                    }
                }
            }
            vec![(x.0, Tensor::from_vec(vec![n, c, h, w], gin))]
        }))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even. The
    /// gradient routes to the first maximal element of each window.
    pub fn max_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let vx = self.value(x).clone();
        if vx.rank() != 4 {
            return Err(CosalError::shape("max_pool2 expects N×C×H×W".to_string()));
        }
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CosalError::shape(format!("max_pool2 needs even dims, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &vx.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for off in [1, w, w + 1] {
                        if src[base + off] > src[best] {
                            best = base + off;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = src[best];
                    argmax[o] = plane * h * w + best;
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, ho, wo], out);
        Ok(self.record(out, &[x], move |g| {
            let mut gin = vec![S::zero(); n * c * h * w];
            for (o, &src_idx) in argmax.iter().enumerate() {
                gin[src_idx] += g.data[o];
            }
            vec![(x.0, Tensor::from_vec(vec![n, c, h, w], gin))]
        }))
    }

    /// Bilinear upsampling by an integer factor, half-pixel alignment
    /// (source coordinate = (dst + 0.5)/scale - 0.5, edges clamped).
    pub fn upsample_bilinear(&mut self, x: ValueId, scale: usize) -> Result<ValueId> {
        if scale < 1 {
            return Err(CosalError::invalid("upsample scale must be >= 1".to_string()));
        }
        let vx = self.value(x).clone();
        if vx.rank() != 4 {
            return Err(CosalError::shape("upsample expects N×C×H×W".to_string()));
        }
        if scale == 1 {
            // Identity, but still a fresh node so gradients flow.
            let out = vx.clone();
            return Ok(self.record(out, &[x], move |g| vec![(x.0, g.clone())]));
        }
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (ho, wo) = (h * scale, w * scale);
        // Precompute the 1-D interpolation taps once per axis.
        let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let src = (o as f64 + 0.5) / scale as f64 - 0.5;
                    let i0 = src.floor();
                    let frac = src - i0;
                    let lo = (i0.max(0.0) as usize).min(in_len - 1);
                    let hi = ((i0 as isize + 1).clamp(0, in_len as isize - 1)) as usize;
                    (lo, hi, frac)
                })
                .collect()
        };
        let ty = taps(h, ho);
        let tx = taps(w, wo);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &vx.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = src[y0 * w + x0].to_f();
                    let v01 = src[y0 * w + x1].to_f();
                    let v10 = src[y1 * w + x0].to_f();
                    let v11 = src[y1 * w + x1].to_f();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    dst[oy * wo + ox] = S::from_f(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, ho, wo], out);
        Ok(self.record(out, &[x], move |g| {
            // Adjoint: scatter each output gradient onto its 4 taps.
            let mut gin = vec![S::zero(); n * c * h * w];
            for plane in 0..n * c {
                let gsrc = &g.data[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gin[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gsrc[oy * wo + ox].to_f();
                        dst[y0 * w + x0] += S::from_f(gv * (1.0 - fx) * (1.0 - fy));
                        dst[y0 * w + x1] += S::from_f(gv * fx * (1.0 - fy));
                        dst[y1 * w + x0] += S::from_f(gv * (1.0 - fx) * fy);
                        dst[y1 * w + x1] += S::from_f(gv * fx * fy);
                    }
                }
            }
            vec![(x.0, Tensor::from_vec(vec![n, c, h, w], gin))]
        }))
    }
}
