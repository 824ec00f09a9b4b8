use super::{check_finite, shape_err, Result, Tensor};

/// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C where the transposes
/// are expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major layouts of exactly those lengths.
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

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }
}

/// Unfolds one [C,H,W] sample into [C*kh*kw, Ho*Wo].
/// Output columns `oj` whose input column `oj*stride + kj - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kj).div_ceil(s);
    let hi = ((g.w + g.pad).saturating_sub(kj)).div_ceil(s).min(g.wo);
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let j0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[j0..j0 + (hi - lo)]);
                    } else {
                        for (k, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[j0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a [C,H,W] buffer.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let j0 = lo * g.stride + kj - g.pad;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let part = &src[oi * g.wo + lo..oi * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in line[j0..j0 + part.len()].iter_mut().zip(part) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in line[j0..].iter_mut().step_by(g.stride).zip(part) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of input[N,C,H,W] with weight[O,C,kh,kw] plus bias[O].
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = match *input.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(shape_err("conv2d", format!("input must be [N,C,H,W], got {s:?}"))),
    };
    let (o, wc, kh, kw) = match *weight.shape() {
        [o, c, kh, kw] => (o, c, kh, kw),
        ref s => {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [O,C,kh,kw], got {s:?}"),
            ))
        }
    };
    if wc != c {
        return Err(shape_err(
            "conv2d",
            format!("input channels {c} vs weight channels {wc}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} must be odd")));
    }
    if bias.shape() != [o] {
        return Err(shape_err(
            "conv2d",
            format!("bias {:?} vs output channels {o}", bias.shape()),
        ));
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with padding {padding}"),
        ));
    }
    check_finite("conv2d", input.data())?;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let geo = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let hw_out = ho * wo;
    let krows = geo.cols_rows();
    let mut out = vec![0.0; n * o * hw_out];
    let mut cols = vec![0.0; geo.cols_len()];
    for s in 0..n {
        im2col(&input.data()[s * c * h * w..(s + 1) * c * h * w], &geo, &mut cols);
        let dst = &mut out[s * o * hw_out..(s + 1) * o * hw_out];
        for (oc, row) in dst.chunks_mut(hw_out).enumerate() {
            row.fill(bias.data()[oc]);
        }
        gemm(o, krows, hw_out, weight.data(), false, &cols, false, 1.0, dst);
    }
    let (x2, w2) = (input.clone(), weight.clone());
    Tensor::from_op(
        "conv2d",
        vec![n, o, ho, wo],
        out,
        &[input, weight, bias],
        move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; n * c * h * w]);
            let mut gw = need[1].then(|| vec![0.0; o * krows]);
            let gb = need[2].then(|| {
                let mut d = vec![0.0; o];
                for s in 0..n {
                    for oc in 0..o {
                        let base = (s * o + oc) * hw_out;
                        d[oc] += g[base..base + hw_out].iter().sum::<f64>();
                    }
                }
                d
            });
            let mut cols = vec![0.0; geo.cols_len()];
            for s in 0..n {
                let gs = &g[s * o * hw_out..(s + 1) * o * hw_out];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x2.data()[s * c * h * w..(s + 1) * c * h * w], &geo, &mut cols);
                    // dW[O,K] += g[O,HW] * cols[K,HW]^T
                    gemm(o, hw_out, krows, gs, false, &cols, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols[K,HW] = W[O,K]^T * g[O,HW]
                    gemm(krows, o, hw_out, w2.data(), true, gs, false, 0.0, &mut cols);
                    col2im(&cols, &geo, &mut gx[s * c * h * w..(s + 1) * c * h * w]);
                }
            }
            vec![gx, gw, gb]
        },
    )
}
