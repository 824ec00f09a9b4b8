use super::{shape_err, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn map_unary(
    name: &'static str,
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Result<Tensor> {
    let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let a2 = a.clone();
    // df receives (input, output) so sigmoid-like ops can reuse the forward value.
    let out_copy = if a.requires_grad() { out.clone() } else { Vec::new() };
    Tensor::from_op(name, a.shape().to_vec(), out, &[a], move |g, _| {
        let d = a2
            .data()
            .iter()
            .zip(&out_copy)
            .zip(g)
            .map(|((&x, &y), &g)| g * df(x, y))
            .collect();
        vec![Some(d)]
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_op("add", a.shape().to_vec(), out, &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::from_op("sub", a.shape().to_vec(), out, &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    })
}

/// Element-wise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (a2, b2) = (a.clone(), b.clone());
    Tensor::from_op("hadamard", a.shape().to_vec(), out, &[a, b], move |g, need| {
        let ga = need[0].then(|| g.iter().zip(b2.data()).map(|(g, y)| g * y).collect());
        let gb = need[1].then(|| g.iter().zip(a2.data()).map(|(g, x)| g * x).collect());
        vec![ga, gb]
    })
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let out = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op("scale", a.shape().to_vec(), out, &[a], move |g, _| {
        vec![Some(g.iter().map(|v| v * c).collect())]
    })
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    let out = a.data().iter().map(|x| x + c).collect();
    Tensor::from_op("add_scalar", a.shape().to_vec(), out, &[a], |g, _| {
        vec![Some(g.to_vec())]
    })
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Result<Tensor> {
    map_unary(
        "leaky_relu",
        a,
        move |x| if x > 0.0 { x } else { slope * x },
        move |x, _| if x > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    map_unary("sigmoid", a, stable_sigmoid, |_, y| y * (1.0 - y))
}

/// ln(1 + e^x), evaluated without overflow.
pub fn softplus(a: &Tensor) -> Result<Tensor> {
    map_unary("softplus", a, softplus_scalar, |x, _| stable_sigmoid(x))
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sum(a: &Tensor) -> Result<Tensor> {
    let n = a.numel();
    let s = a.data().iter().sum();
    Tensor::from_op("sum", vec![1], vec![s], &[a], move |g, _| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    let n = a.numel();
    let s = a.data().iter().sum::<f64>() / n as f64;
    Tensor::from_op("mean", vec![1], vec![s], &[a], move |g, _| {
        vec![Some(vec![g[0] / n as f64; n])]
    })
}

/// Squared L2 norm of all entries.
pub fn sum_squares(a: &Tensor) -> Result<Tensor> {
    let s = a.data().iter().map(|x| x * x).sum();
    let a2 = a.clone();
    Tensor::from_op("sum_squares", vec![1], vec![s], &[a], move |g, _| {
        vec![Some(a2.data().iter().map(|x| 2.0 * x * g[0]).collect())]
    })
}

/// mean(|a - b|). The subgradient at a == b is taken as zero.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("l1", a, b)?;
    let n = a.numel() as f64;
    let s = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    let (a2, b2) = (a.clone(), b.clone());
    Tensor::from_op("l1", vec![1], vec![s], &[a, b], move |g, need| {
        let k = g[0] / n;
        let sign: Vec<f64> = a2
            .data()
            .iter()
            .zip(b2.data())
            .map(|(x, y)| {
                let d = x - y;
                if d > 0.0 {
                    k
                } else if d < 0.0 {
                    -k
                } else {
                    0.0
                }
            })
            .collect();
        let gb = need[1].then(|| sign.iter().map(|v| -v).collect());
        vec![need[0].then_some(sign), gb]
    })
}

/// mean((a - b)^2).
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    let n = a.numel() as f64;
    let s = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    let (a2, b2) = (a.clone(), b.clone());
    Tensor::from_op("mse", vec![1], vec![s], &[a, b], move |g, need| {
        let k = 2.0 * g[0] / n;
        let d: Vec<f64> = a2
            .data()
            .iter()
            .zip(b2.data())
            .map(|(x, y)| k * (x - y))
            .collect();
        let gb = need[1].then(|| d.iter().map(|v| -v).collect());
        vec![need[0].then_some(d), gb]
    })
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.numel() {
        return Err(shape_err(
            "reshape",
            format!("{:?} -> {shape:?}", a.shape()),
        ));
    }
    Tensor::from_op("reshape", shape.to_vec(), a.data().to_vec(), &[a], |g, _| {
        vec![Some(g.to_vec())]
    })
}

/// (outer, axis, inner) factorisation of a shape around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let s = p.shape();
        let ok = s.len() == rank
            && s.iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", s, first.shape()),
            ));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = widths.iter().sum();
    let (outer, _, inner) = split_dims(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[o * w * inner..(o + 1) * w * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_op("concat", shape, out, parts, move |g, need| {
        let mut grads: Vec<Option<Vec<f64>>> = widths
            .iter()
            .zip(need)
            .map(|(&w, &n)| n.then(|| Vec::with_capacity(outer * w * inner)))
            .collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (gp, &w) in grads.iter_mut().zip(&widths) {
                if let Some(gp) = gp {
                    gp.extend_from_slice(&g[off..off + w * inner]);
                }
                off += w * inner;
            }
        }
        grads
    })
}

/// Contiguous range `[start, start+len)` along `axis`.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.shape().len() || start + len > a.shape()[axis] || len == 0 {
        return Err(shape_err(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
        ));
    }
    let (outer, extent, inner) = split_dims(a.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let full = a.numel();
    Tensor::from_op("slice", shape, out, &[a], move |g, _| {
        let mut d = vec![0.0; full];
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(d)]
    })
}

/// x[N,in] · Wᵀ + b with W[out,in].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin) = match *x.shape() {
        [n, f] => (n, f),
        ref s => return Err(shape_err("linear", format!("input must be [N,in], got {s:?}"))),
    };
    let (fout, win) = match *w.shape() {
        [o, i] => (o, i),
        ref s => return Err(shape_err("linear", format!("weight must be [out,in], got {s:?}"))),
    };
    if win != fin {
        return Err(shape_err("linear", format!("in features {fin} vs weight {win}")));
    }
    if b.shape() != [fout] {
        return Err(shape_err("linear", format!("bias {:?} vs out {fout}", b.shape())));
    }
    let mut out = vec![0.0; n * fout];
    for s in 0..n {
        let xr = &x.data()[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let wr = &w.data()[o * fin..(o + 1) * fin];
            out[s * fout + o] = b.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let (x2, w2) = (x.clone(), w.clone());
    Tensor::from_op("linear", vec![n, fout], out, &[x, w, b], move |g, need| {
        let gx = need[0].then(|| {
            let mut d = vec![0.0; n * fin];
            for s in 0..n {
                for o in 0..fout {
                    let go = g[s * fout + o];
                    let wr = &w2.data()[o * fin..(o + 1) * fin];
                    d[s * fin..(s + 1) * fin]
                        .iter_mut()
                        .zip(wr)
                        .for_each(|(d, w)| *d += go * w);
                }
            }
            d
        });
        let gw = need[1].then(|| {
            let mut d = vec![0.0; fout * fin];
            for s in 0..n {
                let xr = &x2.data()[s * fin..(s + 1) * fin];
                for o in 0..fout {
                    let go = g[s * fout + o];
                    d[o * fin..(o + 1) * fin]
                        .iter_mut()
                        .zip(xr)
                        .for_each(|(d, x)| *d += go * x);
                }
            }
            d
        });
        let gb = need[2].then(|| {
            let mut d = vec![0.0; fout];
            for s in 0..n {
                d.iter_mut()
                    .zip(&g[s * fout..(s + 1) * fout])
                    .for_each(|(d, g)| *d += g);
            }
            d
        });
        vec![gx, gw, gb]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    UpNearestX2,
    DownAvgX2,
}

pub fn resize(x: &Tensor, mode: ResizeMode) -> Result<Tensor> {
    match mode {
        ResizeMode::UpNearestX2 => upsample2x(x),
        ResizeMode::DownAvgX2 => downsample2x(x),
    }
}

/// Each pixel becomes a 2×2 block.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rank4("upsample2x", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_op("upsample2x", vec![n, c, ho, wo], out, &[x], move |g, _| {
        let mut d = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            let dp = &mut d[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    dp[(i / 2) * w + j / 2] += gp[i * wo + j];
                }
            }
        }
        vec![Some(d)]
    })
}

/// Mean over disjoint 2×2 blocks; spatial extents must be even.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rank4("downsample2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("downsample2x", format!("odd spatial dims {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[i * wo + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
            }
        }
    }
    Tensor::from_op("downsample2x", vec![n, c, ho, wo], out, &[x], move |g, _| {
        let mut d = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            let dp = &mut d[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    dp[i * w + j] = 0.25 * gp[(i / 2) * wo + j / 2];
                }
            }
        }
        vec![Some(d)]
    })
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rank4("global_avg_pool", x)?;
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_op("global_avg_pool", vec![n, c], out, &[x], move |g, _| {
        let mut d = Vec::with_capacity(n * c * hw);
        for &gv in g {
            d.extend(std::iter::repeat_n(gv / hw as f64, hw));
        }
        vec![Some(d)]
    })
}

/// Per-(sample, channel) normalisation over the spatial plane:
/// (x - mean) / sqrt(var + eps), with the biased variance.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = rank4("instance_norm", x)?;
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    let mut inv_std = vec![0.0; n * c];
    for (p, (src, dst)) in x.data().chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
        let mu = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = (s - mu) * is);
    }
    let xhat = out.clone();
    Tensor::from_op("instance_norm", vec![n, c, h, w], out, &[x], move |g, _| {
        let m = hw as f64;
        let mut d = vec![0.0; n * c * hw];
        for p in 0..n * c {
            let gp = &g[p * hw..(p + 1) * hw];
            let yp = &xhat[p * hw..(p + 1) * hw];
            let sg = gp.iter().sum::<f64>();
            let sgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>();
            let is = inv_std[p];
            for k in 0..hw {
                d[p * hw + k] = is / m * (m * gp[k] - sg - yp[k] * sgy);
            }
        }
        vec![Some(d)]
    })
}

/// x[n,c,:,:] * scale[n,c] + shift[n,c].
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rank4("channel_affine", x)?;
    if scale.shape() != [n, c] || shift.shape() != [n, c] {
        return Err(shape_err(
            "channel_affine",
            format!(
                "scale {:?} / shift {:?} must be [{n},{c}]",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for p in 0..n * c {
        let (s, t) = (scale.data()[p], shift.data()[p]);
        out[p * hw..(p + 1) * hw]
            .iter_mut()
            .zip(&x.data()[p * hw..(p + 1) * hw])
            .for_each(|(o, v)| *o = v * s + t);
    }
    let (x2, s2) = (x.clone(), scale.clone());
    Tensor::from_op(
        "channel_affine",
        vec![n, c, h, w],
        out,
        &[x, scale, shift],
        move |g, need| {
            let gx = need[0].then(|| {
                let mut d = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let s = s2.data()[p];
                    d[p * hw..(p + 1) * hw]
                        .iter_mut()
                        .zip(&g[p * hw..(p + 1) * hw])
                        .for_each(|(d, g)| *d = g * s);
                }
                d
            });
            let gs = need[1].then(|| {
                (0..n * c)
                    .map(|p| {
                        g[p * hw..(p + 1) * hw]
                            .iter()
                            .zip(&x2.data()[p * hw..(p + 1) * hw])
                            .map(|(g, x)| g * x)
                            .sum()
                    })
                    .collect()
            });
            let gt = need[2].then(|| g.chunks(hw).map(|p| p.iter().sum()).collect());
            vec![gx, gs, gt]
        },
    )
}

/// Sum of several one-element tensors.
pub fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
    let mut it = terms.iter();
    let first = it
        .next()
        .ok_or_else(|| TensorError::Contract("sum_all of no terms".into()))?;
    it.try_fold(first.clone(), |acc, t| add(&acc, t))
}
