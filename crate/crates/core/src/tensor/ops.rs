//! Primitive numeric operations on tensors: convolutions, pooling,
//! upsampling, activations, linear maps, batch normalization, and their
//! gradient counterparts.
//!
//! Convolution is cross-correlation (no kernel flipping). All reduction loops
//! accumulate in `f64` regardless of the storage scalar; loop order is fixed,
//! so results are bitwise-deterministic for any thread count above us.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// Frame geometry of a rank-3 `[C,H,W]` or rank-4 `[C,T,H,W]` tensor.
/// Rank-3 inputs behave as `T = 1`.
pub(crate) fn frame_geom<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, 1, *h, *w)),
        [c, t, h, w] => Ok((*c, *t, *h, *w)),
        other => Err(shape_err(
            "rank",
            format!("{what} expects rank 3 [C,H,W] or rank 4 [C,T,H,W], got {other:?}"),
        )),
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + k_off - pad` lands
/// inside `[0, in_n)`.
#[inline]
fn axis_bounds(out_n: usize, in_n: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi = if in_n + pad > k_off {
        ((in_n - 1 + pad - k_off) / stride + 1).min(out_n)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn check_bias<S: Scalar>(b: Option<&Tensor<S>>, co: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(shape_err(
                "channel",
                format!("bias shape {:?} does not match {} output channels", b.shape(), co),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d: per-frame 2D cross-correlation
// ---------------------------------------------------------------------------

/// 2D convolution applied independently to each frame of `x`.
///
/// `x`: `[Ci,H,W]` or `[Ci,T,H,W]`; `w`: `[Co,Ci,kh,kw]`; output keeps the rank
/// of `x`. Each output element is the direct cross-correlation sum plus bias.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let (ci, t_n, ih, iw) = frame_geom(x, "conv2d input")?;
    let [co, wci, kh, kw] = *w.shape() else {
        return Err(shape_err(
            "rank",
            format!("conv2d weights must be rank 4 [Co,Ci,kh,kw], got {:?}", w.shape()),
        ));
    };
    if wci != ci {
        return Err(shape_err(
            "channel",
            format!("input has {ci} channels but weights expect {wci}"),
        ));
    }
    if spec.kernel[1] != kh || spec.kernel[2] != kw || spec.kernel[0] != 1 {
        return Err(shape_err(
            "kernel",
            format!(
                "spec kernel {:?} disagrees with weight kernel [1,{kh},{kw}]",
                spec.kernel
            ),
        ));
    }
    check_bias(b, co)?;
    let oh = spec.out_extent(1, ih)?;
    let ow = spec.out_extent(2, iw)?;
    let (sh, sw) = (spec.stride[1], spec.stride[2]);
    let (ph, pw) = (spec.pad[1], spec.pad[2]);

    let mut out = if x.rank() == 3 {
        Tensor::zeros(&[co, oh, ow])
    } else {
        Tensor::zeros(&[co, t_n, oh, ow])
    };
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let mut acc = vec![0f64; oh * ow];

    for t in 0..t_n {
        for c_out in 0..co {
            let base = b.map(|b| b.data()[c_out].to_f64()).unwrap_or(0.0);
            acc.iter_mut().for_each(|v| *v = base);
            for c_in in 0..ci {
                let x_frame = &xd[(c_in * t_n + t) * ih * iw..][..ih * iw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = axis_bounds(oh, ih, ky, sh, ph);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = axis_bounds(ow, iw, kx, sw, pw);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wd[((c_out * ci + c_in) * kh + ky) * kw + kx].to_f64();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let xrow = &x_frame[iy * iw..][..iw];
                            let arow = &mut acc[oy * ow..][..ow];
                            if sw == 1 {
                                // ix = ox + kx - pw for ox in [ox_lo, ox_hi)
                                let ix0 = ox_lo + kx - pw;
                                let xs = &xrow[ix0..][..ox_hi - ox_lo];
                                let asl = &mut arow[ox_lo..ox_hi];
                                for (a, xv) in asl.iter_mut().zip(xs) {
                                    *a += wv * xv.to_f64();
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    arow[ox] += wv * xrow[ix].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            let o_frame = &mut od[(c_out * t_n + t) * oh * ow..][..oh * ow];
            for (o, a) in o_frame.iter_mut().zip(&acc) {
                *o = S::from_f64(*a);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weights, and bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (ci, t_n, ih, iw) = frame_geom(x, "conv2d input")?;
    let [co, _, kh, kw] = *w.shape() else {
        return Err(shape_err("rank", "conv2d weights must be rank 4".to_string()));
    };
    let (_, dy_t, oh, ow) = frame_geom(dy, "conv2d output grad")?;
    debug_assert_eq!(dy_t, t_n);
    let (sh, sw) = (spec.stride[1], spec.stride[2]);
    let (ph, pw) = (spec.pad[1], spec.pad[2]);

    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![0f64; x.len()];
    let mut dw = vec![0f64; w.len()];
    let mut db = vec![0f64; co];

    for t in 0..t_n {
        for c_out in 0..co {
            let dy_frame = &dyd[(c_out * t_n + t) * oh * ow..][..oh * ow];
            let mut dbv = 0f64;
            for g in dy_frame {
                dbv += g.to_f64();
            }
            db[c_out] += dbv;
            for c_in in 0..ci {
                let x_frame = &xd[(c_in * t_n + t) * ih * iw..][..ih * iw];
                let dx_frame = &mut dx[(c_in * t_n + t) * ih * iw..][..ih * iw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = axis_bounds(oh, ih, ky, sh, ph);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = axis_bounds(ow, iw, kx, sw, pw);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let widx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                        let wv = wd[widx].to_f64();
                        let mut dwv = 0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let dyrow = &dy_frame[oy * ow..][..ow];
                            if sw == 1 {
                                let ix0 = ox_lo + kx - pw;
                                let n = ox_hi - ox_lo;
                                let xr = &x_frame[iy * iw + ix0..][..n];
                                let dxr = &mut dx_frame[iy * iw + ix0..][..n];
                                let dyr = &dyrow[ox_lo..ox_hi];
                                for i in 0..n {
                                    let g = dyr[i].to_f64();
                                    dwv += g * xr[i].to_f64();
                                    dxr[i] += g * wv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    let g = dyrow[ox].to_f64();
                                    dwv += g * x_frame[iy * iw + ix].to_f64();
                                    dx_frame[iy * iw + ix] += g * wv;
                                }
                            }
                        }
                        dw[widx] += dwv;
                    }
                }
            }
        }
    }

    let dx = Tensor::from_vec(x.shape(), dx.iter().map(|&v| S::from_f64(v)).collect())?;
    let dw = Tensor::from_vec(w.shape(), dw.iter().map(|&v| S::from_f64(v)).collect())?;
    let db = Tensor::from_vec(&[co], db.iter().map(|&v| S::from_f64(v)).collect())?;
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// 3D convolution over `[Ci,T,H,W]` with weights `[Co,Ci,kt,kh,kw]`.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let [ci, t_n, ih, iw] = *x.shape() else {
        return Err(shape_err(
            "rank",
            format!("conv3d input must be rank 4 [Ci,T,H,W], got {:?}", x.shape()),
        ));
    };
    let [co, wci, kt, kh, kw] = *w.shape() else {
        return Err(shape_err(
            "rank",
            format!("conv3d weights must be rank 5 [Co,Ci,kt,kh,kw], got {:?}", w.shape()),
        ));
    };
    if wci != ci {
        return Err(shape_err(
            "channel",
            format!("input has {ci} channels but weights expect {wci}"),
        ));
    }
    if spec.kernel != [kt, kh, kw] {
        return Err(shape_err(
            "kernel",
            format!("spec kernel {:?} disagrees with weight kernel [{kt},{kh},{kw}]", spec.kernel),
        ));
    }
    check_bias(b, co)?;
    let ot = spec.out_extent(0, t_n)?;
    let oh = spec.out_extent(1, ih)?;
    let ow = spec.out_extent(2, iw)?;
    let (st, sh, sw) = (spec.stride[0], spec.stride[1], spec.stride[2]);
    let (pt, ph, pw) = (spec.pad[0], spec.pad[1], spec.pad[2]);

    let mut out = Tensor::zeros(&[co, ot, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let mut acc = vec![0f64; oh * ow];

    for c_out in 0..co {
        let base = b.map(|b| b.data()[c_out].to_f64()).unwrap_or(0.0);
        for o_t in 0..ot {
            acc.iter_mut().for_each(|v| *v = base);
            for c_in in 0..ci {
                for k_t in 0..kt {
                    let it = (o_t * st + k_t).checked_sub(pt);
                    let Some(it) = it else { continue };
                    if it >= t_n {
                        continue;
                    }
                    let x_frame = &xd[(c_in * t_n + it) * ih * iw..][..ih * iw];
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = axis_bounds(oh, ih, ky, sh, ph);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = axis_bounds(ow, iw, kx, sw, pw);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = wd[(((c_out * ci + c_in) * kt + k_t) * kh + ky) * kw + kx]
                                .to_f64();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * sh + ky - ph;
                                let xrow = &x_frame[iy * iw..][..iw];
                                let arow = &mut acc[oy * ow..][..ow];
                                if sw == 1 {
                                    let ix0 = ox_lo + kx - pw;
                                    let xs = &xrow[ix0..][..ox_hi - ox_lo];
                                    let asl = &mut arow[ox_lo..ox_hi];
                                    for (a, xv) in asl.iter_mut().zip(xs) {
                                        *a += wv * xv.to_f64();
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * sw + kx - pw;
                                        arow[ox] += wv * xrow[ix].to_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let o_frame = &mut od[(c_out * ot + o_t) * oh * ow..][..oh * ow];
            for (o, a) in o_frame.iter_mut().zip(&acc) {
                *o = S::from_f64(*a);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d`].
pub fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [ci, t_n, ih, iw] = *x.shape() else {
        return Err(shape_err("rank", "conv3d input must be rank 4".to_string()));
    };
    let [co, _, kt, kh, kw] = *w.shape() else {
        return Err(shape_err("rank", "conv3d weights must be rank 5".to_string()));
    };
    let [_, ot, oh, ow] = *dy.shape() else {
        return Err(shape_err("rank", "conv3d output grad must be rank 4".to_string()));
    };
    let (st, sh, sw) = (spec.stride[0], spec.stride[1], spec.stride[2]);
    let (pt, ph, pw) = (spec.pad[0], spec.pad[1], spec.pad[2]);

    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![0f64; x.len()];
    let mut dw = vec![0f64; w.len()];
    let mut db = vec![0f64; co];

    for c_out in 0..co {
        for o_t in 0..ot {
            let dy_frame = &dyd[(c_out * ot + o_t) * oh * ow..][..oh * ow];
            let mut dbv = 0f64;
            for g in dy_frame {
                dbv += g.to_f64();
            }
            db[c_out] += dbv;
            for c_in in 0..ci {
                for k_t in 0..kt {
                    let Some(it) = (o_t * st + k_t).checked_sub(pt) else {
                        continue;
                    };
                    if it >= t_n {
                        continue;
                    }
                    let x_frame = &xd[(c_in * t_n + it) * ih * iw..][..ih * iw];
                    let dx_base = (c_in * t_n + it) * ih * iw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = axis_bounds(oh, ih, ky, sh, ph);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = axis_bounds(ow, iw, kx, sw, pw);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let widx = (((c_out * ci + c_in) * kt + k_t) * kh + ky) * kw + kx;
                            let wv = wd[widx].to_f64();
                            let mut dwv = 0f64;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * sh + ky - ph;
                                let dyrow = &dy_frame[oy * ow..][..ow];
                                if sw == 1 {
                                    let ix0 = ox_lo + kx - pw;
                                    let n = ox_hi - ox_lo;
                                    let xr = &x_frame[iy * iw + ix0..][..n];
                                    let dxr = &mut dx[dx_base + iy * iw + ix0..][..n];
                                    let dyr = &dyrow[ox_lo..ox_hi];
                                    for i in 0..n {
                                        let g = dyr[i].to_f64();
                                        dwv += g * xr[i].to_f64();
                                        dxr[i] += g * wv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * sw + kx - pw;
                                        let g = dyrow[ox].to_f64();
                                        dwv += g * x_frame[iy * iw + ix].to_f64();
                                        dx[dx_base + iy * iw + ix] += g * wv;
                                    }
                                }
                            }
                            dw[widx] += dwv;
                        }
                    }
                }
            }
        }
    }

    let dx = Tensor::from_vec(x.shape(), dx.iter().map(|&v| S::from_f64(v)).collect())?;
    let dw = Tensor::from_vec(w.shape(), dw.iter().map(|&v| S::from_f64(v)).collect())?;
    let db = Tensor::from_vec(&[co], db.iter().map(|&v| S::from_f64(v)).collect())?;
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

/// Max pooling over `(t,h,w)` windows. Returns the pooled tensor and, for each
/// output element, the flat index of the selected input element (first maximal
/// index in scan order on ties). Padding contributes `-inf` and is never
/// selected; `pad < kernel` is required so every window sees a real value.
pub fn maxpool<S: Scalar>(x: &Tensor<S>, spec: &ConvSpec) -> Result<(Tensor<S>, Vec<u32>)> {
    spec.validate()?;
    for axis in 0..3 {
        if spec.pad[axis] >= spec.kernel[axis] {
            return Err(shape_err(
                ["t", "h", "w"][axis],
                format!(
                    "pool pad {} must be smaller than kernel {}",
                    spec.pad[axis], spec.kernel[axis]
                ),
            ));
        }
    }
    let (c_n, t_n, ih, iw) = frame_geom(x, "maxpool input")?;
    let ot = spec.out_extent(0, t_n)?;
    let oh = spec.out_extent(1, ih)?;
    let ow = spec.out_extent(2, iw)?;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;

    let out_shape: Vec<usize> = if x.rank() == 3 {
        vec![c_n, oh, ow]
    } else {
        vec![c_n, ot, oh, ow]
    };
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0u32; out.len()];
    let xd = x.data();
    let od = out.data_mut();

    let mut oi = 0usize;
    for c in 0..c_n {
        for o_t in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::NEG_INFINITY;
                    let mut best_idx = u32::MAX;
                    for k_t in 0..kt {
                        let Some(it) = (o_t * st + k_t).checked_sub(pt) else {
                            continue;
                        };
                        if it >= t_n {
                            continue;
                        }
                        for ky in 0..kh {
                            let Some(iy) = (oy * sh + ky).checked_sub(ph) else {
                                continue;
                            };
                            if iy >= ih {
                                continue;
                            }
                            for kx in 0..kw {
                                let Some(ix) = (ox * sw + kx).checked_sub(pw) else {
                                    continue;
                                };
                                if ix >= iw {
                                    continue;
                                }
                                let idx = ((c * t_n + it) * ih + iy) * iw + ix;
                                let v = xd[idx];
                                if best_idx == u32::MAX || v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes output gradients back to the recorded argmax positions.
pub fn maxpool_backward<S: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (g, &idx) in dy.data().iter().zip(argmax) {
        dxd[idx as usize] += *g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// nearest-neighbour upsampling
// ---------------------------------------------------------------------------

/// Nearest-neighbour upsampling of the trailing two axes to `(th, tw)` using
/// the index map `src = floor(dst * in / out)`. Exact value copies, never a
/// downscale.
pub fn upsample_nearest<S: Scalar>(x: &Tensor<S>, th: usize, tw: usize) -> Result<Tensor<S>> {
    if x.rank() < 2 {
        return Err(shape_err("rank", "upsample needs at least rank 2".to_string()));
    }
    let ih = x.extent(x.rank() - 2);
    let iw = x.extent(x.rank() - 1);
    if th < ih || tw < iw {
        return Err(Error::InvalidArgument(format!(
            "upsample target {th}x{tw} smaller than source {ih}x{iw}"
        )));
    }
    let lead: usize = x.shape()[..x.rank() - 2].iter().product();
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = th;
    shape[r - 1] = tw;
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    let od = out.data_mut();
    let col_map: Vec<usize> = (0..tw).map(|dx| dx * iw / tw).collect();
    for l in 0..lead {
        let src = &xd[l * ih * iw..][..ih * iw];
        let dst = &mut od[l * th * tw..][..th * tw];
        for dy in 0..th {
            let sy = dy * ih / th;
            let srow = &src[sy * iw..][..iw];
            let drow = &mut dst[dy * tw..][..tw];
            for (d, &sx) in drow.iter_mut().zip(&col_map) {
                *d = srow[sx];
            }
        }
    }
    Ok(out)
}

/// Sums output gradients over all destinations that copied each source element.
pub fn upsample_nearest_backward<S: Scalar>(
    x_shape: &[usize],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let r = x_shape.len();
    let (ih, iw) = (x_shape[r - 2], x_shape[r - 1]);
    let (th, tw) = (dy.extent(r - 2), dy.extent(r - 1));
    let lead: usize = x_shape[..r - 2].iter().product();
    let mut dx = Tensor::zeros(x_shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let col_map: Vec<usize> = (0..tw).map(|dxc| dxc * iw / tw).collect();
    for l in 0..lead {
        let g = &dyd[l * th * tw..][..th * tw];
        let d = &mut dxd[l * ih * iw..][..ih * iw];
        for y in 0..th {
            let sy = y * ih / th;
            let grow = &g[y * tw..][..tw];
            let drow = &mut d[sy * iw..][..iw];
            for (gv, &sx) in grow.iter().zip(&col_map) {
                drow[sx] += *gv;
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

/// Numerically stable sigmoid. Outputs are clamped to stay strictly inside
/// `(0,1)` even where rounding would saturate the storage type.
pub fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    let x = v.to_f64();
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    let lo = S::EPS.to_f64() * 1e-10 + f64::MIN_POSITIVE;
    let hi = 1.0 - S::EPS.to_f64() / 2.0;
    S::from_f64(y.clamp(lo, hi))
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid_scalar)
}

pub fn tanh<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::from_f64(v.to_f64().tanh()))
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.maximum(S::ZERO))
}

fn zip2<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "all",
            format!("{what} requires identical shapes, got {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip2(a, b, "add", |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip2(a, b, "sub", |x, y| x - y)
}

pub fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip2(a, b, "hadamard", |x, y| x * y)
}

pub fn one_minus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::ONE - v)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, a: S) -> Tensor<S> {
    x.map(|v| v * a)
}

/// Adds a per-channel bias `b: [C]` to `x: [C, ...]`.
pub fn bias_add<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let c = x.extent(0);
    if b.shape() != [c] {
        return Err(shape_err(
            "channel",
            format!("bias shape {:?} does not match {} channels", b.shape(), c),
        ));
    }
    let per = x.len() / c;
    let mut out = x.clone();
    let od = out.data_mut();
    for ch in 0..c {
        let bv = b.data()[ch];
        for v in &mut od[ch * per..][..per] {
            *v += bv;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Fully-connected map: `x: [N]`, `w: [M,N]`, `b: [M]` -> `[M]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let [n] = *x.shape() else {
        return Err(shape_err("rank", format!("linear input must be rank 1, got {:?}", x.shape())));
    };
    let [m, wn] = *w.shape() else {
        return Err(shape_err("rank", format!("linear weights must be rank 2, got {:?}", w.shape())));
    };
    if wn != n {
        return Err(shape_err(
            "features",
            format!("input has {n} features but weights expect {wn}"),
        ));
    }
    if b.shape() != [m] {
        return Err(shape_err(
            "features",
            format!("bias shape {:?} does not match {m} outputs", b.shape()),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor::zeros(&[m]);
    let od = out.data_mut();
    for i in 0..m {
        let row = &wd[i * n..][..n];
        let mut acc = b.data()[i].to_f64();
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv.to_f64() * xv.to_f64();
        }
        od[i] = S::from_f64(acc);
    }
    Ok(out)
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let n = x.len();
    let m = dy.len();
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0f64; n];
    let mut dw = Tensor::zeros(w.shape());
    let dwd = dw.data_mut();
    for i in 0..m {
        let g = dyd[i].to_f64();
        let row = &wd[i * n..][..n];
        let drow = &mut dwd[i * n..][..n];
        for j in 0..n {
            dx[j] += g * row[j].to_f64();
            drow[j] = S::from_f64(g * xd[j].to_f64());
        }
    }
    let dx = Tensor::from_vec(x.shape(), dx.iter().map(|&v| S::from_f64(v)).collect())?;
    let db = dy.clone();
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel statistics of `x: [C, ...]` over all non-channel positions.
/// Returns `(mean, biased variance)` per channel as `f64`.
pub fn channel_stats<S: Scalar>(x: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
    let c = x.extent(0);
    let per = x.len() / c;
    let xd = x.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let sl = &xd[ch * per..][..per];
        let mut s = 0f64;
        for v in sl {
            s += v.to_f64();
        }
        let m = s / per as f64;
        let mut q = 0f64;
        for v in sl {
            let d = v.to_f64() - m;
            q += d * d;
        }
        mean[ch] = m;
        var[ch] = q / per as f64;
    }
    (mean, var)
}

/// Normalizes `x` with the given per-channel statistics and affine parameters.
pub fn batchnorm_apply<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &[f64],
    invstd: &[f64],
) -> Result<Tensor<S>> {
    let c = x.extent(0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "channel",
            format!(
                "batchnorm gamma/beta shapes {:?}/{:?} do not match {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    let per = x.len() / c;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        let g = gamma.data()[ch].to_f64();
        let b = beta.data()[ch].to_f64();
        let m = mean[ch];
        let is = invstd[ch];
        let src = &xd[ch * per..][..per];
        let dst = &mut od[ch * per..][..per];
        for (o, v) in dst.iter_mut().zip(src) {
            *o = S::from_f64((v.to_f64() - m) * is * g + b);
        }
    }
    Ok(out)
}

pub fn invstd_from_var(var: &[f64], eps: f64) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
}

/// Backward through train-mode batch normalization (statistics are functions
/// of the input).
pub fn batchnorm_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &[f64],
    invstd: &[f64],
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let c = x.extent(0);
    let per = x.len() / c;
    let n = per as f64;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let g = gamma.data()[ch].to_f64();
        let m = mean[ch];
        let is = invstd[ch];
        let xs = &xd[ch * per..][..per];
        let gs = &dyd[ch * per..][..per];
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for (v, dyv) in xs.iter().zip(gs) {
            let xh = (v.to_f64() - m) * is;
            let d = dyv.to_f64();
            sum_dy += d;
            sum_dy_xhat += d * xh;
        }
        dgamma.data_mut()[ch] = S::from_f64(sum_dy_xhat);
        dbeta.data_mut()[ch] = S::from_f64(sum_dy);
        let dst = &mut dx.data_mut()[ch * per..][..per];
        let k = g * is / n;
        for ((o, v), dyv) in dst.iter_mut().zip(xs).zip(gs) {
            let xh = (v.to_f64() - m) * is;
            *o = S::from_f64(k * (n * dyv.to_f64() - sum_dy - xh * sum_dy_xhat));
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Backward through eval-mode batch normalization (statistics are constants).
pub fn batchnorm_eval_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &[f64],
    invstd: &[f64],
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let c = x.extent(0);
    let per = x.len() / c;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let g = gamma.data()[ch].to_f64();
        let m = mean[ch];
        let is = invstd[ch];
        let xs = &xd[ch * per..][..per];
        let gs = &dyd[ch * per..][..per];
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        let dst = &mut dx.data_mut()[ch * per..][..per];
        for ((o, v), dyv) in dst.iter_mut().zip(xs).zip(gs) {
            let d = dyv.to_f64();
            sum_dy += d;
            sum_dy_xhat += d * (v.to_f64() - m) * is;
            *o = S::from_f64(d * g * is);
        }
        dgamma.data_mut()[ch] = S::from_f64(sum_dy_xhat);
        dbeta.data_mut()[ch] = S::from_f64(sum_dy);
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// shape plumbing: concat / slice / stack
// ---------------------------------------------------------------------------

/// Concatenates along the channel axis (axis 0). Trailing extents must agree.
pub fn concat_ch<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
        return Err(shape_err(
            "channel",
            format!("cannot concat {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.extent(0);
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

/// Extracts frame `t` of `x: [C,T,H,W]` as `[C,H,W]`.
pub fn slice_time<S: Scalar>(x: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
    let [c, t_n, h, w] = *x.shape() else {
        return Err(shape_err("rank", format!("slice_time needs rank 4, got {:?}", x.shape())));
    };
    if t >= t_n {
        return Err(shape_err("t", format!("frame {t} out of range 0..{t_n}")));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let per = h * w;
    for ch in 0..c {
        let src = &x.data()[(ch * t_n + t) * per..][..per];
        out.data_mut()[ch * per..][..per].copy_from_slice(src);
    }
    Ok(out)
}

/// Stacks `T` frames `[C,H,W]` into `[C,T,H,W]`.
pub fn stack_time<S: Scalar>(frames: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("stack_time of zero frames".to_string()));
    };
    let [c, h, w] = *first.shape() else {
        return Err(shape_err("rank", format!("stack_time frames must be rank 3, got {:?}", first.shape())));
    };
    let t_n = frames.len();
    for f in frames {
        if f.shape() != first.shape() {
            return Err(shape_err(
                "all",
                format!("stack_time frame shape {:?} != {:?}", f.shape(), first.shape()),
            ));
        }
    }
    let per = h * w;
    let mut out = Tensor::zeros(&[c, t_n, h, w]);
    for (t, f) in frames.iter().enumerate() {
        for ch in 0..c {
            let src = &f.data()[ch * per..][..per];
            out.data_mut()[(ch * t_n + t) * per..][..per].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Scatter-adds a `[C,H,W]` gradient into frame `t` of a `[C,T,H,W]` buffer.
pub fn scatter_time<S: Scalar>(dx: &mut Tensor<S>, t: usize, dframe: &Tensor<S>) {
    let t_n = dx.extent(1);
    let per = dx.extent(2) * dx.extent(3);
    let c = dx.extent(0);
    for ch in 0..c {
        let dst = &mut dx.data_mut()[(ch * t_n + t) * per..][..per];
        let src = &dframe.data()[ch * per..][..per];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Cross-entropy of a logit vector against a class index, computed via
/// log-sum-exp with max subtraction. Returns the loss and the softmax.
pub fn cross_entropy_logits<S: Scalar>(logits: &Tensor<S>, target: usize) -> Result<(f64, Vec<f64>)> {
    let [k] = *logits.shape() else {
        return Err(shape_err("rank", format!("logits must be rank 1, got {:?}", logits.shape())));
    };
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} out of range 0..{k}")));
    }
    let z: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0f64;
    for v in &z {
        denom += (v - m).exp();
    }
    let lse = m + denom.ln();
    let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    Ok((lse - z[target], probs))
}

/// Softmax of a rank-1 tensor.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [_k] = *x.shape() else {
        return Err(shape_err("rank", format!("softmax input must be rank 1, got {:?}", x.shape())));
    };
    let z: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0f64;
    for v in &z {
        denom += (v - m).exp();
    }
    let data = z.iter().map(|v| S::from_f64((v - m).exp() / denom)).collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> f64 {
    x.data().iter().map(|v| v.to_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel of [1], zero bias: output equals input.
        let x = t3(2, 2, vec![1.0, -2.5, 3.0, 0.25]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), &ConvSpec::spatial(1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_window() {
        // Direct-definition oracle: each output is the window sum.
        let x = t3(3, 3, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), &ConvSpec::spatial(2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv2d_zero_kernel_zero_out() {
        let x = t3(3, 3, (0..9).map(|v| v as f32).collect());
        let w = Tensor::zeros(&[2, 1, 2, 2]);
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &w, Some(&b), &ConvSpec::spatial(2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_shape_mismatch_names_axis() {
        let x = t3(3, 3, vec![0.0; 9]);
        let w = Tensor::zeros(&[1, 2, 2, 2]); // expects 2 input channels
        let err = conv2d(&x, &w, None, &ConvSpec::spatial(2, 2)).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn conv3d_ones_cube() {
        // 2x2x2 all-ones input and kernel -> single value 8.
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let y = conv3d(&x, &w, None, &ConvSpec::cube(2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn conv3d_identity_and_zero() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![4.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d(&x, &w, None, &ConvSpec::cube(1, 1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
        let zero = Tensor::zeros(&[1, 2, 1, 2]);
        let y = conv3d(&zero, &w, None, &ConvSpec::cube(1, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_conv3d_with_unit_time() {
        let x2 = t3(4, 4, (0..16).map(|v| v as f32 * 0.3 - 1.0).collect());
        let x3 = x2.reshaped(&[1, 1, 4, 4]).unwrap();
        let w2 = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|v| (v as f32).sin()).collect()).unwrap();
        let w3 = w2.reshaped(&[2, 1, 1, 3, 3]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let spec2 = ConvSpec::spatial(3, 3).with_pad(0, 1, 1);
        let spec3 = ConvSpec::cube(1, 3, 3).with_pad(0, 1, 1);
        let y2 = conv2d(&x2, &w2, Some(&b), &spec2).unwrap();
        let y3 = conv3d(&x3, &w3, Some(&b), &spec3).unwrap();
        assert_eq!(y2.data(), y3.data());
    }

    #[test]
    fn maxpool_basics() {
        let x = t3(2, 2, vec![1., 2., 3., 4.]);
        let spec = ConvSpec::spatial(2, 2).with_stride(1, 2, 2);
        let (y, _) = maxpool(&x, &spec).unwrap();
        assert_eq!(y.data(), &[4.0]);

        // constant input -> constant output
        let c = t3(3, 3, vec![0.7; 9]);
        let (y, _) = maxpool(&c, &ConvSpec::spatial(3, 3).with_stride(1, 1, 1).with_pad(0, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));

        // strided window oracle
        let r = t3(1, 4, vec![1., 2., 3., 4.]);
        let (y, _) = maxpool(&r, &ConvSpec::spatial(1, 2).with_stride(1, 1, 2)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = t3(2, 2, vec![0.0; 4]);
        assert!(maxpool(&x, &ConvSpec::spatial(3, 3)).is_err());
    }

    #[test]
    fn upsample_constant_identity_and_map() {
        // 1x1 -> all copies of the single value
        let x = t3(1, 1, vec![0.4]);
        let y = upsample_nearest(&x, 3, 5).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5]);
        assert!(y.data().iter().all(|&v| v == 0.4));

        // identity when target == source
        let x = t3(2, 2, vec![1., 2., 3., 4.]);
        let y = upsample_nearest(&x, 2, 2).unwrap();
        assert_eq!(y.data(), x.data());

        // index-map oracle: src = floor(dst * in / out)
        let y = upsample_nearest(&x, 4, 4).unwrap();
        let expect: Vec<f32> = (0..4)
            .flat_map(|dy| (0..4).map(move |dx| (dy, dx)))
            .map(|(dy, dx)| x.data()[(dy * 2 / 4) * 2 + dx * 2 / 4])
            .collect();
        assert_eq!(y.data(), &expect[..]);

        // downscale is rejected
        assert!(upsample_nearest(&x, 1, 2).is_err());
    }

    #[test]
    fn sigmoid_closed_forms() {
        let x = Tensor::from_vec(&[2], vec![0.0f32, 3f32.ln()]).unwrap();
        let y = sigmoid(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-7);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
        let t = tanh(&Tensor::scalar(0.0f32));
        assert_eq!(t.data()[0], 0.0);
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        for &v in &[-1e4f32, -30.0, 0.0, 30.0, 1e4] {
            let y = sigmoid(&Tensor::scalar(v)).data()[0];
            assert!(y > 0.0 && y < 1.0, "sigmoid({v}) = {y}");
        }
    }

    #[test]
    fn hadamard_identity_and_shape_check() {
        let a = t3(2, 2, vec![1., 2., 3., 4.]);
        let ones = Tensor::filled(&[1, 2, 2], 1.0f32);
        assert_eq!(hadamard(&a, &ones).unwrap().data(), a.data());
        let bad = Tensor::zeros(&[1, 2, 3]);
        assert!(hadamard(&a, &bad).is_err());
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::from_vec(&[3], vec![1., 2., 3.]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10., -10.]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[8.0, -7.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f32>::zeros(&[8]);
        let (loss, probs) = cross_entropy_logits(&logits, 3).unwrap();
        assert!((loss - (8f64).ln()).abs() < 1e-12);
        assert!(probs.iter().all(|p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn concat_slice_stack_roundtrip() {
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let c = concat_ch(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 1, 2]);
        let f0 = slice_time(&c, 0).unwrap();
        let f1 = slice_time(&c, 1).unwrap();
        let back = stack_time(&[&f0, &f1]).unwrap();
        assert_eq!(back.data(), c.data());
    }
}
