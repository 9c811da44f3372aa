//! Spatial kernels: convolution, bilinear resampling, warping, correlation
//! cost volumes, pooling and padding.
//!
//! These are the plain (non-differentiating) implementations. The autodiff
//! graph in [`crate::graph`] calls the `*_backward` counterparts to propagate
//! gradients; both directions live here so the index arithmetic stays in one
//! place.
//!
//! Batch items are processed in parallel with rayon. Every parallel split
//! writes disjoint output ranges and reductions run in a fixed order, so
//! results are bit-identical regardless of thread count. The `UFTSN_THREADS`
//! environment variable caps the worker pool.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Elem, Tensor};
use rayon::prelude::*;

/// Builds the global rayon pool, honoring `UFTSN_THREADS` when set.
pub fn ensure_thread_pool() {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        if let Ok(s) = std::env::var("UFTSN_THREADS") {
            if let Ok(n) = s.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

#[inline]
fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(Error::Shape(format!(
            "kernel {k} exceeds padded input extent {} ({n} + 2*{pad})",
            n + 2 * pad
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

fn conv_check<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    let (o, i, kh, kw) = weight.dims4()?;
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square, got {kh}x{kw}"
        )));
    }
    if kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel size must be odd, got {kh}"
        )));
    }
    if i != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c} channels, weight expects {i} \
             (input {:?}, weight {:?})",
            input.shape(),
            weight.shape()
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!(
            "conv2d stride must be 1 or 2, got {stride}"
        )));
    }
    let h_out = conv_out_len(h, kh, stride, padding)?;
    let w_out = conv_out_len(w, kh, stride, padding)?;
    Ok((b, c, h, w, o, kh, h_out, w_out))
}

/// Unfolds one batch item into a `(c*k*k) x (h_out*w_out)` patch matrix.
/// `cols` must be zero-filled on entry.
fn im2col<T: Elem>(
    plane_in: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [T],
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &plane_in[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let oy_lo = if pad > ky { div_ceil(pad - ky, stride) } else { 0 };
            let oy_hi = if h + pad <= ky {
                0
            } else {
                ((h - 1 + pad - ky) / stride + 1).min(h_out)
            };
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_out;
                let ox_lo = if pad > kx { div_ceil(pad - kx, stride) } else { 0 };
                let ox_hi = if w + pad <= kx {
                    0
                } else {
                    ((w - 1 + pad - kx) / stride + 1).min(w_out)
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let dst_base = row + oy * w_out;
                    let src_base = iy * w + ox_lo * stride + kx - pad;
                    if stride == 1 {
                        let n = ox_hi - ox_lo;
                        cols[dst_base + ox_lo..dst_base + ox_hi]
                            .copy_from_slice(&plane[src_base..src_base + n]);
                    } else {
                        let mut si = src_base;
                        for d in cols[dst_base + ox_lo..dst_base + ox_hi].iter_mut() {
                            *d = plane[si];
                            si += stride;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input plane, accumulating
/// overlapping contributions.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Elem>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    plane_out: &mut [T],
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &mut plane_out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let oy_lo = if pad > ky { div_ceil(pad - ky, stride) } else { 0 };
            let oy_hi = if h + pad <= ky {
                0
            } else {
                ((h - 1 + pad - ky) / stride + 1).min(h_out)
            };
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_out;
                let ox_lo = if pad > kx { div_ceil(pad - kx, stride) } else { 0 };
                let ox_hi = if w + pad <= kx {
                    0
                } else {
                    ((w - 1 + pad - kx) / stride + 1).min(w_out)
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let src_base = row + oy * w_out;
                    let dst_base = iy * w + ox_lo * stride + kx - pad;
                    if stride == 1 {
                        let n = ox_hi - ox_lo;
                        let src = &cols[src_base + ox_lo..src_base + ox_hi];
                        let dst = &mut plane[dst_base..dst_base + n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        let mut di = dst_base;
                        for s in &cols[src_base + ox_lo..src_base + ox_hi] {
                            plane[di] += *s;
                            di += stride;
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution, BCHW input against OIkk weights.
///
/// Output spatial size is `floor((n + 2*padding - k)/stride) + 1` per axis.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    ensure_thread_pool();
    let (b, c, h, w, o, k, h_out, w_out) = conv_check(input, weight, stride, padding)?;
    let hw_out = h_out * w_out;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[b, o, h_out, w_out]);
    let in_data = input.data();
    let w_data = weight.data();
    out.data_mut()
        .par_chunks_mut(o * hw_out)
        .enumerate()
        .for_each(|(bi, out_chunk)| {
            let mut cols = vec![T::zero(); ckk * hw_out];
            let plane_in = &in_data[bi * c * h * w..(bi + 1) * c * h * w];
            im2col(plane_in, c, h, w, k, stride, padding, h_out, w_out, &mut cols);
            unsafe {
                T::gemm(
                    o,
                    ckk,
                    hw_out,
                    T::one(),
                    w_data.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    hw_out as isize,
                    1,
                    T::zero(),
                    out_chunk.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_thread_pool();
    let (b, c, h, w, o, k, h_out, w_out) = conv_check(input, weight, stride, padding)?;
    let (gb, go, gh, gw) = grad_out.dims4()?;
    if (gb, go, gh, gw) != (b, o, h_out, w_out) {
        return Err(Error::Shape(format!(
            "conv2d grad shape {:?} does not match output [{b}, {o}, {h_out}, {w_out}]",
            grad_out.shape()
        )));
    }
    let hw_out = h_out * w_out;
    let ckk = c * k * k;
    let mut grad_input = Tensor::zeros(input.shape());
    let in_data = input.data();
    let w_data = weight.data();
    let g_data = grad_out.data();

    let per_item: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(c * h * w)
        .enumerate()
        .map(|(bi, gi_chunk)| {
            let g_chunk = &g_data[bi * o * hw_out..(bi + 1) * o * hw_out];
            let plane_in = &in_data[bi * c * h * w..(bi + 1) * c * h * w];
            let mut cols = vec![T::zero(); ckk * hw_out];
            im2col(plane_in, c, h, w, k, stride, padding, h_out, w_out, &mut cols);

            // grad_w_b = grad_out_b (o x hw) * cols^T (hw x ckk)
            let mut grad_w_local = vec![T::zero(); o * ckk];
            unsafe {
                T::gemm(
                    o,
                    hw_out,
                    ckk,
                    T::one(),
                    g_chunk.as_ptr(),
                    hw_out as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    hw_out as isize,
                    T::zero(),
                    grad_w_local.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }

            // grad_cols = weight^T (ckk x o) * grad_out_b (o x hw)
            let mut grad_cols = vec![T::zero(); ckk * hw_out];
            unsafe {
                T::gemm(
                    ckk,
                    o,
                    hw_out,
                    T::one(),
                    w_data.as_ptr(),
                    1,
                    ckk as isize,
                    g_chunk.as_ptr(),
                    hw_out as isize,
                    1,
                    T::zero(),
                    grad_cols.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
            col2im_acc(
                &grad_cols, c, h, w, k, stride, padding, h_out, w_out, gi_chunk,
            );
            grad_w_local
        })
        .collect();

    // Fixed-order reduction keeps the result independent of thread count.
    let mut grad_weight = Tensor::zeros(weight.shape());
    for local in &per_item {
        for (d, s) in grad_weight.data_mut().iter_mut().zip(local) {
            *d += *s;
        }
    }
    Ok((grad_input, grad_weight))
}

/// Leaky ReLU: `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Elem>(input: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    if slope < T::zero() || slope >= T::one() {
        return Err(Error::InvalidArgument(format!(
            "leaky_relu slope must be in [0, 1), got {slope}"
        )));
    }
    Ok(input.map(|v| if v >= T::zero() { v } else { slope * v }))
}

/// Sampling tables for bilinear 2x upsampling with the align-corners-false
/// convention: output index `i` samples source coordinate `(i + 0.5)/2 - 0.5`.
fn upsample_axis_table<T: Elem>(n: usize) -> Vec<(usize, usize, T)> {
    let n_out = 2 * n;
    let max = T::from_f64((n - 1) as f64);
    (0..n_out)
        .map(|i| {
            let mut src = T::from_f64((i as f64 + 0.5) / 2.0 - 0.5);
            if src < T::zero() {
                src = T::zero();
            }
            if src > max {
                src = max;
            }
            let i0f = src.floor();
            let i0 = i0f.to_f64() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0f)
        })
        .collect()
}

/// Bilinear 2x upsampling of a BCHW tensor.
pub fn upsample_bilinear_2x<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_thread_pool();
    let (b, c, h, w) = input.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let ys = upsample_axis_table::<T>(h);
    let xs = upsample_axis_table::<T>(w);
    let mut out = Tensor::zeros(&[b, c, h2, w2]);
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(c * h2 * w2)
        .enumerate()
        .for_each(|(bi, out_chunk)| {
            for ci in 0..c {
                let plane = &in_data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let dst = &mut out_chunk[ci * h2 * w2..(ci + 1) * h2 * w2];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let r0 = &plane[y0 * w..y0 * w + w];
                    let r1 = &plane[y1 * w..y1 * w + w];
                    let row = &mut dst[oy * w2..(oy + 1) * w2];
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let top = r0[x0] * (T::one() - wx) + r0[x1] * wx;
                        let bot = r1[x0] * (T::one() - wx) + r1[x1] * wx;
                        row[ox] = top * (T::one() - wy) + bot * wy;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of [`upsample_bilinear_2x`] with respect to its input.
pub fn upsample_bilinear_2x_backward<T: Elem>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    ensure_thread_pool();
    let mut grad_in = Tensor::<T>::zeros(input_shape);
    let (b, c, h, w) = grad_in.dims4()?;
    let (gb, gc, gh, gw) = grad_out.dims4()?;
    if (gb, gc, gh, gw) != (b, c, 2 * h, 2 * w) {
        return Err(Error::Shape(format!(
            "upsample grad shape {:?} does not match [{b}, {c}, {}, {}]",
            grad_out.shape(),
            2 * h,
            2 * w
        )));
    }
    let (h2, w2) = (2 * h, 2 * w);
    let ys = upsample_axis_table::<T>(h);
    let xs = upsample_axis_table::<T>(w);
    let g_data = grad_out.data();
    grad_in
        .data_mut()
        .par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, gi_chunk)| {
            for ci in 0..c {
                let g_plane = &g_data[(bi * c + ci) * h2 * w2..(bi * c + ci + 1) * h2 * w2];
                let dst = &mut gi_chunk[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let g = g_plane[oy * w2 + ox];
                        dst[y0 * w + x0] += g * (T::one() - wx) * (T::one() - wy);
                        dst[y0 * w + x1] += g * wx * (T::one() - wy);
                        dst[y1 * w + x0] += g * (T::one() - wx) * wy;
                        dst[y1 * w + x1] += g * wx * wy;
                    }
                }
            }
        });
    Ok(grad_in)
}

struct SampleTable<T> {
    i00: Vec<usize>,
    i01: Vec<usize>,
    i10: Vec<usize>,
    i11: Vec<usize>,
    wx: Vec<T>,
    wy: Vec<T>,
    in_x: Vec<bool>,
    in_y: Vec<bool>,
}

/// Per-pixel bilinear sampling positions for `x + flow(x)`, borders clamped.
fn warp_table<T: Elem>(u: &[T], v: &[T], h: usize, w: usize) -> SampleTable<T> {
    let n = h * w;
    let mut t = SampleTable {
        i00: vec![0; n],
        i01: vec![0; n],
        i10: vec![0; n],
        i11: vec![0; n],
        wx: vec![T::zero(); n],
        wy: vec![T::zero(); n],
        in_x: vec![false; n],
        in_y: vec![false; n],
    };
    let max_x = T::from_f64((w - 1) as f64);
    let max_y = T::from_f64((h - 1) as f64);
    let mut p = 0;
    for y in 0..h {
        for x in 0..w {
            let sx_un = T::from_f64(x as f64) + u[p];
            let sy_un = T::from_f64(y as f64) + v[p];
            let sx = sx_un.max(T::zero()).min(max_x);
            let sy = sy_un.max(T::zero()).min(max_y);
            let x0f = sx.floor();
            let y0f = sy.floor();
            let x0 = x0f.to_f64() as usize;
            let y0 = y0f.to_f64() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            t.i00[p] = y0 * w + x0;
            t.i01[p] = y0 * w + x1;
            t.i10[p] = y1 * w + x0;
            t.i11[p] = y1 * w + x1;
            t.wx[p] = sx - x0f;
            t.wy[p] = sy - y0f;
            t.in_x[p] = sx_un > T::zero() && sx_un < max_x;
            t.in_y[p] = sy_un > T::zero() && sy_un < max_y;
            p += 1;
        }
    }
    t
}

/// Backward warp: `out(x) = feature(x + flow(x))` with bilinear sampling.
///
/// `flow` is B2HW with channel 0 holding the horizontal displacement (u,
/// positive rightward) and channel 1 the vertical one (v, positive downward).
/// Out-of-bounds sample coordinates are clamped to the border.
pub fn warp<T: Elem>(feature: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_thread_pool();
    let (b, c, h, w) = feature.dims4()?;
    let (fb, fc, fh, fw) = flow.dims4()?;
    if fb != b || fc != 2 || fh != h || fw != w {
        return Err(Error::Shape(format!(
            "warp flow must be [{b}, 2, {h}, {w}], got {:?}",
            flow.shape()
        )));
    }
    let hw = h * w;
    let f_data = feature.data();
    let fl_data = flow.data();
    let mut out = Tensor::zeros(feature.shape());
    out.data_mut()
        .par_chunks_mut(c * hw)
        .enumerate()
        .for_each(|(bi, out_chunk)| {
            let u = &fl_data[bi * 2 * hw..bi * 2 * hw + hw];
            let v = &fl_data[bi * 2 * hw + hw..(bi + 1) * 2 * hw];
            let t = warp_table(u, v, h, w);
            for ci in 0..c {
                let plane = &f_data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let dst = &mut out_chunk[ci * hw..(ci + 1) * hw];
                for p in 0..hw {
                    let (wx, wy) = (t.wx[p], t.wy[p]);
                    let top = plane[t.i00[p]] * (T::one() - wx) + plane[t.i01[p]] * wx;
                    let bot = plane[t.i10[p]] * (T::one() - wx) + plane[t.i11[p]] * wx;
                    dst[p] = top * (T::one() - wy) + bot * wy;
                }
            }
        });
    Ok(out)
}

/// Gradients of [`warp`] with respect to the feature map and the flow.
///
/// The clamp at the border zeroes the flow gradient for samples that landed
/// outside the image.
pub fn warp_backward<T: Elem>(
    feature: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_thread_pool();
    check_same_shape("warp grad vs feature", feature, grad_out)?;
    let (b, c, h, w) = feature.dims4()?;
    let hw = h * w;
    let f_data = feature.data();
    let fl_data = flow.data();
    let g_data = grad_out.data();
    let mut grad_feature = Tensor::zeros(feature.shape());
    let mut grad_flow = Tensor::zeros(flow.shape());

    let gf_ptr = grad_feature.data_mut();
    let gl_ptr = grad_flow.data_mut();
    gf_ptr
        .par_chunks_mut(c * hw)
        .zip(gl_ptr.par_chunks_mut(2 * hw))
        .enumerate()
        .for_each(|(bi, (gf_chunk, gl_chunk))| {
            let u = &fl_data[bi * 2 * hw..bi * 2 * hw + hw];
            let v = &fl_data[bi * 2 * hw + hw..(bi + 1) * 2 * hw];
            let t = warp_table(u, v, h, w);
            let (gu, gv) = gl_chunk.split_at_mut(hw);
            for ci in 0..c {
                let plane = &f_data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let g_plane = &g_data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let gf_plane = &mut gf_chunk[ci * hw..(ci + 1) * hw];
                for p in 0..hw {
                    let g = g_plane[p];
                    let (wx, wy) = (t.wx[p], t.wy[p]);
                    let (f00, f01) = (plane[t.i00[p]], plane[t.i01[p]]);
                    let (f10, f11) = (plane[t.i10[p]], plane[t.i11[p]]);
                    gf_plane[t.i00[p]] += g * (T::one() - wx) * (T::one() - wy);
                    gf_plane[t.i01[p]] += g * wx * (T::one() - wy);
                    gf_plane[t.i10[p]] += g * (T::one() - wx) * wy;
                    gf_plane[t.i11[p]] += g * wx * wy;
                    if t.in_x[p] {
                        let dx = (f01 - f00) * (T::one() - wy) + (f11 - f10) * wy;
                        gu[p] += g * dx;
                    }
                    if t.in_y[p] {
                        let dy = (f10 - f00) * (T::one() - wx) + (f11 - f01) * wx;
                        gv[p] += g * dy;
                    }
                }
            }
        });
    Ok((grad_feature, grad_flow))
}

fn cv_check<T: Elem>(
    q1: &Tensor<T>,
    q2: &Tensor<T>,
    radius: usize,
) -> Result<(usize, usize, usize, usize)> {
    check_same_shape("cost_volume inputs", q1, q2)?;
    if radius < 1 {
        return Err(Error::InvalidArgument(
            "cost_volume radius must be >= 1".into(),
        ));
    }
    q1.dims4()
}

/// Correlation cost volume over a `(2r+1)^2` search square.
///
/// Channel `(dy+r)*(2r+1) + (dx+r)` holds the feature dot product between
/// `q1` at each pixel and `q2` displaced by `(dx, dy)`, normalized by the
/// feature length `N`. Displacements falling outside the image contribute 0.
pub fn cost_volume<T: Elem>(q1: &Tensor<T>, q2: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    ensure_thread_pool();
    let (b, n, h, w) = cv_check(q1, q2, radius)?;
    let side = 2 * radius + 1;
    let hw = h * w;
    let inv_n = T::from_f64(1.0 / n as f64);
    let q1_data = q1.data();
    let q2_data = q2.data();
    let mut out = Tensor::zeros(&[b, side * side, h, w]);
    out.data_mut()
        .par_chunks_mut(side * side * hw)
        .enumerate()
        .for_each(|(bi, out_chunk)| {
            let q1b = &q1_data[bi * n * hw..(bi + 1) * n * hw];
            let q2b = &q2_data[bi * n * hw..(bi + 1) * n * hw];
            let r = radius as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let o = ((dy + r) * side as isize + dx + r) as usize;
                    let plane = &mut out_chunk[o * hw..(o + 1) * hw];
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for c in 0..n {
                        let p1 = &q1b[c * hw..(c + 1) * hw];
                        let p2 = &q2b[c * hw..(c + 1) * hw];
                        for y in y_lo..y_hi {
                            let y2 = (y as isize + dy) as usize;
                            let a = &p1[y * w + x_lo..y * w + x_hi];
                            let bseg = &p2[(y2 as isize * w as isize + x_lo as isize + dx) as usize
                                ..(y2 as isize * w as isize + x_hi as isize + dx) as usize];
                            let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(bseg) {
                                *d += av * bv;
                            }
                        }
                    }
                }
            }
            for v in out_chunk.iter_mut() {
                *v *= inv_n;
            }
        });
    Ok(out)
}

/// Gradients of [`cost_volume`] with respect to both feature maps.
pub fn cost_volume_backward<T: Elem>(
    q1: &Tensor<T>,
    q2: &Tensor<T>,
    radius: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_thread_pool();
    let (b, n, h, w) = cv_check(q1, q2, radius)?;
    let side = 2 * radius + 1;
    let hw = h * w;
    let (gb, gc, gh, gw) = grad_out.dims4()?;
    if (gb, gc, gh, gw) != (b, side * side, h, w) {
        return Err(Error::Shape(format!(
            "cost_volume grad shape {:?} does not match [{b}, {}, {h}, {w}]",
            grad_out.shape(),
            side * side
        )));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let q1_data = q1.data();
    let q2_data = q2.data();
    let g_data = grad_out.data();
    let mut grad_q1 = Tensor::zeros(q1.shape());
    let mut grad_q2 = Tensor::zeros(q2.shape());
    grad_q1
        .data_mut()
        .par_chunks_mut(n * hw)
        .zip(grad_q2.data_mut().par_chunks_mut(n * hw))
        .enumerate()
        .for_each(|(bi, (g1_chunk, g2_chunk))| {
            let q1b = &q1_data[bi * n * hw..(bi + 1) * n * hw];
            let q2b = &q2_data[bi * n * hw..(bi + 1) * n * hw];
            let gb_chunk = &g_data[bi * side * side * hw..(bi + 1) * side * side * hw];
            let r = radius as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let o = ((dy + r) * side as isize + dx + r) as usize;
                    let g_plane = &gb_chunk[o * hw..(o + 1) * hw];
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for c in 0..n {
                        let p1 = &q1b[c * hw..(c + 1) * hw];
                        let p2 = &q2b[c * hw..(c + 1) * hw];
                        let g1 = &mut g1_chunk[c * hw..(c + 1) * hw];
                        let g2 = &mut g2_chunk[c * hw..(c + 1) * hw];
                        for y in y_lo..y_hi {
                            let base2 = ((y as isize + dy) * w as isize + dx) as usize;
                            for x in x_lo..x_hi {
                                let ga = g_plane[y * w + x] * inv_n;
                                g1[y * w + x] += ga * p2[base2 + x];
                                g2[base2 + x] += ga * p1[y * w + x];
                            }
                        }
                    }
                }
            }
        });
    Ok((grad_q1, grad_q2))
}

/// 2x2 average pooling; spatial dimensions must be even.
pub fn avg_pool_2x<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avg_pool_2x needs even spatial dims, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[b, c, h2, w2]);
    let in_data = input.data();
    for bc in 0..b * c {
        let plane = &in_data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * h2 * w2..(bc + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                let p = 2 * y * w + 2 * x;
                dst[y * w2 + x] = (plane[p] + plane[p + 1] + plane[p + w] + plane[p + w + 1])
                    * quarter;
            }
        }
    }
    Ok(out)
}

/// Spatial shift with zero padding: `out(y, x) = in(y + dy, x + dx)` where
/// defined, 0 elsewhere.
pub fn shift2d<T: Elem>(input: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let mut out = Tensor::zeros(input.shape());
    let in_data = input.data();
    let hw = h * w;
    for bc in 0..b * c {
        let plane = &in_data[bc * hw..(bc + 1) * hw];
        let dst = &mut out.data_mut()[bc * hw..(bc + 1) * hw];
        for y in 0..h as isize {
            let sy = y + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let x_lo = (-dx).max(0) as usize;
            let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let src_base = (sy * w as isize + x_lo as isize + dx) as usize;
            let dst_base = y as usize * w + x_lo;
            dst[dst_base..dst_base + (x_hi - x_lo)]
                .copy_from_slice(&plane[src_base..src_base + (x_hi - x_lo)]);
        }
    }
    Ok(out)
}

/// Reflect-pads (mirror without edge repetition) on the bottom/right to reach
/// the target spatial size.
pub fn pad_reflect_to<T: Elem>(input: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if th < h || tw < w {
        return Err(Error::Shape(format!(
            "pad target {th}x{tw} smaller than input {h}x{w}"
        )));
    }
    // Triangle-wave fold keeps indices valid for any pad amount.
    let fold = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let j = i % period;
        if j < n {
            j
        } else {
            period - j
        }
    };
    let ys: Vec<usize> = (0..th).map(|y| fold(y, h)).collect();
    let xs: Vec<usize> = (0..tw).map(|x| fold(x, w)).collect();
    let mut out = Tensor::zeros(&[b, c, th, tw]);
    let in_data = input.data();
    for bc in 0..b * c {
        let plane = &in_data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * th * tw..(bc + 1) * th * tw];
        for (y, &sy) in ys.iter().enumerate() {
            for (x, &sx) in xs.iter().enumerate() {
                dst[y * tw + x] = plane[sy * w + sx];
            }
        }
    }
    Ok(out)
}

/// Top-left crop to the target spatial size.
pub fn crop_to<T: Elem>(input: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if th > h || tw > w {
        return Err(Error::Shape(format!(
            "crop target {th}x{tw} larger than input {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[b, c, th, tw]);
    let in_data = input.data();
    for bc in 0..b * c {
        let plane = &in_data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * th * tw..(bc + 1) * th * tw];
        for y in 0..th {
            dst[y * tw..(y + 1) * tw].copy_from_slice(&plane[y * w..y * w + tw]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the independent reference.
    pub fn conv2d_oracle<T: Elem>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Tensor<T> {
        let (b, c, h, w) = input.dims4().unwrap();
        let (o, _, k, _) = weight.dims4().unwrap();
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, o, h_out, w_out]);
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = T::zero();
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data()
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv =
                                        weight.data()[((oi * c + ci) * k + ky) * k + kx];
                                    acc = acc + iv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oi) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_all_ones_sums_kernel() {
        let input = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let weight = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &weight, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let input = Tensor::<f32>::from_fn(&[1, 1, 4, 5], |i| i as f32 * 0.1);
        let mut wdata = vec![0.0f32; 9];
        wdata[4] = 1.0;
        let weight = Tensor::new(vec![1, 1, 3, 3], wdata).unwrap();
        let out = conv2d(&input, &weight, 1, 1).unwrap();
        assert_eq!(out.shape(), input.shape());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for (seed, stride, pad) in [(1u64, 1usize, 0usize), (2, 1, 1), (3, 2, 1), (4, 2, 0)] {
            let input = rng_tensor(&[2, 2, 5, 5], seed);
            let weight = rng_tensor(&[3, 2, 3, 3], seed + 100);
            let got = conv2d(&input, &weight, stride, pad).unwrap();
            let want = conv2d_oracle(&input, &weight, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let weight = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&input, &weight, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel mismatch"));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let input = Tensor::<f32>::full(&[1, 2, 3, 3], 0.7);
        let out = upsample_bilinear_2x(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 6, 6]);
        for v in out.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_row_matches_hand_evaluation() {
        let input = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let out = upsample_bilinear_2x(&input).unwrap();
        let row: Vec<f64> = out.data()[0..4].to_vec();
        let want = [0.0, 0.5, 1.5, 2.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn upsample_preserves_mean() {
        let input = rng_tensor(&[2, 3, 5, 7], 9);
        let out = upsample_bilinear_2x(&input).unwrap();
        let mean_in: f64 = input.data().iter().sum::<f64>() / input.len() as f64;
        let mean_out: f64 = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-9);
    }

    #[test]
    fn warp_zero_flow_is_exact_identity() {
        let feature = rng_tensor(&[1, 3, 6, 5], 11);
        let flow = Tensor::<f64>::zeros(&[1, 2, 6, 5]);
        let out = warp(&feature, &flow).unwrap();
        assert_eq!(out.data(), feature.data());
    }

    #[test]
    fn warp_integer_shift_samples_next_column() {
        // column index as value; flow (1, 0) reads value x+1, clamped at the edge
        let w = 4;
        let feature = Tensor::<f64>::from_fn(&[1, 1, 2, w], |i| (i % w) as f64);
        let flow_data = [vec![1.0; 2 * w], vec![0.0; 2 * w]].concat();
        let flow = Tensor::new(vec![1, 2, 2, w], flow_data).unwrap();
        let out = warp(&feature, &flow).unwrap();
        for y in 0..2 {
            for x in 0..w {
                let want = (x + 1).min(w - 1) as f64;
                assert_eq!(out.data()[y * w + x], want);
            }
        }
    }

    #[test]
    fn warp_half_pixel_interpolates_midpoint() {
        let feature = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let flow = Tensor::new(vec![1, 2, 1, 2], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let out = warp(&feature, &flow).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
    }

    /// Brute-force cost volume evaluating the definition offset by offset.
    pub fn cost_volume_oracle<T: Elem>(q1: &Tensor<T>, q2: &Tensor<T>, radius: usize) -> Tensor<T> {
        let (b, n, h, w) = q1.dims4().unwrap();
        let side = 2 * radius + 1;
        let mut out = Tensor::zeros(&[b, side * side, h, w]);
        let inv_n = T::from_f64(1.0 / n as f64);
        for bi in 0..b {
            for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    let o = ((dy + radius as isize) * side as isize + dx + radius as isize) as usize;
                    for y in 0..h as isize {
                        for x in 0..w as isize {
                            let (y2, x2) = (y + dy, x + dx);
                            if y2 < 0 || y2 >= h as isize || x2 < 0 || x2 >= w as isize {
                                continue;
                            }
                            let mut acc = T::zero();
                            for c in 0..n {
                                let a = q1.data()
                                    [((bi * n + c) * h + y as usize) * w + x as usize];
                                let bb = q2.data()
                                    [((bi * n + c) * h + y2 as usize) * w + x2 as usize];
                                acc = acc + a * bb;
                            }
                            out.data_mut()[((bi * side * side + o) * h + y as usize) * w
                                + x as usize] = acc * inv_n;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cost_volume_of_ones_has_unit_center() {
        let q = Tensor::<f64>::full(&[1, 4, 5, 5], 1.0);
        let cv = cost_volume(&q, &q, 2).unwrap();
        let side = 5;
        let center = side * side / 2;
        // interior pixel (2,2)
        let v = cv.data()[(center * 5 + 2) * 5 + 2];
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_volume_matches_oracle() {
        let q1 = rng_tensor(&[1, 4, 6, 6], 21);
        let q2 = rng_tensor(&[1, 4, 6, 6], 22);
        let got = cost_volume(&q1, &q2, 2).unwrap();
        let want = cost_volume_oracle(&q1, &q2, 2);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_halves_and_averages() {
        let input = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = avg_pool_2x(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 0.5);
    }

    #[test]
    fn shift_pads_with_zeros() {
        let input = Tensor::<f32>::from_fn(&[1, 1, 2, 2], |i| i as f32 + 1.0);
        let out = shift2d(&input, 0, 1).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 4.0, 0.0]);
        let out = shift2d(&input, -1, 0).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let input = rng_tensor(&[1, 2, 5, 6], 33);
        let padded = pad_reflect_to(&input, 8, 8).unwrap();
        let back = crop_to(&padded, 5, 6).unwrap();
        assert_eq!(back.data(), input.data());
    }
}
