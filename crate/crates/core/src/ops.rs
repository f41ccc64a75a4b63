//! Forward and hand-derived backward passes for convolution, ReLU and
//! bilinear upsampling.
//!
//! Convolution is the cross-correlation convention, computed by unrolling
//! each batch item into a (Cin·kh·kw) × (H'·W') column matrix (im2col) and
//! accumulating kernel taps over the long contiguous rows. The backward pass
//! reuses the same unrolled layout for the kernel gradient (row dot
//! products) and scatters the input gradient back with the inverse mapping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of one spatial axis: floor((in + 2·pad − k) / stride) + 1.
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if k > padded {
        return Err(Error::shape(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Intersect the output range with the positions whose input index
/// `o*stride + k - pad` lands inside `[0, input)`. Returns `(start, end)`
/// as a half-open range, possibly empty.
#[inline]
fn valid_out_range(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let start = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= input-1  =>  o <= (input-1+pad-k)/stride
    let last = input - 1 + pad;
    if last < k {
        return (0, 0);
    }
    let end = ((last - k) / stride + 1).min(out);
    (start.min(end), end)
}

/// Validated geometry shared by the forward and backward passes.
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape(format!(
                "conv2d bias length {} != output channels {cout}",
                b.len()
            )));
        }
    }
    let h_out = out_extent(h, kh, stride, pad)?;
    let w_out = out_extent(w, kw, stride, pad)?;
    Ok(ConvDims { n, cin, h, w, cout, kh, kw, h_out, w_out })
}

/// Unroll one batch item into `cols` (Cin·kh·kw rows of H'·W' values).
/// Positions that fall into the zero padding stay zero.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, stride: usize, pad: usize, cols: &mut [S]) {
    let plane = d.h * d.w;
    let p = d.h_out * d.w_out;
    cols.fill(S::ZERO);
    for ci in 0..d.cin {
        let in_base = ci * plane;
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_out_range(d.h, d.h_out, ky, stride, pad);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_out_range(d.w, d.w_out, kx, stride, pad);
                let row_base = ((ci * d.kh + ky) * d.kw + kx) * p;
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let in_row = in_base + iy * d.w;
                    let col_row = row_base + oy * d.w_out;
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        let len = ox1 - ox0;
                        cols[col_row + ox0..col_row + ox0 + len]
                            .copy_from_slice(&x[in_row + ix0..in_row + ix0 + len]);
                    } else {
                        for ox in ox0..ox1 {
                            cols[col_row + ox] = x[in_row + ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`]: fold column-space gradients back
/// onto the input grid, skipping padding positions.
fn col2im<S: Scalar>(cols: &[S], d: &ConvDims, stride: usize, pad: usize, dx: &mut [S]) {
    let plane = d.h * d.w;
    let p = d.h_out * d.w_out;
    for ci in 0..d.cin {
        let in_base = ci * plane;
        for ky in 0..d.kh {
            let (oy0, oy1) = valid_out_range(d.h, d.h_out, ky, stride, pad);
            for kx in 0..d.kw {
                let (ox0, ox1) = valid_out_range(d.w, d.w_out, kx, stride, pad);
                let row_base = ((ci * d.kh + ky) * d.kw + kx) * p;
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let in_row = in_base + iy * d.w;
                    let col_row = row_base + oy * d.w_out;
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        let len = ox1 - ox0;
                        let src = &cols[col_row + ox0..col_row + ox0 + len];
                        let dst = &mut dx[in_row + ix0..in_row + ix0 + len];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += *b;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dx[in_row + ox * stride + kx - pad] += cols[col_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `dst += tap · src` over whole rows; the workhorse inner loop.
#[inline]
fn axpy<S: Scalar>(dst: &mut [S], tap: S, src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += tap * *s;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; the summation order is fixed and deterministic.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// 2-d cross-correlation of `input` (N×Cin×H×W) with `kernel`
/// (Cout×Cin×kh×kw) plus optional per-output-channel bias.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let d = conv_dims(input, kernel, bias, stride, pad)?;
    let p = d.h_out * d.w_out;
    let kdim = d.cin * d.kh * d.kw;
    let x = input.data();
    let k = kernel.data();
    let mut cols = vec![S::ZERO; kdim * p];
    let mut out = vec![S::ZERO; d.n * d.cout * p];

    for b in 0..d.n {
        im2col(&x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w], &d, stride, pad, &mut cols);
        for co in 0..d.cout {
            let out_row = &mut out[(b * d.cout + co) * p..(b * d.cout + co + 1) * p];
            if let Some(bias) = bias {
                out_row.fill(bias[co]);
            }
            let krow = &k[co * kdim..(co + 1) * kdim];
            // Pairs of taps per pass halve the column traffic.
            let mut t = 0;
            while t + 1 < kdim {
                let (a0, a1) = (krow[t], krow[t + 1]);
                let b0 = &cols[t * p..(t + 1) * p];
                let b1 = &cols[(t + 1) * p..(t + 2) * p];
                for i in 0..p {
                    out_row[i] += a0 * b0[i] + a1 * b1[i];
                }
                t += 2;
            }
            if t < kdim {
                axpy(out_row, krow[t], &cols[t * p..(t + 1) * p]);
            }
        }
    }

    let t = Tensor::from_vec(&[d.n, d.cout, d.h_out, d.w_out], out)?;
    t.ensure_finite("conv2d output")?;
    Ok(t)
}

/// Gradients of a scalar loss through [`conv2d`]: returns
/// (d_input, d_kernel, d_bias).
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<S>)> {
    let d = conv_dims(input, kernel, None, stride, pad)?;
    let (dn, dco, dho, dwo) = d_out.dims4()?;
    if dn != d.n || dco != d.cout || dho != d.h_out || dwo != d.w_out {
        return Err(Error::shape(format!(
            "conv2d backward: upstream shape {:?} does not match {}×{}×{}×{}",
            d_out.shape(),
            d.n,
            d.cout,
            d.h_out,
            d.w_out
        )));
    }
    let p = d.h_out * d.w_out;
    let kdim = d.cin * d.kh * d.kw;
    let x = input.data();
    let k = kernel.data();
    let dy = d_out.data();
    let mut dx = vec![S::ZERO; x.len()];
    let mut dk = vec![S::ZERO; k.len()];
    let mut db = vec![S::ZERO; d.cout];
    let mut cols = vec![S::ZERO; kdim * p];
    let mut dcols = vec![S::ZERO; kdim * p];

    for b in 0..d.n {
        let x_item = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(x_item, &d, stride, pad, &mut cols);
        dcols.fill(S::ZERO);

        for co in 0..d.cout {
            let dy_row = &dy[(b * d.cout + co) * p..(b * d.cout + co + 1) * p];
            let mut bias_acc = S::ZERO;
            for v in dy_row {
                bias_acc += *v;
            }
            db[co] += bias_acc;

            let dk_row = &mut dk[co * kdim..(co + 1) * kdim];
            let k_row = &k[co * kdim..(co + 1) * kdim];
            for t in 0..kdim {
                // Kernel gradient: dot of the upstream row with the column row.
                dk_row[t] += dot(dy_row, &cols[t * p..(t + 1) * p]);
                // Column-space input gradient: axpy of the upstream row.
                axpy(&mut dcols[t * p..(t + 1) * p], k_row[t], dy_row);
            }
        }

        col2im(
            &dcols,
            &d,
            stride,
            pad,
            &mut dx[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w],
        );
    }

    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(kernel.shape(), dk)?,
        db,
    ))
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.maximum(S::ZERO);
    }
    out
}

/// Upstream gradient gated by the sign of the cached forward input.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, d_out: &Tensor<S>) -> Result<Tensor<S>> {
    if !input.same_shape(d_out) {
        return Err(Error::shape("relu backward shape mismatch".to_string()));
    }
    let mut dx = d_out.clone();
    for (g, x) in dx.data_mut().iter_mut().zip(input.data()) {
        if *x <= S::ZERO {
            *g = S::ZERO;
        }
    }
    Ok(dx)
}

/// Source coordinate and interpolation weight for one output position under
/// half-pixel-centre sampling (align_corners = false):
/// `src = clamp((o + 0.5)/scale - 0.5, 0, in-1)`.
#[inline]
fn bilinear_source(o: usize, scale: usize, input: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    let frac = src - lo as f64;
    (lo, hi, frac)
}

/// Bilinear upsampling by an integer factor, half-pixel-centre semantics.
pub fn upsample_bilinear<S: Scalar>(input: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    if scale == 0 {
        return Err(Error::invalid("upsample scale must be >= 1"));
    }
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = (h * scale, w * scale);
    let x = input.data();
    let mut out = vec![S::ZERO; n * c * ho * wo];

    for oy in 0..ho {
        let (y0, y1, fy) = bilinear_source(oy, scale, h);
        for ox in 0..wo {
            let (x0, x1, fx) = bilinear_source(ox, scale, w);
            let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = S::from_f64((1.0 - fy) * fx);
            let w10 = S::from_f64(fy * (1.0 - fx));
            let w11 = S::from_f64(fy * fx);
            for plane in 0..n * c {
                let in_base = plane * h * w;
                let v = w00 * x[in_base + y0 * w + x0]
                    + w01 * x[in_base + y0 * w + x1]
                    + w10 * x[in_base + y1 * w + x0]
                    + w11 * x[in_base + y1 * w + x1];
                out[plane * ho * wo + oy * wo + ox] = v;
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

/// Scatter the four interpolation weights back onto the input grid.
pub fn upsample_bilinear_backward<S: Scalar>(
    input_shape: &[usize],
    scale: usize,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = Tensor::<S>::zeros(input_shape).dims4()?;
    let (dn, dc, ho, wo) = d_out.dims4()?;
    if dn != n || dc != c || ho != h * scale || wo != w * scale {
        return Err(Error::shape(format!(
            "upsample backward: upstream {:?} does not match input {:?} × scale {scale}",
            d_out.shape(),
            input_shape
        )));
    }
    let dy = d_out.data();
    let mut dx = vec![S::ZERO; n * c * h * w];

    for oy in 0..ho {
        let (y0, y1, fy) = bilinear_source(oy, scale, h);
        for ox in 0..wo {
            let (x0, x1, fx) = bilinear_source(ox, scale, w);
            let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = S::from_f64((1.0 - fy) * fx);
            let w10 = S::from_f64(fy * (1.0 - fx));
            let w11 = S::from_f64(fy * fx);
            for plane in 0..n * c {
                let g = dy[plane * ho * wo + oy * wo + ox];
                let in_base = plane * h * w;
                dx[in_base + y0 * w + x0] += w00 * g;
                dx[in_base + y0 * w + x1] += w01 * g;
                dx[in_base + y1 * w + x0] += w10 * g;
                dx[in_base + y1 * w + x1] += w11 * g;
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Naive 7-nested-loop reference convolution; the independent oracle.
    fn conv2d_reference(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        bias: Option<&[f32]>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let (n, cin, h, w) = input.dims4().unwrap();
        let (cout, _, kh, kw) = kernel.dims4().unwrap();
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let x = input.data();
        let k = kernel.data();
        let mut out = vec![0.0f32; n * cout * h_out * w_out];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    if iy < pad || ix < pad {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - pad, ix - pad);
                                    if iy >= h || ix >= w {
                                        continue;
                                    }
                                    acc += x[((b * cin + ci) * h + iy) * w + ix]
                                        * k[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, h_out, w_out], out).unwrap()
    }

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut rng = Rng::new(1);
        let x = random_tensor(&[2, 3, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_reference_on_random_shapes() {
        let mut rng = Rng::new(2);
        let cases = [
            (2, 3, 8, 8, 4, 3, 3, 1, 1),
            (1, 1, 5, 7, 2, 3, 3, 1, 0),
            (3, 2, 9, 9, 3, 3, 3, 2, 1),
            (1, 4, 6, 6, 5, 1, 1, 1, 0),
            (2, 2, 7, 5, 2, 5, 3, 2, 2),
        ];
        for &(n, cin, h, w, cout, kh, kw, stride, pad) in &cases {
            let x = random_tensor(&[n, cin, h, w], &mut rng);
            let k = random_tensor(&[cout, cin, kh, kw], &mut rng);
            let b: Vec<f32> = (0..cout).map(|_| rng.uniform(-0.5, 0.5) as f32).collect();
            let fast = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let slow = conv2d_reference(&x, &k, Some(&b), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-5, "conv mismatch {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn relu_backward_passes_positive_gradients() {
        let x = Tensor::from_vec(&[4], vec![1.0f32, -2.0, 0.5, 0.0]).unwrap();
        let dy = Tensor::full(&[4], 3.0f32);
        let dx = relu_backward(&x, &dy).unwrap();
        assert_eq!(dx.data(), &[3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn upsample_doubles_extents_and_preserves_constants() {
        let x = Tensor::full(&[1, 2, 3, 3], 5.0f32);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        for v in y.data() {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_conserves_mass() {
        // Each upstream unit distributes weights summing to one.
        let dy = Tensor::full(&[1, 1, 6, 6], 1.0f32);
        let dx = upsample_bilinear_backward(&[1, 1, 3, 3], 2, &dy).unwrap();
        let total: f32 = dx.data().iter().sum();
        assert!((total - 36.0).abs() < 1e-4, "total {total}");
    }
}
