//! Strided 2-D correlation kernels shared by convolution and transposed
//! convolution.
//!
//! Both layers connect a "large" map `[Cb, H, W]` and a "small" map
//! `[Cs, OH, OW]` through weights `[Cs, Cb, KH, KW]`, where
//! `OH = (H + 2·PH − KH) / SH + 1`. A convolution gathers large → small; a
//! transposed convolution scatters small → large with the same indexing, so
//! each is exactly the adjoint of the other.

use super::{LayerKind, LayerSpec};
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    large_c: usize,
    large_h: usize,
    large_w: usize,
    small_c: usize,
    small_h: usize,
    small_w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    /// Output columns `ox` whose source column `ox·sw + kx − pw` lies in `[0, large_w)`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pw {
            0
        } else {
            (self.pw - kx).div_ceil(self.sw)
        };
        let limit = self.large_w + self.pw;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.sw + 1).min(self.small_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let r = oy * self.sh + ky;
        if r < self.ph || r - self.ph >= self.large_h {
            None
        } else {
            Some(r - self.ph)
        }
    }
}

/// Exact extent of a strided window sweep; `None` when not integral or empty.
pub(crate) fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || !(span - kernel).is_multiple_of(stride) {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

pub(crate) fn deconv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        None
    } else {
        Some(full - 2 * pad)
    }
}

fn gather(large: &[f64], weights: &[f64], g: &Geometry, small: &mut [f64]) {
    let small_plane = g.small_h * g.small_w;
    let large_plane = g.large_h * g.large_w;
    for s in 0..g.small_c {
        let out = &mut small[s * small_plane..(s + 1) * small_plane];
        for b in 0..g.large_c {
            let src = &large[b * large_plane..(b + 1) * large_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weights[((s * g.large_c + b) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.small_h {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let row = &src[iy * g.large_w..(iy + 1) * g.large_w];
                        let orow = &mut out[oy * g.small_w..(oy + 1) * g.small_w];
                        for ox in lo..hi {
                            orow[ox] += wv * row[ox * g.sw + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn scatter(small: &[f64], weights: &[f64], g: &Geometry, large: &mut [f64]) {
    let small_plane = g.small_h * g.small_w;
    let large_plane = g.large_h * g.large_w;
    for s in 0..g.small_c {
        let src = &small[s * small_plane..(s + 1) * small_plane];
        for b in 0..g.large_c {
            let dst = &mut large[b * large_plane..(b + 1) * large_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weights[((s * g.large_c + b) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.small_h {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let srow = &src[oy * g.small_w..(oy + 1) * g.small_w];
                        let drow = &mut dst[iy * g.large_w..(iy + 1) * g.large_w];
                        for ox in lo..hi {
                            drow[ox * g.sw + kx - g.pw] += wv * srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `dW[s, b, ky, kx] += Σ small[s, oy, ox] · large[b, oy·sh + ky − ph, ox·sw + kx − pw]`
fn weight_correlation(large: &[f64], small: &[f64], g: &Geometry, grad_w: &mut [f64]) {
    let small_plane = g.small_h * g.small_w;
    let large_plane = g.large_h * g.large_w;
    for s in 0..g.small_c {
        let sm = &small[s * small_plane..(s + 1) * small_plane];
        for b in 0..g.large_c {
            let lg = &large[b * large_plane..(b + 1) * large_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.small_h {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let row = &lg[iy * g.large_w..(iy + 1) * g.large_w];
                        let srow = &sm[oy * g.small_w..(oy + 1) * g.small_w];
                        for ox in lo..hi {
                            acc += srow[ox] * row[ox * g.sw + kx - g.pw];
                        }
                    }
                    grad_w[((s * g.large_c + b) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

fn expect_kind(spec: &LayerSpec, kind: LayerKind) -> Result<()> {
    if spec.kind != kind {
        return Err(FannError::InvalidArgument(format!(
            "expected a {kind:?} layer spec, got {:?}",
            spec.kind
        )));
    }
    Ok(())
}

fn check_weights(spec: &LayerSpec, weights: &Tensor, biases: &Tensor, lead: usize, second: usize) -> Result<()> {
    let want = [lead, second, spec.kernel.0, spec.kernel.1];
    if weights.dims() != want {
        return Err(FannError::ShapeMismatch {
            op: "weights",
            left: weights.dims().to_vec(),
            right: want.to_vec(),
        });
    }
    if biases.dims() != [spec.out_channels] {
        return Err(FannError::ShapeMismatch {
            op: "biases",
            left: biases.dims().to_vec(),
            right: vec![spec.out_channels],
        });
    }
    Ok(())
}

fn conv_geometry(spec: &LayerSpec, input: &Tensor) -> Result<Geometry> {
    let (c, h, w) = input.chw()?;
    if c != spec.in_channels {
        return Err(FannError::ShapeMismatch {
            op: "conv input channels",
            left: input.dims().to_vec(),
            right: vec![spec.in_channels, h, w],
        });
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = conv_extent(h, kh, sh, ph).ok_or_else(|| FannError::InvalidShape {
        op: "conv",
        reason: format!("height: ({h} + 2·{ph} − {kh}) is not a non-negative multiple of stride {sh}"),
    })?;
    let ow = conv_extent(w, kw, sw, pw).ok_or_else(|| FannError::InvalidShape {
        op: "conv",
        reason: format!("width: ({w} + 2·{pw} − {kw}) is not a non-negative multiple of stride {sw}"),
    })?;
    Ok(Geometry {
        large_c: c,
        large_h: h,
        large_w: w,
        small_c: spec.out_channels,
        small_h: oh,
        small_w: ow,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
    })
}

fn deconv_geometry(spec: &LayerSpec, input: &Tensor) -> Result<Geometry> {
    let (c, h, w) = input.chw()?;
    if c != spec.in_channels {
        return Err(FannError::ShapeMismatch {
            op: "deconv input channels",
            left: input.dims().to_vec(),
            right: vec![spec.in_channels, h, w],
        });
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = deconv_extent(h, kh, sh, ph).ok_or_else(|| FannError::InvalidShape {
        op: "deconv",
        reason: format!("height: padding {ph} consumes the whole output"),
    })?;
    let ow = deconv_extent(w, kw, sw, pw).ok_or_else(|| FannError::InvalidShape {
        op: "deconv",
        reason: format!("width: padding {pw} consumes the whole output"),
    })?;
    Ok(Geometry {
        large_c: spec.out_channels,
        large_h: oh,
        large_w: ow,
        small_c: c,
        small_h: h,
        small_w: w,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
    })
}

fn check_upstream(op: &'static str, upstream: &Tensor, dims: [usize; 3]) -> Result<()> {
    if upstream.dims() != dims {
        return Err(FannError::ShapeMismatch {
            op,
            left: upstream.dims().to_vec(),
            right: dims.to_vec(),
        });
    }
    Ok(())
}

/// Cross-correlation (no kernel flip) plus per-output-channel bias.
/// Weights are `[Cout, Cin, KH, KW]`.
pub fn conv_forward(x: &Tensor, weights: &Tensor, biases: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    expect_kind(spec, LayerKind::Conv)?;
    check_weights(spec, weights, biases, spec.out_channels, spec.in_channels)?;
    let g = conv_geometry(spec, x)?;
    let mut out = Tensor::zeros(&[g.small_c, g.small_h, g.small_w])?;
    let plane = g.small_h * g.small_w;
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        chunk.fill(biases.data()[c]);
    }
    gather(x.data(), weights.data(), &g, out.data_mut());
    Ok(out)
}

/// Returns the input gradient; adds weight and bias gradients into the given buffers.
pub fn conv_backward(
    x: &Tensor,
    weights: &Tensor,
    spec: &LayerSpec,
    upstream: &Tensor,
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Result<Tensor> {
    expect_kind(spec, LayerKind::Conv)?;
    let g = conv_geometry(spec, x)?;
    check_upstream("conv backward", upstream, [g.small_c, g.small_h, g.small_w])?;
    let mut gx = Tensor::zeros_like(x);
    scatter(upstream.data(), weights.data(), &g, gx.data_mut());
    if let Some((gw, gb)) = grads {
        weight_correlation(x.data(), upstream.data(), &g, gw.data_mut());
        add_channel_sums(upstream, gb);
    }
    Ok(gx)
}

/// Transposed convolution, the adjoint of [`conv_forward`] for the same
/// spec geometry. Weights are `[Cin, Cout, KH, KW]`; output extent is
/// `(H − 1)·S + K − 2·P`.
pub fn deconv_forward(x: &Tensor, weights: &Tensor, biases: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    expect_kind(spec, LayerKind::Deconv)?;
    check_weights(spec, weights, biases, spec.in_channels, spec.out_channels)?;
    let g = deconv_geometry(spec, x)?;
    let mut out = Tensor::zeros(&[g.large_c, g.large_h, g.large_w])?;
    let plane = g.large_h * g.large_w;
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        chunk.fill(biases.data()[c]);
    }
    scatter(x.data(), weights.data(), &g, out.data_mut());
    Ok(out)
}

pub fn deconv_backward(
    x: &Tensor,
    weights: &Tensor,
    spec: &LayerSpec,
    upstream: &Tensor,
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Result<Tensor> {
    expect_kind(spec, LayerKind::Deconv)?;
    let g = deconv_geometry(spec, x)?;
    check_upstream("deconv backward", upstream, [g.large_c, g.large_h, g.large_w])?;
    let mut gx = Tensor::zeros_like(x);
    gather(upstream.data(), weights.data(), &g, gx.data_mut());
    if let Some((gw, gb)) = grads {
        weight_correlation(upstream.data(), x.data(), &g, gw.data_mut());
        add_channel_sums(upstream, gb);
    }
    Ok(gx)
}

fn add_channel_sums(upstream: &Tensor, gb: &mut Tensor) {
    let channels = upstream.dims()[0];
    let plane = upstream.len() / channels;
    for (c, chunk) in upstream.data().chunks(plane).enumerate() {
        gb.data_mut()[c] += chunk.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Direct definition, one output element at a time.
    fn naive_conv(x: &Tensor, w: &Tensor, spec: &LayerSpec) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let (kh, kw) = spec.kernel;
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let co = spec.out_channels;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * c + i) * kh + ky) * kw + kx]
                                    * x.data()[(i * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::from_vec(&[co, oh, ow], out).unwrap()
    }

    #[test]
    fn ones_kernel_on_ones() {
        let spec = LayerSpec::conv(1, 1, (2, 2), (1, 1), (0, 0));
        let x = Tensor::full(&[1, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv_forward(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zero_input_gives_bias() {
        let spec = LayerSpec::conv(2, 3, (3, 3), (1, 1), (1, 1));
        let x = Tensor::zeros(&[2, 4, 5]).unwrap();
        let w = Tensor::full(&[3, 2, 3, 3], 0.3).unwrap();
        let b = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv_forward(&x, &w, &b, &spec).unwrap();
        for c in 0..3 {
            assert!(y.data()[c * 20..(c + 1) * 20].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn full_scale_first_layer_shape() {
        let spec = LayerSpec::conv(3, 64, (7, 7), (3, 3), (0, 0));
        assert_eq!(spec.output_dims(&[3, 229, 79]).unwrap(), vec![64, 75, 25]);
    }

    #[test]
    fn non_integral_extent_rejected() {
        let spec = LayerSpec::conv(1, 1, (2, 2), (2, 2), (0, 0));
        let x = Tensor::zeros(&[1, 4, 5]).unwrap();
        let w = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let err = conv_forward(&x, &w, &b, &spec).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (5, 2, 0), (7, 3, 0), (3, 2, 1), (2, 1, 0)] {
            let h = 3 * s + k - 2 * p + s * 2;
            let w = 2 * s + k - 2 * p + s;
            let spec = LayerSpec::conv(2, 3, (k, k), (s, s), (p, p));
            let x = random(&[2, h, w], &mut rng);
            let wt = random(&[3, 2, k, k], &mut rng);
            let b = Tensor::zeros(&[3]).unwrap();
            let fast = conv_forward(&x, &wt, &b, &spec).unwrap();
            let slow = naive_conv(&x, &wt, &spec);
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_shapes_invert_full_scale_encoder() {
        let d1 = LayerSpec::deconv(64, 64, (5, 5), (2, 2), (0, 0));
        let d2 = LayerSpec::deconv(64, 3, (7, 7), (3, 3), (0, 0));
        let mid = d1.output_dims(&[64, 36, 11]).unwrap();
        assert_eq!(mid, vec![64, 75, 25]);
        assert_eq!(d2.output_dims(&mid).unwrap(), vec![3, 229, 79]);
    }

    #[test]
    fn deconv_single_pixel_stamps_kernel() {
        let spec = LayerSpec::deconv(1, 2, (2, 3), (1, 1), (0, 0));
        let x = Tensor::full(&[1, 1, 1], 2.5).unwrap();
        let w = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64 - 3.0).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y = deconv_forward(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.dims(), &[2, 2, 3]);
        for (out, k) in y.data().iter().zip(w.data()) {
            assert_eq!(*out, 2.5 * k);
        }
    }

    #[test]
    fn conv_and_deconv_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p) in &[(3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0)] {
            let conv = LayerSpec::conv(2, 3, (k, k), (s, s), (p, p));
            let deconv = LayerSpec::deconv(3, 2, (k, k), (s, s), (p, p));
            let big_h = 4;
            let Ok(small) = conv.output_dims(&[2, big_h, big_h]) else { continue };
            let w = random(&[3, 2, k, k], &mut rng);
            let zb2 = Tensor::zeros(&[2]).unwrap();
            let zb3 = Tensor::zeros(&[3]).unwrap();
            let x = random(&[2, big_h, big_h], &mut rng);
            let y = random(&small, &mut rng);
            let cx = conv_forward(&x, &w, &zb3, &conv).unwrap();
            let dy = deconv_forward(&y, &w, &zb2, &deconv).unwrap();
            assert_eq!(dy.dims(), x.dims());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&dy).unwrap();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
            // the conv input-gradient is the same map
            let back = conv_backward(&x, &w, &conv, &y, None).unwrap();
            assert!((x.dot(&back).unwrap() - lhs).abs() < 1e-12);
        }
    }
}
