use super::{LayerKind, LayerSpec};
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

/// Flat input index of the winning element for every output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    pub input_dims: Vec<usize>,
    pub winners: Vec<usize>,
}

pub(crate) fn pool_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || pad >= kernel {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

/// Max pooling with −∞ padding. Ties go to the first element in row-major
/// window order.
pub fn maxpool_forward(x: &Tensor, spec: &LayerSpec) -> Result<(Tensor, ArgmaxMap)> {
    if spec.kind != LayerKind::MaxPool {
        return Err(FannError::InvalidArgument(format!("expected MaxPool spec, got {:?}", spec.kind)));
    }
    let (c, h, w) = x.chw()?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (oh, ow) = match (pool_extent(h, kh, sh, ph), pool_extent(w, kw, sw, pw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(FannError::InvalidShape {
                op: "maxpool",
                reason: format!(
                    "{kh}x{kw} window (padding {ph},{pw}) does not fit a {h}x{w} input"
                ),
            })
        }
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut winners = Vec::with_capacity(c * oh * ow);
    let data = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let y0 = (oy * sh) as isize - ph as isize;
            for ox in 0..ow {
                let x0 = (ox * sw) as isize - pw as isize;
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for ky in 0..kh as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if arg == usize::MAX || data[idx] > best {
                            best = data[idx];
                            arg = idx;
                        }
                    }
                }
                out.push(best);
                winners.push(arg);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, oh, ow], out)?,
        ArgmaxMap {
            input_dims: x.dims().to_vec(),
            winners,
        },
    ))
}

/// Routes each upstream element to the input position that won its window.
pub fn maxpool_backward(map: &ArgmaxMap, upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != map.winners.len() {
        return Err(FannError::ShapeMismatch {
            op: "maxpool backward",
            left: upstream.dims().to_vec(),
            right: vec![map.winners.len()],
        });
    }
    let mut gx = Tensor::zeros(&map.input_dims)?;
    let g = gx.data_mut();
    for (&idx, &u) in map.winners.iter().zip(upstream.data()) {
        g[idx] += u;
    }
    Ok(gx)
}
