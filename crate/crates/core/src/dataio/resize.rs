use super::netpbm::threshold;
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

/// Source coordinate and blend weight for each output coordinate, with the
/// first and last samples of both grids aligned.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if height == 0 || width == 0 {
        return Err(FannError::InvalidArgument(format!(
            "resize target {height}x{width} must be at least 1x1"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let ys = taps(h, height);
    let xs = taps(w, width);
    let src = t.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[c, height, width], out)
}

/// Resizes a binary mask and re-thresholds it at 0.5.
pub fn resize_mask(mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Ok(threshold(&resize_bilinear(mask, height, width)?))
}
