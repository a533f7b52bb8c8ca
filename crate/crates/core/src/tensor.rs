//! Dense row-major `f64` tensors.
//!
//! Feature maps are laid out channels-first (`[C, H, W]`), matrices as
//! `[rows, cols]`. There is no broadcasting: binary operations require
//! identical shapes.

use std::fmt;

use crate::error::{FannError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(FannError::InvalidShape {
                op: "shape",
                reason: "a shape needs at least one extent".into(),
            });
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(FannError::InvalidShape {
                op: "shape",
                reason: format!("extent {pos} of {dims:?} is zero"),
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(channels, height, width)` for rank-3 shapes.
    pub fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.0[..] {
            [c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let mut t = Tensor::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds a tensor from row-major data. Rejects length mismatches and
    /// non-finite values.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(FannError::InvalidShape {
                op: "from_vec",
                reason: format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FannError::NonFinite {
                term: format!("tensor construction (element {i})"),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(&[n], data)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        self.shape.chw().ok_or_else(|| FannError::InvalidShape {
            op: "chw",
            reason: format!("expected a [C, H, W] tensor, got {}", self.shape),
        })
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(FannError::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: dims.to_vec(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: Shape(vec![n]),
            data: self.data,
        }
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FannError::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn max_with_zero(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.sum_of_squares().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(FannError::ShapeMismatch {
                op: "dot",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits a `[C, H, W]` tensor into `parts` bands along the height.
    /// Heights differ by at most one; the extra rows go to the earliest bands.
    pub fn slice_height(&self, parts: usize) -> Result<Vec<Tensor>> {
        let (c, h, w) = self.chw()?;
        if parts == 0 || parts > h {
            return Err(FannError::InvalidShape {
                op: "slice_height",
                reason: format!("cannot cut height {h} into {parts} parts"),
            });
        }
        let heights = band_heights(h, parts);
        let mut out = Vec::with_capacity(parts);
        let mut row0 = 0;
        for &bh in &heights {
            let mut data = Vec::with_capacity(c * bh * w);
            for ch in 0..c {
                let start = (ch * h + row0) * w;
                data.extend_from_slice(&self.data[start..start + bh * w]);
            }
            out.push(Tensor {
                shape: Shape(vec![c, bh, w]),
                data,
            });
            row0 += bh;
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::slice_height`]: stacks `[C, h_i, W]` bands.
    pub fn concat_height(bands: &[Tensor]) -> Result<Tensor> {
        let first = bands.first().ok_or_else(|| FannError::InvalidShape {
            op: "concat_height",
            reason: "no bands given".into(),
        })?;
        let (c, _, w) = first.chw()?;
        let mut total_h = 0;
        for b in bands {
            let (bc, bh, bw) = b.chw()?;
            if bc != c || bw != w {
                return Err(FannError::ShapeMismatch {
                    op: "concat_height",
                    left: first.dims().to_vec(),
                    right: b.dims().to_vec(),
                });
            }
            total_h += bh;
        }
        let mut data = Vec::with_capacity(c * total_h * w);
        for ch in 0..c {
            for b in bands {
                let (_, bh, _) = b.chw()?;
                data.extend_from_slice(&b.data[ch * bh * w..(ch + 1) * bh * w]);
            }
        }
        Ok(Tensor {
            shape: Shape(vec![c, total_h, w]),
            data,
        })
    }

    /// Concatenates tensors end to end into one vector.
    pub fn concat_flat(parts: &[&Tensor]) -> Result<Tensor> {
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Tensor::vector(data)
    }
}

/// Heights produced by [`Tensor::slice_height`].
pub fn band_heights(height: usize, parts: usize) -> Vec<usize> {
    let base = height / parts;
    let extra = height % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(v(&[1.0, 2.0]).add(&v(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(v(&[-1.0, 0.0, 2.0]).max_with_zero().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(v(&[1.0, 2.0, 3.0]).scale(0.5).data(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let err = v(&[1.0, 2.0]).add(&v(&[1.0, 2.0, 3.0])).unwrap_err();
        match err {
            FannError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn reductions() {
        assert_eq!(v(&[3.0, 4.0]).sum_of_squares(), 25.0);
        assert_eq!(v(&[1.0, 1.0, 1.0]).sum(), 3.0);
        assert_eq!(v(&[-2.0, -5.0]).max(), -2.0);
    }

    #[test]
    fn zero_extent_and_nan_rejected() {
        assert!(Tensor::zeros(&[2, 0]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn slice_full_scale_tap_height() {
        let t = Tensor::zeros(&[64, 36, 11]).unwrap();
        let parts = t.slice_height(4).unwrap();
        assert_eq!(parts.len(), 4);
        for p in &parts {
            assert_eq!(p.dims(), &[64, 9, 11]);
        }
    }

    #[test]
    fn slice_uneven_puts_extra_rows_first() {
        let t = Tensor::from_fn(&[1, 5, 2], |i| i as f64).unwrap();
        let parts = t.slice_height(2).unwrap();
        assert_eq!(parts[0].dims(), &[1, 3, 2]);
        assert_eq!(parts[1].dims(), &[1, 2, 2]);
        assert_eq!(parts[1].data(), &[6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn slice_more_parts_than_rows_rejected() {
        let t = Tensor::zeros(&[1, 3, 2]).unwrap();
        assert!(t.slice_height(4).is_err());
        assert!(t.slice_height(0).is_err());
    }

    proptest! {
        #[test]
        fn slice_concat_round_trip(c in 1usize..4, h in 1usize..12, w in 1usize..5, k in 1usize..12, seed in 0u64..1000) {
            prop_assume!(k <= h);
            let t = Tensor::from_fn(&[c, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).unwrap();
            let bands = t.slice_height(k).unwrap();
            let heights: Vec<usize> = bands.iter().map(|b| b.dims()[1]).collect();
            prop_assert!(heights.windows(2).all(|p| p[0] >= p[1] && p[0] - p[1] <= 1));
            prop_assert_eq!(Tensor::concat_height(&bands).unwrap(), t);
        }

        #[test]
        fn scaling_distributes_over_add(a in proptest::collection::vec(-100.0f64..100.0, 1..20), c in -10.0f64..10.0) {
            let x = Tensor::vector(a.clone()).unwrap();
            let y = Tensor::vector(a.iter().map(|v| v * 0.37 - 1.0).collect()).unwrap();
            let lhs = x.add(&y).unwrap().scale(c);
            let rhs = x.scale(c).add(&y.scale(c)).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }
    }
}
