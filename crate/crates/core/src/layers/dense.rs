use super::{LayerKind, LayerSpec};
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

/// Inputs with a smaller norm are treated as degenerate features.
pub const NORM_EPSILON: f64 = 1e-12;

pub fn relu(x: &Tensor) -> Tensor {
    x.max_with_zero()
}

/// Passes the upstream gradient where `x > 0`; zero at and below zero.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.dims() != upstream.dims() {
        return Err(FannError::ShapeMismatch {
            op: "relu backward",
            left: upstream.dims().to_vec(),
            right: x.dims().to_vec(),
        });
    }
    let mut g = upstream.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// `y = W·x + b` with `W` of shape `[out_dim, len(x)]`. `x` may have any
/// shape; it is read in row-major order.
pub fn fully_connected_forward(x: &Tensor, weights: &Tensor, biases: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    if spec.kind != LayerKind::FullyConnected {
        return Err(FannError::InvalidArgument(format!(
            "expected FullyConnected spec, got {:?}",
            spec.kind
        )));
    }
    let n = x.len();
    let m = spec.out_dim;
    if weights.dims() != [m, n] || biases.dims() != [m] {
        return Err(FannError::ShapeMismatch {
            op: "fully_connected",
            left: weights.dims().to_vec(),
            right: vec![m, n],
        });
    }
    let xs = x.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(biases.data())
        .map(|(row, &b)| b + row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Tensor::vector(out)
}

pub fn fully_connected_backward(
    x: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Result<Tensor> {
    let n = x.len();
    let m = upstream.len();
    if weights.dims() != [m, n] {
        return Err(FannError::ShapeMismatch {
            op: "fully_connected backward",
            left: upstream.dims().to_vec(),
            right: vec![weights.dims()[0]],
        });
    }
    let mut gx = vec![0.0; n];
    for (row, &g) in weights.data().chunks_exact(n).zip(upstream.data()) {
        if g == 0.0 {
            continue;
        }
        for (acc, &w) in gx.iter_mut().zip(row) {
            *acc += g * w;
        }
    }
    if let Some((gw, gb)) = grads {
        let xs = x.data();
        for (grow, &g) in gw.data_mut().chunks_exact_mut(n).zip(upstream.data()) {
            if g == 0.0 {
                continue;
            }
            for (acc, &v) in grow.iter_mut().zip(xs) {
                *acc += g * v;
            }
        }
        for (acc, &g) in gb.data_mut().iter_mut().zip(upstream.data()) {
            *acc += g;
        }
    }
    Tensor::from_vec(x.dims(), gx)
}

/// Returns `(x / ‖x‖, ‖x‖)`.
pub fn l2_normalize_forward(x: &Tensor) -> Result<(Tensor, f64)> {
    let norm = x.norm();
    if norm <= NORM_EPSILON {
        return Err(FannError::InvalidArgument(format!(
            "cannot normalize a vector of norm {norm:e}: degenerate features"
        )));
    }
    Ok((x.scale(1.0 / norm), norm))
}

/// Applies the normalization Jacobian `(I − y·yᵀ) / ‖x‖`.
pub fn l2_normalize_backward(y: &Tensor, norm: f64, upstream: &Tensor) -> Result<Tensor> {
    let proj = y.dot(upstream)?;
    let mut g = upstream.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv = (*gv - yv * proj) / norm;
    }
    Ok(g)
}
