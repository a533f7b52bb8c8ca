//! Ranking, mask-regression and regularization losses with their analytic
//! gradients, plus the per-triplet direction-control weights.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{FannError, Result};
use crate::layers::ParamSet;
use crate::tensor::Tensor;

/// Allowed deviation from unit norm for ranking features.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

fn check_unit(f: &Tensor, what: &str) -> Result<()> {
    let n = f.norm();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(FannError::InvalidArgument(format!(
            "{what} must be unit-norm, has norm {n}"
        )));
    }
    Ok(())
}

/// `‖a − b‖²` over raw slices.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance between two unit-norm features, in `[0, 4]`.
pub fn pairwise_distance(fa: &Tensor, fb: &Tensor) -> Result<f64> {
    if fa.len() != fb.len() {
        return Err(FannError::ShapeMismatch {
            op: "pairwise_distance",
            left: fa.dims().to_vec(),
            right: fb.dims().to_vec(),
        });
    }
    check_unit(fa, "first feature")?;
    check_unit(fb, "second feature")?;
    Ok(squared_distance(fa.data(), fb.data()))
}

/// Anchor, positive (same identity) and negative (other identity) features.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletFeatures {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

impl TripletFeatures {
    pub fn new(anchor: Tensor, positive: Tensor, negative: Tensor) -> Result<Self> {
        if anchor.len() != positive.len() || anchor.len() != negative.len() {
            return Err(FannError::ShapeMismatch {
                op: "triplet features",
                left: anchor.dims().to_vec(),
                right: if anchor.len() != positive.len() {
                    positive.dims().to_vec()
                } else {
                    negative.dims().to_vec()
                },
            });
        }
        check_unit(&anchor, "anchor feature")?;
        check_unit(&positive, "positive feature")?;
        check_unit(&negative, "negative feature")?;
        Ok(TripletFeatures {
            anchor,
            positive,
            negative,
        })
    }

    /// `(d12, d13, d23)`.
    pub fn distances(&self) -> (f64, f64, f64) {
        let (a, p, n) = (self.anchor.data(), self.positive.data(), self.negative.data());
        (squared_distance(a, p), squared_distance(a, n), squared_distance(p, n))
    }
}

/// The hinge argument `M + d12 − (u·d13 + v·d23)`.
pub fn hinge_argument(d12: f64, d13: f64, d23: f64, u: f64, v: f64, margin: f64) -> f64 {
    margin + d12 - (u * d13 + v * d23)
}

fn check_loss_params(u: f64, v: f64, margin: f64) -> Result<()> {
    if u < 0.0 || v < 0.0 || !(margin > 0.0) {
        return Err(FannError::InvalidArgument(format!(
            "triplet loss needs u, v ≥ 0 and M > 0, got u={u}, v={v}, M={margin}"
        )));
    }
    Ok(())
}

/// `max(M + d12 − (u·d13 + v·d23), 0)`.
pub fn symmetric_triplet_loss(t: &TripletFeatures, u: f64, v: f64, margin: f64) -> Result<f64> {
    check_loss_params(u, v, margin)?;
    let (d12, d13, d23) = t.distances();
    Ok(hinge_argument(d12, d13, d23, u, v, margin).max(0.0))
}

/// Gradients of the hinge loss with respect to the three features. All
/// zero when the hinge is inactive.
pub fn symmetric_triplet_grad(t: &TripletFeatures, u: f64, v: f64, margin: f64) -> Result<[Tensor; 3]> {
    check_loss_params(u, v, margin)?;
    let (g1, g2, g3) = triplet_grad_slices(t.anchor.data(), t.positive.data(), t.negative.data(), u, v, margin);
    Ok([
        Tensor::from_vec(t.anchor.dims(), g1)?,
        Tensor::from_vec(t.positive.dims(), g2)?,
        Tensor::from_vec(t.negative.dims(), g3)?,
    ])
}

pub(crate) fn triplet_grad_slices(
    f1: &[f64],
    f2: &[f64],
    f3: &[f64],
    u: f64,
    v: f64,
    margin: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = f1.len();
    let (d12, d13, d23) = (squared_distance(f1, f2), squared_distance(f1, f3), squared_distance(f2, f3));
    if hinge_argument(d12, d13, d23, u, v, margin) <= 0.0 {
        return (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    }
    let mut g1 = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    let mut g3 = Vec::with_capacity(n);
    for i in 0..n {
        let a = f1[i] - f2[i];
        let b = f1[i] - f3[i];
        let c = f2[i] - f3[i];
        g1.push(2.0 * a - 2.0 * u * b);
        g2.push(-2.0 * a - 2.0 * v * c);
        g3.push(2.0 * u * b + 2.0 * v * c);
    }
    (g1, g2, g3)
}

/// Sign convention for the direction-control weight update.
///
/// `Textual` moves `u` down and `v` up when `d13 > d23`, which equalizes the
/// two negative distances. `Literal` applies the opposite sign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignMode {
    #[default]
    Textual,
    Literal,
}

impl FromStr for SignMode {
    type Err = FannError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textual" => Ok(SignMode::Textual),
            "literal" => Ok(SignMode::Literal),
            other => Err(FannError::Config(format!("unknown sign mode `{other}`"))),
        }
    }
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignMode::Textual => "textual",
            SignMode::Literal => "literal",
        })
    }
}

/// Per-triplet weights `u = α + β`, `v = α − β`; only `β` moves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveWeightState {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sign_mode: SignMode,
}

impl AdaptiveWeightState {
    pub fn new(u: f64, v: f64, gamma: f64, sign_mode: SignMode) -> Result<Self> {
        if u < 0.0 || v < 0.0 || u + v <= 0.0 {
            return Err(FannError::InvalidArgument(format!(
                "initial weights must be non-negative with positive sum, got u={u}, v={v}"
            )));
        }
        Ok(AdaptiveWeightState {
            alpha: 0.5 * (u + v),
            beta: 0.5 * (u - v),
            gamma,
            sign_mode,
        })
    }

    pub fn u(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn v(&self) -> f64 {
        self.alpha - self.beta
    }

    /// Hinge-gated step on `β` from the current distances; returns whether
    /// the state changed branch (hinge active).
    pub fn update(&mut self, d12: f64, d13: f64, d23: f64, margin: f64) -> bool {
        if hinge_argument(d12, d13, d23, self.u(), self.v(), margin) <= 0.0 {
            return false;
        }
        let raw = d23 - d13;
        match self.sign_mode {
            SignMode::Textual => self.beta += self.gamma * raw,
            SignMode::Literal => self.beta -= self.gamma * raw,
        }
        self.beta = self.beta.clamp(-self.alpha, self.alpha);
        true
    }
}

/// Applies one weight update for the given triplet features.
pub fn update_adaptive_weight(
    state: &AdaptiveWeightState,
    t: &TripletFeatures,
    margin: f64,
) -> AdaptiveWeightState {
    let (d12, d13, d23) = t.distances();
    let mut next = *state;
    next.update(d12, d13, d23, margin);
    next
}

/// Truncated 2-D Gaussian kernel on a `(2⌊ρ⌋+1)²` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub rho: f64,
    pub normalized: bool,
    pub values: Tensor,
}

impl GaussianKernel {
    pub fn new(sigma: f64, rho: f64, normalized: bool) -> Result<Self> {
        if !(sigma > 0.0) || !(rho >= 0.0) || !rho.is_finite() {
            return Err(FannError::InvalidArgument(format!(
                "kernel needs σ > 0 and finite ρ ≥ 0, got σ={sigma}, ρ={rho}"
            )));
        }
        let r = rho.floor() as usize;
        let size = 2 * r + 1;
        let peak = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        let mut values = Tensor::zeros(&[size, size])?;
        for dy in 0..size {
            for dx in 0..size {
                let oy = dy as f64 - r as f64;
                let ox = dx as f64 - r as f64;
                let dist2 = oy * oy + ox * ox;
                if dist2.sqrt() <= rho {
                    values.data_mut()[dy * size + dx] = peak * (-dist2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        if normalized {
            let total = values.sum();
            values = values.scale(1.0 / total);
        }
        Ok(GaussianKernel {
            sigma,
            rho,
            normalized,
            values,
        })
    }

    pub fn radius(&self) -> usize {
        self.values.dims()[0] / 2
    }

    pub fn center(&self) -> f64 {
        let size = self.values.dims()[0];
        self.values.data()[(size / 2) * size + size / 2]
    }

    /// Per-channel shape-preserving correlation with zero padding.
    pub fn smooth(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.chw()?;
        let r = self.radius() as isize;
        let size = self.values.dims()[0];
        let mut out = Tensor::zeros_like(t);
        let src = t.data();
        let dst = out.data_mut();
        for ky in 0..size {
            for kx in 0..size {
                let kv = self.values.data()[ky * size + kx];
                if kv == 0.0 {
                    continue;
                }
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for ch in 0..c {
                    let plane = ch * h * w;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = plane + sy as usize * w;
                        let drow = plane + y * w;
                        for x in x_lo..x_hi {
                            dst[drow + x] += kv * src[(srow as isize + x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn check_regression_inputs(recon: &Tensor, mask: &Tensor) -> Result<()> {
    if recon.dims() != mask.dims() {
        return Err(FannError::ShapeMismatch {
            op: "local regression",
            left: recon.dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    recon.chw()?;
    Ok(())
}

/// `‖K ⊛ (recon − mask)‖²_F`, summed over channels.
pub fn local_regression_loss(recon: &Tensor, mask: &Tensor, kernel: &GaussianKernel) -> Result<f64> {
    check_regression_inputs(recon, mask)?;
    Ok(kernel.smooth(&recon.sub(mask)?)?.sum_of_squares())
}

/// `2·K ⊛ (K ⊛ (recon − mask))`. The kernel is symmetric under 180°
/// rotation, so correlating with it is its own adjoint.
pub fn local_regression_grad(recon: &Tensor, mask: &Tensor, kernel: &GaussianKernel) -> Result<Tensor> {
    check_regression_inputs(recon, mask)?;
    let inner = kernel.smooth(&recon.sub(mask)?)?;
    Ok(kernel.smooth(&inner)?.scale(2.0))
}

/// Copies a single-channel mask into `channels` identical channels.
pub fn replicate_channels(mask: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = mask.chw()?;
    if c != 1 {
        return Err(FannError::InvalidShape {
            op: "replicate_channels",
            reason: format!("expected a single-channel mask, got {}", mask.shape()),
        });
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// `Σ ‖W‖²_F + ‖b‖²` and its gradient `(2W, 2b)` per parameter set.
pub fn parameter_regularizer<'a>(params: impl IntoIterator<Item = &'a ParamSet>) -> (f64, Vec<(Tensor, Tensor)>) {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for p in params {
        total += p.weights.sum_of_squares() + p.biases.sum_of_squares();
        grads.push((p.weights.scale(2.0), p.biases.scale(2.0)));
    }
    (total, grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletLossKind {
    /// Fixed `u = 1, v = 0`, no weight updates.
    Asymmetric,
    Symmetric,
}

impl FromStr for TripletLossKind {
    type Err = FannError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymmetric" => Ok(TripletLossKind::Asymmetric),
            "symmetric" => Ok(TripletLossKind::Symmetric),
            other => Err(FannError::InvalidArgument(format!("unknown loss kind `{other}`"))),
        }
    }
}

impl fmt::Display for TripletLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripletLossKind::Asymmetric => "asymmetric",
            TripletLossKind::Symmetric => "symmetric",
        })
    }
}

/// Gradient descent on three free 2-D points under a triplet loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub init: [[f64; 2]; 3],
    pub loss_kind: TripletLossKind,
    pub steps: usize,
    pub step_size: f64,
    pub margin: f64,
    pub init_u: f64,
    pub init_v: f64,
    pub gamma: f64,
    pub sign_mode: SignMode,
}

impl DynamicsConfig {
    /// Anchor and positive one unit apart; the negative starts closer to
    /// the anchor than to the positive.
    pub fn new(loss_kind: TripletLossKind) -> Self {
        DynamicsConfig {
            init: [[0.0, 0.0], [1.0, 0.0], [0.3, 0.8]],
            loss_kind,
            steps: 200,
            step_size: 0.01,
            margin: 0.1,
            init_u: 0.6,
            init_v: 0.4,
            gamma: 0.01,
            sign_mode: SignMode::Textual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsRow {
    pub step: usize,
    pub points: [[f64; 2]; 3],
    pub d12: f64,
    pub d13: f64,
    pub d23: f64,
    pub u: f64,
    pub v: f64,
}

impl DynamicsRow {
    pub fn hinge_active(&self, margin: f64) -> bool {
        hinge_argument(self.d12, self.d13, self.d23, self.u, self.v, margin) > 0.0
    }
}

/// Runs the point dynamics; row 0 is the initial state, one row per step after.
pub fn simulate_triplet_dynamics(cfg: &DynamicsConfig) -> Result<Vec<DynamicsRow>> {
    let mut state = match cfg.loss_kind {
        TripletLossKind::Asymmetric => AdaptiveWeightState::new(1.0, 0.0, 0.0, cfg.sign_mode)?,
        TripletLossKind::Symmetric => AdaptiveWeightState::new(cfg.init_u, cfg.init_v, cfg.gamma, cfg.sign_mode)?,
    };
    let mut pts = cfg.init;
    let row = |step: usize, pts: &[[f64; 2]; 3], s: &AdaptiveWeightState| DynamicsRow {
        step,
        points: *pts,
        d12: squared_distance(&pts[0], &pts[1]),
        d13: squared_distance(&pts[0], &pts[2]),
        d23: squared_distance(&pts[1], &pts[2]),
        u: s.u(),
        v: s.v(),
    };
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    rows.push(row(0, &pts, &state));
    for step in 1..=cfg.steps {
        let (d12, d13, d23) = (
            squared_distance(&pts[0], &pts[1]),
            squared_distance(&pts[0], &pts[2]),
            squared_distance(&pts[1], &pts[2]),
        );
        if cfg.loss_kind == TripletLossKind::Symmetric {
            state.update(d12, d13, d23, cfg.margin);
        }
        let (g1, g2, g3) = triplet_grad_slices(&pts[0], &pts[1], &pts[2], state.u(), state.v(), cfg.margin);
        for (p, g) in pts.iter_mut().zip([g1, g2, g3]) {
            p[0] -= cfg.step_size * g[0];
            p[1] -= cfg.step_size * g[1];
        }
        rows.push(row(step, &pts, &state));
    }
    Ok(rows)
}

pub const DYNAMICS_CSV_HEADER: &str = "step,x1x,x1y,x2x,x2y,x3x,x3y,d12,d13,d23,u,v";

pub fn write_dynamics_csv<W: Write>(rows: &[DynamicsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{DYNAMICS_CSV_HEADER}")?;
    for r in rows {
        let [a, b, c] = r.points;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step, a[0], a[1], b[0], b[1], c[0], c[1], r.d12, r.d13, r.d23, r.u, r.v
        )?;
    }
    Ok(())
}
