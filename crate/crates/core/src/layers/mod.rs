//! Forward and analytic backward passes for every layer kind in the
//! network.
//!
//! Each layer caches what its backward pass needs in a [`LayerContext`].
//! Backward passes return the input gradient and *add* parameter gradients
//! into the caller's accumulators, so a mini-batch accumulates by repeated
//! calls.

mod conv;
mod dense;
mod pool;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{conv_backward, conv_forward, deconv_backward, deconv_forward};
pub use dense::{
    fully_connected_backward, fully_connected_forward, l2_normalize_backward, l2_normalize_forward, relu,
    relu_backward, NORM_EPSILON,
};
pub use pool::{maxpool_backward, maxpool_forward, ArgmaxMap};

use crate::error::{FannError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Deconv,
    Relu,
    MaxPool,
    FullyConnected,
    L2Normalize,
}

/// Declarative layer description. For fully connected layers
/// `in_channels` holds the flattened input length and `out_dim` the output
/// length; spatial fields are unused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_dim: usize,
}

impl LayerSpec {
    fn base(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            in_channels: 0,
            out_channels: 0,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            out_dim: 0,
        }
    }

    pub fn conv(cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        LayerSpec {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            ..Self::base(LayerKind::Conv)
        }
    }

    pub fn deconv(cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            ..Self::conv(cin, cout, kernel, stride, padding)
        }
    }

    pub fn relu() -> Self {
        Self::base(LayerKind::Relu)
    }

    pub fn maxpool(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        LayerSpec {
            kernel,
            stride,
            padding,
            ..Self::base(LayerKind::MaxPool)
        }
    }

    pub fn fully_connected(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            in_channels: in_dim,
            out_dim,
            ..Self::base(LayerKind::FullyConnected)
        }
    }

    pub fn l2_normalize() -> Self {
        Self::base(LayerKind::L2Normalize)
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Deconv | LayerKind::FullyConnected)
    }

    /// `(weight dims, bias dims)` for parameterized layers.
    pub fn param_dims(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv => Some((vec![self.out_channels, self.in_channels, kh, kw], vec![self.out_channels])),
            LayerKind::Deconv => Some((vec![self.in_channels, self.out_channels, kh, kw], vec![self.out_channels])),
            LayerKind::FullyConnected => Some((vec![self.out_dim, self.in_channels], vec![self.out_dim])),
            _ => None,
        }
    }

    /// Number of inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv | LayerKind::Deconv => self.in_channels * kh * kw,
            LayerKind::FullyConnected => self.in_channels,
            _ => 0,
        }
    }

    fn check_positive(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(FannError::InvalidArgument(format!(
                "{:?}: kernel and stride must be positive, got {:?} / {:?}",
                self.kind, self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Symbolic shape propagation; fails exactly where the forward pass would.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_positive()?;
        let chw = |op: &'static str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(FannError::InvalidShape {
                    op,
                    reason: format!("expected [C, H, W] input, got {input:?}"),
                }),
            }
        };
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        match self.kind {
            LayerKind::Conv => {
                let (c, h, w) = chw("conv")?;
                if c != self.in_channels {
                    return Err(FannError::ShapeMismatch {
                        op: "conv input channels",
                        left: input.to_vec(),
                        right: vec![self.in_channels, h, w],
                    });
                }
                let oh = conv::conv_extent(h, kh, sh, ph);
                let ow = conv::conv_extent(w, kw, sw, pw);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![self.out_channels, oh, ow]),
                    (None, _) => Err(FannError::InvalidShape {
                        op: "conv",
                        reason: format!("height: ({h} + 2·{ph} − {kh}) is not a non-negative multiple of stride {sh}"),
                    }),
                    (_, None) => Err(FannError::InvalidShape {
                        op: "conv",
                        reason: format!("width: ({w} + 2·{pw} − {kw}) is not a non-negative multiple of stride {sw}"),
                    }),
                }
            }
            LayerKind::Deconv => {
                let (c, h, w) = chw("deconv")?;
                if c != self.in_channels {
                    return Err(FannError::ShapeMismatch {
                        op: "deconv input channels",
                        left: input.to_vec(),
                        right: vec![self.in_channels, h, w],
                    });
                }
                match (conv::deconv_extent(h, kh, sh, ph), conv::deconv_extent(w, kw, sw, pw)) {
                    (Some(oh), Some(ow)) => Ok(vec![self.out_channels, oh, ow]),
                    _ => Err(FannError::InvalidShape {
                        op: "deconv",
                        reason: format!("padding {:?} consumes the whole output", self.padding),
                    }),
                }
            }
            LayerKind::MaxPool => {
                let (c, h, w) = chw("maxpool")?;
                match (pool::pool_extent(h, kh, sh, ph), pool::pool_extent(w, kw, sw, pw)) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(FannError::InvalidShape {
                        op: "maxpool",
                        reason: format!("{kh}x{kw} window (padding {ph},{pw}) does not fit {h}x{w}"),
                    }),
                }
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::FullyConnected => {
                let n: usize = input.iter().product();
                if n != self.in_channels {
                    return Err(FannError::ShapeMismatch {
                        op: "fully_connected input",
                        left: input.to_vec(),
                        right: vec![self.in_channels],
                    });
                }
                Ok(vec![self.out_dim])
            }
            LayerKind::L2Normalize => Ok(vec![input.iter().product()]),
        }
    }
}

/// Learnable weights and biases with their gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub weights: Tensor,
    pub biases: Tensor,
    pub weight_grads: Tensor,
    pub bias_grads: Tensor,
}

impl ParamSet {
    pub fn zeros(spec: &LayerSpec) -> Result<Self> {
        let (wd, bd) = spec.param_dims().ok_or_else(|| {
            FannError::InvalidArgument(format!("{:?} layers carry no parameters", spec.kind))
        })?;
        let weights = Tensor::zeros(&wd)?;
        let biases = Tensor::zeros(&bd)?;
        Ok(ParamSet {
            weight_grads: Tensor::zeros_like(&weights),
            bias_grads: Tensor::zeros_like(&biases),
            weights,
            biases,
        })
    }

    /// Zero-mean Gaussian weights with the given standard deviation, zero biases.
    pub fn gaussian<R: Rng + ?Sized>(spec: &LayerSpec, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = ParamSet::zeros(spec)?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| FannError::InvalidArgument(format!("init std {std}: {e}")))?;
        for w in p.weights.data_mut() {
            *w = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn zero_grads(&mut self) {
        self.weight_grads.fill(0.0);
        self.bias_grads.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Cached forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub enum LayerContext {
    /// Layers whose backward needs only the forward input.
    Input(Tensor),
    Pool(ArgmaxMap),
    Normalize { output: Tensor, norm: f64 },
}

/// A layer spec together with its (optional) parameters.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<ParamSet>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Option<ParamSet>) -> Result<Self> {
        match (&params, spec.param_dims()) {
            (None, None) => {}
            (Some(p), Some((wd, bd))) => {
                if p.weights.dims() != wd || p.biases.dims() != bd {
                    return Err(FannError::ShapeMismatch {
                        op: "layer parameters",
                        left: p.weights.dims().to_vec(),
                        right: wd,
                    });
                }
            }
            (None, Some(_)) => {
                return Err(FannError::InvalidArgument(format!("{:?} layer needs parameters", spec.kind)))
            }
            (Some(_), None) => {
                return Err(FannError::InvalidArgument(format!("{:?} layer takes no parameters", spec.kind)))
            }
        }
        Ok(Layer { spec, params })
    }

    fn params(&self) -> Result<&ParamSet> {
        self.params
            .as_ref()
            .ok_or_else(|| FannError::InvalidArgument(format!("{:?} layer has no parameters", self.spec.kind)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerContext)> {
        match self.spec.kind {
            LayerKind::Conv => {
                let p = self.params()?;
                let y = conv_forward(x, &p.weights, &p.biases, &self.spec)?;
                Ok((y, LayerContext::Input(x.clone())))
            }
            LayerKind::Deconv => {
                let p = self.params()?;
                let y = deconv_forward(x, &p.weights, &p.biases, &self.spec)?;
                Ok((y, LayerContext::Input(x.clone())))
            }
            LayerKind::FullyConnected => {
                let p = self.params()?;
                let y = fully_connected_forward(x, &p.weights, &p.biases, &self.spec)?;
                Ok((y, LayerContext::Input(x.clone())))
            }
            LayerKind::Relu => Ok((relu(x), LayerContext::Input(x.clone()))),
            LayerKind::MaxPool => {
                let (y, map) = maxpool_forward(x, &self.spec)?;
                Ok((y, LayerContext::Pool(map)))
            }
            LayerKind::L2Normalize => {
                let (y, norm) = l2_normalize_forward(x)?;
                Ok((y.clone(), LayerContext::Normalize { output: y, norm }))
            }
        }
    }

    /// Backward pass accumulating parameter gradients into this layer's own
    /// [`ParamSet`].
    pub fn backward(&mut self, ctx: &LayerContext, upstream: &Tensor) -> Result<Tensor> {
        let mut grads = self
            .params
            .as_ref()
            .map(|p| (Tensor::zeros_like(&p.weights), Tensor::zeros_like(&p.biases)));
        let gx = self.backward_into(ctx, upstream, grads.as_mut().map(|(w, b)| (w, b)))?;
        if let (Some(p), Some((gw, gb))) = (self.params.as_mut(), grads) {
            p.weight_grads.add_assign(&gw)?;
            p.bias_grads.add_assign(&gb)?;
        }
        Ok(gx)
    }

    /// Backward pass accumulating parameter gradients into external buffers.
    pub fn backward_into(
        &self,
        ctx: &LayerContext,
        upstream: &Tensor,
        grads: Option<(&mut Tensor, &mut Tensor)>,
    ) -> Result<Tensor> {
        match (self.spec.kind, ctx) {
            (LayerKind::Conv, LayerContext::Input(x)) => {
                conv_backward(x, &self.params()?.weights, &self.spec, upstream, grads)
            }
            (LayerKind::Deconv, LayerContext::Input(x)) => {
                deconv_backward(x, &self.params()?.weights, &self.spec, upstream, grads)
            }
            (LayerKind::FullyConnected, LayerContext::Input(x)) => {
                if upstream.len() != self.spec.out_dim {
                    return Err(FannError::ShapeMismatch {
                        op: "fully_connected backward",
                        left: upstream.dims().to_vec(),
                        right: vec![self.spec.out_dim],
                    });
                }
                fully_connected_backward(x, &self.params()?.weights, upstream, grads)
            }
            (LayerKind::Relu, LayerContext::Input(x)) => relu_backward(x, upstream),
            (LayerKind::MaxPool, LayerContext::Pool(map)) => maxpool_backward(map, upstream),
            (LayerKind::L2Normalize, LayerContext::Normalize { output, norm }) => {
                if upstream.dims() != output.dims() {
                    return Err(FannError::ShapeMismatch {
                        op: "l2_normalize backward",
                        left: upstream.dims().to_vec(),
                        right: output.dims().to_vec(),
                    });
                }
                l2_normalize_backward(output, *norm, upstream)
            }
            (kind, _) => Err(FannError::InvalidArgument(format!(
                "context does not belong to a {kind:?} layer"
            ))),
        }
    }
}
