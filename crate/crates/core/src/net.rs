//! The three-subnetwork model: a foreground-attentive encoder/decoder, per
//! body-part residual stacks and a fusion head producing a unit embedding.
//!
//! ```text
//! image ─ encoder[..tap] ─┬─ encoder[tap..] ─ slice_height ─ part stacks ─ fcA ─ relu ─ fcB ─┐
//!                         │                                                  └─ concat ─ fcLarge ─┤
//!                         └─ decoder ─ reconstruction                          concat ─ l2norm ─ embedding
//! ```

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FannError, Result};
use crate::layers::{relu, relu_backward, Layer, LayerContext, LayerKind, LayerSpec, ParamSet};
use crate::losses::SignMode;
use crate::tensor::{band_heights, Tensor};

/// How initial weights are drawn. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Zero-mean Gaussian whose standard deviation is drawn per layer,
    /// uniformly from `[min_std, max_std]`.
    Gaussian { min_std: f64, max_std: f64 },
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    He,
}

impl InitScheme {
    pub const SMALL_GAUSSIAN: InitScheme = InitScheme::Gaussian {
        min_std: 0.001,
        max_std: 0.01,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// `[C, H, W]` of every input image.
    pub input_shape: [usize; 3],
    pub encoder: Vec<LayerSpec>,
    /// The decoder reads the output of the first `tap_index` encoder layers.
    pub tap_index: usize,
    pub decoder: Vec<LayerSpec>,
    pub parts: usize,
    pub residual_blocks_per_part: usize,
    pub part_channels: usize,
    pub fc_small_dim: usize,
    pub fc_large_dim: usize,
    pub margin: f64,
    pub zeta: f64,
    pub eta: f64,
    pub kernel_sigma: f64,
    pub kernel_rho: f64,
    pub kernel_normalized: bool,
    pub init_u: f64,
    pub init_v: f64,
    pub gamma: f64,
    pub sign_mode: SignMode,
    pub init: InitScheme,
    pub seed: u64,
}

impl NetworkConfig {
    fn with_layers(input_shape: [usize; 3], encoder: Vec<LayerSpec>, tap_index: usize, decoder: Vec<LayerSpec>) -> Self {
        NetworkConfig {
            input_shape,
            encoder,
            tap_index,
            decoder,
            parts: 4,
            residual_blocks_per_part: 2,
            part_channels: 32,
            fc_small_dim: 150,
            fc_large_dim: 600,
            margin: 0.1,
            zeta: 0.02,
            eta: 0.05,
            kernel_sigma: 0.01,
            kernel_rho: 3.0,
            kernel_normalized: true,
            init_u: 0.6,
            init_v: 0.4,
            gamma: 0.01,
            sign_mode: SignMode::default(),
            init: InitScheme::SMALL_GAUSSIAN,
            seed: 0,
        }
    }

    /// Full-size network for 229×79 inputs.
    pub fn full() -> Self {
        Self::with_layers(
            [3, 229, 79],
            vec![
                LayerSpec::conv(3, 64, (7, 7), (3, 3), (0, 0)),
                LayerSpec::relu(),
                LayerSpec::conv(64, 64, (5, 5), (2, 2), (0, 0)),
                LayerSpec::relu(),
                LayerSpec::maxpool((3, 3), (1, 1), (1, 1)),
            ],
            4,
            vec![
                LayerSpec::deconv(64, 64, (5, 5), (2, 2), (0, 0)),
                LayerSpec::relu(),
                LayerSpec::deconv(64, 3, (7, 7), (3, 3), (0, 0)),
            ],
        )
    }

    /// Small network for 37×13 inputs that trains in seconds on one core.
    pub fn desk() -> Self {
        let c = 8;
        NetworkConfig {
            residual_blocks_per_part: 1,
            part_channels: 8,
            fc_small_dim: 16,
            fc_large_dim: 64,
            init: InitScheme::He,
            ..Self::with_layers(
                [3, 37, 13],
                vec![
                    LayerSpec::conv(3, c, (7, 7), (2, 2), (0, 0)),
                    LayerSpec::relu(),
                    LayerSpec::conv(c, c, (3, 3), (1, 1), (1, 1)),
                    LayerSpec::relu(),
                    LayerSpec::maxpool((3, 3), (1, 1), (1, 1)),
                ],
                4,
                vec![
                    LayerSpec::deconv(c, c, (3, 3), (1, 1), (1, 1)),
                    LayerSpec::relu(),
                    LayerSpec::deconv(c, 3, (7, 7), (2, 2), (0, 0)),
                ],
            )
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc_large_dim + self.parts * self.fc_small_dim
    }

    /// Checks scalar hyperparameters. Shapes are checked by [`Network::build`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FannError::Config(m));
        if self.parts == 0 || self.residual_blocks_per_part == 0 || self.part_channels == 0 {
            return bad("parts, residual_blocks_per_part and part_channels must be positive".into());
        }
        if self.fc_small_dim == 0 || self.fc_large_dim == 0 {
            return bad("fully connected dimensions must be positive".into());
        }
        if self.tap_index == 0 || self.tap_index > self.encoder.len() {
            return bad(format!(
                "tap_index {} must lie in 1..={} (encoder length)",
                self.tap_index,
                self.encoder.len()
            ));
        }
        if self.decoder.is_empty() {
            return bad("decoder must not be empty".into());
        }
        for (name, v) in [
            ("margin", self.margin),
            ("zeta", self.zeta),
            ("eta", self.eta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.kernel_sigma > 0.0 && self.kernel_sigma.is_finite()) || !(self.kernel_rho >= 0.0) {
            return bad(format!(
                "kernel sigma {} must be positive and rho {} non-negative",
                self.kernel_sigma, self.kernel_rho
            ));
        }
        if !(self.init_u >= 0.0 && self.init_v >= 0.0 && (self.init_u + self.init_v - 1.0).abs() < 1e-12) {
            return bad(format!(
                "init u {} and v {} must be non-negative and sum to 1",
                self.init_u, self.init_v
            ));
        }
        if let InitScheme::Gaussian { min_std, max_std } = self.init {
            if !(min_std > 0.0 && min_std <= max_std && max_std.is_finite()) {
                return bad(format!("init std range [{min_std}, {max_std}] is invalid"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockNodes {
    conv1: usize,
    conv2: usize,
    pool: usize,
}

#[derive(Debug, Clone)]
struct PartNodes {
    blocks: Vec<BlockNodes>,
    fc_a: usize,
    fc_b: usize,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    conv1: LayerContext,
    conv2: LayerContext,
    /// Pre-activation sum of both conv outputs.
    sum: Tensor,
    pool: LayerContext,
}

#[derive(Debug, Clone)]
pub struct PartTrace {
    blocks: Vec<BlockTrace>,
    fc_a: LayerContext,
    /// fcA output before its ReLU; also what fcLarge consumes.
    fc_a_out: Tensor,
    fc_b: LayerContext,
}

/// Everything one forward pass caches for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    network_id: u64,
    encoder: Vec<LayerContext>,
    /// Activation at the decoder tap, shared by both subnetworks.
    pub encoder_features: Tensor,
    encoder_output_dims: Vec<usize>,
    decoder: Option<Vec<LayerContext>>,
    /// `None` when the decoder was skipped.
    pub reconstruction: Option<Tensor>,
    parts: Vec<PartTrace>,
    fc_large: LayerContext,
    normalize: LayerContext,
    pub ranking_embedding: Tensor,
}

impl ForwardTrace {
    /// Hash of every piecewise-linear branch taken: ReLU signs and max-pool
    /// winners. Two inputs with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut ctx = |c: &LayerContext| match c {
            LayerContext::Pool(map) => map.winners.hash(&mut h),
            LayerContext::Input(x) => {
                for &v in x.data() {
                    (v > 0.0).hash(&mut h);
                }
            }
            LayerContext::Normalize { .. } => {}
        };
        for c in &self.encoder {
            ctx(c);
        }
        for c in self.decoder.iter().flatten() {
            ctx(c);
        }
        for p in &self.parts {
            for b in &p.blocks {
                ctx(&LayerContext::Input(b.sum.clone()));
                ctx(&b.pool);
            }
            ctx(&LayerContext::Input(p.fc_a_out.clone()));
        }
        h.finish()
    }
}

/// Parameter-gradient buffers, one slot per layer in build order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<(Tensor, Tensor)>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(FannError::InvalidArgument("gradient buffers of different networks".into()));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a, b) {
                (Some((aw, ab)), Some((bw, bb))) => {
                    aw.add_assign(bw)?;
                    ab.add_assign(bb)?;
                }
                (None, None) => {}
                _ => return Err(FannError::InvalidArgument("gradient slot layout differs".into())),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.slots.iter_mut().flatten() {
            *w = w.scale(factor);
            *b = b.scale(factor);
        }
    }

    /// Parameterized slots in build order.
    pub fn iter(&self) -> impl Iterator<Item = &(Tensor, Tensor)> {
        self.slots.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (Tensor, Tensor)> {
        self.slots.iter_mut().flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(w, b)| w.all_finite() && b.all_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter()
            .all(|(w, b)| w.data().iter().chain(b.data()).all(|&v| v == 0.0))
    }

    fn slot(&mut self, i: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        self.slots[i].as_mut().map(|(w, b)| (w, b))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    names: Vec<String>,
    encoder: Vec<usize>,
    decoder: Vec<usize>,
    parts: Vec<PartNodes>,
    fc_large: usize,
    normalize: usize,
    encoder_output_dims: Vec<usize>,
    id: u64,
}

struct Builder {
    layers: Vec<Layer>,
    names: Vec<String>,
    rng: ChaCha8Rng,
    init: InitScheme,
}

impl Builder {
    fn push(&mut self, name: String, spec: LayerSpec) -> Result<usize> {
        let params = if spec.has_params() {
            let std = match self.init {
                InitScheme::Gaussian { min_std, max_std } => {
                    if min_std == max_std {
                        min_std
                    } else {
                        self.rng.random_range(min_std..=max_std)
                    }
                }
                InitScheme::He => (2.0 / spec.fan_in() as f64).sqrt(),
            };
            Some(ParamSet::gaussian(&spec, std, &mut self.rng)?)
        } else {
            None
        };
        self.layers.push(Layer::new(spec, params)?);
        self.names.push(name);
        Ok(self.layers.len() - 1)
    }
}

fn junction(junction: impl Into<String>, err: FannError) -> FannError {
    FannError::Junction {
        junction: junction.into(),
        reason: err.to_string(),
    }
}

fn layer_tag(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "conv",
        LayerKind::Deconv => "deconv",
        LayerKind::Relu => "relu",
        LayerKind::MaxPool => "pool",
        LayerKind::FullyConnected => "fc",
        LayerKind::L2Normalize => "l2norm",
    }
}

impl Network {
    /// Instantiates every layer, verifying shapes at each junction first.
    pub fn build(config: &NetworkConfig) -> Result<Network> {
        config.validate()?;
        let mut b = Builder {
            layers: Vec::new(),
            names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            init: config.init,
        };

        let mut dims = config.input_shape.to_vec();
        let mut tap_dims = Vec::new();
        let mut encoder = Vec::new();
        for (i, spec) in config.encoder.iter().enumerate() {
            let name = format!("encoder.{i}.{}", layer_tag(spec.kind));
            dims = spec.output_dims(&dims).map_err(|e| junction(&name, e))?;
            encoder.push(b.push(name, spec.clone())?);
            if i + 1 == config.tap_index {
                tap_dims = dims.clone();
            }
        }
        let encoder_output_dims = dims.clone();

        let mut decoder = Vec::new();
        let mut ddims = tap_dims.clone();
        for (i, spec) in config.decoder.iter().enumerate() {
            let name = format!("decoder.{i}.{}", layer_tag(spec.kind));
            ddims = spec.output_dims(&ddims).map_err(|e| junction(&name, e))?;
            decoder.push(b.push(name, spec.clone())?);
        }
        if ddims != config.input_shape {
            return Err(FannError::Junction {
                junction: "decoder output -> reconstruction".into(),
                reason: format!(
                    "decoder produces {:?} from tap {:?}, input is {:?}",
                    ddims, tap_dims, config.input_shape
                ),
            });
        }

        let [enc_c, enc_h, enc_w] = match encoder_output_dims[..] {
            [c, h, w] => [c, h, w],
            _ => {
                return Err(FannError::Junction {
                    junction: "encoder output -> part slices".into(),
                    reason: format!("expected [C, H, W], got {encoder_output_dims:?}"),
                })
            }
        };
        if enc_h < config.parts {
            return Err(FannError::Junction {
                junction: "encoder output -> part slices".into(),
                reason: format!("height {enc_h} cannot be split into {} parts", config.parts),
            });
        }

        let mut parts = Vec::new();
        for (p, band_h) in band_heights(enc_h, config.parts).into_iter().enumerate() {
            let mut pdims = vec![enc_c, band_h, enc_w];
            let mut blocks = Vec::new();
            for k in 0..config.residual_blocks_per_part {
                let cin = pdims[0];
                let pc = config.part_channels;
                let conv1 = LayerSpec::conv(cin, pc, (3, 3), (1, 1), (1, 1));
                let conv2 = LayerSpec::conv(pc, pc, (3, 3), (1, 1), (1, 1));
                let pool = LayerSpec::maxpool((3, 3), (1, 1), (1, 1));
                let prefix = format!("part{p}.block{k}");
                let a = conv1.output_dims(&pdims).map_err(|e| junction(format!("{prefix}.conv1"), e))?;
                let s = conv2.output_dims(&a).map_err(|e| junction(format!("{prefix}.conv2"), e))?;
                if a != s {
                    return Err(FannError::Junction {
                        junction: format!("{prefix} residual sum"),
                        reason: format!("{a:?} + {s:?}"),
                    });
                }
                pdims = pool.output_dims(&s).map_err(|e| junction(format!("{prefix}.pool"), e))?;
                blocks.push(BlockNodes {
                    conv1: b.push(format!("{prefix}.conv1"), conv1)?,
                    conv2: b.push(format!("{prefix}.conv2"), conv2)?,
                    pool: b.push(format!("{prefix}.pool"), pool)?,
                });
            }
            let flat: usize = pdims.iter().product();
            let fc_a = b.push(format!("part{p}.fcA"), LayerSpec::fully_connected(flat, config.fc_small_dim))?;
            let fc_b = b.push(
                format!("part{p}.fcB"),
                LayerSpec::fully_connected(config.fc_small_dim, config.fc_small_dim),
            )?;
            parts.push(PartNodes { blocks, fc_a, fc_b });
        }
        let fc_large = b.push(
            "fusion.fcLarge".into(),
            LayerSpec::fully_connected(config.parts * config.fc_small_dim, config.fc_large_dim),
        )?;
        let normalize = b.push("fusion.l2norm".into(), LayerSpec::l2_normalize())?;

        Ok(Network {
            config: config.clone(),
            layers: b.layers,
            names: b.names,
            encoder,
            decoder,
            parts,
            fc_large,
            normalize,
            encoder_output_dims,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Shape of the activation the decoder reads.
    pub fn tap_dims(&self) -> Result<Vec<usize>> {
        let mut dims = self.config.input_shape.to_vec();
        for &i in &self.encoder[..self.config.tap_index] {
            dims = self.layers[i].spec.output_dims(&dims)?;
        }
        Ok(dims)
    }

    pub fn encoder_output_dims(&self) -> &[usize] {
        &self.encoder_output_dims
    }

    /// Names and parameters of every parameterized layer, in build order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &ParamSet)> {
        self.names
            .iter()
            .zip(&self.layers)
            .filter_map(|(n, l)| l.params.as_ref().map(|p| (n.as_str(), p)))
    }

    pub fn param_sets(&self) -> impl Iterator<Item = &ParamSet> {
        self.layers.iter().filter_map(|l| l.params.as_ref())
    }

    pub fn param_sets_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        self.layers.iter_mut().filter_map(|l| l.params.as_mut())
    }

    pub fn num_params(&self) -> usize {
        self.param_sets().map(ParamSet::num_params).sum()
    }

    /// Names of the parameterized layers whose values feed the decoder only.
    pub fn decoder_param_names(&self) -> Vec<&str> {
        self.decoder
            .iter()
            .filter(|&&i| self.layers[i].params.is_some())
            .map(|&i| self.names[i].as_str())
            .collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            slots: self
                .layers
                .iter()
                .map(|l| {
                    l.params
                        .as_ref()
                        .map(|p| (Tensor::zeros_like(&p.weights), Tensor::zeros_like(&p.biases)))
                })
                .collect(),
        }
    }

    /// Copies of all parameters as a gradient-shaped buffer.
    pub fn params_snapshot(&self) -> Gradients {
        Gradients {
            slots: self
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(|p| (p.weights.clone(), p.biases.clone())))
                .collect(),
        }
    }

    /// `Ω ← Ω − step · grads`.
    pub fn apply_update(&mut self, grads: &Gradients, step: f64) -> Result<()> {
        if grads.slots.len() != self.layers.len() {
            return Err(FannError::InvalidArgument("gradient buffer belongs to another network".into()));
        }
        for (layer, slot) in self.layers.iter_mut().zip(&grads.slots) {
            if let (Some(p), Some((gw, gb))) = (layer.params.as_mut(), slot) {
                p.weights.axpy(-step, gw)?;
                p.biases.axpy(-step, gb)?;
            }
        }
        Ok(())
    }

    /// Adds external gradients into every layer's own accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (layer, slot) in self.layers.iter_mut().zip(&grads.slots) {
            if let (Some(p), Some((gw, gb))) = (layer.params.as_mut(), slot) {
                p.weight_grads.add_assign(gw)?;
                p.bias_grads.add_assign(gb)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.param_sets_mut() {
            p.zero_grads();
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.dims() != self.config.input_shape {
            return Err(FannError::ShapeMismatch {
                op: "network input",
                left: image.dims().to_vec(),
                right: self.config.input_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Full forward pass including the decoder.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.forward_with(image, true)
    }

    pub fn forward_with(&self, image: &Tensor, decode: bool) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let tap = self.config.tap_index;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut x = image.clone();
        let mut encoder_features = None;
        for (k, &i) in self.encoder.iter().enumerate() {
            let (y, ctx) = self.layers[i].forward(&x)?;
            encoder.push(ctx);
            x = y;
            if k + 1 == tap {
                encoder_features = Some(x.clone());
            }
        }
        let encoder_features = encoder_features.expect("tap index validated at build");

        let (decoder, reconstruction) = if decode {
            let mut ctxs = Vec::with_capacity(self.decoder.len());
            let mut r = encoder_features.clone();
            for &i in &self.decoder {
                let (y, ctx) = self.layers[i].forward(&r)?;
                ctxs.push(ctx);
                r = y;
            }
            (Some(ctxs), Some(r))
        } else {
            (None, None)
        };

        let bands = x.slice_height(self.config.parts)?;
        let mut parts = Vec::with_capacity(bands.len());
        let mut fc_a_outs = Vec::with_capacity(bands.len());
        let mut fc_b_outs = Vec::with_capacity(bands.len());
        for (nodes, band) in self.parts.iter().zip(bands) {
            let mut h = band;
            let mut blocks = Vec::with_capacity(nodes.blocks.len());
            for bn in &nodes.blocks {
                let (a, conv1) = self.layers[bn.conv1].forward(&h)?;
                let (c, conv2) = self.layers[bn.conv2].forward(&a)?;
                let sum = a.add(&c)?;
                let (y, pool) = self.layers[bn.pool].forward(&relu(&sum))?;
                blocks.push(BlockTrace { conv1, conv2, sum, pool });
                h = y;
            }
            let (fa, fc_a) = self.layers[nodes.fc_a].forward(&h)?;
            let (fb, fc_b) = self.layers[nodes.fc_b].forward(&relu(&fa))?;
            fc_a_outs.push(fa.clone());
            fc_b_outs.push(fb);
            parts.push(PartTrace {
                blocks,
                fc_a,
                fc_a_out: fa,
                fc_b,
            });
        }
        let a_refs: Vec<&Tensor> = fc_a_outs.iter().collect();
        let (large, fc_large) = self.layers[self.fc_large].forward(&Tensor::concat_flat(&a_refs)?)?;
        let mut fused: Vec<&Tensor> = vec![&large];
        fused.extend(fc_b_outs.iter());
        let (embedding, normalize) = self.layers[self.normalize].forward(&Tensor::concat_flat(&fused)?)?;

        Ok(ForwardTrace {
            network_id: self.id,
            encoder,
            encoder_features,
            encoder_output_dims: x.dims().to_vec(),
            decoder,
            reconstruction,
            parts,
            fc_large,
            normalize,
            ranking_embedding: embedding,
        })
    }

    /// Decoder output only; the ranking branch is not evaluated.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let mut x = image.clone();
        for &i in self.encoder[..self.config.tap_index].iter().chain(&self.decoder) {
            x = self.layers[i].forward(&x)?.0;
        }
        Ok(x)
    }

    /// Ranking embedding only; the decoder is not evaluated.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(image, false)?.ranking_embedding)
    }

    /// Backward pass adding parameter gradients into `grads`. Either upstream
    /// gradient may be omitted; the two paths sum at the encoder tap.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_embedding: Option<&Tensor>,
        grad_reconstruction: Option<&Tensor>,
        grads: &mut Gradients,
    ) -> Result<()> {
        if trace.network_id != self.id
            || trace.parts.len() != self.parts.len()
            || trace.encoder.len() != self.encoder.len()
        {
            return Err(FannError::InvalidArgument(
                "forward trace was not produced by this network".into(),
            ));
        }
        if grads.slots.len() != self.layers.len() {
            return Err(FannError::InvalidArgument("gradient buffer belongs to another network".into()));
        }
        let tap = self.config.tap_index;
        let mut g_tap: Option<Tensor> = None;

        if let Some(g) = grad_embedding {
            if g.len() != self.embedding_dim() {
                return Err(FannError::ShapeMismatch {
                    op: "embedding gradient",
                    left: g.dims().to_vec(),
                    right: vec![self.embedding_dim()],
                });
            }
            let g_fused = self.layers[self.normalize].backward_into(&trace.normalize, g, None)?;
            let gd = g_fused.data();
            let (large, small) = (self.config.fc_large_dim, self.config.fc_small_dim);
            let g_large = Tensor::vector(gd[..large].to_vec())?;
            let g_concat_a =
                self.layers[self.fc_large].backward_into(&trace.fc_large, &g_large, grads.slot(self.fc_large))?;

            let mut g_bands = Vec::with_capacity(self.parts.len());
            for (p, (nodes, pt)) in self.parts.iter().zip(&trace.parts).enumerate() {
                let g_b = Tensor::vector(gd[large + p * small..large + (p + 1) * small].to_vec())?;
                let g_relu = self.layers[nodes.fc_b].backward_into(&pt.fc_b, &g_b, grads.slot(nodes.fc_b))?;
                let mut g_a = relu_backward(&pt.fc_a_out, &g_relu)?;
                g_a.add_assign(&Tensor::vector(
                    g_concat_a.data()[p * small..(p + 1) * small].to_vec(),
                )?)?;
                let mut g = self.layers[nodes.fc_a].backward_into(&pt.fc_a, &g_a, grads.slot(nodes.fc_a))?;
                for (bn, bt) in nodes.blocks.iter().zip(&pt.blocks).rev() {
                    let g_r = self.layers[bn.pool].backward_into(&bt.pool, &g, None)?;
                    let g_sum = relu_backward(&bt.sum, &g_r)?;
                    let mut g_a1 = self.layers[bn.conv2].backward_into(&bt.conv2, &g_sum, grads.slot(bn.conv2))?;
                    g_a1.add_assign(&g_sum)?;
                    g = self.layers[bn.conv1].backward_into(&bt.conv1, &g_a1, grads.slot(bn.conv1))?;
                }
                g_bands.push(g);
            }
            let mut g = Tensor::concat_height(&g_bands)?;
            if g.dims() != &trace.encoder_output_dims[..] {
                return Err(FannError::ShapeMismatch {
                    op: "part gradients",
                    left: g.dims().to_vec(),
                    right: trace.encoder_output_dims.clone(),
                });
            }
            for k in (tap..self.encoder.len()).rev() {
                let i = self.encoder[k];
                g = self.layers[i].backward_into(&trace.encoder[k], &g, grads.slot(i))?;
            }
            g_tap = Some(g);
        }

        if let Some(g) = grad_reconstruction {
            let ctxs = trace.decoder.as_ref().ok_or_else(|| {
                FannError::InvalidArgument("reconstruction gradient given but the decoder was skipped".into())
            })?;
            if g.dims() != self.config.input_shape {
                return Err(FannError::ShapeMismatch {
                    op: "reconstruction gradient",
                    left: g.dims().to_vec(),
                    right: self.config.input_shape.to_vec(),
                });
            }
            let mut g = g.clone();
            for (&i, ctx) in self.decoder.iter().zip(ctxs).rev() {
                g = self.layers[i].backward_into(ctx, &g, grads.slot(i))?;
            }
            match g_tap.as_mut() {
                Some(t) => t.add_assign(&g)?,
                None => g_tap = Some(g),
            }
        }

        if let Some(mut g) = g_tap {
            for k in (0..tap).rev() {
                let i = self.encoder[k];
                g = self.layers[i].backward_into(&trace.encoder[k], &g, grads.slot(i))?;
            }
        }
        Ok(())
    }

    /// Backward pass accumulating into the network's own [`ParamSet`]s.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        grad_embedding: Option<&Tensor>,
        grad_reconstruction: Option<&Tensor>,
    ) -> Result<()> {
        let mut grads = self.zero_gradients();
        self.backward_into(trace, grad_embedding, grad_reconstruction, &mut grads)?;
        self.accumulate(&grads)
    }

    /// Layer names in build order together with their specs.
    pub fn layer_specs(&self) -> impl Iterator<Item = (&str, &LayerSpec)> {
        self.names.iter().map(String::as_str).zip(self.layers.iter().map(|l| &l.spec))
    }

    /// Every layer in build order with the input shape it sees.
    pub fn layers_with_inputs(&self) -> Result<Vec<(&str, &Layer, Vec<usize>)>> {
        let mut dims = vec![Vec::new(); self.layers.len()];
        let mut x = self.config.input_shape.to_vec();
        for &i in &self.encoder {
            dims[i] = x.clone();
            x = self.layers[i].spec.output_dims(&x)?;
        }
        let mut x = self.tap_dims()?;
        for &i in &self.decoder {
            dims[i] = x.clone();
            x = self.layers[i].spec.output_dims(&x)?;
        }
        let enc = &self.encoder_output_dims;
        for (part, band_h) in self.parts.iter().zip(band_heights(enc[1], self.config.parts)) {
            let mut x = vec![enc[0], band_h, enc[2]];
            for b in &part.blocks {
                dims[b.conv1] = x.clone();
                let a = self.layers[b.conv1].spec.output_dims(&x)?;
                dims[b.conv2] = a.clone();
                dims[b.pool] = a.clone();
                x = self.layers[b.pool].spec.output_dims(&a)?;
            }
            dims[part.fc_a] = vec![x.iter().product()];
            dims[part.fc_b] = vec![self.config.fc_small_dim];
        }
        dims[self.fc_large] = vec![self.config.parts * self.config.fc_small_dim];
        dims[self.normalize] = vec![self.embedding_dim()];
        Ok(self
            .names
            .iter()
            .zip(&self.layers)
            .zip(dims)
            .map(|((n, l), d)| (n.as_str(), l, d))
            .collect())
    }

    pub(crate) fn param_sets_named_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamSet)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.layers.iter_mut())
            .filter_map(|(n, l)| l.params.as_mut().map(|p| (n, p)))
    }

    /// Mutable parameters of the named layer, for finite-difference probes.
    pub fn params_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        let i = self.names.iter().position(|n| n == name)?;
        self.layers[i].params.as_mut()
    }
}
