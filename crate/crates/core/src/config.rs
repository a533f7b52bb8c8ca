//! Plain-text `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! `preset` (full or desk) selects the starting point and may appear
//! anywhere; every other key overrides one field of it.
//!
//! Layer lists use whitespace-separated tokens:
//!
//! ```text
//! encoder = conv:64:7x7:s3:p0 relu conv:64:5x5:s2:p0 relu tap maxpool:3x3:s1:p1
//! decoder = deconv:64:5x5:s2:p0 relu deconv:3:7x7:s3:p0
//! ```
//!
//! Input channels are inferred from the previous layer. `tap` marks where the
//! decoder reads the encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{FannError, Result};
use crate::layers::{LayerKind, LayerSpec};
use crate::losses::{SignMode, TripletLossKind};
use crate::net::{InitScheme, NetworkConfig};

/// Optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    /// Metrics are logged every this many iterations.
    pub log_interval: usize,
    /// Checkpoints are written every this many iterations; 0 keeps only the
    /// final one.
    pub checkpoint_interval: usize,
    pub loss_kind: TripletLossKind,
    pub cross_camera: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 20_000,
            learning_rate: 0.01,
            lr_decay: 0.1,
            lr_decay_interval: 10_000,
            log_interval: 100,
            checkpoint_interval: 0,
            loss_kind: TripletLossKind::Symmetric,
            cross_camera: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_interval == 0 || self.lr_decay_interval == 0 {
            return Err(FannError::Config(
                "batch_size, log_interval and lr_decay_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FannError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(FannError::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub trials: usize,
    pub probe_camera: u32,
    pub gallery_camera: u32,
    pub max_rank: usize,
    /// Keep every gallery-camera image instead of one per identity.
    pub multi_shot: bool,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            trials: 10,
            probe_camera: 0,
            gallery_camera: 1,
            max_rank: 20,
            multi_shot: false,
            seed: 0,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl FromStr for Preset {
    type Err = FannError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(FannError::Config(format!("unknown preset `{s}` (full, desk)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        })
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "starting point: full or desk"),
    ("input", "input shape CxHxW"),
    ("encoder", "encoder layer list, with `tap` marking the decoder input"),
    ("decoder", "decoder layer list"),
    ("parts", "number of horizontal body-part slices"),
    ("residual_blocks_per_part", "residual blocks in each part stack"),
    ("part_channels", "channels of the part convolutions"),
    ("fc_small_dim", "per-part fully connected width"),
    ("fc_large_dim", "width of the fused fully connected layer"),
    ("margin", "triplet hinge margin M"),
    ("zeta", "weight of the local regression loss"),
    ("eta", "weight of the parameter regularizer"),
    ("kernel_sigma", "Gaussian kernel sigma"),
    ("kernel_rho", "Gaussian kernel truncation radius"),
    ("kernel_normalized", "rescale the kernel to unit sum instead of the 1/(sqrt(2 pi) sigma) peak"),
    ("init_u", "initial weight of the anchor-negative distance"),
    ("init_v", "initial weight of the positive-negative distance"),
    ("gamma", "adaptive weight step size"),
    ("sign_mode", "adaptive weight update direction: textual or literal"),
    ("init", "weight init: he or gaussian:MIN_STD:MAX_STD"),
    ("seed", "network initialization seed"),
    ("batch_size", "triplets per mini-batch"),
    ("iterations", "maximum iterations H"),
    ("learning_rate", "initial learning rate"),
    ("lr_decay", "learning rate multiplier at each decay step"),
    ("lr_decay_interval", "iterations between decay steps"),
    ("log_interval", "iterations between metric rows"),
    ("checkpoint_interval", "iterations between checkpoints, 0 for final only"),
    ("loss", "triplet loss: symmetric or asymmetric"),
    ("cross_camera", "prefer cross-camera anchor/positive pairs"),
    ("train_seed", "sampler seed"),
    ("trials", "evaluation trials"),
    ("probe_camera", "camera providing probes"),
    ("gallery_camera", "camera providing the gallery"),
    ("max_rank", "longest CMC rank reported"),
    ("multi_shot", "keep all gallery images per identity"),
    ("eval_seed", "evaluation split seed"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FannError::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(FannError::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn parse_pair(key: &str, s: &str, prefix: char) -> Result<(usize, usize)> {
    let body = s
        .strip_prefix(prefix)
        .ok_or_else(|| FannError::Config(format!("{key}: expected `{prefix}N` in `{s}`")))?;
    let n = parse_num(key, body)?;
    Ok((n, n))
}

fn parse_kernel(key: &str, s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| FannError::Config(format!("{key}: expected KHxKW, got `{s}`")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

/// Parses a layer list, returning the specs and the position of `tap` (the
/// number of layers before it).
pub fn parse_layers(key: &str, text: &str, in_channels: usize) -> Result<(Vec<LayerSpec>, Option<usize>)> {
    let mut specs = Vec::new();
    let mut tap = None;
    let mut channels = in_channels;
    for token in text.split_whitespace() {
        let fields: Vec<&str> = token.split(':').collect();
        let spec = match fields[..] {
            ["tap"] => {
                if tap.replace(specs.len()).is_some() {
                    return Err(FannError::Config(format!("{key}: more than one `tap`")));
                }
                continue;
            }
            ["relu"] => LayerSpec::relu(),
            ["conv" | "deconv", out, kernel, stride, pad] => {
                let out: usize = parse_num(key, out)?;
                let (k, s, p) = (
                    parse_kernel(key, kernel)?,
                    parse_pair(key, stride, 's')?,
                    parse_pair(key, pad, 'p')?,
                );
                let spec = if fields[0] == "conv" {
                    LayerSpec::conv(channels, out, k, s, p)
                } else {
                    LayerSpec::deconv(channels, out, k, s, p)
                };
                channels = out;
                spec
            }
            ["maxpool", kernel, stride, pad] => LayerSpec::maxpool(
                parse_kernel(key, kernel)?,
                parse_pair(key, stride, 's')?,
                parse_pair(key, pad, 'p')?,
            ),
            _ => return Err(FannError::Config(format!("{key}: cannot parse layer `{token}`"))),
        };
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(FannError::Config(format!("{key}: empty layer list")));
    }
    Ok((specs, tap))
}

pub fn format_layers(specs: &[LayerSpec], tap: Option<usize>) -> String {
    let mut tokens = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        if tap == Some(i) {
            tokens.push("tap".to_string());
        }
        let geometry = |s: &LayerSpec| {
            format!(
                "{}x{}:s{}:p{}",
                s.kernel.0, s.kernel.1, s.stride.0, s.padding.0
            )
        };
        tokens.push(match s.kind {
            LayerKind::Relu => "relu".into(),
            LayerKind::Conv => format!("conv:{}:{}", s.out_channels, geometry(s)),
            LayerKind::Deconv => format!("deconv:{}:{}", s.out_channels, geometry(s)),
            LayerKind::MaxPool => format!("maxpool:{}", geometry(s)),
            LayerKind::FullyConnected => format!("fc:{}", s.out_dim),
            LayerKind::L2Normalize => "l2norm".into(),
        });
    }
    if tap == Some(specs.len()) {
        tokens.push("tap".into());
    }
    tokens.join(" ")
}

fn format_init(init: InitScheme) -> String {
    match init {
        InitScheme::He => "he".into(),
        InitScheme::Gaussian { min_std, max_std } => format!("gaussian:{min_std}:{max_std}"),
    }
}

fn parse_init(value: &str) -> Result<InitScheme> {
    match value.split(':').collect::<Vec<_>>()[..] {
        ["he"] => Ok(InitScheme::He),
        ["gaussian", a, b] => Ok(InitScheme::Gaussian {
            min_std: parse_num("init", a)?,
            max_std: parse_num("init", b)?,
        }),
        _ => Err(FannError::Config(format!("init: expected `he` or `gaussian:MIN:MAX`, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => RunConfig {
                preset,
                network: NetworkConfig::full(),
                train: TrainConfig::default(),
                protocol: ProtocolConfig::default(),
            },
            Preset::Desk => RunConfig {
                preset,
                network: NetworkConfig::desk(),
                train: TrainConfig {
                    batch_size: 8,
                    iterations: 2000,
                    log_interval: 100,
                    ..TrainConfig::default()
                },
                protocol: ProtocolConfig {
                    max_rank: 10,
                    ..ProtocolConfig::default()
                },
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FannError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if !KEYS.iter().any(|(name, _)| *name == key) {
                return Err(FannError::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if pairs.insert(key.clone(), (lineno + 1, v.trim().to_string())).is_some() {
                return Err(FannError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let preset = match pairs.remove("preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Full,
        };
        let mut cfg = RunConfig::preset(preset);
        // the input shape decides the channels layer lists start from
        for key in ["input", "encoder", "decoder"] {
            if let Some((line, v)) = pairs.remove(key) {
                cfg.set(key, &v)
                    .map_err(|e| FannError::Config(format!("line {line}: {e}")))?;
            }
        }
        for (key, (line, v)) in &pairs {
            cfg.set(key, v)
                .map_err(|e| FannError::Config(format!("line {line}: {e}")))?;
        }
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FannError::io(path, e))?;
        Self::parse(&text).map_err(|e| FannError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        let p = &mut self.protocol;
        match key {
            "preset" => self.preset = value.parse()?,
            "input" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|d| parse_num(key, d))
                    .collect::<Result<_>>()?;
                n.input_shape = dims
                    .try_into()
                    .map_err(|_| FannError::Config(format!("input: expected CxHxW, got `{value}`")))?;
                // keep layer lists consistent with the new channel count
                if let Some(first) = n.encoder.first_mut() {
                    first.in_channels = n.input_shape[0];
                }
            }
            "encoder" => {
                let (specs, tap) = parse_layers(key, value, n.input_shape[0])?;
                n.tap_index = tap.ok_or_else(|| FannError::Config("encoder: missing `tap`".into()))?;
                n.encoder = specs;
                let tap_channels = n.encoder[..n.tap_index]
                    .iter()
                    .rev()
                    .find(|s| s.kind == LayerKind::Conv)
                    .map_or(n.input_shape[0], |s| s.out_channels);
                if let Some(first) = n.decoder.first_mut() {
                    first.in_channels = tap_channels;
                }
            }
            "decoder" => {
                let tap_channels = n.encoder[..n.tap_index]
                    .iter()
                    .rev()
                    .find(|s| s.kind == LayerKind::Conv)
                    .map_or(n.input_shape[0], |s| s.out_channels);
                let (specs, tap) = parse_layers(key, value, tap_channels)?;
                if tap.is_some() {
                    return Err(FannError::Config("decoder: `tap` only belongs in the encoder".into()));
                }
                n.decoder = specs;
            }
            "parts" => n.parts = parse_num(key, value)?,
            "residual_blocks_per_part" => n.residual_blocks_per_part = parse_num(key, value)?,
            "part_channels" => n.part_channels = parse_num(key, value)?,
            "fc_small_dim" => n.fc_small_dim = parse_num(key, value)?,
            "fc_large_dim" => n.fc_large_dim = parse_num(key, value)?,
            "margin" => n.margin = parse_num(key, value)?,
            "zeta" => n.zeta = parse_num(key, value)?,
            "eta" => n.eta = parse_num(key, value)?,
            "kernel_sigma" => n.kernel_sigma = parse_num(key, value)?,
            "kernel_rho" => n.kernel_rho = parse_num(key, value)?,
            "kernel_normalized" => n.kernel_normalized = parse_bool(key, value)?,
            "init_u" => n.init_u = parse_num(key, value)?,
            "init_v" => n.init_v = parse_num(key, value)?,
            "gamma" => n.gamma = parse_num(key, value)?,
            "sign_mode" => n.sign_mode = value.parse::<SignMode>()?,
            "init" => n.init = parse_init(value)?,
            "seed" => n.seed = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "iterations" => t.iterations = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "lr_decay" => t.lr_decay = parse_num(key, value)?,
            "lr_decay_interval" => t.lr_decay_interval = parse_num(key, value)?,
            "log_interval" => t.log_interval = parse_num(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_num(key, value)?,
            "loss" => t.loss_kind = value.parse::<TripletLossKind>()?,
            "cross_camera" => t.cross_camera = parse_bool(key, value)?,
            "train_seed" => t.seed = parse_num(key, value)?,
            "trials" => p.trials = parse_num(key, value)?,
            "probe_camera" => p.probe_camera = parse_num(key, value)?,
            "gallery_camera" => p.gallery_camera = parse_num(key, value)?,
            "max_rank" => p.max_rank = parse_num(key, value)?,
            "multi_shot" => p.multi_shot = parse_bool(key, value)?,
            "eval_seed" => p.seed = parse_num(key, value)?,
            _ => return Err(FannError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let n = &self.network;
        let t = &self.train;
        let p = &self.protocol;
        let [c, h, w] = n.input_shape;
        put("preset", self.preset.to_string());
        put("input", format!("{c}x{h}x{w}"));
        put("encoder", format_layers(&n.encoder, Some(n.tap_index)));
        put("decoder", format_layers(&n.decoder, None));
        put("parts", n.parts.to_string());
        put("residual_blocks_per_part", n.residual_blocks_per_part.to_string());
        put("part_channels", n.part_channels.to_string());
        put("fc_small_dim", n.fc_small_dim.to_string());
        put("fc_large_dim", n.fc_large_dim.to_string());
        put("margin", n.margin.to_string());
        put("zeta", n.zeta.to_string());
        put("eta", n.eta.to_string());
        put("kernel_sigma", n.kernel_sigma.to_string());
        put("kernel_rho", n.kernel_rho.to_string());
        put("kernel_normalized", n.kernel_normalized.to_string());
        put("init_u", n.init_u.to_string());
        put("init_v", n.init_v.to_string());
        put("gamma", n.gamma.to_string());
        put("sign_mode", n.sign_mode.to_string());
        put("init", format_init(n.init));
        put("seed", n.seed.to_string());
        put("batch_size", t.batch_size.to_string());
        put("iterations", t.iterations.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("lr_decay", t.lr_decay.to_string());
        put("lr_decay_interval", t.lr_decay_interval.to_string());
        put("log_interval", t.log_interval.to_string());
        put("checkpoint_interval", t.checkpoint_interval.to_string());
        put("loss", t.loss_kind.to_string());
        put("cross_camera", t.cross_camera.to_string());
        put("train_seed", t.seed.to_string());
        put("trials", p.trials.to_string());
        put("probe_camera", p.probe_camera.to_string());
        put("gallery_camera", p.gallery_camera.to_string());
        put("max_rank", p.max_rank.to_string());
        put("multi_shot", p.multi_shot.to_string());
        put("eval_seed", p.seed.to_string());
        out
    }
}
