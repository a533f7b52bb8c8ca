//! Procedural stand-in for a person re-identification dataset.
//!
//! Each identity is a two-tone striped rectangle whose hues are fixed per
//! identity. Cameras differ in background palette and illumination gain, and
//! distractor shapes borrow identity hues so that colour statistics of the
//! whole frame are not enough to tell people apart.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, ManifestEntry, MANIFEST_FILE};
use super::netpbm::{write_image_ppm, write_mask_pgm};
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clutter {
    None,
    #[default]
    Light,
    Heavy,
}

impl std::str::FromStr for Clutter {
    type Err = FannError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "light" => Ok(Self::Light),
            "heavy" => Ok(Self::Heavy),
            _ => Err(FannError::InvalidArgument(format!(
                "unknown clutter level `{s}` (none, light, heavy)"
            ))),
        }
    }
}

impl Clutter {
    fn distractors(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Self::None => 0..=0,
            Self::Light => 1..=2,
            Self::Heavy => 5..=8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_camera: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub clutter: Clutter,
    /// Bounds on the person rectangle's share of the frame.
    pub min_area: f64,
    pub max_area: f64,
    /// How far the rectangle may wander from the frame centre, as a share of
    /// the free space on each side. 0 centres it; 1 allows any position.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn new(identities: usize, images_per_camera: usize, cameras: usize, height: usize, width: usize) -> Self {
        Self {
            identities,
            images_per_camera,
            cameras,
            height,
            width,
            seed: 0,
            clutter: Clutter::default(),
            min_area: 0.1,
            max_area: 0.6,
            jitter: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(FannError::InvalidArgument(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.cameras < 2 {
            return Err(FannError::InvalidArgument(format!("need at least 2 cameras, got {}", self.cameras)));
        }
        if self.images_per_camera == 0 || self.height < 2 || self.width < 2 {
            return Err(FannError::InvalidArgument(format!(
                "degenerate dataset: {} images per camera at {}x{}",
                self.images_per_camera, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(FannError::InvalidArgument(format!("jitter {} must lie in [0, 1]", self.jitter)));
        }
        if !(self.min_area > 0.0 && self.min_area <= self.max_area) {
            return Err(FannError::InvalidArgument(format!(
                "bad area bounds [{}, {}]",
                self.min_area, self.max_area
            )));
        }
        let pixels = (self.height * self.width) as f64;
        if self.min_area > 1.0 || (self.max_area * pixels).floor() < (self.min_area * pixels).ceil() {
            return Err(FannError::InvalidArgument(format!(
                "a rectangle covering [{}, {}] of the frame does not fit in {}x{}",
                self.min_area, self.max_area, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Person rectangle as placed by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// One rectangle per manifest entry, in the same order.
    pub rects: Vec<Rect>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Appearance {
    upper: [f64; 3],
    lower: [f64; 3],
    /// Height fraction at which the colours switch.
    split: f64,
    stripe_period: usize,
}

fn appearance(identity: usize, n: usize) -> Appearance {
    const GOLDEN: f64 = 0.618_033_988_749_895;
    let hue = (identity as f64 + 0.5) / n as f64;
    let lower_hue = hue + 0.5 + GOLDEN * identity as f64;
    Appearance {
        upper: hsv(hue, 0.85, 0.9),
        lower: hsv(lower_hue, 0.6 + 0.3 * ((identity % 3) as f64 / 2.0), 0.35 + 0.5 * ((identity % 2) as f64)),
        split: 0.35 + 0.1 * (identity % 4) as f64,
        stripe_period: 2 + identity % 3,
    }
}

fn sample_rect(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Rect> {
    let (h, w) = (cfg.height, cfg.width);
    let pixels = (h * w) as f64;
    for _ in 0..10_000 {
        let frac = rng.random_range(cfg.min_area..=cfg.max_area);
        // people are tall: prefer a large height share
        let hs = rng.random_range(frac.sqrt().max(0.45)..=1.0);
        let rh = ((hs * h as f64).round() as usize).clamp(1, h);
        let rw = ((frac * pixels / rh as f64).round() as usize).max(1);
        if rw > w {
            continue;
        }
        let area = (rh * rw) as f64 / pixels;
        if area < cfg.min_area || area > cfg.max_area {
            continue;
        }
        let mut place = |free: usize| {
            let centre = free as f64 / 2.0;
            let offset = rng.random_range(-1.0..=1.0) * cfg.jitter * centre;
            ((centre + offset).round() as usize).min(free)
        };
        return Ok(Rect {
            top: place(h - rh),
            left: place(w - rw),
            height: rh,
            width: rw,
        });
    }
    Err(FannError::InvalidArgument(format!(
        "could not place a rectangle covering [{}, {}] of a {h}x{w} frame",
        cfg.min_area, cfg.max_area
    )))
}

fn render(
    cfg: &SynthConfig,
    identity: usize,
    camera: usize,
    rect: Rect,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];
    let noise = Normal::new(0.0, 0.04).expect("valid std");

    // camera palette: a base colour with textured noise
    let cam_hue = camera as f64 / cfg.cameras as f64 + 0.13;
    let base = hsv(cam_hue, 0.35, 0.45);
    for i in 0..plane {
        let jitter = noise.sample(rng) * 2.0;
        for c in 0..3 {
            img[c * plane + i] = base[c] + jitter + noise.sample(rng);
        }
    }

    let paint = |img: &mut [f64], top: usize, left: usize, rh: usize, rw: usize, colour: [f64; 3]| {
        for y in top..top + rh {
            for x in left..left + rw {
                for c in 0..3 {
                    img[c * plane + y * w + x] = colour[c];
                }
            }
        }
    };

    let n_distractors = rng.random_range(cfg.clutter.distractors());
    for _ in 0..n_distractors {
        let rh = rng.random_range(1..=(h / 3).max(1));
        let rw = rng.random_range(1..=(w / 2).max(1));
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let colour = if cfg.clutter == Clutter::Heavy && rng.random_bool(0.7) {
            let other = appearance(rng.random_range(0..cfg.identities), cfg.identities);
            if rng.random_bool(0.5) {
                other.upper
            } else {
                other.lower
            }
        } else {
            hsv(rng.random::<f64>(), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9))
        };
        paint(&mut img, top, left, rh, rw, colour);
    }

    let look = appearance(identity, cfg.identities);
    let gain = 0.8 + 0.35 * (camera as f64 / (cfg.cameras - 1) as f64) + rng.random_range(-0.05..0.05);
    let split_row = rect.top + ((look.split * rect.height as f64).round() as usize).min(rect.height);
    for y in rect.top..rect.top + rect.height {
        let tone = if y < split_row { look.upper } else { look.lower };
        let stripe = if (y - rect.top).is_multiple_of(look.stripe_period) { 0.8 } else { 1.0 };
        for x in rect.left..rect.left + rect.width {
            let grain = noise.sample(rng) * 0.5;
            for c in 0..3 {
                img[c * plane + y * w + x] = tone[c] * stripe * gain + grain;
            }
        }
    }

    for v in &mut img {
        // quantize now so the in-memory and on-disk images agree
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    let mask = Tensor::from_fn(&[1, h, w], |i| f64::from(u8::from(rect.contains(i / w, i % w))))?;
    Ok((Tensor::from_vec(&[3, h, w], img)?, mask))
}

/// Writes `images/`, `masks/` and a manifest into `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| FannError::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let mut rects = Vec::new();
    for identity in 0..cfg.identities {
        for camera in 0..cfg.cameras {
            for k in 0..cfg.images_per_camera {
                let rect = sample_rect(cfg, &mut rng)?;
                let (image, mask) = render(cfg, identity, camera, rect, &mut rng)?;
                let stem = format!("{identity:04}_c{camera}_{k:02}");
                let entry = ManifestEntry {
                    image: Path::new("images").join(format!("{stem}.ppm")),
                    mask: Path::new("masks").join(format!("{stem}.pgm")),
                    identity: identity as u32,
                    camera: camera as u32,
                };
                write_image_ppm(out.join(&entry.image), &image)?;
                write_mask_pgm(out.join(&entry.mask), &mask)?;
                entries.push(entry);
                rects.push(rect);
            }
        }
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(SynthDataset { manifest, rects })
}
