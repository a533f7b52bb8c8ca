use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::netpbm::{read_image_ppm, read_mask_pgm};
use crate::error::{FannError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub identity: u32,
    pub camera: u32,
}

/// One decoded image with its binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub identity: u32,
    pub camera: u32,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor, identity: u32, camera: u32) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        let (mc, mh, mw) = mask.chw()?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(FannError::Dataset(format!(
                "image {} and mask {} do not pair up",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FannError::Dataset("mask is not binary".into()));
        }
        Ok(Self {
            image,
            mask,
            identity,
            camera,
        })
    }
}

/// Tab-separated `image, mask, identity, camera` lines with paths relative to
/// `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (lineno, line) in text.split('\n').enumerate() {
            let start = offset;
            offset += line.len() as u64 + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |reason: String| FannError::format(origin, start, format!("line {}: {reason}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let number = |s: &str, what: &str| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| bad(format!("{what} `{s}` is not a non-negative integer")))
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                identity: number(fields[2], "identity")?,
                camera: number(fields[3], "camera")?,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FannError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image.display(),
                e.mask.display(),
                e.identity,
                e.camera
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| FannError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Image count per identity, in ascending identity order.
    pub fn identity_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.identity).or_insert(0) += 1;
        }
        counts
    }

    /// Fails unless every identity has at least two images.
    pub fn check_trainable(&self) -> Result<()> {
        let counts = self.identity_counts();
        if counts.len() < 2 {
            return Err(FannError::Dataset(format!(
                "need at least 2 identities to form triplets, found {}",
                counts.len()
            )));
        }
        if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(FannError::Dataset(format!("identity {id} has only {n} image(s)")));
        }
        Ok(())
    }

    /// Keeps only the entries whose identity passes `keep`.
    pub fn filter_identities(&self, keep: impl Fn(u32) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e.identity)).cloned().collect(),
        }
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let image = read_image_ppm(self.root.join(&entry.image))?;
        let mask = read_mask_pgm(self.root.join(&entry.mask))?;
        Sample::new(image, mask, entry.identity, entry.camera)
            .map_err(|e| FannError::Dataset(format!("{}: {e}", entry.image.display())))
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_sample(e)).collect()
    }
}
