//! Image, mask and tensor file formats, dataset manifests and the synthetic
//! dataset generator.

mod fant;
mod manifest;
mod netpbm;
mod resize;
mod synth;

pub use fant::{decode_fant, encode_fant, read_fant, write_fant, FANT_DTYPE_F64, FANT_MAGIC, FANT_VERSION};
pub use manifest::{DatasetManifest, ManifestEntry, Sample, MANIFEST_FILE};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image_ppm, read_mask_pgm, threshold, write_image_ppm,
    write_mask_pgm,
};
pub use resize::{resize_bilinear, resize_mask};
pub use synth::{generate_synthetic_dataset, Clutter, Rect, SynthConfig, SynthDataset};
