//! Parameter checkpoints.
//!
//! A checkpoint directory holds `config.txt` (the full run configuration),
//! `layers.txt` (one `name<TAB>file` line per parameterized layer, in build
//! order) and one FANT file per layer. Each FANT file is a flat vector of the
//! layer's weights followed by its biases; shapes come from the config.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataio::{read_fant, write_fant};
use crate::error::{FannError, Result};
use crate::net::Network;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const LAYERS_FILE: &str = "layers.txt";

fn file_name(index: usize, name: &str) -> String {
    format!("{index:02}_{name}.fant")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, net: &Network, run: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| FannError::io(dir, e))?;
    let mut run = run.clone();
    run.network = net.config().clone();
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, run.to_text()).map_err(|e| FannError::io(&config_path, e))?;

    let mut listing = String::new();
    for (i, (name, p)) in net.named_params().enumerate() {
        let file = file_name(i, name);
        let mut flat = Vec::with_capacity(p.num_params());
        flat.extend_from_slice(p.weights.data());
        flat.extend_from_slice(p.biases.data());
        write_fant(dir.join(&file), &Tensor::vector(flat)?)?;
        listing.push_str(&format!("{name}\t{file}\n"));
    }
    let layers_path = dir.join(LAYERS_FILE);
    fs::write(&layers_path, listing).map_err(|e| FannError::io(&layers_path, e))
}

/// Rebuilds the network described by `config.txt` and loads its parameters.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(RunConfig, Network)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(FannError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
        ));
    }
    let run = RunConfig::read(dir.join(CONFIG_FILE))?;
    let mut net = Network::build(&run.network)?;
    let layers_path = dir.join(LAYERS_FILE);
    let listing = fs::read_to_string(&layers_path).map_err(|e| FannError::io(&layers_path, e))?;
    let entries: Vec<(String, PathBuf)> = listing
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(n, f)| (n.to_string(), dir.join(f)))
                .ok_or_else(|| FannError::format(&layers_path, 0, format!("malformed line `{l}`")))
        })
        .collect::<Result<_>>()?;

    let expected: Vec<String> = net.named_params().map(|(n, _)| n.to_string()).collect();
    let listed: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if listed != expected {
        return Err(FannError::Config(format!(
            "{}: layer list does not match the configured network ({} listed, {} expected)",
            layers_path.display(),
            listed.len(),
            expected.len()
        )));
    }
    for ((_, path), (_, p)) in entries.iter().zip(net.param_sets_named_mut()) {
        let t = read_fant(path)?;
        let (nw, nb) = (p.weights.len(), p.biases.len());
        if t.dims() != [nw + nb] {
            return Err(FannError::format(
                path,
                10,
                format!("expected a vector of {} values, found shape {}", nw + nb, t.shape()),
            ));
        }
        p.weights.data_mut().copy_from_slice(&t.data()[..nw]);
        p.biases.data_mut().copy_from_slice(&t.data()[nw..]);
    }
    Ok((run, net))
}
