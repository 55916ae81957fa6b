//! Versioned JSON checkpoints. Tensors are stored as base64 little-endian
//! bytes, so a save/load round trip is bit-exact.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "greedyprune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything stored next to the network itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training phase boundary this checkpoint was taken at.
    pub phase: Option<String>,
    /// Number of schedule epochs completed.
    pub epoch: Option<usize>,
    /// Path of the pruning log that produced this network, if any.
    pub prune_log: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct Container<T: Scalar> {
    format: String,
    version: u32,
    dtype: String,
    arch: String,
    meta: CheckpointMeta,
    network: Network<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, net: &Network<T>, meta: &CheckpointMeta) -> Result<()> {
    let container = Container {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::NAME.into(),
        arch: net.arch.clone(),
        meta: meta.clone(),
        network: net.clone(),
    };
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(out, &container)?;
    Ok(())
}

/// Reads only the element type recorded in a checkpoint.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<String> {
    let header: Header = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    Ok(header.dtype)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unrecognised format `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if header.dtype != T::NAME {
        return Err(Error::Checkpoint(format!("stored as {}, requested {}", header.dtype, T::NAME)));
    }
    let container: Container<T> = serde_json::from_str(&text)?;
    container.network.infer_shapes()?;
    Ok((container.network, container.meta))
}
