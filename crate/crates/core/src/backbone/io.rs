//! A saved backbone is a directory holding `manifest.json` (config plus the
//! name and shape of every parameter) and `params.ckb` (the kernel blobs
//! concatenated in manifest order).

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneState};
use crate::error::{Error, Result};
use crate::sparseconv::ConvKernel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.ckb";
const FORMAT: &str = "mdrnet-backbone/1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: BackboneConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    spatial: Vec<usize>,
    in_channels: usize,
    out_channels: usize,
}

impl ParamEntry {
    fn of(name: &str, k: &ConvKernel) -> Self {
        ParamEntry {
            name: name.to_string(),
            spatial: k.spatial().to_vec(),
            in_channels: k.in_channels(),
            out_channels: k.out_channels(),
        }
    }
}

pub fn save(dir: impl AsRef<Path>, state: &BackboneState) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: state.config().clone(),
        params: state.named_params().iter().map(|(n, k)| ParamEntry::of(n, k)).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    std::fs::write(&ppath, state.to_blob()).map_err(|e| Error::io(&ppath, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<BackboneState> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unsupported backbone format `{}`", manifest.format)));
    }
    let mut state = BackboneState::zeros(&manifest.config)?;
    let ppath = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut cursor = Cursor::new(blob.as_slice());
    let mut slots = state.named_params_mut();
    if slots.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&manifest.params) {
        let k = ConvKernel::read_blob(&mut cursor)?;
        if ParamEntry::of(name, slot) != *entry || ParamEntry::of(name, &k) != *entry {
            return Err(Error::Format(format!("parameter `{}` does not match its manifest entry", entry.name)));
        }
        **slot = k;
    }
    if cursor.position() as usize != blob.len() {
        return Err(Error::Format("trailing bytes after the last parameter".into()));
    }
    Ok(state)
}
