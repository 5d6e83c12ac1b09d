//! On-disk checkpoints: one SLT1 dump per parameter plus `manifest.json`.
//!
//! SLT1 stores f32, so a reloaded model carries f32-rounded weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{write_atomic, Tensor};

use super::{ClientModel, Conv2d, Dense, Parameters, ServerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub round: u32,
    pub client: Vec<ParamEntry>,
    pub server: Vec<ParamEntry>,
}

const MANIFEST: &str = "manifest.json";

pub fn save_checkpoint(dir: &Path, client: &ClientModel, server: &ServerModel, seed: u64, round: u32) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let write_all = |named: Vec<(String, &Tensor)>| -> Result<Vec<ParamEntry>> {
        named
            .into_iter()
            .map(|(name, t)| {
                let file = format!("{name}.slt1");
                t.write_slt1(dir.join(&file))?;
                Ok(ParamEntry { name, shape: t.shape().to_vec(), file })
            })
            .collect()
    };
    let manifest = CheckpointManifest {
        seed,
        round,
        client: write_all(client.named_params())?,
        server: write_all(server.named_params())?,
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ClientModel, ServerModel, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
    let read = |entries: &[ParamEntry]| -> Result<Vec<Tensor>> {
        entries
            .iter()
            .map(|e| {
                if e.file.contains(['/', '\\']) {
                    return Err(Error::Config(format!("checkpoint file name {:?} escapes the directory", e.file)));
                }
                let t = Tensor::read_slt1(dir.join(&e.file))?;
                if t.shape() != e.shape.as_slice() {
                    return Err(Error::Shape(format!("{}: manifest {:?}, file {:?}", e.name, e.shape, t.shape())));
                }
                Ok(t)
            })
            .collect()
    };
    let client_t = read(&manifest.client)?;
    if client_t.is_empty() || client_t.len() % 2 != 0 {
        return Err(Error::Config("client checkpoint needs weight/bias pairs".into()));
    }
    let mut it = client_t.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(Conv2d { weight, bias });
    }
    let client = ClientModel::from_layers(layers)?;

    let mut server_t = read(&manifest.server)?.into_iter();
    let (Some(hw), Some(hb), Some(ow), Some(ob), None) =
        (server_t.next(), server_t.next(), server_t.next(), server_t.next(), server_t.next())
    else {
        return Err(Error::Config("server checkpoint needs exactly four tensors".into()));
    };
    let server = ServerModel::from_layers(Dense { weight: hw, bias: hb }, Dense { weight: ow, bias: ob })?;
    Ok((client, server, manifest))
}
