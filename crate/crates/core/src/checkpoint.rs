//! Checkpoint = `manifest.json` (names, shapes, offsets, config echo, step)
//! plus `params.bin`, a flat little-endian `f64` payload. Both files are
//! written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::DualNetworkState;
use crate::numeric::{DiffArray, ParamSet};

pub const FORMAT: &str = "rrl-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub network: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: usize,
    pub ema_m: f64,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: BTreeMap<String, String>,
    pub state: DualNetworkState<f64>,
}

impl Checkpoint {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }

    pub fn payload_path(dir: &Path) -> PathBuf {
        dir.join(PAYLOAD)
    }

    /// Serialized `(manifest, payload)` bytes.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (network, set) in [("online", &self.state.theta), ("target", &self.state.xi)] {
            for (name, a) in set.iter() {
                tensors.push(TensorEntry {
                    network: network.to_string(),
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                    offset: payload.len(),
                });
                for v in a.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            step: self.step,
            ema_m: self.state.m,
            config: self.config.clone(),
            tensors,
        };
        let mut text = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::contract(format!("manifest serialization: {e}")))?;
        text.push(b'\n');
        Ok((text, payload))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        let (manifest, payload) = self.to_bytes()?;
        io::write_atomic(&Self::payload_path(dir), &payload)?;
        io::write_atomic(&Self::manifest_path(dir), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = Self::manifest_path(dir);
        let origin = mpath.display().to_string();
        let manifest: Manifest = serde_json::from_str(&io::read_to_string(&mpath)?)
            .map_err(|e| Error::parse(&origin, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::parse(&origin, format!("unknown format {:?}", manifest.format)));
        }
        let payload = io::read_bytes(&Self::payload_path(dir))?;
        let mut theta = ParamSet::new();
        let mut xi = ParamSet::new();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let bytes = payload
                .get(t.offset..t.offset + 8 * n)
                .ok_or_else(|| Error::parse(&origin, format!("{} exceeds the payload", t.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let a = DiffArray::new(t.shape.clone(), data)?;
            match t.network.as_str() {
                "online" => theta.insert(t.name.clone(), a),
                "target" => xi.insert(t.name.clone(), a),
                other => return Err(Error::parse(&origin, format!("unknown network {other:?}"))),
            }
        }
        let mut state = DualNetworkState::new(theta, manifest.ema_m);
        if !state.theta.same_layout(&xi) {
            return Err(Error::parse(&origin, "online and target tensors differ"));
        }
        for (_, a) in xi.iter_mut() {
            a.set_requires_grad(false);
        }
        state.xi = xi;
        Ok(Self {
            step: manifest.step,
            config: manifest.config,
            state,
        })
    }
}
