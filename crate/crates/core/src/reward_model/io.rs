//! Model file: `GGRID1\n`, little-endian u64 header length, JSON header,
//! then the parameters as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, RewardModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"GGRID1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    dropout: f64,
    n_params: usize,
    running: Vec<f32>,
    meta: serde_json::Value,
}

impl RewardModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            seed: self.seed,
            dropout: self.dropout,
            n_params: self.params.len(),
            running: self.running.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a reward model file (bad magic)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let len = rest.get(..8).ok_or_else(|| Error::Integrity("truncated header length".into()))?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let json = rest.get(8..8usize.saturating_add(len)).ok_or_else(|| Error::Integrity("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("model header: {e}")))?;
        header.spec.validate()?;
        let layout = super::Layout::new(&header.spec);
        let body = &rest[8 + len..];
        if header.n_params != layout.n_params || body.len() != 4 * layout.n_params || header.running.len() != layout.n_running {
            return Err(Error::Integrity(format!(
                "model body holds {} bytes, header expects {} params and {} running stats",
                body.len(),
                layout.n_params,
                layout.n_running
            )));
        }
        let params: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if params.iter().chain(&header.running).any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite model parameter".into()));
        }
        Ok(Self { spec: header.spec, params, running: header.running, seed: header.seed, dropout: header.dropout, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
