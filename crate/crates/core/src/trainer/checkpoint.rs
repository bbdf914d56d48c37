use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdamState;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PIEF";
pub const FORMAT_VERSION: u8 = 1;

/// Everything needed to continue training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Optimisation steps applied so far.
    pub step: u64,
    /// Seed of the batch-order stream; with `step` this fixes every future batch.
    pub data_seed: u64,
    /// Digest of the training recipe that produced this checkpoint.
    pub recipe_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    config_hash: String,
    step: u64,
    data_seed: u64,
    recipe_hash: String,
    tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn network_hash(cfg: &NetworkConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serialises"))
}

const GROUPS: [&str; 4] = ["param", "buffer", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&BTreeMap<String, Tensor>; 4] {
        [&self.params.params, &self.params.buffers, &self.adam.m, &self.adam.v]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, map) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in map {
                tensors.push(TensorEntry { name: format!("{group}/{name}"), shape: t.shape().to_vec(), offset: payload.len() });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            network: self.network,
            config_hash: network_hash(&self.network),
            step: self.step,
            data_seed: self.data_seed,
            recipe_hash: self.recipe_hash.clone(),
            tensors,
        };
        let text = serde_json::to_vec_pretty(&header)?;
        let len = u32::try_from(text.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(9 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < len {
            return Err(Error::Format("checkpoint header is truncated".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if network_hash(&header.network) != header.config_hash {
            return Err(Error::Load("checkpoint config hash does not match its network config".into()));
        }
        let payload = &body[len..];
        let mut maps: [BTreeMap<String, Tensor>; 4] = Default::default();
        let mut expected_end = 0;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 8 * n;
            if end > payload.len() {
                return Err(Error::Format(format!("checkpoint payload truncated in {}", entry.name)));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (group, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad tensor name {}", entry.name)))?;
            let idx = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| Error::Format(format!("unknown tensor group {group}")))?;
            maps[idx].insert(name.to_string(), Tensor::new(entry.shape, data)?);
            expected_end = expected_end.max(end);
        }
        if expected_end != payload.len() {
            return Err(Error::Format("checkpoint payload has trailing bytes".into()));
        }
        let [params, buffers, m, v] = maps;
        let ckpt = Self {
            network: header.network,
            params: NetworkParams { params, buffers },
            adam: AdamState { m, v },
            step: header.step,
            data_seed: header.data_seed,
            recipe_hash: header.recipe_hash,
        };
        ckpt.check_against_config()?;
        Ok(ckpt)
    }

    /// Parameter names and shapes agree with what the network config implies.
    fn check_against_config(&self) -> Result<()> {
        let expected = crate::network::param_shapes(&self.network)?;
        if expected.len() != self.params.params.len() {
            return Err(Error::Load("checkpoint parameters do not match its network config".into()));
        }
        for (name, shape) in expected {
            match self.params.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::Load(format!("checkpoint parameter {name} missing or misshapen"))),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
