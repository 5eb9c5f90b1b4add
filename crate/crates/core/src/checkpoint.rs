//! Binary checkpoints.
//!
//! ```text
//! "FIARCKPT"  u32 version  u32 header_len  header (JSON)
//! f64 LE payload for every tensor listed in the header, in order
//! SHA-256 of everything above (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::ActionSpace;
use crate::envs::EnvVersion;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tape::Tensor;
use crate::trainer::{Agent, PolicyKind, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FIARCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
/// Upper bound on header size, so a corrupt length cannot trigger a huge read.
const MAX_HEADER: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub env: String,
    /// TOML of a custom ERA configuration, when the run did not use a built-in one.
    pub env_config: Option<String>,
    pub kind: PolicyKind,
    pub obs_dim: usize,
    pub dims: usize,
    pub categories: usize,
    pub train: TrainConfig,
    pub env_steps: u64,
    pub cycles: usize,
    pub best_return: f64,
    pub sections: Vec<Section>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Tensor values, aligned with `header.sections`.
    pub data: Vec<Vec<Tensor>>,
}

/// Where a run was when the checkpoint was taken.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub env_steps: u64,
    pub cycles: usize,
    pub best_return: f64,
}

fn section(name: &str, names: &[String], tensors: &[Tensor]) -> (Section, Vec<Tensor>) {
    let infos = names
        .iter()
        .zip(tensors)
        .map(|(n, t)| TensorInfo { name: n.clone(), rows: t.rows(), cols: t.cols() })
        .collect();
    (Section { name: name.into(), tensors: infos }, tensors.to_vec())
}

const SECTIONS: [&str; 5] = ["policy", "critic", "actor_opt", "critic_opt", "elbo_opt"];

impl Checkpoint {
    pub fn capture(
        agent: &Agent,
        env: EnvVersion,
        env_config: Option<String>,
        train: &TrainConfig,
        progress: Progress,
    ) -> Self {
        let policy = agent.policy();
        let space = policy.action_space();
        let pnames = policy.params().names();
        let cnames = agent.critic.params().names();
        let parts = [
            section("policy", pnames, policy.params().tensors()),
            section("critic", cnames, agent.critic.params().tensors()),
            section("actor_opt", pnames, agent.actor_opt.state()),
            section("critic_opt", cnames, agent.critic_opt.state()),
            section("elbo_opt", pnames, agent.elbo_opt.state()),
        ];
        let (sections, data) = parts.into_iter().unzip();
        Self {
            header: CheckpointHeader {
                env: env.name().into(),
                env_config,
                kind: agent.kind,
                obs_dim: policy.obs_dim(),
                dims: space.dims,
                categories: space.categories,
                train: train.clone(),
                env_steps: progress.env_steps,
                cycles: progress.cycles,
                best_return: progress.best_return,
                sections,
            },
            data,
        }
    }

    pub fn env_version(&self) -> Result<EnvVersion> {
        self.header.env.parse()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serialises");
        let floats: usize = self.data.iter().flatten().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.data.iter().flatten() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if header_len > MAX_HEADER || 16 + header_len > body.len() {
            return Err(bad("header length out of range"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + header_len])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &body[16 + header_len..];
        let mut expected = 0usize;
        for t in header.sections.iter().flat_map(|s| &s.tensors) {
            expected = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .and_then(|n| expected.checked_add(n))
                .ok_or_else(|| bad("tensor sizes overflow"))?;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!("payload has {} bytes, header describes {expected}", payload.len())));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let data = header
            .sections
            .iter()
            .map(|s| {
                s.tensors
                    .iter()
                    .map(|t| Tensor::from_vec(t.rows, t.cols, chunks.by_ref().take(t.rows * t.cols).collect()))
                    .collect()
            })
            .collect();
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    fn tensors(&self, name: &str, store: &ParamStore) -> Result<Vec<Tensor>> {
        let i = self
            .header
            .sections
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))?;
        let names: Vec<&str> = self.header.sections[i].tensors.iter().map(|t| t.name.as_str()).collect();
        if names != store.names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Checkpoint(format!("section `{name}` does not match the model's parameters")));
        }
        Ok(self.data[i].clone())
    }

    /// Rebuild the agent, parameters and optimiser state included.
    pub fn restore(&self) -> Result<Agent> {
        let h = &self.header;
        for s in SECTIONS {
            if !h.sections.iter().any(|x| x.name == s) {
                return Err(Error::Checkpoint(format!("missing section `{s}`")));
            }
        }
        if h.dims == 0 || h.categories == 0 || h.obs_dim == 0 {
            return Err(Error::Checkpoint("empty action or observation space".into()));
        }
        let mut agent = Agent::new(h.kind, &h.train, h.obs_dim, ActionSpace::new(h.dims, h.categories))?;
        let ck = |e: String| Error::Checkpoint(e);
        let policy = self.tensors("policy", agent.policy().params())?;
        let actor_opt = self.tensors("actor_opt", agent.policy().params())?;
        let elbo_opt = self.tensors("elbo_opt", agent.policy().params())?;
        let critic = self.tensors("critic", agent.critic.params())?;
        let critic_opt = self.tensors("critic_opt", agent.critic.params())?;
        agent.model.policy_mut().params_mut().replace_all(policy).map_err(ck)?;
        agent.critic.params_mut().replace_all(critic).map_err(ck)?;
        agent.actor_opt.load_state(actor_opt).map_err(ck)?;
        agent.elbo_opt.load_state(elbo_opt).map_err(ck)?;
        agent.critic_opt.load_state(critic_opt).map_err(ck)?;
        Ok(agent)
    }
}
