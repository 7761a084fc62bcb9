//! JSON checkpoints: a manifest with a content hash plus base64 f32 arrays.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::Discriminator;
use crate::embed::{init_params, EmbedConfig, EmbeddingModel};
use crate::motion::ObsNorm;
use crate::nn::{Mlp, ParamSet, Params, PcaBasis};
use crate::rl::{AdaptiveTaskWeight, LatentSource, Policy, TrainConfig, TrainedPolicy, ValueFn};
use crate::tasks::TaskKind;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("content hash mismatch: manifest {expected}, computed {actual}")]
    Hash { expected: String, actual: String },
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: &'static str, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter layout does not match the declared architecture: {0}")]
    Shape(String),
    #[error("latent dimension mismatch: {0}")]
    Incompatible(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Embedding,
    Policy,
    Discriminator,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Embedding => "embedding",
            CheckpointKind::Policy => "policy",
            CheckpointKind::Discriminator => "discriminator",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub d_z: usize,
    pub config: serde_json::Value,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Little-endian f32, base64.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayRecord>,
}

fn fmt_err(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Format(e.to_string())
}

fn content_hash(kind: CheckpointKind, d_z: usize, config: &serde_json::Value, extra: &serde_json::Value, arrays: &[ArrayRecord]) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update((d_z as u64).to_le_bytes());
    h.update(config.to_string().as_bytes());
    h.update(extra.to_string().as_bytes());
    for a in arrays {
        h.update(a.name.as_bytes());
        h.update((a.shape[0] as u64).to_le_bytes());
        h.update((a.shape[1] as u64).to_le_bytes());
        h.update(a.data.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        d_z: usize,
        config: serde_json::Value,
        extra: serde_json::Value,
        params: &ParamSet,
    ) -> Self {
        let arrays: Vec<ArrayRecord> = params
            .iter()
            .map(|(name, a)| {
                let mut bytes = Vec::with_capacity(a.len() * 4);
                for v in a.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ArrayRecord {
                    name: name.to_string(),
                    shape: [a.nrows(), a.ncols()],
                    data: B64.encode(bytes),
                }
            })
            .collect();
        let sha256 = content_hash(kind, d_z, &config, &extra, &arrays);
        Self {
            manifest: Manifest {
                version: CHECKPOINT_VERSION,
                kind,
                d_z,
                config,
                sha256,
            },
            extra,
            arrays,
        }
    }

    pub fn verify(&self) -> Result<(), CheckpointError> {
        if self.manifest.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.manifest.version));
        }
        let actual = content_hash(
            self.manifest.kind,
            self.manifest.d_z,
            &self.manifest.config,
            &self.extra,
            &self.arrays,
        );
        if actual != self.manifest.sha256 {
            return Err(CheckpointError::Hash {
                expected: self.manifest.sha256.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<(), CheckpointError> {
        if self.manifest.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.name(),
                found: self.manifest.kind.name().to_string(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ParamSet, CheckpointError> {
        let mut p = Params::new();
        for a in &self.arrays {
            let bytes = B64.decode(&a.data).map_err(fmt_err)?;
            let n = a.shape[0] * a.shape[1];
            if bytes.len() != 4 * n {
                return Err(CheckpointError::Shape(format!(
                    "{}: {} bytes for shape {:?}",
                    a.name,
                    bytes.len(),
                    a.shape
                )));
            }
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = Array2::from_shape_vec((a.shape[0], a.shape[1]), vals).map_err(fmt_err)?;
            p.insert(a.name.clone(), arr).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(fmt_err)?;
        c.verify()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn check_layout(got: &ParamSet, reference: &ParamSet) -> Result<(), CheckpointError> {
    if !got.same_layout(reference) {
        let want: Vec<String> = reference
            .iter()
            .map(|(n, a)| format!("{n}{:?}", a.shape()))
            .collect();
        return Err(CheckpointError::Shape(format!("expected {}", want.join(", "))));
    }
    Ok(())
}

fn from_value<T: serde::de::DeserializeOwned>(v: &serde_json::Value, field: &str) -> Result<T, CheckpointError> {
    serde_json::from_value(v.get(field).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| CheckpointError::Format(format!("{field}: {e}")))
}

// ---------------------------------------------------------------------------
// Embedding

pub fn embedding_checkpoint(m: &EmbeddingModel) -> Checkpoint {
    Checkpoint::new(
        CheckpointKind::Embedding,
        m.d_z(),
        serde_json::to_value(&m.config).expect("config"),
        serde_json::json!({ "feat_mean": m.feat_mean, "feat_std": m.feat_std }),
        &m.params,
    )
}

pub fn embedding_from_checkpoint(c: &Checkpoint) -> Result<EmbeddingModel, CheckpointError> {
    c.expect_kind(CheckpointKind::Embedding)?;
    let config: EmbedConfig = serde_json::from_value(c.manifest.config.clone()).map_err(fmt_err)?;
    if config.d_z != c.manifest.d_z {
        return Err(CheckpointError::Incompatible(format!(
            "manifest d_z {} vs config {}",
            c.manifest.d_z, config.d_z
        )));
    }
    let params = c.params()?;
    let reference = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(fmt_err)?;
    check_layout(&params, &reference)?;
    Ok(EmbeddingModel {
        config,
        params,
        feat_mean: from_value(&c.extra, "feat_mean")?,
        feat_std: from_value(&c.extra, "feat_std")?,
    })
}

// ---------------------------------------------------------------------------
// Policy

/// How a policy's conditioning vectors are produced; stored with the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Conditioning {
    /// Requires the embedding checkpoint with this content hash.
    Learned { embedding_sha256: String },
    Raw,
    Pca { basis: PcaBasis },
}

impl Conditioning {
    pub fn of(src: &LatentSource) -> Self {
        match src {
            LatentSource::Learned(m) => Conditioning::Learned {
                embedding_sha256: embedding_checkpoint(m).manifest.sha256,
            },
            LatentSource::Raw => Conditioning::Raw,
            LatentSource::Pca(b) => Conditioning::Pca { basis: b.clone() },
        }
    }

    /// Rebuilds the latent source, checking the embedding matches.
    pub fn source(&self, embedding: Option<&EmbeddingModel>) -> Result<LatentSource, CheckpointError> {
        match self {
            Conditioning::Learned { embedding_sha256 } => {
                let m = embedding.ok_or_else(|| {
                    CheckpointError::Incompatible("policy needs its embedding checkpoint".into())
                })?;
                let h = embedding_checkpoint(m).manifest.sha256;
                if &h != embedding_sha256 {
                    return Err(CheckpointError::Incompatible(format!(
                        "policy trained with embedding {embedding_sha256}, got {h}"
                    )));
                }
                Ok(LatentSource::Learned(m.clone()))
            }
            Conditioning::Raw => Ok(LatentSource::Raw),
            Conditioning::Pca { basis } => Ok(LatentSource::Pca(basis.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolicyConfig {
    task: Option<TaskKind>,
    policy_mlp: Mlp,
    value_mlp: Mlp,
    value_scale: f64,
    train: TrainConfig,
    conditioning: Conditioning,
}

/// A loaded policy checkpoint.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub task: Option<TaskKind>,
    pub policy: Policy,
    pub value: ValueFn,
    pub conditioning: Conditioning,
    pub train: TrainConfig,
    pub lambda: Option<AdaptiveTaskWeight>,
}

pub fn policy_checkpoint(t: &TrainedPolicy, latents: &LatentSource) -> Checkpoint {
    let cfg = PolicyConfig {
        task: t.task,
        policy_mlp: t.policy.mlp.clone(),
        value_mlp: t.value.mlp.clone(),
        value_scale: t.value.scale,
        train: t.config.clone(),
        conditioning: Conditioning::of(latents),
    };
    let mut params = t.policy.params.clone();
    params.extend(t.value.params.clone()).expect("disjoint prefixes");
    Checkpoint::new(
        CheckpointKind::Policy,
        t.policy.d_z,
        serde_json::to_value(&cfg).expect("config"),
        serde_json::json!({ "obs_norm": t.policy.norm, "lambda": t.lambda }),
        &params,
    )
}

pub fn policy_from_checkpoint(c: &Checkpoint) -> Result<PolicyBundle, CheckpointError> {
    c.expect_kind(CheckpointKind::Policy)?;
    let cfg: PolicyConfig = serde_json::from_value(c.manifest.config.clone()).map_err(fmt_err)?;
    let norm: ObsNorm = from_value(&c.extra, "obs_norm")?;
    let all = c.params()?;
    let d_z = c.manifest.d_z;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if cfg.policy_mlp.spec.input_dim() != crate::rl::input_dim(d_z) {
        return Err(CheckpointError::Incompatible(format!(
            "policy input {} for d_z {d_z}",
            cfg.policy_mlp.spec.input_dim()
        )));
    }
    let mut reference = Params::new();
    cfg.policy_mlp.init(&mut reference, &mut rng, 1.0).map_err(fmt_err)?;
    reference
        .insert("pi.log_std", Array2::zeros((1, crate::sim::ACTION_DIM)))
        .map_err(fmt_err)?;
    let pp = all.subset("pi.");
    check_layout(&pp, &reference)?;
    let policy = Policy {
        mlp: cfg.policy_mlp.clone(),
        params: pp,
        norm,
        d_z,
    };
    let mut vref = Params::new();
    cfg.value_mlp.init(&mut vref, &mut rng, 1.0).map_err(fmt_err)?;
    let vp = all.subset("v.");
    check_layout(&vp, &vref)?;
    Ok(PolicyBundle {
        task: cfg.task,
        policy,
        value: ValueFn {
            mlp: cfg.value_mlp,
            params: vp,
            scale: cfg.value_scale,
        },
        conditioning: cfg.conditioning,
        train: cfg.train,
        lambda: from_value(&c.extra, "lambda").ok(),
    })
}

// ---------------------------------------------------------------------------
// Discriminator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DiscConfig {
    mlp: Mlp,
    marginal: bool,
}

pub fn discriminator_checkpoint(d: &Discriminator) -> Checkpoint {
    Checkpoint::new(
        CheckpointKind::Discriminator,
        d.d_z,
        serde_json::to_value(DiscConfig {
            mlp: d.mlp.clone(),
            marginal: d.marginal,
        })
        .expect("config"),
        serde_json::json!({ "obs_norm": d.norm }),
        &d.params,
    )
}

pub fn discriminator_from_checkpoint(c: &Checkpoint) -> Result<Discriminator, CheckpointError> {
    c.expect_kind(CheckpointKind::Discriminator)?;
    let cfg: DiscConfig = serde_json::from_value(c.manifest.config.clone()).map_err(fmt_err)?;
    let params = c.params()?;
    let mut reference = Params::new();
    cfg.mlp
        .init(&mut reference, &mut ChaCha8Rng::seed_from_u64(0), 1.0)
        .map_err(fmt_err)?;
    check_layout(&params, &reference)?;
    Ok(Discriminator {
        mlp: cfg.mlp,
        params,
        norm: from_value(&c.extra, "obs_norm")?,
        d_z: c.manifest.d_z,
        marginal: cfg.marginal,
    })
}
