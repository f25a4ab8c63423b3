//! Checkpoint files: one JSON header line, then every parameter as little-endian f64.
//!
//! Payload order is layer by layer `mu_w, rho_w, mu_b, rho_b`, then each
//! attention head's `w_q, w_k, w_v`, then the Adam first moments and second
//! moments in that same order when optimizer state is stored.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::AttentionParams;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{AdamConfig, AdamState, Peer};
use crate::variational::{Architecture, BnnModel, PriorSpec, SamplingMode, VariationalLayer};

const FORMAT: &str = "peerbnn-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Variational,
    /// Point-estimate network: only the means are meaningful.
    Deterministic,
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word position is not an integer"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: CheckpointKind,
    arch_hash: String,
    architecture: Architecture,
    sampling: SamplingMode,
    prior: PriorSpec,
    role: Option<String>,
    seed: Option<u64>,
    config_hash: Option<String>,
    /// `[w_q, w_k, w_v]` shapes per fused pair.
    attention: Vec<[Vec<usize>; 3]>,
    adam: Option<AdamHeader>,
    rng: Option<RngState>,
    payload_values: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: BnnModel,
    pub attn: Vec<AttentionParams>,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
    pub role: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn from_model(kind: CheckpointKind, model: BnnModel) -> Self {
        Checkpoint { kind, model, attn: Vec::new(), adam: None, rng: None, role: None, seed: None, config_hash: None }
    }

    pub fn from_peer(peer: &Peer) -> Self {
        Checkpoint {
            kind: CheckpointKind::Variational,
            model: peer.model.clone(),
            attn: peer.attn.clone(),
            adam: Some(peer.opt.clone()),
            rng: None,
            role: None,
            seed: None,
            config_hash: None,
        }
    }

    /// Rebuilds a trainable peer; missing optimizer state starts fresh.
    pub fn into_peer(self, adam: AdamConfig) -> Peer {
        let mut peer = Peer::new(self.model, self.attn, adam);
        if let Some(state) = self.adam {
            peer.opt = state;
        }
        peer
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.model.layers {
            out.extend([&l.mu_w, &l.rho_w, &l.mu_b, &l.rho_b]);
        }
        for a in &self.attn {
            out.extend(a.tensors());
        }
        out
    }

    fn header(&self) -> Header {
        let mut n: usize = self.tensors().iter().map(|t| t.numel()).sum();
        if let Some(a) = &self.adam {
            n += a.m.iter().chain(&a.v).map(Vec::len).sum::<usize>();
        }
        Header {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            arch_hash: self.model.arch.hash(),
            architecture: self.model.arch.clone(),
            sampling: self.model.mode,
            prior: self.model.prior,
            role: self.role.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            attention: self.attn.iter().map(|a| [a.w_q.shape().to_vec(), a.w_k.shape().to_vec(), a.w_v.shape().to_vec()]).collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader { config: a.config, step: a.step }),
            rng: self.rng.clone(),
            payload_values: n,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        let mut push = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for t in self.tensors() {
            push(t.data());
        }
        if let Some(a) = &self.adam {
            for buf in a.m.iter().chain(&a.v) {
                push(buf);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint; with `expected` set the architecture must match it.
    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&line)
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        Self::from_parts(header, &payload, expected).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_parts(header: Header, payload: &[u8], expected: Option<&Architecture>) -> Result<Self> {
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
        }
        header.architecture.validate()?;
        if header.architecture.hash() != header.arch_hash {
            return Err(Error::Checkpoint("architecture hash does not match the stored architecture".into()));
        }
        if let Some(arch) = expected {
            if arch.hash() != header.arch_hash {
                return Err(Error::Checkpoint(format!(
                    "architecture hash mismatch: checkpoint {} vs expected {}",
                    header.arch_hash,
                    arch.hash()
                )));
            }
        }
        if payload.len() != header.payload_values * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {} values",
                payload.len(),
                header.payload_values
            )));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Checkpoint("payload ends early".into()));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let w = &header.architecture.widths;
        let mut layers = Vec::with_capacity(w.len() - 1);
        for win in w.windows(2) {
            let (i, o) = (win[0], win[1]);
            layers.push(VariationalLayer {
                mu_w: take(&[i, o])?,
                rho_w: take(&[i, o])?,
                mu_b: take(&[1, o])?,
                rho_b: take(&[1, o])?,
            });
        }
        let mut attn = Vec::with_capacity(header.attention.len());
        for [q, k, v] in &header.attention {
            attn.push(AttentionParams { w_q: take(q)?, w_k: take(k)?, w_v: take(v)? });
        }
        let model = BnnModel { arch: header.architecture.clone(), layers, mode: header.sampling, prior: header.prior };
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let sizes: Vec<usize> = model
                    .layers
                    .iter()
                    .flat_map(|l| [l.mu_w.numel(), l.rho_w.numel(), l.mu_b.numel(), l.rho_b.numel()])
                    .chain(attn.iter().flat_map(|a| a.tensors().map(Tensor::numel)))
                    .collect();
                let mut buf = |n: usize| -> Result<Vec<f64>> { Ok(take(&[n])?.into_data()) };
                let m = sizes.iter().map(|&n| buf(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| buf(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { config: h.config, step: h.step, m, v })
            }
        };
        model.validate()?;
        Ok(Checkpoint {
            kind: header.kind,
            model,
            attn,
            adam,
            rng: header.rng,
            role: header.role,
            seed: header.seed,
            config_hash: header.config_hash,
        })
    }
}
