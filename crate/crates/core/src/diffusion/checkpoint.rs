//! Checkpoint container.
//!
//! Layout: the 8-byte magic `WDCKPT01`, a little-endian `u32` header length,
//! a JSON [`CheckpointHeader`], then every tensor listed in the header as
//! little-endian `f32` values in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::Module;
use super::optim::{AdamW, AdamWConfig};
use super::prior::GaussianPrior;
use super::schedule::BetaSchedule;
use super::train::{EpochLoss, TrainConfig};
use super::unet::{UNet, UNetConfig};
use crate::digest::sha256_hex;
use crate::wavelet::{CodecMode, RowFill};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"WDCKPT01";
pub const CHECKPOINT_FORMAT: &str = "wavediff-checkpoint/2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub schedule: BetaSchedule,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
    pub manifest_digest: String,
    pub codec: CodecMode,
    pub row_fill: RowFill,
    #[serde(default)]
    pub config_digest: Option<String>,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorEntry>,
    /// sha256 of the tensor payload.
    pub payload_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
}

/// Trained (or partially trained) model with everything needed to resume
/// training or to sample and decode.
#[derive(Debug, Clone)]
pub struct DiffusionCheckpoint {
    pub unet_config: UNetConfig,
    pub train_config: TrainConfig,
    pub schedule: BetaSchedule,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
    pub manifest_digest: String,
    pub codec: CodecMode,
    pub row_fill: RowFill,
    pub config_digest: Option<String>,
    pub model: UNet<f32>,
    /// Present when `train_config.gaussian_skip` is set.
    pub prior: Option<GaussianPrior>,
    pub optimizer: Option<AdamW>,
}

impl DiffusionCheckpoint {
    pub fn validate(&self) -> Result<()> {
        if self.manifest_digest.is_empty() {
            return Err(Error::Format("checkpoint has no manifest digest".into()));
        }
        if self.history.len() != self.epoch {
            return Err(Error::Format(format!(
                "checkpoint at epoch {} carries {} loss entries",
                self.epoch,
                self.history.len()
            )));
        }
        if self.model.config() != &self.unet_config {
            return Err(Error::Format("model and header UNet configs differ".into()));
        }
        match (&self.prior, self.train_config.gaussian_skip) {
            (Some(p), true) => {
                p.validate()?;
                let u = &self.unet_config;
                if p.len() != u.in_channels * u.height * u.width {
                    return Err(Error::Format("prior and UNet input sizes differ".into()));
                }
            }
            (None, false) => {}
            _ => return Err(Error::Format("Gaussian prior does not match gaussian_skip".into())),
        }
        Ok(())
    }

    pub fn write<W: Write>(&mut self, mut sink: W) -> Result<()> {
        self.validate()?;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry { name, shape });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.model.visit_params("", &mut |name, p| {
            push(name.to_string(), p.shape.clone(), &p.value);
        });
        if let Some(p) = &self.prior {
            push("prior.mean".into(), vec![p.len()], &p.mean);
            push("prior.std".into(), vec![p.len()], &p.std);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for (name, data) in moments {
                    push(format!("{prefix}.{name}"), vec![data.len()], data);
                }
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            unet: self.unet_config.clone(),
            train: self.train_config.clone(),
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            manifest_digest: self.manifest_digest.clone(),
            codec: self.codec,
            row_fill: self.row_fill,
            config_digest: self.config_digest.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerState {
                config: o.config,
                step: o.step,
            }),
            tensors,
            payload_digest: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        sink.write_all(MAGIC)?;
        sink.write_all(&(json.len() as u32).to_le_bytes())?;
        sink.write_all(&json)?;
        sink.write_all(&payload)?;
        sink.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        let corrupt = |m: String| Error::Format(format!("corrupt checkpoint: {m}"));
        let mut magic = [0u8; 8];
        source.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut len = [0u8; 4];
        source.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        source.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| corrupt(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unsupported format {}", header.format)));
        }
        let mut payload = Vec::new();
        source.read_to_end(&mut payload)?;
        let found = sha256_hex(&payload);
        if found != header.payload_digest {
            return Err(corrupt("tensor payload digest mismatch".into()));
        }
        let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut offset = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let bytes = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| corrupt(format!("tensor {} truncated", entry.name)))?;
            offset += 4 * n;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(entry.name.clone(), data);
        }
        if offset != payload.len() {
            return Err(corrupt("trailing bytes after tensors".into()));
        }
        let schedule = header.schedule.rebuild()?;
        let mut model = UNet::<f32>::new(header.unet.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut problem = None;
        model.visit_params("", &mut |name, p| match tensors.remove(name) {
            Some(v) if v.len() == p.value.len() => p.value = v,
            Some(_) => problem = Some(format!("tensor {name} has the wrong size")),
            None => problem = Some(format!("tensor {name} missing")),
        });
        if let Some(m) = problem {
            return Err(corrupt(m));
        }
        let prior = match (tensors.remove("prior.mean"), tensors.remove("prior.std")) {
            (Some(mean), Some(std)) => Some(GaussianPrior { mean, std }),
            (None, None) => None,
            _ => return Err(corrupt("incomplete Gaussian prior".into())),
        };
        let optimizer = header.optimizer.map(|state| {
            let mut opt = AdamW::new(state.config);
            opt.step = state.step;
            for (name, data) in std::mem::take(&mut tensors) {
                if let Some(rest) = name.strip_prefix("adam.m.") {
                    opt.m.insert(rest.to_string(), data);
                } else if let Some(rest) = name.strip_prefix("adam.v.") {
                    opt.v.insert(rest.to_string(), data);
                } else {
                    tensors.insert(name, data);
                }
            }
            opt
        });
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        let ckpt = Self {
            unet_config: header.unet,
            train_config: header.train,
            schedule,
            epoch: header.epoch,
            history: header.history,
            manifest_digest: header.manifest_digest,
            codec: header.codec,
            row_fill: header.row_fill,
            config_digest: header.config_digest,
            model,
            prior,
            optimizer,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        self.write(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// `epoch,train_loss,val_loss` rows.
pub fn write_loss_csv<W: Write>(history: &[EpochLoss], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
