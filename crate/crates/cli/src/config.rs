use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use wavediff::diffusion::{TrainConfig, UNetConfig};
use wavediff::digest::sha256_hex;
use wavediff::ingest::{ColumnMapping, ReferenceModelConfig};
use wavediff::metrics::ReportThresholds;
use wavediff::pipeline::PrepareConfig;
use wavediff::wavelet::CodecMode;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Codec {
    Wavelet,
    Flat,
}

impl From<Codec> for CodecMode {
    fn from(c: Codec) -> Self {
        match c {
            Codec::Wavelet => CodecMode::Wavelet,
            Codec::Flat => CodecMode::Flat,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Minute-bar CSV read by `ingest`.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub columns: ColumnMapping,
    pub reject_zero_volume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
}

/// Everything a pipeline run depends on. `seed` drives the simulator,
/// the data split, training and sampling; the per-section seeds are
/// overwritten from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Preset,
    pub paths: PathsSection,
    pub ingest: IngestSection,
    pub simulate: ReferenceModelConfig,
    pub prepare: PrepareConfig,
    /// `height` and `width` follow the codec.
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub metrics: ReportThresholds,
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub codec: Option<Codec>,
}

impl PipelineConfig {
    pub fn defaults(preset: Preset) -> Self {
        let (h, w) = CodecMode::Wavelet.shape();
        let (model, train, count, n_days) = match preset {
            Preset::Paper => (UNetConfig::paper(h, w), TrainConfig::paper(), 2500, 2481),
            Preset::Desk => (UNetConfig::desk(h, w), TrainConfig::desk(), 128, 512),
        };
        Self {
            seed: 0,
            preset,
            paths: PathsSection::default(),
            ingest: IngestSection::default(),
            simulate: ReferenceModelConfig {
                n_days,
                ..Default::default()
            },
            prepare: PrepareConfig::default(),
            model,
            train,
            sample: SampleSection { count },
            metrics: ReportThresholds::default(),
        }
    }

    /// Preset defaults, then the file, then command-line overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (ov.preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::Usage(format!("preset: {e}")))?,
            (None, None) => Preset::Desk,
        };
        let mut merged = to_table(&Self::defaults(preset))?;
        merge(&mut merged, file);
        merged.insert("preset".into(), to_value(&preset)?);
        if let Some(seed) = ov.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Usage("seed must fit in 63 bits".into()))?;
            merged.insert("seed".into(), toml::Value::Integer(seed));
        }
        if let Some(codec) = ov.codec {
            let mut prep = toml::Table::new();
            prep.insert("codec".into(), to_value(&CodecMode::from(codec))?);
            merge(&mut merged, toml::Table::from_iter([("prepare".to_string(), toml::Value::Table(prep))]));
        }
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        let (h, w) = self.prepare.codec.shape();
        self.model.height = h;
        self.model.width = w;
        self.train.rng_seed = self.seed;
        self.simulate.rng_seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: wavediff::Error| CliError::Usage(e.to_string());
        for c in &self.prepare.channels {
            c.validate().map_err(cfg)?;
        }
        self.train.validate().map_err(cfg)?;
        self.simulate.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        if self.model.in_channels != 3 {
            return Err(CliError::Usage("model.in_channels must be 3".into()));
        }
        if self.sample.count == 0 {
            return Err(CliError::Usage("sample.count must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed of the sampler, kept apart from the training streams.
    pub fn sample_seed(&self) -> u64 {
        self.seed ^ 0x5A4D_504C_4553_4545
    }

    /// Lineage digest: SHA-256 of everything except the report thresholds,
    /// which only affect `evaluate`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("metrics");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<toml::Value, CliError> {
    toml::Value::try_from(v).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table, CliError> {
    match to_value(v)? {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Recursive merge; tables merge key by key, anything else is replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        for p in [Preset::Paper, Preset::Desk] {
            let d = PipelineConfig::defaults(p);
            let text = d.to_toml().unwrap();
            let back: PipelineConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn partial_sections_keep_preset_defaults() {
        let dir = std::env::temp_dir().join(format!("wavediff-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "seed = 7\n[train]\nepochs = 3\n").unwrap();
        let cfg = PipelineConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.diffusion_steps), (7, 3, 200));
        assert_eq!(cfg.train.rng_seed, 7);
        let ov = Overrides {
            seed: Some(9),
            preset: Some(Preset::Paper),
            codec: Some(Codec::Flat),
        };
        let cfg = PipelineConfig::load(Some(&path), &ov).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.diffusion_steps), (9, 3, 1000));
        assert_eq!((cfg.model.height, cfg.model.width), (1, 512));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn digest_ignores_thresholds_only() {
        let a = PipelineConfig::defaults(Preset::Desk);
        let mut b = a.clone();
        b.metrics.u_ratio = 1.5;
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
