//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use croprot_core::dataset::{generate_synthetic, load_dataset, Dataset, SyntheticConfig};
use croprot_core::encoders::EncoderDims;
use croprot_core::heads::HeadVariant;
use croprot_core::training::{Protocol, TrainConfig, YearFilter};
use croprot_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub folds: FoldSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Where the parcels come from: a saved file, a named synthetic preset, or
/// a full generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Preset(PresetSection),
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Desk,
    ReferenceShaped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSection {
    pub name: PresetName,
    pub parcels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PresetSection {
    pub fn config(&self) -> SyntheticConfig {
        match self.name {
            PresetName::Desk => SyntheticConfig::desk(self.parcels, self.seed),
            PresetName::ReferenceShaped => SyntheticConfig::reference_shaped(self.parcels, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldSection {
    pub k: usize,
    /// Side of the square spatial blocks, in meters.
    pub block_size: f64,
    pub seed: u64,
    /// Existing fold file; folds are computed when absent.
    pub path: Option<PathBuf>,
}

impl Default for FoldSection {
    fn default() -> Self {
        FoldSection {
            k: 5,
            block_size: 1000.0,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Encoder widths; defaults with the dataset's channel count when absent.
    pub dims: Option<EncoderDims>,
    pub variant: HeadVariant,
    pub decoder_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dims: None,
            variant: HeadVariant::Single,
            decoder_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub test_folds: Option<Vec<usize>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: t.seed,
            protocol: t.protocol,
            test_folds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub years: YearSpec,
    pub calibration: bool,
    pub bins: usize,
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            years: YearSpec::Name("all".into()),
            calibration: true,
            bins: croprot_core::calibration::DEFAULT_BINS,
            alpha: 1.0,
        }
    }
}

/// `"all"` or a 1-based year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum YearSpec {
    Year(usize),
    Name(String),
}

impl YearSpec {
    pub fn filter(&self) -> Result<YearFilter> {
        match self {
            YearSpec::Year(y) => Ok(YearFilter::Only(*y)),
            YearSpec::Name(s) => parse_year(s),
        }
    }
}

pub fn parse_year(s: &str) -> Result<YearFilter> {
    match s {
        "all" => Ok(YearFilter::All),
        _ => s
            .parse::<usize>()
            .ok()
            .filter(|&y| y >= 1)
            .map(YearFilter::Only)
            .ok_or_else(|| Error::Config(format!("year must be a positive integer or \"all\", got {s:?}"))),
    }
}

/// Head variant named on the command line. The CRF baseline is a separate
/// post-processing step, not a trainable head.
pub fn parse_variant(s: &str) -> Result<HeadVariant> {
    if s == "crf" {
        return Err(Error::Config(
            "the crf baseline rescoring runs on calibrated single-head predictions; \
             train with --variant single, then run `croprot calibrate` and `croprot crf`"
                .into(),
        ));
    }
    s.parse()
}

impl RunConfig {
    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut cfg.folds.path {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds.k < 2 || !(self.folds.block_size > 0.0) {
            return Err(Error::Config("folds need k >= 2 and a positive block size".into()));
        }
        if let Some(d) = &self.model.dims {
            d.validate()?;
        }
        if self.eval.bins == 0 || !(self.eval.alpha > 0.0) {
            return Err(Error::Config("eval needs bins >= 1 and alpha > 0".into()));
        }
        self.eval.years.filter()?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate()?,
            DatasetSource::Preset(p) => p.config().validate()?,
            DatasetSource::Path(_) => {}
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            variant: self.model.variant,
            decoder_hidden: self.model.decoder_hidden,
            protocol: self.train.protocol,
            test_folds: self.train.test_folds.clone(),
            ..TrainConfig::default()
        }
    }

    pub fn encoder_dims(&self, dataset: &Dataset) -> EncoderDims {
        self.model.dims.clone().unwrap_or(EncoderDims {
            channels: dataset.channels,
            ..EncoderDims::default()
        })
    }

    /// Loads or generates the dataset. The flag says whether it was
    /// generated (and so has no file yet).
    pub fn dataset(&self) -> Result<(Dataset, bool)> {
        match &self.dataset {
            DatasetSource::Path(p) => Ok((load_dataset(p)?, false)),
            DatasetSource::Preset(p) => Ok((generate_synthetic(&p.config())?, true)),
            DatasetSource::Synthetic(s) => Ok((generate_synthetic(s)?, true)),
        }
    }

    /// Synthetic generator settings, with `seed` overriding when given.
    pub fn synthetic(&self, seed: Option<u64>) -> Result<SyntheticConfig> {
        let mut cfg = match &self.dataset {
            DatasetSource::Preset(p) => p.config(),
            DatasetSource::Synthetic(s) => s.clone(),
            DatasetSource::Path(_) => {
                return Err(Error::Config("synth needs a preset or synthetic dataset section".into()))
            }
        };
        if let Some(s) = seed {
            let parcels = cfg.parcels;
            cfg = match &self.dataset {
                DatasetSource::Preset(p) => PresetSection {
                    seed: s,
                    parcels,
                    ..p.clone()
                }
                .config(),
                _ => SyntheticConfig { seed: s, ..cfg },
            };
        }
        Ok(cfg)
    }
}
