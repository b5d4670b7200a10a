//! Multi-year parcel datasets: in-memory types, the synthetic generator,
//! pixel sampling, spatially blocked folds and the binary file format.

mod folds;
mod io;
mod sampling;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use folds::{block_of, derive_seed, make_folds, FoldAssignment};
pub use io::{load_dataset, manifest_path, save_dataset, MAGIC, VERSION};
pub use sampling::{sample_indices, sample_pixel_rows, sample_pixels};
pub use synth::{
    generate_synthetic, ClassCategory, DoubleLogistic, RotationKernel, SyntheticConfig,
};

/// One parcel observed during one year.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSetSample {
    pub parcel_id: u64,
    /// 1-based year index.
    pub year_index: usize,
    /// `C × N_p × T` reflectances.
    pub pixels: Tensor<f32>,
    /// Acquisition day-of-year per date, strictly increasing in `1..=366`.
    pub days: Vec<u16>,
    pub label: usize,
}

impl PixelSetSample {
    pub fn new(
        parcel_id: u64,
        year_index: usize,
        pixels: Tensor<f32>,
        days: Vec<u16>,
        label: usize,
    ) -> Result<Self> {
        let sample = PixelSetSample {
            parcel_id,
            year_index,
            pixels,
            days,
            label,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.pixels.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "pixels must be C x N_p x T, got {shape:?}"
            )));
        }
        if shape[2] != self.days.len() {
            return Err(Error::Dimension(format!(
                "{} dates but {} acquisition days",
                shape[2],
                self.days.len()
            )));
        }
        if self.days.iter().any(|&d| !(1..=366).contains(&d))
            || self.days.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Contract(format!(
                "parcel {} year {}: days must be strictly increasing within 1..=366",
                self.parcel_id, self.year_index
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn dates(&self) -> usize {
        self.pixels.shape()[2]
    }

    #[inline]
    pub fn value(&self, channel: usize, pixel: usize, date: usize) -> f32 {
        let s = self.pixels.shape();
        self.pixels.data()[(channel * s[1] + pixel) * s[2] + date]
    }
}

/// A stable parcel with one sample per year.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiYearParcel {
    pub parcel_id: u64,
    /// Planar centroid in meters.
    pub centroid: (f64, f64),
    pub years: Vec<PixelSetSample>,
}

impl MultiYearParcel {
    /// Labels ordered by year.
    pub fn labels(&self) -> Vec<usize> {
        self.years.iter().map(|s| s.label).collect()
    }

    /// Sample for a 1-based year index.
    pub fn year(&self, year_index: usize) -> &PixelSetSample {
        &self.years[year_index - 1]
    }
}

/// Human-readable metadata stored next to a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub year_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub years: usize,
    pub channels: usize,
    pub classes: usize,
    pub parcels: Vec<MultiYearParcel>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn new(
        years: usize,
        channels: usize,
        classes: usize,
        parcels: Vec<MultiYearParcel>,
        manifest: Manifest,
    ) -> Result<Self> {
        let ds = Dataset {
            years,
            channels,
            classes,
            parcels,
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract("a dataset needs at least two classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.parcels {
            if !seen.insert(p.parcel_id) {
                return Err(Error::Contract(format!("duplicate parcel id {}", p.parcel_id)));
            }
            if p.years.len() != self.years {
                return Err(Error::Contract(format!(
                    "parcel {} has {} years, expected {}",
                    p.parcel_id,
                    p.years.len(),
                    self.years
                )));
            }
            for (i, s) in p.years.iter().enumerate() {
                s.validate()?;
                if s.parcel_id != p.parcel_id || s.year_index != i + 1 {
                    return Err(Error::Contract(format!(
                        "parcel {} year {} is mislabeled",
                        p.parcel_id,
                        i + 1
                    )));
                }
                if s.channels() != self.channels {
                    return Err(Error::Dimension(format!(
                        "parcel {} has {} channels, expected {}",
                        p.parcel_id,
                        s.channels(),
                        self.channels
                    )));
                }
                if s.label >= self.classes {
                    return Err(Error::Contract(format!(
                        "parcel {} label {} out of range",
                        p.parcel_id, s.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-parcel label sequences, one entry per year.
    pub fn label_sequences(&self) -> Vec<Vec<usize>> {
        self.parcels.iter().map(|p| p.labels()).collect()
    }

    pub fn parcel_index(&self) -> std::collections::HashMap<u64, usize> {
        self.parcels
            .iter()
            .enumerate()
            .map(|(i, p)| (p.parcel_id, i))
            .collect()
    }
}
