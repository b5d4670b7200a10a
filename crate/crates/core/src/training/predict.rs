use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::dataset::{derive_seed, Dataset, MultiYearParcel};
use crate::error::{Error, Result};
use crate::heads::{head_feature, HeadVariant, LabelHistory};
use crate::model::Model;
use crate::tensor::Tensor;

const EVAL_STREAM: u64 = 0xe7a1;

/// Which years of each parcel to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YearFilter {
    All,
    Only(usize),
}

impl YearFilter {
    pub fn years(self, total: usize) -> Result<Vec<usize>> {
        match self {
            YearFilter::All => Ok((1..=total).collect()),
            YearFilter::Only(y) if (1..=total).contains(&y) => Ok(vec![y]),
            YearFilter::Only(y) => Err(Error::Config(format!("year {y} outside 1..={total}"))),
        }
    }
}

/// Pixel draw used when scoring a parcel-year. It does not depend on the
/// model, so every model sees the same pixels.
pub fn eval_draw_seed(seed: u64, parcel_id: u64, year_index: usize) -> u64 {
    derive_seed(&[seed, EVAL_STREAM, parcel_id, year_index as u64])
}

/// Scores the requested years of the given parcels (indices into
/// `dataset.parcels`). Label histories are the parcel's own declarations.
/// Records come out in parcel order, then year order.
pub fn predict(
    model: &Model<f32>,
    dataset: &Dataset,
    parcels: &[usize],
    filter: YearFilter,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let years = filter.years(dataset.years)?;
    let per_parcel: Vec<Result<Vec<PredictionRecord>>> = parcels
        .par_iter()
        .map(|&i| {
            let parcel = dataset
                .parcels
                .get(i)
                .ok_or_else(|| Error::Contract(format!("parcel index {i} out of range")))?;
            predict_parcel(model, parcel, &years, seed)
        })
        .collect();
    let mut out = Vec::with_capacity(parcels.len() * years.len());
    for r in per_parcel {
        out.extend(r?);
    }
    Ok(out)
}

fn predict_parcel(
    model: &Model<f32>,
    parcel: &MultiYearParcel,
    years: &[usize],
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let labels = parcel.labels();
    let variant = model.variant();
    let max_year = years.iter().copied().max().unwrap_or(0);
    let mut descriptors: Vec<Option<Tensor<f32>>> = vec![None; max_year + 1];
    for y in 1..=max_year {
        if variant == HeadVariant::Obs || years.contains(&y) {
            let d = model.descriptor(parcel.year(y), eval_draw_seed(seed, parcel.parcel_id, y))?;
            descriptors[y] = Some(d.e);
        }
    }
    let classes = model.arch.classes;
    let dim = model.arch.encoder.descriptor_dim;
    years
        .iter()
        .map(|&y| {
            let history = LabelHistory::from_labels(&labels, y, classes)?;
            let prev = |back: usize| (y > back).then(|| descriptors[y - back].as_ref()).flatten();
            let feature = head_feature(variant, y, Some(&history), (prev(1), prev(2)), dim, classes)?;
            let e = descriptors[y].as_ref().expect("descriptor computed for requested year");
            let z = model.head.decode(&model.params, e, feature.as_ref())?;
            Ok(PredictionRecord {
                parcel_id: parcel.parcel_id,
                year_index: y,
                logits: z.to_vec(),
                posterior: None,
                label: labels[y - 1],
            })
        })
        .collect()
}
