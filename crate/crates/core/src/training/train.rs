use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predict::{predict, YearFilter};
use super::{confusion, optimizer_step, AdamConfig, AdamState, PredictionRecord};
use crate::analytics::metrics;
use crate::dataset::{derive_seed, Dataset, FoldAssignment};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::heads::{head_feature, HeadVariant, LabelHistory};
use crate::model::{Architecture, Model};
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5f1e;
const DRAW_STREAM: u64 = 0xd4a3;

/// Which parcel-years make up the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Every year of every training parcel.
    Mixed,
    /// Only the given 1-based year.
    Specialized(usize),
}

impl Protocol {
    pub fn filter(self) -> YearFilter {
        match self {
            Protocol::Mixed => YearFilter::All,
            Protocol::Specialized(y) => YearFilter::Only(y),
        }
    }

    pub fn name(self) -> String {
        match self {
            Protocol::Mixed => "mixed".into(),
            Protocol::Specialized(y) => format!("year{y}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub variant: HeadVariant,
    pub decoder_hidden: usize,
    pub protocol: Protocol,
    /// Folds to hold out as test sets; all folds when `None`.
    pub test_folds: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            variant: HeadVariant::Single,
            decoder_hidden: 64,
            protocol: Protocol::Mixed,
            test_folds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn architecture(&self, dims: &EncoderDims, classes: usize) -> Architecture {
        Architecture {
            encoder: dims.clone(),
            classes,
            decoder_hidden: self.decoder_hidden,
            variant: self.variant,
        }
    }
}

/// Parcel indices (into `dataset.parcels`) of one train/validation/test split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `test_fold` is the test set, the next fold (cyclically) the
/// validation set, the rest the training set.
pub fn split_for_fold(dataset: &Dataset, folds: &FoldAssignment, test_fold: usize) -> Result<Split> {
    folds.validate()?;
    if test_fold >= folds.k {
        return Err(Error::Config(format!("test fold {test_fold} >= k = {}", folds.k)));
    }
    let val_fold = (test_fold + 1) % folds.k;
    let mut split = Split::default();
    for (i, p) in dataset.parcels.iter().enumerate() {
        let f = folds
            .fold_of(p.parcel_id)
            .ok_or_else(|| Error::Config(format!("parcel {} has no fold", p.parcel_id)))?;
        match f {
            f if f == test_fold => split.test.push(i),
            f if f == val_fold => split.validation.push(i),
            _ => split.train.push(i),
        }
    }
    Ok(split)
}

/// `(parcel index, year)` pairs the protocol trains on.
pub fn training_samples(dataset: &Dataset, parcels: &[usize], protocol: Protocol) -> Result<Vec<(usize, usize)>> {
    let years = protocol.filter().years(dataset.years)?;
    Ok(parcels
        .iter()
        .flat_map(|&i| years.iter().map(move |&y| (i, y)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub test_fold: Option<usize>,
    pub model: Model<f32>,
    /// 0-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// All years of the validation parcels.
    pub validation: Vec<PredictionRecord>,
    /// All years of the test parcels.
    pub test: Vec<PredictionRecord>,
}

/// Cross-validated training: one run per test fold.
pub fn train(
    dataset: &Dataset,
    folds: &FoldAssignment,
    dims: &EncoderDims,
    cfg: &TrainConfig,
) -> Result<Vec<FoldRun>> {
    let test_folds = cfg.test_folds.clone().unwrap_or_else(|| (0..folds.k).collect());
    test_folds
        .into_iter()
        .map(|f| {
            let split = split_for_fold(dataset, folds, f)?;
            let mut run = train_split(dataset, &split, dims, cfg, f as u64)?;
            run.test_fold = Some(f);
            Ok(run)
        })
        .collect()
}

/// Trains one model on `split.train`, keeps the epoch with the best
/// validation mIoU and scores the validation and test parcels. `stream`
/// separates the random streams of different splits.
pub fn train_split(
    dataset: &Dataset,
    split: &Split,
    dims: &EncoderDims,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<FoldRun> {
    cfg.validate()?;
    if dims.channels != dataset.channels {
        return Err(Error::Config(format!(
            "encoder expects {} channels, dataset has {}",
            dims.channels, dataset.channels
        )));
    }
    let samples = training_samples(dataset, &split.train, cfg.protocol)?;
    if samples.is_empty() {
        return Err(Error::Infeasible("empty training split".into()));
    }
    let arch = cfg.architecture(dims, dataset.classes);
    let mut model = Model::<f32>::new(arch, derive_seed(&[cfg.seed, INIT_STREAM, stream]))?;
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let filter = cfg.protocol.filter();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let draw = |parcel_id: u64, year: usize| {
            derive_seed(&[cfg.seed, DRAW_STREAM, stream, epoch as u64, parcel_id, year as u64])
        };
        let cache = descriptor_cache(&model, dataset, &split.train, &draw)?;
        let mut order = samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            SHUFFLE_STREAM,
            stream,
            epoch as u64,
        ])));

        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params.values().iter().map(|v| vec![0.0; v.len()]).collect();
            for &(pi, y) in batch {
                let parcel = &dataset.parcels[pi];
                let sample = parcel.year(y);
                let rows = model.pixel_rows(sample, draw(parcel.parcel_id, y));
                let labels = parcel.labels();
                let hist = LabelHistory::from_labels(&labels, y, dataset.classes)?;
                let prev = |back: usize| (y > back).then(|| cache.get(&(pi, y - back))).flatten();
                let feature = head_feature(
                    model.variant(),
                    y,
                    Some(&hist),
                    (prev(1), prev(2)),
                    dims.descriptor_dim,
                    dataset.classes,
                )?;
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape);
                let z = model.logits(&mut tape, &p, &rows, &sample.days, feature.as_ref())?;
                let loss = tape.cross_entropy(z, sample.label)?;
                total_loss += tape.value(loss).data()[0] as f64;
                let grads = tape.backward(loss)?;
                for (k, &v) in p.vars().iter().enumerate() {
                    if let Some(g) = grads.try_get(v) {
                        for (a, &b) in acc[k].iter_mut().zip(g.data()) {
                            *a += b as f64;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            optimizer_step(&mut model.params, &acc, &mut state, &adam)?;
        }

        let validation_miou = if split.validation.is_empty() {
            None
        } else {
            let records = predict(&model, dataset, &split.validation, filter, cfg.seed)?;
            Some(metrics(&confusion(&records, dataset.classes)?)?.miou)
        };
        history.push(EpochLog {
            epoch,
            train_loss: total_loss / samples.len() as f64,
            validation_miou,
        });
        let score = validation_miou.unwrap_or(f64::NEG_INFINITY);
        // without validation data the last epoch wins
        if best.as_ref().map_or(true, |(s, _, _)| score > *s || split.validation.is_empty()) {
            best = Some((score, epoch, model.params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let validation = predict(&model, dataset, &split.validation, YearFilter::All, cfg.seed)?;
    let test = predict(&model, dataset, &split.test, YearFilter::All, cfg.seed)?;
    Ok(FoldRun {
        test_fold: None,
        model,
        best_epoch,
        history,
        validation,
        test,
    })
}

/// Epoch-start descriptors of every training parcel-year, used as the
/// frozen side input of the observation head.
fn descriptor_cache(
    model: &Model<f32>,
    dataset: &Dataset,
    parcels: &[usize],
    draw: &dyn Fn(u64, usize) -> u64,
) -> Result<HashMap<(usize, usize), Tensor<f32>>> {
    let mut cache = HashMap::new();
    if model.variant() != HeadVariant::Obs {
        return Ok(cache);
    }
    for &pi in parcels {
        let parcel = &dataset.parcels[pi];
        for y in 1..dataset.years {
            let d = model.descriptor(parcel.year(y), draw(parcel.parcel_id, y))?;
            cache.insert((pi, y), d.e);
        }
    }
    Ok(cache)
}
