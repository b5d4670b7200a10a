//! Loss, optimizer, training protocols and batched inference.

mod optim;
mod predict;
mod train;

use serde::{Deserialize, Serialize};

use crate::analytics::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::tensor::{argmax, log_sum_exp};

pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use predict::{eval_draw_seed, predict, YearFilter};
pub use train::{
    split_for_fold, train, train_split, training_samples, EpochLog, FoldRun, Protocol, Split, TrainConfig,
};

/// Model output for one parcel-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub parcel_id: u64,
    pub year_index: usize,
    pub logits: Vec<f32>,
    /// Calibrated posterior, once a temperature has been fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
    pub label: usize,
}

impl PredictionRecord {
    /// Predicted class: argmax of the posterior when present, else of the
    /// logits. Ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        match &self.posterior {
            Some(p) => argmax(p),
            None => argmax(&self.logits),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }
}

/// Confusion matrix of a set of records.
pub fn confusion(records: &[PredictionRecord], classes: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_pairs(classes, records.iter().map(|r| (r.label, r.predicted())))
}

/// `−log softmax(z)[label]`, evaluated in f64.
pub fn cross_entropy(z: &[f32], label: usize) -> Result<f64> {
    if label >= z.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite logits".into()));
    }
    let z: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    Ok(log_sum_exp(&z) - z[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let loss = cross_entropy(&[0.0; 20], 7).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit() {
        let mut z = vec![0.0; 5];
        z[2] = 30.0;
        assert!(cross_entropy(&z, 2).unwrap() < 1e-9);
    }

    #[test]
    fn naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z: Vec<f32> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let label = rng.gen_range(0..8);
            let denom: f64 = z.iter().map(|&v| (v as f64).exp()).sum();
            let naive = -((z[label] as f64).exp() / denom).ln();
            assert!((cross_entropy(&z, label).unwrap() - naive).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn prediction_uses_posterior_and_lowest_tie() {
        let mut r = PredictionRecord {
            parcel_id: 1,
            year_index: 1,
            logits: vec![1.0, 1.0, 0.0],
            posterior: None,
            label: 1,
        };
        assert_eq!(r.predicted(), 0);
        r.posterior = Some(vec![0.1, 0.2, 0.7]);
        assert_eq!(r.predicted(), 2);
    }
}
