//! Temperature scaling and expected calibration error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, log_sum_exp, softmax_f64};
use crate::training::PredictionRecord;

pub const DEFAULT_BINS: usize = 15;

const LOG_TAU_RANGE: (f64, f64) = (-3.0, 3.0);
const SEARCH_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    pub tau: f64,
}

impl TemperatureScaler {
    pub fn apply(&self, z: &[f32]) -> Result<Vec<f64>> {
        apply_temperature(z, self.tau)
    }

    /// Copies of `records` carrying the calibrated posterior.
    pub fn calibrate(&self, records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
        records
            .iter()
            .map(|r| {
                Ok(PredictionRecord {
                    posterior: Some(self.apply(&r.logits)?),
                    ..r.clone()
                })
            })
            .collect()
    }
}

/// `softmax(z / tau)`.
pub fn apply_temperature(z: &[f32], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = z.iter().map(|&v| v as f64 / tau).collect();
    Ok(softmax_f64(&scaled))
}

/// Mean negative log-likelihood of the labels under `softmax(z / tau)`.
pub fn nll(records: &[PredictionRecord], tau: f64) -> f64 {
    let total: f64 = records
        .iter()
        .map(|r| {
            let scaled: Vec<f64> = r.logits.iter().map(|&v| v as f64 / tau).collect();
            log_sum_exp(&scaled) - scaled[r.label]
        })
        .sum();
    total / records.len() as f64
}

/// Golden-section search for the NLL-minimizing `log tau` in [−3, 3]. Falls
/// back to `tau = 1` if the search ends somewhere worse.
pub fn fit_temperature(records: &[PredictionRecord]) -> Result<TemperatureScaler> {
    if records.is_empty() {
        return Err(Error::Contract("cannot fit a temperature on zero records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.label >= r.logits.len()) {
        return Err(Error::Contract(format!("label {} outside the logits", r.label)));
    }
    let f = |u: f64| nll(records, u.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_TAU_RANGE;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > SEARCH_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let u = 0.5 * (a + b);
    let tau = if f(u) <= f(0.0) { u.exp() } else { 1.0 };
    Ok(TemperatureScaler { tau })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean max-probability in the bin (0 when empty).
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ_b (n_b / N) · |acc_b − conf_b|`.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,count,confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{:.6},{:.6}", b.count, b.confidence, b.accuracy);
        }
        out
    }
}

/// Bin of a confidence on `(0, 1]` split into `n` equal intervals
/// `(i/n, (i+1)/n]`; a value on an edge belongs to the lower bin.
fn bin_of(confidence: f64, n: usize) -> usize {
    let edge = |i: usize| i as f64 / n as f64;
    let mut i = ((confidence * n as f64).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while i > 0 && confidence <= edge(i) {
        i -= 1;
    }
    while i + 1 < n && confidence > edge(i + 1) {
        i += 1;
    }
    i
}

/// Reliability table over the records' posteriors.
pub fn reliability(records: &[PredictionRecord], n_bins: usize) -> Result<ReliabilityBins> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for r in records {
        let p = r
            .posterior
            .as_ref()
            .ok_or_else(|| Error::Contract("reliability needs posteriors".into()))?;
        let k = argmax(p);
        let b = bin_of(p[k], n_bins);
        count[b] += 1;
        conf[b] += p[k];
        correct[b] += usize::from(k == r.label);
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                confidence: conf[b] / n,
                accuracy: correct[b] as f64 / n,
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    Ok(reliability(records, n_bins)?.ece())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, WeightedIndex};

    fn with_posterior(p: Vec<f64>, label: usize) -> PredictionRecord {
        PredictionRecord {
            parcel_id: 0,
            year_index: 1,
            logits: vec![0.0; p.len()],
            posterior: Some(p),
            label,
        }
    }

    #[test]
    fn ece_hand_cases() {
        let correct: Vec<_> = (0..4).map(|_| with_posterior(vec![1.0, 0.0], 0)).collect();
        assert_eq!(ece(&correct, 15).unwrap(), 0.0);

        let half: Vec<_> = (0..4).map(|i| with_posterior(vec![1.0, 0.0], i % 2)).collect();
        assert_eq!(ece(&half, 15).unwrap(), 0.5);

        let mut two = Vec::new();
        for i in 0..10 {
            two.push(with_posterior(vec![0.6, 0.4], i % 2));
            two.push(with_posterior(vec![0.9, 0.1], 0));
        }
        assert!((ece(&two, 15).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn edges_go_to_lower_bin() {
        assert_eq!(bin_of(0.6, 15), 8);
        assert_eq!(bin_of(1.0, 15), 14);
        assert_eq!(bin_of(0.5, 2), 0);
        assert_eq!(bin_of(0.500001, 2), 1);
        for i in 1..=15 {
            assert_eq!(bin_of(i as f64 / 15.0, 15), i - 1);
        }
    }

    #[test]
    fn counts_partition_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (0..500)
            .map(|_| {
                let z: Vec<f32> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
                with_posterior(apply_temperature(&z, 1.0).unwrap(), rng.gen_range(0..5))
            })
            .collect();
        let bins = reliability(&recs, DEFAULT_BINS).unwrap();
        assert_eq!(bins.total(), 500);
        let e = bins.ece();
        assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn temperature_identity_and_flattening() {
        let z = [1.0f32, -2.0, 0.5];
        let plain = softmax_f64(&[1.0, -2.0, 0.5]);
        assert_eq!(apply_temperature(&z, 1.0).unwrap(), plain);
        let flat = apply_temperature(&z, 1e6).unwrap();
        assert!(flat.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-5));
        assert!(apply_temperature(&z, 0.0).is_err());
        assert!(apply_temperature(&z, -1.0).is_err());
    }

    #[test]
    fn argmax_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let z: Vec<f32> = (0..10).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let tau = rng.gen_range(0.05..20.0);
            assert_eq!(argmax(&apply_temperature(&z, tau).unwrap()), argmax(&z));
        }
    }

    /// Labels drawn from softmax(true logits); the model reports
    /// `scale × true logits`.
    fn synthetic(n: usize, scale: f32, seed: u64) -> Vec<PredictionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: Vec<f32> = (0..6).map(|_| rng.gen_range(-2.5..2.5)).collect();
                let p = softmax_f64(&z.iter().map(|&v| v as f64).collect::<Vec<_>>());
                let label = WeightedIndex::new(&p).unwrap().sample(&mut rng);
                PredictionRecord {
                    parcel_id: 0,
                    year_index: 1,
                    logits: z.iter().map(|v| v * scale).collect(),
                    posterior: None,
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn calibrated_logits_fit_unit_temperature() {
        let recs = synthetic(20_000, 1.0, 5);
        let tau = fit_temperature(&recs).unwrap().tau;
        assert!((tau - 1.0).abs() < 0.05, "tau {tau}");
        assert!(nll(&recs, tau) <= nll(&recs, 1.0) + 1e-9);
    }

    #[test]
    fn overconfident_logits_fit_large_temperature() {
        let recs = synthetic(20_000, 5.0, 6);
        let tau = fit_temperature(&recs).unwrap().tau;
        assert!((tau / 5.0 - 1.0).abs() < 0.1, "tau {tau}");
    }

    #[test]
    fn single_record_is_finite() {
        let recs = synthetic(1, 1.0, 7);
        let s = fit_temperature(&recs).unwrap();
        assert!(s.tau.is_finite() && s.tau > 0.0);
        assert!(nll(&recs, s.tau) <= nll(&recs, 1.0) + 1e-9);
        assert!(fit_temperature(&[]).is_err());
    }
}
