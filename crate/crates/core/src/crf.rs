//! Second-order chain-CRF baseline: smoothed label transitions applied to
//! calibrated posteriors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::manifest_path;
use crate::error::{Error, Result};
use crate::tensor::argmax;
use crate::training::PredictionRecord;

const MAGIC: &[u8; 4] = b"RCTT";
const VERSION: u32 = 1;

/// `T[a, b, c] = P(l_i = c | l_{i-2} = a, l_{i-1} = b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    pub classes: usize,
    pub alpha: f64,
    pub triplets: u64,
    probs: Vec<f64>,
}

/// JSON companion of the binary tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionMeta {
    pub classes: usize,
    pub alpha: f64,
    pub triplets: u64,
}

impl TransitionTensor {
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.probs[(a * self.classes + b) * self.classes + c]
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let l = self.classes;
        let start = (a * l + b) * l;
        &self.probs[start..start + l]
    }

    pub fn meta(&self) -> TransitionMeta {
        TransitionMeta {
            classes: self.classes,
            alpha: self.alpha,
            triplets: self.triplets,
        }
    }

    /// `magic "RCTT" | version u32 | classes u16 | alpha f64 | triplets u64 |
    /// L³ f64`, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + 8 * self.probs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.triplets.to_le_bytes());
        for p in &self.probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 26 {
            return Err(Error::format(bytes.len() as u64, "truncated transition header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"RCTT\""));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let classes = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
        let alpha = f64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let triplets = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let n = classes.pow(3);
        if bytes.len() != 26 + 8 * n {
            return Err(Error::format(26, format!("expected {n} probabilities")));
        }
        let probs = bytes[26..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(TransitionTensor {
            classes,
            alpha,
            triplets,
            probs,
        })
    }

    /// Writes the binary tensor and `<path>.json` metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        fs::write(&mpath, serde_json::to_string_pretty(&self.meta())?).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Laplace-smoothed estimate
/// `T[a,b,c] = (n(a,b,c) + α) / (n(a,b,·) + α·L)`.
pub fn estimate_transitions(
    triplets: &[(usize, usize, usize)],
    classes: usize,
    alpha: f64,
) -> Result<TransitionTensor> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
    }
    if classes == 0 || classes > u16::MAX as usize {
        return Err(Error::Contract(format!("unsupported class count {classes}")));
    }
    let l = classes;
    let mut counts = vec![0u64; l * l * l];
    for &(a, b, c) in triplets {
        if a >= l || b >= l || c >= l {
            return Err(Error::Contract(format!("triplet ({a}, {b}, {c}) outside {l} classes")));
        }
        counts[(a * l + b) * l + c] += 1;
    }
    let mut probs = vec![0.0; l * l * l];
    for ab in 0..l * l {
        let row = &counts[ab * l..(ab + 1) * l];
        let denom = row.iter().sum::<u64>() as f64 + alpha * l as f64;
        for c in 0..l {
            probs[ab * l + c] = (row[c] as f64 + alpha) / denom;
        }
    }
    Ok(TransitionTensor {
        classes,
        alpha,
        triplets: triplets.len() as u64,
        probs,
    })
}

/// Consecutive `(l_{i-2}, l_{i-1}, l_i)` triplets of every label sequence.
pub fn triplets_from(sequences: &[Vec<usize>]) -> Vec<(usize, usize, usize)> {
    sequences
        .iter()
        .flat_map(|s| s.windows(3).map(|w| (w[0], w[1], w[2])))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfScore {
    /// `ẑ = p ⊙ T[a, b, :]`.
    pub scores: Vec<f64>,
    /// `ẑ / Σ ẑ`.
    pub posterior: Vec<f64>,
    pub predicted: usize,
}

/// Rescores a calibrated posterior with the transition row of the two
/// previous labels.
pub fn crf_score(p: &[f64], a: usize, b: usize, t: &TransitionTensor) -> Result<CrfScore> {
    if p.len() != t.classes {
        return Err(Error::Dimension(format!(
            "posterior has {} classes, tensor {}",
            p.len(),
            t.classes
        )));
    }
    if a >= t.classes || b >= t.classes {
        return Err(Error::Contract(format!("previous labels ({a}, {b}) out of range")));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract("expected a calibrated posterior summing to 1".into()));
    }
    let scores: Vec<f64> = p.iter().zip(t.row(a, b)).map(|(x, y)| x * y).collect();
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all CRF scores are zero".into()));
    }
    Ok(CrfScore {
        predicted: argmax(&scores),
        posterior: scores.iter().map(|s| s / total).collect(),
        scores,
    })
}

/// Replaces the posterior of every record from the third year on with its
/// CRF-rescored version; the two previous labels come from `declarations`
/// (parcel id → labels by year). Earlier years are dropped.
pub fn rescore(
    records: &[PredictionRecord],
    declarations: &HashMap<u64, Vec<usize>>,
    t: &TransitionTensor,
) -> Result<Vec<PredictionRecord>> {
    records
        .iter()
        .filter(|r| r.year_index > 2)
        .map(|r| {
            let p = r
                .posterior
                .as_ref()
                .ok_or_else(|| Error::Contract("CRF needs calibrated posteriors".into()))?;
            let labels = declarations
                .get(&r.parcel_id)
                .ok_or_else(|| Error::Contract(format!("no declarations for parcel {}", r.parcel_id)))?;
            if labels.len() < r.year_index {
                return Err(Error::Contract(format!("parcel {} lacks declarations", r.parcel_id)));
            }
            let y = r.year_index;
            let s = crf_score(p, labels[y - 3], labels[y - 2], t)?;
            Ok(PredictionRecord {
                posterior: Some(s.posterior),
                ..r.clone()
            })
        })
        .collect()
}
