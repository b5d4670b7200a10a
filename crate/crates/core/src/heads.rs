//! Classification heads mapping a yearly descriptor, optionally augmented
//! with the parcel's history, to class scores.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    /// Current year only.
    Single,
    /// Sum of the one-hot labels of the two previous years.
    Dec,
    /// Both previous one-hot labels, concatenated in order.
    DecConcat,
    /// Previous year's one-hot label only.
    DecOneYear,
    /// Mean descriptor of the previous two years.
    Obs,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Single,
        HeadVariant::Dec,
        HeadVariant::DecConcat,
        HeadVariant::DecOneYear,
        HeadVariant::Obs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Single => "single",
            HeadVariant::Dec => "dec",
            HeadVariant::DecConcat => "dec-concat",
            HeadVariant::DecOneYear => "dec-one-year",
            HeadVariant::Obs => "obs",
        }
    }

    /// Width of the side input concatenated to the descriptor.
    pub fn feature_dim(self, classes: usize, descriptor_dim: usize) -> usize {
        match self {
            HeadVariant::Single => 0,
            HeadVariant::Dec | HeadVariant::DecOneYear => classes,
            HeadVariant::DecConcat => 2 * classes,
            HeadVariant::Obs => descriptor_dim,
        }
    }

    /// Whether the head consumes declared labels of previous years.
    pub fn uses_labels(self) -> bool {
        matches!(
            self,
            HeadVariant::Dec | HeadVariant::DecConcat | HeadVariant::DecOneYear
        )
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown head variant {s:?}; expected single, dec, dec-concat, dec-one-year or obs"
                ))
            })
    }
}

/// Declared labels of the two previous years; `None` is temporal zero-padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelHistory {
    pub classes: usize,
    pub prev1: Option<usize>,
    pub prev2: Option<usize>,
}

impl LabelHistory {
    pub fn new(classes: usize, prev1: Option<usize>, prev2: Option<usize>) -> Result<Self> {
        for l in [prev1, prev2].into_iter().flatten() {
            contract!(l < classes, "history label {l} out of range for {classes} classes");
        }
        Ok(LabelHistory {
            classes,
            prev1,
            prev2,
        })
    }

    /// History of 1-based `year_index` given a parcel's labels ordered by year.
    pub fn from_labels(labels: &[usize], year_index: usize, classes: usize) -> Result<Self> {
        contract!(
            year_index >= 1 && year_index <= labels.len(),
            "year {year_index} outside 1..={}",
            labels.len()
        );
        let prev = |back: usize| (year_index > back).then(|| labels[year_index - 1 - back]);
        Self::new(classes, prev(1), prev(2))
    }

    pub fn one_hot(&self, label: Option<usize>) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        if let Some(l) = label {
            v[l] = 1.0;
        }
        v
    }
}

fn row<R: Real>(values: &[f64]) -> Tensor<R> {
    Tensor::row(values.iter().map(|&v| R::of(v)).collect())
}

/// `prev1 + prev2`, entries in `{0, 1, 2}`.
pub fn history_feature_dec<R: Real>(h: &LabelHistory) -> Tensor<R> {
    let a = h.one_hot(h.prev1);
    let b = h.one_hot(h.prev2);
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    row(&sum)
}

/// `[prev1 ‖ prev2]`.
pub fn history_feature_concat<R: Real>(h: &LabelHistory) -> Tensor<R> {
    let mut v = h.one_hot(h.prev1);
    v.extend(h.one_hot(h.prev2));
    row(&v)
}

/// `prev1` alone.
pub fn history_feature_one_year<R: Real>(h: &LabelHistory) -> Tensor<R> {
    row(&h.one_hot(h.prev1))
}

/// Side input of the observation-bypass head: zeros in the first year, the
/// previous descriptor in the second (mirror padding), the mean of the two
/// previous descriptors afterwards.
pub fn obs_feature<R: Real>(
    e_prev1: Option<&Tensor<R>>,
    e_prev2: Option<&Tensor<R>>,
    year_index: usize,
    descriptor_dim: usize,
) -> Result<Tensor<R>> {
    contract!(year_index >= 1, "years are 1-based");
    let check = |e: &Tensor<R>| -> Result<Vec<f64>> {
        contract!(
            e.len() == descriptor_dim,
            "descriptor has {} entries, expected {descriptor_dim}",
            e.len()
        );
        Ok(e.to_f64())
    };
    let values = match year_index {
        1 => vec![0.0; descriptor_dim],
        2 => {
            let Some(e1) = e_prev1 else {
                return Err(Error::Contract("year 2 needs the previous descriptor".into()));
            };
            check(e1)?
        }
        _ => {
            let (Some(e1), Some(e2)) = (e_prev1, e_prev2) else {
                return Err(Error::Contract(format!(
                    "year {year_index} needs both previous descriptors"
                )));
            };
            let (a, b) = (check(e1)?, check(e2)?);
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        }
    };
    Ok(row(&values))
}

/// Builds the side input `variant` expects for one parcel-year. A missing
/// label history is only acceptable in the first year, where it is all
/// padding anyway.
pub fn head_feature<R: Real>(
    variant: HeadVariant,
    year_index: usize,
    history: Option<&LabelHistory>,
    prev_descriptors: (Option<&Tensor<R>>, Option<&Tensor<R>>),
    descriptor_dim: usize,
    classes: usize,
) -> Result<Option<Tensor<R>>> {
    let history = if variant.uses_labels() {
        let h = match history {
            Some(h) => *h,
            None if year_index == 1 => LabelHistory::new(classes, None, None)?,
            None => {
                return Err(Error::Contract(format!(
                    "variant {variant} needs declared labels for year {year_index}"
                )))
            }
        };
        contract!(
            (h.prev1.is_some() || year_index <= 1) && (h.prev2.is_some() || year_index <= 2),
            "variant {variant} is missing declarations before year {year_index}"
        );
        contract!(h.classes == classes, "history has {} classes, expected {classes}", h.classes);
        Some(h)
    } else {
        None
    };
    Ok(match variant {
        HeadVariant::Single => None,
        HeadVariant::Dec => history.as_ref().map(history_feature_dec),
        HeadVariant::DecConcat => history.as_ref().map(history_feature_concat),
        HeadVariant::DecOneYear => history.as_ref().map(history_feature_one_year),
        HeadVariant::Obs => Some(obs_feature(
            prev_descriptors.0,
            prev_descriptors.1,
            year_index,
            descriptor_dim,
        )?),
    })
}

/// Decoder MLP `D` of a head variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub variant: HeadVariant,
    pub mlp: Mlp,
    pub descriptor_dim: usize,
    pub feature_dim: usize,
}

impl Head {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        variant: HeadVariant,
        descriptor_dim: usize,
        classes: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let feature_dim = variant.feature_dim(classes, descriptor_dim);
        let mlp = Mlp::new(
            store,
            &format!("head.{}", variant.name()),
            &[descriptor_dim + feature_dim, hidden, classes],
            false,
            rng,
        );
        Head {
            variant,
            mlp,
            descriptor_dim,
            feature_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.descriptor_dim + self.feature_dim
    }

    /// Logits `z = D([e ‖ feature])`, shape `1 × L`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        e: Var,
        feature: Option<&Tensor<R>>,
    ) -> Result<Var> {
        let input = match (self.feature_dim, feature) {
            (0, None) => e,
            (0, Some(_)) => {
                return Err(Error::Contract(format!(
                    "variant {} takes no side input",
                    self.variant
                )))
            }
            (d, Some(f)) if f.len() == d => {
                let f = tape.constant(f.reshape(vec![1, d])?);
                tape.concat_cols(&[e, f])?
            }
            (d, f) => {
                return Err(Error::Contract(format!(
                    "variant {} expects a side input of width {d}, got {:?}",
                    self.variant,
                    f.map(|f| f.len())
                )))
            }
        };
        self.mlp.forward(tape, p, input)
    }

    /// Untaped logits for a descriptor vector.
    pub fn decode<R: Real>(
        &self,
        store: &ParamStore<R>,
        e: &Tensor<R>,
        feature: Option<&Tensor<R>>,
    ) -> Result<Tensor<R>> {
        contract!(
            e.len() == self.descriptor_dim,
            "descriptor has {} entries, expected {}",
            e.len(),
            self.descriptor_dim
        );
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let ev = tape.constant(e.reshape(vec![1, e.len()])?);
        let z = self.forward(&mut tape, &p, ev, feature)?;
        Ok(tape.value(z).clone())
    }
}
