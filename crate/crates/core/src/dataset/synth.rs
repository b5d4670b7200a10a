use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Manifest, MultiYearParcel, PixelSetSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seasonal green-up / senescence curve:
/// `base + amplitude · (σ((d − start)/rise) − σ((d − end)/fall))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleLogistic {
    pub base: f64,
    pub amplitude: f64,
    pub start_day: f64,
    pub end_day: f64,
    pub rise_slope: f64,
    pub fall_slope: f64,
}

impl DoubleLogistic {
    pub fn value(&self, day: f64) -> f64 {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        self.base
            + self.amplitude
                * (sig((day - self.start_day) / self.rise_slope)
                    - sig((day - self.end_day) / self.fall_slope))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassCategory {
    Permanent,
    Structured,
    Other,
}

/// First-order Markov rotation rules.
///
/// Permanent classes stay put with probability `permanent_stay`; classes on
/// a cycle move to their successor with probability `cycle_follow`; the
/// remaining mass, and every row of the other classes, is spread uniformly
/// over all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationKernel {
    /// Year-1 class distribution.
    pub initial: Vec<f64>,
    pub permanent: Vec<usize>,
    pub permanent_stay: f64,
    pub cycles: Vec<Vec<usize>>,
    pub cycle_follow: f64,
}

impl RotationKernel {
    pub fn category(&self, class: usize) -> ClassCategory {
        if self.permanent.contains(&class) {
            ClassCategory::Permanent
        } else if self.cycles.iter().any(|c| c.contains(&class)) {
            ClassCategory::Structured
        } else {
            ClassCategory::Other
        }
    }

    fn successor(&self, class: usize) -> Option<usize> {
        self.cycles.iter().find_map(|c| {
            c.iter()
                .position(|&k| k == class)
                .map(|i| c[(i + 1) % c.len()])
        })
    }

    /// Row-stochastic `L × L` transition matrix.
    pub fn transition_matrix(&self, classes: usize) -> Vec<Vec<f64>> {
        let uniform = 1.0 / classes as f64;
        (0..classes)
            .map(|a| {
                let (target, p) = if self.permanent.contains(&a) {
                    (Some(a), self.permanent_stay)
                } else if let Some(next) = self.successor(a) {
                    (Some(next), self.cycle_follow)
                } else {
                    (None, 0.0)
                };
                let mut row = vec![(1.0 - p) * uniform; classes];
                if let Some(t) = target {
                    row[t] += p;
                }
                row
            })
            .collect()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let prob = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if self.initial.len() != classes || !self.initial.iter().all(|&p| prob(p)) {
            return Err(Error::Config(format!(
                "initial distribution must hold {classes} probabilities"
            )));
        }
        let total: f64 = self.initial.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "initial distribution sums to {total}, not 1"
            )));
        }
        if !prob(self.permanent_stay) || !prob(self.cycle_follow) {
            return Err(Error::Config(
                "permanent_stay and cycle_follow must lie in [0, 1]".into(),
            ));
        }
        let mut used = vec![false; classes];
        for &k in self.permanent.iter().chain(self.cycles.iter().flatten()) {
            if k >= classes {
                return Err(Error::Config(format!("class {k} out of range")));
            }
            if used[k] {
                return Err(Error::Config(format!(
                    "class {k} appears in more than one rotation rule"
                )));
            }
            used[k] = true;
        }
        if self.cycles.iter().any(|c| c.len() < 2) {
            return Err(Error::Config("rotation cycles need at least two classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub years: usize,
    pub channels: usize,
    /// Number of acquisitions per year.
    pub dates_per_year: Vec<usize>,
    pub parcels: usize,
    /// Inclusive range of pixels per parcel.
    pub min_pixels: usize,
    pub max_pixels: usize,
    /// Side of the square region holding parcel centroids, in meters.
    pub extent_m: f64,
    /// `classes × channels` curves.
    pub phenology: Vec<Vec<DoubleLogistic>>,
    /// Std of the per-year, per-channel additive offset.
    pub year_shift: f64,
    /// Std of the per-year phenology timing shift, in days.
    pub year_day_shift: f64,
    /// Std of the per-parcel-year timing jitter, in days.
    pub parcel_day_jitter: f64,
    /// Std of the per-parcel-year, per-channel additive offset.
    pub parcel_noise_std: f64,
    pub pixel_noise_std: f64,
    pub rotation: RotationKernel,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.years == 0 || self.years > u8::MAX as usize {
            return Err(Error::Config("years must lie in 1..=255".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if self.dates_per_year.len() != self.years {
            return Err(Error::Config(format!(
                "dates_per_year has {} entries for {} years",
                self.dates_per_year.len(),
                self.years
            )));
        }
        if self.dates_per_year.iter().any(|&t| !(4..=366).contains(&t)) {
            return Err(Error::Config("each year needs between 4 and 366 dates".into()));
        }
        if self.min_pixels == 0 || self.min_pixels > self.max_pixels {
            return Err(Error::Config("pixel range must satisfy 1 <= min <= max".into()));
        }
        if self.phenology.len() != self.classes
            || self.phenology.iter().any(|c| c.len() != self.channels)
        {
            return Err(Error::Config("phenology must be classes x channels".into()));
        }
        let nonneg = [
            self.year_shift,
            self.year_day_shift,
            self.parcel_day_jitter,
            self.parcel_noise_std,
            self.pixel_noise_std,
            self.extent_m,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("noise scales and extent must be non-negative".into()));
        }
        self.rotation.validate(self.classes)
    }

    /// Random curves where classes come in spectral twins `(2m, 2m + 1)`
    /// whose green-up dates differ by `twin_gap` days.
    pub fn twin_phenology(
        classes: usize,
        channels: usize,
        twin_gap: f64,
        seed: u64,
    ) -> Vec<Vec<DoubleLogistic>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(classes);
        let mut template: Vec<DoubleLogistic> = Vec::new();
        for k in 0..classes {
            if k % 2 == 0 {
                let group = (k / 2) as f64;
                let groups = classes.div_ceil(2) as f64;
                // spread the twin groups over the season
                let start = 60.0 + 150.0 * group / groups.max(1.0) + rng.gen_range(-10.0..10.0);
                let length = rng.gen_range(70.0..130.0);
                template = (0..channels)
                    .map(|_| DoubleLogistic {
                        base: rng.gen_range(0.05..0.3),
                        amplitude: rng.gen_range(-0.2..0.6),
                        start_day: start,
                        end_day: start + length,
                        rise_slope: rng.gen_range(6.0..14.0),
                        fall_slope: rng.gen_range(6.0..14.0),
                    })
                    .collect();
                out.push(template.clone());
            } else {
                out.push(
                    template
                        .iter()
                        .map(|c| DoubleLogistic {
                            start_day: c.start_day + twin_gap,
                            end_day: c.end_day + twin_gap,
                            ..c.clone()
                        })
                        .collect(),
                );
            }
        }
        out
    }

    /// Small configuration with permanent, structured and unstructured
    /// classes arranged as spectral twins, plus per-year covariate shift.
    /// Classes `0,1` are permanent, `2,3` alternate, and `4..8` rotate
    /// uniformly.
    pub fn desk(parcels: usize, seed: u64) -> Self {
        let classes = 8;
        let channels = 4;
        SyntheticConfig {
            classes,
            years: 3,
            channels,
            dates_per_year: vec![12, 9, 10],
            parcels,
            min_pixels: 8,
            max_pixels: 32,
            extent_m: 20_000.0,
            phenology: Self::twin_phenology(classes, channels, 12.0, seed ^ 0x5eed),
            year_shift: 0.08,
            year_day_shift: 14.0,
            parcel_day_jitter: 6.0,
            parcel_noise_std: 0.03,
            pixel_noise_std: 0.05,
            rotation: RotationKernel {
                initial: vec![1.0 / classes as f64; classes],
                permanent: vec![0, 1],
                permanent_stay: 0.97,
                cycles: vec![vec![2, 3]],
                cycle_follow: 0.9,
            },
            seed,
        }
    }

    /// Dimensions of the reference dataset: 20 classes, 10 spectral bands,
    /// three years with 36, 27 and 29 acquisitions.
    pub fn reference_shaped(parcels: usize, seed: u64) -> Self {
        let classes = 20;
        let channels = 10;
        SyntheticConfig {
            classes,
            years: 3,
            channels,
            dates_per_year: vec![36, 27, 29],
            parcels,
            min_pixels: 8,
            max_pixels: 64,
            extent_m: 110_000.0,
            phenology: Self::twin_phenology(classes, channels, 10.0, seed ^ 0x5eed),
            year_shift: 0.05,
            year_day_shift: 10.0,
            parcel_day_jitter: 5.0,
            parcel_noise_std: 0.03,
            pixel_noise_std: 0.05,
            rotation: RotationKernel {
                initial: vec![1.0 / classes as f64; classes],
                permanent: vec![0, 1, 2],
                permanent_stay: 0.96,
                cycles: vec![vec![3, 4, 5], vec![6, 7, 8, 9]],
                cycle_follow: 0.85,
            },
            seed,
        }
    }
}

/// Generates `config.parcels` parcels, fully determined by `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |std: f64| Normal::new(0.0, std).expect("validated non-negative std");

    // Acquisition calendars and weather shifts are shared by all parcels of a year.
    let calendars: Vec<Vec<u16>> = config
        .dates_per_year
        .iter()
        .map(|&t| {
            let slot = 366.0 / t as f64;
            (0..t)
                .map(|j| {
                    let lo = (j as f64 * slot).floor();
                    let width = slot.floor().max(1.0);
                    (lo + rng.gen_range(0.0..width)).floor() as u16 + 1
                })
                .collect()
        })
        .collect();
    let year_offsets: Vec<Vec<f64>> = (0..config.years)
        .map(|_| {
            (0..config.channels)
                .map(|_| normal(config.year_shift).sample(&mut rng))
                .collect()
        })
        .collect();
    let year_day_shifts: Vec<f64> = (0..config.years)
        .map(|_| normal(config.year_day_shift).sample(&mut rng))
        .collect();

    let transitions: Vec<WeightedIndex<f64>> = config
        .rotation
        .transition_matrix(config.classes)
        .into_iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let initial = WeightedIndex::new(&config.rotation.initial)
        .map_err(|e| Error::Config(e.to_string()))?;

    let pixel_noise = normal(config.pixel_noise_std);
    let parcel_noise = normal(config.parcel_noise_std);
    let day_jitter = normal(config.parcel_day_jitter);

    let mut parcels = Vec::with_capacity(config.parcels);
    for p in 0..config.parcels {
        let parcel_id = p as u64 + 1;
        let centroid = (
            rng.gen_range(0.0..config.extent_m.max(f64::MIN_POSITIVE)),
            rng.gen_range(0.0..config.extent_m.max(f64::MIN_POSITIVE)),
        );
        let n_pixels = rng.gen_range(config.min_pixels..=config.max_pixels);
        let mut label = initial.sample(&mut rng);
        let mut years = Vec::with_capacity(config.years);
        for y in 0..config.years {
            if y > 0 {
                label = transitions[label].sample(&mut rng);
            }
            let days = &calendars[y];
            let t = days.len();
            let jitter = day_jitter.sample(&mut rng);
            let mut data = Vec::with_capacity(config.channels * n_pixels * t);
            for c in 0..config.channels {
                let curve = &config.phenology[label][c];
                let offset = year_offsets[y][c] + parcel_noise.sample(&mut rng);
                let clean: Vec<f64> = days
                    .iter()
                    .map(|&d| curve.value(d as f64 - year_day_shifts[y] - jitter) + offset)
                    .collect();
                for _ in 0..n_pixels {
                    data.extend(clean.iter().map(|v| (v + pixel_noise.sample(&mut rng)) as f32));
                }
            }
            let pixels = Tensor::new(vec![config.channels, n_pixels, t], data)?;
            years.push(PixelSetSample::new(parcel_id, y + 1, pixels, days.clone(), label)?);
        }
        parcels.push(MultiYearParcel {
            parcel_id,
            centroid,
            years,
        });
    }

    let manifest = Manifest {
        class_names: (0..config.classes)
            .map(|k| format!("{:?}-{k}", config.rotation.category(k)).to_lowercase())
            .collect(),
        year_labels: (1..=config.years).map(|y| format!("year-{y}")).collect(),
        generator: Some(config.clone()),
    };
    Dataset::new(config.years, config.channels, config.classes, parcels, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(parcels: usize, seed: u64) -> SyntheticConfig {
        let mut c = SyntheticConfig::desk(parcels, seed);
        c.min_pixels = 2;
        c.max_pixels = 4;
        c
    }

    #[test]
    fn permanent_only_keeps_labels() {
        let mut c = small(100, 3);
        c.rotation.permanent = (0..c.classes).collect();
        c.rotation.cycles.clear();
        c.rotation.permanent_stay = 1.0;
        let ds = generate_synthetic(&c).unwrap();
        for p in &ds.parcels {
            let l = p.labels();
            assert!(l.iter().all(|&x| x == l[0]));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic(&small(30, 9)).unwrap();
        let b = generate_synthetic(&small(30, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(30, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn twenty_classes_bounded_rotations() {
        let c = SyntheticConfig {
            min_pixels: 1,
            max_pixels: 2,
            ..SyntheticConfig::reference_shaped(3000, 4)
        };
        let ds = generate_synthetic(&c).unwrap();
        let distinct: std::collections::HashSet<Vec<usize>> =
            ds.label_sequences().into_iter().collect();
        assert!(distinct.len() <= 8000);
        assert_eq!(ds.parcels[0].years[0].dates(), 36);
        assert_eq!(ds.parcels[0].years[1].dates(), 27);
        assert_eq!(ds.parcels[0].years[2].dates(), 29);
        assert_eq!(ds.channels, 10);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut c = small(10, 1);
        c.rotation.permanent_stay = 1.5;
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
        let mut c = small(10, 1);
        c.rotation.initial[0] += 0.5;
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
        let mut c = small(10, 1);
        c.dates_per_year[0] = 3;
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
    }

    #[test]
    fn transition_rows_normalized() {
        let c = SyntheticConfig::desk(1, 0);
        for row in c.rotation.transition_matrix(c.classes) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calendars_valid() {
        let ds = generate_synthetic(&small(5, 2)).unwrap();
        for s in &ds.parcels[0].years {
            assert!(s.days.windows(2).all(|w| w[0] < w[1]));
            assert!(s.days.iter().all(|&d| (1..=366).contains(&d)));
        }
    }

    /// Pearson chi-square of year-1 → year-2 transitions against the kernel.
    /// The critical value uses the Wilson–Hilferty approximation at α = 0.01.
    #[test]
    fn rotation_frequencies_match_kernel() {
        let mut c = small(12_000, 21);
        c.min_pixels = 1;
        c.max_pixels = 1;
        c.dates_per_year = vec![4, 4, 4];
        let ds = generate_synthetic(&c).unwrap();
        let kernel = c.rotation.transition_matrix(c.classes);
        let mut counts = vec![vec![0f64; c.classes]; c.classes];
        for seq in ds.label_sequences() {
            counts[seq[0]][seq[1]] += 1.0;
            counts[seq[1]][seq[2]] += 1.0;
        }
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for (a, row) in counts.iter().enumerate() {
            let n: f64 = row.iter().sum();
            for (b, &obs) in row.iter().enumerate() {
                let exp = n * kernel[a][b];
                chi2 += (obs - exp).powi(2) / exp;
            }
            dof += c.classes - 1;
        }
        let k = dof as f64;
        let z = 2.326_347_874; // upper 1% normal quantile
        let critical = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < critical, "chi2 {chi2} >= critical {critical} (dof {dof})");
    }
}
