//! Evaluation metrics and crop-rotation statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassCategory, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::eval_draw_seed;

/// Coverage levels reported by [`rotation_table`], in percent.
pub const COVERAGE_LEVELS: [f64; 4] = [50.0, 75.0, 90.0, 100.0];

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new(classes);
        for (truth, pred) in pairs {
            cm.add(truth, pred)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Contract(format!(
                "pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth count per class.
    pub fn supports(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
        let mut out = String::from("truth");
        for p in 0..self.classes {
            let _ = write!(out, ",{}", name(p));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&name(t));
            for p in 0..self.classes {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// `None` for classes absent from both truth and prediction.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// OA, per-class IoU and mIoU. mIoU averages over classes that occur in the
/// ground truth or the predictions.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let l = cm.classes;
    let trace: u64 = (0..l).map(|k| cm.get(k, k)).sum();
    let iou: Vec<Option<f64>> = (0..l)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..l).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let fp: u64 = (0..l).filter(|&t| t != k).map(|t| cm.get(t, k)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    Ok(Metrics {
        overall_accuracy: trace as f64 / total as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        iou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassImprovement {
    pub class: usize,
    pub iou: Option<f64>,
    pub baseline_iou: Option<f64>,
    /// `IoU − baseline IoU`.
    pub delta: Option<f64>,
    /// `delta / (1 − baseline IoU)`; `None` when the baseline is perfect.
    pub ratio: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassImprovement>,
}

impl ClassReport {
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class,name,support,iou,baseline_iou,delta,ratio\n");
        for c in &self.classes {
            let name = class_names.get(c.class).cloned().unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.class,
                name,
                c.support,
                fmt(c.iou),
                fmt(c.baseline_iou),
                fmt(c.delta),
                fmt(c.ratio)
            );
        }
        out
    }
}

/// Per-class gain of `model` over `baseline` (the single-year head).
pub fn improvement(model: &Metrics, baseline: &Metrics, support: &[u64]) -> Result<ClassReport> {
    if model.iou.len() != baseline.iou.len() || support.len() != model.iou.len() {
        return Err(Error::Contract("reports cover different class sets".into()));
    }
    let classes = (0..model.iou.len())
        .map(|k| {
            let (iou, base) = (model.iou[k], baseline.iou[k]);
            let delta = iou.zip(base).map(|(a, b)| a - b);
            let ratio = delta
                .zip(base)
                .and_then(|(d, b)| (b < 1.0).then(|| d / (1.0 - b)));
            ClassImprovement {
                class: k,
                iou,
                baseline_iou: base,
                delta,
                ratio,
                support: support[k],
            }
        })
        .collect();
    Ok(ClassReport { classes })
}

/// Number of distinct `years`-long rotations over `classes` crops.
pub fn possible_rotations(classes: usize, years: usize) -> u128 {
    (classes as u128).pow(years as u32)
}

pub fn count_observed_rotations(labels: &[Vec<usize>]) -> usize {
    labels.iter().collect::<std::collections::HashSet<_>>().len()
}

/// Distinct rotations starting with `class`, most frequent first, ties in
/// lexicographic order.
fn ranked_rotations(labels: &[Vec<usize>], class: usize) -> (Vec<(Vec<usize>, usize)>, usize) {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    let mut n = 0;
    for seq in labels.iter().filter(|s| s.first() == Some(&class)) {
        *counts.entry(seq.as_slice()).or_default() += 1;
        n += 1;
    }
    let mut ranked: Vec<(Vec<usize>, usize)> = counts.into_iter().map(|(k, c)| (k.to_vec(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    (ranked, n)
}

/// Smallest number of distinct rotations, among parcels whose first-year
/// label is `class`, whose cumulative share reaches `p` percent. `None`
/// when the class never appears in the first year.
pub fn rotation_coverage(labels: &[Vec<usize>], class: usize, p: f64) -> Result<Option<usize>> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Contract(format!("coverage level {p} outside (0, 100]")));
    }
    let (ranked, n) = ranked_rotations(labels, class);
    if n == 0 {
        return Ok(None);
    }
    // covered / n >= p / 100, with slack for p given in decimal
    let mut covered = 0usize;
    for (i, (_, c)) in ranked.iter().enumerate() {
        covered += c;
        if covered as f64 * 100.0 >= p * n as f64 - 1e-9 * n as f64 {
            return Ok(Some(i + 1));
        }
    }
    Ok(Some(ranked.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRow {
    pub class: usize,
    pub counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationTable {
    pub rows: Vec<RotationRow>,
    /// Mean over observed classes at each coverage level.
    pub mean: [f64; 4],
    pub observed_rotations: usize,
    pub possible_rotations: u128,
}

impl RotationTable {
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,50,75,90,100\n");
        for r in &self.rows {
            let name = class_names.get(r.class).cloned().unwrap_or_else(|| r.class.to_string());
            let _ = writeln!(out, "{name},{},{},{},{}", r.counts[0], r.counts[1], r.counts[2], r.counts[3]);
        }
        let _ = writeln!(
            out,
            "mean,{:.2},{:.2},{:.2},{:.2}",
            self.mean[0], self.mean[1], self.mean[2], self.mean[3]
        );
        out
    }
}

pub fn rotation_table(labels: &[Vec<usize>], classes: usize) -> Result<RotationTable> {
    let mut rows = Vec::new();
    for k in 0..classes {
        let mut counts = [0usize; 4];
        let mut observed = true;
        for (slot, &p) in COVERAGE_LEVELS.iter().enumerate() {
            match rotation_coverage(labels, k, p)? {
                Some(c) => counts[slot] = c,
                None => observed = false,
            }
        }
        if observed {
            rows.push(RotationRow { class: k, counts });
        }
    }
    let mut mean = [0.0; 4];
    if !rows.is_empty() {
        for (slot, m) in mean.iter_mut().enumerate() {
            *m = rows.iter().map(|r| r.counts[slot] as f64).sum::<f64>() / rows.len() as f64;
        }
    }
    let years = labels.first().map_or(0, |s| s.len());
    Ok(RotationTable {
        rows,
        mean,
        observed_rotations: count_observed_rotations(labels),
        possible_rotations: possible_rotations(classes, years),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub categories: BTreeMap<usize, ClassCategory>,
}

impl CategoryAssignment {
    pub fn of(&self, class: usize) -> Option<ClassCategory> {
        self.categories.get(&class).copied()
    }
}

/// Permanent: at least 90% of the successions starting with the class are
/// constant. Structured: not permanent, and at most 10 rotations cover 75%
/// of them. Classes seen only after the first year fall into Other.
pub fn categorize(labels: &[Vec<usize>], classes: usize) -> Result<CategoryAssignment> {
    let mut categories = BTreeMap::new();
    for k in 0..classes {
        let (ranked, n) = ranked_rotations(labels, k);
        if n == 0 {
            if labels.iter().any(|s| s.contains(&k)) {
                categories.insert(k, ClassCategory::Other);
            }
            continue;
        }
        let constant: usize = ranked
            .iter()
            .filter(|(r, _)| r.iter().all(|&x| x == k))
            .map(|(_, c)| c)
            .sum();
        let category = if constant as f64 >= 0.9 * n as f64 {
            ClassCategory::Permanent
        } else if rotation_coverage(labels, k, 75.0)?.is_some_and(|c| c <= 10) {
            ClassCategory::Structured
        } else {
            ClassCategory::Other
        };
        categories.insert(k, category);
    }
    Ok(CategoryAssignment { categories })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub classes: Vec<usize>,
    /// Unweighted mean IoU of the member classes.
    pub miou: f64,
    pub mean_delta: f64,
}

/// Averages a class report within each category. Classes without an IoU or
/// delta are skipped.
pub fn group_metrics(
    report: &ClassReport,
    assignment: &CategoryAssignment,
) -> BTreeMap<ClassCategory, GroupSummary> {
    let mut groups: BTreeMap<ClassCategory, Vec<&ClassImprovement>> = BTreeMap::new();
    for c in &report.classes {
        if let (Some(cat), Some(_), Some(_)) = (assignment.of(c.class), c.iou, c.delta) {
            groups.entry(cat).or_default().push(c);
        }
    }
    groups
        .into_iter()
        .map(|(cat, members)| {
            let n = members.len() as f64;
            let summary = GroupSummary {
                classes: members.iter().map(|c| c.class).collect(),
                miou: members.iter().filter_map(|c| c.iou).sum::<f64>() / n,
                mean_delta: members.iter().filter_map(|c| c.delta).sum::<f64>() / n,
            };
            (cat, summary)
        })
        .collect()
}

/// Writes one CSV row `parcel_id,year,label,e0,…` per parcel-year, using
/// the evaluation pixel draw of `seed`. Returns the number of rows.
pub fn export_embeddings(
    model: &Model<f32>,
    dataset: &Dataset,
    parcels: &[usize],
    seed: u64,
    mut out: impl io::Write,
) -> Result<usize> {
    let io_err = |e: io::Error| Error::io("embedding output", e);
    let mut header = String::from("parcel_id,year,label");
    for i in 0..model.arch.encoder.descriptor_dim {
        let _ = write!(header, ",e{i}");
    }
    writeln!(out, "{header}").map_err(io_err)?;
    let mut rows = 0;
    for &i in parcels {
        let parcel = dataset
            .parcels
            .get(i)
            .ok_or_else(|| Error::Contract(format!("parcel index {i} out of range")))?;
        for sample in &parcel.years {
            let d = model.descriptor(sample, eval_draw_seed(seed, parcel.parcel_id, sample.year_index))?;
            let mut line = format!("{},{},{}", parcel.parcel_id, sample.year_index, sample.label);
            for v in d.e.data() {
                let _ = write!(line, ",{v}");
            }
            writeln!(out, "{line}").map_err(io_err)?;
            rows += 1;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
        assert!((0..3).all(|t| (0..3).all(|p| t == p || cm.get(t, p) == 0)));
        let m = metrics(&cm).unwrap();
        assert_eq!((m.overall_accuracy, m.miou), (1.0, 1.0));
        assert_eq!(cm.supports(), vec![1, 1, 2]);
    }

    #[test]
    fn single_off_diagonal() {
        let cm = ConfusionMatrix::from_pairs(6, [(2, 5)]).unwrap();
        assert_eq!(cm.get(2, 5), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn hand_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![5, 5, 0, 10];
        let m = metrics(&cm).unwrap();
        assert_eq!(m.overall_accuracy, 0.75);
        assert_eq!(m.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_error() {
        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn absent_class_excluded() {
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1)]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.iou[2], None);
        assert_eq!(m.miou, 1.0);
    }

    /// IoU from explicit index sets.
    #[test]
    fn matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(1..200);
            let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(0..6), rng.gen_range(0..6))).collect();
            let m = metrics(&ConfusionMatrix::from_pairs(6, pairs.iter().copied()).unwrap()).unwrap();
            let mut ious = Vec::new();
            for k in 0..6 {
                let truth: std::collections::BTreeSet<usize> = (0..n).filter(|&i| pairs[i].0 == k).collect();
                let pred: std::collections::BTreeSet<usize> = (0..n).filter(|&i| pairs[i].1 == k).collect();
                let union = truth.union(&pred).count();
                let inter = truth.intersection(&pred).count();
                let iou = (union > 0).then(|| inter as f64 / union as f64);
                assert_eq!(m.iou[k], iou);
                ious.extend(iou);
            }
            assert_eq!(m.miou, ious.iter().sum::<f64>() / ious.len() as f64);
        }
    }

    fn report(single: &[f64], dec: &[f64]) -> ClassReport {
        let wrap = |v: &[f64]| Metrics {
            overall_accuracy: 0.0,
            iou: v.iter().map(|&x| Some(x)).collect(),
            miou: 0.0,
        };
        improvement(&wrap(dec), &wrap(single), &vec![1; single.len()]).unwrap()
    }

    #[test]
    fn improvement_cases() {
        let r = report(&[0.3, 0.8], &[0.3, 0.8]);
        assert!(r.classes.iter().all(|c| c.delta == Some(0.0)));
        let r = report(&[0.687], &[0.75]);
        assert!((r.classes[0].delta.unwrap() - 0.063).abs() < 1e-12);
        let r = report(&[0.5], &[0.75]);
        assert_eq!(r.classes[0].ratio, Some(0.5));
        let r = report(&[1.0], &[1.0]);
        assert_eq!(r.classes[0].ratio, None);
    }

    #[test]
    fn embedding_export() {
        use crate::dataset::{generate_synthetic, SyntheticConfig};
        use crate::encoders::EncoderDims;
        use crate::heads::HeadVariant;
        use crate::model::Architecture;
        let mut cfg = SyntheticConfig::desk(10, 1);
        cfg.max_pixels = 12;
        let ds = generate_synthetic(&cfg).unwrap();
        let dims = EncoderDims {
            channels: ds.channels,
            sample_size: 4,
            ..EncoderDims::default()
        };
        let model = Model::<f32>::new(Architecture::new(dims, ds.classes, HeadVariant::Single), 2).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let mut a = Vec::new();
        assert_eq!(export_embeddings(&model, &ds, &all, 3, &mut a).unwrap(), 30);
        let text = String::from_utf8(a.clone()).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 3 + 128);
        assert_eq!((header[3], header[130]), ("e0", "e127"));
        assert_eq!(text.lines().count(), 31);
        let mut b = Vec::new();
        export_embeddings(&model, &ds, &all, 3, &mut b).unwrap();
        assert_eq!(a, b);
    }

    fn seqs(spec: &[(usize, [usize; 3])]) -> Vec<Vec<usize>> {
        spec.iter()
            .flat_map(|(n, s)| std::iter::repeat(s.to_vec()).take(*n))
            .collect()
    }

    #[test]
    fn coverage_hand_case() {
        let k = 0;
        let labels = seqs(&[(6, [k, 1, 1]), (3, [k, 2, 2]), (1, [k, 3, 3])]);
        assert_eq!(rotation_coverage(&labels, k, 50.0).unwrap(), Some(1));
        assert_eq!(rotation_coverage(&labels, k, 90.0).unwrap(), Some(2));
        assert_eq!(rotation_coverage(&labels, k, 100.0).unwrap(), Some(3));
        assert_eq!(rotation_coverage(&labels, 5, 50.0).unwrap(), None);
        assert!(rotation_coverage(&labels, k, 0.0).is_err());
    }

    #[test]
    fn permanent_class_always_one() {
        let labels = seqs(&[(7, [4, 4, 4]), (5, [1, 2, 3])]);
        for p in COVERAGE_LEVELS {
            assert_eq!(rotation_coverage(&labels, 4, p).unwrap(), Some(1));
        }
    }

    #[test]
    fn possible_rotation_count() {
        assert_eq!(possible_rotations(20, 3), 8000);
        let labels = seqs(&[(9, [1, 1, 2])]);
        assert_eq!(count_observed_rotations(&labels), 1);
    }

    #[test]
    fn categorize_cases() {
        // class 0: 95% constant; class 1: 80% over 2 rotations, 10% constant;
        // class 2: 40 distinct rotations, uniform.
        let mut labels = seqs(&[(95, [0, 0, 0]), (5, [0, 1, 2])]);
        labels.extend(seqs(&[(50, [1, 2, 3]), (30, [1, 3, 2]), (10, [1, 1, 1])]));
        for i in 0..10 {
            labels.push(vec![1, 4 + i % 5, 4 + i / 5]);
        }
        for a in 0..8 {
            for b in 0..5 {
                labels.push(vec![2, a, b]);
            }
        }
        let c = categorize(&labels, 6).unwrap();
        assert_eq!(c.of(0), Some(ClassCategory::Permanent));
        assert_eq!(c.of(1), Some(ClassCategory::Structured));
        assert_eq!(c.of(2), Some(ClassCategory::Other));
        // seen only after year 1
        assert_eq!(c.of(4), Some(ClassCategory::Other));
    }

    #[test]
    fn group_means() {
        let r = report(&[0.5, 0.6, 0.2], &[0.9, 0.8, 0.3]);
        let mut a = CategoryAssignment { categories: BTreeMap::new() };
        a.categories.insert(0, ClassCategory::Permanent);
        a.categories.insert(1, ClassCategory::Permanent);
        a.categories.insert(2, ClassCategory::Other);
        let g = group_metrics(&r, &a);
        let perm = &g[&ClassCategory::Permanent];
        assert!((perm.miou - 0.85).abs() < 1e-12);
        assert!((perm.mean_delta - 0.3).abs() < 1e-12);
        assert_eq!(g[&ClassCategory::Other].miou, 0.3);
    }

    /// Enumerates every prefix of every ordering consistent with the ranking
    /// rule and checks the minimum directly.
    fn coverage_oracle(labels: &[Vec<usize>], k: usize, p: f64) -> Option<usize> {
        let starting: Vec<&Vec<usize>> = labels.iter().filter(|s| s[0] == k).collect();
        if starting.is_empty() {
            return None;
        }
        let mut distinct: Vec<&Vec<usize>> = starting.clone();
        distinct.sort();
        distinct.dedup();
        let n = starting.len();
        // any set of m rotations covering p% witnesses coverage <= m
        for m in 1..=distinct.len() {
            let mut best = 0;
            // the best m-subset is the m most frequent ones
            let mut freq: Vec<usize> = distinct
                .iter()
                .map(|r| starting.iter().filter(|s| s == &r).count())
                .collect();
            freq.sort_unstable_by(|a, b| b.cmp(a));
            best += freq[..m].iter().sum::<usize>();
            if best as f64 / n as f64 >= p / 100.0 - 1e-12 {
                return Some(m);
            }
        }
        Some(distinct.len())
    }

    proptest::proptest! {
        #[test]
        fn coverage_monotone_and_matches_oracle(
            raw in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 1..200)
        ) {
            let labels: Vec<Vec<usize>> = raw.iter().map(|&(a, b, c)| vec![a, b, c]).collect();
            for k in 0..3 {
                let mut last = 0;
                for p in [10.0, 50.0, 75.0, 90.0, 100.0] {
                    let got = rotation_coverage(&labels, k, p).unwrap();
                    proptest::prop_assert_eq!(got, coverage_oracle(&labels, k, p));
                    if let Some(c) = got {
                        proptest::prop_assert!(c >= last && c >= 1);
                        last = c;
                    }
                }
            }
        }
    }
}
