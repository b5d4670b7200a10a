//! Subcommand implementations. Each writes its artifacts into an output
//! directory and returns a short summary.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use croprot_core::analytics::{
    categorize, export_embeddings, metrics, rotation_table, CategoryAssignment, Metrics, RotationTable,
};
use croprot_core::calibration::{fit_temperature, nll, reliability, TemperatureScaler};
use croprot_core::crf::{estimate_transitions, rescore, triplets_from};
use croprot_core::dataset::{load_dataset, make_folds, save_dataset, Dataset, FoldAssignment};
use croprot_core::heads::HeadVariant;
use croprot_core::model::{load_checkpoint, save_checkpoint};
use croprot_core::training::{
    confusion, predict, split_for_fold, train, EpochLog, PredictionRecord, Protocol, YearFilter,
};
use croprot_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, RunConfig};

pub const DATASET_FILE: &str = "dataset.rcds";
pub const FOLDS_FILE: &str = "folds.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const CALIBRATED_FILE: &str = "calibrated_predictions.json";

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))
}

/// File name only, so reports never carry machine-specific paths.
fn portable(path: &Path) -> String {
    if path.is_absolute() {
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        path.display().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Validation,
    Test,
}

/// A prediction with the fold run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub split: SplitRole,
    #[serde(flatten)]
    pub record: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub variant: HeadVariant,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Fold count of the assignment used in training.
    pub k: usize,
    pub rows: Vec<PredictionRow>,
}

impl PredictionsFile {
    pub fn records(&self, fold: Option<usize>, split: SplitRole) -> Vec<PredictionRecord> {
        self.rows
            .iter()
            .filter(|r| r.split == split && fold.map_or(true, |f| r.fold == f))
            .map(|r| r.record.clone())
            .collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.rows.iter().map(|r| r.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,split,parcel_id,year,label,predicted");
        for k in 0..self.classes {
            let _ = write!(out, ",z{k}");
        }
        let calibrated = self.rows.iter().any(|r| r.record.posterior.is_some());
        if calibrated {
            for k in 0..self.classes {
                let _ = write!(out, ",p{k}");
            }
        }
        out.push('\n');
        for row in &self.rows {
            let r = &row.record;
            let split = match row.split {
                SplitRole::Validation => "validation",
                SplitRole::Test => "test",
            };
            let _ = write!(
                out,
                "{},{split},{},{},{},{}",
                row.fold,
                r.parcel_id,
                r.year_index,
                r.label,
                r.predicted()
            );
            for z in &r.logits {
                let _ = write!(out, ",{z}");
            }
            if calibrated {
                for p in r.posterior.iter().flatten() {
                    let _ = write!(out, ",{p}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub records: usize,
    pub overall_accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearScores {
    pub pooled: Option<Score>,
    pub years: BTreeMap<usize, Score>,
}

fn score(records: &[PredictionRecord], classes: usize) -> Result<Option<(Score, Metrics)>> {
    if records.is_empty() {
        return Ok(None);
    }
    let m = metrics(&confusion(records, classes)?)?;
    Ok(Some((
        Score {
            records: records.len(),
            overall_accuracy: m.overall_accuracy,
            miou: m.miou,
        },
        m,
    )))
}

fn year_scores(records: &[PredictionRecord], classes: usize) -> Result<YearScores> {
    let mut years = BTreeMap::new();
    let mut all_years: Vec<usize> = records.iter().map(|r| r.year_index).collect();
    all_years.sort_unstable();
    all_years.dedup();
    for y in all_years {
        let subset: Vec<PredictionRecord> = records.iter().filter(|r| r.year_index == y).cloned().collect();
        if let Some((s, _)) = score(&subset, classes)? {
            years.insert(y, s);
        }
    }
    Ok(YearScores {
        pooled: score(records, classes)?.map(|(s, _)| s),
        years,
    })
}

/// `synth`: writes `dataset.rcds` and its manifest.
pub fn cmd_synth(config: &RunConfig, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let syn = config.synthetic(seed)?;
    let ds = croprot_core::dataset::generate_synthetic(&syn)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(DATASET_FILE);
    save_dataset(&path, &ds)?;
    Ok(path)
}

/// `split`: writes `folds.json`.
pub fn cmd_split(dataset: &Path, k: usize, block_size: f64, seed: u64, out: &Path) -> Result<PathBuf> {
    let ds = load_dataset(dataset)?;
    let folds = make_folds(&ds.parcels, k, block_size, seed)?;
    write_json(out, FOLDS_FILE, &folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_fold: usize,
    pub validation_fold: usize,
    pub checkpoint: String,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub validation: YearScores,
    pub test: YearScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub variant: HeadVariant,
    pub protocol: Protocol,
    pub parcels: usize,
    pub years: usize,
    pub classes: usize,
    pub parameters: usize,
    pub config: RunConfig,
    pub folds: Vec<FoldReport>,
    /// Test records of all folds together.
    pub test: YearScores,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub variant: Option<HeadVariant>,
}

/// `train`: cross-validated training. Writes one checkpoint per test fold,
/// the fold file, predictions (JSON and CSV), `run_report.json`, and
/// `run.log` with wall-clock timings. A generated dataset is saved too.
pub fn cmd_train(config: &RunConfig, overrides: &TrainOverrides, out: &Path) -> Result<RunReport> {
    let mut config = config.clone();
    if let Some(s) = overrides.seed {
        config.train.seed = s;
    }
    if let Some(v) = overrides.variant {
        config.model.variant = v;
    }
    config.validate()?;
    let started = Instant::now();
    let (ds, generated) = config.dataset()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if generated {
        save_dataset(out.join(DATASET_FILE), &ds)?;
    }
    let folds = match &config.folds.path {
        Some(p) => read_json::<FoldAssignment>(p)?,
        None => make_folds(&ds.parcels, config.folds.k, config.folds.block_size, config.folds.seed)?,
    };
    folds.validate()?;
    write_json(out, FOLDS_FILE, &folds)?;

    let dims = config.encoder_dims(&ds);
    let tcfg = config.train_config();
    let runs = train(&ds, &folds, &dims, &tcfg)?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut log = String::new();
    let mut parameters = 0;
    for run in &runs {
        let f = run.test_fold.expect("cross-validated run");
        let name = format!("fold{f}.rcwt");
        save_checkpoint(out.join(&name), &run.model)?;
        parameters = run.model.params.scalar_count();
        for (split, recs) in [(SplitRole::Validation, &run.validation), (SplitRole::Test, &run.test)] {
            rows.extend(recs.iter().map(|r| PredictionRow {
                fold: f,
                split,
                record: r.clone(),
            }));
        }
        reports.push(FoldReport {
            test_fold: f,
            validation_fold: (f + 1) % folds.k,
            checkpoint: name,
            best_epoch: run.best_epoch,
            history: run.history.clone(),
            validation: year_scores(&run.validation, ds.classes)?,
            test: year_scores(&run.test, ds.classes)?,
        });
    }
    let file = PredictionsFile {
        variant: tcfg.variant,
        classes: ds.classes,
        class_names: ds.manifest.class_names.clone(),
        seed: tcfg.seed,
        k: folds.k,
        rows,
    };
    write_json(out, PREDICTIONS_FILE, &file)?;
    write(out, "predictions.csv", file.to_csv())?;

    let mut echoed = config.clone();
    if let DatasetSource::Path(p) = &echoed.dataset {
        echoed.dataset = DatasetSource::Path(PathBuf::from(portable(p)));
    }
    if let Some(p) = &echoed.folds.path {
        echoed.folds.path = Some(PathBuf::from(portable(p)));
    }
    let report = RunReport {
        seed: tcfg.seed,
        variant: tcfg.variant,
        protocol: tcfg.protocol,
        parcels: ds.parcels.len(),
        years: ds.years,
        classes: ds.classes,
        parameters,
        config: echoed,
        folds: reports,
        test: year_scores(&file.records(None, SplitRole::Test), ds.classes)?,
    };
    write_json(out, "run_report.json", &report)?;
    let _ = writeln!(
        log,
        "trained {} fold(s) of {} in {:.1}s",
        runs.len(),
        tcfg.variant,
        started.elapsed().as_secs_f64()
    );
    write(out, "run.log", log)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub variant: HeadVariant,
    pub fold: Option<usize>,
    pub years: YearFilter,
    pub seed: u64,
    pub overall_accuracy: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub by_year: YearScores,
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    /// With a fold file and fold, only that fold's parcels are scored.
    pub folds: Option<(&'a Path, usize)>,
    pub years: YearFilter,
    pub expected_variant: Option<HeadVariant>,
    pub seed: u64,
}

/// `eval`: scores a checkpoint and writes `eval_report.json`,
/// `confusion.csv`, `class_iou.csv` and `eval_predictions.csv`.
pub fn cmd_eval(req: &EvalRequest, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(req.checkpoint)?;
    if let Some(v) = req.expected_variant {
        if v != model.variant() {
            return Err(Error::Contract(format!(
                "checkpoint holds a {} head, --variant asked for {v}",
                model.variant()
            )));
        }
    }
    let ds = load_dataset(req.dataset)?;
    let parcels: Vec<usize> = match req.folds {
        Some((path, fold)) => {
            let folds: FoldAssignment = read_json(path)?;
            split_for_fold(&ds, &folds, fold)?.test
        }
        None => (0..ds.parcels.len()).collect(),
    };
    let records = predict(&model, &ds, &parcels, req.years, req.seed)?;
    let (_, m) = score(&records, ds.classes)?
        .ok_or_else(|| Error::Contract("no parcel-years to evaluate".into()))?;
    let cm = confusion(&records, ds.classes)?;
    write(out, "confusion.csv", cm.to_csv(&ds.manifest.class_names))?;
    let mut iou_csv = String::from("class,name,support,iou\n");
    for (k, (iou, support)) in m.iou.iter().zip(cm.supports()).enumerate() {
        let name = ds.manifest.class_names.get(k).cloned().unwrap_or_default();
        let v = iou.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(iou_csv, "{k},{name},{support},{v}");
    }
    write(out, "class_iou.csv", iou_csv)?;
    let file = PredictionsFile {
        variant: model.variant(),
        classes: ds.classes,
        class_names: ds.manifest.class_names.clone(),
        seed: req.seed,
        k: 0,
        rows: records
            .iter()
            .map(|r| PredictionRow {
                fold: req.folds.map_or(0, |(_, f)| f),
                split: SplitRole::Test,
                record: r.clone(),
            })
            .collect(),
    };
    write(out, "eval_predictions.csv", file.to_csv())?;
    let report = EvalReport {
        checkpoint: portable(req.checkpoint),
        variant: model.variant(),
        fold: req.folds.map(|(_, f)| f),
        years: req.years,
        seed: req.seed,
        overall_accuracy: m.overall_accuracy,
        miou: m.miou,
        iou: m.iou.clone(),
        by_year: year_scores(&records, ds.classes)?,
    };
    write_json(out, "eval_report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCalibration {
    pub fold: usize,
    pub tau: f64,
    pub validation_nll_before: f64,
    pub validation_nll_after: f64,
    pub validation_ece_before: f64,
    pub validation_ece_after: f64,
    pub test_ece_before: Option<f64>,
    pub test_ece_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: usize,
    pub folds: Vec<FoldCalibration>,
}

fn ece_of(records: &[PredictionRecord], scaler: TemperatureScaler, bins: usize) -> Result<f64> {
    Ok(reliability(&scaler.calibrate(records)?, bins)?.ece())
}

/// `calibrate`: fits one temperature per fold on its validation records and
/// applies it to all of that fold's records. Writes
/// `calibrated_predictions.json`, `calibration.json` and reliability tables
/// of the pooled test records before and after scaling.
pub fn cmd_calibrate(predictions: &Path, bins: usize, out: &Path) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut file: PredictionsFile = read_json(predictions)?;
    let identity = TemperatureScaler { tau: 1.0 };
    let mut folds = Vec::new();
    let mut scalers = HashMap::new();
    for f in file.folds() {
        let val = file.records(Some(f), SplitRole::Validation);
        let test = file.records(Some(f), SplitRole::Test);
        if val.is_empty() {
            return Err(Error::Contract(format!("fold {f} has no validation records to calibrate on")));
        }
        let scaler = fit_temperature(&val)?;
        scalers.insert(f, scaler);
        let test_ece = |s| (!test.is_empty()).then(|| ece_of(&test, s, bins)).transpose();
        folds.push(FoldCalibration {
            fold: f,
            tau: scaler.tau,
            validation_nll_before: nll(&val, 1.0),
            validation_nll_after: nll(&val, scaler.tau),
            validation_ece_before: ece_of(&val, identity, bins)?,
            validation_ece_after: ece_of(&val, scaler, bins)?,
            test_ece_before: test_ece(identity)?,
            test_ece_after: test_ece(scaler)?,
        });
    }
    let test_all = file.records(None, SplitRole::Test);
    write(out, "reliability_before.csv", reliability(&identity.calibrate(&test_all)?, bins)?.to_csv())?;
    for row in &mut file.rows {
        row.record.posterior = Some(scalers[&row.fold].apply(&row.record.logits)?);
    }
    let test_all = file.records(None, SplitRole::Test);
    write(out, "reliability_after.csv", reliability(&test_all, bins)?.to_csv())?;
    write_json(out, CALIBRATED_FILE, &file)?;
    let report = CalibrationReport { bins, folds };
    write_json(out, "calibration.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfFold {
    pub fold: usize,
    pub triplets: u64,
    pub transitions: String,
    pub base: Option<Score>,
    pub crf: Option<Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfReport {
    pub alpha: f64,
    pub folds: Vec<CrfFold>,
    /// Year-3 test records of all folds, before and after rescoring.
    pub base: Option<Score>,
    pub crf: Option<Score>,
}

/// `crf`: per fold, estimates transitions from the declarations of the
/// training parcels and rescores the calibrated test predictions of the
/// third year onwards.
pub fn cmd_crf(predictions: &Path, dataset: &Path, folds_path: &Path, alpha: f64, out: &Path) -> Result<CrfReport> {
    let file: PredictionsFile = read_json(predictions)?;
    let ds = load_dataset(dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let assignment: FoldAssignment = read_json(folds_path)?;
    let declarations: HashMap<u64, Vec<usize>> = ds.parcels.iter().map(|p| (p.parcel_id, p.labels())).collect();
    let mut folds = Vec::new();
    let (mut base_all, mut crf_all) = (Vec::new(), Vec::new());
    for f in file.folds() {
        let split = split_for_fold(&ds, &assignment, f)?;
        let sequences: Vec<Vec<usize>> = split.train.iter().map(|&i| ds.parcels[i].labels()).collect();
        let tensor = estimate_transitions(&triplets_from(&sequences), ds.classes, alpha)?;
        let name = format!("transitions_fold{f}.rctt");
        tensor.save(out.join(&name))?;
        let test = file.records(Some(f), SplitRole::Test);
        let base: Vec<PredictionRecord> = test.iter().filter(|r| r.year_index > 2).cloned().collect();
        let rescored = rescore(&base, &declarations, &tensor)?;
        folds.push(CrfFold {
            fold: f,
            triplets: tensor.triplets,
            transitions: name,
            base: score(&base, ds.classes)?.map(|s| s.0),
            crf: score(&rescored, ds.classes)?.map(|s| s.0),
        });
        base_all.extend(base);
        crf_all.extend(rescored);
    }
    let report = CrfReport {
        alpha,
        folds,
        base: score(&base_all, ds.classes)?.map(|s| s.0),
        crf: score(&crf_all, ds.classes)?.map(|s| s.0),
    };
    write_json(out, "crf_report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub parcels: usize,
    pub observed_rotations: usize,
    pub possible_rotations: u128,
    pub table: RotationTable,
    pub categories: CategoryAssignment,
}

/// `rotations`: coverage table, categories and rotation counts.
pub fn cmd_rotations(dataset: &Path, out: &Path) -> Result<RotationReport> {
    let ds: Dataset = load_dataset(dataset)?;
    let labels = ds.label_sequences();
    let table = rotation_table(&labels, ds.classes)?;
    write(out, "rotation_table.csv", table.to_csv(&ds.manifest.class_names))?;
    let report = RotationReport {
        parcels: ds.parcels.len(),
        observed_rotations: table.observed_rotations,
        possible_rotations: table.possible_rotations,
        categories: categorize(&labels, ds.classes)?,
        table,
    };
    write_json(out, "rotations.json", &report)?;
    Ok(report)
}

/// `embed`: descriptor of every parcel-year as `embeddings.csv`.
pub fn cmd_embed(checkpoint: &Path, dataset: &Path, seed: u64, out: &Path) -> Result<usize> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let all: Vec<usize> = (0..ds.parcels.len()).collect();
    let mut csv = Vec::new();
    let rows = export_embeddings(&model, &ds, &all, seed, &mut csv)?;
    write(out, "embeddings.csv", csv)?;
    Ok(rows)
}
