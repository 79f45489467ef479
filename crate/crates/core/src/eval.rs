//! Held-out and cross-database evaluation protocols.

use std::ops::ControlFlow;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{split_dataset, DatasetManifest, ErpImage, PreprocessConfig, QualityRecord, Split};
use crate::metrics::{median, plcc, srcc};
use crate::model::{Mode, ModelConfig, VugaModel};
use crate::train::{fit, image_pyramid, FeatureBank, FitOutcome, RunDir, Skipped, TrainConfig};
use crate::{Error, Result};

/// Largest fraction of unreadable images tolerated by [`evaluate`].
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub pred: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub srcc: f64,
    pub plcc: f64,
    pub logistic_params: [f64; 4],
    pub warnings: Vec<String>,
    pub predictions: Vec<Prediction>,
}

impl EvalResult {
    /// Sorts by `image_id` and computes both correlations.
    pub fn from_predictions(mut predictions: Vec<Prediction>, mut warnings: Vec<String>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Precondition("no predictions to evaluate".into()));
        }
        predictions.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let pred: Vec<f64> = predictions.iter().map(|p| p.pred).collect();
        let mos: Vec<f64> = predictions.iter().map(|p| p.mos).collect();
        let s = srcc(&pred, &mos)?;
        let (p, fit) = plcc(&pred, &mos)?;
        if !fit.converged {
            warnings.push(format!("logistic fit did not converge in {} iterations", fit.iterations));
        }
        Ok(Self {
            srcc: s,
            plcc: p,
            logistic_params: fit.params,
            warnings,
            predictions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores every record in evaluation mode. Unreadable images are skipped
/// with a warning; more than [`MAX_SKIPPED_FRACTION`] of them is an error.
pub fn evaluate(
    model: &VugaModel,
    backbone: &dyn Backbone,
    records: &[&QualityRecord],
    preprocess_cfg: &PreprocessConfig,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Precondition("evaluation split is empty".into()));
    }
    let dtype = model.regressor.fc1.weight.dtype();
    let mut predictions = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for r in records {
        let image = match ErpImage::open(&r.path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", r.image_id);
                warnings.push(format!("skipped {}: {e}", r.image_id));
                continue;
            }
        };
        let pyramid = image_pyramid(&image, backbone, preprocess_cfg)?.to_dtype(dtype)?;
        let score = model.forward(&pyramid, Mode::Eval)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        predictions.push(Prediction {
            image_id: r.image_id.clone(),
            pred: score,
            mos: r.mos,
        });
    }
    let skipped = records.len() - predictions.len();
    if skipped as f64 > MAX_SKIPPED_FRACTION * records.len() as f64 {
        return Err(Error::Precondition(format!(
            "{skipped} of {} images unreadable: {}",
            records.len(),
            warnings.join("; ")
        )));
    }
    EvalResult::from_predictions(predictions, warnings)
}

/// Evaluation over already-extracted features; `skipped` lists images that
/// could not be read and counts toward the skip limit.
pub fn evaluate_bank(model: &VugaModel, bank: &FeatureBank, skipped: &[Skipped]) -> Result<EvalResult> {
    let total = bank.len() + skipped.len();
    if skipped.len() as f64 > MAX_SKIPPED_FRACTION * total as f64 {
        return Err(Error::Precondition(format!("{} of {total} images unreadable", skipped.len())));
    }
    let preds = crate::train::predict(model, bank, 8)?;
    let predictions = bank
        .samples
        .iter()
        .zip(preds)
        .map(|(s, pred)| Prediction {
            image_id: s.image_id.clone(),
            pred,
            mos: s.mos,
        })
        .collect();
    let warnings = skipped.iter().map(|s| format!("skipped {}: {}", s.image_id, s.reason)).collect();
    EvalResult::from_predictions(predictions, warnings)
}

/// Component-wise medians of SRCC and PLCC.
pub fn median_over_repeats(results: &[EvalResult]) -> Result<(f64, f64)> {
    let s: Vec<f64> = results.iter().map(|r| r.srcc).collect();
    let p: Vec<f64> = results.iter().map(|r| r.plcc).collect();
    match (median(&s), median(&p)) {
        (Some(s), Some(p)) => Ok((s, p)),
        _ => Err(Error::Precondition("median of zero results".into())),
    }
}

/// Uses the manifest's own split column when every record has one,
/// otherwise draws a seeded split with the given train fraction.
pub fn ensure_split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !manifest.is_empty() && manifest.records.iter().all(|r| r.split.is_some()) {
        Ok(manifest.clone())
    } else {
        split_dataset(manifest, train_fraction, seed)
    }
}

/// A trained model together with its training history.
pub struct TrainedModel {
    pub model: VugaModel,
    pub outcome: FitOutcome,
    /// Features of the test split and the images that could not be read.
    pub test_bank: FeatureBank,
    pub test_skipped: Vec<Skipped>,
}

/// Builds a model from `model_cfg` (seeded by `train_cfg.seed`), extracts
/// features for the train and test splits and runs [`fit`]. The model is
/// left holding the best checkpoint's parameters.
pub fn train_on_manifest(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    backbone: &dyn Backbone,
    run_dir: Option<&RunDir>,
) -> Result<TrainedModel> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let train = manifest.subset(Split::Train);
    if train.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let pre = PreprocessConfig::new(train_cfg.resolution);
    let (train_bank, _) = FeatureBank::extract(&train, backbone, &pre, false)?;
    let (test_bank, test_skipped) = FeatureBank::extract(&manifest.subset(Split::Test), backbone, &pre, true)?;
    let model = VugaModel::new(model_cfg, backbone.spec().stage_channels, train_cfg.seed, DType::F32, &candle_core::Device::Cpu)?;
    let val = (test_bank.len() >= 3).then_some(&test_bank);
    let outcome = fit(&model, &train_bank, val, train_cfg, run_dir, &mut |_| ControlFlow::Continue(()))?;
    model.params().load(&outcome.best.model_state)?;
    Ok(TrainedModel {
        model,
        outcome,
        test_bank,
        test_skipped,
    })
}

/// Trains on 80% of `train_manifest` and evaluates on all of `test_manifest`.
pub fn cross_database(
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    backbone: &dyn Backbone,
    run_dir: Option<&RunDir>,
) -> Result<EvalResult> {
    let same_records = train_manifest.len() == test_manifest.len()
        && train_manifest
            .records
            .iter()
            .zip(&test_manifest.records)
            .all(|(a, b)| a.image_id == b.image_id && a.path == b.path);
    if train_manifest.name == test_manifest.name || same_records {
        return Err(Error::Precondition(format!(
            "cross-database protocol needs two different databases (got `{}` twice)",
            train_manifest.name
        )));
    }
    if test_manifest.is_empty() {
        return Err(Error::Precondition(format!("test database `{}` is empty", test_manifest.name)));
    }
    let split = split_dataset(train_manifest, 0.8, train_cfg.seed)?;
    let trained = train_on_manifest(&split, model_cfg, train_cfg, backbone, run_dir)?;
    let records: Vec<&QualityRecord> = test_manifest.records.iter().collect();
    evaluate(
        &trained.model,
        backbone,
        &records,
        &PreprocessConfig::new(train_cfg.resolution),
    )
}
