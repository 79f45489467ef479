//! Optimization loop over cached backbone features.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, Backbone, FeaturePyramid, SwinV2Config};
use crate::data::{preprocess, ErpImage, PreprocessConfig, QualityRecord};
use crate::metrics::srcc;
use crate::model::{Mode, ModelConfig, VugaModel};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            schedule: Schedule::Cosine,
            resolution: 224,
        }
    }
}

impl TrainConfig {
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push("lr".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push("weight_decay".into());
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            bad.push("resolution".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let keys = self.invalid_keys();
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }
}

/// `(1/N) Σ (pred − mos)²`.
pub fn mse_loss(pred: &[f64], mos: &[f64]) -> Result<f64> {
    if pred.len() != mos.len() {
        return Err(Error::Precondition(format!("{} predictions for {} scores", pred.len(), mos.len())));
    }
    if pred.is_empty() {
        return Err(Error::Precondition("loss of an empty batch".into()));
    }
    Ok(pred.iter().zip(mos).map(|(p, m)| (p - m).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Differentiable form of [`mse_loss`] on `[B]` tensors.
pub fn mse_loss_tensor(pred: &Tensor, mos: &Tensor) -> Result<Tensor> {
    if pred.dims() != mos.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dims(), mos.dims())));
    }
    Ok((pred - mos)?.sqr()?.mean_all()?)
}

/// `0.5 · lr0 · (1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor().detach();
            let g = if self.weight_decay > 0.0 {
                (g + (&theta * self.weight_decay)?)?
            } else {
                g.clone()
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(&theta - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// One image's cached pyramid and its score.
#[derive(Clone)]
pub struct Sample {
    pub image_id: String,
    pub mos: f64,
    pub pyramid: FeaturePyramid,
}

/// Backbone features computed once per image; valid because the backbone is
/// frozen and preprocessing is deterministic.
#[derive(Clone, Default)]
pub struct FeatureBank {
    pub samples: Vec<Sample>,
}

/// Image that failed to load, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub image_id: String,
    pub reason: String,
}

impl FeatureBank {
    /// With `skip_unreadable`, decode failures are collected instead of returned.
    pub fn extract(
        records: &[&QualityRecord],
        backbone: &dyn Backbone,
        preprocess_cfg: &PreprocessConfig,
        skip_unreadable: bool,
    ) -> Result<(Self, Vec<Skipped>)> {
        let mut samples = Vec::with_capacity(records.len());
        let mut skipped = Vec::new();
        for r in records {
            let image = match ErpImage::open(&r.path) {
                Ok(img) => img,
                Err(e) if skip_unreadable => {
                    log::warn!("skipping {}: {e}", r.image_id);
                    skipped.push(Skipped {
                        image_id: r.image_id.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            samples.push(Sample {
                image_id: r.image_id.clone(),
                mos: r.mos,
                pyramid: image_pyramid(&image, backbone, preprocess_cfg)?,
            });
        }
        Ok((Self { samples }, skipped))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mos(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mos).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.image_id.clone()).collect()
    }

    /// Stacked pyramid and `[B]` scores for the given sample indices.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(FeaturePyramid, Tensor)> {
        let parts: Vec<&FeaturePyramid> = idx.iter().map(|&i| &self.samples[i].pyramid).collect();
        let pyramid = FeaturePyramid::cat(&parts)?;
        let mos: Vec<f64> = idx.iter().map(|&i| self.samples[i].mos).collect();
        let device = pyramid.stages[0].device().clone();
        Ok((pyramid, Tensor::from_vec(mos, idx.len(), &device)?.to_dtype(dtype)?))
    }
}

/// Preprocesses one image and runs the backbone on it.
pub fn image_pyramid(image: &ErpImage, backbone: &dyn Backbone, cfg: &PreprocessConfig) -> Result<FeaturePyramid> {
    let x = preprocess(image, cfg)?.unsqueeze(0)?;
    extract_pyramid(&x, backbone)
}

fn model_dtype(model: &VugaModel) -> DType {
    model.regressor.fc1.weight.dtype()
}

/// Evaluation-mode scores for every sample, in bank order.
pub fn predict(model: &VugaModel, bank: &FeatureBank, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(bank.len());
    let idx: Vec<usize> = (0..bank.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (pyramid, _) = bank.batch(chunk, model_dtype(model))?;
        let scores = model.forward(&pyramid, Mode::Eval)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        out.extend(scores);
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Trainable state plus the configuration needed to rebuild the model.
#[derive(Clone)]
pub struct Checkpoint {
    pub model_state: BTreeMap<String, Tensor>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn capture(model: &VugaModel, train_config: &TrainConfig, epoch: usize) -> Result<Self> {
        Ok(Self {
            model_state: model.params().snapshot()?,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            epoch,
            format_version: CHECKPOINT_FORMAT_VERSION,
        })
    }

    /// Safetensors file; configuration and version live in the header metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), self.format_version.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.model_config)?);
        meta.insert("train_config".to_string(), serde_json::to_string(&self.train_config)?);
        meta.insert("epoch".to_string(), self.epoch.to_string());
        safetensors::serialize_to_file(self.model_state.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))
        };
        let format_version: u32 = field("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
        if format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {format_version}, expected {CHECKPOINT_FORMAT_VERSION}",
                path.display()
            )));
        }
        let model_state: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
        Ok(Self {
            model_state,
            model_config: serde_json::from_str(field("model_config")?)?,
            train_config: serde_json::from_str(field("train_config")?)?,
            epoch: field("epoch")?
                .parse()
                .map_err(|_| Error::Checkpoint("unreadable epoch".into()))?,
            format_version,
        })
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn restore(&self, device: &Device) -> Result<VugaModel> {
        let arch = SwinV2Config::by_name(&self.model_config.backbone)
            .ok_or_else(|| Error::Config { keys: vec!["backbone".into()] })?;
        let dtype = self.model_state.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let model = VugaModel::new(&self.model_config, arch.stage_channels(), self.train_config.seed, dtype, device)?;
        model.params().load(&self.model_state)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochReport>,
}

/// Where `fit` writes `train.log`, `ckpt_best` and `ckpt_last`.
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn train_log(&self) -> PathBuf {
        self.0.join("train.log")
    }
    pub fn best(&self) -> PathBuf {
        self.0.join("ckpt_best")
    }
    pub fn last(&self) -> PathBuf {
        self.0.join("ckpt_last")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.0.join("config.snapshot")
    }
}

/// Runs `epochs · ⌈N / batch⌉` Adam steps with a cosine schedule over all
/// steps. After each epoch the validation SRCC (if `val` is given, otherwise
/// the negated train loss) selects the best checkpoint. `on_epoch` may stop
/// training early.
pub fn fit(
    model: &VugaModel,
    train: &FeatureBank,
    val: Option<&FeatureBank>,
    cfg: &TrainConfig,
    run_dir: Option<&RunDir>,
    on_epoch: &mut dyn FnMut(&EpochReport) -> ControlFlow<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(&dir.0).map_err(|e| Error::io(&dir.0, e))?;
            let path = dir.train_log();
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "step\tepoch\tlr\tloss").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let dtype = model_dtype(model);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(2);
    let mut adam = Adam::new(cfg.weight_decay);
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.lr, step, total);
            let (pyramid, mos) = train.batch(chunk, dtype)?;
            let loss = mse_loss_tensor(&model.forward(&pyramid, Mode::Train)?, &mos)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr,
                    batch_ids: chunk.iter().map(|&i| train.samples[i].image_id.clone()).collect(),
                });
            }
            let grads = loss.backward()?;
            adam.step(model.params(), &grads, lr)?;
            step += 1;
            step_losses.push(value);
            epoch_loss += value * chunk.len() as f64;
            if let Some((w, path)) = log.as_mut() {
                writeln!(w, "{step}\t{epoch}\t{lr:.9e}\t{value:.9e}").map_err(|e| Error::io(&*path, e))?;
            }
        }
        let val_srcc = match val {
            Some(bank) if !bank.is_empty() => srcc(&predict(model, bank, cfg.batch_size)?, &bank.mos()).ok(),
            _ => None,
        };
        let report = EpochReport {
            epoch,
            steps: step,
            lr,
            train_loss: epoch_loss / train.len() as f64,
            val_srcc,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val_srcc {}",
            report.train_loss,
            val_srcc.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        let key = match (val, val_srcc) {
            (Some(_), Some(s)) => s,
            (Some(_), None) => f64::NEG_INFINITY,
            (None, _) => -report.train_loss,
        };
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            let ckpt = Checkpoint::capture(model, cfg, epoch)?;
            if let Some(dir) = run_dir {
                ckpt.save(&dir.best())?;
            }
            best = Some((key, ckpt));
        }
        if let Some((w, path)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        let stop = on_epoch(&report).is_break();
        epochs.push(report);
        if stop {
            break;
        }
    }
    let last = Checkpoint::capture(model, cfg, epochs.len())?;
    if let Some(dir) = run_dir {
        last.save(&dir.last())?;
    }
    Ok(FitOutcome {
        best: best.map(|(_, c)| c).unwrap_or_else(|| last.clone()),
        last,
        step_losses,
        epochs,
    })
}

/// Global L2 norm of each parameter's gradient, by name; absent gradients are 0.
pub fn gradient_norms(params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, var) in params.vars() {
        let norm = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?,
            None => 0.0,
        };
        out.insert(name.clone(), norm);
    }
    Ok(out)
}
