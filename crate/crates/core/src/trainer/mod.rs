//! Training: binary cross-entropy, Adam, and selection of the learning rate
//! and epoch with the best validation F1.
//!
//! Three regimes share one loop:
//! * `superrivolution`: a fusion strategy over the frame stack against the HR label
//! * `lr-baseline`: one random frame per step against the majority-downsampled label
//! * `hr-oracle`: the HR image against the HR label

mod adam;
mod eval;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use eval::{evaluate_checkpoint, evaluate_segmenter, EvalOptions};

use crate::error::{Error, Result};
use crate::fusion::{NaiveMfsr, RunningMean, SrModel, StrategyKind};
use crate::ingest::{make_lr_label, select_frames, Dataset, Frame, SceneSeries, Split};
use crate::metrics::{seg_metrics, SegMetrics};
use crate::model::{binarize, ModelConfig, ModelState, SegmentationModel};
use crate::raster::{sigmoid, BilinearOperator, BinaryMask, MultibandImage, Upsample};

/// Probabilities are clipped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;
pub const CHECKPOINT_FORMAT: &str = "rivolution-checkpoint/1";

/// Mean binary cross-entropy of probabilities `p` against the mask.
pub fn bce_loss(y: &BinaryMask, p: &Array2<f64>) -> Result<f64> {
    if p.dim() != y.grid().shape() {
        return Err(Error::Shape(format!(
            "probability map {:?} does not match mask {:?}",
            p.dim(),
            y.grid().shape()
        )));
    }
    let mut sum = 0.0;
    Zip::from(y.values()).and(p).for_each(|&t, &p| {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= if t == 1 { p.ln() } else { (1.0 - p).ln() };
    });
    Ok(sum / p.len() as f64)
}

/// Loss of `sigmoid(logits)` against 0/1 targets, and its gradient with
/// respect to the logits (zero where the probability is clipped).
pub fn bce_with_logits(target: &Array2<f64>, logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if target.dim() != logits.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let n = logits.len() as f64;
    let mut sum = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad).and(target).and(logits).for_each(|g, &t, &l| {
        let raw = sigmoid(l);
        let p = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if raw == p {
            *g = (p - t) / n;
        }
    });
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Superrivolution,
    LrBaseline,
    HrOracle,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Superrivolution => "superrivolution",
            Regime::LrBaseline => "lr-baseline",
            Regime::HrOracle => "hr-oracle",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" | "superrivolution" => Ok(Regime::Superrivolution),
            "lr-baseline" | "lr_baseline" => Ok(Regime::LrBaseline),
            "hr-oracle" | "hr_oracle" => Ok(Regime::HrOracle),
            _ => Err(Error::Invalid(format!(
                "unknown regime {s:?} (expected sr, lr-baseline or hr-oracle)"
            ))),
        }
    }
}

/// Display name of a trained pipeline, e.g. `superrivolution/input-up`.
pub fn method_name(regime: Regime, strategy: StrategyKind) -> String {
    match regime {
        Regime::Superrivolution => format!("{regime}/{strategy}"),
        _ => regime.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub strategy: StrategyKind,
    pub epochs: usize,
    pub learning_rates: Vec<f64>,
    /// Scenes per optimiser step.
    pub batch_size: usize,
    /// Frames per scene (m).
    pub frames: usize,
    pub seed: u64,
    pub threshold: f64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Fine-tune the SR model together with the segmenter.
    pub joint_sr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Superrivolution,
            strategy: StrategyKind::InputUp,
            epochs: 50,
            learning_rates: vec![1e-3, 3e-4, 1e-4],
            batch_size: 1,
            frames: crate::ingest::DEFAULT_FRAMES,
            seed: 0,
            threshold: crate::model::DEFAULT_THRESHOLD,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            joint_sr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if self.learning_rates.is_empty() {
            return Err(Error::Invalid("at least one learning rate is required".into()));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Invalid("learning rates must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.frames == 0 {
            return Err(Error::Invalid("batch_size and frames must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Invalid("threshold must lie in (0, 1)".into()));
        }
        self.model.validate()
    }

    pub fn method(&self) -> String {
        method_name(self.regime, self.strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochStatus {
    Ok,
    Diverged,
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub learning_rate: f64,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_f1: Option<f64>,
    pub status: EpochStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub model: ModelState,
    pub learning_rate: f64,
    pub epoch: usize,
    pub best_val_f1: f64,
    /// Validation F1 of the same learning-rate run before training.
    pub initial_val_f1: f64,
    pub rng_seed: u64,
    /// Position of the training RNG stream when the checkpoint was taken.
    pub rng_word_pos: String,
    pub log: Vec<LogRecord>,
}

impl Checkpoint {
    pub fn segmenter(&self) -> Result<SegmentationModel> {
        SegmentationModel::from_state(self.model.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unsupported checkpoint format {:?}", ck.format)));
        }
        if !(0.0..=1.0).contains(&ck.best_val_f1) {
            return Err(Error::format(path, "best_val_f1 outside [0, 1]"));
        }
        ck.config.validate().map_err(|e| Error::format(path, e))?;
        SegmentationModel::from_state(ck.model.clone()).map_err(|e| Error::format(path, e))?;
        Ok(ck)
    }

    /// The (learning rate, epoch) with the highest recorded validation F1;
    /// earlier entries win ties.
    pub fn replay_selection(log: &[LogRecord]) -> Option<(f64, usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for r in log.iter().filter(|r| r.epoch > 0 && r.status == EpochStatus::Ok) {
            if let Some(f1) = r.val_f1 {
                if best.is_none_or(|b| f1 > b.2) {
                    best = Some((r.learning_rate, r.epoch, f1));
                }
            }
        }
        best
    }
}

/// Writes the log as one JSON object per line.
pub fn write_training_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A scene with its training targets precomputed.
struct Prepared<'a> {
    frames: Vec<&'a MultibandImage>,
    hr_image: Option<&'a MultibandImage>,
    hr_target: Array2<f64>,
    lr_label: BinaryMask,
    lr_target: Array2<f64>,
    up: BilinearOperator,
    scene: &'a SceneSeries,
}

fn prepare<'a>(scene: &'a SceneSeries, m: usize, regime: Regime) -> Result<Prepared<'a>> {
    let selected: Vec<&'a Frame> = select_frames(&scene.frames().iter().collect::<Vec<_>>(), m)?.frames;
    let lr_label = make_lr_label(scene.hr_label(), scene.lr_grid())?;
    if regime == Regime::HrOracle && scene.hr_image().is_none() {
        return Err(Error::Invalid(format!(
            "scene {} has no HR image for the hr-oracle regime",
            scene.scene_id()
        )));
    }
    Ok(Prepared {
        frames: selected.iter().map(|f| &f.image).collect(),
        hr_image: scene.hr_image(),
        hr_target: scene.hr_label().as_f64(),
        lr_target: lr_label.as_f64(),
        lr_label,
        up: BilinearOperator::new(scene.lr_grid(), scene.hr_grid())?,
        scene,
    })
}

fn prepare_all<'a>(scenes: &[&'a SceneSeries], config: &TrainConfig) -> Result<Vec<Prepared<'a>>> {
    scenes.iter().map(|s| prepare(s, config.frames, config.regime)).collect()
}

/// Loss of one scene; adds its parameter gradient (scaled by `weight`) into `grad`.
fn scene_step(
    model: &SegmentationModel,
    config: &TrainConfig,
    sr: &dyn SrModel,
    p: &Prepared<'_>,
    rng: &mut ChaCha8Rng,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let one = |x: &MultibandImage, target: &Array2<f64>, grad: &mut [f64]| -> Result<f64> {
        let (logits, cache) = model.forward_train(x.filled().view())?;
        let (loss, d) = bce_with_logits(target, &logits)?;
        model.backward(&cache, &(d * weight), grad)?;
        Ok(loss)
    };
    match config.regime {
        Regime::HrOracle => one(p.hr_image.expect("checked in prepare"), &p.hr_target, grad),
        Regime::LrBaseline => {
            let j = rng.random_range(0..p.frames.len());
            one(p.frames[j], &p.lr_target, grad)
        }
        Regime::Superrivolution => match config.strategy {
            StrategyKind::Sr => one(&sr.super_resolve(&p.frames, p.scene.hr_grid())?, &p.hr_target, grad),
            StrategyKind::InputUp | StrategyKind::OutputUp => {
                let input_up = config.strategy == StrategyKind::InputUp;
                let mut caches = Vec::with_capacity(p.frames.len());
                let mut mean = RunningMean::new();
                for f in &p.frames {
                    let (logits, cache) = if input_up {
                        let up = f.bilinear_upsample(p.scene.hr_grid())?;
                        model.forward_train(up.filled().view())?
                    } else {
                        let (l, c) = model.forward_train(f.filled().view())?;
                        (p.up.apply(l.view()), c)
                    };
                    mean.push(&logits);
                    caches.push(cache);
                }
                let fused = mean.finish().expect("non-empty stack");
                let (loss, d) = bce_with_logits(&p.hr_target, &fused)?;
                let d = d * (weight / p.frames.len() as f64);
                let d_lr = if input_up { d } else { p.up.adjoint(d.view()) };
                for cache in &caches {
                    model.backward(cache, &d_lr, grad)?;
                }
                Ok(loss)
            }
        },
    }
}

/// Training loss of one scene under `config` and its gradient with respect
/// to every model parameter. The LR baseline draws its frame from `seed`.
pub fn scene_loss_and_grad(
    model: &SegmentationModel,
    config: &TrainConfig,
    scene: &SceneSeries,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let p = prepare(scene, config.frames, config.regime)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; model.parameter_count()];
    let loss = scene_step(model, config, &NaiveMfsr, &p, &mut rng, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Pooled validation F1 of the regime's own pipeline. The LR baseline is
/// validated per frame against LR labels, so no HR data is touched.
fn validation_f1(model: &SegmentationModel, config: &TrainConfig, val: &[Prepared<'_>]) -> Result<f64> {
    use rayon::prelude::*;
    let per_scene = val
        .par_iter()
        .map(|p| -> Result<Vec<SegMetrics>> {
            match config.regime {
                Regime::HrOracle => {
                    let l = model.forward(p.hr_image.expect("checked in prepare"))?;
                    Ok(vec![seg_metrics(&binarize(&l, config.threshold)?, p.scene.hr_label())?])
                }
                Regime::LrBaseline => p
                    .frames
                    .iter()
                    .map(|f| seg_metrics(&binarize(&model.forward(f)?, config.threshold)?, &p.lr_label))
                    .collect(),
                Regime::Superrivolution => {
                    let strategy = crate::fusion::FusionStrategy::new(config.strategy, model, Some(&NaiveMfsr))?;
                    let (_, mask) = strategy.predict_frames(&p.frames, p.scene.hr_grid(), config.threshold)?;
                    Ok(vec![seg_metrics(&mask, p.scene.hr_label())?])
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegMetrics::pooled(per_scene.iter().flatten()).f1)
}

struct Candidate {
    lr: f64,
    epoch: usize,
    f1: f64,
    initial_f1: f64,
    params: Vec<f64>,
    word_pos: u128,
}

/// Trains one model per learning rate and returns the (learning rate, epoch)
/// checkpoint with the best validation F1.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    let sr = NaiveMfsr;
    if config.joint_sr && sr.parameter_count() == 0 {
        return Err(Error::Invalid(format!(
            "joint SR training requested, but {} has no trainable parameters",
            sr.name()
        )));
    }
    let train_scenes = dataset.split(Split::Train);
    let val_scenes = dataset.split(Split::Val);
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::Invalid("training needs non-empty train and val splits".into()));
    }
    let bands = train_scenes[0].bands();
    let train_set = prepare_all(&train_scenes, config)?;
    let val_set = prepare_all(&val_scenes, config)?;

    let mut log = Vec::new();
    let mut best: Option<Candidate> = None;
    for (lr_index, &lr) in config.learning_rates.iter().enumerate() {
        let mut model = SegmentationModel::new(config.model, bands, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(lr_index as u64 + 1);
        let mut adam = Adam::new(config.adam, lr, model.parameter_count());
        let initial_f1 = validation_f1(&model, config, &val_set)?;
        log.push(LogRecord {
            learning_rate: lr,
            epoch: 0,
            train_loss: None,
            val_f1: Some(initial_f1),
            status: EpochStatus::Ok,
        });
        log::info!("{} lr={lr:e} epoch 0 val_f1={initial_f1:.4}", config.method());
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        'epochs: for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(config.batch_size) {
                let mut grad = vec![0.0; model.parameter_count()];
                let w = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                let mut failed = None;
                for &i in batch {
                    match scene_step(&model, config, &sr, &train_set[i], &mut rng, w, &mut grad) {
                        Ok(l) => batch_loss += l * w,
                        Err(Error::Numeric(msg)) => {
                            failed = Some(msg);
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if failed.is_none() && grad.iter().any(|g| !g.is_finite()) {
                    failed = Some("non-finite gradient".into());
                }
                if let Some(msg) = failed {
                    log::warn!("{} lr={lr:e} diverged in epoch {epoch}: {msg}", config.method());
                    log.push(LogRecord {
                        learning_rate: lr,
                        epoch,
                        train_loss: None,
                        val_f1: None,
                        status: EpochStatus::Diverged,
                    });
                    break 'epochs;
                }
                adam.step(model.parameters_mut(), &grad);
                loss_sum += batch_loss * batch.len() as f64;
            }
            let train_loss = loss_sum / train_set.len() as f64;
            let val_f1 = match model.check_finite().and_then(|_| validation_f1(&model, config, &val_set)) {
                Ok(f) => f,
                Err(Error::Numeric(msg)) => {
                    log::warn!("{} lr={lr:e} diverged in epoch {epoch}: {msg}", config.method());
                    log.push(LogRecord {
                        learning_rate: lr,
                        epoch,
                        train_loss: None,
                        val_f1: None,
                        status: EpochStatus::Diverged,
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            log::info!("{} lr={lr:e} epoch {epoch} loss={train_loss:.5} val_f1={val_f1:.4}", config.method());
            log.push(LogRecord {
                learning_rate: lr,
                epoch,
                train_loss: Some(train_loss),
                val_f1: Some(val_f1),
                status: EpochStatus::Ok,
            });
            if best.as_ref().is_none_or(|b| val_f1 > b.f1) {
                best = Some(Candidate {
                    lr,
                    epoch,
                    f1: val_f1,
                    initial_f1,
                    params: model.parameters().to_vec(),
                    word_pos: rng.get_word_pos(),
                });
            }
        }
    }
    let best = best.ok_or_else(|| Error::Training("every learning rate diverged".into()))?;
    let mut state = SegmentationModel::new(config.model, bands, config.seed)?.to_state();
    state.parameters = best.params;
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config: config.clone(),
        model: state,
        learning_rate: best.lr,
        epoch: best.epoch,
        best_val_f1: best.f1,
        initial_val_f1: best.initial_f1,
        rng_seed: config.seed,
        rng_word_pos: best.word_pos.to_string(),
        log,
    })
}
