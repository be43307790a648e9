use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Regime};
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, NaiveMfsr, StrategyKind};
use crate::ingest::{select_frames, Dataset, SceneSeries, Split};
use crate::metrics::{seg_metrics, EvalReport, SceneEval, SingleFrameEval, CLOUDY_THRESHOLD};
use crate::model::{binarize, Segmenter};
use crate::width::{widths_for_scene, WidthRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    pub width_rule: WidthRule,
    /// Also score one randomly chosen frame per scene on its own.
    pub single_frame: bool,
    /// Seeds the choice of the single-frame reference.
    pub seed: u64,
    pub frames: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: crate::model::DEFAULT_THRESHOLD,
            width_rule: WidthRule::PixelCount,
            single_frame: true,
            seed: 0,
            frames: crate::ingest::DEFAULT_FRAMES,
        }
    }
}

/// Index of the single-frame reference for the `index`-th scene of a split.
pub fn reference_frame(seed: u64, index: usize, frames: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random_range(0..frames)
}

fn eval_scene(
    model: &dyn Segmenter,
    regime: Regime,
    strategy: StrategyKind,
    scene: &SceneSeries,
    index: usize,
    opts: &EvalOptions,
) -> Result<SceneEval> {
    let selected = select_frames(&scene.frames().iter().collect::<Vec<_>>(), opts.frames)?.frames;
    let images: Vec<_> = selected.iter().map(|f| &f.image).collect();
    let hr = scene.hr_grid();
    let kind = match regime {
        Regime::Superrivolution => strategy,
        _ => StrategyKind::OutputUp,
    };
    let fusion = FusionStrategy::new(kind, model, Some(&NaiveMfsr))?;
    let mask = match regime {
        Regime::HrOracle => {
            let img = scene.hr_image().ok_or_else(|| {
                Error::Invalid(format!("scene {} has no HR image", scene.scene_id()))
            })?;
            binarize(&model.segment(img)?, opts.threshold)?
        }
        _ => fusion.predict_frames(&images, hr, opts.threshold)?.1,
    };
    let j = reference_frame(opts.seed, index, images.len());
    let single = if opts.single_frame && regime != Regime::HrOracle {
        let (_, m) = fusion.predict_frames(&images[j..=j], hr, opts.threshold)?;
        Some(SingleFrameEval {
            frame_index: j,
            metrics: seg_metrics(&m, scene.hr_label())?,
            widths: widths_for_scene(&m, scene.transects(), opts.width_rule),
        })
    } else {
        None
    };
    let cloud_fraction = selected[j].meta.cloud_fraction;
    Ok(SceneEval {
        scene_id: scene.scene_id().to_string(),
        metrics: seg_metrics(&mask, scene.hr_label())?,
        cloud_fraction,
        cloudy: cloud_fraction >= CLOUDY_THRESHOLD,
        widths: widths_for_scene(&mask, scene.transects(), opts.width_rule),
        single,
    })
}

/// Scores any segmenter on a list of scenes with the regime's test-time pipeline.
pub fn evaluate_segmenter(
    model: &dyn Segmenter,
    regime: Regime,
    strategy: StrategyKind,
    scenes: &[&SceneSeries],
    split: Split,
    opts: &EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let evals = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| eval_scene(model, regime, strategy, s, i, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(
        super::method_name(regime, strategy),
        split,
        opts.threshold,
        evals,
        config,
    ))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, split: Split, opts: &EvalOptions) -> Result<EvalReport> {
    let model = ckpt.segmenter()?;
    let scenes = dataset.split(split);
    let config = serde_json::json!({
        "train": ckpt.config,
        "eval": opts,
        "selected": { "learning_rate": ckpt.learning_rate, "epoch": ckpt.epoch, "val_f1": ckpt.best_val_f1 },
    });
    evaluate_segmenter(&model, ckpt.config.regime, ckpt.config.strategy, &scenes, split, opts, config)
}
