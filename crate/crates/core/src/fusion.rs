//! Prediction strategies over a stack of low-resolution frames.
//!
//! * input upsampling: `mean_j f(Up(x_j))`
//! * output upsampling: `mean_j Up(f(x_j))`
//! * super-resolution: `f(g(x_1..x_m))`, where `g` fuses the frames itself
//!
//! Means are taken over raw logits, in the order the frames are given
//! (ascending timestamp for a scene), as a running mean so that one frame or
//! `m` identical frames reproduce the single-frame result exactly.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SceneSeries;
use crate::model::{binarize, Segmenter};
use crate::raster::{BilinearOperator, BinaryMask, GeoGrid, LogitMap, MultibandImage, Upsample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    InputUp,
    OutputUp,
    Sr,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::InputUp, StrategyKind::OutputUp, StrategyKind::Sr];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::InputUp => "input-up",
            StrategyKind::OutputUp => "output-up",
            StrategyKind::Sr => "sr",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input-up" | "input_upsampling" => Ok(StrategyKind::InputUp),
            "output-up" | "output_upsampling" => Ok(StrategyKind::OutputUp),
            "sr" | "super_resolution" => Ok(StrategyKind::Sr),
            _ => Err(Error::Invalid(format!(
                "unknown strategy {s:?} (expected input-up, output-up or sr)"
            ))),
        }
    }
}

/// Multi-frame super-resolution: a frame stack on the LR grid to one image on the HR grid.
pub trait SrModel: Sync {
    fn name(&self) -> &str;
    fn super_resolve(&self, frames: &[&MultibandImage], hr_grid: &GeoGrid) -> Result<MultibandImage>;
    fn parameter_count(&self) -> usize {
        0
    }
}

/// Reference SR model: nodata-aware mean of the bilinearly upsampled frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NaiveMfsr;

impl SrModel for NaiveMfsr {
    fn name(&self) -> &str {
        "naive-mfsr"
    }

    fn super_resolve(&self, frames: &[&MultibandImage], hr_grid: &GeoGrid) -> Result<MultibandImage> {
        naive_mfsr(frames, hr_grid)
    }
}

fn check_stack(frames: &[&MultibandImage]) -> Result<GeoGrid> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("at least one frame is required".into()))?;
    let grid = *first.grid();
    for f in frames {
        if f.grid() != &grid {
            return Err(Error::Alignment(format!(
                "frames on different grids: {:?} vs {:?}",
                grid,
                f.grid()
            )));
        }
        if f.bands() != first.bands() {
            return Err(Error::Shape("frames have different band counts".into()));
        }
    }
    Ok(grid)
}

/// Accumulates maps into a running mean.
#[derive(Debug, Clone)]
pub(crate) struct RunningMean {
    mean: Option<Array2<f64>>,
    k: f64,
}

impl RunningMean {
    pub fn new() -> Self {
        RunningMean { mean: None, k: 0.0 }
    }

    pub fn push(&mut self, x: &Array2<f64>) {
        self.k += 1.0;
        let k = self.k;
        match &mut self.mean {
            None => self.mean = Some(x.clone()),
            Some(m) => Zip::from(m).and(x).for_each(|m, &x| *m += (x - *m) / k),
        }
    }

    pub fn finish(self) -> Option<Array2<f64>> {
        self.mean
    }
}

/// Per-pixel mean over the frames that are valid there; pixels with no valid
/// frame are zero and flagged no-data.
pub fn naive_mfsr(frames: &[&MultibandImage], hr_grid: &GeoGrid) -> Result<MultibandImage> {
    check_stack(frames)?;
    let bands = frames[0].bands();
    let (h, w) = hr_grid.shape();
    let mut mean = Array3::<f64>::zeros((bands, h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for f in frames {
        let up = f.bilinear_upsample(hr_grid)?;
        let nd = up.nodata();
        for r in 0..h {
            for c in 0..w {
                if nd[[r, c]] {
                    continue;
                }
                count[[r, c]] += 1.0;
                let k = count[[r, c]];
                for b in 0..bands {
                    let m = &mut mean[[b, r, c]];
                    if k == 1.0 {
                        *m = up.values()[[b, r, c]];
                    } else {
                        *m += (up.values()[[b, r, c]] - *m) / k;
                    }
                }
            }
        }
    }
    let nodata = count.mapv(|k| k == 0.0);
    MultibandImage::new(*hr_grid, mean, nodata)
}

/// `mean_j f(Up(x_j))`.
pub fn predict_input_upsampling<S: Segmenter + ?Sized>(
    model: &S,
    frames: &[&MultibandImage],
    hr_grid: &GeoGrid,
) -> Result<LogitMap> {
    check_stack(frames)?;
    let mut acc = RunningMean::new();
    for f in frames {
        let logits = model.segment(&f.bilinear_upsample(hr_grid)?)?;
        acc.push(logits.values());
    }
    LogitMap::new(*hr_grid, acc.finish().expect("non-empty stack"))
}

/// `mean_j Up(f(x_j))`, with the model run at low resolution.
pub fn predict_output_upsampling<S: Segmenter + ?Sized>(
    model: &S,
    frames: &[&MultibandImage],
    hr_grid: &GeoGrid,
) -> Result<LogitMap> {
    let lr = check_stack(frames)?;
    let up = BilinearOperator::new(&lr, hr_grid)?;
    let mut acc = RunningMean::new();
    for f in frames {
        let logits = model.segment(f)?;
        acc.push(&up.apply(logits.values().view()));
    }
    LogitMap::new(*hr_grid, acc.finish().expect("non-empty stack"))
}

/// `f(g(x_1..x_m))`: one forward pass on the super-resolved image.
pub fn predict_super_resolution<S: Segmenter + ?Sized>(
    model: &S,
    sr: &dyn SrModel,
    frames: &[&MultibandImage],
    hr_grid: &GeoGrid,
) -> Result<LogitMap> {
    check_stack(frames)?;
    let image = sr.super_resolve(frames, hr_grid)?;
    if image.grid() != hr_grid || image.bands() != frames[0].bands() {
        return Err(Error::Contract(format!(
            "SR model {} returned {} bands on {:?}, expected {} bands on {:?}",
            sr.name(),
            image.bands(),
            image.grid(),
            frames[0].bands(),
            hr_grid
        )));
    }
    model.segment(&image)
}

/// A strategy bound to a segmenter (and an SR model for [`StrategyKind::Sr`]).
#[derive(Clone, Copy)]
pub struct FusionStrategy<'a> {
    kind: StrategyKind,
    model: &'a dyn Segmenter,
    sr: Option<&'a dyn SrModel>,
}

impl<'a> FusionStrategy<'a> {
    pub fn new(kind: StrategyKind, model: &'a dyn Segmenter, sr: Option<&'a dyn SrModel>) -> Result<Self> {
        if kind == StrategyKind::Sr && sr.is_none() {
            return Err(Error::Invalid("the sr strategy needs an SR model".into()));
        }
        Ok(FusionStrategy { kind, model, sr })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn fuse(&self, frames: &[&MultibandImage], hr_grid: &GeoGrid) -> Result<LogitMap> {
        match self.kind {
            StrategyKind::InputUp => predict_input_upsampling(self.model, frames, hr_grid),
            StrategyKind::OutputUp => predict_output_upsampling(self.model, frames, hr_grid),
            StrategyKind::Sr => {
                predict_super_resolution(self.model, self.sr.expect("checked in new"), frames, hr_grid)
            }
        }
    }

    pub fn predict_frames(
        &self,
        frames: &[&MultibandImage],
        hr_grid: &GeoGrid,
        threshold: f64,
    ) -> Result<(LogitMap, BinaryMask)> {
        let logits = self.fuse(frames, hr_grid)?;
        let mask = binarize(&logits, threshold)?;
        Ok((logits, mask))
    }
}

/// Fused logits and binary mask for a scene on its HR grid.
pub fn predict(strategy: &FusionStrategy<'_>, scene: &SceneSeries, threshold: f64) -> Result<(LogitMap, BinaryMask)> {
    strategy.predict_frames(&scene.images(), scene.hr_grid(), threshold)
}
