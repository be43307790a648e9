//! Parametric river scenes with known ground truth.
//!
//! A scene is a single river whose centreline is the sinusoid
//! `x = center_x + amplitude * sin(2π y / period + phase)` in map coordinates.
//! A high-resolution pixel is water when the signed distance `s` from its
//! centre to the centreline satisfies `-w/2 <= s < w/2`.

use std::f64::consts::TAU;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, DatasetManifest, Frame, FrameMetadata, ManifestEntry, SceneSeries, Split};
use crate::raster::{block_downsample, BinaryMask, GeoGrid, MultibandImage};
use crate::width::Transect;

/// Per-band Gaussian reflectance model of one surface class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spectrum {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Spectrum {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::Invalid("spectrum mean and std must have the same non-zero length".into()));
        }
        if std.iter().any(|s| !(*s >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid("spectrum std must be >= 0 and means finite".into()));
        }
        Ok(Spectrum { mean, std })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meander {
    pub amplitude_m: f64,
    pub period_m: f64,
    pub phase: f64,
}

impl Meander {
    pub const STRAIGHT: Meander = Meander {
        amplitude_m: 0.0,
        period_m: 1.0,
        phase: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub hr_size: usize,
    pub hr_pixel_size: f64,
    pub downsample_factor: usize,
    pub river_width_m: f64,
    /// Map x of the centreline axis, relative to the grid origin.
    pub center_x_m: f64,
    pub meander: Meander,
    pub water: Spectrum,
    pub land: Spectrum,
    /// Reflectance pasted under a cloud.
    pub cloud: Vec<f64>,
    pub frame_count: usize,
    /// Sensor noise added to each low-resolution frame.
    pub noise_std: f64,
    pub cloud_probability: f64,
    pub cloud_radius_range: (f64, f64),
    /// Largest translation of a frame, in low-resolution pixels.
    pub max_subpixel_shift: f64,
    pub anchor: DateTime<Utc>,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            hr_size: 64,
            hr_pixel_size: 3.0,
            downsample_factor: 4,
            river_width_m: 39.0,
            center_x_m: 96.0,
            meander: Meander {
                amplitude_m: 12.0,
                period_m: 320.0,
                phase: 0.0,
            },
            water: Spectrum {
                mean: vec![0.06, 0.08, 0.05, 0.03],
                std: vec![0.015; 4],
            },
            land: Spectrum {
                mean: vec![0.09, 0.12, 0.14, 0.26],
                std: vec![0.03; 4],
            },
            cloud: vec![0.55; 4],
            frame_count: 8,
            noise_std: 0.04,
            cloud_probability: 0.3,
            cloud_radius_range: (20.0, 48.0),
            max_subpixel_shift: 0.5,
            anchor: Utc.with_ymd_and_hms(2023, 7, 1, 0, 0, 0).unwrap(),
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.hr_size == 0 || self.downsample_factor == 0 || self.hr_size % self.downsample_factor != 0 {
            return bad(format!(
                "downsample factor {} must divide hr_size {}",
                self.downsample_factor, self.hr_size
            ));
        }
        if !(self.hr_pixel_size > 0.0) {
            return bad("hr_pixel_size must be positive".into());
        }
        if !(self.river_width_m >= self.hr_pixel_size) {
            return bad(format!(
                "river width {} m is narrower than one pixel",
                self.river_width_m
            ));
        }
        let bands = self.water.bands();
        if self.land.bands() != bands || self.cloud.len() != bands {
            return bad("water, land and cloud spectra need the same band count".into());
        }
        if !(self.noise_std >= 0.0) || self.water.std.iter().chain(&self.land.std).any(|s| !(*s >= 0.0)) {
            return bad("standard deviations must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) {
            return bad("cloud_probability must lie in [0, 1]".into());
        }
        let (r0, r1) = self.cloud_radius_range;
        if !(r0 >= 0.0 && r1 >= r0) {
            return bad("cloud_radius_range must be 0 <= min <= max".into());
        }
        if !(self.max_subpixel_shift >= 0.0) || self.frame_count == 0 {
            return bad("shift must be >= 0 and frame_count >= 1".into());
        }
        let m = self.meander;
        if m.amplitude_m != 0.0 {
            if !(m.period_m > 0.0) {
                return bad("meander period must be positive".into());
            }
            // tightest bend radius 1 / (A k^2) must exceed the half-width
            let k = TAU / m.period_m;
            if m.amplitude_m.abs() * k * k * self.river_width_m / 2.0 >= 1.0 {
                return bad("meander bends are tighter than the river half-width".into());
            }
        }
        Ok(())
    }

    pub fn hr_grid(&self) -> GeoGrid {
        GeoGrid::new(0.0, 0.0, self.hr_pixel_size, self.hr_size, self.hr_size)
            .expect("validated params give a valid grid")
    }

    pub fn lr_grid(&self) -> GeoGrid {
        self.hr_grid()
            .coarsen(self.downsample_factor)
            .expect("validated params give a valid grid")
    }

    pub fn centerline(&self) -> Centerline {
        Centerline {
            center_x: self.center_x_m,
            meander: self.meander,
        }
    }
}

/// The sinusoidal centreline `x(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centerline {
    center_x: f64,
    meander: Meander,
}

impl Centerline {
    fn k(&self) -> f64 {
        TAU / self.meander.period_m
    }

    pub fn x(&self, y: f64) -> f64 {
        let m = self.meander;
        if m.amplitude_m == 0.0 {
            return self.center_x;
        }
        self.center_x + m.amplitude_m * (self.k() * y + m.phase).sin()
    }

    pub fn slope(&self, y: f64) -> f64 {
        let m = self.meander;
        if m.amplitude_m == 0.0 {
            return 0.0;
        }
        m.amplitude_m * self.k() * (self.k() * y + m.phase).cos()
    }

    fn curvature_term(&self, y: f64) -> f64 {
        let m = self.meander;
        if m.amplitude_m == 0.0 {
            return 0.0;
        }
        -m.amplitude_m * self.k() * self.k() * (self.k() * y + m.phase).sin()
    }

    fn max_slope(&self) -> f64 {
        self.meander.amplitude_m.abs() * self.k()
    }

    /// Unit tangent pointing towards increasing y.
    pub fn tangent(&self, y: f64) -> (f64, f64) {
        let s = self.slope(y);
        let n = (1.0 + s * s).sqrt();
        (s / n, 1.0 / n)
    }

    /// Unit normal pointing towards increasing x.
    pub fn normal(&self, y: f64) -> (f64, f64) {
        let (tx, ty) = self.tangent(y);
        (ty, -tx)
    }

    /// Parameter `t` of the centreline point `(x(t), t)` closest to `(x, y)`.
    pub fn closest_parameter(&self, x: f64, y: f64) -> f64 {
        if self.meander.amplitude_m == 0.0 {
            return y;
        }
        let h = (x - self.x(y)).abs();
        let d2 = |t: f64| {
            let dx = self.x(t) - x;
            (t - y) * (t - y) + dx * dx
        };
        // the closest point is no further than h, so |t - y| <= h
        let steps = ((2.0 * h) / 0.5).ceil().max(1.0) as usize;
        let mut best = y;
        let mut best_d = d2(y);
        for i in 0..=steps {
            let t = y - h + 2.0 * h * i as f64 / steps as f64;
            let d = d2(t);
            if d < best_d {
                best = t;
                best_d = d;
            }
        }
        for _ in 0..8 {
            let dx = self.x(best) - x;
            let s = self.slope(best);
            let g = (best - y) + dx * s;
            let dg = 1.0 + s * s + dx * self.curvature_term(best);
            if dg <= 0.0 {
                break;
            }
            let next = best - g / dg;
            if d2(next) <= best_d {
                best_d = d2(next);
                best = next;
            } else {
                break;
            }
        }
        best
    }

    /// Signed distance from `(x, y)` to the centreline, positive on the +x side.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let h = x - self.x(y);
        if self.meander.amplitude_m == 0.0 {
            return h;
        }
        let t = self.closest_parameter(x, y);
        let d = ((self.x(t) - x).powi(2) + (t - y).powi(2)).sqrt();
        if h < 0.0 {
            -d
        } else {
            d
        }
    }

    /// Lower bound on the distance, cheap enough to skip far pixels.
    fn distance_lower_bound(&self, x: f64, y: f64) -> f64 {
        let s = self.max_slope();
        (x - self.x(y)).abs() / (1.0 + s * s).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrScene {
    pub image: MultibandImage,
    pub mask: BinaryMask,
    pub centerline: Vec<(f64, f64)>,
}

/// Water membership for every high-resolution pixel.
pub fn river_mask(params: &SceneParams) -> Result<BinaryMask> {
    params.validate()?;
    let grid = params.hr_grid();
    let line = params.centerline();
    let half = params.river_width_m / 2.0;
    Ok(BinaryMask::from_fn(grid, |r, c| {
        let (x, y) = grid.pixel_center(r, c);
        if line.distance_lower_bound(x, y) > half + 1.0 {
            return false;
        }
        let s = line.signed_distance(x, y);
        (-half..half).contains(&s)
    }))
}

/// Renders the high-resolution image and label. Deterministic in `seed`.
pub fn generate_hr_scene(params: &SceneParams, seed: u64) -> Result<HrScene> {
    let mask = river_mask(params)?;
    let grid = *mask.grid();
    let bands = params.water.bands();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = grid.shape();
    let mut values = Array3::zeros((bands, h, w));
    for r in 0..h {
        for c in 0..w {
            let class = if mask.is_water(r, c) { &params.water } else { &params.land };
            for b in 0..bands {
                values[[b, r, c]] = class.mean[b] + class.std[b] * standard_normal(&mut rng);
            }
        }
    }
    let line = params.centerline();
    let centerline = (0..=h)
        .map(|r| {
            let y = grid.origin_y() + r as f64 * grid.pixel_size();
            (grid.origin_x() + line.x(y - grid.origin_y()), y)
        })
        .collect();
    Ok(HrScene {
        image: MultibandImage::from_values(grid, values)?,
        mask,
        centerline,
    })
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Translates an image by `(dx, dy)` pixels with bilinear sampling, clamping at the border.
pub fn shift_image(img: &MultibandImage, dx: f64, dy: f64) -> Result<MultibandImage> {
    if dx == 0.0 && dy == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = img.grid().shape();
    let src = img.values();
    let axis = |i: usize, d: f64, n: usize| {
        let u = (i as f64 + d).clamp(0.0, (n - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, u - lo as f64)
    };
    let cols: Vec<_> = (0..w).map(|c| axis(c, dx, w)).collect();
    let rows: Vec<_> = (0..h).map(|r| axis(r, dy, h)).collect();
    let values = Array3::from_shape_fn(src.raw_dim(), |(b, r, c)| {
        let (r0, r1, wr) = rows[r];
        let (c0, c1, wc) = cols[c];
        let top = src[[b, r0, c0]] + wc * (src[[b, r0, c1]] - src[[b, r0, c0]]);
        let bot = src[[b, r1, c0]] + wc * (src[[b, r1, c1]] - src[[b, r1, c0]]);
        top + wr * (bot - top)
    });
    MultibandImage::new(*img.grid(), values, img.nodata().clone())
}

/// Pixels whose centre lies inside the circle, in pixel units with `(0, 0)`
/// at the top-left corner.
pub fn disk_pixels(shape: (usize, usize), center: (f64, f64), radius: f64) -> Vec<(usize, usize)> {
    let (h, w) = shape;
    let (cr, cc) = center;
    let r0 = (cr - radius - 1.0).floor().max(0.0) as usize;
    let r1 = ((cr + radius + 1.0).ceil().max(0.0) as usize).min(h);
    let c0 = (cc - radius - 1.0).floor().max(0.0) as usize;
    let c1 = ((cc + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let mut out = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let (dr, dc) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
            if dr * dr + dc * dc <= radius * radius {
                out.push((r, c));
            }
        }
    }
    out
}

/// Low-resolution acquisitions of an HR image: per frame a random sub-pixel
/// translation, block averaging, sensor noise and zero or more opaque cloud disks.
pub fn degrade_to_lr_stack(
    hr_img: &MultibandImage,
    params: &SceneParams,
    seed: u64,
) -> Result<Vec<(MultibandImage, FrameMetadata)>> {
    params.validate()?;
    if hr_img.bands() != params.cloud.len() {
        return Err(Error::Shape(format!(
            "image has {} bands, cloud spectrum {}",
            hr_img.bands(),
            params.cloud.len()
        )));
    }
    let f = params.downsample_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = params.frame_count;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let s = params.max_subpixel_shift * f as f64;
        let (dx, dy) = if s > 0.0 {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0.0, 0.0)
        };
        let shifted = shift_image(hr_img, dx, dy)?;
        let lr = block_downsample(&shifted, f)?;
        let (grid, mut values, nodata) = lr.into_parts();
        if params.noise_std > 0.0 {
            for v in values.iter_mut() {
                *v += params.noise_std * standard_normal(&mut rng);
            }
        }
        let (h, w) = grid.shape();
        let mut clouded = Array2::from_elem((h, w), false);
        let mut disks = 0;
        while disks < 3 && params.cloud_probability > 0.0 && rng.random_bool(params.cloud_probability) {
            disks += 1;
            let center = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            let (r0, r1) = params.cloud_radius_range;
            let radius = if r1 > r0 { rng.random_range(r0..r1) } else { r0 } / grid.pixel_size();
            for (r, c) in disk_pixels((h, w), center, radius) {
                clouded[[r, c]] = true;
            }
        }
        for ((r, c), &cl) in clouded.indexed_iter() {
            if cl {
                for (b, v) in params.cloud.iter().enumerate() {
                    values[[b, r, c]] = *v;
                }
            }
        }
        let cloud_fraction = clouded.iter().filter(|&&c| c).count() as f64 / grid.len() as f64;
        let image = MultibandImage::new(grid, values, nodata)?;
        let timestamp = params.anchor + Duration::days(5 * (j as i64 - (m / 2) as i64));
        let meta = FrameMetadata::new(
            timestamp,
            cloud_fraction,
            image.nodata_count(),
            format!("synthetic-{j:02}"),
        )?;
        out.push((image, meta));
    }
    Ok(out)
}

/// Ground-truth widths for transects perpendicular to the centreline.
pub fn analytic_widths(params: &SceneParams, transects: &[Transect]) -> Result<Vec<f64>> {
    params.validate()?;
    let grid = params.hr_grid();
    let line = params.centerline();
    transects
        .iter()
        .map(|t| {
            let (cx, cy) = t.center();
            let (x, y) = (cx - grid.origin_x(), cy - grid.origin_y());
            let (tx, ty) = line.tangent(line.closest_parameter(x, y));
            let (nx, ny) = t.normal();
            let dot = nx * tx + ny * ty;
            if dot.abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "transect {} is not perpendicular to the centreline (cos = {dot:.3e})",
                    t.id()
                )));
            }
            Ok(params.river_width_m)
        })
        .collect()
}

/// Evenly spaced stations along the river, each spanning the channel plus
/// `margin_m` on both banks, with analytic truth attached.
pub fn make_transects(params: &SceneParams, count: usize, margin_m: f64) -> Result<Vec<Transect>> {
    params.validate()?;
    let grid = params.hr_grid();
    let line = params.centerline();
    let span = grid.height() as f64 * grid.pixel_size();
    (0..count)
        .map(|k| {
            let y = span * (k as f64 + 0.5) / count as f64;
            let center = (grid.origin_x() + line.x(y), grid.origin_y() + y);
            Ok(Transect::new(
                format!("t{k:02}"),
                center,
                line.normal(y),
                params.river_width_m / 2.0 + margin_m,
            )?
            .with_truth(params.river_width_m))
        })
        .collect()
}

/// One complete synthetic scene: HR label and image, LR stack and transects.
pub fn generate_scene_series(scene_id: &str, params: &SceneParams, transects: usize) -> Result<SceneSeries> {
    let hr = generate_hr_scene(params, params.seed)?;
    let stack = degrade_to_lr_stack(&hr.image, params, params.seed ^ 0x5eed_f4a3_0000_0001)?;
    let frames = stack
        .into_iter()
        .map(|(image, meta)| Frame { image, meta })
        .collect();
    let margin = 2.0 * params.hr_pixel_size * params.downsample_factor as f64;
    Ok(SceneSeries::new(scene_id, frames, hr.mask, params.anchor)?
        .with_hr_image(hr.image)?
        .with_transects(make_transects(params, transects, margin)?))
}

/// Settings of a generated benchmark. Per-scene river geometry is drawn from
/// the listed ranges; everything else comes from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub seed: u64,
    pub transects_per_scene: usize,
    pub width_range_m: (f64, f64),
    pub amplitude_range_m: (f64, f64),
    pub period_range_m: (f64, f64),
    /// Maximum offset of the river axis from the image centre.
    pub axis_jitter_m: f64,
    /// Maximum per-scene offset added to every land band.
    pub land_jitter: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub base: SceneParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scenes: 200,
            seed: 0,
            transects_per_scene: 4,
            width_range_m: (27.0, 51.0),
            amplitude_range_m: (0.0, 20.0),
            period_range_m: (250.0, 500.0),
            axis_jitter_m: 15.0,
            land_jitter: 0.03,
            train_fraction: 0.6,
            val_fraction: 0.2,
            base: SceneParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Invalid("scenes must be >= 1".into()));
        }
        let ok_range = |(a, b): (f64, f64)| a <= b && a.is_finite() && b.is_finite();
        if !(ok_range(self.width_range_m) && ok_range(self.amplitude_range_m) && ok_range(self.period_range_m)) {
            return Err(Error::Invalid("parameter ranges must satisfy min <= max".into()));
        }
        if !(self.train_fraction >= 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return Err(Error::Invalid("split fractions must be >= 0 and sum to <= 1".into()));
        }
        self.base.validate()
    }

    /// Geometry and seed of scene `index`, reproducible on its own.
    pub fn scene_params(&self, index: usize) -> SceneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let mut draw = |(a, b): (f64, f64)| if b > a { rng.random_range(a..b) } else { a };
        let mut p = self.base.clone();
        p.river_width_m = draw(self.width_range_m);
        p.meander = Meander {
            amplitude_m: draw(self.amplitude_range_m),
            period_m: draw(self.period_range_m),
            phase: draw((0.0, TAU)),
        };
        let span = p.hr_size as f64 * p.hr_pixel_size;
        p.center_x_m = span / 2.0 + draw((-self.axis_jitter_m, self.axis_jitter_m));
        let shift = draw((-self.land_jitter, self.land_jitter));
        for m in &mut p.land.mean {
            *m += shift;
        }
        p.seed = rng.random();
        p
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n_train = (self.scenes as f64 * self.train_fraction).round() as usize;
        let n_val = (self.scenes as f64 * self.val_fraction).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:04}")
}

/// Generates every scene of the benchmark, in parallel, deterministically.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    use rayon::prelude::*;
    spec.validate()?;
    let scenes = (0..spec.scenes)
        .into_par_iter()
        .map(|i| {
            let p = spec.scene_params(i);
            Ok((spec.split_of(i), generate_scene_series(&scene_id(i), &p, spec.transects_per_scene)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(
        crate::ingest::DEFAULT_WINDOW_DAYS,
        spec.base.frame_count,
        spec.base.water.bands(),
    );
    manifest.scenes = scenes
        .iter()
        .map(|(split, s)| ManifestEntry {
            scene_id: s.scene_id().to_string(),
            split: *split,
            path: format!("scenes/{}", s.scene_id()),
            anchor: s.anchor(),
        })
        .collect();
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::ingest::make_lr_label;
    use crate::width::{estimate_width, widths_for_scene, WidthRule};

    fn straight(width: f64) -> SceneParams {
        SceneParams {
            river_width_m: width,
            meander: Meander::STRAIGHT,
            ..SceneParams::default()
        }
    }

    #[test]
    fn straight_river_rows_have_fixed_run_length() {
        let mask = river_mask(&straight(45.0)).unwrap();
        for row in mask.values().rows() {
            let run: usize = row.iter().map(|&v| v as usize).sum();
            assert_eq!(run, 15);
        }
    }

    #[test]
    fn noiseless_scene_has_two_spectra() {
        let mut p = SceneParams::default();
        p.water.std = vec![0.0; 4];
        p.land.std = vec![0.0; 4];
        let hr = generate_hr_scene(&p, 7).unwrap();
        let mut seen: Vec<Vec<u64>> = Vec::new();
        let v = hr.image.values();
        for r in 0..64 {
            for c in 0..64 {
                let px: Vec<u64> = (0..4).map(|b| v[[b, r, c]].to_bits()).collect();
                if !seen.contains(&px) {
                    seen.push(px);
                }
            }
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn same_seed_same_scene() {
        let p = SceneParams::default();
        let a = generate_scene_series("a", &p, 4).unwrap();
        let b = generate_scene_series("a", &p, 4).unwrap();
        assert_eq!(a, b);
        let mut q = p.clone();
        q.seed = 1;
        assert_ne!(a, generate_scene_series("a", &q, 4).unwrap());
    }

    #[test]
    fn cloud_free_frames() {
        let p = SceneParams { cloud_probability: 0.0, ..SceneParams::default() };
        let hr = generate_hr_scene(&p, 1).unwrap();
        let stack = degrade_to_lr_stack(&hr.image, &p, 2).unwrap();
        assert_eq!(stack.len(), 8);
        assert!(stack.iter().all(|(_, m)| m.cloud_fraction == 0.0));
        let days: Vec<i64> = stack.windows(2).map(|w| (w[1].1.timestamp - w[0].1.timestamp).num_days()).collect();
        assert!(days.iter().all(|&d| d == 5));
    }

    #[test]
    fn degenerate_pipeline_is_block_mean() {
        let p = SceneParams {
            cloud_probability: 0.0,
            noise_std: 0.0,
            max_subpixel_shift: 0.0,
            ..SceneParams::default()
        };
        let hr = generate_hr_scene(&p, 1).unwrap();
        let expected = block_downsample(&hr.image, 4).unwrap();
        for (img, _) in degrade_to_lr_stack(&hr.image, &p, 9).unwrap() {
            assert_eq!(img, expected);
        }
    }

    #[test]
    fn disk_fraction_matches_center_in_circle_count() {
        let (cr, cc, rad) = (70.3, 81.9, 11.4);
        let pixels = disk_pixels((150, 150), (cr, cc), rad);
        let mut brute = 0;
        for r in 0..150 {
            for c in 0..150 {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                if (y - cr).powi(2) + (x - cc).powi(2) <= rad * rad {
                    brute += 1;
                }
            }
        }
        assert_eq!(pixels.len(), brute);
        let fraction = pixels.len() as f64 / 22500.0;
        assert!((fraction - std::f64::consts::PI * rad * rad / 22500.0).abs() < 0.002);
    }

    #[test]
    fn recorded_cloud_fraction_counts_cloud_pixels() {
        let p = SceneParams { cloud_probability: 0.9, noise_std: 0.0, ..SceneParams::default() };
        let hr = generate_hr_scene(&p, 3).unwrap();
        let stack = degrade_to_lr_stack(&hr.image, &p, 4).unwrap();
        assert!(stack.iter().any(|(_, m)| m.cloud_fraction > 0.0));
        for (img, m) in &stack {
            let bright = (0..16)
                .flat_map(|r| (0..16).map(move |c| (r, c)))
                .filter(|&(r, c)| (0..4).all(|b| img.values()[[b, r, c]] == p.cloud[b]))
                .count();
            assert_eq!(bright as f64 / 256.0, m.cloud_fraction);
        }
    }

    #[test]
    fn analytic_widths_and_contract() {
        let p = straight(45.0);
        let ts = make_transects(&p, 10, 12.0).unwrap();
        assert_eq!(analytic_widths(&p, &ts).unwrap(), vec![45.0; 10]);
        let skew = Transect::new("s", ts[0].center(), (0.6, 0.8), 30.0).unwrap();
        assert!(matches!(analytic_widths(&p, &[skew]), Err(Error::Contract(_))));

        let curvy = SceneParams::default();
        let ts = make_transects(&curvy, 6, 12.0).unwrap();
        assert_eq!(analytic_widths(&curvy, &ts).unwrap(), vec![curvy.river_width_m; 6]);
    }

    #[test]
    fn measured_straight_river_within_one_pixel() {
        let p = straight(45.0);
        let mask = river_mask(&p).unwrap();
        let ts = make_transects(&p, 10, 12.0).unwrap();
        for m in widths_for_scene(&mask, &ts, WidthRule::PixelCount) {
            assert!(m.valid);
            assert!((m.predicted_width - 45.0).abs() <= 3.0, "{}", m.predicted_width);
        }
    }

    #[test]
    fn meandering_river_chord_width_near_truth() {
        let p = SceneParams::default();
        let mask = river_mask(&p).unwrap();
        for t in make_transects(&p, 8, 12.0).unwrap() {
            let chord = crate::width::estimate_width_with(&mask, &t, WidthRule::ChordLength);
            assert!((chord.predicted_width - p.river_width_m).abs() <= 2.0 * 3.0 * 2f64.sqrt());
            assert!(estimate_width(&mask, &t).water_pixel_count > 0);
        }
    }

    #[test]
    fn signed_distance_matches_dense_search() {
        let line = SceneParams::default().centerline();
        for &(x, y) in &[(80.0, 10.0), (120.0, 150.0), (96.0, 77.0), (60.0, 190.0)] {
            let mut best = f64::INFINITY;
            for i in 0..200_000 {
                let t = -100.0 + i as f64 * 0.002;
                best = best.min(((line.x(t) - x).powi(2) + (t - y).powi(2)).sqrt());
            }
            assert!((line.signed_distance(x, y).abs() - best).abs() < 1e-3);
        }
    }

    #[test]
    fn dataset_is_about_one_fifth_water() {
        let spec = DatasetSpec { scenes: 40, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec).unwrap();
        let frac: f64 = ds.scenes.iter().map(|(_, s)| s.hr_label().water_fraction()).sum::<f64>() / 40.0;
        assert!((frac - 0.2).abs() < 0.03, "{frac}");
        assert_eq!(ds.split(Split::Train).len(), 24);
        assert_eq!(ds.split(Split::Val).len(), 8);
        assert_eq!(ds.split(Split::Test).len(), 8);
        ds.manifest.validate().unwrap();
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { scenes: 3, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec).unwrap();
        ds.save(tmp.path()).unwrap();
        let back = Dataset::load(&tmp.path().join("manifest.toml")).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        // values are stored as f32
        for ((_, a), (_, b)) in ds.scenes.iter().zip(&back.scenes) {
            assert_eq!(a.hr_label(), b.hr_label());
            assert_eq!(a.transects(), b.transects());
            let diff = (a.frames()[0].image.values() - b.frames()[0].image.values()).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-6));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SceneParams { downsample_factor: 5, ..SceneParams::default() }.validate().is_err());
        assert!(SceneParams { river_width_m: 2.0, ..SceneParams::default() }.validate().is_err());
        assert!(SceneParams { noise_std: -0.1, ..SceneParams::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn noiseless_downsample_commutes_with_majority_label(
            width in 6.0f64..60.0,
            offset in -30.0f64..30.0,
            amplitude in 0.0f64..15.0,
        ) {
            let mut p = SceneParams {
                river_width_m: width,
                center_x_m: 96.0 + offset,
                meander: Meander { amplitude_m: amplitude, period_m: 400.0, phase: 0.3 },
                ..SceneParams::default()
            };
            p.water = Spectrum::new(vec![0.0], vec![0.0]).unwrap();
            p.land = Spectrum::new(vec![1.0], vec![0.0]).unwrap();
            p.cloud = vec![1.0];
            let hr = generate_hr_scene(&p, 0).unwrap();
            let lr = block_downsample(&hr.image, 4).unwrap();
            let label = make_lr_label(&hr.mask, lr.grid()).unwrap();
            let thresholded = BinaryMask::from_fn(*lr.grid(), |r, c| lr.values()[[0, r, c]] <= 0.5);
            prop_assert_eq!(label, thresholded);
        }

        #[test]
        fn same_seed_identical_stack(seed in any::<u64>()) {
            let p = SceneParams { hr_size: 16, center_x_m: 24.0, ..SceneParams::default() };
            let hr = generate_hr_scene(&p, seed).unwrap();
            prop_assert_eq!(
                degrade_to_lr_stack(&hr.image, &p, seed).unwrap(),
                degrade_to_lr_stack(&hr.image, &p, seed).unwrap()
            );
        }
    }
}
