//! Pairing high-resolution labels with low-resolution time series.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    self, read_header, read_image, read_mask, resample_to_grid, BinaryMask, GeoGrid,
    MultibandImage, ResampleMode,
};
use crate::width::{read_transects, write_transects, Transect};

/// Default half-width of the acquisition window around the label date.
pub const DEFAULT_WINDOW_DAYS: i64 = 61;
pub const DEFAULT_FRAMES: usize = 8;
pub const MANIFEST_FORMAT: &str = "rivolution-manifest/1";
const SCENE_FILE: &str = "scene.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub timestamp: DateTime<Utc>,
    pub cloud_fraction: f64,
    pub nodata_count: usize,
    pub source_id: String,
}

impl FrameMetadata {
    pub fn new(
        timestamp: DateTime<Utc>,
        cloud_fraction: f64,
        nodata_count: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&cloud_fraction) {
            return Err(Error::Invalid(format!(
                "cloud fraction {cloud_fraction} outside [0, 1]"
            )));
        }
        Ok(FrameMetadata {
            timestamp,
            cloud_fraction,
            nodata_count,
            source_id: source_id.into(),
        })
    }

    pub fn to_attributes(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("timestamp".into(), self.timestamp.to_rfc3339().into());
        t.insert("cloud_fraction".into(), self.cloud_fraction.into());
        t.insert("nodata_count".into(), (self.nodata_count as i64).into());
        t.insert("source_id".into(), self.source_id.clone().into());
        t
    }

    pub fn from_attributes(attrs: &toml::Table, path: &Path) -> Result<Self> {
        let get = |k: &str| {
            attrs
                .get(k)
                .ok_or_else(|| Error::format(path, format!("missing frame attribute `{k}`")))
        };
        let timestamp = parse_time(get("timestamp")?, path)?;
        let cloud_fraction = match get("cloud_fraction")? {
            toml::Value::Float(f) => *f,
            toml::Value::Integer(i) => *i as f64,
            _ => return Err(Error::format(path, "cloud_fraction must be a number")),
        };
        let nodata_count = get("nodata_count")?
            .as_integer()
            .filter(|&n| n >= 0)
            .ok_or_else(|| Error::format(path, "nodata_count must be a non-negative integer"))?
            as usize;
        let source_id = get("source_id")?
            .as_str()
            .ok_or_else(|| Error::format(path, "source_id must be a string"))?
            .to_string();
        Self::new(timestamp, cloud_fraction, nodata_count, source_id)
            .map_err(|e| Error::format(path, e))
    }
}

fn parse_time(v: &toml::Value, path: &Path) -> Result<DateTime<Utc>> {
    match v {
        toml::Value::String(s) => DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| Error::format(path, format!("bad timestamp {s:?}: {e}"))),
        toml::Value::Datetime(d) => DateTime::parse_from_rfc3339(&d.to_string())
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| Error::format(path, format!("bad timestamp {d}: {e}"))),
        _ => Err(Error::format(path, "timestamp must be an RFC 3339 string")),
    }
}

/// One low-resolution acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: MultibandImage,
    pub meta: FrameMetadata,
}

impl AsRef<FrameMetadata> for Frame {
    fn as_ref(&self) -> &FrameMetadata {
        &self.meta
    }
}

impl AsRef<FrameMetadata> for FrameMetadata {
    fn as_ref(&self) -> &FrameMetadata {
        self
    }
}

/// Frames whose timestamp lies within `half_window` of `anchor`, in input order.
pub fn window_filter<T: AsRef<FrameMetadata> + Clone>(
    candidates: &[T],
    anchor: DateTime<Utc>,
    half_window: Duration,
) -> Vec<T> {
    candidates
        .iter()
        .filter(|f| (f.as_ref().timestamp - anchor).abs() <= half_window)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub frames: Vec<T>,
    /// Set when fewer than `m` frames were available and some were repeated.
    pub warning: Option<String>,
}

/// Keeps the `m` frames with the fewest no-data pixels (earlier timestamp wins ties),
/// returned in timestamp order. With fewer than `m` frames the available ones
/// are repeated cyclically, earliest first.
pub fn select_frames<T: AsRef<FrameMetadata> + Clone>(frames: &[T], m: usize) -> Result<Selection<T>> {
    if m == 0 {
        return Err(Error::Invalid("frame count m must be >= 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::Ingest("no frames to select from".into()));
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frames[a].as_ref(), frames[b].as_ref());
        fa.nodata_count
            .cmp(&fb.nodata_count)
            .then(fa.timestamp.cmp(&fb.timestamp))
            .then(a.cmp(&b))
    });
    order.truncate(m);
    order.sort_by(|&a, &b| {
        frames[a]
            .as_ref()
            .timestamp
            .cmp(&frames[b].as_ref().timestamp)
            .then(a.cmp(&b))
    });
    let base: Vec<T> = order.iter().map(|&i| frames[i].clone()).collect();
    if base.len() == m {
        return Ok(Selection {
            frames: base,
            warning: None,
        });
    }
    let warning = format!(
        "only {} frame(s) available, repeating cyclically to reach {m}",
        base.len()
    );
    log::warn!("{warning}");
    let frames = base.iter().cycle().take(m).cloned().collect();
    Ok(Selection {
        frames,
        warning: Some(warning),
    })
}

/// Majority vote of high-resolution pixels (by centre) inside each low-resolution cell;
/// an exact tie counts as water.
pub fn make_lr_label(hr_label: &BinaryMask, lr_grid: &GeoGrid) -> Result<BinaryMask> {
    let hr = hr_label.grid();
    if !hr.same_extent(lr_grid) {
        return Err(Error::Alignment(format!(
            "label extent {:?} differs from LR extent {:?}",
            hr.extent(),
            lr_grid.extent()
        )));
    }
    let (lh, lw) = lr_grid.shape();
    let mut water = Array2::<u32>::zeros((lh, lw));
    let mut total = Array2::<u32>::zeros((lh, lw));
    for r in 0..hr.height() {
        for c in 0..hr.width() {
            let (x, y) = hr.pixel_center(r, c);
            let (u, v) = lr_grid.to_grid_coords(x, y);
            let lc = (u.floor() as usize).min(lw - 1);
            let lr = (v.floor() as usize).min(lh - 1);
            total[[lr, lc]] += 1;
            water[[lr, lc]] += hr_label.values()[[r, c]] as u32;
        }
    }
    Ok(BinaryMask::from_fn(*lr_grid, |r, c| {
        total[[r, c]] > 0 && 2 * water[[r, c]] >= total[[r, c]]
    }))
}

/// One training/evaluation unit: `m` co-registered low-resolution frames and
/// the high-resolution label they are paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSeries {
    scene_id: String,
    frames: Vec<Frame>,
    hr_label: BinaryMask,
    anchor: DateTime<Utc>,
    hr_image: Option<MultibandImage>,
    transects: Vec<Transect>,
}

impl SceneSeries {
    pub fn new(
        scene_id: impl Into<String>,
        frames: Vec<Frame>,
        hr_label: BinaryMask,
        anchor: DateTime<Utc>,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        let first = frames
            .first()
            .ok_or_else(|| Error::Ingest(format!("scene {scene_id} has no frames")))?;
        let lr = *first.image.grid();
        let bands = first.image.bands();
        for f in &frames {
            if f.image.grid() != &lr {
                return Err(Error::Alignment(format!(
                    "scene {scene_id}: frames are on different grids"
                )));
            }
            if f.image.bands() != bands {
                return Err(Error::Shape(format!(
                    "scene {scene_id}: frames have different band counts"
                )));
            }
        }
        if !hr_label.grid().same_extent(&lr) {
            return Err(Error::Alignment(format!(
                "scene {scene_id}: label extent differs from frame extent"
            )));
        }
        if !is_cyclically_sorted(&frames) {
            return Err(Error::Invalid(format!(
                "scene {scene_id}: frames are not in timestamp order"
            )));
        }
        Ok(SceneSeries {
            scene_id,
            frames,
            hr_label,
            anchor,
            hr_image: None,
            transects: Vec::new(),
        })
    }

    /// Attaches the high-resolution image used by the HR reference regime.
    pub fn with_hr_image(mut self, img: MultibandImage) -> Result<Self> {
        if img.grid() != self.hr_label.grid() {
            return Err(Error::Alignment(format!(
                "scene {}: HR image grid differs from label grid",
                self.scene_id
            )));
        }
        self.hr_image = Some(img);
        Ok(self)
    }

    pub fn with_transects(mut self, transects: Vec<Transect>) -> Self {
        self.transects = transects;
        self
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn images(&self) -> Vec<&MultibandImage> {
        self.frames.iter().map(|f| &f.image).collect()
    }

    pub fn hr_label(&self) -> &BinaryMask {
        &self.hr_label
    }

    pub fn hr_grid(&self) -> &GeoGrid {
        self.hr_label.grid()
    }

    pub fn lr_grid(&self) -> &GeoGrid {
        self.frames[0].image.grid()
    }

    pub fn bands(&self) -> usize {
        self.frames[0].image.bands()
    }

    pub fn anchor(&self) -> DateTime<Utc> {
        self.anchor
    }

    pub fn hr_image(&self) -> Option<&MultibandImage> {
        self.hr_image.as_ref()
    }

    pub fn transects(&self) -> &[Transect] {
        &self.transects
    }

    /// True when every frame lies within `half_window` of the anchor.
    pub fn within_window(&self, half_window: Duration) -> bool {
        self.frames
            .iter()
            .all(|f| (f.meta.timestamp - self.anchor).abs() <= half_window)
    }

    /// Writes the scene as a directory: `scene.toml`, `label/`, `frames/NN/`,
    /// plus `hr_image/` and `transects.csv` when present. Repeated frames are
    /// stored once and referenced several times.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        raster::write_mask(&dir.join("label"), &self.hr_label, toml::Table::new())?;
        let mut stored: Vec<&Frame> = Vec::new();
        let mut refs = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let idx = match stored.iter().position(|s| *s == f) {
                Some(i) => i,
                None => {
                    let i = stored.len();
                    raster::write_image(
                        &dir.join(frame_dir_name(i)),
                        &f.image,
                        f.meta.to_attributes(),
                    )?;
                    stored.push(f);
                    i
                }
            };
            refs.push(frame_dir_name(idx));
        }
        let hr_image = match &self.hr_image {
            Some(img) => {
                raster::write_image(&dir.join("hr_image"), img, toml::Table::new())?;
                Some("hr_image".to_string())
            }
            None => None,
        };
        let transects = if self.transects.is_empty() {
            None
        } else {
            write_transects(&dir.join("transects.csv"), &self.transects)?;
            Some("transects.csv".to_string())
        };
        let record = SceneRecord {
            scene_id: self.scene_id.clone(),
            anchor: self.anchor,
            label: "label".into(),
            frames: refs,
            hr_image,
            transects,
        };
        let path = dir.join(SCENE_FILE);
        let text = toml::to_string(&record).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SCENE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: SceneRecord = toml::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let (label, _) = read_mask(&dir.join(&record.label))?;
        let mut frames = Vec::with_capacity(record.frames.len());
        for rel in &record.frames {
            let fdir = dir.join(rel);
            let (image, attrs) = read_image(&fdir)?;
            let meta = FrameMetadata::from_attributes(&attrs, &fdir.join("header.toml"))?;
            frames.push(Frame { image, meta });
        }
        let mut scene = SceneSeries::new(record.scene_id, frames, label, record.anchor)?;
        if let Some(rel) = &record.hr_image {
            scene = scene.with_hr_image(read_image(&dir.join(rel))?.0)?;
        }
        if let Some(rel) = &record.transects {
            scene = scene.with_transects(read_transects(&dir.join(rel))?);
        }
        Ok(scene)
    }
}

fn frame_dir_name(i: usize) -> String {
    format!("frames/{i:02}")
}

/// Sorted ascending, allowing the wrap-around produced by cyclic padding.
fn is_cyclically_sorted(frames: &[Frame]) -> bool {
    let distinct = frames
        .iter()
        .enumerate()
        .position(|(i, f)| frames[..i].contains(f))
        .unwrap_or(frames.len());
    let base = &frames[..distinct];
    base.windows(2).all(|w| w[0].meta.timestamp <= w[1].meta.timestamp)
        && frames.iter().enumerate().all(|(i, f)| f == &base[i % distinct])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    anchor: DateTime<Utc>,
    label: String,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hr_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transects: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub window_days: i64,
    pub frames: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            frames: DEFAULT_FRAMES,
        }
    }
}

impl IngestConfig {
    pub fn half_window(&self) -> Duration {
        Duration::days(self.window_days)
    }
}

/// Reads a label and candidate frames from raster directories, applies the
/// time window and frame selection, and co-registers the frames onto the
/// low-resolution grid spanning the label's extent.
pub fn build_scene(
    scene_id: &str,
    hr_label_dir: &Path,
    lr_frame_dirs: &[PathBuf],
    anchor: DateTime<Utc>,
    config: &IngestConfig,
) -> Result<(SceneSeries, Vec<String>)> {
    if config.window_days <= 0 {
        return Err(Error::Invalid("window must be positive".into()));
    }
    let (label, _) = read_mask(hr_label_dir)?;
    let mut candidates = Vec::with_capacity(lr_frame_dirs.len());
    for dir in lr_frame_dirs {
        let header = read_header(dir)?;
        let meta = FrameMetadata::from_attributes(&header.attributes, &dir.join("header.toml"))?;
        candidates.push(Candidate {
            dir: dir.clone(),
            grid: header.grid,
            meta,
        });
    }
    let windowed = window_filter(&candidates, anchor, config.half_window());
    if windowed.is_empty() {
        return Err(Error::Ingest(format!(
            "scene {scene_id}: no frames within ±{} days of {anchor}",
            config.window_days
        )));
    }
    let selection = select_frames(&windowed, config.frames)?;
    let mut warnings: Vec<String> = selection
        .warning
        .iter()
        .map(|w| format!("scene {scene_id}: {w}"))
        .collect();

    let lr_grid = label
        .grid()
        .with_pixel_size(selection.frames[0].grid.pixel_size())?;
    let mut loaded: Vec<(PathBuf, Frame)> = Vec::new();
    let mut frames = Vec::with_capacity(selection.frames.len());
    for cand in &selection.frames {
        if let Some((_, f)) = loaded.iter().find(|(d, _)| d == &cand.dir) {
            frames.push(f.clone());
            continue;
        }
        if !cand.grid.overlaps(label.grid()) {
            return Err(Error::Alignment(format!(
                "scene {scene_id}: frame {} does not overlap the label",
                cand.dir.display()
            )));
        }
        let (img, _) = read_image(&cand.dir)?;
        let image = if img.grid() == &lr_grid {
            img
        } else {
            resample_to_grid(&img, &lr_grid, ResampleMode::Bilinear)?
        };
        let mut meta = cand.meta.clone();
        meta.nodata_count = image.nodata_count();
        let frame = Frame { image, meta };
        loaded.push((cand.dir.clone(), frame.clone()));
        frames.push(frame);
    }
    let scene = SceneSeries::new(scene_id, frames, label, anchor)?;
    if scene.frames().iter().any(|f| f.meta.nodata_count == scene.lr_grid().len()) {
        warnings.push(format!("scene {scene_id}: a selected frame is entirely no-data"));
    }
    Ok((scene, warnings))
}

#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    dir: PathBuf,
    grid: GeoGrid,
    meta: FrameMetadata,
}

impl AsRef<FrameMetadata> for Candidate {
    fn as_ref(&self) -> &FrameMetadata {
        &self.meta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub split: Split,
    /// Scene directory, relative to the manifest.
    pub path: String,
    pub anchor: DateTime<Utc>,
}

/// Index of a paired dataset (`manifest.toml`).
///
/// ```toml
/// format = "rivolution-manifest/1"
/// window_days = 61
/// frames_per_scene = 8
/// channels = 4
///
/// [[scene]]
/// scene_id = "scene-0000"
/// split = "train"
/// path = "scenes/scene-0000"
/// anchor = "2024-06-01T00:00:00Z"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub window_days: i64,
    pub frames_per_scene: usize,
    pub channels: usize,
    #[serde(rename = "scene", default)]
    pub scenes: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(window_days: i64, frames_per_scene: usize, channels: usize) -> Self {
        DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            window_days,
            frames_per_scene,
            channels,
            scenes: Vec::new(),
        }
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }

    /// Splits are disjoint: every scene id appears once.
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Invalid(format!(
                "unsupported manifest format {:?}",
                self.format
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.scenes {
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "scene {} is listed more than once",
                    e.scene_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = toml::to_string(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates the manifest, including that every scene directory exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        m.validate().map_err(|e| Error::format(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for e in &m.scenes {
            if !root.join(&e.path).join(SCENE_FILE).is_file() {
                return Err(Error::Ingest(format!(
                    "scene {} not found at {}",
                    e.scene_id,
                    root.join(&e.path).display()
                )));
            }
        }
        Ok(m)
    }
}

/// A manifest plus its scenes, loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<(Split, SceneSeries)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SceneSeries> {
        self.scenes
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, sc)| sc)
            .collect()
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let scenes = manifest
            .scenes
            .iter()
            .map(|e| Ok((e.split, SceneSeries::load(&root.join(&e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        for (_, s) in &scenes {
            if s.bands() != manifest.channels {
                return Err(Error::Shape(format!(
                    "scene {} has {} bands, manifest says {}",
                    s.scene_id(),
                    s.bands(),
                    manifest.channels
                )));
            }
        }
        Ok(Dataset { manifest, scenes })
    }

    /// Writes `manifest.toml` and `scenes/<id>/` under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (_, s) in &self.scenes {
            s.save(&root.join("scenes").join(s.scene_id()))?;
        }
        self.manifest.save(&root.join("manifest.toml"))
    }
}
