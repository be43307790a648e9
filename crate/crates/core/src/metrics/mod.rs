//! Segmentation and width metrics, evaluation reports and their files.
//!
//! F1 in aggregates is micro-averaged: confusion counts are pooled over all
//! scenes of a split before precision and recall are taken.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Split;
use crate::raster::BinaryMask;
use crate::width::WidthMeasurement;

/// Scenes at or above this cloud fraction count as cloudy.
pub const CLOUDY_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl SegMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        SegMetrics { f1, precision, recall, tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Pools the confusion counts of several results.
    pub fn pooled<'a>(items: impl IntoIterator<Item = &'a SegMetrics>) -> SegMetrics {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for m in items {
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            tn += m.tn;
        }
        SegMetrics::from_counts(tp, fp, fn_, tn)
    }
}

/// Pixelwise confusion with water as the positive class.
pub fn seg_metrics(pred: &BinaryMask, truth: &BinaryMask) -> Result<SegMetrics> {
    if pred.grid() != truth.grid() {
        return Err(Error::Shape(format!(
            "prediction grid {:?} differs from truth grid {:?}",
            pred.grid(),
            truth.grid()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p == 1, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(SegMetrics::from_counts(tp, fp, fn_, tn))
}

/// Width error statistics; `None` fields mean there was nothing to average.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WidthMetrics {
    pub bias: Option<f64>,
    pub pct_bias: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub median_abs_err: Option<f64>,
    pub n: usize,
    /// Measurements left out of `pct_bias` because their truth width is zero.
    pub pct_excluded: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Bias, percent bias and absolute errors over the valid measurements that carry a truth width.
pub fn width_metrics(measurements: &[WidthMeasurement]) -> WidthMetrics {
    let pairs: Vec<(f64, f64)> = measurements
        .iter()
        .filter(|m| m.valid)
        .filter_map(|m| m.truth_width.map(|t| (m.predicted_width, t)))
        .collect();
    if pairs.is_empty() {
        return WidthMetrics::default();
    }
    let n = pairs.len() as f64;
    let bias = pairs.iter().map(|(p, t)| p - t).sum::<f64>() / n;
    let rel: Vec<f64> = pairs.iter().filter(|(_, t)| *t != 0.0).map(|(p, t)| (p - t) / t).collect();
    let pct_excluded = pairs.len() - rel.len();
    if pct_excluded > 0 {
        log::warn!("{pct_excluded} measurement(s) with zero truth width left out of percent bias");
    }
    let pct_bias = (!rel.is_empty()).then(|| 100.0 * rel.iter().sum::<f64>() / rel.len() as f64);
    let abs: Vec<f64> = pairs.iter().map(|(p, t)| (t - p).abs()).collect();
    WidthMetrics {
        bias: Some(bias),
        pct_bias,
        mean_abs_err: Some(abs.iter().sum::<f64>() / n),
        median_abs_err: median(abs),
        n: pairs.len(),
        pct_excluded,
    }
}

/// Mean F1 gain of temporal over single-frame prediction, split by cloudiness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudDelta {
    pub threshold: f64,
    pub cloudy: Option<f64>,
    pub clear: Option<f64>,
    pub n_cloudy: usize,
    pub n_clear: usize,
}

/// `per_scene` holds (single-frame, temporal, cloud fraction) per scene.
pub fn cloud_delta_f1(per_scene: &[(SegMetrics, SegMetrics, f64)], threshold: f64) -> CloudDelta {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let (mut cloudy, mut clear) = (Vec::new(), Vec::new());
    for (single, temporal, frac) in per_scene {
        let d = temporal.f1 - single.f1;
        if *frac >= threshold {
            cloudy.push(d);
        } else {
            clear.push(d);
        }
    }
    CloudDelta {
        threshold,
        cloudy: mean(&cloudy),
        clear: mean(&clear),
        n_cloudy: cloudy.len(),
        n_clear: clear.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFrameEval {
    /// Position of the frame in the scene's stack.
    pub frame_index: usize,
    pub metrics: SegMetrics,
    pub widths: Vec<WidthMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub metrics: SegMetrics,
    /// Cloud fraction of the single-frame reference acquisition.
    pub cloud_fraction: f64,
    pub cloudy: bool,
    pub widths: Vec<WidthMeasurement>,
    pub single: Option<SingleFrameEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub threshold: f64,
    pub f1_averaging: String,
    pub scenes: Vec<SceneEval>,
    pub aggregate: SegMetrics,
    pub width: WidthMetrics,
    pub single_aggregate: Option<SegMetrics>,
    pub single_width: Option<WidthMetrics>,
    pub cloud: Option<CloudDelta>,
    pub config: serde_json::Value,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Builds a report whose aggregates are computed from `scenes`.
    pub fn from_scenes(
        method: impl Into<String>,
        split: Split,
        threshold: f64,
        scenes: Vec<SceneEval>,
        config: serde_json::Value,
    ) -> Self {
        let mut warnings = Vec::new();
        if scenes.is_empty() {
            let w = format!("split {split} has no scenes");
            log::warn!("{w}");
            warnings.push(w);
        }
        let aggregate = SegMetrics::pooled(scenes.iter().map(|s| &s.metrics));
        let widths: Vec<WidthMeasurement> = scenes.iter().flat_map(|s| s.widths.iter().cloned()).collect();
        let invalid = widths.iter().filter(|m| !m.valid).count();
        if invalid > 0 {
            warnings.push(format!("{invalid} transect(s) missed the grid and were excluded"));
        }
        let has_single = !scenes.is_empty() && scenes.iter().all(|s| s.single.is_some());
        let (single_aggregate, single_width, cloud) = if has_single {
            let singles: Vec<&SingleFrameEval> = scenes.iter().filter_map(|s| s.single.as_ref()).collect();
            let sw: Vec<WidthMeasurement> = singles.iter().flat_map(|s| s.widths.iter().cloned()).collect();
            let triples: Vec<_> = scenes
                .iter()
                .map(|s| (s.single.as_ref().expect("checked").metrics, s.metrics, s.cloud_fraction))
                .collect();
            (
                Some(SegMetrics::pooled(singles.iter().map(|s| &s.metrics))),
                Some(width_metrics(&sw)),
                Some(cloud_delta_f1(&triples, CLOUDY_THRESHOLD)),
            )
        } else {
            (None, None, None)
        };
        EvalReport {
            method: method.into(),
            split,
            threshold,
            f1_averaging: "micro".into(),
            width: width_metrics(&widths),
            scenes,
            aggregate,
            single_aggregate,
            single_width,
            cloud,
            config,
            warnings,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_FIGURES: [&str; 2] = ["widths_scatter.svg", "delta_f1.svg"];
pub const COMPARISON_FIGURES: [&str; 3] = ["f1_by_method.svg", "width_error_by_method.svg", "delta_f1_by_method.svg"];

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_else(|| "n/a".into())
}

fn seg_row(name: &str, m: &SegMetrics) -> String {
    format!("| {name} | {:.4} | {:.4} | {:.4} |\n", m.precision, m.recall, m.f1)
}

fn width_row(name: &str, w: &WidthMetrics) -> String {
    format!(
        "| {name} | {} | {} | {} | {} | {} |\n",
        opt(w.bias, 2),
        opt(w.pct_bias, 2),
        opt(w.mean_abs_err, 2),
        opt(w.median_abs_err, 2),
        w.n
    )
}

const SEG_HEADER: &str = "| method | precision | recall | F1 |\n|---|---|---|---|\n";
const WIDTH_HEADER: &str =
    "| method | bias (m) | bias (%) | mean abs err (m) | median abs err (m) | n |\n|---|---|---|---|---|---|\n";
const CLOUD_HEADER: &str = "| method | ΔF1 cloudy | ΔF1 clear | n cloudy | n clear |\n|---|---|---|---|---|\n";

fn cloud_row(name: &str, c: &CloudDelta) -> String {
    format!(
        "| {name} | {} | {} | {} | {} |\n",
        opt(c.cloudy, 4),
        opt(c.clear, 4),
        c.n_cloudy,
        c.n_clear
    )
}

/// Writes `report.json`, `scenes.csv`, `widths.csv`, `summary.md` and the
/// figures in [`REPORT_FIGURES`] into `out_dir`; returns the paths written.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(out_dir.join(REPORT_JSON), e))?;
    write(out_dir.join(REPORT_JSON), &json, &mut written)?;

    let path = out_dir.join("scenes.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    let err = |e: csv::Error| Error::format(out_dir.join("scenes.csv"), e);
    w.write_record([
        "scene_id", "cloud_fraction", "cloudy", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "single_f1",
    ])
    .map_err(err)?;
    for s in &report.scenes {
        let m = &s.metrics;
        w.write_record([
            s.scene_id.clone(),
            s.cloud_fraction.to_string(),
            s.cloudy.to_string(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tn.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            s.single.as_ref().map(|x| x.metrics.f1.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = out_dir.join("widths.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    let err = |e: csv::Error| Error::format(out_dir.join("widths.csv"), e);
    w.write_record(["scene_id", "transect_id", "truth_width_m", "predicted_width_m", "single_predicted_width_m", "valid"])
        .map_err(err)?;
    for s in &report.scenes {
        for (i, m) in s.widths.iter().enumerate() {
            let single = s.single.as_ref().and_then(|x| x.widths.get(i)).map(|x| x.predicted_width.to_string());
            w.write_record([
                s.scene_id.clone(),
                m.transect_id.clone(),
                m.truth_width.map(|t| t.to_string()).unwrap_or_default(),
                m.predicted_width.to_string(),
                single.unwrap_or_default(),
                m.valid.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let mut md = format!(
        "# Evaluation: {}\n\nSplit: {} ({} scenes), threshold {}, F1 {}-averaged over pixels.\n\n## Segmentation\n\n{SEG_HEADER}",
        report.method,
        report.split,
        report.scenes.len(),
        report.threshold,
        report.f1_averaging
    );
    md.push_str(&seg_row("temporal", &report.aggregate));
    if let Some(s) = &report.single_aggregate {
        md.push_str(&seg_row("single-frame", s));
    }
    md.push_str(&format!("\n## River width\n\n{WIDTH_HEADER}"));
    md.push_str(&width_row("temporal", &report.width));
    if let Some(s) = &report.single_width {
        md.push_str(&width_row("single-frame", s));
    }
    if let Some(c) = &report.cloud {
        md.push_str(&format!("\n## Cloud stratification (threshold {})\n\n{CLOUD_HEADER}", c.threshold));
        md.push_str(&cloud_row(&report.method, c));
    }
    if !report.warnings.is_empty() {
        md.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            md.push_str(&format!("- {w}\n"));
        }
    }
    write(out_dir.join("summary.md"), &md, &mut written)?;

    let points: Vec<(f64, f64)> = report
        .scenes
        .iter()
        .flat_map(|s| s.widths.iter())
        .filter(|m| m.valid)
        .filter_map(|m| m.truth_width.map(|t| (t, m.predicted_width)))
        .collect();
    let fig = svg::scatter(&format!("Predicted vs truth width: {}", report.method), &points, "truth width (m)", "predicted width (m)");
    write(out_dir.join(REPORT_FIGURES[0]), &fig, &mut written)?;
    let (labels, values): (Vec<String>, Vec<f64>) = report
        .cloud
        .iter()
        .flat_map(|c| [("cloudy", c.cloudy), ("clear", c.clear)])
        .filter_map(|(l, v)| v.map(|v| (l.to_string(), v)))
        .unzip();
    let fig = svg::bar_chart(&format!("F1 gain from temporal input: {}", report.method), &labels, &values, "ΔF1");
    write(out_dir.join(REPORT_FIGURES[1]), &fig, &mut written)?;
    Ok(written)
}

/// Side-by-side tables and bar charts for several runs.
pub fn emit_comparison(reports: &[EvalReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut md = format!("# Comparison\n\n## Segmentation\n\n{SEG_HEADER}");
    for r in reports {
        md.push_str(&seg_row(&r.method, &r.aggregate));
        if let Some(s) = &r.single_aggregate {
            md.push_str(&seg_row(&format!("{} (single frame)", r.method), s));
        }
    }
    md.push_str(&format!("\n## River width\n\n{WIDTH_HEADER}"));
    for r in reports {
        md.push_str(&width_row(&r.method, &r.width));
        if let Some(s) = &r.single_width {
            md.push_str(&width_row(&format!("{} (single frame)", r.method), s));
        }
    }
    md.push_str(&format!("\n## Cloud stratification\n\n{CLOUD_HEADER}"));
    for r in reports {
        if let Some(c) = &r.cloud {
            md.push_str(&cloud_row(&r.method, c));
        }
    }
    write(out_dir.join("comparison.md"), &md, &mut written)?;

    let path = out_dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    let err = |e: csv::Error| Error::format(out_dir.join("comparison.csv"), e);
    w.write_record(["method", "precision", "recall", "f1", "single_f1", "width_mae_m", "single_width_mae_m", "delta_f1_cloudy", "delta_f1_clear"])
        .map_err(err)?;
    let s = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.aggregate.precision.to_string(),
            r.aggregate.recall.to_string(),
            r.aggregate.f1.to_string(),
            s(r.single_aggregate.map(|m| m.f1)),
            s(r.width.mean_abs_err),
            s(r.single_width.as_ref().and_then(|m| m.mean_abs_err)),
            s(r.cloud.as_ref().and_then(|c| c.cloudy)),
            s(r.cloud.as_ref().and_then(|c| c.clear)),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let labels: Vec<String> = reports.iter().map(|r| r.method.clone()).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.aggregate.f1).collect();
    write(out_dir.join(COMPARISON_FIGURES[0]), &svg::bar_chart("Test F1", &labels, &f1, "F1"), &mut written)?;
    let (wl, wv): (Vec<String>, Vec<f64>) = reports
        .iter()
        .filter_map(|r| r.width.mean_abs_err.map(|v| (r.method.clone(), v)))
        .unzip();
    write(
        out_dir.join(COMPARISON_FIGURES[1]),
        &svg::bar_chart("Mean absolute width error", &wl, &wv, "metres"),
        &mut written,
    )?;
    let (dl, dv): (Vec<String>, Vec<f64>) = reports
        .iter()
        .filter_map(|r| r.cloud.as_ref().map(|c| (r, c)))
        .flat_map(|(r, c)| {
            [("cloudy", c.cloudy), ("clear", c.clear)]
                .into_iter()
                .filter_map(move |(k, v)| v.map(|v| (format!("{} {k}", r.method), v)))
        })
        .unzip();
    write(
        out_dir.join(COMPARISON_FIGURES[2]),
        &svg::bar_chart("F1 gain from temporal input", &dl, &dv, "ΔF1"),
        &mut written,
    )?;
    Ok(written)
}
