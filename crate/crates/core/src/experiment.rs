//! The end-to-end benchmark: generate a synthetic dataset per seed, train every
//! regime and strategy, evaluate on the test split, and check the expected
//! orderings between methods.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::StrategyKind;
use crate::ingest::Split;
use crate::metrics::{emit_comparison, emit_report, EvalReport};
use crate::model::ModelConfig;
use crate::synth::{generate_dataset, DatasetSpec};
use crate::trainer::{evaluate_checkpoint, train, write_training_log, EvalOptions, Regime, TrainConfig};

/// Minimum F1 gain of temporal over single-frame input, per strategy.
pub const MIN_TEMPORAL_GAIN: f64 = 0.03;
/// Minimum F1 gap between consecutive methods in the expected ordering.
pub const MIN_ORDER_GAP: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// Template for every run; regime, strategy and seed are filled in per run.
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Write each generated dataset under `<out>/seed-N/dataset`.
    pub save_datasets: bool,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            seeds: vec![1, 2, 3],
            dataset: DatasetSpec::default(),
            train: TrainConfig {
                epochs: 6,
                learning_rates: vec![3e-3],
                model: ModelConfig { depth: 2, base_channels: 4, convs_per_level: 1 },
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
            save_datasets: false,
        }
    }
}

impl ReproConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Invalid("at least one seed is required".into()));
        }
        self.dataset.validate()?;
        self.train.validate()
    }

    /// Every (regime, strategy) pair the benchmark trains.
    pub fn runs() -> Vec<(Regime, StrategyKind)> {
        let mut runs: Vec<_> = StrategyKind::ALL.iter().map(|&s| (Regime::Superrivolution, s)).collect();
        runs.push((Regime::LrBaseline, StrategyKind::OutputUp));
        runs.push((Regime::HrOracle, StrategyKind::InputUp));
        runs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub regime: Regime,
    pub strategy: StrategyKind,
    pub learning_rate: f64,
    pub epoch: usize,
    pub val_f1: f64,
    pub f1: f64,
    pub single_f1: Option<f64>,
    pub width_mae: Option<f64>,
    pub single_width_mae: Option<f64>,
    pub delta_f1_cloudy: Option<f64>,
    pub delta_f1_clear: Option<f64>,
}

impl RunResult {
    fn from_report(regime: Regime, strategy: StrategyKind, ck: &crate::trainer::Checkpoint, r: &EvalReport) -> Self {
        RunResult {
            method: r.method.clone(),
            regime,
            strategy,
            learning_rate: ck.learning_rate,
            epoch: ck.epoch,
            val_f1: ck.best_val_f1,
            f1: r.aggregate.f1,
            single_f1: r.single_aggregate.map(|m| m.f1),
            width_mae: r.width.mean_abs_err,
            single_width_mae: r.single_width.as_ref().and_then(|w| w.mean_abs_err),
            delta_f1_cloudy: r.cloud.as_ref().and_then(|c| c.cloudy),
            delta_f1_clear: r.cloud.as_ref().and_then(|c| c.clear),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub runs: Vec<RunResult>,
}

/// Across-seed mean and standard deviation of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(MeanStd { mean, std: var.sqrt(), n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub f1: Option<MeanStd>,
    pub single_f1: Option<MeanStd>,
    pub width_mae: Option<MeanStd>,
    pub single_width_mae: Option<MeanStd>,
    pub delta_f1_cloudy: Option<MeanStd>,
    pub delta_f1_clear: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRow {
    pub criterion: u32,
    pub check: String,
    pub measured: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub config: ReproConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<MethodSummary>,
    pub acceptance: Vec<AcceptanceRow>,
}

impl ReproReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn all_pass(&self) -> bool {
        self.acceptance.iter().all(|r| r.pass)
    }
}

fn summarize(seeds: &[SeedResult]) -> Vec<MethodSummary> {
    let methods: Vec<String> = seeds
        .first()
        .map(|s| s.runs.iter().map(|r| r.method.clone()).collect())
        .unwrap_or_default();
    methods
        .into_iter()
        .map(|method| {
            let runs: Vec<&RunResult> = seeds.iter().flat_map(|s| s.runs.iter().filter(|r| r.method == method)).collect();
            let collect = |f: &dyn Fn(&RunResult) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                f1: collect(&|r| Some(r.f1)),
                single_f1: collect(&|r| r.single_f1),
                width_mae: collect(&|r| r.width_mae),
                single_width_mae: collect(&|r| r.single_width_mae),
                delta_f1_cloudy: collect(&|r| r.delta_f1_cloudy),
                delta_f1_clear: collect(&|r| r.delta_f1_clear),
                method,
            }
        })
        .collect()
}

fn mean_of(s: &Option<MeanStd>) -> Option<f64> {
    s.map(|m| m.mean)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Checks the trend, ordering and cloud-stratification expectations.
pub fn acceptance_table(summary: &[MethodSummary]) -> Vec<AcceptanceRow> {
    let find = |name: &str| summary.iter().find(|m| m.method == name);
    let mut rows = Vec::new();
    for kind in StrategyKind::ALL {
        let name = crate::trainer::method_name(Regime::Superrivolution, kind);
        let m = find(&name);
        let (t, s) = (m.and_then(|m| mean_of(&m.f1)), m.and_then(|m| mean_of(&m.single_f1)));
        let (tw, sw) = (m.and_then(|m| mean_of(&m.width_mae)), m.and_then(|m| mean_of(&m.single_width_mae)));
        let gain_ok = matches!((t, s), (Some(t), Some(s)) if t - s >= MIN_TEMPORAL_GAIN);
        let width_ok = matches!((tw, sw), (Some(a), Some(b)) if a < b);
        rows.push(AcceptanceRow {
            criterion: 5,
            check: format!("{name}: F1 temporal - single >= {MIN_TEMPORAL_GAIN} and width MAE temporal < single"),
            measured: format!(
                "F1 {} vs {} (gain {}); MAE {} m vs {} m",
                fmt_opt(t),
                fmt_opt(s),
                fmt_opt(t.zip(s).map(|(a, b)| a - b)),
                fmt_opt(tw),
                fmt_opt(sw)
            ),
            pass: gain_ok && width_ok,
        });
    }
    let best = StrategyKind::ALL
        .iter()
        .filter_map(|&k| {
            let name = crate::trainer::method_name(Regime::Superrivolution, k);
            find(&name).and_then(|m| mean_of(&m.f1)).map(|f| (name, f))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let hr = find(Regime::HrOracle.name()).and_then(|m| mean_of(&m.f1));
    let lr = find(Regime::LrBaseline.name()).and_then(|m| mean_of(&m.single_f1));
    let order_ok = match (&best, hr, lr) {
        (Some((_, b)), Some(h), Some(l)) => h - b >= MIN_ORDER_GAP && b - l >= MIN_ORDER_GAP,
        _ => false,
    };
    rows.push(AcceptanceRow {
        criterion: 6,
        check: format!("F1 hr-oracle > best temporal > lr-baseline (single LR), gaps >= {MIN_ORDER_GAP}"),
        measured: format!(
            "hr-oracle {} > {} {} > lr-baseline {}",
            fmt_opt(hr),
            best.as_ref().map(|b| b.0.as_str()).unwrap_or("n/a"),
            fmt_opt(best.as_ref().map(|b| b.1)),
            fmt_opt(lr)
        ),
        pass: order_ok,
    });
    let sr = find(&crate::trainer::method_name(Regime::Superrivolution, StrategyKind::Sr));
    let (dc, dl) = (sr.and_then(|m| mean_of(&m.delta_f1_cloudy)), sr.and_then(|m| mean_of(&m.delta_f1_clear)));
    rows.push(AcceptanceRow {
        criterion: 7,
        check: "superrivolution/sr: ΔF1 cloudy >= ΔF1 clear".into(),
        measured: format!("cloudy {} vs clear {}", fmt_opt(dc), fmt_opt(dl)),
        pass: matches!((dc, dl), (Some(c), Some(l)) if c >= l),
    });
    rows
}

fn slug(method: &str) -> String {
    method.replace('/', "-")
}

/// Runs the whole benchmark, writing reports under `out`.
pub fn run_repro(config: &ReproConfig, out: &Path) -> Result<ReproReport> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let start = Instant::now();
        let spec = DatasetSpec { seed, ..config.dataset.clone() };
        let dataset = generate_dataset(&spec)?;
        let seed_dir = out.join(format!("seed-{seed}"));
        if config.save_datasets {
            dataset.save(&seed_dir.join("dataset"))?;
        }
        let eval = EvalOptions { seed, frames: config.train.frames, ..config.eval };
        let mut runs = Vec::new();
        let mut reports = Vec::new();
        for (regime, strategy) in ReproConfig::runs() {
            let tc = TrainConfig { regime, strategy, seed, ..config.train.clone() };
            let ck = train(&tc, &dataset)?;
            let report = evaluate_checkpoint(&ck, &dataset, Split::Test, &eval)?;
            let dir = seed_dir.join(slug(&tc.method()));
            ck.save(&dir.join("checkpoint.json"))?;
            write_training_log(&dir.join("training_log.jsonl"), &ck.log)?;
            emit_report(&report, &dir)?;
            log::info!(
                "seed {seed} {}: test F1 {:.4} (single {})",
                tc.method(),
                report.aggregate.f1,
                fmt_opt(report.single_aggregate.map(|m| m.f1))
            );
            runs.push(RunResult::from_report(regime, strategy, &ck, &report));
            reports.push(report);
        }
        emit_comparison(&reports, &seed_dir.join("comparison"))?;
        log::info!("seed {seed} finished in {:.1}s", start.elapsed().as_secs_f64());
        seeds.push(SeedResult { seed, runs });
    }
    let summary = summarize(&seeds);
    let acceptance = acceptance_table(&summary);
    let report = ReproReport { config: config.clone(), seeds, summary, acceptance };
    write_repro(&report, out)?;
    Ok(report)
}

fn write_repro(report: &ReproReport, out: &Path) -> Result<()> {
    let path = out.join("repro.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let ms = |m: &Option<MeanStd>| m.map(|m| format!("{:.4} ± {:.4}", m.mean, m.std)).unwrap_or_else(|| "n/a".into());
    let mut md = format!(
        "# Benchmark over seeds {:?}\n\n| method | F1 temporal | F1 single | width MAE temporal (m) | width MAE single (m) | ΔF1 cloudy | ΔF1 clear |\n|---|---|---|---|---|---|---|\n",
        report.config.seeds
    );
    for m in &report.summary {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            m.method,
            ms(&m.f1),
            ms(&m.single_f1),
            ms(&m.width_mae),
            ms(&m.single_width_mae),
            ms(&m.delta_f1_cloudy),
            ms(&m.delta_f1_clear)
        ));
    }
    md.push_str("\nMean ± standard deviation across seeds.\n\n## Acceptance\n\n| criterion | check | measured | result |\n|---|---|---|---|\n");
    for r in &report.acceptance {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.criterion,
            r.check,
            r.measured,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    let path = out.join("acceptance.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: &str, f1: f64, single: Option<f64>, mae: (f64, f64), delta: (f64, f64)) -> MethodSummary {
        let one = |v: f64| Some(MeanStd { mean: v, std: 0.0, n: 1 });
        MethodSummary {
            method: method.into(),
            f1: one(f1),
            single_f1: single.and_then(one),
            width_mae: one(mae.0),
            single_width_mae: one(mae.1),
            delta_f1_cloudy: one(delta.0),
            delta_f1_clear: one(delta.1),
        }
    }

    #[test]
    fn acceptance_rows_follow_thresholds() {
        let s = vec![
            summary("superrivolution/input-up", 0.90, Some(0.85), (5.0, 7.0), (0.1, 0.02)),
            summary("superrivolution/output-up", 0.88, Some(0.86), (5.0, 7.0), (0.1, 0.02)),
            summary("superrivolution/sr", 0.89, Some(0.80), (5.0, 7.0), (0.01, 0.02)),
            summary("lr-baseline", 0.86, Some(0.80), (9.0, 9.0), (0.0, 0.0)),
            summary("hr-oracle", 0.97, None, (1.0, 1.0), (0.0, 0.0)),
        ];
        let rows = acceptance_table(&s);
        assert_eq!(rows.len(), 5);
        assert!(rows[0].pass);
        assert!(!rows[1].pass);
        assert!(rows[2].pass);
        assert!(rows[3].pass, "{}", rows[3].measured);
        assert!(!rows[4].pass);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std, m.n), (2.0, 1.0, 3));
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn tiny_repro_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ReproConfig::default();
        cfg.seeds = vec![5];
        cfg.dataset.scenes = 6;
        cfg.dataset.base.hr_size = 32;
        cfg.dataset.base.center_x_m = 48.0;
        cfg.dataset.width_range_m = (15.0, 27.0);
        cfg.dataset.axis_jitter_m = 6.0;
        cfg.train.epochs = 1;
        let a = run_repro(&cfg, &tmp.path().join("a")).unwrap();
        let b = run_repro(&cfg, &tmp.path().join("b")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.acceptance.len(), 5);
        assert_eq!(ReproReport::load(&tmp.path().join("a/repro.json")).unwrap(), a);
        assert!(tmp.path().join("a/seed-5/superrivolution-sr/report.json").exists());
        assert!(tmp.path().join("a/acceptance.md").exists());
    }
}
