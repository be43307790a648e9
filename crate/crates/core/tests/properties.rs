use chrono::{Duration, TimeZone, Utc};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rivolution::fusion::{predict_input_upsampling, predict_output_upsampling, predict_super_resolution, NaiveMfsr};
use rivolution::ingest::{make_lr_label, select_frames, FrameMetadata};
use rivolution::metrics::{seg_metrics, SegMetrics};
use rivolution::model::{binarize, ModelConfig, SegmentationModel, Segmenter};
use rivolution::raster::{resample_to_grid, BinaryMask, GeoGrid, LogitMap, MultibandImage, ResampleMode, Upsample};
use rivolution::synth::{generate_scene_series, SceneParams};
use rivolution::width::{estimate_width, Transect};
use rivolution::Result;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_upsample_is_constant(w in 1usize..9, h in 1usize..9, factor in 1usize..5, v in -5.0f64..5.0) {
        let lr = GeoGrid::new(10.0, -4.0, 10.0, w, h).unwrap();
        let img = MultibandImage::constant(lr, 2, v).unwrap();
        let up = img.bilinear_upsample(&lr.refine(factor).unwrap()).unwrap();
        for x in up.values() {
            prop_assert!((x - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn resample_onto_same_grid_is_identity(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let g = GeoGrid::new(0.0, 0.0, 3.0, w, h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = MultibandImage::from_values(g, Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0))).unwrap();
        for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
            prop_assert_eq!(&resample_to_grid(&img, &g, mode).unwrap(), &img);
        }
    }

    #[test]
    fn selection_keeps_the_cleanest_frames(counts in prop::collection::vec(0usize..20, 1..14), m in 1usize..10) {
        let t0 = Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap();
        let frames: Vec<FrameMetadata> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| FrameMetadata::new(t0 + Duration::days(i as i64), 0.0, n, format!("f{i}")).unwrap())
            .collect();
        let sel = select_frames(&frames, m).unwrap();
        prop_assert_eq!(sel.frames.len(), m);
        prop_assert!(sel.frames.iter().all(|f| frames.contains(f)));
        prop_assert_eq!(sel.warning.is_some(), frames.len() < m);
        let worst = sel.frames.iter().map(|f| f.nodata_count).max().unwrap();
        let rejected = frames.iter().filter(|f| !sel.frames.contains(f));
        for f in rejected {
            prop_assert!(f.nodata_count >= worst);
        }
    }

    #[test]
    fn coarse_width_within_one_coarse_pixel(
        left in 0usize..40,
        run in 1usize..30,
        factor in 2usize..5,
        row in 0usize..48,
    ) {
        let hr = GeoGrid::new(0.0, 0.0, 3.0, 72, 48).unwrap();
        let mask = BinaryMask::from_fn(hr, |_, c| c >= left && c < left + run);
        let coarse = make_lr_label(&mask, &hr.coarsen(factor).unwrap()).unwrap();
        let y = (row as f64 + 0.5) * 3.0;
        let t = Transect::new("t", (108.0, y), (1.0, 0.0), 105.0).unwrap();
        let fine = estimate_width(&mask, &t).predicted_width;
        let lr = estimate_width(&coarse, &t).predicted_width;
        prop_assert!((fine - lr).abs() <= factor as f64 * 3.0, "fine {} coarse {}", fine, lr);
    }

    #[test]
    fn model_output_matches_input_grid(h in 1usize..37, w in 1usize..37, depth in 1usize..4) {
        let model = SegmentationModel::new(ModelConfig { depth, base_channels: 2, convs_per_level: 1 }, 3, 1).unwrap();
        let g = GeoGrid::new(0.0, 0.0, 3.0, w, h).unwrap();
        let img = MultibandImage::constant(g, 3, 0.2).unwrap();
        let a = model.forward(&img).unwrap();
        prop_assert_eq!(a.grid(), &g);
        let b = model.forward(&img).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }
}

/// Classifies water by the NIR-minus-blue difference of the synthetic spectra.
struct NirThreshold;

impl Segmenter for NirThreshold {
    fn bands(&self) -> usize {
        4
    }

    fn segment(&self, image: &MultibandImage) -> Result<LogitMap> {
        let v = image.values();
        let logits = Array2::from_shape_fn(image.grid().shape(), |(r, c)| 100.0 * (0.115 - (v[[3, r, c]] - v[[0, r, c]])));
        LogitMap::new(*image.grid(), logits)
    }
}

#[test]
fn temporal_fusion_beats_single_frames_under_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut temporal = [Vec::new(), Vec::new(), Vec::new()];
    let mut worst = [Vec::new(), Vec::new(), Vec::new()];
    let mut random = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..24 {
        let params = SceneParams {
            seed: 100 + i,
            river_width_m: rng.random_range(27.0..51.0),
            cloud_probability: 0.3,
            ..SceneParams::default()
        };
        let scene = generate_scene_series(&format!("s{i}"), &params, 0).unwrap();
        let frames = scene.images();
        let hr = scene.hr_grid();
        let truth = scene.hr_label();
        let score = |l: LogitMap| -> SegMetrics { seg_metrics(&binarize(&l, 0.5).unwrap(), truth).unwrap() };
        let run = |k: usize, fs: &[&MultibandImage]| -> LogitMap {
            match k {
                0 => predict_input_upsampling(&NirThreshold, fs, hr).unwrap(),
                1 => predict_output_upsampling(&NirThreshold, fs, hr).unwrap(),
                _ => predict_super_resolution(&NirThreshold, &NaiveMfsr, fs, hr).unwrap(),
            }
        };
        let pick = rng.random_range(0..frames.len());
        for k in 0..3 {
            temporal[k].push(score(run(k, &frames)));
            let singles: Vec<SegMetrics> = frames.iter().map(|f| score(run(k, &[f]))).collect();
            worst[k].push(*singles.iter().min_by(|a, b| a.f1.total_cmp(&b.f1)).unwrap());
            random[k].push(singles[pick]);
        }
    }
    for k in 0..3 {
        let t = SegMetrics::pooled(&temporal[k]).f1;
        let w = SegMetrics::pooled(&worst[k]).f1;
        let r = SegMetrics::pooled(&random[k]).f1;
        assert!(t >= w && t >= r, "strategy {k}: temporal {t} worst {w} random {r}");
    }
}
