//! The segmentation network: a linear spectral adaptor followed by a compact
//! U-shaped convolutional net with a single-logit head.
//!
//! All parameters live in one flat vector, so optimisers, checkpoints and
//! gradient checks treat the model as a plain `Vec<f64>`.

mod layers;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{sigmoid, BinaryMask, LogitMap, MultibandImage};
use layers::Conv;

/// Channels produced by the spectral adaptor.
pub const ADAPTOR_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of 2x downsamplings; the net has `depth + 1` resolution levels.
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 2,
            base_channels: 8,
            convs_per_level: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.depth) || self.base_channels == 0 || self.convs_per_level == 0 {
            return Err(Error::Invalid(format!(
                "model needs 1 <= depth <= 4 and positive channel/conv counts, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    adaptor: Conv,
    down: Vec<Vec<Conv>>,
    up: Vec<Vec<Conv>>,
    head: Conv,
    len: usize,
}

impl Layout {
    fn new(config: &ModelConfig, bands: usize) -> Layout {
        let mut off = 0;
        let adaptor = Conv::new(bands, ADAPTOR_CHANNELS, 1, &mut off);
        let ch = |l: usize| config.base_channels << l;
        let block = |cin: usize, cout: usize, off: &mut usize| {
            (0..config.convs_per_level)
                .map(|i| Conv::new(if i == 0 { cin } else { cout }, cout, 3, off))
                .collect::<Vec<_>>()
        };
        let mut down = Vec::new();
        for l in 0..=config.depth {
            let cin = if l == 0 { ADAPTOR_CHANNELS } else { ch(l - 1) };
            down.push(block(cin, ch(l), &mut off));
        }
        let mut up = Vec::new();
        for l in 0..config.depth {
            up.push(block(ch(l + 1) + ch(l), ch(l), &mut off));
        }
        let head = Conv::new(ch(0), 1, 1, &mut off);
        Layout { adaptor, down, up, head, len: off }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.adaptor)
            .chain(self.down.iter().flatten())
            .chain(self.up.iter().flatten())
            .chain(std::iter::once(&self.head))
    }
}

/// Serialized form of a model: configuration, input band count and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub config: ModelConfig,
    pub bands: usize,
    pub parameters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    config: ModelConfig,
    bands: usize,
    layout: Layout,
    theta: Vec<f64>,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    in_shape: (usize, usize),
    padded: (usize, usize),
    adaptor_cols: Array2<f64>,
    down: Vec<Vec<(Array2<f64>, Array3<f64>)>>,
    pools: Vec<Array3<u8>>,
    up: Vec<Vec<(Array2<f64>, Array3<f64>)>>,
    head_cols: Array2<f64>,
}

impl SegmentationModel {
    /// He-normal initialisation from `seed`; biases start at zero.
    pub fn new(config: ModelConfig, bands: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if bands == 0 {
            return Err(Error::Invalid("model needs at least one input band".into()));
        }
        let layout = Layout::new(&config, bands);
        let mut theta = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in layout.convs() {
            let gain = if conv == &layout.head { 1.0 } else { 2.0 };
            let std = (gain / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut theta[conv.w_off..conv.b_off] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(SegmentationModel { config, bands, layout, theta })
    }

    pub fn from_state(state: ModelState) -> Result<Self> {
        state.config.validate()?;
        let layout = Layout::new(&state.config, state.bands);
        if state.parameters.len() != layout.len {
            return Err(Error::Shape(format!(
                "expected {} parameters for {:?} with {} bands, found {}",
                layout.len,
                state.config,
                state.bands,
                state.parameters.len()
            )));
        }
        let model = SegmentationModel {
            config: state.config,
            bands: state.bands,
            layout,
            theta: state.parameters,
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn to_state(&self) -> ModelState {
        ModelState {
            config: self.config,
            bands: self.bands,
            parameters: self.theta.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn parameter_count(&self) -> usize {
        self.theta.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.theta
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Index range of the adaptor weights (3 x C, row-major) and then its 3 biases.
    pub fn adaptor_range(&self) -> std::ops::Range<usize> {
        self.layout.adaptor.w_off..self.layout.adaptor.b_off + ADAPTOR_CHANNELS
    }

    pub fn set_adaptor(&mut self, weight: &Array2<f64>, bias: &[f64]) -> Result<()> {
        if weight.dim() != (ADAPTOR_CHANNELS, self.bands) || bias.len() != ADAPTOR_CHANNELS {
            return Err(Error::Shape(format!(
                "adaptor is {ADAPTOR_CHANNELS}x{}, got {:?}",
                self.bands,
                weight.dim()
            )));
        }
        let a = self.layout.adaptor;
        for (dst, src) in self.theta[a.w_off..a.b_off].iter_mut().zip(weight.iter()) {
            *dst = *src;
        }
        self.theta[a.b_off..a.b_off + ADAPTOR_CHANNELS].copy_from_slice(bias);
        Ok(())
    }

    /// Sets the head to zero so every logit is 0.
    pub fn zero_head(&mut self) {
        let h = self.layout.head;
        for v in &mut self.theta[h.w_off..h.b_off + 1] {
            *v = 0.0;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.theta.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!("parameter {i} is not finite"))),
            None => Ok(()),
        }
    }

    fn check_bands(&self, c: usize) -> Result<()> {
        if c != self.bands {
            return Err(Error::Shape(format!(
                "model expects {} bands, input has {c}",
                self.bands
            )));
        }
        Ok(())
    }

    /// The adaptor's affine projection to 3 channels; no-data pixels are zero-filled first.
    pub fn adapt(&self, image: &MultibandImage) -> Result<Array3<f64>> {
        self.check_bands(image.bands())?;
        let x = image.filled();
        Ok(self.layout.adaptor.forward(&self.theta, x.view()).0)
    }

    /// Logits for a `(C, H, W)` tensor; any `H x W` is accepted.
    pub fn forward_array(&self, x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        self.check_bands(x.dim().0)?;
        self.check_finite()?;
        Ok(self.run(x, None))
    }

    pub fn forward(&self, image: &MultibandImage) -> Result<LogitMap> {
        let logits = self.forward_array(image.filled().view())?;
        LogitMap::new(*image.grid(), logits)
    }

    /// Forward pass that keeps what [`SegmentationModel::backward`] needs.
    pub fn forward_train(&self, x: ArrayView3<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_bands(x.dim().0)?;
        self.check_finite()?;
        let mut cache = None;
        let out = self.run(x, Some(&mut cache));
        Ok((out, cache.expect("cache filled in training mode")))
    }

    fn run(&self, x: ArrayView3<'_, f64>, cache: Option<&mut Option<ForwardCache>>) -> Array2<f64> {
        let keep = cache.is_some();
        let th = &self.theta;
        let (c, h, w) = x.dim();
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let xp = if (ph, pw) == (h, w) {
            x.to_owned()
        } else {
            let mut p = Array3::zeros((c, ph, pw));
            p.slice_mut(s![.., ..h, ..w]).assign(&x);
            p
        };
        let (mut act, adaptor_cols) = self.layout.adaptor.forward(th, xp.view());

        let block = |convs: &[Conv], mut act: Array3<f64>, store: &mut Vec<(Array2<f64>, Array3<f64>)>| {
            for conv in convs {
                let (mut out, cols) = conv.forward(th, act.view());
                layers::relu_inplace(&mut out);
                if keep {
                    store.push((cols, out.clone()));
                }
                act = out;
            }
            act
        };

        let depth = self.config.depth;
        let mut down_store = vec![Vec::new(); depth + 1];
        let mut up_store = vec![Vec::new(); depth];
        let mut pools = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for (l, store) in down_store.iter_mut().enumerate().take(depth) {
            act = block(&self.layout.down[l], act, store);
            let (p, arg) = layers::maxpool2(&act);
            skips.push(act);
            pools.push(arg);
            act = p;
        }
        act = block(&self.layout.down[depth], act, &mut down_store[depth]);
        for l in (0..depth).rev() {
            let up = layers::upsample2(&act);
            let cat = ndarray::concatenate(Axis(0), &[up.view(), skips[l].view()]).expect("concat");
            act = block(&self.layout.up[l], cat, &mut up_store[l]);
        }
        let (logits, head_cols) = self.layout.head.forward(th, act.view());
        let out = logits.index_axis(Axis(0), 0).slice(s![..h, ..w]).to_owned();
        if let Some(slot) = cache {
            *slot = Some(ForwardCache {
                in_shape: (h, w),
                padded: (ph, pw),
                adaptor_cols,
                down: down_store,
                pools,
                up: up_store,
                head_cols,
            });
        }
        out
    }

    /// Adds the gradient of a loss with respect to every parameter into `grad`,
    /// given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.theta.len() {
            return Err(Error::Shape("gradient buffer has the wrong length".into()));
        }
        if dlogits.dim() != cache.in_shape {
            return Err(Error::Shape(format!(
                "logit gradient is {:?}, forward pass was {:?}",
                dlogits.dim(),
                cache.in_shape
            )));
        }
        let th = &self.theta;
        let (h, w) = cache.in_shape;
        let (ph, pw) = cache.padded;
        let mut dl = Array3::zeros((1, ph, pw));
        dl.slice_mut(s![0, ..h, ..w]).assign(dlogits);
        let mut d = self
            .layout
            .head
            .backward(th, &cache.head_cols, dl.view(), grad, true)
            .expect("input grad");

        let block_back = |convs: &[Conv], store: &[(Array2<f64>, Array3<f64>)], mut d: Array3<f64>, grad: &mut [f64]| {
            for (conv, (cols, out)) in convs.iter().zip(store).rev() {
                layers::relu_backward(out, &mut d);
                d = conv.backward(th, cols, d.view(), grad, true).expect("input grad");
            }
            d
        };

        let depth = self.config.depth;
        let ch = |l: usize| self.config.base_channels << l;
        let mut dskips = Vec::with_capacity(depth);
        for l in 0..depth {
            d = block_back(&self.layout.up[l], &cache.up[l], d, grad);
            let (dup, dskip) = d.view().split_at(Axis(0), ch(l + 1));
            dskips.push(dskip.to_owned());
            d = layers::upsample2_backward(dup);
        }
        d = block_back(&self.layout.down[depth], &cache.down[depth], d, grad);
        for l in (0..depth).rev() {
            d = layers::maxpool2_backward(&d, &cache.pools[l]);
            d += &dskips[l];
            d = block_back(&self.layout.down[l], &cache.down[l], d, grad);
        }
        self.layout.adaptor.backward(th, &cache.adaptor_cols, d.view(), grad, false);
        Ok(())
    }
}

/// Anything that maps an image to same-grid water logits.
pub trait Segmenter: Sync {
    fn bands(&self) -> usize;
    fn segment(&self, image: &MultibandImage) -> Result<LogitMap>;
}

impl Segmenter for SegmentationModel {
    fn bands(&self) -> usize {
        self.bands
    }

    fn segment(&self, image: &MultibandImage) -> Result<LogitMap> {
        self.forward(image)
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Water where `sigmoid(logit) >= threshold`.
pub fn binarize(logits: &LogitMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let v = logits.values();
    Ok(BinaryMask::from_fn(*logits.grid(), |r, c| sigmoid(v[[r, c]]) >= threshold))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::raster::GeoGrid;

    fn small() -> ModelConfig {
        ModelConfig { depth: 2, base_channels: 2, convs_per_level: 2 }
    }

    fn image(bands: usize, h: usize, w: usize, seed: u64) -> MultibandImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GeoGrid::new(0.0, 0.0, 3.0, w, h).unwrap();
        let v = Array3::from_shape_fn((bands, h, w), |_| rng.random_range(-1.0..1.0));
        MultibandImage::from_values(grid, v).unwrap()
    }

    #[test]
    fn selector_adaptor_passes_first_bands() {
        let mut m = SegmentationModel::new(small(), 5, 0).unwrap();
        let mut w = Array2::zeros((3, 5));
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        m.set_adaptor(&w, &[0.0; 3]).unwrap();
        let img = image(5, 4, 4, 1);
        let out = m.adapt(&img).unwrap();
        assert_eq!(out, img.values().slice(s![..3, .., ..]).to_owned());
    }

    #[test]
    fn adaptor_matches_scalar_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = SegmentationModel::new(small(), 12, 0).unwrap();
        let w = Array2::from_shape_fn((3, 12), |_| rng.random_range(-1.0..1.0));
        let b = [0.1, -0.2, 0.3];
        m.set_adaptor(&w, &b).unwrap();
        let img = image(12, 2, 2, 6);
        let out = m.adapt(&img).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                for o in 0..3 {
                    let mut s = b[o];
                    for k in 0..12 {
                        s += w[[o, k]] * img.values()[[k, r, c]];
                    }
                    assert!((out[[o, r, c]] - s).abs() < 1e-12);
                }
            }
        }
        let constant = MultibandImage::constant(*img.grid(), 12, 0.25).unwrap();
        let out = m.adapt(&constant).unwrap();
        let first = out[[0, 0, 0]];
        assert!(out.index_axis(Axis(0), 0).iter().all(|&v| v == first));
        assert!(matches!(m.adapt(&image(4, 2, 2, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = SegmentationModel::new(small(), 4, 1).unwrap();
        m.zero_head();
        let l = m.forward(&image(4, 8, 8, 2)).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
        assert!(binarize(&l, 0.5).unwrap().values().iter().all(|&v| v == 1));
    }

    #[test]
    fn output_grid_matches_input() {
        let m = SegmentationModel::new(small(), 4, 1).unwrap();
        for (h, w) in [(64, 64), (150, 150), (7, 13), (16, 16)] {
            let img = image(4, h, w, 3);
            let l = m.forward(&img).unwrap();
            assert_eq!(l.grid(), img.grid());
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let m = SegmentationModel::new(small(), 4, 1).unwrap();
        let img = image(4, 12, 12, 3);
        assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
        let (train_out, _) = m.forward_train(img.filled().view()).unwrap();
        assert_eq!(&train_out, m.forward(&img).unwrap().values());
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut m = SegmentationModel::new(small(), 4, 1).unwrap();
        m.parameters_mut()[3] = f64::NAN;
        assert!(matches!(m.forward(&image(4, 4, 4, 0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn state_round_trip() {
        let m = SegmentationModel::new(ModelConfig::default(), 4, 9).unwrap();
        let json = serde_json::to_string(&m.to_state()).unwrap();
        let back = SegmentationModel::from_state(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.to_state();
        bad.parameters.pop();
        assert!(SegmentationModel::from_state(bad).is_err());
        assert_eq!(m.parameter_count(), SegmentationModel::new(ModelConfig::default(), 4, 0).unwrap().parameter_count());
    }

    #[test]
    fn binarize_thresholds() {
        let grid = GeoGrid::new(0.0, 0.0, 1.0, 3, 2).unwrap();
        let l = LogitMap::new(grid, array![[10.0, -10.0, 0.0], [-0.5, 0.5, 1.2]]).unwrap();
        assert_eq!(binarize(&l, 0.5).unwrap().values(), &array![[1, 0, 1], [0, 1, 1]]);
        let lo = binarize(&l, 0.3).unwrap();
        let hi = binarize(&l, 0.7).unwrap();
        for ((r, c), &v) in l.values().indexed_iter() {
            let p = sigmoid(v);
            let differs = lo.values()[[r, c]] != hi.values()[[r, c]];
            assert_eq!(differs, (0.3..0.7).contains(&p));
        }
        assert!(binarize(&l, 1.0).is_err());
    }

    /// Central differences of `loss = sum(g * logits)` against backprop.
    fn gradient_check(config: ModelConfig, bands: usize, h: usize, w: usize) {
        let mut m = SegmentationModel::new(config, bands, 11).unwrap();
        let x = image(bands, h, w, 12).filled();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = m.forward_train(x.view()).unwrap();
        let mut grad = vec![0.0; m.parameter_count()];
        m.backward(&cache, &g, &mut grad).unwrap();
        let loss = |m: &SegmentationModel| (&m.forward_array(x.view()).unwrap() * &g).sum();
        let n = m.parameter_count();
        let mut idx: Vec<usize> = m.adaptor_range().collect();
        idx.extend((0..20).map(|_| rng.random_range(0..n)));
        let eps = 1e-6;
        for i in idx {
            let orig = m.parameters()[i];
            m.parameters_mut()[i] = orig + eps;
            let up = loss(&m);
            m.parameters_mut()[i] = orig - eps;
            let down = loss(&m);
            m.parameters_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs bp {}", grad[i]);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        gradient_check(small(), 4, 8, 8);
        gradient_check(ModelConfig { depth: 1, base_channels: 3, convs_per_level: 1 }, 2, 5, 7);
    }
}
