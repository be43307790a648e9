//! Resampling between grids that share a map frame.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use super::{GeoGrid, LogitMap, MultibandImage};
use crate::error::{Error, Result};

/// Interpolation kernel for [`resample_to_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Bilinear,
    Nearest,
}

/// Per-output-index sampling positions along one axis.
#[derive(Debug, Clone)]
struct AxisSamples {
    lo: Vec<usize>,
    hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - w`.
    w: Vec<f64>,
    nearest: Vec<usize>,
    inside: Vec<bool>,
}

impl AxisSamples {
    fn new(src_origin: f64, src_ps: f64, src_n: usize, dst_origin: f64, dst_ps: f64, dst_n: usize) -> Self {
        let src_max = src_origin + src_n as f64 * src_ps;
        let last = (src_n - 1) as f64;
        let mut s = AxisSamples {
            lo: Vec::with_capacity(dst_n),
            hi: Vec::with_capacity(dst_n),
            w: Vec::with_capacity(dst_n),
            nearest: Vec::with_capacity(dst_n),
            inside: Vec::with_capacity(dst_n),
        };
        for i in 0..dst_n {
            let x = dst_origin + (i as f64 + 0.5) * dst_ps;
            s.inside.push(x >= src_origin && x < src_max);
            // continuous index in source pixel-centre units
            let u = (x - src_origin) / src_ps - 0.5;
            let (lo, hi, w) = if u <= 0.0 {
                (0, 0, 0.0)
            } else if u >= last {
                (src_n - 1, src_n - 1, 0.0)
            } else {
                let f = u.floor();
                (f as usize, f as usize + 1, u - f)
            };
            s.lo.push(lo);
            s.hi.push(hi);
            s.w.push(w);
            // nearest centre, exact halves go to the lower index
            let n = (u - 0.5).ceil().clamp(0.0, last);
            s.nearest.push(n as usize);
        }
        s
    }
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * (b - a)
    }
}

/// Bilinear interpolation from one grid onto a finer grid over the same extent,
/// as an explicit linear operator with its adjoint (needed to backpropagate
/// through output upsampling).
#[derive(Debug, Clone)]
pub struct BilinearOperator {
    src: GeoGrid,
    dst: GeoGrid,
    rows: AxisSamples,
    cols: AxisSamples,
}

impl BilinearOperator {
    pub fn new(src: &GeoGrid, dst: &GeoGrid) -> Result<Self> {
        if !src.same_extent(dst) {
            return Err(Error::Alignment(format!(
                "upsampling needs identical extents, got {:?} and {:?}",
                src.extent(),
                dst.extent()
            )));
        }
        if dst.pixel_size() > src.pixel_size() * (1.0 + 1e-12) {
            return Err(Error::Alignment(format!(
                "target pixel size {} is coarser than source {}",
                dst.pixel_size(),
                src.pixel_size()
            )));
        }
        Ok(Self::between(src, dst))
    }

    fn between(src: &GeoGrid, dst: &GeoGrid) -> Self {
        BilinearOperator {
            src: *src,
            dst: *dst,
            rows: AxisSamples::new(
                src.origin_y(),
                src.pixel_size(),
                src.height(),
                dst.origin_y(),
                dst.pixel_size(),
                dst.height(),
            ),
            cols: AxisSamples::new(
                src.origin_x(),
                src.pixel_size(),
                src.width(),
                dst.origin_x(),
                dst.pixel_size(),
                dst.width(),
            ),
        }
    }

    pub fn source(&self) -> &GeoGrid {
        &self.src
    }

    pub fn target(&self) -> &GeoGrid {
        &self.dst
    }

    pub fn apply(&self, plane: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(plane.dim(), self.src.shape());
        let mut out = Array2::zeros(self.dst.shape());
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (y0, y1, wy) = (self.rows.lo[r], self.rows.hi[r], self.rows.w[r]);
            for (c, o) in row.iter_mut().enumerate() {
                let (x0, x1, wx) = (self.cols.lo[c], self.cols.hi[c], self.cols.w[c]);
                let top = lerp(plane[[y0, x0]], plane[[y0, x1]], wx);
                *o = if wy == 0.0 {
                    top
                } else {
                    lerp(top, lerp(plane[[y1, x0]], plane[[y1, x1]], wx), wy)
                };
            }
        }
        out
    }

    /// Transpose of [`BilinearOperator::apply`]: maps a target-grid gradient back to the source grid.
    pub fn adjoint(&self, grad: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(grad.dim(), self.dst.shape());
        let mut out = Array2::zeros(self.src.shape());
        for (r, row) in grad.axis_iter(Axis(0)).enumerate() {
            let (y0, y1, wy) = (self.rows.lo[r], self.rows.hi[r], self.rows.w[r]);
            for (c, &g) in row.iter().enumerate() {
                let (x0, x1, wx) = (self.cols.lo[c], self.cols.hi[c], self.cols.w[c]);
                let top = g * (1.0 - wy);
                let bot = g * wy;
                out[[y0, x0]] += top * (1.0 - wx);
                out[[y0, x1]] += top * wx;
                out[[y1, x0]] += bot * (1.0 - wx);
                out[[y1, x1]] += bot * wx;
            }
        }
        out
    }

    /// Output no-data: any sample with non-zero weight is no-data.
    fn propagate_nodata(&self, nodata: &Array2<bool>) -> Array2<bool> {
        Array2::from_shape_fn(self.dst.shape(), |(r, c)| {
            let (y0, y1, wy) = (self.rows.lo[r], self.rows.hi[r], self.rows.w[r]);
            let (x0, x1, wx) = (self.cols.lo[c], self.cols.hi[c], self.cols.w[c]);
            let mut hit = nodata[[y0, x0]];
            if wx > 0.0 {
                hit |= nodata[[y0, x1]];
            }
            if wy > 0.0 {
                hit |= nodata[[y1, x0]];
                if wx > 0.0 {
                    hit |= nodata[[y1, x1]];
                }
            }
            hit
        })
    }

    fn apply_image(&self, img: &MultibandImage) -> MultibandImage {
        let filled = img.filled();
        let mut values = Array3::zeros((img.bands(), self.dst.height(), self.dst.width()));
        for (b, mut out) in values.axis_iter_mut(Axis(0)).enumerate() {
            out.assign(&self.apply(filled.index_axis(Axis(0), b)));
        }
        let nodata = if img.nodata().iter().any(|&n| n) {
            let nd = self.propagate_nodata(img.nodata());
            for ((_, r, c), v) in values.indexed_iter_mut() {
                if nd[[r, c]] {
                    *v = 0.0;
                }
            }
            nd
        } else {
            Array2::from_elem(self.dst.shape(), false)
        };
        MultibandImage {
            grid: self.dst,
            values,
            nodata,
        }
    }
}

/// Raster kinds that can be bilinearly upsampled onto a finer grid of the same extent.
pub trait Upsample: Sized {
    fn bilinear_upsample(&self, target: &GeoGrid) -> Result<Self>;
}

impl Upsample for MultibandImage {
    fn bilinear_upsample(&self, target: &GeoGrid) -> Result<Self> {
        Ok(BilinearOperator::new(self.grid(), target)?.apply_image(self))
    }
}

impl Upsample for LogitMap {
    fn bilinear_upsample(&self, target: &GeoGrid) -> Result<Self> {
        let op = BilinearOperator::new(self.grid(), target)?;
        Ok(LogitMap {
            grid: *target,
            values: op.apply(self.values().view()),
        })
    }
}

/// Bilinear upsampling sampled at target pixel centres, clamping at the borders.
pub fn bilinear_upsample<T: Upsample>(img: &T, target: &GeoGrid) -> Result<T> {
    img.bilinear_upsample(target)
}

/// Mean of each `factor x factor` block.
///
/// A block is no-data when more than half of its pixels are; otherwise the
/// mean runs over its valid pixels only.
pub fn block_downsample(img: &MultibandImage, factor: usize) -> Result<MultibandImage> {
    if factor == 0 {
        return Err(Error::Shape("downsample factor must be >= 1".into()));
    }
    let grid = img.grid().coarsen(factor)?;
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = grid.shape();
    let bands = img.bands();
    let mut values = Array3::zeros((bands, h, w));
    let mut nodata = Array2::from_elem((h, w), false);
    let src = img.values();
    let src_nd = img.nodata();
    let block = factor * factor;
    for r in 0..h {
        for c in 0..w {
            let mut valid = 0usize;
            for dr in 0..factor {
                for dc in 0..factor {
                    if !src_nd[[r * factor + dr, c * factor + dc]] {
                        valid += 1;
                    }
                }
            }
            if 2 * (block - valid) > block || valid == 0 {
                nodata[[r, c]] = true;
                continue;
            }
            for b in 0..bands {
                // incremental mean: a constant block reproduces its value exactly
                let mut mean = 0.0;
                let mut k = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let (rr, cc) = (r * factor + dr, c * factor + dc);
                        if !src_nd[[rr, cc]] {
                            k += 1.0;
                            mean += (src[[b, rr, cc]] - mean) / k;
                        }
                    }
                }
                values[[b, r, c]] = mean;
            }
        }
    }
    MultibandImage::new(grid, values, nodata)
}

/// Resample onto an arbitrary target grid in the same map frame.
///
/// Target pixel centres outside the source extent become no-data.
pub fn resample_to_grid(
    img: &MultibandImage,
    target: &GeoGrid,
    mode: ResampleMode,
) -> Result<MultibandImage> {
    if img.grid() == target {
        return Ok(img.clone());
    }
    if !img.grid().overlaps(target) {
        return Err(Error::Alignment(format!(
            "source {:?} and target {:?} do not overlap",
            img.grid().extent(),
            target.extent()
        )));
    }
    let op = BilinearOperator::between(img.grid(), target);
    let filled = img.filled();
    let src_nd = img.nodata();
    let (h, w) = target.shape();
    let mut values = Array3::zeros((img.bands(), h, w));
    let mut nodata = Array2::from_elem((h, w), false);
    let bil_nd = match mode {
        ResampleMode::Bilinear => Some(op.propagate_nodata(src_nd)),
        ResampleMode::Nearest => None,
    };
    for r in 0..h {
        for c in 0..w {
            if !(op.rows.inside[r] && op.cols.inside[c]) {
                nodata[[r, c]] = true;
                continue;
            }
            match mode {
                ResampleMode::Nearest => {
                    let (sr, sc) = (op.rows.nearest[r], op.cols.nearest[c]);
                    if src_nd[[sr, sc]] {
                        nodata[[r, c]] = true;
                    } else {
                        for b in 0..img.bands() {
                            values[[b, r, c]] = filled[[b, sr, sc]];
                        }
                    }
                }
                ResampleMode::Bilinear => {
                    if bil_nd.as_ref().is_some_and(|nd| nd[[r, c]]) {
                        nodata[[r, c]] = true;
                        continue;
                    }
                    let (y0, y1, wy) = (op.rows.lo[r], op.rows.hi[r], op.rows.w[r]);
                    let (x0, x1, wx) = (op.cols.lo[c], op.cols.hi[c], op.cols.w[c]);
                    for b in 0..img.bands() {
                        let top = lerp(filled[[b, y0, x0]], filled[[b, y0, x1]], wx);
                        let bot = lerp(filled[[b, y1, x0]], filled[[b, y1, x1]], wx);
                        values[[b, r, c]] = lerp(top, bot, wy);
                    }
                }
            }
        }
    }
    MultibandImage::new(*target, values, nodata)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn grid(ps: f64, w: usize, h: usize) -> GeoGrid {
        GeoGrid::new(1000.0, 2000.0, ps, w, h).unwrap()
    }

    /// Textbook bilinear interpolation at continuous source coordinates, with clamping.
    fn bilinear_reference(src: &Array2<f64>, u: f64, v: f64) -> f64 {
        let (h, w) = src.dim();
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        (1.0 - fx) * (1.0 - fy) * src[[y0, x0]]
            + fx * (1.0 - fy) * src[[y0, x1]]
            + (1.0 - fx) * fy * src[[y1, x0]]
            + fx * fy * src[[y1, x1]]
    }

    #[test]
    fn two_by_two_checkerboard_matches_hand_weights() {
        // Output centres map to source coordinates -0.25, 0.25, 0.75, 1.25 on each axis;
        // clamping pins the outer ones to the border.
        let src = grid(2.0, 2, 2);
        let dst = grid(1.0, 4, 4);
        let img = MultibandImage::from_values(src, array![[[0.0, 1.0], [1.0, 0.0]]]).unwrap();
        let up = bilinear_upsample(&img, &dst).unwrap();
        let expected = array![
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert!((up.values()[[0, r, c]] - expected[[r, c]]).abs() < 1e-15, "({r},{c})");
            }
        }
    }

    #[test]
    fn constant_upsample_is_exact() {
        let img = MultibandImage::constant(grid(10.0, 15, 15), 3, 0.7).unwrap();
        let up = bilinear_upsample(&img, &grid(3.0, 50, 50)).unwrap();
        assert!(up.values().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn ten_to_three_metre_upsample_shape() {
        let lr = grid(10.0, 150, 150);
        let hr = lr.with_pixel_size(3.0).unwrap();
        let img = MultibandImage::constant(lr, 2, 0.1).unwrap();
        let up = bilinear_upsample(&img, &hr).unwrap();
        assert_eq!(up.values().dim(), (2, 500, 500));
        assert!(up.grid().same_extent(&lr));
    }

    #[test]
    fn upsample_rejects_mismatched_extent() {
        let img = MultibandImage::constant(grid(10.0, 4, 4), 1, 0.0).unwrap();
        let other = GeoGrid::new(0.0, 0.0, 5.0, 8, 8).unwrap();
        assert!(matches!(bilinear_upsample(&img, &other), Err(Error::Alignment(_))));
        let coarser = grid(20.0, 2, 2);
        assert!(matches!(bilinear_upsample(&img, &coarser), Err(Error::Alignment(_))));
    }

    #[test]
    fn nodata_propagates_from_any_contributor() {
        let src = grid(2.0, 2, 2);
        let mut nd = Array2::from_elem((2, 2), false);
        nd[[0, 0]] = true;
        let img = MultibandImage::new(src, Array3::from_elem((1, 2, 2), 1.0), nd).unwrap();
        let up = bilinear_upsample(&img, &grid(1.0, 4, 4)).unwrap();
        // Every output in the first two rows/cols touches source (0,0).
        let expected_nd = array![
            [true, true, true, false],
            [true, true, true, false],
            [true, true, true, false],
            [false, false, false, false],
        ];
        assert_eq!(up.nodata(), &expected_nd);
        assert_eq!(up.values()[[0, 3, 3]], 1.0);
        assert_eq!(up.values()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let op = BilinearOperator::new(&grid(4.0, 5, 3), &grid(1.0, 20, 12)).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(r, c)| ((r * 7 + c * 3) % 5) as f64 - 1.7);
        let y = Array2::from_shape_fn((12, 20), |(r, c)| ((r * 11 + c * 5) % 9) as f64 * 0.3);
        let lhs = (&op.apply(x.view()) * &y).sum();
        let rhs = (&x * &op.adjoint(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn block_downsample_examples() {
        let g = grid(1.0, 4, 4);
        let ones = MultibandImage::constant(g, 1, 1.0).unwrap();
        assert_eq!(block_downsample(&ones, 1).unwrap(), ones);
        let one = block_downsample(&ones, 4).unwrap();
        assert_eq!(one.values()[[0, 0, 0]], 1.0);
        assert_eq!(one.grid().pixel_size(), 4.0);

        let img = MultibandImage::from_values(grid(1.0, 2, 2), array![[[0.0, 0.0], [1.0, 1.0]]])
            .unwrap();
        assert_eq!(block_downsample(&img, 2).unwrap().values()[[0, 0, 0]], 0.5);

        assert!(matches!(block_downsample(&ones, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn block_nodata_needs_a_strict_majority() {
        let g = grid(1.0, 2, 2);
        let values = array![[[1.0, 3.0], [5.0, 7.0]]];
        let half = array![[true, true], [false, false]];
        let d = block_downsample(&MultibandImage::new(g, values.clone(), half).unwrap(), 2).unwrap();
        assert!(!d.nodata()[[0, 0]]);
        assert_eq!(d.values()[[0, 0, 0]], 6.0);
        let most = array![[true, true], [true, false]];
        let d = block_downsample(&MultibandImage::new(g, values, most).unwrap(), 2).unwrap();
        assert!(d.nodata()[[0, 0]]);
    }

    #[test]
    fn resample_identical_grid_is_bitwise_copy() {
        let g = grid(10.0, 3, 3);
        let img = MultibandImage::from_values(
            g,
            Array3::from_shape_fn((2, 3, 3), |(b, r, c)| (b * 9 + r * 3 + c) as f64 / 7.0),
        )
        .unwrap();
        for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
            assert_eq!(resample_to_grid(&img, &g, mode).unwrap(), img);
        }
    }

    #[test]
    fn nearest_on_half_pixel_shift_picks_closest_centre_lower_on_ties() {
        let src = grid(10.0, 3, 3);
        let img = MultibandImage::from_values(
            src,
            Array3::from_shape_fn((1, 3, 3), |(_, r, c)| (r * 3 + c) as f64),
        )
        .unwrap();
        // Shifted by half a source pixel: every target centre lies on a source pixel edge.
        let dst = GeoGrid::new(1005.0, 2005.0, 10.0, 3, 3).unwrap();
        let out = resample_to_grid(&img, &dst, ResampleMode::Nearest).unwrap();

        // exhaustive scan over source centres; strict `<` keeps the lower index on ties
        let closest = |coord: f64, centre: &dyn Fn(usize) -> f64| {
            let mut best = 0;
            for i in 1..3 {
                if (centre(i) - coord).abs() < (centre(best) - coord).abs() {
                    best = i;
                }
            }
            best
        };
        for r in 0..3 {
            for c in 0..3 {
                let (x, y) = dst.pixel_center(r, c);
                let inside = x < 1030.0 && y < 2030.0;
                assert_eq!(out.nodata()[[r, c]], !inside);
                if !inside {
                    continue;
                }
                let sc = closest(x, &|i| src.pixel_center(0, i).0);
                let sr = closest(y, &|i| src.pixel_center(i, 0).1);
                assert_eq!(out.values()[[0, r, c]], (sr * 3 + sc) as f64, "({r},{c})");
            }
        }
        assert_eq!(out.values()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn resample_without_overlap_fails() {
        let img = MultibandImage::constant(grid(10.0, 3, 3), 1, 1.0).unwrap();
        let far = GeoGrid::new(0.0, 0.0, 10.0, 3, 3).unwrap();
        assert!(matches!(
            resample_to_grid(&img, &far, ResampleMode::Bilinear),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn resample_bilinear_matches_reference_inside() {
        let src = grid(10.0, 6, 5);
        let plane = Array2::from_shape_fn((5, 6), |(r, c)| (r as f64 * 1.3 - c as f64 * 0.4).sin());
        let img = MultibandImage::from_values(src, plane.clone().insert_axis(Axis(0))).unwrap();
        let dst = GeoGrid::new(1003.0, 2007.0, 4.0, 14, 11).unwrap();
        let out = resample_to_grid(&img, &dst, ResampleMode::Bilinear).unwrap();
        for r in 0..11 {
            for c in 0..14 {
                let (x, y) = dst.pixel_center(r, c);
                let (u, v) = src.to_grid_coords(x, y);
                if out.nodata()[[r, c]] {
                    assert!(u >= 6.0 || v >= 5.0);
                    continue;
                }
                let want = bilinear_reference(&plane, u - 0.5, v - 0.5);
                assert!((out.values()[[0, r, c]] - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn upsample_stays_within_input_bounds(
            vals in proptest::collection::vec(-5.0f64..5.0, 16),
            factor in 1usize..5,
        ) {
            let src = grid(12.0, 4, 4);
            let img = MultibandImage::from_values(
                src,
                Array3::from_shape_vec((1, 4, 4), vals.clone()).unwrap(),
            ).unwrap();
            let up = bilinear_upsample(&img, &src.refine(factor).unwrap()).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in up.values() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn downsample_then_upsample_constant_is_identity(
            value in -3.0f64..3.0,
            factor in 1usize..5,
            n in 1usize..4,
        ) {
            let g = grid(3.0, n * factor, n * factor);
            let img = MultibandImage::constant(g, 2, value).unwrap();
            let down = block_downsample(&img, factor).unwrap();
            let back = bilinear_upsample(&down, &g).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
