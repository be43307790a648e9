//! Transect-based river width estimation.
//!
//! The width at a transect is the number of water cells the transect passes
//! through multiplied by the pixel size. A cell is traversed when its footprint
//! `[col, col + 1) x [row, row + 1)` (in grid units) intersects the open segment
//! `center ± half_length * normal`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GeoGrid};

/// A measurement site: a segment across the river, perpendicular to its centreline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transect {
    id: String,
    center: (f64, f64),
    normal: (f64, f64),
    half_length: f64,
    truth_width: Option<f64>,
}

impl Transect {
    pub fn new(
        id: impl Into<String>,
        center: (f64, f64),
        normal: (f64, f64),
        half_length: f64,
    ) -> Result<Self> {
        let norm = (normal.0 * normal.0 + normal.1 * normal.1).sqrt();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(Error::Invalid(format!(
                "transect normal must be a unit vector, |n| = {norm}"
            )));
        }
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::Invalid(format!(
                "transect half-length must be positive, got {half_length}"
            )));
        }
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(Error::Invalid("transect centre must be finite".into()));
        }
        Ok(Transect {
            id: id.into(),
            center,
            normal,
            half_length,
            truth_width: None,
        })
    }

    pub fn with_truth(mut self, width_m: f64) -> Self {
        self.truth_width = Some(width_m);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn normal(&self) -> (f64, f64) {
        self.normal
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn truth_width(&self) -> Option<f64> {
        self.truth_width
    }

    /// Segment end points in continuous grid coordinates `(col, row)`.
    fn grid_endpoints(&self, grid: &GeoGrid) -> ((f64, f64), (f64, f64)) {
        let (cx, cy) = self.center;
        let (nx, ny) = self.normal;
        let h = self.half_length;
        (
            grid.to_grid_coords(cx - h * nx, cy - h * ny),
            grid.to_grid_coords(cx + h * nx, cy + h * ny),
        )
    }
}

/// Cells crossed by the open transect segment, ordered along it, each listed once.
pub fn traverse_cells(transect: &Transect, grid: &GeoGrid) -> Vec<(usize, usize)> {
    traverse_with_params(transect, grid)
        .into_iter()
        .map(|(cell, _, _)| cell)
        .collect()
}

/// Like [`traverse_cells`], with the parameter interval `(t_in, t_out)` along the
/// segment (`t` in `(0, 1)`) spent inside each cell.
fn traverse_with_params(transect: &Transect, grid: &GeoGrid) -> Vec<((usize, usize), f64, f64)> {
    let ((ax, ay), (bx, by)) = transect.grid_endpoints(grid);
    let (dx, dy) = (bx - ax, by - ay);

    // Parameters where the segment crosses a grid line, with the exact line
    // coordinate so cells touched only at a vertex are classified exactly.
    let mut events: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    let mut push_crossings = |a: f64, d: f64, is_x: bool| {
        if d == 0.0 {
            return;
        }
        let (lo, hi) = if d > 0.0 { (a, a + d) } else { (a + d, a) };
        let mut k = lo.floor() + 1.0;
        while k < hi {
            let t = (k - a) / d;
            if t > 0.0 && t < 1.0 {
                events.push(if is_x { (t, Some(k), None) } else { (t, None, Some(k)) });
            }
            k += 1.0;
        }
    };
    push_crossings(ax, dx, true);
    push_crossings(ay, dy, false);
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, Option<f64>, Option<f64>)> = Vec::with_capacity(events.len());
    for e in events {
        match merged.last_mut() {
            Some(last) if last.0 == e.0 => {
                last.1 = last.1.or(e.1);
                last.2 = last.2.or(e.2);
            }
            _ => merged.push(e),
        }
    }

    let (w, h) = (grid.width() as f64, grid.height() as f64);
    let cell_at = |x: f64, y: f64| -> Option<(usize, usize)> {
        let (c, r) = (x.floor(), y.floor());
        (c >= 0.0 && r >= 0.0 && c < w && r < h).then_some((r as usize, c as usize))
    };

    let mut out: Vec<((usize, usize), f64, f64)> = Vec::new();
    let mut visit = |cell: Option<(usize, usize)>, t0: f64, t1: f64| {
        if let Some(cell) = cell {
            match out.last_mut() {
                Some(last) if last.0 == cell => last.2 = t1,
                _ => out.push((cell, t0, t1)),
            }
        }
    };
    let mut prev = 0.0;
    for &(t, ex, ey) in &merged {
        let mid = 0.5 * (prev + t);
        visit(cell_at(ax + mid * dx, ay + mid * dy), prev, t);
        let x = ex.unwrap_or(ax + t * dx);
        let y = ey.unwrap_or(ay + t * dy);
        visit(cell_at(x, y), t, t);
        prev = t;
    }
    let mid = 0.5 * (prev + 1.0);
    visit(cell_at(ax + mid * dx, ay + mid * dy), prev, 1.0);
    out
}

/// How a count of traversed water cells becomes a width in metres.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRule {
    /// Water cell count times pixel size.
    #[default]
    PixelCount,
    /// Length of the transect lying inside water cells. Removes the
    /// up-to-sqrt(2) inflation of diagonal transects.
    ChordLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthMeasurement {
    pub transect_id: String,
    pub predicted_width: f64,
    pub truth_width: Option<f64>,
    pub water_pixel_count: usize,
    /// False when the transect misses the grid entirely.
    pub valid: bool,
}

pub fn estimate_width(mask: &BinaryMask, transect: &Transect) -> WidthMeasurement {
    estimate_width_with(mask, transect, WidthRule::PixelCount)
}

pub fn estimate_width_with(mask: &BinaryMask, transect: &Transect, rule: WidthRule) -> WidthMeasurement {
    let grid = mask.grid();
    let cells = traverse_with_params(transect, grid);
    let ps = grid.pixel_size();
    let seg_len = 2.0 * transect.half_length;
    let mut count = 0usize;
    let mut chord = 0.0;
    for &((r, c), t0, t1) in &cells {
        if mask.is_water(r, c) {
            count += 1;
            chord += (t1 - t0) * seg_len;
        }
    }
    let predicted_width = match rule {
        WidthRule::PixelCount => count as f64 * ps,
        WidthRule::ChordLength => chord,
    };
    WidthMeasurement {
        transect_id: transect.id.clone(),
        predicted_width,
        truth_width: transect.truth_width,
        water_pixel_count: count,
        valid: !cells.is_empty(),
    }
}

/// Exhaustive oracle: tests every candidate cell's footprint against the segment
/// independently of the incremental traversal.
pub fn brute_force_cells(transect: &Transect, grid: &GeoGrid) -> Vec<(usize, usize)> {
    let ((ax, ay), (bx, by)) = transect.grid_endpoints(grid);
    let (dx, dy) = (bx - ax, by - ay);
    let c0 = ax.min(bx).floor().max(0.0) as usize;
    let r0 = ay.min(by).floor().max(0.0) as usize;
    let c1 = (ax.max(bx).floor() + 1.0).clamp(0.0, grid.width() as f64) as usize;
    let r1 = (ay.max(by).floor() + 1.0).clamp(0.0, grid.height() as f64) as usize;
    let mut hits = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let ix = axis_interval(ax, dx, c as f64);
            let iy = axis_interval(ay, dy, r as f64);
            if let Some(t) = intersect_open_unit(ix, iy) {
                hits.push((t, (r, c)));
            }
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    hits.into_iter().map(|(_, cell)| cell).collect()
}

/// Width from [`brute_force_cells`]; counts distinct water cells times pixel size.
pub fn brute_force_width(mask: &BinaryMask, transect: &Transect) -> f64 {
    let n = brute_force_cells(transect, mask.grid())
        .into_iter()
        .filter(|&(r, c)| mask.is_water(r, c))
        .count();
    n as f64 * mask.grid().pixel_size()
}

/// Interval bound: value and whether it is excluded.
type Bound = (f64, bool);

/// `{t : lo <= a + t d < lo + 1}` as (lower, upper) bounds.
fn axis_interval(a: f64, d: f64, lo: f64) -> Option<(Bound, Bound)> {
    let hi = lo + 1.0;
    if d == 0.0 {
        return (lo <= a && a < hi)
            .then_some(((f64::NEG_INFINITY, true), (f64::INFINITY, true)));
    }
    let t_lo = (lo - a) / d;
    let t_hi = (hi - a) / d;
    if d > 0.0 {
        Some(((t_lo, false), (t_hi, true)))
    } else {
        Some(((t_hi, true), (t_lo, false)))
    }
}

/// Intersects two axis intervals with the open unit interval; returns a
/// representative parameter when non-empty.
fn intersect_open_unit(x: Option<(Bound, Bound)>, y: Option<(Bound, Bound)>) -> Option<f64> {
    let (xl, xu) = x?;
    let (yl, yu) = y?;
    let mut lower: Bound = (0.0, true);
    let mut upper: Bound = (1.0, true);
    for l in [xl, yl] {
        if l.0 > lower.0 || (l.0 == lower.0 && l.1) {
            lower = l;
        }
    }
    for u in [xu, yu] {
        if u.0 < upper.0 || (u.0 == upper.0 && u.1) {
            upper = u;
        }
    }
    let nonempty = lower.0 < upper.0 || (lower.0 == upper.0 && !lower.1 && !upper.1);
    nonempty.then_some(if upper.0 > lower.0 {
        0.5 * (lower.0 + upper.0)
    } else {
        lower.0
    })
}

/// Measures every transect; off-grid transects come back flagged invalid.
pub fn widths_for_scene(mask: &BinaryMask, transects: &[Transect], rule: WidthRule) -> Vec<WidthMeasurement> {
    transects
        .iter()
        .map(|t| {
            let m = estimate_width_with(mask, t, rule);
            if !m.valid {
                log::warn!("transect {} does not intersect the mask grid", t.id);
            }
            m
        })
        .collect()
}

/// Reads a transects file: one `id,center_x,center_y,normal_x,normal_y,half_length_m[,truth_width_m]`
/// record per line; `#` starts a comment line.
pub fn read_transects(path: &Path) -> Result<Vec<Transect>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != 6 && rec.len() != 7 {
            return Err(Error::format(
                path,
                format!("record {}: expected 6 or 7 fields, got {}", line + 1, rec.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| {
                Error::format(path, format!("record {}: field {}: {e}", line + 1, i + 1))
            })
        };
        let mut t = Transect::new(&rec[0], (num(1)?, num(2)?), (num(3)?, num(4)?), num(5)?)
            .map_err(|e| Error::format(path, format!("record {}: {e}", line + 1)))?;
        if rec.len() == 7 && !rec[6].is_empty() {
            t = t.with_truth(num(6)?);
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_transects(path: &Path, transects: &[Transect]) -> Result<()> {
    let mut text = String::from("# id,center_x,center_y,normal_x,normal_y,half_length_m,truth_width_m\n");
    for t in transects {
        text.push_str(&format!(
            "{},{},{},{},{},{}",
            t.id, t.center.0, t.center.1, t.normal.0, t.normal.1, t.half_length
        ));
        if let Some(w) = t.truth_width {
            text.push_str(&format!(",{w}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_widths_csv(path: &Path, measurements: &[WidthMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let io_err = |e: csv::Error| Error::format(path, e);
    w.write_record(["transect_id", "water_pixel_count", "predicted_width_m", "truth_width_m", "valid"])
        .map_err(io_err)?;
    for m in measurements {
        w.write_record([
            m.transect_id.clone(),
            m.water_pixel_count.to_string(),
            m.predicted_width.to_string(),
            m.truth_width.map(|t| t.to_string()).unwrap_or_default(),
            m.valid.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn grid(ps: f64, n: usize) -> GeoGrid {
        GeoGrid::new(0.0, 0.0, ps, n, n).unwrap()
    }

    fn horizontal(center: (f64, f64), half: f64) -> Transect {
        Transect::new("t", center, (1.0, 0.0), half).unwrap()
    }

    #[test]
    fn transect_validation() {
        assert!(Transect::new("a", (0.0, 0.0), (1.0, 1.0), 1.0).is_err());
        assert!(Transect::new("a", (0.0, 0.0), (1.0, 0.0), 0.0).is_err());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(Transect::new("a", (0.0, 0.0), (s, s), 1.0).is_ok());
    }

    #[test]
    fn half_length_two_and_a_half_pixels() {
        let g = grid(1.0, 10);
        // centred on pixel centre (row 4, col 4): open x-range (2, 7) -> cols 2..=6
        let cells = traverse_cells(&horizontal((4.5, 4.5), 2.5), &g);
        assert_eq!(cells, (2..=6).map(|c| (4, c)).collect::<Vec<_>>());
        // centred on a pixel edge: open x-range (1.5, 6.5) -> cols 1..=6
        let cells = traverse_cells(&horizontal((4.0, 4.5), 2.5), &g);
        assert_eq!(cells, (1..=6).map(|c| (4, c)).collect::<Vec<_>>());
        for t in [horizontal((4.5, 4.5), 2.5), horizontal((4.0, 4.5), 2.5)] {
            assert_eq!(traverse_cells(&t, &g), brute_force_cells(&t, &g));
        }
    }

    #[test]
    fn off_grid_transect_is_empty() {
        let g = grid(3.0, 10);
        let t = horizontal((-100.0, -100.0), 10.0);
        assert!(traverse_cells(&t, &g).is_empty());
        let mask = BinaryMask::from_fn(g, |_, _| true);
        let m = estimate_width(&mask, &t);
        assert!(!m.valid);
        assert_eq!(m.predicted_width, 0.0);
    }

    #[test]
    fn axis_aligned_centre_to_centre_spans_two_k_plus_one() {
        let g = grid(3.0, 20);
        for k in 1..6 {
            let (x, y) = g.pixel_center(9, 9);
            let h = horizontal((x, y), k as f64 * 3.0);
            let v = Transect::new("v", (x, y), (0.0, 1.0), k as f64 * 3.0).unwrap();
            assert_eq!(traverse_cells(&h, &g).len(), 2 * k + 1);
            assert_eq!(traverse_cells(&v, &g).len(), 2 * k + 1);
            let all_water = BinaryMask::from_fn(g, |_, _| true);
            assert_eq!(estimate_width(&all_water, &h).predicted_width, (2 * k + 1) as f64 * 3.0);
            assert_eq!(brute_force_width(&all_water, &h), (2 * k + 1) as f64 * 3.0);
        }
    }

    #[test]
    fn vertical_river_five_pixels_wide() {
        let g = grid(3.0, 20);
        let mask = BinaryMask::from_fn(g, |_, c| (8..13).contains(&c));
        let (x, y) = g.pixel_center(10, 10);
        let m = estimate_width(&mask, &horizontal((x, y), 24.0));
        assert_eq!(m.water_pixel_count, 5);
        assert_eq!(m.predicted_width, 15.0);
        let land = BinaryMask::from_fn(g, |_, _| false);
        assert_eq!(estimate_width(&land, &horizontal((x, y), 24.0)).predicted_width, 0.0);
    }

    #[test]
    fn braided_runs_are_summed() {
        // 10x10 mask, row 5: water at cols 1,2,3 and 6,7
        let g = grid(2.0, 10);
        let mut v = Array2::zeros((10, 10));
        for c in [1, 2, 3, 6, 7] {
            v[[5, c]] = 1;
        }
        let mask = BinaryMask::new(g, v).unwrap();
        let (x, y) = g.pixel_center(5, 5);
        let t = horizontal((x, y), 9.0);
        // open x-span (1, 10) in grid units -> cols 1..=9
        assert_eq!(traverse_cells(&t, &g).len(), 9);
        let m = estimate_width(&mask, &t);
        assert_eq!(m.water_pixel_count, 5);
        assert_eq!(m.predicted_width, 10.0);
    }

    #[test]
    fn diagonal_through_vertices_matches_oracle() {
        let g = grid(1.0, 8);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for t in [
            Transect::new("d1", (4.0, 4.0), (s, s), 2.0).unwrap(),
            Transect::new("d2", (4.0, 4.0), (s, -s), 2.0).unwrap(),
        ] {
            assert_eq!(traverse_cells(&t, &g), brute_force_cells(&t, &g));
        }
    }

    #[test]
    fn chord_rule_recovers_diagonal_width() {
        // Diagonal band of water; a transect along the band's normal.
        let g = grid(1.0, 60);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mask = BinaryMask::from_fn(g, |r, c| {
            let (x, y) = g.pixel_center(r, c);
            ((x - y) * s).abs() < 5.0
        });
        let t = Transect::new("d", (30.0, 30.0), (s, -s), 15.0).unwrap();
        let counted = estimate_width(&mask, &t).predicted_width;
        let chord = estimate_width_with(&mask, &t, WidthRule::ChordLength).predicted_width;
        assert!((chord - 10.0).abs() <= 2.0, "chord {chord}");
        assert!(counted > chord * 1.2, "count {counted} vs chord {chord}");
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (BinaryMask, Transect) {
        let n = rng.random_range(4..24);
        let ps = [1.0, 3.0, 10.0][rng.random_range(0..3)];
        let g = GeoGrid::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), ps, n, n).unwrap();
        let p = rng.random_range(0.1..0.9);
        let mask = BinaryMask::from_fn(g, |_, _| rng.random_bool(p));
        let e = g.extent();
        let center = (
            rng.random_range(e.min_x - 2.0 * ps..e.max_x + 2.0 * ps),
            rng.random_range(e.min_y - 2.0 * ps..e.max_y + 2.0 * ps),
        );
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let t = Transect::new("r", center, (angle.cos(), angle.sin()), rng.random_range(0.2..(n as f64)) * ps).unwrap();
        (mask, t)
    }

    #[test]
    fn traversal_matches_exhaustive_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let (mask, t) = random_case(&mut rng);
            assert_eq!(traverse_cells(&t, mask.grid()), brute_force_cells(&t, mask.grid()), "{t:?}");
            assert_eq!(estimate_width(&mask, &t).predicted_width, brute_force_width(&mask, &t));
        }
    }

    #[test]
    fn one_off_image_transect_in_ten() {
        let g = grid(3.0, 30);
        let mask = BinaryMask::from_fn(g, |_, c| (10..20).contains(&c));
        let mut ts: Vec<Transect> = (0..9)
            .map(|i| {
                let (x, y) = g.pixel_center(2 + 3 * i, 15);
                Transect::new(format!("t{i}"), (x, y), (1.0, 0.0), 30.0).unwrap().with_truth(30.0)
            })
            .collect();
        ts.push(Transect::new("off", (-500.0, -500.0), (1.0, 0.0), 30.0).unwrap());
        let ms = widths_for_scene(&mask, &ts, WidthRule::PixelCount);
        assert_eq!(ms.iter().filter(|m| m.valid).count(), 9);
        assert!(!ms[9].valid);
        assert!(ms[..9].iter().all(|m| m.predicted_width == 30.0 && m.truth_width == Some(30.0)));
        assert!(widths_for_scene(&mask, &[], WidthRule::PixelCount).is_empty());
    }

    #[test]
    fn transects_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.csv");
        let ts = vec![
            Transect::new("a", (1.5, 2.5), (1.0, 0.0), 12.0).unwrap().with_truth(45.0),
            Transect::new("b", (-3.0, 0.25), (0.0, -1.0), 6.0).unwrap(),
        ];
        write_transects(&path, &ts).unwrap();
        assert_eq!(read_transects(&path).unwrap(), ts);
        std::fs::write(&path, "a,1,2,3\n").unwrap();
        assert!(read_transects(&path).is_err());
    }

    proptest! {
        #[test]
        fn adding_water_never_shrinks_width(seed in any::<u64>(), extra in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mask, t) = random_case(&mut rng);
            let before = estimate_width(&mask, &t).predicted_width;
            let mut v = mask.values().clone();
            let (h, w) = v.dim();
            for _ in 0..extra {
                v[[rng.random_range(0..h), rng.random_range(0..w)]] = 1;
            }
            let more = BinaryMask::new(*mask.grid(), v).unwrap();
            prop_assert!(estimate_width(&more, &t).predicted_width >= before);
        }
    }
}
