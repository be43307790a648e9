//! Raster geometry and image containers.
//!
//! Pixel `(row, col)` of a grid is centred at
//! `(origin_x + (col + 0.5) * pixel_size, origin_y + (row + 0.5) * pixel_size)`;
//! map `y` grows with the row index.

mod io;
mod resample;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_header, read_image, read_logits, read_mask, write_image, write_logits, write_mask,
    RasterHeader, RasterKind,
};
pub use resample::{
    bilinear_upsample, block_downsample, resample_to_grid, BilinearOperator, ResampleMode,
    Upsample,
};

const EXTENT_RTOL: f64 = 1e-9;

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= EXTENT_RTOL * scale.max(1.0)
}

/// Axis-aligned bounds in map units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// Area of the intersection with `other` (zero when disjoint or touching).
    pub fn overlap_area(&self, other: &Extent) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// Raster geometry: origin of the top-left corner, square pixel size and pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridFields", into = "GridFields")]
pub struct GeoGrid {
    origin_x: f64,
    origin_y: f64,
    pixel_size: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFields {
    origin_x: f64,
    origin_y: f64,
    pixel_size: f64,
    width: usize,
    height: usize,
}

impl TryFrom<GridFields> for GeoGrid {
    type Error = Error;

    fn try_from(f: GridFields) -> Result<Self> {
        GeoGrid::new(f.origin_x, f.origin_y, f.pixel_size, f.width, f.height)
    }
}

impl From<GeoGrid> for GridFields {
    fn from(g: GeoGrid) -> Self {
        GridFields {
            origin_x: g.origin_x,
            origin_y: g.origin_y,
            pixel_size: g.pixel_size,
            width: g.width,
            height: g.height,
        }
    }
}

impl GeoGrid {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::Invalid(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "grid dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(origin_x.is_finite() && origin_y.is_finite()) {
            return Err(Error::Invalid("grid origin must be finite".into()));
        }
        Ok(GeoGrid {
            origin_x,
            origin_y,
            pixel_size,
            width,
            height,
        })
    }

    pub fn origin_x(&self) -> f64 {
        self.origin_x
    }

    pub fn origin_y(&self) -> f64 {
        self.origin_y
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn extent(&self) -> Extent {
        Extent {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.origin_x + self.width as f64 * self.pixel_size,
            max_y: self.origin_y + self.height as f64 * self.pixel_size,
        }
    }

    fn scale(&self) -> f64 {
        self.extent()
            .width()
            .max(self.extent().height())
            .max(self.origin_x.abs())
            .max(self.origin_y.abs())
    }

    /// Same origin and same extent in map units; pixel sizes may differ.
    pub fn same_extent(&self, other: &GeoGrid) -> bool {
        let (a, b) = (self.extent(), other.extent());
        let s = self.scale().max(other.scale());
        close(a.min_x, b.min_x, s)
            && close(a.min_y, b.min_y, s)
            && close(a.max_x, b.max_x, s)
            && close(a.max_y, b.max_y, s)
    }

    /// Alias for [`GeoGrid::same_extent`]: two grids are aligned iff they
    /// share origin and extent.
    pub fn is_aligned(&self, other: &GeoGrid) -> bool {
        self.same_extent(other)
    }

    pub fn overlaps(&self, other: &GeoGrid) -> bool {
        self.extent().overlap_area(&other.extent()) > 0.0
    }

    /// Map coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y + (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Continuous grid coordinates `(col, row)` measured from the top-left corner.
    pub fn to_grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size,
            (y - self.origin_y) / self.pixel_size,
        )
    }

    /// The grid covering the same extent at a different pixel size.
    ///
    /// Fails unless the extent is an integer number of new pixels in both axes.
    pub fn with_pixel_size(&self, pixel_size: f64) -> Result<GeoGrid> {
        let e = self.extent();
        let w = e.width() / pixel_size;
        let h = e.height() / pixel_size;
        let (wr, hr) = (w.round(), h.round());
        if (w - wr).abs() > 1e-6 || (h - hr).abs() > 1e-6 || wr < 1.0 || hr < 1.0 {
            return Err(Error::Alignment(format!(
                "extent {}x{} m is not a whole number of {pixel_size} m pixels",
                e.width(),
                e.height()
            )));
        }
        GeoGrid::new(
            self.origin_x,
            self.origin_y,
            pixel_size,
            wr as usize,
            hr as usize,
        )
    }

    /// Grid with pixels `factor` times larger; dimensions must divide evenly.
    pub fn coarsen(&self, factor: usize) -> Result<GeoGrid> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape(format!(
                "factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        GeoGrid::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size * factor as f64,
            self.width / factor,
            self.height / factor,
        )
    }

    /// Grid with pixels `factor` times smaller over the same extent.
    pub fn refine(&self, factor: usize) -> Result<GeoGrid> {
        if factor == 0 {
            return Err(Error::Invalid("refine factor must be >= 1".into()));
        }
        GeoGrid::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size / factor as f64,
            self.width * factor,
            self.height * factor,
        )
    }
}

/// A `C x H x W` stack of reflectance-like values with a per-pixel no-data mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage {
    grid: GeoGrid,
    values: Array3<f64>,
    nodata: Array2<bool>,
}

impl MultibandImage {
    pub fn new(grid: GeoGrid, values: Array3<f64>, nodata: Array2<bool>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 {
            return Err(Error::Shape("image needs at least one band".into()));
        }
        if (h, w) != grid.shape() || nodata.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "values {h}x{w} / nodata {:?} do not match grid {:?}",
                nodata.dim(),
                grid.shape()
            )));
        }
        for ((_, r, col), v) in values.indexed_iter() {
            if !nodata[[r, col]] && !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite value at valid pixel ({r}, {col})"
                )));
            }
        }
        Ok(MultibandImage {
            grid,
            values,
            nodata,
        })
    }

    /// Image with every pixel valid.
    pub fn from_values(grid: GeoGrid, values: Array3<f64>) -> Result<Self> {
        let nodata = Array2::from_elem(grid.shape(), false);
        Self::new(grid, values, nodata)
    }

    pub fn constant(grid: GeoGrid, bands: usize, value: f64) -> Result<Self> {
        Self::from_values(
            grid,
            Array3::from_elem((bands, grid.height(), grid.width()), value),
        )
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn band(&self, b: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), b)
    }

    pub fn nodata(&self) -> &Array2<bool> {
        &self.nodata
    }

    pub fn nodata_count(&self) -> usize {
        self.nodata.iter().filter(|&&n| n).count()
    }

    /// Values with no-data pixels replaced by zero.
    pub fn filled(&self) -> Array3<f64> {
        let mut v = self.values.clone();
        if self.nodata.iter().any(|&n| n) {
            for ((_, r, c), x) in v.indexed_iter_mut() {
                if self.nodata[[r, c]] {
                    *x = 0.0;
                }
            }
        }
        v
    }

    pub fn into_parts(self) -> (GeoGrid, Array3<f64>, Array2<bool>) {
        (self.grid, self.values, self.nodata)
    }
}

/// Water (1) / land (0) mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: GeoGrid,
    values: Array2<u8>,
}

impl BinaryMask {
    pub fn new(grid: GeoGrid, values: Array2<u8>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask { grid, values })
    }

    pub fn from_fn(grid: GeoGrid, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let values = Array2::from_shape_fn(grid.shape(), |(r, c)| f(r, c) as u8);
        BinaryMask { grid, values }
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn is_water(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]] == 1
    }

    pub fn water_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn water_fraction(&self) -> f64 {
        self.water_count() as f64 / self.grid.len() as f64
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

/// Pre-sigmoid water scores on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    grid: GeoGrid,
    values: Array2<f64>,
}

impl LogitMap {
    pub fn new(grid: GeoGrid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "logits {:?} do not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(LogitMap { grid, values })
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
