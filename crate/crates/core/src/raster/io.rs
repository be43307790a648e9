//! Directory-based raster storage.
//!
//! A raster is a directory holding:
//!
//! - `header.toml`: format tag, kind, band count, grid and free-form attributes
//! - `values.f32`: little-endian `f32`, `bands x height x width`, row-major
//! - `nodata.bits`: optional packed no-data bitmap, one bit per pixel in
//!   row-major order, least-significant bit first, `ceil(height * width / 8)` bytes
//!
//! Masks are stored as a single band of `0.0` / `1.0`; logits as a single band.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, GeoGrid, LogitMap, MultibandImage};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "rivolution-raster/1";
const HEADER_FILE: &str = "header.toml";
const VALUES_FILE: &str = "values.f32";
const NODATA_FILE: &str = "nodata.bits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Image,
    Mask,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub format: String,
    pub kind: RasterKind,
    pub bands: usize,
    pub values: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<String>,
    pub grid: GeoGrid,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub attributes: toml::Table,
}

pub fn read_header(dir: &Path) -> Result<RasterHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: RasterHeader = toml::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if header.format != FORMAT_TAG {
        return Err(Error::format(
            &path,
            format!("unsupported format tag {:?}", header.format),
        ));
    }
    Ok(header)
}

fn write_raw(
    dir: &Path,
    kind: RasterKind,
    grid: &GeoGrid,
    values: &Array3<f64>,
    nodata: Option<&Array2<bool>>,
    attributes: toml::Table,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nodata = nodata.filter(|nd| nd.iter().any(|&n| n));
    let header = RasterHeader {
        format: FORMAT_TAG.to_string(),
        kind,
        bands: values.dim().0,
        values: VALUES_FILE.to_string(),
        nodata: nodata.map(|_| NODATA_FILE.to_string()),
        grid: *grid,
        attributes,
    };
    let header_path = dir.join(HEADER_FILE);
    let text = toml::to_string(&header).map_err(|e| Error::format(&header_path, e))?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;

    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let values_path = dir.join(VALUES_FILE);
    fs::write(&values_path, bytes).map_err(|e| Error::io(&values_path, e))?;

    let nodata_path = dir.join(NODATA_FILE);
    match nodata {
        Some(nd) => {
            let mut packed = vec![0u8; nd.len().div_ceil(8)];
            for (i, &n) in nd.iter().enumerate() {
                if n {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            fs::write(&nodata_path, packed).map_err(|e| Error::io(&nodata_path, e))?;
        }
        None if nodata_path.exists() => {
            fs::remove_file(&nodata_path).map_err(|e| Error::io(&nodata_path, e))?;
        }
        None => {}
    }
    Ok(())
}

struct RawRaster {
    header: RasterHeader,
    values: Array3<f64>,
    nodata: Array2<bool>,
}

fn read_raw(dir: &Path, expect: RasterKind) -> Result<RawRaster> {
    let header = read_header(dir)?;
    let header_path = dir.join(HEADER_FILE);
    if header.kind != expect {
        return Err(Error::format(
            &header_path,
            format!("expected a {expect:?} raster, found {:?}", header.kind),
        ));
    }
    let (h, w) = header.grid.shape();
    let values_path = dir.join(&header.values);
    let bytes = fs::read(&values_path).map_err(|e| Error::io(&values_path, e))?;
    let n = header.bands * h * w;
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &values_path,
            format!("expected {} bytes, found {}", n * 4, bytes.len()),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let values = Array3::from_shape_vec((header.bands, h, w), flat)
        .map_err(|e| Error::format(&values_path, e))?;

    let nodata = match &header.nodata {
        Some(name) => {
            let path = dir.join(name);
            let packed = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if packed.len() != (h * w).div_ceil(8) {
                return Err(Error::format(&path, "no-data bitmap has the wrong length"));
            }
            Array2::from_shape_fn((h, w), |(r, c)| {
                let i = r * w + c;
                packed[i / 8] >> (i % 8) & 1 == 1
            })
        }
        None => Array2::from_elem((h, w), false),
    };
    Ok(RawRaster {
        header,
        values,
        nodata,
    })
}

pub fn write_image(dir: &Path, img: &MultibandImage, attributes: toml::Table) -> Result<()> {
    write_raw(
        dir,
        RasterKind::Image,
        img.grid(),
        img.values(),
        Some(img.nodata()),
        attributes,
    )
}

pub fn read_image(dir: &Path) -> Result<(MultibandImage, toml::Table)> {
    let raw = read_raw(dir, RasterKind::Image)?;
    let img = MultibandImage::new(raw.header.grid, raw.values, raw.nodata)?;
    Ok((img, raw.header.attributes))
}

pub fn write_mask(dir: &Path, mask: &BinaryMask, attributes: toml::Table) -> Result<()> {
    let values = mask.as_f64().insert_axis(Axis(0));
    write_raw(dir, RasterKind::Mask, mask.grid(), &values, None, attributes)
}

pub fn read_mask(dir: &Path) -> Result<(BinaryMask, toml::Table)> {
    let raw = read_raw(dir, RasterKind::Mask)?;
    if raw.header.bands != 1 {
        return Err(Error::format(dir.join(HEADER_FILE), "masks have exactly one band"));
    }
    let plane = raw.values.index_axis_move(Axis(0), 0);
    if plane.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(dir.join(VALUES_FILE), "mask values must be 0 or 1"));
    }
    let mask = BinaryMask::new(raw.header.grid, plane.mapv(|v| v as u8))?;
    Ok((mask, raw.header.attributes))
}

pub fn write_logits(dir: &Path, logits: &LogitMap, attributes: toml::Table) -> Result<()> {
    let values = logits.values().clone().insert_axis(Axis(0));
    write_raw(dir, RasterKind::Logits, logits.grid(), &values, None, attributes)
}

pub fn read_logits(dir: &Path) -> Result<(LogitMap, toml::Table)> {
    let raw = read_raw(dir, RasterKind::Logits)?;
    if raw.header.bands != 1 {
        return Err(Error::format(dir.join(HEADER_FILE), "logit maps have exactly one band"));
    }
    let logits = LogitMap::new(raw.header.grid, raw.values.index_axis_move(Axis(0), 0))?;
    Ok((logits, raw.header.attributes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_with_nodata_and_attributes() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = GeoGrid::new(10.0, 20.0, 3.0, 5, 3).unwrap();
        let values = Array3::from_shape_fn((2, 3, 5), |(b, r, c)| (b * 15 + r * 5 + c) as f64 * 0.25);
        let mut nodata = Array2::from_elem((3, 5), false);
        nodata[[2, 4]] = true;
        nodata[[0, 1]] = true;
        let img = MultibandImage::new(grid, values, nodata).unwrap();
        let mut attrs = toml::Table::new();
        attrs.insert("source_id".into(), "s2-a".into());
        write_image(tmp.path(), &img, attrs.clone()).unwrap();

        let (back, back_attrs) = read_image(tmp.path()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back_attrs, attrs);
        // 15 pixels -> 2 bytes of bitmap
        assert_eq!(fs::read(tmp.path().join(NODATA_FILE)).unwrap().len(), 2);
        assert_eq!(fs::read(tmp.path().join(VALUES_FILE)).unwrap().len(), 2 * 15 * 4);
    }

    #[test]
    fn bitmap_layout_is_lsb_first_row_major() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = GeoGrid::new(0.0, 0.0, 1.0, 3, 3).unwrap();
        let mut nodata = Array2::from_elem((3, 3), false);
        nodata[[0, 0]] = true; // bit 0
        nodata[[1, 0]] = true; // bit 3
        nodata[[2, 2]] = true; // bit 8
        let img = MultibandImage::new(grid, Array3::zeros((1, 3, 3)), nodata).unwrap();
        write_image(tmp.path(), &img, toml::Table::new()).unwrap();
        assert_eq!(fs::read(tmp.path().join(NODATA_FILE)).unwrap(), vec![0b0000_1001, 0b1]);
    }

    #[test]
    fn mask_and_logit_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = GeoGrid::new(0.0, 0.0, 3.0, 4, 2).unwrap();
        let mask = BinaryMask::from_fn(grid, |r, c| (r + c) % 3 == 0);
        write_mask(&tmp.path().join("m"), &mask, toml::Table::new()).unwrap();
        assert_eq!(read_mask(&tmp.path().join("m")).unwrap().0, mask);

        let logits = LogitMap::new(grid, Array2::from_shape_fn((2, 4), |(r, c)| r as f64 - c as f64 * 0.5)).unwrap();
        write_logits(&tmp.path().join("l"), &logits, toml::Table::new()).unwrap();
        assert_eq!(read_logits(&tmp.path().join("l")).unwrap().0, logits);
        assert!(read_image(&tmp.path().join("l")).is_err());
    }

    #[test]
    fn truncated_values_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = GeoGrid::new(0.0, 0.0, 1.0, 2, 2).unwrap();
        write_image(tmp.path(), &MultibandImage::constant(grid, 1, 1.0).unwrap(), toml::Table::new()).unwrap();
        fs::write(tmp.path().join(VALUES_FILE), [0u8; 10]).unwrap();
        assert!(matches!(read_image(tmp.path()), Err(Error::Format { .. })));
    }
}
