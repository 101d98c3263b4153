//! IMERG-style HDF5 granule ingestion.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use ndarray::{Array2, ArrayD, Axis, Ix2};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{GridGeometry, RainField};
use crate::{Error, Result};

/// Where the arrays live inside a granule. Defaults follow the IMERG V07B half-hourly
/// layout: `Grid/precipitation` shaped `(time, lon, lat)` in mm/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GranuleLayout {
    pub precipitation: String,
    pub lat: String,
    pub lon: String,
    /// Seconds since 1970-01-01 UTC. When absent the timestamp is parsed from the
    /// file name (`YYYYMMDD-SHHMMSS`).
    pub time: Option<String>,
    /// Missing-data sentinel, replaced by 0 mm/h.
    pub fill_value: f32,
    /// True when the stored array is `(lon, lat)` rather than `(lat, lon)`.
    pub lon_major: bool,
}

impl Default for GranuleLayout {
    fn default() -> Self {
        Self {
            precipitation: "Grid/precipitation".into(),
            lat: "Grid/lat".into(),
            lon: "Grid/lon".into(),
            time: Some("Grid/time".into()),
            fill_value: -9999.9,
            lon_major: true,
        }
    }
}

fn h5err(path: &Path) -> impl Fn(hdf5::Error) -> Error + '_ {
    move |source| Error::Hdf5 {
        path: path.to_path_buf(),
        source,
    }
}

fn dataset(file: &hdf5::File, path: &Path, name: &str) -> Result<hdf5::Dataset> {
    file.dataset(name).map_err(|_| Error::MissingDataset {
        path: path.to_path_buf(),
        dataset: name.to_string(),
    })
}

fn squeeze_2d(array: ArrayD<f32>) -> Option<Array2<f32>> {
    let mut a = array;
    while a.ndim() > 2 {
        let axis = a.shape().iter().position(|&n| n == 1)?;
        a = a.index_axis_move(Axis(axis), 0);
    }
    a.into_dimensionality::<Ix2>().ok()
}

fn timestamp_from_name(path: &Path) -> Option<DateTime<Utc>> {
    let name = path.file_name()?.to_str()?;
    let re = Regex::new(r"(\d{8})-S(\d{6})").ok()?;
    let caps = re.captures(name)?;
    let naive =
        NaiveDateTime::parse_from_str(&format!("{}{}", &caps[1], &caps[2]), "%Y%m%d%H%M%S").ok()?;
    Some(Utc.from_utc_datetime(&naive))
}

/// Reads one granule into a field in mm/h with sentinels replaced by zero.
pub fn read_granule(path: &Path, layout: &GranuleLayout) -> Result<RainField> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = hdf5::File::open(path).map_err(h5err(path))?;
    let raw: ArrayD<f32> = dataset(&file, path, &layout.precipitation)?
        .read_dyn()
        .map_err(h5err(path))?;
    let shape = raw.shape().to_vec();
    let mut grid = squeeze_2d(raw).ok_or(Error::ShapeMismatch {
        expected: vec![0, 0],
        actual: shape,
    })?;
    if layout.lon_major {
        grid = grid.reversed_axes().as_standard_layout().to_owned();
    }

    let sentinel_tol = 1e-3 * layout.fill_value.abs().max(1.0);
    for (i, v) in grid.iter_mut().enumerate() {
        if (*v - layout.fill_value).abs() <= sentinel_tol {
            *v = 0.0;
        } else if !v.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                value: *v as f64,
            });
        }
    }

    let lat: Vec<f64> = dataset(&file, path, &layout.lat)?
        .read_raw::<f64>()
        .map_err(h5err(path))?;
    let lon: Vec<f64> = dataset(&file, path, &layout.lon)?
        .read_raw::<f64>()
        .map_err(h5err(path))?;
    if lat.len() != grid.nrows() || lon.len() != grid.ncols() {
        return Err(Error::ShapeMismatch {
            expected: vec![lat.len(), lon.len()],
            actual: vec![grid.nrows(), grid.ncols()],
        });
    }
    let spacing = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 0.0 };
    let geometry = GridGeometry {
        lat0: lat[0],
        lon0: lon[0],
        dlat: spacing(&lat),
        dlon: spacing(&lon),
    };

    let timestamp = match layout.time.as_deref().and_then(|name| file.dataset(name).ok()) {
        Some(ds) => {
            let secs: Vec<f64> = ds.read_raw().map_err(h5err(path))?;
            let s = *secs.first().ok_or_else(|| Error::MissingDataset {
                path: path.to_path_buf(),
                dataset: layout.time.clone().unwrap_or_default(),
            })?;
            Utc.timestamp_opt(s as i64, 0)
                .single()
                .ok_or_else(|| Error::config(format!("invalid time {s} in {}", path.display())))?
        }
        None => timestamp_from_name(path).ok_or_else(|| {
            Error::config(format!("no time dataset or parsable timestamp in {}", path.display()))
        })?,
    };

    RainField::new(grid, timestamp, geometry)
}

/// Writes a granule with the given layout. Used for fixtures and for exporting crops.
pub fn write_granule(path: &Path, field: &RainField, layout: &GranuleLayout) -> Result<()> {
    let file = hdf5::File::create(path).map_err(h5err(path))?;
    let (h, w) = field.values.dim();
    let data = if layout.lon_major {
        field.values.t().as_standard_layout().to_owned()
    } else {
        field.values.clone()
    };
    let data = data.insert_axis(Axis(0));
    let create = |name: &str| -> Result<hdf5::Group> {
        let mut group = file.group("/").map_err(h5err(path))?;
        let parts: Vec<&str> = name.split('/').collect();
        for part in &parts[..parts.len() - 1] {
            group = match group.group(part) {
                Ok(g) => g,
                Err(_) => group.create_group(part).map_err(h5err(path))?,
            };
        }
        Ok(group)
    };
    let leaf = |name: &str| name.rsplit('/').next().unwrap_or(name).to_string();

    create(&layout.precipitation)?
        .new_dataset_builder()
        .with_data(&data)
        .create(leaf(&layout.precipitation).as_str())
        .map_err(h5err(path))?;
    let g = field.geometry;
    let lat: Vec<f32> = (0..h).map(|i| (g.lat0 + g.dlat * i as f64) as f32).collect();
    let lon: Vec<f32> = (0..w).map(|i| (g.lon0 + g.dlon * i as f64) as f32).collect();
    create(&layout.lat)?
        .new_dataset_builder()
        .with_data(&lat)
        .create(leaf(&layout.lat).as_str())
        .map_err(h5err(path))?;
    create(&layout.lon)?
        .new_dataset_builder()
        .with_data(&lon)
        .create(leaf(&layout.lon).as_str())
        .map_err(h5err(path))?;
    if let Some(time) = &layout.time {
        let secs = [field.timestamp.timestamp() as i32];
        create(time)?
            .new_dataset_builder()
            .with_data(&secs[..])
            .create(leaf(time).as_str())
            .map_err(h5err(path))?;
    }
    Ok(())
}
