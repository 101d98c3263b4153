use chrono::{DateTime, Utc};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Edge length of the square boxes the model trains on.
pub const DEFAULT_BOX_SIZE: usize = 128;

/// Regular lat/lon geometry of a grid: the centre of pixel `[0, 0]` and the spacing
/// per row/column step, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GridGeometry {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

/// Pixel-centre extents of a field, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// One precipitation snapshot in physical units (mm/h).
#[derive(Debug, Clone, PartialEq)]
pub struct RainField {
    pub values: Array2<f32>,
    pub timestamp: DateTime<Utc>,
    pub geometry: GridGeometry,
}

impl RainField {
    pub fn new(values: Array2<f32>, timestamp: DateTime<Utc>, geometry: GridGeometry) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    value: v as f64,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativeRate(v as f64));
            }
        }
        Ok(Self {
            values,
            timestamp,
            geometry,
        })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn bbox(&self) -> BoundingBox {
        let g = &self.geometry;
        let lat_far = g.lat0 + g.dlat * (self.height().saturating_sub(1)) as f64;
        let lon_far = g.lon0 + g.dlon * (self.width().saturating_sub(1)) as f64;
        BoundingBox {
            lat_min: g.lat0.min(lat_far),
            lat_max: g.lat0.max(lat_far),
            lon_min: g.lon0.min(lon_far),
            lon_max: g.lon0.max(lon_far),
        }
    }
}

/// Square crop window given by its top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub row: usize,
    pub col: usize,
    #[serde(default = "default_box_size")]
    pub size: usize,
}

fn default_box_size() -> usize {
    DEFAULT_BOX_SIZE
}

impl GridBox {
    pub fn new(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            size: DEFAULT_BOX_SIZE,
        }
    }

    pub fn with_size(row: usize, col: usize, size: usize) -> Self {
        Self { row, col, size }
    }
}

/// Cuts each box out of `field`, copying values unchanged.
pub fn crop_boxes(field: &RainField, boxes: &[GridBox]) -> Result<Vec<RainField>> {
    boxes
        .iter()
        .map(|b| {
            if b.size == 0 || b.row + b.size > field.height() || b.col + b.size > field.width() {
                return Err(Error::BoxOutOfBounds {
                    row: b.row,
                    col: b.col,
                    size: b.size,
                    height: field.height(),
                    width: field.width(),
                });
            }
            let g = field.geometry;
            Ok(RainField {
                values: field
                    .values
                    .slice(s![b.row..b.row + b.size, b.col..b.col + b.size])
                    .to_owned(),
                timestamp: field.timestamp,
                geometry: GridGeometry {
                    lat0: g.lat0 + g.dlat * b.row as f64,
                    lon0: g.lon0 + g.dlon * b.col as f64,
                    ..g
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn field(n: usize) -> RainField {
        let values = Array2::from_shape_fn((n, n), |(r, c)| (r * n + c) as f32 * 0.01);
        RainField::new(
            values,
            Utc.with_ymd_and_hms(2023, 3, 9, 3, 0, 0).unwrap(),
            GridGeometry {
                lat0: -10.0,
                lon0: -80.0,
                dlat: 0.1,
                dlon: 0.1,
            },
        )
        .unwrap()
    }

    #[test]
    fn quadrants_tile_the_source() {
        let f = field(256);
        let boxes = [
            GridBox::new(0, 0),
            GridBox::new(0, 128),
            GridBox::new(128, 0),
            GridBox::new(128, 128),
        ];
        let out = crop_boxes(&f, &boxes).unwrap();
        assert_eq!(out.len(), 4);
        for (crop, b) in out.iter().zip(&boxes) {
            assert_eq!(crop.values.dim(), (128, 128));
            assert_eq!(
                crop.values,
                f.values.slice(s![b.row..b.row + 128, b.col..b.col + 128])
            );
        }
        let total: f64 = out.iter().map(|c| c.values.iter().map(|&v| v as f64).sum::<f64>()).sum();
        let whole: f64 = f.values.iter().map(|&v| v as f64).sum();
        assert!((total - whole).abs() < 1e-6 * whole);
        assert!((out[3].geometry.lat0 - (-10.0 + 12.8)).abs() < 1e-9);
    }

    #[test]
    fn full_extent_is_identity() {
        let f = field(128);
        let out = crop_boxes(&f, &[GridBox::new(0, 0)]).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn overlapping_boxes_agree_on_shared_pixels() {
        let f = field(200);
        let out = crop_boxes(&f, &[GridBox::new(10, 20), GridBox::new(50, 60)]).unwrap();
        // shared source region rows 50..138, cols 60..148
        let a = out[0].values.slice(s![40..128, 40..128]);
        let b = out[1].values.slice(s![0..88, 0..88]);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let f = field(128);
        let err = crop_boxes(&f, &[GridBox::new(1, 0)]).unwrap_err();
        assert!(matches!(err, Error::BoxOutOfBounds { .. }));
    }

    #[test]
    fn rejects_negative_and_nan() {
        let t = Utc::now();
        assert!(RainField::new(Array2::from_elem((2, 2), -1.0), t, GridGeometry::default()).is_err());
        assert!(RainField::new(Array2::from_elem((2, 2), f32::NAN), t, GridGeometry::default()).is_err());
    }
}
