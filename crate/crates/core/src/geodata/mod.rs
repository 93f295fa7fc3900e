//! Spatial primitives shared by every model: locations, survey records,
//! distances and survey CSV ingestion.

mod raster;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use raster::{build_grid, Raster};

/// Mean spherical Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lon: f64,
    pub lat: f64,
}

impl Location {
    /// Builds a location, rejecting coordinates outside lon [-180, 180],
    /// lat [-90, 90].
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!(
                "coordinates ({lon}, {lat}) outside lon [-180, 180] / lat [-90, 90]"
            )));
        }
        Ok(Location { lon, lat })
    }

    pub fn is_valid(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon) && (-90.0..=90.0).contains(&self.lat)
    }
}

/// One prevalence survey: `positive` of `examined` individuals tested positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub loc: Location,
    pub examined: u32,
    pub positive: u32,
}

impl SurveyRecord {
    pub fn new(loc: Location, examined: u32, positive: u32) -> Result<Self> {
        if examined == 0 {
            return Err(Error::invalid("examined must be at least 1"));
        }
        if positive > examined {
            return Err(Error::invalid(format!(
                "positive ({positive}) exceeds examined ({examined})"
            )));
        }
        Ok(SurveyRecord {
            loc,
            examined,
            positive,
        })
    }

    /// Empirical prevalence H/N.
    pub fn prevalence(&self) -> f64 {
        f64::from(self.positive) / f64::from(self.examined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Planar distance in degrees.
    #[default]
    Euclidean,
    /// Haversine distance in km on a sphere of radius [`EARTH_RADIUS_KM`].
    GreatCircle,
}

pub fn distance(a: Location, b: Location, metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Euclidean => (a.lon - b.lon).hypot(a.lat - b.lat),
        DistanceMetric::GreatCircle => {
            let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
            let dphi = phi2 - phi1;
            let dlambda = (b.lon - a.lon).to_radians();
            let h = (dphi / 2.0).sin().powi(2)
                + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
        }
    }
}

/// Dense symmetric distance matrix, row-major `n * n`.
pub fn distance_matrix(pts: &[Location], metric: DistanceMetric) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distance(pts[i], pts[j], metric);
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

/// Axis-aligned lon/lat bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Location,
    pub max: Location,
}

impl BoundingBox {
    pub fn new(min: Location, max: Location) -> Self {
        BoundingBox { min, max }
    }

    /// Smallest box containing all points. `None` for an empty slice.
    pub fn of_points<'a>(pts: impl IntoIterator<Item = &'a Location>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo.lon = lo.lon.min(p.lon);
            lo.lat = lo.lat.min(p.lat);
            hi.lon = hi.lon.max(p.lon);
            hi.lat = hi.lat.max(p.lat);
        }
        Some(BoundingBox { min: lo, max: hi })
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min: Location {
                lon: self.min.lon.min(other.min.lon),
                lat: self.min.lat.min(other.min.lat),
            },
            max: Location {
                lon: self.max.lon.max(other.max.lon),
                lat: self.max.lat.max(other.max.lat),
            },
        }
    }

    pub fn expanded(&self, margin: f64) -> BoundingBox {
        BoundingBox {
            min: Location {
                lon: self.min.lon - margin,
                lat: self.min.lat - margin,
            },
            max: Location {
                lon: self.max.lon + margin,
                lat: self.max.lat + margin,
            },
        }
    }

    pub fn width(&self) -> f64 {
        self.max.lon - self.min.lon
    }

    pub fn height(&self) -> f64 {
        self.max.lat - self.min.lat
    }

    pub fn contains(&self, loc: Location) -> bool {
        loc.lon >= self.min.lon
            && loc.lon <= self.max.lon
            && loc.lat >= self.min.lat
            && loc.lat <= self.max.lat
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, row: usize) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        row,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

/// Reads survey records from a CSV with header `lon,lat,examined,positive`.
///
/// Row indices in errors count data rows from 1 (the header is row 0).
pub fn parse_survey_csv(path: impl AsRef<Path>) -> Result<Vec<SurveyRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_survey_csv(file)
}

pub fn read_survey_csv(reader: impl std::io::Read) -> Result<Vec<SurveyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["lon", "lat", "examined", "positive"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            row: 0,
            message: format!("expected header lon,lat,examined,positive, got {:?}", headers),
        });
    }

    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let lon: f64 = parse_field(&rec[0], "lon", row)?;
        let lat: f64 = parse_field(&rec[1], "lat", row)?;
        let examined: u32 = parse_field(&rec[2], "examined", row)?;
        let positive: u32 = parse_field(&rec[3], "positive", row)?;
        let loc = Location::new(lon, lat).map_err(|e| Error::Validation {
            row,
            message: e.to_string(),
        })?;
        let record = SurveyRecord::new(loc, examined, positive).map_err(|e| Error::Validation {
            row,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_survey_csv(records: &[SurveyRecord], writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    wtr.write_record(["lon", "lat", "examined", "positive"])
        .map_err(io_err)?;
    for r in records {
        wtr.write_record([
            r.loc.lon.to_string(),
            r.loc.lat.to_string(),
            r.examined.to_string(),
            r.positive.to_string(),
        ])
        .map_err(io_err)?;
    }
    wtr.flush().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(())
}
