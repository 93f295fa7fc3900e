use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, Location};
use crate::error::{Error, Result};

const DEFAULT_NODATA: f64 = -9999.0;

/// Rectangular lon/lat lattice of values with a nodata mask.
///
/// Row 0 is the northernmost row, matching the ESRI ASCII layout. Cell
/// `(row, col)` covers the half-open extent
/// `[xll + col*cell, xll + (col+1)*cell) x [y_top - (row+1)*cell, y_top - row*cell)`;
/// points on the outer east/north edge belong to the last column/row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    origin: Location,
    cell_size: f64,
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Raster {
    pub fn new(origin: Location, cell_size: f64, n_rows: usize, n_cols: usize) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::invalid("cell size must be positive"));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("raster needs at least one row and column"));
        }
        let n = n_rows * n_cols;
        Ok(Raster {
            origin,
            cell_size,
            n_rows,
            n_cols,
            values: vec![0.0; n],
            mask: vec![true; n],
        })
    }

    pub fn filled(origin: Location, cell_size: f64, n_rows: usize, n_cols: usize, value: f64) -> Result<Self> {
        let mut r = Self::new(origin, cell_size, n_rows, n_cols)?;
        r.values.fill(value);
        Ok(r)
    }

    pub fn origin(&self) -> Location {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `true` marks a cell holding valid data.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            min: self.origin,
            max: Location {
                lon: self.origin.lon + self.n_cols as f64 * self.cell_size,
                lat: self.origin.lat + self.n_rows as f64 * self.cell_size,
            },
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        self.mask[i].then(|| self.values[i])
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = self.index(row, col);
        self.values[i] = value;
        self.mask[i] = true;
    }

    pub fn set_nodata(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.mask[i] = false;
    }

    pub fn cell_centre(&self, row: usize, col: usize) -> Location {
        Location {
            lon: self.origin.lon + (col as f64 + 0.5) * self.cell_size,
            lat: self.origin.lat + (self.n_rows - row) as f64 * self.cell_size - 0.5 * self.cell_size,
        }
    }

    /// Centres of all cells in row-major order.
    pub fn cell_centres(&self) -> Vec<Location> {
        (0..self.n_rows)
            .flat_map(|r| (0..self.n_cols).map(move |c| (r, c)))
            .map(|(r, c)| self.cell_centre(r, c))
            .collect()
    }

    /// Row and column of the cell containing `loc`.
    pub fn cell_of(&self, loc: Location) -> Result<(usize, usize)> {
        let bb = self.bbox();
        if !bb.contains(loc) {
            return Err(Error::OutOfBounds {
                lon: loc.lon,
                lat: loc.lat,
                what: "raster extent",
            });
        }
        let col = (((loc.lon - self.origin.lon) / self.cell_size).floor() as usize).min(self.n_cols - 1);
        let from_bottom =
            (((loc.lat - self.origin.lat) / self.cell_size).floor() as usize).min(self.n_rows - 1);
        Ok((self.n_rows - 1 - from_bottom, col))
    }

    /// Nearest-cell lookup; `Ok(None)` when the containing cell is nodata.
    pub fn sample(&self, loc: Location) -> Result<Option<f64>> {
        let (r, c) = self.cell_of(loc)?;
        Ok(self.get(r, c))
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Raster {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v = f(*v);
        }
        out
    }

    /// Copies `values` into the raster, keeping the mask.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Raster> {
        if values.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Raster {
            values,
            ..self.clone()
        })
    }

    pub fn read_ascii(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_ascii(std::io::BufReader::new(file))
    }

    /// Parses an ESRI ASCII grid. Both `xllcorner` and `xllcenter` headers
    /// are accepted; `NODATA_value` is optional.
    pub fn from_ascii(reader: impl BufRead) -> Result<Raster> {
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut centre_ref = false;
        let mut cell = None;
        let mut nodata = None;
        let mut values = Vec::new();

        for (line_no, line) in reader.lines().enumerate() {
            let row = line_no + 1;
            let line = line.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let first = trimmed.split_whitespace().next().unwrap_or_default();
            if first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let mut parts = trimmed.split_whitespace();
                let key = parts.next().unwrap_or_default().to_ascii_lowercase();
                let val = parts.next().ok_or_else(|| Error::Parse {
                    row,
                    message: format!("header {key} has no value"),
                })?;
                let num: f64 = val.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("bad header value {val:?}"),
                })?;
                match key.as_str() {
                    "ncols" => ncols = Some(num as usize),
                    "nrows" => nrows = Some(num as usize),
                    "xllcorner" => xll = Some(num),
                    "yllcorner" => yll = Some(num),
                    "xllcenter" => {
                        xll = Some(num);
                        centre_ref = true;
                    }
                    "yllcenter" => {
                        yll = Some(num);
                        centre_ref = true;
                    }
                    "cellsize" => cell = Some(num),
                    "nodata_value" => nodata = Some(num),
                    other => {
                        return Err(Error::Parse {
                            row,
                            message: format!("unknown header {other}"),
                        })
                    }
                }
            } else {
                for tok in trimmed.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| Error::Parse {
                        row,
                        message: format!("bad cell value {tok:?}"),
                    })?;
                    values.push(v);
                }
            }
        }

        let missing = |name: &str| Error::Parse {
            row: 0,
            message: format!("missing header {name}"),
        };
        let ncols = ncols.ok_or_else(|| missing("ncols"))?;
        let nrows = nrows.ok_or_else(|| missing("nrows"))?;
        let cell = cell.ok_or_else(|| missing("cellsize"))?;
        let mut xll = xll.ok_or_else(|| missing("xllcorner"))?;
        let mut yll = yll.ok_or_else(|| missing("yllcorner"))?;
        if centre_ref {
            xll -= cell / 2.0;
            yll -= cell / 2.0;
        }
        if values.len() != ncols * nrows {
            return Err(Error::Parse {
                row: 0,
                message: format!("expected {} cell values, found {}", ncols * nrows, values.len()),
            });
        }
        let mut raster = Raster::new(Location { lon: xll, lat: yll }, cell, nrows, ncols)?;
        for (i, v) in values.into_iter().enumerate() {
            if nodata == Some(v) {
                raster.mask[i] = false;
                raster.values[i] = 0.0;
            } else {
                raster.values[i] = v;
            }
        }
        Ok(raster)
    }

    pub fn write_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.to_ascii(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn to_ascii(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "ncols {}", self.n_cols)?;
        writeln!(w, "nrows {}", self.n_rows)?;
        writeln!(w, "xllcorner {}", self.origin.lon)?;
        writeln!(w, "yllcorner {}", self.origin.lat)?;
        writeln!(w, "cellsize {}", self.cell_size)?;
        writeln!(w, "NODATA_value {}", DEFAULT_NODATA)?;
        for r in 0..self.n_rows {
            let line: Vec<String> = (0..self.n_cols)
                .map(|c| match self.get(r, c) {
                    Some(v) => v.to_string(),
                    None => DEFAULT_NODATA.to_string(),
                })
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Cell count along one axis, tolerant to `1.0 / 0.1 = 10.000000000000002`.
fn cells_along(extent: f64, cell_size: f64) -> usize {
    let ratio = extent / cell_size;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 * ratio.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

/// Empty all-valid grid over `bbox` with `ceil(extent / cell_size)` cells per axis.
pub fn build_grid(bbox: BoundingBox, cell_size: f64) -> Result<Raster> {
    if bbox.is_degenerate() {
        return Err(Error::invalid(format!("degenerate bounding box {bbox:?}")));
    }
    if !(cell_size > 0.0) {
        return Err(Error::invalid("cell size must be positive"));
    }
    let n_cols = cells_along(bbox.width(), cell_size);
    let n_rows = cells_along(bbox.height(), cell_size);
    Raster::new(bbox.min, cell_size, n_rows, n_cols)
}
