//! Containers for unit-level and area-level survey data, CSV ingestion and
//! survey-weighted aggregation.
//!
//! Areas are always ordered lexicographically by `area_id`; every per-area
//! vector in the crate is indexed in that order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};

/// Which set of survey weights an operation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightKind {
    Base,
    Calibrated,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Base => "base",
            WeightKind::Calibrated => "calibrated",
        }
    }
}

/// Sampled units of one area.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaUnits {
    pub area_id: String,
    /// Population count `N_d`.
    pub pop_size: usize,
    pub y: Vec<f64>,
    /// `n_d × p` covariates; the first column is the intercept.
    pub x: DMatrix<f64>,
    pub w: Vec<f64>,
    pub w_cal: Option<Vec<f64>>,
}

impl AreaUnits {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn weights(&self, kind: WeightKind) -> Result<&[f64]> {
        match kind {
            WeightKind::Base => Ok(&self.w),
            WeightKind::Calibrated => self.w_cal.as_deref().ok_or_else(|| {
                SaeError::Config(format!(
                    "area `{}` has no calibrated weights; run the calibrate step first",
                    self.area_id
                ))
            }),
        }
    }

    /// Weighted covariate mean of the given kind: `Σw x / Σw` for base
    /// weights and `N_d^{-1} Σ w^C x` for calibrated weights.
    pub fn weighted_xbar(&self, kind: WeightKind) -> Result<DVector<f64>> {
        let w = self.weights(kind)?;
        let denom = match kind {
            WeightKind::Base => w.iter().sum::<f64>(),
            WeightKind::Calibrated => self.pop_size as f64,
        };
        let mut s = DVector::zeros(self.x.ncols());
        for (i, wi) in w.iter().enumerate() {
            s += self.x.row(i).transpose() * *wi;
        }
        Ok(s / denom)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(SaeError::Validation(format!(
                "area `{}` has no sampled units",
                self.area_id
            )));
        }
        if self.x.nrows() != n || self.w.len() != n {
            return Err(SaeError::Validation(format!(
                "area `{}`: inconsistent row counts",
                self.area_id
            )));
        }
        if self.pop_size < n {
            return Err(SaeError::Validation(format!(
                "area `{}`: N_d = {} smaller than n_d = {}",
                self.area_id, self.pop_size, n
            )));
        }
        if let Some(wc) = &self.w_cal {
            if wc.len() != n {
                return Err(SaeError::Validation(format!(
                    "area `{}`: calibrated weight count {} differs from n_d = {}",
                    self.area_id,
                    wc.len(),
                    n
                )));
            }
        }
        if let Some(w) = self.w.iter().find(|w| !(**w > 0.0)) {
            return Err(SaeError::Validation(format!(
                "area `{}`: non-positive base weight {w}",
                self.area_id
            )));
        }
        if (0..n).any(|i| self.x[(i, 0)] != 1.0) {
            return Err(SaeError::Validation(format!(
                "area `{}`: first covariate column must be the intercept",
                self.area_id
            )));
        }
        Ok(())
    }
}

/// Unit-level survey sample grouped by area.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSample {
    pub areas: Vec<AreaUnits>,
}

impl UnitSample {
    /// Validate and sort by `area_id`.
    pub fn new(mut areas: Vec<AreaUnits>) -> Result<Self> {
        if areas.is_empty() {
            return Err(SaeError::Validation("sample has no areas".into()));
        }
        let p = areas[0].x.ncols();
        if p == 0 {
            return Err(SaeError::Validation(
                "at least one covariate (the intercept) is required".into(),
            ));
        }
        for a in &areas {
            a.validate()?;
            if a.x.ncols() != p {
                return Err(SaeError::Validation(format!(
                    "area `{}` has {} covariates, expected {p}",
                    a.area_id,
                    a.x.ncols()
                )));
            }
        }
        areas.sort_by(|a, b| a.area_id.cmp(&b.area_id));
        if areas.windows(2).any(|w| w[0].area_id == w[1].area_id) {
            return Err(SaeError::Validation("duplicate area_id".into()));
        }
        Ok(UnitSample { areas })
    }

    pub fn num_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn p(&self) -> usize {
        self.areas[0].x.ncols()
    }

    pub fn total_n(&self) -> usize {
        self.areas.iter().map(AreaUnits::n).sum()
    }

    pub fn has_calibrated(&self) -> bool {
        self.areas.iter().all(|a| a.w_cal.is_some())
    }

    /// Replace the responses, keeping design and weights.
    pub fn with_responses(&self, y: Vec<Vec<f64>>) -> UnitSample {
        let areas = self
            .areas
            .iter()
            .zip(y)
            .map(|(a, y)| {
                debug_assert_eq!(a.n(), y.len());
                AreaUnits { y, ..a.clone() }
            })
            .collect();
        UnitSample { areas }
    }
}

/// Per-area aggregates used by area-level models.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRow {
    pub area_id: String,
    pub pop_size: usize,
    pub sample_size: usize,
    /// Direct estimate of the area mean.
    pub ybar: f64,
    /// True population covariate means `X̄_d`.
    pub xbar: DVector<f64>,
    /// Sum of squared weights used for the error-variance structure.
    pub w2: f64,
    /// Sum of base weights `w_d·`.
    pub wdot: f64,
    pub psi0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaDataset {
    pub rows: Vec<AreaRow>,
}

impl AreaDataset {
    pub fn new(mut rows: Vec<AreaRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(SaeError::Validation("area dataset is empty".into()));
        }
        let p = rows[0].xbar.len();
        for r in &rows {
            if r.xbar.len() != p {
                return Err(SaeError::Validation(format!(
                    "area `{}` has {} covariate means, expected {p}",
                    r.area_id,
                    r.xbar.len()
                )));
            }
            if !(r.w2 > 0.0) || !(r.wdot > 0.0) {
                return Err(SaeError::Validation(format!(
                    "area `{}`: W2 and wdot must be positive",
                    r.area_id
                )));
            }
            if r.sample_size < 1 || r.pop_size < r.sample_size {
                return Err(SaeError::Validation(format!(
                    "area `{}`: need N_d >= n_d >= 1 (N_d = {}, n_d = {})",
                    r.area_id, r.pop_size, r.sample_size
                )));
            }
            if let Some(p0) = r.psi0 {
                if !(p0 >= 0.0) {
                    return Err(SaeError::Validation(format!(
                        "area `{}`: psi0 must be non-negative",
                        r.area_id
                    )));
                }
            }
        }
        rows.sort_by(|a, b| a.area_id.cmp(&b.area_id));
        if rows.windows(2).any(|w| w[0].area_id == w[1].area_id) {
            return Err(SaeError::Validation("duplicate area_id".into()));
        }
        Ok(AreaDataset { rows })
    }

    pub fn num_areas(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.rows[0].xbar.len()
    }

    pub fn ybar(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ybar).collect()
    }

    /// `D × p` matrix with rows `X̄_d'`.
    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.p(), |d, j| self.rows[d].xbar[j])
    }

    /// Rows that carry a direct variance estimate.
    pub fn with_psi0(&self) -> AreaDataset {
        AreaDataset {
            rows: self
                .rows
                .iter()
                .filter(|r| r.psi0.is_some())
                .cloned()
                .collect(),
        }
    }

    pub fn psi0(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.psi0).collect()
    }

    /// Replace the direct estimates.
    pub fn with_ybar(&self, ybar: &[f64]) -> AreaDataset {
        let rows = self
            .rows
            .iter()
            .zip(ybar)
            .map(|(r, &y)| AreaRow {
                ybar: y,
                ..r.clone()
            })
            .collect();
        AreaDataset { rows }
    }
}

/// Full finite population: covariates for every unit and, in simulation,
/// responses.
#[derive(Debug, Clone)]
pub struct PopulationArea {
    pub area_id: String,
    /// `N_d × p` covariates with the intercept first.
    pub x: DMatrix<f64>,
    pub y: Option<Vec<f64>>,
}

impl PopulationArea {
    pub fn size(&self) -> usize {
        self.x.nrows()
    }

    pub fn totals(&self) -> DVector<f64> {
        DVector::from_fn(self.x.ncols(), |j, _| self.x.column(j).sum())
    }

    pub fn means(&self) -> DVector<f64> {
        self.totals() / self.size() as f64
    }
}

#[derive(Debug, Clone)]
pub struct PopulationFrame {
    pub areas: Vec<PopulationArea>,
}

/// Column names for unit CSV files.
#[derive(Debug, Clone)]
pub struct UnitSchema {
    pub area_id: String,
    pub y: String,
    /// Covariate columns are `<prefix><k>` for k = 1, 2, ...
    pub x_prefix: String,
    pub weight: String,
    pub weight_cal: String,
    pub pop_size: String,
}

impl Default for UnitSchema {
    fn default() -> Self {
        UnitSchema {
            area_id: "area_id".into(),
            y: "y".into(),
            x_prefix: "x".into(),
            weight: "weight".into(),
            weight_cal: "weight_cal".into(),
            pop_size: "N".into(),
        }
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| SaeError::io(path, e))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn find(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn require(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    find(headers, name).ok_or_else(|| SaeError::MissingColumn(name.to_string()))
}

/// Indexed columns `<prefix>1, <prefix>2, ...` in numeric order.
fn indexed_columns(headers: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, i)| i).collect()
}

fn parse_f64(rec: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let s = rec.get(col).unwrap_or("");
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| SaeError::Parse {
            row,
            msg: format!("column `{name}`: non-numeric value `{s}`"),
        })
}

fn parse_size(rec: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<usize> {
    let v = parse_f64(rec, col, row, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(SaeError::Parse {
            row,
            msg: format!("column `{name}`: expected a non-negative integer, got {v}"),
        });
    }
    Ok(v as usize)
}

/// Read a sidecar `area_id,N` file.
pub fn read_area_sizes<R: Read>(reader: R) -> Result<BTreeMap<String, usize>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let id = require(&headers, "area_id")?;
    let n = require(&headers, "N")?;
    let mut out = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let size = parse_size(&rec, n, row, "N")?;
        if out.insert(rec[id].to_string(), size).is_some() {
            return Err(SaeError::Parse {
                row,
                msg: format!("duplicate area `{}`", &rec[id]),
            });
        }
    }
    Ok(out)
}

pub fn load_area_sizes(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    read_area_sizes(open(path.as_ref())?)
}

struct UnitRow {
    y: f64,
    x: Vec<f64>,
    w: f64,
    w_cal: Option<f64>,
}

/// Parse a unit CSV. Rows are numbered from 1 (the header is row 0).
pub fn read_unit_csv<R: Read>(
    reader: R,
    schema: &UnitSchema,
    sizes: Option<&BTreeMap<String, usize>>,
) -> Result<UnitSample> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_id = require(&headers, &schema.area_id)?;
    let c_y = require(&headers, &schema.y)?;
    let c_w = require(&headers, &schema.weight)?;
    let c_wc = find(&headers, &schema.weight_cal);
    let c_n = find(&headers, &schema.pop_size);
    let c_x = indexed_columns(&headers, &schema.x_prefix);

    let mut groups: BTreeMap<String, (Vec<UnitRow>, Option<usize>)> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let id = rec.get(c_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(SaeError::Parse {
                row,
                msg: "empty area_id".into(),
            });
        }
        let y = parse_f64(&rec, c_y, row, &schema.y)?;
        let w = parse_f64(&rec, c_w, row, &schema.weight)?;
        if w <= 0.0 {
            return Err(SaeError::Parse {
                row,
                msg: format!("non-positive weight at row {row}"),
            });
        }
        let x = c_x
            .iter()
            .map(|&c| parse_f64(&rec, c, row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        let w_cal = match c_wc {
            Some(c) if !rec.get(c).unwrap_or("").is_empty() => {
                Some(parse_f64(&rec, c, row, &schema.weight_cal)?)
            }
            _ => None,
        };
        let n_row = match c_n {
            Some(c) => Some(parse_size(&rec, c, row, &schema.pop_size)?),
            None => None,
        };
        let entry = groups
            .entry(id.clone())
            .or_insert_with(|| (Vec::new(), n_row));
        if entry.1 != n_row {
            return Err(SaeError::Parse {
                row,
                msg: format!("area `{id}`: N_d differs between rows"),
            });
        }
        entry.0.push(UnitRow { y, x, w, w_cal });
    }
    if groups.is_empty() {
        return Err(SaeError::Validation("unit CSV has no data rows".into()));
    }

    // The intercept is present when the first covariate column is all ones.
    let has_intercept = !c_x.is_empty()
        && groups
            .values()
            .all(|(rows, _)| rows.iter().all(|r| r.x[0] == 1.0));
    let q = c_x.len();
    let p = if has_intercept { q } else { q + 1 };

    let mut areas = Vec::with_capacity(groups.len());
    for (id, (rows, n_row)) in groups {
        let pop_size = match (n_row, sizes.and_then(|s| s.get(&id).copied())) {
            (Some(a), Some(b)) if a != b => {
                return Err(SaeError::Validation(format!(
                    "area `{id}`: N_d = {a} in unit CSV conflicts with {b} in the area-size file"
                )))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(SaeError::Validation(format!(
                "area `{id}`: population size N_d not given (add an N column or an area-size file)"
            )))
            }
        };
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |i, j| {
            if has_intercept {
                rows[i].x[j]
            } else if j == 0 {
                1.0
            } else {
                rows[i].x[j - 1]
            }
        });
        let w_cal = if rows.iter().all(|r| r.w_cal.is_some()) {
            Some(rows.iter().map(|r| r.w_cal.unwrap()).collect())
        } else if rows.iter().any(|r| r.w_cal.is_some()) {
            return Err(SaeError::Validation(format!(
                "area `{id}`: weight_cal given for some rows only"
            )));
        } else {
            None
        };
        areas.push(AreaUnits {
            area_id: id,
            pop_size,
            y: rows.iter().map(|r| r.y).collect(),
            x,
            w: rows.iter().map(|r| r.w).collect(),
            w_cal,
        });
    }
    UnitSample::new(areas)
}

pub fn load_unit_csv(
    path: impl AsRef<Path>,
    schema: &UnitSchema,
    sizes: Option<&BTreeMap<String, usize>>,
) -> Result<UnitSample> {
    read_unit_csv(open(path.as_ref())?, schema, sizes)
}

/// Write a unit CSV: `area_id,y,x1..xp,weight[,weight_cal],N`.
pub fn write_unit_csv<W: Write>(writer: W, sample: &UnitSample) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = sample.p();
    let cal = sample.has_calibrated();
    let mut header = vec!["area_id".to_string(), "y".to_string()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    header.push("weight".into());
    if cal {
        header.push("weight_cal".into());
    }
    header.push("N".into());
    wtr.write_record(&header)?;
    for a in &sample.areas {
        for i in 0..a.n() {
            let mut rec = vec![a.area_id.clone(), fmt(a.y[i])];
            rec.extend((0..p).map(|j| fmt(a.x[(i, j)])));
            rec.push(fmt(a.w[i]));
            if cal {
                rec.push(fmt(a.w_cal.as_ref().unwrap()[i]));
            }
            rec.push(a.pop_size.to_string());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| SaeError::io("<unit csv>", e))?;
    Ok(())
}

/// Parse an area CSV: `area_id,N,n,ybar,xbar_1..xbar_p,W2[,wdot][,psi0]`.
///
/// An empty `psi0` cell leaves the direct variance unset for that area.
/// Without a `wdot` column the base-weight sum defaults to `N_d`.
pub fn read_area_csv<R: Read>(reader: R) -> Result<AreaDataset> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_id = require(&headers, "area_id")?;
    let c_big_n = require(&headers, "N")?;
    let c_n = require(&headers, "n")?;
    let c_y = require(&headers, "ybar")?;
    let c_w2 = require(&headers, "W2")?;
    let c_wdot = find(&headers, "wdot");
    let c_psi = find(&headers, "psi0");
    let c_x = indexed_columns(&headers, "xbar_");
    if c_x.is_empty() {
        return Err(SaeError::MissingColumn("xbar_1".into()));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let pop_size = parse_size(&rec, c_big_n, row, "N")?;
        let psi0 = match c_psi {
            Some(c) => {
                let s = rec.get(c).unwrap_or("");
                if s.is_empty() || s.eq_ignore_ascii_case("na") {
                    None
                } else {
                    Some(parse_f64(&rec, c, row, "psi0")?)
                }
            }
            None => None,
        };
        rows.push(AreaRow {
            area_id: rec[c_id].to_string(),
            pop_size,
            sample_size: parse_size(&rec, c_n, row, "n")?,
            ybar: parse_f64(&rec, c_y, row, "ybar")?,
            xbar: DVector::from_vec(
                c_x.iter()
                    .map(|&c| parse_f64(&rec, c, row, &headers[c]))
                    .collect::<Result<Vec<_>>>()?,
            ),
            w2: parse_f64(&rec, c_w2, row, "W2")?,
            wdot: match c_wdot {
                Some(c) => parse_f64(&rec, c, row, "wdot")?,
                None => pop_size as f64,
            },
            psi0,
        });
    }
    AreaDataset::new(rows)
}

pub fn load_area_csv(path: impl AsRef<Path>) -> Result<AreaDataset> {
    read_area_csv(open(path.as_ref())?)
}

pub fn write_area_csv<W: Write>(writer: W, data: &AreaDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = data.p();
    let mut header = vec!["area_id".to_string(), "N".into(), "n".into(), "ybar".into()];
    header.extend((1..=p).map(|k| format!("xbar_{k}")));
    header.extend(["W2".to_string(), "wdot".into(), "psi0".into()]);
    wtr.write_record(&header)?;
    for r in &data.rows {
        let mut rec = vec![
            r.area_id.clone(),
            r.pop_size.to_string(),
            r.sample_size.to_string(),
            fmt(r.ybar),
        ];
        rec.extend(r.xbar.iter().map(|v| fmt(*v)));
        rec.push(fmt(r.w2));
        rec.push(fmt(r.wdot));
        rec.push(r.psi0.map(fmt).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| SaeError::io("<area csv>", e))?;
    Ok(())
}

/// Shortest round-trip representation.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Aggregate a unit sample to area level.
///
/// Base weights give `ybar = Σw y / Σw` and `W2 = Σw²`; calibrated weights
/// give `ybar = N_d^{-1} Σ w^C y` and `W2 = Σ(w^C)²`. `wdot` is always the
/// base-weight sum. `xbar_true` supplies `X̄_d` in area order.
pub fn aggregate(
    sample: &UnitSample,
    kind: WeightKind,
    xbar_true: &[DVector<f64>],
) -> Result<AreaDataset> {
    if xbar_true.len() != sample.num_areas() {
        return Err(SaeError::Validation(format!(
            "{} covariate mean vectors given for {} areas",
            xbar_true.len(),
            sample.num_areas()
        )));
    }
    let rows = sample
        .areas
        .iter()
        .zip(xbar_true)
        .map(|(a, xb)| {
            if xb.len() != a.x.ncols() {
                return Err(SaeError::Validation(format!(
                    "area `{}`: X̄ has length {}, expected {}",
                    a.area_id,
                    xb.len(),
                    a.x.ncols()
                )));
            }
            let w = a.weights(kind)?;
            let wdot: f64 = a.w.iter().sum();
            let wy: f64 = w.iter().zip(&a.y).map(|(w, y)| w * y).sum();
            let ybar = match kind {
                WeightKind::Base => wy / wdot,
                WeightKind::Calibrated => wy / a.pop_size as f64,
            };
            Ok(AreaRow {
                area_id: a.area_id.clone(),
                pop_size: a.pop_size,
                sample_size: a.n(),
                ybar,
                xbar: xb.clone(),
                w2: w.iter().map(|w| w * w).sum(),
                wdot,
                psi0: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AreaDataset::new(rows)
}
