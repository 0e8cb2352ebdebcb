//! Synthetic series generators, CSV ingestion for the two real benchmarks,
//! lagged-feature construction, and max-normalization.
//!
//! Every generator is deterministic given its parameters (and seed, where
//! one applies). Loaders are strict: missing columns, short files, and
//! non-numeric cells are distinct errors, never silent coercions.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, TAG_DATA};
use crate::types::SeriesRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset kind '{0}'")]
    UnknownKind(String),
    #[error("dataset '{0}' requires a file path")]
    MissingPath(String),
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("file has {got} usable rows, need {need}")]
    ShortFile { need: usize, got: usize },
    #[error("non-numeric cell at row {row}, column '{column}': '{value}'")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("series '{0}' has zero maximum; cannot normalize")]
    ZeroMax(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// An ordered series with uniform input/target dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<SeriesRecord>,
    pub d_x: usize,
    pub d_y: usize,
    /// Generator parameters or source file and slice, JSON-encoded.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy of the first `len` records; used by causality audits.
    pub fn truncated(&self, len: usize) -> Dataset {
        Dataset {
            name: self.name.clone(),
            records: self.records[..len.min(self.records.len())].to_vec(),
            d_x: self.d_x,
            d_y: self.d_y,
            provenance: self.provenance.clone(),
        }
    }
}

fn make_records(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> Vec<SeriesRecord> {
    xs.into_iter()
        .zip(ys)
        .enumerate()
        .map(|(t, (x, y))| SeriesRecord {
            t,
            x: DVector::from_vec(x),
            y: DVector::from_vec(y),
        })
        .collect()
}

/// Oscillating target on [-0.9, 0.9] with the previous target as input:
/// `y_t = 0.9 sin(2 pi t / period)`, `x_t = y_{t-1}`.
pub fn gen_periodic(n: usize, period: usize) -> Result<Dataset, DataError> {
    if n < 2 || period < 2 {
        return Err(DataError::BadParam(
            "periodic needs n >= 2 and period >= 2".into(),
        ));
    }
    let wave = |t: i64| 0.9 * (2.0 * std::f64::consts::PI * t as f64 / period as f64).sin();
    let xs: Vec<_> = (0..n as i64).map(|t| vec![wave(t - 1)]).collect();
    let ys: Vec<_> = (0..n as i64).map(|t| vec![wave(t)]).collect();
    Ok(Dataset {
        name: "periodic".into(),
        records: make_records(xs, ys),
        d_x: 1,
        d_y: 1,
        provenance: format!(r#"{{"kind":"periodic","n":{n},"period":{period}}}"#),
    })
}

/// Logistic-map series `z_{k+1} = c z_k (1 - z_k)` affinely rescaled to
/// roughly [-1, 1], with the previous target as input.
pub fn gen_logistic(n: usize, c: f64, x0: f64) -> Result<Dataset, DataError> {
    if !(0.0 < c && c <= 4.0) {
        return Err(DataError::BadParam(format!(
            "logistic c must be in (0, 4], got {c}"
        )));
    }
    if !(0.0 < x0 && x0 < 1.0) {
        return Err(DataError::BadParam(format!(
            "logistic x0 must be in (0, 1), got {x0}"
        )));
    }
    let mut raw = Vec::with_capacity(n + 1);
    let mut z = x0;
    raw.push(z);
    for _ in 0..n {
        z = c * z * (1.0 - z);
        raw.push(z);
    }
    let rescale = |v: f64| 2.0 * v - 1.0;
    let xs: Vec<_> = raw[..n].iter().map(|&z| vec![rescale(z)]).collect();
    let ys: Vec<_> = raw[1..=n].iter().map(|&z| vec![rescale(z)]).collect();
    Ok(Dataset {
        name: "logistic".into(),
        records: make_records(xs, ys),
        d_x: 1,
        d_y: 1,
        provenance: format!(r#"{{"kind":"logistic","n":{n},"c":{c},"x0":{x0}}}"#),
    })
}

fn concept_phase1(x1: f64, x2: f64, x3: f64) -> (f64, f64) {
    (
        x1 * x1 + x2.sin() + x1 * x3 + 0.5 * (10.0 * x1).cos(),
        x1 * x2.cos() + x3 - (-x2).exp(),
    )
}

fn concept_phase2(x1: f64, x2: f64, x3: f64) -> (f64, f64) {
    (
        x1 + x2 - x3.sin(),
        x1.cos() * x2.sin() + x3 * x3 + 0.25 * (10.0 * x1).cos(),
    )
}

fn concept_blend(x1: f64) -> f64 {
    let lo = 7.0 / 8.0 * std::f64::consts::PI;
    let hi = 9.0 / 8.0 * std::f64::consts::PI;
    if x1 < lo {
        1.0
    } else if x1 > hi {
        0.0
    } else {
        (2.0 * (x1 - lo)).cos()
    }
}

/// Smooth concept shift: `p` evenly spaced on [0, 2 pi], inputs
/// `(p, p, sqrt(p))`, two target formulas blended by a cosine transition
/// on [7 pi / 8, 9 pi / 8]. `keep_both` selects two target dimensions;
/// otherwise only the second series is retained.
pub fn gen_concept_drift(n: usize, keep_both: bool) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::BadParam("concept drift needs n >= 2".into()));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for k in 0..n {
        let p = 2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64;
        let (x1, x2, x3) = (p, p, p.sqrt());
        let a = concept_blend(x1);
        let (y11, y21) = concept_phase1(x1, x2, x3);
        let (y12, y22) = concept_phase2(x1, x2, x3);
        let y1 = a * y11 + (1.0 - a) * y12;
        let y2 = a * y21 + (1.0 - a) * y22;
        xs.push(vec![x1, x2, x3]);
        ys.push(if keep_both { vec![y1, y2] } else { vec![y2] });
    }
    Ok(Dataset {
        name: if keep_both {
            "concept_drift".into()
        } else {
            "concept_drift_1d".into()
        },
        records: make_records(xs, ys),
        d_x: 3,
        d_y: if keep_both { 2 } else { 1 },
        provenance: format!(
            r#"{{"kind":"concept_drift","n":{n},"d_y":{}}}"#,
            if keep_both { 2 } else { 1 }
        ),
    })
}

/// Drifted random walks plus a linear trend: targets `y_i = x_t + b_{i,t}`
/// with `x_t = 0.1 t` and `b_{i,t} = b_{i,t-1} + mu + sigma xi`
/// (`b_{i,0} = 0`). Inputs are `(x_t, b_{1,t}, ..., b_{k,t})`.
pub fn gen_brownian_sum(
    n: usize,
    mu: f64,
    sigma: f64,
    n_traj: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n < 2 || n_traj == 0 {
        return Err(DataError::BadParam(
            "brownian_sum needs n >= 2 and n_traj >= 1".into(),
        ));
    }
    let mut paths = vec![vec![0.0f64; n]; n_traj];
    for (i, path) in paths.iter_mut().enumerate() {
        let mut r = rng::stream(seed, &[TAG_DATA, i as u64]);
        for t in 1..n {
            path[t] = path[t - 1] + mu + sigma * rng::standard_normal(&mut r);
        }
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for t in 0..n {
        let trend = 0.1 * t as f64;
        let mut x = Vec::with_capacity(1 + n_traj);
        x.push(trend);
        let mut y = Vec::with_capacity(n_traj);
        for path in &paths {
            x.push(path[t]);
            y.push(trend + path[t]);
        }
        xs.push(x);
        ys.push(y);
    }
    Ok(Dataset {
        name: "brownian_sum".into(),
        records: make_records(xs, ys),
        d_x: 1 + n_traj,
        d_y: n_traj,
        provenance: format!(
            r#"{{"kind":"brownian_sum","n":{n},"mu":{mu},"sigma":{sigma},"n_traj":{n_traj},"seed":{seed}}}"#
        ),
    })
}

struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_csv(path: &Path) -> Result<Table, DataError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let mut row = Vec::with_capacity(columns.len());
        for (c, cell) in rec.iter().enumerate() {
            if c == 0 {
                // Leading date column: kept only for ordering, not parsed.
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumericCell {
                row: idx,
                column: columns.get(c).cloned().unwrap_or_default(),
                value: cell.to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

fn column_index(table: &Table, name: &str) -> Result<usize, DataError> {
    table
        .columns
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name))
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

/// Bank-of-Canada exchange-rate loader: target is the USD rate, inputs are
/// lags 1 and 2 of USD, AUD, EUR, GBP, JPY (`d_x = 10`). Takes rows
/// `start .. start+n` of the file; the first two are consumed by lagging.
pub fn load_boc_csv(path: &Path, start: usize, n: usize) -> Result<Dataset, DataError> {
    let table = read_csv(path)?;
    let currencies = ["USD", "AUD", "EUR", "GBP", "JPY"];
    let idx: Vec<usize> = currencies
        .iter()
        .map(|c| column_index(&table, c))
        .collect::<Result<_, _>>()?;
    if table.rows.len() < start + n || n < 3 {
        return Err(DataError::ShortFile {
            need: (start + n).max(3),
            got: table.rows.len(),
        });
    }
    let slice = &table.rows[start..start + n];
    let usd = idx[0];
    let mut xs = Vec::with_capacity(n - 2);
    let mut ys = Vec::with_capacity(n - 2);
    for t in 2..n {
        let mut x = Vec::with_capacity(10);
        for &ci in &idx {
            x.push(slice[t - 1][ci]);
            x.push(slice[t - 2][ci]);
        }
        xs.push(x);
        ys.push(vec![slice[t][usd]]);
    }
    Ok(Dataset {
        name: "boc".into(),
        records: make_records(xs, ys),
        d_x: 10,
        d_y: 1,
        provenance: format!(
            r#"{{"kind":"boc","source":"{}","start":{start},"n":{n}}}"#,
            path.display()
        ),
    })
}

const ETT_FEATURES: [&str; 6] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL"];

/// ETT-small-h1 loader: target is the oil temperature OT with lags 1-2 of
/// OT and lags 1-3 of the six load features (`d_x = 20`), max-normalized
/// per series over the loaded slice by default.
pub fn load_ett_csv(
    path: &Path,
    start: usize,
    n: usize,
    normalize: bool,
) -> Result<Dataset, DataError> {
    let table = read_csv(path)?;
    let ot = column_index(&table, "OT")?;
    let feat: Vec<usize> = ETT_FEATURES
        .iter()
        .map(|c| column_index(&table, c))
        .collect::<Result<_, _>>()?;
    if table.rows.len() < start + n || n < 4 {
        return Err(DataError::ShortFile {
            need: (start + n).max(4),
            got: table.rows.len(),
        });
    }
    let mut slice: Vec<Vec<f64>> = table.rows[start..start + n].to_vec();
    let mut normalizers = HashMap::new();
    if normalize {
        let names: Vec<&str> = ETT_FEATURES.iter().copied().chain(["OT"]).collect();
        let cols: Vec<usize> = feat.iter().copied().chain([ot]).collect();
        for (&ci, name) in cols.iter().zip(names) {
            let max = slice.iter().map(|r| r[ci].abs()).fold(0.0f64, f64::max);
            if max == 0.0 {
                return Err(DataError::ZeroMax(name.to_string()));
            }
            for row in &mut slice {
                row[ci] /= max;
            }
            normalizers.insert(name.to_string(), max);
        }
    }
    let mut xs = Vec::with_capacity(n - 3);
    let mut ys = Vec::with_capacity(n - 3);
    for t in 3..n {
        let mut x = Vec::with_capacity(20);
        x.push(slice[t - 1][ot]);
        x.push(slice[t - 2][ot]);
        for &ci in &feat {
            x.push(slice[t - 1][ci]);
            x.push(slice[t - 2][ci]);
            x.push(slice[t - 3][ci]);
        }
        xs.push(x);
        ys.push(vec![slice[t][ot]]);
    }
    let norm_json = serde_json::to_string(&normalizers).unwrap_or_default();
    Ok(Dataset {
        name: "ett".into(),
        records: make_records(xs, ys),
        d_x: 20,
        d_y: 1,
        provenance: format!(
            r#"{{"kind":"ett","source":"{}","start":{start},"n":{n},"normalizers":{norm_json}}}"#,
            path.display()
        ),
    })
}

/// Divide every input and target dimension by its max absolute value over
/// the dataset. Idempotent: a normalized dataset has unit maxima.
pub fn max_normalize(ds: &Dataset) -> Result<Dataset, DataError> {
    let mut x_max = vec![0.0f64; ds.d_x];
    let mut y_max = vec![0.0f64; ds.d_y];
    for r in &ds.records {
        for (k, m) in x_max.iter_mut().enumerate() {
            *m = m.max(r.x[k].abs());
        }
        for (k, m) in y_max.iter_mut().enumerate() {
            *m = m.max(r.y[k].abs());
        }
    }
    if x_max.iter().chain(&y_max).any(|m| *m == 0.0) {
        return Err(DataError::ZeroMax("max_normalize".into()));
    }
    let records = ds
        .records
        .iter()
        .map(|r| SeriesRecord {
            t: r.t,
            x: DVector::from_fn(ds.d_x, |k, _| r.x[k] / x_max[k]),
            y: DVector::from_fn(ds.d_y, |k, _| r.y[k] / y_max[k]),
        })
        .collect();
    Ok(Dataset {
        name: ds.name.clone(),
        records,
        d_x: ds.d_x,
        d_y: ds.d_y,
        provenance: ds.provenance.clone(),
    })
}

/// Dataset selection as it appears in run configurations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// periodic | logistic | concept_drift | concept_drift_1d | boc | ett | brownian_sum
    pub kind: String,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub start: usize,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub data_seed: u64,
}

fn default_n() -> usize {
    200
}
fn default_period() -> usize {
    20
}
fn default_c() -> f64 {
    3.6
}
fn default_x0() -> f64 {
    0.13
}
fn default_mu() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_n_traj() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl DatasetSpec {
    pub fn named(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            path: None,
            n: default_n(),
            start: 0,
            period: default_period(),
            c: default_c(),
            x0: default_x0(),
            mu: default_mu(),
            sigma: default_sigma(),
            n_traj: default_n_traj(),
            normalize: true,
            data_seed: 0,
        }
    }

    pub fn load(&self) -> Result<Dataset, DataError> {
        match self.kind.as_str() {
            "periodic" => gen_periodic(self.n, self.period),
            "logistic" => gen_logistic(self.n, self.c, self.x0),
            "concept_drift" => gen_concept_drift(self.n, true),
            "concept_drift_1d" => gen_concept_drift(self.n, false),
            "brownian_sum" => {
                gen_brownian_sum(self.n, self.mu, self.sigma, self.n_traj, self.data_seed)
            }
            "boc" => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| DataError::MissingPath("boc".into()))?;
                load_boc_csv(Path::new(path), self.start, self.n)
            }
            "ett" => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| DataError::MissingPath("ett".into()))?;
                load_ett_csv(Path::new(path), self.start, self.n, self.normalize)
            }
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}
