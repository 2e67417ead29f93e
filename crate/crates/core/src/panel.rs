//! Panels of equal-length time series with mixed-type covariates.
//!
//! Covariate values are stored as `f64`; categorical covariates store the
//! index of their level in the schema's level list.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// Minimum admissible series length.
pub const MIN_SERIES_LEN: usize = 8;

/// Largest number of levels a categorical covariate may have; split
/// enumeration visits all `2^q - 2` level subsets.
pub const MAX_CATEGORICAL_LEVELS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Discrete,
    Ordinal,
    Categorical { levels: Vec<String> },
}

impl CovariateKind {
    pub fn is_ordered(&self) -> bool {
        !matches!(self, CovariateKind::Categorical { .. })
    }

    pub fn n_levels(&self) -> usize {
        match self {
            CovariateKind::Categorical { levels } => levels.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl CovariateSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Continuous,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }
}

/// Sidecar schema describing the covariate columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSchema {
    pub covariates: Vec<CovariateSpec>,
}

impl PanelSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: PanelSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Panel("schema declares no covariates".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.covariates {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Panel(format!("duplicate covariate `{}`", spec.name)));
            }
            if let CovariateKind::Categorical { levels } = &spec.kind {
                if levels.len() < 2 {
                    return Err(Error::Panel(format!(
                        "categorical covariate `{}` needs at least 2 levels",
                        spec.name
                    )));
                }
                if levels.len() > MAX_CATEGORICAL_LEVELS {
                    return Err(Error::Panel(format!(
                        "categorical covariate `{}` has {} levels (max {MAX_CATEGORICAL_LEVELS})",
                        spec.name,
                        levels.len()
                    )));
                }
                let distinct: std::collections::HashSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(Error::Panel(format!(
                        "categorical covariate `{}` has repeated levels",
                        spec.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `L` series of common length `T` with an `L x P` covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPanel {
    subject_ids: Vec<String>,
    series: Vec<Vec<f64>>,
    covariates: Vec<Vec<f64>>,
    schema: PanelSchema,
}

impl TimeSeriesPanel {
    pub fn new(
        subject_ids: Vec<String>,
        series: Vec<Vec<f64>>,
        covariates: Vec<Vec<f64>>,
        schema: PanelSchema,
    ) -> Result<Self> {
        schema.validate()?;
        if series.is_empty() {
            return Err(Error::Panel("panel has no series".into()));
        }
        if subject_ids.len() != series.len() || covariates.len() != series.len() {
            return Err(Error::Dimension(format!(
                "{} subject ids, {} series, {} covariate rows",
                subject_ids.len(),
                series.len(),
                covariates.len()
            )));
        }
        let t = series[0].len();
        for (id, s) in subject_ids.iter().zip(&series) {
            if s.len() != t {
                return Err(Error::LengthMismatch {
                    subject: id.clone(),
                    expected: t,
                    found: s.len(),
                });
            }
            if let Some(v) = s.iter().find(|v| !v.is_finite()) {
                return Err(Error::Panel(format!("subject `{id}` has non-finite value {v}")));
            }
        }
        let p = schema.covariates.len();
        for (id, row) in subject_ids.iter().zip(&covariates) {
            if row.len() != p {
                return Err(Error::Dimension(format!(
                    "subject `{id}` has {} covariates, schema declares {p}",
                    row.len()
                )));
            }
            for (spec, &v) in schema.covariates.iter().zip(row) {
                if !v.is_finite() {
                    return Err(Error::Panel(format!(
                        "subject `{id}`: covariate `{}` is not finite",
                        spec.name
                    )));
                }
                if let CovariateKind::Categorical { levels } = &spec.kind {
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= levels.len() {
                        return Err(Error::UnknownLevel {
                            covariate: spec.name.clone(),
                            level: v.to_string(),
                        });
                    }
                }
            }
        }
        Ok(Self {
            subject_ids,
            series,
            covariates,
            schema,
        })
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn series_len(&self) -> usize {
        self.series[0].len()
    }

    pub fn n_covariates(&self) -> usize {
        self.schema.covariates.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn series(&self) -> &[Vec<f64>] {
        &self.series
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn schema(&self) -> &PanelSchema {
        &self.schema
    }

    /// Index of a covariate by name, or by 0-based position when `key` parses
    /// as an integer.
    pub fn covariate_index(&self, key: &str) -> Option<usize> {
        covariate_index(&self.schema, key)
    }

    /// FNV-1a hash over the series, covariates and schema, used to detect a
    /// checkpoint being resumed against a different panel.
    pub fn content_hash(&self) -> String {
        let mut h = Fnv1a::new();
        for id in &self.subject_ids {
            h.write(id.as_bytes());
            h.write(&[0]);
        }
        for s in &self.series {
            for v in s {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        for row in &self.covariates {
            for v in row {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.write(serde_json::to_string(&self.schema).unwrap_or_default().as_bytes());
        format!("{:016x}", h.finish())
    }
}

pub fn covariate_index(schema: &PanelSchema, key: &str) -> Option<usize> {
    schema
        .covariates
        .iter()
        .position(|c| c.name == key)
        .or_else(|| key.parse::<usize>().ok().filter(|&i| i < schema.covariates.len()))
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Loads a panel from a series CSV (long `subject_id,t,value` or wide
/// `t,<id>,...`) and a covariates CSV with one row per subject.
///
/// Series are returned in covariate-row order.
pub fn load_panel(
    series_path: impl AsRef<Path>,
    covariates_path: impl AsRef<Path>,
    schema: &PanelSchema,
) -> Result<TimeSeriesPanel> {
    schema.validate()?;
    let series_map = read_series_csv(series_path.as_ref())?;
    let (ids, covariates) = read_covariates_csv(covariates_path.as_ref(), schema)?;

    let known: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    for (id, _) in &series_map {
        if !known.contains(id.as_str()) {
            return Err(Error::UnknownSubject(id.clone()));
        }
    }
    let mut by_id: HashMap<String, Vec<f64>> = series_map.into_iter().collect();
    let mut series = Vec::with_capacity(ids.len());
    for id in &ids {
        let s = by_id
            .remove(id)
            .ok_or_else(|| Error::Panel(format!("subject `{id}` has covariates but no series")))?;
        series.push(s);
    }
    TimeSeriesPanel::new(ids, series, covariates, schema.clone())
}

fn parse_f64(value: &str, context: impl FnOnce() -> String) -> Result<f64> {
    let trimmed = value.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            value: value.to_string(),
            context: context(),
        }),
    }
}

/// Returns `(subject_id, series)` pairs in order of first appearance.
fn read_series_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let is_long = headers.len() == 3
        && headers[0] == "subject_id"
        && headers[1] == "t"
        && headers[2] == "value";
    if is_long {
        let mut order: Vec<String> = Vec::new();
        let mut points: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let id = record.get(0).unwrap_or("").to_string();
            let t_raw = record.get(1).unwrap_or("");
            let t = t_raw.parse::<usize>().map_err(|_| Error::NonNumeric {
                value: t_raw.to_string(),
                context: format!("column `t`, data row {}", line + 1),
            })?;
            let v = parse_f64(record.get(2).unwrap_or(""), || {
                format!("column `value`, data row {}", line + 1)
            })?;
            if !points.contains_key(&id) {
                order.push(id.clone());
            }
            points.entry(id).or_default().push((t, v));
        }
        let mut out = Vec::with_capacity(order.len());
        for id in order {
            let mut pts = points.remove(&id).unwrap_or_default();
            pts.sort_by_key(|&(t, _)| t);
            for (i, &(t, _)) in pts.iter().enumerate() {
                if t != i + 1 {
                    return Err(Error::Panel(format!(
                        "subject `{id}`: time index must be 1-based and contiguous (found t={t} at position {})",
                        i + 1
                    )));
                }
            }
            out.push((id, pts.into_iter().map(|(_, v)| v).collect()));
        }
        Ok(out)
    } else if headers.first().map(String::as_str) == Some("t") && headers.len() >= 2 {
        let ids: Vec<String> = headers[1..].to_vec();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            for (j, col) in cols.iter_mut().enumerate() {
                let cell = record.get(j + 1).unwrap_or("");
                if cell.is_empty() {
                    continue;
                }
                col.push(parse_f64(cell, || {
                    format!("column `{}`, data row {}", ids[j], line + 1)
                })?);
            }
        }
        Ok(ids.into_iter().zip(cols).collect())
    } else {
        Err(Error::Panel(format!(
            "unrecognised series header {headers:?}; expected `subject_id,t,value` or `t,<id>,...`"
        )))
    }
}

fn read_covariates_csv(path: &Path, schema: &PanelSchema) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.first().map(String::as_str) != Some("subject_id") {
        return Err(Error::Panel("covariates CSV must start with `subject_id`".into()));
    }
    let columns: Vec<usize> = schema
        .covariates
        .iter()
        .map(|spec| {
            headers
                .iter()
                .position(|h| *h == spec.name)
                .ok_or_else(|| Error::Panel(format!("covariates CSV lacks column `{}`", spec.name)))
        })
        .collect::<Result<_>>()?;

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or("").to_string();
        let mut row = Vec::with_capacity(columns.len());
        for (spec, &c) in schema.covariates.iter().zip(&columns) {
            let cell = record.get(c).unwrap_or("");
            let v = match &spec.kind {
                CovariateKind::Categorical { levels } => levels
                    .iter()
                    .position(|l| l == cell)
                    .map(|i| i as f64)
                    .ok_or_else(|| Error::UnknownLevel {
                        covariate: spec.name.clone(),
                        level: cell.to_string(),
                    })?,
                _ => parse_f64(cell, || format!("column `{}`, data row {}", spec.name, line + 1))?,
            };
            row.push(v);
        }
        if ids.contains(&id) {
            return Err(Error::Panel(format!("duplicate subject id `{id}` in covariates")));
        }
        ids.push(id);
        rows.push(row);
    }
    Ok((ids, rows))
}

/// Subtracts each series' sample mean.
pub fn demean(panel: &TimeSeriesPanel) -> TimeSeriesPanel {
    let mut out = panel.clone();
    for s in &mut out.series {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        for v in s.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Periodogram ordinates on the Fourier frequencies `k/T`, `k = 1..N`,
/// `N = floor(T/2) - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Periodogram {
    pub freqs: Vec<f64>,
    pub values: RowMatrix,
    pub log_values: RowMatrix,
}

impl Periodogram {
    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_series(&self) -> usize {
        self.values.rows()
    }
}

/// Number of Fourier frequencies used for a series of length `t`.
pub fn n_fourier(t: usize) -> usize {
    (t / 2).saturating_sub(1)
}

pub fn fourier_frequencies(t: usize) -> Vec<f64> {
    (1..=n_fourier(t)).map(|k| k as f64 / t as f64).collect()
}

/// Floor used for the log of an exactly-zero ordinate.
pub const LOG_FLOOR: f64 = -708.0;

/// `I(k/T) = |sum_t x_t exp(-2 pi i k t / T)|^2 / T` for `k = 0..T-1`.
pub fn full_grid_periodogram(x: &[f64]) -> Vec<f64> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(x.len());
    full_grid_with(&fft, x)
}

fn full_grid_with(fft: &Arc<dyn rustfft::Fft<f64>>, x: &[f64]) -> Vec<f64> {
    let t = x.len() as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm_sqr() / t).collect()
}

/// Periodogram of every series in a (demeaned) panel.
///
/// The panel should already be demeaned; this is not checked.
pub fn periodogram(panel: &TimeSeriesPanel) -> Result<Periodogram> {
    let t = panel.series_len();
    if t < MIN_SERIES_LEN {
        return Err(Error::SeriesTooShort(t));
    }
    let n = n_fourier(t);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t);
    let mut values = RowMatrix::zeros(panel.n_series(), n);
    let mut log_values = RowMatrix::zeros(panel.n_series(), n);
    for (l, s) in panel.series().iter().enumerate() {
        let full = full_grid_with(&fft, s);
        for k in 0..n {
            let v = full[k + 1];
            values.set(l, k, v);
            log_values.set(l, k, if v > 0.0 { v.ln().max(LOG_FLOOR) } else { LOG_FLOOR });
        }
    }
    Ok(Periodogram {
        freqs: fourier_frequencies(t),
        values,
        log_values,
    })
}
