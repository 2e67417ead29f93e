//! File formats: the binary draws container and the CSV tables written by
//! the command-line tool.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! CSV value parses back to the identical `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::analysis::AleCurve;
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::panel::{CovariateKind, PanelSchema, TimeSeriesPanel};
use crate::sampler::{PosteriorDraws, TraceRow};

pub const DRAWS_MAGIC: &[u8; 8] = b"SPTRDRAW";
pub const DRAWS_VERSION: u32 = 1;

pub fn write_draws(path: impl AsRef<Path>, draws: &PosteriorDraws) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DRAWS_MAGIC)?;
    w.write_all(&DRAWS_VERSION.to_le_bytes())?;
    rmp_serde::encode::write_named(&mut w, draws)?;
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::DrawsFormat("file shorter than header".into()))?;
    if &header[..8] != DRAWS_MAGIC {
        return Err(Error::DrawsFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(header[8..].try_into().expect("4 bytes"));
    if version != DRAWS_VERSION {
        return Err(Error::DrawsFormat(format!("version {version} (expected {DRAWS_VERSION})")));
    }
    Ok(rmp_serde::decode::from_read(r)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn parse(field: &str, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
        value: field.to_string(),
        context: what.to_string(),
    })
}

fn parse_count<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field.trim().parse::<T>().map_err(|_| Error::NonNumeric {
        value: field.to_string(),
        context: what.to_string(),
    })
}

const MOVE_NAMES: [&str; 3] = ["birth", "death", "change"];

pub fn write_traces(path: impl AsRef<Path>, traces: &[TraceRow]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    let m = traces.first().map_or(0, |t| t.nodes_per_tree.len());
    let mut header = vec!["iteration".to_string(), "mean_sq_residual".into(), "mean_fitted".into()];
    header.extend((1..=m).map(|j| format!("nodes_tree_{j}")));
    header.push("total_leaves".into());
    header.extend(MOVE_NAMES.iter().map(|k| format!("accepted_{k}")));
    header.extend(MOVE_NAMES.iter().map(|k| format!("proposed_{k}")));
    header.push("clamp_events".into());
    header.push("mode_failures".into());
    w.write_record(&header)?;
    for t in traces {
        let mut rec = vec![t.iteration.to_string(), t.mean_sq_residual.to_string(), t.mean_fitted.to_string()];
        rec.extend(t.nodes_per_tree.iter().map(usize::to_string));
        rec.push(t.total_leaves.to_string());
        rec.extend(t.accepted.iter().map(u64::to_string));
        rec.extend(t.proposed.iter().map(u64::to_string));
        rec.push(t.clamp_events.to_string());
        rec.push(t.mode_failures.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 12 {
        return Err(Error::Dimension(format!("trace CSV has {width} columns")));
    }
    let m = width - 12;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let counts = |start: usize| -> Result<[u64; 3]> {
            Ok([
                parse_count(f(start), "trace")?,
                parse_count(f(start + 1), "trace")?,
                parse_count(f(start + 2), "trace")?,
            ])
        };
        out.push(TraceRow {
            iteration: parse_count(f(0), "trace iteration")?,
            mean_sq_residual: parse(f(1), "trace mean_sq_residual")?,
            mean_fitted: parse(f(2), "trace mean_fitted")?,
            nodes_per_tree: (0..m).map(|j| parse_count(f(3 + j), "trace node count")).collect::<Result<_>>()?,
            total_leaves: parse_count(f(3 + m), "trace total_leaves")?,
            accepted: counts(4 + m)?,
            proposed: counts(7 + m)?,
            clamp_events: parse_count(f(10 + m), "trace clamp_events")?,
            mode_failures: parse_count(f(11 + m), "trace mode_failures")?,
        });
    }
    Ok(out)
}

/// `subject_id,<freq_1>,...,<freq_N>` with one row per subject.
pub fn write_subject_matrix(path: impl AsRef<Path>, ids: &[String], freqs: &[f64], m: &RowMatrix) -> Result<()> {
    if ids.len() != m.rows() || freqs.len() != m.cols() {
        return Err(Error::Dimension(format!(
            "{} ids and {} frequencies for a {}x{} matrix",
            ids.len(),
            freqs.len(),
            m.rows(),
            m.cols()
        )));
    }
    let mut w = csv_writer(path.as_ref())?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(freqs.iter().map(f64::to_string));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_subject_matrix`]: `(ids, freqs, matrix)`.
pub fn read_subject_matrix(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<f64>, RowMatrix)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("subject_id") {
        return Err(Error::Panel("matrix CSV must start with `subject_id`".into()));
    }
    let freqs = headers.iter().skip(1).map(|h| parse(h, "frequency header")).collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec.get(0).unwrap_or_default().to_string());
        for v in rec.iter().skip(1) {
            data.push(parse(v, "matrix cell")?);
        }
    }
    Ok((ids.clone(), freqs.clone(), RowMatrix::from_vec(ids.len(), freqs.len(), data)))
}

/// Long-format series CSV `subject_id,t,value` with 1-based `t`.
pub fn write_series_long(path: impl AsRef<Path>, panel: &TimeSeriesPanel) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["subject_id", "t", "value"])?;
    for (id, s) in panel.subject_ids().iter().zip(panel.series()) {
        for (t, x) in s.iter().enumerate() {
            w.write_record([id.as_str(), &(t + 1).to_string(), &x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Covariates CSV; categorical values are written as level labels.
pub fn write_covariates(path: impl AsRef<Path>, panel: &TimeSeriesPanel) -> Result<()> {
    let schema = panel.schema();
    let mut w = csv_writer(path.as_ref())?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(schema.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for (id, row) in panel.subject_ids().iter().zip(panel.covariates()) {
        let mut rec = vec![id.clone()];
        for (spec, v) in schema.covariates.iter().zip(row) {
            rec.push(match &spec.kind {
                CovariateKind::Categorical { levels } => levels[*v as usize].clone(),
                _ => v.to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schema(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, schema)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `covariate,grid_point,frequency_or_functional,mean,lo95,hi95`, one row
/// per partition point `z_1..z_H` and column.
pub fn write_ale(path: impl AsRef<Path>, covariate: &str, curve: &AleCurve) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["covariate", "grid_point", "frequency_or_functional", "mean", "lo95", "hi95"])?;
    for (h, z) in curve.grid.points.iter().skip(1).enumerate() {
        for (c, label) in curve.labels.iter().enumerate() {
            w.write_record([
                covariate,
                &z.to_string(),
                label,
                &curve.mean[h][c].to_string(),
                &curve.lo95[h][c].to_string(),
                &curve.hi95[h][c].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_inclusion(path: impl AsRef<Path>, names: &[String], probs: &[f64]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["covariate", "probability"])?;
    for (n, p) in names.iter().zip(probs) {
        w.write_record([n.as_str(), &p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_inclusion(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec.get(0).unwrap_or_default().to_string(), parse(rec.get(1).unwrap_or(""), "probability")?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::CovariateSpec;

    #[test]
    fn traces_round_trip_exactly() {
        let rows: Vec<TraceRow> = (1..=4)
            .map(|i| TraceRow {
                iteration: i,
                mean_sq_residual: 1.0 / 3.0 + i as f64 * 1e-17,
                mean_fitted: -std::f64::consts::PI * i as f64,
                nodes_per_tree: vec![1, 3, 5],
                total_leaves: 6,
                accepted: [i as u64, 0, 2],
                proposed: [9, 8, 7],
                clamp_events: 0,
                mode_failures: 1,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_traces(&p, &rows).unwrap();
        assert_eq!(read_traces(&p).unwrap(), rows);
    }

    #[test]
    fn subject_matrix_round_trip() {
        let m = RowMatrix::from_rows(&[vec![0.1, -2.5e-300], vec![1e300, 0.3]]);
        let ids = vec!["a".to_string(), "b".to_string()];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_subject_matrix(&p, &ids, &[0.25, 0.375], &m).unwrap();
        let (i2, f2, m2) = read_subject_matrix(&p).unwrap();
        assert_eq!((i2, f2, m2), (ids, vec![0.25, 0.375], m));
    }

    #[test]
    fn draws_header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NOTDRAWS\x01\0\0\0").unwrap();
        assert!(matches!(read_draws(&p), Err(Error::DrawsFormat(_))));
        std::fs::write(&p, b"SPT").unwrap();
        assert!(matches!(read_draws(&p), Err(Error::DrawsFormat(_))));
    }

    #[test]
    fn panel_files_reload() {
        let schema = PanelSchema {
            covariates: vec![CovariateSpec::continuous("age"), CovariateSpec::categorical("sex", &["f", "m"])],
        };
        let panel = TimeSeriesPanel::new(
            vec!["x".into(), "y".into()],
            vec![(0..10).map(|t| (t as f64).sin()).collect(), (0..10).map(|t| t as f64 / 7.0).collect()],
            vec![vec![3.5, 1.0], vec![4.25, 0.0]],
            schema.clone(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (s, c, j) = (dir.path().join("s.csv"), dir.path().join("c.csv"), dir.path().join("schema.json"));
        write_series_long(&s, &panel).unwrap();
        write_covariates(&c, &panel).unwrap();
        write_schema(&j, &schema).unwrap();
        let schema2 = PanelSchema::from_json_file(&j).unwrap();
        let back = crate::panel::load_panel(&s, &c, &schema2).unwrap();
        assert_eq!(back, panel);
    }
}
