//! File formats: binary data CSV, versioned JSON model files, score and
//! metrics CSV. Every write goes to a temporary file in the destination
//! directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_scores::LatentScores;
use crate::moment_estimation::BinaryMatrix;
use crate::simulation_lab::{MetricsRecord, StageTimes};
use crate::spectral_subspace::{FactorModel, FitInfo};

pub const MODEL_FORMAT_VERSION: u64 = 1;
pub const MODEL_FORMAT_NAME: &str = "binfactor-model";

const METRICS_HEADER: [&str; 7] = ["scenario", "rep", "max_err", "subspace_d", "med_err", "tau_err", "error"];
const TIMING_HEADER: [&str; 3] = ["t_generate", "t_fit", "t_score"];

fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn is_binary_token(s: &str) -> bool {
    s == "0" || s == "1"
}

/// Reads a comma-separated 0/1 matrix. A first row that is not entirely
/// numeric is taken as column names.
pub fn read_binary_matrix(path: &Path) -> Result<BinaryMatrix> {
    let text = fs::read_to_string(path)?;
    parse_binary_matrix(&text)
}

pub fn parse_binary_matrix(text: &str) -> Result<BinaryMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = reader.records();
    let mut names = None;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    let mut width = None;

    let parse_err = |row, col, msg: String| Error::Parse { row, col, msg };

    while let Some(record) = records.next() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if fields.len() == 1 && fields[0].is_empty() {
            continue;
        }
        if names.is_none() && rows.is_empty() && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            names = Some(fields.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            width = Some(fields.len());
            continue;
        }
        let row_no = rows.len() + 1;
        match width {
            Some(w) if w != fields.len() => {
                return Err(parse_err(row_no, fields.len().min(w) + 1, format!("expected {w} fields, found {}", fields.len())));
            }
            None => width = Some(fields.len()),
            _ => {}
        }
        let mut row = Vec::with_capacity(fields.len());
        for (k, f) in fields.iter().enumerate() {
            if !is_binary_token(f) {
                return Err(parse_err(row_no, k + 1, format!("expected 0 or 1, found {f:?}")));
            }
            row.push(u8::from(*f == "1"));
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    let y = BinaryMatrix::from_rows(&rows)?;
    match names {
        Some(n) => y.with_names(n),
        None => Ok(y),
    }
}

pub fn write_binary_matrix(y: &BinaryMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(names) = y.names() {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for row in y.rows() {
        let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    format_version: u64,
    d: usize,
    p: usize,
    c_hat: Vec<f64>,
    tau2_hat: Vec<f64>,
    /// Row-major `p × d`.
    b_hat: Vec<Vec<f64>>,
    eigvals: Vec<f64>,
    info: FitInfo,
}

#[derive(Deserialize)]
struct VersionProbe {
    format: Option<String>,
    format_version: Option<u64>,
}

pub fn model_to_json(model: &FactorModel) -> Result<String> {
    let file = ModelFile {
        format: MODEL_FORMAT_NAME.into(),
        format_version: MODEL_FORMAT_VERSION,
        d: model.d,
        p: model.p,
        c_hat: model.c_hat.clone(),
        tau2_hat: model.tau2_hat.clone(),
        b_hat: (0..model.p).map(|j| model.loading(j)).collect(),
        eigvals: model.eigvals.clone(),
        info: model.info.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_json(text: &str) -> Result<FactorModel> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if probe.format.as_deref() != Some(MODEL_FORMAT_NAME) {
        return Err(Error::Format("not a model file".into()));
    }
    match probe.format_version {
        Some(MODEL_FORMAT_VERSION) => {}
        Some(found) => return Err(Error::Version { found, expected: MODEL_FORMAT_VERSION }),
        None => return Err(Error::Format("missing format_version".into())),
    }
    let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let (p, d) = (f.p, f.d);
    if f.c_hat.len() != p || f.tau2_hat.len() != p || f.b_hat.len() != p || f.eigvals.len() != d {
        return Err(Error::Format("field lengths disagree with p and d".into()));
    }
    if f.b_hat.iter().any(|r| r.len() != d) {
        return Err(Error::Format("b_hat rows must have d entries".into()));
    }
    Ok(FactorModel {
        d,
        p,
        c_hat: f.c_hat,
        b_hat: DMatrix::from_fn(p, d, |j, k| f.b_hat[j][k]),
        tau2_hat: f.tau2_hat,
        eigvals: f.eigvals,
        info: f.info,
    })
}

pub fn write_model(model: &FactorModel, path: &Path) -> Result<()> {
    atomic_write(path, model_to_json(model)?.as_bytes())
}

pub fn read_model(path: &Path) -> Result<FactorModel> {
    model_from_json(&fs::read_to_string(path)?)
}

/// One row per sample: `z1..zd`, then the convergence record.
pub fn write_scores(scores: &LatentScores, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = scores.z_hat.ncols();
    let mut header: Vec<String> = (1..=d).map(|k| format!("z{k}")).collect();
    header.extend(["iterations", "grad_norm", "converged", "loglik"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, rec) in scores.records.iter().enumerate() {
        let mut row: Vec<String> = (0..d).map(|k| scores.z_hat[(i, k)].to_string()).collect();
        row.push(rec.iterations.to_string());
        row.push(rec.grad_norm.to_string());
        row.push(rec.converged.to_string());
        row.push(rec.loglik.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    atomic_write(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn metrics_header(with_timings: bool) -> Vec<&'static str> {
    let mut h = METRICS_HEADER.to_vec();
    if with_timings {
        h.extend(TIMING_HEADER);
    }
    h
}

fn metrics_row(r: &MetricsRecord, with_timings: bool) -> Vec<String> {
    let mut row = vec![
        r.scenario.clone(),
        r.rep.to_string(),
        r.max_err.to_string(),
        r.subspace_d.to_string(),
        r.med_err.to_string(),
        r.tau_err.to_string(),
        r.error.clone().unwrap_or_default(),
    ];
    if with_timings {
        row.extend([r.times.generate, r.times.fit, r.times.score].map(|t| t.to_string()));
    }
    row
}

/// Writes metrics as CSV. With `append`, rows are added after the existing
/// contents and the header is only written if the file is new or empty.
pub fn write_metrics(records: &[MetricsRecord], path: &Path, append: bool, with_timings: bool) -> Result<()> {
    let header = metrics_header(with_timings);
    let mut existing = Vec::new();
    if append && path.exists() {
        existing = fs::read(path)?;
        if !existing.is_empty() {
            let text = String::from_utf8_lossy(&existing);
            let first = text.lines().next().unwrap_or_default();
            if first != header.join(",") {
                return Err(Error::Format(format!("existing metrics header {first:?} does not match")));
            }
            if !existing.ends_with(b"\n") {
                existing.push(b'\n');
            }
        }
    }
    let mut w = csv::Writer::from_writer(existing.clone());
    if existing.is_empty() {
        w.write_record(&header).map_err(csv_err)?;
    }
    for r in records {
        w.write_record(metrics_row(r, with_timings)).map_err(csv_err)?;
    }
    atomic_write(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let with_timings = if header == metrics_header(false) {
        false
    } else if header == metrics_header(true) {
        true
    } else {
        return Err(Error::Format(format!("unrecognised metrics header {header:?}")));
    };

    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse { row: i + 1, col: k + 1, msg: format!("not a number: {:?}", &rec[k]) })
        };
        let rep = rec[1].parse().map_err(|_| Error::Parse { row: i + 1, col: 2, msg: "not an index".into() })?;
        let times = if with_timings {
            StageTimes { generate: num(7)?, fit: num(8)?, score: num(9)? }
        } else {
            StageTimes::default()
        };
        out.push(MetricsRecord {
            scenario: rec[0].to_string(),
            rep,
            max_err: num(2)?,
            subspace_d: num(3)?,
            med_err: num(4)?,
            tau_err: num(5)?,
            error: (!rec[6].is_empty()).then(|| rec[6].to_string()),
            times,
        });
    }
    Ok(out)
}
