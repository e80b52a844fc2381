//! Result tables in CSV and JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ShonanError};
use crate::manifold::Rotation;
use crate::problem::RotationAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ResultFormat {
    type Err = ShonanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(invalid(format!("unknown result format '{other}'"))),
        }
    }
}

impl ResultFormat {
    /// Guesses the format from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Json,
        }
    }
}

/// One row of a result table. The first fourteen fields are the CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub seed: Option<u64>,
    pub p_final: Option<usize>,
    pub lambda_min: Option<f64>,
    pub f_sdp: Option<f64>,
    pub f_hat: Option<f64>,
    pub certified: bool,
    pub success: bool,
    pub error_pct: Option<f64>,
    pub opt_time_s: Option<f64>,
    pub eig_time_s: Option<f64>,
    /// JSON-only details.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<RecordDetails>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordDetails {
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suboptimality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escapes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_iterations: Option<usize>,
    /// Run failure message for rows of a sweep that errored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Row-major d×d blocks of the estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<Vec<f64>>>,
}

impl RecordDetails {
    pub fn encode_rotations(r: &RotationAssignment) -> Vec<Vec<f64>> {
        r.blocks()
            .iter()
            .map(|b| b.matrix().transpose().as_slice().to_vec())
            .collect()
    }

    /// Decodes `rotations`, validating every block.
    pub fn decode_rotations(&self) -> Result<Option<RotationAssignment>> {
        let Some(rows) = &self.rotations else {
            return Ok(None);
        };
        let d = self.d;
        let blocks = rows
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != d * d {
                    return Err(invalid(format!(
                        "rotation {i} has {} entries, expected {}",
                        v.len(),
                        d * d
                    )));
                }
                Rotation::from_matrix(nalgebra::DMatrix::from_row_slice(d, d, v))
            })
            .collect::<Result<Vec<_>>>()?;
        RotationAssignment::new(blocks).map(Some)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    dataset: String,
    method: String,
    n: usize,
    m: usize,
    seed: Option<u64>,
    p_final: Option<usize>,
    lambda_min: Option<f64>,
    f_sdp: Option<f64>,
    f_hat: Option<f64>,
    certified: bool,
    success: bool,
    error_pct: Option<f64>,
    opt_time_s: Option<f64>,
    eig_time_s: Option<f64>,
}

impl From<&ResultRecord> for CsvRow {
    fn from(r: &ResultRecord) -> Self {
        Self {
            dataset: r.dataset.clone(),
            method: r.method.clone(),
            n: r.n,
            m: r.m,
            seed: r.seed,
            p_final: r.p_final,
            lambda_min: r.lambda_min,
            f_sdp: r.f_sdp,
            f_hat: r.f_hat,
            certified: r.certified,
            success: r.success,
            error_pct: r.error_pct,
            opt_time_s: r.opt_time_s,
            eig_time_s: r.eig_time_s,
        }
    }
}

impl From<CsvRow> for ResultRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            dataset: r.dataset,
            method: r.method,
            n: r.n,
            m: r.m,
            seed: r.seed,
            p_final: r.p_final,
            lambda_min: r.lambda_min,
            f_sdp: r.f_sdp,
            f_hat: r.f_hat,
            certified: r.certified,
            success: r.success,
            error_pct: r.error_pct,
            opt_time_s: r.opt_time_s,
            eig_time_s: r.eig_time_s,
            details: None,
        }
    }
}

pub const CSV_COLUMNS: [&str; 14] = [
    "dataset",
    "method",
    "n",
    "m",
    "seed",
    "p_final",
    "lambda_min",
    "f_sdp",
    "f_hat",
    "certified",
    "success",
    "error_pct",
    "opt_time_s",
    "eig_time_s",
];

fn non_finite_check(records: &[ResultRecord]) -> Result<()> {
    for r in records {
        let values = [r.lambda_min, r.f_sdp, r.f_hat, r.error_pct, r.opt_time_s, r.eig_time_s];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "record for {} / {} has non-finite values",
                r.dataset, r.method
            )));
        }
    }
    Ok(())
}

/// Renders records as text in the given format.
pub fn format_results(records: &[ResultRecord], format: ResultFormat) -> Result<String> {
    non_finite_check(records)?;
    match format {
        ResultFormat::Json => {
            let mut s = serde_json::to_string_pretty(records).map_err(|e| invalid(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ResultFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_COLUMNS).map_err(|e| invalid(e.to_string()))?;
            for r in records {
                w.serialize(CsvRow::from(r)).map_err(|e| invalid(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
        }
    }
}

pub fn parse_results(text: &str, format: ResultFormat) -> Result<Vec<ResultRecord>> {
    match format {
        ResultFormat::Json => serde_json::from_str(text).map_err(|e| ShonanError::Parse {
            line: e.line(),
            message: e.to_string(),
        }),
        ResultFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            let headers = rdr.headers().map_err(|e| invalid(e.to_string()))?.clone();
            if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
                return Err(ShonanError::Parse {
                    line: 1,
                    message: format!(
                        "unexpected CSV header: {}",
                        headers.iter().collect::<Vec<_>>().join(",")
                    ),
                });
            }
            rdr.deserialize::<CsvRow>()
                .map(|row| {
                    row.map(ResultRecord::from).map_err(|e| ShonanError::Parse {
                        line: e.position().map_or(0, |p| p.line() as usize),
                        message: e.to_string(),
                    })
                })
                .collect()
        }
    }
}

pub fn write_results(path: &Path, records: &[ResultRecord], format: ResultFormat) -> Result<()> {
    let text = format_results(records, format)?;
    std::fs::write(path, text).map_err(|source| ShonanError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_results(path: &Path, format: ResultFormat) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| ShonanError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_results(&text, format).map_err(|e| match e {
        ShonanError::Parse { line, message } => ShonanError::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        },
        other => other,
    })
}
