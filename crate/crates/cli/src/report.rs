//! Report assembly and serialization.
//!
//! `report.json` is deterministic for a fixed config and seed: struct field
//! order fixes the key order, and every float is written with 17 significant
//! digits (`{:.16e}`). Wall-clock data goes to `run_meta.json` instead, so
//! report bytes stay reproducible. CSV tables are written one file per table
//! with a header row; floats use the same 17-digit format.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use conjugacy_core::cert::Certificate;
use conjugacy_core::perturbation::HypothesisRecord;

use crate::config::RunConfig;
use crate::CliError;

pub const REPORT_STATUS_PASS: &str = "pass";
pub const REPORT_STATUS_FAIL: &str = "fail";
pub const REPORT_STATUS_OUTSIDE: &str = "outside-theorem";

#[derive(Clone, Debug, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsOut {
    pub k: f64,
    pub alpha: f64,
    pub m: f64,
    pub gamma: f64,
    pub mu: f64,
    pub k_gamma_over_alpha: f64,
    pub smallness_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WitnessOut {
    pub time: f64,
    pub second_time: Option<f64>,
    pub point: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateOut {
    pub id: String,
    pub pass: bool,
    pub outside_theorem: bool,
    pub grid_size: usize,
    pub worst_margin: f64,
    pub worst_margin_normalized: f64,
    pub horizon: f64,
    pub witness: Option<WitnessOut>,
    pub notes: Vec<String>,
}

impl From<&Certificate> for CertificateOut {
    fn from(c: &Certificate) -> Self {
        Self {
            id: c.id.clone(),
            pass: c.pass,
            outside_theorem: c.outside_theorem,
            grid_size: c.grid_size,
            worst_margin: c.worst_margin,
            worst_margin_normalized: c.worst_margin_normalized,
            horizon: c.horizon,
            witness: c.witness.as_ref().map(|w| WitnessOut {
                time: w.time,
                second_time: w.second_time,
                point: w.point.clone(),
                lhs: w.lhs,
                rhs: w.rhs,
            }),
            notes: c.notes.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditRecordOut {
    pub id: String,
    pub status: String,
    pub value: f64,
    pub witness_time: f64,
    pub witness_point: Vec<f64>,
    pub note: Option<String>,
}

impl From<&HypothesisRecord> for AuditRecordOut {
    fn from(r: &HypothesisRecord) -> Self {
        Self {
            id: r.id.as_str().to_string(),
            status: r.status.as_str().to_string(),
            value: r.evidence.value,
            witness_time: r.evidence.time,
            witness_point: r.evidence.point.clone(),
            note: r.evidence.note.clone(),
        }
    }
}

/// One table cell: a number, a label, or missing.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
    Null,
}

#[derive(Clone, Debug, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub status: String,
    pub config: RunConfig,
    pub constants: Option<ConstantsOut>,
    pub audit: Option<Vec<AuditRecordOut>>,
    pub certificates: Vec<CertificateOut>,
    pub tables: Vec<Table>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl Report {
    pub fn new(config: RunConfig) -> Self {
        Self {
            tool: ToolInfo { name: "conjugacy", version: env!("CARGO_PKG_VERSION") },
            status: REPORT_STATUS_PASS.to_string(),
            config,
            constants: None,
            audit: None,
            certificates: Vec::new(),
            tables: Vec::new(),
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn push_certificates<'a>(&mut self, certs: impl IntoIterator<Item = &'a Certificate>) {
        for c in certs {
            self.certificates.push(CertificateOut::from(c));
        }
    }

    /// Status from the recorded certificates; failures under certified
    /// hypotheses dominate, exploratory (outside-theorem) results never pass
    /// nor fail the run.
    pub fn resolve_status(&mut self, system_outside_theorem: bool) {
        let any_fail = self.certificates.iter().any(|c| !c.pass && !c.outside_theorem);
        let any_outside = system_outside_theorem || self.certificates.iter().any(|c| c.outside_theorem);
        self.status = if self.error.is_some() || any_fail {
            REPORT_STATUS_FAIL.to_string()
        } else if any_outside {
            REPORT_STATUS_OUTSIDE.to_string()
        } else {
            REPORT_STATUS_PASS.to_string()
        };
    }

    pub fn exit_code(&self) -> u8 {
        if self.status == REPORT_STATUS_FAIL {
            1
        } else {
            0
        }
    }
}

/// JSON formatter writing every finite float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub fn report_to_json(report: &Report) -> Result<String, CliError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    report
        .serialize(&mut ser)
        .map_err(|e| CliError::Io(format!("cannot serialize report: {e}")))?;
    String::from_utf8(buf).map_err(|e| CliError::Io(format!("report is not utf-8: {e}")))
}

fn format_cell(cell: &Cell) -> String {
    match cell {
        Cell::Num(v) => format!("{v:.16e}"),
        Cell::Text(s) => s.clone(),
        Cell::Null => String::new(),
    }
}

/// Write `report.json` plus one CSV per table (when requested) into `dir`.
/// Timing lives in `run_meta.json`, which is excluded from determinism.
pub fn write_report(report: &Report, dir: &Path, formats: &[String], duration_ms: u128) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", dir.display())))?;

    if formats.iter().any(|f| f == "json") {
        let json = report_to_json(report)?;
        let path = dir.join("report.json");
        let mut file =
            std::fs::File::create(&path).map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
        file.write_all(json.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
    }

    if formats.iter().any(|f| f == "csv") {
        for table in &report.tables {
            let path = dir.join(format!("{}.csv", table.name));
            let mut w = csv::Writer::from_path(&path)
                .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
            w.write_record(&table.columns)
                .map_err(|e| CliError::Io(format!("csv error in `{}`: {e}", path.display())))?;
            for row in &table.rows {
                let rec: Vec<String> = row.iter().map(format_cell).collect();
                w.write_record(&rec)
                    .map_err(|e| CliError::Io(format!("csv error in `{}`: {e}", path.display())))?;
            }
            w.flush().map_err(|e| CliError::Io(format!("csv error in `{}`: {e}", path.display())))?;
        }
    }

    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let meta = format!("{{\"written_unix_ms\":{started},\"duration_ms\":{duration_ms}}}\n");
    std::fs::write(dir.join("run_meta.json"), meta)
        .map_err(|e| CliError::Io(format!("cannot write run_meta.json: {e}")))?;
    Ok(())
}
