//! Number formatting, CSV tables and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const OPTIMIZER_NOTE: &str = "adam (beta1 0.9, beta2 0.98, eps 1e-9) replaces LAMB";

/// C-style `%.9g`: nine significant digits, trailing zeros trimmed.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Optional float cell; `None` is an empty field.
pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_g9).unwrap_or_default()
}

/// Column-ordered table written through the csv crate.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    comments: Vec<String>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
            comments: Vec::new(),
        }
    }

    /// `# key = value` line written above the header.
    pub fn comment(&mut self, line: impl Into<String>) {
        self.comments.push(line.into());
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for c in &self.comments {
            buf.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        write_file(path, &buf)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// A parsed CSV: header plus string rows, comment lines skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvData {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Data(format!("{}: missing column {name:?}", self.path.display()))
        })
    }

    /// Column parsed as floats; empty cells become `None`.
    pub fn floats(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                let cell = r[c].trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse::<f64>().map(Some).map_err(|_| {
                    CliError::Data(format!("{}: bad number {cell:?} in {name:?}", self.path.display()))
                })
            })
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    optimizer: &'a str,
    seeds: BTreeMap<&'a str, u64>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `config.toml` and `manifest.toml` into `dir`.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, seeds: &[(&str, u64)]) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: config_hash(cfg),
        optimizer: OPTIMIZER_NOTE,
        seeds: seeds.iter().copied().collect(),
    };
    let text = toml::to_string(&m).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&dir.join("manifest.toml"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        // Expected strings are what C printf("%.9g") prints.
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.2, "0.2"),
            (77.88007830714049, "77.8800783"),
            (-1.5, "-1.5"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (1e-30, "1e-30"),
            (2.0f64.sqrt(), "1.41421356"),
            (999999999.5, "1e+09"),
            (-0.000123456789123, "-0.000123456789"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g9(x), want, "{x}");
        }
    }

    #[test]
    fn table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new(&["a", "b"]);
        t.comment("alpha = 0.2");
        t.push(vec![fmt_g9(0.1), String::new()]);
        t.write(&p).unwrap();
        let d = CsvData::read(&p).unwrap();
        assert_eq!(d.header, ["a", "b"]);
        assert_eq!(d.floats("a").unwrap(), [Some(0.1)]);
        assert_eq!(d.floats("b").unwrap(), [None]);
        assert!(d.column("c").is_err());
    }
}
