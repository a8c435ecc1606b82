//! Run manifests, CSV tables, gnuplot scripts and the exit-code contract.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::SpinorField;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PROPERTY_FAILURE: i32 = 2;

/// Floats are written with 17 significant digits.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    /// Largest boundary-shell mass over all dynamical results.
    pub boundary_mass: Option<f64>,
    pub boundary_ok: bool,
    pub reference_description: Option<String>,
    pub reference_consistent: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub artifact_version: String,
    pub config: Value,
    pub wall_clock_seconds: f64,
    pub validity: Validity,
    pub properties: Vec<PropertyCheck>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn all_pass(&self) -> bool {
        self.validity.boundary_ok
            && self.validity.reference_consistent != Some(false)
            && self.properties.iter().all(|p| p.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_pass() {
            EXIT_PASS
        } else {
            EXIT_PROPERTY_FAILURE
        }
    }
}

/// Collects files written into one output directory.
pub struct OutputSink {
    dir: PathBuf,
    files: Vec<String>,
    invalid: bool,
}

impl OutputSink {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputSink {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            invalid: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Marks every table written from now on as INVALID.
    pub fn mark_invalid(&mut self) {
        self.invalid = true;
    }

    pub fn is_invalid(&self) -> bool {
        self.invalid
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(p, body)?;
        Ok(())
    }

    /// Writes a CSV table. Rows are preformatted cells.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut s = String::new();
        if self.invalid {
            s.push_str("# status=INVALID\n");
        }
        s.push_str(&header.join(","));
        s.push('\n');
        for r in rows {
            if r.len() != header.len() {
                return Err(Error::Format(format!(
                    "{name}: row has {} cells, header {}",
                    r.len(),
                    header.len()
                )));
            }
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.text(name, &s)
    }

    /// CSV of float columns.
    pub fn csv_f(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let rows: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|v| fmt_f(*v)).collect()).collect();
        self.csv(name, header, &rows)
    }

    pub fn field(&mut self, name: &str, f: &SpinorField) -> Result<()> {
        let p = self.path(name);
        f.save(&p)
    }

    /// A gnuplot script plotting columns of `csv` against column 1.
    pub fn gnuplot(&mut self, name: &str, plot: &PlotSpec<'_>) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "set datafile separator ','");
        let _ = writeln!(s, "set datafile commentschars '#'");
        let _ = writeln!(s, "set key autotitle columnhead");
        let _ = writeln!(s, "set terminal pngcairo size 900,600");
        let _ = writeln!(s, "set output '{}'", name.replace(".gp", ".png"));
        let _ = writeln!(s, "set title '{}'", plot.title);
        let _ = writeln!(s, "set xlabel '{}'", plot.xlabel);
        let _ = writeln!(s, "set ylabel '{}'", plot.ylabel);
        if plot.log {
            let _ = writeln!(s, "set logscale xy");
        }
        let series: Vec<String> = plot
            .series
            .iter()
            .map(|(file, col)| format!("'{file}' using 1:{col} with linespoints"))
            .collect();
        let _ = writeln!(s, "plot {}", series.join(", \\\n     "));
        self.text(name, &s)
    }
}

pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub xlabel: &'a str,
    pub ylabel: &'a str,
    pub log: bool,
    /// (csv file, column index)
    pub series: Vec<(String, usize)>,
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
