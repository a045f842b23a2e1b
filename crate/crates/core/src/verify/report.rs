//! Machine-readable probe results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// JSON has no NaN; such values are written as `null` and read back as NaN.
fn nan_default<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One raw number, optionally tied to a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub seed: Option<u64>,
    pub name: String,
    #[serde(deserialize_with = "nan_default")]
    pub value: f64,
}

/// A pass/fail decision and the rule it was judged by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Human-readable rule, e.g. `"rel err <= 1e-5"`.
    pub threshold: String,
    #[serde(deserialize_with = "nan_default")]
    pub observed: f64,
    pub passed: bool,
    /// Seeds the decision rests on.
    pub seed_count: usize,
    /// Soft checks are reported but do not fail the probe.
    pub soft: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub seeds: Vec<u64>,
    pub measurements: Vec<Measurement>,
    pub aggregates: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub seconds: f64,
}

impl ProbeReport {
    pub fn new(probe: impl Into<String>, seeds: &[u64]) -> Self {
        Self {
            probe: probe.into(),
            seeds: seeds.to_vec(),
            measurements: Vec::new(),
            aggregates: BTreeMap::new(),
            checks: Vec::new(),
            passed: true,
            seconds: 0.0,
        }
    }

    pub fn measure(&mut self, seed: Option<u64>, name: impl Into<String>, value: f64) {
        self.measurements.push(Measurement {
            seed,
            name: name.into(),
            value,
        });
    }

    pub fn aggregate(&mut self, name: impl Into<String>, value: f64) {
        self.aggregates.insert(name.into(), value);
    }

    fn push_check(
        &mut self,
        name: String,
        threshold: String,
        observed: f64,
        passed: bool,
        seed_count: usize,
        soft: bool,
    ) {
        if !passed && !soft {
            self.passed = false;
        }
        self.checks.push(Check {
            name,
            threshold,
            observed,
            passed,
            seed_count,
            soft,
        });
    }

    pub fn check(
        &mut self,
        name: impl Into<String>,
        threshold: impl Into<String>,
        observed: f64,
        passed: bool,
        seed_count: usize,
    ) {
        self.push_check(name.into(), threshold.into(), observed, passed, seed_count, false);
    }

    pub fn soft_check(
        &mut self,
        name: impl Into<String>,
        threshold: impl Into<String>,
        observed: f64,
        passed: bool,
        seed_count: usize,
    ) {
        self.push_check(name.into(), threshold.into(), observed, passed, seed_count, true);
    }

    /// Values of measurement `name`, in insertion order.
    pub fn values(&self, name: &str) -> Vec<f64> {
        self.measurements
            .iter()
            .filter(|m| m.name == name)
            .map(|m| m.value)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<dir>/<probe>.json` and returns the path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.probe));
        fs::write(&path, self.to_json()? + "\n")?;
        Ok(path)
    }
}

/// Every `*.json` report in `dir`, sorted by file name.
pub fn load_reports(dir: impl AsRef<Path>) -> Result<Vec<ProbeReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            ProbeReport::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Fixed-width table of every check of every report.
pub fn render_summary(reports: &[ProbeReport]) -> String {
    let mut rows = vec![[
        "probe".to_string(),
        "check".to_string(),
        "observed".to_string(),
        "threshold".to_string(),
        "seeds".to_string(),
        "result".to_string(),
    ]];
    for r in reports {
        for c in &r.checks {
            let result = match (c.passed, c.soft) {
                (true, _) => "pass",
                (false, true) => "warn",
                (false, false) => "FAIL",
            };
            rows.push([
                r.probe.clone(),
                c.name.clone(),
                format!("{:.4e}", c.observed),
                c.threshold.clone(),
                c.seed_count.to_string(),
                result.to_string(),
            ]);
        }
    }
    let widths: Vec<usize> = (0..6)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} probe(s), {failed} failed\n", reports.len()));
    out
}
