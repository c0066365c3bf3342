//! Executable checks of the estimator theory: JL angle preservation,
//! unbiasedness, tail decay, complexity scaling and the argmin demo.
//!
//! Every suite produces a [`VerifyReport`] whose verdict is recomputed from
//! its recorded rows alone, so a report reloaded from CSV judges the same.

mod argmin;
mod estimator;
mod jl;
mod scaling;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::normalize_rows;
use crate::tensor::Tensor;

pub use argmin::run_argmin_demo;
pub use estimator::{run_tail_decay, run_unbiasedness};
pub use jl::{jl_distortion, jl_target_dim, run_jl_check, JlDistortion};
pub use scaling::{run_scaling_bench, time_median};

pub const SUITES: [&str; 5] = ["jl", "unbiased", "tail", "scaling", "argmin"];

/// What a report row holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Param,
    Threshold,
    Trial,
    Stat,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Param => "param",
            RowKind::Threshold => "threshold",
            RowKind::Trial => "trial",
            RowKind::Stat => "stat",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "param" => RowKind::Param,
            "threshold" => RowKind::Threshold,
            "trial" => RowKind::Trial,
            "stat" => RowKind::Stat,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub kind: RowKind,
    pub name: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suite: String,
    pub rows: Vec<Row>,
    pub passed: bool,
    pub notes: Vec<String>,
}

pub const REPORT_HEADER: &str = "suite,kind,name,index,value";

impl VerifyReport {
    pub(crate) fn new(suite: &str) -> Self {
        Self { suite: suite.to_string(), rows: Vec::new(), passed: false, notes: Vec::new() }
    }

    pub(crate) fn push(&mut self, kind: RowKind, name: &str, index: usize, value: f64) {
        self.rows.push(Row { kind, name: name.to_string(), index, value });
    }

    pub(crate) fn param(&mut self, name: &str, value: f64) {
        self.push(RowKind::Param, name, 0, value);
    }

    pub(crate) fn threshold(&mut self, name: &str, value: f64) {
        self.push(RowKind::Threshold, name, 0, value);
    }

    pub(crate) fn stat(&mut self, name: &str, value: f64) {
        self.push(RowKind::Stat, name, 0, value);
    }

    /// First row of the given kind and name.
    pub fn get(&self, kind: RowKind, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.kind == kind && r.name == name).map(|r| r.value)
    }

    pub(crate) fn need(&self, kind: RowKind, name: &str) -> Result<f64> {
        self.get(kind, name)
            .ok_or_else(|| Error::Format(format!("{} report lacks {} '{name}'", self.suite, kind.as_str())))
    }

    /// All rows of one kind and name, ordered by index.
    pub fn series(&self, kind: RowKind, name: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> =
            self.rows.iter().filter(|r| r.kind == kind && r.name == name).map(|r| (r.index, r.value)).collect();
        v.sort_by_key(|&(i, _)| i);
        v
    }

    /// Recomputes the verdict and notes from the recorded rows.
    pub fn rejudge(&mut self) -> Result<()> {
        let (passed, notes) = match self.suite.as_str() {
            "jl" => jl::judge(self)?,
            "unbiased" => estimator::judge_unbiased(self)?,
            "tail" => estimator::judge_tail(self)?,
            "scaling" => scaling::judge(self)?,
            "argmin" => argmin::judge(self)?,
            other => return Err(Error::Format(format!("unknown suite '{other}'"))),
        };
        self.passed = passed;
        self.notes = notes;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            // `{:?}` on f64 prints the shortest string that parses back exactly
            let _ = writeln!(s, "{},{},{},{},{:?}", self.suite, r.kind.as_str(), r.name, r.index, r.value);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format(format!("report must start with '{REPORT_HEADER}'")));
        }
        let mut suite: Option<String> = None;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("report line {}: '{line}'", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [s, kind, name, index, value] = f[..] else { return Err(bad()) };
            match &suite {
                Some(prev) if prev != s => return Err(bad()),
                None => suite = Some(s.to_string()),
                _ => {}
            }
            rows.push(Row {
                kind: RowKind::parse(kind).ok_or_else(bad)?,
                name: name.to_string(),
                index: index.parse().map_err(|_| bad())?,
                value: value.parse().map_err(|_| bad())?,
            });
        }
        let mut report = Self { suite: suite.ok_or_else(|| Error::Format("empty report".into()))?, rows, passed: false, notes: Vec::new() };
        report.rejudge()?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// One-line human verdict.
    pub fn summary(&self) -> String {
        let mut s = format!("{}: {}", self.suite, if self.passed { "PASS" } else { "FAIL" });
        for n in &self.notes {
            s.push_str("; ");
            s.push_str(n);
        }
        s
    }
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n x c` matrix of Gaussian rows scaled to unit length.
pub(crate) fn random_unit_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    normalize_rows(&Tensor::randn(&[n, c], 1.0, rng))
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_slope(&lx, &ly)
}
