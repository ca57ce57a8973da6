use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One grid cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub lambda: f64,
    pub alpha: f64,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub aspect_ratio: f64,
    pub g_mean: f64,
    pub g_std: f64,
    pub overlap_mean: f64,
    pub overlap_std: f64,
    pub chi_mean: f64,
    pub chi_std: f64,
    pub bias2_emp: f64,
    pub var_emp: f64,
    pub g_det: f64,
    pub overlap_det: f64,
    pub chi_det: f64,
    pub bias2_det: f64,
    pub var_det: f64,
    pub beta: f64,
    pub delta: f64,
    pub fp_iterations: usize,
    pub fp_residual: f64,
    pub fp_converged: bool,
}

pub const RESULT_COLUMNS: [&str; 24] = [
    "lambda",
    "alpha",
    "n",
    "p",
    "d",
    "aspect_ratio",
    "g_mean",
    "g_std",
    "overlap_mean",
    "overlap_std",
    "chi_mean",
    "chi_std",
    "bias2_emp",
    "var_emp",
    "g_det",
    "overlap_det",
    "chi_det",
    "bias2_det",
    "var_det",
    "beta",
    "delta",
    "fp_iterations",
    "fp_residual",
    "fp_converged",
];

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},",
            fmt_f64(self.lambda),
            fmt_f64(self.alpha),
            self.n,
            self.p,
            self.d
        );
        for v in [
            self.aspect_ratio,
            self.g_mean,
            self.g_std,
            self.overlap_mean,
            self.overlap_std,
            self.chi_mean,
            self.chi_std,
            self.bias2_emp,
            self.var_emp,
            self.g_det,
            self.overlap_det,
            self.chi_det,
            self.bias2_det,
            self.var_det,
            self.beta,
            self.delta,
        ] {
            s.push_str(&fmt_f64(v));
            s.push(',');
        }
        let _ = write!(
            s,
            "{},{},{}",
            self.fp_iterations,
            fmt_f64(self.fp_residual),
            self.fp_converged
        );
        s
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = RESULT_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_text(path, &results_csv(rows))
}

/// Parses a results CSV back into rows.
pub fn read_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        offset: 0,
        message: "empty results file".into(),
    })?;
    if header != RESULT_COLUMNS.join(",") {
        return Err(Error::Format {
            offset: 0,
            message: "unexpected results header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let err = |m: &str| Error::Format {
            offset: i + 1,
            message: m.into(),
        };
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != RESULT_COLUMNS.len() {
            return Err(err("wrong column count"));
        }
        let f = |k: usize| c[k].parse::<f64>().map_err(|_| err("bad float"));
        let u = |k: usize| c[k].parse::<usize>().map_err(|_| err("bad integer"));
        rows.push(ResultRow {
            lambda: f(0)?,
            alpha: f(1)?,
            n: u(2)?,
            p: u(3)?,
            d: u(4)?,
            aspect_ratio: f(5)?,
            g_mean: f(6)?,
            g_std: f(7)?,
            overlap_mean: f(8)?,
            overlap_std: f(9)?,
            chi_mean: f(10)?,
            chi_std: f(11)?,
            bias2_emp: f(12)?,
            var_emp: f(13)?,
            g_det: f(14)?,
            overlap_det: f(15)?,
            chi_det: f(16)?,
            bias2_det: f(17)?,
            var_det: f(18)?,
            beta: f(19)?,
            delta: f(20)?,
            fp_iterations: u(21)?,
            fp_residual: f(22)?,
            fp_converged: c[23].parse::<bool>().map_err(|_| err("bad bool"))?,
        });
    }
    Ok(rows)
}
