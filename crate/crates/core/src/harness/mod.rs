//! Experiment orchestration: sweeps, bias–variance, validation, the
//! inpainting pipeline and their CSV output.

pub mod config;
pub mod mnist;
pub mod output;
pub mod sweep;
pub mod validate;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use output::ResultRow;
pub use sweep::{bias_variance_sweep, run_sweep, SweepOrder, SweepResult};
pub use validate::{validate, ValidateReport};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SweepLambda,
    SweepAlpha,
    SweepAspect,
    BiasVariance,
    Validate,
    Mnist,
}

impl Command {
    pub fn file_stem(&self) -> &'static str {
        match self {
            Command::SweepLambda => "sweep_lambda",
            Command::SweepAlpha => "sweep_alpha",
            Command::SweepAspect => "sweep_aspect",
            Command::BiasVariance => "bias_variance",
            Command::Validate => "validate",
            Command::Mnist => "mnist",
        }
    }
}

fn meta_json(
    cfg: &ExperimentConfig,
    cmd: Command,
    res: Option<&SweepResult>,
    extra: serde_json::Value,
) -> String {
    let mut v = serde_json::json!({
        "command": cmd.file_stem(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
    });
    if let Some(r) = res {
        v["risk_method"] = r.risk_method.as_str().into();
        v["non_converged_cells"] = r.rows.iter().filter(|row| !row.fp_converged).count().into();
        v["g_se"] = r.errors.iter().map(|e| e.g_se).collect::<Vec<_>>().into();
        v["var_emp_se"] = r
            .errors
            .iter()
            .map(|e| {
                if e.var_se.is_finite() {
                    e.var_se.into()
                } else {
                    serde_json::Value::Null
                }
            })
            .collect::<Vec<serde_json::Value>>()
            .into();
    }
    if let serde_json::Value::Object(m) = extra {
        for (k, x) in m {
            v[k] = x;
        }
    }
    serde_json::to_string_pretty(&v).expect("metadata serializes")
}

fn write_sweep(
    out_dir: &Path,
    stem: &str,
    cfg: &ExperimentConfig,
    cmd: Command,
    res: &SweepResult,
    extra: serde_json::Value,
) -> Result<Vec<PathBuf>> {
    let csv = out_dir.join(format!("{stem}.csv"));
    let meta = out_dir.join(format!("{stem}.meta.json"));
    output::write_results(&csv, &res.rows)?;
    output::write_text(&meta, &meta_json(cfg, cmd, Some(res), extra))?;
    Ok(vec![csv, meta])
}

/// Runs one subcommand and writes its CSV (and a metadata sidecar) to
/// `out_dir`. Returns the written paths.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = cmd.file_stem();
    let none = serde_json::json!({});
    match cmd {
        Command::SweepLambda | Command::SweepAlpha | Command::SweepAspect => {
            let order = match cmd {
                Command::SweepLambda => SweepOrder::Lambda,
                Command::SweepAlpha => SweepOrder::Alpha,
                _ => SweepOrder::Aspect,
            };
            write_sweep(out_dir, stem, cfg, cmd, &run_sweep(cfg, order)?, none)
        }
        Command::BiasVariance => {
            write_sweep(out_dir, stem, cfg, cmd, &bias_variance_sweep(cfg)?, none)
        }
        Command::Validate => {
            let rep = validate(cfg)?;
            let csv = out_dir.join(format!("{stem}.csv"));
            let meta = out_dir.join(format!("{stem}.meta.json"));
            output::write_text(&csv, &rep.to_csv())?;
            output::write_text(
                &meta,
                &meta_json(
                    cfg,
                    cmd,
                    None,
                    serde_json::json!({"fp_converged": rep.fp_converged}),
                ),
            )?;
            Ok(vec![csv, meta])
        }
        Command::Mnist => {
            let mut paths = Vec::new();
            for (i, run) in mnist::mnist_pipeline(cfg)?.iter().enumerate() {
                let name = format!("{stem}_{i}_{}", mnist::scheme_tag(&run.scheme));
                let extra = serde_json::json!({
                    "scheme": serde_json::to_value(&run.scheme).expect("scheme serializes"),
                    "coordinatewise_gap": run.coordinatewise_gap,
                });
                paths.extend(write_sweep(out_dir, &name, cfg, cmd, &run.result, extra)?);
            }
            Ok(paths)
        }
    }
}

/// Runs `f` on a pool of `workers` threads (0 keeps the global pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}
