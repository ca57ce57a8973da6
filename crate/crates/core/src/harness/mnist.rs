use std::path::Path;

use super::config::{DataConfig, ExperimentConfig, MnistConfig};
use super::sweep::{sweep_problem, Problem, Source, SweepOrder, SweepResult};
use crate::datasets::{self, Dataset, InpaintingTask};
use crate::error::{Error, Result};
use crate::moments::{self, DataSource};
use crate::ridge;
use crate::schemes::Scheme;

#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub scheme: Scheme,
    pub result: SweepResult,
    /// Joint fit against per-output fits on the first training set.
    pub coordinatewise_gap: f64,
}

fn load_task(path: &Path, patch: usize, cap: Option<usize>) -> Result<InpaintingTask> {
    let mut images = datasets::mnist_load(path)?;
    if let Some(m) = cap {
        if m < images.count {
            images.pixels.truncate(m * images.rows * images.cols);
            images.count = m;
        }
    }
    datasets::inpainting_task_any(&images, patch)
}

/// Training pool and test set of the inpainting task.
pub fn load_inpainting(m: &MnistConfig, test_size: usize) -> Result<(Dataset, Dataset)> {
    let train = load_task(&m.train_images, m.patch_size, m.max_train)?.dataset();
    match &m.test_images {
        Some(p) => {
            let mut test = load_task(p, m.patch_size, None)?.dataset();
            if test_size > 0 && test_size < test.n() {
                test = test.select(&(0..test_size).collect::<Vec<_>>());
            }
            Ok((train, test))
        }
        None => {
            let n = train.n();
            if test_size >= n {
                return Err(Error::Config(format!(
                    "test_size {test_size} leaves no training images out of {n}"
                )));
            }
            let pool = train.select(&(0..n - test_size).collect::<Vec<_>>());
            let test = train.select(&(n - test_size..n).collect::<Vec<_>>());
            Ok((pool, test))
        }
    }
}

/// Inpainting sweep for every configured scheme. Moments come from the
/// whole training pool; training sets are subsamples of it.
pub fn mnist_pipeline(cfg: &ExperimentConfig) -> Result<Vec<SchemeRun>> {
    let DataConfig::Mnist(m) = &cfg.data else {
        return Err(Error::Config(
            "the mnist pipeline needs an mnist data source".into(),
        ));
    };
    let (pool, test) = load_inpainting(m, cfg.mc.test_size)?;
    let phi = cfg.features.build(pool.x.nrows())?;
    log::info!(
        "inpainting task: d = {}, p = {}, q = {}, {} training images",
        pool.x.nrows(),
        phi.output_dim(),
        pool.y.nrows(),
        pool.n()
    );
    let mut out = Vec::new();
    for scheme in &m.schemes {
        let ms = moments::estimate_moment_set(
            &phi,
            scheme,
            DataSource::Fixed(&pool),
            cfg.mc.n_mc_data,
            cfg.mc.n_mc_aug,
            cfg.seed,
        )?;
        let problem = Problem::new(
            phi.clone(),
            scheme.clone(),
            ms,
            None,
            0.0,
            Source::Pool(pool.clone()),
            Some(test.clone()),
        )?;
        let n0 = cfg.n_values(problem.p())[0];
        let train = problem.training_set(n0, 0, cfg.seed)?;
        let design = problem.design(&train, cfg.mc.n_mc_aug, 0, cfg.seed)?;
        let gap = ridge::coordinatewise_gap(&design, cfg.grid.alphas[0], cfg.grid.lambdas[0])?;
        if gap > 1e-10 {
            log::warn!("joint and per-output fits differ by {gap:.3e}");
        }
        let result = sweep_problem(&problem, cfg, SweepOrder::Aspect)?;
        out.push(SchemeRun {
            scheme: scheme.clone(),
            result,
            coordinatewise_gap: gap,
        });
    }
    Ok(out)
}

/// Short file-name tag of a scheme.
pub fn scheme_tag(s: &Scheme) -> &'static str {
    match s {
        Scheme::Identity {} => "identity",
        Scheme::AdditiveNoise { .. } => "additive-noise",
        Scheme::Masking { .. } => "masking",
        Scheme::SaltPepper { .. } => "salt-pepper",
        Scheme::Heteroskedastic { .. } => "heteroskedastic",
        Scheme::Mixture { .. } => "mixture",
    }
}
