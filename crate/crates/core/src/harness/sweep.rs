use rand::seq::index;
use rayon::prelude::*;

use super::config::{DataConfig, ExperimentConfig};
use super::output::ResultRow;
use crate::datasets::{Dataset, SyntheticModel};
use crate::detequiv::{self, Prediction, Truth};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::Mat;
use crate::moments::{self, DataSource, MomentSet};
use crate::ridge::{self, AugmentedDesign};
use crate::rng::{self, domain};
use crate::schemes::Scheme;

/// How the empirical risk of each fit is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskMethod {
    /// Expanded quadratic form against the moment set's truth blocks.
    Population,
    /// Mean squared error on a held-out test set.
    TestSet,
}

impl RiskMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RiskMethod::Population => "population",
            RiskMethod::TestSet => "test-set",
        }
    }
}

/// Where training sets are drawn from.
#[derive(Clone, Debug)]
pub enum Source {
    Synthetic(SyntheticModel),
    /// Training sets are subsampled without replacement from a fixed pool.
    Pool(Dataset),
}

/// Everything a sweep needs besides the grid.
#[derive(Clone, Debug)]
pub struct Problem {
    pub phi: FeatureMap,
    pub scheme: Scheme,
    pub ms: MomentSet,
    /// θ⋆ as p⋆×q; `None` in plugin mode.
    pub theta_star: Option<Mat>,
    pub sigma2: f64,
    pub source: Source,
    pub test: Option<Dataset>,
    test_phi: Option<Mat>,
}

impl Problem {
    pub fn new(
        phi: FeatureMap,
        scheme: Scheme,
        ms: MomentSet,
        theta_star: Option<Mat>,
        sigma2: f64,
        source: Source,
        test: Option<Dataset>,
    ) -> Result<Self> {
        ms.check()?;
        if ms.p() != phi.output_dim() {
            return Err(Error::dim("moment set and feature map disagree on p"));
        }
        if theta_star.is_some() && ms.sigma_star.is_none() {
            return Err(Error::UnsupportedInPluginMode(
                "a known theta_star needs SigmaStar blocks".into(),
            ));
        }
        if theta_star.is_none() && test.is_none() {
            return Err(Error::Config(
                "plugin-mode problems need a held-out test set".into(),
            ));
        }
        let test_phi = test.as_ref().map(|t| phi.apply_matrix(&t.x)).transpose()?;
        Ok(Problem {
            phi,
            scheme,
            ms,
            theta_star,
            sigma2,
            source,
            test,
            test_phi,
        })
    }

    /// Synthetic problem from a config. Closed-form moments are used when
    /// both feature maps are the identity; otherwise they are estimated.
    pub fn synthetic(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = match &cfg.data {
            DataConfig::Synthetic(s) => s,
            DataConfig::Mnist(_) => {
                return Err(Error::Config("expected a synthetic data source".into()))
            }
        };
        let model = SyntheticModel::new(spec)?;
        let phi = cfg.features.build(spec.d)?;
        let theta = model.theta_matrix();
        let ms = if phi.is_identity() && model.truth_map.is_identity() {
            moments::closed_form_moment_set(
                &model.covariance(),
                &theta,
                spec.noise_sigma2,
                &cfg.scheme,
            )?
        } else {
            moments::estimate_moment_set(
                &phi,
                &cfg.scheme,
                DataSource::Synthetic(&model),
                cfg.mc.n_mc_data,
                cfg.mc.n_mc_aug,
                cfg.seed,
            )?
        };
        let test = if cfg.mc.test_size > 0 {
            Some(model.sample(
                cfg.mc.test_size,
                &mut rng::substream(cfg.seed, domain::TEST_SET, 0),
            )?)
        } else {
            None
        };
        Problem::new(
            phi,
            cfg.scheme.clone(),
            ms,
            Some(theta),
            spec.noise_sigma2,
            Source::Synthetic(model),
            test,
        )
    }

    pub fn p(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn d(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn risk_method(&self) -> RiskMethod {
        if self.test.is_some() {
            RiskMethod::TestSet
        } else {
            RiskMethod::Population
        }
    }

    pub fn truth(&self) -> Truth<'_> {
        match &self.theta_star {
            Some(t) => Truth::Known(t),
            None => Truth::Plugin,
        }
    }

    /// Training set `r` of size `n`.
    pub fn training_set(&self, n: usize, r: usize, seed: u64) -> Result<Dataset> {
        let mut g = rng::substream(
            rng::derive_seed(seed, domain::REPLICATE, n as u64),
            domain::DATA,
            r as u64,
        );
        match &self.source {
            Source::Synthetic(m) => m.sample(n, &mut g),
            Source::Pool(ds) => {
                if n > ds.n() {
                    return Err(Error::InsufficientSamples {
                        needed: n,
                        got: ds.n(),
                    });
                }
                Ok(ds.select(&index::sample(&mut g, ds.n(), n).into_vec()))
            }
        }
    }

    pub fn design(
        &self,
        train: &Dataset,
        n_mc_aug: usize,
        r: usize,
        seed: u64,
    ) -> Result<AugmentedDesign> {
        let aug = rng::derive_seed(
            rng::derive_seed(seed, domain::REPLICATE, train.n() as u64),
            domain::MOMENTS,
            r as u64,
        );
        AugmentedDesign::build(&self.scheme, &self.phi, &train.x, &train.y, n_mc_aug, aug)
    }

    /// θ⋆ᵀΣ⋆θ per output, or G₁ᵀθ in plugin mode; averaged.
    pub fn overlap(&self, theta: &Mat) -> f64 {
        let q = theta.ncols();
        let mut acc = 0.0;
        for j in 0..q {
            let t = theta.column(j);
            acc += match (&self.theta_star, &self.ms.sigma_star) {
                (Some(ts), Some(ss)) => ts.column(j).dot(&(ss * t)),
                _ => self.ms.g1.column(j).dot(&t),
            };
        }
        acc / q as f64
    }

    /// θᵀΣθ averaged over outputs.
    pub fn chi(&self, theta: &Mat) -> f64 {
        let q = theta.ncols();
        (0..q)
            .map(|j| theta.column(j).dot(&(&self.ms.sigma * theta.column(j))))
            .sum::<f64>()
            / q as f64
    }

    /// θ⋆ᵀΣ⋆⋆θ⋆, or E[Y²] − σ² in plugin mode; averaged.
    pub fn signal(&self) -> f64 {
        let q = self.ms.q();
        let s: f64 = match (&self.theta_star, &self.ms.sigma_star_star) {
            (Some(ts), Some(sss)) => (0..q)
                .map(|j| ts.column(j).dot(&(sss * ts.column(j))))
                .sum(),
            _ => self.ms.psi.iter().map(|m| m[(0, 0)] - self.sigma2).sum(),
        };
        s / q as f64
    }

    /// (G, overlap, χ) of one fitted θ̂.
    pub fn evaluate(&self, theta: &Mat) -> Result<(f64, f64, f64)> {
        let overlap = self.overlap(theta);
        let chi = self.chi(theta);
        let g = match (&self.test, &self.test_phi) {
            (Some(t), Some(tp)) => {
                let pred = theta.transpose() * tp;
                (pred - &t.y).norm_squared() / (t.y.len() as f64)
            }
            _ => chi - 2.0 * overlap + self.signal() + self.sigma2,
        };
        Ok((g, overlap, chi))
    }

    /// Bias² of a mean estimator.
    pub fn bias2(&self, theta_mean: &Mat) -> f64 {
        self.chi(theta_mean) + self.signal() - 2.0 * self.overlap(theta_mean)
    }
}

/// Row ordering of a sweep; the grid itself is always the full product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepOrder {
    /// n, then α, then λ fastest.
    Lambda,
    /// n, then λ, then α fastest.
    Alpha,
    /// α, then λ, then n fastest.
    Aspect,
}

/// Standard errors that do not fit the CSV schema.
#[derive(Clone, Debug, PartialEq)]
pub struct CellErrors {
    pub g_se: f64,
    pub overlap_se: f64,
    pub chi_se: f64,
    /// Jackknife over replicates; NaN when R < 2.
    pub bias2_se: f64,
    pub var_se: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    pub errors: Vec<CellErrors>,
    pub predictions: Vec<Prediction>,
    pub risk_method: RiskMethod,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

type Cell = (ResultRow, CellErrors, Prediction);

struct CellFits {
    g: Vec<f64>,
    overlap: Vec<f64>,
    chi: Vec<f64>,
    thetas: Vec<Mat>,
}

/// Jackknife of (bias², var) over replicates.
fn jackknife(problem: &Problem, fits: &CellFits, g_mean: f64) -> (f64, f64, f64, f64) {
    let r = fits.thetas.len();
    let mut sum = fits.thetas[0].clone() * 0.0;
    for t in &fits.thetas {
        sum += t;
    }
    let mean = &sum / r as f64;
    let bias2 = problem.bias2(&mean);
    let var = g_mean - bias2;
    if r < 2 {
        return (bias2, var, f64::NAN, f64::NAN);
    }
    let gsum: f64 = fits.g.iter().sum();
    let rf = r as f64;
    let (mut b_loo, mut v_loo) = (Vec::with_capacity(r), Vec::with_capacity(r));
    for (t, g) in fits.thetas.iter().zip(&fits.g) {
        let m = (&sum - t) / (rf - 1.0);
        let b = problem.bias2(&m);
        b_loo.push(b);
        v_loo.push((gsum - g) / (rf - 1.0) - b);
    }
    let jk = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / rf;
        ((rf - 1.0) / rf * v.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt()
    };
    (bias2, var, jk(&b_loo), jk(&v_loo))
}

/// Fits R replicates per training size over the whole (α, λ) grid with
/// common random numbers, and pairs each cell with its deterministic
/// prediction from the shared moment set.
pub fn sweep_problem(
    problem: &Problem,
    cfg: &ExperimentConfig,
    order: SweepOrder,
) -> Result<SweepResult> {
    let ns = cfg.n_values(problem.p());
    let (alphas, lambdas) = (&cfg.grid.alphas, &cfg.grid.lambdas);
    let reps = cfg.replicates;
    if reps == 1 {
        log::warn!("single replicate: empirical standard deviations are reported as 0");
    }
    let fp = cfg.tolerances.fixed_point();
    let closure = cfg.tolerances.closure;
    let cells: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|a| (0..lambdas.len()).map(move |l| (a, l)))
        .collect();
    let p = problem.p();

    // (n index, α index, λ index) → row
    let mut table: Vec<Vec<Vec<Option<Cell>>>> =
        vec![vec![vec![None; lambdas.len()]; alphas.len()]; ns.len()];
    for (ni, &n) in ns.iter().enumerate() {
        let preds = cells
            .par_iter()
            .map(|&(a, l)| {
                detequiv::predict(
                    &problem.ms,
                    problem.truth(),
                    problem.sigma2,
                    alphas[a],
                    lambdas[l],
                    n as f64,
                    &fp,
                    closure,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let per_rep = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<Vec<(f64, f64, f64, Mat)>> {
                let train = problem.training_set(n, r, cfg.seed)?;
                let design = problem.design(&train, cfg.mc.n_mc_aug, r, cfg.seed)?;
                cells
                    .iter()
                    .map(|&(a, l)| {
                        let f = ridge::fit(&design, alphas[a], lambdas[l])?;
                        let (g, o, c) = problem.evaluate(&f.theta_hat)?;
                        Ok((g, o, c, f.theta_hat))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        for (ci, (&(a, l), pred)) in cells.iter().zip(preds).enumerate() {
            let mut fits = CellFits {
                g: vec![],
                overlap: vec![],
                chi: vec![],
                thetas: vec![],
            };
            for rep in &per_rep {
                let (g, o, c, t) = &rep[ci];
                fits.g.push(*g);
                fits.overlap.push(*o);
                fits.chi.push(*c);
                fits.thetas.push(t.clone());
            }
            let (g_mean, g_std) = mean_std(&fits.g);
            let (overlap_mean, overlap_std) = mean_std(&fits.overlap);
            let (chi_mean, chi_std) = mean_std(&fits.chi);
            let (bias2_emp, var_emp, bias2_se, var_se) = jackknife(problem, &fits, g_mean);
            let rep_ = &pred.report;
            let row = ResultRow {
                lambda: lambdas[l],
                alpha: alphas[a],
                n,
                p,
                d: problem.d(),
                aspect_ratio: p as f64 / n as f64,
                g_mean,
                g_std,
                overlap_mean,
                overlap_std,
                chi_mean,
                chi_std,
                bias2_emp,
                var_emp,
                g_det: rep_.g_bar,
                overlap_det: rep_.overlap_bar,
                chi_det: rep_.chi_bar,
                bias2_det: rep_.bias2_bar,
                var_det: rep_.var_bar,
                beta: rep_.beta,
                delta: rep_.delta,
                fp_iterations: pred.state.iterations,
                fp_residual: pred.state.residual,
                fp_converged: pred.state.converged,
            };
            let sq = (reps as f64).sqrt();
            let errs = CellErrors {
                g_se: g_std / sq,
                overlap_se: overlap_std / sq,
                chi_se: chi_std / sq,
                bias2_se,
                var_se,
            };
            table[ni][a][l] = Some((row, errs, pred));
        }
    }
    let mut order_idx = Vec::new();
    match order {
        SweepOrder::Lambda => {
            for ni in 0..ns.len() {
                for a in 0..alphas.len() {
                    for l in 0..lambdas.len() {
                        order_idx.push((ni, a, l));
                    }
                }
            }
        }
        SweepOrder::Alpha => {
            for ni in 0..ns.len() {
                for l in 0..lambdas.len() {
                    for a in 0..alphas.len() {
                        order_idx.push((ni, a, l));
                    }
                }
            }
        }
        SweepOrder::Aspect => {
            for a in 0..alphas.len() {
                for l in 0..lambdas.len() {
                    for ni in 0..ns.len() {
                        order_idx.push((ni, a, l));
                    }
                }
            }
        }
    }
    let mut out = SweepResult {
        rows: vec![],
        errors: vec![],
        predictions: vec![],
        risk_method: problem.risk_method(),
    };
    for (ni, a, l) in order_idx {
        let (row, e, pr) = table[ni][a][l].take().expect("every cell is filled");
        out.rows.push(row);
        out.errors.push(e);
        out.predictions.push(pr);
    }
    Ok(out)
}

/// Sweep for a synthetic config.
pub fn run_sweep(cfg: &ExperimentConfig, order: SweepOrder) -> Result<SweepResult> {
    let problem = Problem::synthetic(cfg)?;
    sweep_problem(&problem, cfg, order)
}

/// Same sweep with the bias–variance split required: refuses R < 10.
pub fn bias_variance_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    if cfg.replicates < 10 {
        return Err(Error::Config(format!(
            "bias-variance needs at least 10 replicates to estimate E[theta_hat], got {}",
            cfg.replicates
        )));
    }
    run_sweep(cfg, SweepOrder::Aspect)
}
