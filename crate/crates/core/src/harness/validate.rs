use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{DataConfig, ExperimentConfig};
use super::output::fmt_f64;
use super::sweep::Problem;
use crate::detequiv::{self, Prediction};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::linalg::{self, Mat};
use crate::ridge;

/// Error magnitudes of one quantity at n and 4n.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidateItem {
    pub quantity: &'static str,
    pub n_small: usize,
    pub n_large: usize,
    pub p_small: usize,
    pub p_large: usize,
    /// Root mean square over replicates of the gap to the equivalent
    /// (for `g_concentration`, the standard deviation of G).
    pub err_small: f64,
    pub err_large: f64,
    /// |replicate mean − equivalent|.
    pub mean_err_small: f64,
    pub mean_err_large: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidateReport {
    pub items: Vec<ValidateItem>,
    /// Worst relative error of the ξ finite-difference identity.
    pub fd_rel_error: f64,
    pub fp_converged: bool,
}

impl ValidateReport {
    pub fn item(&self, name: &str) -> Option<&ValidateItem> {
        self.items.iter().find(|i| i.quantity == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,n_small,n_large,p_small,p_large,err_small,err_large,mean_err_small,mean_err_large,ratio\n");
        for i in &self.items {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                i.quantity,
                i.n_small,
                i.n_large,
                i.p_small,
                i.p_large,
                fmt_f64(i.err_small),
                fmt_f64(i.err_large),
                fmt_f64(i.mean_err_small),
                fmt_f64(i.mean_err_large),
                fmt_f64(i.ratio)
            ));
        }
        let nan = fmt_f64(f64::NAN);
        s.push_str(&format!(
            "fd_identity,,,,,{},{nan},{nan},{nan},{nan}\n",
            fmt_f64(self.fd_rel_error)
        ));
        s
    }
}

fn scale_features(f: &FeatureSpec, k: usize) -> FeatureSpec {
    match f {
        FeatureSpec::Identity {} => FeatureSpec::Identity {},
        FeatureSpec::RandomMlp {
            hidden_sizes,
            activation,
            seed,
            output_dim,
        } => FeatureSpec::RandomMlp {
            hidden_sizes: hidden_sizes.iter().map(|h| h * k).collect(),
            activation: *activation,
            seed: *seed,
            output_dim: output_dim * k,
        },
    }
}

/// The same problem with d, p, n (and hidden widths) multiplied by `k`.
pub fn scaled_config(cfg: &ExperimentConfig, k: usize) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let DataConfig::Synthetic(s) = &mut c.data else {
        return Err(Error::Config(
            "validate needs a synthetic data source".into(),
        ));
    };
    let p0 = cfg.features.build(s.d)?.output_dim();
    let n0 = cfg.n_values(p0)[0];
    s.d *= k;
    s.n = n0 * k;
    s.truth_map = scale_features(&s.truth_map, k);
    c.features = scale_features(&cfg.features, k);
    c.grid.n_values = vec![n0 * k];
    c.grid.aspect_ratios.clear();
    c.mc.test_size = 0;
    Ok(c)
}

struct Scale {
    n: usize,
    p: usize,
    resolvent: Vec<f64>,
    linear: Vec<f64>,
    chi: Vec<f64>,
    g: Vec<f64>,
    fd: f64,
    converged: bool,
}

fn run_scale(cfg: &ExperimentConfig, fd_checks: usize) -> Result<Scale> {
    let problem = Problem::synthetic(cfg)?;
    let (alpha, lambda) = (cfg.grid.alphas[0], cfg.grid.lambdas[0]);
    let n = cfg.grid.n_values[0];
    let p = problem.p();
    let ms = &problem.ms;
    let Prediction { state, report, .. } = detequiv::predict(
        ms,
        problem.truth(),
        problem.sigma2,
        alpha,
        lambda,
        n as f64,
        &cfg.tolerances.fixed_point(),
        cfg.tolerances.closure,
    )?;
    let a = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let r_bar_aa = a.dot(&(&state.r_bar * &a));
    let lin_bar = a.dot(&report.theta_bar.column(0));
    let step = cfg.tolerances.fd_step;
    let per = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64, f64, f64, f64)> {
            let train = problem.training_set(n, r, cfg.seed)?;
            let design = problem.design(&train, cfg.mc.n_mc_aug, r, cfg.seed)?;
            let m = design.mixed_covariance(alpha) + Mat::identity(p, p) * lambda;
            let chol = linalg::spd_factor(&m, "validation resolvent")?;
            let ra = chol.solve(&a);
            let theta = chol.solve(&design.h_alpha(alpha));
            let (g, _, chi) = problem.evaluate(&theta)?;
            let fd = if r < fd_checks {
                let d = ridge::xi_derivative_fd(&design, alpha, lambda, &ms.sigma, step)?;
                let want = -(theta.transpose() * &ms.sigma * &theta);
                (0..d.nrows())
                    .map(|j| ((d[(j, j)] - want[(j, j)]) / want[(j, j)]).abs())
                    .fold(0.0, f64::max)
            } else {
                0.0
            };
            Ok((
                a.dot(&ra) - r_bar_aa,
                a.dot(&theta.column(0)) - lin_bar,
                chi - report.chi_bar,
                g,
                fd,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scale {
        n,
        p,
        resolvent: per.iter().map(|v| v.0).collect(),
        linear: per.iter().map(|v| v.1).collect(),
        chi: per.iter().map(|v| v.2).collect(),
        g: per.iter().map(|v| v.3).collect(),
        fd: per.iter().map(|v| v.4).fold(0.0, f64::max),
        converged: state.converged,
    })
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64).sqrt()
}

/// Replicate gaps between empirical quantities and their equivalents at
/// n and at 4n (with d, p scaled alike), and the resulting shrink ratios.
/// Uses the first λ and α of the grid.
pub fn validate(cfg: &ExperimentConfig) -> Result<ValidateReport> {
    let small = run_scale(&scaled_config(cfg, 1)?, 20)?;
    let large = run_scale(&scaled_config(cfg, 4)?, 0)?;
    let item = |quantity, f: &dyn Fn(&Scale) -> f64, m: &dyn Fn(&Scale) -> f64| {
        let (es, el) = (f(&small), f(&large));
        ValidateItem {
            quantity,
            n_small: small.n,
            n_large: large.n,
            p_small: small.p,
            p_large: large.p,
            err_small: es,
            err_large: el,
            mean_err_small: m(&small),
            mean_err_large: m(&large),
            ratio: es / el,
        }
    };
    let items = vec![
        item("resolvent_trace", &|s| rms(&s.resolvent), &|s| {
            mean(&s.resolvent).abs()
        }),
        item("theta_linear", &|s| rms(&s.linear), &|s| {
            mean(&s.linear).abs()
        }),
        item("chi", &|s| rms(&s.chi), &|s| mean(&s.chi).abs()),
        item("g_concentration", &|s| std(&s.g), &|s| mean(&s.g)),
    ];
    Ok(ValidateReport {
        items,
        fd_rel_error: small.fd,
        fp_converged: small.converged && large.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_multiplies_dimensions() {
        let c = ExperimentConfig::from_json(
            r#"{"data": {"synthetic": {"d": 10, "n": 20, "rotation_seed": 1,
                 "truth_map": {"kind": "identity"}, "theta_star": {"kind": "ones"}, "noise_sigma2": 0.5}},
                "features": {"kind": "random-mlp", "hidden_sizes": [6], "output_dim": 5, "seed": 1},
                "grid": {"lambdas": [0.5], "alphas": [0.5], "aspect_ratios": [0.25]}}"#,
        )
        .unwrap();
        let s = scaled_config(&c, 4).unwrap();
        let DataConfig::Synthetic(spec) = &s.data else {
            unreachable!()
        };
        assert_eq!(
            (spec.d, spec.n, s.grid.n_values.clone()),
            (40, 80, vec![80])
        );
        assert_eq!(
            s.features,
            FeatureSpec::RandomMlp {
                hidden_sizes: vec![24],
                activation: Default::default(),
                seed: 1,
                output_dim: 20
            }
        );
    }

    #[test]
    fn small_report_is_finite() {
        let c = ExperimentConfig::from_json(
            r#"{"data": {"synthetic": {"d": 8, "n": 16, "rotation_seed": 1, "spectrum": {"kind": "linear", "lo": 0.5, "hi": 1.5},
                 "truth_map": {"kind": "identity"}, "theta_star": {"kind": "ones"}, "noise_sigma2": 0.5}},
                "features": {"kind": "identity"},
                "scheme": {"kind": "masking", "keep_prob": 0.7},
                "grid": {"lambdas": [0.5], "alphas": [0.5]}, "replicates": 30}"#,
        )
        .unwrap();
        let r = validate(&c).unwrap();
        assert_eq!(r.items.len(), 4);
        assert!(r.fp_converged);
        assert!(r
            .items
            .iter()
            .all(|i| i.ratio.is_finite() && i.err_small > 0.0));
        assert!(r.fd_rel_error < 1e-3);
        assert_eq!(r.to_csv().lines().count(), 6);
    }
}
