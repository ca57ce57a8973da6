//! The empirical augmented ridge estimator and the quantities computed from it.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{self, Mat};
use crate::moments::{augment_dataset, AugmentationSummary, MomentSet, PerSampleMoments};
use crate::schemes::Scheme;

/// Second-order statistics of a training set together with its
/// augmentation moments, all normalized by 1/n.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDesign {
    /// n⁻¹ φ(X) φ(X)ᵀ
    pub c: Mat,
    /// n⁻¹ μx(Z) μx(Z)ᵀ
    pub c_prime: Mat,
    /// n⁻¹ φ(X) Yᵀ
    pub h: Mat,
    /// n⁻¹ μx(Z) μy(Z)ᵀ
    pub h_prime: Mat,
    pub lambda_emp: Mat,
    pub omega_emp: Mat,
    pub n: usize,
}

impl AugmentedDesign {
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn q(&self) -> usize {
        self.h.ncols()
    }

    /// From feature columns φ(X) (p×n), labels Y (q×n) and the augmentation summary.
    pub fn from_summary(y: &Mat, s: &AugmentationSummary) -> Result<Self> {
        let n = s.phi.ncols();
        if n == 0 {
            return Err(Error::EmptyInput("design needs n >= 1".into()));
        }
        if y.ncols() != n || s.mu_x.shape() != s.phi.shape() || s.mu_y.shape() != y.shape() {
            return Err(Error::dim("design blocks have inconsistent shapes"));
        }
        let nf = n as f64;
        let mut c = &s.phi * s.phi.transpose() / nf;
        let mut c_prime = &s.mu_x * s.mu_x.transpose() / nf;
        let mut lambda_emp = s.lambda_mean.clone();
        linalg::symmetrize_in_place(&mut c);
        linalg::symmetrize_in_place(&mut c_prime);
        linalg::symmetrize_in_place(&mut lambda_emp);
        Ok(AugmentedDesign {
            c,
            c_prime,
            h: &s.phi * y.transpose() / nf,
            h_prime: &s.mu_x * s.mu_y.transpose() / nf,
            lambda_emp,
            omega_emp: s.omega_mean.clone(),
            n,
        })
    }

    /// Augment (X, Y) with `scheme` under `map` and assemble the design.
    pub fn build(
        scheme: &Scheme,
        map: &FeatureMap,
        x: &Mat,
        y: &Mat,
        n_mc: usize,
        seed: u64,
    ) -> Result<Self> {
        let s = augment_dataset(scheme, map, x, y, n_mc, seed)?;
        Self::from_summary(y, &s)
    }

    /// (1−α)C + αC′ + αΛ(Z)
    pub fn mixed_covariance(&self, alpha: f64) -> Mat {
        &self.c * (1.0 - alpha) + (&self.c_prime + &self.lambda_emp) * alpha
    }

    /// Hα = (1−α)H + αH′ + αΩ(Z)
    pub fn h_alpha(&self, alpha: f64) -> Mat {
        &self.h * (1.0 - alpha) + (&self.h_prime + &self.omega_emp) * alpha
    }
}

/// Assembles the design from a feature map, data and per-sample moments.
pub fn assemble_design(
    x: &Mat,
    y: &Mat,
    map: &FeatureMap,
    moments: &[PerSampleMoments],
) -> Result<AugmentedDesign> {
    let n = x.ncols();
    if moments.len() != n || y.ncols() != n {
        return Err(Error::dim(format!(
            "{} samples in X, {} in Y, {} moment records",
            n,
            y.ncols(),
            moments.len()
        )));
    }
    let (lambda_mean, omega_mean) = crate::moments::empirical_lambda_omega(moments)?;
    let p = map.output_dim();
    let q = y.nrows();
    let mut mu_x = Mat::zeros(p, n);
    let mut mu_y = Mat::zeros(q, n);
    for (i, m) in moments.iter().enumerate() {
        if m.mu_x.len() != p || m.mu_y.len() != q {
            return Err(Error::dim(format!(
                "moment record {i} has wrong dimensions"
            )));
        }
        mu_x.set_column(i, &m.mu_x);
        mu_y.set_column(i, &m.mu_y);
    }
    let s = AugmentationSummary {
        phi: map.apply_matrix(x)?,
        mu_x,
        mu_y,
        lambda_mean,
        omega_mean,
    };
    AugmentedDesign::from_summary(y, &s)
}

fn check_alpha_lambda(alpha: f64, lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("lambda must be > 0, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    /// p×q, one column per output.
    pub theta_hat: Mat,
    pub alpha: f64,
    pub lambda: f64,
    /// ‖M θ̂ − Hα‖_F / ‖Hα‖_F for the normal equations M θ̂ = Hα.
    pub relative_residual: f64,
}

/// θ̂ = ((1−α)C + αC′ + αΛ(Z) + λI)⁻¹ Hα, one factorization for all outputs.
pub fn fit(design: &AugmentedDesign, alpha: f64, lambda: f64) -> Result<RidgeFit> {
    check_alpha_lambda(alpha, lambda)?;
    let p = design.p();
    let m = design.mixed_covariance(alpha) + Mat::identity(p, p) * lambda;
    let chol = linalg::spd_factor(&m, "augmented ridge system is not positive definite")?;
    let h = design.h_alpha(alpha);
    let theta_hat = chol.solve(&h);
    let hn = h.norm();
    let relative_residual = if hn > 0.0 {
        (&m * &theta_hat - &h).norm() / hn
    } else {
        0.0
    };
    Ok(RidgeFit {
        theta_hat,
        alpha,
        lambda,
        relative_residual,
    })
}

/// Largest entrywise gap between the joint fit and q separate scalar-output fits.
pub fn coordinatewise_gap(design: &AugmentedDesign, alpha: f64, lambda: f64) -> Result<f64> {
    let joint = fit(design, alpha, lambda)?;
    let mut gap: f64 = 0.0;
    for j in 0..design.q() {
        let single = AugmentedDesign {
            h: design.h.columns(j, 1).into_owned(),
            h_prime: design.h_prime.columns(j, 1).into_owned(),
            omega_emp: design.omega_emp.columns(j, 1).into_owned(),
            ..design.clone()
        };
        let t = fit(&single, alpha, lambda)?.theta_hat;
        gap = gap.max(linalg::max_abs_diff(
            &t,
            &joint.theta_hat.columns(j, 1).into_owned(),
        ));
    }
    Ok(gap)
}

/// Rα,λ(ζ) = ((1−α)C + αC′ + αΛ(Z) + λI + ζΣ)⁻¹.
pub fn resolvent_shifted(
    design: &AugmentedDesign,
    alpha: f64,
    lambda: f64,
    zeta: f64,
    sigma: &Mat,
) -> Result<Mat> {
    check_alpha_lambda(alpha, lambda)?;
    let p = design.p();
    if sigma.shape() != (p, p) {
        return Err(Error::dim("shift matrix must be p×p"));
    }
    let m = design.mixed_covariance(alpha) + Mat::identity(p, p) * lambda + sigma * zeta;
    Ok(linalg::spd_factor(&m, "shifted resolvent argument is not positive definite")?.inverse())
}

/// ξ(ζ) = Hαᵀ Rα,λ(ζ) Hα (q×q).
pub fn xi_statistic(
    design: &AugmentedDesign,
    alpha: f64,
    lambda: f64,
    zeta: f64,
    sigma: &Mat,
) -> Result<Mat> {
    check_alpha_lambda(alpha, lambda)?;
    let p = design.p();
    if sigma.shape() != (p, p) {
        return Err(Error::dim("shift matrix must be p×p"));
    }
    let m = design.mixed_covariance(alpha) + Mat::identity(p, p) * lambda + sigma * zeta;
    let chol = linalg::spd_factor(&m, "shifted resolvent argument is not positive definite")?;
    let h = design.h_alpha(alpha);
    Ok(h.transpose() * chol.solve(&h))
}

/// Central difference (ξ(h) − ξ(−h)) / 2h at ζ = 0, q×q.
pub fn xi_derivative_fd(
    design: &AugmentedDesign,
    alpha: f64,
    lambda: f64,
    sigma: &Mat,
    h: f64,
) -> Result<Mat> {
    let plus = xi_statistic(design, alpha, lambda, h, sigma)?;
    let minus = xi_statistic(design, alpha, lambda, -h, sigma)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Mean over test pairs and outputs of (φ(x)ᵀθ̂ⱼ − yⱼ)².
pub fn empirical_generalization(
    fit: &RidgeFit,
    test_x: &Mat,
    test_y: &Mat,
    map: &FeatureMap,
) -> Result<f64> {
    let n = test_x.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    if test_y.ncols() != n || test_y.nrows() != fit.theta_hat.ncols() {
        return Err(Error::dim("test labels do not match the fit"));
    }
    let pred = fit.theta_hat.transpose() * map.apply_matrix(test_x)?;
    Ok((pred - test_y).norm_squared() / (n * test_y.nrows()) as f64)
}

/// Per-output population risk terms, averaged over outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationRisk {
    /// θ̂ᵀΣθ̂ − 2θ⋆ᵀΣ⋆θ̂ + θ⋆ᵀΣ⋆⋆θ⋆ + σ²
    pub g: f64,
    /// θ⋆ᵀΣ⋆θ̂
    pub overlap: f64,
    /// θ̂ᵀΣθ̂
    pub chi: f64,
    /// θ⋆ᵀΣ⋆⋆θ⋆
    pub signal: f64,
}

/// Expanded risk of a fitted θ̂ (p×q) against θ⋆ (p⋆×q).
pub fn population_generalization(
    theta_hat: &Mat,
    ms: &MomentSet,
    theta_star: &Mat,
    sigma2: f64,
) -> Result<PopulationRisk> {
    let (ss, sss) = match (&ms.sigma_star, &ms.sigma_star_star) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::UnsupportedInPluginMode(
                "population risk needs SigmaStar blocks; use a held-out test set".into(),
            ))
        }
    };
    let q = theta_hat.ncols();
    if theta_star.ncols() != q || theta_star.nrows() != sss.nrows() || theta_hat.nrows() != ms.p() {
        return Err(Error::dim("theta shapes do not match the moment set"));
    }
    let mut out = PopulationRisk {
        g: 0.0,
        overlap: 0.0,
        chi: 0.0,
        signal: 0.0,
    };
    for j in 0..q {
        let th = theta_hat.column(j);
        let ts = theta_star.column(j);
        let chi = th.dot(&(&ms.sigma * th));
        let overlap = ts.dot(&(ss * th));
        let signal = ts.dot(&(sss * ts));
        out.chi += chi;
        out.overlap += overlap;
        out.signal += signal;
        out.g += chi - 2.0 * overlap + signal + sigma2;
    }
    let qf = q as f64;
    out.g /= qf;
    out.chi /= qf;
    out.overlap /= qf;
    out.signal /= qf;
    Ok(out)
}

impl RidgeFit {
    pub fn population_risk(
        &self,
        ms: &MomentSet,
        theta_star: &Mat,
        sigma2: f64,
    ) -> Result<PopulationRisk> {
        population_generalization(&self.theta_hat, ms, theta_star, sigma2)
    }
}
