//! Data-augmentation schemes: samplers for (τx, τy) and raw-space moments.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{serde_rows, Mat};
use crate::moments::{per_sample_moments, PerSampleMoments};
use crate::rng::{self, Rng};

/// Replacement noise of the salt-and-pepper scheme: masked coordinates are
/// replaced by the corresponding coordinates of `s·((1−m)⊙η)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Replacement {
    /// `s = scale·I`, so replaced entries have variance `scale²`.
    Isotropic { scale: f64 },
    /// Explicit d×d matrix `s`.
    Matrix {
        #[serde(with = "serde_rows")]
        s: Mat,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Scheme {
    /// τx = x, τy = y.
    Identity {},
    /// τx = x + σ·η with η standard Gaussian.
    AdditiveNoise { sigma_aug: f64 },
    /// τx = x ⊙ m with m i.i.d. Bernoulli(keep_prob); 1 means keep.
    Masking { keep_prob: f64 },
    /// τx = x ⊙ m + s((1−m) ⊙ η).
    SaltPepper {
        keep_prob: f64,
        replacement: Replacement,
    },
    /// τx = x + s_x η, τy = y + s_y η, η ~ N(0, I_k).
    Heteroskedastic {
        #[serde(with = "serde_rows")]
        s_x: Mat,
        #[serde(with = "serde_rows")]
        s_y: Mat,
    },
    /// Component J drawn with probabilities `weights` by inverse CDF.
    Mixture {
        components: Vec<Scheme>,
        weights: Vec<f64>,
    },
}

fn check_prob(name: &str, q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(Error::param(format!("{name} must lie in [0, 1], got {q}")));
    }
    Ok(())
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::param("mixture needs at least one component"));
    }
    for &v in w {
        check_prob("mixture weight", v)?;
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::param(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

impl Scheme {
    /// Checks parameters against the data dimensions (d inputs, q outputs).
    pub fn validate(&self, d: usize, q: usize) -> Result<()> {
        match self {
            Scheme::Identity {} => Ok(()),
            Scheme::AdditiveNoise { sigma_aug } => {
                if *sigma_aug < 0.0 || !sigma_aug.is_finite() {
                    return Err(Error::param(format!(
                        "sigma_aug must be >= 0, got {sigma_aug}"
                    )));
                }
                Ok(())
            }
            Scheme::Masking { keep_prob } => check_prob("keep_prob", *keep_prob),
            Scheme::SaltPepper {
                keep_prob,
                replacement,
            } => {
                check_prob("keep_prob", *keep_prob)?;
                match replacement {
                    Replacement::Isotropic { scale } if *scale < 0.0 || !scale.is_finite() => Err(
                        Error::param(format!("replacement scale must be >= 0, got {scale}")),
                    ),
                    Replacement::Matrix { s } if s.nrows() != d || s.ncols() != d => {
                        Err(Error::dim(format!(
                            "replacement matrix must be {d}x{d}, got {}x{}",
                            s.nrows(),
                            s.ncols()
                        )))
                    }
                    _ => Ok(()),
                }
            }
            Scheme::Heteroskedastic { s_x, s_y } => {
                if s_x.nrows() != d || s_y.nrows() != q || s_x.ncols() != s_y.ncols() {
                    return Err(Error::dim(format!(
                        "heteroskedastic maps must be {d}xk and {q}xk, got {}x{} and {}x{}",
                        s_x.nrows(),
                        s_x.ncols(),
                        s_y.nrows(),
                        s_y.ncols()
                    )));
                }
                Ok(())
            }
            Scheme::Mixture {
                components,
                weights,
            } => {
                if components.len() != weights.len() {
                    return Err(Error::param(
                        "mixture components and weights differ in length",
                    ));
                }
                check_weights(weights)?;
                components.iter().try_for_each(|c| c.validate(d, q))
            }
        }
    }

    /// True when τy(z, η) = y for every draw.
    pub fn is_label_preserving(&self) -> bool {
        match self {
            Scheme::Heteroskedastic { s_y, .. } => s_y.iter().all(|v| *v == 0.0),
            Scheme::Mixture { components, .. } => {
                components.iter().all(Scheme::is_label_preserving)
            }
            _ => true,
        }
    }

    /// True when augmentation leaves every sample unchanged.
    pub fn is_trivial(&self) -> bool {
        match self {
            Scheme::Identity {} => true,
            Scheme::AdditiveNoise { sigma_aug } => *sigma_aug == 0.0,
            Scheme::Masking { keep_prob } => *keep_prob == 1.0,
            Scheme::SaltPepper { keep_prob, .. } => *keep_prob == 1.0,
            Scheme::Heteroskedastic { s_x, s_y } => {
                s_x.iter().all(|v| *v == 0.0) && s_y.iter().all(|v| *v == 0.0)
            }
            Scheme::Mixture { components, .. } => components.iter().all(Scheme::is_trivial),
        }
    }

    /// One draw of (τx(z, η), τy(z, η)) written into `out_x`, `out_y`.
    pub fn sample_into(
        &self,
        x: &[f64],
        y: &[f64],
        out_x: &mut [f64],
        out_y: &mut [f64],
        rng: &mut Rng,
    ) -> Result<()> {
        if out_x.len() != x.len() || out_y.len() != y.len() {
            return Err(Error::dim("output buffers do not match sample dimensions"));
        }
        out_y.copy_from_slice(y);
        match self {
            Scheme::Identity {} => out_x.copy_from_slice(x),
            Scheme::AdditiveNoise { sigma_aug } => {
                for (o, xi) in out_x.iter_mut().zip(x) {
                    let e: f64 = StandardNormal.sample(rng);
                    *o = xi + sigma_aug * e;
                }
            }
            Scheme::Masking { keep_prob } => {
                for (o, xi) in out_x.iter_mut().zip(x) {
                    let u: f64 = rng.random();
                    *o = if u < *keep_prob { *xi } else { 0.0 };
                }
            }
            Scheme::SaltPepper {
                keep_prob,
                replacement,
            } => match replacement {
                Replacement::Isotropic { scale } => {
                    for (o, xi) in out_x.iter_mut().zip(x) {
                        let u: f64 = rng.random();
                        let e: f64 = StandardNormal.sample(rng);
                        *o = if u < *keep_prob { *xi } else { scale * e };
                    }
                }
                Replacement::Matrix { s } => {
                    let d = x.len();
                    if s.nrows() != d || s.ncols() != d {
                        return Err(Error::dim("replacement matrix does not match d"));
                    }
                    let mut masked = DVector::zeros(d);
                    for i in 0..d {
                        let u: f64 = rng.random();
                        let e: f64 = StandardNormal.sample(rng);
                        if u < *keep_prob {
                            out_x[i] = x[i];
                        } else {
                            out_x[i] = 0.0;
                            masked[i] = e;
                        }
                    }
                    let r = s * masked;
                    for i in 0..d {
                        out_x[i] += r[i];
                    }
                }
            },
            Scheme::Heteroskedastic { s_x, s_y } => {
                if s_x.nrows() != x.len() || s_y.nrows() != y.len() {
                    return Err(Error::dim(
                        "heteroskedastic maps do not match sample dimensions",
                    ));
                }
                let k = s_x.ncols();
                let eta = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
                let dx = s_x * &eta;
                let dy = s_y * &eta;
                for i in 0..x.len() {
                    out_x[i] = x[i] + dx[i];
                }
                for j in 0..y.len() {
                    out_y[j] = y[j] + dy[j];
                }
            }
            Scheme::Mixture {
                components,
                weights,
            } => {
                let v: f64 = rng.random();
                let j = select_component(weights, v);
                components[j].sample_into(x, y, out_x, out_y, rng)?;
            }
        }
        Ok(())
    }

    pub fn sample(
        &self,
        x: &[f64],
        y: &[f64],
        rng: &mut Rng,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut ox = DVector::zeros(x.len());
        let mut oy = DVector::zeros(y.len());
        self.sample_into(x, y, ox.as_mut_slice(), oy.as_mut_slice(), rng)?;
        Ok((ox, oy))
    }

    /// Exact raw-space moments (μx, μy, Λ, Ω) at z = (x, y).
    pub fn closed_form_moments(&self, x: &[f64], y: &[f64]) -> Result<PerSampleMoments> {
        let d = x.len();
        let q = y.len();
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        let m = match self {
            Scheme::Identity {} => PerSampleMoments::deterministic(xv, yv),
            Scheme::AdditiveNoise { sigma_aug } => PerSampleMoments {
                mu_x: xv,
                mu_y: yv,
                lambda: Mat::identity(d, d) * (sigma_aug * sigma_aug),
                omega: Mat::zeros(d, q),
            },
            Scheme::Masking { keep_prob } => {
                let q0 = *keep_prob;
                PerSampleMoments {
                    lambda: Mat::from_diagonal(&xv.map(|v| q0 * (1.0 - q0) * v * v)),
                    mu_x: xv * q0,
                    mu_y: yv,
                    omega: Mat::zeros(d, q),
                }
            }
            Scheme::SaltPepper {
                keep_prob,
                replacement,
            } => {
                let s = match replacement {
                    Replacement::Isotropic { scale } => Mat::identity(d, d) * *scale,
                    Replacement::Matrix { s } => s.clone(),
                };
                PerSampleMoments {
                    lambda: salt_pepper_lambda_closed(x, *keep_prob, &s)?,
                    mu_x: xv * *keep_prob,
                    mu_y: yv,
                    omega: Mat::zeros(d, q),
                }
            }
            Scheme::Heteroskedastic { s_x, s_y } => heteroskedastic_moments_closed(x, y, s_x, s_y)?,
            Scheme::Mixture {
                components,
                weights,
            } => {
                let parts = components
                    .iter()
                    .map(|c| c.closed_form_moments(x, y))
                    .collect::<Result<Vec<_>>>()?;
                mixture_moments_closed(&parts, weights)?
            }
        };
        Ok(m)
    }
}

/// Inverse-CDF component index: the first j with π₁ + … + πⱼ ≥ v.
pub fn select_component(weights: &[f64], v: f64) -> usize {
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if acc >= v {
            return j;
        }
    }
    weights.len() - 1
}

/// Λ(z) = (1−m)[m·Diag(xxᵀ) + ssᵀ] for identity features; Ω(z) = 0.
pub fn salt_pepper_lambda_closed(x: &[f64], m: f64, s: &Mat) -> Result<Mat> {
    check_prob("masking probability", m)?;
    let d = x.len();
    if s.nrows() != d {
        return Err(Error::dim(format!(
            "replacement map must have {d} rows, got {}",
            s.nrows()
        )));
    }
    let mut out = s * s.transpose();
    for i in 0..d {
        out[(i, i)] += m * x[i] * x[i];
    }
    Ok(out * (1.0 - m))
}

/// Exact moments (μx = x, μy = y, Λ = s_x s_xᵀ, Ω = s_x s_yᵀ).
pub fn heteroskedastic_moments_closed(
    x: &[f64],
    y: &[f64],
    s_x: &Mat,
    s_y: &Mat,
) -> Result<PerSampleMoments> {
    if s_x.nrows() != x.len() || s_y.nrows() != y.len() || s_x.ncols() != s_y.ncols() {
        return Err(Error::dim(
            "heteroskedastic maps do not match sample dimensions",
        ));
    }
    Ok(PerSampleMoments {
        mu_x: DVector::from_column_slice(x),
        mu_y: DVector::from_column_slice(y),
        lambda: s_x * s_x.transpose(),
        omega: s_x * s_y.transpose(),
    })
}

/// Moments of a mixture from its component moments and weights.
pub fn mixture_moments_closed(
    parts: &[PerSampleMoments],
    weights: &[f64],
) -> Result<PerSampleMoments> {
    if parts.len() != weights.len() {
        return Err(Error::param(
            "mixture components and weights differ in length",
        ));
    }
    check_weights(weights)?;
    let first = &parts[0];
    let (d, q) = (first.mu_x.len(), first.mu_y.len());
    let mut mu_x = DVector::zeros(d);
    let mut mu_y = DVector::zeros(q);
    let mut lam = Mat::zeros(d, d);
    let mut om = Mat::zeros(d, q);
    for (c, &w) in parts.iter().zip(weights) {
        if c.mu_x.len() != d || c.mu_y.len() != q {
            return Err(Error::dim("mixture components disagree on dimensions"));
        }
        mu_x += &c.mu_x * w;
        mu_y += &c.mu_y * w;
        lam += (&c.lambda + &c.mu_x * c.mu_x.transpose()) * w;
        om += (&c.omega + &c.mu_x * c.mu_y.transpose()) * w;
    }
    lam -= &mu_x * mu_x.transpose();
    om -= &mu_x * mu_y.transpose();
    crate::linalg::symmetrize_in_place(&mut lam);
    Ok(PerSampleMoments {
        mu_x,
        mu_y,
        lambda: lam,
        omega: om,
    })
}

/// Advisory regularity diagnostics of a scheme under a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct H4Report {
    /// E‖Λ(Z) − E Λ(Z)‖²_F over the sample.
    pub var_lambda: f64,
    /// E‖Ω(Z) − E Ω(Z)‖²_F over the sample.
    pub var_omega: f64,
    /// Largest finite-difference slope of z ↦ (μx(z), Λ(z)).
    pub lipschitz_probe: f64,
}

pub fn h4_diagnostic(
    scheme: &Scheme,
    map: &FeatureMap,
    zs: &[(DVector<f64>, DVector<f64>)],
    n_mc: usize,
    seed: u64,
) -> Result<H4Report> {
    if zs.is_empty() {
        return Err(Error::EmptyInput(
            "h4_diagnostic needs at least one sample".into(),
        ));
    }
    let moments = zs
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut r = rng::substream(seed, rng::domain::MOMENTS, i as u64);
            per_sample_moments(scheme, map, x.as_slice(), y.as_slice(), n_mc, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = moments.len() as f64;
    let lam_mean = moments
        .iter()
        .fold(Mat::zeros(map.output_dim(), map.output_dim()), |a, m| {
            a + &m.lambda
        })
        / n;
    let q = zs[0].1.len();
    let om_mean = moments
        .iter()
        .fold(Mat::zeros(map.output_dim(), q), |a, m| a + &m.omega)
        / n;
    let var_lambda = moments
        .iter()
        .map(|m| (&m.lambda - &lam_mean).norm_squared())
        .sum::<f64>()
        / n;
    let var_omega = moments
        .iter()
        .map(|m| (&m.omega - &om_mean).norm_squared())
        .sum::<f64>()
        / n;

    // Common random numbers at z and z + h·e keep Monte-Carlo noise out of the slope.
    let h = 1e-4;
    let mut probe = 0.0f64;
    for (i, (x, y)) in zs.iter().enumerate() {
        let mut dr = rng::substream(seed, rng::domain::LIPSCHITZ, i as u64);
        let mut e: DVector<f64> = DVector::from_fn(x.len(), |_, _| StandardNormal.sample(&mut dr));
        e /= e.norm().max(1e-300);
        let x2 = x + &e * h;
        let cseed = rng::derive_seed(seed, rng::domain::LIPSCHITZ, i as u64);
        let a = per_sample_moments(
            scheme,
            map,
            x.as_slice(),
            y.as_slice(),
            n_mc,
            &mut rng::seeded(cseed),
        )?;
        let b = per_sample_moments(
            scheme,
            map,
            x2.as_slice(),
            y.as_slice(),
            n_mc,
            &mut rng::seeded(cseed),
        )?;
        let diff =
            ((&a.mu_x - &b.mu_x).norm_squared() + (&a.lambda - &b.lambda).norm_squared()).sqrt();
        probe = probe.max(diff / h);
    }
    Ok(H4Report {
        var_lambda,
        var_omega,
        lipschitz_probe: probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mc_mean_cov(
        s: &Scheme,
        x: &[f64],
        y: &[f64],
        n: usize,
        seed: u64,
    ) -> (DVector<f64>, Mat, Mat) {
        let d = x.len();
        let q = y.len();
        let mut r = seeded(seed);
        let mut sx = DVector::zeros(d);
        let mut sy = DVector::zeros(q);
        let mut sxx = Mat::zeros(d, d);
        let mut sxy = Mat::zeros(d, q);
        for _ in 0..n {
            let (a, b) = s.sample(x, y, &mut r).unwrap();
            sx += &a;
            sy += &b;
            sxx += &a * a.transpose();
            sxy += &a * b.transpose();
        }
        let nf = n as f64;
        let mx = sx / nf;
        let my = sy / nf;
        let cxx = (sxx - &mx * mx.transpose() * nf) / (nf - 1.0);
        let cxy = (sxy - &mx * my.transpose() * nf) / (nf - 1.0);
        (mx, cxx, cxy)
    }

    #[test]
    fn trivial_parameters_are_no_ops() {
        let mut r = seeded(1);
        let x = [1.0, -2.0, 3.5];
        let y = [0.25];
        for s in [
            Scheme::Masking { keep_prob: 1.0 },
            Scheme::AdditiveNoise { sigma_aug: 0.0 },
        ] {
            let (a, b) = s.sample(&x, &y, &mut r).unwrap();
            assert_eq!(a.as_slice(), &x);
            assert_eq!(b.as_slice(), &y);
        }
    }

    #[test]
    fn salt_pepper_mean_is_keep_times_x() {
        let s = Scheme::SaltPepper {
            keep_prob: 0.5,
            replacement: Replacement::Isotropic { scale: 1.0 },
        };
        let n = 1_000_000;
        let x = [1.0, 2.0];
        let (m, c, _) = mc_mean_cov(&s, &x, &[0.0], n, 7);
        for i in 0..2 {
            let se = (c[(i, i)] / n as f64).sqrt();
            assert!(
                (m[i] - 0.5 * x[i]).abs() < 3.0 * se,
                "coord {i}: {} vs {}",
                m[i],
                0.5 * x[i]
            );
        }
    }

    #[test]
    fn salt_pepper_closed_form_cases() {
        let x = [1.0, 2.0];
        let id = Mat::identity(2, 2);
        assert_eq!(
            salt_pepper_lambda_closed(&x, 1.0, &id).unwrap(),
            Mat::zeros(2, 2)
        );
        assert_eq!(salt_pepper_lambda_closed(&x, 0.0, &id).unwrap(), id);
        let l = salt_pepper_lambda_closed(&x, 0.5, &id).unwrap();
        assert!((l[(0, 0)] - 0.75).abs() < 1e-15 && (l[(1, 1)] - 1.5).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!(salt_pepper_lambda_closed(&x, 1.5, &id).is_err());
    }

    #[test]
    fn salt_pepper_covariance_matches_closed_form() {
        let s = Scheme::SaltPepper {
            keep_prob: 0.5,
            replacement: Replacement::Isotropic { scale: 1.0 },
        };
        let n = 1_000_000;
        let x = [1.0, 2.0];
        let (_, c, _) = mc_mean_cov(&s, &x, &[0.0], n, 8);
        let l = salt_pepper_lambda_closed(&x, 0.5, &Mat::identity(2, 2)).unwrap();
        // Var of a sample variance ≈ 2σ⁴/n for near-Gaussian draws; use a loose 4.5σ⁴ bound.
        for i in 0..2 {
            for j in 0..2 {
                let se = (4.5 * l[(i, i)] * l[(j, j)] / n as f64).sqrt();
                assert!(
                    (c[(i, j)] - l[(i, j)]).abs() < 4.0 * se,
                    "({i},{j}) {} vs {}",
                    c[(i, j)],
                    l[(i, j)]
                );
            }
        }
    }

    #[test]
    fn heteroskedastic_closed_and_mc() {
        let sx = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        let sy = Mat::from_row_slice(1, 1, &[3.0]);
        let m = heteroskedastic_moments_closed(&[0.5, -1.0], &[2.0], &sx, &sy).unwrap();
        assert_eq!(m.lambda, Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!(m.omega, Mat::from_row_slice(2, 1, &[3.0, 6.0]));
        let z = heteroskedastic_moments_closed(
            &[0.5, -1.0],
            &[2.0],
            &Mat::zeros(2, 1),
            &Mat::zeros(1, 1),
        )
        .unwrap();
        assert_eq!(z.lambda, Mat::zeros(2, 2));
        assert_eq!(z.mu_x.as_slice(), &[0.5, -1.0]);

        let s = Scheme::Heteroskedastic { s_x: sx, s_y: sy };
        assert!(!s.is_label_preserving());
        let n = 200_000;
        let (_, c, cxy) = mc_mean_cov(&s, &[0.5, -1.0], &[2.0], n, 9);
        for (i, want) in [3.0, 6.0].iter().enumerate() {
            let se = ((m.lambda[(i, i)] * 9.0 + want * want) / n as f64).sqrt();
            assert!((cxy[(i, 0)] - want).abs() < 4.0 * se);
        }
        assert!((c[(0, 1)] - 2.0).abs() < 4.0 * (5.0 / n as f64).sqrt());
    }

    #[test]
    fn mixture_of_zero_and_unit_noise() {
        let s = Scheme::Mixture {
            components: vec![
                Scheme::AdditiveNoise { sigma_aug: 0.0 },
                Scheme::AdditiveNoise { sigma_aug: 1.0 },
            ],
            weights: vec![0.5, 0.5],
        };
        s.validate(2, 1).unwrap();
        let m = s.closed_form_moments(&[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(m.lambda, Mat::identity(2, 2) * 0.5);
        let n = 200_000;
        let (_, c, _) = mc_mean_cov(&s, &[0.0, 0.0], &[1.0], n, 10);
        // per-coordinate fourth moment of the mixture is 1.5
        let se = ((1.5 - 0.25) / n as f64).sqrt();
        assert!((c[(0, 0)] - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn mixture_degenerate_cases() {
        let a = Scheme::Masking { keep_prob: 0.3 }
            .closed_form_moments(&[1.0, 2.0], &[0.5])
            .unwrap();
        let one = mixture_moments_closed(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert!((one.lambda - &a.lambda).norm() < 1e-15);
        let two = mixture_moments_closed(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap();
        assert!((two.lambda - &a.lambda).norm() < 1e-14);
        assert!(mixture_moments_closed(&[a.clone(), a], &[0.3, 0.6]).is_err());
    }

    #[test]
    fn inverse_cdf_selection() {
        let w = [0.2, 0.5, 0.3];
        assert_eq!(select_component(&w, 0.0), 0);
        assert_eq!(select_component(&w, 0.2), 0);
        assert_eq!(select_component(&w, 0.21), 1);
        assert_eq!(select_component(&w, 0.99), 2);
    }

    #[test]
    fn label_preservation_is_exact() {
        let mut r = seeded(3);
        let schemes = [
            Scheme::AdditiveNoise { sigma_aug: 0.25 },
            Scheme::Masking { keep_prob: 0.85 },
            Scheme::SaltPepper {
                keep_prob: 0.85,
                replacement: Replacement::Isotropic { scale: 0.25 },
            },
        ];
        let y = [0.123456789, -3.0];
        for s in &schemes {
            assert!(s.is_label_preserving());
            for _ in 0..100 {
                let (_, b) = s.sample(&[1.0, 2.0, 3.0], &y, &mut r).unwrap();
                assert_eq!(b.as_slice(), &y);
            }
        }
    }

    #[test]
    fn matrix_replacement_matches_isotropic() {
        let x = [0.3, -0.4, 1.0];
        let a = Scheme::SaltPepper {
            keep_prob: 0.4,
            replacement: Replacement::Isotropic { scale: 0.7 },
        };
        let b = Scheme::SaltPepper {
            keep_prob: 0.4,
            replacement: Replacement::Matrix {
                s: Mat::identity(3, 3) * 0.7,
            },
        };
        let (ma, mb) = (
            a.closed_form_moments(&x, &[0.0]).unwrap(),
            b.closed_form_moments(&x, &[0.0]).unwrap(),
        );
        assert!((ma.lambda - mb.lambda).norm() < 1e-15);
        let (sa, _) = a.sample(&x, &[0.0], &mut seeded(5)).unwrap();
        let (sb, _) = b.sample(&x, &[0.0], &mut seeded(5)).unwrap();
        assert!((sa - sb).norm() < 1e-15);
    }

    #[test]
    fn h4_zero_for_z_independent_lambda() {
        let map = FeatureMap::identity(3).unwrap();
        let zs: Vec<_> = (0..5)
            .map(|i| {
                (
                    DVector::from_element(3, i as f64),
                    DVector::from_element(1, 0.0),
                )
            })
            .collect();
        let rep =
            h4_diagnostic(&Scheme::AdditiveNoise { sigma_aug: 0.0 }, &map, &zs, 4, 1).unwrap();
        assert_eq!(rep.var_lambda, 0.0);
        assert_eq!(rep.var_omega, 0.0);
        let rep =
            h4_diagnostic(&Scheme::AdditiveNoise { sigma_aug: 0.5 }, &map, &zs, 4, 1).unwrap();
        assert!(rep.var_lambda < 1e-24);
        assert!(h4_diagnostic(&Scheme::Identity {}, &map, &[], 4, 1).is_err());
    }

    #[test]
    fn scheme_json_round_trip() {
        let s: Scheme = serde_json::from_str(
            r#"{"kind":"salt-pepper","keep_prob":0.5,"replacement":{"kind":"isotropic","scale":0.7}}"#,
        )
        .unwrap();
        assert!(matches!(s, Scheme::SaltPepper { .. }));
        let h: Scheme =
            serde_json::from_str(r#"{"kind":"heteroskedastic","s_x":[[1.0],[2.0]],"s_y":[[3.0]]}"#)
                .unwrap();
        h.validate(2, 1).unwrap();
        assert!(h.validate(3, 1).is_err());
        assert!(
            serde_json::from_str::<Scheme>(r#"{"kind":"masking","keep_prob":0.5,"x":1}"#).is_err()
        );
    }
}
