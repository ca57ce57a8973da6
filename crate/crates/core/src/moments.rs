//! Feature-space augmentation moments, per sample and at the population level.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DVector, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SyntheticModel};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{self, Mat};
use crate::rng::{self, Rng};
use crate::schemes::{Replacement, Scheme};

/// μx(z), μy(z), Λ(z), Ω(z) in feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleMoments {
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub lambda: Mat,
    pub omega: Mat,
}

impl PerSampleMoments {
    /// Moments of the point mass at (x, y).
    pub fn deterministic(x: DVector<f64>, y: DVector<f64>) -> Self {
        let (p, q) = (x.len(), y.len());
        PerSampleMoments {
            mu_x: x,
            mu_y: y,
            lambda: Mat::zeros(p, p),
            omega: Mat::zeros(p, q),
        }
    }
}

/// Draws `n_mc` augmentations of (x, y), maps them through φ and returns
/// (φ-samples p×k, τy-samples q×k).
fn draw_augmented(
    scheme: &Scheme,
    map: &FeatureMap,
    x: &[f64],
    y: &[f64],
    n_mc: usize,
    rng: &mut Rng,
) -> Result<(Mat, Mat)> {
    let (d, q) = (x.len(), y.len());
    let mut xs = Mat::zeros(d, n_mc);
    let mut ys = Mat::zeros(q, n_mc);
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; q];
    for k in 0..n_mc {
        scheme.sample_into(x, y, &mut bx, &mut by, rng)?;
        xs.column_mut(k).copy_from_slice(&bx);
        ys.column_mut(k).copy_from_slice(&by);
    }
    Ok((map.apply_matrix(&xs)?, ys))
}

fn row_means(m: &Mat) -> DVector<f64> {
    let k = m.ncols() as f64;
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum() / k)
}

fn center_columns(m: &mut Mat, mean: &DVector<f64>) {
    for mut c in m.column_iter_mut() {
        c -= mean;
    }
}

/// Closed forms for identity features, Monte-Carlo over `n_mc` draws
/// otherwise (unbiased normalization, Λ symmetrized).
pub fn per_sample_moments(
    scheme: &Scheme,
    map: &FeatureMap,
    x: &[f64],
    y: &[f64],
    n_mc: usize,
    rng: &mut Rng,
) -> Result<PerSampleMoments> {
    if scheme.is_trivial() {
        return Ok(PerSampleMoments::deterministic(
            map.apply(x)?,
            DVector::from_column_slice(y),
        ));
    }
    if map.is_identity() {
        if x.len() != map.input_dim() {
            return Err(Error::dim("sample does not match feature map input"));
        }
        return scheme.closed_form_moments(x, y);
    }
    if n_mc < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_mc,
        });
    }
    let (mut f, mut t) = draw_augmented(scheme, map, x, y, n_mc, rng)?;
    let mu_x = row_means(&f);
    let mu_y = if scheme.is_label_preserving() {
        DVector::from_column_slice(y)
    } else {
        row_means(&t)
    };
    center_columns(&mut f, &mu_x);
    center_columns(&mut t, &mu_y);
    let denom = (n_mc - 1) as f64;
    let mut lambda = &f * f.transpose() / denom;
    linalg::symmetrize_in_place(&mut lambda);
    let omega = if scheme.is_label_preserving() {
        Mat::zeros(f.nrows(), y.len())
    } else {
        &f * t.transpose() / denom
    };
    Ok(PerSampleMoments {
        mu_x,
        mu_y,
        lambda,
        omega,
    })
}

/// Arithmetic means Λ(Z) and Ω(Z) over a list of per-sample moments.
pub fn empirical_lambda_omega(list: &[PerSampleMoments]) -> Result<(Mat, Mat)> {
    let first = list
        .first()
        .ok_or_else(|| Error::EmptyInput("no per-sample moments".into()))?;
    let mut lam = Mat::zeros(first.lambda.nrows(), first.lambda.ncols());
    let mut om = Mat::zeros(first.omega.nrows(), first.omega.ncols());
    for m in list {
        lam += &m.lambda;
        om += &m.omega;
    }
    let n = list.len() as f64;
    Ok((lam / n, om / n))
}

/// Sum over the columns of (x, y) of the closed-form raw-space moments:
/// (μx columns, μy columns, Σᵢ Λ(zᵢ), Σᵢ Ω(zᵢ)).
pub fn closed_form_sums(scheme: &Scheme, x: &Mat, y: &Mat) -> Result<(Mat, Mat, Mat, Mat)> {
    let (d, n) = x.shape();
    let q = y.nrows();
    let nf = n as f64;
    let sq_sum = || DVector::from_fn(d, |i, _| x.row(i).iter().map(|v| v * v).sum::<f64>());
    let out = match scheme {
        Scheme::Identity {} => (x.clone(), y.clone(), Mat::zeros(d, d), Mat::zeros(d, q)),
        Scheme::AdditiveNoise { sigma_aug } => (
            x.clone(),
            y.clone(),
            Mat::identity(d, d) * (sigma_aug * sigma_aug * nf),
            Mat::zeros(d, q),
        ),
        Scheme::Masking { keep_prob } => {
            let k = *keep_prob;
            (
                x * k,
                y.clone(),
                Mat::from_diagonal(&(sq_sum() * (k * (1.0 - k)))),
                Mat::zeros(d, q),
            )
        }
        Scheme::SaltPepper {
            keep_prob,
            replacement,
        } => {
            let k = *keep_prob;
            let ss = match replacement {
                Replacement::Isotropic { scale } => Mat::identity(d, d) * (scale * scale),
                Replacement::Matrix { s } => s * s.transpose(),
            };
            let lam = (Mat::from_diagonal(&(sq_sum() * k)) + ss * nf) * (1.0 - k);
            (x * k, y.clone(), lam, Mat::zeros(d, q))
        }
        Scheme::Heteroskedastic { s_x, s_y } => (
            x.clone(),
            y.clone(),
            s_x * s_x.transpose() * nf,
            s_x * s_y.transpose() * nf,
        ),
        Scheme::Mixture {
            components,
            weights,
        } => {
            let mut mx = Mat::zeros(d, n);
            let mut my = Mat::zeros(q, n);
            let mut lam = Mat::zeros(d, d);
            let mut om = Mat::zeros(d, q);
            for (c, &w) in components.iter().zip(weights) {
                let (cx, cy, cl, co) = closed_form_sums(c, x, y)?;
                lam += (cl + &cx * cx.transpose()) * w;
                om += (co + &cx * cy.transpose()) * w;
                mx += cx * w;
                my += cy * w;
            }
            lam -= &mx * mx.transpose();
            om -= &mx * my.transpose();
            linalg::symmetrize_in_place(&mut lam);
            (mx, my, lam, om)
        }
    };
    Ok(out)
}

/// Augmentation statistics of a block of samples (columns).
#[derive(Clone, Debug)]
pub struct AugmentationSummary {
    pub phi: Mat,
    pub mu_x: Mat,
    pub mu_y: Mat,
    /// Λ(Z) = n⁻¹ Σᵢ Λ(Zᵢ).
    pub lambda_mean: Mat,
    /// Ω(Z) = n⁻¹ Σᵢ Ω(Zᵢ).
    pub omega_mean: Mat,
}

struct BlockSums {
    phi: Mat,
    mu_x: Mat,
    mu_y: Mat,
    lambda_sum: Mat,
    omega_sum: Mat,
}

/// Samples are augmented from stream `(seed, start + j)` so the result for
/// a given sample does not depend on how the data are blocked.
fn augment_block(
    scheme: &Scheme,
    map: &FeatureMap,
    x: &Mat,
    y: &Mat,
    n_mc: usize,
    seed: u64,
    start: usize,
) -> Result<BlockSums> {
    let (p, q, m) = (map.output_dim(), y.nrows(), x.ncols());
    if scheme.is_trivial() {
        let phi = map.apply_matrix(x)?;
        return Ok(BlockSums {
            mu_x: phi.clone(),
            phi,
            mu_y: y.clone(),
            lambda_sum: Mat::zeros(p, p),
            omega_sum: Mat::zeros(p, q),
        });
    }
    if map.is_identity() {
        if x.nrows() != p {
            return Err(Error::dim("data do not match feature map input"));
        }
        let (mu_x, mu_y, lambda_sum, omega_sum) = closed_form_sums(scheme, x, y)?;
        return Ok(BlockSums {
            phi: x.clone(),
            mu_x,
            mu_y,
            lambda_sum,
            omega_sum,
        });
    }
    if n_mc < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_mc,
        });
    }
    let phi = map.apply_matrix(x)?;
    let label_preserving = scheme.is_label_preserving();
    let mut mu_x = Mat::zeros(p, m);
    let mut mu_y = Mat::zeros(q, m);
    let mut fc = Mat::zeros(p, m * n_mc);
    let mut tc = Mat::zeros(q, if label_preserving { 0 } else { m * n_mc });
    for j in 0..m {
        let mut r = rng::substream(seed, rng::domain::MOMENTS, (start + j) as u64);
        let xj: Vec<f64> = x.column(j).iter().copied().collect();
        let yj: Vec<f64> = y.column(j).iter().copied().collect();
        let (mut f, mut t) = draw_augmented(scheme, map, &xj, &yj, n_mc, &mut r)?;
        let mx = row_means(&f);
        let my = if label_preserving {
            DVector::from_column_slice(&yj)
        } else {
            row_means(&t)
        };
        center_columns(&mut f, &mx);
        fc.columns_mut(j * n_mc, n_mc).copy_from(&f);
        if !label_preserving {
            center_columns(&mut t, &my);
            tc.columns_mut(j * n_mc, n_mc).copy_from(&t);
        }
        mu_x.set_column(j, &mx);
        mu_y.set_column(j, &my);
    }
    let denom = (n_mc - 1) as f64;
    let mut lambda_sum = &fc * fc.transpose() / denom;
    linalg::symmetrize_in_place(&mut lambda_sum);
    let omega_sum = if label_preserving {
        Mat::zeros(p, q)
    } else {
        &fc * tc.transpose() / denom
    };
    Ok(BlockSums {
        phi,
        mu_x,
        mu_y,
        lambda_sum,
        omega_sum,
    })
}

const AUGMENT_BLOCK: usize = 32;

/// Per-sample augmentation means and the empirical Λ(Z), Ω(Z) of a dataset.
pub fn augment_dataset(
    scheme: &Scheme,
    map: &FeatureMap,
    x: &Mat,
    y: &Mat,
    n_mc: usize,
    seed: u64,
) -> Result<AugmentationSummary> {
    let n = x.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("dataset has no samples".into()));
    }
    if y.ncols() != n {
        return Err(Error::dim(format!(
            "X has {n} samples, Y has {}",
            y.ncols()
        )));
    }
    scheme.validate(x.nrows(), y.nrows())?;
    let n_blocks = n.div_ceil(AUGMENT_BLOCK);
    let blocks = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let s = b * AUGMENT_BLOCK;
            let w = AUGMENT_BLOCK.min(n - s);
            augment_block(
                scheme,
                map,
                &x.columns(s, w).into_owned(),
                &y.columns(s, w).into_owned(),
                n_mc,
                seed,
                s,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (p, q) = (map.output_dim(), y.nrows());
    let mut out = AugmentationSummary {
        phi: Mat::zeros(p, n),
        mu_x: Mat::zeros(p, n),
        mu_y: Mat::zeros(q, n),
        lambda_mean: Mat::zeros(p, p),
        omega_mean: Mat::zeros(p, q),
    };
    for (b, blk) in blocks.into_iter().enumerate() {
        let s = b * AUGMENT_BLOCK;
        let w = blk.phi.ncols();
        out.phi.columns_mut(s, w).copy_from(&blk.phi);
        out.mu_x.columns_mut(s, w).copy_from(&blk.mu_x);
        out.mu_y.columns_mut(s, w).copy_from(&blk.mu_y);
        out.lambda_mean += blk.lambda_sum;
        out.omega_mean += blk.omega_sum;
    }
    out.lambda_mean /= n as f64;
    out.omega_mean /= n as f64;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    MonteCarlo,
    EmpiricalPlugin,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::ClosedForm => "closed-form",
            Provenance::MonteCarlo => "monte-carlo",
            Provenance::EmpiricalPlugin => "empirical-plugin",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed-form" => Ok(Provenance::ClosedForm),
            "monte-carlo" => Ok(Provenance::MonteCarlo),
            "empirical-plugin" => Ok(Provenance::EmpiricalPlugin),
            _ => Err(Error::Format {
                offset: 0,
                message: format!("unknown provenance `{s}`"),
            }),
        }
    }
}

/// Every population moment the deterministic equivalents need.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSet {
    /// E[φφᵀ], p×p.
    pub sigma: Mat,
    /// E[φ μxᵀ], p×p.
    pub sigma_prime: Mat,
    /// E[μx μxᵀ], p×p.
    pub sigma_double_prime: Mat,
    /// E[φ⋆ φᵀ], p⋆×p; absent in plugin mode.
    pub sigma_star: Option<Mat>,
    /// E[φ⋆ φ⋆ᵀ], p⋆×p⋆; absent in plugin mode.
    pub sigma_star_star: Option<Mat>,
    /// E[φ Yᵀ], E[φ μyᵀ], E[μx Yᵀ], E[μx μyᵀ], each p×q.
    pub g1: Mat,
    pub g2: Mat,
    pub g3: Mat,
    pub g4: Mat,
    /// Per output j: [[E Yⱼ², E Yⱼμyⱼ], [E Yⱼμyⱼ, E μyⱼ²]].
    pub psi: Vec<Matrix2<f64>>,
    /// E[Λ(Z)], p×p.
    pub lambda_bar: Mat,
    /// E[Ω(Z)], p×q.
    pub omega_bar: Mat,
    pub n_mc_data: usize,
    pub n_mc_aug: usize,
    pub provenance: Provenance,
}

impl MomentSet {
    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn q(&self) -> usize {
        self.g1.ncols()
    }

    pub fn p_star(&self) -> Option<usize> {
        self.sigma_star_star.as_ref().map(Mat::nrows)
    }

    pub fn is_plugin(&self) -> bool {
        self.sigma_star.is_none()
    }

    /// Checks shapes, symmetry and positive semidefiniteness of the blocks.
    pub fn check(&self) -> Result<()> {
        let (p, q) = (self.p(), self.q());
        let sq = |m: &Mat, name: &str| -> Result<()> {
            if m.shape() != (p, p) {
                return Err(Error::dim(format!(
                    "{name} is {:?}, expected ({p}, {p})",
                    m.shape()
                )));
            }
            Ok(())
        };
        sq(&self.sigma, "Sigma")?;
        sq(&self.sigma_prime, "SigmaPrime")?;
        sq(&self.sigma_double_prime, "SigmaDoublePrime")?;
        sq(&self.lambda_bar, "LambdaBar")?;
        for (m, name) in [
            (&self.g1, "G1"),
            (&self.g2, "G2"),
            (&self.g3, "G3"),
            (&self.g4, "G4"),
            (&self.omega_bar, "OmegaBar"),
        ] {
            if m.shape() != (p, q) {
                return Err(Error::dim(format!(
                    "{name} is {:?}, expected ({p}, {q})",
                    m.shape()
                )));
            }
        }
        if self.psi.len() != q {
            return Err(Error::dim(format!(
                "PsiSecond has {} entries, q = {q}",
                self.psi.len()
            )));
        }
        match (&self.sigma_star, &self.sigma_star_star) {
            (Some(s), Some(ss)) => {
                let ps = ss.nrows();
                if ss.shape() != (ps, ps) || s.shape() != (ps, p) {
                    return Err(Error::dim(
                        "SigmaStar / SigmaStarStar shapes are inconsistent",
                    ));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::dim(
                    "SigmaStar and SigmaStarStar must be both present or both absent",
                ))
            }
        }
        let tol = 1e-8;
        let mut psd: Vec<(&Mat, &str)> = vec![
            (&self.sigma, "Sigma"),
            (&self.sigma_double_prime, "SigmaDoublePrime"),
            (&self.lambda_bar, "LambdaBar"),
        ];
        if let Some(ss) = &self.sigma_star_star {
            psd.push((ss, "SigmaStarStar"));
        }
        for (m, name) in psd {
            if linalg::asymmetry(m) > 1e-10 {
                return Err(Error::PreconditionViolation(format!(
                    "{name} is not symmetric"
                )));
            }
            if !linalg::is_psd(m, tol) {
                return Err(Error::PreconditionViolation(format!(
                    "{name} is not PSD (smallest eigenvalue {:e})",
                    linalg::min_eigenvalue(m)
                )));
            }
        }
        for (j, ps) in self.psi.iter().enumerate() {
            let (lo, hi) = linalg::sym2_eigenvalues(ps);
            if (ps[(0, 1)] - ps[(1, 0)]).abs() > 1e-10 * hi.abs().max(1.0)
                || lo < -tol * hi.abs().max(1e-300)
            {
                return Err(Error::PreconditionViolation(format!(
                    "PsiSecond[{j}] is not symmetric PSD"
                )));
            }
        }
        Ok(())
    }

    /// The 2p×2p second moment [[Σ, Σ′], [Σ′ᵀ, Σ″]].
    pub fn stacked_second_moment(&self) -> Mat {
        let p = self.p();
        let mut m = Mat::zeros(2 * p, 2 * p);
        m.view_mut((0, 0), (p, p)).copy_from(&self.sigma);
        m.view_mut((0, p), (p, p)).copy_from(&self.sigma_prime);
        m.view_mut((p, 0), (p, p))
            .copy_from(&self.sigma_prime.transpose());
        m.view_mut((p, p), (p, p))
            .copy_from(&self.sigma_double_prime);
        m
    }

    /// Writes all blocks as CSV, in a fixed block order after a header line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "p,{},p_star,{},q,{},n_mc_data,{},n_mc_aug,{},provenance,{}",
            self.p(),
            self.p_star().unwrap_or(0),
            self.q(),
            self.n_mc_data,
            self.n_mc_aug,
            self.provenance
        )?;
        let empty = Mat::zeros(0, 0);
        let psi = Mat::from_fn(self.q(), 4, |j, k| self.psi[j][(k / 2, k % 2)]);
        let blocks: [(&str, &Mat); 12] = [
            ("Sigma", &self.sigma),
            ("SigmaPrime", &self.sigma_prime),
            ("SigmaDoublePrime", &self.sigma_double_prime),
            ("SigmaStar", self.sigma_star.as_ref().unwrap_or(&empty)),
            (
                "SigmaStarStar",
                self.sigma_star_star.as_ref().unwrap_or(&empty),
            ),
            ("G1", &self.g1),
            ("G2", &self.g2),
            ("G3", &self.g3),
            ("G4", &self.g4),
            ("PsiSecond", &psi),
            ("LambdaBar", &self.lambda_bar),
            ("OmegaBar", &self.omega_bar),
        ];
        for (name, m) in blocks {
            writeln!(f, "block,{name},{},{}", m.nrows(), m.ncols())?;
            for i in 0..m.nrows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(f, "{}", row.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = Vec::new();
        for l in reader.lines() {
            lines.push(l?);
        }
        let mut offsets = Vec::with_capacity(lines.len());
        let mut acc = 0usize;
        for l in &lines {
            offsets.push(acc);
            acc += l.len() + 1;
        }
        let bad = |i: usize, msg: String| Error::Format {
            offset: offsets.get(i).copied().unwrap_or(acc),
            message: msg,
        };
        let header: Vec<&str> = lines
            .first()
            .ok_or_else(|| bad(0, "empty file".into()))?
            .split(',')
            .collect();
        if header.len() != 12 {
            return Err(bad(0, "malformed header".into()));
        }
        let num = |k: usize| -> Result<usize> {
            header[k]
                .parse()
                .map_err(|_| bad(0, format!("bad header field `{}`", header[k])))
        };
        let (p, p_star, q) = (num(1)?, num(3)?, num(5)?);
        let (n_mc_data, n_mc_aug) = (num(7)?, num(9)?);
        let provenance: Provenance = header[11].parse()?;

        let mut blocks: Vec<Mat> = Vec::with_capacity(12);
        let names = [
            "Sigma",
            "SigmaPrime",
            "SigmaDoublePrime",
            "SigmaStar",
            "SigmaStarStar",
            "G1",
            "G2",
            "G3",
            "G4",
            "PsiSecond",
            "LambdaBar",
            "OmegaBar",
        ];
        let mut i = 1;
        for name in names {
            let h: Vec<&str> = lines
                .get(i)
                .ok_or_else(|| bad(i, format!("missing block {name}")))?
                .split(',')
                .collect();
            if h.len() != 4 || h[0] != "block" || h[1] != name {
                return Err(bad(i, format!("expected block header for {name}")));
            }
            let r: usize = h[2].parse().map_err(|_| bad(i, "bad row count".into()))?;
            let c: usize = h[3]
                .parse()
                .map_err(|_| bad(i, "bad column count".into()))?;
            let mut m = Mat::zeros(r, c);
            for a in 0..r {
                let li = i + 1 + a;
                let vals: Vec<f64> = lines
                    .get(li)
                    .ok_or_else(|| bad(li, format!("block {name} truncated")))?
                    .split(',')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(li, format!("bad number in {name}: {e}")))?;
                if vals.len() != c {
                    return Err(bad(
                        li,
                        format!("block {name} row has {} values, expected {c}", vals.len()),
                    ));
                }
                for (b, v) in vals.into_iter().enumerate() {
                    m[(a, b)] = v;
                }
            }
            i += 1 + r;
            blocks.push(m);
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().unwrap();
        let sigma = next();
        let sigma_prime = next();
        let sigma_double_prime = next();
        let ss = next();
        let sss = next();
        let (sigma_star, sigma_star_star) = if p_star == 0 {
            (None, None)
        } else {
            (Some(ss), Some(sss))
        };
        let (g1, g2, g3, g4) = (next(), next(), next(), next());
        let psi_m = next();
        let psi = (0..psi_m.nrows())
            .map(|j| Matrix2::new(psi_m[(j, 0)], psi_m[(j, 1)], psi_m[(j, 2)], psi_m[(j, 3)]))
            .collect();
        let ms = MomentSet {
            sigma,
            sigma_prime,
            sigma_double_prime,
            sigma_star,
            sigma_star_star,
            g1,
            g2,
            g3,
            g4,
            psi,
            lambda_bar: next(),
            omega_bar: next(),
            n_mc_data,
            n_mc_aug,
            provenance,
        };
        if ms.p() != p || ms.q() != q {
            return Err(bad(0, "header dimensions disagree with blocks".into()));
        }
        ms.check()?;
        Ok(ms)
    }
}

/// Where population moments are estimated from.
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    /// Fresh draws from a synthetic model; truth blocks are available.
    Synthetic(&'a SyntheticModel),
    /// A fixed dataset; truth blocks are replaced by plugin label moments.
    Fixed(&'a Dataset),
}

#[derive(Clone)]
struct Accum {
    n: usize,
    sigma: Mat,
    sigma_prime: Mat,
    sigma_double_prime: Mat,
    sigma_star: Option<Mat>,
    sigma_star_star: Option<Mat>,
    g: [Mat; 4],
    psi: Vec<[f64; 3]>,
    lambda: Mat,
    omega: Mat,
}

impl Accum {
    fn add(&mut self, o: Accum) {
        self.n += o.n;
        self.sigma += o.sigma;
        self.sigma_prime += o.sigma_prime;
        self.sigma_double_prime += o.sigma_double_prime;
        if let (Some(a), Some(b)) = (self.sigma_star.as_mut(), o.sigma_star) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.sigma_star_star.as_mut(), o.sigma_star_star) {
            *a += b;
        }
        for (a, b) in self.g.iter_mut().zip(o.g) {
            *a += b;
        }
        for (a, b) in self.psi.iter_mut().zip(o.psi) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        self.lambda += o.lambda;
        self.omega += o.omega;
    }
}

fn accumulate(blk: BlockSums, y: &Mat, phi_star: Option<&Mat>) -> Accum {
    let BlockSums {
        phi,
        mu_x,
        mu_y,
        lambda_sum,
        omega_sum,
    } = blk;
    let q = y.nrows();
    let psi = (0..q)
        .map(|j| {
            let (yr, mr) = (y.row(j), mu_y.row(j));
            [yr.dot(&yr), yr.dot(&mr), mr.dot(&mr)]
        })
        .collect();
    Accum {
        n: phi.ncols(),
        sigma: &phi * phi.transpose(),
        sigma_prime: &phi * mu_x.transpose(),
        sigma_double_prime: &mu_x * mu_x.transpose(),
        sigma_star: phi_star.map(|s| s * phi.transpose()),
        sigma_star_star: phi_star.map(|s| s * s.transpose()),
        g: [
            &phi * y.transpose(),
            &phi * mu_y.transpose(),
            &mu_x * y.transpose(),
            &mu_x * mu_y.transpose(),
        ],
        psi,
        lambda: lambda_sum,
        omega: omega_sum,
    }
}

const MOMENT_BLOCK: usize = 256;

/// Estimates every block of the moment set by averaging over `n_mc_data`
/// data points and `n_mc_aug` augmentation draws per point.
///
/// Augmentations of data point i come from stream `(seed, i)`, exactly as
/// in [`augment_dataset`], so a fit that uses the same `n_mc_aug` sees
/// per-sample means with the same law as the ones averaged here.
///
/// For synthetic sources the label noise is integrated out analytically:
/// every scheme here augments x independently of y and shifts y
/// additively, so E[φ ε] = 0 and each entry of PsiSecond gains exactly σ².
pub fn estimate_moment_set(
    phi: &FeatureMap,
    scheme: &Scheme,
    source: DataSource<'_>,
    n_mc_data: usize,
    n_mc_aug: usize,
    seed: u64,
) -> Result<MomentSet> {
    let aug_seed = rng::derive_seed(seed, rng::domain::MOMENTS, 0);
    let (total, q, noise) = match source {
        DataSource::Synthetic(m) => {
            if n_mc_data < 2 {
                return Err(Error::InsufficientSamples {
                    needed: 2,
                    got: n_mc_data,
                });
            }
            if m.d() != phi.input_dim() {
                return Err(Error::dim(
                    "feature map input does not match data dimension",
                ));
            }
            (n_mc_data, 1, m.spec.noise_sigma2)
        }
        DataSource::Fixed(ds) => {
            let n = ds.n().min(if n_mc_data == 0 {
                usize::MAX
            } else {
                n_mc_data
            });
            if n < 2 {
                return Err(Error::InsufficientSamples { needed: 2, got: n });
            }
            if ds.x.nrows() != phi.input_dim() {
                return Err(Error::dim(
                    "feature map input does not match data dimension",
                ));
            }
            (n, ds.y.nrows(), 0.0)
        }
    };
    let d = phi.input_dim();
    scheme.validate(d, q)?;
    let n_blocks = total.div_ceil(MOMENT_BLOCK);
    let parts = (0..n_blocks)
        .into_par_iter()
        .map(|b| -> Result<Accum> {
            let s = b * MOMENT_BLOCK;
            let w = MOMENT_BLOCK.min(total - s);
            match source {
                DataSource::Synthetic(m) => {
                    let mut r = rng::substream(seed, rng::domain::DATA, b as u64);
                    let x = m.sample_x(w, &mut r);
                    let fs = m.truth_map.apply_matrix(&x)?;
                    let y = m.theta_matrix().transpose() * &fs;
                    let blk = augment_block(scheme, phi, &x, &y, n_mc_aug, aug_seed, s)?;
                    Ok(accumulate(blk, &y, Some(&fs)))
                }
                DataSource::Fixed(ds) => {
                    let x = ds.x.columns(s, w).into_owned();
                    let y = ds.y.columns(s, w).into_owned();
                    let blk = augment_block(scheme, phi, &x, &y, n_mc_aug, aug_seed, s)?;
                    Ok(accumulate(blk, &y, None))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::EmptyInput("no data".into()))?;
    for part in it {
        acc.add(part);
    }
    let nf = acc.n as f64;
    let scale = |m: Mat| {
        let mut m = m / nf;
        if m.nrows() == m.ncols() {
            linalg::symmetrize_in_place(&mut m);
        }
        m
    };
    let psi = acc
        .psi
        .iter()
        .map(|v| {
            let (a, b, c) = (v[0] / nf + noise, v[1] / nf + noise, v[2] / nf + noise);
            Matrix2::new(a, b, b, c)
        })
        .collect();
    let [g1, g2, g3, g4] = acc.g;
    let mut lambda_bar = scale(acc.lambda);
    if linalg::min_eigenvalue(&lambda_bar) < 0.0 {
        let (clipped, flagged) = linalg::clip_psd(&lambda_bar, 1e-8);
        if flagged {
            log::warn!("LambdaBar had eigenvalues below -1e-8 relative; clipped to zero");
        }
        lambda_bar = clipped;
    }
    let mut sigma_prime = acc.sigma_prime / nf;
    if scheme.is_trivial() {
        linalg::symmetrize_in_place(&mut sigma_prime);
    }
    Ok(MomentSet {
        sigma: scale(acc.sigma),
        sigma_prime,
        sigma_double_prime: scale(acc.sigma_double_prime),
        sigma_star: acc.sigma_star.map(|m| m / nf),
        sigma_star_star: acc.sigma_star_star.map(scale),
        g1: g1 / nf,
        g2: g2 / nf,
        g3: g3 / nf,
        g4: g4 / nf,
        psi,
        lambda_bar,
        omega_bar: acc.omega / nf,
        n_mc_data: acc.n,
        n_mc_aug: if phi.is_identity() || scheme.is_trivial() {
            0
        } else {
            n_mc_aug
        },
        provenance: match source {
            DataSource::Synthetic(_) => Provenance::MonteCarlo,
            DataSource::Fixed(_) => Provenance::EmpiricalPlugin,
        },
    })
}

/// Population moments for Gaussian covariates N(0, cov) under identity
/// features and identity truth map, with Y = θ⋆ᵀX + ε. Supports every scheme
/// whose mean is a fixed multiple of x (all kinds here).
pub fn closed_form_moment_set(
    cov: &Mat,
    theta_star: &Mat,
    noise_sigma2: f64,
    scheme: &Scheme,
) -> Result<MomentSet> {
    let d = cov.nrows();
    let q = theta_star.ncols();
    if cov.ncols() != d || theta_star.nrows() != d {
        return Err(Error::dim("covariance and theta_star dimensions disagree"));
    }
    scheme.validate(d, q)?;
    let (c, lambda_bar, omega_bar) = gaussian_population_lambda(scheme, cov, q);
    let g = cov * theta_star;
    let signal = theta_star.transpose() * &g;
    let psi = (0..q)
        .map(|j| {
            let v = signal[(j, j)] + noise_sigma2;
            Matrix2::new(v, v, v, v)
        })
        .collect();
    Ok(MomentSet {
        sigma: cov.clone(),
        sigma_prime: cov * c,
        sigma_double_prime: cov * (c * c),
        sigma_star: Some(cov.clone()),
        sigma_star_star: Some(cov.clone()),
        g1: g.clone(),
        g2: g.clone(),
        g3: &g * c,
        g4: &g * c,
        psi,
        lambda_bar,
        omega_bar,
        n_mc_data: 0,
        n_mc_aug: 0,
        provenance: Provenance::ClosedForm,
    })
}

/// (c, E Λ, E Ω) with μx = c·x, for centered x with covariance `cov`.
fn gaussian_population_lambda(scheme: &Scheme, cov: &Mat, q: usize) -> (f64, Mat, Mat) {
    let d = cov.nrows();
    let diag = Mat::from_diagonal(&cov.diagonal());
    match scheme {
        Scheme::Identity {} => (1.0, Mat::zeros(d, d), Mat::zeros(d, q)),
        Scheme::AdditiveNoise { sigma_aug } => (
            1.0,
            Mat::identity(d, d) * sigma_aug.powi(2),
            Mat::zeros(d, q),
        ),
        Scheme::Masking { keep_prob: k } => (*k, diag * (k * (1.0 - k)), Mat::zeros(d, q)),
        Scheme::SaltPepper {
            keep_prob: k,
            replacement,
        } => {
            let ss = match replacement {
                Replacement::Isotropic { scale } => Mat::identity(d, d) * scale.powi(2),
                Replacement::Matrix { s } => s * s.transpose(),
            };
            (*k, (diag * *k + ss) * (1.0 - k), Mat::zeros(d, q))
        }
        Scheme::Heteroskedastic { s_x, s_y } => (1.0, s_x * s_x.transpose(), s_x * s_y.transpose()),
        Scheme::Mixture {
            components,
            weights,
        } => {
            let mut cbar = 0.0;
            let mut lam = Mat::zeros(d, d);
            let mut om = Mat::zeros(d, q);
            for (comp, &w) in components.iter().zip(weights) {
                let (cj, lj, oj) = gaussian_population_lambda(comp, cov, q);
                cbar += w * cj;
                lam += (lj + cov * (cj * cj)) * w;
                om += oj * w;
            }
            lam -= cov * (cbar * cbar);
            linalg::symmetrize_in_place(&mut lam);
            (cbar, lam, om)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{NoiseLaw, Spectrum, SyntheticSpec, ThetaSpec};
    use crate::features::{Activation, FeatureSpec};

    fn model(d: usize, theta: ThetaSpec) -> SyntheticModel {
        SyntheticModel::new(&SyntheticSpec {
            d,
            n: 10,
            spectrum: Spectrum::PowerLaw { exponent: 1.0 },
            rotation_seed: 1,
            truth_map: FeatureSpec::Identity {},
            theta_star: theta,
            noise_sigma2: 0.5,
            noise_law: NoiseLaw::Gaussian,
        })
        .unwrap()
    }

    #[test]
    fn identity_features_closed_forms() {
        let map = FeatureMap::identity(3).unwrap();
        let mut r = rng::seeded(0);
        let m = per_sample_moments(
            &Scheme::AdditiveNoise { sigma_aug: 0.0 },
            &map,
            &[1.0, 2.0, 3.0],
            &[1.0],
            2,
            &mut r,
        )
        .unwrap();
        assert_eq!(m.mu_x.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(m.lambda, Mat::zeros(3, 3));
        let m = per_sample_moments(
            &Scheme::AdditiveNoise { sigma_aug: 0.3 },
            &map,
            &[1.0, 2.0, 3.0],
            &[1.0],
            2,
            &mut r,
        )
        .unwrap();
        assert!((m.lambda - Mat::identity(3, 3) * 0.09).norm() < 1e-15);
    }

    #[test]
    fn monte_carlo_matches_salt_pepper_closed_form() {
        // Force the Monte-Carlo path with a one-layer linear identity-weight map.
        let mut map = FeatureMap::random_mlp(2, &[], 2, Activation::Tanh, 0).unwrap();
        assert!(!map.is_identity());
        map = identity_like(map);
        let scheme = Scheme::SaltPepper {
            keep_prob: 0.5,
            replacement: Replacement::Isotropic { scale: 1.0 },
        };
        let n = 100_000;
        let m =
            per_sample_moments(&scheme, &map, &[1.0, 2.0], &[0.0], n, &mut rng::seeded(4)).unwrap();
        let closed =
            crate::schemes::salt_pepper_lambda_closed(&[1.0, 2.0], 0.5, &Mat::identity(2, 2))
                .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let se = (4.5 * closed[(i, i)] * closed[(j, j)] / n as f64).sqrt();
                assert!((m.lambda[(i, j)] - closed[(i, j)]).abs() < 4.0 * se);
            }
        }
    }

    fn identity_like(_: FeatureMap) -> FeatureMap {
        FeatureMap::from_weights(vec![Mat::identity(2, 2)], Activation::Tanh).unwrap()
    }

    #[test]
    fn monte_carlo_needs_two_draws() {
        let map = FeatureMap::random_mlp(2, &[3], 2, Activation::Tanh, 0).unwrap();
        let s = Scheme::Masking { keep_prob: 0.5 };
        assert!(matches!(
            per_sample_moments(&s, &map, &[1.0, 2.0], &[0.0], 1, &mut rng::seeded(0)),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn empirical_means() {
        let a = PerSampleMoments {
            mu_x: DVector::zeros(2),
            mu_y: DVector::zeros(1),
            lambda: Mat::identity(2, 2),
            omega: Mat::from_element(2, 1, 2.0),
        };
        let (l, o) = empirical_lambda_omega(std::slice::from_ref(&a)).unwrap();
        assert_eq!(l, a.lambda);
        assert_eq!(o, a.omega);
        let (l, _) = empirical_lambda_omega(&[a.clone(), a.clone(), a]).unwrap();
        assert_eq!(l, Mat::identity(2, 2));
        assert!(empirical_lambda_omega(&[]).is_err());
    }

    #[test]
    fn empirical_lambda_concentrates_like_inverse_sqrt_n() {
        let m = model(6, ThetaSpec::Zero {});
        let s = Scheme::Masking { keep_prob: 0.5 };
        let pop = gaussian_population_lambda(&s, &m.covariance(), 1).1;
        let map = FeatureMap::identity(6).unwrap();
        let err = |n: usize| -> f64 {
            let reps = 200;
            let mut tot = 0.0;
            for r in 0..reps {
                let ds = m
                    .sample(n, &mut rng::substream(9, 1, (n * 1000 + r) as u64))
                    .unwrap();
                let a = augment_dataset(&s, &map, &ds.x, &ds.y, 2, 0).unwrap();
                tot += (a.lambda_mean - &pop).norm_squared();
            }
            (tot / reps as f64).sqrt()
        };
        let ratio = err(100) / err(400);
        assert!((1.4..=2.9).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn identity_augmentation_blocks_coincide() {
        let m = model(5, ThetaSpec::Ones { scale: 1.0 });
        let map = FeatureMap::random_mlp(5, &[8], 4, Activation::Tanh, 3).unwrap();
        let ms = estimate_moment_set(
            &map,
            &Scheme::Identity {},
            DataSource::Synthetic(&m),
            600,
            4,
            1,
        )
        .unwrap();
        assert_eq!(ms.sigma_prime, ms.sigma);
        assert_eq!(ms.sigma_double_prime, ms.sigma);
        assert_eq!(ms.g2, ms.g1);
        assert_eq!(ms.g3, ms.g1);
        assert_eq!(ms.g4, ms.g1);
        let ps = ms.psi[0];
        assert!(ps[(0, 0)] == ps[(0, 1)] && ps[(0, 1)] == ps[(1, 1)]);
        ms.check().unwrap();
    }

    #[test]
    fn sigma_converges_to_covariance() {
        let m = model(4, ThetaSpec::Zero {});
        let map = FeatureMap::identity(4).unwrap();
        let cov = m.covariance();
        let err = |n: usize| {
            let ms = estimate_moment_set(
                &map,
                &Scheme::Identity {},
                DataSource::Synthetic(&m),
                n,
                0,
                n as u64,
            )
            .unwrap();
            (ms.sigma - &cov).norm()
        };
        let (a, b) = (err(2_000), err(200_000));
        assert!(b < a / 3.0, "{a} -> {b}");
    }

    #[test]
    fn pure_noise_labels_give_zero_g1() {
        let m = model(4, ThetaSpec::Zero {});
        let map = FeatureMap::identity(4).unwrap();
        let ms = estimate_moment_set(
            &map,
            &Scheme::Identity {},
            DataSource::Synthetic(&m),
            1000,
            0,
            2,
        )
        .unwrap();
        assert!(ms.g1.iter().all(|v| *v == 0.0));
        assert!((ms.psi[0][(0, 0)] - 0.5).abs() < 1e-15);
        // Fixed-data path keeps the sampled noise: G1 is zero only within Monte-Carlo error.
        let ds = m.sample(20_000, &mut rng::seeded(3)).unwrap();
        let ms = estimate_moment_set(&map, &Scheme::Identity {}, DataSource::Fixed(&ds), 0, 0, 2)
            .unwrap();
        assert!(ms.is_plugin());
        for i in 0..4 {
            let se = (0.5 * ms.sigma[(i, i)] / 20_000.0).sqrt();
            assert!(ms.g1[(i, 0)].abs() < 3.5 * se);
        }
    }

    #[test]
    fn monte_carlo_moment_set_matches_closed_form() {
        let m = model(4, ThetaSpec::Ones { scale: 1.0 });
        let map = FeatureMap::identity(4).unwrap();
        let s = Scheme::SaltPepper {
            keep_prob: 0.5,
            replacement: Replacement::Isotropic { scale: 0.7 },
        };
        let est = estimate_moment_set(&map, &s, DataSource::Synthetic(&m), 200_000, 0, 5).unwrap();
        let cf = closed_form_moment_set(&m.covariance(), &m.theta_matrix(), 0.5, &s).unwrap();
        for (a, b) in [
            (&est.sigma, &cf.sigma),
            (&est.sigma_prime, &cf.sigma_prime),
            (&est.sigma_double_prime, &cf.sigma_double_prime),
            (&est.lambda_bar, &cf.lambda_bar),
            (&est.g1, &cf.g1),
            (&est.g4, &cf.g4),
        ] {
            assert!(linalg::max_abs_diff(a, b) < 0.02, "{a} vs {b}");
        }
        assert!((est.psi[0] - cf.psi[0]).norm() < 0.02);
        est.check().unwrap();
        cf.check().unwrap();
        assert!(linalg::is_psd(&est.stacked_second_moment(), 1e-8));
    }

    #[test]
    fn blocked_augmentation_is_invariant_to_thread_count() {
        let m = model(5, ThetaSpec::Ones { scale: 1.0 });
        let ds = m.sample(100, &mut rng::seeded(1)).unwrap();
        let map = FeatureMap::random_mlp(5, &[6], 4, Activation::Tanh, 2).unwrap();
        let s = Scheme::Masking { keep_prob: 0.7 };
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| augment_dataset(&s, &map, &ds.x, &ds.y, 8, 3).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.mu_x, b.mu_x);
        assert_eq!(a.lambda_mean, b.lambda_mean);
        // per-sample agreement with the single-sample path
        let one = per_sample_moments(
            &s,
            &map,
            ds.x.column(37).as_slice(),
            ds.y.column(37).as_slice(),
            8,
            &mut rng::substream(3, rng::domain::MOMENTS, 37),
        )
        .unwrap();
        assert!((one.mu_x - a.mu_x.column(37)).norm() < 1e-14);
    }

    #[test]
    fn closed_form_sums_match_per_sample() {
        let x = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 1.5, -1.0]);
        let y = Mat::from_row_slice(1, 3, &[0.2, 0.4, -0.1]);
        let s = Scheme::Mixture {
            components: vec![
                Scheme::Masking { keep_prob: 0.3 },
                Scheme::SaltPepper {
                    keep_prob: 0.6,
                    replacement: Replacement::Isotropic { scale: 0.5 },
                },
                Scheme::Heteroskedastic {
                    s_x: Mat::from_row_slice(2, 1, &[0.2, 0.1]),
                    s_y: Mat::from_row_slice(1, 1, &[0.3]),
                },
            ],
            weights: vec![0.2, 0.5, 0.3],
        };
        let (mx, _, lam, om) = closed_form_sums(&s, &x, &y).unwrap();
        let mut lam2 = Mat::zeros(2, 2);
        let mut om2 = Mat::zeros(2, 1);
        for j in 0..3 {
            let m = s
                .closed_form_moments(x.column(j).as_slice(), y.column(j).as_slice())
                .unwrap();
            assert!((&m.mu_x - mx.column(j)).norm() < 1e-14);
            lam2 += m.lambda;
            om2 += m.omega;
        }
        assert!((lam - lam2).norm() < 1e-13);
        assert!((om - om2).norm() < 1e-13);
    }

    #[test]
    fn csv_dump_round_trip() {
        let m = model(3, ThetaSpec::Ones { scale: 1.0 });
        let cf = closed_form_moment_set(
            &m.covariance(),
            &m.theta_matrix(),
            0.5,
            &Scheme::Masking { keep_prob: 0.4 },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ms.csv");
        cf.write_csv(&p).unwrap();
        assert_eq!(MomentSet::read_csv(&p).unwrap(), cf);
        let ds = m.sample(50, &mut rng::seeded(0)).unwrap();
        let plug = estimate_moment_set(
            &FeatureMap::identity(3).unwrap(),
            &Scheme::Identity {},
            DataSource::Fixed(&ds),
            0,
            0,
            0,
        )
        .unwrap();
        plug.write_csv(&p).unwrap();
        assert_eq!(MomentSet::read_csv(&p).unwrap(), plug);
    }
}
