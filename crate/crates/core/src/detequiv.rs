//! Deterministic equivalents: the 2×2 dilation fixed point, its
//! ζ-derivative and the resulting risk predictions.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::moments::MomentSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// η in B ← (1−η)B + ηB⁺.
    pub damping: f64,
    /// Shift ζ added as ζΣ inside the resolvent.
    pub zeta: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            zeta: 0.0,
        }
    }
}

/// Solution of the dilation fixed point for one (α, λ, n).
#[derive(Clone, Debug)]
pub struct DilationState {
    pub w: Matrix2<f64>,
    pub b: Matrix2<f64>,
    /// Trace matrix at `b`.
    pub a: Matrix2<f64>,
    /// R̄ = (Σ̄(B) + αΛ̄ + λI + ζΣ)⁻¹ at `b`.
    pub r_bar: Mat,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// ‖B⁺ − B‖_F at each iteration.
    pub history: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub n: f64,
    pub zeta: f64,
}

impl DilationState {
    /// β = b₁₁ + 2b₁₂ + b₂₂
    pub fn beta(&self) -> f64 {
        self.b[(0, 0)] + 2.0 * self.b[(0, 1)] + self.b[(1, 1)]
    }

    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }

    /// 0 ⪯ B ⪯ W² up to `tol`.
    pub fn within_loewner_bounds(&self, tol: f64) -> bool {
        let (lo, _) = linalg::sym2_eigenvalues(&self.b);
        let (gap, _) = linalg::sym2_eigenvalues(&(self.w * self.w - self.b));
        lo >= -tol && gap >= -tol
    }
}

pub fn dilation_weights(alpha: f64) -> Matrix2<f64> {
    Matrix2::new((1.0 - alpha).sqrt(), 0.0, 0.0, alpha.sqrt())
}

/// Σ̄(B) = b₁₁Σ + b₁₂(Σ′+Σ′ᵀ) + b₂₂Σ″
pub fn sigma_bar(ms: &MomentSet, b: &Matrix2<f64>) -> Mat {
    let mut out = &ms.sigma * b[(0, 0)] + &ms.sigma_double_prime * b[(1, 1)];
    if b[(0, 1)] != 0.0 {
        out += (&ms.sigma_prime + ms.sigma_prime.transpose()) * b[(0, 1)];
    }
    out
}

/// b₁₁G₁ + b₁₂(G₂+G₃) + b₂₂G₄
pub fn gamma_bar(ms: &MomentSet, b: &Matrix2<f64>) -> Mat {
    &ms.g1 * b[(0, 0)] + (&ms.g2 + &ms.g3) * b[(0, 1)] + &ms.g4 * b[(1, 1)]
}

fn resolvent(ms: &MomentSet, b: &Matrix2<f64>, alpha: f64, lambda: f64, zeta: f64) -> Result<Mat> {
    let p = ms.p();
    let mut m = sigma_bar(ms, b) + &ms.lambda_bar * alpha + Mat::identity(p, p) * lambda;
    if zeta != 0.0 {
        m += &ms.sigma * zeta;
    }
    linalg::symmetrize_in_place(&mut m);
    Ok(linalg::spd_factor(
        &m,
        "deterministic resolvent argument is not positive definite",
    )?
    .inverse())
}

fn trace_matrix(ms: &MomentSet, r: &Mat) -> Matrix2<f64> {
    let t11 = linalg::trace_product(&ms.sigma, r);
    let t12 = linalg::trace_product(&ms.sigma_prime, r);
    let t22 = linalg::trace_product(&ms.sigma_double_prime, r);
    Matrix2::new(t11, t12, t12, t22)
}

fn update(w: &Matrix2<f64>, a: &Matrix2<f64>, n: f64) -> Result<Matrix2<f64>> {
    let k = Matrix2::identity() + w * a * w / n;
    let inv = k.try_inverse().ok_or_else(|| Error::NumericalFailure {
        context: "fixed-point update matrix is singular".into(),
        min_eigenvalue: linalg::sym2_eigenvalues(&k).0,
    })?;
    let b = w * inv * w;
    Ok((b + b.transpose()) * 0.5)
}

fn check_inputs(ms: &MomentSet, alpha: f64, lambda: f64, n: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("lambda must be > 0, got {lambda}")));
    }
    if !(n > 0.0) {
        return Err(Error::param(format!("n must be positive, got {n}")));
    }
    if ms.p() == 0 {
        return Err(Error::EmptyInput("moment set has p = 0".into()));
    }
    Ok(())
}

/// Damped Picard iteration for B = W(I + n⁻¹WAW)⁻¹W from B₀ = W².
/// `n` may be infinite. Hitting `max_iter` returns a state with
/// `converged = false` rather than an error.
pub fn solve_fixed_point(
    ms: &MomentSet,
    alpha: f64,
    lambda: f64,
    n: f64,
    opts: &FixedPointOptions,
) -> Result<DilationState> {
    check_inputs(ms, alpha, lambda, n)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::param("damping must lie in (0, 1]"));
    }
    let w = dilation_weights(alpha);
    let mut b = w * w;
    let mut history = Vec::new();
    let mut converged = false;
    let (mut r, mut a) = (Mat::zeros(0, 0), Matrix2::zeros());
    for _ in 0..opts.max_iter {
        r = resolvent(ms, &b, alpha, lambda, opts.zeta)?;
        a = trace_matrix(ms, &r);
        let next = update(&w, &a, n)?;
        let res = (next - b).norm();
        history.push(res);
        if !res.is_finite() {
            break;
        }
        if res <= opts.tol {
            converged = true;
            break;
        }
        b = b * (1.0 - opts.damping) + next * opts.damping;
    }
    let residual = history.last().copied().unwrap_or(f64::INFINITY);
    if !converged {
        log::warn!(
            "fixed point did not converge (alpha={alpha}, lambda={lambda}, n={n}): residual {residual:.3e} after {} iterations",
            history.len()
        );
        r = resolvent(ms, &b, alpha, lambda, opts.zeta)?;
        a = trace_matrix(ms, &r);
    }
    Ok(DilationState {
        w,
        b,
        a,
        r_bar: r,
        iterations: history.len(),
        residual,
        converged,
        history,
        alpha,
        lambda,
        n,
        zeta: opts.zeta,
    })
}

/// How the ζ-derivative D = ∂B/∂ζ is closed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    /// Solves D = n⁻¹BC̄B + n⁻¹B T(Σ̄(D)) B, the exact derivative of the fixed point.
    #[default]
    SelfConsistent,
    /// Keeps only the direct term D = n⁻¹BC̄B.
    Plugin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrder {
    pub d: Matrix2<f64>,
    /// The direct term n⁻¹BC̄B.
    pub d_plugin: Matrix2<f64>,
    /// C̄ = [[tr ΣR̄ΣR̄, tr Σ′R̄ΣR̄], [·, tr Σ″R̄ΣR̄]].
    pub c_bar: Matrix2<f64>,
    pub closure: Closure,
}

impl SecondOrder {
    /// δ = d₁₁ + 2d₁₂ + d₂₂
    pub fn delta(&self) -> f64 {
        self.d[(0, 0)] + 2.0 * self.d[(0, 1)] + self.d[(1, 1)]
    }
}

fn sym_from(v: &Vector3<f64>) -> Matrix2<f64> {
    Matrix2::new(v[0], v[1], v[1], v[2])
}

pub fn compute_second_order(
    state: &DilationState,
    ms: &MomentSet,
    closure: Closure,
) -> Result<SecondOrder> {
    let r = &state.r_bar;
    let b = &state.b;
    if state.n.is_infinite() {
        let z = Matrix2::zeros();
        return Ok(SecondOrder {
            d: z,
            d_plugin: z,
            c_bar: z,
            closure,
        });
    }
    let p1 = &ms.sigma * r;
    let p2 = &ms.sigma_prime * r;
    let p3 = &ms.sigma_double_prime * r;
    // tr(P_k Q_m) for the directions Σ, Σ′+Σ′ᵀ, Σ″ of Σ̄.
    let tr = |x: &Mat, y: &Mat| {
        x.iter()
            .zip(y.transpose().iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let c_bar = Matrix2::new(tr(&p1, &p1), tr(&p2, &p1), tr(&p2, &p1), tr(&p3, &p1));
    let d_plugin = b * c_bar * b / state.n;
    let d = match closure {
        Closure::Plugin => d_plugin,
        Closure::SelfConsistent => {
            let q2 = &p2 + ms.sigma_prime.transpose() * r;
            let ps = [&p1, &p2, &p3];
            let qs = [&p1, &q2, &p3];
            let mut tau = Matrix3::zeros();
            for (k, pk) in ps.iter().enumerate() {
                for (m, qm) in qs.iter().enumerate() {
                    tau[(k, m)] = tr(pk, qm);
                }
            }
            let mut lin = Matrix3::zeros();
            for m in 0..3 {
                let mut e = Vector3::zeros();
                e[m] = 1.0;
                let col = tau * e;
                let img = b * sym_from(&col) * b / state.n;
                lin.set_column(m, &Vector3::new(img[(0, 0)], img[(0, 1)], img[(1, 1)]));
            }
            let rhs = Vector3::new(d_plugin[(0, 0)], d_plugin[(0, 1)], d_plugin[(1, 1)]);
            let sys = Matrix3::identity() - lin;
            let sol = sys
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NumericalFailure {
                    context: "second-order closure system is singular".into(),
                    min_eigenvalue: 0.0,
                })?;
            sym_from(&sol)
        }
    };
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure {
            context: "second-order matrix is not finite".into(),
            min_eigenvalue: f64::NAN,
        });
    }
    Ok(SecondOrder {
        d,
        d_plugin,
        c_bar,
        closure,
    })
}

/// Ground truth used for the risk terms that involve θ⋆.
#[derive(Clone, Copy, Debug)]
pub enum Truth<'a> {
    /// θ⋆ as a p⋆×q matrix; needs Σ⋆ blocks in the moment set.
    Known(&'a Mat),
    /// θ⋆ᵀΣ⋆⋆θ⋆ + σ² ← E[Y²] and the overlap ← G₁ᵀθ̄.
    Plugin,
}

/// Deterministic risk predictions, averaged over outputs.
#[derive(Clone, Debug)]
pub struct EquivalentReport {
    /// p×q
    pub theta_bar: Mat,
    pub g_bar: f64,
    pub overlap_bar: f64,
    pub chi_bar: f64,
    pub bias2_bar: f64,
    pub var_bar: f64,
    pub beta: f64,
    pub delta: f64,
}

/// θ̄ = R̄(Γ̄ + αΩ̄)
pub fn theta_bar(state: &DilationState, ms: &MomentSet) -> Mat {
    &state.r_bar * (gamma_bar(ms, &state.b) + &ms.omega_bar * state.alpha)
}

pub fn equivalents(
    state: &DilationState,
    so: &SecondOrder,
    ms: &MomentSet,
    truth: Truth<'_>,
    sigma2: f64,
) -> Result<EquivalentReport> {
    let q = ms.q();
    let th = theta_bar(state, ms);
    let d = &so.d;
    let sig_p = sigma_bar(ms, d) + &ms.sigma;
    let gam_p = gamma_bar(ms, d);
    let known = match truth {
        Truth::Known(ts) => {
            let (ss, sss) = match (&ms.sigma_star, &ms.sigma_star_star) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::UnsupportedInPluginMode(
                        "known-truth equivalents need SigmaStar blocks".into(),
                    ))
                }
            };
            if ts.nrows() != sss.nrows() || ts.ncols() != q {
                return Err(Error::dim("theta_star shape does not match the moment set"));
            }
            Some((ts, ss, sss))
        }
        Truth::Plugin => None,
    };
    let mut r = EquivalentReport {
        theta_bar: th.clone(),
        g_bar: 0.0,
        overlap_bar: 0.0,
        chi_bar: 0.0,
        bias2_bar: 0.0,
        var_bar: 0.0,
        beta: state.beta(),
        delta: so.delta(),
    };
    for j in 0..q {
        let t = th.column(j);
        let psi = &ms.psi[j];
        let gamma =
            d[(0, 0)] * psi[(0, 0)] + 2.0 * d[(0, 1)] * psi[(0, 1)] + d[(1, 1)] * psi[(1, 1)];
        let chi = t.dot(&(&sig_p * t)) - 2.0 * t.dot(&gam_p.column(j)) + gamma;
        let (signal, overlap) = match known {
            Some((ts, ss, sss)) => {
                let s = ts.column(j);
                (s.dot(&(sss * s)), s.dot(&(ss * t)))
            }
            None => (psi[(0, 0)] - sigma2, ms.g1.column(j).dot(&t)),
        };
        let g = signal + sigma2 - 2.0 * overlap + chi;
        let bias2 = t.dot(&(&ms.sigma * t)) + signal - 2.0 * overlap;
        r.g_bar += g;
        r.overlap_bar += overlap;
        r.chi_bar += chi;
        r.bias2_bar += bias2;
        r.var_bar += g - bias2;
    }
    let qf = q as f64;
    r.g_bar /= qf;
    r.overlap_bar /= qf;
    r.chi_bar /= qf;
    r.bias2_bar /= qf;
    r.var_bar /= qf;
    Ok(r)
}

/// Full prediction for one (α, λ, n).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub state: DilationState,
    pub second_order: SecondOrder,
    pub report: EquivalentReport,
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    ms: &MomentSet,
    truth: Truth<'_>,
    sigma2: f64,
    alpha: f64,
    lambda: f64,
    n: f64,
    opts: &FixedPointOptions,
    closure: Closure,
) -> Result<Prediction> {
    let state = solve_fixed_point(ms, alpha, lambda, n, opts)?;
    let second_order = compute_second_order(&state, ms, closure)?;
    let report = equivalents(&state, &second_order, ms, truth, sigma2)?;
    Ok(Prediction {
        state,
        second_order,
        report,
    })
}

/// Scalar form for unbiased label-preserving schemes.
#[derive(Clone, Debug)]
pub struct WellSpecified {
    pub beta: f64,
    pub delta: f64,
    pub theta_bar: Mat,
    /// (1+δ)[(θ̄−θ⋆)ᵀΣ(θ̄−θ⋆) + σ²], averaged over outputs.
    pub g_bar: f64,
}

fn rel_close(a: &Mat, b: &Mat, tol: f64) -> bool {
    linalg::max_abs_diff(a, b) <= tol * (1.0 + a.amax().max(b.amax()))
}

/// Requires Σ = Σ′ = Σ″ = Σ⋆ = Σ⋆⋆, G₁ = … = G₄ and equal PsiSecond entries.
pub fn wellspecified_reduction(
    state: &DilationState,
    so: &SecondOrder,
    ms: &MomentSet,
    theta_star: &Mat,
    sigma2: f64,
) -> Result<WellSpecified> {
    const TOL: f64 = 1e-6;
    let s = &ms.sigma;
    let mut ok = rel_close(s, &ms.sigma_prime, TOL) && rel_close(s, &ms.sigma_double_prime, TOL);
    ok &= matches!((&ms.sigma_star, &ms.sigma_star_star), (Some(a), Some(b)) if rel_close(s, a, TOL) && rel_close(s, b, TOL));
    ok &= rel_close(&ms.g1, &ms.g2, TOL)
        && rel_close(&ms.g1, &ms.g3, TOL)
        && rel_close(&ms.g1, &ms.g4, TOL);
    ok &= ms.psi.iter().all(|m| {
        let v = m[(0, 0)];
        m.iter().all(|x| (x - v).abs() <= TOL * (1.0 + v.abs()))
    });
    if !ok {
        return Err(Error::PreconditionViolation(
            "scalar reduction needs an unbiased label-preserving scheme with well-specified features".into(),
        ));
    }
    if theta_star.nrows() != ms.p() || theta_star.ncols() != ms.q() {
        return Err(Error::dim(
            "theta_star must be p×q for the scalar reduction",
        ));
    }
    let beta = state.beta();
    let delta = so.delta();
    let alpha = state.alpha;
    let p = ms.p();
    let m = s * beta + &ms.lambda_bar * alpha + Mat::identity(p, p) * state.lambda;
    let rhs = &ms.g1 * beta + &ms.omega_bar * alpha;
    let theta_bar =
        linalg::spd_factor(&m, "scalar reduction system is not positive definite")?.solve(&rhs);
    let err = &theta_bar - theta_star;
    let mut g = 0.0;
    for j in 0..ms.q() {
        let e = err.column(j);
        g += (1.0 + delta) * (e.dot(&(s * e)) + sigma2);
    }
    Ok(WellSpecified {
        beta,
        delta,
        theta_bar,
        g_bar: g / ms.q() as f64,
    })
}
