//! Univariate linear mixed model with independent scalar variance components,
//! fitted by maximum likelihood or REML.
//!
//! `y = Xβ + Σ_l Z_l u_l + e`, `u_l ~ N(0, σ_l² I)`, `e ~ N(0, σ_e² I)`.
//! The residual variance is profiled out and the remaining variance ratios
//! `σ_l²/σ_e²` are optimized on the log scale from several starting points.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Spd};
use crate::optim;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ml,
    Reml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::Reml => "reml",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "reml" => Ok(Method::Reml),
            other => Err(Error::Input(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomEffect {
    pub name: String,
    /// `n × d_l` incidence matrix.
    pub z: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LmmSpec {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub random: Vec<RandomEffect>,
}

impl LmmSpec {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, random: Vec<RandomEffect>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, x, names, random)
    }

    pub fn with_names(
        y: DVector<f64>,
        x: DMatrix<f64>,
        x_names: Vec<String>,
        random: Vec<RandomEffect>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n {
            return Err(Error::Dimension(format!("X has {} rows, y has {n}", x.nrows())));
        }
        if x_names.len() != x.ncols() {
            return Err(Error::Dimension("x_names length".into()));
        }
        for r in &random {
            if r.z.nrows() != n {
                return Err(Error::Dimension(format!("random effect `{}` rows", r.name)));
            }
        }
        if n <= x.ncols() {
            return Err(Error::Inestimable(format!("n = {n} does not exceed p = {}", x.ncols())));
        }
        let rank = linalg::rank(&x, 1e-10);
        if rank < x.ncols() {
            return Err(Error::RankDeficient { rank, cols: x.ncols() });
        }
        Ok(Self { y, x, x_names, random })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `V = σ_e² I + Σ σ_l² Z_l Z_lᵀ`.
    pub fn covariance(&self, sigma_e2: f64, var_comps: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut v = DMatrix::identity(n, n) * sigma_e2;
        for (r, &s) in self.random.iter().zip(var_comps) {
            v += &r.z * r.z.transpose() * s;
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct LmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Common starting variance ratio for every component, one run each.
    pub start_ratios: Vec<f64>,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            start_ratios: vec![0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub beta: DVector<f64>,
    pub x_names: Vec<String>,
    pub sigma_e2: f64,
    pub var_comps: Vec<f64>,
    pub var_names: Vec<String>,
    /// Plug-in GLS covariance of β̂.
    pub beta_cov: DMatrix<f64>,
    pub loglik: f64,
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    /// Components reported as exactly zero.
    pub boundary: Vec<bool>,
    /// False when the variance components cannot be separated (some `Z_l Z_lᵀ`
    /// is a linear combination of the identity and the others).
    pub identifiable: bool,
}

impl LmmFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.x_names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn coef_index(&self, name: &str) -> Option<usize> {
        self.x_names.iter().position(|n| n == name)
    }
}

struct Profile {
    loglik: f64,
    beta: DVector<f64>,
    sigma_e2: f64,
    /// (Xᵀ H⁻¹ X)⁻¹ with `V = σ_e² H`.
    xthx_inv: DMatrix<f64>,
}

/// Cross products reused by every profile evaluation. With `Z = [Z_1 … Z_q]`
/// and `H = I + Z D Zᵀ`, `D = diag(r_l I)`, Woodbury gives
/// `H⁻¹ = I − Z M⁻¹ Zᵀ` and `|H| = |D||M|` for `M = D⁻¹ + ZᵀZ`.
struct Cross {
    z: DMatrix<f64>,
    /// Column range of each component in `z`.
    ranges: Vec<(usize, usize)>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

impl Cross {
    fn new(spec: &LmmSpec) -> Self {
        let n = spec.n();
        let d: usize = spec.random.iter().map(|r| r.z.ncols()).sum();
        let mut z = DMatrix::zeros(n, d);
        let mut ranges = Vec::new();
        let mut at = 0;
        for r in &spec.random {
            z.columns_mut(at, r.z.ncols()).copy_from(&r.z);
            ranges.push((at, r.z.ncols()));
            at += r.z.ncols();
        }
        let zt = z.transpose();
        Self {
            ztz: &zt * &z,
            ztx: &zt * &spec.x,
            zty: &zt * &spec.y,
            xtx: spec.x.transpose() * &spec.x,
            xty: spec.x.transpose() * &spec.y,
            z,
            ranges,
        }
    }
}

fn profile(spec: &LmmSpec, cross: &Cross, ratios: &[f64], method: Method) -> Result<Profile> {
    let n = spec.n();
    let p = spec.p();
    let active: Vec<usize> = cross
        .ranges
        .iter()
        .zip(ratios)
        .filter(|(_, &r)| r > 0.0)
        .flat_map(|(&(s, len), _)| s..s + len)
        .collect();
    let mut logdet_h = 0.0;
    let (xthx, xthy, m_chol) = if active.is_empty() {
        (cross.xtx.clone(), cross.xty.clone(), None)
    } else {
        let k = active.len();
        let mut m = cross.ztz.select_rows(&active).select_columns(&active);
        let mut pos = 0;
        for (&(_, len), &r) in cross.ranges.iter().zip(ratios) {
            if r > 0.0 {
                for i in pos..pos + len {
                    m[(i, i)] += 1.0 / r;
                }
                logdet_h += len as f64 * r.ln();
                pos += len;
            }
        }
        debug_assert_eq!(pos, k);
        let mc = Spd::new(&m, "marginal covariance")?;
        logdet_h += mc.log_det();
        let zx = cross.ztx.select_rows(&active);
        let zy = cross.zty.select_rows(&active);
        let mzx = mc.solve(&zx);
        let xthx = &cross.xtx - zx.transpose() * &mzx;
        let xthy = &cross.xty - mzx.transpose() * &zy;
        (xthx, xthy, Some(mc))
    };
    let info = Spd::new(&xthx, "XᵀH⁻¹X")?;
    let beta = info.solve_vec(&xthy);
    let xthx_inv = info.inverse();
    let resid = &spec.y - &spec.x * &beta;
    let mut rss = resid.norm_squared();
    if let Some(mc) = &m_chol {
        let zr = cross.z.select_columns(&active).transpose() * &resid;
        rss -= zr.dot(&mc.solve_vec(&zr));
    }
    let (dof, extra) = match method {
        Method::Ml => (n as f64, 0.0),
        Method::Reml => (n as f64 - p as f64, info.log_det()),
    };
    let sigma_e2 = rss / dof;
    if !(sigma_e2 > 0.0) {
        return Err(Error::Singular("zero residual variance".into()));
    }
    let loglik = -0.5 * (dof * (LN_2PI + sigma_e2.ln()) + logdet_h + extra + dof);
    Ok(Profile { loglik, beta, sigma_e2, xthx_inv })
}

/// Log-likelihood (ML) or restricted log-likelihood (REML) at explicit
/// variance components, with β at its GLS value.
pub fn loglik_at(spec: &LmmSpec, method: Method, sigma_e2: f64, var_comps: &[f64]) -> Result<f64> {
    let v = spec.covariance(sigma_e2, var_comps);
    let vc = Spd::new(&v, "V")?;
    let vx = vc.solve(&spec.x);
    let vy = vc.solve_vec(&spec.y);
    let (beta, _) = linalg::weighted_ls(&spec.x, &vx, &vy)?;
    let r = &spec.y - &spec.x * beta;
    let quad = r.dot(&vc.solve_vec(&r));
    let n = spec.n() as f64;
    Ok(match method {
        Method::Ml => -0.5 * (n * LN_2PI + vc.log_det() + quad),
        Method::Reml => {
            let p = spec.p() as f64;
            let xtvx = spec.x.transpose() * vx;
            -0.5 * ((n - p) * LN_2PI + vc.log_det() + Spd::new(&xtvx, "XᵀV⁻¹X")?.log_det() + quad)
        }
    })
}

/// GLS estimate and its covariance at fixed variance components.
pub fn gls_at(spec: &LmmSpec, sigma_e2: f64, var_comps: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let v = spec.covariance(sigma_e2, var_comps);
    let vc = Spd::new(&v, "V")?;
    let vx = vc.solve(&spec.x);
    let vy = vc.solve_vec(&spec.y);
    linalg::weighted_ls(&spec.x, &vx, &vy)
}

/// Rank of the Frobenius Gram matrix of `{I, Z_1Z_1ᵀ, …}`, using
/// `⟨Z_iZ_iᵀ, Z_jZ_jᵀ⟩ = ‖Z_iᵀZ_j‖²`.
fn identifiable(spec: &LmmSpec) -> bool {
    let k = spec.random.len() + 1;
    let mut gram = DMatrix::zeros(k, k);
    gram[(0, 0)] = spec.n() as f64;
    for (i, a) in spec.random.iter().enumerate() {
        let v = a.z.norm_squared();
        gram[(0, i + 1)] = v;
        gram[(i + 1, 0)] = v;
        for (j, b) in spec.random.iter().enumerate() {
            gram[(i + 1, j + 1)] = (a.z.transpose() * &b.z).norm_squared();
        }
    }
    linalg::rank(&gram, 1e-10) == k
}

pub fn fit_lmm(spec: &LmmSpec, method: Method, opts: &LmmOptions) -> Result<LmmFit> {
    let cross = Cross::new(spec);
    let q = spec.random.len();
    let opt = optim::Options {
        max_iter: opts.max_iter,
        grad_tol: opts.tol,
        ..optim::Options::default()
    };
    let objective = |theta: &[f64]| -> f64 {
        let ratios: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        match profile(spec, &cross, &ratios, method) {
            Ok(p) => -p.loglik,
            Err(_) => f64::INFINITY,
        }
    };

    let mut best: Option<optim::Minimum> = None;
    let mut total_iter = 0;
    for &start in &opts.start_ratios {
        let x0 = vec![start.ln(); q];
        let m = optim::minimize(objective, &x0, &opt);
        total_iter += m.iterations;
        let better = match &best {
            None => true,
            Some(b) => m.f < b.f - 1e-12 || (m.f <= b.f + 1e-12 && m.converged && !b.converged),
        };
        if better {
            best = Some(m);
        }
        if q == 0 {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Input("no starting points".into()))?;
    if !best.f.is_finite() {
        return Err(Error::Singular("likelihood undefined at every start".into()));
    }

    let mut ratios: Vec<f64> = best.x.iter().map(|t| t.exp()).collect();
    let prof = profile(spec, &cross, &ratios, method)?;
    let yvar = sample_variance(&spec.y);
    let mut boundary = vec![false; q];
    for l in 0..q {
        if ratios[l] * prof.sigma_e2 < 1e-10 * yvar {
            ratios[l] = 0.0;
            boundary[l] = true;
        }
    }
    let prof = if boundary.iter().any(|&b| b) {
        profile(spec, &cross, &ratios, method)?
    } else {
        prof
    };
    let var_comps: Vec<f64> = ratios.iter().map(|r| r * prof.sigma_e2).collect();
    let beta_cov = &prof.xthx_inv * prof.sigma_e2;
    Ok(LmmFit {
        beta: prof.beta,
        x_names: spec.x_names.clone(),
        sigma_e2: prof.sigma_e2,
        var_comps,
        var_names: spec.random.iter().map(|r| r.name.clone()).collect(),
        beta_cov,
        loglik: prof.loglik,
        method,
        converged: best.converged,
        iterations: total_iter,
        boundary,
        identifiable: identifiable(spec),
    })
}

fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.mean();
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).max(f64::MIN_POSITIVE)
}

/// `cᵀβ̂` and `sqrt(cᵀ cov c)`.
pub fn contrast(fit: &LmmFit, coeffs: &[f64]) -> Result<(f64, f64)> {
    contrast_with(&fit.beta, &fit.beta_cov, coeffs)
}

pub fn contrast_with(beta: &DVector<f64>, cov: &DMatrix<f64>, coeffs: &[f64]) -> Result<(f64, f64)> {
    if coeffs.len() != beta.len() {
        return Err(Error::Dimension(format!(
            "contrast has {} coefficients, model has {}",
            coeffs.len(),
            beta.len()
        )));
    }
    let c = DVector::from_column_slice(coeffs);
    let est = c.dot(beta);
    let var = (c.transpose() * cov * &c)[(0, 0)];
    Ok((est, var.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn block_incidence(n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |i, j| if i % d == j { 1.0 } else { 0.0 })
    }

    fn random_instance(seed: u64) -> LmmSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let d = 5;
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() * 2.0 });
        let w = block_incidence(n, d);
        let u: Vec<f64> = (0..d).map(|_| 1.5 * draw()).collect();
        let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * x[(i, 1)] + u[i % d] + draw());
        LmmSpec::new(y, x, vec![RandomEffect { name: "block".into(), z: w }]).unwrap()
    }

    /// Dense grid over the log variance ratio followed by golden-section
    /// refinement of the profile likelihood.
    fn brute_force_profile_max(spec: &LmmSpec, method: Method) -> f64 {
        // dense profile: σ_e² at its closed-form maximizer for the ratio
        let f = |lr: f64| -> f64 {
            let r = lr.exp();
            let h = spec.covariance(1.0, &[r]);
            let hc = Spd::new(&h, "").unwrap();
            let (beta, _) = gls_at(spec, 1.0, &[r]).unwrap();
            let resid = &spec.y - &spec.x * beta;
            let dof = match method {
                Method::Ml => spec.n() as f64,
                Method::Reml => (spec.n() - spec.p()) as f64,
            };
            let s2 = resid.dot(&hc.solve_vec(&resid)) / dof;
            loglik_at(spec, method, s2, &[r * s2]).unwrap_or(f64::NEG_INFINITY)
        };
        let grid: Vec<f64> = (0..=2000).map(|i| -12.0 + 20.0 * i as f64 / 2000.0).collect();
        let (mut best_i, mut best) = (0, f64::NEG_INFINITY);
        for (i, &g) in grid.iter().enumerate() {
            let v = f(g);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        let (mut a, mut b) = (grid[best_i.saturating_sub(1)], grid[(best_i + 1).min(grid.len() - 1)]);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b)).max(best)
    }

    #[test]
    fn ml_matches_brute_force_profile() {
        for seed in [1, 2, 3] {
            let spec = random_instance(seed);
            let fit = fit_lmm(&spec, Method::Ml, &LmmOptions::default()).unwrap();
            let oracle = brute_force_profile_max(&spec, Method::Ml);
            assert!((fit.loglik - oracle).abs() < 1e-6, "seed {seed}: {} vs {oracle}", fit.loglik);
            assert!(fit.converged);
        }
    }

    #[test]
    fn reml_matches_brute_force_profile() {
        let spec = random_instance(4);
        let fit = fit_lmm(&spec, Method::Reml, &LmmOptions::default()).unwrap();
        let oracle = brute_force_profile_max(&spec, Method::Reml);
        assert!((fit.loglik - oracle).abs() < 1e-6);
    }

    #[test]
    fn reported_loglik_matches_direct_density() {
        let spec = random_instance(5);
        for method in [Method::Ml, Method::Reml] {
            let fit = fit_lmm(&spec, method, &LmmOptions::default()).unwrap();
            let direct = loglik_at(&spec, method, fit.sigma_e2, &fit.var_comps).unwrap();
            assert!((fit.loglik - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn gls_identity_at_fit() {
        let spec = random_instance(6);
        let fit = fit_lmm(&spec, Method::Ml, &LmmOptions::default()).unwrap();
        let v = spec.covariance(fit.sigma_e2, &fit.var_comps);
        let vinv = v.try_inverse().unwrap();
        let xtvx = spec.x.transpose() * &vinv * &spec.x;
        let beta = xtvx.clone().try_inverse().unwrap() * spec.x.transpose() * &vinv * &spec.y;
        assert!((beta - &fit.beta).amax() < 1e-9);
        assert!((xtvx.try_inverse().unwrap() - &fit.beta_cov).amax() < 1e-9);
    }

    #[test]
    fn ml_beats_random_points() {
        let spec = random_instance(7);
        let fit = fit_lmm(&spec, Method::Ml, &LmmOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let se = fit.sigma_e2 * (0.8 * a).exp();
            let sb = fit.var_comps[0] * (1.5 * b).exp();
            assert!(loglik_at(&spec, Method::Ml, se, &[sb]).unwrap() <= fit.loglik + 1e-9);
        }
    }

    #[test]
    fn scaling_response() {
        let spec = random_instance(8);
        let c = 3.0;
        let scaled = LmmSpec::new(&spec.y * c, spec.x.clone(), spec.random.clone()).unwrap();
        for method in [Method::Ml, Method::Reml] {
            let a = fit_lmm(&spec, method, &LmmOptions::default()).unwrap();
            let b = fit_lmm(&scaled, method, &LmmOptions::default()).unwrap();
            assert!((&b.beta - &a.beta * c).amax() < 1e-5 * c);
            assert!((b.sigma_e2 - a.sigma_e2 * c * c).abs() < 1e-5 * b.sigma_e2);
            assert!((b.var_comps[0] - a.var_comps[0] * c * c).abs() < 1e-5 * b.var_comps[0]);
            let dof = match method {
                Method::Ml => spec.n() as f64,
                Method::Reml => (spec.n() - spec.p()) as f64,
            };
            assert!((b.loglik - (a.loglik - dof * c.ln())).abs() < 1e-7);
        }
    }

    #[test]
    fn duplicated_residual_is_flagged() {
        let base = random_instance(9);
        let n = base.n();
        let spec = LmmSpec::new(
            base.y.clone(),
            base.x.clone(),
            vec![RandomEffect { name: "dup".into(), z: DMatrix::identity(n, n) }],
        )
        .unwrap();
        let fit = fit_lmm(&spec, Method::Ml, &LmmOptions::default()).unwrap();
        assert!(!fit.identifiable);
        // Total variance is what the likelihood sees: compare with the
        // no-random-effect fit.
        let plain = LmmSpec::new(base.y.clone(), base.x.clone(), vec![]).unwrap();
        let pf = fit_lmm(&plain, Method::Ml, &LmmOptions::default()).unwrap();
        assert!((fit.loglik - pf.loglik).abs() < 1e-7);
        assert!((fit.sigma_e2 + fit.var_comps[0] - pf.sigma_e2).abs() < 1e-6 * pf.sigma_e2);
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let base = random_instance(10);
        let mut x = base.x.clone().insert_column(2, 0.0);
        let c0 = x.column(0).clone_owned();
        x.set_column(2, &(c0 * 2.0));
        assert!(matches!(
            LmmSpec::new(base.y, x, base.random),
            Err(Error::RankDeficient { rank: 2, cols: 3 })
        ));
    }

    #[test]
    fn contrast_unit_vector() {
        let spec = random_instance(11);
        let fit = fit_lmm(&spec, Method::Reml, &LmmOptions::default()).unwrap();
        let (e, se) = contrast(&fit, &[1.0, 0.0]).unwrap();
        assert_eq!(e, fit.beta[0]);
        assert!((se - fit.beta_cov[(0, 0)].sqrt()).abs() < 1e-15);
        assert!(contrast(&fit, &[1.0]).is_err());
    }
}
