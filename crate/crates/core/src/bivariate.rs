//! Joint response–covariate variance-components model for blocked designs.
//!
//! Within each block the pair `(Y_j, Z_j)` is normal with block covariance
//! `Σ_B` shared by all plots and residual covariance `Σ_E`. Rotating each
//! block by the Helmert matrix makes the `t` contrast pairs independent:
//! contrast 1 carries `Σ_E + tΣ_B`, contrasts `2..t` carry `Σ_E` with a
//! covariate mean of zero. Maximum likelihood is then closed form.
//!
//! Conditioning `Y` on `Z` gives a univariate mixed model with separate
//! intra-block (`γ_e`) and between-block (`γ_b`) slopes on `z_ij` and the
//! block mean `z̄_·j`; [`fit_conditional_ibd`] fits that model directly for
//! incomplete blocks.

use nalgebra::{DMatrix, DVector};

use crate::design::{averaging_matrix, centering_matrix, helmert_matrix};
use crate::error::{Error, Result};
use crate::layout::{BlockLayout, RcbLayout};
use crate::linalg;
use crate::lmm::{self, LmmFit, LmmOptions, LmmSpec, Method, RandomEffect};
use crate::rcb::{inter_form, intra_form};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of the joint model; matrices are ordered `(y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateParams {
    /// Treatment means of the response.
    pub mu_y: DVector<f64>,
    pub mu_z: f64,
    pub sigma_b: DMatrix<f64>,
    pub sigma_e: DMatrix<f64>,
}

/// Parameters of the conditional model
/// `Y_ij = μ + τ_i + B_j + γ_e z_ij + γ_b z̄_·j + E_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalParams {
    pub mu: f64,
    /// Sums to zero.
    pub tau: DVector<f64>,
    pub gamma_e: f64,
    pub gamma_b: f64,
    /// `γ_e + γ_b`.
    pub gamma_be: f64,
    pub sigma_e2: f64,
    /// May be negative when derived from an estimate of `Σ_B` that is not PSD.
    pub sigma_b2: f64,
}

impl BivariateParams {
    pub fn new(mu_y: DVector<f64>, mu_z: f64, sigma_b: DMatrix<f64>, sigma_e: DMatrix<f64>) -> Result<Self> {
        for (m, what) in [(&sigma_b, "Sigma_B"), (&sigma_e, "Sigma_E")] {
            if m.shape() != (2, 2) {
                return Err(Error::Dimension(format!("{what} must be 2 x 2")));
            }
            if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::Input(format!("{what} is not symmetric")));
            }
        }
        Ok(Self { mu_y, mu_z, sigma_b, sigma_e })
    }

    pub fn t(&self) -> usize {
        self.mu_y.len()
    }

    /// Covariance of `(Y_jᵀ, Z_jᵀ)ᵀ` for one block, `2t × 2t`.
    pub fn block_covariance(&self) -> DMatrix<f64> {
        let t = self.t();
        let i = DMatrix::<f64>::identity(t, t);
        let j = DMatrix::<f64>::from_element(t, t, 1.0);
        linalg::kron(&self.sigma_e, &i) + linalg::kron(&self.sigma_b, &j)
    }
}

pub fn conditional_from_bivariate(p: &BivariateParams) -> Result<ConditionalParams> {
    let t = p.t() as f64;
    let (sey, seyz, sez) = (p.sigma_e[(0, 0)], p.sigma_e[(0, 1)], p.sigma_e[(1, 1)]);
    let (sby, sbyz, sbz) = (p.sigma_b[(0, 0)], p.sigma_b[(0, 1)], p.sigma_b[(1, 1)]);
    if !(sez > 0.0) {
        return Err(Error::Singular("residual covariate variance is zero".into()));
    }
    let inter_var = sbz + sez / t;
    if !(inter_var > 0.0) {
        return Err(Error::Singular("block-mean covariate variance is zero".into()));
    }
    let gamma_e = seyz / sez;
    let gamma_be = (sbyz + seyz / t) / inter_var;
    let gamma_b = gamma_be - gamma_e;
    let sigma_e2 = sey - seyz * seyz / sez;
    let sigma_b2 = sby - (gamma_e * sbyz + gamma_b * (sbyz + seyz / t));
    let shifted = p.mu_y.map(|m| m - gamma_be * p.mu_z);
    let mu = shifted.mean();
    Ok(ConditionalParams {
        mu,
        tau: shifted.map(|m| m - mu),
        gamma_e,
        gamma_b,
        gamma_be,
        sigma_e2,
        sigma_b2,
    })
}

/// `γ_b` in the closed form
/// `(σ_ez² σ_byz − σ_eyz σ_bz²) / (σ_ez² (σ_bz² + σ_ez²/t))`.
pub fn gamma_b_closed_form(p: &BivariateParams) -> f64 {
    let t = p.t() as f64;
    let (seyz, sez) = (p.sigma_e[(0, 1)], p.sigma_e[(1, 1)]);
    let (sbyz, sbz) = (p.sigma_b[(0, 1)], p.sigma_b[(1, 1)]);
    (sez * sbyz - seyz * sbz) / (sez * (sbz + sez / t))
}

/// Sufficient statistics of the Helmert-rotated data.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertFit {
    /// Mean of contrast 1 of the response, `√t ȳ_··`.
    pub theta_1y: f64,
    /// `√t z̄_··`.
    pub theta_1z: f64,
    /// Conditional intercepts of contrasts `2..t` at `z* = 0`.
    pub theta_iy: DVector<f64>,
    pub gamma_be_hat: f64,
    pub gamma_e_hat: f64,
    /// Residual variance of contrast 1 given its covariate, divisor `b`.
    pub sigma_be2_hat: f64,
    /// Pooled residual variance of contrasts `2..t`, divisor `b(t − 1)`.
    pub sigma_e2_hat: f64,
    /// Pooled covariate variance of contrasts `2..t` about zero (or about
    /// their own means when treatments affect the covariate).
    pub sigma_ez2_hat: f64,
    /// ML covariance of contrast 1, `Σ_E + tΣ_B`.
    pub contrast1_cov: DMatrix<f64>,
    /// Per-contrast sample means `(ȳ*_i, z̄*_i)`, `i = 1..t`.
    pub contrast_means: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BivariateOptions {
    /// Give the covariate its own treatment means.
    pub treatments_affect_covariates: bool,
}

#[derive(Debug, Clone)]
pub struct BivariateFit {
    pub treatments: Vec<String>,
    pub b: usize,
    pub helmert: HelmertFit,
    pub params: BivariateParams,
    pub conditional: ConditionalParams,
    /// Covariate treatment means when they are modelled, otherwise `None`.
    pub mu_z_treatments: Option<DVector<f64>>,
    pub sigma_b_psd: bool,
    pub loglik: f64,
    /// Log-density of `Y` given `Z`.
    pub loglik_conditional: f64,
    /// Log-density of `Z`.
    pub loglik_marginal: f64,
    /// `zᵀ(C_t ⊗ C_b)z`.
    pub w_intra: f64,
    pub zbar: DVector<f64>,
    pub zbar_grand: f64,
}

fn ml_part(count: f64, var: f64) -> f64 {
    -0.5 * count * (LN_2PI + var.ln() + 1.0)
}

pub fn fit_bivariate_rcb_ml(layout: &RcbLayout, opts: BivariateOptions) -> Result<BivariateFit> {
    let (t, b) = (layout.t(), layout.b());
    if b <= 1 {
        return Err(Error::Inestimable("one block carries no between-block information".into()));
    }
    if t < 2 {
        return Err(Error::Design("need at least two treatments".into()));
    }
    let bf = b as f64;
    let nc = (b * (t - 1)) as f64;
    let h = helmert_matrix(t);
    let ys = h.transpose() * &layout.y;
    let zs = h.transpose() * &layout.z;
    let ym = RcbLayout::treatment_means(&ys);
    let zm = RcbLayout::treatment_means(&zs);

    // contrast 1: free bivariate normal
    let mut g0 = DMatrix::zeros(2, 2);
    for j in 0..b {
        let d = [ys[(0, j)] - ym[0], zs[(0, j)] - zm[0]];
        for r in 0..2 {
            for c in 0..2 {
                g0[(r, c)] += d[r] * d[c] / bf;
            }
        }
    }
    if !(g0[(1, 1)] > 0.0) {
        return Err(Error::Singular("covariate block means do not vary".into()));
    }
    let gamma_be = g0[(0, 1)] / g0[(1, 1)];
    let sigma_be2 = g0[(0, 0)] - g0[(0, 1)] * gamma_be;

    // contrasts 2..t: common Σ_E, free response intercepts
    let (mut szz, mut szy, mut szz_about0) = (0.0, 0.0, 0.0);
    for i in 1..t {
        for j in 0..b {
            let dz = zs[(i, j)] - zm[i];
            szz += dz * dz;
            szy += dz * (ys[(i, j)] - ym[i]);
            szz_about0 += zs[(i, j)] * zs[(i, j)];
        }
    }
    if !(szz > 0.0) {
        return Err(Error::Singular("covariate has no within-block variation".into()));
    }
    let gamma_e = szy / szz;
    let mut rss = 0.0;
    for i in 1..t {
        for j in 0..b {
            rss += ((ys[(i, j)] - ym[i]) - gamma_e * (zs[(i, j)] - zm[i])).powi(2);
        }
    }
    let sigma_e2 = rss / nc;
    let sigma_ez2 = if opts.treatments_affect_covariates { szz } else { szz_about0 } / nc;
    if !(sigma_e2 > 0.0) || !(sigma_be2 > 0.0) {
        return Err(Error::Singular("degenerate contrast variance".into()));
    }

    let mut sigma_e = DMatrix::zeros(2, 2);
    sigma_e[(1, 1)] = sigma_ez2;
    sigma_e[(0, 1)] = gamma_e * sigma_ez2;
    sigma_e[(1, 0)] = sigma_e[(0, 1)];
    sigma_e[(0, 0)] = sigma_e2 + gamma_e * gamma_e * sigma_ez2;
    let sigma_b = (&g0 - &sigma_e) / t as f64;
    let sigma_b_psd = linalg::min_eigenvalue(&sigma_b) >= -1e-12 * sigma_b.abs().max();

    let yt = RcbLayout::treatment_means(&layout.y);
    let zt = RcbLayout::treatment_means(&layout.z);
    let zbar_grand = layout.z.mean();
    let (mu_y, theta_iy, mu_z_treatments) = if opts.treatments_affect_covariates {
        // every mean is free: the response means are the raw treatment means
        let th = DVector::from_fn(t - 1, |i, _| ym[i + 1]);
        (yt.clone(), th, Some(zt.clone()))
    } else {
        let th = DVector::from_fn(t - 1, |i, _| ym[i + 1] - gamma_e * zm[i + 1]);
        (yt.map_with_location(|i, _, v| v - gamma_e * (zt[i] - zbar_grand)), th, None)
    };

    let params = BivariateParams::new(mu_y, zbar_grand, sigma_b.clone(), sigma_e.clone())?;
    let conditional = if opts.treatments_affect_covariates {
        let mut c = conditional_from_bivariate(&params)?;
        let direct = direct_effects_raw(&params.mu_y, &zt, gamma_e);
        c.mu = yt.mean() - c.gamma_e * zt.mean() - c.gamma_b * zbar_grand;
        c.tau = direct;
        c
    } else {
        conditional_from_bivariate(&params)?
    };

    let loglik_conditional = ml_part(bf, sigma_be2) + ml_part(nc, sigma_e2);
    let loglik_marginal = ml_part(bf, g0[(1, 1)]) + ml_part(nc, sigma_ez2);
    let mut contrast_means = DMatrix::zeros(t, 2);
    contrast_means.set_column(0, &ym);
    contrast_means.set_column(1, &zm);

    Ok(BivariateFit {
        treatments: layout.treatments.clone(),
        b,
        helmert: HelmertFit {
            theta_1y: ym[0],
            theta_1z: zm[0],
            theta_iy,
            gamma_be_hat: gamma_be,
            gamma_e_hat: gamma_e,
            sigma_be2_hat: sigma_be2,
            sigma_e2_hat: sigma_e2,
            sigma_ez2_hat: sigma_ez2,
            contrast1_cov: g0,
            contrast_means,
        },
        params,
        conditional,
        mu_z_treatments,
        sigma_b_psd,
        loglik: loglik_conditional + loglik_marginal,
        loglik_conditional,
        loglik_marginal,
        w_intra: intra_form(&layout.z, &layout.z),
        zbar: zt,
        zbar_grand,
    })
}

/// `γ̂_be = zᵀ(J̄_t ⊗ C_b)y / zᵀ(J̄_t ⊗ C_b)z`.
pub fn inter_block_slope(layout: &RcbLayout) -> Result<f64> {
    let w = inter_form(&layout.z, &layout.z);
    if !(w > 0.0) {
        return Err(Error::Singular("covariate block means do not vary".into()));
    }
    Ok(inter_form(&layout.z, &layout.y) / w)
}

/// `SE_i² = (σ_e² + σ_b²)/b + σ_e² (z̄_i· − z̄_··)² / w` with
/// `w = zᵀ(C_t ⊗ C_b)z`.
pub fn adjusted_se(zbar: &DVector<f64>, zbar_grand: f64, w: f64, b: usize, sigma_e2: f64, sigma_b2: f64) -> DVector<f64> {
    zbar.map(|zi| ((sigma_e2 + sigma_b2) / b as f64 + sigma_e2 * (zi - zbar_grand).powi(2) / w).max(0.0).sqrt())
}

/// Treatment means at `z = z̄_··`, `μ̂_i,y + γ̂_be(z̄_·· − μ̂_z)`, with their
/// standard errors.
pub fn adjusted_means_bivariate(fit: &BivariateFit) -> (DVector<f64>, DVector<f64>) {
    let c = &fit.conditional;
    let means = fit.params.mu_y.map(|m| m + c.gamma_be * (fit.zbar_grand - fit.params.mu_z));
    let se = adjusted_se(&fit.zbar, fit.zbar_grand, fit.w_intra, fit.b, c.sigma_e2, c.sigma_b2);
    (means, se)
}

/// Covariance of the adjusted means; its diagonal is the square of
/// [`adjusted_means_bivariate`]'s standard errors.
pub fn adjusted_covariance_bivariate(fit: &BivariateFit) -> DMatrix<f64> {
    let c = &fit.conditional;
    crate::rcb::adjusted_mean_covariance(&fit.zbar, fit.zbar_grand, fit.w_intra, fit.b, c.sigma_e2, c.sigma_b2)
}

fn direct_effects_raw(mu_y: &DVector<f64>, mu_z: &DVector<f64>, gamma_e: f64) -> DVector<f64> {
    let (my, mz) = (mu_y.mean(), mu_z.mean());
    DVector::from_fn(mu_y.len(), |i, _| (mu_y[i] - my) - gamma_e * (mu_z[i] - mz))
}

#[derive(Debug, Clone)]
pub struct DirectEffects {
    /// `τ_i,y − γ_e τ_i,z` on the sum-to-zero scale.
    pub effects: DVector<f64>,
    /// Set when the covariate treatment means are far apart relative to the
    /// within-treatment spread, so comparisons at a common covariate value
    /// extrapolate beyond the observed data.
    pub warning: Option<String>,
}

/// Direct treatment effects on the response when the treatments also shift
/// the covariate. `covariate_treatment_means` are the fitted `μ_z + τ_i,z`.
pub fn direct_treatment_effects(fit: &BivariateFit, covariate_treatment_means: &DVector<f64>) -> Result<DirectEffects> {
    if covariate_treatment_means.len() != fit.params.t() {
        return Err(Error::Dimension("one covariate mean per treatment required".into()));
    }
    let effects = direct_effects_raw(&fit.params.mu_y, covariate_treatment_means, fit.conditional.gamma_e);
    let within_sd = (fit.params.sigma_e[(1, 1)] + fit.params.sigma_b[(1, 1)].max(0.0)).sqrt();
    let spread = covariate_treatment_means.max() - covariate_treatment_means.min();
    let warning = (spread > 2.0 * within_sd).then(|| {
        format!(
            "covariate treatment means span {spread:.4} against a within-treatment SD of {within_sd:.4}; \
             direct effects compare treatments at covariate values some of them never reach"
        )
    });
    Ok(DirectEffects { effects, warning })
}

/// Conditional-model fit for a (possibly incomplete) block design with
/// regressors `z_ij` and `z̄_·j`.
#[derive(Debug, Clone)]
pub struct IbdFit {
    pub treatments: Vec<String>,
    /// Treatment effects on the sum-to-zero scale.
    pub effects: DVector<f64>,
    pub effect_cov: DMatrix<f64>,
    pub gamma_e: f64,
    /// `None` for the naive model without the block-mean regressor.
    pub gamma_b: Option<f64>,
    pub lmm: LmmFit,
}

impl IbdFit {
    pub fn effect_se(&self) -> DVector<f64> {
        DVector::from_fn(self.effects.len(), |i, _| self.effect_cov[(i, i)].max(0.0).sqrt())
    }

    /// `cᵀτ̂` and its standard error for treatment coefficients `c`.
    pub fn contrast(&self, c: &[f64]) -> Result<(f64, f64)> {
        lmm::contrast_with(&self.effects, &self.effect_cov, c)
    }
}

fn check_ibd(layout: &BlockLayout) -> Result<()> {
    let sizes = layout.block_sizes();
    if sizes.iter().any(|&k| k != sizes[0]) {
        return Err(Error::Design(
            "blocks differ in size; fit this design with the general multivariate engine".into(),
        ));
    }
    if !layout.is_connected() {
        return Err(Error::Inestimable("treatments are not connected through shared blocks".into()));
    }
    Ok(())
}

fn fit_block_model(layout: &BlockLayout, with_block_mean: bool, method: Method, opts: &LmmOptions) -> Result<IbdFit> {
    check_ibd(layout)?;
    let t = layout.treatments.len();
    let mut cols = vec![layout.treatment_incidence()];
    let mut names = layout.treatments.clone();
    cols.push(DMatrix::from_column_slice(layout.n(), 1, layout.z.as_slice()));
    names.push("z".into());
    if with_block_mean {
        let zb = layout.block_mean_per_record(&layout.z);
        cols.push(DMatrix::from_column_slice(layout.n(), 1, zb.as_slice()));
        names.push("z_block_mean".into());
    }
    let p: usize = cols.iter().map(|c| c.ncols()).sum();
    let mut x = DMatrix::zeros(layout.n(), p);
    let mut at = 0;
    for c in &cols {
        x.columns_mut(at, c.ncols()).copy_from(c);
        at += c.ncols();
    }
    let spec = LmmSpec::with_names(
        layout.y.clone(),
        x,
        names,
        vec![RandomEffect { name: "block".into(), z: layout.block_incidence() }],
    )?;
    let fit = lmm::fit_lmm(&spec, method, opts)?;
    let proj = centering_matrix(t);
    let cell = fit.beta.rows(0, t).into_owned();
    let cell_cov = fit.beta_cov.view((0, 0), (t, t)).into_owned();
    let effects = &proj * cell;
    let effect_cov = &proj * cell_cov * &proj;
    Ok(IbdFit {
        treatments: layout.treatments.clone(),
        effects,
        effect_cov,
        gamma_e: fit.beta[t],
        gamma_b: with_block_mean.then(|| fit.beta[t + 1]),
        lmm: fit,
    })
}

/// Conditional model with separate intra- and between-block slopes, random
/// blocks, fitted by ML or REML.
pub fn fit_conditional_ibd(layout: &BlockLayout, method: Method, opts: &LmmOptions) -> Result<IbdFit> {
    fit_block_model(layout, true, method, opts)
}

/// The naive model: one covariate slope, random blocks.
pub fn fit_naive_ibd(layout: &BlockLayout, method: Method, opts: &LmmOptions) -> Result<IbdFit> {
    fit_block_model(layout, false, method, opts)
}

/// `var(Y_j | Z_j)` by dense block conditioning of the `2t × 2t` covariance.
pub fn conditional_block_covariance(p: &BivariateParams) -> Result<DMatrix<f64>> {
    let t = p.t();
    let v = p.block_covariance();
    let vyy = v.view((0, 0), (t, t));
    let vyz = v.view((0, t), (t, t));
    let vzz = v.view((t, t), (t, t)).into_owned();
    let inv = linalg::spd_inverse(&vzz, "covariate block covariance")?;
    Ok(vyy - vyz * inv * vyz.transpose())
}

/// `σ_e² I_t + σ_b² J_t`.
pub fn exchangeable(sigma_e2: f64, sigma_b2: f64, t: usize) -> DMatrix<f64> {
    DMatrix::identity(t, t) * sigma_e2 + averaging_matrix(t) * (t as f64 * sigma_b2)
}
