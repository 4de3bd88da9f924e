//! Classical covariance analysis of a randomized complete block design:
//! fixed block effects fitted by least squares, and random block effects
//! fitted as a univariate mixed model with the covariate as a fixed regressor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::RcbLayout;
use crate::lmm::{self, LmmOptions, LmmSpec, Method, RandomEffect};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Divisor of the residual sum of squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Divisor {
    /// `n = tb`.
    #[default]
    Ml,
    /// Residual degrees of freedom `(t − 1)(b − 1) − 1`.
    Unbiased,
}

#[derive(Debug, Clone)]
pub struct FixedFitRCB {
    pub treatments: Vec<String>,
    pub mu_hat: f64,
    /// Sums to zero.
    pub tau_hat: DVector<f64>,
    /// Sums to zero.
    pub beta_hat_blocks: DVector<f64>,
    pub gamma_ols: f64,
    pub sigma_e2_hat: f64,
    pub rss: f64,
    pub loglik: f64,
    pub adjusted_means: DVector<f64>,
    pub adjusted_se: DVector<f64>,
    /// Grand covariate mean at which means are adjusted.
    pub zbar: f64,
}

#[derive(Debug, Clone)]
pub struct MixedFitRCB {
    pub treatments: Vec<String>,
    pub method: Method,
    pub mu_hat: f64,
    pub tau_hat: DVector<f64>,
    pub gamma_mixed: f64,
    pub sigma_e2_hat: f64,
    pub sigma_b2_hat: f64,
    pub rho_hat: f64,
    pub loglik: f64,
    pub converged: bool,
    pub adjusted_means: DVector<f64>,
    pub adjusted_se: DVector<f64>,
    pub zbar: f64,
}

/// Quadratic forms `uᵀ[(I_t − ρJ̄_t) ⊗ C_b]v` with treatment-major vectors,
/// written as within-treatment cross products minus `ρ·t·` block-mean
/// cross products.
fn mixed_form(u: &DMatrix<f64>, v: &DMatrix<f64>, rho: f64) -> f64 {
    let (t, b) = u.shape();
    let um = RcbLayout::treatment_means(u);
    let vm = RcbLayout::treatment_means(v);
    let mut within = 0.0;
    for i in 0..t {
        for j in 0..b {
            within += (u[(i, j)] - um[i]) * (v[(i, j)] - vm[i]);
        }
    }
    within - rho * inter_form(u, v)
}

/// `uᵀ(J̄_t ⊗ C_b)v = t Σ_j (ū_·j − ū_··)(v̄_·j − v̄_··)`.
pub(crate) fn inter_form(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let ub = RcbLayout::block_means(u);
    let vb = RcbLayout::block_means(v);
    let (ug, vg) = (u.mean(), v.mean());
    u.nrows() as f64 * ub.iter().zip(vb.iter()).map(|(a, c)| (a - ug) * (c - vg)).sum::<f64>()
}

/// `uᵀ(C_t ⊗ C_b)v`.
pub(crate) fn intra_form(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    mixed_form(u, v, 1.0)
}

fn total_ss(z: &DMatrix<f64>) -> f64 {
    let g = z.mean();
    z.iter().map(|v| (v - g).powi(2)).sum()
}

/// A quadratic-form denominator is treated as zero below this fraction of
/// the covariate's total sum of squares.
const DENOM_RTOL: f64 = 1e-12;

fn check_denominator(w: f64, z: &DMatrix<f64>, what: &str) -> Result<()> {
    if !(w > DENOM_RTOL * total_ss(z)) || w <= 0.0 {
        return Err(Error::Singular(format!("{what}: covariate has no variation in this stratum")));
    }
    Ok(())
}

/// `zᵀ[(I_t − ρJ̄_t) ⊗ C_b]y / zᵀ[(I_t − ρJ̄_t) ⊗ C_b]z` for `t × b` tables.
pub fn gamma_mixed(z: &DMatrix<f64>, y: &DMatrix<f64>, rho: f64) -> Result<f64> {
    if z.shape() != y.shape() {
        return Err(Error::Dimension("y and z tables differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Input(format!("rho = {rho} outside [0, 1]")));
    }
    let den = mixed_form(z, z, rho);
    check_denominator(den, z, "mixed slope")?;
    Ok(mixed_form(z, y, rho) / den)
}

pub fn fit_fixed_rcb(layout: &RcbLayout, divisor: Divisor) -> Result<FixedFitRCB> {
    let (t, b) = (layout.t(), layout.b());
    if t < 2 || b < 2 {
        return Err(Error::Design("need at least two treatments and two blocks".into()));
    }
    let (y, z) = (&layout.y, &layout.z);
    let w = intra_form(z, z);
    check_denominator(w, z, "fixed-blocks slope")?;
    let gamma = intra_form(z, y) / w;

    let dy = RcbLayout::double_centered(y);
    let dz = RcbLayout::double_centered(z);
    let rss: f64 = dy.iter().zip(dz.iter()).map(|(a, c)| (a - gamma * c).powi(2)).sum();
    let n = (t * b) as f64;
    let dof = match divisor {
        Divisor::Ml => n,
        Divisor::Unbiased => ((t - 1) * (b - 1)) as f64 - 1.0,
    };
    if dof <= 0.0 {
        return Err(Error::Inestimable("no residual degrees of freedom".into()));
    }
    let sigma_e2 = rss / dof;
    let sigma_ml = rss / n;
    let loglik = -0.5 * n * (LN_2PI + sigma_ml.ln() + 1.0);

    let (ybar, zbar) = (y.mean(), z.mean());
    let yt = RcbLayout::treatment_means(y);
    let zt = RcbLayout::treatment_means(z);
    let yb = RcbLayout::block_means(y);
    let zb = RcbLayout::block_means(z);
    let tau_hat = DVector::from_fn(t, |i, _| (yt[i] - ybar) - gamma * (zt[i] - zbar));
    let beta_hat_blocks = DVector::from_fn(b, |j, _| (yb[j] - ybar) - gamma * (zb[j] - zbar));
    let adjusted_means = DVector::from_fn(t, |i, _| yt[i] - gamma * (zt[i] - zbar));
    let adjusted_se = DVector::from_fn(t, |i, _| {
        (sigma_e2 / b as f64 + sigma_e2 * (zt[i] - zbar).powi(2) / w).sqrt()
    });
    Ok(FixedFitRCB {
        treatments: layout.treatments.clone(),
        mu_hat: ybar - gamma * zbar,
        tau_hat,
        beta_hat_blocks,
        gamma_ols: gamma,
        sigma_e2_hat: sigma_e2,
        rss,
        loglik,
        adjusted_means,
        adjusted_se,
        zbar,
    })
}

/// Treatment-mean columns followed by the covariate, treatment-major rows.
pub(crate) fn mixed_model_spec(layout: &RcbLayout, z: &DMatrix<f64>) -> Result<LmmSpec> {
    let (t, b) = (layout.t(), layout.b());
    let n = t * b;
    let zv = RcbLayout::vec(z);
    let x = DMatrix::from_fn(n, t + 1, |r, c| {
        if c == t {
            zv[r]
        } else if r / b == c {
            1.0
        } else {
            0.0
        }
    });
    let blocks = DMatrix::from_fn(n, b, |r, j| if r % b == j { 1.0 } else { 0.0 });
    let mut names: Vec<String> = layout.treatments.clone();
    names.push("covariate".into());
    LmmSpec::with_names(
        RcbLayout::vec(&layout.y),
        x,
        names,
        vec![RandomEffect { name: "block".into(), z: blocks }],
    )
}

/// `var(μ̂_i,adj) = (σ_e² + σ_b²)/b + [zᵀMΣMz / (zᵀMz)²](z̄_i· − z̄_··)²` with
/// `M = (I_t − ρJ̄_t) ⊗ C_b` and `Σ = σ_e² I + σ_b² J_t ⊗ I_b`. Because
/// `MΣM = σ_e² M` the ratio is `σ_e² / zᵀMz`.
pub fn mixed_adjusted_se(z: &DMatrix<f64>, sigma_e2: f64, sigma_b2: f64) -> Result<DVector<f64>> {
    let (t, b) = z.shape();
    let rho = rho(sigma_e2, sigma_b2, t);
    let w = mixed_form(z, z, rho);
    check_denominator(w, z, "mixed slope")?;
    let zt = RcbLayout::treatment_means(z);
    let zbar = z.mean();
    Ok(DVector::from_fn(t, |i, _| {
        ((sigma_e2 + sigma_b2) / b as f64 + sigma_e2 / w * (zt[i] - zbar).powi(2)).sqrt()
    }))
}

/// Covariance of adjusted means, `(σ_e² I + σ_b² J)/b + σ_e² d dᵀ / w` with
/// `d_i = z̄_i· − z̄_··`; the diagonal gives the squared standard errors.
pub fn adjusted_mean_covariance(
    zbar: &DVector<f64>,
    zbar_grand: f64,
    w: f64,
    b: usize,
    sigma_e2: f64,
    sigma_b2: f64,
) -> DMatrix<f64> {
    let t = zbar.len();
    let d = zbar.map(|z| z - zbar_grand);
    DMatrix::from_fn(t, t, |i, k| {
        let common = if i == k { sigma_e2 + sigma_b2 } else { sigma_b2 };
        common / b as f64 + sigma_e2 * d[i] * d[k] / w
    })
}

/// Adjusted-mean covariance of a fixed-blocks fit.
pub fn fixed_covariance(layout: &RcbLayout, fit: &FixedFitRCB) -> Result<DMatrix<f64>> {
    let w = intra_form(&layout.z, &layout.z);
    check_denominator(w, &layout.z, "fixed-blocks slope")?;
    let zt = RcbLayout::treatment_means(&layout.z);
    Ok(adjusted_mean_covariance(&zt, fit.zbar, w, layout.b(), fit.sigma_e2_hat, 0.0))
}

/// Adjusted-mean covariance of a random-blocks fit.
pub fn mixed_covariance(layout: &RcbLayout, fit: &MixedFitRCB) -> Result<DMatrix<f64>> {
    let w = mixed_form(&layout.z, &layout.z, fit.rho_hat);
    check_denominator(w, &layout.z, "mixed slope")?;
    let zt = RcbLayout::treatment_means(&layout.z);
    Ok(adjusted_mean_covariance(&zt, fit.zbar, w, layout.b(), fit.sigma_e2_hat, fit.sigma_b2_hat))
}

/// Correlation between two treatment means, `σ_b² / (σ_b² + σ_e²/t)`.
pub fn rho(sigma_e2: f64, sigma_b2: f64, t: usize) -> f64 {
    let d = sigma_b2 + sigma_e2 / t as f64;
    if d > 0.0 {
        sigma_b2 / d
    } else {
        0.0
    }
}

pub fn fit_mixed_rcb(layout: &RcbLayout, method: Method, opts: &LmmOptions) -> Result<MixedFitRCB> {
    let (t, b) = (layout.t(), layout.b());
    if t < 2 || b < 2 {
        return Err(Error::Design("need at least two treatments and two blocks".into()));
    }
    check_denominator(mixed_form(&layout.z, &layout.z, 0.0), &layout.z, "mixed slope")?;
    let spec = mixed_model_spec(layout, &layout.z)?;
    let fit = lmm::fit_lmm(&spec, method, opts)?;
    let gamma = fit.beta[t];
    let (se2, sb2) = (fit.sigma_e2, fit.var_comps[0]);
    let zbar = layout.z.mean();
    let cell = fit.beta.rows(0, t).into_owned();
    let adjusted_means = cell.map(|m| m + gamma * zbar);
    let mbar = cell.mean();
    Ok(MixedFitRCB {
        treatments: layout.treatments.clone(),
        method,
        mu_hat: mbar,
        tau_hat: cell.map(|m| m - mbar),
        gamma_mixed: gamma,
        sigma_e2_hat: se2,
        sigma_b2_hat: sb2,
        rho_hat: rho(se2, sb2, t),
        loglik: fit.loglik,
        converged: fit.converged,
        adjusted_means,
        adjusted_se: mixed_adjusted_se(&layout.z, se2, sb2)?,
        zbar,
    })
}

/// Within-block treatment contrasts and block means.
#[derive(Debug, Clone)]
pub struct IntraInter {
    /// Helmert contrasts `i = 2..t` of each block, `(t − 1) × b`.
    pub y_star: DMatrix<f64>,
    pub z_star: DMatrix<f64>,
    pub y_block: DVector<f64>,
    pub z_block: DVector<f64>,
    /// Slope of `Y*` on `z*` with a separate intercept per contrast.
    pub intra_slope: Option<f64>,
    /// Slope of block means on block means; `None` when the covariate block
    /// means do not vary.
    pub inter_slope: Option<f64>,
}

pub fn intra_inter_decompose(layout: &RcbLayout) -> Result<IntraInter> {
    let t = layout.t();
    let h = crate::design::helmert_matrix(t);
    let contrasts = h.columns(1, t - 1).transpose();
    let y_star = &contrasts * &layout.y;
    let z_star = &contrasts * &layout.z;
    let y_block = RcbLayout::block_means(&layout.y);
    let z_block = RcbLayout::block_means(&layout.z);
    let centered_slope = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> Option<f64> {
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for i in 0..x.nrows() {
            let (xm, ym) = (x.row(i).mean(), y.row(i).mean());
            for j in 0..x.ncols() {
                sxy += (x[(i, j)] - xm) * (y[(i, j)] - ym);
                sxx += (x[(i, j)] - xm).powi(2);
            }
        }
        (sxx > DENOM_RTOL * total_ss(&layout.z) && sxx > 0.0).then(|| sxy / sxx)
    };
    let intra_slope = centered_slope(&z_star, &y_star);
    let inter_slope = centered_slope(
        &DMatrix::from_row_slice(1, z_block.len(), z_block.as_slice()),
        &DMatrix::from_row_slice(1, y_block.len(), y_block.as_slice()),
    );
    Ok(IntraInter { y_star, z_star, y_block, z_block, intra_slope, inter_slope })
}
