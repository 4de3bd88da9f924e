//! Covariate adjustment for orthogonal blocking designs.
//!
//! When the joint covariance of the response `u` and covariates `z` within a
//! replicate unit is `Σ_l G_l ⊗ A_l`, conditioning on `z` acts stratum by
//! stratum: stratum `l` has slope vector `γ_l = G_l,zz⁻¹ g_l,zu` and residual
//! variance `λ_l = g_l,uu − g_l,uz G_l,zz⁻¹ g_l,zu`. Each non-residual stratum
//! therefore contributes the covariate means of its averaging operator as an
//! extra regressor, and the conditional model is a univariate mixed model.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, DesignSpec, Recipe, Term};
use crate::design::{averaging_matrix, OrthogonalPartition, KroneckerCovariance};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lmm::{self, LmmFit, LmmOptions, LmmSpec, Method, RandomEffect};

#[derive(Debug, Clone, PartialEq)]
pub struct StratumRegression {
    /// `γ_l`, one `m`-vector per stratum.
    pub gamma: Vec<DVector<f64>>,
    /// `λ_l`.
    pub lambda: Vec<f64>,
}

/// Slopes and conditional variances of variable 0 given variables `1..=m`
/// in every stratum.
pub fn stratum_regressions(kc: &KroneckerCovariance) -> Result<StratumRegression> {
    let v = kc.n_vars();
    if v < 2 {
        return Err(Error::Dimension("need a response and at least one covariate".into()));
    }
    let m = v - 1;
    let mut gamma = Vec::with_capacity(kc.strata().len());
    let mut lambda = Vec::with_capacity(kc.strata().len());
    for (l, g) in kc.strata().iter().enumerate() {
        let gzz = g.view((1, 1), (m, m)).into_owned();
        let gzu = g.view((1, 0), (m, 1)).into_owned();
        let inv = linalg::inverse(&gzz, "stratum covariate block").map_err(|_| Error::SingularStratum { index: l })?;
        let gl = &inv * &gzu;
        lambda.push(g[(0, 0)] - (gzu.transpose() * &gl)[(0, 0)]);
        gamma.push(gl.column(0).into_owned());
    }
    Ok(StratumRegression { gamma, lambda })
}

/// Conditional mean and covariance of variable 0 given the covariates, from
/// the stratum regressions: mean `μ_y + Σ_l Σ_r γ_lr A_l (z_r − μ_zr 1)`,
/// covariance `Σ_l λ_l A_l`. `z` is variable-major (`m` blocks of length `k`).
pub fn conditional_moments(
    kc: &KroneckerCovariance,
    mu_y: &DVector<f64>,
    mu_z: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let reg = stratum_regressions(kc)?;
    let k = kc.partition().dim();
    let m = kc.n_vars() - 1;
    if mu_y.len() != k || mu_z.len() != m || z.len() != k * m {
        return Err(Error::Dimension("conditional_moments argument sizes".into()));
    }
    let mut mean = mu_y.clone();
    let mut cov = DMatrix::zeros(k, k);
    for (l, a) in kc.partition().projectors().iter().enumerate() {
        for r in 0..m {
            let zr = DVector::from_fn(k, |i, _| z[r * k + i] - mu_z[r]);
            mean += a * zr * reg.gamma[l][r];
        }
        cov += a * reg.lambda[l];
    }
    Ok((mean, cov))
}

/// `μ_y − 1 γ_0ᵀ(z̄ − μ_z)`.
pub fn adjusted_means_orthogonal(
    mu_y: &DVector<f64>,
    gamma_0: &DVector<f64>,
    zbar: &DVector<f64>,
    mu_z: &DVector<f64>,
) -> Result<DVector<f64>> {
    if gamma_0.len() != zbar.len() || zbar.len() != mu_z.len() {
        return Err(Error::Dimension("gamma_0, zbar and mu_z must have equal length".into()));
    }
    let shift = gamma_0.dot(&(zbar - mu_z));
    Ok(mu_y.map(|v| v - shift))
}

/// Stratum structure and conditional-model terms of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRecipe {
    pub recipe: Recipe,
    /// Term whose levels are the treatment cells.
    pub treatment: Term,
    /// Random blocking terms, in stratum order. Each contributes a stratum
    /// and a covariate-mean regressor.
    pub strata_terms: Vec<Term>,
    /// Random terms acting on the response only.
    pub response_only_terms: Vec<Term>,
}

impl DesignRecipe {
    pub fn from_spec(spec: &DesignSpec) -> Result<Self> {
        if spec.blocking_terms.is_empty() {
            return Err(Error::Design("design declares no blocking terms".into()));
        }
        Ok(Self {
            recipe: spec.recipe,
            treatment: Term(spec.treatment_factors.clone()),
            strata_terms: spec.blocking_terms.clone(),
            response_only_terms: spec.random_treatment_terms.clone(),
        })
    }

    /// Every random term of the conditional model.
    pub fn random_terms(&self) -> Vec<Term> {
        self.strata_terms.iter().chain(&self.response_only_terms).cloned().collect()
    }

    /// Averaging operators over the complete records: `J̄_n`, then the
    /// successive increments of the projections onto the blocking terms, then
    /// the residual. Valid as a partition whenever the blocking terms are
    /// mutually orthogonal (nested or balanced crossed).
    pub fn partition(&self, ds: &Dataset) -> Result<OrthogonalPartition> {
        let records = ds.complete_records();
        let n = records.len();
        let mut projectors = vec![averaging_matrix(n)];
        let mut cumulative = DMatrix::from_element(n, 1, 1.0);
        let mut previous = averaging_matrix(n);
        for term in &self.strata_terms {
            let w = incidence(ds, term, &records)?.1;
            let mut joined = DMatrix::zeros(n, cumulative.ncols() + w.ncols());
            joined.columns_mut(0, cumulative.ncols()).copy_from(&cumulative);
            joined.columns_mut(cumulative.ncols(), w.ncols()).copy_from(&w);
            let p = column_space_projector(&joined);
            projectors.push(&p - &previous);
            previous = p;
            cumulative = joined;
        }
        projectors.push(DMatrix::identity(n, n) - previous);
        OrthogonalPartition::new(projectors)
    }

    /// Report on whether the recipe's strata are balanced and orthogonal on
    /// this dataset.
    pub fn conformance(&self, ds: &Dataset) -> Result<Conformance> {
        let records = ds.complete_records();
        let mut issues = Vec::new();
        for term in &self.strata_terms {
            let (levels, w) = incidence(ds, term, &records)?;
            let sizes: Vec<f64> = (0..levels.len()).map(|c| w.column(c).sum()).collect();
            if sizes.iter().any(|&s| s != sizes[0]) {
                issues.push(format!("term `{}`: unequal level sizes", term.name()));
            }
        }
        let partition = self.partition(ds)?;
        // every term's averaging operator must be a sum of strata
        for term in &self.strata_terms {
            let (_, w) = incidence(ds, term, &records)?;
            let p = column_space_projector(&w);
            for (l, a) in partition.projectors().iter().enumerate() {
                if linalg::max_abs(&(&p * a - a * &p)) > 1e-9 {
                    issues.push(format!("term `{}` does not commute with stratum {l}", term.name()));
                    break;
                }
            }
        }
        Ok(Conformance { issues, partition })
    }
}

#[derive(Debug, Clone)]
pub struct Conformance {
    pub issues: Vec<String>,
    pub partition: OrthogonalPartition,
}

impl Conformance {
    pub fn pass(&self) -> bool {
        self.issues.is_empty()
    }
}

fn incidence(ds: &Dataset, term: &Term, records: &[usize]) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (levels, codes) = ds.term_levels(term, records)?;
    let w = DMatrix::from_fn(records.len(), levels.len(), |k, c| if codes[k] == c { 1.0 } else { 0.0 });
    Ok((levels, w))
}

/// Orthogonal projector onto the column space of `x`.
fn column_space_projector(x: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let smax = svd.singular_values.max();
    let mut p = DMatrix::zeros(x.nrows(), x.nrows());
    for (c, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-10 * smax.max(1.0) {
            let col = u.column(c);
            p += &col * col.transpose();
        }
    }
    p
}

/// Name of the appended covariate-mean column for covariate `cov` and term.
pub fn stratum_mean_name(cov: &str, term: &Term) -> String {
    format!("{cov}[{}]", term.name())
}

/// Per-record covariate means over each level of each stratum term.
///
/// Returns the dataset restricted to complete records with one extra
/// covariate per (covariate, term). Unequal level sizes within a term are
/// rejected.
pub fn conditional_regressors(recipe: &DesignRecipe, ds: &Dataset) -> Result<Dataset> {
    let records = ds.complete_records();
    let mut out = ds.select(&records);
    let all: Vec<usize> = (0..records.len()).collect();
    for cov in 0..ds.m() {
        for term in &recipe.strata_terms {
            let (levels, codes) = out.term_levels(term, &all)?;
            let mut sum = vec![0.0; levels.len()];
            let mut count = vec![0usize; levels.len()];
            for (k, &c) in codes.iter().enumerate() {
                sum[c] += out.z(cov, k);
                count[c] += 1;
            }
            if count.iter().any(|&c| c != count[0]) {
                return Err(Error::Design(format!(
                    "ragged stratum `{}`: level sizes differ; fit this design with the general multivariate engine",
                    term.name()
                )));
            }
            let values = codes.iter().map(|&c| Some(sum[c] / count[c] as f64)).collect();
            let name = stratum_mean_name(&ds.covariate_names[cov], term);
            out = out.with_covariate(&name, values)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OrthogonalFit {
    pub treatments: Vec<String>,
    pub lmm: LmmFit,
    /// Regressor columns dropped as constant or collinear.
    pub dropped: Vec<String>,
    /// Treatment means with every covariate regressor at the covariate's
    /// grand mean.
    pub adjusted_means: DVector<f64>,
    pub adjusted_se: DVector<f64>,
    pub adjusted_cov: DMatrix<f64>,
    /// Grand covariate means used for the adjustment.
    pub evaluated_at: DVector<f64>,
}

impl OrthogonalFit {
    /// Slope of a regressor column, `None` if it was dropped.
    pub fn slope(&self, name: &str) -> Option<f64> {
        self.lmm.coef(name)
    }
}

/// Fit the recipe's conditional model: treatment cell means, each covariate
/// and its stratum means as fixed regressors, every random term of the
/// recipe as a variance component.
pub fn fit_orthogonal_conditional(
    recipe: &DesignRecipe,
    ds: &Dataset,
    method: Method,
    opts: &LmmOptions,
) -> Result<OrthogonalFit> {
    let aug = conditional_regressors(recipe, ds)?;
    let n = aug.n_records();
    let all: Vec<usize> = (0..n).collect();
    let (treatments, tcodes) = aug.term_levels(&recipe.treatment, &all)?;
    let t = treatments.len();

    let mut x = DMatrix::from_fn(n, t, |k, i| if tcodes[k] == i { 1.0 } else { 0.0 });
    let mut names = treatments.clone();
    let mut dropped = Vec::new();
    // covariate index in `aug` → which original covariate it derives from
    let m = ds.m();
    let mut grand = DVector::zeros(m);
    let mut derived_from = Vec::new();
    for c in 0..aug.m() {
        let orig = if c < m { c } else { (c - m) / recipe.strata_terms.len() };
        derived_from.push(orig);
    }
    for c in 0..m {
        grand[c] = (0..n).map(|k| aug.z(c, k)).sum::<f64>() / n as f64;
    }
    let mut regressor_origin = Vec::new();
    let base_rank = linalg::rank(&x, 1e-10);
    let mut rank = base_rank;
    for c in 0..aug.m() {
        let col = DVector::from_fn(n, |k, _| aug.z(c, k));
        let mut trial = DMatrix::zeros(n, x.ncols() + 1);
        trial.columns_mut(0, x.ncols()).copy_from(&x);
        trial.set_column(x.ncols(), &col);
        let r = linalg::rank(&trial, 1e-10);
        if r > rank {
            x = trial;
            rank = r;
            names.push(aug.covariate_names[c].clone());
            regressor_origin.push(derived_from[c]);
        } else {
            dropped.push(aug.covariate_names[c].clone());
        }
    }
    let random = recipe
        .random_terms()
        .iter()
        .map(|term| {
            let (_, w) = incidence(&aug, term, &all)?;
            Ok(RandomEffect { name: term.name(), z: w })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = LmmSpec::with_names(aug_response(&aug), x, names, random)?;
    let fit = lmm::fit_lmm(&spec, method, opts)?;

    let p = fit.beta.len();
    let mut means = DVector::zeros(t);
    let mut se = DVector::zeros(t);
    let mut l = DMatrix::zeros(t, p);
    for i in 0..t {
        let mut c = vec![0.0; p];
        c[i] = 1.0;
        for (j, &orig) in regressor_origin.iter().enumerate() {
            c[t + j] = grand[orig];
        }
        let (est, s) = lmm::contrast(&fit, &c)?;
        means[i] = est;
        se[i] = s;
        l.row_mut(i).copy_from_slice(&c);
    }
    let adjusted_cov = &l * &fit.beta_cov * l.transpose();
    Ok(OrthogonalFit {
        treatments,
        lmm: fit,
        dropped,
        adjusted_means: means,
        adjusted_se: se,
        adjusted_cov,
        evaluated_at: grand,
    })
}

fn aug_response(ds: &Dataset) -> DVector<f64> {
    DVector::from_fn(ds.n_records(), |k, _| ds.y(k))
}
