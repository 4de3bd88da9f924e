//! Multivariate variance-components model for a response and its
//! covariates, fitted by EM, with adjusted means from the implied
//! conditional model.
//!
//! `Z = Xβ + Σ C_i T_i + Σ D_i B_i`, `T_i ~ N(0, σ_i² I)`,
//! `B_i ~ N(0, Σ_i ⊗ I_{d_i})`, `D_i = I_{m+1} ⊗ W_i`, `B_0` the residual.
//! Stacked vectors are variable-major, so an `n × (m+1)` table read
//! column by column is a stacked vector.

use nalgebra::{DMatrix, DVector};

use crate::data::{build_stacked, Dataset, DesignSpec, StackedData};
use crate::design::{kron_cov_dense, kron_cov_inverse, KroneckerCovariance, OrthogonalPartition};
use crate::error::{Error, Result};
use crate::linalg::{self, clip_psd, Spd};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Eigenvalue floor for `Σ̂_i`, relative to its trace.
pub const CLIP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MvcParams {
    pub beta: DVector<f64>,
    /// `σ_i²` for the random treatment terms.
    pub sigma2: Vec<f64>,
    /// `Σ_0` (residual) then one matrix per blocking term.
    pub sigmas: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateModel {
    pub stacked: StackedData,
    pub params: MvcParams,
}

fn table(v: &DVector<f64>, n: usize, nv: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, nv, v.as_slice())
}

fn stack(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `Σ_{k,l} A[k,l] G[l,k]`.
fn trace_product(a: &nalgebra::DMatrixView<f64>, g: &DMatrix<f64>) -> f64 {
    a.iter().zip(g.transpose().iter()).map(|(x, y)| x * y).sum()
}

impl MultivariateModel {
    pub fn new(stacked: StackedData, params: MvcParams) -> Result<Self> {
        let nv = stacked.n_vars;
        if params.beta.len() != stacked.x.ncols() {
            return Err(Error::Dimension(format!(
                "β has {} entries, X has {} columns",
                params.beta.len(),
                stacked.x.ncols()
            )));
        }
        if params.sigma2.len() != stacked.treatment_random.len() {
            return Err(Error::Dimension("one σ² per random treatment term".into()));
        }
        if params.sigmas.len() != stacked.blocking.len() {
            return Err(Error::Dimension("one Σ per blocking term, residual first".into()));
        }
        if params.sigmas.iter().any(|s| s.shape() != (nv, nv)) {
            return Err(Error::Dimension(format!("every Σ_i must be {nv}x{nv}")));
        }
        if params.sigma2.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Input("σ_i² must be nonnegative".into()));
        }
        for (i, s) in params.sigmas.iter().enumerate() {
            if linalg::max_abs(&(s - s.transpose())) > 1e-12 * linalg::max_abs(s).max(1.0) {
                return Err(Error::Input(format!("Σ_{i} is not symmetric")));
            }
            if i > 0 && linalg::min_eigenvalue(s) < -1e-10 * s.trace().abs().max(f64::MIN_POSITIVE) {
                return Err(Error::Input(format!("Σ_{i} is not positive semidefinite")));
            }
        }
        Spd::new(&params.sigmas[0], "Σ_0")?;
        Ok(Self { stacked, params })
    }

    /// Start: per-variable OLS for β, `Σ_0` from the pooled residual cross
    /// products, `Σ_i = 0.1 Σ_0`, `σ_i² = 0.1 Σ_0[0,0]`.
    pub fn initial(stacked: StackedData) -> Result<Self> {
        let (n, nv) = (stacked.n_obs, stacked.n_vars);
        let (beta, resid) = linalg::ols(&stacked.x, &stacked.z)?;
        let r = table(&resid, n, nv);
        let s0 = r.transpose() * &r / n as f64;
        let sigmas = std::iter::once(s0.clone())
            .chain(stacked.blocking.iter().skip(1).map(|_| &s0 * 0.1))
            .collect();
        let sigma2 = vec![0.1 * s0[(0, 0)]; stacked.treatment_random.len()];
        Self::new(stacked, MvcParams { beta, sigma2, sigmas })
    }

    pub fn n_obs(&self) -> usize {
        self.stacked.n_obs
    }

    pub fn n_vars(&self) -> usize {
        self.stacked.n_vars
    }

    pub fn residual(&self) -> DVector<f64> {
        &self.stacked.z - &self.stacked.x * &self.params.beta
    }

    /// Covariate means `μ̂_z` read off β; the average over treatments when
    /// treatments affect the covariates.
    pub fn mu_z(&self) -> DVector<f64> {
        self.mu_z_map() * &self.params.beta
    }

    /// Rows map β to the covariate means.
    fn mu_z_map(&self) -> DMatrix<f64> {
        let st = &self.stacked;
        let t = st.n_treatments() as f64;
        let mut a = DMatrix::zeros(st.n_vars - 1, st.x.ncols());
        for v in 1..st.n_vars {
            for &c in &st.mean_columns[v] {
                a[(v - 1, c)] += 1.0 / t;
            }
        }
        a
    }
}

/// `V = Σ σ_i² C_i C_iᵀ + Σ Σ_i ⊗ W_i W_iᵀ`, checked positive definite.
pub fn assemble_v(model: &MultivariateModel) -> Result<DMatrix<f64>> {
    let v = assemble_v_unchecked(model);
    Spd::new(&v, "V")?;
    Ok(v)
}

fn assemble_v_unchecked(model: &MultivariateModel) -> DMatrix<f64> {
    let st = &model.stacked;
    let p = &model.params;
    let big = st.n_obs * st.n_vars;
    let mut v = DMatrix::zeros(big, big);
    for (term, &s2) in st.treatment_random.iter().zip(&p.sigma2) {
        v += &term.c * term.c.transpose() * s2;
    }
    for (term, s) in st.blocking.iter().zip(&p.sigmas) {
        v += linalg::kron(s, &(&term.w * term.w.transpose()));
    }
    v
}

/// Gaussian log-density of the observations at `(Xβ, V)`.
pub fn observed_loglik(model: &MultivariateModel) -> Result<f64> {
    let spd = Spd::new(&assemble_v_unchecked(model), "V")?;
    let r = model.residual();
    let quad = r.dot(&spd.solve_vec(&r));
    Ok(-0.5 * (r.len() as f64 * LN_2PI + spd.log_det() + quad))
}

/// Posterior moments of the random effects given the observations.
#[derive(Debug, Clone)]
pub struct Moments {
    /// `E[T_i | Z]`.
    pub t_mean: Vec<DVector<f64>>,
    /// `E[T_iᵀ T_i | Z]`.
    pub t_sq: Vec<f64>,
    /// `E[B_i | Z]` as `d_i × (m+1)` tables; index 0 is the residual.
    pub b_mean: Vec<DMatrix<f64>>,
    /// `[tr var(B_ij, B_ik | Z)]_{j,k}`.
    pub b_var: Vec<DMatrix<f64>>,
    /// `[E(B_ijᵀ B_ik | Z)]_{j,k}`.
    pub b_cross: Vec<DMatrix<f64>>,
    /// Observed-data log-likelihood at the parameters used.
    pub loglik: f64,
}

struct VInverse {
    inv: DMatrix<f64>,
    log_det: f64,
}

/// Fixed, parameter-free pieces of the model.
struct Workspace {
    /// `W_i W_iᵀ` for every blocking term.
    grams: Vec<DMatrix<f64>>,
    /// `C_i C_iᵀ` restricted to nonzero rows is not exploited; kept dense.
    ccts: Vec<DMatrix<f64>>,
    structured: Option<Structured>,
}

/// Equal-size single blocking factor: `V = (Σ_0 + kΣ_1) ⊗ (J̄ + P_B − J̄) + Σ_0 ⊗ (I − P_B)`.
struct Structured {
    partition: OrthogonalPartition,
    block_size: f64,
    ranks: Vec<f64>,
}

impl Workspace {
    fn new(st: &StackedData, allow_structured: bool) -> Self {
        let grams = st.blocking.iter().map(|b| &b.w * b.w.transpose()).collect();
        let ccts = st.treatment_random.iter().map(|t| &t.c * t.c.transpose()).collect();
        let structured = if allow_structured { Structured::detect(st) } else { None };
        Self { grams, ccts, structured }
    }
}

impl Structured {
    fn detect(st: &StackedData) -> Option<Self> {
        if !st.treatment_random.is_empty() || st.blocking.len() != 2 {
            return None;
        }
        let w = &st.blocking[1].w;
        let n = st.n_obs;
        let sizes: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
        let k = sizes[0];
        let nb = sizes.len();
        if nb < 2 || k < 2.0 || sizes.iter().any(|&s| s != k) || w.row_iter().any(|r| r.sum() != 1.0) {
            return None;
        }
        let jbar = DMatrix::from_element(n, n, 1.0 / n as f64);
        let pb = w * w.transpose() / k;
        let projectors = vec![jbar.clone(), &pb - &jbar, DMatrix::identity(n, n) - &pb];
        let partition = OrthogonalPartition::new(projectors).ok()?;
        Some(Self {
            partition,
            block_size: k,
            ranks: vec![1.0, (nb - 1) as f64, (n - nb) as f64],
        })
    }

    fn invert(&self, p: &MvcParams) -> Result<VInverse> {
        let top = &p.sigmas[0] + &p.sigmas[1] * self.block_size;
        let strata = vec![top.clone(), top, p.sigmas[0].clone()];
        let mut log_det = 0.0;
        for (g, &r) in strata.iter().zip(&self.ranks) {
            if r > 0.0 {
                log_det += r * Spd::new(g, "stratum covariance")?.log_det();
            }
        }
        let kc = KroneckerCovariance::new(self.partition.clone(), strata)?;
        let inv = kron_cov_dense(&kron_cov_inverse(&kc)?);
        Ok(VInverse { inv, log_det })
    }
}

fn invert_v(model: &MultivariateModel, ws: &Workspace) -> Result<VInverse> {
    if let Some(s) = &ws.structured {
        return s.invert(&model.params);
    }
    let spd = Spd::new(&assemble_v_unchecked(model), "V")?;
    Ok(VInverse {
        log_det: spd.log_det(),
        inv: spd.inverse(),
    })
}

/// Conditional expectations of the complete-data sufficient statistics.
pub fn e_step(model: &MultivariateModel) -> Result<Moments> {
    e_step_with(model, &Workspace::new(&model.stacked, false))
}

fn e_step_with(model: &MultivariateModel, ws: &Workspace) -> Result<Moments> {
    let st = &model.stacked;
    let p = &model.params;
    let (n, nv) = (st.n_obs, st.n_vars);
    let vi = invert_v(model, ws)?;
    let r = model.residual();
    let s = &vi.inv * &r;
    let loglik = -0.5 * (r.len() as f64 * LN_2PI + vi.log_det + r.dot(&s));
    let s_tab = table(&s, n, nv);

    let mut t_mean = Vec::new();
    let mut t_sq = Vec::new();
    for ((term, &s2), cct) in st.treatment_random.iter().zip(&p.sigma2).zip(&ws.ccts) {
        let mean = term.c.transpose() * &s * s2;
        let tr = trace_product(&vi.inv.view((0, 0), vi.inv.shape()), cct);
        let var_trace = s2 * term.n_levels() as f64 - s2 * s2 * tr;
        t_sq.push(mean.norm_squared() + var_trace);
        t_mean.push(mean);
    }

    let mut b_mean = Vec::new();
    let mut b_var = Vec::new();
    let mut b_cross = Vec::new();
    for ((term, sig), gram) in st.blocking.iter().zip(&p.sigmas).zip(&ws.grams) {
        let d = term.n_levels() as f64;
        let mean = term.w.transpose() * &s_tab * sig;
        let tr = DMatrix::from_fn(nv, nv, |a, b| trace_product(&vi.inv.view((a * n, b * n), (n, n)), gram));
        let mut var = sig * d - sig * tr * sig;
        linalg::symmetrize(&mut var);
        let mut cross = mean.transpose() * &mean + &var;
        linalg::symmetrize(&mut cross);
        b_mean.push(mean);
        b_var.push(var);
        b_cross.push(cross);
    }
    Ok(Moments { t_mean, t_sq, b_mean, b_var, b_cross, loglik })
}

/// Parameter update from the posterior moments.
///
/// β is updated first by GLS with weight `(Σ_0 ⊗ I)⁻¹` on the observations
/// minus the expected random effects; the residual moments are then
/// recomputed at the new β before `Σ_0` is updated. Returns the new
/// parameters and the number of clipped covariance matrices.
pub fn m_step(moments: &Moments, model: &MultivariateModel) -> Result<(MvcParams, usize)> {
    let st = &model.stacked;
    let p = &model.params;
    let (n, nv) = (st.n_obs, st.n_vars);

    let mut target = st.z.clone();
    for (term, mean) in st.treatment_random.iter().zip(&moments.t_mean) {
        target -= &term.c * mean;
    }
    for (term, mean) in st.blocking.iter().zip(&moments.b_mean).skip(1) {
        target -= stack(&(&term.w * mean));
    }
    let s0_inv = linalg::spd_inverse(&p.sigmas[0], "Σ_0")?;
    let mut wx = DMatrix::zeros(st.x.nrows(), st.x.ncols());
    for c in 0..st.x.ncols() {
        let col = table(&st.x.column(c).into_owned(), n, nv) * &s0_inv;
        wx.set_column(c, &stack(&col));
    }
    let wy = stack(&(table(&target, n, nv) * &s0_inv));
    let (beta, _) = linalg::weighted_ls(&st.x, &wx, &wy)?;

    let shift = table(&(&st.x * (&beta - &p.beta)), n, nv);
    let b0 = &moments.b_mean[0] - shift;
    let mut cross0 = b0.transpose() * &b0 + &moments.b_var[0];
    linalg::symmetrize(&mut cross0);

    let mut clipped = 0;
    let mut sigmas = Vec::with_capacity(st.blocking.len());
    for (i, term) in st.blocking.iter().enumerate() {
        let cross = if i == 0 { &cross0 } else { &moments.b_cross[i] };
        let raw = cross / term.n_levels() as f64;
        let (s, changed) = clip_psd(&raw, CLIP_FLOOR);
        if changed {
            log::debug!("clipped eigenvalues of Σ_{i} ({})", term.name);
            clipped += 1;
        }
        sigmas.push(s);
    }
    if Spd::new(&sigmas[0], "Σ_0").is_err() {
        return Err(Error::Singular("residual covariance Σ_0 collapsed; step rejected".into()));
    }
    let sigma2 = st
        .treatment_random
        .iter()
        .zip(&moments.t_sq)
        .map(|(term, &sq)| (sq / term.n_levels() as f64).max(0.0))
        .collect();
    Ok((MvcParams { beta, sigma2, sigmas }, clipped))
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Stop when the observed log-likelihood changes by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Invert `V` through its stratum decomposition when the design allows.
    pub structured: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            structured: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MVCFit {
    pub model: MultivariateModel,
    pub loglik: f64,
    /// Observed log-likelihood of the starting point and of every iterate.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub mu_z_hat: DVector<f64>,
    /// Number of times a `Σ̂_i` had eigenvalues clipped.
    pub clip_events: usize,
}

impl MVCFit {
    /// Smallest one-step change of the log-likelihood.
    pub fn min_increment(&self) -> f64 {
        self.loglik_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn fit_em(init: MultivariateModel, opts: &EmOptions) -> Result<MVCFit> {
    let ws = Workspace::new(&init.stacked, opts.structured);
    let mut model = init;
    let mut moments = e_step_with(&model, &ws)?;
    let mut trace = vec![moments.loglik];
    let mut converged = false;
    let mut clip_events = 0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (params, clipped) = m_step(&moments, &model)?;
        clip_events += clipped;
        let next = MultivariateModel { stacked: model.stacked.clone(), params };
        let next_moments = e_step_with(&next, &ws)?;
        iterations += 1;
        let delta = next_moments.loglik - moments.loglik;
        trace.push(next_moments.loglik);
        model = next;
        moments = next_moments;
        if delta.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without converging");
    }
    let mu_z_hat = model.mu_z();
    Ok(MVCFit {
        loglik: moments.loglik,
        model,
        loglik_trace: trace,
        iterations,
        converged,
        mu_z_hat,
        clip_events,
    })
}

/// Build the stacked model from a dataset and fit it from the default start.
pub fn fit_dataset(ds: &Dataset, spec: &DesignSpec, opts: &EmOptions) -> Result<MVCFit> {
    let st = build_stacked(ds, spec)?;
    fit_em(MultivariateModel::initial(st)?, opts)
}

#[derive(Debug, Clone)]
pub struct AdjustedMeansResult {
    pub treatments: Vec<String>,
    pub means: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub evaluated_at: DVector<f64>,
}

impl AdjustedMeansResult {
    pub fn se(&self) -> DVector<f64> {
        DVector::from_fn(self.means.len(), |i, _| self.covariance[(i, i)].max(0.0).sqrt())
    }
}

/// Treatment means of the response conditional on the covariates sitting at
/// `μ̂_z`, with the covariance that treats `V̂` as known.
///
/// The GLS estimate `β̂ = (XᵀV⁻¹X)⁻¹XᵀV⁻¹Z` has conditional covariance
/// `A E_0 V*_00 E_0ᵀ Aᵀ` given the covariates, where `A` is the GLS map,
/// `E_0` selects the response rows and `V*_00` is the Schur complement of
/// the covariate block.
pub fn adjusted_means_mvc(fit: &MVCFit) -> Result<AdjustedMeansResult> {
    let model = &fit.model;
    let st = &model.stacked;
    let (n, nv) = (st.n_obs, st.n_vars);
    let m = nv - 1;
    let v = assemble_v(model)?;
    let vspd = Spd::new(&v, "V")?;
    let vinv_x = vspd.solve(&st.x);
    let info = Spd::new(&(st.x.transpose() * &vinv_x), "XᵀV⁻¹X")?;
    // A = (XᵀV⁻¹X)⁻¹ XᵀV⁻¹
    let a = info.solve(&vinv_x.transpose());
    let beta = &a * &st.z;

    let x0 = st.x.rows(0, n).into_owned();
    let v00 = v.view((0, 0), (n, n)).into_owned();
    let (lrec, vstar) = if m == 0 {
        (x0, v00)
    } else {
        let vcc = v.view((n, n), (n * m, n * m)).into_owned();
        let v0c = v.view((0, n), (n, n * m)).into_owned();
        let ccspd = Spd::new(&vcc, "covariate block of V")?;
        let k = ccspd.solve(&v0c.transpose()).transpose();
        let xc = st.x.rows(n, n * m).into_owned();
        let amu = model.mu_z_map();
        let rmu = DMatrix::from_fn(n * m, st.x.ncols(), |row, c| amu[(row / n, c)]);
        let mut vstar = &v00 - &k * v0c.transpose();
        linalg::symmetrize(&mut vstar);
        (&x0 + &k * (rmu - xc), vstar)
    };

    let t = st.n_treatments();
    let mut l = DMatrix::zeros(t, st.x.ncols());
    let mut counts = vec![0.0; t];
    for k in 0..n {
        let i = st.treatment_of[k];
        counts[i] += 1.0;
        let row = l.row(i) + lrec.row(k);
        l.set_row(i, &row);
    }
    for (i, &c) in counts.iter().enumerate() {
        let row = l.row(i) / c;
        l.set_row(i, &row);
    }

    let a0 = a.columns(0, n).into_owned();
    let beta_cov = &a0 * vstar * a0.transpose();
    let mut covariance = &l * beta_cov * l.transpose();
    linalg::symmetrize(&mut covariance);
    Ok(AdjustedMeansResult {
        treatments: st.treatment_labels.clone(),
        means: &l * &beta,
        covariance,
        evaluated_at: model.mu_z_map() * &beta,
    })
}
