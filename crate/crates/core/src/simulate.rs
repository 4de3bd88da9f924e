//! Seeded generators for the bivariate block model and a Monte Carlo study
//! of slope and adjusted-mean bias conditional on the covariate.
//!
//! Every replicate draws from its own ChaCha20 stream, so results do not
//! depend on the order or thread in which replicates are generated.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bivariate::{conditional_from_bivariate, exchangeable, fit_bivariate_rcb_ml, BivariateOptions, BivariateParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layout::RcbLayout;
use crate::linalg;
use crate::lmm::{LmmOptions, Method};
use crate::rcb::{self, fit_fixed_rcb, fit_mixed_rcb, gamma_mixed, Divisor};

/// Stream reserved for the shared covariate draw.
const COVARIATE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub b: usize,
    /// `t` is `params.mu_y.len()`.
    pub params: BivariateParams,
    pub replicates: usize,
    pub seed: u64,
    /// Draw the covariate once and reuse it in every replicate.
    pub condition_on_z: bool,
}

impl SimConfig {
    /// Six treatments in four blocks, 2000 replicates, conditional on `z`.
    pub fn default_shape(params: BivariateParams, seed: u64) -> Self {
        Self { b: 4, params, replicates: 2000, seed, condition_on_z: true }
    }

    pub fn t(&self) -> usize {
        self.params.t()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Input("replicates must be at least 1".into()));
        }
        if self.t() < 2 || self.b < 2 {
            return Err(Error::Input("need at least two treatments and two blocks".into()));
        }
        linalg::psd_factor(&self.params.sigma_b, "Sigma_B")?;
        linalg::psd_factor(&self.params.sigma_e, "Sigma_E")?;
        if !(self.params.sigma_e[(1, 1)] > 0.0) {
            return Err(Error::Input("Sigma_E must give the covariate positive variance".into()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normals(rng: &mut ChaCha20Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| StandardNormal.sample(rng))
}

/// Joint draw of `(Y, Z)` from the block model.
fn joint_draw(cfg: &SimConfig, rng: &mut ChaCha20Rng) -> Result<RcbLayout> {
    let (t, b) = (cfg.t(), cfg.b);
    let p = &cfg.params;
    let fb = linalg::psd_factor(&p.sigma_b, "Sigma_B")?;
    let fe = linalg::psd_factor(&p.sigma_e, "Sigma_E")?;
    let mut y = DMatrix::zeros(t, b);
    let mut z = DMatrix::zeros(t, b);
    for j in 0..b {
        let bj = &fb * normals(rng, 2);
        for i in 0..t {
            let e = &fe * normals(rng, 2);
            y[(i, j)] = p.mu_y[i] + bj[0] + e[0];
            z[(i, j)] = p.mu_z + bj[1] + e[1];
        }
    }
    RcbLayout::new(y, z)
}

/// Covariate table from its marginal: `Z_ij = μ_z + B_j,z + E_ij,z`.
pub fn covariate_draw(cfg: &SimConfig) -> DMatrix<f64> {
    let mut rng = rng_for(cfg.seed, COVARIATE_STREAM);
    let p = &cfg.params;
    let (sbz, sez) = (p.sigma_b[(1, 1)].max(0.0).sqrt(), p.sigma_e[(1, 1)].sqrt());
    let mut z = DMatrix::zeros(cfg.t(), cfg.b);
    for j in 0..cfg.b {
        let bj = sbz * normals(&mut rng, 1)[0];
        for i in 0..cfg.t() {
            z[(i, j)] = p.mu_z + bj + sez * normals(&mut rng, 1)[0];
        }
    }
    z
}

/// Response drawn from its conditional distribution given the covariate
/// table: mean `μ_y,i + γ_e(z_ij − μ_z) + γ_b(z̄_·j − μ_z)`, block covariance
/// `σ_e² I + σ_b² J`.
fn conditional_draw(cfg: &SimConfig, z: &DMatrix<f64>, rng: &mut ChaCha20Rng) -> Result<RcbLayout> {
    let (t, b) = (cfg.t(), cfg.b);
    let p = &cfg.params;
    let c = conditional_from_bivariate(p)?;
    let f = linalg::psd_factor(&exchangeable(c.sigma_e2, c.sigma_b2.max(0.0), t), "conditional covariance")?;
    let zb = RcbLayout::block_means(z);
    let mut y = DMatrix::zeros(t, b);
    for j in 0..b {
        let e = &f * normals(rng, t);
        for i in 0..t {
            y[(i, j)] = p.mu_y[i] + c.gamma_e * (z[(i, j)] - p.mu_z) + c.gamma_b * (zb[j] - p.mu_z) + e[i];
        }
    }
    RcbLayout::new(y, z.clone())
}

fn replicate(cfg: &SimConfig, r: usize, fixed_z: Option<&DMatrix<f64>>) -> Result<RcbLayout> {
    let mut rng = rng_for(cfg.seed, r as u64);
    match fixed_z {
        Some(z) => conditional_draw(cfg, z, &mut rng),
        None => joint_draw(cfg, &mut rng),
    }
}

/// One `t × b` layout per replicate.
pub fn gen_bivariate_rcb(cfg: &SimConfig) -> Result<Vec<RcbLayout>> {
    cfg.validate()?;
    let z = cfg.condition_on_z.then(|| covariate_draw(cfg));
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| replicate(cfg, r, z.as_ref()))
        .collect()
}

/// Long-format records (`block`, `trt`, `y`, `z`) of a layout.
pub fn layout_dataset(layout: &RcbLayout) -> Result<Dataset> {
    let (t, b) = (layout.t(), layout.b());
    let mut trt = Vec::with_capacity(t * b);
    let mut blk = Vec::with_capacity(t * b);
    let mut y = Vec::with_capacity(t * b);
    let mut z = Vec::with_capacity(t * b);
    for j in 0..b {
        for i in 0..t {
            trt.push(layout.treatments[i].clone());
            blk.push(layout.blocks[j].clone());
            y.push(Some(layout.y[(i, j)]));
            z.push(Some(layout.z[(i, j)]));
        }
    }
    Dataset::from_columns(
        vec![("block".into(), blk), ("trt".into(), trt)],
        "y",
        y,
        vec![("z".into(), z)],
    )
}

/// One row of a bias study.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub estimator: String,
    pub target: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    /// Sampling standard deviation across replicates.
    pub mc_sd: f64,
    pub bias: f64,
    /// `|bias| > 3 MC SE`.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSummary {
    pub rows: Vec<BiasRow>,
    pub replicates: usize,
    /// Replicates where some estimator could not be computed; excluded.
    pub failed: usize,
    /// `ρ` of the conditional model used for the known-`ρ` mixed slope.
    pub rho: f64,
    pub w_intra: f64,
    pub w_inter: f64,
}

impl BiasSummary {
    pub fn row(&self, estimator: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("estimator\ttarget\tmc_mean\tmc_se\tbias\tflag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.estimator,
                crate::report::num(r.target),
                crate::report::num(r.mc_mean),
                crate::report::num(r.mc_se),
                crate::report::num(r.bias),
                if r.flagged { "biased" } else { "ok" }
            ));
        }
        out
    }
}

struct Estimates {
    gamma_e: f64,
    gamma_ols: f64,
    gamma_mixed: f64,
    gamma_mixed_ml: f64,
    adj_bivariate: DVector<f64>,
    adj_mixed: DVector<f64>,
}

fn estimate(layout: &RcbLayout, rho: f64) -> Result<Estimates> {
    let biv = fit_bivariate_rcb_ml(layout, BivariateOptions::default())?;
    let fixed = fit_fixed_rcb(layout, Divisor::Ml)?;
    let gm = gamma_mixed(&layout.z, &layout.y, rho)?;
    let ml = fit_mixed_rcb(layout, Method::Ml, &LmmOptions::default())?;
    let yt = RcbLayout::treatment_means(&layout.y);
    let zt = RcbLayout::treatment_means(&layout.z);
    let zg = layout.z.mean();
    let adjust = |g: f64| DVector::from_fn(yt.len(), |i, _| yt[i] - g * (zt[i] - zg));
    Ok(Estimates {
        gamma_e: biv.helmert.gamma_e_hat,
        gamma_ols: fixed.gamma_ols,
        gamma_mixed: gm,
        gamma_mixed_ml: ml.gamma_mixed,
        adj_bivariate: adjust(biv.helmert.gamma_e_hat),
        adj_mixed: adjust(gm),
    })
}

fn summarize(name: String, target: f64, values: &[f64]) -> BiasRow {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    let se = sd / n.sqrt();
    let bias = mean - target;
    BiasRow {
        estimator: name,
        target,
        mc_mean: mean,
        mc_se: se,
        mc_sd: sd,
        bias,
        flagged: bias.abs() > 3.0 * se,
    }
}

/// Monte Carlo means of the slope and adjusted-mean estimators against their
/// targets given the shared covariate table.
///
/// Rows: `gamma_e` (bivariate), `gamma_ols` and `gamma_mixed` (known `ρ`)
/// and `gamma_mixed_ml` (fitted `ρ`) against `γ_e`; `gamma_mixed_expected`,
/// the known-`ρ` slope against
/// `(w_intra γ_e + (1−ρ) w_inter γ_be) / (w_intra + (1−ρ) w_inter)`;
/// `adj_bivariate[T]` and `adj_mixed[T]` against the conditional mean
/// `μ_y,i + γ_be(z̄_·· − μ_z)`.
pub fn bias_study(cfg: &SimConfig) -> Result<BiasSummary> {
    if !cfg.condition_on_z {
        return Err(Error::Input("the bias study is conditional on z; set condition_on_z".into()));
    }
    cfg.validate()?;
    let p = &cfg.params;
    let t = cfg.t();
    let c = conditional_from_bivariate(p)?;
    let rho = rcb::rho(c.sigma_e2, c.sigma_b2.max(0.0), t);
    let z = covariate_draw(cfg);
    let w_intra = rcb::intra_form(&z, &z);
    let w_inter = rcb::inter_form(&z, &z);
    let mixing = (w_intra * c.gamma_e + (1.0 - rho) * w_inter * c.gamma_be) / (w_intra + (1.0 - rho) * w_inter);

    let results: Vec<Option<Estimates>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| replicate(cfg, r, Some(&z)).and_then(|l| estimate(&l, rho)).ok())
        .collect();
    let ok: Vec<&Estimates> = results.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Inestimable("no replicate could be estimated".into()));
    }
    let col = |f: &dyn Fn(&Estimates) -> f64| -> Vec<f64> { ok.iter().map(|e| f(e)).collect() };

    let mut rows = vec![
        summarize("gamma_e".into(), c.gamma_e, &col(&|e| e.gamma_e)),
        summarize("gamma_ols".into(), c.gamma_e, &col(&|e| e.gamma_ols)),
        summarize("gamma_mixed".into(), c.gamma_e, &col(&|e| e.gamma_mixed)),
        summarize("gamma_mixed_expected".into(), mixing, &col(&|e| e.gamma_mixed)),
        summarize("gamma_mixed_ml".into(), c.gamma_e, &col(&|e| e.gamma_mixed_ml)),
    ];
    let zg = z.mean();
    let labels: Vec<String> = (1..=t).map(|i| format!("T{i}")).collect();
    for (i, label) in labels.iter().enumerate() {
        let target = p.mu_y[i] + c.gamma_be * (zg - p.mu_z);
        rows.push(summarize(format!("adj_bivariate[{label}]"), target, &col(&|e| e.adj_bivariate[i])));
    }
    for (i, label) in labels.iter().enumerate() {
        let target = p.mu_y[i] + c.gamma_be * (zg - p.mu_z);
        rows.push(summarize(format!("adj_mixed[{label}]"), target, &col(&|e| e.adj_mixed[i])));
    }
    Ok(BiasSummary {
        rows,
        replicates: cfg.replicates,
        failed: cfg.replicates - ok.len(),
        rho,
        w_intra,
        w_inter,
    })
}
