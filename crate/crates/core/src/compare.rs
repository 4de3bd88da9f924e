//! Fixed-blocks, univariate mixed, and bivariate fits of one randomized
//! complete block data set, side by side.

use nalgebra::DVector;

use crate::bivariate::{adjusted_means_bivariate, fit_bivariate_rcb_ml, BivariateFit, BivariateOptions};
use crate::error::Result;
use crate::layout::RcbLayout;
use crate::lmm::{LmmOptions, Method};
use crate::rcb::{fit_fixed_rcb, fit_mixed_rcb, Divisor, FixedFitRCB, MixedFitRCB};

#[derive(Debug, Clone)]
pub struct Comparison {
    pub treatments: Vec<String>,
    pub fixed: FixedFitRCB,
    pub mixed: MixedFitRCB,
    pub bivariate: BivariateFit,
    pub bivariate_means: DVector<f64>,
    pub bivariate_se: DVector<f64>,
}

impl Comparison {
    /// Column order of [`Comparison::rows`].
    pub const COLUMNS: [&'static str; 6] =
        ["fixed_mean", "fixed_se", "mixed_mean", "mixed_se", "bivariate_mean", "bivariate_se"];

    /// One row per treatment in [`Comparison::COLUMNS`] order.
    pub fn rows(&self) -> Vec<(String, [f64; 6])> {
        self.treatments
            .iter()
            .enumerate()
            .map(|(i, name)| {
                (
                    name.clone(),
                    [
                        self.fixed.adjusted_means[i],
                        self.fixed.adjusted_se[i],
                        self.mixed.adjusted_means[i],
                        self.mixed.adjusted_se[i],
                        self.bivariate_means[i],
                        self.bivariate_se[i],
                    ],
                )
            })
            .collect()
    }

    /// Named scalar summaries: slopes, variance components and `ρ`.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("gamma_ols", self.fixed.gamma_ols),
            ("gamma_mixed", self.mixed.gamma_mixed),
            ("gamma_be", self.bivariate.conditional.gamma_be),
            ("gamma_e", self.bivariate.conditional.gamma_e),
            ("sigma_e2", self.mixed.sigma_e2_hat),
            ("sigma_b2", self.mixed.sigma_b2_hat),
            ("rho", self.mixed.rho_hat),
            ("bivariate_sigma_e2", self.bivariate.conditional.sigma_e2),
            ("bivariate_sigma_b2", self.bivariate.conditional.sigma_b2),
        ]
    }
}

/// Fits all three models. `method` applies to the univariate mixed model;
/// the bivariate fit is always maximum likelihood.
pub fn compare_rcb(layout: &RcbLayout, divisor: Divisor, method: Method, opts: &LmmOptions) -> Result<Comparison> {
    let fixed = fit_fixed_rcb(layout, divisor)?;
    let mixed = fit_mixed_rcb(layout, method, opts)?;
    let bivariate = fit_bivariate_rcb_ml(layout, BivariateOptions::default())?;
    let (bivariate_means, bivariate_se) = adjusted_means_bivariate(&bivariate);
    Ok(Comparison { treatments: layout.treatments.clone(), fixed, mixed, bivariate, bivariate_means, bivariate_se })
}
