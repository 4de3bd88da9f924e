//! Covariate-adjusted treatment means for designed experiments.
//!
//! The crate fits a multivariate variance-components model for the joint
//! distribution of a response and its covariates, and derives adjusted
//! treatment means from the implied conditional model. The classical
//! fixed-blocks and univariate mixed-model estimators are provided alongside
//! for comparison.

pub mod bivariate;
pub mod compare;
pub mod data;
pub mod design;
pub mod error;
pub mod layout;
pub mod linalg;
pub mod lmm;
pub mod mvc;
pub mod optim;
pub mod orthogonal;
pub mod rcb;
pub mod report;
pub mod simulate;

pub use error::{Error, Result};
