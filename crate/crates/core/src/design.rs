//! Projector partitions and Kronecker-structured covariance matrices.
//!
//! An orthogonal blocking design has a joint covariance of the form
//! `V = Σ_l G_l ⊗ A_l`, where the `A_l` are mutually orthogonal symmetric
//! idempotents summing to the identity and `A_0` is the grand-mean averaging
//! matrix. The dense layout used throughout is variable-major: entry
//! `(v * k + i, w * k + j)` couples variable `v` on unit `i` with variable `w`
//! on unit `j`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, max_abs};

/// Default tolerance for the partition invariants.
pub const DEFAULT_PARTITION_TOL: f64 = 1e-10;

/// `I_n − J_n / n`.
pub fn centering_matrix(n: usize) -> DMatrix<f64> {
    assert!(n >= 1, "centering_matrix needs n >= 1");
    DMatrix::identity(n, n) - averaging_matrix(n)
}

/// `J_n / n`, the grand-mean averaging projector.
pub fn averaging_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Orthogonal Helmert matrix of order `t`.
///
/// Column 0 is `1/√t`; column `j ≥ 1` contrasts unit `j` with the units
/// before it: `j` leading entries equal to `1/√(j(j+1))`, entry `j` equal to
/// `−j/√(j(j+1))`, zeros after.
pub fn helmert_matrix(t: usize) -> DMatrix<f64> {
    assert!(t >= 1, "helmert_matrix needs t >= 1");
    let mut h = DMatrix::zeros(t, t);
    let c0 = 1.0 / (t as f64).sqrt();
    for i in 0..t {
        h[(i, 0)] = c0;
    }
    for j in 1..t {
        let jf = j as f64;
        let norm = (jf * (jf + 1.0)).sqrt();
        for i in 0..j {
            h[(i, j)] = 1.0 / norm;
        }
        h[(j, j)] = -jf / norm;
    }
    h
}

/// An ordered set of projectors `A_0..A_q` on `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalPartition {
    dim: usize,
    projectors: Vec<DMatrix<f64>>,
}

impl OrthogonalPartition {
    /// Wrap projectors without checking the algebraic invariants (see
    /// [`validate_partition`]); only shapes are checked.
    pub fn new(projectors: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = projectors
            .first()
            .ok_or_else(|| Error::Dimension("partition has no projectors".into()))?;
        let dim = first.nrows();
        for (l, a) in projectors.iter().enumerate() {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::Dimension(format!(
                    "projector {l} is {}x{}, expected {dim}x{dim}",
                    a.nrows(),
                    a.ncols()
                )));
            }
        }
        Ok(Self { dim, projectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projectors(&self) -> &[DMatrix<f64>] {
        &self.projectors
    }

    /// Number of strata, `q + 1`.
    pub fn len(&self) -> usize {
        self.projectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projectors.is_empty()
    }
}

/// `{J̄_t, I_t − J̄_t}`: the within-block strata of a complete block.
pub fn rcb_partition(t: usize) -> Result<OrthogonalPartition> {
    if t < 2 {
        return Err(Error::Design(format!(
            "a block of size {t} has no contrast stratum"
        )));
    }
    OrthogonalPartition::new(vec![averaging_matrix(t), centering_matrix(t)])
}

/// Residuals of each partition invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub pass: bool,
    pub tol: f64,
    /// max over l of ‖A_l − A_lᵀ‖_max
    pub symmetry: f64,
    /// max over l of ‖A_l A_l − A_l‖_max
    pub idempotency: f64,
    /// max over l ≠ l' of ‖A_l A_l'‖_max
    pub orthogonality: f64,
    /// ‖Σ A_l − I‖_max
    pub completeness: f64,
    /// ‖A_0 − J̄_k‖_max
    pub grand_mean: f64,
}

impl PartitionReport {
    /// Names of the checks that exceed the tolerance.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let checks = [
            ("symmetry", self.symmetry),
            ("idempotency", self.idempotency),
            ("orthogonality", self.orthogonality),
            ("completeness", self.completeness),
            ("grand_mean", self.grand_mean),
        ];
        for (name, r) in checks {
            if !(r <= self.tol) {
                out.push(name);
            }
        }
        out
    }
}

pub fn validate_partition(p: &OrthogonalPartition, tol: f64) -> PartitionReport {
    let k = p.dim;
    let a = &p.projectors;
    let mut symmetry = 0.0_f64;
    let mut idempotency = 0.0_f64;
    let mut orthogonality = 0.0_f64;
    let mut sum = DMatrix::zeros(k, k);
    for (l, al) in a.iter().enumerate() {
        symmetry = symmetry.max(max_abs(&(al - al.transpose())));
        idempotency = idempotency.max(max_abs(&(al * al - al)));
        for al2 in a.iter().skip(l + 1) {
            orthogonality = orthogonality.max(max_abs(&(al * al2)));
        }
        sum += al;
    }
    let completeness = max_abs(&(sum - DMatrix::<f64>::identity(k, k)));
    let grand_mean = max_abs(&(&a[0] - averaging_matrix(k)));
    let mut report = PartitionReport {
        pass: false,
        tol,
        symmetry,
        idempotency,
        orthogonality,
        completeness,
        grand_mean,
    };
    report.pass = report.failures().is_empty();
    report
}

/// `V = Σ_l G_l ⊗ A_l` with `(m+1)×(m+1)` strata matrices `G_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCovariance {
    partition: OrthogonalPartition,
    strata: Vec<DMatrix<f64>>,
}

impl KroneckerCovariance {
    pub fn new(partition: OrthogonalPartition, strata: Vec<DMatrix<f64>>) -> Result<Self> {
        if strata.len() != partition.len() {
            return Err(Error::Dimension(format!(
                "{} strata matrices for {} projectors",
                strata.len(),
                partition.len()
            )));
        }
        let v = strata[0].nrows();
        for (l, g) in strata.iter().enumerate() {
            if g.nrows() != v || g.ncols() != v {
                return Err(Error::Dimension(format!("stratum {l} matrix is not {v}x{v}")));
            }
            if max_abs(&(g - g.transpose())) > 1e-12 * max_abs(g).max(1.0) {
                return Err(Error::Input(format!("stratum {l} matrix is not symmetric")));
            }
        }
        Ok(Self { partition, strata })
    }

    pub fn partition(&self) -> &OrthogonalPartition {
        &self.partition
    }

    pub fn strata(&self) -> &[DMatrix<f64>] {
        &self.strata
    }

    /// Number of variables, `m + 1`.
    pub fn n_vars(&self) -> usize {
        self.strata[0].nrows()
    }
}

/// Dense `Σ_l G_l ⊗ A_l` in variable-major layout.
pub fn kron_cov_dense(kc: &KroneckerCovariance) -> DMatrix<f64> {
    let k = kc.partition.dim;
    let v = kc.n_vars();
    let mut out = DMatrix::zeros(v * k, v * k);
    for (g, a) in kc.strata.iter().zip(kc.partition.projectors.iter()) {
        out += linalg::kron(g, a);
    }
    out
}

/// `(Σ G_l ⊗ A_l)⁻¹ = Σ G_l⁻¹ ⊗ A_l`.
pub fn kron_cov_inverse(kc: &KroneckerCovariance) -> Result<KroneckerCovariance> {
    let strata = kc
        .strata
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let mut inv = linalg::inverse(g, "stratum").map_err(|_| Error::SingularStratum { index: l })?;
            linalg::symmetrize(&mut inv);
            Ok(inv)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KroneckerCovariance {
        partition: kc.partition.clone(),
        strata,
    })
}
