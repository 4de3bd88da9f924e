//! Two-way (treatment × block) views of a dataset with a single covariate.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, DesignSpec, Term};
use crate::error::{Error, Result};

/// Response and covariate of a complete block design as `t × b` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RcbLayout {
    pub treatments: Vec<String>,
    pub blocks: Vec<String>,
    /// `y[(i, j)]`: treatment `i` in block `j`.
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

fn one_blocking_term(spec: &DesignSpec) -> Result<&Term> {
    match spec.blocking_terms.as_slice() {
        [b] if spec.random_treatment_terms.is_empty() => Ok(b),
        _ => Err(Error::Design("expected exactly one blocking factor".into())),
    }
}

fn single_covariate(ds: &Dataset) -> Result<()> {
    if ds.m() != 1 {
        return Err(Error::Design(format!(
            "this estimator needs exactly one covariate, found {}",
            ds.m()
        )));
    }
    Ok(())
}

impl RcbLayout {
    pub fn from_dataset(ds: &Dataset, spec: &DesignSpec) -> Result<Self> {
        single_covariate(ds)?;
        let block_term = one_blocking_term(spec)?;
        let all: Vec<usize> = (0..ds.n_records()).collect();
        if ds.complete_records().len() != all.len() {
            return Err(Error::Design("complete-block estimator needs every cell observed".into()));
        }
        let (treatments, tc) = ds.term_levels(&Term(spec.treatment_factors.clone()), &all)?;
        let (blocks, bc) = ds.term_levels(block_term, &all)?;
        let (t, b) = (treatments.len(), blocks.len());
        let mut seen = DMatrix::from_element(t, b, false);
        let mut y = DMatrix::zeros(t, b);
        let mut z = DMatrix::zeros(t, b);
        for r in all {
            let (i, j) = (tc[r], bc[r]);
            if seen[(i, j)] {
                return Err(Error::Design(format!(
                    "treatment `{}` appears twice in block `{}`",
                    treatments[i], blocks[j]
                )));
            }
            seen[(i, j)] = true;
            y[(i, j)] = ds.y(r);
            z[(i, j)] = ds.z(0, r);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Design("not every treatment appears in every block".into()));
        }
        Ok(Self { treatments, blocks, y, z })
    }

    /// Layout with generated labels `T1..Tt`, `B1..Bb`.
    pub fn new(y: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        if y.shape() != z.shape() {
            return Err(Error::Dimension("y and z tables differ in shape".into()));
        }
        let treatments = (1..=y.nrows()).map(|i| format!("T{i}")).collect();
        let blocks = (1..=y.ncols()).map(|j| format!("B{j}")).collect();
        Ok(Self { treatments, blocks, y, z })
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn b(&self) -> usize {
        self.y.ncols()
    }

    /// Treatment-major vectorization `(v_11, v_12, …, v_1b, v_21, …)`.
    pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(m.len(), m.transpose().iter().cloned())
    }

    pub fn treatment_means(m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(m.nrows(), |i, _| m.row(i).mean())
    }

    pub fn block_means(m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(m.ncols(), |j, _| m.column(j).mean())
    }

    /// `v_ij − v̄_i· − v̄_·j + v̄_··`.
    pub fn double_centered(m: &DMatrix<f64>) -> DMatrix<f64> {
        let tm = Self::treatment_means(m);
        let bm = Self::block_means(m);
        let g = m.mean();
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - tm[i] - bm[j] + g)
    }
}

/// An incomplete block design: each record has a treatment and block index.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub treatments: Vec<String>,
    pub blocks: Vec<String>,
    pub treatment: Vec<usize>,
    pub block: Vec<usize>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    /// Records (in dataset order) that make up the layout.
    pub records: Vec<usize>,
}

impl BlockLayout {
    /// Complete records only; a treatment may occur at most once per block.
    pub fn from_dataset(ds: &Dataset, spec: &DesignSpec) -> Result<Self> {
        single_covariate(ds)?;
        let block_term = one_blocking_term(spec)?;
        let records = ds.complete_records();
        let (treatments, treatment) = ds.term_levels(&Term(spec.treatment_factors.clone()), &records)?;
        let (blocks, block) = ds.term_levels(block_term, &records)?;
        let mut seen = std::collections::HashSet::new();
        for (&i, &j) in treatment.iter().zip(&block) {
            if !seen.insert((i, j)) {
                return Err(Error::Design(format!(
                    "treatment `{}` appears twice in block `{}`",
                    treatments[i], blocks[j]
                )));
            }
        }
        let y = DVector::from_iterator(records.len(), records.iter().map(|&r| ds.y(r)));
        let z = DVector::from_iterator(records.len(), records.iter().map(|&r| ds.z(0, r)));
        Ok(Self { treatments, blocks, treatment, block, y, z, records })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.blocks.len()];
        for &j in &self.block {
            sizes[j] += 1;
        }
        sizes
    }

    /// Block mean of `v` for every record.
    pub fn block_mean_per_record(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut sum = vec![0.0; self.blocks.len()];
        let sizes = self.block_sizes();
        for (k, &j) in self.block.iter().enumerate() {
            sum[j] += v[k];
        }
        DVector::from_fn(self.n(), |k, _| sum[self.block[k]] / sizes[self.block[k]] as f64)
    }

    /// Treatment cell-means columns (`n × t`).
    pub fn treatment_incidence(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.treatments.len(), |k, i| {
            if self.treatment[k] == i {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn block_incidence(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.blocks.len(), |k, j| {
            if self.block[k] == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// True when every treatment can be compared with every other through
    /// shared blocks.
    pub fn is_connected(&self) -> bool {
        let t = self.treatments.len();
        let nb = self.blocks.len();
        // union-find over treatments and blocks
        let mut parent: Vec<usize> = (0..t + nb).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (&i, &j) in self.treatment.iter().zip(&self.block) {
            let a = find(&mut parent, i);
            let b = find(&mut parent, t + j);
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        (1..t).all(|i| find(&mut parent, i) == root)
    }
}
