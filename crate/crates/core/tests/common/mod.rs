//! Shared instance generators and independent oracles for integration tests.
#![allow(dead_code)]

pub mod properties;

use covadj::data::{build_stacked, Dataset, DesignSpec, StackedData};
use covadj::linalg;
use covadj::mvc::{observed_loglik, MultivariateModel, MvcParams};
use covadj::optim::{minimize, Options};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_spd(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(k, k) * 0.3) * scale
}

/// A small design with its declared spec and dataset.
pub struct Instance {
    pub label: String,
    pub spec: DesignSpec,
    pub data: Dataset,
}

impl Instance {
    pub fn stacked(&self) -> StackedData {
        build_stacked(&self.data, &self.spec).unwrap()
    }
}

/// Records of a design: treatment label and the level of each blocking factor.
struct Layout {
    treatment: Vec<String>,
    blocks: Vec<(String, Vec<String>)>,
    missing: Vec<usize>,
}

fn rcb_layout(t: usize, b: usize, missing: Vec<usize>) -> Layout {
    let mut treatment = Vec::new();
    let mut block = Vec::new();
    for j in 0..b {
        for i in 0..t {
            treatment.push(format!("T{i}"));
            block.push(format!("B{j}"));
        }
    }
    Layout { treatment, blocks: vec![("blk".into(), block)], missing }
}

fn row_column_layout(rows: usize, cols: usize, t: usize) -> Layout {
    let mut treatment = Vec::new();
    let mut row = Vec::new();
    let mut col = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            treatment.push(format!("T{}", (r + c) % t));
            row.push(format!("R{r}"));
            col.push(format!("C{c}"));
        }
    }
    Layout {
        treatment,
        blocks: vec![("row".into(), row), ("col".into(), col)],
        missing: vec![],
    }
}

fn custom_spec(blocks: &[&str], m: usize) -> DesignSpec {
    let covs: Vec<String> = (1..=m).map(|k| format!("\"z{k}\"")).collect();
    let bl: Vec<String> = blocks.iter().map(|b| format!("\"{b}\"")).collect();
    let text = format!(
        "recipe = \"custom\"\nresponse = \"y\"\ncovariates = [{}]\ntreatment_factors = [\"trt\"]\nblocking_factors = [{}]\n",
        covs.join(", "),
        bl.join(", ")
    );
    DesignSpec::from_toml(&text).unwrap()
}

pub const BLOCK_SCALE_UNBALANCED: f64 = 10.0;

/// Draw a dataset from the multivariate model with strong blocking.
fn draw(label: String, layout: Layout, m: usize, rng: &mut ChaCha8Rng) -> Instance {
    let block_scale = if layout.missing.is_empty() { 100.0 } else { BLOCK_SCALE_UNBALANCED };
    let nv = m + 1;
    let n = layout.treatment.len();
    let mut values = DMatrix::<f64>::zeros(n, nv);
    let t_levels: std::collections::BTreeSet<_> = layout.treatment.iter().cloned().collect();
    let t_index: Vec<usize> = layout
        .treatment
        .iter()
        .map(|l| t_levels.iter().position(|x| x == l).unwrap())
        .collect();
    for k in 0..n {
        values[(k, 0)] = 10.0 + 2.0 * t_index[k] as f64;
        for v in 1..nv {
            values[(k, v)] = 3.0 * v as f64;
        }
    }
    let s0 = random_spd(rng, nv, 1.0);
    let f0 = linalg::psd_factor(&s0, "Σ_0").unwrap();
    for k in 0..n {
        let e = DVector::from_fn(nv, |_, _| normal(rng));
        let d = &f0 * e;
        for v in 0..nv {
            values[(k, v)] += d[v];
        }
    }
    for (_, levels) in &layout.blocks {
        let sb = random_spd(rng, nv, block_scale);
        let fb = linalg::psd_factor(&sb, "Σ_b").unwrap();
        let distinct: std::collections::BTreeSet<_> = levels.iter().cloned().collect();
        for l in distinct {
            let e = &fb * DVector::from_fn(nv, |_, _| normal(rng));
            for k in 0..n {
                if levels[k] == l {
                    for v in 0..nv {
                        values[(k, v)] += e[v];
                    }
                }
            }
        }
    }
    let present = |k: usize| !layout.missing.contains(&k);
    let response = (0..n).map(|k| present(k).then(|| values[(k, 0)])).collect();
    let covariates = (1..nv)
        .map(|v| (format!("z{v}"), (0..n).map(|k| present(k).then(|| values[(k, v)])).collect()))
        .collect();
    let mut factors = vec![("trt".to_string(), layout.treatment.clone())];
    factors.extend(layout.blocks.iter().cloned());
    let block_names: Vec<&str> = layout.blocks.iter().map(|(n, _)| n.as_str()).collect();
    let spec = custom_spec(&block_names, m);
    let data = Dataset::from_columns(factors, "y", response, covariates).unwrap();
    Instance { label, spec, data }
}

/// Twenty small instances: `n ≤ 12`, `m ≤ 2`, `q ≤ 2`, fixed seeds.
///
/// Every stratum keeps at least `m + 2` degrees of freedom, so with the
/// strong generating block covariance the maximum is interior with high
/// probability: two covariates only appear in complete six-block or blockless
/// layouts.
pub fn oracle_instances() -> Vec<Instance> {
    (0..20u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let m = 1 + (i as usize / 5) % 2;
            let (t, b) = if m == 1 { (3, 4) } else { (2, 6) };
            match i % 5 {
                0 => draw(format!("rcb {t}x{b} m={m} #{i}"), rcb_layout(t, b, vec![]), m, &mut rng),
                1 => draw(format!("rcb 2x6 m={m} #{i}"), rcb_layout(2, 6, vec![]), m, &mut rng),
                2 => draw(format!("rcb 3x4 missing m=1 #{i}"), rcb_layout(3, 4, vec![0, 5]), 1, &mut rng),
                3 => draw(format!("row-column 3x4 m=1 #{i}"), row_column_layout(3, 4, 4), 1, &mut rng),
                _ => {
                    let mut l = rcb_layout(3, 4, vec![]);
                    l.blocks.clear();
                    draw(format!("blockless 3x4 m={m} #{i}"), l, m, &mut rng)
                }
            }
        })
        .collect()
}

/// Lower-triangular factor parameterization: log diagonal, free below.
fn chol_params(s: &DMatrix<f64>) -> Vec<f64> {
    let k = s.nrows();
    let l = s.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(k, k) * s.trace().max(1e-6).sqrt());
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].max(1e-8).ln() } else { l[(i, j)] });
        }
    }
    out
}

fn chol_matrix(theta: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, k);
    let mut idx = 0;
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[idx].exp() } else { theta[idx] };
            idx += 1;
        }
    }
    &l * l.transpose()
}

/// GLS `β` at the covariance implied by `sigmas`.
fn profiled(st: &StackedData, sigma2: &[f64], sigmas: Vec<DMatrix<f64>>) -> Option<MultivariateModel> {
    let p = MvcParams {
        beta: DVector::zeros(st.x.ncols()),
        sigma2: sigma2.to_vec(),
        sigmas,
    };
    let model = MultivariateModel::new(st.clone(), p).ok()?;
    let v = covadj::mvc::assemble_v(&model).ok()?;
    let chol = v.cholesky()?;
    let vx = chol.solve(&st.x);
    let info = (st.x.transpose() * &vx).cholesky()?;
    let beta = info.solve(&(vx.transpose() * &st.z));
    let mut model = model;
    model.params.beta = beta;
    Some(model)
}

/// Maximize the observed log-likelihood directly over all covariance
/// parameters with β profiled out, starting from `start`.
pub fn direct_ml(start: &MultivariateModel) -> (f64, MultivariateModel) {
    let st = &start.stacked;
    let nv = st.n_vars;
    let per = nv * (nv + 1) / 2;
    let q1 = start.params.sigmas.len();
    let mut x0 = Vec::new();
    for s in &start.params.sigmas {
        x0.extend(chol_params(s));
    }
    let unpack = |x: &[f64]| -> Vec<DMatrix<f64>> { (0..q1).map(|i| chol_matrix(&x[i * per..(i + 1) * per], nv)).collect() };
    let objective = |x: &[f64]| -> f64 {
        match profiled(st, &start.params.sigma2, unpack(x)) {
            Some(m) => observed_loglik(&m).map(|l| -l).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        }
    };
    let opts = Options { max_iter: 5000, grad_tol: 1e-9, f_tol: 1e-15, lower: -40.0, upper: 40.0 };
    let mut best = minimize(&objective, &x0, &opts);
    // restart from the optimum to refresh the quasi-Newton curvature
    for _ in 0..3 {
        let again = minimize(&objective, &best.x, &opts);
        let done = best.f - again.f < 1e-12;
        best = again;
        if done {
            break;
        }
    }
    let model = profiled(st, &start.params.sigma2, unpack(&best.x)).unwrap();
    (-best.f, model)
}

/// Largest absolute difference across β and every Σ_i.
pub fn param_distance(a: &MvcParams, b: &MvcParams) -> f64 {
    let mut d = (&a.beta - &b.beta).amax();
    for (x, y) in a.sigmas.iter().zip(&b.sigmas) {
        d = d.max((x - y).amax());
    }
    for (x, y) in a.sigma2.iter().zip(&b.sigma2) {
        d = d.max((x - y).abs());
    }
    d
}
