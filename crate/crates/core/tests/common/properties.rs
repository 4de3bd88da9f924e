//! Module invariants as randomized properties. Each property runs a fixed
//! number of deterministic cases and reports the first counterexample.

use covadj::bivariate::{
    adjusted_means_bivariate, conditional_block_covariance, conditional_from_bivariate, fit_bivariate_rcb_ml,
    BivariateOptions, BivariateParams,
};
use covadj::compare::compare_rcb;
use covadj::data::{build_stacked, Dataset, DesignSpec};
use covadj::design::{helmert_matrix, kron_cov_dense, kron_cov_inverse, rcb_partition, KroneckerCovariance};
use covadj::layout::RcbLayout;
use covadj::lmm::{LmmOptions, Method};
use covadj::mvc::{adjusted_means_mvc, fit_em, EmOptions, MVCFit, MultivariateModel};
use covadj::orthogonal::stratum_regressions;
use covadj::rcb::{fit_fixed_rcb, fit_mixed_rcb, Divisor};
use covadj::report::num;
use covadj::simulate::{bias_study, gen_bivariate_rcb, SimConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normal, random_spd};

pub struct Property {
    pub name: &'static str,
    pub run: fn() -> Result<String, String>,
}

pub fn all() -> Vec<Property> {
    vec![
        Property { name: "affine equivariance of adjusted means", run: affine_equivariance },
        Property { name: "label permutation invariance", run: label_permutation },
        Property { name: "record reordering invariance", run: record_reordering },
        Property { name: "helmert orthogonality", run: helmert_orthogonality },
        Property { name: "schur nonnegativity", run: schur_nonnegativity },
        Property { name: "kronecker inverse", run: kron_inverse },
        Property { name: "missing-data consistency", run: missing_data_consistency },
        Property { name: "output determinism", run: output_determinism },
        Property { name: "fixed slope uncorrelated with raw means", run: gamma_ols_uncorrelated },
        Property { name: "helmert contrast independence", run: helmert_independence },
        Property { name: "bivariate slope sd shrinks with blocks", run: sd_shrinks_with_blocks },
    ]
}

pub fn by_name(name: &str) -> Property {
    all().into_iter().find(|p| p.name == name).expect("known property")
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run_cases<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<String, String> {
    runner(cases)
        .run(&strategy, test)
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

fn close(label: &str, got: f64, want: f64, tol: f64) -> Result<(), TestCaseError> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{label}: {got} vs {want} (tol {tol:e})")))
    }
}

fn close_vec(label: &str, got: &DVector<f64>, want: &DVector<f64>, tol: f64) -> Result<(), TestCaseError> {
    for i in 0..want.len() {
        close(&format!("{label}[{i}]"), got[i], want[i], tol * (1.0 + want[i].abs()))?;
    }
    Ok(())
}

fn fail_on<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

/// Complete `t × b` tables with correlated block and plot effects.
pub fn random_rcb(seed: u64, t: usize, b: usize) -> RcbLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sb, se) = (2.0, 1.0);
    let mut y = DMatrix::zeros(t, b);
    let mut z = DMatrix::zeros(t, b);
    for j in 0..b {
        let (u, v) = (normal(&mut rng), normal(&mut rng));
        let (by, bz) = (sb * u, sb * (0.6 * u + 0.8 * v));
        for i in 0..t {
            let (e, f) = (normal(&mut rng), normal(&mut rng));
            y[(i, j)] = 20.0 + i as f64 + by + se * e;
            z[(i, j)] = 5.0 + bz + se * (0.5 * e + 0.866 * f);
        }
    }
    RcbLayout::new(y, z).unwrap()
}

/// Long-format records of a layout, in the given cell order, with treatment
/// `i` labelled `labels[i]` and cells in `missing` left blank.
pub fn layout_records(l: &RcbLayout, labels: &[String], order: &[(usize, usize)], missing: &[(usize, usize)]) -> Dataset {
    let mut trt = Vec::new();
    let mut blk = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    for &(i, j) in order {
        trt.push(labels[i].clone());
        blk.push(l.blocks[j].clone());
        let present = !missing.contains(&(i, j));
        y.push(present.then(|| l.y[(i, j)]));
        z.push(present.then(|| l.z[(i, j)]));
    }
    Dataset::from_columns(vec![("trt".into(), trt), ("block".into(), blk)], "y", y, vec![("z".into(), z)]).unwrap()
}

fn cells(t: usize, b: usize) -> Vec<(usize, usize)> {
    (0..b).flat_map(|j| (0..t).map(move |i| (i, j))).collect()
}

fn rcb_spec() -> DesignSpec {
    DesignSpec::rcb("trt", "block", "y", &["z"])
}

fn em_tight() -> EmOptions {
    EmOptions { tol: 1e-11, max_iter: 5000, structured: true }
}

fn fit_records(ds: &Dataset) -> Result<MVCFit, TestCaseError> {
    let st = fail_on(build_stacked(ds, &rcb_spec()))?;
    let init = fail_on(MultivariateModel::initial(st))?;
    fail_on(fit_em(init, &em_tight()))
}

fn sign_and_scale() -> impl Strategy<Value = f64> {
    (prop_oneof![Just(-1.0), Just(1.0)], 0.2f64..5.0).prop_map(|(s, a)| s * a)
}

fn affine_equivariance() -> Result<String, String> {
    let strategy = (any::<u64>(), 3usize..=6, 3usize..=6, sign_and_scale(), -100.0f64..100.0);
    run_cases(48, strategy, |(seed, t, b, a, c)| {
        let l = random_rcb(seed, t, b);
        let biv = fail_on(fit_bivariate_rcb_ml(&l, BivariateOptions::default()))?;
        let (means, se) = adjusted_means_bivariate(&biv);
        let fixed = fail_on(fit_fixed_rcb(&l, Divisor::Ml))?;
        let mixed = fail_on(fit_mixed_rcb(&l, Method::Ml, &LmmOptions::default()))?;

        // covariate rescaled: slopes scale by 1/a, adjusted means unchanged
        let lz = RcbLayout { z: l.z.map(|v| a * v + c), ..l.clone() };
        let biv_z = fail_on(fit_bivariate_rcb_ml(&lz, BivariateOptions::default()))?;
        close("gamma_e", biv_z.conditional.gamma_e * a, biv.conditional.gamma_e, 1e-8 * (1.0 + biv.conditional.gamma_e.abs()))?;
        close("gamma_be", biv_z.conditional.gamma_be * a, biv.conditional.gamma_be, 1e-8 * (1.0 + biv.conditional.gamma_be.abs()))?;
        close_vec("bivariate means", &adjusted_means_bivariate(&biv_z).0, &means, 1e-10)?;
        close_vec("bivariate se", &adjusted_means_bivariate(&biv_z).1, &se, 1e-10)?;
        close_vec("fixed means", &fail_on(fit_fixed_rcb(&lz, Divisor::Ml))?.adjusted_means, &fixed.adjusted_means, 1e-10)?;
        let mixed_z = fail_on(fit_mixed_rcb(&lz, Method::Ml, &LmmOptions::default()))?;
        close_vec("mixed means", &mixed_z.adjusted_means, &mixed.adjusted_means, 1e-6)?;

        // response rescaled: means map through the same affine map, SEs by |a|
        let ly = RcbLayout { y: l.y.map(|v| a * v + c), ..l.clone() };
        let biv_y = fail_on(fit_bivariate_rcb_ml(&ly, BivariateOptions::default()))?;
        let (my, sy) = adjusted_means_bivariate(&biv_y);
        close_vec("bivariate means (y)", &my, &means.map(|m| a * m + c), 1e-10)?;
        close_vec("bivariate se (y)", &sy, &(&se * a.abs()), 1e-10)?;
        let fixed_y = fail_on(fit_fixed_rcb(&ly, Divisor::Ml))?;
        close_vec("fixed means (y)", &fixed_y.adjusted_means, &fixed.adjusted_means.map(|m| a * m + c), 1e-10)?;
        close_vec("fixed se (y)", &fixed_y.adjusted_se, &(&fixed.adjusted_se * a.abs()), 1e-10)?;
        Ok(())
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn label_permutation() -> Result<String, String> {
    let strategy = (any::<u64>(), 3usize..=5, 3usize..=5).prop_flat_map(|(seed, t, b)| {
        (Just(seed), Just(t), Just(b), permutation(t), permutation(b), any::<bool>())
    });
    run_cases(24, strategy, |(seed, t, b, pt, pb, with_missing)| {
        let l = random_rcb(seed, t, b);
        // treatment row i of the permuted layout is original row pt[i]
        let lp = RcbLayout {
            treatments: pt.iter().map(|&i| l.treatments[i].clone()).collect(),
            blocks: pb.iter().map(|&j| l.blocks[j].clone()).collect(),
            y: DMatrix::from_fn(t, b, |i, j| l.y[(pt[i], pb[j])]),
            z: DMatrix::from_fn(t, b, |i, j| l.z[(pt[i], pb[j])]),
        };
        let perm = |v: &DVector<f64>| DVector::from_fn(t, |i, _| v[pt[i]]);
        let c0 = fail_on(compare_rcb(&l, Divisor::Ml, Method::Ml, &LmmOptions::default()))?;
        let c1 = fail_on(compare_rcb(&lp, Divisor::Ml, Method::Ml, &LmmOptions::default()))?;
        close_vec("fixed", &c1.fixed.adjusted_means, &perm(&c0.fixed.adjusted_means), 1e-10)?;
        close_vec("bivariate", &c1.bivariate_means, &perm(&c0.bivariate_means), 1e-10)?;
        close_vec("bivariate se", &c1.bivariate_se, &perm(&c0.bivariate_se), 1e-10)?;
        close_vec("mixed", &c1.mixed.adjusted_means, &perm(&c0.mixed.adjusted_means), 1e-6)?;

        // multivariate engine: rename treatment i to the label of pt-position
        let missing = if with_missing { vec![(0, 0)] } else { vec![] };
        let names: Vec<String> = (0..t).map(|i| format!("T{i}")).collect();
        let renamed: Vec<String> = (0..t).map(|i| names[pt.iter().position(|&k| k == i).unwrap()].clone()).collect();
        let f0 = fit_records(&layout_records(&l, &names, &cells(t, b), &missing))?;
        let f1 = fit_records(&layout_records(&l, &renamed, &cells(t, b), &missing))?;
        close("loglik", f1.loglik, f0.loglik, 1e-10)?;
        let a0 = fail_on(adjusted_means_mvc(&f0))?;
        let a1 = fail_on(adjusted_means_mvc(&f1))?;
        // sorted label i of the renamed fit is original treatment pt[i]
        close_vec("mvc means", &a1.means, &perm(&a0.means), 1e-7)?;
        close_vec("mvc se", &a1.se(), &perm(&a0.se()), 1e-6)?;
        Ok(())
    })
}

fn record_reordering() -> Result<String, String> {
    let strategy = (any::<u64>(), 3usize..=4, 3usize..=5, any::<u64>(), any::<bool>());
    run_cases(16, strategy, |(seed, t, b, shuffle_seed, with_missing)| {
        let l = random_rcb(seed, t, b);
        let names: Vec<String> = (0..t).map(|i| format!("T{i}")).collect();
        let missing = if with_missing { vec![(1, 0)] } else { vec![] };
        let order = cells(t, b);
        let mut shuffled = order.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let d0 = layout_records(&l, &names, &order, &missing);
        let d1 = layout_records(&l, &names, &shuffled, &missing);
        let s0 = fail_on(build_stacked(&d0, &rcb_spec()))?;
        let s1 = fail_on(build_stacked(&d1, &rcb_spec()))?;
        prop_assert_eq!(&s0.z, &s1.z);
        prop_assert_eq!(&s0.x, &s1.x);
        for (w0, w1) in s0.blocking.iter().zip(&s1.blocking) {
            prop_assert_eq!(&w0.w, &w1.w);
        }
        // replication counts of each block level
        let counts: Vec<f64> = (0..b).map(|j| (t - missing.iter().filter(|c| c.1 == j).count()) as f64).collect();
        let colsum: Vec<f64> = s0.blocking[1].w.column_iter().map(|c| c.sum()).collect();
        prop_assert_eq!(colsum, counts);
        let f0 = fit_records(&d0)?;
        let f1 = fit_records(&d1)?;
        prop_assert_eq!(f0.loglik.to_bits(), f1.loglik.to_bits());
        prop_assert_eq!(&f0.model.params.beta, &f1.model.params.beta);
        Ok(())
    })
}

fn helmert_orthogonality() -> Result<String, String> {
    for t in 1..=50 {
        let h = helmert_matrix(t);
        let e = (h.transpose() * &h - DMatrix::<f64>::identity(t, t)).amax();
        if e > 1e-12 {
            return Err(format!("t = {t}: |HᵀH − I| = {e:e}"));
        }
        let first = (0..t).map(|i| (h[(i, 0)] - 1.0 / (t as f64).sqrt()).abs()).fold(0.0, f64::max);
        if first > 1e-12 {
            return Err(format!("t = {t}: first column not constant"));
        }
    }
    for t in 2..=20 {
        let h = helmert_matrix(t);
        let p = rcb_partition(t).map_err(|e| e.to_string())?;
        let mut want0 = DMatrix::zeros(t, t);
        want0[(0, 0)] = 1.0;
        let want1 = DMatrix::identity(t, t) - &want0;
        for (a, want) in p.projectors().iter().zip([want0, want1]) {
            let e = (h.transpose() * a * &h - want).amax();
            if e > 1e-10 {
                return Err(format!("t = {t}: HᵀAH off diagonal by {e:e}"));
            }
        }
    }
    Ok("t = 1..50".into())
}

fn schur_nonnegativity() -> Result<String, String> {
    let strategy = (any::<u64>(), 2usize..=8, 1usize..=3, any::<bool>());
    run_cases(256, strategy, |(seed, t, nv, rank_one)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma_e = random_spd(&mut rng, nv, 1.0);
        let sigma_b = if rank_one {
            let a = DVector::from_fn(nv, |_, _| normal(&mut rng));
            &a * a.transpose()
        } else {
            random_spd(&mut rng, nv, 3.0)
        };
        let scale = sigma_e.trace() + t as f64 * sigma_b.trace();
        let kc = fail_on(KroneckerCovariance::new(
            fail_on(rcb_partition(t))?,
            vec![&sigma_e + &sigma_b * t as f64, sigma_e.clone()],
        ))?;
        if nv > 1 {
            let reg = fail_on(stratum_regressions(&kc))?;
            for (l, lam) in reg.lambda.iter().enumerate() {
                prop_assert!(*lam >= -1e-12 * scale, "stratum {l}: λ = {lam}");
            }
        }
        if nv == 2 {
            let p = fail_on(BivariateParams::new(DVector::zeros(t), 0.0, sigma_b.clone(), sigma_e.clone()))?;
            let cov = fail_on(conditional_block_covariance(&p))?;
            let min = cov.symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-12 * scale, "conditional covariance eigenvalue {min}");
            let c = fail_on(conditional_from_bivariate(&p))?;
            prop_assert!(c.sigma_e2 >= -1e-12 * scale);
            prop_assert!(c.sigma_e2 + t as f64 * c.sigma_b2 >= -1e-12 * scale);
        }
        Ok(())
    })
}

fn kron_inverse() -> Result<String, String> {
    let strategy = (any::<u64>(), 2usize..=8, 1usize..=3);
    run_cases(64, strategy, |(seed, t, nv)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strata = vec![random_spd(&mut rng, nv, 4.0), random_spd(&mut rng, nv, 1.0)];
        let kc = fail_on(KroneckerCovariance::new(fail_on(rcb_partition(t))?, strata))?;
        let inv = fail_on(kron_cov_inverse(&kc))?;
        let prod = kron_cov_dense(&inv) * kron_cov_dense(&kc);
        let e = (prod - DMatrix::<f64>::identity(t * nv, t * nv)).amax();
        prop_assert!(e < 1e-9, "|V⁻¹V − I| = {e:e}");
        Ok(())
    })
}

fn missing_data_consistency() -> Result<String, String> {
    let strategy = (any::<u64>(), 3usize..=4, 4usize..=5, 0usize..12);
    run_cases(12, strategy, |(seed, t, b, k)| {
        let l = random_rcb(seed, t, b);
        let names: Vec<String> = (0..t).map(|i| format!("T{i}")).collect();
        let order = cells(t, b);
        // deleting zero cells is the identity
        let full = layout_records(&l, &names, &order, &[]);
        let all: Vec<usize> = (0..full.n_records()).collect();
        let f0 = fit_records(&full)?;
        let f1 = fit_records(&full.select(&all))?;
        prop_assert_eq!(f0.loglik.to_bits(), f1.loglik.to_bits());
        prop_assert_eq!(&f0.loglik_trace, &f1.loglik_trace);
        // a blank record and an absent record are the same data
        let cell = order[k % order.len()];
        let blank = layout_records(&l, &names, &order, &[cell]);
        let kept: Vec<usize> = (0..order.len()).filter(|&r| order[r] != cell).collect();
        let absent = layout_records(&l, &names, &order, &[]).select(&kept);
        let g0 = fit_records(&blank)?;
        let g1 = fit_records(&absent)?;
        prop_assert_eq!(g0.loglik.to_bits(), g1.loglik.to_bits());
        prop_assert_eq!(&g0.model.params.beta, &g1.model.params.beta);
        prop_assert!(g0.min_increment() >= -1e-10);
        Ok(())
    })
}

fn render(fit: &MVCFit) -> Result<String, TestCaseError> {
    let a = fail_on(adjusted_means_mvc(fit))?;
    let se = a.se();
    let mut out = format!("loglik\t{}\n", num(fit.loglik));
    for (i, name) in a.treatments.iter().enumerate() {
        out.push_str(&format!("{name}\t{}\t{}\n", num(a.means[i]), num(se[i])));
    }
    Ok(out)
}

fn output_determinism() -> Result<String, String> {
    let p = BivariateParams::new(
        DVector::from_fn(6, |i, _| 10.0 + i as f64),
        5.0,
        DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let cfg = SimConfig { replicates: 80, ..SimConfig::default_shape(p, 7) };
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let a = pool(1).install(|| bias_study(&cfg)).map_err(|e| e.to_string())?.to_tsv();
    let b = pool(3).install(|| bias_study(&cfg)).map_err(|e| e.to_string())?.to_tsv();
    let c = bias_study(&cfg).map_err(|e| e.to_string())?.to_tsv();
    if a != b || a != c {
        return Err("bias study output differs between runs".into());
    }
    run_cases(8, (any::<u64>(), any::<bool>()), |(seed, with_missing)| {
        let l = random_rcb(seed, 4, 4);
        let names: Vec<String> = (0..4).map(|i| format!("T{i}")).collect();
        let missing = if with_missing { vec![(2, 3)] } else { vec![] };
        let ds = layout_records(&l, &names, &cells(4, 4), &missing);
        let first = render(&fit_records(&ds)?)?;
        let second = pool(2).install(|| fit_records(&ds).and_then(|f| render(&f)))?;
        prop_assert_eq!(&first, &second);
        let rows = |c: &covadj::compare::Comparison| -> String {
            c.rows().iter().map(|(n, r)| format!("{n}\t{}\n", r.map(num).join("\t"))).collect()
        };
        let c1 = fail_on(compare_rcb(&l, Divisor::Ml, Method::Ml, &LmmOptions::default()))?;
        let c2 = fail_on(compare_rcb(&l, Divisor::Ml, Method::Ml, &LmmOptions::default()))?;
        prop_assert_eq!(rows(&c1), rows(&c2));
        Ok(())
    })
    .map(|s| format!("bias study and {s}"))
}

fn sample_corr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn gamma_ols_uncorrelated() -> Result<String, String> {
    let p = BivariateParams::new(
        DVector::from_fn(6, |i, _| 10.0 + i as f64),
        5.0,
        DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let reps = 500;
    let cfg = SimConfig { replicates: reps, ..SimConfig::default_shape(p, 11) };
    let layouts = gen_bivariate_rcb(&cfg).map_err(|e| e.to_string())?;
    let gammas: Vec<f64> = layouts
        .iter()
        .map(|l| fit_fixed_rcb(l, Divisor::Ml).map(|f| f.gamma_ols))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let bound = 4.0 / (reps as f64).sqrt();
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        let means: Vec<f64> = layouts.iter().map(|l| l.y.row(i).mean()).collect();
        let r = sample_corr(&gammas, &means);
        worst = worst.max(r.abs());
        if r.abs() >= bound {
            return Err(format!("treatment {i}: r = {r:.4} ≥ {bound:.4}"));
        }
    }
    Ok(format!("max |r| = {worst:.4} < {bound:.4}"))
}

fn helmert_independence() -> Result<String, String> {
    let (t, b) = (4, 3);
    let p = BivariateParams::new(
        DVector::from_fn(t, |i, _| i as f64),
        1.0,
        DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.5]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let cfg = SimConfig { b, params: p, replicates: 4000, seed: 5, condition_on_z: false };
    let layouts = gen_bivariate_rcb(&cfg).map_err(|e| e.to_string())?;
    let h = helmert_matrix(t);
    // rows: contrast i of (y, z) for every block of every replicate
    let mut ys: Vec<DVector<f64>> = Vec::new();
    let mut zs: Vec<DVector<f64>> = Vec::new();
    for l in &layouts {
        let (yc, zc) = (h.transpose() * &l.y, h.transpose() * &l.z);
        for j in 0..b {
            ys.push(yc.column(j).into_owned());
            zs.push(zc.column(j).into_owned());
        }
    }
    let n = ys.len() as f64;
    let col = |v: &[DVector<f64>], i: usize| -> Vec<f64> { v.iter().map(|r| r[i]).collect() };
    let cov = |a: &[f64], c: &[f64]| -> (f64, f64) {
        let (ma, mc) = (a.iter().sum::<f64>() / n, c.iter().sum::<f64>() / n);
        let prods: Vec<f64> = a.iter().zip(c).map(|(x, y)| (x - ma) * (y - mc)).collect();
        let m = prods.iter().sum::<f64>() / n;
        let sd = (prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (m, sd / n.sqrt())
    };
    let mut worst: f64 = 0.0;
    for i in 0..t {
        for k in 0..t {
            if i == k {
                continue;
            }
            for (label, a, c) in [
                ("yy", col(&ys, i), col(&ys, k)),
                ("yz", col(&ys, i), col(&zs, k)),
                ("zz", col(&zs, i), col(&zs, k)),
            ] {
                let (m, se) = cov(&a, &c);
                worst = worst.max((m / se).abs());
                if m.abs() > 4.0 * se {
                    return Err(format!("{label} contrasts {i},{k}: cov {m:.4} exceeds 4 MC SE {se:.4}"));
                }
            }
        }
    }
    Ok(format!("largest |cov| / MC SE = {worst:.2}"))
}

fn sd_shrinks_with_blocks() -> Result<String, String> {
    let p = BivariateParams::new(
        DVector::from_fn(6, |i, _| 10.0 + i as f64),
        5.0,
        DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let sd = |b: usize| -> Result<f64, String> {
        let cfg = SimConfig { b, params: p.clone(), replicates: 800, seed: 3, condition_on_z: false };
        let g: Vec<f64> = gen_bivariate_rcb(&cfg)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|l| fit_bivariate_rcb_ml(l, BivariateOptions::default()).map(|f| f.conditional.gamma_e))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let n = g.len() as f64;
        let m = g.iter().sum::<f64>() / n;
        Ok((g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    };
    let ratio = sd(4)? / sd(16)?;
    // intra-block slope variance σ²/((t−1)(b−1) − 2) gives √(73/13) ≈ 2.37
    if (2.0..2.75).contains(&ratio) {
        Ok(format!("sd(b=4)/sd(b=16) = {ratio:.3}"))
    } else {
        Err(format!("sd(b=4)/sd(b=16) = {ratio:.3} outside [2.0, 2.75)"))
    }
}
