//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::Path;

use covadj::bivariate::{
    adjusted_covariance_bivariate, adjusted_means_bivariate, fit_bivariate_rcb_ml,
    fit_conditional_ibd, fit_naive_ibd, BivariateFit, BivariateOptions, BivariateParams, IbdFit,
};
use covadj::compare::{compare_rcb, Comparison};
use covadj::data::{load_dataset, Dataset, DesignSpec, Recipe};
use covadj::design::validate_partition;
use covadj::layout::{BlockLayout, RcbLayout};
use covadj::lmm::{self, LmmFit, LmmOptions, Method};
use covadj::mvc::{self, adjusted_means_mvc, EmOptions, MVCFit};
use covadj::orthogonal::{fit_orthogonal_conditional, DesignRecipe, OrthogonalFit};
use covadj::rcb::{self, fit_fixed_rcb, fit_mixed_rcb, Divisor, FixedFitRCB, MixedFitRCB};
use covadj::report::num;
use covadj::simulate::{bias_study, gen_bivariate_rcb, SimConfig};
use nalgebra::{DMatrix, DVector};

use crate::output::{Cell, Report};
use crate::{
    CheckRun, CliError, Command, CompareRun, ContrastRun, Fitting, Format, Inputs, MethodArg,
    Model, ModelRun, Outputs, SimulateRun,
};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit(r) => fit(r),
        Command::Adjust(r) => adjust(r),
        Command::Contrast(r) => contrast(r),
        Command::Compare(r) => compare(r),
        Command::CheckDesign(r) => check_design(r),
        Command::Simulate(r) => simulate(r),
    }
}

struct Input {
    spec: DesignSpec,
    ds: Dataset,
}

fn load(inputs: &Inputs) -> Result<Input, CliError> {
    let text = fs::read_to_string(&inputs.design)
        .map_err(|e| CliError::input(format!("{}: {e}", inputs.design.display())))?;
    let spec = DesignSpec::from_toml(&text)?;
    let file = File::open(&inputs.data)
        .map_err(|e| CliError::input(format!("{}: {e}", inputs.data.display())))?;
    let ds = load_dataset(file, &spec)?;
    Ok(Input { spec, ds })
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Ml => Method::Ml,
        MethodArg::Reml => Method::Reml,
    }
}

fn lmm_options(f: &Fitting) -> LmmOptions {
    let d = LmmOptions::default();
    LmmOptions {
        tol: f.tol.unwrap_or(d.tol),
        max_iter: f.max_iter.unwrap_or(d.max_iter),
        ..d
    }
}

fn em_options(f: &Fitting) -> EmOptions {
    let d = EmOptions::default();
    EmOptions {
        tol: f.tol.unwrap_or(d.tol),
        max_iter: f.max_iter.unwrap_or(d.max_iter),
        ..d
    }
}

/// The fitted model behind `fit`, `adjust` and `contrast`.
enum Fitted {
    Fixed {
        layout: RcbLayout,
        fit: FixedFitRCB,
    },
    Mixed {
        layout: RcbLayout,
        fit: MixedFitRCB,
    },
    Bivariate(Box<BivariateFit>),
    Block {
        fit: IbdFit,
        model: &'static str,
    },
    Orthogonal(Box<OrthogonalFit>),
    Mvc {
        fit: Box<MVCFit>,
        names: Vec<String>,
    },
}

/// Treatment-level estimates with their joint covariance.
struct Estimates {
    /// `mean` for adjusted means, `effect` for sum-to-zero effects.
    scale: &'static str,
    treatments: Vec<String>,
    values: DVector<f64>,
    cov: DMatrix<f64>,
    evaluated_at: Vec<(String, f64)>,
}

fn complete_rcb(input: &Input) -> Option<RcbLayout> {
    if input.spec.recipe != Recipe::Rcb {
        return None;
    }
    RcbLayout::from_dataset(&input.ds, &input.spec).ok()
}

fn fit_model(input: &Input, f: &Fitting) -> Result<Fitted, CliError> {
    let m = method(f.method);
    let opts = lmm_options(f);
    let fitted = match f.model {
        Model::Fixed => {
            let layout = RcbLayout::from_dataset(&input.ds, &input.spec)?;
            let divisor = match f.method {
                MethodArg::Ml => Divisor::Ml,
                MethodArg::Reml => Divisor::Unbiased,
            };
            let fit = fit_fixed_rcb(&layout, divisor)?;
            Fitted::Fixed { layout, fit }
        }
        Model::Mixed => match complete_rcb(input) {
            Some(layout) => {
                let fit = fit_mixed_rcb(&layout, m, &opts)?;
                if !fit.converged {
                    return Err(CliError::not_converged(
                        "variance components did not converge",
                    ));
                }
                Fitted::Mixed { layout, fit }
            }
            None => {
                let layout = BlockLayout::from_dataset(&input.ds, &input.spec)?;
                let fit = fit_naive_ibd(&layout, m, &opts)?;
                lmm_converged(&fit.lmm)?;
                Fitted::Block {
                    fit,
                    model: "mixed",
                }
            }
        },
        Model::Bivariate => match complete_rcb(input).filter(|_| f.method == MethodArg::Ml) {
            Some(layout) => {
                let opts = BivariateOptions {
                    treatments_affect_covariates: input.spec.treatments_affect_covariates,
                    ..Default::default()
                };
                Fitted::Bivariate(Box::new(fit_bivariate_rcb_ml(&layout, opts)?))
            }
            None => {
                let layout = BlockLayout::from_dataset(&input.ds, &input.spec)?;
                let fit = fit_conditional_ibd(&layout, m, &opts)?;
                lmm_converged(&fit.lmm)?;
                Fitted::Block {
                    fit,
                    model: "bivariate",
                }
            }
        },
        Model::Orthogonal => {
            let recipe = DesignRecipe::from_spec(&input.spec)?;
            let fit = fit_orthogonal_conditional(&recipe, &input.ds, m, &opts)?;
            lmm_converged(&fit.lmm)?;
            Fitted::Orthogonal(Box::new(fit))
        }
        Model::Mvc => {
            if f.method == MethodArg::Reml {
                return Err(CliError::input("reml unsupported for mvc"));
            }
            let fit = mvc::fit_dataset(&input.ds, &input.spec, &em_options(f))?;
            if !fit.converged {
                return Err(CliError::not_converged(format!(
                    "EM did not converge in {} iterations",
                    fit.iterations
                )));
            }
            let names = std::iter::once(input.spec.response.clone())
                .chain(input.spec.covariates.clone())
                .collect();
            Fitted::Mvc {
                fit: Box::new(fit),
                names,
            }
        }
    };
    Ok(fitted)
}

fn lmm_converged(fit: &LmmFit) -> Result<(), CliError> {
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::not_converged(format!(
            "variance components did not converge in {} iterations",
            fit.iterations
        )))
    }
}

fn labelled(prefix: &str, labels: &[String], values: &DVector<f64>) -> Vec<(String, f64)> {
    labels
        .iter()
        .zip(values.iter())
        .map(|(l, &v)| (format!("{prefix}[{l}]"), v))
        .collect()
}

fn lmm_rows(fit: &LmmFit) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = fit
        .x_names
        .iter()
        .cloned()
        .zip(fit.beta.iter().copied())
        .collect();
    rows.push(("sigma_e2".into(), fit.sigma_e2));
    for (n, &v) in fit.var_names.iter().zip(&fit.var_comps) {
        rows.push((format!("var[{n}]"), v));
    }
    rows
}

/// Upper triangle of a variable-by-variable covariance matrix.
fn matrix_rows(prefix: &str, names: &[String], m: &DMatrix<f64>) -> Vec<(String, f64)> {
    let mut rows = Vec::new();
    for a in 0..m.nrows() {
        for c in a..m.ncols() {
            rows.push((format!("{prefix}[{},{}]", names[a], names[c]), m[(a, c)]));
        }
    }
    rows
}

impl Fitted {
    fn name(&self) -> &'static str {
        match self {
            Fitted::Fixed { .. } => "fixed",
            Fitted::Mixed { .. } => "mixed",
            Fitted::Bivariate(_) => "bivariate",
            Fitted::Block { model, .. } => model,
            Fitted::Orthogonal(_) => "orthogonal",
            Fitted::Mvc { .. } => "mvc",
        }
    }

    fn parameters(&self) -> Report {
        let mut report = Report::new(&["parameter", "value"]);
        report.meta("model", self.name());
        let rows = match self {
            Fitted::Fixed { layout, fit } => {
                report.meta("loglik", fit.loglik);
                let mut rows = vec![("mu".to_string(), fit.mu_hat)];
                rows.extend(labelled("tau", &fit.treatments, &fit.tau_hat));
                rows.extend(labelled("block", &layout.blocks, &fit.beta_hat_blocks));
                rows.push(("gamma".into(), fit.gamma_ols));
                rows.push(("sigma_e2".into(), fit.sigma_e2_hat));
                rows
            }
            Fitted::Mixed { fit, .. } => {
                report
                    .meta("method", fit.method.name())
                    .meta("loglik", fit.loglik);
                let mut rows = vec![("mu".to_string(), fit.mu_hat)];
                rows.extend(labelled("tau", &fit.treatments, &fit.tau_hat));
                rows.push(("gamma".into(), fit.gamma_mixed));
                rows.push(("sigma_e2".into(), fit.sigma_e2_hat));
                rows.push(("sigma_b2".into(), fit.sigma_b2_hat));
                rows.push(("rho".into(), fit.rho_hat));
                rows
            }
            Fitted::Bivariate(fit) => {
                report
                    .meta("method", "ml")
                    .meta("loglik", fit.loglik)
                    .meta("sigma_b_psd", fit.sigma_b_psd);
                let vars = ["y".to_string(), "z".to_string()];
                let p = &fit.params;
                let mut rows = labelled("mu_y", &fit.treatments, &p.mu_y);
                rows.push(("mu_z".into(), p.mu_z));
                rows.extend(matrix_rows("Sigma_B", &vars, &p.sigma_b));
                rows.extend(matrix_rows("Sigma_E", &vars, &p.sigma_e));
                let c = &fit.conditional;
                rows.push(("gamma_e".into(), c.gamma_e));
                rows.push(("gamma_b".into(), c.gamma_b));
                rows.push(("gamma_be".into(), c.gamma_be));
                rows.push(("sigma_e2".into(), c.sigma_e2));
                rows.push(("sigma_b2".into(), c.sigma_b2));
                rows
            }
            Fitted::Block { fit, .. } => {
                report
                    .meta("method", fit.lmm.method.name())
                    .meta("loglik", fit.lmm.loglik);
                report.meta("iterations", fit.lmm.iterations);
                lmm_rows(&fit.lmm)
            }
            Fitted::Orthogonal(fit) => {
                report
                    .meta("method", fit.lmm.method.name())
                    .meta("loglik", fit.lmm.loglik);
                report.meta("iterations", fit.lmm.iterations);
                if !fit.dropped.is_empty() {
                    report.meta("dropped", fit.dropped.join(","));
                }
                lmm_rows(&fit.lmm)
            }
            Fitted::Mvc { fit, names } => {
                report.meta("method", "ml").meta("loglik", fit.loglik);
                report
                    .meta("iterations", fit.iterations)
                    .meta("clip_events", fit.clip_events);
                let st = &fit.model.stacked;
                let p = &fit.model.params;
                let mut rows: Vec<(String, f64)> = st
                    .x_names
                    .iter()
                    .cloned()
                    .zip(p.beta.iter().copied())
                    .collect();
                for (term, &s2) in st.treatment_random.iter().zip(&p.sigma2) {
                    rows.push((format!("sigma2[{}]", term.name), s2));
                }
                for (term, s) in st.blocking.iter().zip(&p.sigmas) {
                    rows.extend(matrix_rows(&format!("Sigma[{}]", term.name), names, s));
                }
                rows.extend(labelled("mu_z", &names[1..], &fit.mu_z_hat));
                rows
            }
        };
        for (name, value) in rows {
            report.row(vec![name.into(), value.into()]);
        }
        report
    }

    fn estimates(&self) -> Result<Estimates, CliError> {
        let mean = |treatments: &[String],
                    values: &DVector<f64>,
                    cov: DMatrix<f64>,
                    at: Vec<(String, f64)>| Estimates {
            scale: "mean",
            treatments: treatments.to_vec(),
            values: values.clone(),
            cov,
            evaluated_at: at,
        };
        Ok(match self {
            Fitted::Fixed { layout, fit } => mean(
                &fit.treatments,
                &fit.adjusted_means,
                rcb::fixed_covariance(layout, fit)?,
                vec![("z".into(), fit.zbar)],
            ),
            Fitted::Mixed { layout, fit } => mean(
                &fit.treatments,
                &fit.adjusted_means,
                rcb::mixed_covariance(layout, fit)?,
                vec![("z".into(), fit.zbar)],
            ),
            Fitted::Bivariate(fit) => {
                let (means, _) = adjusted_means_bivariate(fit);
                mean(
                    &fit.treatments,
                    &means,
                    adjusted_covariance_bivariate(fit),
                    vec![("z".into(), fit.zbar_grand)],
                )
            }
            Fitted::Block { fit, .. } => Estimates {
                scale: "effect",
                treatments: fit.treatments.clone(),
                values: fit.effects.clone(),
                cov: fit.effect_cov.clone(),
                evaluated_at: Vec::new(),
            },
            Fitted::Orthogonal(fit) => {
                let names = fit.lmm.x_names.iter().skip(fit.treatments.len());
                let at = names
                    .zip(fit.evaluated_at.iter())
                    .map(|(n, &v)| (n.clone(), v))
                    .collect();
                mean(
                    &fit.treatments,
                    &fit.adjusted_means,
                    fit.adjusted_cov.clone(),
                    at,
                )
            }
            Fitted::Mvc { fit, names } => {
                let adj = adjusted_means_mvc(fit)?;
                let at = names[1..]
                    .iter()
                    .cloned()
                    .zip(adj.evaluated_at.iter().copied())
                    .collect();
                mean(&adj.treatments, &adj.means, adj.covariance, at)
            }
        })
    }
}

impl Estimates {
    fn se(&self) -> DVector<f64> {
        DVector::from_fn(self.values.len(), |i, _| self.cov[(i, i)].max(0.0).sqrt())
    }

    fn report(&self, model: &str) -> Report {
        let mut report = Report::new(&["treatment", self.scale, "se"]);
        report.meta("model", model);
        for (name, v) in &self.evaluated_at {
            report.meta(&format!("at[{name}]"), *v);
        }
        let se = self.se();
        for (i, t) in self.treatments.iter().enumerate() {
            report.row(vec![t.as_str().into(), self.values[i].into(), se[i].into()]);
        }
        report
    }

    fn coefficients(&self, named: &BTreeMap<String, f64>) -> Result<Vec<f64>, CliError> {
        let mut c = vec![0.0; self.treatments.len()];
        for (label, &v) in named {
            let i = self
                .treatments
                .iter()
                .position(|t| t == label)
                .ok_or_else(|| {
                    CliError::input(format!("contrast names unknown treatment `{label}`"))
                })?;
            c[i] = v;
        }
        Ok(c)
    }
}

fn fit(r: ModelRun) -> Result<(), CliError> {
    let input = load(&r.inputs)?;
    let fitted = fit_model(&input, &r.fitting)?;
    emit(&r.outputs, &fitted.parameters())
}

fn adjust(r: ModelRun) -> Result<(), CliError> {
    let input = load(&r.inputs)?;
    let fitted = fit_model(&input, &r.fitting)?;
    emit(&r.outputs, &fitted.estimates()?.report(fitted.name()))
}

fn parse_coefficients(text: &str) -> Result<BTreeMap<String, f64>, CliError> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("expected LABEL=VALUE, got `{part}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::input(format!("`{value}` is not a number")))?;
        if out.insert(label.trim().to_string(), value).is_some() {
            return Err(CliError::input(format!(
                "treatment `{}` given twice",
                label.trim()
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::input("contrast has no coefficients"));
    }
    Ok(out)
}

fn contrast(r: ContrastRun) -> Result<(), CliError> {
    let input = load(&r.inputs)?;
    let (name, named) = match (&r.contrast, &r.coef) {
        (Some(name), _) => {
            let named = input.spec.contrasts.get(name).cloned().ok_or_else(|| {
                let known: Vec<&str> = input.spec.contrasts.keys().map(String::as_str).collect();
                CliError::input(format!(
                    "no contrast `{name}` in the design (declared: {})",
                    known.join(", ")
                ))
            })?;
            (name.clone(), named)
        }
        (None, Some(coef)) => ("inline".to_string(), parse_coefficients(coef)?),
        (None, None) => {
            return Err(CliError::input(
                "give --contrast NAME or --coef LABEL=VALUE,...",
            ))
        }
    };
    let fitted = fit_model(&input, &r.fitting)?;
    let est = fitted.estimates()?;
    let c = est.coefficients(&named)?;
    let (estimate, se) = lmm::contrast_with(&est.values, &est.cov, &c)?;
    let mut report = Report::new(&["contrast", "estimate", "se"]);
    report.meta("model", fitted.name()).meta("scale", est.scale);
    for (label, v) in &named {
        report.meta(&format!("coef[{label}]"), *v);
    }
    report.row(vec![name.into(), estimate.into(), se.into()]);
    emit(&r.outputs, &report)
}

fn compare(r: CompareRun) -> Result<(), CliError> {
    let input = load(&r.inputs)?;
    let layout = RcbLayout::from_dataset(&input.ds, &input.spec)?;
    let divisor = match r.method {
        MethodArg::Ml => Divisor::Ml,
        MethodArg::Reml => Divisor::Unbiased,
    };
    let cmp = compare_rcb(&layout, divisor, method(r.method), &LmmOptions::default())?;
    if !cmp.mixed.converged {
        return Err(CliError::not_converged(
            "variance components did not converge",
        ));
    }
    let mut columns = vec!["treatment"];
    columns.extend(Comparison::COLUMNS);
    let mut report = Report::new(&columns);
    for (name, value) in cmp.scalars() {
        report.meta(name, value);
    }
    for (t, values) in cmp.rows() {
        let mut cells: Vec<Cell> = vec![t.into()];
        cells.extend(values.iter().map(|&v| Cell::from(v)));
        report.row(cells);
    }
    emit(&r.outputs, &report)
}

fn check_design(r: CheckRun) -> Result<(), CliError> {
    let input = load(&r.inputs)?;
    let recipe = DesignRecipe::from_spec(&input.spec)?;
    let conformance = recipe.conformance(&input.ds)?;
    let check = validate_partition(&conformance.partition, r.tol);
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };

    let mut report = Report::new(&["check", "residual"]);
    report
        .meta("recipe", input.spec.recipe.name())
        .meta("strata", conformance.partition.len())
        .meta("tol", r.tol)
        .meta("partition", verdict(check.pass))
        .meta("conformance", verdict(conformance.pass()));
    for (name, v) in [
        ("symmetry", check.symmetry),
        ("idempotency", check.idempotency),
        ("orthogonality", check.orthogonality),
        ("completeness", check.completeness),
        ("grand_mean", check.grand_mean),
    ] {
        report.row(vec![name.into(), v.into()]);
    }
    match r.outputs.format {
        Format::Json => {
            let mut with_issues = report.clone();
            for (k, issue) in conformance.issues.iter().enumerate() {
                with_issues.meta(&format!("issue[{k}]"), issue.as_str());
            }
            write_output(&r.outputs, &with_issues.to_json())?;
        }
        Format::Tsv => {
            // human-readable `key: value` lines
            let mut text = String::new();
            for (k, v) in &report.meta {
                text.push_str(&format!("{k}: {}\n", cell_text(v)));
            }
            for row in &report.rows {
                text.push_str(&format!("{}: {}\n", cell_text(&row[0]), cell_text(&row[1])));
            }
            for issue in &conformance.issues {
                text.push_str(&format!("issue: {issue}\n"));
            }
            write_output(&r.outputs, &text)?;
        }
    }
    if !check.pass {
        return Err(CliError {
            code: 2,
            kind: "design",
            message: format!("partition checks failed: {}", check.failures().join(", ")),
        });
    }
    if !conformance.pass() {
        return Err(CliError {
            code: 2,
            kind: "design",
            message: conformance.issues.join("; "),
        });
    }
    Ok(())
}

fn cell_text(c: &Cell) -> String {
    match c {
        Cell::Text(s) => s.clone(),
        Cell::Num(x) => num(*x),
        Cell::Int(n) => n.to_string(),
        Cell::Bool(b) => b.to_string(),
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::input(format!("{what}: `{s}` is not a number")))
        })
        .collect()
}

fn covariance_arg(text: &str, what: &str) -> Result<DMatrix<f64>, CliError> {
    match parse_list(text, what)?.as_slice() {
        &[vy, c, vz] => Ok(DMatrix::from_row_slice(2, 2, &[vy, c, c, vz])),
        _ => Err(CliError::input(format!(
            "{what} takes three values var_y,cov,var_z"
        ))),
    }
}

fn simulate(r: SimulateRun) -> Result<(), CliError> {
    let mu_y = match &r.mu_y {
        Some(text) => {
            let v = parse_list(text, "--mu-y")?;
            if v.len() != r.treatments {
                return Err(CliError::input(format!(
                    "--mu-y has {} values for {} treatments",
                    v.len(),
                    r.treatments
                )));
            }
            DVector::from_vec(v)
        }
        None => DVector::zeros(r.treatments),
    };
    let params = BivariateParams::new(
        mu_y,
        r.mu_z,
        covariance_arg(&r.sigma_b, "--sigma-b")?,
        covariance_arg(&r.sigma_e, "--sigma-e")?,
    )?;
    let cfg = SimConfig {
        b: r.blocks,
        params,
        replicates: r.replicates,
        seed: r.seed,
        condition_on_z: true,
    };
    let summary = bias_study(&cfg)?;

    let mut report = Report::new(&[
        "estimator",
        "target",
        "mc_mean",
        "mc_se",
        "mc_sd",
        "bias",
        "flagged",
    ]);
    report
        .meta("treatments", r.treatments)
        .meta("blocks", r.blocks)
        .meta("replicates", summary.replicates)
        .meta("failed", summary.failed)
        .meta("seed", r.seed as usize)
        .meta("rho", summary.rho)
        .meta("w_intra", summary.w_intra)
        .meta("w_inter", summary.w_inter);
    for row in &summary.rows {
        report.row(vec![
            row.estimator.as_str().into(),
            row.target.into(),
            row.mc_mean.into(),
            row.mc_se.into(),
            row.mc_sd.into(),
            row.bias.into(),
            row.flagged.into(),
        ]);
    }
    if let Some(path) = &r.emit_data {
        emit_replicates(&cfg, path)?;
    }
    emit(&r.outputs, &report)
}

fn emit_replicates(cfg: &SimConfig, path: &Path) -> Result<(), CliError> {
    let layouts = gen_bivariate_rcb(cfg)?;
    let mut text = String::from("replicate,block,trt,y,z\n");
    for (rep, l) in layouts.iter().enumerate() {
        for j in 0..l.b() {
            for i in 0..l.t() {
                text.push_str(&format!(
                    "{rep},{},{},{:?},{:?}\n",
                    l.blocks[j],
                    l.treatments[i],
                    l.y[(i, j)],
                    l.z[(i, j)]
                ));
            }
        }
    }
    fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn emit(outputs: &Outputs, report: &Report) -> Result<(), CliError> {
    let text = match outputs.format {
        Format::Tsv => report.to_tsv(),
        Format::Json => report.to_json(),
    };
    write_output(outputs, &text)
}

fn write_output(outputs: &Outputs, text: &str) -> Result<(), CliError> {
    match &outputs.output {
        Some(path) => {
            fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::input(e.to_string()))
        }
    }
}
