//! Experimental records, design declarations and the stacked multivariate
//! layout.
//!
//! The design file is TOML:
//!
//! ```toml
//! recipe = "rcb"              # rcb | incomplete_block | split_plot |
//!                             # blocked_split_plot | latin_square | custom
//! response = "yield"
//! covariates = ["prev"]
//! treatments_affect_covariates = false
//!
//! [roles]                     # factor column playing each recipe role
//! treatment = "trt"
//! block = "block"
//!
//! [levels]                    # optional declared level sets
//! trt = ["A", "B", "C", "D", "E", "S"]
//!
//! [contrasts.pi]              # optional named contrasts over treatment labels
//! A = 1.0
//! B = -1.0
//! ```
//!
//! A `custom` recipe lists its terms explicitly with `treatment_factors`,
//! `blocking_factors` and `random_treatment_terms`; a term is a factor name or
//! a `:`-joined list of factor names whose level combinations form the levels
//! of the term.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Named design recipes with known stratum structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Rcb,
    IncompleteBlock,
    SplitPlot,
    BlockedSplitPlot,
    LatinSquare,
    Custom,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Rcb => "rcb",
            Recipe::IncompleteBlock => "incomplete_block",
            Recipe::SplitPlot => "split_plot",
            Recipe::BlockedSplitPlot => "blocked_split_plot",
            Recipe::LatinSquare => "latin_square",
            Recipe::Custom => "custom",
        }
    }

    /// Factor roles the recipe requires in `[roles]`.
    pub fn required_roles(self) -> &'static [&'static str] {
        match self {
            Recipe::Rcb | Recipe::IncompleteBlock => &["treatment", "block"],
            Recipe::SplitPlot => &["whole_treatment", "split_treatment", "wholeplot"],
            Recipe::BlockedSplitPlot => {
                &["block", "whole_treatment", "wholeplot", "split_treatment"]
            }
            Recipe::LatinSquare => &["row", "column", "treatment"],
            Recipe::Custom => &[],
        }
    }
}

/// A model term: one factor, or the crossing of several.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term(pub Vec<String>);

impl Term {
    pub fn parse(s: &str) -> Self {
        Term(s.split(':').map(|p| p.trim().to_string()).collect())
    }

    pub fn single(name: &str) -> Self {
        Term(vec![name.to_string()])
    }

    pub fn name(&self) -> String {
        self.0.join(":")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    recipe: Recipe,
    response: String,
    #[serde(default)]
    covariates: Vec<String>,
    #[serde(default)]
    treatments_affect_covariates: bool,
    #[serde(default)]
    roles: BTreeMap<String, String>,
    #[serde(default)]
    levels: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    treatment_factors: Vec<String>,
    #[serde(default)]
    blocking_factors: Vec<String>,
    #[serde(default)]
    random_treatment_terms: Vec<String>,
    #[serde(default)]
    contrasts: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Declaration of the fixed treatment structure, random factors, covariates
/// and recipe of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub recipe: Recipe,
    pub response: String,
    pub covariates: Vec<String>,
    pub treatments_affect_covariates: bool,
    pub roles: BTreeMap<String, String>,
    pub levels: BTreeMap<String, Vec<String>>,
    /// Fixed factors; treatment cells are their observed level combinations.
    pub treatment_factors: Vec<String>,
    /// Random blocking terms; they carry a covariance matrix across the
    /// response and every covariate.
    pub blocking_terms: Vec<Term>,
    /// Random terms associated with treatments; they act on the response only.
    pub random_treatment_terms: Vec<Term>,
    pub contrasts: BTreeMap<String, BTreeMap<String, f64>>,
}

impl DesignSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawDesign =
            toml::from_str(text).map_err(|e| Error::Input(format!("design file: {e}")))?;
        Self::from_raw(raw)
    }

    /// A plain RCB declaration (used by the simulators and tests).
    pub fn rcb(treatment: &str, block: &str, response: &str, covariates: &[&str]) -> Self {
        let mut roles = BTreeMap::new();
        roles.insert("treatment".to_string(), treatment.to_string());
        roles.insert("block".to_string(), block.to_string());
        Self::with_roles(Recipe::Rcb, roles, response, covariates).expect("valid rcb declaration")
    }

    /// Build a spec for a named recipe from its roles.
    pub fn with_roles(
        recipe: Recipe,
        roles: BTreeMap<String, String>,
        response: &str,
        covariates: &[&str],
    ) -> Result<Self> {
        Self::from_raw(RawDesign {
            recipe,
            response: response.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            treatments_affect_covariates: false,
            roles,
            levels: BTreeMap::new(),
            treatment_factors: vec![],
            blocking_factors: vec![],
            random_treatment_terms: vec![],
            contrasts: BTreeMap::new(),
        })
    }

    fn from_raw(raw: RawDesign) -> Result<Self> {
        let role = |r: &str| -> Result<String> {
            raw.roles
                .get(r)
                .cloned()
                .ok_or_else(|| Error::Input(format!("recipe {} requires role `{r}`", raw.recipe.name())))
        };
        for r in raw.recipe.required_roles() {
            role(r)?;
        }
        let (treatment_factors, blocking_terms, random_treatment_terms) = match raw.recipe {
            Recipe::Rcb | Recipe::IncompleteBlock => (
                vec![role("treatment")?],
                vec![Term::single(&role("block")?)],
                vec![],
            ),
            Recipe::SplitPlot => {
                let a = role("whole_treatment")?;
                let s = role("split_treatment")?;
                let w = role("wholeplot")?;
                (vec![a.clone(), s], vec![Term(vec![a, w])], vec![])
            }
            Recipe::BlockedSplitPlot => {
                let b = role("block")?;
                let a = role("whole_treatment")?;
                let s = role("split_treatment")?;
                let w = role("wholeplot")?;
                (
                    vec![a.clone(), s.clone()],
                    vec![Term::single(&b), Term(vec![b.clone(), a.clone(), w])],
                    vec![
                        Term(vec![b.clone(), a.clone()]),
                        Term(vec![b.clone(), s.clone()]),
                        Term(vec![b, a, s]),
                    ],
                )
            }
            Recipe::LatinSquare => (
                vec![role("treatment")?],
                vec![Term::single(&role("row")?), Term::single(&role("column")?)],
                vec![],
            ),
            Recipe::Custom => {
                if raw.treatment_factors.is_empty() {
                    return Err(Error::Input("custom recipe needs treatment_factors".into()));
                }
                (
                    raw.treatment_factors.clone(),
                    raw.blocking_factors.iter().map(|s| Term::parse(s)).collect(),
                    raw.random_treatment_terms.iter().map(|s| Term::parse(s)).collect(),
                )
            }
        };
        if raw.recipe != Recipe::Custom
            && (!raw.treatment_factors.is_empty()
                || !raw.blocking_factors.is_empty()
                || !raw.random_treatment_terms.is_empty())
        {
            return Err(Error::Input(
                "explicit term lists are only allowed with recipe = \"custom\"".into(),
            ));
        }
        let spec = DesignSpec {
            recipe: raw.recipe,
            response: raw.response,
            covariates: raw.covariates,
            treatments_affect_covariates: raw.treatments_affect_covariates,
            roles: raw.roles,
            levels: raw.levels,
            treatment_factors,
            blocking_terms,
            random_treatment_terms,
            contrasts: raw.contrasts,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for n in std::iter::once(&self.response).chain(self.covariates.iter()) {
            if !names.insert(n.clone()) {
                return Err(Error::Input(format!("column `{n}` declared twice")));
            }
        }
        for f in self.factor_names() {
            if names.contains(&f) {
                return Err(Error::Input(format!("`{f}` is both a factor and a numeric column")));
            }
        }
        let tf: BTreeSet<_> = self.treatment_factors.iter().collect();
        if tf.len() != self.treatment_factors.len() {
            return Err(Error::Input("treatment factor listed twice".into()));
        }
        let mut terms = BTreeSet::new();
        for t in self.blocking_terms.iter().chain(&self.random_treatment_terms) {
            if !terms.insert(t.clone()) {
                return Err(Error::Input(format!("term `{}` declared twice", t.name())));
            }
        }
        Ok(())
    }

    /// Every factor column referenced by the design, sorted.
    pub fn factor_names(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        set.extend(self.treatment_factors.iter().cloned());
        for t in self.blocking_terms.iter().chain(&self.random_treatment_terms) {
            set.extend(t.0.iter().cloned());
        }
        set.into_iter().collect()
    }

    pub fn m(&self) -> usize {
        self.covariates.len()
    }

    pub fn role(&self, r: &str) -> Option<&str> {
        self.roles.get(r).map(String::as_str)
    }
}

/// A categorical column.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

/// Long-format experimental records with all-or-none cell missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub factors: Vec<Factor>,
    pub response_name: String,
    pub response: Vec<Option<f64>>,
    pub covariate_names: Vec<String>,
    /// One column per covariate.
    pub covariates: Vec<Vec<Option<f64>>>,
}

impl Dataset {
    /// Build from string factor columns and numeric columns; levels are the
    /// sorted distinct values.
    pub fn from_columns(
        factors: Vec<(String, Vec<String>)>,
        response_name: &str,
        response: Vec<Option<f64>>,
        covariates: Vec<(String, Vec<Option<f64>>)>,
    ) -> Result<Self> {
        let n = response.len();
        let mut fs = Vec::new();
        for (name, values) in factors {
            if values.len() != n {
                return Err(Error::Dimension(format!("factor `{name}` length")));
            }
            let levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let index: HashMap<&str, usize> =
                levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            let codes = values.iter().map(|v| index[v.as_str()]).collect();
            fs.push(Factor { name, levels, codes });
        }
        let mut names = Vec::new();
        let mut cols = Vec::new();
        for (name, col) in covariates {
            if col.len() != n {
                return Err(Error::Dimension(format!("covariate `{name}` length")));
            }
            names.push(name);
            cols.push(col);
        }
        let ds = Dataset {
            factors: fs,
            response_name: response_name.to_string(),
            response,
            covariate_names: names,
            covariates: cols,
        };
        for r in 0..n {
            ds.check_record_missingness(r)?;
        }
        Ok(ds)
    }

    fn check_record_missingness(&self, r: usize) -> Result<()> {
        let present = self.response[r].is_some();
        if self.covariates.iter().any(|c| c[r].is_some() != present) {
            return Err(Error::Record {
                row: r + 2,
                message: "response and covariates must be all present or all missing".into(),
            });
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.response.len()
    }

    pub fn m(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_complete(&self, r: usize) -> bool {
        self.response[r].is_some()
    }

    pub fn complete_records(&self) -> Vec<usize> {
        (0..self.n_records()).filter(|&r| self.is_complete(r)).collect()
    }

    pub fn factor(&self, name: &str) -> Result<&Factor> {
        self.factors
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Input(format!("unknown factor `{name}`")))
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Input(format!("unknown covariate `{name}`")))
    }

    /// Level labels of a term over the given records, restricted to the
    /// combinations that occur, sorted lexicographically by label; plus the
    /// level index of each record.
    pub fn term_levels(&self, term: &Term, records: &[usize]) -> Result<(Vec<String>, Vec<usize>)> {
        let factors = term
            .0
            .iter()
            .map(|n| self.factor(n))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = records
            .iter()
            .map(|&r| {
                factors
                    .iter()
                    .map(|f| f.levels[f.codes[r]].as_str())
                    .collect::<Vec<_>>()
                    .join(":")
            })
            .collect();
        let levels: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let index: HashMap<&str, usize> =
            levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = labels.iter().map(|l| index[l.as_str()]).collect();
        Ok((levels, codes))
    }

    /// Per-record value of a complete record; panics on a missing cell.
    pub fn y(&self, r: usize) -> f64 {
        self.response[r].expect("complete record")
    }

    pub fn z(&self, cov: usize, r: usize) -> f64 {
        self.covariates[cov][r].expect("complete record")
    }

    /// Subset of records (in the given order).
    pub fn select(&self, records: &[usize]) -> Dataset {
        Dataset {
            factors: self
                .factors
                .iter()
                .map(|f| Factor {
                    name: f.name.clone(),
                    levels: f.levels.clone(),
                    codes: records.iter().map(|&r| f.codes[r]).collect(),
                })
                .collect(),
            response_name: self.response_name.clone(),
            response: records.iter().map(|&r| self.response[r]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: self
                .covariates
                .iter()
                .map(|c| records.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }

    /// Copy with an extra covariate column appended.
    pub fn with_covariate(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        if values.len() != self.n_records() {
            return Err(Error::Dimension(format!("covariate `{name}` length")));
        }
        if self.covariate_names.iter().any(|c| c == name) {
            return Err(Error::Input(format!("covariate `{name}` already present")));
        }
        let mut out = self.clone();
        out.covariate_names.push(name.to_string());
        out.covariates.push(values);
        Ok(out)
    }
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|_| Error::Record {
        row,
        message: format!("column `{column}`: `{field}` is not a number"),
    })
}

/// Parse delimited text (comma or tab, detected from the header line) into a
/// [`Dataset`] holding the columns the design refers to. Empty fields are
/// missing values.
pub fn load_dataset<R: Read>(mut source: R, spec: &DesignSpec) -> Result<Dataset> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let header_line = text.lines().next().unwrap_or("");
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("data file has no column `{name}`")))
    };
    let factor_names = spec.factor_names();
    let factor_cols = factor_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let response_col = col(&spec.response)?;
    let covariate_cols = spec.covariates.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    let mut factor_values: Vec<Vec<String>> = vec![Vec::new(); factor_names.len()];
    let mut response = Vec::new();
    let mut covariates: Vec<Vec<Option<f64>>> = vec![Vec::new(); spec.covariates.len()];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        for (k, &c) in factor_cols.iter().enumerate() {
            let v = rec.get(c).unwrap_or("");
            if v.is_empty() {
                return Err(Error::Record {
                    row,
                    message: format!("factor `{}` is empty", factor_names[k]),
                });
            }
            if let Some(declared) = spec.levels.get(&factor_names[k]) {
                if !declared.iter().any(|l| l == v) {
                    return Err(Error::Record {
                        row,
                        message: format!("unknown level `{v}` of factor `{}`", factor_names[k]),
                    });
                }
            }
            factor_values[k].push(v.to_string());
        }
        let y = parse_number(rec.get(response_col).unwrap_or(""), row, &spec.response)?;
        let zs = covariate_cols
            .iter()
            .zip(&spec.covariates)
            .map(|(&c, name)| parse_number(rec.get(c).unwrap_or(""), row, name))
            .collect::<Result<Vec<_>>>()?;
        if zs.iter().any(|z| z.is_some() != y.is_some()) {
            return Err(Error::Record {
                row,
                message: "partially missing cell: response and covariates must be all present or all missing".into(),
            });
        }
        response.push(y);
        for (k, z) in zs.into_iter().enumerate() {
            covariates[k].push(z);
        }
    }
    let mut ds = Dataset::from_columns(
        factor_names.into_iter().zip(factor_values).collect(),
        &spec.response,
        response,
        spec.covariates.iter().cloned().zip(covariates).collect(),
    )?;
    // Keep declared level order (and unobserved declared levels) where given.
    for f in &mut ds.factors {
        if let Some(declared) = spec.levels.get(&f.name) {
            let mut sorted = declared.clone();
            sorted.sort();
            sorted.dedup();
            let index: HashMap<&str, usize> =
                sorted.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            f.codes = f.codes.iter().map(|&c| index[f.levels[c].as_str()]).collect();
            f.levels = sorted;
        }
    }
    Ok(ds)
}

/// A random term associated with treatments (`C_i`, acting on the response).
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTreatmentTerm {
    pub name: String,
    /// `N × c_i` incidence on the stacked vector.
    pub c: DMatrix<f64>,
}

impl RandomTreatmentTerm {
    pub fn n_levels(&self) -> usize {
        self.c.ncols()
    }
}

/// A random blocking term with `D_i = I_{m+1} ⊗ W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockingTerm {
    pub name: String,
    /// `n × d_i` incidence of the term on the observed records.
    pub w: DMatrix<f64>,
    pub levels: Vec<String>,
}

impl BlockingTerm {
    pub fn n_levels(&self) -> usize {
        self.w.ncols()
    }
}

/// The stacked model `Z = Xβ + Σ C_i T_i + Σ D_i B_i` over complete records.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedData {
    pub n_obs: usize,
    /// `m + 1`
    pub n_vars: usize,
    /// Variable-major stacked observations (responses, then each covariate).
    pub z: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub treatment_labels: Vec<String>,
    /// `treatment_columns[v][i]`: column of X holding the mean of variable `v`
    /// for treatment `i`. For covariates unaffected by treatments every
    /// entry of the row points at the single grand-mean column.
    pub mean_columns: Vec<Vec<usize>>,
    pub treatment_random: Vec<RandomTreatmentTerm>,
    /// `blocking[0]` is the residual term with `W_0 = I_n`.
    pub blocking: Vec<BlockingTerm>,
    /// Stacked position → (record index in the source dataset, variable).
    pub obs_index: Vec<(usize, usize)>,
    /// Treatment index of each observed record.
    pub treatment_of: Vec<usize>,
    pub treatments_affect_covariates: bool,
}

impl StackedData {
    /// Dense `D_i = I_{m+1} ⊗ W_i`.
    pub fn d_matrix(&self, i: usize) -> DMatrix<f64> {
        crate::linalg::kron(&DMatrix::identity(self.n_vars, self.n_vars), &self.blocking[i].w)
    }

    pub fn n_treatments(&self) -> usize {
        self.treatment_labels.len()
    }

    /// Stacked position of (observed record `k`, variable `v`).
    pub fn position(&self, k: usize, v: usize) -> usize {
        v * self.n_obs + k
    }
}

/// Assemble the stacked multivariate mixed model over the complete records.
///
/// Treatment means use cell-means coding on the response; covariates get one
/// grand-mean column each (one column per treatment when treatments affect
/// covariates). Blocking levels with no complete record are dropped.
pub fn build_stacked(ds: &Dataset, spec: &DesignSpec) -> Result<StackedData> {
    if ds.m() != spec.m() {
        return Err(Error::Dimension(format!(
            "dataset has {} covariates, design declares {}",
            ds.m(),
            spec.m()
        )));
    }
    let mut records = ds.complete_records();
    // Canonical record order: fits are exactly invariant under reordering.
    let factors = spec
        .factor_names()
        .iter()
        .map(|f| ds.factor(f))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|&a, &b| {
        let label = |r: usize| factors.iter().map(move |f| f.levels[f.codes[r]].as_str());
        let values = |r: usize| std::iter::once(ds.y(r)).chain((0..ds.m()).map(move |c| ds.z(c, r)));
        label(a)
            .cmp(label(b))
            .then_with(|| {
                values(a)
                    .zip(values(b))
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let n = records.len();
    let nv = spec.m() + 1;
    if n == 0 {
        return Err(Error::Inestimable("no complete records".into()));
    }
    let treatment_term = Term(spec.treatment_factors.clone());
    let (labels, tcodes) = ds.term_levels(&treatment_term, &records)?;
    // Declared-but-unobserved treatment combinations are inestimable.
    let (all_labels, _) = ds.term_levels(&treatment_term, &(0..ds.n_records()).collect::<Vec<_>>())?;
    if let Some(missing) = all_labels.iter().find(|l| !labels.contains(l)) {
        return Err(Error::Inestimable(format!("treatment `{missing}` has no complete cells")));
    }
    if spec.treatment_factors.len() == 1 {
        let f = ds.factor(&spec.treatment_factors[0])?;
        if let Some(missing) = f.levels.iter().find(|l| !labels.contains(l)) {
            return Err(Error::Inestimable(format!("treatment `{missing}` has no complete cells")));
        }
    }
    let t = labels.len();

    let mut z = DVector::zeros(n * nv);
    let mut obs_index = Vec::with_capacity(n * nv);
    for v in 0..nv {
        for (k, &r) in records.iter().enumerate() {
            z[v * n + k] = if v == 0 { ds.y(r) } else { ds.z(v - 1, r) };
            obs_index.push((r, v));
        }
    }

    let mut x_names = Vec::new();
    let mut mean_columns = vec![vec![0usize; t]; nv];
    let mut col_specs: Vec<(usize, Option<usize>)> = Vec::new(); // (variable, treatment or None)
    for (i, l) in labels.iter().enumerate() {
        mean_columns[0][i] = col_specs.len();
        col_specs.push((0, Some(i)));
        x_names.push(format!("{}[{l}]", spec.response));
    }
    for v in 1..nv {
        let name = &spec.covariates[v - 1];
        if spec.treatments_affect_covariates {
            for (i, l) in labels.iter().enumerate() {
                mean_columns[v][i] = col_specs.len();
                col_specs.push((v, Some(i)));
                x_names.push(format!("{name}[{l}]"));
            }
        } else {
            let c = col_specs.len();
            mean_columns[v].iter_mut().for_each(|e| *e = c);
            col_specs.push((v, None));
            x_names.push(format!("{name}[mean]"));
        }
    }
    let mut x = DMatrix::zeros(n * nv, col_specs.len());
    for (c, &(v, tr)) in col_specs.iter().enumerate() {
        for k in 0..n {
            if tr.is_none_or(|i| tcodes[k] == i) {
                x[(v * n + k, c)] = 1.0;
            }
        }
    }

    let incidence = |term: &Term| -> Result<(Vec<String>, DMatrix<f64>)> {
        let (levels, codes) = ds.term_levels(term, &records)?;
        let mut w = DMatrix::zeros(n, levels.len());
        for (k, &c) in codes.iter().enumerate() {
            w[(k, c)] = 1.0;
        }
        Ok((levels, w))
    };

    let mut blocking = vec![BlockingTerm {
        name: "residual".into(),
        w: DMatrix::identity(n, n),
        levels: (0..n).map(|k| k.to_string()).collect(),
    }];
    for term in &spec.blocking_terms {
        let (levels, w) = incidence(term)?;
        blocking.push(BlockingTerm { name: term.name(), w, levels });
    }
    let mut treatment_random = Vec::new();
    for term in &spec.random_treatment_terms {
        let (_, w) = incidence(term)?;
        let mut c = DMatrix::zeros(n * nv, w.ncols());
        c.view_mut((0, 0), (n, w.ncols())).copy_from(&w);
        treatment_random.push(RandomTreatmentTerm { name: term.name(), c });
    }

    Ok(StackedData {
        n_obs: n,
        n_vars: nv,
        z,
        x,
        x_names,
        treatment_labels: labels,
        mean_columns,
        treatment_random,
        blocking,
        obs_index,
        treatment_of: tcodes,
        treatments_affect_covariates: spec.treatments_affect_covariates,
    })
}
