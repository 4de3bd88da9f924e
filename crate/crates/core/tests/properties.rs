mod common;

use common::properties::by_name;

fn check(name: &str) {
    let start = std::time::Instant::now();
    match (by_name(name).run)() {
        Ok(summary) => eprintln!("{name}: {summary} ({:?})", start.elapsed()),
        Err(e) => panic!("{name}: {e}"),
    }
}

#[test]
fn affine_equivariance_of_adjusted_means() {
    check("affine equivariance of adjusted means");
}

#[test]
fn label_permutation_invariance() {
    check("label permutation invariance");
}

#[test]
fn record_reordering_invariance() {
    check("record reordering invariance");
}

#[test]
fn helmert_orthogonality() {
    check("helmert orthogonality");
}

#[test]
fn schur_nonnegativity() {
    check("schur nonnegativity");
}

#[test]
fn kronecker_inverse() {
    check("kronecker inverse");
}

#[test]
fn missing_data_consistency() {
    check("missing-data consistency");
}

#[test]
fn output_determinism() {
    check("output determinism");
}

#[test]
fn fixed_slope_uncorrelated_with_raw_means() {
    check("fixed slope uncorrelated with raw means");
}

#[test]
fn helmert_contrast_independence() {
    check("helmert contrast independence");
}

#[test]
fn bivariate_slope_sd_shrinks_with_blocks() {
    check("bivariate slope sd shrinks with blocks");
}
