use mfdg::selftest::run_criterion;

const SEED: u64 = 20240611;

fn criterion(id: usize) {
    let c = run_criterion(id, SEED);
    println!("{}", c.line());
    assert!(c.pass, "criterion {id} failed: {}", c.measured);
    assert!(c.within_budget(), "criterion {id} over budget: {:.1}s", c.seconds);
}

#[test]
fn c01_exact_transport_matches_brute_force() {
    criterion(1);
}

#[test]
fn c02_shift_lipschitz_fuzz() {
    criterion(2);
}

#[test]
fn c03_vectogram_distance_fuzz() {
    criterion(3);
}

#[test]
fn c04_flow_fidelity() {
    criterion(4);
}

#[test]
fn c05_oracle_passes_infinitesimal_checks() {
    criterion(5);
}

#[test]
fn c06_integral_check_and_polygons() {
    criterion(6);
}

#[test]
fn c07_negative_control() {
    criterion(7);
}

#[test]
fn c08_extremal_shift_guarantee() {
    criterion(8);
}

#[test]
fn c09_gamma_ordering() {
    criterion(9);
}

#[test]
fn c10_determinism() {
    criterion(10);
}
