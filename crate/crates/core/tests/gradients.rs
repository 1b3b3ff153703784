mod common;

#[test]
fn every_loss_matches_finite_differences() {
    for seed in [1, 2] {
        for check in common::gradient_suite(seed) {
            assert!(check.passed(), "seed {seed}: {check:?}");
        }
    }
}

#[test]
fn suite_covers_all_terms() {
    let names: Vec<String> = common::gradient_suite(3).into_iter().map(|c| c.name).collect();
    assert_eq!(names.len(), 9);
}
