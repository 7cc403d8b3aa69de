use tmd_core::verify::{run_suite, SUITES};

fn check(name: &str) {
    let report = run_suite(name).expect("known suite");
    print!("{}", report.summary());
    assert!(report.passed(), "{name} suite failed");
}

#[test]
fn operators() {
    check("operators");
}

#[test]
fn oracle() {
    check("oracle");
}

#[test]
fn gradients() {
    check("gradients");
}

#[test]
fn divergence() {
    check("divergence");
}

#[test]
fn end_to_end() {
    check("end-to-end");
}

#[test]
fn suite_names() {
    for s in SUITES {
        assert!(run_suite(s).is_some() || s.is_empty());
    }
    assert!(run_suite("bogus").is_none());
}
