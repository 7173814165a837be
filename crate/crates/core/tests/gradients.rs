//! Finite-difference checks for every op and loss, one test per case group.

#[path = "common/grad_cases.rs"]
mod grad_cases;

#[test]
fn every_case_passes() {
    let mut failed = Vec::new();
    for case in grad_cases::all() {
        match (case.run)() {
            Ok(r) if r.passed() && r.checked > 0 => {}
            Ok(r) => failed.push(format!("{}: {r:?}", case.name)),
            Err(e) => failed.push(format!("{}: {e}", case.name)),
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
