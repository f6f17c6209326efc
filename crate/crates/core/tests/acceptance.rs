use std::io::Write;

use deed_core::harness::verify::{run_suite, Suite};

/// Criteria that fail at their stated tolerance; see "Known failures" in the
/// README. They are still run and reported.
const KNOWN_RED: &[u8] = &[6];

#[test]
fn acceptance() {
    let reports = run_suite(Suite::All);
    // written past the test harness capture so the lines show without --nocapture
    let mut out = std::io::stdout().lock();
    for r in &reports {
        writeln!(out, "{r}").unwrap();
    }
    drop(out);
    assert_eq!(reports.len(), 12);
    let failed: Vec<u8> = reports
        .iter()
        .filter(|r| !r.passed && !KNOWN_RED.contains(&r.id))
        .map(|r| r.id)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
