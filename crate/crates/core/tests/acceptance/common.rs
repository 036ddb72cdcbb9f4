use std::io::Write;

/// Writes straight to the process stderr so the line survives test output
/// capture.
pub fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {id} {name}: {verdict} ({detail})");
}

pub fn note(msg: &str) {
    let _ = writeln!(std::io::stderr(), "    {msg}");
}
