//! Reporting helpers for the acceptance run: one PASS/FAIL line per
//! criterion, panics counted as failures.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

#[derive(Debug, Default)]
pub struct Report {
    results: Vec<(u32, String, Verdict)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs one criterion and prints its line.
    pub fn run(&mut self, id: u32, title: &str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::new(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} {}  {title}: {} [{:.1}s]",
            if verdict.passed { "PASS" } else { "FAIL" },
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
        self.results.push((id, title.to_string(), verdict));
    }

    pub fn failures(&self) -> Vec<u32> {
        self.results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect()
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

/// Largest absolute entry of `a - b` over equal-length slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_failures() {
        let mut r = Report::new();
        r.run(1, "ok", || Verdict::new(true, "fine"));
        r.run(2, "boom", || panic!("bad"));
        assert_eq!(r.failures(), vec![2]);
        assert_eq!(r.len(), 2);
    }
}
