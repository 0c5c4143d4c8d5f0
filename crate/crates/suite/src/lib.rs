//! Criterion bookkeeping for the acceptance run in `tests/acceptance.rs`.

use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

/// Prints one PASS/FAIL line per criterion and counts failures.
#[derive(Debug, Default)]
pub struct Report {
    pub failed: usize,
    pub total: usize,
}

impl Report {
    /// Runs `f`, treating a panic as a failure.
    pub fn check(&mut self, id: u32, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (tag, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(d)) => ("FAIL", d),
            Err(p) => (
                "FAIL",
                format!(
                    "panicked: {}",
                    p.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                ),
            ),
        };
        self.total += 1;
        if tag == "FAIL" {
            self.failed += 1;
        }
        println!("{tag} {id:>2} {name}: {detail} [{:.1?}]", t.elapsed());
    }
}

pub fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn within(t: Instant, limit: Duration) -> Result<(), String> {
    if t.elapsed() < limit {
        Ok(())
    } else {
        Err(format!("took {:.1?}, limit {limit:?}", t.elapsed()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_and_errors_count_as_failures() {
        let mut r = Report::default();
        r.check(1, "ok", || Ok("fine".into()));
        r.check(2, "err", || Err("bad".into()));
        r.check(3, "panic", || panic!("boom"));
        assert_eq!((r.total, r.failed), (3, 2));
    }

    #[test]
    fn verdict_follows_the_flag() {
        assert_eq!(verdict(true, "x".into()), Ok("x".into()));
        assert_eq!(verdict(false, "x".into()), Err("x".into()));
    }
}
