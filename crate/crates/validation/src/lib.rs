//! Reporting for the acceptance run: one `PASS`/`FAIL`/`SKIP` line per
//! criterion, and a process exit status that fails on any `FAIL`.

use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    fn word(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: String,
    pub title: String,
    pub verdict: Verdict,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Default)]
pub struct Report {
    pub outcomes: Vec<Outcome>,
}

impl Report {
    /// Runs one check, prints its line and keeps the outcome. A panic inside
    /// the check counts as a failure.
    pub fn check(&mut self, id: &str, title: &str, f: impl FnOnce() -> (Verdict, String)) {
        let start = Instant::now();
        let (verdict, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (Verdict::Fail, format!("panicked: {msg}"))
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        println!("{} [{id}] {title}: {detail} ({seconds:.1}s)", verdict.word());
        self.outcomes.push(Outcome {
            id: id.to_string(),
            title: title.to_string(),
            verdict,
            detail,
            seconds,
        });
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.verdict == Verdict::Fail).count()
    }

    /// Prints the tally and returns the exit status.
    pub fn finish(&self) -> i32 {
        let count = |v| self.outcomes.iter().filter(|o| o.verdict == v).count();
        println!(
            "acceptance: {} passed, {} failed, {} skipped",
            count(Verdict::Pass),
            count(Verdict::Fail),
            count(Verdict::Skip)
        );
        i32::from(self.failures() > 0)
    }
}
