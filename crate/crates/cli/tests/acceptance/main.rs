//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.
//!
//! `cargo test -p aa-nowcast-cli --test acceptance` runs all of them;
//! numeric arguments select a subset, e.g. `-- 1 5`.

mod cli;
mod criteria;
mod oracles;

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

type Check = fn() -> String;

const CRITERIA: &[(u32, &str, Check)] = &[
    (1, "gradient correctness", criteria::gradients),
    (2, "separable convolution equivalence", criteria::dsc_equivalence),
    (3, "parameter accounting", criteria::parameter_accounting),
    (4, "overfit convergence", criteria::overfit),
    (5, "beat persistence", criteria::beats_persistence),
    (6, "metric oracle", criteria::metric_oracle),
    (7, "scheduler and early stop", criteria::schedules),
    (8, "test-time dropout", criteria::ttd_properties),
    (9, "pipeline fixtures", criteria::pipeline_fixtures),
    (10, "command-line determinism", cli::determinism),
];

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else {
        "panicked".into()
    }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for &(n, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {} ({secs:.1}s)", panic_message(e.as_ref()));
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
