//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod gradients;
mod oracles;
mod pipeline;
mod structure;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Outcome detail on success, reason on failure.
pub type Check = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Check); 11] = [
        (1, "loss oracles", oracles::loss_oracles),
        (2, "consistency-loss anchors", oracles::sslcl_anchors),
        (3, "finite-difference gradients", gradients::gradient_checks),
        (4, "shape ledger", structure::shape_ledger),
        (5, "transform group", structure::transform_group),
        (6, "masking contract", oracles::masking_contract),
        (7, "metric oracle", oracles::metric_oracle),
        (8, "synthetic end-to-end", pipeline::smoke),
        (9, "ablation mechanics", pipeline::ablation_mechanics),
        (10, "published schedule and report schema", pipeline::published_schedule),
        (11, "determinism", pipeline::determinism),
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
