//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! The MNIST criteria read the IDX files from `data/mnist` at the workspace
//! root, or from `$RWPRUNE_MNIST_DIR`.

mod admm;
mod compression;
mod gradients;
mod infra;
mod penalties;
mod projections;
mod pruning;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{Ctx, Outcome};

type Criterion = fn(&mut Ctx) -> Outcome;

const CRITERIA: [(&str, Criterion); 10] = [
    ("gradient suite", gradients::run),
    ("penalty updates", penalties::run),
    ("projection oracles", projections::run),
    ("admm mechanics", admm::run),
    ("reweighted-l1 recovery", recovery::run),
    ("mnist mlp pruning", pruning::table),
    ("critical weights", pruning::critical),
    ("pattern rate", projections::pattern_rate_exactness),
    ("compression accounting", compression::run),
    ("infrastructure", infra::run),
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut failed = Vec::new();
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(e)) => ("FAIL", e.0),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                ("FAIL", format!("panicked: {msg}"))
            }
        };
        if status == "FAIL" {
            failed.push(n);
        }
        println!("criterion {n:>2} {status} {name} [{secs:.1}s]: {detail}");
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
