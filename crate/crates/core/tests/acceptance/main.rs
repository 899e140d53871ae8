//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line for each; exits non-zero if any fails.
//!
//! Positional arguments select criteria by id (`C1`, `c5`, ...).

mod cheap;
mod trained;

use std::time::Instant;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 12] = [
    ("C1", "gradient correctness", cheap::c1_gradients),
    ("C2", "viterbi oracle equivalence", cheap::c2_viterbi),
    ("C3", "transition-matrix fixture", cheap::c3_transitions),
    ("C4", "metric fixtures", cheap::c4_metrics),
    ("C5", "learnability", trained::c5_learnability),
    ("C6", "loss ablation trend", trained::c6_loss_ablation),
    ("C7", "memory trend", trained::c7_memory),
    ("C8", "probabilistic vs deterministic", trained::c8_probabilistic),
    ("C9", "regulariser trend", trained::c9_regulariser),
    ("C10", "sample-count trend", trained::c10_sample_count),
    ("C11", "determinism", cheap::c11_determinism),
    ("C12", "serialization round-trip", cheap::c12_round_trip),
];

fn main() {
    if std::env::args().any(|a| a == "--list") {
        for (id, name, _) in CRITERIA {
            println!("{id} {name}: test");
        }
        return;
    }
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_uppercase())
        .collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{id:<4} {status} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(id);
        }
        ran += 1;
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
