//! Run a few randomized finite-difference trials over the full objective.
//!
//!     cargo run --release --example gradcheck [trials]

use dpf::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> Result<(), dpf::Error> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let report = run_gradcheck(&GradcheckConfig {
        trials,
        ..GradcheckConfig::default()
    })?;
    for (i, t) in report.trials.iter().enumerate() {
        println!(
            "trial {i:3}: {} parts, {:4} coordinates, max rel error {:.2e}",
            t.parts, t.checked, t.fd.max_rel_error
        );
    }
    println!(
        "worst {:.2e} over {} trials ({} redraws) in {:.1}s",
        report.worst(),
        report.trials.len(),
        report.redraws,
        report.elapsed.as_secs_f64()
    );
    Ok(())
}
