//! Fit a single cuboid with a deformer to the `box1` corpus shape and print
//! the recovered primitive.
//!
//!     cargo run --release --example fit_box [iterations]

use dpf::evaluate::{evaluate, EvalConfig};
use dpf::fields::PrimitiveKind;
use dpf::fitter::{fit, FitConfig, FitMode};
use dpf::synth::{corpus_shape, voxelize};

fn main() -> Result<(), dpf::Error> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let spec = corpus_shape("box1")?;
    let (t32, t64) = (voxelize(&spec, 32)?, voxelize(&spec, 64)?);
    let config = FitConfig {
        parts: 1,
        primitive: PrimitiveKind::Cuboid,
        mode: FitMode::Full,
        iterations: [iterations, 0],
        ..FitConfig::desk()
    };
    let result = fit(&t32.grid, &t64.grid, &config)?;
    if let Some(e) = &result.aborted {
        eprintln!("fit stopped early: {e}");
    }
    if let Some(last) = result.log.last() {
        println!("final loss {:.5} after {} steps", last.loss.total, last.iter + 1);
    }
    let p = &result.model.parts()[0].primitive;
    println!("center {:?}", p.translation());
    println!("scale  {:?}", p.scale());
    println!("rho    {:.3}", p.confidence());
    let report = evaluate(&result.model, &t64, &EvalConfig::default())?;
    for (name, value) in report.rows() {
        println!("{name:>14} {value:.4}");
    }
    Ok(())
}
