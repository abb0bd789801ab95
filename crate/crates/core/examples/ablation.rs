//! Same target, seed and budget with and without the deformer: the tapered
//! block `taper1` cannot be matched by an undeformed cuboid.
//!
//!     cargo run --release --example ablation [iterations_per_stage]

use dpf::evaluate::{evaluate, EvalConfig};
use dpf::fields::PrimitiveKind;
use dpf::fitter::{fit, FitConfig, FitMode};
use dpf::synth::{corpus_shape, voxelize};

fn main() -> Result<(), dpf::Error> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let spec = corpus_shape("taper1")?;
    let (t32, t64) = (voxelize(&spec, 32)?, voxelize(&spec, 64)?);
    for mode in [FitMode::PpfOnly, FitMode::Full] {
        let config = FitConfig {
            parts: 1,
            primitive: PrimitiveKind::Cuboid,
            mode,
            iterations: [iterations, iterations],
            ..FitConfig::desk()
        };
        let model = fit(&t32.grid, &t64.grid, &config)?.model;
        let r = evaluate(&model, &t64, &EvalConfig::default())?;
        println!("{mode:?}: CD x1000 {:.3}, IoU {:.3}", r.chamfer_x1000, r.iou);
    }
    Ok(())
}
