//! Build a two-part model by hand and write its 0.6 isosurface, both as one
//! union mesh and split per part.
//!
//!     cargo run --release --example extract_mesh [out_dir]

use std::path::PathBuf;

use dpf::cli::part_meshes;
use dpf::deformer::{DeformerParams, DeformerShape};
use dpf::evaluate::model_mesh;
use dpf::fields::{FieldConfig, Primitive, PrimitiveKind};
use dpf::io;
use dpf::model::{Part, ShapeModel};

fn main() -> Result<(), dpf::Error> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let seat = Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.0, 0.0, 0.2], [1.2, 1.2, 0.3], 1.0)?;
    let post = Primitive::axis_aligned(PrimitiveKind::Cylinder, [0.0, 0.0, -0.3], [0.3, 0.3, 1.5], 1.0)?;
    let flat = || DeformerParams::zeros(DeformerShape::default());
    let model = ShapeModel::new(
        vec![Part::new(seat, flat()), Part::new(post, flat())],
        FieldConfig::default(),
        false,
    )?;

    let union = model_mesh(&model, 64, 0.6)?;
    println!("union: {} vertices, {} triangles, area {:.3}", union.vertices.len(), union.triangles.len(), union.area());
    io::write_file(&out.join("union.obj"), io::mesh_to_obj(&union).as_bytes())?;

    let parts = part_meshes(&model, 64, 0.6)?;
    let names: Vec<String> = (0..parts.len()).map(|i| format!("part{i}")).collect();
    let named: Vec<_> = names.iter().zip(&parts).map(|(n, m)| (Some(n.as_str()), m)).collect();
    io::write_file(&out.join("parts.obj"), io::meshes_to_obj(&named).as_bytes())?;
    println!("wrote {} and {}", out.join("union.obj").display(), out.join("parts.obj").display());
    Ok(())
}
