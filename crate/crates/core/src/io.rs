//! On-disk formats: binary model and voxel files, OBJ meshes and CSV tables.
//!
//! Binary files are little-endian and start with a magic string and a
//! format version. Floats are stored as raw IEEE bits so a save/load cycle
//! is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::deformer::{DeformerParams, DeformerShape};
use crate::fields::{FieldConfig, Primitive, PrimitiveKind, Vec3};
use crate::fitter::LogRow;
use crate::geometry::{Mesh, VoxelGrid};
use crate::model::{FitMeta, Part, ShapeModel};
use crate::synth::LabeledGrid;
use crate::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"DPF1";
pub const MODEL_VERSION: u32 = 1;
pub const GRID_MAGIC: &[u8; 6] = b"DPFVOX";
pub const GRID_VERSION: u8 = 1;

const VALUES_BINARY: u8 = 0;
const VALUES_REAL: u8 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn parse_err(section: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        section: section.into(),
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], Error> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(section, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> Result<u8, Error> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, section: &str) -> Result<f64, Error> {
        Ok(f64::from_bits(self.u64(section)?))
    }

    fn f64s<const N: usize>(&mut self, section: &str) -> Result<[f64; N], Error> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = self.f64(section)?;
        }
        Ok(out)
    }

    fn finish(&self) -> Result<(), Error> {
        if self.pos != self.bytes.len() {
            return Err(parse_err(
                "trailer",
                format!("{} unexpected bytes after the payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

// --- models ----------------------------------------------------------------

pub fn encode_model(model: &ShapeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let f = model.field();
    put_f64s(&mut out, &[f.tau, f.correction_weight, f.offset_bound]);
    out.push(model.deformation_enabled() as u8);
    out.extend_from_slice(&model.meta.stage.to_le_bytes());
    out.extend_from_slice(&model.meta.iteration.to_le_bytes());
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    out.extend_from_slice(&(model.part_count() as u32).to_le_bytes());
    for part in model.parts() {
        let p = &part.primitive;
        out.push(match p.kind() {
            PrimitiveKind::Cuboid => 0,
            PrimitiveKind::Cylinder => 1,
        });
        put_f64s(&mut out, &p.rotation());
        put_f64s(&mut out, &p.translation());
        put_f64s(&mut out, &p.scale());
        put_f64s(&mut out, &[p.confidence()]);
        let shape = part.deformer.shape();
        out.extend_from_slice(&(shape.hidden_layers as u32).to_le_bytes());
        out.extend_from_slice(&(shape.width as u32).to_le_bytes());
        out.extend_from_slice(&(part.deformer.weights().len() as u64).to_le_bytes());
        put_f64s(&mut out, part.deformer.weights());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ShapeModel, Error> {
    let mut r = Reader::new(bytes);
    if r.take(4, "header")? != MODEL_MAGIC {
        return Err(parse_err("header", "not a model file (bad magic)"));
    }
    let version = r.u32("header")?;
    if version != MODEL_VERSION {
        return Err(parse_err("header", format!("unsupported model version {version}")));
    }
    let [tau, correction_weight, offset_bound] = r.f64s::<3>("field")?;
    let field = FieldConfig {
        tau,
        correction_weight,
        offset_bound,
    };
    let deformation = match r.u8("field")? {
        0 => false,
        1 => true,
        b => return Err(parse_err("field", format!("bad deformation flag {b}"))),
    };
    let meta = FitMeta {
        stage: r.u32("meta")?,
        iteration: r.u64("meta")?,
        seed: r.u64("meta")?,
    };
    let count = r.u32("parts")? as usize;
    if count == 0 {
        return Err(parse_err("parts", "model has no parts"));
    }
    let mut parts = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let section = format!("part {i}");
        let kind = match r.u8(&section)? {
            0 => PrimitiveKind::Cuboid,
            1 => PrimitiveKind::Cylinder,
            k => return Err(parse_err(&section, format!("unknown primitive kind {k}"))),
        };
        let rotation = r.f64s::<4>(&section)?;
        let translation = r.f64s::<3>(&section)?;
        let scale = r.f64s::<3>(&section)?;
        let confidence = r.f64(&section)?;
        let primitive = Primitive::from_unit_rotation(kind, rotation, translation, scale, confidence)
            .map_err(|e| parse_err(&section, e.to_string()))?;
        let shape = DeformerShape {
            hidden_layers: r.u32(&section)? as usize,
            width: r.u32(&section)? as usize,
        };
        let n = r.u64(&section)? as usize;
        if n != shape.param_count() {
            return Err(parse_err(
                &section,
                format!("deformer {shape:?} needs {} weights, file has {n}", shape.param_count()),
            ));
        }
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(r.f64(&section)?);
        }
        let deformer =
            DeformerParams::from_flat(shape, weights).map_err(|e| parse_err(&section, e.to_string()))?;
        parts.push(Part::new(primitive, deformer));
    }
    r.finish()?;
    let mut model = ShapeModel::new(parts, field, deformation).map_err(|e| parse_err("field", e.to_string()))?;
    model.meta = meta;
    Ok(model)
}

pub fn save_model(model: &ShapeModel, path: &Path) -> Result<(), Error> {
    write_file(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ShapeModel, Error> {
    decode_model(&read_file(path)?)
}

// --- grids -----------------------------------------------------------------

/// A voxel grid with optional per-voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub grid: VoxelGrid,
    pub labels: Option<Vec<u32>>,
}

impl From<LabeledGrid> for GridFile {
    fn from(g: LabeledGrid) -> Self {
        Self {
            grid: g.grid,
            labels: Some(g.labels),
        }
    }
}

impl GridFile {
    pub fn labeled(&self) -> Result<LabeledGrid, Error> {
        match &self.labels {
            Some(l) => LabeledGrid::new(self.grid.clone(), l.clone()),
            None => Err(Error::Invalid("grid file carries no labels".into())),
        }
    }
}

/// Values that are all exactly 0 or 1 are stored one byte per voxel,
/// anything else as 64-bit floats.
pub fn encode_grid(file: &GridFile) -> Vec<u8> {
    let g = &file.grid;
    let binary = g.values().iter().all(|v| *v == 0.0 || *v == 1.0);
    let mut out = Vec::with_capacity(16 + g.len() * if binary { 1 } else { 8 });
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    out.push(if binary { VALUES_BINARY } else { VALUES_REAL });
    out.extend_from_slice(&(g.resolution() as u32).to_le_bytes());
    out.push(file.labels.is_some() as u8);
    if binary {
        out.extend(g.values().iter().map(|v| *v as u8));
    } else {
        put_f64s(&mut out, g.values());
    }
    if let Some(labels) = &file.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridFile, Error> {
    let mut r = Reader::new(bytes);
    if r.take(6, "header")? != GRID_MAGIC {
        return Err(parse_err("header", "not a voxel file (bad magic)"));
    }
    let version = r.u8("header")?;
    if version != GRID_VERSION {
        return Err(parse_err("header", format!("unsupported voxel version {version}")));
    }
    let kind = r.u8("header")?;
    let res = r.u32("header")? as usize;
    if res == 0 || res > 1024 {
        return Err(parse_err("header", format!("implausible resolution {res}")));
    }
    let has_labels = match r.u8("header")? {
        0 => false,
        1 => true,
        b => return Err(parse_err("header", format!("bad label flag {b}"))),
    };
    let n = res.pow(3);
    let values = match kind {
        VALUES_BINARY => r
            .take(n, "values")?
            .iter()
            .map(|&b| match b {
                0 => Ok(0.0),
                1 => Ok(1.0),
                _ => Err(parse_err("values", format!("binary voxel byte {b}"))),
            })
            .collect::<Result<Vec<f64>, Error>>()?,
        VALUES_REAL => (0..n).map(|_| r.f64("values")).collect::<Result<_, _>>()?,
        k => return Err(parse_err("header", format!("unknown value type {k}"))),
    };
    let grid = VoxelGrid::new(res, values).map_err(|e| parse_err("values", e.to_string()))?;
    let labels = if has_labels {
        Some((0..n).map(|_| r.u32("labels")).collect::<Result<Vec<u32>, _>>()?)
    } else {
        None
    };
    r.finish()?;
    let file = GridFile { grid, labels };
    if file.labels.is_some() {
        file.labeled().map_err(|e| parse_err("labels", e.to_string()))?;
    }
    Ok(file)
}

pub fn save_grid(file: &GridFile, path: &Path) -> Result<(), Error> {
    write_file(path, &encode_grid(file))
}

pub fn load_grid(path: &Path) -> Result<GridFile, Error> {
    decode_grid(&read_file(path)?)
}

// --- meshes ----------------------------------------------------------------

/// Wavefront OBJ with 1-based faces. Coordinates are printed in shortest
/// round-trip form, so parsing the text back is exact.
pub fn mesh_to_obj(mesh: &Mesh) -> String {
    meshes_to_obj(&[(None, mesh)])
}

/// Several meshes in one file, each optionally under an `o` statement.
pub fn meshes_to_obj(meshes: &[(Option<&str>, &Mesh)]) -> String {
    let mut s = String::new();
    let mut base = 1usize;
    for (name, mesh) in meshes {
        if let Some(name) = name {
            writeln!(s, "o {name}").expect("write to string");
        }
        for v in &mesh.vertices {
            writeln!(s, "v {} {} {}", v[0], v[1], v[2]).expect("write to string");
        }
        for t in &mesh.triangles {
            writeln!(
                s,
                "f {} {} {}",
                t[0] as usize + base,
                t[1] as usize + base,
                t[2] as usize + base
            )
            .expect("write to string");
        }
        base += mesh.vertices.len();
    }
    s
}

/// Reads `v` and triangular `f` records; other statements are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh, Error> {
    let mut vertices: Vec<Vec3<f64>> = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let section = || format!("line {}", n + 1);
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let c: Vec<f64> = fields
                    .take(3)
                    .map(|f| f.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| parse_err(&section(), e.to_string()))?;
                if c.len() != 3 {
                    return Err(parse_err(&section(), "vertex needs three coordinates"));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = fields
                    .map(|f| {
                        let head = f.split('/').next().unwrap_or(f);
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i as u32 - 1),
                            _ => Err(parse_err(&section(), format!("bad face index `{f}`"))),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(&section(), "only triangular faces are supported"));
                }
                triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| parse_err("faces", e.to_string()))
}

// --- tables ----------------------------------------------------------------

pub const FIT_LOG_HEADER: &str = "iter,stage,recon,deform,comp,align,total";

pub fn fit_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(FIT_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iter, r.stage, l.recon, l.deform, l.comp, l.align, l.total
        )
        .expect("write to string");
    }
    s
}

/// `(name, value)` rows under a `metric,value` header.
pub fn metrics_csv(rows: &[(&str, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (name, value) in rows {
        writeln!(s, "{name},{value}").expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformer::init_deformer;
    use crate::losses::LossTerms;
    use proptest::prelude::*;

    fn model() -> ShapeModel {
        let shape = DeformerShape {
            hidden_layers: 2,
            width: 3,
        };
        let a = Primitive::new(PrimitiveKind::Cuboid, [0.3, 0.1, 0.7, -0.2], [0.1, -0.2, 0.3], [0.4, 0.5, 0.6], 0.8)
            .unwrap();
        let b = Primitive::axis_aligned(PrimitiveKind::Cylinder, [0.0; 3], [0.2, 0.2, 0.9], 0.1).unwrap();
        let mut m = ShapeModel::new(
            vec![
                Part::new(a, DeformerParams::random_full(1, 1.0, shape)),
                Part::new(b, init_deformer(2, 1.0, shape)),
            ],
            FieldConfig::default(),
            true,
        )
        .unwrap();
        m.meta = FitMeta {
            stage: 2,
            iteration: 17,
            seed: 99,
        };
        m
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn model_rejects_foreign_and_corrupt_files() {
        let bytes = encode_model(&model());
        assert!(matches!(decode_model(b"PK\x03\x04 zip"), Err(Error::Parse { .. })));
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(decode_model(&version).is_err());
        // first part's scale x sits after header(4+4), field(24+1), meta(20), count(4), kind(1), rot(32), trans(24)
        let mut bad_scale = bytes;
        let at = 8 + 25 + 20 + 4 + 1 + 32 + 24;
        bad_scale[at..at + 8].copy_from_slice(&(-1.0f64).to_bits().to_le_bytes());
        assert!(decode_model(&bad_scale).is_err());
    }

    #[test]
    fn grid_round_trip() {
        let g = VoxelGrid::from_fn(8, |p| if p[0] > 0.0 { 1.0 } else { 0.0 }).unwrap();
        let labels: Vec<u32> = g.values().iter().map(|v| *v as u32 * 3).collect();
        let file = GridFile {
            grid: g.clone(),
            labels: Some(labels),
        };
        let bytes = encode_grid(&file);
        assert_eq!(bytes.len(), 6 + 1 + 1 + 4 + 1 + 512 + 4 * 512);
        assert_eq!(decode_grid(&bytes).unwrap(), file);

        let soft = GridFile {
            grid: VoxelGrid::from_fn(4, |p| (p[1] + 1.0) / 2.0).unwrap(),
            labels: None,
        };
        assert_eq!(decode_grid(&encode_grid(&soft)).unwrap(), soft);
        assert!(decode_grid(&encode_model(&model())).is_err());
    }

    #[test]
    fn grid_rejects_inconsistent_labels() {
        let g = VoxelGrid::filled(4, 0.0).unwrap();
        let file = GridFile {
            grid: g,
            labels: Some(vec![1; 64]),
        };
        assert!(decode_grid(&encode_grid(&file)).is_err());
    }

    #[test]
    fn obj_cases() {
        let tri = Mesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let text = mesh_to_obj(&tri);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert!(text.lines().any(|l| l == "f 1 2 3"));
        assert_eq!(parse_obj(&text).unwrap(), tri);
        let empty = Mesh::new(vec![], vec![]).unwrap();
        assert_eq!(mesh_to_obj(&empty), "");
        assert!(parse_obj("").unwrap().is_empty());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn fit_log_header() {
        let row = LogRow {
            iter: 3,
            stage: 1,
            loss: LossTerms {
                recon: 0.5,
                deform: 0.0,
                comp: 1.0,
                align: 0.25,
                total: 0.625,
            },
        };
        let csv = fit_log_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(FIT_LOG_HEADER));
        assert_eq!(lines.next(), Some("3,1,0.5,0,1,0.25,0.625"));
    }

    proptest! {
        #[test]
        fn obj_parse_back_is_exact(coords in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 3..30)) {
            let n = coords.len() as u32;
            let tris: Vec<[u32; 3]> = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
            let mesh = Mesh::new(coords, tris).unwrap();
            prop_assert_eq!(parse_obj(&mesh_to_obj(&mesh)).unwrap(), mesh);
        }

        #[test]
        fn real_grids_round_trip(vals in prop::collection::vec(0.0f64..=1.0, 27)) {
            let file = GridFile { grid: VoxelGrid::new(3, vals).unwrap(), labels: None };
            prop_assert_eq!(decode_grid(&encode_grid(&file)).unwrap(), file);
        }
    }
}
