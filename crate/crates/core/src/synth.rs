//! Procedural labeled targets: unions of boxes and cylinders, optionally
//! tapered or bent, voxelized at voxel centers.

use crate::fields::{rotation_matrix, PrimitiveKind, Quat, Vec3, IDENTITY};
use crate::geometry::VoxelGrid;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPart {
    pub kind: PrimitiveKind,
    pub rotation: Quat<f64>,
    pub center: Vec3<f64>,
    /// Box half-extents; for cylinders `[radius, radius, half_height]`.
    pub half_extents: Vec3<f64>,
    /// Semantic label, nonzero.
    pub label: u32,
    /// Cross-section shrinks linearly along local z, from 1 at the bottom to
    /// `1 - taper` at the top.
    pub taper: f64,
    /// Parabolic bend of the local x coordinate, `x += bend * z^2`.
    pub bend: f64,
}

impl SynthPart {
    pub fn new(kind: PrimitiveKind, center: Vec3<f64>, half_extents: Vec3<f64>, label: u32) -> Self {
        Self {
            kind,
            rotation: IDENTITY,
            center,
            half_extents,
            label,
            taper: 0.0,
            bend: 0.0,
        }
    }

    pub fn tapered(mut self, taper: f64) -> Self {
        self.taper = taper;
        self
    }

    pub fn bent(mut self, bend: f64) -> Self {
        self.bend = bend;
        self
    }

    pub fn rotated(mut self, rotation: Quat<f64>) -> Self {
        let n = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        self.rotation = rotation.map(|c| c / n);
        self
    }

    pub fn contains(&self, q: Vec3<f64>) -> bool {
        let m = rotation_matrix(&self.rotation);
        let d = [q[0] - self.center[0], q[1] - self.center[1], q[2] - self.center[2]];
        let p: Vec3<f64> = [0, 1, 2].map(|k| m[0][k] * d[0] + m[1][k] * d[1] + m[2][k] * d[2]);
        let [hx, hy, hz] = self.half_extents;
        if p[2].abs() > hz {
            return false;
        }
        let x = p[0] - self.bend * p[2] * p[2];
        let factor = 1.0 - self.taper * (p[2] / hz + 1.0) / 2.0;
        if factor <= 0.0 {
            return false;
        }
        let (x, y) = (x / factor, p[1] / factor);
        match self.kind {
            PrimitiveKind::Cuboid => x.abs() <= hx && y.abs() <= hy,
            PrimitiveKind::Cylinder => (x * x + y * y).sqrt() <= hx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub parts: Vec<SynthPart>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.parts.is_empty() {
            return Err(Error::Invalid("synthetic shape has no parts".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.label == 0 {
                return Err(Error::Invalid(format!("part {i} uses reserved label 0")));
            }
            if p.half_extents.iter().any(|h| !(*h > 0.0)) {
                return Err(Error::Invalid(format!("part {i} has a non-positive extent")));
            }
            if p.kind == PrimitiveKind::Cylinder && p.half_extents[0] != p.half_extents[1] {
                return Err(Error::Invalid(format!("cylinder part {i} has unequal radii")));
            }
            let reach = p.half_extents.iter().map(|h| h * h).sum::<f64>().sqrt();
            if p.center.iter().any(|c| c.abs() - reach > 1.0) {
                return Err(Error::Invalid(format!("part {i} lies outside [-1, 1]^3")));
            }
        }
        Ok(())
    }

    pub fn label_count(&self) -> usize {
        let mut labels: Vec<u32> = self.parts.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }
}

/// Binary occupancy plus a per-voxel semantic label (0 for empty voxels).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGrid {
    pub grid: VoxelGrid,
    pub labels: Vec<u32>,
}

impl LabeledGrid {
    pub fn new(grid: VoxelGrid, labels: Vec<u32>) -> Result<Self, Error> {
        if labels.len() != grid.len() {
            return Err(Error::Invalid(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        for (i, (&v, &l)) in grid.values().iter().zip(&labels).enumerate() {
            if (v >= 0.5) != (l != 0) {
                return Err(Error::Invalid(format!(
                    "voxel {i}: label {l} disagrees with occupancy {v}"
                )));
            }
        }
        Ok(Self { grid, labels })
    }

    pub fn resolution(&self) -> usize {
        self.grid.resolution()
    }

    /// Occupied voxel centers with their labels.
    pub fn occupied_points(&self) -> (Vec<Vec3<f64>>, Vec<u32>) {
        (0..self.grid.len())
            .filter(|&i| self.labels[i] != 0)
            .map(|i| (self.grid.center_of(i), self.labels[i]))
            .unzip()
    }
}

/// Occupied iff the voxel center lies in some part; the label is that of
/// the first containing part.
pub fn voxelize(spec: &SynthSpec, resolution: usize) -> Result<LabeledGrid, Error> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::Invalid("resolution must be positive".into()));
    }
    let probe = VoxelGrid::filled(resolution, 0.0)?;
    let labels: Vec<u32> = probe
        .centers()
        .into_iter()
        .map(|q| {
            spec.parts
                .iter()
                .find(|p| p.contains(q))
                .map_or(0, |p| p.label)
        })
        .collect();
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::Invalid(format!(
            "shape occupies no voxel centers at resolution {resolution}"
        )));
    }
    let values = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    LabeledGrid::new(VoxelGrid::new(resolution, values)?, labels)
}

pub const CORPUS_NAMES: [&str; 5] = ["box1", "table4", "stool3", "taper1", "tbeam"];

fn table_parts() -> Vec<SynthPart> {
    use PrimitiveKind::*;
    let mut parts = vec![SynthPart::new(Cuboid, [0.0, 0.0, 0.45], [0.7, 0.5, 0.08], 1)];
    let leg_half = (0.37 + 0.75) / 2.0;
    let leg_z = 0.37 - leg_half;
    for (i, (x, y)) in [(-0.55, -0.35), (0.55, -0.35), (-0.55, 0.35), (0.55, 0.35)]
        .into_iter()
        .enumerate()
    {
        parts.push(SynthPart::new(Cylinder, [x, y, leg_z], [0.08, 0.08, leg_half], 2 + i as u32));
    }
    parts
}

/// The fixed evaluation corpus. The seed is accepted for interface
/// stability; the shapes do not depend on it.
pub fn builtin_corpus(_seed: u64) -> Vec<(String, SynthSpec)> {
    use PrimitiveKind::*;
    let box1 = SynthSpec {
        parts: vec![SynthPart::new(Cuboid, [0.0, 0.0, 0.0], [0.5, 0.35, 0.25], 1)],
    };
    let table4 = SynthSpec {
        parts: table_parts(),
    };
    let stool3 = {
        let mut parts = vec![SynthPart::new(Cylinder, [0.0, 0.0, 0.45], [0.6, 0.6, 0.08], 1)];
        let leg_half = (0.37 + 0.75) / 2.0;
        let leg_z = 0.37 - leg_half;
        // uneven spacing and one heavier leg
        for (i, (deg, r)) in [(90.0f64, 0.07), (200.0, 0.07), (325.0, 0.1)]
            .into_iter()
            .enumerate()
        {
            let a = deg.to_radians();
            parts.push(SynthPart::new(
                Cylinder,
                [0.42 * a.cos(), 0.42 * a.sin(), leg_z],
                [r, r, leg_half],
                2 + i as u32,
            ));
        }
        SynthSpec { parts }
    };
    let taper1 = SynthSpec {
        parts: vec![SynthPart::new(Cuboid, [0.0, 0.0, 0.0], [0.5, 0.5, 0.6], 1).tapered(0.7)],
    };
    let tbeam = {
        let mut parts = table_parts();
        parts.push(SynthPart::new(Cuboid, [0.0, -0.35, -0.3], [0.47, 0.04, 0.05], 6));
        SynthSpec { parts }
    };
    vec![
        ("box1".into(), box1),
        ("table4".into(), table4),
        ("stool3".into(), stool3),
        ("taper1".into(), taper1),
        ("tbeam".into(), tbeam),
    ]
}

pub fn corpus_shape(name: &str) -> Result<SynthSpec, Error> {
    builtin_corpus(0)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "unknown shape `{name}`, expected one of {}",
                CORPUS_NAMES.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGrid;

    fn components(g: &VoxelGrid) -> usize {
        let r = g.resolution();
        let mut seen = vec![false; g.len()];
        let mut count = 0;
        for start in 0..g.len() {
            if seen[start] || !g.occupied(start) {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y, z) = g.coords(i);
                let mut visit = |j: usize| {
                    if !seen[j] && g.occupied(j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 { visit(g.index(x - 1, y, z)); }
                if x + 1 < r { visit(g.index(x + 1, y, z)); }
                if y > 0 { visit(g.index(x, y - 1, z)); }
                if y + 1 < r { visit(g.index(x, y + 1, z)); }
                if z > 0 { visit(g.index(x, y, z - 1)); }
                if z + 1 < r { visit(g.index(x, y, z + 1)); }
            }
        }
        count
    }

    #[test]
    fn box_volume_fraction() {
        let spec = SynthSpec {
            parts: vec![SynthPart::new(PrimitiveKind::Cuboid, [0.0; 3], [0.5; 3], 1)],
        };
        let g = voxelize(&spec, 32).unwrap();
        let expected = 0.125 * 32f64.powi(3);
        let got = g.grid.occupied_count() as f64;
        assert!((got - expected).abs() <= 32.0 * 32.0, "{got} vs {expected}");
    }

    #[test]
    fn disjoint_parts_give_two_components() {
        let spec = SynthSpec {
            parts: vec![
                SynthPart::new(PrimitiveKind::Cuboid, [-0.5, 0.0, 0.0], [0.2; 3], 1),
                SynthPart::new(PrimitiveKind::Cylinder, [0.5, 0.0, 0.0], [0.2, 0.2, 0.3], 2),
            ],
        };
        let g = voxelize(&spec, 32).unwrap();
        assert_eq!(components(&g.grid), 2);
    }

    #[test]
    fn empty_region_is_an_error() {
        let tiny = SynthSpec {
            parts: vec![SynthPart::new(PrimitiveKind::Cuboid, [0.01, 0.01, 0.01], [0.001; 3], 1)],
        };
        assert!(voxelize(&tiny, 32).is_err());
        assert!(voxelize(&SynthSpec { parts: vec![] }, 32).is_err());
    }

    #[test]
    fn corpus_contents() {
        let corpus = builtin_corpus(0);
        assert_eq!(corpus.len(), 5);
        for (name, spec) in &corpus {
            for res in [32, 64] {
                let g = voxelize(spec, res).unwrap_or_else(|e| panic!("{name}@{res}: {e}"));
                assert!(g.grid.occupied_count() > 0);
            }
        }
        let stool = corpus_shape("stool3").unwrap();
        assert_eq!(stool.label_count(), 4);
        assert_eq!(components(&voxelize(&corpus_shape("table4").unwrap(), 32).unwrap().grid), 1);
        assert!(corpus_shape("chair").is_err());
    }

    #[test]
    fn resolution_consistency() {
        for (name, spec) in builtin_corpus(0) {
            let fine = voxelize(&spec, 64).unwrap().grid.downsample_majority().unwrap();
            let coarse = voxelize(&spec, 32).unwrap().grid;
            let agree = fine
                .values()
                .iter()
                .zip(coarse.values())
                .filter(|(a, b)| a == b)
                .count() as f64
                / coarse.len() as f64;
            assert!(agree >= 0.97, "{name}: {agree}");
        }
    }

    #[test]
    fn taper_shrinks_top() {
        let p = SynthPart::new(PrimitiveKind::Cuboid, [0.0; 3], [0.5, 0.5, 0.5], 1).tapered(0.5);
        assert!(p.contains([0.45, 0.0, -0.45]));
        assert!(!p.contains([0.45, 0.0, 0.45]));
        assert!(p.contains([0.2, 0.0, 0.45]));
    }

    #[test]
    fn labels_follow_first_part() {
        let spec = SynthSpec {
            parts: vec![
                SynthPart::new(PrimitiveKind::Cuboid, [0.0; 3], [0.3; 3], 7),
                SynthPart::new(PrimitiveKind::Cuboid, [0.0; 3], [0.5; 3], 9),
            ],
        };
        let g = voxelize(&spec, 16).unwrap();
        let center = g.grid.index(8, 8, 8);
        assert_eq!(g.labels[center], 7);
        assert!(g.labels.contains(&9));
    }
}
