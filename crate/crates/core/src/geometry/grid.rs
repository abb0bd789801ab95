use crate::fields::{eval_field_batch, Vec3};
use crate::model::ShapeModel;
use crate::Error;

/// Cubic grid of values in `[0, 1]` covering `[-1, 1]^3`, stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self, Error> {
        if resolution == 0 {
            return Err(Error::Invalid("grid resolution must be positive".into()));
        }
        if values.len() != resolution.pow(3) {
            return Err(Error::Invalid(format!(
                "grid of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "grid value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { resolution, values })
    }

    pub fn filled(resolution: usize, value: f64) -> Result<Self, Error> {
        Self::new(resolution, vec![value; resolution.pow(3)])
    }

    pub fn from_fn(resolution: usize, f: impl Fn(Vec3<f64>) -> f64) -> Result<Self, Error> {
        let values = (0..resolution.pow(3))
            .map(|i| {
                let (x, y, z) = unflatten(resolution, i);
                f(center(resolution, x, y, z))
            })
            .collect();
        Self::new(resolution, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Distance between neighboring voxel centers.
    pub fn spacing(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        unflatten(self.resolution, index)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3<f64> {
        center(self.resolution, x, y, z)
    }

    pub fn center_of(&self, index: usize) -> Vec3<f64> {
        let (x, y, z) = self.coords(index);
        self.center(x, y, z)
    }

    /// Every voxel center, in storage order.
    pub fn centers(&self) -> Vec<Vec3<f64>> {
        (0..self.values.len()).map(|i| self.center_of(i)).collect()
    }

    pub fn occupied(&self, index: usize) -> bool {
        self.values[index] >= 0.5
    }

    pub fn occupied_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.occupied(i)).count()
    }

    /// Occupied voxels with at least one empty (or out-of-grid) 6-neighbor.
    pub fn boundary_voxels(&self) -> Vec<usize> {
        let r = self.resolution;
        (0..self.values.len())
            .filter(|&i| {
                if !self.occupied(i) {
                    return false;
                }
                let (x, y, z) = self.coords(i);
                neighbors6(r, x, y, z).any(|n| match n {
                    Some(j) => !self.occupied(j),
                    None => true,
                })
            })
            .collect()
    }

    /// Binary grid at half the resolution; a coarse voxel is occupied when at
    /// least half of its eight children are.
    pub fn downsample_majority(&self) -> Result<Self, Error> {
        if !self.resolution.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "cannot halve odd resolution {}",
                self.resolution
            )));
        }
        let h = self.resolution / 2;
        let mut values = Vec::with_capacity(h.pow(3));
        for z in 0..h {
            for y in 0..h {
                for x in 0..h {
                    let mut count = 0;
                    for (dx, dy, dz) in CHILDREN {
                        if self.occupied(self.index(2 * x + dx, 2 * y + dy, 2 * z + dz)) {
                            count += 1;
                        }
                    }
                    values.push(if count >= 4 { 1.0 } else { 0.0 });
                }
            }
        }
        Self::new(h, values)
    }
}

const CHILDREN: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (1, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
];

fn unflatten(r: usize, i: usize) -> (usize, usize, usize) {
    (i % r, (i / r) % r, i / (r * r))
}

fn center(r: usize, x: usize, y: usize, z: usize) -> Vec3<f64> {
    let h = 2.0 / r as f64;
    [
        -1.0 + (x as f64 + 0.5) * h,
        -1.0 + (y as f64 + 0.5) * h,
        -1.0 + (z as f64 + 0.5) * h,
    ]
}

/// The six face neighbors; `None` when outside the grid.
pub(crate) fn neighbors6(
    r: usize,
    x: usize,
    y: usize,
    z: usize,
) -> impl Iterator<Item = Option<usize>> {
    let (x, y, z) = (x as isize, y as isize, z as isize);
    let r = r as isize;
    [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ]
    .into_iter()
    .map(move |(dx, dy, dz)| {
        let (nx, ny, nz) = (x + dx, y + dy, z + dz);
        if nx < 0 || ny < 0 || nz < 0 || nx >= r || ny >= r || nz >= r {
            None
        } else {
            Some((nx + r * (ny + r * nz)) as usize)
        }
    })
}

/// Object field sampled at every voxel center.
pub fn rasterize_field(model: &ShapeModel, resolution: usize) -> Result<VoxelGrid, Error> {
    if resolution < 8 {
        return Err(Error::Invalid(format!(
            "rasterization needs resolution >= 8, got {resolution}"
        )));
    }
    let probe = VoxelGrid::filled(resolution, 0.0)?;
    VoxelGrid::new(resolution, eval_field_batch(model, &probe.centers()))
}
