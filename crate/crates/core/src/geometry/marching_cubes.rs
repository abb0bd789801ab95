//! Marching cubes over the lattice of voxel centers.
//!
//! Vertices are shared between neighboring cells through a per-edge index,
//! so the output is watertight wherever the surface stays inside the grid.

use super::mesh::Mesh;
use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::VoxelGrid;
use crate::Error;

// Corner offsets in the classic numbering.
const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

// Corner pair of each cube edge.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (3, 2),
    (0, 3),
    (4, 5),
    (5, 6),
    (7, 6),
    (4, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Triangulates the `level` isosurface of `grid`. Vertices are in world
/// units; triangles are wound so normals point toward lower values.
pub fn marching_cubes(grid: &VoxelGrid, level: f64) -> Result<Mesh, Error> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("iso-level {level} outside (0, 1)")));
    }
    let r = grid.resolution();
    let mut mesh = Mesh::default();
    if r < 2 {
        return Ok(mesh);
    }
    let values = grid.values();
    // vertex id per lattice edge: (lattice point index) * 3 + axis
    let mut edge_vertex = vec![u32::MAX; r * r * r * 3];

    for z in 0..r - 1 {
        for y in 0..r - 1 {
            for x in 0..r - 1 {
                let mut case = 0usize;
                let mut corner_values = [0.0; 8];
                for (c, &(dx, dy, dz)) in CORNERS.iter().enumerate() {
                    let v = values[grid.index(x + dx, y + dy, z + dz)];
                    corner_values[c] = v;
                    if v < level {
                        case |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (ax, ay, az) = CORNERS[a];
                    let (bx, by, bz) = CORNERS[b];
                    let axis = if ax != bx {
                        0
                    } else if ay != by {
                        1
                    } else {
                        2
                    };
                    let origin = grid.index(x + ax.min(bx), y + ay.min(by), z + az.min(bz));
                    let key = origin * 3 + axis;
                    if edge_vertex[key] == u32::MAX {
                        let pa = grid.center(x + ax, y + ay, z + az);
                        let pb = grid.center(x + bx, y + by, z + bz);
                        let (va, vb) = (corner_values[a], corner_values[b]);
                        let t = (level - va) / (vb - va);
                        edge_vertex[key] = mesh.vertices.len() as u32;
                        mesh.vertices
                            .push([0, 1, 2].map(|k| pa[k] + t * (pb[k] - pa[k])));
                    }
                    local[e] = edge_vertex[key];
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let ids = [
                        local[tri[0] as usize],
                        local[tri[1] as usize],
                        local[tri[2] as usize],
                    ];
                    // collapsed when the surface passes exactly through a corner
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn sphere_grid(res: usize, radius: f64) -> VoxelGrid {
        // 1 inside, linear falloff of width 0.5 outside
        VoxelGrid::from_fn(res, |p| {
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            (1.0 - (d - radius).max(0.0) / 0.5).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn constant_grid_gives_empty_mesh() {
        let g = VoxelGrid::filled(16, 0.2).unwrap();
        assert!(marching_cubes(&g, 0.6).unwrap().is_empty());
        let g = VoxelGrid::filled(16, 0.9).unwrap();
        assert!(marching_cubes(&g, 0.6).unwrap().is_empty());
    }

    #[test]
    fn sphere_vertices_near_analytic_radius() {
        let g = sphere_grid(32, 0.5);
        let m = marching_cubes(&g, 0.6).unwrap();
        assert!(!m.is_empty());
        // level 0.6 sits 0.2 beyond the plateau
        let iso_r = 0.5 + 0.4 * 0.5;
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - iso_r).abs() < 1.5 * g.spacing(), "{r}");
        }
        m.validate().unwrap();
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let g = sphere_grid(24, 0.4);
        let m = marching_cubes(&g, 0.5).unwrap();
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        assert!(m.signed_volume6() > 0.0);
    }

    #[test]
    fn rejects_bad_level() {
        let g = VoxelGrid::filled(4, 0.0).unwrap();
        assert!(marching_cubes(&g, 1.0).is_err());
    }
}
