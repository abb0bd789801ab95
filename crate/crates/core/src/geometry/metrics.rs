use std::collections::BTreeMap;

use super::mesh::{dot, sub};
use super::{LabeledPoints, VoxelGrid};
use crate::fields::Vec3;
use crate::Error;

fn sq_dist(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

fn nearest_brute(p: Vec3<f64>, set: &[Vec3<f64>]) -> f64 {
    set.iter()
        .map(|&q| sq_dist(p, q))
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric Chamfer distance by exhaustive search.
pub fn chamfer_distance_brute_force(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> Result<f64, Error> {
    check_sets(a, b)?;
    let ab: f64 = a.iter().map(|&p| nearest_brute(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| nearest_brute(p, a)).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Symmetric Chamfer distance: sum of the two directed mean squared
/// nearest-neighbor distances. Uses a uniform bucket grid; the result is
/// identical to [`chamfer_distance_brute_force`].
pub fn chamfer_distance(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> Result<f64, Error> {
    check_sets(a, b)?;
    let ga = BucketGrid::new(a);
    let gb = BucketGrid::new(b);
    let ab: f64 = a.iter().map(|&p| gb.nearest(p)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| ga.nearest(p)).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

fn check_sets(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> Result<(), Error> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("Chamfer distance of an empty point set".into()));
    }
    Ok(())
}

struct BucketGrid<'a> {
    points: &'a [Vec3<f64>],
    lo: Vec3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> BucketGrid<'a> {
    fn new(points: &'a [Vec3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((points.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell) as usize + 1).min(per_axis + 1));
        let mut grid = Self {
            points,
            lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let keys: Vec<usize> = points.iter().map(|&p| grid.key(grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: Vec3<f64>) -> [isize; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.lo[k]) / self.cell).floor() as isize)
    }

    fn clamp_cell(&self, c: [isize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|k| c[k].clamp(0, self.dims[k] as isize - 1) as usize)
    }

    fn key(&self, c: [isize; 3]) -> usize {
        let c = self.clamp_cell(c);
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Squared distance to the nearest stored point. Scans cubic shells of
    /// cells around the query until no unvisited cell can hold a closer one.
    fn nearest(&self, p: Vec3<f64>) -> f64 {
        let home = self.clamp_cell(self.cell_of(p));
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            let ring_i = ring as isize;
            for dz in -ring_i..=ring_i {
                for dy in -ring_i..=ring_i {
                    for dx in -ring_i..=ring_i {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring_i {
                            continue;
                        }
                        let c = [home[0] as isize + dx, home[1] as isize + dy, home[2] as isize + dz];
                        if (0..3).any(|k| c[k] < 0 || c[k] >= self.dims[k] as isize) {
                            continue;
                        }
                        let key = self.key(c);
                        for &i in &self.order[self.starts[key]..self.starts[key + 1]] {
                            best = best.min(sq_dist(p, self.points[i]));
                        }
                    }
                }
            }
            // every point in ring r+1 or beyond is at least `gap` away
            let gap = self.shell_gap(p, home, ring);
            if gap.is_infinite() || best <= gap * gap {
                break;
            }
        }
        best
    }

    /// Lower bound on the distance from `p` to any cell outside the cube of
    /// cells within `ring` of `home`; infinite once the cube covers the grid.
    fn shell_gap(&self, p: Vec3<f64>, home: [usize; 3], ring: usize) -> f64 {
        let mut gap = f64::INFINITY;
        for k in 0..3 {
            if home[k] > ring {
                let lo = self.lo[k] + (home[k] - ring) as f64 * self.cell;
                gap = gap.min((p[k] - lo).max(0.0));
            }
            if home[k] + ring + 1 < self.dims[k] {
                let hi = self.lo[k] + (home[k] + ring + 1) as f64 * self.cell;
                gap = gap.min((hi - p[k]).max(0.0));
            }
        }
        gap
    }
}

/// Intersection over union of `pred >= threshold` and `gt >= 0.5`. Two empty
/// grids score 1.
pub fn voxel_iou(pred: &VoxelGrid, gt: &VoxelGrid, threshold: f64) -> Result<f64, Error> {
    if pred.resolution() != gt.resolution() {
        return Err(Error::Invalid(format!(
            "IoU of grids with resolutions {} and {}",
            pred.resolution(),
            gt.resolution()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.values().iter().zip(gt.values()) {
        let (p, g) = (*p >= threshold, *g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Part-to-semantic mapping by majority vote of ground-truth labels over the
/// points of each part, restricted to `calibration` indices. Ties go to the
/// smaller semantic label.
pub fn majority_mapping(
    pred: &LabeledPoints,
    gt: &LabeledPoints,
    calibration: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<u32, u32>, Error> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid("prediction and ground truth differ in length".into()));
    }
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for i in calibration {
        *votes
            .entry(pred.labels[i])
            .or_default()
            .entry(gt.labels[i])
            .or_default() += 1;
    }
    Ok(votes
        .into_iter()
        .map(|(part, counts)| {
            let mut best = (0usize, 0u32);
            for (label, count) in counts {
                if count > best.0 {
                    best = (count, label);
                }
            }
            (part, best.1)
        })
        .collect())
}

/// Mean over semantic labels of the per-label IoU between mapped predictions
/// and ground truth. Parts missing from `mapping` are left unmatched.
pub fn miou(
    pred: &LabeledPoints,
    gt: &LabeledPoints,
    mapping: &BTreeMap<u32, u32>,
) -> Result<f64, Error> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Invalid(
            "m-IoU needs equal, non-empty point labelings".into(),
        ));
    }
    let mapped: Vec<Option<u32>> = pred.labels.iter().map(|l| mapping.get(l).copied()).collect();
    let mut labels: Vec<u32> = gt.labels.clone();
    labels.extend(mapped.iter().flatten());
    labels.sort_unstable();
    labels.dedup();
    let mut total = 0.0;
    for &label in &labels {
        let (mut inter, mut union) = (0usize, 0usize);
        for (m, g) in mapped.iter().zip(&gt.labels) {
            let (p, g) = (*m == Some(label), *g == label);
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn chamfer_cases() {
        let a = cloud(50, 1);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer_distance(&[], &a).is_err());
    }

    #[test]
    fn accelerated_matches_brute_force_exactly() {
        for seed in 0..5 {
            let a = cloud(500, seed);
            let mut b = cloud(500, seed + 100);
            // clustered second set
            b.iter_mut().for_each(|p| p[2] *= 0.05);
            let fast = chamfer_distance(&a, &b).unwrap();
            let slow = chamfer_distance_brute_force(&a, &b).unwrap();
            assert_eq!(fast.to_bits(), slow.to_bits());
        }
    }

    fn grid_box(res: usize, lo: [usize; 3], hi: [usize; 3]) -> VoxelGrid {
        let mut v = vec![0.0; res.pow(3)];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    v[x + res * (y + res * z)] = 1.0;
                }
            }
        }
        VoxelGrid::new(res, v).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = grid_box(8, [0, 0, 0], [4, 4, 4]);
        assert_eq!(voxel_iou(&a, &a, 0.5).unwrap(), 1.0);
        let b = grid_box(8, [4, 4, 4], [8, 8, 8]);
        assert_eq!(voxel_iou(&a, &b, 0.5).unwrap(), 0.0);
        // offset by half the width along x: overlap 2x4x4 of union 6x4x4
        let c = grid_box(8, [2, 0, 0], [6, 4, 4]);
        assert!((voxel_iou(&a, &c, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = VoxelGrid::filled(8, 0.0).unwrap();
        assert_eq!(voxel_iou(&e, &e, 0.5).unwrap(), 1.0);
        assert!(voxel_iou(&a, &VoxelGrid::filled(4, 0.0).unwrap(), 0.5).is_err());
    }

    fn labeled(labels: Vec<u32>) -> LabeledPoints {
        LabeledPoints::new(vec![[0.0; 3]; labels.len()], labels).unwrap()
    }

    #[test]
    fn miou_cases() {
        let gt = labeled(vec![1, 1, 2, 2, 3]);
        let ident: BTreeMap<u32, u32> = [(1, 1), (2, 2), (3, 3)].into_iter().collect();
        assert_eq!(miou(&gt, &gt, &ident).unwrap(), 1.0);

        let pred = labeled(vec![0, 0, 0, 0]);
        let gt = labeled(vec![1, 1, 2, 2]);
        let map: BTreeMap<u32, u32> = [(0, 1)].into_iter().collect();
        assert_eq!(miou(&pred, &gt, &map).unwrap(), 0.25);
    }

    #[test]
    fn majority_vote() {
        let pred = labeled(vec![0, 0, 0, 1, 1]);
        let gt = labeled(vec![5, 5, 6, 6, 6]);
        let map = majority_mapping(&pred, &gt, 0..5).unwrap();
        assert_eq!(map[&0], 5);
        assert_eq!(map[&1], 6);
    }

    proptest! {
        #[test]
        fn chamfer_symmetric(seed in 0u64..500, n in 1usize..40, m in 1usize..40) {
            let a = cloud(n, seed);
            let b = cloud(m, seed + 1);
            prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
            prop_assert!(chamfer_distance(&a, &b).unwrap() > 0.0);
        }

        #[test]
        fn iou_range_and_identity(bits in prop::collection::vec(prop::bool::ANY, 64), flip in 0usize..64) {
            let a = VoxelGrid::new(4, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let mut v = a.values().to_vec();
            v[flip] = 1.0 - v[flip];
            let b = VoxelGrid::new(4, v).unwrap();
            let same = voxel_iou(&a, &a, 0.5).unwrap();
            let diff = voxel_iou(&a, &b, 0.5).unwrap();
            prop_assert_eq!(same, 1.0);
            prop_assert!((0.0..1.0).contains(&diff));
        }

        #[test]
        fn miou_invariant_under_part_permutation(labels in prop::collection::vec(0u32..4, 4..60), gt_seed in 0u64..100, shift in 1u32..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(gt_seed);
            let gt = labeled(labels.iter().map(|_| rng.gen_range(1u32..4)).collect());
            let pred = labeled(labels.clone());
            let map = majority_mapping(&pred, &gt, 0..pred.len()).unwrap();
            let base = miou(&pred, &gt, &map).unwrap();
            let permuted = labeled(labels.iter().map(|l| (l + shift) % 4).collect());
            let pmap = majority_mapping(&permuted, &gt, 0..pred.len()).unwrap();
            prop_assert_eq!(base, miou(&permuted, &gt, &pmap).unwrap());
        }
    }
}
