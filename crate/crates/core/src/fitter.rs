//! Per-shape fitting: sampling, initialization, Adam and the two-stage
//! resolution schedule.
//!
//! Gradients are computed in shards. A plain forward pass first reduces the
//! surface samples (and, for the root-mean-square reconstruction, the volume
//! samples) to totals; a small tape over those totals yields the adjoint of
//! every partial sum; each shard is then recorded on its own tape and
//! back-propagated with those adjoints. Shards are reduced in index order, so
//! results do not depend on the shard size beyond floating-point summation
//! order, which is fixed for a given configuration.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::cell::{Cell, RefCell};

use crate::deformer::{deform_traced, deform_backward, init_deformer, DeformTrace, DeformerShape};
use crate::fields::{FieldConfig, Primitive, PrimitiveKind, Vec3, IDENTITY, SCALE_MIN};
use crate::geometry::VoxelGrid;
use crate::grad::{GradVector, Real, Tape, Var};
use crate::losses::{accumulate, combine, LossOptions, LossReport, LossWeights, ModelView, ReconKind};
use crate::model::{FitMeta, ParamLayout, Part, ShapeModel};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitMode {
    /// Plain primitive fields; deformers are ignored.
    PpfOnly,
    #[default]
    Full,
}

impl std::str::FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "full" => Ok(Self::Full),
            "ppf-only" => Ok(Self::PpfOnly),
            _ => Err(Error::Invalid(format!("unknown mode `{s}`, expected full or ppf-only"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub parts: usize,
    pub primitive: PrimitiveKind,
    pub mode: FitMode,
    /// Optimizer steps in the 32^3 and 64^3 stages.
    pub iterations: [u64; 2],
    /// Size of the volume sample pool drawn at the start of each stage.
    pub volume_samples: [usize; 2],
    /// Size of the surface sample pool.
    pub surface_samples: usize,
    /// Volume points per step, cycled through a shuffled pool.
    pub batch_size: usize,
    /// Surface points per step.
    pub surface_batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub field: FieldConfig,
    pub loss: LossOptions,
    pub deformer: DeformerShape,
    /// Uniform init bound multiplier for deformer hidden layers.
    pub init_scale: f64,
    /// Points recorded per tape.
    pub shard_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            parts: 8,
            primitive: PrimitiveKind::Cuboid,
            mode: FitMode::Full,
            iterations: [2000, 2000],
            volume_samples: [8192, 32768],
            surface_samples: 1024,
            batch_size: 8192,
            surface_batch: 1024,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            field: FieldConfig::default(),
            loss: LossOptions::default(),
            deformer: DeformerShape::default(),
            init_scale: 1.0,
            shard_size: 256,
        }
    }
}

impl FitConfig {
    /// Settings that converge within the desk-scale iteration budget on one
    /// core: a larger step, per-step minibatches drawn from the full sample
    /// pools, and the squared reconstruction error. The absolute error pulls
    /// the field towards the majority value around thin parts and erases them.
    pub fn desk() -> Self {
        Self {
            lr: DESK_LR,
            batch_size: 1024,
            surface_batch: 256,
            loss: LossOptions {
                recon: ReconKind::RootMeanSquare,
                ..LossOptions::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.parts == 0 || self.parts > 64 {
            return fail(format!("part count must be in 1..=64, got {}", self.parts));
        }
        if self.volume_samples.contains(&0) || self.surface_samples == 0 {
            return fail("sample counts must be positive".into());
        }
        if self.batch_size == 0 || self.surface_batch == 0 || self.shard_size == 0 {
            return fail("batch and shard sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("Adam epsilon must be positive".into());
        }
        self.field.validate()?;
        if self.mode == FitMode::Full {
            self.deformer.validate()?;
        }
        Ok(())
    }
}

/// Step size used by [`FitConfig::desk`].
pub const DESK_LR: f64 = 3e-3;

// --- sampling -------------------------------------------------------------

/// Voxels within two voxels (Chebyshev) of an occupied voxel that has an
/// empty 6-neighbor.
fn near_boundary(grid: &VoxelGrid) -> Vec<usize> {
    let r = grid.resolution() as i64;
    let mut mark = vec![false; grid.len()];
    for b in grid.boundary_voxels() {
        let (x, y, z) = grid.coords(b);
        let (x, y, z) = (x as i64, y as i64, z as i64);
        for dz in -2..=2i64 {
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let (i, j, k) = (x + dx, y + dy, z + dz);
                    if (0..r).contains(&i) && (0..r).contains(&j) && (0..r).contains(&k) {
                        mark[grid.index(i as usize, j as usize, k as usize)] = true;
                    }
                }
            }
        }
    }
    (0..grid.len()).filter(|&i| mark[i]).collect()
}

/// `n` voxel centers with their target values (occupancy for binary grids,
/// the field itself for real-valued ones): `boundary_fraction` of them drawn
/// uniformly from voxels near the occupancy boundary, the rest uniformly
/// from the whole grid. Draws are with replacement, so `n` may exceed the
/// voxel count. A grid without a boundary is sampled uniformly.
pub fn sample_volume_points_with(
    grid: &VoxelGrid,
    n: usize,
    seed: u64,
    boundary_fraction: f64,
) -> Result<(Vec<Vec3<f64>>, Vec<f64>), Error> {
    if grid.resolution() < 8 {
        return Err(Error::Invalid(format!(
            "volume sampling needs resolution >= 8, got {}",
            grid.resolution()
        )));
    }
    if !(0.0..=1.0).contains(&boundary_fraction) {
        return Err(Error::Invalid("boundary fraction must lie in [0, 1]".into()));
    }
    let near = near_boundary(grid);
    let n_near = if near.is_empty() {
        0
    } else {
        (n as f64 * boundary_fraction).round() as usize
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut occupancy = Vec::with_capacity(n);
    for k in 0..n {
        let i = if k < n_near {
            near[rng.gen_range(0..near.len())]
        } else {
            rng.gen_range(0..grid.len())
        };
        points.push(grid.center_of(i));
        occupancy.push(grid.values()[i]);
    }
    Ok((points, occupancy))
}

/// Half boundary-biased, half uniform.
pub fn sample_volume_points(grid: &VoxelGrid, n: usize, seed: u64) -> Result<(Vec<Vec3<f64>>, Vec<f64>), Error> {
    sample_volume_points_with(grid, n, seed, 0.5)
}

/// `n` points drawn uniformly from boundary voxels, jittered uniformly within
/// the chosen voxel.
pub fn sample_surface_points(grid: &VoxelGrid, n: usize, seed: u64) -> Result<Vec<Vec3<f64>>, Error> {
    let boundary = grid.boundary_voxels();
    if boundary.is_empty() {
        return Err(Error::Invalid("target has no boundary voxels".into()));
    }
    let half = grid.spacing() / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = grid.center_of(boundary[rng.gen_range(0..boundary.len())]);
            c.map(|x| x + rng.gen_range(-half..half))
        })
        .collect())
}

// --- initialization ------------------------------------------------------

const KMEANS_ITERATIONS: usize = 20;
/// Independent seedings per initialization; a single run often merges two
/// thin parts into one cluster and leaves a part stranded between them.
const KMEANS_RESTARTS: usize = 8;

fn dist2(a: &Vec3<f64>, b: &Vec3<f64>) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Lloyd iterations from a k-means++ seeding. Returns the centroids and the
/// final assignment of every point.
pub fn kmeans(points: &[Vec3<f64>], k: usize, iterations: usize, seed: u64) -> (Vec<Vec3<f64>>, Vec<usize>) {
    assert!(!points.is_empty() && k > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[pick]));
        }
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iterations {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = (0..k)
                .min_by(|&i, &j| dist2(p, &centers[i]).total_cmp(&dist2(p, &centers[j])))
                .expect("k > 0");
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(points) {
            counts[*a] += 1;
            for d in 0..3 {
                sums[*a][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
    }
    (centers, assign)
}

/// Sum of squared distances from each point to its assigned center.
pub fn kmeans_inertia(points: &[Vec3<f64>], centers: &[Vec3<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| dist2(p, &centers[a])).sum()
}

/// The lowest-inertia result of `restarts` k-means runs with seeds derived
/// from `seed`; ties keep the earliest run.
pub fn kmeans_best_of(
    points: &[Vec3<f64>],
    k: usize,
    iterations: usize,
    restarts: usize,
    seed: u64,
) -> (Vec<Vec3<f64>>, Vec<usize>) {
    let mut best: Option<(f64, (Vec<Vec3<f64>>, Vec<usize>))> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, iterations, seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let inertia = kmeans_inertia(points, &run.0, &run.1);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, run));
        }
    }
    best.expect("at least one run").1
}

/// Parts at k-means centroids of the boundary voxels with identity rotation,
/// half the cluster half-extents as scale and confidence 0.5.
pub fn init_model(config: &FitConfig, grid: &VoxelGrid, seed: u64) -> Result<ShapeModel, Error> {
    config.validate()?;
    // Clustering the occupied shell instead of the whole volume keeps bulky
    // parts from claiming most of the clusters.
    let points: Vec<Vec3<f64>> = grid.boundary_voxels().into_iter().map(|i| grid.center_of(i)).collect();
    if points.is_empty() {
        return Err(Error::Invalid("cannot initialize from an empty grid".into()));
    }
    let (centers, assign) = kmeans_best_of(&points, config.parts, KMEANS_ITERATIONS, KMEANS_RESTARTS, seed);
    let half_voxel = grid.spacing() / 2.0;
    let mut parts = Vec::with_capacity(config.parts);
    for (c, center) in centers.iter().enumerate() {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (p, _) in points.iter().zip(&assign).filter(|(_, a)| **a == c) {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let half: Vec3<f64> = if lo[0].is_finite() {
            [0, 1, 2].map(|d| (hi[d] - lo[d]) / 2.0 + half_voxel)
        } else {
            [half_voxel; 3]
        };
        let s = half.map(|h| (0.5 * h).max(SCALE_MIN));
        let scale = match config.primitive {
            PrimitiveKind::Cuboid => s,
            PrimitiveKind::Cylinder => {
                let r = s[0].max(s[1]);
                [r, r, s[2]]
            }
        };
        let primitive = Primitive::new(config.primitive, IDENTITY, *center, scale, 0.5)?;
        let deformer = init_deformer(seed.wrapping_add(1 + c as u64), config.init_scale, config.deformer);
        parts.push(Part::new(primitive, deformer));
    }
    let mut model = ShapeModel::new(parts, config.field, config.mode == FitMode::Full)?;
    model.meta = FitMeta {
        stage: 0,
        iteration: 0,
        seed,
    };
    Ok(model)
}

// --- optimizer -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update in place. A non-finite gradient leaves both
/// the parameters and the state untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &GradVector, hp: &AdamParams) -> Result<(), Error> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "Adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    grads.check_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.values[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

fn renormalize_rotations(layout: &ParamLayout, raw: &mut [f64]) {
    for slot in layout.parts() {
        let q = &mut raw[slot.rotation()];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            q.iter_mut().for_each(|c| *c /= n);
        } else {
            q.copy_from_slice(&IDENTITY);
        }
    }
}

// --- loss and gradient -----------------------------------------------------

/// Everything the loss needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub layout: &'a ParamLayout,
    pub field: FieldConfig,
    pub deformation: bool,
    pub weights: LossWeights,
    pub options: LossOptions,
}

/// Reusable buffers for [`loss_and_gradient_in`].
#[derive(Default)]
pub struct Workspace {
    tape: Tape,
    traces: Vec<DeformTrace>,
    nodes: Vec<(usize, [u32; 4])>,
}

struct Adjoints<'a> {
    recon: f64,
    deform: f64,
    surface: &'a [f64],
}

/// Records one shard, back-propagates the given adjoints and adds the
/// result to `grad`. Deformer networks are differentiated outside the tape:
/// each evaluation enters the tape as four nodes linearized in the
/// occupancy input, and their adjoints are pushed through the network
/// afterwards. Returns the shard's reconstruction and deformation sums.
#[allow(clippy::too_many_arguments)]
fn shard_gradient(
    ws: &mut Workspace,
    obj: &Objective<'_>,
    raw: &[f64],
    volume: &[Vec3<f64>],
    occupancy: &[f64],
    surface: &[Vec3<f64>],
    adjoints: &Adjoints<'_>,
    grad: &mut GradVector,
) -> Result<(f64, f64), Error> {
    let layout = obj.layout;
    ws.tape.clear();
    ws.nodes.clear();
    let Workspace { tape, traces, nodes } = ws;
    let tape = &*tape;
    let used = Cell::new(0usize);
    let traces = RefCell::new(traces);
    let nodes = RefCell::new(nodes);
    let hook: &dyn Fn(usize, Vec3<f64>, Var<'_>) -> (Vec3<Var<'_>>, Var<'_>) = &|i, q, o| {
        let slot = &layout.parts()[i];
        let mut traces = traces.borrow_mut();
        let k = used.get();
        if k == traces.len() {
            traces.push(DeformTrace::default());
        }
        used.set(k + 1);
        let t = &mut traces[k];
        deform_traced(&slot.shape, &raw[slot.deformer.clone()], q, o.value(), obj.field.offset_bound, t);
        let out = [0, 1, 2, 3].map(|j| o.tape().linearized(t.outputs[j], &[(o, t.d_outputs_d_o[j])]));
        nodes.borrow_mut().push((i, out.map(|v| v.index())));
        ([out[0], out[1], out[2]], out[3])
    };
    let leaves = tape.leaves(raw);
    let view = ModelView::from_raw(layout, &leaves, obj.field, obj.deformation).with_hook(hook);
    let sums = accumulate(&view, volume, occupancy, surface, obj.options.recon);
    let mut seeds = Vec::with_capacity(2 + sums.surface.len());
    let (mut recon, mut deform) = (0.0, 0.0);
    if let Some(r) = sums.recon {
        recon = r.value();
        seeds.push((r, adjoints.recon));
    }
    if let Some(d) = sums.deform {
        deform = d.value();
        seeds.push((d, adjoints.deform));
    }
    for (s, &a) in sums.surface.iter().zip(adjoints.surface) {
        if let Some(s) = s {
            seeds.push((*s, a));
        }
    }
    let adj = tape.adjoints(&seeds)?;
    for (g, leaf) in grad.values.iter_mut().zip(&leaves) {
        *g += adj[leaf.index() as usize];
    }
    let traces = traces.borrow();
    for (k, (i, out)) in nodes.borrow().iter().enumerate() {
        let a = out.map(|n| adj[n as usize]);
        if a.iter().all(|x| *x == 0.0) {
            continue;
        }
        let slot = &layout.parts()[*i];
        let range = slot.deformer.clone();
        deform_backward(&slot.shape, &raw[range.clone()], &traces[k], a, &mut grad.values[range]);
    }
    Ok((recon, deform))
}

/// Loss report and gradient with respect to `raw` over the given samples.
pub fn loss_and_gradient(
    obj: &Objective<'_>,
    raw: &[f64],
    volume: &[Vec3<f64>],
    occupancy: &[f64],
    surface: &[Vec3<f64>],
    shard_size: usize,
) -> Result<(LossReport, GradVector), Error> {
    loss_and_gradient_in(&mut Workspace::default(), obj, raw, volume, occupancy, surface, shard_size)
}

/// [`loss_and_gradient`] with caller-owned buffers.
pub fn loss_and_gradient_in(
    ws: &mut Workspace,
    obj: &Objective<'_>,
    raw: &[f64],
    volume: &[Vec3<f64>],
    occupancy: &[f64],
    surface: &[Vec3<f64>],
    shard_size: usize,
) -> Result<(LossReport, GradVector), Error> {
    if volume.is_empty() || surface.is_empty() || volume.len() != occupancy.len() {
        return Err(Error::Invalid("loss needs volume and surface samples".into()));
    }
    let layout = obj.layout;
    let m = layout.parts().len();
    let scratch = RefCell::new(DeformTrace::default());
    let plain_hook: &dyn Fn(usize, Vec3<f64>, f64) -> (Vec3<f64>, f64) = &|i, q, o| {
        let slot = &layout.parts()[i];
        let mut t = scratch.borrow_mut();
        deform_traced(&slot.shape, &raw[slot.deformer.clone()], q, o, obj.field.offset_bound, &mut t);
        let out = t.outputs;
        ([out[0], out[1], out[2]], out[3])
    };
    let view = ModelView::from_raw(layout, raw, obj.field, obj.deformation).with_hook(plain_hook);
    let surface_totals: Vec<f64> = {
        let sums = accumulate(&view, &[], &[], surface, obj.options.recon);
        sums.surface.iter().map(|s| s.unwrap_or(0.0)).collect()
    };
    let recon_estimate = match obj.options.recon {
        ReconKind::MeanAbsolute => 1.0,
        ReconKind::RootMeanSquare => accumulate(&view, volume, occupancy, &[], obj.options.recon)
            .recon
            .unwrap_or(0.0),
    };
    let counts = (volume.len(), surface.len());

    // Adjoints of the partial sums and the alignment gradient.
    let top = Tape::new();
    let recon_leaf = top.leaf(recon_estimate);
    let deform_leaf = top.leaf(0.0);
    let surface_leaves = top.leaves(&surface_totals);
    let rotation_leaves: Vec<[Var<'_>; 4]> = layout
        .parts()
        .iter()
        .map(|slot| {
            let r = &raw[slot.rotation()];
            [top.leaf(r[0]), top.leaf(r[1]), top.leaf(r[2]), top.leaf(r[3])]
        })
        .collect();
    let rotations: Vec<[Var<'_>; 4]> = rotation_leaves
        .iter()
        .map(|r| {
            let n = Var::norm(r);
            r.map(|c| c / n)
        })
        .collect();
    let terms = combine(
        recon_leaf,
        obj.deformation.then_some(deform_leaf),
        &surface_leaves,
        &rotations,
        counts,
        &obj.weights,
        &obj.options,
    );
    let top_grad = top.backward(terms.total)?;
    let d_recon = top_grad.values[0];
    let d_deform = top_grad.values[1];
    let d_surface = &top_grad.values[2..2 + m];

    let mut grad = GradVector::zeros(raw.len());
    for (p, slot) in layout.parts().iter().enumerate() {
        let base = 2 + m + 4 * p;
        for (k, idx) in slot.rotation().enumerate() {
            grad.values[idx] += top_grad.values[base + k];
        }
    }

    let mut recon_sum = 0.0;
    let mut deform_sum = 0.0;
    let seeds = Adjoints {
        recon: d_recon,
        deform: d_deform,
        surface: d_surface,
    };
    for (points, occ) in volume.chunks(shard_size).zip(occupancy.chunks(shard_size)) {
        let (r, d) = shard_gradient(ws, obj, raw, points, occ, &[], &seeds, &mut grad)?;
        recon_sum += r;
        deform_sum += d;
    }
    for points in surface.chunks(shard_size) {
        shard_gradient(ws, obj, raw, &[], &[], points, &seeds, &mut grad)?;
    }

    let report = combine(
        recon_sum,
        obj.deformation.then_some(deform_sum),
        &surface_totals,
        &view.rotations,
        counts,
        &obj.weights,
        &obj.options,
    );
    Ok((report, grad))
}

// --- driver ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Step index within the stage, from 0.
    pub iter: u64,
    /// 1 for the 32^3 stage, 2 for the 64^3 stage.
    pub stage: u32,
    pub loss: LossReport,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: ShapeModel,
    pub log: Vec<LogRow>,
    /// Set when the fit stopped early on a non-finite loss or gradient;
    /// `model` is then the last finite state.
    pub aborted: Option<Error>,
}

/// Fits against `target32` and then `target64`.
pub fn fit(target32: &VoxelGrid, target64: &VoxelGrid, config: &FitConfig) -> Result<FitResult, Error> {
    fit_with(target32, target64, config, 0, |_| Ok(()))
}

/// [`fit`] that hands the model to `checkpoint` every `every` steps (never
/// when `every == 0`) and at the end of each stage.
pub fn fit_with(
    target32: &VoxelGrid,
    target64: &VoxelGrid,
    config: &FitConfig,
    every: u64,
    mut checkpoint: impl FnMut(&ShapeModel) -> Result<(), Error>,
) -> Result<FitResult, Error> {
    config.validate()?;
    if target32.resolution() != 32 || target64.resolution() != 64 {
        return Err(Error::Invalid(format!(
            "targets must be 32^3 and 64^3, got {}^3 and {}^3",
            target32.resolution(),
            target64.resolution()
        )));
    }
    let init = init_model(config, target32, config.seed)?;
    let layout = init.layout();
    let obj = Objective {
        layout: &layout,
        field: config.field,
        deformation: config.mode == FitMode::Full,
        weights: config.weights,
        options: config.loss,
    };
    let hp = AdamParams {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut raw = init.to_raw();
    let mut adam = AdamState::new(raw.len());
    let mut ws = Workspace::default();
    let mut log = Vec::new();
    let mut meta = init.meta;
    let build = |raw: &[f64], meta: FitMeta| -> Result<ShapeModel, Error> {
        let mut m = init.with_raw(raw)?;
        m.meta = meta;
        Ok(m)
    };

    for (s, target) in [target32, target64].into_iter().enumerate() {
        let stage = s as u32 + 1;
        let stage_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage as u64);
        let (volume, occupancy) = sample_volume_points(target, config.volume_samples[s], stage_seed)?;
        let surface = sample_surface_points(target, config.surface_samples, stage_seed ^ 0x5EED)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed ^ 0xBA7C);
        let mut vol_order = Minibatches::new(volume.len(), config.batch_size.min(volume.len()));
        let mut surf_order = Minibatches::new(surface.len(), config.surface_batch.min(surface.len()));

        for iter in 0..config.iterations[s] {
            let vi = vol_order.next(&mut rng);
            let si = surf_order.next(&mut rng);
            let v: Vec<Vec3<f64>> = vi.iter().map(|&i| volume[i]).collect();
            let o: Vec<f64> = vi.iter().map(|&i| occupancy[i]).collect();
            let p: Vec<Vec3<f64>> = si.iter().map(|&i| surface[i]).collect();

            let (report, grad) = match loss_and_gradient_in(&mut ws, &obj, &raw, &v, &o, &p, config.shard_size) {
                Ok(x) => x,
                Err(Error::Grad(e)) => return aborted(build(&raw, meta)?, log, stage, iter, e.to_string()),
                Err(e) => return Err(e),
            };
            if !report.total.is_finite() {
                return aborted(build(&raw, meta)?, log, stage, iter, "total loss is not finite".into());
            }
            log.push(LogRow { iter, stage, loss: report });
            let before = raw.clone();
            if let Err(e) = adam_step(&mut adam, &mut raw, &grad, &hp) {
                return aborted(build(&before, meta)?, log, stage, iter, e.to_string());
            }
            renormalize_rotations(&layout, &mut raw);
            if raw.iter().any(|x| !x.is_finite()) {
                return aborted(build(&before, meta)?, log, stage, iter, "parameters left the finite range".into());
            }
            meta = FitMeta {
                stage,
                iteration: iter + 1,
                seed: config.seed,
            };
            if every > 0 && (iter + 1) % every == 0 {
                checkpoint(&build(&raw, meta)?)?;
            }
        }
        checkpoint(&build(&raw, meta)?)?;
    }
    Ok(FitResult {
        model: build(&raw, meta)?,
        log,
        aborted: None,
    })
}

fn aborted(model: ShapeModel, log: Vec<LogRow>, stage: u32, iteration: u64, reason: String) -> Result<FitResult, Error> {
    Ok(FitResult {
        model,
        log,
        aborted: Some(Error::Diverged {
            stage,
            iteration,
            reason,
        }),
    })
}

/// Consecutive chunks of a permutation, reshuffled after every pass.
struct Minibatches {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl Minibatches {
    fn new(len: usize, size: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
            size,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (self.size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_check;
    use crate::losses::{loss_total, loss_value, SampleBatch};
    use crate::synth::{voxelize, SynthPart, SynthSpec};
    use proptest::prelude::*;

    fn box_grid(res: usize, c: Vec3<f64>, h: Vec3<f64>) -> VoxelGrid {
        let spec = SynthSpec {
            parts: vec![SynthPart::new(PrimitiveKind::Cuboid, c, h, 1)],
        };
        voxelize(&spec, res).unwrap().grid
    }

    #[test]
    fn volume_sampling_trivial_grids() {
        let empty = VoxelGrid::filled(16, 0.0).unwrap();
        let (_, o) = sample_volume_points(&empty, 500, 1).unwrap();
        assert!(o.iter().all(|x| *x == 0.0));
        let solid = VoxelGrid::filled(16, 1.0).unwrap();
        let (_, o) = sample_volume_points(&solid, 500, 1).unwrap();
        assert!(o.iter().all(|x| *x == 1.0));
        assert!(sample_volume_points(&VoxelGrid::filled(4, 0.0).unwrap(), 5, 1).is_err());
    }

    #[test]
    fn uniform_sampling_of_half_space() {
        let g = VoxelGrid::from_fn(32, |p| if p[0] < 0.0 { 1.0 } else { 0.0 }).unwrap();
        let (_, o) = sample_volume_points_with(&g, 10_000, 3, 0.0).unwrap();
        let frac = o.iter().sum::<f64>() / o.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn oversampling_uses_replacement() {
        let g = box_grid(8, [0.0; 3], [0.5; 3]);
        let (p, _) = sample_volume_points(&g, 2000, 1).unwrap();
        assert_eq!(p.len(), 2000);
    }

    #[test]
    fn surface_samples_single_voxel() {
        let mut values = vec![0.0; 16 * 16 * 16];
        let g0 = VoxelGrid::filled(16, 0.0).unwrap();
        let idx = g0.index(3, 7, 11);
        values[idx] = 1.0;
        let g = VoxelGrid::new(16, values).unwrap();
        let c = g.center_of(idx);
        let h = g.spacing() / 2.0;
        for p in sample_surface_points(&g, 200, 4).unwrap() {
            for d in 0..3 {
                assert!((p[d] - c[d]).abs() <= h);
            }
        }
        assert!(sample_surface_points(&g0, 10, 1).is_err());
    }

    #[test]
    fn surface_samples_near_box_faces() {
        let h = 0.5;
        let g = box_grid(32, [0.0; 3], [h; 3]);
        let s = g.spacing();
        let a = sample_surface_points(&g, 500, 9).unwrap();
        for p in &a {
            let inf = p.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!((inf - h).abs() <= s, "{p:?}");
        }
        assert_eq!(a, sample_surface_points(&g, 500, 9).unwrap());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        let g = GradVector { values: vec![1.0; 3] };
        let hp = AdamParams {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-12,
        };
        adam_step(&mut st, &mut p, &g, &hp).unwrap();
        for (a, b) in p.iter().zip([0.9, 1.9, 2.9]) {
            assert!((a - b).abs() < 1e-10);
        }
        let before = p.clone();
        adam_step(&mut AdamState::new(3), &mut p, &GradVector::zeros(3), &hp).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, 2.0];
        let g = GradVector { values: vec![f64::NAN, 1.0] };
        let hp = AdamParams { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        assert!(adam_step(&mut st, &mut p, &g, &hp).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn init_single_box_centroid() {
        let g = box_grid(32, [0.0; 3], [0.5, 0.4, 0.3]);
        let cfg = FitConfig { parts: 1, ..FitConfig::default() };
        let m = init_model(&cfg, &g, 7).unwrap();
        let t = m.parts()[0].primitive.translation();
        assert!(t.iter().all(|x| x.abs() <= g.spacing()), "{t:?}");
        let s = m.parts()[0].primitive.scale();
        assert!((s[0] - 0.25).abs() < 0.02 && (s[2] - 0.15).abs() < 0.02, "{s:?}");
        assert_eq!(m, init_model(&cfg, &g, 7).unwrap());
    }

    #[test]
    fn init_separates_blobs() {
        let spec = SynthSpec {
            parts: vec![
                SynthPart::new(PrimitiveKind::Cuboid, [-0.6, 0.0, 0.0], [0.2; 3], 1),
                SynthPart::new(PrimitiveKind::Cuboid, [0.6, 0.0, 0.0], [0.2; 3], 2),
            ],
        };
        let g = voxelize(&spec, 32).unwrap().grid;
        let cfg = FitConfig { parts: 2, ..FitConfig::default() };
        for seed in 0..5 {
            let m = init_model(&cfg, &g, seed).unwrap();
            let mut xs: Vec<f64> = m.parts().iter().map(|p| p.primitive.translation()[0]).collect();
            xs.sort_by(f64::total_cmp);
            assert!(xs[0] < -0.3 && xs[1] > 0.3, "{xs:?}");
        }
        assert!(init_model(&cfg, &VoxelGrid::filled(32, 0.0).unwrap(), 0).is_err());
    }

    fn small_problem(deformation: bool, recon: ReconKind) -> (ShapeModel, SampleBatch, LossOptions) {
        let g = box_grid(16, [0.1, 0.0, -0.1], [0.4, 0.3, 0.3]);
        let cfg = FitConfig {
            parts: 2,
            primitive: PrimitiveKind::Cylinder,
            deformer: DeformerShape { hidden_layers: 2, width: 5 },
            mode: if deformation { FitMode::Full } else { FitMode::PpfOnly },
            ..FitConfig::default()
        };
        let m = init_model(&cfg, &g, 2).unwrap();
        // give the deformers non-zero output layers
        let parts = m
            .parts()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Part::new(p.primitive.clone(), crate::deformer::DeformerParams::random_full(10 + i as u64, 1.0, cfg.deformer))
            })
            .collect();
        let m = ShapeModel::new(parts, *m.field(), deformation).unwrap();
        let (volume, occupancy) = sample_volume_points(&g, 40, 5).unwrap();
        let surface = sample_surface_points(&g, 12, 6).unwrap();
        let opts = LossOptions { recon, ..LossOptions::default() };
        (m, SampleBatch { volume, occupancy, surface }, opts)
    }

    #[test]
    fn sharded_gradient_matches_single_tape() {
        for (deformation, recon) in [
            (true, ReconKind::MeanAbsolute),
            (true, ReconKind::RootMeanSquare),
            (false, ReconKind::MeanAbsolute),
        ] {
            let (m, batch, opts) = small_problem(deformation, recon);
            let layout = m.layout();
            let raw = m.to_raw();
            let weights = LossWeights { comp: 0.3, align: 0.2, ..LossWeights::default() };
            let obj = Objective { layout: &layout, field: *m.field(), deformation, weights, options: opts };
            let (report, grad) =
                loss_and_gradient(&obj, &raw, &batch.volume, &batch.occupancy, &batch.surface, 7).unwrap();
            let tape = Tape::new();
            let leaves = tape.leaves(&raw);
            let terms = loss_total(&leaves, &layout, *m.field(), deformation, &batch, &weights, &opts).unwrap();
            let whole = tape.backward(terms.total).unwrap();
            let plain = loss_value(&raw, &layout, *m.field(), deformation, &batch, &weights, &opts).unwrap();
            assert!((report.total - plain.total).abs() < 1e-12);
            assert!((report.comp - plain.comp).abs() < 1e-12);
            for (a, b) in grad.values.iter().zip(&whole.values) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (m, batch, opts) = small_problem(true, ReconKind::MeanAbsolute);
        let layout = m.layout();
        let field = *m.field();
        let weights = LossWeights { comp: 0.3, align: 0.2, ..LossWeights::default() };
        let report = finite_diff_check(
            |_, p| loss_total(p, &layout, field, true, &batch, &weights, &opts).unwrap().total,
            &m.to_raw(),
            1e-6,
            1e-4,
        );
        if let Some(r) = report {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let g32 = box_grid(32, [0.0; 3], [0.5, 0.35, 0.25]);
        let g64 = box_grid(64, [0.0; 3], [0.5, 0.35, 0.25]);
        let cfg = FitConfig { parts: 1, iterations: [0, 0], ..FitConfig::default() };
        let r = fit(&g32, &g64, &cfg).unwrap();
        assert!(r.log.is_empty());
        let init = init_model(&cfg, &g32, cfg.seed).unwrap();
        assert_eq!(r.model.parts()[0].deformer, init.parts()[0].deformer);
        for k in 0..3 {
            assert!((r.model.parts()[0].primitive.scale()[k] - init.parts()[0].primitive.scale()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_exact_cuboid_field() {
        use crate::geometry::{rasterize_field, voxel_iou};
        let truth = ShapeModel::new(
            vec![Part::new(
                Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.1, -0.05, 0.0], [0.6, 0.45, 0.5], 1.0).unwrap(),
                init_deformer(0, 1.0, DeformerShape::default()),
            )],
            FieldConfig::default(),
            false,
        )
        .unwrap();
        let g32 = rasterize_field(&truth, 32).unwrap();
        let g64 = rasterize_field(&truth, 64).unwrap();
        let cfg = FitConfig {
            parts: 1,
            mode: FitMode::PpfOnly,
            iterations: [2000, 0],
            ..FitConfig::desk()
        };
        let r = fit(&g32, &g64, &cfg).unwrap();
        assert!(r.aborted.is_none());
        let iou = voxel_iou(&rasterize_field(&r.model, 32).unwrap(), &g32, 0.5).unwrap();
        assert!(iou >= 0.95, "IoU {iou}");
    }

    #[test]
    fn short_fit_is_deterministic_and_feasible() {
        let g32 = box_grid(32, [0.0; 3], [0.5, 0.35, 0.25]);
        let g64 = box_grid(64, [0.0; 3], [0.5, 0.35, 0.25]);
        let cfg = FitConfig {
            parts: 2,
            iterations: [6, 3],
            volume_samples: [512, 512],
            surface_samples: 64,
            batch_size: 128,
            surface_batch: 32,
            deformer: DeformerShape { hidden_layers: 1, width: 4 },
            ..FitConfig::desk()
        };
        let a = fit(&g32, &g64, &cfg).unwrap();
        let b = fit(&g32, &g64, &cfg).unwrap();
        assert_eq!(a.model.to_raw(), b.model.to_raw());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 9);
        assert_eq!(a.model.meta, FitMeta { stage: 2, iteration: 3, seed: 0 });
        for p in a.model.parts() {
            let r = p.primitive.rotation();
            assert!((r.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.primitive.scale().iter().all(|s| *s >= SCALE_MIN));
            assert!((0.0..=1.0).contains(&p.primitive.confidence()));
        }
    }

    #[test]
    fn ppf_only_ignores_deformer_weights() {
        let (m, batch, opts) = small_problem(false, ReconKind::MeanAbsolute);
        let layout = m.layout();
        let mut raw = m.to_raw();
        let a = loss_value(&raw, &layout, *m.field(), false, &batch, &LossWeights::default(), &opts).unwrap();
        for slot in layout.parts() {
            raw[slot.deformer.clone()].iter_mut().for_each(|w| *w = 3.0);
        }
        let b = loss_value(&raw, &layout, *m.field(), false, &batch, &LossWeights::default(), &opts).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn minibatches_cover_pool(len in 1usize..50, size in 1usize..50, seed in 0u64..100) {
            let size = size.min(len);
            let mut mb = Minibatches::new(len, size);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = vec![0usize; len];
            for _ in 0..len {
                for i in mb.next(&mut rng) {
                    seen[i] += 1;
                }
            }
            // `len` batches of `size` draw every index exactly `size` times.
            prop_assert!(seen.iter().all(|&c| c == size));
        }

        #[test]
        fn kmeans_is_deterministic(seed in 0u64..50, k in 1usize..5) {
            let pts: Vec<Vec3<f64>> = (0..40).map(|i| [(i % 7) as f64, (i % 5) as f64, (i / 10) as f64]).collect();
            let a = kmeans(&pts, k, 20, seed);
            let b = kmeans(&pts, k, 20, seed);
            prop_assert_eq!(a, b);
        }
    }
}
