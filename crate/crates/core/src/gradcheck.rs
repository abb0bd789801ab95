//! Randomized finite-difference suite over the full training objective.
//!
//! Each trial draws a model (1, 2 or 4 parts of random kind and pose, with
//! deformers whose output layers are non-zero), 64 volume points with random
//! occupancy and a handful of surface points, and compares the tape
//! gradient of the weighted loss against central differences. All loss
//! weights are 1 so every term contributes measurably. Trials that land
//! within the tie margin of a kink are redrawn.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformer::{DeformerParams, DeformerShape};
use crate::fields::{part_field, FieldConfig, Primitive, PrimitiveKind, Vec3};
use crate::grad::{finite_diff_check_with, FdReport, Real};
use crate::losses::{combine, loss_total, recon_term, LossOptions, LossWeights, ModelView, SampleBatch};
use crate::model::{ParamLayout, Part, ShapeModel};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub volume_points: usize,
    pub surface_points: usize,
    /// Central-difference step. Smaller steps drown gradients near 1e-7 in
    /// roundoff; larger ones start reaching across max and clamp kinks.
    pub step: f64,
    pub tie_margin: f64,
    pub deformer: DeformerShape,
    /// Deformer weights checked per trial, drawn at random; every primitive
    /// parameter is always checked.
    pub deformer_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            volume_points: 64,
            surface_points: 16,
            step: 3e-5,
            tie_margin: 1e-4,
            deformer: DeformerShape::default(),
            deformer_coords: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub parts: usize,
    pub checked: usize,
    pub fd: FdReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: Vec<TrialReport>,
    /// Draws rejected for lying within the tie margin of a kink.
    pub redraws: usize,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.trials.iter().map(|t| t.fd.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_trial(&self) -> Option<usize> {
        (0..self.trials.len()).max_by(|&a, &b| {
            self.trials[a].fd.max_rel_error.total_cmp(&self.trials[b].fd.max_rel_error)
        })
    }
}

const PART_COUNTS: [usize; 3] = [1, 2, 4];

/// One part's contribution to the loss at every sample.
#[derive(Clone)]
struct PartColumns {
    volume: Vec<f64>,
    norms: Vec<f64>,
    surface: Vec<f64>,
}

fn part_columns(view: &ModelView<'_, f64>, i: usize, batch: &SampleBatch) -> PartColumns {
    let eval = |q: &Vec3<f64>| part_field(&view.poses[i], Some(view.deformers[i]), &view.field, *q);
    let mut volume = Vec::with_capacity(batch.volume.len());
    let mut norms = Vec::with_capacity(batch.volume.len());
    for q in &batch.volume {
        let s = eval(q);
        volume.push(s.value);
        norms.push(f64::norm(&s.offset.expect("deformation is on").0));
    }
    let surface = batch.surface.iter().map(|q| eval(q).value).collect();
    PartColumns { volume, norms, surface }
}

/// Neumaier summation; keeps rounding in the sums below the noise the
/// central differences can resolve.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Loss in plain arithmetic that re-evaluates only the part owning the
/// perturbed coordinate; a finite-difference probe moves one coordinate, so
/// the other parts' columns are reused.
struct CachedLoss<'a> {
    layout: &'a ParamLayout,
    field: FieldConfig,
    batch: &'a SampleBatch,
    weights: &'a LossWeights,
    opts: &'a LossOptions,
    base: Vec<PartColumns>,
}

impl<'a> CachedLoss<'a> {
    fn new(
        layout: &'a ParamLayout,
        field: FieldConfig,
        batch: &'a SampleBatch,
        weights: &'a LossWeights,
        opts: &'a LossOptions,
        raw: &[f64],
    ) -> Self {
        let view = ModelView::from_raw(layout, raw, field, true);
        let base = (0..layout.parts().len()).map(|i| part_columns(&view, i, batch)).collect();
        Self {
            layout,
            field,
            batch,
            weights,
            opts,
            base,
        }
    }

    fn value(&self, raw: &[f64], moved: usize) -> f64 {
        let view = ModelView::from_raw(self.layout, raw, self.field, true);
        let owner = self
            .layout
            .parts()
            .iter()
            .position(|s| s.primitive.contains(&moved) || s.deformer.contains(&moved))
            .expect("index inside the layout");
        let fresh = part_columns(&view, owner, self.batch);
        let cols: Vec<&PartColumns> = (0..self.base.len())
            .map(|i| if i == owner { &fresh } else { &self.base[i] })
            .collect();
        let n = self.batch.volume.len();
        let recon = compensated_sum((0..n).map(|k| {
            let f = cols.iter().map(|c| c.volume[k]).fold(f64::NEG_INFINITY, f64::max);
            recon_term(f, self.batch.occupancy[k], self.opts.recon)
        }));
        let deform = compensated_sum(cols.iter().flat_map(|c| c.norms.iter().copied()));
        let surface: Vec<f64> = cols.iter().map(|c| compensated_sum(c.surface.iter().copied())).collect();
        combine(
            recon,
            Some(deform),
            &surface,
            &view.rotations,
            (n, self.batch.surface.len()),
            self.weights,
            self.opts,
        )
        .total
    }
}
const MAX_REDRAWS: usize = 1000;

fn random_model(rng: &mut ChaCha8Rng, parts: usize, shape: DeformerShape) -> Result<ShapeModel, Error> {
    let mut out = Vec::with_capacity(parts);
    for _ in 0..parts {
        let kind = if rng.gen_bool(0.5) {
            PrimitiveKind::Cuboid
        } else {
            PrimitiveKind::Cylinder
        };
        let rotation = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        let translation = [0; 3].map(|_| rng.gen_range(-0.4..0.4));
        let mut scale = [0; 3].map(|_| rng.gen_range(0.2..0.8));
        if kind == PrimitiveKind::Cylinder {
            scale[1] = scale[0];
        }
        let rho = rng.gen_range(0.3..0.95);
        let primitive = Primitive::new(kind, rotation, translation, scale, rho)?;
        let deformer = DeformerParams::random_full(rng.gen(), 1.0, shape);
        out.push(Part::new(primitive, deformer));
    }
    ShapeModel::new(out, FieldConfig::default(), true)
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> SampleBatch {
    let point = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.gen_range(-0.9..0.9));
    SampleBatch {
        volume: (0..cfg.volume_points).map(|_| point(rng)).collect(),
        occupancy: (0..cfg.volume_points)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
        surface: (0..cfg.surface_points).map(|_| point(rng)).collect(),
    }
}

/// Runs `cfg.trials` non-degenerate trials, cycling the part count through
/// 1, 2 and 4.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, Error> {
    if cfg.volume_points == 0 || cfg.surface_points == 0 || !(cfg.step > 0.0) {
        return Err(Error::Invalid("gradcheck needs points and a positive step".into()));
    }
    cfg.deformer.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = LossWeights {
        recon: 1.0,
        deform: 1.0,
        comp: 1.0,
        align: 1.0,
    };
    let opts = LossOptions::default();
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut redraws = 0;
    for t in 0..cfg.trials {
        let parts = PART_COUNTS[t % PART_COUNTS.len()];
        loop {
            let model = random_model(&mut rng, parts, cfg.deformer)?;
            let batch = random_batch(&mut rng, cfg);
            let layout = model.layout();
            let mut indices = Vec::new();
            for slot in layout.parts() {
                indices.extend(slot.primitive.clone());
                let n = slot.deformer.len();
                let mut picks = sample(&mut rng, n, cfg.deformer_coords.min(n)).into_vec();
                picks.sort_unstable();
                indices.extend(picks.into_iter().map(|k| slot.deformer.start + k));
            }
            let checked = indices.len();
            let field = *model.field();
            let raw = model.to_raw();
            let cached = CachedLoss::new(&layout, field, &batch, &weights, &opts, &raw);
            let fd = finite_diff_check_with(
                |_, p| {
                    loss_total(p, &layout, field, true, &batch, &weights, &opts)
                        .expect("batch and layout agree")
                        .total
                },
                |p, moved| cached.value(p, moved),
                &raw,
                indices,
                cfg.step,
                cfg.tie_margin,
            );
            match fd {
                Some(fd) => {
                    trials.push(TrialReport { parts, checked, fd });
                    break;
                }
                None => {
                    redraws += 1;
                    if redraws > MAX_REDRAWS {
                        return Err(Error::Invalid("gradcheck keeps drawing degenerate configurations".into()));
                    }
                }
            }
        }
    }
    Ok(GradcheckReport {
        trials,
        redraws,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_trials_pass() {
        let cfg = GradcheckConfig {
            trials: 3,
            seed: 11,
            deformer: DeformerShape {
                hidden_layers: 2,
                width: 6,
            },
            ..GradcheckConfig::default()
        };
        let r = run_gradcheck(&cfg).unwrap();
        assert_eq!(r.trials.len(), 3);
        assert_eq!(r.trials.iter().map(|t| t.parts).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert!(r.worst() < 1e-4, "{r:?}");
        assert_eq!(run_gradcheck(&cfg).unwrap().trials, r.trials);
    }

    #[test]
    fn cached_loss_matches_full_evaluation() {
        let cfg = GradcheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 4, cfg.deformer).unwrap();
        let batch = random_batch(&mut rng, &cfg);
        let layout = model.layout();
        let weights = LossWeights {
            recon: 1.0,
            deform: 1.0,
            comp: 1.0,
            align: 1.0,
        };
        let opts = LossOptions::default();
        let field = *model.field();
        let raw = model.to_raw();
        let cached = CachedLoss::new(&layout, field, &batch, &weights, &opts, &raw);
        for slot in layout.parts() {
            for moved in [slot.primitive.start + 4, slot.deformer.start + 7] {
                let mut p = raw.clone();
                p[moved] += 0.05;
                let full = crate::losses::loss_value(&p, &layout, field, true, &batch, &weights, &opts)
                    .unwrap()
                    .total;
                let fast = cached.value(&p, moved);
                assert!((full - fast).abs() <= 1e-12 * full.abs().max(1.0), "{full} vs {fast}");
            }
        }
    }
}
