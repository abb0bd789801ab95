//! Training objective: reconstruction, deformation regularization,
//! compactness and axis alignment, plus their weighted total.
//!
//! The per-point work is split into [`accumulate`], which reduces a slice of
//! sample points to a few partial sums, and [`combine`], which turns the
//! totals into loss terms. That split lets a batch be processed in shards on
//! separate tapes and reduced in a fixed order.

use crate::fields::{part_field, part_field_with, FieldConfig, PartPose, Quat, Vec3};
use crate::grad::{Real, Var};
use crate::model::{decode_primitive, ParamLayout};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub deform: f64,
    pub comp: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            deform: 0.1,
            comp: 1e-4,
            align: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            recon: 0.0,
            deform: 0.0,
            comp: 0.0,
            align: 0.0,
        }
    }
}

/// How the reconstruction error of the sampled points is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconKind {
    /// Mean of `|F(q) - O(q)|`.
    #[default]
    MeanAbsolute,
    /// Square root of the mean of `(F(q) - O(q))^2`.
    RootMeanSquare,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub recon: ReconKind,
    /// Stabilizer inside the compactness square roots.
    pub comp_eps: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            recon: ReconKind::MeanAbsolute,
            comp_eps: 1e-6,
        }
    }
}

/// Volume samples with binary ground truth and surface samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub volume: Vec<Vec3<f64>>,
    pub occupancy: Vec<f64>,
    pub surface: Vec<Vec3<f64>>,
}

impl SampleBatch {
    pub fn validate(&self) -> Result<(), Error> {
        if self.volume.is_empty() {
            return Err(Error::Invalid("sample batch has no volume points".into()));
        }
        if self.volume.len() != self.occupancy.len() {
            return Err(Error::Invalid(format!(
                "{} volume points but {} occupancy labels",
                self.volume.len(),
                self.occupancy.len()
            )));
        }
        if self.surface.is_empty() {
            return Err(Error::Invalid("sample batch has no surface points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub recon: T,
    pub deform: T,
    pub comp: T,
    pub align: T,
    pub total: T,
}

/// Plain-number loss values, one row of the fit log.
pub type LossReport = LossTerms<f64>;

impl<T: Real> LossTerms<T> {
    pub fn report(&self) -> LossReport {
        LossTerms {
            recon: self.recon.value(),
            deform: self.deform.value(),
            comp: self.comp.value(),
            align: self.align.value(),
            total: self.total.value(),
        }
    }
}

pub fn loss_recon<T: Real>(pred: &[T], gt: &[f64], kind: ReconKind) -> Result<T, Error> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "reconstruction loss needs equal non-empty inputs, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let terms: Vec<T> = pred
        .iter()
        .zip(gt)
        .map(|(&f, &o)| recon_term(f, o, kind))
        .collect();
    Ok(finish_recon(T::sum(&terms), pred.len(), kind))
}

pub(crate) fn recon_term<T: Real>(f: T, o: f64, kind: ReconKind) -> T {
    match kind {
        ReconKind::MeanAbsolute => (f - o).abs(),
        ReconKind::RootMeanSquare => (f - o).square(),
    }
}

fn finish_recon<T: Real>(sum: T, n: usize, kind: ReconKind) -> T {
    match kind {
        ReconKind::MeanAbsolute => sum / n as f64,
        ReconKind::RootMeanSquare => (sum / n as f64).sqrt(),
    }
}

/// `offsets[j][i]` is the offset of sample `j` under part `i`.
pub fn loss_deform<T: Real>(offsets: &[Vec<Vec3<T>>]) -> Result<T, Error> {
    if offsets.is_empty() || offsets.iter().any(|row| row.is_empty()) {
        return Err(Error::Invalid("deformation loss needs N >= 1 and M >= 1".into()));
    }
    let norms: Vec<T> = offsets.iter().flatten().map(|v| T::norm(v)).collect();
    Ok(T::sum(&norms) / offsets.len() as f64)
}

/// `part_values[i][j]` is part `i` evaluated at surface sample `j`.
pub fn loss_comp<T: Real>(part_values: &[Vec<T>], eps: f64) -> Result<T, Error> {
    if part_values.is_empty() || part_values.iter().any(|row| row.is_empty()) {
        return Err(Error::Invalid("compactness loss needs M >= 1 and N_P >= 1".into()));
    }
    let sums: Vec<T> = part_values.iter().map(|row| T::sum(row)).collect();
    Ok(comp_from_sums(&sums, part_values[0].len(), eps))
}

fn comp_from_sums<T: Real>(sums: &[T], n_surface: usize, eps: f64) -> T {
    let roots: Vec<T> = sums
        .iter()
        .map(|&s| (s / n_surface as f64 + eps).sqrt())
        .collect();
    T::sum(&roots).square()
}

/// Mean distance of the sign-canonicalized quaternions from the identity.
pub fn loss_align<T: Real>(rotations: &[Quat<T>]) -> Result<T, Error> {
    if rotations.is_empty() {
        return Err(Error::Invalid("alignment loss of zero rotations".into()));
    }
    let dists: Vec<T> = rotations
        .iter()
        .map(|r| {
            let r = if r[0].value() < 0.0 { r.map(|c| -c) } else { *r };
            T::norm(&[r[0] - 1.0, r[1], r[2], r[3]])
        })
        .collect();
    Ok(T::sum(&dists) / rotations.len() as f64)
}

/// Replacement deformer evaluation: `(part, q, o) -> (v, c)`.
pub type DeformHook<'a, T> = &'a dyn Fn(usize, Vec3<f64>, T) -> (Vec3<T>, T);

/// Decoded parameters of a whole model in scalar type `T`.
pub struct ModelView<'a, T> {
    pub poses: Vec<PartPose<T>>,
    pub rotations: Vec<Quat<T>>,
    pub deformers: Vec<(&'a crate::deformer::DeformerShape, &'a [T])>,
    pub field: FieldConfig,
    pub deformation: bool,
    /// When set and deformation is enabled, used instead of evaluating the
    /// deformer weights in `T`.
    pub hook: Option<DeformHook<'a, T>>,
}

impl<'a, T: Real> ModelView<'a, T> {
    pub fn from_raw(layout: &'a ParamLayout, raw: &'a [T], field: FieldConfig, deformation: bool) -> Self {
        let mut poses = Vec::with_capacity(layout.parts().len());
        let mut rotations = Vec::with_capacity(layout.parts().len());
        let mut deformers = Vec::with_capacity(layout.parts().len());
        for slot in layout.parts() {
            let decoded = decode_primitive(slot.kind, &raw[slot.primitive.clone()]);
            poses.push(decoded.pose(slot.kind));
            rotations.push(decoded.rotation);
            deformers.push((&slot.shape, &raw[slot.deformer.clone()]));
        }
        Self {
            poses,
            rotations,
            deformers,
            field,
            deformation,
            hook: None,
        }
    }

    pub fn with_hook(mut self, hook: DeformHook<'a, T>) -> Self {
        self.hook = Some(hook);
        self
    }

    fn sample(&self, i: usize, q: &Vec3<f64>) -> crate::fields::PartSample<T> {
        let pose = &self.poses[i];
        let ql = self.lift3(q);
        match (self.deformation, self.hook) {
            (true, Some(hook)) => part_field_with(pose, Some(|o| hook(i, *q, o)), &self.field, ql),
            _ => part_field(pose, self.deformer(i), &self.field, ql),
        }
    }

    fn lift(&self, c: f64) -> T {
        self.poses[0].confidence.lift(c)
    }

    fn lift3(&self, q: &Vec3<f64>) -> Vec3<T> {
        [self.lift(q[0]), self.lift(q[1]), self.lift(q[2])]
    }

    fn deformer(&self, i: usize) -> Option<(&crate::deformer::DeformerShape, &[T])> {
        self.deformation.then(|| self.deformers[i])
    }
}

/// Partial sums over a slice of samples.
#[derive(Debug, Clone)]
pub struct ShardSums<T> {
    /// Sum of per-point reconstruction terms.
    pub recon: Option<T>,
    /// Sum over points and parts of offset norms.
    pub deform: Option<T>,
    /// Per part, sum of field values over the surface samples.
    pub surface: Vec<Option<T>>,
}

/// Reduces `volume`/`occupancy` and `surface` samples to partial sums.
pub fn accumulate<T: Real>(
    view: &ModelView<'_, T>,
    volume: &[Vec3<f64>],
    occupancy: &[f64],
    surface: &[Vec3<f64>],
    kind: ReconKind,
) -> ShardSums<T> {
    let m = view.poses.len();
    let mut recon_terms = Vec::with_capacity(volume.len());
    let mut norms = Vec::with_capacity(if view.deformation { volume.len() * m } else { 0 });
    let mut values = Vec::with_capacity(m);
    for (q, &o) in volume.iter().zip(occupancy) {
        values.clear();
        for i in 0..m {
            let s = view.sample(i, q);
            if let Some((v, _)) = s.offset {
                norms.push(T::norm(&v));
            }
            values.push(s.value);
        }
        recon_terms.push(recon_term(T::max_of(&values), o, kind));
    }
    let mut surface_sums = vec![None; m];
    if !surface.is_empty() {
        let mut per_part: Vec<Vec<T>> = vec![Vec::with_capacity(surface.len()); m];
        for q in surface {
            for (i, row) in per_part.iter_mut().enumerate() {
                row.push(view.sample(i, q).value);
            }
        }
        for (slot, row) in surface_sums.iter_mut().zip(&per_part) {
            *slot = Some(T::sum(row));
        }
    }
    ShardSums {
        recon: (!recon_terms.is_empty()).then(|| T::sum(&recon_terms)),
        deform: (!norms.is_empty()).then(|| T::sum(&norms)),
        surface: surface_sums,
    }
}

/// Loss terms from reduced totals. `deform_sum == None` means no offsets
/// were produced (deformation disabled), which contributes zero.
pub fn combine<T: Real>(
    recon_sum: T,
    deform_sum: Option<T>,
    surface_sums: &[T],
    rotations: &[Quat<T>],
    counts: (usize, usize),
    weights: &LossWeights,
    opts: &LossOptions,
) -> LossTerms<T> {
    let (n_volume, n_surface) = counts;
    let recon = finish_recon(recon_sum, n_volume, opts.recon);
    let deform = match deform_sum {
        Some(s) => s / n_volume as f64,
        None => recon_sum.lift(0.0),
    };
    let comp = comp_from_sums(surface_sums, n_surface, opts.comp_eps);
    let align = loss_align(rotations).expect("at least one part");
    let total = recon * weights.recon
        + deform * weights.deform
        + comp * weights.comp
        + align * weights.align;
    LossTerms {
        recon,
        deform,
        comp,
        align,
        total,
    }
}

/// Evaluates every term for a full batch on the tape that owns `params`, the
/// leaves of the model's raw parameter vector.
pub fn loss_total<'t>(
    params: &[Var<'t>],
    layout: &ParamLayout,
    field: FieldConfig,
    deformation: bool,
    batch: &SampleBatch,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<LossTerms<Var<'t>>, Error> {
    batch.validate()?;
    if params.len() != layout.len() {
        return Err(Error::Invalid(format!(
            "{} parameters for a layout of {}",
            params.len(),
            layout.len()
        )));
    }
    let view = ModelView::from_raw(layout, params, field, deformation);
    let sums = accumulate(&view, &batch.volume, &batch.occupancy, &batch.surface, opts.recon);
    let surface: Vec<_> = sums.surface.iter().map(|s| s.expect("surface is non-empty")).collect();
    Ok(combine(
        sums.recon.expect("volume is non-empty"),
        sums.deform,
        &surface,
        &view.rotations,
        (batch.volume.len(), batch.surface.len()),
        weights,
        opts,
    ))
}

/// Same as [`loss_total`] evaluated in plain arithmetic.
pub fn loss_value(
    raw: &[f64],
    layout: &ParamLayout,
    field: FieldConfig,
    deformation: bool,
    batch: &SampleBatch,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<LossReport, Error> {
    batch.validate()?;
    let view = ModelView::from_raw(layout, raw, field, deformation);
    let sums = accumulate(&view, &batch.volume, &batch.occupancy, &batch.surface, opts.recon);
    let surface: Vec<f64> = sums.surface.iter().map(|s| s.unwrap_or(0.0)).collect();
    Ok(combine(
        sums.recon.unwrap_or(0.0),
        sums.deform,
        &surface,
        &view.rotations,
        (batch.volume.len(), batch.surface.len()),
        weights,
        opts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAE: ReconKind = ReconKind::MeanAbsolute;

    #[test]
    fn recon_cases() {
        assert_eq!(loss_recon(&[0.3, 1.0], &[0.3, 1.0], MAE).unwrap(), 0.0);
        assert_eq!(loss_recon(&[0.5], &[1.0], MAE).unwrap(), 0.5);
        assert_eq!(loss_recon(&[1.0, 0.0], &[0.0, 1.0], MAE).unwrap(), 1.0);
        assert!(loss_recon(&[1.0], &[0.0, 1.0], MAE).is_err());
        let rms = loss_recon(&[0.5, 1.0], &[1.0, 1.0], ReconKind::RootMeanSquare).unwrap();
        assert!((rms - (0.125f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn deform_cases() {
        assert_eq!(loss_deform(&vec![vec![[0.0; 3]; 3]; 4]).unwrap(), 0.0);
        assert_eq!(loss_deform(&[vec![[3.0, 4.0, 0.0]]]).unwrap(), 5.0);
        assert_eq!(loss_deform(&[vec![[1.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]]).unwrap(), 1.0);
    }

    #[test]
    fn comp_cases() {
        assert!((loss_comp(&[vec![0.0; 5]], 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        let quarter = vec![0.5, 0.0];
        assert_eq!(loss_comp(&[quarter.clone(), quarter], 0.0).unwrap(), 1.0);
        assert_eq!(loss_comp(&[vec![1.0; 7]], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn align_cases() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let x = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(loss_align(&[id, id]).unwrap(), 0.0);
        assert!((loss_align(&[x]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((loss_align(&[id, x]).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        // -identity is the identity rotation
        assert_eq!(loss_align(&[[-1.0, 0.0, 0.0, 0.0]]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn nonnegative(pred in prop::collection::vec(0.0f64..=1.0, 1..20), seed in 0u64..1000,
                       rot in prop::array::uniform4(-1.0f64..1.0)) {
            let gt: Vec<f64> = pred.iter().enumerate().map(|(i, _)| ((seed >> (i % 10)) & 1) as f64).collect();
            prop_assert!(loss_recon(&pred, &gt, MAE).unwrap() >= 0.0);
            prop_assert!(loss_comp(std::slice::from_ref(&pred), 1e-6).unwrap() >= 0.0);
            prop_assert!(loss_align(&[rot]).unwrap() >= 0.0);
            let offs: Vec<Vec<Vec3<f64>>> = pred.iter().map(|p| vec![[*p, -p, 0.5]]).collect();
            prop_assert!(loss_deform(&offs).unwrap() >= 0.0);
        }

        #[test]
        fn recon_permutation_invariant(pairs in prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..30), rot in 0usize..30) {
            let (pred, gt): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(p, g)| (*p, *g as u8 as f64)).unzip();
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            idx.rotate_left(rot % pred.len());
            idx.reverse();
            let pp: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let gg: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
            let a = loss_recon(&pred, &gt, MAE).unwrap();
            let b = loss_recon(&pp, &gg, MAE).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn comp_monotone(vals in prop::collection::vec(0.0f64..0.9, 1..10), bump in 0.0f64..0.1, k in 0usize..10) {
            let k = k % vals.len();
            let mut up = vals.clone();
            up[k] += bump;
            let base = loss_comp(&[vals.clone(), vec![0.2; vals.len()]], 1e-6).unwrap();
            let more = loss_comp(&[up, vec![0.2; vals.len()]], 1e-6).unwrap();
            prop_assert!(more >= base);
        }

        #[test]
        fn align_zero_iff_identity(r in prop::array::uniform4(-1.0f64..1.0)) {
            let n = r.iter().map(|c| c * c).sum::<f64>().sqrt();
            prop_assume!(n > 1e-3);
            let r = r.map(|c| c / n);
            let l = loss_align(&[r]).unwrap();
            let is_id = (r[0].abs() - 1.0).abs() < 1e-12;
            prop_assert_eq!(l < 1e-9, is_id);
        }
    }
}
