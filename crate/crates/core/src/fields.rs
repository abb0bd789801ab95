//! Parameterized primitive fields and their assembly into an object
//! occupancy field.
//!
//! A primitive measures a structural distance `d` from its center (1 on the
//! surface, below 1 inside). The distance is mapped to an occupancy
//! probability `exp(-tau * d)`, weighted by the part confidence, optionally
//! evaluated at deformed points and corrected, and the parts are max-pooled.

use std::fmt;
use std::str::FromStr;

use crate::deformer::{self, DeformerShape};
use crate::grad::Real;
use crate::model::ShapeModel;
use crate::Error;

/// Smallest admissible scale component.
pub const SCALE_MIN: f64 = 0.01;

pub type Vec3<T> = [T; 3];
/// Unit quaternion `(w, x, y, z)` rotating the local frame into the world.
pub type Quat<T> = [T; 4];

pub const IDENTITY: Quat<f64> = [1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Cuboid,
    Cylinder,
}

impl PrimitiveKind {
    pub fn tag(self) -> &'static str {
        match self {
            PrimitiveKind::Cuboid => "cuboid",
            PrimitiveKind::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "cuboid" => Ok(PrimitiveKind::Cuboid),
            "cylinder" => Ok(PrimitiveKind::Cylinder),
            other => Err(Error::Invalid(format!("unknown primitive kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    /// Decay temperature of the occupancy normalization.
    pub tau: f64,
    /// Multiplier on the deformer's correction scalar.
    pub correction_weight: f64,
    /// Componentwise bound on deformation offsets, in local units.
    pub offset_bound: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            correction_weight: 0.1,
            offset_bound: 0.5,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.correction_weight >= 0.0 && self.correction_weight.is_finite()) {
            return Err(Error::Invalid(format!(
                "correction weight must be nonnegative, got {}",
                self.correction_weight
            )));
        }
        if !(self.offset_bound >= 0.0 && self.offset_bound.is_finite()) {
            return Err(Error::Invalid(format!(
                "offset bound must be nonnegative, got {}",
                self.offset_bound
            )));
        }
        Ok(())
    }
}

/// A posed, scaled unit primitive with a participation confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    kind: PrimitiveKind,
    rotation: Quat<f64>,
    translation: Vec3<f64>,
    scale: Vec3<f64>,
    confidence: f64,
}

impl Primitive {
    /// Builds a primitive, normalizing the rotation. For cylinders the radial
    /// scale is `scale[0]`; `scale[1]` must match it.
    pub fn new(
        kind: PrimitiveKind,
        rotation: Quat<f64>,
        translation: Vec3<f64>,
        scale: Vec3<f64>,
        confidence: f64,
    ) -> Result<Self, Error> {
        let n = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 1e-12 && n.is_finite()) {
            return Err(Error::Invalid(format!("rotation {rotation:?} cannot be normalized")));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid(format!("translation {translation:?} is not finite")));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s >= SCALE_MIN)) {
            return Err(Error::Invalid(format!(
                "scale {scale:?} has a component below {SCALE_MIN}"
            )));
        }
        if kind == PrimitiveKind::Cylinder && scale[0] != scale[1] {
            return Err(Error::Invalid(format!(
                "cylinder radial scales differ: {} vs {}",
                scale[0], scale[1]
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            kind,
            rotation: rotation.map(|c| c / n),
            translation,
            scale,
            confidence,
        })
    }

    /// Like [`Primitive::new`] but keeps the rotation bits as given; it must
    /// already be unit length to within `1e-9`.
    pub fn from_unit_rotation(
        kind: PrimitiveKind,
        rotation: Quat<f64>,
        translation: Vec3<f64>,
        scale: Vec3<f64>,
        confidence: f64,
    ) -> Result<Self, Error> {
        let n = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-9) {
            return Err(Error::Invalid(format!("rotation {rotation:?} is not unit length")));
        }
        let mut p = Self::new(kind, rotation, translation, scale, confidence)?;
        p.rotation = rotation;
        Ok(p)
    }

    /// Identity-posed primitive at `translation`.
    pub fn axis_aligned(
        kind: PrimitiveKind,
        translation: Vec3<f64>,
        scale: Vec3<f64>,
        confidence: f64,
    ) -> Result<Self, Error> {
        Self::new(kind, IDENTITY, translation, scale, confidence)
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.kind
    }
    pub fn rotation(&self) -> Quat<f64> {
        self.rotation
    }
    pub fn translation(&self) -> Vec3<f64> {
        self.translation
    }
    pub fn scale(&self) -> Vec3<f64> {
        self.scale
    }
    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn pose(&self) -> PartPose<f64> {
        PartPose::new(
            self.kind,
            &self.rotation,
            self.translation,
            self.scale,
            self.confidence,
        )
    }

    pub fn world_to_local(&self, q: Vec3<f64>) -> Vec3<f64> {
        world_to_local(&self.rotation, &self.translation, q)
    }

    pub fn ppf_value(&self, p: Vec3<f64>) -> f64 {
        ppf_value(self.kind, &self.scale, p)
    }
}

/// Primitive parameters in whatever scalar type is being evaluated, with the
/// rotation expanded to a matrix once per part.
#[derive(Debug, Clone, Copy)]
pub struct PartPose<T> {
    pub kind: PrimitiveKind,
    pub matrix: [[T; 3]; 3],
    pub translation: Vec3<T>,
    pub scale: Vec3<T>,
    pub confidence: T,
}

impl<T: Real> PartPose<T> {
    /// `rotation` must already be a unit quaternion.
    pub fn new(
        kind: PrimitiveKind,
        rotation: &Quat<T>,
        translation: Vec3<T>,
        scale: Vec3<T>,
        confidence: T,
    ) -> Self {
        Self {
            kind,
            matrix: rotation_matrix(rotation),
            translation,
            scale,
            confidence,
        }
    }

    pub fn world_to_local(&self, q: Vec3<T>) -> Vec3<T> {
        apply_transposed(&self.matrix, &self.translation, q)
    }
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix<T: Real>(r: &Quat<T>) -> [[T; 3]; 3] {
    let [w, x, y, z] = *r;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    [
        [-(yy + zz) * 2.0 + 1.0, (xy - wz) * 2.0, (xz + wy) * 2.0],
        [(xy + wz) * 2.0, -(xx + zz) * 2.0 + 1.0, (yz - wx) * 2.0],
        [(xz - wy) * 2.0, (yz + wx) * 2.0, -(xx + yy) * 2.0 + 1.0],
    ]
}

/// Hamilton product `a * b` (apply `b` first, then `a`).
pub fn quat_mul(a: &Quat<f64>, b: &Quat<f64>) -> Quat<f64> {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// `R^T (q - t)` for the rotation `r` and translation `t` of a primitive.
pub fn world_to_local<T: Real>(r: &Quat<T>, t: &Vec3<T>, q: Vec3<T>) -> Vec3<T> {
    apply_transposed(&rotation_matrix(r), t, q)
}

fn apply_transposed<T: Real>(m: &[[T; 3]; 3], t: &Vec3<T>, q: Vec3<T>) -> Vec3<T> {
    let d = [q[0] - t[0], q[1] - t[1], q[2] - t[2]];
    [
        m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
        m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
        m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
    ]
}

/// Structural distance of a local point: 1 on the primitive surface.
pub fn ppf_value<T: Real>(kind: PrimitiveKind, scale: &Vec3<T>, p: Vec3<T>) -> T {
    match kind {
        PrimitiveKind::Cuboid => T::max_of(&[
            p[0].abs() / scale[0],
            p[1].abs() / scale[1],
            p[2].abs() / scale[2],
        ]),
        PrimitiveKind::Cylinder => {
            T::max_of(&[T::norm(&[p[0], p[1]]) / scale[0], p[2].abs() / scale[2]])
        }
    }
}

/// Maps a structural distance to an occupancy probability in `(0, 1]`.
pub fn normalize_field<T: Real>(d: T, cfg: &FieldConfig) -> T {
    (d * -cfg.tau).exp()
}

/// Per-part field value together with the deformer outputs that produced it.
#[derive(Debug, Clone, Copy)]
pub struct PartSample<T> {
    pub value: T,
    pub offset: Option<(Vec3<T>, T)>,
}

/// Deformed, confidence-weighted, corrected field of one part at world point
/// `q`. With `deformer == None` this is the plain primitive field.
pub fn part_field<T: Real>(
    pose: &PartPose<T>,
    deformer: Option<(&DeformerShape, &[T])>,
    cfg: &FieldConfig,
    q: Vec3<T>,
) -> PartSample<T> {
    match deformer {
        None => part_field_with(pose, None::<fn(T) -> (Vec3<T>, T)>, cfg, q),
        Some((shape, weights)) => part_field_with(
            pose,
            Some(|o| deformer::deform(shape, weights, q, o, cfg.offset_bound)),
            cfg,
            q,
        ),
    }
}

/// [`part_field`] with the deformation supplied as a function of the
/// undeformed occupancy, returning `(v, c)`.
pub fn part_field_with<T: Real, F: FnOnce(T) -> (Vec3<T>, T)>(
    pose: &PartPose<T>,
    deform: Option<F>,
    cfg: &FieldConfig,
    q: Vec3<T>,
) -> PartSample<T> {
    let p = pose.world_to_local(q);
    let base = normalize_field(ppf_value(pose.kind, &pose.scale, p), cfg);
    match deform {
        None => PartSample {
            value: pose.confidence * base,
            offset: None,
        },
        Some(f) => {
            let (v, c) = f(base);
            let warped = [p[0] + v[0], p[1] + v[1], p[2] + v[2]];
            let o = normalize_field(ppf_value(pose.kind, &pose.scale, warped), cfg);
            let value = (pose.confidence * o + c * cfg.correction_weight).clamp_to(0.0, 1.0);
            PartSample {
                value,
                offset: Some((v, c)),
            }
        }
    }
}

/// Scalar entry point: explicit offset `v` and correction `c`.
pub fn part_field_value(
    primitive: &Primitive,
    v: Vec3<f64>,
    c: f64,
    q: Vec3<f64>,
    cfg: &FieldConfig,
) -> f64 {
    let p = primitive.world_to_local(q);
    let warped = [p[0] + v[0], p[1] + v[1], p[2] + v[2]];
    let o = normalize_field(primitive.ppf_value(warped), cfg);
    (primitive.confidence * o + cfg.correction_weight * c).clamp_to(0.0, 1.0)
}

/// Max-pooling of per-part values.
pub fn object_field_value(part_values: &[f64]) -> Result<f64, Error> {
    if part_values.is_empty() {
        return Err(Error::Invalid("object field of a model with no parts".into()));
    }
    Ok(f64::max_of(part_values))
}

/// Object field at every point, in input order.
pub fn eval_field_batch(model: &ShapeModel, points: &[Vec3<f64>]) -> Vec<f64> {
    let poses: Vec<_> = model.parts().iter().map(|p| p.primitive.pose()).collect();
    let mut values = Vec::with_capacity(poses.len());
    points
        .iter()
        .map(|&q| {
            values.clear();
            for (i, pose) in poses.iter().enumerate() {
                let deformer = model
                    .deformation_enabled()
                    .then(|| (model.parts()[i].deformer.shape(), model.parts()[i].deformer.weights()));
                values.push(part_field(pose, deformer, model.field(), q).value);
            }
            f64::max_of(&values)
        })
        .collect()
}

/// Object field at a single point.
pub fn eval_field(model: &ShapeModel, q: Vec3<f64>) -> f64 {
    let values = part_values(model, q);
    f64::max_of(&values)
}

/// Every part's field value at `q`.
pub fn part_values(model: &ShapeModel, q: Vec3<f64>) -> Vec<f64> {
    model
        .parts()
        .iter()
        .map(|part| {
            let deformer = model
                .deformation_enabled()
                .then(|| (part.deformer.shape(), part.deformer.weights()));
            part_field(&part.primitive.pose(), deformer, model.field(), q).value
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformer::{init_deformer, DeformerParams};
    use crate::model::Part;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cuboid(s: Vec3<f64>) -> Primitive {
        Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.0; 3], s, 1.0).unwrap()
    }

    fn close3(a: Vec3<f64>, b: Vec3<f64>, tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn world_to_local_cases() {
        let id = cuboid([1.0; 3]);
        assert_eq!(id.world_to_local([0.3, -0.1, 0.5]), [0.3, -0.1, 0.5]);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let rz = Primitive::new(PrimitiveKind::Cuboid, [h, 0.0, 0.0, h], [0.0; 3], [1.0; 3], 1.0)
            .unwrap();
        assert!(close3(rz.world_to_local([1.0, 0.0, 0.0]), [0.0, -1.0, 0.0], 1e-15));

        let shifted =
            Primitive::axis_aligned(PrimitiveKind::Cuboid, [1.0; 3], [1.0; 3], 1.0).unwrap();
        assert_eq!(shifted.world_to_local([1.0, 1.0, 1.0]), [0.0; 3]);
    }

    #[test]
    fn ppf_cases() {
        assert_eq!(ppf_value(PrimitiveKind::Cuboid, &[1.0; 3], [0.0; 3]), 0.0);
        assert_eq!(ppf_value(PrimitiveKind::Cuboid, &[1.0; 3], [0.5, 0.25, 0.1]), 0.5);
        assert_eq!(ppf_value(PrimitiveKind::Cylinder, &[5.0, 5.0, 10.0], [3.0, 4.0, 0.0]), 1.0);
    }

    #[test]
    fn normalization_cases() {
        let cfg = FieldConfig::default();
        assert_eq!(normalize_field(0.0, &cfg), 1.0);
        assert!((normalize_field(1.0, &cfg) - 0.018_315_638_888_734_18).abs() < 1e-15);
        let d = -(0.6f64).ln() / 4.0;
        assert!((d - 0.127_706_405_941_497_7).abs() < 1e-15);
        assert!((normalize_field(d, &cfg) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn part_field_cases() {
        let cfg = FieldConfig {
            correction_weight: 1.0,
            ..FieldConfig::default()
        };
        let p = cuboid([1.0; 3]);
        assert_eq!(part_field_value(&p, [0.0; 3], 0.0, [0.0; 3], &cfg), 1.0);

        let off = Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.0; 3], [1.0; 3], 0.0).unwrap();
        assert_eq!(part_field_value(&off, [0.0; 3], 0.0, [0.4, 0.1, 0.0], &cfg), 0.0);

        // base value 0.95 at x = -ln(0.95)/4
        let x = -(0.95f64).ln() / 4.0;
        let base = part_field_value(&p, [0.0; 3], 0.0, [x, 0.0, 0.0], &cfg);
        assert!((base - 0.95).abs() < 1e-12);
        assert_eq!(part_field_value(&p, [0.0; 3], 0.1, [x, 0.0, 0.0], &cfg), 1.0);
    }

    #[test]
    fn object_field_cases() {
        assert_eq!(object_field_value(&[0.5, 0.25]).unwrap(), 0.5);
        assert_eq!(object_field_value(&[0.7]).unwrap(), 0.7);
        assert_eq!(object_field_value(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(object_field_value(&[]).is_err());
    }

    #[test]
    fn primitive_validation() {
        let bad_scale = Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.0; 3], [0.001, 1.0, 1.0], 1.0);
        assert!(bad_scale.is_err());
        let bad_cyl = Primitive::axis_aligned(PrimitiveKind::Cylinder, [0.0; 3], [1.0, 2.0, 1.0], 1.0);
        assert!(bad_cyl.is_err());
        let bad_rho = Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.0; 3], [1.0; 3], 1.5);
        assert!(bad_rho.is_err());
        let p = Primitive::new(PrimitiveKind::Cuboid, [2.0, 1.0, 0.0, 0.5], [0.0; 3], [1.0; 3], 1.0)
            .unwrap();
        let n: f64 = p.rotation().iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!("cylinder".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::Cylinder);
        assert!("sphere".parse::<PrimitiveKind>().is_err());
    }

    fn one_part_model(deform: bool, seed: u64) -> ShapeModel {
        let prim = Primitive::axis_aligned(PrimitiveKind::Cuboid, [0.1, 0.0, -0.1], [0.4, 0.3, 0.5], 1.0)
            .unwrap();
        let mut d = init_deformer(seed, 1.0, DeformerShape::default());
        if deform {
            d = DeformerParams::random_full(seed, 1.0, DeformerShape::default());
        }
        ShapeModel::new(vec![Part::new(prim, d)], FieldConfig::default(), deform).unwrap()
    }

    #[test]
    fn batch_edge_cases() {
        let m = one_part_model(true, 1);
        assert!(eval_field_batch(&m, &[]).is_empty());
        let z = one_part_model(false, 2);
        assert_eq!(eval_field_batch(&z, &[[0.1, 0.0, -0.1]]), vec![1.0]);
    }

    #[test]
    fn batch_matches_pointwise() {
        let m = one_part_model(true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..100)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let batch = eval_field_batch(&m, &pts);
        for (q, b) in pts.iter().zip(&batch) {
            assert_eq!(eval_field(&m, *q), *b);
        }
    }

    fn unit_quat() -> impl Strategy<Value = Quat<f64>> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |q| q.iter().map(|c| c * c).sum::<f64>() > 1e-2)
            .prop_map(|q| {
                let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                q.map(|c| c / n)
            })
    }

    fn kind() -> impl Strategy<Value = PrimitiveKind> {
        prop_oneof![Just(PrimitiveKind::Cuboid), Just(PrimitiveKind::Cylinder)]
    }

    proptest! {
        #[test]
        fn surface_normalizes_to_exp_minus_tau(kind in kind(), s in prop::array::uniform3(0.05f64..2.0), dir in prop::array::uniform3(-1.0f64..1.0)) {
            let mut s = s;
            if kind == PrimitiveKind::Cylinder { s[1] = s[0]; }
            let d0 = ppf_value(kind, &s, dir);
            prop_assume!(d0 > 1e-6);
            let p = dir.map(|c| c / d0);
            let d = ppf_value(kind, &s, p);
            prop_assert!((d - 1.0).abs() < 1e-12);
            let cfg = FieldConfig::default();
            prop_assert!((normalize_field(d, &cfg) - (-cfg.tau).exp()).abs() < 1e-15);
        }

        #[test]
        fn rigid_equivariance(kind in kind(), r in unit_quat(), r0 in unit_quat(),
                              t in prop::array::uniform3(-0.5f64..0.5), t0 in prop::array::uniform3(-0.5f64..0.5),
                              s in prop::array::uniform3(0.1f64..1.0), q in prop::array::uniform3(-1.0f64..1.0)) {
            let mut s = s;
            if kind == PrimitiveKind::Cylinder { s[1] = s[0]; }
            let cfg = FieldConfig::default();
            let a = Primitive::new(kind, r, t, s, 0.8).unwrap();
            let m0 = rotation_matrix(&r0);
            let apply = |v: Vec3<f64>| -> Vec3<f64> {
                [0, 1, 2].map(|i| m0[i][0] * v[0] + m0[i][1] * v[1] + m0[i][2] * v[2])
            };
            let t_new = apply(t);
            let b = Primitive::new(kind, quat_mul(&r0, &r), [t_new[0] + t0[0], t_new[1] + t0[1], t_new[2] + t0[2]], s, 0.8).unwrap();
            let qn = apply(q);
            let qn = [qn[0] + t0[0], qn[1] + t0[1], qn[2] + t0[2]];
            let fa = part_field_value(&a, [0.0; 3], 0.0, q, &cfg);
            let fb = part_field_value(&b, [0.0; 3], 0.0, qn, &cfg);
            prop_assert!((fa - fb).abs() < 1e-9, "{fa} vs {fb}");
        }

        #[test]
        fn scale_monotone(kind in kind(), s in prop::array::uniform3(0.1f64..1.0), k in 1.01f64..3.0, p in prop::array::uniform3(-1.0f64..1.0)) {
            prop_assume!(p.iter().any(|c| c.abs() > 1e-6));
            let mut s = s;
            if kind == PrimitiveKind::Cylinder { s[1] = s[0]; }
            let bigger = s.map(|c| c * k);
            prop_assert!(ppf_value(kind, &bigger, p) < ppf_value(kind, &s, p));
        }

        #[test]
        fn cylinder_axial_symmetry(s in prop::array::uniform2(0.1f64..1.0), p in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..std::f64::consts::TAU) {
            let sc = [s[0], s[0], s[1]];
            let (sn, cs) = angle.sin_cos();
            let pr = [cs * p[0] - sn * p[1], sn * p[0] + cs * p[1], p[2]];
            let a = ppf_value(PrimitiveKind::Cylinder, &sc, p);
            let b = ppf_value(PrimitiveKind::Cylinder, &sc, pr);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bounded_and_max_dominant(vals in prop::collection::vec(0.0f64..=1.0, 1..8)) {
            let o = object_field_value(&vals).unwrap();
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert!(vals.iter().all(|v| o >= *v));
        }

        #[test]
        fn deformed_part_field_bounded(seed in 0u64..50, q in prop::array::uniform3(-1.0f64..1.0)) {
            let m = one_part_model(true, seed);
            let v = eval_field(&m, q);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
