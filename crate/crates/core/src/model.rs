//! Shape model: a set of (primitive, deformer) parts plus field settings, and
//! the flat unconstrained parameter layout used for optimization.
//!
//! Per part the raw layout is
//! `[r_w, r_x, r_y, r_z, t_x, t_y, t_z, scale.., rho, deformer..]`, where the
//! quaternion is normalized on use, `s = SCALE_MIN + softplus(raw)` (two
//! entries for cylinders, three for cuboids) and `rho = sigmoid(raw)`.

use crate::deformer::{DeformerParams, DeformerShape};
use crate::fields::{FieldConfig, PartPose, Primitive, PrimitiveKind, Vec3, SCALE_MIN};
use crate::grad::{self, Real};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub primitive: Primitive,
    pub deformer: DeformerParams,
}

impl Part {
    pub fn new(primitive: Primitive, deformer: DeformerParams) -> Self {
        Self {
            primitive,
            deformer,
        }
    }
}

/// Where a model came from in the fitting schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitMeta {
    pub stage: u32,
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    parts: Vec<Part>,
    field: FieldConfig,
    deformation: bool,
    pub meta: FitMeta,
}

impl ShapeModel {
    /// `deformation == false` evaluates the plain primitive fields and ignores
    /// the deformer weights.
    pub fn new(parts: Vec<Part>, field: FieldConfig, deformation: bool) -> Result<Self, Error> {
        if parts.is_empty() {
            return Err(Error::Invalid("a shape model needs at least one part".into()));
        }
        field.validate()?;
        Ok(Self {
            parts,
            field,
            deformation,
            meta: FitMeta::default(),
        })
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn field(&self) -> &FieldConfig {
        &self.field
    }

    pub fn deformation_enabled(&self) -> bool {
        self.deformation
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(
            self.parts
                .iter()
                .map(|p| (p.primitive.kind(), *p.deformer.shape()))
                .collect(),
        )
    }

    pub fn to_raw(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut raw = Vec::with_capacity(layout.len());
        for part in &self.parts {
            let prim = &part.primitive;
            raw.extend_from_slice(&prim.rotation());
            raw.extend_from_slice(&prim.translation());
            let s = prim.scale();
            let encode = |v: f64| grad::softplus_inv((v - SCALE_MIN).max(1e-9));
            match prim.kind() {
                PrimitiveKind::Cuboid => raw.extend(s.iter().map(|&v| encode(v))),
                PrimitiveKind::Cylinder => raw.extend([encode(s[0]), encode(s[2])]),
            }
            raw.push(grad::logit(prim.confidence().clamp(1e-9, 1.0 - 1e-9)));
            raw.extend_from_slice(part.deformer.weights());
        }
        debug_assert_eq!(raw.len(), layout.len());
        raw
    }

    /// Model with the same structure whose parameters decode from `raw`.
    pub fn with_raw(&self, raw: &[f64]) -> Result<Self, Error> {
        let layout = self.layout();
        if raw.len() != layout.len() {
            return Err(Error::Invalid(format!(
                "raw parameter vector has {} entries, layout needs {}",
                raw.len(),
                layout.len()
            )));
        }
        let mut parts = Vec::with_capacity(self.parts.len());
        for (i, part) in self.parts.iter().enumerate() {
            let slot = layout.part(i);
            let decoded = decode_primitive(slot.kind, &raw[slot.primitive.clone()]);
            let primitive = Primitive::new(
                slot.kind,
                decoded.rotation,
                decoded.translation,
                decoded.scale,
                decoded.confidence,
            )?;
            let deformer =
                DeformerParams::from_flat(*part.deformer.shape(), raw[slot.deformer.clone()].to_vec())?;
            parts.push(Part::new(primitive, deformer));
        }
        Ok(Self {
            parts,
            field: self.field,
            deformation: self.deformation,
            meta: self.meta,
        })
    }
}

/// Decoded (constrained) primitive parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecodedPrimitive<T> {
    pub rotation: [T; 4],
    pub translation: Vec3<T>,
    pub scale: Vec3<T>,
    pub confidence: T,
}

/// Decodes the raw primitive block of one part.
pub fn decode_primitive<T: Real>(kind: PrimitiveKind, raw: &[T]) -> DecodedPrimitive<T> {
    let n = T::norm(&raw[0..4]);
    let rotation = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let translation = [raw[4], raw[5], raw[6]];
    let s = |x: T| x.softplus() + SCALE_MIN;
    let (scale, rho) = match kind {
        PrimitiveKind::Cuboid => ([s(raw[7]), s(raw[8]), s(raw[9])], raw[10]),
        PrimitiveKind::Cylinder => {
            let radial = s(raw[7]);
            ([radial, radial, s(raw[8])], raw[9])
        }
    };
    DecodedPrimitive {
        rotation,
        translation,
        scale,
        confidence: rho.sigmoid(),
    }
}

impl<T: Real> DecodedPrimitive<T> {
    pub fn pose(&self, kind: PrimitiveKind) -> PartPose<T> {
        PartPose::new(kind, &self.rotation, self.translation, self.scale, self.confidence)
    }
}

pub fn primitive_raw_len(kind: PrimitiveKind) -> usize {
    match kind {
        PrimitiveKind::Cuboid => 11,
        PrimitiveKind::Cylinder => 10,
    }
}

#[derive(Debug, Clone)]
pub struct PartSlot {
    pub kind: PrimitiveKind,
    pub shape: DeformerShape,
    pub primitive: std::ops::Range<usize>,
    pub deformer: std::ops::Range<usize>,
}

impl PartSlot {
    pub fn rotation(&self) -> std::ops::Range<usize> {
        self.primitive.start..self.primitive.start + 4
    }
}

/// Offsets of every part inside the flat raw parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    slots: Vec<PartSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn new(parts: Vec<(PrimitiveKind, DeformerShape)>) -> Self {
        let mut slots = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (kind, shape) in parts {
            let p = offset..offset + primitive_raw_len(kind);
            let d = p.end..p.end + shape.param_count();
            offset = d.end;
            slots.push(PartSlot {
                kind,
                shape,
                primitive: p,
                deformer: d,
            });
        }
        Self { slots, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn parts(&self) -> &[PartSlot] {
        &self.slots
    }

    pub fn part(&self, i: usize) -> &PartSlot {
        &self.slots[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformer::init_deformer;
    use crate::fields::IDENTITY;

    fn model() -> ShapeModel {
        let a = Primitive::new(PrimitiveKind::Cuboid, [0.9, 0.1, -0.2, 0.3], [0.1, 0.2, 0.3], [0.3, 0.4, 0.5], 0.7)
            .unwrap();
        let b = Primitive::new(PrimitiveKind::Cylinder, IDENTITY, [-0.1, 0.0, 0.4], [0.2, 0.2, 0.6], 0.25)
            .unwrap();
        let shape = DeformerShape {
            hidden_layers: 1,
            width: 4,
        };
        ShapeModel::new(
            vec![
                Part::new(a, init_deformer(1, 1.0, shape)),
                Part::new(b, init_deformer(2, 1.0, shape)),
            ],
            FieldConfig::default(),
            true,
        )
        .unwrap()
    }

    #[test]
    fn raw_round_trip_is_close() {
        let m = model();
        let raw = m.to_raw();
        assert_eq!(raw.len(), m.layout().len());
        let back = m.with_raw(&raw).unwrap();
        for (x, y) in m.parts().iter().zip(back.parts()) {
            let (p, q) = (&x.primitive, &y.primitive);
            for k in 0..4 {
                assert!((p.rotation()[k] - q.rotation()[k]).abs() < 1e-12);
            }
            for k in 0..3 {
                assert!((p.scale()[k] - q.scale()[k]).abs() < 1e-12);
                assert_eq!(p.translation()[k], q.translation()[k]);
            }
            assert!((p.confidence() - q.confidence()).abs() < 1e-12);
            assert_eq!(x.deformer, y.deformer);
        }
    }

    #[test]
    fn layout_lengths() {
        let m = model();
        let l = m.layout();
        assert_eq!(l.part(0).primitive, 0..11);
        assert_eq!(l.part(1).primitive.len(), 10);
        assert_eq!(l.len(), 11 + 10 + 2 * DeformerShape { hidden_layers: 1, width: 4 }.param_count());
    }

    #[test]
    fn decoded_scales_respect_floor() {
        let raw = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -80.0, -80.0, -80.0, 0.0];
        let d = decode_primitive::<f64>(PrimitiveKind::Cuboid, &raw);
        assert!(d.scale.iter().all(|s| *s >= SCALE_MIN));
        assert_eq!(d.confidence, 0.5);
    }

    #[test]
    fn empty_model_rejected() {
        assert!(ShapeModel::new(vec![], FieldConfig::default(), true).is_err());
    }
}
