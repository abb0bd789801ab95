use crate::fields::{part_values, Vec3};
use crate::model::ShapeModel;
use crate::Error;

/// Points with one integer label each (part id or semantic id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec3<f64>>,
    pub labels: Vec<u32>,
}

impl LabeledPoints {
    pub fn new(points: Vec<Vec3<f64>>, labels: Vec<u32>) -> Result<Self, Error> {
        if points.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Labels every point with the part whose field is largest there; ties go to
/// the lowest part index.
pub fn segment_points(model: &ShapeModel, points: &[Vec3<f64>]) -> LabeledPoints {
    let labels = points
        .iter()
        .map(|&q| argmax(&part_values(model, q)) as u32)
        .collect();
    LabeledPoints {
        points: points.to_vec(),
        labels,
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
