//! Per-part deformation network.
//!
//! A small tanh MLP maps a world point and the part's undeformed occupancy
//! `(q, o)` to a bounded offset `v` (added to the local point) and a
//! correction scalar `c` in `[-1, 1]`. Weights are stored flat, layer by
//! layer, each layer as a row-major `outputs x inputs` matrix followed by its
//! bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fields::Vec3;
use crate::grad::Real;
use crate::Error;

pub const INPUTS: usize = 4;
pub const OUTPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeformerShape {
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for DeformerShape {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            width: 32,
        }
    }
}

impl DeformerShape {
    /// `(inputs, outputs)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = INPUTS;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.width));
            fan_in = self.width;
        }
        dims.push((fan_in, OUTPUTS));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "deformer needs at least one hidden layer of nonzero width, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformerParams {
    shape: DeformerShape,
    weights: Vec<f64>,
}

impl DeformerParams {
    pub fn zeros(shape: DeformerShape) -> Self {
        Self {
            shape,
            weights: vec![0.0; shape.param_count()],
        }
    }

    pub fn from_flat(shape: DeformerShape, weights: Vec<f64>) -> Result<Self, Error> {
        shape.validate()?;
        if weights.len() != shape.param_count() {
            return Err(Error::Invalid(format!(
                "deformer expects {} weights, got {}",
                shape.param_count(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Invalid(format!("deformer weight {i} is not finite")));
        }
        Ok(Self { shape, weights })
    }

    pub fn shape(&self) -> &DeformerShape {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights.clone()
    }

    /// Range of the output layer inside the flat weight vector.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let (i, o) = *self.shape.layer_dims().last().expect("at least one layer");
        let n = self.weights.len();
        n - (i * o + o)..n
    }

    pub fn deform(&self, q: Vec3<f64>, o: f64, offset_bound: f64) -> (Vec3<f64>, f64) {
        deform(&self.shape, &self.weights, q, o, offset_bound)
    }

    /// Every layer, including the output layer, drawn uniformly. Used for
    /// tests and gradient checks where a non-trivial deformation is wanted.
    pub fn random_full(seed: u64, scale: f64, shape: DeformerShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(shape.param_count());
        for (fan_in, fan_out) in shape.layer_dims() {
            let bound = scale / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                weights.push(if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 });
            }
        }
        Self { shape, weights }
    }
}

/// Hidden layers uniform in `±scale/√fan_in`, output layer exactly zero, so a
/// fresh deformer produces no offset and no correction.
pub fn init_deformer(seed: u64, scale: f64, shape: DeformerShape) -> DeformerParams {
    let mut params = DeformerParams::random_full(seed, scale, shape);
    let range = params.output_layer_range();
    params.weights[range].iter_mut().for_each(|w| *w = 0.0);
    params
}

/// Evaluates the network on flat `weights`. Returns the offset, bounded
/// componentwise by `offset_bound`, and the correction in `[-1, 1]`.
pub fn deform<T: Real>(
    shape: &DeformerShape,
    weights: &[T],
    q: Vec3<T>,
    o: T,
    offset_bound: f64,
) -> (Vec3<T>, T) {
    debug_assert_eq!(weights.len(), shape.param_count());
    let mut activations = vec![q[0], q[1], q[2], o];
    let mut next = Vec::with_capacity(shape.width.max(OUTPUTS));
    let dims = shape.layer_dims();
    let last = dims.len() - 1;
    let mut offset = 0;
    for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let (w, rest) = weights[offset..].split_at(fan_in * fan_out);
        let b = &rest[..fan_out];
        offset += fan_in * fan_out + fan_out;
        next.clear();
        for j in 0..fan_out {
            let z = T::affine(&w[j * fan_in..(j + 1) * fan_in], &activations, b[j]);
            next.push(if l == last { z } else { z.tanh() });
        }
        std::mem::swap(&mut activations, &mut next);
    }
    let v = [
        activations[0].tanh() * offset_bound,
        activations[1].tanh() * offset_bound,
        activations[2].tanh() * offset_bound,
    ];
    (v, activations[3].tanh())
}

/// Forward pass in plain arithmetic that keeps what [`deform_backward`]
/// needs.
#[derive(Debug, Clone, Default)]
pub struct DeformTrace {
    /// Network input followed by every hidden activation, layer by layer.
    activations: Vec<f64>,
    /// `(v, c)` as four numbers.
    pub outputs: [f64; 4],
    /// Derivative of the outputs with respect to the occupancy input `o`.
    pub d_outputs_d_o: [f64; 4],
    // derivative of each output with respect to its raw network value
    d_outputs_d_raw: [f64; 4],
}

/// Evaluates the network on `(q, o)` and records the trace. Hidden
/// activations are appended to `trace.activations` after clearing it.
pub fn deform_traced(
    shape: &DeformerShape,
    weights: &[f64],
    q: Vec3<f64>,
    o: f64,
    offset_bound: f64,
    trace: &mut DeformTrace,
) {
    debug_assert_eq!(weights.len(), shape.param_count());
    let acts = &mut trace.activations;
    acts.clear();
    acts.extend_from_slice(&[q[0], q[1], q[2], o]);
    // forward-mode tangent along the `o` input
    let mut tangent = vec![0.0, 0.0, 0.0, 1.0];
    let mut next_tangent = Vec::with_capacity(shape.width.max(OUTPUTS));
    let dims = shape.layer_dims();
    let last = dims.len() - 1;
    let mut offset = 0;
    let mut in_start = 0;
    let mut raw = [0.0; OUTPUTS];
    let mut raw_tangent = [0.0; OUTPUTS];
    for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let w = &weights[offset..offset + fan_in * fan_out];
        let b = &weights[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        next_tangent.clear();
        let out_start = acts.len();
        for j in 0..fan_out {
            let row = &w[j * fan_in..(j + 1) * fan_in];
            let input = &acts[in_start..in_start + fan_in];
            let z = row.iter().zip(input).fold(b[j], |acc, (w, x)| acc + w * x);
            let dz: f64 = row.iter().zip(&tangent).map(|(w, t)| w * t).sum();
            if l == last {
                raw[j] = z;
                raw_tangent[j] = dz;
            } else {
                let h = z.tanh();
                acts.push(h);
                next_tangent.push((1.0 - h * h) * dz);
            }
        }
        std::mem::swap(&mut tangent, &mut next_tangent);
        in_start = out_start;
    }
    for k in 0..OUTPUTS {
        let t = raw[k].tanh();
        let scale = if k < 3 { offset_bound } else { 1.0 };
        trace.outputs[k] = t * scale;
        trace.d_outputs_d_raw[k] = (1.0 - t * t) * scale;
        trace.d_outputs_d_o[k] = trace.d_outputs_d_raw[k] * raw_tangent[k];
    }
}

/// Accumulates into `grad` (aligned with `weights`) the weight gradient of
/// `Σ_k adjoint[k] * output_k` for the traced evaluation.
pub fn deform_backward(shape: &DeformerShape, weights: &[f64], trace: &DeformTrace, adjoint: [f64; 4], grad: &mut [f64]) {
    let dims = shape.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut act_starts = Vec::with_capacity(dims.len());
    let (mut offset, mut act) = (0, 0);
    for &(fan_in, fan_out) in &dims {
        offsets.push(offset);
        act_starts.push(act);
        offset += fan_in * fan_out + fan_out;
        act += fan_in;
    }
    let mut delta: Vec<f64> = (0..OUTPUTS).map(|k| adjoint[k] * trace.d_outputs_d_raw[k]).collect();
    let mut prev = Vec::with_capacity(shape.width.max(INPUTS));
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let w_at = offsets[l];
        let b_at = w_at + fan_in * fan_out;
        let input = &trace.activations[act_starts[l]..act_starts[l] + fan_in];
        for j in 0..fan_out {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            grad[b_at + j] += d;
            let row = &mut grad[w_at + j * fan_in..w_at + (j + 1) * fan_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if l == 0 {
            break;
        }
        prev.clear();
        prev.resize(fan_in, 0.0);
        for j in 0..fan_out {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            let row = &weights[w_at + j * fan_in..w_at + (j + 1) * fan_in];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        // inputs of layer l are tanh activations of layer l - 1
        for (p, h) in prev.iter_mut().zip(input) {
            *p *= 1.0 - h * h;
        }
        std::mem::swap(&mut delta, &mut prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_check;
    use proptest::prelude::*;

    #[test]
    fn param_count_formula() {
        for (h, w) in [(1, 8), (2, 32), (3, 5)] {
            let shape = DeformerShape {
                hidden_layers: h,
                width: w,
            };
            assert_eq!(shape.param_count(), (4 * w + w) + (h - 1) * (w * w + w) + (w * 4 + 4));
        }
    }

    #[test]
    fn zero_network_is_identity() {
        let d = DeformerParams::zeros(DeformerShape::default());
        assert_eq!(d.deform([0.3, -0.2, 0.9], 0.4, 0.5), ([0.0; 3], 0.0));
        let d = init_deformer(5, 0.0, DeformerShape::default());
        assert!(d.weights().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn saturated_correction() {
        let shape = DeformerShape {
            hidden_layers: 1,
            width: 1,
        };
        // hidden = tanh(0) = 0; raw_c = bias = 10
        let mut w = vec![0.0; shape.param_count()];
        let n = w.len();
        w[n - 1] = 10.0;
        let d = DeformerParams::from_flat(shape, w).unwrap();
        let (v, c) = d.deform([0.1, 0.2, 0.3], 0.5, 0.5);
        assert_eq!(v, [0.0; 3]);
        assert_eq!(c, 10f64.tanh());
        assert!((c - 0.999_999_995_877_692_4).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_zero_output() {
        let a = init_deformer(42, 1.0, DeformerShape::default());
        let b = init_deformer(42, 1.0, DeformerShape::default());
        assert_eq!(a, b);
        let range = a.output_layer_range();
        assert!(a.weights()[range.clone()].iter().all(|w| *w == 0.0));
        assert!(a.weights()[..range.start].iter().any(|w| *w != 0.0));
        assert_eq!(a.deform([0.5, 0.5, -0.5], 0.2, 0.5), ([0.0; 3], 0.0));
    }

    #[test]
    fn offset_norm_gradient_matches_finite_differences() {
        let shape = DeformerShape {
            hidden_layers: 2,
            width: 6,
        };
        let params = DeformerParams::random_full(9, 1.5, shape);
        let report = finite_diff_check(
            |tape, w| {
                let q = [0.3, -0.4, 0.2].map(|c| tape.constant(c));
                let o = tape.constant(0.7);
                let (v, _) = deform(&shape, w, q, o, 0.5);
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
            },
            params.weights(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn traced_backward_matches_tape() {
        use crate::grad::Tape;
        let shape = DeformerShape {
            hidden_layers: 3,
            width: 5,
        };
        let params = DeformerParams::random_full(4, 1.3, shape);
        let (q, o) = ([0.2, -0.7, 0.4], 0.35);
        let adjoint = [0.3, -1.1, 0.7, 2.0];
        let mut trace = DeformTrace::default();
        deform_traced(&shape, params.weights(), q, o, 0.5, &mut trace);
        let (v, c) = params.deform(q, o, 0.5);
        assert_eq!(trace.outputs, [v[0], v[1], v[2], c]);
        let mut grad = vec![0.0; shape.param_count()];
        deform_backward(&shape, params.weights(), &trace, adjoint, &mut grad);

        let tape = Tape::new();
        let w = tape.leaves(params.weights());
        let ov = tape.leaf(o);
        let qv = q.map(|x| tape.constant(x));
        let (v, c) = deform(&shape, &w, qv, ov, 0.5);
        let out = v[0] * adjoint[0] + v[1] * adjoint[1] + v[2] * adjoint[2] + c * adjoint[3];
        let g = tape.backward(out).unwrap();
        for (a, b) in grad.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
        let d_o: f64 = (0..4).map(|k| adjoint[k] * trace.d_outputs_d_o[k]).sum();
        assert!((d_o - g.values[shape.param_count()]).abs() < 1e-13);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(DeformerParams::from_flat(DeformerShape::default(), vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn outputs_bounded(seed in 0u64..1000, scale in 0.0f64..20.0, q in prop::array::uniform3(-5.0f64..5.0), o in 0.0f64..=1.0) {
            let d = DeformerParams::random_full(seed, scale, DeformerShape { hidden_layers: 2, width: 8 });
            let (v, c) = d.deform(q, o, 0.5);
            prop_assert!(v.iter().all(|x| x.abs() <= 0.5));
            prop_assert!(c.abs() <= 1.0);
            prop_assert_eq!(d.deform(q, o, 0.5), (v, c));
        }
    }
}
