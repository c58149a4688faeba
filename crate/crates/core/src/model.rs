//! Predictive models over a flat parameter vector.
//!
//! Parameters are laid out as `W₁` (row-major, `H × p`), `b₁`, `W₂` (row-major,
//! `K × H`), `b₂`. The logistic model is just `w` of length `p`, with no bias.
//! Outputs are clamped to `[1e-12, 1 − 1e-12]` before the loss and gradient.

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const OUTPUT_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {found}, model expects {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("feature index {index} out of range for {inputs} inputs")]
    FeatureIndex { index: usize, inputs: usize },
    #[error("dense input has {found} features, model expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("label {label} out of range for {outputs} output(s)")]
    Label { label: usize, outputs: usize },
    #[error("invalid model shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Logistic { inputs: usize },
    Mlp { inputs: usize, hidden: usize, outputs: usize },
}

/// Index ranges of each parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match *self {
            ModelSpec::Logistic { inputs } => inputs >= 1,
            ModelSpec::Mlp { inputs, hidden, outputs } => inputs >= 1 && hidden >= 1 && outputs >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Shape(format!("{self:?}")))
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            ModelSpec::Logistic { inputs } | ModelSpec::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            ModelSpec::Logistic { .. } => 1,
            ModelSpec::Mlp { outputs, .. } => outputs,
        }
    }

    pub fn hidden(&self) -> Option<usize> {
        match *self {
            ModelSpec::Logistic { .. } => None,
            ModelSpec::Mlp { hidden, .. } => Some(hidden),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.outputs() == 1
    }

    pub fn num_params(&self) -> usize {
        match *self {
            ModelSpec::Logistic { inputs } => inputs,
            ModelSpec::Mlp { inputs, hidden, outputs } => hidden * inputs + hidden + outputs * hidden + outputs,
        }
    }

    /// Block ranges; for the logistic model only `w1` is non-empty.
    pub fn layout(&self) -> Layout {
        match *self {
            ModelSpec::Logistic { inputs } => Layout {
                w1: 0..inputs,
                b1: inputs..inputs,
                w2: inputs..inputs,
                b2: inputs..inputs,
            },
            ModelSpec::Mlp { inputs, hidden, outputs } => {
                let a = hidden * inputs;
                let b = a + hidden;
                let c = b + outputs * hidden;
                Layout {
                    w1: 0..a,
                    b1: a..b,
                    w2: b..c,
                    b2: c..c + outputs,
                }
            }
        }
    }

    fn check(&self, params: &[impl Copy], x: &Features<impl Real>) -> Result<(), ModelError> {
        if params.len() != self.num_params() {
            return Err(ModelError::ParamLength {
                expected: self.num_params(),
                found: params.len(),
            });
        }
        x.check(self.inputs())
    }

    fn check_label(&self, label: usize) -> Result<(), ModelError> {
        let limit = if self.is_binary() { 2 } else { self.outputs() };
        if label >= limit {
            return Err(ModelError::Label {
                label,
                outputs: self.outputs(),
            });
        }
        Ok(())
    }

    /// Output probabilities `z ∈ (0, 1)^K`.
    pub fn forward<T: Real>(&self, params: &[T], x: &Features<T>) -> Result<Vec<T>, ModelError> {
        self.check(params, x)?;
        let mut ws = Workspace::new(self);
        self.forward_ws(params, x, &HiddenMode::Plain, &mut ws);
        Ok(ws.z)
    }

    /// Forward pass with an explicit hidden-unit mode.
    pub fn forward_with<T: Real>(
        &self,
        params: &[T],
        x: &Features<T>,
        mode: &HiddenMode<T>,
        ws: &mut Workspace<T>,
    ) -> Result<Vec<T>, ModelError> {
        self.check(params, x)?;
        self.forward_ws(params, x, mode, ws);
        Ok(ws.z.clone())
    }

    fn forward_ws<T: Real>(&self, params: &[T], x: &Features<T>, mode: &HiddenMode<T>, ws: &mut Workspace<T>) {
        let lo = T::lit(OUTPUT_CLAMP);
        let hi = T::one() - lo;
        match *self {
            ModelSpec::Logistic { .. } => {
                let mut a = T::zero();
                x.for_each_nonzero(|j, v| a += params[j] * v);
                ws.z[0] = a.sigmoid().max(lo).min(hi);
            }
            ModelSpec::Mlp { inputs, hidden, outputs } => {
                let layout = self.layout();
                let b1 = &params[layout.b1.clone()];
                ws.h.copy_from_slice(b1);
                x.for_each_nonzero(|j, v| {
                    for (k, acc) in ws.h.iter_mut().enumerate() {
                        *acc += params[k * inputs + j] * v;
                    }
                });
                for (k, acc) in ws.h.iter_mut().enumerate() {
                    let act = acc.sigmoid();
                    *acc = match mode {
                        HiddenMode::Plain => act,
                        HiddenMode::Scaled(s) => act * *s,
                        HiddenMode::Masked(m) => {
                            if m[k] {
                                act
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ws.raw_h[k] = act;
                }
                let w2 = &params[layout.w2.clone()];
                let b2 = &params[layout.b2.clone()];
                for o in 0..outputs {
                    let row = &w2[o * hidden..(o + 1) * hidden];
                    let a: T = b2[o] + row.iter().zip(&ws.h).map(|(&w, &h)| w * h).sum::<T>();
                    ws.z[o] = a.sigmoid().max(lo).min(hi);
                }
            }
        }
    }

    /// Averaged binary KL between the one-hot (or binary) target and `z`.
    pub fn loss<T: Real>(&self, label: usize, z: &[T]) -> T {
        let k = z.len();
        let mut total = T::zero();
        for (o, &zo) in z.iter().enumerate() {
            total += binary_kl(self.target(label, o), zo);
        }
        total / T::from_usize(k).unwrap()
    }

    fn target<T: Real>(&self, label: usize, output: usize) -> T {
        let hit = if self.is_binary() { label == 1 } else { label == output };
        if hit {
            T::one()
        } else {
            T::zero()
        }
    }

    /// Full gradient of the loss with respect to the parameters.
    pub fn gradient<T: Real>(&self, params: &[T], x: &Features<T>, label: usize) -> Result<DVector<T>, ModelError> {
        let mut grad = DVector::zeros(self.num_params());
        let mut ws = Workspace::new(self);
        self.loss_and_gradient(params, x, label, &HiddenMode::Plain, &mut ws, grad.as_mut_slice())?;
        Ok(grad)
    }

    /// Forward and backward pass. Writes every entry of `grad` indexed by
    /// [`ModelSpec::support`] and leaves all other entries untouched; those
    /// gradient entries are zero. Returns `(z, loss)`.
    pub fn loss_and_gradient<T: Real>(
        &self,
        params: &[T],
        x: &Features<T>,
        label: usize,
        mode: &HiddenMode<T>,
        ws: &mut Workspace<T>,
        grad: &mut [T],
    ) -> Result<(Vec<T>, T), ModelError> {
        self.check(params, x)?;
        self.check_label(label)?;
        self.forward_ws(params, x, mode, ws);
        let z = ws.z.clone();
        let loss = self.loss(label, &z);
        match *self {
            ModelSpec::Logistic { .. } => {
                let r = z[0] - self.target::<T>(label, 0);
                x.for_each_nonzero(|j, v| grad[j] = r * v);
            }
            ModelSpec::Mlp { inputs, hidden, outputs } => {
                let layout = self.layout();
                let kf = T::from_usize(outputs).unwrap();
                for o in 0..outputs {
                    ws.d2[o] = (z[o] - self.target::<T>(label, o)) / kf;
                }
                let w2 = &params[layout.w2.clone()];
                for h in 0..hidden {
                    let mut back = T::zero();
                    for o in 0..outputs {
                        back += w2[o * hidden + h] * ws.d2[o];
                    }
                    let act = ws.raw_h[h];
                    let gate = match mode {
                        HiddenMode::Plain => T::one(),
                        HiddenMode::Scaled(s) => *s,
                        HiddenMode::Masked(m) => {
                            if m[h] {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ws.d1[h] = back * gate * act * (T::one() - act);
                }
                for o in 0..outputs {
                    let base = layout.w2.start + o * hidden;
                    for h in 0..hidden {
                        grad[base + h] = ws.d2[o] * ws.h[h];
                    }
                    grad[layout.b2.start + o] = ws.d2[o];
                }
                grad[layout.b1.clone()].copy_from_slice(&ws.d1);
                x.for_each_nonzero(|j, v| {
                    for h in 0..hidden {
                        grad[h * inputs + j] = ws.d1[h] * v;
                    }
                });
            }
        }
        Ok((z, loss))
    }

    /// Parameter indices whose gradient can be nonzero for input `x`.
    pub fn support<T: Real>(&self, x: &Features<T>, out: &mut Vec<usize>) {
        out.clear();
        match *self {
            ModelSpec::Logistic { .. } => x.for_each_nonzero(|j, _| out.push(j)),
            ModelSpec::Mlp { inputs, hidden, .. } => {
                for h in 0..hidden {
                    x.for_each_nonzero(|j, _| out.push(h * inputs + j));
                }
                out.extend(self.layout().b1.start..self.num_params());
            }
        }
    }

    /// Central finite differences of the loss, one coordinate at a time.
    pub fn finite_diff_gradient<T: Real>(
        &self,
        params: &[T],
        x: &Features<T>,
        label: usize,
        h: T,
    ) -> Result<DVector<T>, ModelError> {
        self.check(params, x)?;
        let mut p = params.to_vec();
        let mut out = DVector::zeros(params.len());
        for i in 0..params.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = self.loss(label, &self.forward(&p, x)?);
            p[i] = orig - h;
            let down = self.loss(label, &self.forward(&p, x)?);
            p[i] = orig;
            out[i] = (up - down) / (h + h);
        }
        Ok(out)
    }

    /// Scales the hidden-to-output weights in place (dropout inference scaling).
    pub fn scale_output_weights<T: Real>(&self, params: &mut [T], factor: T) {
        for w in &mut params[self.layout().w2] {
            *w *= factor;
        }
    }
}

/// Hidden-unit treatment during a forward/backward pass.
#[derive(Debug, Clone)]
pub enum HiddenMode<T> {
    Plain,
    /// Multiply activations by a constant.
    Scaled(T),
    /// Keep units whose flag is `true`, zero the rest.
    Masked(Vec<bool>),
}

/// Reusable buffers for [`ModelSpec::loss_and_gradient`].
#[derive(Debug, Clone)]
pub struct Workspace<T> {
    h: Vec<T>,
    raw_h: Vec<T>,
    d1: Vec<T>,
    d2: Vec<T>,
    z: Vec<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new(spec: &ModelSpec) -> Self {
        let h = spec.hidden().unwrap_or(0);
        let k = spec.outputs();
        Self {
            h: vec![T::zero(); h],
            raw_h: vec![T::zero(); h],
            d1: vec![T::zero(); h],
            d2: vec![T::zero(); k],
            z: vec![T::zero(); k],
        }
    }
}

/// `y log(y/z) + (1−y) log((1−y)/(1−z))` with `0 log 0 = 0`; `z` is clamped.
pub fn binary_kl<T: Real>(y: T, z: T) -> T {
    let lo = T::lit(OUTPUT_CLAMP);
    let z = z.max(lo).min(T::one() - lo);
    let mut out = T::zero();
    if y > T::zero() {
        out += y * (y / z).ln();
    }
    let ny = T::one() - y;
    if ny > T::zero() {
        out += ny * (ny / (T::one() - z)).ln();
    }
    out
}

/// Binary: `z ≥ 0.5 → 1`; multiclass: argmax, lowest index on ties.
pub fn predict_label<T: Real>(z: &[T]) -> usize {
    if z.len() == 1 {
        return usize::from(z[0] >= T::lit(0.5));
    }
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features<T> {
    Dense(Vec<T>),
    Sparse { indices: Vec<u32>, values: Vec<T> },
}

impl<T: Real> Features<T> {
    pub fn sparse(entries: Vec<(u32, T)>) -> Self {
        let (indices, values) = entries.into_iter().unzip();
        Features::Sparse { indices, values }
    }

    #[inline]
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, T)) {
        match self {
            Features::Dense(v) => {
                for (j, &x) in v.iter().enumerate() {
                    if x != T::zero() {
                        f(j, x);
                    }
                }
            }
            Features::Sparse { indices, values } => {
                for (&j, &x) in indices.iter().zip(values) {
                    if x != T::zero() {
                        f(j as usize, x);
                    }
                }
            }
        }
    }

    /// Largest referenced index plus one (dense: its length).
    pub fn extent(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Sparse { indices, .. } => indices.iter().max().map_or(0, |&m| m as usize + 1),
        }
    }

    pub fn check(&self, inputs: usize) -> Result<(), ModelError> {
        match self {
            Features::Dense(v) if v.len() != inputs => Err(ModelError::InputLength {
                expected: inputs,
                found: v.len(),
            }),
            Features::Sparse { indices, .. } => match indices.iter().find(|&&j| j as usize >= inputs) {
                Some(&j) => Err(ModelError::FeatureIndex {
                    index: j as usize,
                    inputs,
                }),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn to_dense(&self, inputs: usize) -> Vec<T> {
        let mut out = vec![T::zero(); inputs];
        self.for_each_nonzero(|j, v| out[j] = v);
        out
    }

    pub fn cast<U: Real>(&self) -> Features<U> {
        let c = |x: &T| U::lit(x.as_f64());
        match self {
            Features::Dense(v) => Features::Dense(v.iter().map(c).collect()),
            Features::Sparse { indices, values } => Features::Sparse {
                indices: indices.clone(),
                values: values.iter().map(c).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample<T> {
    pub features: Features<T>,
    /// Training label (possibly corrupted).
    pub label: usize,
    /// Clean label when noise was injected.
    pub true_label: Option<usize>,
}

impl<T> LabeledExample<T> {
    pub fn new(features: Features<T>, label: usize) -> Self {
        Self {
            features,
            label,
            true_label: None,
        }
    }

    /// Label used for scoring.
    pub fn truth(&self) -> usize {
        self.true_label.unwrap_or(self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(v: &[f64]) -> Features<f64> {
        Features::Dense(v.to_vec())
    }

    #[test]
    fn logistic_forward_examples() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        assert_eq!(spec.forward(&[0.0, 0.0], &dense(&[3.0, -1.0])).unwrap(), vec![0.5]);
        let z = spec.forward(&[1.0, 1.0], &dense(&[1.0, 1.0])).unwrap();
        assert!((z[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn mlp_zero_params_give_half() {
        let spec = ModelSpec::Mlp { inputs: 3, hidden: 4, outputs: 2 };
        let z = spec.forward(&vec![0.0; spec.num_params()], &dense(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(z, vec![0.5, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let spec = ModelSpec::Logistic { inputs: 1 };
        assert!((spec.loss(1, &[0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(binary_kl(1.0, 1.0), binary_kl(0.0, 0.0));
        assert!(binary_kl(1.0f64, 1.0) < 1e-11);
        assert!((spec.loss(0, &[0.25]) - (1.0f64 / 0.75).ln()).abs() < 1e-9);
        assert!(binary_kl(0.3f64, 0.3).abs() < 1e-15);
    }

    #[test]
    fn logistic_gradient_examples() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        let g = spec.gradient(&[0.0, 0.0], &dense(&[1.0, 2.0]), 1).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, -1.0]);
        let fd = spec.finite_diff_gradient(&[0.3, -0.2], &dense(&[1.0, 0.0]), 0, 1e-5).unwrap();
        let g = spec.gradient(&[0.3, -0.2], &dense(&[1.0, 0.0]), 0).unwrap();
        assert!((fd[0] - g[0]).abs() < 1e-7);
        assert_eq!(fd[1], 0.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn mlp_zero_params_output_bias_gradient() {
        // All hidden units are σ(0) = 1/2; with K outputs each δ₂ = (1/2 − y)/K.
        let spec = ModelSpec::Mlp { inputs: 2, hidden: 3, outputs: 2 };
        let g = spec.gradient(&vec![0.0; spec.num_params()], &dense(&[0.4, -1.0]), 1).unwrap();
        let l = spec.layout();
        assert!((g[l.b2.start] - 0.25).abs() < 1e-15);
        assert!((g[l.b2.start + 1] + 0.25).abs() < 1e-15);
        for h in 0..3 {
            assert!((g[l.w2.start + h] - 0.125).abs() < 1e-15);
        }
        assert!(g.rows_range(l.w1.start..l.b1.end).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn predict_label_conventions() {
        assert_eq!(predict_label(&[0.5]), 1);
        assert_eq!(predict_label(&[0.4999]), 0);
        assert_eq!(predict_label(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict_label(&[0.4, 0.4]), 0);
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = ModelSpec::Mlp { inputs: 784, hidden: 200, outputs: 10 };
        let l = spec.layout();
        assert_eq!(spec.num_params(), 159_010);
        assert_eq!((l.w1.end, l.b1.end, l.w2.end, l.b2.end), (156_800, 157_000, 159_000, 159_010));
    }

    #[test]
    fn support_gradient_matches_dense_gradient() {
        let spec = ModelSpec::Mlp { inputs: 5, hidden: 3, outputs: 2 };
        let params: Vec<f64> = (0..spec.num_params()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let x = Features::sparse(vec![(1, 0.5), (4, -2.0)]);
        let full = spec.gradient(&params, &x, 0).unwrap();
        let mut support = Vec::new();
        spec.support(&x, &mut support);
        let mut grad = vec![f64::NAN; spec.num_params()];
        let mut ws = Workspace::new(&spec);
        spec.loss_and_gradient(&params, &x, 0, &HiddenMode::Plain, &mut ws, &mut grad).unwrap();
        for i in 0..spec.num_params() {
            if support.contains(&i) {
                assert_eq!(grad[i], full[i]);
            } else {
                assert!(grad[i].is_nan());
                assert_eq!(full[i], 0.0);
            }
        }
    }

    #[test]
    fn errors_on_bad_shapes() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        assert!(matches!(spec.forward(&[0.0], &dense(&[1.0, 1.0])), Err(ModelError::ParamLength { .. })));
        assert!(matches!(
            spec.forward(&[0.0, 0.0], &Features::sparse(vec![(5, 1.0)])),
            Err(ModelError::FeatureIndex { .. })
        ));
        assert!(matches!(spec.gradient(&[0.0, 0.0], &dense(&[1.0, 1.0]), 2), Err(ModelError::Label { .. })));
    }
}
