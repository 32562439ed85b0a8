//! Classifier: one input layer (receptive graph, direct convolution or dense)
//! followed by dense layers and a softmax head.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::layer::{
    dropout_mask, softmax_cross_entropy, Activation, Conv2dLayer, DenseLayer, ReceptiveGraphLayer,
};
use crate::real::Real;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum InputLayer<F> {
    Receptive(ReceptiveGraphLayer<F>),
    Conv(Conv2dLayer<F>),
    Dense(DenseLayer<F>),
}

impl<F: Real> InputLayer<F> {
    pub fn in_features(&self) -> usize {
        match self {
            InputLayer::Receptive(l) => l.in_features(),
            InputLayer::Conv(l) => l.in_features(),
            InputLayer::Dense(l) => l.inputs(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            InputLayer::Receptive(l) => l.out_features(),
            InputLayer::Conv(l) => l.out_features(),
            InputLayer::Dense(l) => l.outputs(),
        }
    }

    fn forward(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        match self {
            InputLayer::Receptive(l) => l.forward_batch(x),
            InputLayer::Conv(l) => l.forward_batch(x),
            InputLayer::Dense(l) => l.forward_batch(x),
        }
    }

    /// Kernel of the input layer: the one l2 weight decay applies to.
    pub fn kernel_values(&self) -> &[F] {
        match self {
            InputLayer::Receptive(l) => l.kernel.values(),
            InputLayer::Conv(l) => l.kernel.values(),
            InputLayer::Dense(l) => l.weights.as_slice().expect("standard layout"),
        }
    }

    pub fn scheme_frozen(&self) -> bool {
        match self {
            InputLayer::Receptive(l) => l.scheme.frozen,
            _ => true,
        }
    }
}

/// Stack: input layer → dense layers (all but the last use relu + dropout)
/// → softmax over the last layer's outputs. Without dense layers the input
/// layer's outputs are the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    pub input: InputLayer<F>,
    pub dense: Vec<DenseLayer<F>>,
    /// Dropout rate on the output of every hidden dense layer.
    pub dropout: f64,
}

/// Gradients mirroring [`Classifier::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads<F> {
    pub slots: Vec<Vec<F>>,
}

/// Role of a parameter tensor, used by the optimizer to pick what to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    InputKernel,
    InputScheme,
    InputBias,
    DenseWeights(usize),
    DenseBias(usize),
}

pub struct ParamSlot<'a, F> {
    pub kind: ParamKind,
    pub values: &'a mut [F],
}

struct Trace<F> {
    input_z: Array2<F>,
    input_y: Array2<F>,
    /// Per dense layer: (layer input after dropout, z, y, dropout mask).
    dense: Vec<(Array2<F>, Array2<F>, Array2<F>, Option<Array2<F>>)>,
    logits: Array2<F>,
}

impl<F: Real> Classifier<F> {
    pub fn new(input: InputLayer<F>, dense: Vec<DenseLayer<F>>, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {dropout}")));
        }
        let mut width = input.out_features();
        for (k, d) in dense.iter().enumerate() {
            if d.inputs() != width {
                return Err(Error::shape(format!("dense layer {k} expects {} inputs, previous layer gives {width}", d.inputs())));
            }
            width = d.outputs();
        }
        Ok(Classifier { input, dense, dropout })
    }

    pub fn classes(&self) -> usize {
        self.dense.last().map_or_else(|| self.input.out_features(), |d| d.outputs())
    }

    fn run(&self, x: ArrayView2<'_, F>, mut rng: Option<&mut Rng>) -> Result<Trace<F>> {
        let (input_z, input_y) = self.input.forward(x)?;
        let mut dense = Vec::with_capacity(self.dense.len());
        let mut current = input_y.clone();
        let last = self.dense.len().saturating_sub(1);
        for (k, layer) in self.dense.iter().enumerate() {
            let (z, y) = layer.forward_batch(current.view())?;
            let mask = match rng.as_deref_mut() {
                Some(r) if k < last && self.dropout > 0.0 => Some(dropout_mask::<F>(y.nrows(), y.ncols(), self.dropout, r)),
                _ => None,
            };
            let next = match &mask {
                Some(m) => &y * m,
                None => y.clone(),
            };
            dense.push((current, z, y, mask));
            current = next;
        }
        Ok(Trace { input_z, input_y, dense, logits: current })
    }

    /// Inference logits (no dropout).
    pub fn logits(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        Ok(self.run(x, None)?.logits)
    }

    pub fn predict(&self, x: ArrayView2<'_, F>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for k in 1..r.len() {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy on a batch and gradients for every parameter slot.
    /// Dropout is active when `rng` is given.
    pub fn loss_and_grads(&self, x: ArrayView2<'_, F>, labels: &[usize], rng: Option<&mut Rng>) -> Result<(F, ClassifierGrads<F>)> {
        let trace = self.run(x, rng)?;
        let (loss, mut upstream) = softmax_cross_entropy(&trace.logits, labels)?;
        let mut dense_grads = Vec::with_capacity(self.dense.len());
        for (layer, (input, z, y, mask)) in self.dense.iter().zip(&trace.dense).rev() {
            if let Some(m) = mask {
                upstream = &upstream * m;
            }
            let g = layer.backward_batch(input.view(), z, y, &upstream, true)?;
            upstream = g.input.expect("requested");
            dense_grads.push((g.weights, g.bias));
        }
        dense_grads.reverse();
        let mut slots = Vec::new();
        match &self.input {
            InputLayer::Receptive(l) => {
                let g = l.backward_batch(x, &trace.input_z, &trace.input_y, &upstream, false)?;
                slots.push(g.kernel);
                slots.push(g.scheme);
                slots.push(g.bias);
            }
            InputLayer::Conv(l) => {
                let (dk, db, _) = l.backward_batch(x, &trace.input_z, &trace.input_y, &upstream, false)?;
                slots.push(dk);
                slots.push(db);
            }
            InputLayer::Dense(l) => {
                let g = l.backward_batch(x, &trace.input_z, &trace.input_y, &upstream, false)?;
                slots.push(g.weights.into_raw_vec_and_offset().0);
                slots.push(g.bias.to_vec());
            }
        }
        for (w, b) in dense_grads {
            slots.push(w.into_raw_vec_and_offset().0);
            slots.push(b.to_vec());
        }
        Ok((loss, ClassifierGrads { slots }))
    }

    /// Every parameter tensor in a fixed order. The scheme slot is listed
    /// even when frozen; the optimizer skips it.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, F>> {
        let mut out = Vec::new();
        match &mut self.input {
            InputLayer::Receptive(l) => {
                out.push(ParamSlot { kind: ParamKind::InputKernel, values: l.kernel.values_mut() });
                out.push(ParamSlot { kind: ParamKind::InputScheme, values: l.scheme.values_mut() });
                out.push(ParamSlot { kind: ParamKind::InputBias, values: &mut l.bias });
            }
            InputLayer::Conv(l) => {
                out.push(ParamSlot { kind: ParamKind::InputKernel, values: l.kernel.values_mut() });
                out.push(ParamSlot { kind: ParamKind::InputBias, values: &mut l.bias });
            }
            InputLayer::Dense(l) => {
                out.push(ParamSlot { kind: ParamKind::InputKernel, values: l.weights.as_slice_mut().expect("standard layout") });
                out.push(ParamSlot { kind: ParamKind::InputBias, values: l.bias.as_slice_mut().expect("standard layout") });
            }
        }
        for (k, d) in self.dense.iter_mut().enumerate() {
            out.push(ParamSlot { kind: ParamKind::DenseWeights(k), values: d.weights.as_slice_mut().expect("standard layout") });
            out.push(ParamSlot { kind: ParamKind::DenseBias(k), values: d.bias.as_slice_mut().expect("standard layout") });
        }
        out
    }

    pub fn receptive(&self) -> Option<&ReceptiveGraphLayer<F>> {
        match &self.input {
            InputLayer::Receptive(l) => Some(l),
            _ => None,
        }
    }

    pub fn receptive_mut(&mut self) -> Option<&mut ReceptiveGraphLayer<F>> {
        match &mut self.input {
            InputLayer::Receptive(l) => Some(l),
            _ => None,
        }
    }

    /// Sets every weight, bias and scheme entry to zero.
    pub fn zeroed(mut self) -> Self {
        for slot in self.params_mut() {
            slot.values.iter_mut().for_each(|v| *v = F::zero());
        }
        self
    }
}

/// Convenience constructor for dense hidden/head layers.
pub fn dense_stack<F: Real>(inputs: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Vec<DenseLayer<F>> {
    let mut out = Vec::new();
    let mut width = inputs;
    for &h in hidden {
        out.push(DenseLayer::glorot(width, h, Activation::Relu, rng));
        width = h;
    }
    out.push(DenseLayer::glorot(width, classes, Activation::Identity, rng));
    out
}

pub fn zero_dense<F: Real>(inputs: usize, outputs: usize, activation: Activation) -> DenseLayer<F> {
    DenseLayer { weights: Array2::zeros((inputs, outputs)), bias: Array1::zeros(outputs), activation }
}
