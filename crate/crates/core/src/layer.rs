//! Layers: the receptive graph layer and the plumbing around it (dense,
//! direct convolution, dropout, softmax cross-entropy).
//!
//! Batched tensors are `Array2<F>` of shape `[batch, features]`. A graph
//! signal with `n` nodes and `p` channels is flattened node-major, so channel
//! `c` of node `j` sits at feature `j * p + c`.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scheme::SchemeTensor;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Softmax over all outputs of a sample.
    Softmax,
}

impl Activation {
    pub fn apply<F: Real>(self, z: &Array2<F>) -> Array2<F> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Softmax => {
                let mut y = z.clone();
                y.rows_mut().into_iter().for_each(softmax_in_place);
                y
            }
        }
    }

    /// Vector-Jacobian product: maps `dL/dy` to `dL/dz` given `z` and `y`.
    pub fn backward<F: Real>(self, z: &Array2<F>, y: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        match self {
            Activation::Identity => dy.clone(),
            Activation::Relu => {
                let mut dz = dy.clone();
                dz.zip_mut_with(z, |d, &zv| {
                    if zv <= F::zero() {
                        *d = F::zero()
                    }
                });
                dz
            }
            Activation::Softmax => {
                let mut dz = dy.clone();
                for ((mut d, yr), dyr) in dz.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
                    let inner: F = yr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
                    d.iter_mut().zip(yr.iter()).for_each(|(dv, &yv)| *dv = yv * (*dv - inner));
                }
                dz
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

fn softmax_in_place<F: Real>(mut row: ArrayViewMut1<'_, F>) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    row.mapv_inplace(|v| (v - max).exp());
    let sum: F = row.iter().copied().sum();
    row.mapv_inplace(|v| v / sum);
}

/// Shared weight pool `W` of shape `ω × p × q`, stored `[(k * p + c) * q + o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightKernel<F> {
    omega: usize,
    p: usize,
    q: usize,
    values: Vec<F>,
}

impl<F: Real> WeightKernel<F> {
    pub fn new(omega: usize, p: usize, q: usize, values: Vec<F>) -> Result<Self> {
        if omega == 0 || p == 0 || q == 0 {
            return Err(Error::invalid(format!("kernel dimensions must be positive, got {omega}x{p}x{q}")));
        }
        if values.len() != omega * p * q {
            return Err(Error::shape(format!("kernel needs {} values, got {}", omega * p * q, values.len())));
        }
        Ok(WeightKernel { omega, p, q, values })
    }

    pub fn zeros(omega: usize, p: usize, q: usize) -> Result<Self> {
        Self::new(omega, p, q, vec![F::zero(); omega * p * q])
    }

    /// Glorot-uniform init with `fan_in = ω·p`, `fan_out = ω·q`.
    pub fn glorot(omega: usize, p: usize, q: usize, rng: &mut Rng) -> Result<Self> {
        let values = glorot_values((omega * p) as f64, (omega * q) as f64, omega * p * q, rng);
        Self::new(omega, p, q, values)
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn get(&self, k: usize, c: usize, o: usize) -> F {
        self.values[(k * self.p + c) * self.q + o]
    }
}

pub(crate) fn glorot_values<F: Real>(fan_in: f64, fan_out: f64, len: usize, rng: &mut Rng) -> Vec<F> {
    let b = (6.0 / (fan_in + fan_out)).sqrt();
    (0..len).map(|_| F::from_f64(rng.random_range(-b..=b))).collect()
}

/// The sparse operator `Θ = S · W`; one `p × q` block per support edge,
/// stored `[(e * p + c) * q + o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveOperator<F> {
    pub rows: usize,
    pub cols: usize,
    pub p: usize,
    pub q: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Real> EffectiveOperator<F> {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// `Θ[i, j, c, o]`, zero off the support.
    pub fn get(&self, i: usize, j: usize, c: usize, o: usize) -> F {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[((self.row_ptr[i] + k) * self.p + c) * self.q + o],
            Err(_) => F::zero(),
        }
    }

    /// Dense `rows × cols` matrix of channel pair `(c, o)`.
    pub fn dense_channel(&self, c: usize, o: usize) -> Array2<F> {
        let mut m = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[[i, self.col_idx[e]]] = self.values[(e * self.p + c) * self.q + o];
            }
        }
        m
    }
}

/// Contracts `S` with `W`: `Θ[i,j,c,o] = Σ_k S[i,j,k] · W[k,c,o]`.
pub fn effective_operator<F: Real>(s: &SchemeTensor<F>, w: &WeightKernel<F>) -> Result<EffectiveOperator<F>> {
    if s.omega() != w.omega {
        return Err(Error::invalid(format!("scheme omega {} != kernel omega {}", s.omega(), w.omega)));
    }
    let (p, q) = (w.p, w.q);
    let g = s.graph();
    let mut values = vec![F::zero(); g.nnz() * p * q];
    for (e, block) in values.chunks_mut(p * q).enumerate() {
        edge_block(s.vector(e), w, block);
    }
    Ok(EffectiveOperator {
        rows: g.rows(),
        cols: g.cols(),
        p,
        q,
        row_ptr: g.row_ptr().to_vec(),
        col_idx: g.col_indices().to_vec(),
        values,
    })
}

/// `block[c*q + o] = Σ_k s[k] · W[k, c, o]`, skipping exact-zero shares.
#[inline]
fn edge_block<F: Real>(s: &[F], w: &WeightKernel<F>, block: &mut [F]) {
    block.iter_mut().for_each(|v| *v = F::zero());
    let pq = w.p * w.q;
    for (k, &sk) in s.iter().enumerate() {
        if sk == F::zero() {
            continue;
        }
        let wk = &w.values[k * pq..(k + 1) * pq];
        block.iter_mut().zip(wk).for_each(|(b, &wv)| *b += sk * wv);
    }
}

/// How the forward/backward passes obtain `Θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contraction {
    /// Build all of `Θ` once per call.
    Materialized,
    /// Build one edge block at a time; memory `p·q` instead of `l·p·q`.
    Fused,
    /// Materialize when `l·p·q` is at most `budget` elements.
    Auto { budget: usize },
}

impl Default for Contraction {
    fn default() -> Self {
        Contraction::Auto { budget: 64 << 20 }
    }
}

/// Node-indexed features of one sample: `n` nodes × `p` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<F> {
    pub n: usize,
    pub p: usize,
    pub values: Vec<F>,
}

impl<F: Real> Signal<F> {
    pub fn new(n: usize, p: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != n * p {
            return Err(Error::shape(format!("signal {n}x{p} needs {} values, got {}", n * p, values.len())));
        }
        Ok(Signal { n, p, values })
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        Signal { n, p, values: vec![F::zero(); n * p] }
    }

    pub fn get(&self, node: usize, channel: usize) -> F {
        self.values[node * self.p + channel]
    }

    fn as_batch(&self) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((1, self.values.len()), &self.values).expect("contiguous")
    }
}

/// Gradients of a receptive graph layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveGrads<F> {
    /// `dL/dW`, same layout as [`WeightKernel`].
    pub kernel: Vec<F>,
    /// `dL/dS`, same layout as the scheme values; all zero if frozen.
    pub scheme: Vec<F>,
    pub bias: Vec<F>,
    /// `dL/dx` when requested.
    pub input: Option<Array2<F>>,
}

/// Multiply counts of one forward pass on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiplyCount {
    /// `l·ω·p·q` to contract `S` with `W`, plus `l·p·q` to apply `Θ`.
    pub receptive: u64,
    /// `l·p·q`: the same support as a plain sparse matrix product.
    pub baseline: u64,
}

impl MultiplyCount {
    pub fn ratio(&self) -> f64 {
        self.receptive as f64 / self.baseline as f64
    }
}

/// `y = f(Θ · x + b)` with `Θ = S · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveGraphLayer<F> {
    pub scheme: SchemeTensor<F>,
    pub kernel: WeightKernel<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
    pub contraction: Contraction,
}

impl<F: Real> ReceptiveGraphLayer<F> {
    pub fn new(scheme: SchemeTensor<F>, kernel: WeightKernel<F>, bias: Vec<F>, activation: Activation) -> Result<Self> {
        if scheme.omega() != kernel.omega {
            return Err(Error::invalid(format!(
                "scheme omega {} != kernel omega {}",
                scheme.omega(),
                kernel.omega
            )));
        }
        if bias.len() != kernel.q {
            return Err(Error::shape(format!("bias needs {} values, got {}", kernel.q, bias.len())));
        }
        Ok(ReceptiveGraphLayer { scheme, kernel, bias, activation, contraction: Contraction::default() })
    }

    pub fn with_contraction(mut self, contraction: Contraction) -> Self {
        self.contraction = contraction;
        self
    }

    pub fn n_in(&self) -> usize {
        self.scheme.graph().cols()
    }

    pub fn n_out(&self) -> usize {
        self.scheme.graph().rows()
    }

    pub fn in_features(&self) -> usize {
        self.n_in() * self.kernel.p
    }

    pub fn out_features(&self) -> usize {
        self.n_out() * self.kernel.q
    }

    pub fn count_multiplies(&self) -> MultiplyCount {
        let l = self.scheme.graph().nnz() as u64;
        let (omega, p, q) = (self.kernel.omega as u64, self.kernel.p as u64, self.kernel.q as u64);
        MultiplyCount { receptive: l * omega * p * q + l * p * q, baseline: l * p * q }
    }

    fn materialize(&self) -> bool {
        match self.contraction {
            Contraction::Materialized => true,
            Contraction::Fused => false,
            Contraction::Auto { budget } => self.scheme.graph().nnz() * self.kernel.p * self.kernel.q <= budget,
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, F>) -> Result<()> {
        if x.ncols() != self.in_features() {
            return Err(Error::shape(format!(
                "layer expects {} input features ({} nodes x {} channels), got {}",
                self.in_features(),
                self.n_in(),
                self.kernel.p,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Pre-activation `z = Θ · x + b` for a batch.
    pub fn pre_activation(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        self.check_input(&x)?;
        let (p, q) = (self.kernel.p, self.kernel.q);
        let g = self.scheme.graph();
        let batch = x.nrows();
        let mut z = Array2::<F>::zeros((batch, self.out_features()));
        for mut row in z.rows_mut() {
            for chunk in row.as_slice_mut().expect("standard layout").chunks_mut(q) {
                chunk.copy_from_slice(&self.bias);
            }
        }
        let cols = g.col_indices();
        if self.materialize() {
            let theta = effective_operator(&self.scheme, &self.kernel)?;
            for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
                let zs = zr.as_slice_mut().expect("standard layout");
                for i in 0..g.rows() {
                    let out = &mut zs[i * q..(i + 1) * q];
                    for e in g.row_range(i) {
                        let j = cols[e];
                        for c in 0..p {
                            let xv = xr[j * p + c];
                            if xv == F::zero() {
                                continue;
                            }
                            let block = &theta.values[(e * p + c) * q..(e * p + c + 1) * q];
                            out.iter_mut().zip(block).for_each(|(o, &t)| *o += xv * t);
                        }
                    }
                }
            }
        } else {
            let mut block = vec![F::zero(); p * q];
            for i in 0..g.rows() {
                for e in g.row_range(i) {
                    let j = cols[e];
                    edge_block(self.scheme.vector(e), &self.kernel, &mut block);
                    for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
                        let out = &mut zr.as_slice_mut().expect("standard layout")[i * q..(i + 1) * q];
                        for c in 0..p {
                            let xv = xr[j * p + c];
                            if xv == F::zero() {
                                continue;
                            }
                            out.iter_mut().zip(&block[c * q..(c + 1) * q]).for_each(|(o, &t)| *o += xv * t);
                        }
                    }
                }
            }
        }
        Ok(z)
    }

    /// Batched forward; returns `(z, y)` with `y = f(z)`.
    pub fn forward_batch(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        let z = self.pre_activation(x)?;
        let y = self.activation.apply(&z);
        Ok((z, y))
    }

    pub fn forward(&self, x: &Signal<F>) -> Result<Signal<F>> {
        if x.n != self.n_in() || x.p != self.kernel.p {
            return Err(Error::shape(format!(
                "signal is {}x{}, layer expects {}x{}",
                x.n,
                x.p,
                self.n_in(),
                self.kernel.p
            )));
        }
        let (_, y) = self.forward_batch(x.as_batch())?;
        Signal::new(self.n_out(), self.kernel.q, y.into_raw_vec_and_offset().0)
    }

    /// Batched backward pass from the cached forward values.
    ///
    /// With `dz = f'(z) ⊙ dy` and `G_e[c,o] = Σ_b x[b,j,c] · dz[b,i,o]` for
    /// edge `e = (i, j)`:
    /// `dW[k,c,o] = Σ_e S[e,k] G_e[c,o]`, `dS[e,k] = Σ_{c,o} W[k,c,o] G_e[c,o]`,
    /// `db[o] = Σ_{b,i} dz[b,i,o]`, `dx[b,j,c] = Σ_{e→j} Σ_o Θ_e[c,o] dz[b,i,o]`.
    pub fn backward_batch(
        &self,
        x: ArrayView2<'_, F>,
        z: &Array2<F>,
        y: &Array2<F>,
        dy: &Array2<F>,
        need_input_grad: bool,
    ) -> Result<ReceptiveGrads<F>> {
        self.check_input(&x)?;
        if dy.dim() != (x.nrows(), self.out_features()) || z.dim() != dy.dim() || y.dim() != dy.dim() {
            return Err(Error::shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                dy.dim(),
                x.nrows(),
                self.out_features()
            )));
        }
        let dz = self.activation.backward(z, y, dy);
        let (omega, p, q) = (self.kernel.omega, self.kernel.p, self.kernel.q);
        let pq = p * q;
        let g = self.scheme.graph();
        let cols = g.col_indices();

        // Feature-major copies so the batch reductions run over contiguous memory.
        let xt = x.t().as_standard_layout().into_owned();
        let dzt = dz.t().as_standard_layout().into_owned();

        let mut bias = vec![F::zero(); q];
        for i in 0..g.rows() {
            for o in 0..q {
                bias[o] += dzt.row(i * q + o).sum();
            }
        }

        let theta = if need_input_grad && self.materialize() {
            Some(effective_operator(&self.scheme, &self.kernel)?)
        } else {
            None
        };
        let mut dxt = need_input_grad.then(|| Array2::<F>::zeros(xt.dim()));
        let mut kernel = vec![F::zero(); omega * pq];
        let mut scheme = vec![F::zero(); g.nnz() * omega];
        let mut grad_block = vec![F::zero(); pq];
        let mut theta_block = vec![F::zero(); pq];

        for i in 0..g.rows() {
            for e in g.row_range(i) {
                let j = cols[e];
                for c in 0..p {
                    let xr = xt.row(j * p + c);
                    for o in 0..q {
                        grad_block[c * q + o] = xr.dot(&dzt.row(i * q + o));
                    }
                }
                let s = self.scheme.vector(e);
                for (k, &sk) in s.iter().enumerate() {
                    if sk != F::zero() {
                        kernel[k * pq..(k + 1) * pq].iter_mut().zip(&grad_block).for_each(|(d, &gv)| *d += sk * gv);
                    }
                }
                if !self.scheme.frozen {
                    for k in 0..omega {
                        let wk = &self.kernel.values[k * pq..(k + 1) * pq];
                        scheme[e * omega + k] = wk.iter().zip(&grad_block).map(|(&a, &b)| a * b).sum();
                    }
                }
                if let Some(dxt) = dxt.as_mut() {
                    let block: &[F] = match &theta {
                        Some(t) => &t.values[e * pq..(e + 1) * pq],
                        None => {
                            edge_block(s, &self.kernel, &mut theta_block);
                            &theta_block
                        }
                    };
                    for c in 0..p {
                        let mut target = dxt.row_mut(j * p + c);
                        for o in 0..q {
                            let t = block[c * q + o];
                            if t != F::zero() {
                                target.scaled_add(t, &dzt.row(i * q + o));
                            }
                        }
                    }
                }
            }
        }
        let input = dxt.map(|d| d.t().as_standard_layout().into_owned());
        Ok(ReceptiveGrads { kernel, scheme, bias, input })
    }

    /// Single-sample backward: returns `(dW, dS, db, dx)`.
    pub fn backward(&self, x: &Signal<F>, dy: &Signal<F>) -> Result<ReceptiveGrads<F>> {
        if dy.n != self.n_out() || dy.p != self.kernel.q {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                dy.n,
                dy.p,
                self.n_out(),
                self.kernel.q
            )));
        }
        let (z, y) = self.forward_batch(x.as_batch())?;
        let dy = dy.as_batch().to_owned();
        self.backward_batch(x.as_batch(), &z, &y, &dy, true)
    }
}

/// `y = f(x · W + b)` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<F> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
    pub input: Option<Array2<F>>,
}

impl<F: Real> DenseLayer<F> {
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let values = glorot_values(inputs as f64, outputs as f64, inputs * outputs, rng);
        DenseLayer {
            weights: Array2::from_shape_vec((inputs, outputs), values).expect("shape"),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        if x.ncols() != self.inputs() {
            return Err(Error::shape(format!("dense layer expects {} inputs, got {}", self.inputs(), x.ncols())));
        }
        let z = x.dot(&self.weights) + &self.bias;
        let y = self.activation.apply(&z);
        Ok((z, y))
    }

    pub fn backward_batch(
        &self,
        x: ArrayView2<'_, F>,
        z: &Array2<F>,
        y: &Array2<F>,
        dy: &Array2<F>,
        need_input_grad: bool,
    ) -> Result<DenseGrads<F>> {
        if dy.dim() != (x.nrows(), self.outputs()) {
            return Err(Error::shape(format!("upstream gradient is {:?}", dy.dim())));
        }
        let dz = self.activation.backward(z, y, dy);
        Ok(DenseGrads {
            weights: x.t().dot(&dz),
            bias: dz.sum_axis(Axis(0)),
            input: need_input_grad.then(|| dz.dot(&self.weights.t())),
        })
    }
}

/// Direct sliding-window 2-D convolution (stride 1, zero "same" padding) on a
/// `height × width` single-image grid. The kernel uses the [`WeightKernel`]
/// layout with tap `t = (dr + kh/2) * kw + (dc + kw/2)`, so it can be compared
/// one-to-one with [`crate::scheme::convolution_scheme_2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<F> {
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub kernel: WeightKernel<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

impl<F: Real> Conv2dLayer<F> {
    pub fn new(
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        kernel: WeightKernel<F>,
        bias: Vec<F>,
        activation: Activation,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) || kernel.omega != kh * kw {
            return Err(Error::invalid(format!("kernel {kh}x{kw} must be odd-sided with omega {}", kernel.omega)));
        }
        if bias.len() != kernel.q {
            return Err(Error::shape("bias length must equal output channels"));
        }
        Ok(Conv2dLayer { height, width, kh, kw, kernel, bias, activation })
    }

    pub fn in_features(&self) -> usize {
        self.height * self.width * self.kernel.p
    }

    pub fn out_features(&self) -> usize {
        self.height * self.width * self.kernel.q
    }

    /// `(output node, input node, tap)` for every in-bounds tap, row-major.
    fn taps(&self) -> Vec<(usize, usize, usize)> {
        let (h, w) = (self.height as isize, self.width as isize);
        let (rh, rw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                for dr in -rh..=rh {
                    for dc in -rw..=rw {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < h && cc < w {
                            let tap = ((dr + rh) * self.kw as isize + dc + rw) as usize;
                            out.push(((r * w + c) as usize, (rr * w + cc) as usize, tap));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        if x.ncols() != self.in_features() {
            return Err(Error::shape(format!("conv layer expects {} inputs, got {}", self.in_features(), x.ncols())));
        }
        let (p, q) = (self.kernel.p, self.kernel.q);
        let taps = self.taps();
        let mut z = Array2::<F>::zeros((x.nrows(), self.out_features()));
        for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
            let zs = zr.as_slice_mut().expect("standard layout");
            for chunk in zs.chunks_mut(q) {
                chunk.copy_from_slice(&self.bias);
            }
            for &(i, j, t) in &taps {
                for c in 0..p {
                    let xv = xr[j * p + c];
                    if xv == F::zero() {
                        continue;
                    }
                    let wk = &self.kernel.values[(t * p + c) * q..(t * p + c + 1) * q];
                    zs[i * q..(i + 1) * q].iter_mut().zip(wk).for_each(|(o, &wv)| *o += xv * wv);
                }
            }
        }
        let y = self.activation.apply(&z);
        Ok((z, y))
    }

    /// Returns `(dK, db, dx)`.
    pub fn backward_batch(
        &self,
        x: ArrayView2<'_, F>,
        z: &Array2<F>,
        y: &Array2<F>,
        dy: &Array2<F>,
        need_input_grad: bool,
    ) -> Result<(Vec<F>, Vec<F>, Option<Array2<F>>)> {
        if dy.dim() != (x.nrows(), self.out_features()) {
            return Err(Error::shape(format!("upstream gradient is {:?}", dy.dim())));
        }
        let dz = self.activation.backward(z, y, dy);
        let (p, q) = (self.kernel.p, self.kernel.q);
        let xt = x.t().as_standard_layout().into_owned();
        let dzt = dz.t().as_standard_layout().into_owned();
        let mut dk = vec![F::zero(); self.kernel.values.len()];
        let mut db = vec![F::zero(); q];
        for i in 0..self.height * self.width {
            for o in 0..q {
                db[o] += dzt.row(i * q + o).sum();
            }
        }
        let mut dxt = need_input_grad.then(|| Array2::<F>::zeros(xt.dim()));
        for (i, j, t) in self.taps() {
            for c in 0..p {
                let xr = xt.row(j * p + c);
                for o in 0..q {
                    let dzr = dzt.row(i * q + o);
                    dk[(t * p + c) * q + o] += xr.dot(&dzr);
                    if let Some(dxt) = dxt.as_mut() {
                        dxt.row_mut(j * p + c).scaled_add(self.kernel.values[(t * p + c) * q + o], &dzr);
                    }
                }
            }
        }
        Ok((dk, db, dxt.map(|d| d.t().as_standard_layout().into_owned())))
    }
}

/// Inverted dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`, so evaluation needs no rescaling.
pub fn dropout_mask<F: Real>(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Array2<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < rate { F::zero() } else { keep })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    if logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(Error::shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", logits.ncols())));
    }
    let probs = Activation::Softmax.apply(logits);
    let batch = F::from_f64(labels.len() as f64);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (b, &label) in labels.iter().enumerate() {
        let pl = probs[[b, label]];
        loss -= pl.max(F::min_positive_value()).ln();
        grad[[b, label]] -= F::one();
    }
    grad.mapv_inplace(|v| v / batch);
    Ok((loss / batch, grad))
}
