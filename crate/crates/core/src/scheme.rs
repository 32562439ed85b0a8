//! Weight-sharing scheme tensors.
//!
//! A [`SchemeTensor`] stores one dense `ω`-vector per support edge. Entry
//! `k` of the vector on edge `(i, j)` is the share of pool weight `W[k]`
//! that the edge receives.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, GridLayout};
use crate::real::Real;
use crate::seed::rng_from;

/// Largest `n_in * n_out` for which a fully-connected scheme is materialized.
pub const FULLY_CONNECTED_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeTensor<F> {
    graph: Graph,
    omega: usize,
    values: Vec<F>,
    /// A frozen scheme receives no gradient and is never updated.
    pub frozen: bool,
}

/// Constraint projections applied to `S` after every optimizer step, plus the
/// l2 coefficient applied to the input layer's kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintFlags {
    /// Clip every entry of `S` to `[0, 1]`.
    pub positive: bool,
    /// Rescale every scheme vector to sum to 1.
    pub normalized: bool,
    pub l2_weight: f64,
}

impl Default for ConstraintFlags {
    fn default() -> Self {
        ConstraintFlags { positive: false, normalized: false, l2_weight: 0.0 }
    }
}

impl ConstraintFlags {
    pub const DEFAULT_L2: f64 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        if !(self.l2_weight >= 0.0) || !self.l2_weight.is_finite() {
            return Err(Error::invalid(format!("l2 weight must be finite and >= 0, got {}", self.l2_weight)));
        }
        Ok(())
    }
}

/// How one-hot indices are laid out when the scheme is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneHotOrdering {
    /// Node ordering is known: indices follow the relative offset of the
    /// neighbor, so equal offsets share a pool weight (convolution-like).
    KnownCirculant,
    /// Node ordering is unknown: indices are dealt out at random per row.
    UnknownRandom,
}

impl<F: Real> SchemeTensor<F> {
    /// Wraps edge-major values (`nnz × ω`).
    pub fn from_values(graph: Graph, omega: usize, values: Vec<F>) -> Result<Self> {
        if omega == 0 {
            return Err(Error::invalid("omega must be at least 1"));
        }
        if values.len() != graph.nnz() * omega {
            return Err(Error::shape(format!(
                "scheme needs {} values ({} edges x omega {}), got {}",
                graph.nnz() * omega,
                graph.nnz(),
                omega,
                values.len()
            )));
        }
        Ok(SchemeTensor { graph, omega, values, frozen: false })
    }

    pub fn zeros(graph: Graph, omega: usize) -> Result<Self> {
        let len = graph.nnz() * omega;
        Self::from_values(graph, omega, vec![F::zero(); len])
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    /// Scheme vector `s_ij` of edge index `e`.
    pub fn vector(&self, e: usize) -> &[F] {
        &self.values[e * self.omega..(e + 1) * self.omega]
    }

    /// Scheme vector of `(i, j)`, or `None` outside the support.
    pub fn get(&self, i: usize, j: usize) -> Option<&[F]> {
        self.graph.edge_index(i, j).map(|e| self.vector(e))
    }

    /// Applies the clip / normalize projections in place. Clipping happens
    /// first so that with both flags each vector lands in the probability
    /// simplex. A vector whose sum is not positive after clipping is reset
    /// to the uniform vector `1/ω`.
    pub fn project_constraints(&mut self, flags: &ConstraintFlags) {
        project_slice(&mut self.values, self.omega, flags);
    }

    /// Copying form of [`SchemeTensor::project_constraints`].
    pub fn projected(&self, flags: &ConstraintFlags) -> Self {
        let mut out = self.clone();
        out.project_constraints(flags);
        out
    }

    /// Index of the largest entry of each scheme vector (first on ties).
    pub fn dominant_indices(&self) -> Vec<usize> {
        self.values
            .chunks(self.omega)
            .map(|v| {
                let mut best = 0;
                for k in 1..v.len() {
                    if v[k] > v[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Projection on raw edge-major scheme values; shared with the optimizer,
/// which works on flat parameter slices.
pub fn project_slice<F: Real>(values: &mut [F], omega: usize, flags: &ConstraintFlags) {
    if !flags.positive && !flags.normalized {
        return;
    }
    let uniform = F::one() / F::from_f64(omega as f64);
    // Sums already within the rounding error of a normalization are left
    // alone, which makes the projection exactly idempotent.
    let slack = F::epsilon() * F::from_f64((omega + 1) as f64 / 2.0);
    for v in values.chunks_mut(omega) {
        if flags.positive {
            for x in v.iter_mut() {
                *x = x.max(F::zero()).min(F::one());
            }
        }
        if flags.normalized {
            let sum: F = v.iter().copied().sum();
            if sum > F::zero() && sum.is_finite() {
                let magnitude: F = v.iter().map(|x| x.abs()).sum();
                if (sum - F::one()).abs() > slack * magnitude {
                    v.iter_mut().for_each(|x| *x /= sum);
                }
            } else {
                v.iter_mut().for_each(|x| *x = uniform);
            }
        }
    }
}

/// Spiral position of a relative grid offset: by Manhattan distance, then
/// clockwise from "up".
fn grid_spiral_cmp(a: (isize, isize), b: (isize, isize)) -> Ordering {
    let manhattan = |o: (isize, isize)| o.0.unsigned_abs() + o.1.unsigned_abs();
    let angle = |o: (isize, isize)| {
        let t = (o.1 as f64).atan2(-(o.0 as f64));
        if t < 0.0 {
            t + std::f64::consts::TAU
        } else {
            t
        }
    };
    manhattan(a).cmp(&manhattan(b)).then_with(|| angle(a).total_cmp(&angle(b)))
}

/// Offsets of the radius-`k` Manhattan ball in spiral order. Entry `r` is the
/// offset that receives one-hot index `r` under circulant initialization of
/// `grid^k` with `ω = 2k² + 2k + 1`.
pub fn spiral_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dr| (-r..=r).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| dr.abs() + dc.abs() <= r)
        .collect();
    out.sort_by(|&a, &b| grid_spiral_cmp(a, b));
    out
}

/// Relative offset of every edge: 2-D grid offsets when the support carries a
/// grid layout, else the 1-D index difference encoded as `(0, j - i)`.
fn edge_offsets(g: &Graph) -> Vec<(isize, isize)> {
    match g.layout() {
        Some(layout) => g
            .edges()
            .map(|(i, j)| {
                let (ri, ci) = layout.coords(i);
                let (rj, cj) = layout.coords(j);
                (rj - ri, cj - ci)
            })
            .collect(),
        None => g.edges().map(|(i, j)| (0, j as isize - i as isize)).collect(),
    }
}

fn offset_cmp(layout: Option<GridLayout>, a: (isize, isize), b: (isize, isize)) -> Ordering {
    match layout {
        Some(_) => grid_spiral_cmp(a, b),
        // 0, -1, +1, -2, +2, ...
        None => (a.1.unsigned_abs(), a.1 > 0).cmp(&(b.1.unsigned_abs(), b.1 > 0)),
    }
}

/// One-hot initialization. Within every receptive field each index is used
/// at most once more than any other.
///
/// With [`OneHotOrdering::KnownCirculant`], every distinct relative offset
/// gets a rank in spiral order. If `ω` covers all ranks the index *is* the
/// rank, which makes the operator Toeplitz-structured everywhere (border rows
/// simply lack some indices). Otherwise each row deals indices cyclically in
/// spiral order of its own neighbors, which still gives identical maps on all
/// interior rows.
pub fn init_onehot<F: Real>(g: &Graph, omega: usize, ordering: OneHotOrdering, seed: u64) -> Result<SchemeTensor<F>> {
    let mut s = SchemeTensor::<F>::zeros(g.clone(), omega)?;
    let indices = match ordering {
        OneHotOrdering::KnownCirculant => circulant_indices(g, omega),
        OneHotOrdering::UnknownRandom => random_indices(g, omega, seed),
    };
    for (e, k) in indices.into_iter().enumerate() {
        s.values[e * omega + k] = F::one();
    }
    Ok(s)
}

fn circulant_indices(g: &Graph, omega: usize) -> Vec<usize> {
    let layout = g.layout();
    let offsets = edge_offsets(g);
    let mut distinct = offsets.clone();
    distinct.sort_by(|&a, &b| offset_cmp(layout, a, b));
    distinct.dedup();
    if distinct.len() <= omega {
        return offsets
            .iter()
            .map(|o| distinct.binary_search_by(|d| offset_cmp(layout, *d, *o)).expect("offset present"))
            .collect();
    }
    let mut out = vec![0; g.nnz()];
    for i in 0..g.rows() {
        let range = g.row_range(i);
        let mut order: Vec<usize> = range.clone().collect();
        order.sort_by(|&a, &b| offset_cmp(layout, offsets[a], offsets[b]));
        for (pos, e) in order.into_iter().enumerate() {
            out[e] = pos % omega;
        }
    }
    out
}

fn random_indices(g: &Graph, omega: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed);
    let mut out = vec![0; g.nnz()];
    let mut cycle: Vec<usize> = (0..omega).collect();
    for i in 0..g.rows() {
        let range = g.row_range(i);
        cycle.shuffle(&mut rng);
        let mut edges: Vec<usize> = range.collect();
        edges.shuffle(&mut rng);
        for (pos, e) in edges.into_iter().enumerate() {
            out[e] = cycle[pos % omega];
        }
    }
    out
}

/// Glorot-style bound for the scheme tensor: `sqrt(6 / (fan_in + fan_out))`
/// with `fan_in = mean row degree × ω` and `fan_out = ω`.
pub fn uniform_bound(g: &Graph, omega: usize) -> f64 {
    let mean_degree = g.nnz() as f64 / g.rows() as f64;
    (6.0 / (mean_degree * omega as f64 + omega as f64)).sqrt()
}

/// Uniform initialization on `[-b, b]`, `b` from [`uniform_bound`].
pub fn init_uniform<F: Real>(g: &Graph, omega: usize, seed: u64) -> Result<SchemeTensor<F>> {
    let mut s = SchemeTensor::<F>::zeros(g.clone(), omega)?;
    let b = uniform_bound(g, omega);
    let mut rng = rng_from(seed);
    for v in s.values.iter_mut() {
        *v = F::from_f64(rng.random_range(-b..=b));
    }
    Ok(s)
}

/// Scheme of a dense `n_out × n_in` layer: complete bipartite support and a
/// distinct one-hot vector per edge, so `Θ[i][j] = W[i * n_in + j]`.
pub fn fully_connected_scheme<F: Real>(n_in: usize, n_out: usize) -> Result<SchemeTensor<F>> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("fully-connected scheme needs positive sizes"));
    }
    let omega = n_in.checked_mul(n_out).filter(|&p| p <= FULLY_CONNECTED_LIMIT).ok_or_else(|| {
        Error::Capacity(format!("{n_in} x {n_out} fully-connected scheme exceeds {FULLY_CONNECTED_LIMIT} entries"))
    })?;
    let g = Graph::from_edges(n_out, n_in, (0..n_out).flat_map(|i| (0..n_in).map(move |j| (i, j))))?;
    let mut s = SchemeTensor::<F>::zeros(g, omega)?;
    for e in 0..omega {
        s.values[e * omega + e] = F::one();
    }
    Ok(s)
}

/// One-dimensional convolution as a scheme: input of length `n`, odd
/// `kernel`, zero padding, output positions `0, stride, 2·stride, ...`.
/// The one-hot index of edge `(i, j)` is the kernel tap `j - i + kernel/2`.
pub fn convolution_scheme_1d<F: Real>(n: usize, kernel: usize, stride: usize) -> Result<SchemeTensor<F>> {
    if n == 0 || stride == 0 {
        return Err(Error::invalid("length and stride must be positive"));
    }
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel must be a positive odd integer, got {kernel}")));
    }
    if kernel > n {
        return Err(Error::invalid(format!("kernel {kernel} exceeds length {n}")));
    }
    let half = kernel / 2;
    let positions: Vec<usize> = (0..n).step_by(stride).collect();
    let mut edges = Vec::new();
    let mut taps = Vec::new();
    for (r, &i) in positions.iter().enumerate() {
        for j in i.saturating_sub(half)..=(i + half).min(n - 1) {
            edges.push((r, j));
            taps.push(j + half - i);
        }
    }
    let g = Graph::from_edges(positions.len(), n, edges)?;
    let mut s = SchemeTensor::<F>::zeros(g, kernel)?;
    // from_edges keeps this order since positions and columns are increasing.
    for (e, k) in taps.into_iter().enumerate() {
        s.values[e * kernel + k] = F::one();
    }
    Ok(s)
}

/// Two-dimensional `kh × kw` convolution (stride 1, zero padding) on a
/// `height × width` grid. Tap index is `(dr + kh/2) * kw + (dc + kw/2)`,
/// matching the kernel layout of [`crate::layer::Conv2dLayer`].
pub fn convolution_scheme_2d<F: Real>(height: usize, width: usize, kh: usize, kw: usize) -> Result<SchemeTensor<F>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("grid dimensions must be positive"));
    }
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel must have odd sides, got {kh}x{kw}")));
    }
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut edges = Vec::new();
    let mut taps = Vec::new();
    for r in 0..height as isize {
        for c in 0..width as isize {
            for dr in -rh..=rh {
                for dc in -rw..=rw {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < height as isize && cc < width as isize {
                        edges.push(((r * width as isize + c) as usize, (rr * width as isize + cc) as usize));
                        taps.push(((dr + rh) * kw as isize + dc + rw) as usize);
                    }
                }
            }
        }
    }
    let omega = kh * kw;
    let g = Graph::from_edges(height * width, height * width, edges)?.with_layout(GridLayout { height, width })?;
    let mut s = SchemeTensor::<F>::zeros(g, omega)?;
    for (e, k) in taps.into_iter().enumerate() {
        s.values[e * omega + k] = F::one();
    }
    Ok(s)
}

/// Whether `S` and `W` do not over-parameterize `Θ`:
/// `l·ω + ω·p·q <= l·p·q`.
pub fn check_capacity(l: u64, omega: u64, p: u64, q: u64) -> bool {
    let (l, omega, p, q) = (l as u128, omega as u128, p as u128, q as u128);
    l * omega + omega * p * q <= l * p * q
}
