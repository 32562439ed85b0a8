//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! "RGLCKPT\0"  version:u32  dtype:u8 (4 or 8)
//! metadata: len + UTF-8 bytes
//! dropout: f64
//! input tag:u8 (0 receptive, 1 conv, 2 dense) + layer body
//! dense count + dense layer bodies
//! ```
//!
//! Floats are stored by bit pattern, so a round trip is exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::{Graph, GridLayout};
use crate::layer::{Activation, Contraction, Conv2dLayer, DenseLayer, ReceptiveGraphLayer, WeightKernel};
use crate::model::{Classifier, InputLayer};
use crate::real::Real;
use crate::scheme::SchemeTensor;

pub const MAGIC: &[u8; 8] = b"RGLCKPT\0";
pub const VERSION: u32 = 1;

/// A model plus free-form metadata (the CLI stores the resolved config).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub model: Classifier<F>,
    pub metadata: String,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(model: Classifier<F>, metadata: impl Into<String>) -> Self {
        Checkpoint { model, metadata: metadata.into() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { out: Vec::new() };
        w.out.extend_from_slice(MAGIC);
        w.out.extend_from_slice(&VERSION.to_le_bytes());
        w.out.push(F::BYTES as u8);
        w.bytes(self.metadata.as_bytes());
        w.out.extend_from_slice(&self.model.dropout.to_bits().to_le_bytes());
        match &self.model.input {
            InputLayer::Receptive(l) => {
                w.out.push(0);
                w.receptive(l);
            }
            InputLayer::Conv(l) => {
                w.out.push(1);
                for v in [l.height, l.width, l.kh, l.kw] {
                    w.u(v);
                }
                w.kernel(&l.kernel);
                w.floats(&l.bias);
                w.out.push(l.activation.tag());
            }
            InputLayer::Dense(l) => {
                w.out.push(2);
                w.dense(l);
            }
        }
        w.u(self.model.dense.len());
        for d in &self.model.dense {
            w.dense(d);
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.take(1, "dtype")?[0] as usize;
        if dtype != F::BYTES {
            return Err(Error::Checkpoint(format!("stored {}-byte floats, loading as {}-byte", dtype, F::BYTES)));
        }
        let metadata = String::from_utf8(r.bytes("metadata")?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let dropout = f64::from_bits(r.u64("dropout")?);
        let input = match r.take(1, "input tag")?[0] {
            0 => InputLayer::Receptive(r.receptive()?),
            1 => {
                let (h, w, kh, kw) = (r.u("height")?, r.u("width")?, r.u("kh")?, r.u("kw")?);
                let kernel = r.kernel()?;
                let bias = r.floats("conv bias")?;
                let act = r.activation()?;
                InputLayer::Conv(Conv2dLayer::new(h, w, kh, kw, kernel, bias, act)?)
            }
            2 => InputLayer::Dense(r.dense()?),
            t => return Err(Error::Checkpoint(format!("unknown input layer tag {t}"))),
        };
        let count = r.u("dense count")?;
        let dense = (0..count).map(|_| r.dense()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model: Classifier::new(input, dense, dropout)?, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u(&mut self, v: usize) {
        self.out.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u(b.len());
        self.out.extend_from_slice(b);
    }

    fn floats<F: Real>(&mut self, v: &[F]) {
        self.u(v.len());
        v.iter().for_each(|x| x.write_le(&mut self.out));
    }

    fn kernel<F: Real>(&mut self, k: &WeightKernel<F>) {
        for v in [k.omega(), k.p(), k.q()] {
            self.u(v);
        }
        self.floats(k.values());
    }

    fn dense<F: Real>(&mut self, d: &DenseLayer<F>) {
        self.u(d.inputs());
        self.u(d.outputs());
        self.floats(&d.weights.iter().copied().collect::<Vec<_>>());
        self.floats(&d.bias.to_vec());
        self.out.push(d.activation.tag());
    }

    fn receptive<F: Real>(&mut self, l: &ReceptiveGraphLayer<F>) {
        let g = l.scheme.graph();
        self.u(g.rows());
        self.u(g.cols());
        match g.layout() {
            Some(GridLayout { height, width }) => {
                self.out.push(1);
                self.u(height);
                self.u(width);
            }
            None => self.out.push(0),
        }
        self.u(g.nnz());
        g.row_ptr().iter().for_each(|&v| self.u(v));
        g.col_indices().iter().for_each(|&v| self.u(v));
        self.u(l.scheme.omega());
        self.out.push(l.scheme.frozen as u8);
        self.floats(l.scheme.values());
        self.kernel(&l.kernel);
        self.floats(&l.bias);
        self.out.push(l.activation.tag());
        match l.contraction {
            Contraction::Materialized => self.out.push(0),
            Contraction::Fused => self.out.push(1),
            Contraction::Auto { budget } => {
                self.out.push(2);
                self.u(budget);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {field}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn u(&mut self, field: &str) -> Result<usize> {
        usize::try_from(self.u64(field)?).map_err(|_| Error::Checkpoint(format!("{field} overflows usize")))
    }

    fn bytes(&mut self, field: &str) -> Result<&'a [u8]> {
        let n = self.u(field)?;
        self.take(n, field)
    }

    fn floats<F: Real>(&mut self, field: &str) -> Result<Vec<F>> {
        let n = self.u(field)?;
        let raw = self.take(n.saturating_mul(F::BYTES), field)?;
        Ok(raw.chunks_exact(F::BYTES).map(F::read_le).collect())
    }

    fn activation(&mut self) -> Result<Activation> {
        let tag = self.take(1, "activation")?[0];
        Activation::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))
    }

    fn kernel<F: Real>(&mut self) -> Result<WeightKernel<F>> {
        let (omega, p, q) = (self.u("omega")?, self.u("p")?, self.u("q")?);
        WeightKernel::new(omega, p, q, self.floats("kernel")?)
    }

    fn dense<F: Real>(&mut self) -> Result<DenseLayer<F>> {
        let (inputs, outputs) = (self.u("dense inputs")?, self.u("dense outputs")?);
        let weights = Array2::from_shape_vec((inputs, outputs), self.floats("dense weights")?)
            .map_err(|_| Error::Checkpoint("dense weight count does not match its shape".into()))?;
        let bias = Array1::from_vec(self.floats("dense bias")?);
        if bias.len() != outputs {
            return Err(Error::Checkpoint("dense bias length does not match outputs".into()));
        }
        Ok(DenseLayer { weights, bias, activation: self.activation()? })
    }

    fn receptive<F: Real>(&mut self) -> Result<ReceptiveGraphLayer<F>> {
        let (rows, cols) = (self.u("graph rows")?, self.u("graph cols")?);
        let layout = match self.take(1, "layout flag")?[0] {
            0 => None,
            _ => Some(GridLayout { height: self.u("layout height")?, width: self.u("layout width")? }),
        };
        let nnz = self.u("graph nnz")?;
        let row_ptr = (0..=rows).map(|_| self.u("row_ptr")).collect::<Result<Vec<_>>>()?;
        let col_idx = (0..nnz).map(|_| self.u("col_idx")).collect::<Result<Vec<_>>>()?;
        if row_ptr.first() != Some(&0) || row_ptr.last() != Some(&nnz) || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Checkpoint("inconsistent row pointers".into()));
        }
        let edges = (0..rows).flat_map(|i| col_idx[row_ptr[i]..row_ptr[i + 1]].iter().map(move |&j| (i, j)));
        let mut graph = Graph::from_edges(rows, cols, edges)?;
        if let Some(layout) = layout {
            graph = graph.with_layout(layout)?;
        }
        let omega = self.u("omega")?;
        let frozen = self.take(1, "frozen")?[0] != 0;
        let mut scheme = SchemeTensor::from_values(graph, omega, self.floats("scheme")?)?;
        scheme.frozen = frozen;
        let kernel = self.kernel()?;
        let bias = self.floats("receptive bias")?;
        let activation = self.activation()?;
        let contraction = match self.take(1, "contraction")?[0] {
            0 => Contraction::Materialized,
            1 => Contraction::Fused,
            2 => Contraction::Auto { budget: self.u("budget")? },
            t => return Err(Error::Checkpoint(format!("unknown contraction tag {t}"))),
        };
        Ok(ReceptiveGraphLayer::new(scheme, kernel, bias, activation)?.with_contraction(contraction))
    }
}
