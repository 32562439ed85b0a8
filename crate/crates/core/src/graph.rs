//! Sparse adjacency supports.
//!
//! A [`Graph`] only stores *where* the operator may be non-zero; the weights
//! that live on the edges belong to the scheme tensor. Supports may be
//! rectangular (`rows` output nodes, `cols` input nodes) so that strided and
//! fully-connected reductions fit the same type.

use std::io::{BufRead, Write};
use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Pixel geometry of a grid-derived support, kept so that schemes can be laid
/// out by relative grid offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub height: usize,
    pub width: usize,
}

impl GridLayout {
    pub fn coords(&self, node: usize) -> (isize, isize) {
        ((node / self.width) as isize, (node % self.width) as isize)
    }
}

/// Sparse support in compressed-row form. Edges are kept in canonical order:
/// sorted by row, then by column within the row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    layout: Option<GridLayout>,
}

/// Summary statistics printed by `rgl build-graph`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub density: f64,
    pub min_degree: usize,
    pub median_degree: usize,
    pub max_degree: usize,
}

impl Graph {
    /// Builds a support from arbitrary edge pairs. Pairs are sorted into
    /// canonical order; duplicates and out-of-range indices are rejected.
    pub fn from_edges<I>(rows: usize, cols: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        if edges.is_empty() {
            return Err(Error::invalid("graph must have at least one edge"));
        }
        edges.sort_unstable();
        for w in edges.windows(2) {
            if w[0] == w[1] {
                return Err(Error::invalid(format!("duplicate edge {:?}", w[0])));
            }
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= rows || j >= cols) {
            return Err(Error::invalid(format!(
                "edge ({i}, {j}) out of range for a {rows}x{cols} support"
            )));
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(i, _) in &edges {
            row_ptr[i + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = edges.into_iter().map(|(_, j)| j).collect();
        Ok(Graph { rows, cols, row_ptr, col_idx, layout: None })
    }

    /// Builds from per-row sorted, deduplicated neighbor lists.
    fn from_sorted_rows(cols: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in &rows {
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        if col_idx.is_empty() {
            return Err(Error::invalid("graph must have at least one edge"));
        }
        Ok(Graph { rows: rows.len(), cols, row_ptr, col_idx, layout: None })
    }

    pub fn with_layout(mut self, layout: GridLayout) -> Result<Self> {
        let n = layout.height * layout.width;
        if self.rows != n || self.cols != n {
            return Err(Error::invalid(format!(
                "{}x{} layout does not match a {}x{} support",
                layout.height, layout.width, self.rows, self.cols
            )));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    /// Number of nodes of a square support.
    ///
    /// # Panics
    /// If the support is rectangular.
    pub fn n(&self) -> usize {
        assert!(self.is_square(), "n() on a rectangular support");
        self.rows
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Number of support entries `l`.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn layout(&self) -> Option<GridLayout> {
        self.layout
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    /// Neighbors (receptive field) of output node `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Edge index range of row `i`.
    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Row index of every edge, in edge order.
    pub fn edge_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.rows {
            out.extend(std::iter::repeat_n(i, self.degree(i)));
        }
        out
    }

    /// `(row, col)` pairs in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    /// Edge index of `(i, j)` if present.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.rows {
            return None;
        }
        self.row(i).binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edge_index(i, j).is_some()
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.edges().all(|(i, j)| self.contains(j, i))
    }

    /// Fraction of the `rows * cols` possible entries that are present.
    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.rows as f64 * self.cols as f64)
    }

    /// Keeps only the listed output rows, in the given order. Used for
    /// strided reductions.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Graph> {
        let mut rows = Vec::with_capacity(keep.len());
        for &i in keep {
            if i >= self.rows {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            rows.push(self.row(i).to_vec());
        }
        Graph::from_sorted_rows(self.cols, rows)
    }

    pub fn stats(&self) -> GraphStats {
        let mut degrees: Vec<usize> = (0..self.rows).map(|i| self.degree(i)).collect();
        degrees.sort_unstable();
        GraphStats {
            rows: self.rows,
            cols: self.cols,
            nnz: self.nnz(),
            density: self.density(),
            min_degree: degrees[0],
            median_degree: degrees[degrees.len() / 2],
            max_degree: degrees[degrees.len() - 1],
        }
    }

    /// Writes the line-based text format:
    ///
    /// ```text
    /// rgl-graph 1
    /// <rows> <cols> <nnz> [<height> <width>]
    /// <i> <j>            (nnz lines, canonical order)
    /// ```
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rgl-graph 1")?;
        match self.layout {
            Some(l) => writeln!(w, "{} {} {} {} {}", self.rows, self.cols, self.nnz(), l.height, l.width)?,
            None => writeln!(w, "{} {} {}", self.rows, self.cols, self.nnz())?,
        }
        for (i, j) in self.edges() {
            writeln!(w, "{i} {j}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Graph> {
        let bad = |m: String| Error::GraphFormat(m);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| bad("unexpected end of file".into()))?.map_err(Error::from)
        };
        let header = next()?;
        if header.trim() != "rgl-graph 1" {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let parse_all = |line: &str| -> Result<Vec<usize>> {
            line.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| bad(format!("{t:?}: {e}"))))
                .collect()
        };
        let dims = parse_all(&next()?)?;
        let (rows, cols, nnz, layout) = match *dims.as_slice() {
            [r, c, l] => (r, c, l, None),
            [r, c, l, h, w] => (r, c, l, Some(GridLayout { height: h, width: w })),
            _ => return Err(bad("size line must hold 3 or 5 integers".into())),
        };
        let mut edges = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            match parse_all(&next()?)?.as_slice() {
                &[i, j] => edges.push((i, j)),
                _ => return Err(bad("edge line must hold 2 integers".into())),
            }
        }
        let g = Graph::from_edges(rows, cols, edges)?;
        match layout {
            Some(l) => g.with_layout(l),
            None => Ok(g),
        }
    }
}

/// Grid graph over `height × width` pixels (row-major node order). Every
/// pixel is connected to itself and its 4-neighborhood, clipped at borders.
pub fn build_grid_graph(height: usize, width: usize) -> Result<Graph> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("grid dimensions must be positive, got {height}x{width}")));
    }
    let n = height * width;
    let mut rows = Vec::with_capacity(n);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let mut nb = vec![i];
            if r > 0 {
                nb.push(i - width);
            }
            if r + 1 < height {
                nb.push(i + width);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < width {
                nb.push(i + 1);
            }
            nb.sort_unstable();
            rows.push(nb);
        }
    }
    Graph::from_sorted_rows(n, rows)?.with_layout(GridLayout { height, width })
}

/// Support of the boolean matrix power `A^k`: `(i, j)` is kept iff a walk of
/// exactly `k` steps leads from `i` to `j`. With self-loops on every node this
/// is the radius-`k` ball. Grid layout is preserved.
pub fn graph_power(g: &Graph, k: usize) -> Result<Graph> {
    if k == 0 {
        return Err(Error::invalid("graph power must be at least 1"));
    }
    if !g.is_square() {
        return Err(Error::invalid("graph power needs a square support"));
    }
    let n = g.n();
    let mut current: Vec<Vec<usize>> = (0..n).map(|i| g.row(i).to_vec()).collect();
    let mut mark = vec![usize::MAX; n];
    for _ in 1..k {
        let mut next = Vec::with_capacity(n);
        for (i, row) in current.iter().enumerate() {
            let mut out = Vec::new();
            for &m in row {
                for &j in g.row(m) {
                    if mark[j] != i {
                        mark[j] = i;
                        out.push(j);
                    }
                }
            }
            out.sort_unstable();
            next.push(out);
        }
        mark.iter_mut().for_each(|m| *m = usize::MAX);
        current = next;
    }
    let mut out = Graph::from_sorted_rows(n, current)?;
    out.layout = g.layout;
    Ok(out)
}

/// Population covariance (`1/N`, mean-subtracted) of the columns of `data`
/// (`N samples × n features`). Accumulated in chunks to bound memory.
pub fn covariance_matrix(data: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let (samples, features) = data.dim();
    if samples < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 samples, got {samples}")));
    }
    let mean = data.map(|&v| v as f64).mean_axis(Axis(0)).expect("non-empty");
    let mut acc = Array2::<f64>::zeros((features, features));
    const CHUNK: usize = 2048;
    let mut start = 0;
    while start < samples {
        let end = (start + CHUNK).min(samples);
        let mut block = data.slice(ndarray::s![start..end, ..]).map(|&v| v as f64);
        block -= &mean;
        acc += &block.t().dot(&block);
        start = end;
    }
    acc /= samples as f64;
    Ok(acc)
}

/// Thresholded covariance support: keeps the entries of largest `|cov|` so
/// that the retained fraction of the `n²` entries is at most `density`. All
/// entries tied with the threshold value are kept, so the final density can
/// slightly overshoot; read it back with [`Graph::density`]. Diagonal entries
/// are always kept and count towards the budget; zero-covariance off-diagonal
/// entries are never kept.
pub fn covariance_graph(data: ArrayView2<'_, f32>, density: f64) -> Result<Graph> {
    check_density(density)?;
    let cov = covariance_matrix(data)?;
    threshold_covariance(&cov, density)
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density must lie in (0, 1], got {density}")));
    }
    Ok(())
}

/// Threshold step of [`covariance_graph`] on a precomputed covariance.
pub fn threshold_covariance(cov: &Array2<f64>, density: f64) -> Result<Graph> {
    check_density(density)?;
    let n = square_dim(cov)?;
    let budget = ((density * (n * n) as f64).floor() as usize).saturating_sub(n);
    let mut off: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let a = cov[[i, j]].abs();
            if i != j && a > 0.0 {
                off.push(a);
            }
        }
    }
    let threshold = if budget == 0 || off.is_empty() {
        f64::INFINITY
    } else {
        off.sort_unstable_by(|a, b| b.total_cmp(a));
        off[budget.min(off.len()) - 1]
    };
    let rows = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let a = cov[[i, j]].abs();
                    i == j || (a > 0.0 && a >= threshold)
                })
                .collect()
        })
        .collect();
    Graph::from_sorted_rows(n, rows)
}

fn square_dim(cov: &Array2<f64>) -> Result<usize> {
    let (a, b) = cov.dim();
    if a != b || a == 0 {
        return Err(Error::invalid(format!("covariance must be square and non-empty, got {a}x{b}")));
    }
    Ok(a)
}

/// k-NN support under the distance `d(i, j) = 1 / |cov(i, j)|` (so the
/// nearest neighbors are the most covariant features), with `d(i, i) = 0`.
/// Every row keeps itself plus its `k - 1` nearest other nodes, ties broken
/// by lower index; the directed lists are then symmetrized by union.
pub fn knn_inverse_covariance_graph(data: ArrayView2<'_, f32>, k: usize) -> Result<Graph> {
    let (_, features) = data.dim();
    if k == 0 || k > features {
        return Err(Error::invalid(format!("k must lie in [1, {features}], got {k}")));
    }
    let cov = covariance_matrix(data)?;
    knn_from_covariance(&cov, k)
}

/// Neighbor step of [`knn_inverse_covariance_graph`] on a precomputed
/// covariance.
pub fn knn_from_covariance(cov: &Array2<f64>, k: usize) -> Result<Graph> {
    let n = square_dim(cov)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must lie in [1, {n}], got {k}")));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        // Largest |cov| first == smallest reciprocal distance first.
        order.sort_by(|&a, &b| cov[[i, b]].abs().total_cmp(&cov[[i, a]].abs()).then(a.cmp(&b)));
        rows[i].push(i);
        for &j in order.iter().take(k - 1) {
            rows[i].push(j);
            rows[j].push(i);
        }
    }
    for r in rows.iter_mut() {
        r.sort_unstable();
        r.dedup();
    }
    Graph::from_sorted_rows(n, rows)
}
