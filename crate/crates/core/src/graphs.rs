//! Sparse adjacency structures: the item-attribute graph and the three
//! item-item transition graphs, plus row normalization.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::{Catalog, DomainId, UserSequence};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({row}, {col}) out of bounds for {rows}x{cols} graph")]
    IndexOutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge ({row}, {col}) has non-finite weight")]
    NonFiniteWeight { row: usize, col: usize },
    #[error("edge ({row}, {col}) has negative weight {weight}")]
    NegativeWeight { row: usize, col: usize, weight: f64 },
}

/// Row-compressed sparse matrix with non-negative weights. Column indices
/// within a row are strictly increasing, so (row, col) pairs are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    directed: bool,
}

impl SparseGraph {
    /// Builds from explicit entries; duplicate (row, col) pairs are rejected.
    pub fn from_entries(
        n_rows: usize,
        n_cols: usize,
        entries: &[(usize, usize, f64)],
        directed: bool,
    ) -> Result<Self, GraphError> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(r, c, v) in entries {
            if map.insert((r, c), v).is_some() {
                return Err(GraphError::DuplicateEdge(r, c));
            }
        }
        Self::from_map(n_rows, n_cols, &map, directed)
    }

    fn from_map(
        n_rows: usize,
        n_cols: usize,
        map: &BTreeMap<(usize, usize), f64>,
        directed: bool,
    ) -> Result<Self, GraphError> {
        let mut indptr = vec![0usize; n_rows + 1];
        let mut cols = Vec::with_capacity(map.len());
        let mut vals = Vec::with_capacity(map.len());
        for (&(r, c), &v) in map {
            if r >= n_rows || c >= n_cols {
                return Err(GraphError::IndexOutOfBounds { row: r, col: c, rows: n_rows, cols: n_cols });
            }
            if !v.is_finite() {
                return Err(GraphError::NonFiniteWeight { row: r, col: c });
            }
            indptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseGraph { n_rows, n_cols, indptr, cols, vals, directed })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// (col, weight) pairs of one row, ascending by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.cols[lo..hi].iter().copied().zip(self.vals[lo..hi].iter().copied())
    }

    /// All (row, col, weight) entries in deterministic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// Divides every row by its sum; all-zero rows stay all-zero.
    pub fn row_normalize(&self) -> Result<SparseGraph, GraphError> {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            let lo = self.indptr[r];
            let hi = self.indptr[r + 1];
            let mut sum = 0.0;
            for i in lo..hi {
                let v = self.vals[i];
                if v < 0.0 {
                    return Err(GraphError::NegativeWeight { row: r, col: self.cols[i], weight: v });
                }
                sum += v;
            }
            if sum > 0.0 {
                for i in lo..hi {
                    out.vals[i] = self.vals[i] / sum;
                }
            }
        }
        Ok(out)
    }

    /// Sparse-dense product `self * rhs`.
    pub fn spmm(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.n_cols, rhs.rows(), "spmm shape mismatch");
        let mut out = Mat::zeros(self.n_rows, rhs.cols());
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                let src = rhs.row(c);
                let dst = out.row_mut(r);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Transposed product `self^T * rhs` (used for gradient propagation).
    pub fn spmm_transpose(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.n_rows, rhs.rows(), "spmm_transpose shape mismatch");
        let mut out = Mat::zeros(self.n_cols, rhs.cols());
        for r in 0..self.n_rows {
            let src = rhs.row(r);
            for (c, v) in self.row(r) {
                let dst = out.row_mut(c);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += v * s;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.edges() {
            m.set(r, c, v);
        }
        m
    }
}

/// Accumulating builder: repeated (row, col) insertions add their weights.
pub struct SparseGraphBuilder {
    n_rows: usize,
    n_cols: usize,
    directed: bool,
    entries: BTreeMap<(usize, usize), f64>,
}

impl SparseGraphBuilder {
    pub fn new(n_rows: usize, n_cols: usize, directed: bool) -> Self {
        SparseGraphBuilder { n_rows, n_cols, directed, entries: BTreeMap::new() }
    }

    pub fn add(&mut self, row: usize, col: usize, weight: f64) {
        *self.entries.entry((row, col)).or_insert(0.0) += weight;
    }

    /// Sets the weight to 1 regardless of how many times the edge is seen.
    pub fn add_binary(&mut self, row: usize, col: usize) {
        self.entries.insert((row, col), 1.0);
    }

    pub fn build(self) -> Result<SparseGraph, GraphError> {
        SparseGraph::from_map(self.n_rows, self.n_cols, &self.entries, self.directed)
    }
}

/// The four graphs driving item representation learning.
#[derive(Clone, Debug)]
pub struct GraphBundle {
    /// Bipartite item-attribute graph over `n_items + n_attributes` nodes,
    /// items first; symmetric (both edge directions stored).
    pub attr: SparseGraph,
    /// Directed transitions over the full cross-domain sequences.
    pub full: SparseGraph,
    /// Directed transitions within domain-A subsequences (global ids,
    /// which coincide with local ids for the low range).
    pub domain_a: SparseGraph,
    /// Directed transitions within domain-B subsequences, re-indexed to
    /// local offsets `id - boundary`.
    pub domain_b: SparseGraph,
}

/// Links every item to each of its attributes with unit weight, storing
/// both directions. Attribute node `k` sits at index `n_items + k`.
pub fn build_attribute_graph(catalog: &Catalog) -> Result<SparseGraph, GraphError> {
    let n_items = catalog.n_items();
    let n = n_items + catalog.attribute_vocab().len();
    let mut b = SparseGraphBuilder::new(n, n, false);
    for item in catalog.items() {
        for attr in &item.attributes {
            let a = n_items
                + catalog
                    .attribute_id(attr)
                    .expect("catalog attribute vocabulary must cover item attributes");
            b.add_binary(item.id as usize, a);
            b.add_binary(a, item.id as usize);
        }
    }
    b.build()
}

/// Builds the full, domain-A, and domain-B transition graphs from the
/// given (train-split) sequences. Consecutive pairs accumulate integer
/// weights unless `binary` is set, in which case repeats collapse to 1.
pub fn build_item_item_graphs(
    seqs: &[UserSequence],
    catalog: &Catalog,
    binary: bool,
) -> Result<(SparseGraph, SparseGraph, SparseGraph), GraphError> {
    let n = catalog.n_items();
    let n_a = catalog.boundary();
    let n_b = n - n_a;
    let mut full = SparseGraphBuilder::new(n, n, true);
    let mut dom_a = SparseGraphBuilder::new(n_a, n_a, true);
    let mut dom_b = SparseGraphBuilder::new(n_b, n_b, true);

    let link = |b: &mut SparseGraphBuilder, src: usize, dst: usize| {
        if binary {
            b.add_binary(src, dst);
        } else {
            b.add(src, dst, 1.0);
        }
    };

    for seq in seqs {
        for w in seq.events.windows(2) {
            link(&mut full, w[0] as usize, w[1] as usize);
        }
        let view_a = seq.domain_view(catalog.boundary(), DomainId::A);
        for w in view_a.windows(2) {
            link(&mut dom_a, w[0] as usize, w[1] as usize);
        }
        let view_b = seq.domain_view(catalog.boundary(), DomainId::B);
        for w in view_b.windows(2) {
            link(&mut dom_b, (w[0] as usize) - n_a, (w[1] as usize) - n_a);
        }
    }
    Ok((full.build()?, dom_a.build()?, dom_b.build()?))
}

/// Builds all four graphs from the catalog and train sequences.
pub fn build_bundle(
    seqs: &[UserSequence],
    catalog: &Catalog,
    binary: bool,
) -> Result<GraphBundle, GraphError> {
    let attr = build_attribute_graph(catalog)?;
    let (full, domain_a, domain_b) = build_item_item_graphs(seqs, catalog, binary)?;
    Ok(GraphBundle { attr, full, domain_a, domain_b })
}

impl GraphBundle {
    /// Row-normalized copies of all four graphs, in the same order.
    pub fn normalized(&self) -> Result<GraphBundle, GraphError> {
        Ok(GraphBundle {
            attr: self.attr.row_normalize()?,
            full: self.full.row_normalize()?,
            domain_a: self.domain_a.row_normalize()?,
            domain_b: self.domain_b.row_normalize()?,
        })
    }

    /// Writes one `src<TAB>dst<TAB>weight` edge list per graph.
    pub fn dump(&self, dir: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        for (name, g) in [
            ("attr", &self.attr),
            ("full", &self.full),
            ("domain_a", &self.domain_a),
            ("domain_b", &self.domain_b),
        ] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.tsv")))?);
            for (r, c, v) in g.edges() {
                writeln!(f, "{r}\t{c}\t{v}")?;
            }
        }
        Ok(())
    }
}
