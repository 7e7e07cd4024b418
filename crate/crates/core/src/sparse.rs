//! Sparse symmetric-normalized adjacency `D̃^{-1/2}(A+I)D̃^{-1/2}`.

use ndarray::Array2;

/// Row-compressed normalized adjacency with self-loops.
///
/// Neighbour lists are stored in ascending column order so that a product
/// with a dense matrix always reduces in the same sequence, whether the
/// operator covers one graph or a block-diagonal batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdj {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormAdj {
    /// Builds the operator from an undirected edge list without self-loops.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(u, v) in edges {
            nbrs[u].push(v);
            nbrs[v].push(u);
        }
        for list in &mut nbrs {
            list.sort_unstable();
            list.dedup();
        }
        let deg: Vec<f64> = nbrs.iter().map(|l| l.len() as f64).collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, list) in nbrs.iter().enumerate() {
            for &j in list {
                cols.push(j);
                vals.push(1.0 / (deg[i] * deg[j]).sqrt());
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `self · x`
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "normalized adjacency row mismatch");
        let d = x.ncols();
        let mut out = Array2::zeros((self.n, d));
        for i in 0..self.n {
            let mut row = out.row_mut(i);
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let w = self.vals[p];
                row.scaled_add(w, &x.row(self.cols[p]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[[i, self.cols[p]]] = self.vals[p];
            }
        }
        out
    }
}
