//! Message-passing encoder producing one hidden vector per patch.
//!
//! Each layer is a symmetric-normalized graph convolution without bias:
//! `H' = ReLU(Â · H · W)` with `Â = D̃^{-1/2}(A+I)D̃^{-1/2}`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{GcfxError, Result};
use crate::graph_data::GraphBatch;
use crate::params::{xavier, Bound, ParamId, ParamSet};
use crate::sparse::NormAdj;

/// Per-node hidden vectors; row `v` is `h_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    pub h: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    weights: Vec<ParamId>,
    hidden: usize,
}

pub fn gnn_layer_var(tape: &mut Tape, adj: &Arc<NormAdj>, h: Var, w: Var) -> Var {
    let hw = tape.matmul(h, w);
    let agg = tape.spmm(adj, hw);
    tape.relu(agg)
}

/// One graph convolution on plain matrices.
pub fn gnn_layer(h_prev: &Array2<f64>, adj: &NormAdj, w: &Array2<f64>) -> Result<Array2<f64>> {
    if h_prev.nrows() != adj.size() {
        return Err(GcfxError::shape(format!(
            "{} feature rows for {} nodes",
            h_prev.nrows(),
            adj.size()
        )));
    }
    if h_prev.ncols() != w.nrows() {
        return Err(GcfxError::shape(format!(
            "feature width {} does not match weight rows {}",
            h_prev.ncols(),
            w.nrows()
        )));
    }
    let mut tape = Tape::new();
    let adj = Arc::new(adj.clone());
    let h = tape.leaf(h_prev.clone());
    let w = tape.leaf(w.clone());
    let out = gnn_layer_var(&mut tape, &adj, h, w);
    Ok(tape.value(out).clone())
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        d_in: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(GcfxError::Config("encoder needs at least one layer".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut width = d_in;
        for n in 0..layers {
            weights.push(params.add(format!("encoder.w{n}"), xavier(rng, width, hidden)));
            width = hidden;
        }
        Ok(Self { weights, hidden })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, adj: &Arc<NormAdj>, x: Var) -> Var {
        self.weights.iter().fold(x, |h, &w| {
            let w = bound.var(w);
            gnn_layer_var(tape, adj, h, w)
        })
    }

    /// Encodes a block-diagonal batch; rows follow the batch node offsets.
    pub fn encode(&self, params: &ParamSet, batch: &GraphBatch) -> Result<PatchEmbeddings> {
        let x = batch.features();
        let d_in = params.get(self.weights[0]).nrows();
        if x.ncols() != d_in {
            return Err(GcfxError::shape(format!(
                "batch feature width {} but encoder expects {d_in}",
                x.ncols()
            )));
        }
        let adj = batch.norm_adj();
        let mut h = x;
        for &w in &self.weights {
            h = gnn_layer(&h, &adj, params.get(w))?;
        }
        Ok(PatchEmbeddings { h })
    }
}
