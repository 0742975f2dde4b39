//! Two-step relational graph convolution.
//!
//! Step 1 mixes each vertex with its in-neighbors through relation-bucket
//! weight matrices, scaled by attention weight over a learned per-bucket
//! normalization constant, plus a self term weighted by alpha_ii:
//!
//! ```text
//! h_i = ReLU( sum_r sum_{j in N_i^r} (alpha_ij / c_r) x_j W_r  +  alpha_ii x_i W_0 )
//! ```
//!
//! Step 2 re-mixes the step-1 outputs with a relation-agnostic neighbor
//! matrix and its own self matrix; the neighbor sum carries no attention
//! weight, only the self term does:
//!
//! ```text
//! out_i = ReLU( sum_{j in N_i} h_j W  +  alpha_ii h_i W_0' )
//! ```
//!
//! The normalization constants c_r are kept positive through a softplus
//! reparameterization and start at exactly 1.

use crate::error::{Error, Result};
use crate::graph::{ConversationGraph, WeightedGraph};
use crate::nn::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use std::collections::HashMap;

/// Raw value whose softplus is exactly 1: ln(e - 1).
pub const C_RAW_UNIT: f64 = 0.5413248546129181;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RgcnDims {
    pub feature_dim: usize,
    pub buckets: usize,
}

/// Register one channel's convolution parameters under `prefix`.
pub fn register_rgcn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dims: RgcnDims, seed: u64) {
    let d = dims.feature_dim;
    for b in 0..dims.buckets {
        store.insert_init(&format!("{prefix}.w_rel{b}"), d, d, d, seed);
    }
    store.insert_init(&format!("{prefix}.w_self1"), d, d, d, seed);
    store.insert_init(&format!("{prefix}.w_neigh2"), d, d, d, seed);
    store.insert_init(&format!("{prefix}.w_self2"), d, d, d, seed);
    store.insert_const(&format!("{prefix}.c_raw"), 1, dims.buckets, C_RAW_UNIT);
}

/// Step 1 on the tape. `alpha_rows[i]` is the softmax row for vertex i
/// (self first, then in-neighbors in `in_neighbors(i)` order); `x` stacks
/// one feature row per vertex.
pub fn rgcn_step1_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    topo: &ConversationGraph,
    alpha_rows: &[Var],
    x: Var,
) -> Var {
    let t = binder.tape();
    let c_raw = binder.var(&format!("{prefix}.c_raw"));
    let x_self = t.matmul(x, binder.var(&format!("{prefix}.w_self1")));

    // Per-bucket projected features and positive constants, built on demand.
    let mut projected: HashMap<usize, Var> = HashMap::new();
    let mut constants: HashMap<usize, Var> = HashMap::new();

    let rows: Vec<Var> = (0..topo.vertex_count)
        .map(|i| {
            let self_alpha = t.slice_cols(alpha_rows[i], 0..1);
            let mut acc = t.scalar_mul(self_alpha, t.row(x_self, i));
            for (k, &(j, bucket)) in topo.in_neighbors(i).iter().enumerate() {
                let proj = *projected.entry(bucket).or_insert_with(|| {
                    t.matmul(x, binder.var(&format!("{prefix}.w_rel{bucket}")))
                });
                let c = *constants
                    .entry(bucket)
                    .or_insert_with(|| t.softplus(t.slice_cols(c_raw, bucket..bucket + 1)));
                let alpha = t.slice_cols(alpha_rows[i], k + 1..k + 2);
                let coeff = t.div(alpha, c);
                acc = t.add(acc, t.scalar_mul(coeff, t.row(proj, j)));
            }
            t.relu(acc)
        })
        .collect();
    t.concat_rows(&rows)
}

/// Step 2 on the tape: unweighted neighbor mixing plus the attention-scaled
/// self term.
pub fn rgcn_step2_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    topo: &ConversationGraph,
    alpha_rows: &[Var],
    h: Var,
) -> Var {
    let t = binder.tape();
    let h_neigh = t.matmul(h, binder.var(&format!("{prefix}.w_neigh2")));
    let h_self = t.matmul(h, binder.var(&format!("{prefix}.w_self2")));
    let rows: Vec<Var> = (0..topo.vertex_count)
        .map(|i| {
            let self_alpha = t.slice_cols(alpha_rows[i], 0..1);
            let mut acc = t.scalar_mul(self_alpha, t.row(h_self, i));
            for &(j, _) in topo.in_neighbors(i) {
                acc = t.add(acc, t.row(h_neigh, j));
            }
            t.relu(acc)
        })
        .collect();
    t.concat_rows(&rows)
}

/// Both steps composed; this is what each feature channel goes through.
pub fn transform_channel_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    topo: &ConversationGraph,
    alpha_rows: &[Var],
    x: Var,
) -> Var {
    let h = rgcn_step1_vars(binder, prefix, topo, alpha_rows, x);
    rgcn_step2_vars(binder, prefix, topo, alpha_rows, h)
}

// ---------------------------------------------------------------------------
// Standalone parameters + plain-array entry points
// ---------------------------------------------------------------------------

/// Self-contained convolution parameters for direct use outside the training
/// pipeline (which registers the same layout into its shared store).
#[derive(Debug, Clone)]
pub struct RgcnParams<T: Scalar> {
    dims: RgcnDims,
    store: ParamStore<T>,
}

impl<T: Scalar> RgcnParams<T> {
    pub fn new(dims: RgcnDims, seed: u64) -> Self {
        let mut store = ParamStore::new();
        register_rgcn(&mut store, "rgcn", dims, seed);
        RgcnParams { dims, store }
    }

    pub fn dims(&self) -> RgcnDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Set every matrix to identity and every constant to softplus(c)=1;
    /// handy for hand-computed oracles.
    pub fn set_identity(&mut self) {
        let d = self.dims.feature_dim;
        for b in 0..self.dims.buckets {
            self.store.set(&format!("rgcn.w_rel{b}"), Array2::eye(d));
        }
        self.store.set("rgcn.w_self1", Array2::eye(d));
        self.store.set("rgcn.w_neigh2", Array2::eye(d));
        self.store.set("rgcn.w_self2", Array2::eye(d));
        self.store.set(
            "rgcn.c_raw",
            Array2::from_elem((1, self.dims.buckets), T::of(C_RAW_UNIT)),
        );
    }

    pub fn set_all_zero(&mut self) {
        let d = self.dims.feature_dim;
        for b in 0..self.dims.buckets {
            self.store.set(&format!("rgcn.w_rel{b}"), Array2::zeros((d, d)));
        }
        self.store.set("rgcn.w_self1", Array2::zeros((d, d)));
        self.store.set("rgcn.w_neigh2", Array2::zeros((d, d)));
        self.store.set("rgcn.w_self2", Array2::zeros((d, d)));
    }
}

fn check_inputs<T: Scalar>(
    weighted: &WeightedGraph<T>,
    x: &Array2<T>,
    params: &RgcnParams<T>,
) -> Result<()> {
    if x.nrows() != weighted.topology.vertex_count {
        return Err(Error::Dimension(format!(
            "expected {} feature rows, got {}",
            weighted.topology.vertex_count,
            x.nrows()
        )));
    }
    if x.ncols() != params.dims.feature_dim {
        return Err(Error::Dimension(format!(
            "expected feature dim {}, got {}",
            params.dims.feature_dim,
            x.ncols()
        )));
    }
    for e in &weighted.topology.edges {
        if e.relation.bucket >= params.dims.buckets {
            return Err(Error::Dimension(format!(
                "edge bucket {} out of range ({} buckets)",
                e.relation.bucket, params.dims.buckets
            )));
        }
    }
    Ok(())
}

/// Alpha rows as tape leaves, ordered self-first per vertex.
fn alpha_leaves<T: Scalar>(tape: &Tape<T>, weighted: &WeightedGraph<T>) -> Vec<Var> {
    (0..weighted.topology.vertex_count)
        .map(|i| {
            let mut row = vec![weighted.self_weight[i]];
            row.extend(weighted.in_weights[i].iter().copied());
            let n = row.len();
            tape.leaf(Array2::from_shape_vec((1, n), row).expect("row shape"))
        })
        .collect()
}

fn run_plain<T: Scalar>(
    weighted: &WeightedGraph<T>,
    x: &Array2<T>,
    params: &RgcnParams<T>,
    f: impl Fn(&Binder<T>, &ConversationGraph, &[Var], Var) -> Var,
) -> Result<Array2<T>> {
    check_inputs(weighted, x, params)?;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params.store);
    let alphas = alpha_leaves(&tape, weighted);
    let xv = tape.leaf(x.clone());
    let out = f(&binder, &weighted.topology, &alphas, xv);
    Ok(tape.value(out))
}

/// Step-1 transform over plain arrays.
pub fn rgcn_step1<T: Scalar>(
    weighted: &WeightedGraph<T>,
    x: &Array2<T>,
    params: &RgcnParams<T>,
) -> Result<Array2<T>> {
    run_plain(weighted, x, params, |b, topo, alphas, xv| {
        rgcn_step1_vars(b, "rgcn", topo, alphas, xv)
    })
}

/// Step-2 transform over plain arrays (input is the step-1 output).
pub fn rgcn_step2<T: Scalar>(
    weighted: &WeightedGraph<T>,
    h: &Array2<T>,
    params: &RgcnParams<T>,
) -> Result<Array2<T>> {
    run_plain(weighted, h, params, |b, topo, alphas, hv| {
        rgcn_step2_vars(b, "rgcn", topo, alphas, hv)
    })
}

/// Full two-step transform over plain arrays.
pub fn transform_channel<T: Scalar>(
    weighted: &WeightedGraph<T>,
    x: &Array2<T>,
    params: &RgcnParams<T>,
) -> Result<Array2<T>> {
    run_plain(weighted, x, params, |b, topo, alphas, xv| {
        transform_channel_vars(b, "rgcn", topo, alphas, xv)
    })
}
