//! Shared helpers for the integration and acceptance suites: a central
//! finite-difference gradient checker, an independently coded dense
//! reference for the two-step graph convolution, and exhaustive enumeration
//! of small conversation topologies.

use derail_core::gcn::RgcnParams;
use derail_core::graph::WeightedGraph;
use derail_core::nn::{Binder, ParamStore};
use derail_core::tape::{Tape, Var};
use ndarray::Array2;

/// Deterministic non-uniform weights so "sum of outputs" losses are not
/// degenerate for normalization-like ops.
pub fn probe_weights(tape: &Tape<f64>, out: Var) -> Var {
    let (r, c) = tape.shape(out);
    let w = tape.leaf(Array2::from_shape_fn((r, c), |(i, j)| {
        0.35 + ((2 * i + 7 * j) as f64 * 0.83).sin()
    }));
    tape.sum_all(tape.mul(out, w))
}

/// Central finite-difference check of every coordinate of every parameter
/// in `store` against the tape gradient of the scalar loss built by `build`.
/// Panics with a description of the worst offender when the relative error
/// reaches `rel_tol`.
pub fn grad_check_store(
    label: &str,
    store: &mut ParamStore<f64>,
    rel_tol: f64,
    build: impl Fn(&Tape<f64>, &Binder<f64>) -> Var,
) {
    let eps = 1e-5;
    let analytic: Vec<(String, Array2<f64>)> = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let loss = build(&tape, &binder);
        assert_eq!(tape.shape(loss), (1, 1), "{label}: loss must be scalar");
        let grads = tape.backward(loss);
        let collected = binder.collect(&grads);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        collected
            .into_iter()
            .map(|(idx, g)| (names[idx].clone(), g))
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let loss = build(&tape, &binder);
        tape.value(loss)[(0, 0)]
    };

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let shape = store.get(name).dim();
        let analytic_grad = analytic
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Array2::zeros(shape));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let base = store.get(name)[(r, c)];
                let mut shifted = store.get(name).clone();
                shifted[(r, c)] = base + eps;
                store.set(name, shifted.clone());
                let plus = eval(store);
                shifted[(r, c)] = base - eps;
                store.set(name, shifted.clone());
                let minus = eval(store);
                shifted[(r, c)] = base;
                store.set(name, shifted);

                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic_grad[(r, c)];
                if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                    continue;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                assert!(
                    rel < rel_tol,
                    "{label}: {name}[{r},{c}] analytic {a} vs numeric {numeric} (rel {rel:.2e})"
                );
            }
        }
    }
}

/// Independently coded dense formulation of the two-step transform:
///
///   H   = relu( sum_r A_r X W_r / c_r + diag(alpha_ii) X W_0 )
///   out = relu( A H W + diag(alpha_ii) H W_0' )
///
/// where `A_r[(i, j)] = alpha_ij` for an edge j->i in bucket r and
/// `A[(i, j)] = 1` for any edge j->i.
pub fn dense_rgcn_reference(
    weighted: &WeightedGraph<f64>,
    x: &Array2<f64>,
    params: &RgcnParams<f64>,
) -> Array2<f64> {
    let n = weighted.topology.vertex_count;
    let buckets = params.dims().buckets;
    let store = params.store();
    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();

    let mut adjacency_by_bucket = vec![Array2::<f64>::zeros((n, n)); buckets];
    let mut adjacency = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for (k, &(j, bucket)) in weighted.topology.in_neighbors(i).iter().enumerate() {
            adjacency_by_bucket[bucket][(i, j)] += weighted.in_weights[i][k];
            adjacency[(i, j)] = 1.0;
        }
    }
    let self_diag = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            weighted.self_weight[i]
        } else {
            0.0
        }
    });

    let c_raw = store.get("rgcn.c_raw");
    let mut h = self_diag.dot(x).dot(store.get("rgcn.w_self1"));
    for (b, a_r) in adjacency_by_bucket.iter().enumerate() {
        let c = softplus(c_raw[(0, b)]);
        let term = a_r.dot(x).dot(store.get(&format!("rgcn.w_rel{b}"))) / c;
        h = h + term;
    }
    h.mapv_inplace(|v| v.max(0.0));

    let mut out =
        adjacency.dot(&h).dot(store.get("rgcn.w_neigh2")) + self_diag.dot(&h).dot(store.get("rgcn.w_self2"));
    out.mapv_inplace(|v| v.max(0.0));
    out
}

/// All set partitions of `n` elements as restricted-growth strings: the
/// speaker assignment of each vertex, with speakers numbered by first
/// appearance.
pub fn speaker_partitions(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, max_used: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for next in 0..=max_used + 1 {
            prefix.push(next);
            extend(prefix, max_used.max(next), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut prefix = vec![0];
    extend(&mut prefix, 0, n, &mut out);
    out
}

/// All parent assignments for an `n`-turn conversation: each turn after the
/// first replies to some strictly earlier turn.
pub fn parent_assignments(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        let i = prefix.len() + 1;
        if i == n {
            out.push(prefix.clone());
            return;
        }
        for parent in 0..i {
            prefix.push(parent);
            extend(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n <= 1 {
        out.push(vec![]);
        return out;
    }
    let mut prefix = Vec::new();
    extend(&mut prefix, n, &mut out);
    out
}

/// Turns realizing one (parents, speakers) topology.
pub fn turns_for_topology(parents: &[usize], speakers: &[usize]) -> Vec<derail_core::corpus::Turn> {
    let n = speakers.len();
    (0..n)
        .map(|i| derail_core::corpus::Turn {
            turn_id: format!("t{i}"),
            text: "words and words".into(),
            user_id: format!("user{}", speakers[i]),
            score: None,
            parent_id: (i > 0).then(|| format!("t{}", parents[i - 1])),
        })
        .collect()
}
