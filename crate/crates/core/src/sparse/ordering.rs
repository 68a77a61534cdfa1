//! Approximate minimum degree ordering on the quotient graph.

use std::collections::BTreeSet;

use super::cholesky::SymbolicCholesky;
use super::{Permutation, SparseSymMatrix};

/// Structural nonzeros of `L` (diagonal included) when `A` is factorized
/// under `perm`.
pub fn symbolic_fill(a: &SparseSymMatrix, perm: &Permutation) -> usize {
    SymbolicCholesky::analyze(a, perm)
        .expect("permutation length matches the matrix")
        .nnz_l()
}

/// Fill-reducing ordering. Runs approximate minimum degree and keeps it only
/// when it does not produce more fill than the natural order.
pub fn amd_order(a: &SparseSymMatrix) -> Permutation {
    let amd = approximate_minimum_degree(a);
    let natural = Permutation::identity(a.dim());
    if symbolic_fill(a, &amd) < symbolic_fill(a, &natural) {
        amd
    } else {
        natural
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Node {
    Variable,
    Element,
    Absorbed,
}

/// Approximate minimum degree elimination order.
///
/// Eliminated variables become elements of the quotient graph; a variable's
/// degree is bounded by `|A_i| + |L_p \ i| + Σ_e |L_e \ L_p|` as in AMD.
/// Elements whose variable sets are swallowed by the newest element are
/// absorbed. Ties go to the variable with the smaller original degree, then
/// the smaller index.
pub fn approximate_minimum_degree(a: &SparseSymMatrix) -> Permutation {
    let n = a.dim();
    let mut adj_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in a.column(j) {
            if i != j {
                adj_vars[i].push(j);
                adj_vars[j].push(i);
            }
        }
    }
    for list in adj_vars.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let orig_degree: Vec<usize> = adj_vars.iter().map(Vec::len).collect();
    let mut adj_elems: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut elem_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut kind = vec![Node::Variable; n];
    let mut degree = orig_degree.clone();
    let mut queue: BTreeSet<(usize, usize, usize)> = (0..n).map(|i| (degree[i], orig_degree[i], i)).collect();

    // Stamped scratch arrays.
    let mut mark = vec![0usize; n];
    let mut stamp = 0usize;
    let mut w = vec![0usize; n];
    let mut w_stamp = vec![0usize; n];

    let mut order = Vec::with_capacity(n);
    while let Some((_, _, p)) = queue.pop_first() {
        order.push(p);
        let remaining = n - order.len();

        // L_p = (A_p ∪ ⋃_{e ∈ E_p} L_e) \ {p}
        stamp += 1;
        mark[p] = stamp;
        let mut lp = Vec::new();
        for &j in &adj_vars[p] {
            if kind[j] == Node::Variable && mark[j] != stamp {
                mark[j] = stamp;
                lp.push(j);
            }
        }
        for &e in &adj_elems[p] {
            if kind[e] != Node::Element {
                continue;
            }
            for &j in &elem_vars[e] {
                if kind[j] == Node::Variable && mark[j] != stamp {
                    mark[j] = stamp;
                    lp.push(j);
                }
            }
            kind[e] = Node::Absorbed;
            elem_vars[e] = Vec::new();
        }
        kind[p] = Node::Element;
        adj_vars[p] = Vec::new();
        adj_elems[p] = Vec::new();
        let in_lp = stamp;

        for &i in &lp {
            queue.remove(&(degree[i], orig_degree[i], i));
        }

        // w[e] = |L_e \ L_p| for every live element touching L_p.
        stamp += 1;
        let w_mark = stamp;
        for &i in &lp {
            for &e in &adj_elems[i] {
                if kind[e] != Node::Element {
                    continue;
                }
                if w_stamp[e] != w_mark {
                    w_stamp[e] = w_mark;
                    w[e] = elem_vars[e].len();
                }
                w[e] -= 1;
            }
        }

        let lp_len = lp.len();
        for &i in &lp {
            // Prune elements: absorbed ones and those contained in L_p.
            let elems = std::mem::take(&mut adj_elems[i]);
            let mut kept = Vec::with_capacity(elems.len() + 1);
            let mut external = 0usize;
            for e in elems {
                if kind[e] != Node::Element {
                    continue;
                }
                if w_stamp[e] == w_mark && w[e] == 0 {
                    kind[e] = Node::Absorbed;
                    elem_vars[e] = Vec::new();
                    continue;
                }
                external += w[e];
                kept.push(e);
            }
            kept.push(p);
            adj_elems[i] = kept;

            // Variables already covered by element p drop out of A_i.
            adj_vars[i].retain(|&j| kind[j] == Node::Variable && mark[j] != in_lp);
            let approx = adj_vars[i].len() + (lp_len - 1) + external;
            let bound = degree[i] + lp_len - 1;
            degree[i] = approx.min(bound).min(remaining.saturating_sub(1));
        }
        elem_vars[p] = lp;
        for &i in &elem_vars[p] {
            queue.insert((degree[i], orig_degree[i], i));
        }
    }
    Permutation::new(order).expect("elimination visits every vertex once")
}
