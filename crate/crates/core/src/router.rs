//! Linear gate, Top-k slot selection and slot-utilization statistics.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{softmax_rows, DenseMatrix};
use crate::scalar::Scalar;

/// Gate weight `W_g`, one row per slot: `K × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub weight: DenseMatrix<T>,
}

impl<T: Scalar> GateParams<T> {
    pub fn new(weight: DenseMatrix<T>) -> Result<Self> {
        if weight.rows() < 2 {
            return Err(Error::InvalidConfig(format!(
                "gate needs at least 2 slots, got {}",
                weight.rows()
            )));
        }
        if weight.cols() < 1 {
            return Err(Error::InvalidConfig("gate feature dim must be >= 1".into()));
        }
        if !weight.is_finite() {
            return Err(Error::InvalidInput("gate weight not finite".into()));
        }
        Ok(Self { weight })
    }

    pub fn slots(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Per-patch selected slots and their truncated (un-renormalized) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTable<T> {
    n: usize,
    k: usize,
    top_k: usize,
    slots: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> RoutingTable<T> {
    /// Builds a table from explicit rows of `(slot, weight)` picks.
    pub fn from_rows(k: usize, rows: &[Vec<(usize, T)>]) -> Result<Self> {
        let top_k = rows.first().map_or(0, Vec::len);
        let mut slots = Vec::with_capacity(rows.len() * top_k);
        let mut weights = Vec::with_capacity(rows.len() * top_k);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != top_k {
                return Err(shape_err("RoutingTable::from_rows", top_k, row.len()));
            }
            for (t, &(s, w)) in row.iter().enumerate() {
                if s >= k {
                    return Err(Error::InvalidInput(format!("patch {j}: slot {s} >= K={k}")));
                }
                if row[..t].iter().any(|&(prev, _)| prev == s) {
                    return Err(Error::InvalidInput(format!("patch {j}: slot {s} picked twice")));
                }
                if !(w >= T::zero() && w <= T::one()) {
                    return Err(Error::InvalidInput(format!("patch {j}: weight {w} outside [0, 1]")));
                }
                slots.push(s);
                weights.push(w);
            }
        }
        Ok(Self {
            n: rows.len(),
            k,
            top_k,
            slots,
            weights,
        })
    }

    pub fn patches(&self) -> usize {
        self.n
    }

    pub fn slot_count(&self) -> usize {
        self.k
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Selected slots for patch `j`, highest probability first.
    pub fn slots_of(&self, j: usize) -> &[usize] {
        &self.slots[j * self.top_k..(j + 1) * self.top_k]
    }

    pub fn weights_of(&self, j: usize) -> &[T] {
        &self.weights[j * self.top_k..(j + 1) * self.top_k]
    }

    /// Iterates `(patch, slot, weight)` over every routed assignment.
    pub fn assignments(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.slots
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(move |(i, (&s, &w))| (i / self.top_k, s, w))
    }

    /// Dense `N × K` truncated weight matrix `P̃`.
    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.n, self.k);
        for (j, s, w) in self.assignments() {
            out[(j, s)] = w;
        }
        out
    }

    /// Rows in the given patch order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(idx.len() * self.top_k);
        let mut weights = Vec::with_capacity(idx.len() * self.top_k);
        for &j in idx {
            slots.extend_from_slice(self.slots_of(j));
            weights.extend_from_slice(self.weights_of(j));
        }
        Self {
            n: idx.len(),
            k: self.k,
            top_k: self.top_k,
            slots,
            weights,
        }
    }

    /// Patches routed to each slot.
    pub fn slot_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &s in &self.slots {
            counts[s] += 1;
        }
        counts
    }
}

/// Mean gate probability `P_k` and load fraction `f_k` per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats<T> {
    pub mean_prob: Vec<T>,
    pub load_fraction: Vec<T>,
    pub patches: usize,
    pub top_k: usize,
}

impl<T: Scalar> RoutingStats<T> {
    pub fn slots(&self) -> usize {
        self.mean_prob.len()
    }

    /// Largest `f_k`, the collapse indicator.
    pub fn max_load(&self) -> T {
        self.load_fraction.iter().copied().fold(T::zero(), T::max)
    }
}

/// `logits = X · Wᵀ`, `probs = softmax(logits)` row-wise.
pub fn gate_forward<T: Scalar>(x: &DenseMatrix<T>, gate: &GateParams<T>) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    if x.cols() != gate.dim() {
        return Err(shape_err("gate_forward", gate.dim(), x.cols()));
    }
    let logits = x.matmul_transposed(&gate.weight)?;
    let probs = softmax_rows(&logits)?;
    Ok((logits, probs))
}

/// Keeps the `top_k` largest probabilities of each row. Ties go to the
/// smaller slot index. Selected probabilities are kept as-is.
pub fn top_k_select<T: Scalar>(probs: &DenseMatrix<T>, top_k: usize) -> Result<RoutingTable<T>> {
    let k = probs.cols();
    if top_k == 0 || top_k > k {
        return Err(Error::InvalidConfig(format!("top_k must be in 1..={k}, got {top_k}")));
    }
    let n = probs.rows();
    let mut slots = Vec::with_capacity(n * top_k);
    let mut weights = Vec::with_capacity(n * top_k);
    for j in 0..n {
        let row = probs.row(j);
        let start = slots.len();
        for _ in 0..top_k {
            let mut best: Option<usize> = None;
            for (s, &p) in row.iter().enumerate() {
                if slots[start..].contains(&s) {
                    continue;
                }
                // strict comparison keeps the lower index on ties
                if best.is_none_or(|b| p > row[b]) {
                    best = Some(s);
                }
            }
            let s = best.expect("top_k <= K leaves a candidate");
            slots.push(s);
            weights.push(row[s]);
        }
    }
    Ok(RoutingTable {
        n,
        k,
        top_k,
        slots,
        weights,
    })
}

/// Statistics over one routed item.
pub fn routing_stats<T: Scalar>(probs: &DenseMatrix<T>, table: &RoutingTable<T>) -> Result<RoutingStats<T>> {
    pooled_routing_stats(&[(probs, table)])
}

/// Statistics pooled over all patches of several items:
/// `P_k = mean_j probs_jk`, `f_k = #{j : k ∈ TopK(j)} / (N · top_k)`.
pub fn pooled_routing_stats<T: Scalar>(items: &[(&DenseMatrix<T>, &RoutingTable<T>)]) -> Result<RoutingStats<T>> {
    let (first_p, first_t) = items
        .first()
        .ok_or_else(|| Error::InvalidInput("routing stats over zero items".into()))?;
    let k = first_p.cols();
    let top_k = first_t.top_k();
    let mut prob_sum = vec![T::zero(); k];
    let mut counts = vec![0usize; k];
    let mut n = 0;
    for (probs, table) in items {
        if probs.cols() != k || table.slot_count() != k || table.patches() != probs.rows() {
            return Err(shape_err(
                "routing_stats",
                format!("{}x{k} probs with matching table", table.patches()),
                format!(
                    "{}x{} probs, table {}x{}",
                    probs.rows(),
                    probs.cols(),
                    table.patches(),
                    table.slot_count()
                ),
            ));
        }
        if table.top_k() != top_k {
            return Err(shape_err("routing_stats", top_k, table.top_k()));
        }
        for row in probs.row_iter() {
            for (acc, &p) in prob_sum.iter_mut().zip(row) {
                *acc += p;
            }
        }
        for (c, add) in counts.iter_mut().zip(table.slot_counts()) {
            *c += add;
        }
        n += probs.rows();
    }
    if n == 0 {
        return Err(Error::InvalidInput("routing stats over zero patches".into()));
    }
    let n_t = T::from_usize_lossy(n);
    let denom = T::from_usize_lossy(n * top_k);
    Ok(RoutingStats {
        mean_prob: prob_sum.into_iter().map(|s| s / n_t).collect(),
        load_fraction: counts.into_iter().map(|c| T::from_usize_lossy(c) / denom).collect(),
        patches: n,
        top_k,
    })
}
