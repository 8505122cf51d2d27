//! End-to-end forward pass with a cached tape, the hand-derived backward
//! pass through every stage, and a central-difference oracle to certify it.
//!
//! Gradient conventions:
//! - the Top-k mask is piecewise constant, so it carries no gradient; the
//!   selected probabilities do, through the softmax into the gate;
//! - the load fractions `f_k` are counts and carry no gradient;
//! - the pooling quotient rule includes `δ` in the denominator.

use rayon::prelude::*;

use crate::aggregator::{pool_slots, PooledSlots};
use crate::error::{shape_err, Error, Result};
use crate::losses::{task_loss_cross_entropy, total_loss, LossBreakdown, LossConstants};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{axpy, dot, log_sum_exp, softmax_into, DenseMatrix};
use crate::rng::{gaussian_sample, RngState};
use crate::router::{gate_forward, pooled_routing_stats, top_k_select, RoutingStats, RoutingTable};
use crate::scalar::Scalar;

/// Intermediates of one bag's forward pass.
#[derive(Clone, Debug)]
pub struct ItemTape<'a, T> {
    pub x: &'a DenseMatrix<T>,
    pub logits: DenseMatrix<T>,
    pub probs: DenseMatrix<T>,
    pub table: RoutingTable<T>,
    pub raw: DenseMatrix<T>,
    pub weight_sum: Vec<T>,
    /// `K × H` pre-activations of the slot MLP.
    pub mlp_pre: DenseMatrix<T>,
    pub mlp_hidden: DenseMatrix<T>,
    pub tokens: DenseMatrix<T>,
    /// Mean slot token fed to the head.
    pub readout: Vec<T>,
    pub class_logits: Vec<T>,
}

/// Everything `backward` needs, without re-running the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape<'a, T> {
    pub params: &'a ModelParams<T>,
    pub items: Vec<ItemTape<'a, T>>,
    pub labels: Vec<usize>,
    pub top_k: usize,
    pub stats: RoutingStats<T>,
    pub loss: LossBreakdown<T>,
}

impl<T: Scalar> ForwardTape<'_, T> {
    pub fn class_logits(&self) -> DenseMatrix<T> {
        let c = self.params.config.classes;
        let flat: Vec<T> = self.items.iter().flat_map(|t| t.class_logits.iter().copied()).collect();
        DenseMatrix::new(self.items.len(), c, flat).expect("finite class logits")
    }
}

/// Gradient of the total loss for every parameter, shape-congruent with
/// [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub grads: ModelParams<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            grads: params.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.grads.to_flat()
    }

    pub fn gate(&self) -> &DenseMatrix<T> {
        &self.grads.gate.weight
    }

    fn accumulate(&mut self, other: &Self) {
        let src = other.grads.to_flat();
        let mut offset = 0;
        self.grads.for_each_tensor_mut(|t| {
            for (a, &b) in t.iter_mut().zip(&src[offset..]) {
                *a += b;
            }
            offset += t.len();
        });
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

fn item_forward<'a, T: Scalar>(
    params: &ModelParams<T>,
    x: &'a DenseMatrix<T>,
    top_k: usize,
    delta: T,
) -> Result<ItemTape<'a, T>> {
    if x.rows() == 0 {
        return Err(Error::InvalidInput("bag with zero patches".into()));
    }
    let cfg = &params.config;
    let (logits, probs) = gate_forward(x, &params.gate)?;
    let table = top_k_select(&probs, top_k)?;
    let PooledSlots { raw, weight_sum } = pool_slots(x, &table, delta)?;

    let k = cfg.slots;
    let mut mlp_pre = DenseMatrix::zeros(k, cfg.hidden);
    let mut mlp_hidden = DenseMatrix::zeros(k, cfg.hidden);
    let mut tokens = DenseMatrix::zeros(k, cfg.out_dim);
    for s in 0..k {
        let mut out = vec![T::zero(); cfg.out_dim];
        params
            .refiner
            .for_slot(s)
            .forward_row(raw.row(s), mlp_pre.row_mut(s), mlp_hidden.row_mut(s), &mut out);
        if cfg.residual {
            axpy(T::one(), raw.row(s), &mut out);
        }
        tokens.row_mut(s).copy_from_slice(&out);
    }

    let inv_k = T::one() / T::from_usize_lossy(k);
    let mut readout = vec![T::zero(); cfg.out_dim];
    for row in tokens.row_iter() {
        axpy(inv_k, row, &mut readout);
    }
    let mut class_logits = params.head.bias.clone();
    for (d, &z) in readout.iter().enumerate() {
        axpy(z, params.head.weight.row(d), &mut class_logits);
    }
    Ok(ItemTape {
        x,
        logits,
        probs,
        table,
        raw,
        weight_sum,
        mlp_pre,
        mlp_hidden,
        tokens,
        readout,
        class_logits,
    })
}

/// Full pipeline forward pass over a batch of bags, caching intermediates.
/// Routing statistics and the regularizers are pooled over every patch of
/// every bag; the task loss is the mean cross-entropy over bags.
pub fn forward<'a, T: Scalar>(
    params: &'a ModelParams<T>,
    items: &[&'a DenseMatrix<T>],
    labels: &[usize],
    top_k: usize,
    constants: &LossConstants,
) -> Result<ForwardTape<'a, T>> {
    if items.is_empty() {
        return Err(Error::InvalidInput("forward over an empty batch".into()));
    }
    if items.len() != labels.len() {
        return Err(shape_err("forward", format!("{} labels", items.len()), labels.len()));
    }
    let delta = T::c(constants.delta);
    let tapes = items
        .par_iter()
        .map(|x| item_forward(params, x, top_k, delta))
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<_> = tapes.iter().map(|t| (&t.probs, &t.table)).collect();
    let stats = pooled_routing_stats(&pairs)?;
    let class_logits = DenseMatrix::new(
        tapes.len(),
        params.config.classes,
        tapes.iter().flat_map(|t| t.class_logits.iter().copied()).collect(),
    )
    .map_err(|_| Error::NumericalFailure {
        layer: "head",
        detail: "non-finite class logits".into(),
    })?;
    let task = task_loss_cross_entropy(&class_logits, labels)?;
    let logit_refs: Vec<_> = tapes.iter().map(|t| &t.logits).collect();
    let loss = total_loss(task, &stats, &logit_refs, constants)?;
    Ok(ForwardTape {
        params,
        items: tapes,
        labels: labels.to_vec(),
        top_k,
        stats,
        loss,
    })
}

fn ensure_finite<T: Scalar>(layer: &'static str, values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericalFailure {
            layer,
            detail: format!("non-finite gradient at index {i}"),
        }),
    }
}

/// Per-slot derivative of the pooled regularizers with respect to a single
/// patch's gate probability.
fn aux_prob_grad<T: Scalar>(stats: &RoutingStats<T>, constants: &LossConstants) -> Result<Vec<T>> {
    let k = stats.slots();
    if k < 2 {
        return Err(Error::InvalidConfig("entropy loss needs K >= 2".into()));
    }
    let lambda = T::c(constants.lambda);
    let eps = T::c(constants.epsilon);
    let coeff = T::c(constants.entropy_coeff);
    let k_t = T::from_usize_lossy(k);
    let log_k = k_t.ln();
    let inv_n = T::one() / T::from_usize_lossy(stats.patches);
    Ok(stats
        .mean_prob
        .iter()
        .zip(&stats.load_fraction)
        .map(|(&p, &f)| {
            let d_switch = k_t * f;
            let d_ent = ((p + eps).ln() + p / (p + eps)) / log_k;
            lambda * inv_n * (d_switch + coeff * d_ent)
        })
        .collect())
}

fn item_backward<T: Scalar>(
    tape: &ItemTape<'_, T>,
    params: &ModelParams<T>,
    label: usize,
    batch_size: usize,
    aux_grad: &[T],
    z_scale: T,
    delta: T,
) -> Result<GradientSet<T>> {
    let cfg: &ModelConfig = &params.config;
    let (k, d_in, d_out) = (cfg.slots, cfg.dim, cfg.out_dim);
    let mut g = GradientSet::zeros_like(params);

    // head: d loss / d class logits = (softmax − onehot) / B
    let mut d_class = vec![T::zero(); cfg.classes];
    softmax_into(&tape.class_logits, &mut d_class);
    d_class[label] -= T::one();
    let inv_b = T::one() / T::from_usize_lossy(batch_size);
    d_class.iter_mut().for_each(|v| *v *= inv_b);

    let mut d_readout = vec![T::zero(); d_out];
    for (d, dr) in d_readout.iter_mut().enumerate() {
        axpy(tape.readout[d], &d_class, g.grads.head.weight.row_mut(d));
        *dr = dot(params.head.weight.row(d), &d_class);
    }
    axpy(T::one(), &d_class, &mut g.grads.head.bias);
    ensure_finite("head", &d_readout)?;

    // mean over slots, then the slot MLP
    let inv_k = T::one() / T::from_usize_lossy(k);
    let d_token: Vec<T> = d_readout.iter().map(|&v| v * inv_k).collect();
    let mut d_raw = DenseMatrix::zeros(k, d_in);
    let mut d_hidden = vec![T::zero(); cfg.hidden];
    let shared = !cfg.per_slot_mlp;
    for s in 0..k {
        let mlp = params.refiner.for_slot(s);
        let gm = &mut g.grads.refiner.mlps_mut()[if shared { 0 } else { s }];
        let hidden = tape.mlp_hidden.row(s);
        for (h, &act) in hidden.iter().enumerate() {
            axpy(act, &d_token, gm.w2.row_mut(h));
            d_hidden[h] = dot(mlp.w2.row(h), &d_token);
        }
        axpy(T::one(), &d_token, &mut gm.b2);
        let d_pre: Vec<T> = d_hidden
            .iter()
            .zip(tape.mlp_pre.row(s))
            .map(|(&dh, &z)| dh * mlp.activation.derivative(z))
            .collect();
        let raw = tape.raw.row(s);
        let d_raw_row = d_raw.row_mut(s);
        for (d, &c) in raw.iter().enumerate() {
            axpy(c, &d_pre, gm.w1.row_mut(d));
            d_raw_row[d] = dot(mlp.w1.row(d), &d_pre);
        }
        axpy(T::one(), &d_pre, &mut gm.b1);
        if cfg.residual {
            axpy(T::one(), &d_token, d_raw_row);
        }
    }
    ensure_finite("slot_mlp", d_raw.as_slice())?;

    // pooling quotient rule: c = S / (W + δ)
    //   dS = dc / (W + δ),  dW = −(dc · c) / (W + δ)
    let mut d_sum = DenseMatrix::zeros(k, d_in);
    let mut d_mass = vec![T::zero(); k];
    for (s, dm) in d_mass.iter_mut().enumerate() {
        let denom = tape.weight_sum[s] + delta;
        let dc = d_raw.row(s);
        for (o, &v) in d_sum.row_mut(s).iter_mut().zip(dc) {
            *o = v / denom;
        }
        *dm = -dot(dc, tape.raw.row(s)) / denom;
    }

    // d loss / d probs: routed task path plus pooled regularizers
    let n = tape.x.rows();
    let mut d_probs = DenseMatrix::from_fn(n, k, |_, s| aux_grad[s]);
    for (j, s, _) in tape.table.assignments() {
        d_probs[(j, s)] += dot(d_sum.row(s), tape.x.row(j)) + d_mass[s];
    }
    ensure_finite("pooling", d_probs.as_slice())?;

    // softmax and z-loss into the logits, then into the gate weight
    let mut d_logits = vec![T::zero(); k];
    let two = T::c(2.0);
    for j in 0..n {
        let p = tape.probs.row(j);
        let dp = d_probs.row(j);
        let inner = dot(p, dp);
        let lse = log_sum_exp(tape.logits.row(j));
        for s in 0..k {
            d_logits[s] = p[s] * (dp[s] - inner) + z_scale * two * lse * p[s];
        }
        let x = tape.x.row(j);
        for (s, &dl) in d_logits.iter().enumerate() {
            axpy(dl, x, g.grads.gate.weight.row_mut(s));
        }
    }
    ensure_finite("gate", g.grads.gate.weight.as_slice())?;
    Ok(g)
}

/// Reverse pass over a completed forward tape.
pub fn backward<T: Scalar>(tape: &ForwardTape<'_, T>, constants: &LossConstants) -> Result<GradientSet<T>> {
    let params = tape.params;
    let aux = aux_prob_grad(&tape.stats, constants)?;
    let z_scale = T::c(constants.lambda * constants.alpha) / T::from_usize_lossy(tape.stats.patches);
    let delta = T::c(constants.delta);
    let b = tape.items.len();
    let parts = tape
        .items
        .par_iter()
        .zip(&tape.labels)
        .map(|(item, &y)| item_backward(item, params, y, b, &aux, z_scale, delta))
        .collect::<Result<Vec<_>>>()?;
    // reduce in bag order so the sum is independent of thread scheduling
    let mut total = GradientSet::zeros_like(params);
    for part in &parts {
        total.accumulate(part);
    }
    Ok(total)
}

/// Loss and gradients in one call.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    items: &[&DenseMatrix<T>],
    labels: &[usize],
    top_k: usize,
    constants: &LossConstants,
) -> Result<(LossBreakdown<T>, RoutingStats<T>, GradientSet<T>)> {
    let tape = forward(params, items, labels, top_k, constants)?;
    let grads = backward(&tape, constants)?;
    Ok((tape.loss, tape.stats, grads))
}

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` per coordinate.
pub fn finite_difference_grad<T, F>(loss_fn: F, params: &[T], h: T) -> Vec<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T + Sync,
{
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut theta = params.to_vec();
            theta[i] = params[i] + h;
            let up = loss_fn(&theta);
            theta[i] = params[i] - h;
            let down = loss_fn(&theta);
            (up - down) / (h + h)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub passed: bool,
    /// Largest relative error over unflagged coordinates.
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub coordinates: usize,
    /// Coordinates excluded for sitting next to a selection boundary.
    pub flagged: usize,
    /// Worst unflagged coordinates, largest error first.
    pub worst: Vec<Offender>,
}

impl CheckReport {
    pub fn flagged_fraction(&self) -> f64 {
        if self.coordinates == 0 {
            0.0
        } else {
            self.flagged as f64 / self.coordinates as f64
        }
    }
}

/// Compares analytic and numeric gradients coordinate-wise with
/// `|a − n| / max(|a|, |n|, abs_tol)`. Flagged coordinates are counted but
/// not scored.
pub fn grad_check<T: Scalar>(
    analytic: &[T],
    numeric: &[T],
    flagged: &[bool],
    rel_tol: f64,
    abs_tol: f64,
) -> Result<CheckReport> {
    if analytic.len() != numeric.len() || flagged.len() != analytic.len() {
        return Err(shape_err(
            "grad_check",
            analytic.len(),
            format!("{} numeric, {} flags", numeric.len(), flagged.len()),
        ));
    }
    let mut scored: Vec<Offender> = analytic
        .iter()
        .zip(numeric)
        .zip(flagged)
        .enumerate()
        .filter(|(_, (_, &f))| !f)
        .map(|(index, ((&a, &n), _))| {
            let (a, n) = (a.as_f64(), n.as_f64());
            let rel_error = (a - n).abs() / a.abs().max(n.abs()).max(abs_tol);
            Offender {
                index,
                analytic: a,
                numeric: n,
                rel_error,
            }
        })
        .collect();
    scored.sort_by(|x, y| y.rel_error.total_cmp(&x.rel_error).then(x.index.cmp(&y.index)));
    let max_rel_error = scored.first().map_or(0.0, |o| o.rel_error);
    scored.truncate(8);
    Ok(CheckReport {
        passed: max_rel_error <= rel_tol && !max_rel_error.is_nan(),
        max_rel_error,
        rel_tol,
        coordinates: analytic.len(),
        flagged: flagged.iter().filter(|&&f| f).count(),
        worst: scored,
    })
}

/// Gate coordinates whose finite-difference stencil may straddle a Top-k
/// selection boundary.
///
/// Perturbing `W_g[k, d]` moves only logit `k`, so it can reorder patch
/// `j`'s selection only when `k` is one of the two slots around `j`'s
/// boundary (rank `top_k` or `top_k + 1`). Those coordinates are flagged
/// when the probability margin at the boundary is below `10h`.
pub fn boundary_flags<T: Scalar>(tape: &ForwardTape<'_, T>, h: T) -> Vec<bool> {
    let params = tape.params;
    let mut flags = vec![false; params.num_params()];
    let (k, d) = (params.config.slots, params.config.dim);
    if tape.top_k >= k {
        return flags;
    }
    let threshold = T::c(10.0) * h;
    for item in &tape.items {
        for j in 0..item.probs.rows() {
            let row = item.probs.row(j);
            let chosen = item.table.slots_of(j);
            let last = *chosen.last().expect("top_k >= 1");
            let runner_up = (0..k)
                .filter(|s| !chosen.contains(s))
                .fold(None::<usize>, |best, s| match best {
                    Some(b) if row[b] >= row[s] => Some(b),
                    _ => Some(s),
                })
                .expect("top_k < K leaves a runner-up");
            if row[last] - row[runner_up] < threshold {
                for s in [last, runner_up] {
                    for c in 0..d {
                        flags[s * d + c] = true;
                    }
                }
            }
        }
    }
    flags
}

/// Finite-difference step and acceptance tolerances for [`check_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckSettings {
    pub step: f64,
    pub rel_tol: f64,
    /// Floor on the relative-error denominator.
    pub abs_tol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
        }
    }
}

/// Analytic-vs-numeric certification of the full pipeline at `params`.
///
/// Besides the margin rule of [`boundary_flags`], any gate coordinate whose
/// `±h` evaluations actually change a selection is flagged as well.
pub fn check_pipeline<T: Scalar>(
    params: &ModelParams<T>,
    items: &[&DenseMatrix<T>],
    labels: &[usize],
    top_k: usize,
    constants: &LossConstants,
    settings: &CheckSettings,
) -> Result<CheckReport> {
    let h = T::c(settings.step);
    let tape = forward(params, items, labels, top_k, constants)?;
    let analytic = backward(&tape, constants)?.to_flat();
    let mut flags = boundary_flags(&tape, h);
    let base_slots: Vec<Vec<usize>> = tape
        .items
        .iter()
        .map(|t| {
            (0..t.table.patches())
                .flat_map(|j| t.table.slots_of(j).to_vec())
                .collect()
        })
        .collect();

    let theta = params.to_flat();
    let eval = |flat: &[T]| -> Result<(T, bool)> {
        let p = params.with_flat(flat)?;
        let t = forward(&p, items, labels, top_k, constants)?;
        let same = t.items.iter().zip(&base_slots).all(|(it, base)| {
            // the selected set matters, not the rank order within it
            (0..it.table.patches()).all(|j| {
                let chosen = &base[j * top_k..(j + 1) * top_k];
                it.table.slots_of(j).iter().all(|s| chosen.contains(s))
            })
        });
        Ok((t.loss.total, same))
    };
    let gate = params.gate_range();
    let results: Vec<Result<(T, bool)>> = (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = theta.clone();
            probe[i] = theta[i] + h;
            let (up, same_up) = eval(&probe)?;
            probe[i] = theta[i] - h;
            let (down, same_down) = eval(&probe)?;
            let flipped = gate.contains(&i) && !(same_up && same_down);
            Ok(((up - down) / (h + h), flipped))
        })
        .collect();
    let mut numeric = Vec::with_capacity(theta.len());
    for (i, r) in results.into_iter().enumerate() {
        let (v, flipped) = r?;
        numeric.push(v);
        flags[i] |= flipped;
    }
    grad_check(&analytic, &numeric, &flags, settings.rel_tol, settings.abs_tol)
}

/// A seeded random problem instance for gradient certification.
#[derive(Clone, Debug)]
pub struct GradCheckInstance<T> {
    pub params: ModelParams<T>,
    pub bags: Vec<DenseMatrix<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> GradCheckInstance<T> {
    pub fn random(seed: u64, bags: usize, patches: usize, dim: usize, slots: usize, classes: usize) -> Result<Self> {
        let root = RngState::new(seed);
        let cfg = ModelConfig::new(dim, slots, classes);
        let mut params = ModelParams::init(&cfg, &mut root.split(0))?;
        // non-zero biases so every bias path is exercised
        let mut brng = root.split(1);
        params.for_each_tensor_mut(|t: &mut [T]| {
            if t.iter().all(|v| v.is_zero()) {
                for v in t.iter_mut() {
                    *v = T::c(0.1 * brng.standard_normal());
                }
            }
        });
        let mut rng = root.split(2);
        let mut data = Vec::with_capacity(bags);
        let mut labels = Vec::with_capacity(bags);
        for _ in 0..bags {
            let v = gaussian_sample(&mut rng, patches * dim, T::zero(), T::one())?;
            data.push(DenseMatrix::new(patches, dim, v)?);
            labels.push(rng.below(classes));
        }
        Ok(Self {
            params,
            bags: data,
            labels,
        })
    }

    pub fn items(&self) -> Vec<&DenseMatrix<T>> {
        self.bags.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_closed_forms() {
        let sq = finite_difference_grad(|t: &[f64]| t[0] * t[0], &[3.0], 1e-5);
        assert!((sq[0] - 6.0).abs() < 1e-8);
        let constant = finite_difference_grad(|_: &[f64]| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert!(constant.iter().all(|v| v.abs() < 1e-9));
        let lin = finite_difference_grad(|t: &[f64]| t.iter().sum(), &[1.0, -2.0, 0.5, 7.0], 1e-5);
        assert!(lin.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn grad_check_pass_and_fail() {
        let a = [0.5, -1.25, 3.0];
        let ok = grad_check(&a, &a, &[false; 3], 1e-4, 1e-6).unwrap();
        assert!(ok.passed);
        assert_eq!(ok.max_rel_error, 0.0);

        let n = [0.5, -1.25 + 1e-2, 3.0];
        let bad = grad_check(&a, &n, &[false; 3], 1e-4, 1e-6).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst[0].index, 1);

        // flagged coordinates are not scored
        let skipped = grad_check(&a, &n, &[false, true, false], 1e-4, 1e-6).unwrap();
        assert!(skipped.passed);
        assert_eq!(skipped.flagged, 1);

        assert!(grad_check(&a, &n[..2], &[false; 3], 1e-4, 1e-6).is_err());
    }

    #[test]
    fn small_pipeline_matches_oracle() {
        let inst = GradCheckInstance::<f64>::random(3, 2, 16, 4, 3, 2).unwrap();
        let report = check_pipeline(
            &inst.params,
            &inst.items(),
            &inst.labels,
            2,
            &LossConstants::default(),
            &CheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn no_signal_path_gives_zero_gate_gradient() {
        let mut inst = GradCheckInstance::<f64>::random(5, 2, 20, 4, 4, 3).unwrap();
        inst.params.head.weight = DenseMatrix::zeros(4, 3);
        let c = LossConstants::default().with_lambda(0.0);
        let tape = forward(&inst.params, &inst.items(), &inst.labels, 2, &c).unwrap();
        let g = backward(&tape, &c).unwrap();
        assert!(g.gate().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_alone_trains_the_gate() {
        let mut inst = GradCheckInstance::<f64>::random(6, 2, 20, 4, 4, 3).unwrap();
        inst.params.head.weight = DenseMatrix::zeros(4, 3);
        let c = LossConstants::default();
        let tape = forward(&inst.params, &inst.items(), &inst.labels, 2, &c).unwrap();
        let g = backward(&tape, &c).unwrap();
        assert!(g.gate().as_slice().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn duplicated_patches_keep_regularizer_gradient() {
        // With the head decoupled only the patch-averaged regularizers
        // remain, and those are unchanged by stacking every patch twice.
        let mut inst = GradCheckInstance::<f64>::random(8, 2, 24, 5, 4, 3).unwrap();
        inst.params.head.weight = DenseMatrix::zeros(5, 3);
        let doubled: Vec<DenseMatrix<f64>> = inst
            .bags
            .iter()
            .map(|b| DenseMatrix::vstack(&[b, b]).unwrap())
            .collect();
        let c = LossConstants::default();
        let single = forward(&inst.params, &inst.items(), &inst.labels, 2, &c).unwrap();
        let twice_items: Vec<_> = doubled.iter().collect();
        let twice = forward(&inst.params, &twice_items, &inst.labels, 2, &c).unwrap();
        let g1 = backward(&single, &c).unwrap();
        let g2 = backward(&twice, &c).unwrap();
        assert!(g1.gate().max_abs_diff(g2.gate()) < 1e-10);
        assert!((single.loss.total - twice.loss.total).abs() < 1e-12);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let inst = GradCheckInstance::<f64>::random(9, 2, 32, 6, 4, 3).unwrap();
        let c = LossConstants::default();
        let tape = forward(&inst.params, &inst.items(), &inst.labels, 2, &c).unwrap();
        let a = backward(&tape, &c).unwrap().to_flat();
        let b = backward(&tape, &c).unwrap().to_flat();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn per_slot_and_residual_variants_match_oracle() {
        for (per_slot, residual) in [(true, false), (false, true), (true, true)] {
            let base = GradCheckInstance::<f64>::random(10, 2, 12, 3, 3, 2).unwrap();
            let mut cfg = base.params.config;
            cfg.per_slot_mlp = per_slot;
            cfg.residual = residual;
            let params = ModelParams::init(&cfg, &mut RngState::new(44)).unwrap();
            let report = check_pipeline(
                &params,
                &base.items(),
                &base.labels,
                2,
                &LossConstants::default(),
                &CheckSettings::default(),
            )
            .unwrap();
            assert!(report.passed, "per_slot={per_slot} residual={residual}: {report:?}");
        }
    }
}
