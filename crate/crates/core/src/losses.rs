//! Routing regularizers (load balancing, entropy, z-loss), the task
//! cross-entropy and their weighted total.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{log_sum_exp, DenseMatrix};
use crate::router::RoutingStats;
use crate::scalar::Scalar;

/// Fixed constants of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConstants {
    /// Pooling denominator guard.
    pub delta: f64,
    /// Entropy log guard.
    pub epsilon: f64,
    /// z-loss scale.
    pub alpha: f64,
    /// Weight on the whole auxiliary term.
    pub lambda: f64,
    /// Weight of the entropy term inside the auxiliary term.
    pub entropy_coeff: f64,
}

impl Default for LossConstants {
    fn default() -> Self {
        Self {
            delta: 1e-9,
            epsilon: 1e-8,
            alpha: 1e-4,
            lambda: 0.1,
            entropy_coeff: 0.5,
        }
    }
}

impl LossConstants {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.delta, self.epsilon, self.alpha, self.entropy_coeff];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "loss constants must be positive: {self:?}"
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub task: T,
    pub switch: T,
    pub entropy: T,
    pub z: T,
    pub total: T,
    pub lambda: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Unweighted sum of the three regularizers, `L_switch + c·L_ent + L_z`.
    pub fn auxiliary(&self, entropy_coeff: T) -> T {
        self.switch + entropy_coeff * self.entropy + self.z
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.switch, self.entropy, self.z, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `K · Σ_k P_k f_k`.
pub fn switch_loss<T: Scalar>(stats: &RoutingStats<T>) -> T {
    let k = T::from_usize_lossy(stats.slots());
    k * stats
        .mean_prob
        .iter()
        .zip(&stats.load_fraction)
        .map(|(&p, &f)| p * f)
        .sum::<T>()
}

/// `1 − H(P) / log K` with `H(P) = −Σ_k P_k log(P_k + ε)` over the mean
/// gate distribution.
pub fn entropy_loss<T: Scalar>(stats: &RoutingStats<T>, epsilon: T) -> Result<T> {
    let k = stats.slots();
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "entropy loss needs K >= 2 (log K = 0 at K = {k})"
        )));
    }
    let entropy: T = stats.mean_prob.iter().map(|&p| -p * (p + epsilon).ln()).sum();
    Ok(T::one() - entropy / T::from_usize_lossy(k).ln())
}

/// `α · mean_j (log Σ_k exp g_jk)²` over every row of every matrix.
pub fn z_loss<T: Scalar>(logits: &[&DenseMatrix<T>], alpha: T) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for m in logits {
        for row in m.row_iter() {
            let lse = log_sum_exp(row);
            sum += lse * lse;
        }
        n += m.rows();
    }
    if n == 0 {
        return T::zero();
    }
    alpha * sum / T::from_usize_lossy(n)
}

/// Mean negative log-likelihood of the true class.
pub fn task_loss_cross_entropy<T: Scalar>(class_logits: &DenseMatrix<T>, labels: &[usize]) -> Result<T> {
    if class_logits.rows() != labels.len() {
        return Err(shape_err("task_loss_cross_entropy", class_logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("cross-entropy over an empty batch".into()));
    }
    let c = class_logits.cols();
    let mut total = T::zero();
    for (row, &y) in class_logits.row_iter().zip(labels) {
        if y >= c {
            return Err(Error::InvalidInput(format!("label {y} out of range for {c} classes")));
        }
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / T::from_usize_lossy(labels.len()))
}

/// `task + λ (L_switch + 0.5·L_ent + L_z)`.
pub fn total_loss<T: Scalar>(
    task: T,
    stats: &RoutingStats<T>,
    logits: &[&DenseMatrix<T>],
    constants: &LossConstants,
) -> Result<LossBreakdown<T>> {
    let switch = switch_loss(stats);
    let entropy = entropy_loss(stats, T::c(constants.epsilon))?;
    let z = z_loss(logits, T::c(constants.alpha));
    let lambda = T::c(constants.lambda);
    let total = task + lambda * (switch + T::c(constants.entropy_coeff) * entropy + z);
    Ok(LossBreakdown {
        task,
        switch,
        entropy,
        z,
        total,
        lambda,
    })
}
