//! Weighted slot pooling and per-slot MLP refinement.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::model::{FeatureBatch, ModelParams};
use crate::numerics::{axpy, DenseMatrix};
use crate::router::{gate_forward, routing_stats, top_k_select, RoutingStats, RoutingTable};
use crate::scalar::Scalar;

/// Pooling denominator guard: an empty slot pools to `0 / δ = 0`.
pub const DEFAULT_DELTA: f64 = 1e-9;

/// Compressed sequence: exactly `K` token rows per item.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotTokens<T> {
    pub tokens: DenseMatrix<T>,
}

impl<T: Scalar> SlotTokens<T> {
    pub fn slots(&self) -> usize {
        self.tokens.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh-approximated GELU
    Gelu,
    Identity,
}

impl Activation {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const GELU_CUBIC: f64 = 0.044_715;

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let u = T::c(Self::SQRT_2_OVER_PI) * (x + T::c(Self::GELU_CUBIC) * x * x * x);
                T::c(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Gelu => {
                let s = T::c(Self::SQRT_2_OVER_PI);
                let a = T::c(Self::GELU_CUBIC);
                let t = (s * (x + a * x * x * x)).tanh();
                let half = T::c(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::c(3.0) * a * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "gelu" => Some(Activation::Gelu),
            "identity" | "linear" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Two-layer MLP applied to one slot vector: `act(c·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotMlpParams<T> {
    /// `D × H`
    pub w1: DenseMatrix<T>,
    pub b1: Vec<T>,
    /// `H × D′`
    pub w2: DenseMatrix<T>,
    pub b2: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> SlotMlpParams<T> {
    pub fn new(w1: DenseMatrix<T>, b1: Vec<T>, w2: DenseMatrix<T>, b2: Vec<T>, activation: Activation) -> Result<Self> {
        if w1.cols() < 1 {
            return Err(Error::InvalidConfig("slot MLP hidden width must be >= 1".into()));
        }
        if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
            return Err(shape_err(
                "SlotMlpParams::new",
                format!("b1 {h}, w2 {h}xD', b2 D'", h = w1.cols()),
                format!("b1 {}, w2 {}x{}, b2 {}", b1.len(), w2.rows(), w2.cols(), b2.len()),
            ));
        }
        if !(w1.is_finite() && w2.is_finite()) || !b1.iter().chain(&b2).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("slot MLP parameters not finite".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Forward one row, keeping the pre-activation and hidden activations.
    pub(crate) fn forward_row(&self, input: &[T], pre: &mut [T], hidden: &mut [T], out: &mut [T]) {
        pre.copy_from_slice(&self.b1);
        for (p, &c) in input.iter().enumerate() {
            axpy(c, self.w1.row(p), pre);
        }
        for (h, &z) in hidden.iter_mut().zip(pre.iter()) {
            *h = self.activation.apply(z);
        }
        out.copy_from_slice(&self.b2);
        for (p, &h) in hidden.iter().enumerate() {
            axpy(h, self.w2.row(p), out);
        }
    }

    pub fn apply_row(&self, input: &[T]) -> Vec<T> {
        let mut pre = vec![T::zero(); self.hidden()];
        let mut hidden = pre.clone();
        let mut out = vec![T::zero(); self.output_dim()];
        self.forward_row(input, &mut pre, &mut hidden, &mut out);
        out
    }
}

/// Slot refinement: one MLP shared by all slots, or one per slot.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotRefiner<T> {
    Shared(SlotMlpParams<T>),
    PerSlot(Vec<SlotMlpParams<T>>),
}

impl<T: Scalar> SlotRefiner<T> {
    pub fn for_slot(&self, k: usize) -> &SlotMlpParams<T> {
        match self {
            SlotRefiner::Shared(m) => m,
            SlotRefiner::PerSlot(ms) => &ms[k],
        }
    }

    pub fn mlps(&self) -> &[SlotMlpParams<T>] {
        match self {
            SlotRefiner::Shared(m) => std::slice::from_ref(m),
            SlotRefiner::PerSlot(ms) => ms,
        }
    }

    pub fn mlps_mut(&mut self) -> &mut [SlotMlpParams<T>] {
        match self {
            SlotRefiner::Shared(m) => std::slice::from_mut(m),
            SlotRefiner::PerSlot(ms) => ms,
        }
    }
}

/// Raw pooled slots plus the per-slot routed weight mass `Σ_j P̃_jk`.
#[derive(Clone, Debug)]
pub(crate) struct PooledSlots<T> {
    pub raw: DenseMatrix<T>,
    pub weight_sum: Vec<T>,
}

pub(crate) fn pool_slots<T: Scalar>(x: &DenseMatrix<T>, table: &RoutingTable<T>, delta: T) -> Result<PooledSlots<T>> {
    if table.patches() != x.rows() {
        return Err(shape_err(
            "aggregate_slots",
            format!("{} patches", x.rows()),
            table.patches(),
        ));
    }
    let k = table.slot_count();
    let mut sums = DenseMatrix::zeros(k, x.cols());
    let mut weight_sum = vec![T::zero(); k];
    for (j, s, w) in table.assignments() {
        axpy(w, x.row(j), sums.row_mut(s));
        weight_sum[s] += w;
    }
    for (s, &mass) in weight_sum.iter().enumerate() {
        let denom = mass + delta;
        for v in sums.row_mut(s) {
            *v /= denom;
        }
    }
    Ok(PooledSlots { raw: sums, weight_sum })
}

/// `c_k = Σ_j P̃_jk x_j / (Σ_j P̃_jk + δ)` with `δ = 1e-9`.
pub fn aggregate_slots<T: Scalar>(x: &DenseMatrix<T>, table: &RoutingTable<T>) -> Result<DenseMatrix<T>> {
    aggregate_slots_with_delta(x, table, T::c(DEFAULT_DELTA))
}

pub fn aggregate_slots_with_delta<T: Scalar>(
    x: &DenseMatrix<T>,
    table: &RoutingTable<T>,
    delta: T,
) -> Result<DenseMatrix<T>> {
    Ok(pool_slots(x, table, delta)?.raw)
}

/// Applies the same MLP to every slot row.
pub fn refine_slots<T: Scalar>(raw: &DenseMatrix<T>, mlp: &SlotMlpParams<T>) -> Result<SlotTokens<T>> {
    refine_slots_with(raw, &SlotRefiner::Shared(mlp.clone()), false)
}

/// Applies the refiner row-wise, optionally adding the pooled slot back.
pub fn refine_slots_with<T: Scalar>(
    raw: &DenseMatrix<T>,
    refiner: &SlotRefiner<T>,
    residual: bool,
) -> Result<SlotTokens<T>> {
    if let SlotRefiner::PerSlot(ms) = refiner {
        if ms.len() != raw.rows() {
            return Err(shape_err("refine_slots", format!("{} slot MLPs", raw.rows()), ms.len()));
        }
    }
    let first = refiner.for_slot(0);
    if raw.cols() != first.input_dim() {
        return Err(shape_err("refine_slots", first.input_dim(), raw.cols()));
    }
    if residual && first.output_dim() != first.input_dim() {
        return Err(Error::InvalidConfig(
            "residual slot refinement needs output dim == input dim".into(),
        ));
    }
    let mut tokens = DenseMatrix::zeros(raw.rows(), first.output_dim());
    for k in 0..raw.rows() {
        let out = refiner.for_slot(k).apply_row(raw.row(k));
        let dst = tokens.row_mut(k);
        dst.copy_from_slice(&out);
        if residual {
            axpy(T::one(), raw.row(k), dst);
        }
    }
    Ok(SlotTokens { tokens })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressConfig {
    pub top_k: usize,
    pub delta: f64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            delta: DEFAULT_DELTA,
        }
    }
}

/// Result of compressing one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedItem<T> {
    pub tokens: SlotTokens<T>,
    pub table: RoutingTable<T>,
    pub stats: RoutingStats<T>,
}

impl<T: Scalar> CompressedItem<T> {
    /// `N / K`.
    pub fn compression_ratio(&self) -> f64 {
        self.table.patches() as f64 / self.tokens.slots() as f64
    }
}

/// Compresses one `N × D` item into `K` slot tokens.
pub fn compress_item<T: Scalar>(
    x: &DenseMatrix<T>,
    params: &ModelParams<T>,
    config: &CompressConfig,
) -> Result<CompressedItem<T>> {
    if x.rows() == 0 {
        return Err(Error::InvalidInput("cannot compress an item with zero patches".into()));
    }
    let (_, probs) = gate_forward(x, &params.gate)?;
    let table = top_k_select(&probs, config.top_k)?;
    let raw = aggregate_slots_with_delta(x, &table, T::c(config.delta))?;
    let tokens = refine_slots_with(&raw, &params.refiner, params.config.residual)?;
    let stats = routing_stats(&probs, &table)?;
    Ok(CompressedItem { tokens, table, stats })
}

/// Gate → Top-k → pooling → refinement for every item, independently.
pub fn compress<T: Scalar>(
    batch: &FeatureBatch<T>,
    params: &ModelParams<T>,
    config: &CompressConfig,
) -> Result<Vec<CompressedItem<T>>> {
    batch
        .items()
        .par_iter()
        .map(|x| compress_item(x, params, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{gaussian_sample, RngState};
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn scalar_mlp(w1: f64, b1: f64, w2: f64, b2: f64, act: Activation) -> SlotMlpParams<f64> {
        SlotMlpParams::new(m(&[vec![w1]]), vec![b1], m(&[vec![w2]]), vec![b2], act).unwrap()
    }

    #[test]
    fn single_assignment_is_identity_up_to_delta() {
        let x = m(&[vec![1.5, -2.0, 3.0]]);
        let table = RoutingTable::from_rows(3, &[vec![(0, 1.0)]]).unwrap();
        let c = aggregate_slots(&x, &table).unwrap();
        for d in 0..3 {
            assert!((c[(0, d)] - x[(0, d)]).abs() < 1e-8);
            assert_eq!(c[(0, d)], x[(0, d)] / (1.0 + 1e-9));
        }
        // slots 1 and 2 never assigned
        assert!(c.row(1).iter().chain(c.row(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn equal_weights_average() {
        let x = m(&[vec![1.0, 4.0], vec![3.0, -2.0]]);
        let table = RoutingTable::from_rows(2, &[vec![(1, 0.5)], vec![(1, 0.5)]]).unwrap();
        let c = aggregate_slots(&x, &table).unwrap();
        assert!((c[(1, 0)] - 2.0).abs() < 1e-8);
        assert!((c[(1, 1)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mismatched_table_is_shape_error() {
        let table = RoutingTable::from_rows(2, &[vec![(1, 0.5)]]).unwrap();
        assert!(matches!(
            aggregate_slots(&DenseMatrix::<f64>::zeros(3, 2), &table),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_mlp_gives_zero_tokens() {
        let mlp = SlotMlpParams::new(
            DenseMatrix::zeros(3, 6),
            vec![0.0; 6],
            DenseMatrix::zeros(6, 3),
            vec![0.0; 3],
            Activation::Gelu,
        )
        .unwrap();
        let raw = m(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 9.0]]);
        let out = refine_slots(&raw, &mlp).unwrap();
        assert!(out.tokens.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mlp_passes_through() {
        let mlp = SlotMlpParams::new(
            DenseMatrix::identity(3),
            vec![0.0; 3],
            DenseMatrix::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap();
        let raw = m(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 9.0]]);
        assert_eq!(refine_slots(&raw, &mlp).unwrap().tokens, raw);
    }

    #[test]
    fn scalar_gelu_hand_evaluation() {
        // 2·3 + 1 = 7, gelu(7) = 7 to machine precision
        let out = refine_slots(&m(&[vec![2.0]]), &scalar_mlp(3.0, 1.0, 0.5, 0.0, Activation::Gelu)).unwrap();
        assert!((out.tokens[(0, 0)] - 3.5).abs() < 1e-6);
    }

    #[test]
    fn gelu_values_and_derivative() {
        let g = Activation::Gelu;
        assert_eq!(g.apply(0.0f64), 0.0);
        // tanh-approx reference values
        assert!((g.apply(1.0f64) - 0.841_191_990_608_514_7).abs() < 1e-12);
        assert!((g.apply(-1.0f64) + 0.158_808_009_391_485_3).abs() < 1e-12);
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (g.apply(x + h) - g.apply(x - h)) / (2.0 * h);
            assert!((fd - g.derivative(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn per_slot_refiner_needs_one_mlp_per_slot() {
        let mlp = scalar_mlp(1.0, 0.0, 1.0, 0.0, Activation::Identity);
        let raw = m(&[vec![2.0], vec![3.0]]);
        assert!(refine_slots_with(&raw, &SlotRefiner::PerSlot(vec![mlp.clone()]), false).is_err());
        let two = SlotRefiner::PerSlot(vec![mlp.clone(), scalar_mlp(2.0, 0.0, 1.0, 0.0, Activation::Identity)]);
        let out = refine_slots_with(&raw, &two, false).unwrap();
        assert_eq!(out.tokens.as_slice(), &[2.0, 6.0]);
        let out = refine_slots_with(&raw, &two, true).unwrap();
        assert_eq!(out.tokens.as_slice(), &[4.0, 9.0]);
    }

    #[test]
    fn diagonal_routing_recovers_each_patch() {
        let d = 3;
        let mut params = ModelParams::<f64>::init(&ModelConfig::new(d, 4, 2), &mut RngState::new(1)).unwrap();
        // one-hot features and a gate that maps patch j strongly onto slot j
        let x = DenseMatrix::from_fn(4, d, |j, c| if j < 3 && c == j { 1.0 } else { 0.0 });
        let x = DenseMatrix::vstack(&[&x.select_rows(&[0, 1, 2]), &m(&[vec![-1.0, -1.0, -1.0]])]).unwrap();
        params.gate.weight = DenseMatrix::from_fn(4, d, |k, c| match (k, c) {
            (3, _) => -40.0,
            (k, c) if k == c => 40.0,
            _ => 0.0,
        });
        let item = compress_item(&x, &params, &CompressConfig::default()).unwrap();
        for j in 0..4 {
            assert_eq!(item.table.slots_of(j)[0], j);
        }
        let raw = pool_slots(&x, &item.table, 1e-9).unwrap().raw;
        for k in 0..4 {
            // each slot's pooled vector is dominated by its own patch
            let own = x.row(k);
            let diff: f64 = raw
                .row(k)
                .iter()
                .zip(own)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "slot {k} diff {diff}");
            let expect = params.refiner.for_slot(k).apply_row(raw.row(k));
            assert_eq!(item.tokens.tokens.row(k), expect.as_slice());
        }
    }

    #[test]
    fn compress_rejects_empty_item_and_keeps_budget() {
        let params = ModelParams::<f64>::init(&ModelConfig::new(4, 32, 2), &mut RngState::new(2)).unwrap();
        let mut rng = RngState::new(3);
        let x = DenseMatrix::new(1856, 4, gaussian_sample(&mut rng, 1856 * 4, 0.0, 1.0).unwrap()).unwrap();
        let item = compress_item(&x, &params, &CompressConfig::default()).unwrap();
        assert_eq!(item.tokens.slots(), 32);
        assert_eq!(item.compression_ratio(), 58.0);
        assert!(compress_item(&DenseMatrix::zeros(0, 4), &params, &CompressConfig::default()).is_err());
    }

    #[test]
    fn f32_pipeline_runs() {
        let params = ModelParams::<f32>::init(&ModelConfig::new(5, 6, 2), &mut RngState::new(4)).unwrap();
        let x = DenseMatrix::<f32>::from_fn(40, 5, |i, j| ((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5);
        let batch = FeatureBatch::new(vec![x.clone(), x.select_rows(&[0, 1, 2])]).unwrap();
        let out = compress(&batch, &params, &CompressConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.tokens.slots() == 6 && c.tokens.tokens.is_finite()));
    }

    fn random_instance(seed: u64, n: usize, k: usize, d: usize) -> (DenseMatrix<f64>, RoutingTable<f64>) {
        let mut rng = RngState::new(seed);
        let x = DenseMatrix::new(n, d, gaussian_sample(&mut rng, n * d, 0.0, 1.0).unwrap()).unwrap();
        let logits = DenseMatrix::new(n, k, gaussian_sample(&mut rng, n * k, 0.0, 1.5).unwrap()).unwrap();
        let table = top_k_select(&crate::numerics::softmax_rows(&logits).unwrap(), 2).unwrap();
        (x, table)
    }

    proptest! {
        #[test]
        fn pooling_is_order_invariant(seed in 0u64..300) {
            let (x, table) = random_instance(seed, 30, 5, 4);
            let mut perm: Vec<usize> = (0..30).collect();
            RngState::new(seed ^ 0xabc).shuffle(&mut perm);
            let a = aggregate_slots(&x, &table).unwrap();
            let b = aggregate_slots(&x.select_rows(&perm), &table.select_rows(&perm)).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn pooling_is_weight_scale_invariant(seed in 0u64..300, gamma in 0.05f64..1.0) {
            let (x, table) = random_instance(seed, 30, 4, 3);
            let rows: Vec<Vec<(usize, f64)>> = (0..30)
                .map(|j| table.slots_of(j).iter().zip(table.weights_of(j)).map(|(&s, &w)| (s, w)).collect())
                .collect();
            let scaled: Vec<Vec<(usize, f64)>> = rows
                .iter()
                .map(|r| r.iter().map(|&(s, w)| (s, w * gamma)).collect())
                .collect();
            let a = aggregate_slots(&x, &table).unwrap();
            let b = aggregate_slots(&x, &RoutingTable::from_rows(4, &scaled).unwrap()).unwrap();
            let mass = pool_slots(&x, &table, 1e-9).unwrap().weight_sum;
            for k in 0..4 {
                // the δ-induced gap is bounded by δ / (γ Σ P̃)
                if gamma * mass[k] >= 0.1 {
                    for d in 0..3 {
                        prop_assert!((a[(k, d)] - b[(k, d)]).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn identical_features_pool_to_closed_form(seed in 0u64..300, v in -5f64..5.0) {
            let (x, table) = random_instance(seed, 20, 4, 3);
            let x = x.map(|_| v);
            let pooled = pool_slots(&x, &table, 1e-9).unwrap();
            for k in 0..4 {
                let w = pooled.weight_sum[k];
                let closed = v * w / (w + 1e-9);
                for d in 0..3 {
                    prop_assert!((pooled.raw[(k, d)] - closed).abs() < 1e-12);
                }
            }
        }
    }
}
