//! Trainable state: gate, slot refinement MLP(s) and the classification head.

use crate::aggregator::{Activation, SlotMlpParams, SlotRefiner};
use crate::error::{shape_err, Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{gaussian_sample, RngState};
use crate::router::GateParams;
use crate::scalar::Scalar;

/// Variable-length items sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    items: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(items: Vec<DenseMatrix<T>>) -> Result<Self> {
        if let Some(first) = items.first() {
            if let Some(bad) = items.iter().find(|m| m.cols() != first.cols()) {
                return Err(shape_err("FeatureBatch::new", first.cols(), bad.cols()));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[DenseMatrix<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Structural hyperparameters of the compressor and its head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input feature dim `D`.
    pub dim: usize,
    /// Token budget `K`.
    pub slots: usize,
    /// Slot-MLP hidden width `H`.
    pub hidden: usize,
    /// Token dim `D′`.
    pub out_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub residual: bool,
    pub per_slot_mlp: bool,
}

impl ModelConfig {
    /// Defaults: `H = 2D`, `D′ = D`, GELU, shared MLP, no residual.
    pub fn new(dim: usize, slots: usize, classes: usize) -> Self {
        Self {
            dim,
            slots,
            hidden: 2 * dim,
            out_dim: dim,
            classes,
            activation: Activation::Gelu,
            residual: false,
            per_slot_mlp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 slots, got {}",
                self.slots
            )));
        }
        if self.dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "feature, hidden and token dims must be >= 1".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.residual && self.out_dim != self.dim {
            return Err(Error::InvalidConfig("residual refinement needs out_dim == dim".into()));
        }
        Ok(())
    }
}

/// Linear classifier on the mean slot token: `D′ × C` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub gate: GateParams<T>,
    pub refiner: SlotRefiner<T>,
    pub head: HeadParams<T>,
}

fn gaussian_matrix<T: Scalar>(rng: &mut RngState, rows: usize, cols: usize) -> Result<DenseMatrix<T>> {
    // stddev 1/sqrt(fan_in), fan_in = cols of the input this weight multiplies
    let std = T::one() / T::from_usize_lossy(cols).sqrt();
    DenseMatrix::new(rows, cols, gaussian_sample(rng, rows * cols, T::zero(), std)?)
}

fn gaussian_fan_in<T: Scalar>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Result<DenseMatrix<T>> {
    let std = T::one() / T::from_usize_lossy(fan_in).sqrt();
    DenseMatrix::new(fan_in, fan_out, gaussian_sample(rng, fan_in * fan_out, T::zero(), std)?)
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian weights with stddev `1/√fan_in`, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let gate = GateParams::new(gaussian_matrix(rng, config.slots, config.dim)?)?;
        let n_mlps = if config.per_slot_mlp { config.slots } else { 1 };
        let mut mlps = Vec::with_capacity(n_mlps);
        for _ in 0..n_mlps {
            mlps.push(SlotMlpParams::new(
                gaussian_fan_in(rng, config.dim, config.hidden)?,
                vec![T::zero(); config.hidden],
                gaussian_fan_in(rng, config.hidden, config.out_dim)?,
                vec![T::zero(); config.out_dim],
                config.activation,
            )?);
        }
        let refiner = if config.per_slot_mlp {
            SlotRefiner::PerSlot(mlps)
        } else {
            SlotRefiner::Shared(mlps.pop().expect("one shared mlp"))
        };
        let head = HeadParams {
            weight: gaussian_fan_in(rng, config.out_dim, config.classes)?,
            bias: vec![T::zero(); config.classes],
        };
        Ok(Self {
            config: *config,
            gate,
            refiner,
            head,
        })
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v = T::zero()));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    /// Visits every tensor in flat-view order: gate, slot MLP(s)
    /// (`w1, b1, w2, b2` each), head weight, head bias.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&[T])) {
        f(self.gate.weight.as_slice());
        for mlp in self.refiner.mlps() {
            f(mlp.w1.as_slice());
            f(&mlp.b1);
            f(mlp.w2.as_slice());
            f(&mlp.b2);
        }
        f(self.head.weight.as_slice());
        f(&self.head.bias);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        f(self.gate.weight.as_mut_slice());
        for mlp in self.refiner.mlps_mut() {
            f(mlp.w1.as_mut_slice());
            f(&mut mlp.b1);
            f(mlp.w2.as_mut_slice());
            f(&mut mlp.b2);
        }
        f(self.head.weight.as_mut_slice());
        f(&mut self.head.bias);
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_tensor(|t| out.extend_from_slice(t));
        out
    }

    /// Copy of `self` with entries taken from `flat`.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(shape_err("ModelParams::with_flat", n, flat.len()));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter value".into()));
        }
        let mut out = self.clone();
        let mut offset = 0;
        out.for_each_tensor_mut(|t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(out)
    }

    /// Index range of the gate weights within the flat view.
    pub fn gate_range(&self) -> std::ops::Range<usize> {
        0..self.gate.weight.as_slice().len()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::c(x.as_f64())).collect::<Vec<U>>();
        let cast_mlp = |m: &SlotMlpParams<T>| SlotMlpParams {
            w1: m.w1.cast(),
            b1: cast_vec(&m.b1),
            w2: m.w2.cast(),
            b2: cast_vec(&m.b2),
            activation: m.activation,
        };
        ModelParams {
            config: self.config,
            gate: GateParams {
                weight: self.gate.weight.cast(),
            },
            refiner: match &self.refiner {
                SlotRefiner::Shared(m) => SlotRefiner::Shared(cast_mlp(m)),
                SlotRefiner::PerSlot(ms) => SlotRefiner::PerSlot(ms.iter().map(cast_mlp).collect()),
            },
            head: HeadParams {
                weight: self.head.weight.cast(),
                bias: cast_vec(&self.head.bias),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_view_round_trips() {
        let mut cfg = ModelConfig::new(3, 4, 2);
        cfg.per_slot_mlp = true;
        let p = ModelParams::<f64>::init(&cfg, &mut RngState::new(5)).unwrap();
        // gate 4·3, 4 MLPs of (3·6 + 6 + 6·3 + 3), head 3·2 + 2
        assert_eq!(p.num_params(), 12 + 4 * 45 + 8);
        let flat = p.to_flat();
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert!(p.with_flat(&flat[1..]).is_err());
        assert_eq!(p.gate_range(), 0..12);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let cfg = ModelConfig::new(8, 5, 3);
        let a = ModelParams::<f64>::init(&cfg, &mut RngState::new(11)).unwrap();
        let b = ModelParams::<f64>::init(&cfg, &mut RngState::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.head.bias.iter().all(|&v| v == 0.0));
        assert!(a.refiner.for_slot(0).b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig::new(4, 1, 2).validate().is_err());
        assert!(ModelConfig::new(4, 4, 1).validate().is_err());
        let mut cfg = ModelConfig::new(4, 4, 2);
        cfg.residual = true;
        cfg.out_dim = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_requires_common_dim() {
        assert!(FeatureBatch::new(vec![DenseMatrix::<f64>::zeros(2, 3), DenseMatrix::zeros(4, 2)]).is_err());
    }
}
