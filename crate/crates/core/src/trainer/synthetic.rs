//! Synthetic whole-slide-like bags: Gaussian patch clusters ("tissue
//! archetypes") with a sparse evidence cluster that only positive bags
//! contain.

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBagConfig {
    pub n_patches: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub evidence_cluster: usize,
    /// Share of a positive bag's patches drawn from the evidence cluster.
    pub evidence_fraction: f64,
    /// Distance of each cluster centre from the shared mean, in units of
    /// `noise_std`. Centre directions are orthonormal when `dim` allows.
    pub separation: f64,
    pub noise_std: f64,
    /// Norm of a mean vector shared by every patch, orthogonal to the
    /// cluster directions. Encoder features are rarely centred.
    pub offset: f64,
    pub label_noise: f64,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
}

impl Default for SyntheticBagConfig {
    fn default() -> Self {
        Self {
            n_patches: 1024,
            dim: 16,
            n_clusters: 6,
            evidence_cluster: 0,
            evidence_fraction: 0.02,
            separation: 4.0,
            noise_std: 1.0,
            offset: 12.0,
            label_noise: 0.0,
            train_bags: 160,
            val_bags: 80,
            test_bags: 200,
        }
    }
}

impl SyntheticBagConfig {
    /// Evidence patches per positive bag.
    pub fn evidence_count(&self) -> usize {
        (self.evidence_fraction * self.n_patches as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_clusters < 2 {
            return bad(format!("need >= 2 clusters, got {}", self.n_clusters));
        }
        if self.evidence_cluster >= self.n_clusters {
            return bad(format!(
                "evidence cluster {} out of range for {} clusters",
                self.evidence_cluster, self.n_clusters
            ));
        }
        if !(self.evidence_fraction > 0.0 && self.evidence_fraction < 1.0) {
            return bad(format!(
                "evidence_fraction must be in (0, 1), got {}",
                self.evidence_fraction
            ));
        }
        if self.evidence_fraction * (self.n_patches as f64) < 1.0 {
            return bad(format!(
                "evidence_fraction {} leaves no evidence patch in a bag of {}",
                self.evidence_fraction, self.n_patches
            ));
        }
        if self.dim == 0 {
            return bad("feature dim must be >= 1".into());
        }
        if !(self.separation >= 0.0 && self.noise_std >= 0.0 && self.offset >= 0.0) {
            return bad("separation, noise_std and offset must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise must be a probability, got {}", self.label_noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag<T> {
    pub features: DenseMatrix<T>,
    pub label: usize,
    /// Evidence patches actually present (independent of label noise).
    pub evidence: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset<T> {
    pub bags: Vec<Bag<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn items(&self) -> Vec<&DenseMatrix<T>> {
        self.bags.iter().map(|b| &b.features).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
    /// Cluster means, `n_clusters × dim` (shared offset included).
    pub centroids: DenseMatrix<T>,
    pub config: SyntheticBagConfig,
}

/// Up to `count` orthonormal directions in `dim` dimensions; beyond `dim`
/// the remaining directions are random unit vectors.
fn directions(rng: &mut RngState, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        if out.len() < dim {
            for u in &out {
                let proj = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            out.push(v.iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn generate_split<T: Scalar>(
    cfg: &SyntheticBagConfig,
    centroids: &[Vec<f64>],
    bags: usize,
    mut rng: RngState,
) -> Result<Dataset<T>> {
    let n_ev = cfg.evidence_count();
    let background: Vec<usize> = (0..cfg.n_clusters).filter(|&c| c != cfg.evidence_cluster).collect();
    let mut out = Vec::with_capacity(bags);
    for i in 0..bags {
        let positive = i % 2 == 1;
        let mut clusters: Vec<usize> = (0..cfg.n_patches)
            .map(|_| background[rng.below(background.len())])
            .collect();
        if positive {
            clusters[..n_ev].iter_mut().for_each(|c| *c = cfg.evidence_cluster);
            rng.shuffle(&mut clusters);
        }
        let mut data = Vec::with_capacity(cfg.n_patches * cfg.dim);
        for &c in &clusters {
            for &mu in &centroids[c] {
                data.push(T::c(mu + cfg.noise_std * rng.standard_normal()));
            }
        }
        let mut label = usize::from(positive);
        if cfg.label_noise > 0.0 && rng.uniform() < cfg.label_noise {
            label = 1 - label;
        }
        out.push(Bag {
            features: DenseMatrix::new(cfg.n_patches, cfg.dim, data)?,
            label,
            evidence: if positive { n_ev } else { 0 },
        });
    }
    rng.shuffle(&mut out);
    Ok(Dataset { bags: out })
}

/// Train/val/test splits, each from its own RNG stream.
pub fn generate_synthetic_bags<T: Scalar>(cfg: &SyntheticBagConfig, seed: u64) -> Result<SyntheticSplits<T>> {
    cfg.validate()?;
    let root = RngState::new(seed);
    let dirs = directions(&mut root.split(0), cfg.n_clusters + 1, cfg.dim);
    let (offset_dir, cluster_dirs) = dirs.split_last().expect("n_clusters + 1 directions");
    let scale = cfg.separation * cfg.noise_std;
    let centroids: Vec<Vec<f64>> = cluster_dirs
        .iter()
        .map(|u| {
            u.iter()
                .zip(offset_dir)
                .map(|(&a, &o)| scale * a + cfg.offset * o)
                .collect()
        })
        .collect();
    let centroid_matrix = DenseMatrix::from_fn(cfg.n_clusters, cfg.dim, |c, d| T::c(centroids[c][d]));
    Ok(SyntheticSplits {
        train: generate_split(cfg, &centroids, cfg.train_bags, root.split(1))?,
        val: generate_split(cfg, &centroids, cfg.val_bags, root.split(2))?,
        test: generate_split(cfg, &centroids, cfg.test_bags, root.split(3))?,
        centroids: centroid_matrix,
        config: cfg.clone(),
    })
}

/// Accuracy of a classifier that knows the true centroids: assign every
/// patch to its nearest centroid and call a bag positive when at least half
/// the expected evidence count lands on the evidence cluster. An upper
/// reference for what a learned compressor can reach on `data`.
pub fn nearest_centroid_accuracy<T: Scalar>(splits: &SyntheticSplits<T>, data: &Dataset<T>) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let cfg = &splits.config;
    let threshold = (cfg.evidence_count() as f64 / 2.0).max(1.0);
    let correct = data
        .bags
        .iter()
        .filter(|bag| {
            let hits = bag
                .features
                .row_iter()
                .filter(|x| {
                    let dist = |c: usize| -> f64 {
                        x.iter()
                            .zip(splits.centroids.row(c))
                            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                            .sum()
                    };
                    let nearest = (0..cfg.n_clusters)
                        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                        .expect("at least two clusters");
                    nearest == cfg.evidence_cluster
                })
                .count();
            usize::from(hits as f64 >= threshold) == bag.label
        })
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticBagConfig {
        SyntheticBagConfig {
            n_patches: 200,
            dim: 8,
            train_bags: 10,
            val_bags: 4,
            test_bags: 6,
            evidence_fraction: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_and_shaped() {
        let a = generate_synthetic_bags::<f64>(&small(), 3).unwrap();
        let b = generate_synthetic_bags::<f64>(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (10, 4, 6));
        for bag in &a.train.bags {
            assert_eq!(bag.features.shape(), (200, 8));
            assert_eq!(bag.evidence, if bag.label == 1 { 10 } else { 0 });
        }
        let c = generate_synthetic_bags::<f64>(&small(), 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn balanced_labels() {
        let s = generate_synthetic_bags::<f64>(&small(), 1).unwrap();
        let pos = s.train.labels().iter().filter(|&&y| y == 1).count();
        assert_eq!(pos, 5);
    }

    #[test]
    fn centroids_are_orthogonal_at_requested_distance() {
        let cfg = SyntheticBagConfig { offset: 3.0, ..small() };
        let s = generate_synthetic_bags::<f64>(&cfg, 2).unwrap();
        for a in 0..cfg.n_clusters {
            for b in 0..a {
                let d2: f64 = s
                    .centroids
                    .row(a)
                    .iter()
                    .zip(s.centroids.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!((d2.sqrt() - 4.0 * 2f64.sqrt()).abs() < 1e-9);
            }
            let norm2: f64 = s.centroids.row(a).iter().map(|x| x * x).sum();
            assert!((norm2 - (16.0 + 9.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_separation_has_no_signal() {
        let cfg = SyntheticBagConfig {
            separation: 0.0,
            ..small()
        };
        let s = generate_synthetic_bags::<f64>(&cfg, 2).unwrap();
        let first = s.centroids.row(0).to_vec();
        assert!(s.centroids.row_iter().all(|r| r == first.as_slice()));
        let norm2: f64 = first.iter().map(|x| x * x).sum();
        assert!((norm2 - 144.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_solves_default_task() {
        let cfg = SyntheticBagConfig {
            train_bags: 2,
            val_bags: 2,
            test_bags: 40,
            ..Default::default()
        };
        let s = generate_synthetic_bags::<f64>(&cfg, 9).unwrap();
        assert!(nearest_centroid_accuracy(&s, &s.test) >= 0.95);
        let blind = SyntheticBagConfig { separation: 0.0, ..cfg };
        let s = generate_synthetic_bags::<f64>(&blind, 9).unwrap();
        assert!(nearest_centroid_accuracy(&s, &s.test) <= 0.6);
    }

    #[test]
    fn invalid_configs() {
        let too_sparse = SyntheticBagConfig {
            n_patches: 20,
            evidence_fraction: 0.02,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_bags::<f64>(&too_sparse, 0),
            Err(Error::InvalidConfig(_))
        ));
        let one_cluster = SyntheticBagConfig {
            n_clusters: 1,
            ..small()
        };
        assert!(generate_synthetic_bags::<f64>(&one_cluster, 0).is_err());
    }
}
