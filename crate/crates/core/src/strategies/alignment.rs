//! Post-hoc head retraining on features sampled from per-class Gaussians.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainConfig;
use crate::autodiff::GradTape;
use crate::error::{alignment, usage, Error, Result};
use crate::model::{is_head_entry, ClassifierModel};
use crate::taskstream::LabeledDataset;
use crate::tensor::{ParamSet, Tensor};

/// Eigenvalues above `-PSD_TOL * max(1, λ_max)` count as rounding noise.
const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of one class's features.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, symmetric.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric square root `V diag(√max(λ, 0)) Vᵀ` of the covariance.
    fn sqrt_cov(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL * top.max(1.0)) {
            return Err(Error::Numerical(format!("covariance is not PSD (eigenvalue {bad:e})")));
        }
        let root = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
    }
}

/// Per-class feature statistics, keyed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub classes: BTreeMap<usize, GaussianStats>,
}

impl ClassStats {
    pub fn extend(&mut self, other: ClassStats) {
        self.classes.extend(other.classes);
    }
}

/// Feature mean and (unbiased) covariance per class of `data`, using the
/// model's current feature extractor.
pub fn collect_class_stats(model: &ClassifierModel, data: &LabeledDataset) -> Result<ClassStats> {
    let feats = model.features(data.features())?;
    let d = feats.cols();
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in data.labels().iter().enumerate() {
        rows.entry(c).or_default().push(i);
    }
    let mut out = ClassStats::default();
    for (c, idx) in rows {
        let n = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &idx {
            for (m, v) in mean.iter_mut().zip(feats.row(i)) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        if idx.len() > 1 {
            for &i in &idx {
                let r = feats.row(i);
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= n - 1.0);
        }
        out.classes.insert(c, GaussianStats { mean, cov });
    }
    Ok(out)
}

/// Draws `n_per_class` samples for every class, in class-id order.
pub fn sample_features(stats: &ClassStats, n_per_class: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let d = stats
        .classes
        .values()
        .next()
        .map(GaussianStats::dim)
        .ok_or_else(|| usage("no class statistics"))?;
    let mut data = Vec::with_capacity(stats.classes.len() * n_per_class * d);
    let mut labels = Vec::with_capacity(stats.classes.len() * n_per_class);
    for (&c, s) in &stats.classes {
        if s.dim() != d {
            return Err(alignment("class statistics have different dimensions"));
        }
        let root = s.sqrt_cov()?;
        for _ in 0..n_per_class {
            let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
            let x = &root * z;
            data.extend(s.mean.iter().zip(x.iter()).map(|(m, v)| m + v));
            labels.push(c);
        }
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

/// Retrains only the head on sampled features with norm-scaled logits
/// (`temperature * z / ‖z‖`). Returns the new head entries.
pub fn classifier_alignment(
    model: &ClassifierModel,
    stats: &ClassStats,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet> {
    for row in model.head() {
        if !stats.classes.contains_key(&row.class_id) {
            return Err(usage(format!("no feature statistics for class {}", row.class_id)));
        }
    }
    let seen = ClassStats {
        classes: stats
            .classes
            .iter()
            .filter(|(c, _)| model.class_index(**c).is_some())
            .map(|(c, s)| (*c, s.clone()))
            .collect(),
    };
    let (feats, labels) = sample_features(&seen, config.ca_samples_per_class, rng)?;
    let targets = model.label_indices(&labels)?;
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.ca_epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let mut tape = GradTape::new();
            let f = tape.constant(feats.select_rows(batch));
            let logits = current.record_head(&mut tape, f)?;
            let scaled = tape.row_normalize(logits, config.ca_temperature)?;
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let loss = tape.cross_entropy(scaled, &y)?;
            let grads = tape.backward(loss)?;
            let mut params = current.params().clone();
            for (name, g) in &grads {
                let t = params
                    .get_mut(name)
                    .ok_or_else(|| alignment(format!("unknown head entry `{name}`")))?;
                for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v -= config.ca_lr * gv;
                }
            }
            current.set_params(params)?;
        }
    }
    Ok(current.params().filter(is_head_entry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, MlpConfig};
    use crate::strategies::Strategy;
    use rand::SeedableRng;

    fn linear_model(classes: &[usize]) -> ClassifierModel {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
        };
        init_model(&cfg, 0).unwrap().expand_head(classes, 1).unwrap()
    }

    fn stats(entries: &[(usize, Vec<f64>, f64)]) -> ClassStats {
        ClassStats {
            classes: entries
                .iter()
                .map(|(c, m, v)| {
                    (
                        *c,
                        GaussianStats {
                            mean: m.clone(),
                            cov: vec![*v, 0.0, 0.0, *v],
                        },
                    )
                })
                .collect(),
        }
    }

    fn config() -> TrainConfig {
        let mut c = TrainConfig::new(Strategy::Coma, 0.0, 0.0, 1, 16, 0);
        c.ca_samples_per_class = 200;
        c.ca_epochs = 20;
        c.ca_lr = 0.01;
        c
    }

    fn apply(model: &ClassifierModel, head: ParamSet) -> ClassifierModel {
        let mut p = model.params().clone();
        for (n, t) in &head {
            p.set(n.clone(), t.clone());
        }
        model.with_params(p).unwrap()
    }

    #[test]
    fn point_mass_samples_equal_mean() {
        let s = stats(&[(3, vec![1.5, -2.0], 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = sample_features(&s, 10, &mut rng).unwrap();
        assert!(y.iter().all(|&c| c == 3));
        for r in 0..10 {
            assert_eq!(x.row(r), &[1.5, -2.0]);
        }
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let s = ClassStats {
            classes: [(
                0,
                GaussianStats {
                    mean: vec![0.0, 0.0],
                    cov: vec![1.0, 0.0, 0.0, -1.0],
                },
            )]
            .into_iter()
            .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_features(&s, 1, &mut rng), Err(Error::Numerical(_))));
    }

    #[test]
    fn separated_classes_align_perfectly() {
        let m = linear_model(&[0, 1, 2]);
        let s = stats(&[(0, vec![3.0, 0.0], 0.01), (1, vec![-3.0, 0.0], 0.01), (2, vec![0.0, 3.0], 0.01)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = classifier_alignment(&m, &s, &config(), &mut rng).unwrap();
        assert!(head.names().all(is_head_entry));
        let aligned = apply(&m, head);
        let (x, y) = sample_features(&s, 100, &mut rng).unwrap();
        let acc = crate::metrics::accuracy(&aligned.predict(&x).unwrap(), &y).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn indistinguishable_classes_land_near_chance() {
        let m = linear_model(&[0, 1]);
        let s = stats(&[(0, vec![1.0, 1.0], 1.0), (1, vec![1.0, 1.0], 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let aligned = apply(&m, classifier_alignment(&m, &s, &config(), &mut rng).unwrap());
        let (x, y) = sample_features(&s, 500, &mut rng).unwrap();
        let acc = crate::metrics::accuracy(&aligned.predict(&x).unwrap(), &y).unwrap();
        // 1000 balanced draws: 4 binomial standard deviations is ~6.3 points
        assert!((acc - 50.0).abs() < 6.5, "{acc}");
    }

    #[test]
    fn missing_stats_is_usage_error() {
        let m = linear_model(&[0, 1]);
        let s = stats(&[(0, vec![1.0, 1.0], 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(classifier_alignment(&m, &s, &config(), &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn collected_stats_match_direct_computation() {
        let m = linear_model(&[0, 1]);
        let x = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let ds = LabeledDataset::new(x, vec![0, 0, 1]).unwrap();
        let s = collect_class_stats(&m, &ds).unwrap();
        let a = &s.classes[&0];
        assert_eq!(a.mean, vec![2.0, 3.0]);
        assert_eq!(a.cov, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(s.classes[&1].cov, vec![0.0; 4]);
    }
}
