//! Diagonal Fisher information of a classifier's predictive distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, GradTape};
use crate::error::{alignment, input, Result};
use crate::model::ClassifierModel;
use crate::rng::derive_seed;
use crate::taskstream::LabeledDataset;
use crate::tensor::{ParamSet, Tensor};

/// Default lower bound applied to Fisher values inside weighted merges.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Non-negative per-parameter Fisher values aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    values: ParamSet,
}

impl FisherDiag {
    /// Wraps `values`, rejecting negative or non-finite entries.
    pub fn new(values: ParamSet) -> Result<Self> {
        for (name, t) in &values {
            if t.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(input(format!("Fisher entry `{name}` has a negative or non-finite value")));
            }
        }
        Ok(FisherDiag { values })
    }

    /// Same value `c` everywhere, shaped like `like`.
    pub fn constant(like: &ParamSet, c: f64) -> Result<Self> {
        let mut v = like.zeros_like();
        for (_, t) in v.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = c);
        }
        FisherDiag::new(v)
    }

    pub fn values(&self) -> &ParamSet {
        &self.values
    }

    pub fn into_values(self) -> ParamSet {
        self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        self.values.check_aligned(params)
    }
}

/// Entry-wise `max(entry, epsilon)`.
pub fn fisher_floor(f: &FisherDiag, epsilon: f64) -> Result<FisherDiag> {
    if !(epsilon > 0.0) {
        return Err(input("epsilon must be > 0"));
    }
    let mut v = f.values.clone();
    for (_, t) in v.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = x.max(epsilon));
    }
    Ok(FisherDiag { values: v })
}

/// Per-example forward pass; returns the tape, the logit node and p(y|x).
fn single_example(model: &ClassifierModel, x: &[f64]) -> Result<(GradTape, crate::autodiff::Var, Vec<f64>)> {
    let mut tape = GradTape::new();
    let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let logits = model.record(&mut tape, xv)?;
    let p = softmax_rows(tape.value(logits)).into_data();
    Ok((tape, logits, p))
}

/// Gradient of `log p(k | x)` via the logit-space seed `e_k - p`.
fn log_lik_grad(tape: &GradTape, logits: crate::autodiff::Var, p: &[f64], k: usize) -> Result<ParamSet> {
    let mut seed: Vec<f64> = p.iter().map(|v| -v).collect();
    seed[k] += 1.0;
    tape.backward_seeded(logits, &Tensor::new(vec![1, p.len()], seed)?)
}

fn add_weighted_square(acc: &mut ParamSet, g: &ParamSet, w: f64) -> Result<()> {
    for (name, t) in g {
        let a = acc
            .get_mut(name)
            .ok_or_else(|| alignment(format!("gradient entry `{name}` not in model")))?;
        for (x, gv) in a.data_mut().iter_mut().zip(t.data()) {
            *x += w * gv * gv;
        }
    }
    Ok(())
}

fn finish(mut acc: ParamSet, n: usize) -> Result<FisherDiag> {
    let inv = 1.0 / n as f64;
    for (_, t) in acc.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    FisherDiag::new(acc)
}

/// Fisher diagonal with the label expectation computed exactly by
/// enumerating every class, weighted by the model's own probabilities.
pub fn estimate_fisher_exact(model: &ClassifierModel, data: &LabeledDataset) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(input("empty dataset"));
    }
    let mut acc = model.params().zeros_like();
    let x = data.features();
    for i in 0..data.len() {
        let (tape, logits, p) = single_example(model, x.row(i))?;
        for (k, &pk) in p.iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            let g = log_lik_grad(&tape, logits, &p, k)?;
            add_weighted_square(&mut acc, &g, pk)?;
        }
    }
    finish(acc, data.len())
}

/// Monte Carlo variant: labels are drawn from `p(y|x)` instead of enumerated.
pub fn estimate_fisher_mc(
    model: &ClassifierModel,
    data: &LabeledDataset,
    samples_per_point: usize,
    seed: u64,
) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(input("empty dataset"));
    }
    if samples_per_point == 0 {
        return Err(input("samples_per_point must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fisher-mc", 0));
    let mut acc = model.params().zeros_like();
    let x = data.features();
    let w = 1.0 / samples_per_point as f64;
    for i in 0..data.len() {
        let (tape, logits, p) = single_example(model, x.row(i))?;
        // Gradients for each class are computed lazily and reused across draws.
        let mut cache: Vec<Option<ParamSet>> = vec![None; p.len()];
        let mut counts = vec![0usize; p.len()];
        for _ in 0..samples_per_point {
            counts[sample_index(&p, rng.random::<f64>())] += 1;
        }
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                continue;
            }
            let g = match &cache[k] {
                Some(g) => g,
                None => cache[k].insert(log_lik_grad(&tape, logits, &p, k)?),
            };
            add_weighted_square(&mut acc, g, w * cnt as f64)?;
        }
    }
    finish(acc, data.len())
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut c = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        c += pk;
        if u < c {
            return k;
        }
    }
    p.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{head_bias_name, head_weight_name, init_model, Activation, MlpConfig};

    fn linear(dim: usize, classes: &[usize]) -> ClassifierModel {
        let cfg = MlpConfig {
            input_dim: dim,
            hidden_dims: vec![],
            activation: Activation::Tanh,
        };
        init_model(&cfg, 0).unwrap().expand_head(classes, 1).unwrap()
    }

    fn zero_params(m: &ClassifierModel) -> ClassifierModel {
        m.with_params(m.params().zeros_like()).unwrap()
    }

    #[test]
    fn two_class_uniform_logits_give_quarter() {
        let m = zero_params(&linear(1, &[0, 1]));
        let ds = LabeledDataset::new(Tensor::matrix(&[vec![1.0]]).unwrap(), vec![0]).unwrap();
        let f = estimate_fisher_exact(&m, &ds).unwrap();
        for c in 0..2 {
            assert!((f.get(&head_weight_name(c)).unwrap().data()[0] - 0.25).abs() < 1e-15);
            assert!((f.get(&head_bias_name(c)).unwrap().data()[0] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_kills_weight_entries() {
        let m = linear(3, &[0, 1, 2]);
        let ds = LabeledDataset::new(Tensor::zeros(vec![1, 3]), vec![1]).unwrap();
        let f = estimate_fisher_exact(&m, &ds).unwrap();
        let p = m.logits(ds.features()).unwrap();
        let p = softmax_rows(&p);
        for j in 0..3 {
            assert!(f.get(&head_weight_name(j)).unwrap().data().iter().all(|&v| v == 0.0));
            let want: f64 = (0..3)
                .map(|k| {
                    let d = if k == j { 1.0 } else { 0.0 } - p.data()[j];
                    p.data()[k] * d * d
                })
                .sum();
            assert!((f.get(&head_bias_name(j)).unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicating_data_leaves_fisher_unchanged() {
        let m = linear(2, &[0, 1, 2]);
        let x = Tensor::matrix(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let ds = LabeledDataset::new(x, vec![0, 2]).unwrap();
        let twice = LabeledDataset::concat([&ds, &ds]).unwrap();
        let a = estimate_fisher_exact(&m, &ds).unwrap();
        let b = estimate_fisher_exact(&m, &twice).unwrap();
        assert!(a.values().max_abs_diff(b.values()).unwrap() < 1e-15);
    }

    #[test]
    fn single_class_mc_equals_exact() {
        let m = linear(2, &[4]);
        let x = Tensor::matrix(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let ds = LabeledDataset::new(x, vec![4, 4]).unwrap();
        let a = estimate_fisher_exact(&m, &ds).unwrap();
        let b = estimate_fisher_mc(&m, &ds, 7, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_is_seed_deterministic() {
        let m = linear(2, &[0, 1, 2]);
        let x = Tensor::matrix(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let ds = LabeledDataset::new(x, vec![0, 2]).unwrap();
        assert_eq!(
            estimate_fisher_mc(&m, &ds, 50, 3).unwrap(),
            estimate_fisher_mc(&m, &ds, 50, 3).unwrap()
        );
        assert!(estimate_fisher_mc(&m, &ds, 0, 3).is_err());
    }

    #[test]
    fn floor_behaviour() {
        let m = linear(2, &[0, 1]);
        let zero = FisherDiag::constant(m.params(), 0.0).unwrap();
        let f = fisher_floor(&zero, 1e-8).unwrap();
        assert!(f.values().flatten().iter().all(|&v| v == 1e-8));
        let big = FisherDiag::constant(m.params(), 0.5).unwrap();
        assert_eq!(fisher_floor(&big, 1e-8).unwrap(), big);
        assert_eq!(fisher_floor(&f, 1e-8).unwrap(), f);
        assert!(fisher_floor(&f, 0.0).is_err());
    }

    #[test]
    fn negative_entries_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, -1e-3])).unwrap();
        assert!(FisherDiag::new(p).is_err());
    }
}
