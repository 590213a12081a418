use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::autodiff::{GradTape, Var};
use crate::error::{alignment, input, Result};
use crate::fisher::FisherDiag;
use crate::model::{is_head_entry, ClassifierModel};
use crate::rng::derive_seed;
use crate::taskstream::LabeledDataset;
use crate::tensor::ParamSet;

/// Quadratic pull towards `anchor`, weighted per entry by `fisher`. Only the
/// entries present in `anchor` are penalised.
#[derive(Clone, Copy, Debug)]
pub struct EwcTerm<'a> {
    pub anchor: &'a ParamSet,
    pub fisher: &'a FisherDiag,
    pub ewc_lambda: f64,
}

/// `(ewc_lambda / 2) Σ_j F_j (θ_j - anchor_j)²` over the anchor's entries.
pub fn ewc_penalty(theta: &ParamSet, anchor: &ParamSet, fisher: &FisherDiag, ewc_lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for (name, a) in anchor {
        let t = theta
            .get(name)
            .ok_or_else(|| alignment(format!("anchor entry `{name}` missing from model")))?;
        let f = fisher
            .get(name)
            .ok_or_else(|| alignment(format!("anchor entry `{name}` missing from Fisher")))?;
        if t.shape() != a.shape() || f.shape() != a.shape() {
            return Err(alignment(format!("entry `{name}` has mismatched shapes")));
        }
        for ((&x, &y), &w) in t.data().iter().zip(a.data()).zip(f.data()) {
            total += w * (x - y) * (x - y);
        }
    }
    Ok(0.5 * ewc_lambda * total)
}

/// Adds the EWC penalty for every anchored parameter recorded on `tape`.
/// Returns `None` when nothing was anchored.
pub fn record_ewc_penalty(tape: &mut GradTape, term: &EwcTerm<'_>) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (name, a) in term.anchor {
        let Some(v) = tape.find_param(name) else {
            return Err(alignment(format!("anchor entry `{name}` not recorded on tape")));
        };
        let f = term
            .fisher
            .get(name)
            .ok_or_else(|| alignment(format!("anchor entry `{name}` missing from Fisher")))?;
        let p = tape.weighted_sq_dist(v, a.data(), f.data(), 0.5 * term.ewc_lambda)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, p)?,
            None => p,
        });
    }
    Ok(acc)
}

/// Minibatch SGD on cross-entropy with separate backbone/head learning rates.
pub fn train_task(model: &ClassifierModel, data: &LabeledDataset, config: &TrainConfig, task_id: usize) -> Result<ParamSet> {
    train_task_with(model, data, config, task_id, None, &mut |_| Ok(()))
}

/// [`train_task`] with an optional EWC term and a callback after every step.
pub(crate) fn train_task_with(
    model: &ClassifierModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    task_id: usize,
    ewc: Option<&EwcTerm<'_>>,
    on_step: &mut dyn FnMut(&ParamSet) -> Result<()>,
) -> Result<ParamSet> {
    if data.is_empty() {
        return Err(input("empty training set"));
    }
    let labels = model.label_indices(data.labels())?;
    let mut current = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", task_id as u64));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = data.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = GradTape::new();
            let xv = tape.constant(x);
            let logits = current.record(&mut tape, xv)?;
            let mut loss = tape.cross_entropy(logits, &y)?;
            if let Some(term) = ewc.filter(|t| t.ewc_lambda != 0.0) {
                if let Some(p) = record_ewc_penalty(&mut tape, term)? {
                    loss = tape.add(loss, p)?;
                }
            }
            let grads = tape.backward(loss)?;
            let mut params = current.params().clone();
            for (name, t) in params.iter_mut() {
                let lr = if is_head_entry(name) {
                    config.lr_head
                } else {
                    config.lr_backbone
                };
                let g = grads
                    .get(name)
                    .ok_or_else(|| alignment(format!("no gradient for `{name}`")))?;
                for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v -= lr * gv;
                }
            }
            current.set_params(params)?;
            on_step(current.params())?;
        }
    }
    Ok(current.params().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use crate::model::{head_bias_name, head_weight_name, init_model, Activation, MlpConfig};
    use crate::strategies::Strategy;
    use crate::tensor::Tensor;

    fn setup() -> (ClassifierModel, LabeledDataset) {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            activation: Activation::Tanh,
        };
        let m = init_model(&cfg, 1).unwrap().expand_head(&[0, 1], 1).unwrap();
        let x = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        (m, LabeledDataset::new(x, vec![0, 1, 0]).unwrap())
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (m, ds) = setup();
        let cfg = TrainConfig::new(Strategy::SeqFt, 0.0, 0.0, 3, 2, 0);
        assert_eq!(&train_task(&m, &ds, &cfg, 1).unwrap(), m.params());
    }

    #[test]
    fn single_step_matches_hand_gradient() {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
        };
        let m = init_model(&cfg, 4).unwrap().expand_head(&[0, 1, 2], 1).unwrap();
        let x = vec![0.7, -1.3];
        let ds = LabeledDataset::new(Tensor::matrix(std::slice::from_ref(&x)).unwrap(), vec![2]).unwrap();
        let tc = TrainConfig::new(Strategy::SeqFt, 0.05, 0.2, 1, 1, 0);
        let out = train_task(&m, &ds, &tc, 1).unwrap();

        let p = softmax_rows(&m.logits(ds.features()).unwrap()).into_data();
        for c in 0..3 {
            let err = p[c] - if c == 2 { 1.0 } else { 0.0 };
            let w = m.params().get(&head_weight_name(c)).unwrap().data();
            let got = out.get(&head_weight_name(c)).unwrap().data();
            for i in 0..2 {
                assert!((got[i] - (w[i] - 0.2 * err * x[i])).abs() < 1e-15);
            }
            let b = m.params().get(&head_bias_name(c)).unwrap().data()[0];
            assert!((out.get(&head_bias_name(c)).unwrap().data()[0] - (b - 0.2 * err)).abs() < 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (m, ds) = setup();
        let cfg = TrainConfig::new(Strategy::SeqFt, 0.1, 0.1, 4, 2, 7);
        assert_eq!(train_task(&m, &ds, &cfg, 1).unwrap(), train_task(&m, &ds, &cfg, 1).unwrap());
        let empty = LabeledDataset::new(Tensor::zeros(vec![1, 2]), vec![0]).unwrap();
        assert!(train_task(&m, &empty, &cfg, 1).is_ok());
    }

    #[test]
    fn ewc_penalty_values() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let f = FisherDiag::constant(&a, 1.0).unwrap();
        assert_eq!(ewc_penalty(&a, &a, &f, 3.0).unwrap(), 0.0);
        let mut t = ParamSet::new();
        t.insert("w", Tensor::vector(vec![2.0, 3.0])).unwrap();
        assert_eq!(ewc_penalty(&t, &a, &f, 2.0).unwrap(), 2.0);
        let empty = ParamSet::new();
        assert!(ewc_penalty(&empty, &a, &f, 2.0).is_err());
    }

    #[test]
    fn ewc_gradient_is_lambda_f_delta() {
        let mut th = ParamSet::new();
        th.insert("w", Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let mut anchor = ParamSet::new();
        anchor.insert("w", Tensor::vector(vec![0.0, 1.0, 1.5])).unwrap();
        let mut fv = ParamSet::new();
        fv.insert("w", Tensor::vector(vec![0.5, 2.0, 0.1])).unwrap();
        let fisher = FisherDiag::new(fv).unwrap();
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            ewc_lambda: 4.0,
        };
        let mut tape = GradTape::new();
        tape.params(&th);
        let p = record_ewc_penalty(&mut tape, &term).unwrap().unwrap();
        assert!((tape.value(p).data()[0] - ewc_penalty(&th, &anchor, &fisher, 4.0).unwrap()).abs() < 1e-15);
        let g = tape.backward(p).unwrap();
        let want: Vec<f64> = [0.3 - 0.0, -1.0 - 1.0, 2.0 - 1.5]
            .iter()
            .zip([0.5, 2.0, 0.1])
            .map(|(d, f)| 4.0 * f * d)
            .collect();
        for (a, b) in g.get("w").unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
