use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::alignment::{classifier_alignment, collect_class_stats, ClassStats};
use super::baselines::{joint_training, prototype_classifier};
use super::train::{train_task_with, EwcTerm};
use super::{evaluate, AlignMode, ExperimentReport, InitFrom, Strategy, TrainConfig};
use crate::error::{usage, Result};
use crate::fisher::{estimate_fisher_exact, estimate_fisher_mc, FisherDiag};
use crate::merge::{
    coma_merge, cofima_merge, ema_debiased, ema_update, uniform_running_avg, wise_ft_merge, EmaState,
};
use crate::model::ClassifierModel;
use crate::rng::derive_seed;
use crate::taskstream::{LabeledDataset, TaskStream};
use crate::tensor::{ParamMask, ParamSet, Tensor};

/// Snapshot handed to the observer after each task.
#[derive(Debug)]
pub struct TaskEvent<'a> {
    /// 1-based task index.
    pub task: usize,
    /// Model carrying `star`.
    pub model: &'a ClassifierModel,
    /// Fine-tuned parameters before merging.
    pub theta_t: &'a ParamSet,
    pub prev_star: Option<&'a ParamSet>,
    /// Result of the merge rule, before classifier alignment.
    pub merged: &'a ParamSet,
    /// Parameters carried to the next task.
    pub star: &'a ParamSet,
    pub mask: &'a ParamMask,
    /// Fisher of `star` on this task's data (Fisher-weighted runs only).
    pub fisher_star: Option<&'a FisherDiag>,
    pub merges: usize,
}

/// Runs a full continual experiment over `stream`, starting from `base`
/// (which must have an empty head).
pub fn run_continual(stream: &TaskStream, base: &ClassifierModel, config: &TrainConfig) -> Result<ExperimentReport> {
    run_continual_observed(stream, base, config, &mut |_| Ok(()))
}

fn fisher(model: &ClassifierModel, data: &LabeledDataset, config: &TrainConfig, task: usize) -> Result<FisherDiag> {
    match config.fisher_mc_samples {
        Some(n) => estimate_fisher_mc(model, data, n, derive_seed(config.seed, "fisher", task as u64)),
        None => estimate_fisher_exact(model, data),
    }
}

/// Per entry of the mask, the mean over the stored models holding it.
fn masked_history_mean(theta_t: &ParamSet, history: &[ParamSet], mask: &ParamMask) -> Result<ParamSet> {
    let mut out = theta_t.clone();
    for (name, t) in out.iter_mut() {
        if !mask.contains(name) {
            continue;
        }
        let held: Vec<&Tensor> = history.iter().filter_map(|h| h.get(name)).collect();
        let n = held.len() as f64;
        let mut acc = vec![0.0; t.len()];
        for h in held {
            acc.iter_mut().zip(h.data()).for_each(|(a, v)| *a += v);
        }
        *t = Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v / n).collect())?;
    }
    Ok(out)
}

/// [`run_continual`] with a callback after every task.
pub fn run_continual_observed(
    stream: &TaskStream,
    base: &ClassifierModel,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&TaskEvent<'_>) -> Result<()>,
) -> Result<ExperimentReport> {
    config.validate()?;
    if base.num_classes() != 0 {
        return Err(usage("base model must have an empty head"));
    }
    match config.strategy {
        Strategy::Joint => return joint_training(stream, base, config),
        Strategy::Prototype => return prototype_classifier(stream, base, config),
        _ => {}
    }
    let n_tasks = stream.num_tasks();
    let mut theta0 = base.clone();
    let mut star_model = base.clone();
    let mut prev_raw: Option<ParamSet> = None;
    let mut fisher_star: Option<FisherDiag> = None;
    let mut history: Vec<ParamSet> = Vec::new();
    let mut ema: Option<EmaState> = None;
    let mut stats = ClassStats::default();
    let mut evals = Vec::with_capacity(n_tasks);
    let mut merges = Vec::with_capacity(n_tasks);
    let mut times = Vec::with_capacity(n_tasks);

    for (i, task) in stream.tasks().iter().enumerate() {
        let t = i + 1;
        let clock = Instant::now();
        let classes = task.train.class_set();
        theta0 = theta0.expand_head(classes, t)?;
        let model = match config.init_from {
            InitFrom::PrevMerged => star_model.expand_head(classes, t)?,
            InitFrom::Pretrained => theta0.clone(),
        };
        let prev_star = (t > 1).then(|| star_model.params().clone());

        let ewc_fisher = match (config.strategy, &prev_star) {
            (Strategy::Ewc, Some(_)) if config.ewc_lambda != 0.0 => {
                Some(fisher(&star_model, &stream.tasks()[i - 1].train, config, t - 1)?)
            }
            _ => None,
        };
        let ewc = match (&prev_star, &ewc_fisher) {
            (Some(anchor), Some(f)) => Some(EwcTerm {
                anchor,
                fisher: f,
                ewc_lambda: config.ewc_lambda,
            }),
            _ => None,
        };

        if config.strategy == Strategy::Ema {
            let state = match ema.take() {
                Some(mut s) => {
                    s.track_new_entries(model.params());
                    s
                }
                None => EmaState::new(model.params(), config.ema_beta)?,
            };
            ema = Some(state);
        }
        let mut on_step = |p: &ParamSet| -> Result<()> {
            if let Some(s) = ema.as_mut() {
                *s = ema_update(s, p)?;
            }
            Ok(())
        };
        let theta_t = train_task_with(&model, &task.train, config, t, ewc.as_ref(), &mut on_step)?;
        let tuned = model.with_params(theta_t.clone())?;
        let mask = tuned.shared_param_mask(t);
        let all = ParamMask::all(&theta_t);

        let (merged, n_merges) = match (config.strategy, &prev_star) {
            (Strategy::SeqFt | Strategy::Ewc, _) => (theta_t.clone(), 0),
            (Strategy::Coma | Strategy::Cofima | Strategy::UniformRunning | Strategy::BatchAverage, None) => {
                (theta_t.clone(), 0)
            }
            (Strategy::Coma, Some(p)) => (coma_merge(&theta_t, p, config.lambda, &mask)?, 1),
            (Strategy::Cofima, Some(p)) => {
                let f_t = fisher(&tuned, &task.train, config, t)?;
                let f_prev = fisher_star.as_ref().ok_or_else(|| usage("missing previous Fisher"))?;
                (cofima_merge(&theta_t, &f_t, p, f_prev, config.lambda, config.epsilon, &mask)?, 1)
            }
            (Strategy::UniformRunning, Some(p)) => (uniform_running_avg(&theta_t, p, t, &mask)?, 1),
            (Strategy::BatchAverage, Some(_)) => {
                history.push(theta_t.clone());
                (masked_history_mean(&theta_t, &history, &mask)?, 1)
            }
            (Strategy::WiseFtTheta0, _) => (wise_ft_merge(&theta_t, theta0.params(), config.lambda, &all)?, 1),
            (Strategy::WiseFtPrev, _) => match &prev_raw {
                Some(p) => (wise_ft_merge(&theta_t, p, config.lambda, &mask)?, 1),
                None => (wise_ft_merge(&theta_t, theta0.params(), config.lambda, &all)?, 1),
            },
            (Strategy::Ema, _) => {
                let avg = ema_debiased(ema.as_ref().ok_or_else(|| usage("EMA state missing"))?)?;
                (coma_merge(&theta_t, &avg, 0.0, &mask)?, 1)
            }
            (Strategy::Prototype | Strategy::Joint, _) => unreachable!("handled above"),
        };
        if config.strategy == Strategy::BatchAverage && prev_star.is_none() {
            history.push(theta_t.clone());
        }

        let mut star_params = merged.clone();
        if config.ca_enabled {
            let merged_model = tuned.with_params(merged.clone())?;
            stats.extend(collect_class_stats(&merged_model, &task.train)?);
            if config.ca_mode == AlignMode::EveryTask || t == n_tasks {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "align", t as u64));
                for (name, v) in &classifier_alignment(&merged_model, &stats, config, &mut rng)? {
                    star_params.set(name.clone(), v.clone());
                }
            }
        }
        star_model = tuned.with_params(star_params)?;
        if config.strategy == Strategy::Cofima {
            fisher_star = Some(fisher(&star_model, &task.train, config, t)?);
        }

        evals.push(evaluate(&star_model, &stream.seen_test(t)?, t)?);
        merges.push(n_merges);
        times.push(clock.elapsed().as_secs_f64());
        observer(&TaskEvent {
            task: t,
            model: &star_model,
            theta_t: &theta_t,
            prev_star: prev_star.as_ref(),
            merged: &merged,
            star: star_model.params(),
            mask: &mask,
            fisher_star: fisher_star.as_ref(),
            merges: n_merges,
        })?;
        prev_raw = Some(theta_t);
    }
    ExperimentReport::from_evals(config, evals, merges, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, MlpConfig};
    use crate::taskstream::{gen_gaussian_stream, StreamConfig};

    fn stream() -> TaskStream {
        gen_gaussian_stream(&StreamConfig {
            num_tasks: 3,
            classes_per_task: 2,
            samples_per_class: 15,
            feature_dim: 4,
            class_separation: 3.0,
            within_class_std: 0.7,
            seed: 9,
        })
        .unwrap()
    }

    fn base() -> ClassifierModel {
        let cfg = MlpConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            activation: Activation::Tanh,
        };
        init_model(&cfg, 2).unwrap()
    }

    fn cfg(s: Strategy) -> TrainConfig {
        TrainConfig::new(s, 0.05, 0.2, 2, 8, 4)
    }

    #[test]
    fn coma_events_follow_the_recursion() {
        let mut seen = 0;
        run_continual_observed(&stream(), &base(), &cfg(Strategy::Coma), &mut |e| {
            seen += 1;
            match e.prev_star {
                None => assert_eq!(e.star, e.theta_t),
                Some(p) => {
                    for (name, v) in e.star {
                        let a = e.theta_t.get(name).unwrap().data();
                        let want: Vec<f64> = if e.mask.contains(name) {
                            a.iter().zip(p.get(name).unwrap().data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect()
                        } else {
                            a.to_vec()
                        };
                        assert_eq!(v.data(), &want[..]);
                    }
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
    }

    #[test]
    fn cofima_fisher_is_taken_at_the_stored_star() {
        let s = stream();
        run_continual_observed(&s, &base(), &cfg(Strategy::Cofima), &mut |e| {
            let want = estimate_fisher_exact(e.model, &s.tasks()[e.task - 1].train)?;
            assert_eq!(e.fisher_star.unwrap(), &want);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn lambda_one_reduces_to_sequential() {
        let mut c = cfg(Strategy::Coma);
        c.lambda = 1.0;
        let a = run_continual(&stream(), &base(), &c).unwrap();
        let b = run_continual(&stream(), &base(), &cfg(Strategy::SeqFt)).unwrap();
        assert!(a.same_results(&b));
        let mut e = cfg(Strategy::Ewc);
        e.ewc_lambda = 0.0;
        assert!(run_continual(&stream(), &base(), &e).unwrap().same_results(&b));
    }

    #[test]
    fn runs_are_reproducible_for_every_strategy() {
        for s in [
            Strategy::SeqFt,
            Strategy::Coma,
            Strategy::Cofima,
            Strategy::UniformRunning,
            Strategy::BatchAverage,
            Strategy::WiseFtTheta0,
            Strategy::WiseFtPrev,
            Strategy::Ema,
            Strategy::Ewc,
            Strategy::Prototype,
            Strategy::Joint,
        ] {
            let mut c = cfg(s);
            c.ewc_lambda = 1.0;
            let a = run_continual(&stream(), &base(), &c).unwrap();
            let b = run_continual(&stream(), &base(), &c).unwrap();
            assert!(a.same_results(&b), "{s}");
            assert_eq!(a.strategy, s);
        }
    }

    #[test]
    fn merge_counts() {
        let r = run_continual(&stream(), &base(), &cfg(Strategy::Cofima)).unwrap();
        assert_eq!(r.merges_per_task, vec![0, 1, 1]);
        let r = run_continual(&stream(), &base(), &cfg(Strategy::Ema)).unwrap();
        assert_eq!(r.merges_per_task, vec![1, 1, 1]);
    }

    #[test]
    fn alignment_only_touches_the_head() {
        let mut c = cfg(Strategy::Coma);
        c.ca_enabled = true;
        run_continual_observed(&stream(), &base(), &c, &mut |e| {
            for (name, v) in e.star {
                if !crate::model::is_head_entry(name) {
                    assert_eq!(v, e.merged.get(name).unwrap());
                }
            }
            Ok(())
        })
        .unwrap();
    }
}
