use std::collections::BTreeMap;
use std::time::Instant;

use super::{evaluate, train::train_task, ExperimentReport, TaskEval, TrainConfig};
use crate::error::{usage, Result};
use crate::model::ClassifierModel;
use crate::taskstream::{LabeledDataset, TaskStream};
use crate::tensor::Tensor;

/// Trains once on the pooled training data of every task. The result has a
/// single accuracy entry, measured on all test data.
pub fn joint_training(stream: &TaskStream, base: &ClassifierModel, config: &TrainConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut model = base.clone();
    for (t, task) in stream.tasks().iter().enumerate() {
        model = model.expand_head(task.train.class_set(), t + 1)?;
    }
    let pooled = stream.pooled_train()?;
    let params = train_task(&model, &pooled, config, 1)?;
    let model = model.with_params(params)?;
    let eval = evaluate(&model, &stream.seen_test(stream.num_tasks())?, stream.num_tasks())?;
    ExperimentReport::from_evals(config, vec![eval], vec![0], vec![start.elapsed().as_secs_f64()])
}

/// Nearest class mean under cosine similarity in the frozen feature space of
/// `base`. Evaluated after every task on all classes seen so far.
pub fn prototype_classifier(stream: &TaskStream, base: &ClassifierModel, config: &TrainConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut protos: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut evals = Vec::new();
    let mut times = Vec::new();
    for (t, task) in stream.tasks().iter().enumerate() {
        let start = Instant::now();
        protos.extend(class_means(base, &task.train)?);
        let test = stream.seen_test(t + 1)?;
        let feats = base.features(test.features())?;
        evals.push(TaskEval::new(t + 1, nearest_cosine(&protos, &feats)?, test.labels().to_vec())?);
        times.push(start.elapsed().as_secs_f64());
    }
    let merges = vec![0; evals.len()];
    ExperimentReport::from_evals(config, evals, merges, times)
}

fn class_means(model: &ClassifierModel, data: &LabeledDataset) -> Result<BTreeMap<usize, Vec<f64>>> {
    let feats = model.features(data.features())?;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &c) in data.labels().iter().enumerate() {
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; feats.cols()], 0));
        e.0.iter_mut().zip(feats.row(i)).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Zero vectors score `-inf`; ties go to the lowest class id.
fn nearest_cosine(protos: &BTreeMap<usize, Vec<f64>>, feats: &Tensor) -> Result<Vec<usize>> {
    let first = *protos.keys().next().ok_or_else(|| usage("no prototypes"))?;
    Ok((0..feats.rows())
        .map(|i| {
            let x = feats.row(i);
            let nx = norm(x);
            let mut best = (first, f64::NEG_INFINITY);
            for (&c, p) in protos {
                let np = norm(p);
                let s = if nx == 0.0 || np == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    x.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (nx * np)
                };
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect())
}
