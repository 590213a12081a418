//! Diagonal quadratic tasks: a testbed where a task's posterior is exactly
//! Gaussian, so Fisher-weighted averaging has a closed-form optimum to
//! compare against.

use rand::Rng;

use crate::error::{input, Result};
use crate::fisher::FisherDiag;
use crate::merge::{cofima_merge, fisher_batch_average};
use crate::tensor::{ParamMask, ParamSet, Tensor};

const ENTRY: &str = "theta";

/// Loss `½ (θ - center)ᵀ diag(precision) (θ - center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTask {
    center: Vec<f64>,
    precision: Vec<f64>,
}

impl QuadraticTask {
    pub fn new(center: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if center.len() != precision.len() || center.is_empty() {
            return Err(input("center and precision must be non-empty and equal length"));
        }
        if precision.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(input("precision entries must be positive and finite"));
        }
        Ok(QuadraticTask { center, precision })
    }

    /// Random task with centers in `[-5, 5]` and precisions in `[0.1, 10]`.
    pub fn random(rng: &mut impl Rng, dim: usize) -> Self {
        QuadraticTask {
            center: (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect(),
            precision: (0..dim).map(|_| rng.random_range(0.1..10.0)).collect(),
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.center)
            .zip(&self.precision)
            .map(|((&x, &m), &a)| a * (x - m) * (x - m))
            .sum::<f64>()
    }

    pub fn as_params(&self) -> ParamSet {
        vec_params(&self.center)
    }
}

fn vec_params(v: &[f64]) -> ParamSet {
    std::iter::once((ENTRY.to_string(), Tensor::vector(v.to_vec()))).collect()
}

fn params_vec(p: &ParamSet) -> Vec<f64> {
    p.get(ENTRY).map(|t| t.data().to_vec()).unwrap_or_default()
}

fn check_tasks(tasks: &[QuadraticTask]) -> Result<usize> {
    let d = tasks.first().ok_or_else(|| input("no tasks"))?.dim();
    if tasks.iter().any(|t| t.dim() != d) {
        return Err(input("tasks have different dimensions"));
    }
    Ok(d)
}

pub fn summed_loss(tasks: &[QuadraticTask], theta: &[f64]) -> f64 {
    tasks.iter().map(|t| t.loss(theta)).sum()
}

/// Minimiser of the summed loss: `Σ A_t μ_t / Σ A_t` element-wise.
pub fn exact_joint_optimum(tasks: &[QuadraticTask]) -> Result<Vec<f64>> {
    let d = check_tasks(tasks)?;
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for t in tasks {
        for j in 0..d {
            num[j] += t.precision[j] * t.center[j];
            den[j] += t.precision[j];
        }
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

/// Fisher of `N(center, diag(precision)⁻¹)` with respect to the mean.
pub fn fisher_of_quadratic(task: &QuadraticTask) -> FisherDiag {
    FisherDiag::new(vec_params(&task.precision)).expect("precision is positive")
}

/// Iterative Fisher-weighted merge over the tasks in order, with weight
/// `schedule(t)` on task `t` (1-based). The previous Fisher is the exact
/// Fisher of the previous task, as in the sequential algorithm.
pub fn iterative_cofima(tasks: &[QuadraticTask], schedule: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
    check_tasks(tasks)?;
    let mut star = tasks[0].as_params();
    let mask = ParamMask::all(&star);
    for t in 1..tasks.len() {
        star = cofima_merge(
            &tasks[t].as_params(),
            &fisher_of_quadratic(&tasks[t]),
            &star,
            &fisher_of_quadratic(&tasks[t - 1]),
            schedule(t + 1),
            crate::fisher::DEFAULT_EPSILON,
            &mask,
        )?;
    }
    Ok(params_vec(&star))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityReport {
    pub num_tasks: usize,
    /// Max |Fisher batch average - exact optimum|.
    pub batch_gap: f64,
    /// Max |iterative merge - exact optimum|, reported only for two tasks.
    pub two_task_gap: Option<f64>,
    pub optimum_loss: f64,
    pub iterative_loss: f64,
    /// Latest task's loss under the constant-λ and the `1/t` schedules.
    pub recency_last_loss: f64,
    pub uniform_last_loss: f64,
}

impl OptimalityReport {
    /// Largest gap that must vanish for the merge rules to be exact.
    pub fn max_gap(&self) -> f64 {
        self.two_task_gap.map_or(self.batch_gap, |g| g.max(self.batch_gap))
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn verify_merge_optimality(tasks: &[QuadraticTask], lambda: f64) -> Result<OptimalityReport> {
    check_tasks(tasks)?;
    let optimum = exact_joint_optimum(tasks)?;
    let thetas: Vec<ParamSet> = tasks.iter().map(QuadraticTask::as_params).collect();
    let fishers: Vec<FisherDiag> = tasks.iter().map(fisher_of_quadratic).collect();
    let batch = params_vec(&fisher_batch_average(&thetas, &fishers)?);
    let recency = iterative_cofima(tasks, |_| lambda)?;
    let uniform = iterative_cofima(tasks, |t| 1.0 / t as f64)?;
    let last = tasks.last().expect("non-empty");
    Ok(OptimalityReport {
        num_tasks: tasks.len(),
        batch_gap: max_abs_diff(&batch, &optimum),
        two_task_gap: (tasks.len() == 2).then(|| max_abs_diff(&recency, &optimum)),
        optimum_loss: summed_loss(tasks, &optimum),
        iterative_loss: summed_loss(tasks, &recency),
        recency_last_loss: last.loss(&recency),
        uniform_last_loss: last.loss(&uniform),
    })
}
