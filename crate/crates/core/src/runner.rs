//! Library side of the command-line tool: every subcommand is a plain
//! function that writes its artifacts and returns a value to print.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{input, usage, Error, Result};
use crate::fisher::{estimate_fisher_exact, estimate_fisher_mc};
use crate::merge::{cofima_merge, coma_merge};
use crate::metrics::{self, report_csv};
use crate::model::{init_model, ClassifierModel, MlpConfig};
use crate::oracle::{verify_merge_optimality, QuadraticTask};
use crate::rng::derive_seed;
use crate::strategies::{evaluate, run_continual, run_continual_observed, ExperimentReport, Strategy};
use crate::taskstream::load_csv_dataset;
use crate::tensor::ParamMask;

/// Environment variable capping the sweep worker pool.
pub const THREADS_ENV: &str = "MERGECL_THREADS";

/// `%g`-style rendering with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mant, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let mant = if mant.contains('.') {
        mant.trim_end_matches('0').trim_end_matches('.')
    } else {
        mant
    };
    format!("{mant}{exp}")
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: String,
    report: &'a ExperimentReport,
}

#[derive(Serialize)]
struct RunMeta {
    started_unix_s: f64,
    finished_unix_s: f64,
    wall_time_s: f64,
    task_wall_time_s: Vec<f64>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn theta_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("theta_star_t{t}.ckpt"))
}

pub fn fisher_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("fisher_star_t{t}.ckpt"))
}

/// Runs the configured experiment and writes, under `out`:
/// per-task `theta_star_t{t}.ckpt` (plus `fisher_star_t{t}.ckpt` for
/// Fisher-weighted runs), `metrics.csv`, `summary.json` and `run_meta.json`.
/// Only `run_meta.json` holds timestamps.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let started = unix_now();
    let clock = Instant::now();
    fs::create_dir_all(out)?;
    let stream = cfg.build_stream()?;
    let base = init_model(&cfg.model, cfg.train.seed)?;
    let hash = cfg.hash();
    let meta_for = |t: usize| {
        let mut c = Checkpoint::new(Default::default());
        c.meta.task = Some(t);
        c.meta.strategy = Some(cfg.train.strategy.name().to_string());
        c.meta.config_hash = Some(hash.clone());
        c.meta.seed = Some(cfg.train.seed);
        c.meta.model = Some(cfg.model.clone());
        c.meta
    };
    let report = run_continual_observed(&stream, &base, &cfg.train, &mut |e| {
        let mut ck = Checkpoint::new(e.star.clone());
        ck.meta = meta_for(e.task);
        save_checkpoint(&theta_path(out, e.task), &ck)?;
        if let Some(f) = e.fisher_star {
            let mut fk = Checkpoint::fisher_only(f)?;
            fk.meta = meta_for(e.task);
            save_checkpoint(&fisher_path(out, e.task), &fk)?;
        }
        Ok(())
    })?;
    let csv = report_csv(&report.acc_matrix, report.strategy.name(), report.lambda, report.seed)?;
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let summary = Summary {
        config_hash: hash.clone(),
        report: &report,
    };
    write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary).expect("serialisable"))?;
    let meta = RunMeta {
        started_unix_s: started,
        finished_unix_s: unix_now(),
        wall_time_s: clock.elapsed().as_secs_f64(),
        task_wall_time_s: report.wall_time_s.clone(),
    };
    write_atomic(&out.join("run_meta.json"), &serde_json::to_vec_pretty(&meta).expect("serialisable"))?;
    Ok(report)
}

/// Parses `"0,0.1,0.5"` or `"start:step:end"` (inclusive).
pub fn parse_lambda_grid(s: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| input(format!("bad number `{p}` in grid"))))
            .collect::<Result<_>>()?;
        let [a, step, b] = parts[..] else {
            return Err(input("range grid must be start:step:end"));
        };
        if !(step > 0.0) || b < a {
            return Err(input("range grid needs step > 0 and end >= start"));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| a + i as f64 * step).map(|v| (v * 1e12).round() / 1e12).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| input(format!("bad number `{p}` in grid"))))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(input("lambda grid values must lie in [0, 1]"));
    }
    Ok(grid)
}

/// Parses `"0..4"` (inclusive) or `"1,5,9"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |p: &str| input(format!("bad seed `{p}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(a))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(b))?;
        if b < a {
            return Err(input("seed range end is below its start"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad(p))).collect()
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub last_acc: f64,
    pub inc_acc: f64,
}

pub const SWEEP_CSV_HEADER: &str = "lambda,seed,strategy,last_acc,inc_acc";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{:?},{},{},{:?},{:?}", r.lambda, r.seed, r.strategy, r.last_acc, r.inc_acc);
    }
    s
}

/// Worker count: the `MERGECL_THREADS` cap if set, else all cores.
pub fn worker_threads() -> Result<usize> {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(avail)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(avail),
    }
}

/// Cartesian product of strategies x lambdas x seeds. Rows come back in
/// that nesting order regardless of scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, strategies: &[Strategy], lambdas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for &s in strategies {
        for &l in lambdas {
            for &seed in seeds {
                let mut c = cfg.clone();
                c.train.strategy = s;
                c.train.lambda = l;
                c.set_seed(seed);
                c.validate()?;
                jobs.push(c);
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| usage(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|c| {
                let stream = c.build_stream()?;
                let base = init_model(&c.model, c.train.seed)?;
                let r = run_continual(&stream, &base, &c.train)?;
                Ok(SweepRow {
                    lambda: c.train.lambda,
                    seed: c.train.seed,
                    strategy: c.train.strategy,
                    last_acc: r.last_acc,
                    inc_acc: r.inc_acc,
                })
            })
            .collect()
    })
}

/// Mean last-accuracy per (strategy, lambda), in first-seen order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(Strategy, f64, f64)> {
    let mut out: Vec<(Strategy, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(s, l, _, _)| *s == r.strategy && *l == r.lambda) {
            Some(e) => {
                e.2 += r.last_acc;
                e.3 += 1;
            }
            None => out.push((r.strategy, r.lambda, r.last_acc, 1)),
        }
    }
    out.into_iter().map(|(s, l, sum, n)| (s, l, sum / n as f64)).collect()
}

/// Merges two checkpoints; Fisher-weighted when both Fisher files are given.
pub fn merge_checkpoints(
    a: &Path,
    b: &Path,
    lambda: f64,
    fisher_a: Option<&Path>,
    fisher_b: Option<&Path>,
    epsilon: f64,
    out: &Path,
) -> Result<Checkpoint> {
    let ca = load_checkpoint(a)?;
    let cb = load_checkpoint(b)?;
    let (pa, pb) = (ca.params(), cb.params());
    pa.check_aligned(&pb)?;
    let mask = ParamMask::all(&pa);
    let merged = match (fisher_a, fisher_b) {
        (None, None) => coma_merge(&pa, &pb, lambda, &mask)?,
        (Some(fa), Some(fb)) => {
            let load_f = |p: &Path| -> Result<_> {
                load_checkpoint(p)?
                    .fisher()?
                    .ok_or_else(|| input(format!("{} holds no Fisher entries", p.display())))
            };
            let (fa, fb) = (load_f(fa)?, load_f(fb)?);
            fa.check_aligned(&pa)?;
            fb.check_aligned(&pa)?;
            cofima_merge(&pa, &fa, &pb, &fb, lambda, epsilon, &mask)?
        }
        _ => return Err(usage("give both Fisher files or neither")),
    };
    let mut ck = Checkpoint::new(merged);
    ck.meta.model = ca.meta.model.clone();
    ck.meta.seed = ca.meta.seed;
    ck.meta.strategy = Some(if fisher_a.is_some() { "cofima" } else { "coma" }.to_string());
    save_checkpoint(out, &ck)?;
    Ok(ck)
}

fn model_from_checkpoint(ck: &Checkpoint, fallback: Option<&MlpConfig>) -> Result<ClassifierModel> {
    let cfg = ck
        .meta
        .model
        .as_ref()
        .or(fallback)
        .ok_or_else(|| usage("checkpoint has no model description; pass --config"))?;
    ClassifierModel::from_params(cfg, ck.meta.seed.unwrap_or(0), ck.params())
}

/// Fisher of a checkpoint on a CSV dataset, written as a Fisher container.
pub fn fisher_command(
    ckpt: &Path,
    data: &Path,
    mc_samples: Option<usize>,
    seed: u64,
    model: Option<&MlpConfig>,
    out: &Path,
) -> Result<Checkpoint> {
    let ck = load_checkpoint(ckpt)?;
    let m = model_from_checkpoint(&ck, model)?;
    let ds = load_csv_dataset(data)?;
    let f = match mc_samples {
        Some(n) => estimate_fisher_mc(&m, &ds, n, seed)?,
        None => estimate_fisher_exact(&m, &ds)?,
    };
    let mut fk = Checkpoint::fisher_only(&f)?;
    fk.meta = ck.meta.clone();
    save_checkpoint(out, &fk)?;
    Ok(fk)
}

/// Accuracy (%) of a checkpoint on each task's test split and on all of them.
pub fn eval_command(ckpt: &Path, cfg: &ExperimentConfig) -> Result<(Vec<f64>, f64)> {
    let ck = load_checkpoint(ckpt)?;
    let m = model_from_checkpoint(&ck, Some(&cfg.model))?;
    let stream = cfg.build_stream()?;
    let per_task = stream
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, task)| Ok(evaluate(&m, &task.test, t + 1)?.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let all = evaluate(&m, &stream.seen_test(stream.num_tasks())?, 0)?.accuracy;
    Ok((per_task, all))
}

/// Accuracy (%) of a checkpoint on a CSV dataset.
pub fn eval_csv(ckpt: &Path, data: &Path, model: Option<&MlpConfig>) -> Result<f64> {
    let ck = load_checkpoint(ckpt)?;
    let m = model_from_checkpoint(&ck, model)?;
    let ds = load_csv_dataset(data)?;
    metrics::accuracy(&m.predict(ds.features())?, ds.labels())
}

/// Largest optimality gap over `trials` random quadratic instances.
pub fn oracle_command(trials: usize, dim: usize, tasks: usize, seed: u64) -> Result<Vec<f64>> {
    if trials == 0 || dim == 0 || tasks == 0 {
        return Err(input("trials, dim and tasks must be >= 1"));
    }
    (0..trials)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "oracle", i as u64));
            let qs: Vec<QuadraticTask> = (0..tasks).map(|_| QuadraticTask::random(&mut rng, dim)).collect();
            Ok(verify_merge_optimality(&qs, 0.5)?.max_gap())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(83.33333333), "83.3333");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(-2.5e-12), "-2.5e-12");
        assert_eq!(sig6(100.0), "100");
    }

    #[test]
    fn grid_and_seed_parsing() {
        let g = parse_lambda_grid("0:0.1:1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
        assert_eq!(parse_lambda_grid("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_lambda_grid("0,1.5").is_err());
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("3,7").unwrap(), vec![3, 7]);
        assert!(parse_seeds("4..1").is_err());
    }

    #[test]
    fn single_task_oracle_gap_is_zero() {
        assert!(oracle_command(20, 7, 1, 3).unwrap().iter().all(|&g| g == 0.0));
        assert!(oracle_command(20, 7, 2, 3).unwrap().iter().all(|&g| g < 1e-12));
    }
}
