//! Weight-space combination rules.
//!
//! Every masked merge walks the entries of the freshly fine-tuned model
//! `theta_t`. Entries inside the mask are combined with the previous merged
//! model; entries outside it (head rows of the current task's classes) are
//! copied from `theta_t` unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{alignment, input, usage, Error, Result};
use crate::fisher::FisherDiag;
use crate::tensor::{ParamMask, ParamSet, Tensor};

/// Default model-level weight of the newest model.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Default EMA decay.
pub const DEFAULT_EMA_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Coma,
    Cofima,
    UniformRunning,
    BatchAverage,
    WiseFtTheta0,
    WiseFtPrev,
    Ema,
}

/// Fully determines a merge: rule, weight, Fisher floor and shared entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeSpec {
    pub strategy: MergeStrategy,
    pub lambda: f64,
    pub epsilon: f64,
    pub mask: ParamMask,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(input(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Looks up the partner tensor for a masked entry and checks its shape.
fn partner<'a>(other: &'a ParamSet, name: &str, like: &Tensor, what: &str) -> Result<&'a Tensor> {
    let t = other
        .get(name)
        .ok_or_else(|| alignment(format!("masked entry `{name}` missing from {what}")))?;
    if t.shape() != like.shape() {
        return Err(alignment(format!(
            "entry `{name}` has shape {:?} in {what} vs {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t)
}

fn check_mask(mask: &ParamMask, theta_t: &ParamSet) -> Result<()> {
    mask.check_against(theta_t)
}

/// `lambda * theta_t + (1 - lambda) * theta_prev_star` on masked entries.
pub fn coma_merge(theta_t: &ParamSet, theta_prev_star: &ParamSet, lambda: f64, mask: &ParamMask) -> Result<ParamSet> {
    check_lambda(lambda)?;
    check_mask(mask, theta_t)?;
    let mut out = ParamSet::new();
    for (name, a) in theta_t {
        let t = if mask.contains(name) {
            let b = partner(theta_prev_star, name, a, "previous model")?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else {
            a.clone()
        };
        out.set(name.clone(), t);
    }
    Ok(out)
}

/// Fisher-weighted update
/// `(λ F_t θ_t + (1-λ) F* θ*) / (λ F_t + (1-λ) F*)`, element-wise.
///
/// Both Fisher operands are floored at `epsilon` before weighting, so a pair
/// of zero Fishers degrades to [`coma_merge`]. The floor is not stored.
#[allow(clippy::too_many_arguments)]
pub fn cofima_merge(
    theta_t: &ParamSet,
    fisher_t: &FisherDiag,
    theta_prev_star: &ParamSet,
    fisher_prev_star: &FisherDiag,
    lambda: f64,
    epsilon: f64,
    mask: &ParamMask,
) -> Result<ParamSet> {
    check_lambda(lambda)?;
    if !(epsilon > 0.0) {
        return Err(input("epsilon must be > 0"));
    }
    check_mask(mask, theta_t)?;
    let mut out = ParamSet::new();
    for (name, a) in theta_t {
        let t = if mask.contains(name) {
            let b = partner(theta_prev_star, name, a, "previous model")?;
            let fa = partner(fisher_t.values(), name, a, "current Fisher")?;
            let fb = partner(fisher_prev_star.values(), name, a, "previous Fisher")?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .zip(fa.data().iter().zip(fb.data()))
                .map(|((&x, &y), (&f1, &f2))| {
                    let w1 = lambda * f1.max(epsilon);
                    let w2 = (1.0 - lambda) * f2.max(epsilon);
                    (w1 * x + w2 * y) / (w1 + w2)
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else {
            a.clone()
        };
        out.set(name.clone(), t);
    }
    Ok(out)
}

/// Running uniform average: weight `1/t` on the newest model (t is 1-based).
pub fn uniform_running_avg(theta_t: &ParamSet, theta_star_prev: &ParamSet, t: usize, mask: &ParamMask) -> Result<ParamSet> {
    if t == 0 {
        return Err(input("task index must be >= 1"));
    }
    if t == 1 {
        check_mask(mask, theta_t)?;
        return Ok(theta_t.clone());
    }
    coma_merge(theta_t, theta_star_prev, 1.0 / t as f64, mask)
}

/// Interpolation towards a fixed anchor (pre-trained or previous model).
pub fn wise_ft_merge(theta_ft: &ParamSet, theta_anchor: &ParamSet, lambda: f64, mask: &ParamMask) -> Result<ParamSet> {
    coma_merge(theta_ft, theta_anchor, lambda, mask)
}

/// Element-wise mean of mutually aligned parameter sets.
pub fn batch_average(thetas: &[ParamSet]) -> Result<ParamSet> {
    let first = thetas.first().ok_or_else(|| input("nothing to average"))?;
    for th in &thetas[1..] {
        first.check_aligned(th)?;
    }
    let n = thetas.len() as f64;
    let mut out = first.zeros_like();
    for th in thetas {
        for ((_, acc), (_, t)) in out.iter_mut().zip(th) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
    }
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Fisher-precision-weighted mean `Σ F_t θ_t / Σ F_t`.
pub fn fisher_batch_average(thetas: &[ParamSet], fishers: &[FisherDiag]) -> Result<ParamSet> {
    let first = thetas.first().ok_or_else(|| input("nothing to average"))?;
    if thetas.len() != fishers.len() {
        return Err(input(format!("{} models but {} Fishers", thetas.len(), fishers.len())));
    }
    for (th, f) in thetas.iter().zip(fishers) {
        first.check_aligned(th)?;
        f.check_aligned(first)?;
    }
    let mut num = first.zeros_like();
    let mut den = first.zeros_like();
    for (th, f) in thetas.iter().zip(fishers) {
        for (((_, n), (_, d)), ((_, t), (_, fv))) in
            num.iter_mut().zip(den.iter_mut()).zip(th.iter().zip(f.values()))
        {
            for ((nv, dv), (&x, &w)) in n.data_mut().iter_mut().zip(d.data_mut()).zip(t.data().iter().zip(fv.data())) {
                *nv += w * x;
                *dv += w;
            }
        }
    }
    for ((name, n), (_, d)) in num.iter_mut().zip(den.iter()) {
        for (nv, &dv) in n.data_mut().iter_mut().zip(d.data()) {
            if !(dv > 0.0) {
                return Err(Error::Numerical(format!("zero total Fisher in `{name}`")));
            }
            *nv /= dv;
        }
    }
    Ok(num)
}

/// Running exponential average of parameters with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    running: ParamSet,
    step: u64,
    beta: f64,
}

impl EmaState {
    /// Zero-initialised state shaped like `like`.
    pub fn new(like: &ParamSet, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(input(format!("beta {beta} outside [0, 1)")));
        }
        Ok(EmaState {
            running: like.zeros_like(),
            step: 0,
            beta,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn running(&self) -> &ParamSet {
        &self.running
    }

    /// Adds entries of `params` not yet tracked, scaled so that their
    /// debiased value equals the given parameters.
    pub fn track_new_entries(&mut self, params: &ParamSet) {
        let scale = 1.0 - self.beta.powi(self.step as i32);
        for (name, t) in params {
            if !self.running.contains(name) {
                self.running.set(name.clone(), t.map(|v| v * scale));
            }
        }
    }
}

/// `running <- beta * running + (1 - beta) * theta_m`; advances the step.
pub fn ema_update(state: &EmaState, theta_m: &ParamSet) -> Result<EmaState> {
    state.running.check_aligned(theta_m)?;
    let b = state.beta;
    let mut running = state.running.clone();
    for ((_, r), (_, t)) in running.iter_mut().zip(theta_m) {
        for (rv, &x) in r.data_mut().iter_mut().zip(t.data()) {
            *rv = b * *rv + (1.0 - b) * x;
        }
    }
    Ok(EmaState {
        running,
        step: state.step + 1,
        beta: b,
    })
}

/// Bias-corrected average `running / (1 - beta^m)`.
pub fn ema_debiased(state: &EmaState) -> Result<ParamSet> {
    if state.step == 0 {
        return Err(usage("debiased EMA needs at least one update"));
    }
    let c = 1.0 - state.beta.powi(state.step as i32);
    let mut out = state.running.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(vals: &[(&str, Vec<f64>)]) -> ParamSet {
        vals.iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
            .collect()
    }

    fn fisher(vals: &[(&str, Vec<f64>)]) -> FisherDiag {
        FisherDiag::new(ps(vals)).unwrap()
    }

    #[test]
    fn coma_hand_cases() {
        let a = ps(&[("w", vec![2.0, 4.0])]);
        let b = ps(&[("w", vec![0.0, 0.0])]);
        let m = ParamMask::all(&a);
        assert_eq!(coma_merge(&a, &b, 0.5, &m).unwrap(), ps(&[("w", vec![1.0, 2.0])]));
        assert_eq!(coma_merge(&a, &b, 1.0, &m).unwrap(), a);
        let b = ps(&[("w", vec![-3.25, 7.5])]);
        assert_eq!(coma_merge(&a, &b, 0.0, &m).unwrap(), b);
        assert!(coma_merge(&a, &b, 1.5, &m).is_err());
    }

    #[test]
    fn unmasked_entries_come_from_theta_t() {
        let a = ps(&[("w", vec![2.0]), ("head.new", vec![9.0, 8.0])]);
        let b = ps(&[("w", vec![0.0])]);
        let m = ParamMask::new(["w".to_string()]);
        let out = coma_merge(&a, &b, 0.5, &m).unwrap();
        assert_eq!(out.get("head.new"), a.get("head.new"));
        assert_eq!(out.get("w").unwrap().data(), &[1.0]);

        let bad = ParamMask::all(&a);
        let err = coma_merge(&a, &b, 0.5, &bad).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        assert!(err.to_string().contains("head.new"));
    }

    #[test]
    fn cofima_hand_cases() {
        let a = ps(&[("w", vec![4.0])]);
        let b = ps(&[("w", vec![0.0])]);
        let m = ParamMask::all(&a);
        let out = cofima_merge(&a, &fisher(&[("w", vec![1.0])]), &b, &fisher(&[("w", vec![3.0])]), 0.5, 1e-8, &m).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0]);

        let zero = fisher(&[("w", vec![0.0])]);
        let out = cofima_merge(&a, &zero, &b, &zero, 0.3, 1e-8, &m).unwrap();
        let coma = coma_merge(&a, &b, 0.3, &m).unwrap();
        assert!(out.max_abs_diff(&coma).unwrap() < 1e-14);
        assert!(cofima_merge(&a, &zero, &b, &zero, 0.3, 0.0, &m).is_err());
    }

    #[test]
    fn uniform_running_hand_cases() {
        let seq = [3.0, 6.0, 9.0].map(|v| ps(&[("w", vec![v])]));
        let m = ParamMask::all(&seq[0]);
        let mut star = uniform_running_avg(&seq[0], &seq[0], 1, &m).unwrap();
        assert_eq!(star, seq[0]);
        for (t, th) in seq.iter().enumerate().skip(1) {
            star = uniform_running_avg(th, &star, t + 1, &m).unwrap();
        }
        assert!((star.get("w").unwrap().data()[0] - 6.0).abs() < 1e-15);
        assert!(uniform_running_avg(&seq[0], &seq[0], 0, &m).is_err());
    }

    #[test]
    fn batch_average_cases() {
        let a = ps(&[("w", vec![1.5, -2.0])]);
        assert_eq!(batch_average(std::slice::from_ref(&a)).unwrap(), a);
        let neg = ps(&[("w", vec![-1.5, 2.0])]);
        assert!(batch_average(&[a.clone(), neg]).unwrap().flatten().iter().all(|&v| v == 0.0));
        assert!(batch_average(&[]).is_err());

        let f = [fisher(&[("w", vec![1.0, 1.0])]), fisher(&[("w", vec![3.0, 3.0])])];
        let th = [ps(&[("w", vec![4.0, 4.0])]), ps(&[("w", vec![0.0, 0.0])])];
        assert_eq!(fisher_batch_average(&th, &f).unwrap().flatten(), vec![1.0, 1.0]);
        let same = [fisher(&[("w", vec![2.0, 2.0])]), fisher(&[("w", vec![2.0, 2.0])])];
        assert_eq!(fisher_batch_average(&th, &same).unwrap(), batch_average(&th).unwrap());
    }

    #[test]
    fn wise_ft_cases() {
        let ft = ps(&[("w", vec![1.0, 2.0])]);
        let anchor = ps(&[("w", vec![-1.0, 5.0])]);
        let m = ParamMask::all(&ft);
        assert_eq!(wise_ft_merge(&ft, &anchor, 1.0, &m).unwrap(), ft);
        for l in [0.0, 0.25, 0.7] {
            assert_eq!(wise_ft_merge(&ft, &ft, l, &m).unwrap(), ft);
        }
        assert_eq!(
            wise_ft_merge(&ft, &anchor, 0.5, &m).unwrap(),
            coma_merge(&ft, &anchor, 0.5, &m).unwrap()
        );
    }

    #[test]
    fn ema_cases() {
        let th = ps(&[("w", vec![2.0, -1.0])]);
        let s = EmaState::new(&th, 0.999).unwrap();
        assert!(ema_debiased(&s).is_err());
        let s = ema_update(&s, &th).unwrap();
        let d = ema_debiased(&s).unwrap();
        assert!(d.max_abs_diff(&th).unwrap() < 1e-12);
        // running / 0.001 at m = 1
        let r = s.running().get("w").unwrap().data()[0];
        assert_eq!(d.get("w").unwrap().data()[0], r / (1.0 - 0.999));

        let s0 = EmaState::new(&th, 0.0).unwrap();
        let other = ps(&[("w", vec![7.0, 7.0])]);
        let s0 = ema_update(&ema_update(&s0, &th).unwrap(), &other).unwrap();
        assert_eq!(ema_debiased(&s0).unwrap(), other);
        assert!(EmaState::new(&th, 1.0).is_err());
    }

    #[test]
    fn ema_tracks_new_entries_at_their_current_value() {
        let th = ps(&[("w", vec![2.0])]);
        let mut s = EmaState::new(&th, 0.9).unwrap();
        for _ in 0..3 {
            s = ema_update(&s, &th).unwrap();
        }
        let grown = ps(&[("w", vec![2.0]), ("z", vec![5.0])]);
        s.track_new_entries(&grown);
        let d = ema_debiased(&s).unwrap();
        assert!((d.get("z").unwrap().data()[0] - 5.0).abs() < 1e-12);
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(0.0f64..5.0, n),
                prop::collection::vec(0.0f64..5.0, n),
                0.0f64..=1.0,
            )
        })
    }

    proptest! {
        #[test]
        fn merges_are_convex((a, b, fa, fb, l) in arb_pair()) {
            let ta = ps(&[("w", a.clone())]);
            let tb = ps(&[("w", b.clone())]);
            let m = ParamMask::all(&ta);
            let coma = coma_merge(&ta, &tb, l, &m).unwrap();
            let cof = cofima_merge(&ta, &fisher(&[("w", fa)]), &tb, &fisher(&[("w", fb)]), l, 1e-8, &m).unwrap();
            for out in [coma, cof] {
                for ((&x, &y), &z) in a.iter().zip(&b).zip(out.get("w").unwrap().data()) {
                    let (lo, hi) = (x.min(y), x.max(y));
                    prop_assert!(z >= lo - 1e-12 * (1.0 + lo.abs()) && z <= hi + 1e-12 * (1.0 + hi.abs()));
                }
            }
        }

        #[test]
        fn cofima_is_scale_covariant((a, b, fa, fb, l) in arb_pair(), c in 0.01f64..100.0) {
            let fa: Vec<f64> = fa.iter().map(|v| v + 0.1).collect();
            let fb: Vec<f64> = fb.iter().map(|v| v + 0.1).collect();
            let ta = ps(&[("w", a)]);
            let tb = ps(&[("w", b)]);
            let m = ParamMask::all(&ta);
            let base = cofima_merge(&ta, &fisher(&[("w", fa.clone())]), &tb, &fisher(&[("w", fb.clone())]), l, 1e-8, &m).unwrap();
            let sa: Vec<f64> = fa.iter().map(|v| v * c).collect();
            let sb: Vec<f64> = fb.iter().map(|v| v * c).collect();
            let scaled = cofima_merge(&ta, &fisher(&[("w", sa)]), &tb, &fisher(&[("w", sb)]), l, 1e-8, &m).unwrap();
            prop_assert!(base.max_abs_diff(&scaled).unwrap() < 1e-13);
        }
    }
}
