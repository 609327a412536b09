//! Integrate-and-fire dynamics.
//!
//! A single-threshold IF neuron integrates `H = V + I`, fires when `H >= V_th`
//! and subtracts the threshold. The multi-threshold (MT) neuron visits a
//! strictly descending list of thresholds within one step, firing at most one
//! spike per threshold and subtracting each fired threshold from the running
//! residual; its output is the threshold-weighted spike sum.
//!
//! Membranes are never clamped from below: negative currents drive the
//! membrane negative and it stays linear until it climbs back over a threshold.

use alloc::{format, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Relative slack in the firing comparison. Without it, accumulated rounding
/// drift (e.g. ten additions of 0.3 landing just below 3.0) would swallow
/// spikes that exact arithmetic fires.
pub const FIRE_TOLERANCE: f64 = 1e-12;

#[inline]
fn reaches(h: f64, threshold: f64) -> bool {
    h >= threshold * (1.0 - FIRE_TOLERANCE)
}

/// Strictly descending positive firing thresholds shared by a neuron layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSchedule {
    thresholds: Vec<f64>,
}

impl ThresholdSchedule {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidSchedule("needs at least one threshold".into()));
        }
        if let Some(bad) = thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidSchedule(format!("threshold {bad} is not a positive real")));
        }
        if let Some(w) = thresholds.windows(2).find(|w| w[0] <= w[1]) {
            return Err(Error::InvalidSchedule(format!(
                "thresholds must strictly descend, found {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self { thresholds })
    }

    /// Geometric halving from `v_max / 2` down to `v_max / 2^n`, the schedule
    /// minimising the expected representation residual for `V ~ U[0, v_max]`.
    pub fn optimal(n: usize, v_max: f64) -> Result<Self> {
        optimal_thresholds(n, v_max)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sum(&self) -> f64 {
        self.thresholds.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.thresholds.iter().map(|t| t * factor).collect())
    }

    /// Fires one step from accumulated potential `h`.
    ///
    /// Returns `(output, residual, spike_count)`. Bit `i` of the pattern in
    /// [`Self::fire_pattern`] corresponds to threshold `i`.
    #[inline]
    pub fn fire(&self, h: f64) -> (f64, f64, u32) {
        let mut residual = h;
        let mut out = 0.0;
        let mut count = 0;
        for &th in &self.thresholds {
            if reaches(residual, th) {
                residual -= th;
                out += th;
                count += 1;
            }
        }
        (out, residual, count)
    }

    pub fn fire_pattern(&self, h: f64) -> (f64, f64, u64) {
        let mut residual = h;
        let mut out = 0.0;
        let mut bits = 0u64;
        for (i, &th) in self.thresholds.iter().enumerate() {
            if reaches(residual, th) {
                residual -= th;
                out += th;
                bits |= 1 << i;
            }
        }
        (out, residual, bits)
    }
}

impl TryFrom<Vec<f64>> for ThresholdSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ThresholdSchedule> for Vec<f64> {
    fn from(s: ThresholdSchedule) -> Self {
        s.thresholds
    }
}

/// Membrane potential and most recent spikes of one neuron layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub membrane: Tensor,
    /// One binary tensor per threshold.
    pub last_spikes: Vec<Tensor>,
}

/// Result of one multi-threshold step.
#[derive(Debug, Clone, PartialEq)]
pub struct MtStep {
    /// `sum_i V_th,i * s_i`
    pub weighted_output: Tensor,
    pub spikes: Vec<Tensor>,
}

impl NeuronState {
    /// Resting state (zero membrane, no spikes).
    pub fn new(shape: &[usize], thresholds: usize) -> Self {
        Self { membrane: Tensor::zeros(shape), last_spikes: vec![Tensor::zeros(shape); thresholds.max(1)] }
    }

    fn check_current(&self, current: &Tensor, op: &'static str) -> Result<()> {
        current.same_shape(&self.membrane, op).map_err(|e| match e {
            Error::Shape { detail, .. } => shape_err(op, format!("current vs membrane: {detail}")),
            other => other,
        })
    }

    /// Single-threshold IF step; returns the binary spike tensor.
    pub fn if_step(&mut self, current: &Tensor, v_th: f64) -> Result<Tensor> {
        if !(v_th.is_finite() && v_th > 0.0) {
            return Err(arg_err("threshold", format!("{v_th} is not positive")));
        }
        self.check_current(current, "if_step")?;
        let mut spikes = Tensor::zeros(current.shape());
        for ((v, &i), s) in self.membrane.data_mut().iter_mut().zip(current.data()).zip(spikes.data_mut()) {
            let h = *v + i;
            if reaches(h, v_th) {
                *s = 1.0;
                *v = h - v_th;
            } else {
                *v = h;
            }
        }
        self.last_spikes = vec![spikes.clone()];
        Ok(spikes)
    }

    /// Multi-threshold step.
    pub fn mt_step(&mut self, current: &Tensor, schedule: &ThresholdSchedule) -> Result<MtStep> {
        self.check_current(current, "mt_step")?;
        let n = schedule.len();
        let mut weighted = Tensor::zeros(current.shape());
        let mut spikes = vec![Tensor::zeros(current.shape()); n];
        for (idx, (v, &i)) in self.membrane.data_mut().iter_mut().zip(current.data()).enumerate() {
            let (o, r, bits) = schedule.fire_pattern(*v + i);
            *v = r;
            weighted.data_mut()[idx] = o;
            for (k, s) in spikes.iter_mut().enumerate() {
                if bits & (1 << k) != 0 {
                    s.data_mut()[idx] = 1.0;
                }
            }
        }
        self.last_spikes = spikes.clone();
        Ok(MtStep { weighted_output: weighted, spikes })
    }
}

/// `(v_max / 2, v_max / 4, ..., v_max / 2^n)`.
pub fn optimal_thresholds(n: usize, v_max: f64) -> Result<ThresholdSchedule> {
    if n == 0 {
        return Err(arg_err("threshold count", "must be at least 1".into()));
    }
    if n > 52 {
        return Err(arg_err("threshold count", format!("{n} exceeds f64 resolution")));
    }
    if !(v_max.is_finite() && v_max > 0.0) {
        return Err(arg_err("v_max", format!("{v_max} is not positive")));
    }
    let mut th = Vec::with_capacity(n);
    let mut t = v_max;
    for _ in 0..n {
        t *= 0.5;
        th.push(t);
    }
    ThresholdSchedule::new(th)
}

/// Expected residual of representing `V ~ U[0, v_max]` by the largest
/// representable spike sum below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub expected_error: f64,
    /// Sorted representable values; the first is always 0.
    pub segment_lefts: Vec<f64>,
}

/// Enumerates all `2^N` spike patterns; the sorted representable sums split
/// `[0, v_max]` into segments of widths `b_i`, and the expected residual is
/// `sum(b_i^2) / (2 v_max)`.
pub fn expected_residual(schedule: &ThresholdSchedule, v_max: f64) -> Result<ResidualReport> {
    if !(v_max.is_finite() && v_max > 0.0) {
        return Err(arg_err("v_max", format!("{v_max} is not positive")));
    }
    let n = schedule.len();
    if n > 24 {
        return Err(arg_err("schedule", format!("{n} thresholds is too many to enumerate")));
    }
    let total = schedule.sum();
    if total > v_max * (1.0 + 1e-12) {
        return Err(Error::InvalidSchedule(format!("threshold sum {total} exceeds v_max {v_max}")));
    }
    let th = schedule.thresholds();
    let mut lefts: Vec<f64> =
        (0u32..(1 << n)).map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| th[i]).sum()).collect();
    lefts.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for (i, &a) in lefts.iter().enumerate() {
        let next = lefts.get(i + 1).copied().unwrap_or(v_max);
        let b = next - a;
        acc += b * b;
    }
    Ok(ResidualReport { expected_error: 0.5 * acc / v_max, segment_lefts: lefts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub schedule: ThresholdSchedule,
    pub residual: f64,
    /// Number of feasible grid points evaluated.
    pub evaluated: usize,
}

/// Exhaustive search over descending threshold tuples on a grid of
/// `grid_step` with total at most 1, minimising [`expected_residual`].
pub fn brute_force_optimal(n: usize, grid_step: f64) -> Result<GridSearchResult> {
    if !(1..=2).contains(&n) {
        return Err(arg_err("threshold count", format!("grid search supports 1 or 2, got {n}")));
    }
    if !(grid_step > 0.0 && grid_step <= 0.01) {
        return Err(arg_err("grid step", format!("{grid_step} must lie in (0, 0.01]")));
    }
    let steps = libm::floor(1.0 / grid_step + 1e-9) as usize;
    let at = |k: usize| k as f64 * grid_step;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluated = 0;
    let mut consider = |th: Vec<f64>| -> Result<()> {
        let schedule = ThresholdSchedule::new(th.clone())?;
        let r = expected_residual(&schedule, 1.0)?.expected_error;
        evaluated += 1;
        if best.as_ref().map_or(true, |(b, _)| r < *b) {
            best = Some((r, th));
        }
        Ok(())
    };
    for k1 in 1..=steps {
        if n == 1 {
            consider(vec![at(k1)])?;
            continue;
        }
        for k2 in 1..k1 {
            if k1 + k2 <= steps {
                consider(vec![at(k1), at(k2)])?;
            }
        }
    }
    let (residual, th) = best.ok_or_else(|| arg_err("grid", "no feasible threshold tuple".into()))?;
    Ok(GridSearchResult { schedule: ThresholdSchedule::new(th)?, residual, evaluated })
}
