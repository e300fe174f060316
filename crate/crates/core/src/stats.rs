//! Small statistics helpers shared by tests, probes and the harness.

use std::collections::VecDeque;

/// Floor applied to `ln(variance)` so that degenerate estimators stay finite.
pub const LOG_VAR_FLOOR: f64 = -30.0;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (divides by `n - 1`). Zero for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_err(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// `ln(var)` clamped below at [`LOG_VAR_FLOOR`].
pub fn floored_log(var: f64) -> f64 {
    if var > 0.0 {
        var.ln().max(LOG_VAR_FLOOR)
    } else {
        LOG_VAR_FLOOR
    }
}

/// Mean over coordinates of the floored log-variance.
pub fn mean_log_variance(vars: &[f64]) -> f64 {
    vars.iter().map(|&v| floored_log(v)).sum::<f64>() / vars.len() as f64
}

/// Streaming per-coordinate mean and variance (Welford).
#[derive(Clone, Debug)]
pub struct RunningStats {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((m, m2), &xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *m2 += d * (xi - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let denom = self.n.saturating_sub(1).max(1) as f64;
        self.m2.iter().map(|m2| m2 / denom).collect()
    }

    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Per-coordinate sample variance over the last `window` vectors.
#[derive(Clone, Debug)]
pub struct WindowVariance {
    window: usize,
    buf: VecDeque<Vec<f64>>,
}

impl WindowVariance {
    pub fn new(window: usize) -> Self {
        assert!(window >= 2, "window must hold at least two samples");
        Self {
            window,
            buf: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        if self.buf.len() == self.window {
            let mut old = self.buf.pop_front().unwrap();
            old.clear();
            old.extend_from_slice(x);
            self.buf.push_back(old);
        } else {
            self.buf.push_back(x.to_vec());
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Mean over coordinates of the floored log-variance; `None` with fewer than two samples.
    pub fn mean_log_variance(&self) -> Option<f64> {
        if self.buf.len() < 2 {
            return None;
        }
        let mut stats = RunningStats::new(self.buf[0].len());
        for x in &self.buf {
            stats.push(x);
        }
        Some(mean_log_variance(&stats.variance()))
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Linear-interpolated quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!((std_err(&xs) - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_variance_floor() {
        assert_eq!(floored_log(0.0), LOG_VAR_FLOOR);
        assert_eq!(floored_log(1e-300), LOG_VAR_FLOOR);
        assert_eq!(mean_log_variance(&[1.0, 0.0]), -15.0);
    }

    #[test]
    fn ks_of_identical_and_disjoint_samples() {
        let a = [0.1, 0.2, 0.3];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[1.0, 2.0]), 1.0);
        assert!((ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(quantile(&xs, 0.5), 2.5);
        assert_eq!(quantile(&xs, 0.25), 1.75);
    }

    #[test]
    fn window_keeps_only_recent_samples() {
        let mut w = WindowVariance::new(2);
        assert_eq!(w.mean_log_variance(), None);
        w.push(&[100.0]);
        w.push(&[1.0]);
        w.push(&[3.0]);
        assert_eq!(w.len(), 2);
        assert!((w.mean_log_variance().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn running_stats_match_two_pass(xs in proptest::collection::vec(-1e3f64..1e3, 2..60)) {
            let mut rs = RunningStats::new(1);
            for &x in &xs {
                rs.push(&[x]);
            }
            prop_assert!((rs.mean()[0] - mean(&xs)).abs() <= 1e-9 * (1.0 + mean(&xs).abs()));
            let v = variance(&xs);
            prop_assert!((rs.variance()[0] - v).abs() <= 1e-9 * (1.0 + v));
        }
    }
}
