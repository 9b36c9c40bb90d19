use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mean and population standard deviation; `None` for an empty sample.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    /// Entirely below `other`.
    pub fn below(&self, other: &Interval) -> bool {
        self.hi < other.lo
    }
}

/// Percentile bootstrap interval for the mean at confidence `level`.
pub fn bootstrap_mean_ci(xs: &[f64], level: f64, resamples: usize, seed: u64) -> Option<Interval> {
    if xs.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples).map(|_| (0..n).map(|_| xs[rng.gen_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some(Interval { lo: at(tail), hi: at(1.0 - tail) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[]), None);
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let xs: Vec<f64> = (0..300).map(|i| (i % 7) as f64).collect();
        let m = mean_std(&xs).unwrap().0;
        let ci = bootstrap_mean_ci(&xs, 0.95, 2000, 1).unwrap();
        assert!(ci.lo < m && m < ci.hi);
        assert!(ci.hi - ci.lo < 1.0);
        let c = bootstrap_mean_ci(&[5.0; 10], 0.95, 100, 1).unwrap();
        assert_eq!((c.lo, c.hi), (5.0, 5.0));
    }

    #[test]
    fn interval_ordering() {
        let a = Interval { lo: 0.0, hi: 1.0 };
        let b = Interval { lo: 1.5, hi: 2.0 };
        assert!(a.below(&b) && !a.overlaps(&b));
        assert!(a.overlaps(&Interval { lo: 0.5, hi: 3.0 }));
    }
}
