//! Small statistics helpers: compensated sums, sample means, line fits.

use serde::{Deserialize, Serialize};

/// Neumaier's compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = NeumaierSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        let stderr = if n > 1 {
            let var = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr, n }
    }

    /// `mean(y) / mean(x)` for paired samples, with a delta-method error.
    pub fn ratio(ys: &[f64], xs: &[f64]) -> Self {
        assert_eq!(ys.len(), xs.len());
        let n = ys.len();
        let my = neumaier_sum(ys.iter().copied()) / n as f64;
        let mx = neumaier_sum(xs.iter().copied()) / n as f64;
        let r = my / mx;
        let stderr = if n > 1 {
            let var =
                neumaier_sum(ys.iter().zip(xs).map(|(y, x)| (y - r * x).powi(2))) / (n - 1) as f64;
            (var / n as f64).sqrt() / mx.abs()
        } else {
            0.0
        };
        Estimate { mean: r, stderr, n }
    }

    /// `|mean| / stderr`; infinite for an exact nonzero mean.
    pub fn z(&self) -> f64 {
        self.mean.abs() / self.stderr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

/// Least squares line through `(x, y)`. With `sigma` the points are weighted
/// by `1/sigma²` and the errors follow from the weights; without it the
/// errors come from the residual scatter.
pub fn fit_line(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> LineFit {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "need at least two points");
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|s| 1.0 / (s * s)).collect(),
        None => vec![1.0; x.len()],
    };
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let mut var_slope = sw / det;
    let mut var_icpt = sxx / det;
    if sigma.is_none() {
        let n = x.len();
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let s2 = if n > 2 { rss / (n - 2) as f64 } else { 0.0 };
        var_slope *= s2;
        var_icpt *= s2;
    }
    LineFit {
        slope,
        intercept,
        slope_stderr: var_slope.sqrt(),
        intercept_stderr: var_icpt.sqrt(),
    }
}

/// Fit of `ln y` against `ln x`; relative errors `stderr / y` weight the points
/// when given.
pub fn fit_log_log(x: &[f64], y: &[f64], stderr: Option<&[f64]>) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let rel: Option<Vec<f64>> =
        stderr.map(|s| s.iter().zip(y).map(|(s, y)| (s / y).max(1e-300)).collect());
    fit_line(&lx, &ly, rel.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_is_exact_on_cancellation() {
        assert_eq!(neumaier_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    #[test]
    fn estimate_of_constant_and_known_set() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!((e.mean, e.stderr), (2.0, 0.0));
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let r = Estimate::ratio(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]);
        assert!((r.mean - 2.0).abs() < 1e-15 && r.stderr < 1e-15);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|x| 0.5 - 2.0 * x).collect();
        let f = fit_line(&x, &y, None);
        assert!((f.slope + 2.0).abs() < 1e-12 && (f.intercept - 0.5).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-10);
        let g = fit_line(&x, &y, Some(&[1.0, 2.0, 1.0, 3.0]));
        assert!((g.slope + 2.0).abs() < 1e-12);
        let p: Vec<f64> = x.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((fit_log_log(&x, &p, None).slope - 1.7).abs() < 1e-12);
    }
}
