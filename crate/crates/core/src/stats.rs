//! Small statistical helpers shared by the Monte Carlo modules.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Estimate {
        let n = samples.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, stderr: f64::NAN, count: 0 };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate { mean, stderr, count: n }
    }

    /// Whether `target` lies within `k` standard errors of the mean.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub var_intercept: f64,
    pub var_slope: f64,
    pub cov: f64,
    pub chi2: f64,
}

/// Weighted least squares for `y = a + b x` with weights `w = 1/sigma^2`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        s += wi;
        sx += wi * xi;
        sy += wi * yi;
        sxx += wi * xi * xi;
        sxy += wi * xi * yi;
    }
    let det = s * sxx - sx * sx;
    if !(det.abs() > 1e-300) || x.len() < 2 {
        return None;
    }
    let slope = (s * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let chi2 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&xi, &yi), &wi)| wi * (yi - intercept - slope * xi).powi(2))
        .sum();
    Some(LinearFit {
        intercept,
        slope,
        var_intercept: sxx / det,
        var_slope: s / det,
        cov: -sx / det,
        chi2,
    })
}

/// Unweighted least squares slope of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let w = vec![1.0; x.len()];
    weighted_linear_fit(x, y, &w)
}

/// Kolmogorov-Smirnov distance between a sample and a reference CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Jarque-Bera normality test. Returns `(statistic, p_value)`.
pub fn jarque_bera(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2) - 3.0;
    let jb = n / 6.0 * (skew * skew + kurt * kurt / 4.0);
    // chi-square with two degrees of freedom
    (jb, (-jb / 2.0).exp())
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

fn padded_len(n: usize) -> usize {
    (2 * n).next_power_of_two()
}

/// Unbiased autocorrelation `c(k) = mean_i x_i conj(x_{i+k})` for lags `0..max_lag`.
pub fn autocorrelation_complex(x: &[Complex64], max_lag: usize) -> Vec<Complex64> {
    let n = x.len();
    let m = padded_len(n);
    let mut buf: Vec<Complex64> = x.iter().copied().chain(std::iter::repeat(Complex64::new(0.0, 0.0))).take(m).collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    // buf[k] / m = sum_i x_{i+k} conj(x_i)
    (0..max_lag.min(n))
        .map(|k| (buf[k] / (m as f64 * (n - k) as f64)).conj())
        .collect()
}

/// Unbiased autocovariance of a real series about its mean, lags `0..max_lag`.
pub fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    autocorrelation_complex(&c, max_lag).into_iter().map(|z| z.re).collect()
}

/// Lorentzian `a / (1 + (x/w)^2)` fitted by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub amplitude: f64,
    pub width: f64,
    pub rms_residual: f64,
}

/// Fits a Lorentzian to a decaying curve sampled at `x >= 0`.
///
/// The fit uses the points out to three times the crude half-width taken from
/// the first half-maximum crossing.
pub fn lorentzian_fit(x: &[f64], y: &[f64]) -> Option<LorentzianFit> {
    if x.len() < 3 || !(y[0] > 0.0) {
        return None;
    }
    let half = y[0] / 2.0;
    let k = y.iter().position(|&v| v < half)?;
    let w0 = if k == 0 {
        x[1]
    } else {
        let (x1, x2, y1, y2) = (x[k - 1], x[k], y[k - 1], y[k]);
        x1 + (y1 - half) * (x2 - x1) / (y1 - y2)
    };
    let cut = 3.0 * w0;
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(&xi, _)| xi <= cut).map(|(&a, &b)| (a, b)).collect();
    if pts.len() < 3 {
        return None;
    }
    let sse = |a: f64, w: f64| -> f64 {
        pts.iter().map(|&(xi, yi)| (yi - a / (1.0 + (xi / w).powi(2))).powi(2)).sum()
    };
    let (mut a, mut w) = (y[0], w0);
    let mut cur = sse(a, w);
    for _ in 0..200 {
        // Gauss-Newton normal equations for (a, w)
        let (mut jaa, mut jaw, mut jww, mut ga, mut gw) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(xi, yi) in &pts {
            let u = (xi / w).powi(2);
            let d = 1.0 + u;
            let f = a / d;
            let da = 1.0 / d;
            let dw = 2.0 * a * u / (w * d * d);
            let r = yi - f;
            jaa += da * da;
            jaw += da * dw;
            jww += dw * dw;
            ga += da * r;
            gw += dw * r;
        }
        let det = jaa * jww - jaw * jaw;
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = (jww * ga - jaw * gw) / det;
        let step_w = (jaa * gw - jaw * ga) / det;
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let (na, nw) = (a + t * step_a, w + t * step_w);
            if nw > 0.0 {
                let s = sse(na, nw);
                if s <= cur {
                    let done = (cur - s) <= 1e-15 * cur.max(1e-300);
                    a = na;
                    w = nw;
                    cur = s;
                    improved = !done;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some(LorentzianFit { amplitude: a, width: w, rms_residual: (cur / pts.len() as f64).sqrt() })
}

/// Strongest periodic component of a real series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodPeak {
    pub period: f64,
    /// Probability that pure noise produces a peak this strong anywhere in the band.
    pub false_alarm: f64,
    /// Two-sided Gaussian-equivalent significance of the peak.
    pub significance: f64,
}

fn periodogram(x: &[f64], len: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut buf: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(len)
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(len).process(&mut buf);
    buf[..len / 2].iter().map(|z| z.norm_sqr()).collect()
}

/// Locates the dominant spectral line of a series sampled at uniform `spacing`.
///
/// Each periodogram ordinate is compared with a running median of its
/// neighbours, which follows smooth (red) backgrounds. Under the noise
/// hypothesis the normalised ordinates are exponential, which fixes the
/// false-alarm probability of the largest one.
pub fn dominant_period(x: &[f64], spacing: f64) -> Option<PeriodPeak> {
    let n = x.len();
    if n < 16 {
        return None;
    }
    let p = periodogram(x, n);
    let half = p.len();
    let w = (n / 64).max(8);
    let first = 2usize;
    let mut best: Option<(usize, f64)> = None;
    let mut tested = 0usize;
    for j in first..half {
        let lo = j.saturating_sub(w).max(1);
        let hi = (j + w + 1).min(half);
        let mut neigh: Vec<f64> = (lo..hi).filter(|&i| i != j).map(|i| p[i]).collect();
        if neigh.is_empty() {
            continue;
        }
        neigh.sort_by(|a, b| a.total_cmp(b));
        let med = neigh[neigh.len() / 2];
        if !(med > 0.0) {
            continue;
        }
        tested += 1;
        let z = p[j] * std::f64::consts::LN_2 / med;
        if best.is_none_or(|(_, bz)| z > bz) {
            best = Some((j, z));
        }
    }
    let (j, z) = best?;
    let false_alarm = -(tested as f64 * (-(-z).exp()).ln_1p()).exp_m1();
    let false_alarm = false_alarm.clamp(1e-300, 1.0);
    let significance = if false_alarm >= 1.0 { 0.0 } else { normal_quantile(1.0 - false_alarm / 2.0).min(40.0) };
    // refine the peak on a zero-padded periodogram
    let pad = 16;
    let fine = periodogram(x, n * pad);
    let lo = (j * pad).saturating_sub(pad);
    let hi = ((j + 1) * pad).min(fine.len() - 1);
    let jf = (lo..=hi).max_by(|&a, &b| fine[a].total_cmp(&fine[b]))?;
    let freq = jf as f64 / (n * pad) as f64 / spacing;
    Some(PeriodPeak { period: 1.0 / freq, false_alarm, significance })
}
