//! Angular distributions, excitation functions and fluctuation diagnostics
//! built from t-matrix series.

use num_complex::Complex64;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::smatrix::{rotating_correlation, ChannelPair, CorrelatedProcess, EnergyGrid, ModelParams, TMatrixSeries};
use crate::stats::{autocovariance, dominant_period, linear_fit, lorentzian_fit, Estimate, PeriodPeak};

pub const MAX_PARTIAL_WAVE: u32 = 20;

/// Legendre polynomial `P_l(x)` by the three-term recurrence.
pub fn legendre(l: u32, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for k in 1..l {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// `f(theta) = sum_J (2J+1) t^J P_J(cos theta)` for `(J, t^J)` pairs.
pub fn coherent_amplitude(amplitudes: &[(u32, Complex64)], theta_deg: f64) -> Result<Complex64> {
    let x = theta_deg.to_radians().cos();
    let mut f = Complex64::new(0.0, 0.0);
    for &(j, t) in amplitudes {
        if j > MAX_PARTIAL_WAVE {
            return Err(Error::Config(format!("partial wave J = {j} exceeds {MAX_PARTIAL_WAVE}")));
        }
        f += t * ((2 * j + 1) as f64 * legendre(j, x));
    }
    Ok(f)
}

/// [`coherent_amplitude`] at grid point `index` of a set of series.
pub fn coherent_amplitude_at(tset: &[TMatrixSeries], theta_deg: f64, index: usize) -> Result<Complex64> {
    let amps: Vec<(u32, Complex64)> = tset.iter().map(|t| (t.j, t.values[index])).collect();
    coherent_amplitude(&amps, theta_deg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularDistribution {
    /// Center-of-mass angles in degrees.
    pub angles: Vec<f64>,
    pub intensity: Vec<f64>,
    pub err: Vec<f64>,
}

impl AngularDistribution {
    /// Intensity and error at `theta`, linear in angle between grid points.
    pub fn at(&self, theta: f64) -> Result<(f64, f64)> {
        let a = &self.angles;
        if a.is_empty() || theta < a[0] - 1e-9 || theta > a[a.len() - 1] + 1e-9 {
            return Err(Error::Range(format!("angle {theta} lies outside the distribution")));
        }
        let k = a.partition_point(|&x| x < theta - 1e-9);
        if k < a.len() && (a[k] - theta).abs() <= 1e-9 {
            return Ok((self.intensity[k], self.err[k]));
        }
        let (i, j) = (k - 1, k);
        let w = (theta - a[i]) / (a[j] - a[i]);
        Ok((
            (1.0 - w) * self.intensity[i] + w * self.intensity[j],
            (1.0 - w) * self.err[i] + w * self.err[j],
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta_deg,intensity,err\n");
        for i in 0..self.angles.len() {
            s.push_str(&format!("{},{},{}\n", self.angles[i], self.intensity[i], self.err[i]));
        }
        s
    }
}

fn check_angles(angles: &[f64]) -> Result<()> {
    if angles.is_empty() || angles.iter().any(|a| !(0.0..=180.0).contains(a)) || angles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("angles must be increasing and within [0, 180] degrees".into()));
    }
    Ok(())
}

/// Ensemble mean of the energy-averaged `|f(theta, E)|^2`, cross-spin terms included.
///
/// The energy average runs over a window `delta_e` centered on the process grid.
pub fn angular_distribution(
    process: &CorrelatedProcess,
    angles: &[f64],
    delta_e: f64,
    realizations: usize,
    seed: u64,
) -> Result<AngularDistribution> {
    check_angles(angles)?;
    if realizations < 2 {
        return Err(Error::Config("angular distribution needs at least 2 realizations".into()));
    }
    let g = process.grid;
    let center = g.start + g.span() / 2.0;
    let window: Vec<usize> = (0..g.len).filter(|&i| (g.energy(i) - center).abs() <= delta_e / 2.0).collect();
    if window.is_empty() || delta_e > g.span() {
        return Err(Error::Range(format!("averaging window {delta_e} does not fit the grid")));
    }
    let x: Vec<f64> = angles.iter().map(|a| a.to_radians().cos()).collect();
    let weights: Vec<Vec<f64>> = process
        .spins
        .iter()
        .map(|&j| {
            if j > MAX_PARTIAL_WAVE {
                return Err(Error::Config(format!("partial wave J = {j} exceeds {MAX_PARTIAL_WAVE}")));
            }
            Ok(x.iter().map(|&c| (2 * j + 1) as f64 * legendre(j, c)).collect())
        })
        .collect::<Result<_>>()?;
    let per_run: Vec<Vec<f64>> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let tset = process.sample(seed, r);
            (0..angles.len())
                .map(|a| {
                    window
                        .iter()
                        .map(|&p| tset.iter().zip(&weights).map(|(t, w)| t.values[p] * w[a]).sum::<Complex64>().norm_sqr())
                        .sum::<f64>()
                        / window.len() as f64
                })
                .collect()
        })
        .collect();
    let mut intensity = Vec::with_capacity(angles.len());
    let mut err = Vec::with_capacity(angles.len());
    for a in 0..angles.len() {
        let col: Vec<f64> = per_run.iter().map(|v| v[a]).collect();
        let e = Estimate::from_samples(&col);
        intensity.push(e.mean);
        err.push(e.stderr);
    }
    Ok(AngularDistribution { angles: angles.to_vec(), intensity, err })
}

/// Closed-form ensemble mean with unit `<|t^J|^2>` and cross-spin
/// coefficients from the rotating correlation law.
pub fn analytic_angular_distribution(params: &ModelParams, spins: &[u32], angles: &[f64]) -> Result<AngularDistribution> {
    params.validate()?;
    check_angles(angles)?;
    if let Some(&j) = spins.iter().find(|&&j| j > MAX_PARTIAL_WAVE) {
        return Err(Error::Config(format!("partial wave J = {j} exceeds {MAX_PARTIAL_WAVE}")));
    }
    let intensity = angles
        .iter()
        .map(|a| {
            let x = a.to_radians().cos();
            let mut s = 0.0;
            for &j in spins {
                for &jp in spins {
                    let rho = if j == jp { Complex64::new(1.0, 0.0) } else { rotating_correlation(params, j, jp, 0.0).coefficient };
                    s += (2 * j + 1) as f64 * (2 * jp + 1) as f64 * rho.re * legendre(j, x) * legendre(jp, x);
                }
            }
            s
        })
        .collect();
    Ok(AngularDistribution { angles: angles.to_vec(), intensity, err: vec![0.0; angles.len()] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbRatio {
    pub ratio: f64,
    pub err: f64,
    /// Backward intensity is zero; `ratio` is infinite.
    pub infinite: bool,
}

/// Forward to backward ratio from two values with independent errors.
pub fn ratio_with_error(forward: (f64, f64), backward: (f64, f64)) -> FbRatio {
    let ((f, ef), (b, eb)) = (forward, backward);
    if b == 0.0 {
        return FbRatio { ratio: f64::INFINITY, err: f64::INFINITY, infinite: true };
    }
    let ratio = f / b;
    let rel = if f == 0.0 { eb / b } else { ((ef / f).powi(2) + (eb / b).powi(2)).sqrt() };
    FbRatio { ratio, err: ratio.abs() * rel, infinite: false }
}

/// `I(theta) / I(180 - theta)` with propagated error.
pub fn fb_asymmetry(ad: &AngularDistribution, theta: f64) -> Result<FbRatio> {
    Ok(ratio_with_error(ad.at(theta)?, ad.at(180.0 - theta)?))
}

/// `|I(theta) - I(180 - theta)| / (I(theta) + I(180 - theta))` with propagated error.
pub fn asymmetry(ad: &AngularDistribution, theta: f64) -> Result<(f64, f64)> {
    let ((f, ef), (b, eb)) = (ad.at(theta)?, ad.at(180.0 - theta)?);
    let s = f + b;
    if !(s > 0.0) {
        return Err(Error::Degenerate("zero intensity at both angles".into()));
    }
    // d/df = 2b/s^2, d/db = -2f/s^2
    let err = 2.0 * ((b * ef).powi(2) + (f * eb).powi(2)).sqrt() / (s * s);
    Ok(((f - b).abs() / s, err))
}

/// Channel-correlation regime of the excitation-function generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRegime {
    /// `beta > 10 gamma_up`.
    Decorrelated,
    /// Between the two limits.
    Correlated,
    /// `beta < 0.1 gamma_up`.
    Coherent,
}

pub fn channel_regime(params: &ModelParams) -> ChannelRegime {
    let r = params.beta / params.gamma_up;
    if r > 10.0 {
        ChannelRegime::Decorrelated
    } else if r < 0.1 {
        ChannelRegime::Coherent
    } else {
        ChannelRegime::Correlated
    }
}

/// Amplitude correlation between exit channels, `gamma_up / (gamma_up + beta)`.
pub fn channel_correlation(params: &ModelParams) -> f64 {
    params.gamma_up / (params.gamma_up + params.beta)
}

/// Exit-channel amplitudes `sqrt(rho) s(E) + sqrt(1 - rho) n_c(E)` with a shared
/// process `s` and independent per-channel processes `n_c`, all Lorentzian in
/// energy with width `gamma_up`.
#[derive(Debug, Clone)]
pub struct ChannelGenerator {
    pub channels: Vec<String>,
    pub rho: f64,
    process: CorrelatedProcess,
}

impl ChannelGenerator {
    pub fn new(params: &ModelParams, channels: &[String], grid: &EnergyGrid) -> Result<ChannelGenerator> {
        ChannelGenerator::with_correlation(params, channels, grid, channel_correlation(params))
    }

    pub fn with_correlation(params: &ModelParams, channels: &[String], grid: &EnergyGrid, rho: f64) -> Result<ChannelGenerator> {
        if channels.is_empty() {
            return Err(Error::Config("at least one exit channel is required".into()));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Model(format!("channel correlation {rho} outside [0, 1]")));
        }
        let process = CorrelatedProcess::new(params, &[0], &ChannelPair::new("in", &channels[0]), grid)?;
        Ok(ChannelGenerator { channels: channels.to_vec(), rho, process })
    }

    pub fn grid(&self) -> EnergyGrid {
        self.process.grid
    }

    /// The shared part is keyed by `shared_seed`, the channel parts by `channel_seed`.
    pub fn sample(&self, shared_seed: u64, channel_seed: u64, realization: u64) -> Vec<TMatrixSeries> {
        let m = self.channels.len() as u64;
        let shared = self.process.sample(shared_seed, realization * (m + 1)).remove(0);
        let (a, b) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        self.channels
            .iter()
            .enumerate()
            .map(|(c, label)| {
                let own = self.process.sample(channel_seed, realization * (m + 1) + 1 + c as u64).remove(0);
                let values = shared.values.iter().zip(&own.values).map(|(s, n)| s * a + n * b).collect();
                TMatrixSeries { j: 0, pair: ChannelPair::new("in", label), grid: shared.grid, values }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationFunction {
    pub energies: Vec<f64>,
    pub intensity: Vec<f64>,
    pub channels: usize,
}

impl ExcitationFunction {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("E_MeV,intensity\n");
        for (e, i) in self.energies.iter().zip(&self.intensity) {
            s.push_str(&format!("{e},{i}\n"));
        }
        s
    }
}

/// Intensity summed over the series whose exit channel is in `channels`.
pub fn excitation_function(tset: &[TMatrixSeries], channels: &[String]) -> Result<ExcitationFunction> {
    if channels.is_empty() {
        return Err(Error::Config("at least one exit channel is required".into()));
    }
    let picked: Vec<&TMatrixSeries> = tset.iter().filter(|t| channels.contains(&t.pair.exit.label)).collect();
    if picked.is_empty() {
        return Err(Error::Config("no series matches the channel list".into()));
    }
    let grid = picked[0].grid;
    if picked.iter().any(|t| t.grid != grid) {
        return Err(Error::Config("series live on different grids".into()));
    }
    let intensity = (0..grid.len).map(|p| picked.iter().map(|t| t.values[p].norm_sqr()).sum()).collect();
    Ok(ExcitationFunction { energies: grid.energies(), intensity, channels: picked.len() })
}

/// `var / mean^2` of a series.
pub fn normalized_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationStats {
    /// Normalized variance.
    pub c: f64,
    /// Autocovariance divided by the squared mean, from lag zero.
    pub autocorrelation: Vec<f64>,
    /// Half width of the Lorentzian fitted to the autocorrelation.
    pub width: Option<f64>,
    /// Dominant period, reported only above three standard deviations.
    pub period: Option<PeriodPeak>,
}

pub const MIN_SERIES_POINTS: usize = 64;

/// Ericson-type analysis of an excitation function.
pub fn fluctuation_analysis(ex: &ExcitationFunction) -> Result<FluctuationStats> {
    let n = ex.intensity.len();
    if n < MIN_SERIES_POINTS {
        return Err(Error::Config(format!("fluctuation analysis needs {MIN_SERIES_POINTS} points, got {n}")));
    }
    let mean = ex.intensity.iter().sum::<f64>() / n as f64;
    let c = normalized_variance(&ex.intensity);
    if !(c > 1e-24) || !(mean != 0.0) {
        return Err(Error::Degenerate("excitation function is constant".into()));
    }
    let step = (ex.energies[n - 1] - ex.energies[0]) / (n - 1) as f64;
    let autocorrelation: Vec<f64> = autocovariance(&ex.intensity, n / 4).into_iter().map(|v| v / (mean * mean)).collect();
    let lags: Vec<f64> = (0..autocorrelation.len()).map(|k| k as f64 * step).collect();
    let width = lorentzian_fit(&lags, &autocorrelation).map(|f| f.width);
    let period = dominant_period(&ex.intensity, step).filter(|p| p.significance > 3.0);
    Ok(FluctuationStats { c, autocorrelation, width, period })
}

/// Fourier transform of an energy series, `sum_p t(E_p) exp(-i E_p tau)`,
/// at the bin midpoints `tau_k = (k + 1/2) dtau`, `dtau = 2 pi / (n step)`.
pub fn time_transform(series: &TMatrixSeries) -> (Vec<f64>, Vec<Complex64>) {
    let g = series.grid;
    let n = g.len;
    let dtau = 2.0 * std::f64::consts::PI / (n as f64 * g.step);
    let mut buf: Vec<Complex64> = series
        .values
        .iter()
        .enumerate()
        .map(|(p, v)| v * Complex64::from_polar(1.0, -0.5 * dtau * p as f64 * g.step))
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let tau: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) * dtau).collect();
    let values = buf.iter().zip(&tau).map(|(v, &t)| v * Complex64::from_polar(1.0, -g.start * t)).collect();
    (tau, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationPeriod {
    pub period: f64,
    pub stderr: f64,
    /// `2 pi / (omega |J - J'|)`.
    pub target: f64,
    pub realizations: usize,
}

/// Period of the cross-spin time correlation, read from the slope of the
/// unwrapped phase of the realization-averaged cross power `t^J(tau) conj(t^J'(tau))`
/// over `tau <= 3 / gamma_up`.
pub fn oscillation_period(params: &ModelParams, j: u32, jp: u32, realizations: usize, seed: u64) -> Result<OscillationPeriod> {
    params.validate()?;
    if j == jp || params.hbar_omega == 0.0 {
        return Err(Error::Config("oscillation needs J != J' and a nonzero rotation quantum".into()));
    }
    let dj = (j as f64 - jp as f64).abs();
    let omega = params.hbar_omega.abs() * dj;
    // resolve both the decay and the oscillation in time
    let step = (params.gamma_up / 5.0).min(0.2 * omega.recip() * std::f64::consts::PI);
    let tau_max = 3.0 / params.gamma_up;
    let per_period = 40.0;
    let n = ((2.0 * std::f64::consts::PI / step) / (2.0 * std::f64::consts::PI / omega / per_period))
        .max(2.0 * std::f64::consts::PI / step / (tau_max / 64.0))
        .max(512.0)
        .ceil() as usize;
    let n = n.next_power_of_two();
    let grid = EnergyGrid::new(0.0, step, n)?;
    let process = CorrelatedProcess::new(params, &[j, jp], &ChannelPair::new("a", "b"), &grid)?;
    let dtau = 2.0 * std::f64::consts::PI / (n as f64 * step);
    let kmax = ((tau_max / dtau).floor() as usize).min(n / 2);
    let cross = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let s = process.sample(seed, r);
            let (_, a) = time_transform(&s[0]);
            let (_, b) = time_transform(&s[1]);
            (0..kmax).map(|k| a[k] * b[k].conj()).collect::<Vec<_>>()
        })
        .reduce(
            || vec![Complex64::new(0.0, 0.0); kmax],
            |mut x, y| {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
                x
            },
        );
    let tau: Vec<f64> = (0..kmax).map(|k| (k as f64 + 0.5) * dtau).collect();
    let mut phase = Vec::with_capacity(kmax);
    let mut prev = 0.0;
    for (k, c) in cross.iter().enumerate() {
        let mut p = c.arg();
        if k > 0 {
            while p - prev > std::f64::consts::PI {
                p -= 2.0 * std::f64::consts::PI;
            }
            while p - prev < -std::f64::consts::PI {
                p += 2.0 * std::f64::consts::PI;
            }
        }
        phase.push(p);
        prev = p;
    }
    let fit = linear_fit(&tau, &phase).ok_or_else(|| Error::Degenerate("phase fit failed".into()))?;
    let slope = fit.slope.abs();
    let period = 2.0 * std::f64::consts::PI / slope;
    let stderr = period * fit.var_slope.sqrt() / slope;
    Ok(OscillationPeriod { period, stderr, target: 2.0 * std::f64::consts::PI / omega, realizations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    pub params: ModelParams,
    pub channels: usize,
    pub points: usize,
    /// Expected total counts of the two runs.
    pub counts: [f64; 2],
    /// Seed of the nominal (run-independent) channel amplitudes.
    pub nominal_seed: u64,
    /// Grid points per bin of the shape comparison.
    pub bin: usize,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            params: ModelParams { gamma_up: 1.0, beta: 1.0, spacing: 0.1, ..ModelParams::default() },
            channels: 4,
            points: 4096,
            counts: [1e4, 1e4],
            nominal_seed: 1,
            bin: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub regime: ChannelRegime,
    pub channel_correlation: f64,
    /// Energy-integrated counts divided by the run statistics.
    pub smooth: [f64; 2],
    pub smooth_rel_diff: f64,
    /// `3 / sqrt(n_min)`.
    pub smooth_bound: f64,
    /// Smooth difference in units of its Poisson and finite-range error.
    pub smooth_z: f64,
    pub shape_chi2: f64,
    pub shape_dof: usize,
    /// `(chi2 - dof) / sqrt(2 dof)` of the oscillating shapes.
    pub oscillation_z: f64,
    pub non_reproducible: bool,
    pub counts_a: Vec<u64>,
    pub counts_b: Vec<u64>,
}

fn run_counts(generator: &ChannelGenerator, cfg: &ReproConfig, seed: u64, which: usize) -> Result<(Vec<u64>, f64)> {
    let labels: Vec<String> = generator.channels.clone();
    let tset = generator.sample(seed, cfg.nominal_seed, 0);
    let ex = excitation_function(&tset, &labels)?;
    let scale = cfg.counts[which] / (cfg.channels as f64 * cfg.points as f64);
    let mut r = rng::stream(seed, rng::purpose::COUNTS, which as u64);
    let counts = ex
        .intensity
        .iter()
        .map(|&i| {
            let lambda = i * scale;
            if lambda > 0.0 {
                Poisson::new(lambda).map(|d| d.sample(&mut r) as u64).map_err(|e| Error::Model(e.to_string()))
            } else {
                Ok(0)
            }
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok((counts, normalized_variance(&ex.intensity)))
}

/// Two runs with the same nominal channel amplitudes; the shared,
/// sign-indeterminate component is redrawn from each run seed.
pub fn reproducibility_experiment(cfg: &ReproConfig, seed_a: u64, seed_b: u64) -> Result<ReproReport> {
    cfg.params.validate()?;
    if cfg.channels == 0 || cfg.points < MIN_SERIES_POINTS || cfg.bin == 0 || cfg.counts.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Config("reproducibility config needs channels >= 1, points >= 64, bin >= 1, counts > 0".into()));
    }
    let labels: Vec<String> = (0..cfg.channels).map(|c| format!("c{c}")).collect();
    let grid = EnergyGrid::new(0.0, cfg.params.gamma_up / 5.0, cfg.points)?;
    let generator = ChannelGenerator::new(&cfg.params, &labels, &grid)?;
    let (counts_a, ca) = run_counts(&generator, cfg, seed_a, 0)?;
    let (counts_b, cb) = run_counts(&generator, cfg, seed_b, 1)?;
    let total = |c: &[u64]| c.iter().sum::<u64>() as f64;
    let (ta, tb) = (total(&counts_a), total(&counts_b));
    let smooth = [ta / cfg.counts[0], tb / cfg.counts[1]];
    let smooth_rel_diff = (smooth[0] - smooth[1]).abs() / (0.5 * (smooth[0] + smooth[1]));
    let n_min = cfg.counts[0].min(cfg.counts[1]);
    // finite-range error of an energy mean over the window: C pi gamma / span per run
    let span = grid.span();
    let frf = (ca + cb) * std::f64::consts::PI * cfg.params.gamma_up / span;
    let sigma = (1.0 / ta.max(1.0) + 1.0 / tb.max(1.0) + frf).sqrt();
    let smooth_z = smooth_rel_diff / sigma;
    // shapes normalized to their own totals
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for (a, b) in counts_a.chunks(cfg.bin).zip(counts_b.chunks(cfg.bin)) {
        let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
        let (fa, fb) = (na / ta, nb / tb);
        let var = na.max(1.0) / (ta * ta) + nb.max(1.0) / (tb * tb);
        chi2 += (fa - fb).powi(2) / var;
        dof += 1;
    }
    let oscillation_z = (chi2 - dof as f64) / (2.0 * dof as f64).sqrt();
    let regime = channel_regime(&cfg.params);
    Ok(ReproReport {
        regime,
        channel_correlation: generator.rho,
        smooth,
        smooth_rel_diff,
        smooth_bound: 3.0 / n_min.sqrt(),
        smooth_z,
        shape_chi2: chi2,
        shape_dof: dof,
        oscillation_z,
        non_reproducible: regime == ChannelRegime::Correlated && oscillation_z > 3.0,
        counts_a,
        counts_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn process(params: &ModelParams, spins: &[u32], n: usize) -> CorrelatedProcess {
        let grid = EnergyGrid::new(0.0, params.gamma_up / 5.0, n).unwrap();
        CorrelatedProcess::new(params, spins, &ChannelPair::new("a", "b"), &grid).unwrap()
    }

    fn labels(m: usize) -> Vec<String> {
        (0..m).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn legendre_low_orders() {
        for x in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            assert_eq!(legendre(0, x), 1.0);
            assert_eq!(legendre(1, x), x);
            assert!((legendre(2, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-15);
            assert!((legendre(3, x) - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-15);
        }
        for l in 0..=MAX_PARTIAL_WAVE {
            assert!((legendre(l, 1.0) - 1.0).abs() < 1e-12);
            assert!((legendre(l, -1.0) - if l % 2 == 0 { 1.0 } else { -1.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn coherent_amplitude_cases() {
        let one = Complex64::new(1.0, 0.0);
        let f0 = coherent_amplitude(&[(0, Complex64::new(0.3, -0.2))], 10.0).unwrap();
        let f1 = coherent_amplitude(&[(0, Complex64::new(0.3, -0.2))], 123.0).unwrap();
        assert_eq!(f0, f1);
        assert!((coherent_amplitude(&[(0, one), (1, one)], 0.0).unwrap() - 4.0).norm() < 1e-12);
        assert!((coherent_amplitude(&[(0, one), (1, one)], 180.0).unwrap() + 2.0).norm() < 1e-12);
        assert!(coherent_amplitude(&[(21, one)], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn coherent_amplitude_matches_naive_sum(
            re in prop::collection::vec(-2.0f64..2.0, 6),
            im in prop::collection::vec(-2.0f64..2.0, 6),
            theta in 0.0f64..180.0,
        ) {
            let amps: Vec<(u32, Complex64)> = (0..6).map(|j| (j as u32, Complex64::new(re[j], im[j]))).collect();
            // naive explicit polynomials
            let x = theta.to_radians().cos();
            let p = [
                1.0,
                x,
                (3.0 * x * x - 1.0) / 2.0,
                (5.0 * x.powi(3) - 3.0 * x) / 2.0,
                (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0,
                (63.0 * x.powi(5) - 70.0 * x.powi(3) + 15.0 * x) / 8.0,
            ];
            let mut naive = Complex64::new(0.0, 0.0);
            for j in 0..6 {
                naive += amps[j].1 * ((2 * j + 1) as f64) * p[j];
            }
            prop_assert!((coherent_amplitude(&amps, theta).unwrap() - naive).norm() < 1e-12);
        }
    }

    #[test]
    fn single_class_analytic_is_symmetric() {
        let p = ModelParams::default();
        let angles: Vec<f64> = (0..=18).map(|i| i as f64 * 10.0).collect();
        for j in 0..6 {
            let ad = analytic_angular_distribution(&p, &[j], &angles).unwrap();
            for i in 0..angles.len() {
                let mirror = ad.at(180.0 - angles[i]).unwrap().0;
                assert!((ad.intensity[i] - mirror).abs() <= 1e-12 * ad.intensity[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn fb_ratio_cases() {
        let ad = AngularDistribution { angles: vec![0.0, 90.0, 180.0], intensity: vec![2.0, 1.0, 2.0], err: vec![0.1; 3] };
        let r = fb_asymmetry(&ad, 30.0).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-15);
        let zero = AngularDistribution { angles: vec![0.0, 180.0], intensity: vec![1.0, 0.0], err: vec![0.0; 2] };
        assert!(fb_asymmetry(&zero, 0.0).unwrap().infinite);
    }

    #[test]
    fn decorrelated_classes_are_symmetric() {
        let p = ModelParams { gamma_up: 1.0, beta: 100.0, ..ModelParams::default() };
        let proc = process(&p, &[0, 1, 2, 3], 256);
        let ad = angular_distribution(&proc, &[30.0, 90.0, 150.0], 20.0, 2000, 3).unwrap();
        let (a, e) = asymmetry(&ad, 30.0).unwrap();
        assert!(a < 3.0 * e + 0.01, "{a} +- {e}");
        let exact = analytic_angular_distribution(&p, &[0, 1, 2, 3], &[30.0, 90.0, 150.0]).unwrap();
        for i in 0..3 {
            assert!((ad.intensity[i] - exact.intensity[i]).abs() < 4.0 * ad.err[i], "{i}");
        }
    }

    #[test]
    fn correlated_classes_peak_forward() {
        let p = ModelParams { gamma_up: 1.0, beta: 0.01, ..ModelParams::default() };
        let spins = [0, 1, 2, 3];
        let angles = [30.0, 150.0];
        let proc = process(&p, &spins, 256);
        let ad = angular_distribution(&proc, &angles, 20.0, 2000, 4).unwrap();
        let exact = analytic_angular_distribution(&p, &spins, &angles).unwrap();
        let r = fb_asymmetry(&ad, 30.0).unwrap();
        let target = fb_asymmetry(&exact, 30.0).unwrap().ratio;
        assert!(r.ratio > 1.0 + 3.0 * r.err, "{r:?}");
        assert!((r.ratio - target).abs() < 3.0 * r.err, "{r:?} vs {target}");
    }

    fn channel_c(m: usize, rho: f64, seed: u64) -> f64 {
        let p = ModelParams { gamma_up: 1.0, ..ModelParams::default() };
        let grid = EnergyGrid::new(0.0, 0.2, 16384).unwrap();
        let gen = ChannelGenerator::with_correlation(&p, &labels(m), &grid, rho).unwrap();
        // mean over realizations; a single series carries ~10% scatter in C
        let runs = 8;
        (0..runs)
            .map(|r| {
                let ex = excitation_function(&gen.sample(seed, seed + 100, r), &labels(m)).unwrap();
                fluctuation_analysis(&ex).unwrap().c
            })
            .sum::<f64>()
            / runs as f64
    }

    #[test]
    fn independent_channels_average_as_one_over_m() {
        for m in [1usize, 2, 4, 8] {
            let c = channel_c(m, 0.0, 5);
            assert!((c * m as f64 - 1.0).abs() < 0.1, "M = {m}: C = {c}");
        }
    }

    #[test]
    fn correlated_channels_do_not_self_average() {
        // oracle: C = 1/M + (1 - 1/M) rho^2 for the shared-component generator
        let rho: f64 = 0.8;
        for m in [2usize, 8] {
            let c = channel_c(m, rho, 6);
            let target = 1.0 / m as f64 + (1.0 - 1.0 / m as f64) * rho * rho;
            assert!((c / target - 1.0).abs() < 0.15, "M = {m}: C = {c}, target {target}");
            assert!(c * m as f64 > 1.5);
        }
    }

    #[test]
    fn regimes_follow_beta() {
        let mk = |beta| ModelParams { gamma_up: 1.0, beta, ..ModelParams::default() };
        assert_eq!(channel_regime(&mk(100.0)), ChannelRegime::Decorrelated);
        assert_eq!(channel_regime(&mk(1.0)), ChannelRegime::Correlated);
        assert_eq!(channel_regime(&mk(0.01)), ChannelRegime::Coherent);
    }

    fn ericson_series(gamma_up: f64, seed: u64) -> ExcitationFunction {
        let p = ModelParams { gamma_up, ..ModelParams::default() };
        let grid = EnergyGrid::new(0.0, gamma_up / 5.0, 16384).unwrap();
        let gen = ChannelGenerator::with_correlation(&p, &labels(1), &grid, 0.0).unwrap();
        excitation_function(&gen.sample(seed, seed, 0), &labels(1)).unwrap()
    }

    #[test]
    fn lorentzian_width_is_recovered() {
        for (g, seed) in [(1.0, 1), (2.0, 2)] {
            let st = fluctuation_analysis(&ericson_series(g, seed)).unwrap();
            let w = st.width.unwrap();
            assert!((w / g - 1.0).abs() < 0.1, "{g}: {w}");
            assert!((st.c - 1.0).abs() < 0.15);
        }
    }

    #[test]
    fn modulation_period_is_detected() {
        let mut ex = ericson_series(1.0, 3);
        let t0 = 50.0;
        for (e, i) in ex.energies.iter().zip(ex.intensity.iter_mut()) {
            *i *= 1.0 + 0.5 * (2.0 * std::f64::consts::PI * e / t0).cos();
        }
        let p = fluctuation_analysis(&ex).unwrap().period.expect("period");
        assert!((p.period / t0 - 1.0).abs() < 0.05, "{p:?}");
    }

    #[test]
    fn white_noise_has_no_period() {
        let mut r = rng::stream(9, 0, 0);
        let x = rng::normals(&mut r, 4096);
        let ex = ExcitationFunction { energies: (0..4096).map(|i| i as f64).collect(), intensity: x.iter().map(|v| 10.0 + v).collect(), channels: 1 };
        assert!(fluctuation_analysis(&ex).unwrap().period.is_none());
    }

    #[test]
    fn analysis_rejects_constant_and_short_series() {
        let flat = ExcitationFunction { energies: (0..100).map(|i| i as f64).collect(), intensity: vec![3.0; 100], channels: 1 };
        assert!(matches!(fluctuation_analysis(&flat), Err(Error::Degenerate(_))));
        let short = ExcitationFunction { energies: vec![0.0; 10], intensity: vec![1.0; 10], channels: 1 };
        assert!(fluctuation_analysis(&short).is_err());
    }

    #[test]
    fn time_transform_inverts_synthesis() {
        // a single pole has time profile exp(-gamma tau / 2) exp(-i E0 tau)
        let grid = EnergyGrid::new(-40.0, 0.05, 4096).unwrap();
        let values = crate::smatrix::pole_sum(&[1.3], &[1.0], 1.0, &grid);
        let s = TMatrixSeries { j: 0, pair: ChannelPair::new("a", "b"), grid, values };
        let (tau, v) = time_transform(&s);
        let ratio = v[21] / v[20];
        let dt = tau[21] - tau[20];
        assert!((ratio.norm().ln() + 0.5 * dt).abs() < 1e-2, "{}", ratio.norm().ln());
        assert!((ratio.arg() + 1.3 * dt).abs() < 1e-3, "{}", ratio.arg());
    }

    #[test]
    fn rotation_period_is_recovered() {
        let p = ModelParams { gamma_up: 1.0, beta: 0.1, hbar_omega: 10.0, ..ModelParams::default() };
        let o = oscillation_period(&p, 1, 2, 200, 1).unwrap();
        assert!((o.period / o.target - 1.0).abs() < 0.05, "{o:?}");
        assert!(oscillation_period(&ModelParams::default(), 0, 1, 10, 1).is_err());
    }

    #[test]
    fn reproducibility_regimes() {
        let cfg = ReproConfig::default();
        let same = reproducibility_experiment(&cfg, 7, 7).unwrap();
        assert_eq!(same.counts_a, reproducibility_experiment(&cfg, 7, 7).unwrap().counts_a);
        assert_eq!(same.counts_a.len(), cfg.points);

        let decor = ReproConfig { params: ModelParams { beta: 100.0, ..cfg.params }, ..cfg.clone() };
        let r = reproducibility_experiment(&decor, 1, 2).unwrap();
        assert_eq!(r.regime, ChannelRegime::Decorrelated);
        assert!(r.smooth_rel_diff < r.smooth_bound, "{} vs {}", r.smooth_rel_diff, r.smooth_bound);
        assert!(!r.non_reproducible);

        let r = reproducibility_experiment(&cfg, 1, 2).unwrap();
        assert_eq!(r.regime, ChannelRegime::Correlated);
        assert!(r.smooth_z < 3.0, "{}", r.smooth_z);
        assert!(r.oscillation_z > 3.0 && r.non_reproducible, "{}", r.oscillation_z);
    }
}
