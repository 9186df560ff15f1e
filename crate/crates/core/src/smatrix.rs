//! Pole-expansion t-matrices, closed-form correlation laws and correlated
//! process generators. `hbar = 1`; all widths share one energy unit.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::LevelSequence;
use crate::linalg::psd_sqrt;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Total decay width.
    pub gamma_up: f64,
    /// Phase relaxation width between different spin classes (per unit |J - J'|).
    pub beta: f64,
    /// Phase relaxation width between resonances of one class; `None` is infinite.
    pub g_width: Option<f64>,
    /// Spreading width, when known.
    pub spreading: Option<f64>,
    /// Rotation quantum.
    pub hbar_omega: f64,
    /// Mean level spacing.
    pub spacing: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { gamma_up: 1.0, beta: 0.5, g_width: None, spreading: None, hbar_omega: 0.0, spacing: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    /// `gamma_up / spacing`.
    pub overlap: f64,
    pub overlapping: bool,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64| Error::Config(format!("{field} = {v} is out of range"));
        if !(self.gamma_up > 0.0 && self.gamma_up.is_finite()) {
            return Err(bad("gamma_up", self.gamma_up));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(bad("beta", self.beta));
        }
        if let Some(g) = self.g_width {
            if !(g >= 0.0) {
                return Err(bad("g_width", g));
            }
        }
        if let Some(s) = self.spreading {
            if !(s > 0.0) {
                return Err(bad("spreading", s));
            }
        }
        if !self.hbar_omega.is_finite() {
            return Err(bad("hbar_omega", self.hbar_omega));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(bad("spacing", self.spacing));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if let Some(s) = self.spreading {
            if self.gamma_up > 0.1 * s {
                w.push(format!("gamma_up = {} is not small against the spreading width {s}", self.gamma_up));
            }
        }
        w
    }

    pub fn regime(&self) -> Regime {
        let overlap = self.gamma_up / self.spacing;
        Regime { overlap, overlapping: overlap > 1.0 }
    }

    /// Same-class width as a number, infinite when absent.
    pub fn g(&self) -> f64 {
        self.g_width.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub label: String,
    pub l: u32,
    pub j: f64,
}

impl Channel {
    pub fn new(label: &str) -> Channel {
        Channel { label: label.to_string(), l: 0, j: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub entrance: Channel,
    pub exit: Channel,
}

impl ChannelPair {
    pub fn new(entrance: &str, exit: &str) -> ChannelPair {
        ChannelPair { entrance: Channel::new(entrance), exit: Channel::new(exit) }
    }

    pub fn is_elastic(&self) -> bool {
        self.entrance == self.exit
    }
}

/// Uniform energy grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

pub const DEFAULT_GRID_POINTS: usize = 2048;
pub const EDGE_GUARD_WIDTHS: f64 = 5.0;

impl EnergyGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Result<EnergyGrid> {
        if len < 2 || !(step > 0.0) || !start.is_finite() {
            return Err(Error::Config(format!("invalid energy grid: start {start}, step {step}, {len} points")));
        }
        Ok(EnergyGrid { start, step, len })
    }

    pub fn spanning(lo: f64, hi: f64, len: usize) -> Result<EnergyGrid> {
        if !(hi > lo) || len < 2 {
            return Err(Error::Config(format!("invalid energy range [{lo}, {hi}]")));
        }
        EnergyGrid::new(lo, (hi - lo) / (len - 1) as f64, len)
    }

    /// `points` points spanning `count * D` centered on the level sequence.
    pub fn centered_on(levels: &LevelSequence, points: usize) -> Result<EnergyGrid> {
        let e = &levels.energies;
        let center = 0.5 * (e[0] + e[e.len() - 1]);
        let span = levels.class.count as f64 * levels.class.spacing;
        EnergyGrid::spanning(center - span / 2.0, center + span / 2.0, points)
    }

    /// Grid over the level sequence extended by `margin` on both sides.
    pub fn padded(levels: &LevelSequence, margin: f64, points: usize) -> Result<EnergyGrid> {
        let e = &levels.energies;
        EnergyGrid::spanning(e[0] - margin, e[e.len() - 1] + margin, points)
    }

    pub fn energy(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn energies(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.energy(i)).collect()
    }

    pub fn span(&self) -> f64 {
        self.step * (self.len - 1) as f64
    }

    /// Index range that stays `guard` away from both ends.
    pub fn interior(&self, guard: f64) -> std::ops::Range<usize> {
        let k = (guard / self.step).ceil() as usize;
        if 2 * k >= self.len {
            return 0..0;
        }
        k..self.len - k
    }

    fn check_resolution(&self, gamma_up: f64) -> Result<()> {
        if self.step > gamma_up / 5.0 * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "grid spacing {} exceeds gamma_up/5 = {}; resonances are not resolved",
                self.step,
                gamma_up / 5.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TMatrixSeries {
    pub j: u32,
    pub pair: ChannelPair,
    pub grid: EnergyGrid,
    pub values: Vec<Complex64>,
}

/// Numerator convention of the pole sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Numerator {
    /// `G_mu^a gamma_mu^b` with `G` statistically identical to `gamma`.
    #[default]
    Product,
    /// Elastic deviation `(gamma_mu^a)^2 - 1`.
    ElasticDeviation,
}

/// `sum_mu g_mu / (E - E_mu + i gamma_up / 2)` on the grid.
pub fn pole_sum(energies: &[f64], numerators: &[f64], gamma_up: f64, grid: &EnergyGrid) -> Vec<Complex64> {
    let half = 0.5 * gamma_up;
    (0..grid.len)
        .into_par_iter()
        .map(|p| {
            let e = grid.energy(p);
            energies
                .iter()
                .zip(numerators)
                .map(|(&em, &g)| {
                    let x = e - em;
                    // g / (x + i h) = g (x - i h) / (x^2 + h^2)
                    let d = g / (x * x + half * half);
                    Complex64::new(x * d, -half * d)
                })
                .sum()
        })
        .collect()
}

/// Pole expansion of `t^J(E)` for one channel pair.
///
/// `gammas` holds `gamma_mu^{Ja}` with one column per entry of `channels`.
pub fn evaluate_t(
    levels: &LevelSequence,
    gammas: &DMatrix<f64>,
    channels: &[String],
    pair: &ChannelPair,
    params: &ModelParams,
    grid: &EnergyGrid,
    numerator: Numerator,
) -> Result<TMatrixSeries> {
    params.validate()?;
    if levels.is_empty() {
        return Err(Error::Config("evaluate_t: level sequence is empty".into()));
    }
    if gammas.nrows() != levels.len() {
        return Err(Error::Config(format!("{} amplitudes for {} levels", gammas.nrows(), levels.len())));
    }
    grid.check_resolution(params.gamma_up)?;
    let index = |label: &str| {
        channels.iter().position(|c| c == label).ok_or_else(|| Error::Config(format!("unknown channel '{label}'")))
    };
    let a = index(&pair.entrance.label)?;
    let b = index(&pair.exit.label)?;
    let nums: Vec<f64> = match numerator {
        Numerator::Product => (0..levels.len()).map(|m| gammas[(m, a)] * gammas[(m, b)]).collect(),
        Numerator::ElasticDeviation => {
            if a != b {
                return Err(Error::Config("elastic numerator requires entrance = exit".into()));
            }
            (0..levels.len()).map(|m| gammas[(m, a)].powi(2) - 1.0).collect()
        }
    };
    Ok(TMatrixSeries {
        j: levels.class.j,
        pair: pair.clone(),
        grid: *grid,
        values: pole_sum(&levels.energies, &nums, params.gamma_up, grid),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAverage {
    /// Windowed mean of `tA conj(tB)`.
    pub cross: Complex64,
    pub mean_a: Complex64,
    pub mean_b: Complex64,
    pub points: usize,
}

/// Energy average over a window of width `delta_e` centered on the grid.
pub fn energy_average_pair(ta: &TMatrixSeries, tb: &TMatrixSeries, delta_e: f64) -> Result<PairAverage> {
    if ta.grid != tb.grid {
        return Err(Error::Config("series live on different grids".into()));
    }
    let g = ta.grid;
    if !(delta_e > 0.0) || delta_e > g.span() {
        return Err(Error::Range(format!("averaging window {delta_e} exceeds the grid span {}", g.span())));
    }
    let center = g.start + g.span() / 2.0;
    let idx: Vec<usize> =
        (0..g.len).filter(|&i| (g.energy(i) - center).abs() <= delta_e / 2.0).collect();
    if idx.len() < 20 {
        return Err(Error::Range(format!("averaging window covers {} grid points; at least 20 needed", idx.len())));
    }
    let n = idx.len() as f64;
    let cross = idx.iter().map(|&i| ta.values[i] * tb.values[i].conj()).sum::<Complex64>() / n;
    let mean_a = idx.iter().map(|&i| ta.values[i]).sum::<Complex64>() / n;
    let mean_b = idx.iter().map(|&i| tb.values[i]).sum::<Complex64>() / n;
    Ok(PairAverage { cross, mean_a, mean_b, points: idx.len() })
}

fn spin_gap(j: u32, jp: u32) -> f64 {
    (j as f64 - jp as f64).abs()
}

/// Correlation coefficient between `t^J` and `t^J'` at equal energies.
pub fn cross_spin_correlation(params: &ModelParams, j: u32, jp: u32) -> f64 {
    params.gamma_up / (params.gamma_up + params.beta * spin_gap(j, jp))
}

/// Time law of the cross-spin correlation, `exp(-beta |J - J'| t)`.
pub fn cross_spin_time_correlation(params: &ModelParams, j: u32, jp: u32, t: f64) -> f64 {
    (-params.beta * spin_gap(j, jp) * t).exp()
}

/// `1 + gamma_up / (gamma_up + G)`.
pub fn spin_diag_enhancement(params: &ModelParams) -> f64 {
    let g = params.g();
    if g.is_infinite() {
        1.0
    } else {
        1.0 + params.gamma_up / (params.gamma_up + g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePowerSpectrum {
    pub t: Vec<f64>,
    /// Normalized spectrum, integrating to one over `t >= 0`.
    pub power: Vec<f64>,
    /// Ratio to the baseline without same-class correlations, `1 + exp(-G t)`.
    pub envelope: Vec<f64>,
}

/// Closed-form time power spectrum.
pub fn time_power_spectrum(params: &ModelParams, t: &[f64]) -> Result<TimePowerSpectrum> {
    params.validate()?;
    if let Some(bad) = t.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Range(format!("time {bad} is negative")));
    }
    let gam = params.gamma_up;
    let g = params.g();
    let envelope: Vec<f64> = t.iter().map(|&x| 1.0 + (-g * x).exp()).collect();
    let prefactor = if g.is_infinite() { gam } else { gam * (gam + g) / (2.0 * gam + g) };
    let power = t.iter().zip(&envelope).map(|(&x, &e)| prefactor * (-gam * x).exp() * e).collect();
    Ok(TimePowerSpectrum { t: t.to_vec(), power, envelope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatingCorrelation {
    pub coefficient: Complex64,
    pub time_correlation: Complex64,
}

/// Correlation between `t^J` and `t^J'` for a coherently rotating system.
pub fn rotating_correlation(params: &ModelParams, j: u32, jp: u32, t: f64) -> RotatingCorrelation {
    let dj = j as f64 - jp as f64;
    let damp = params.beta * dj.abs();
    let coefficient = Complex64::new(params.gamma_up, 0.0) / Complex64::new(params.gamma_up + damp, params.hbar_omega * dj);
    let time_correlation = Complex64::from_polar((-damp * t).exp(), -dj * params.hbar_omega * t);
    RotatingCorrelation { coefficient, time_correlation }
}

/// Complex Gaussian t-matrix processes for several spin classes with Lorentzian
/// energy autocorrelation and prescribed cross-spin correlations.
///
/// The processes are built in the time domain. Every time bin carries an
/// independent complex Gaussian vector mixed by the square root of the
/// bin-averaged correlation matrix `exp(-beta |J-J'| t) exp(i (J'-J) omega t)`
/// under the decay envelope `exp(-gamma_up t)`; an inverse FFT returns to energy.
#[derive(Debug, Clone)]
pub struct CorrelatedProcess {
    pub params: ModelParams,
    pub spins: Vec<u32>,
    pub pair: ChannelPair,
    pub grid: EnergyGrid,
    /// Mixing matrix per time bin, already scaled by the envelope weight.
    factors: Vec<DMatrix<Complex64>>,
}

fn integral_exp(rate: Complex64, a: f64, b: f64) -> Complex64 {
    // integral of exp(-rate t) over [a, b]
    if rate.norm() * (b - a) < 1e-8 {
        let mid = 0.5 * (a + b);
        return (-rate * mid).exp() * (b - a);
    }
    ((-rate * a).exp() - (-rate * b).exp()) / rate
}

impl CorrelatedProcess {
    pub fn new(params: &ModelParams, spins: &[u32], pair: &ChannelPair, grid: &EnergyGrid) -> Result<CorrelatedProcess> {
        params.validate()?;
        if spins.is_empty() {
            return Err(Error::Config("at least one spin class is required".into()));
        }
        grid.check_resolution(params.gamma_up)?;
        let n = grid.len;
        let dtau = 2.0 * std::f64::consts::PI / (n as f64 * grid.step);
        let s = spins.len();
        let gam = params.gamma_up;
        let mut factors = Vec::with_capacity(n / 2);
        for k in 0..n / 2 {
            let (a, b) = (k as f64 * dtau, (k + 1) as f64 * dtau);
            let weight = integral_exp(Complex64::new(gam, 0.0), a, b).re;
            let mut r = DMatrix::<Complex64>::zeros(s, s);
            for (x, &jx) in spins.iter().enumerate() {
                for (y, &jy) in spins.iter().enumerate() {
                    let dj = jy as f64 - jx as f64;
                    let rate = Complex64::new(gam + params.beta * dj.abs(), -dj * params.hbar_omega);
                    r[(x, y)] = integral_exp(rate, a, b) / weight;
                }
            }
            let eig = SymmetricEigen::new(r);
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if min < -1e-9 {
                return Err(Error::Model(format!("cross-spin correlation matrix is not positive semidefinite (eigenvalue {min:.3e})")));
            }
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| Complex64::new(v.max(0.0).sqrt(), 0.0)));
            let root = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
            // scale so that <|t|^2> = 1
            factors.push(root * Complex64::new((weight * gam).sqrt(), 0.0));
        }
        Ok(CorrelatedProcess { params: *params, spins: spins.to_vec(), pair: pair.clone(), grid: *grid, factors })
    }

    /// One realization: a series per spin class.
    pub fn sample(&self, seed: u64, realization: u64) -> Vec<TMatrixSeries> {
        let n = self.grid.len;
        let s = self.spins.len();
        let dtau = 2.0 * std::f64::consts::PI / (n as f64 * self.grid.step);
        let mut r = rng::stream(seed, rng::purpose::PROCESS, realization);
        let mut bufs = vec![vec![Complex64::new(0.0, 0.0); n]; s];
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        for (k, f) in self.factors.iter().enumerate() {
            let z: Vec<Complex64> =
                (0..s).map(|_| Complex64::new(rng::normal(&mut r) * scale, rng::normal(&mut r) * scale)).collect();
            // t(E_p) = sum_k x_k exp(i E_p tau_k), E_p = start + p step
            let tau = (k as f64 + 0.5) * dtau;
            let phase = Complex64::from_polar(1.0, self.grid.start * tau);
            for x in 0..s {
                let mut v = Complex64::new(0.0, 0.0);
                for y in 0..s {
                    v += f[(x, y)] * z[y];
                }
                bufs[x][k] = v * phase;
            }
        }
        let fft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut out = Vec::with_capacity(s);
        for (x, mut buf) in bufs.into_iter().enumerate() {
            fft.process(&mut buf);
            // bin k sits at tau_k + dtau/2; the half-bin shift is a phase ramp in E
            let values = buf
                .iter()
                .enumerate()
                .map(|(p, v)| v * Complex64::from_polar(1.0, 0.5 * dtau * p as f64 * self.grid.step))
                .collect();
            out.push(TMatrixSeries { j: self.spins[x], pair: self.pair.clone(), grid: self.grid, values });
        }
        out
    }
}

/// One realization of correlated processes; see [`CorrelatedProcess`].
pub fn synth_correlated_process(
    params: &ModelParams,
    spins: &[u32],
    pair: &ChannelPair,
    grid: &EnergyGrid,
    seed: u64,
) -> Result<Vec<TMatrixSeries>> {
    Ok(CorrelatedProcess::new(params, spins, pair, grid)?.sample(seed, 0))
}

/// Pearson coefficient `sum a conj(b) / sqrt(sum |a|^2 sum |b|^2)`.
pub fn sample_correlation(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let cross: Complex64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
    let na: f64 = a.iter().map(|x| x.norm_sqr()).sum();
    let nb: f64 = b.iter().map(|x| x.norm_sqr()).sum();
    cross / (na * nb).sqrt()
}

/// Equal-energy correlation between two spin classes estimated over realizations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub estimate: Complex64,
    /// Large-sample Pearson error `(1 - |rho|^2) / sqrt(R)`.
    pub stderr: f64,
    pub closed_form: Complex64,
    pub realizations: usize,
}

/// Samples the correlated process for classes `j`, `jp` at the grid center
/// once per realization and returns the sample correlation coefficient.
pub fn process_correlation(params: &ModelParams, j: u32, jp: u32, realizations: usize, seed: u64) -> Result<CorrelationEstimate> {
    if realizations < 2 {
        return Err(Error::Config("realizations: at least 2 are required".into()));
    }
    let grid = EnergyGrid::new(0.0, params.gamma_up / 5.0, 512)?;
    let process = CorrelatedProcess::new(params, &[j, jp], &ChannelPair::new("a", "b"), &grid)?;
    let mid = grid.len / 2;
    let pairs: Vec<(Complex64, Complex64)> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let s = process.sample(seed, r);
            (s[0].values[mid], s[1].values[mid])
        })
        .collect();
    let (a, b): (Vec<Complex64>, Vec<Complex64>) = pairs.into_iter().unzip();
    let estimate = sample_correlation(&a, &b);
    Ok(CorrelationEstimate {
        estimate,
        stderr: (1.0 - estimate.norm_sqr()).max(0.0) / (realizations as f64).sqrt(),
        closed_form: rotating_correlation(params, j, jp, 0.0).coefficient,
        realizations,
    })
}

/// Lorentzian kernel `(D/pi) w / (r^2 + w^2)` between two spectra, with the
/// diagonal removed when both are the same class, normalized so that every
/// row and column sums to one.
///
/// The symmetric normalization `S^{-1/2} L T^{-1/2}` keeps the spectral norm at
/// most one, so the joint covariance stays positive semidefinite.
pub fn sum_rule_kernel(ea: &[f64], eb: &[f64], width: f64, spacing: f64, same_class: bool) -> Result<DMatrix<f64>> {
    if !(width > 0.0) {
        return Err(Error::Model(format!("Lorentzian width must be positive, got {width}")));
    }
    let mut l = DMatrix::from_fn(ea.len(), eb.len(), |i, j| {
        if same_class && i == j {
            0.0
        } else {
            let r = ea[i] - eb[j];
            spacing / std::f64::consts::PI * width / (r * r + width * width)
        }
    });
    let rows: Vec<f64> = l.row_iter().map(|r| r.sum()).collect();
    let cols: Vec<f64> = l.column_iter().map(|c| c.sum()).collect();
    if rows.iter().chain(&cols).any(|&v| !(v > 0.0)) {
        return Err(Error::Model("Lorentzian kernel has an empty row".into()));
    }
    for i in 0..ea.len() {
        for j in 0..eb.len() {
            l[(i, j)] /= (rows[i] * cols[j]).sqrt();
        }
    }
    Ok(l)
}

/// Pole-sum numerators jointly Gaussian with unit variance and Lorentzian
/// correlations between levels: width `G` inside a class, `beta |J - J'|`
/// across classes, each block normalized by [`sum_rule_kernel`].
#[derive(Debug, Clone)]
pub struct CorrelatedNumerators {
    pub levels: Vec<LevelSequence>,
    pub params: ModelParams,
    root: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl CorrelatedNumerators {
    pub fn new(levels: &[LevelSequence], params: &ModelParams) -> Result<CorrelatedNumerators> {
        params.validate()?;
        let sizes: Vec<usize> = levels.iter().map(|l| l.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut cov = DMatrix::<f64>::identity(total, total);
        for (x, lx) in levels.iter().enumerate() {
            for (y, ly) in levels.iter().enumerate().skip(x) {
                let block = if x == y {
                    match params.g_width {
                        Some(g) => {
                            sum_rule_kernel(&lx.energies, &ly.energies, g, params.spacing, true)?
                                + DMatrix::identity(sizes[x], sizes[x])
                        }
                        None => continue,
                    }
                } else {
                    let w = params.beta * spin_gap(lx.class.j, ly.class.j);
                    sum_rule_kernel(&lx.energies, &ly.energies, w, params.spacing, false)?
                };
                cov.view_mut((offsets[x], offsets[y]), (sizes[x], sizes[y])).copy_from(&block);
                if x != y {
                    cov.view_mut((offsets[y], offsets[x]), (sizes[y], sizes[x])).copy_from(&block.transpose());
                }
            }
        }
        let root = psd_sqrt(&cov, 1e-8)?;
        Ok(CorrelatedNumerators { levels: levels.to_vec(), params: *params, root, offsets })
    }

    /// Numerators per class for one realization.
    pub fn sample(&self, seed: u64, realization: u64) -> Vec<Vec<f64>> {
        self.transform(&self.draw_white(seed, realization))
    }

    pub fn draw_white(&self, seed: u64, realization: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, rng::purpose::NUMERATORS, realization);
        rng::normals(&mut r, self.root.nrows())
    }

    /// Correlated numerators from white noise `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let g = &self.root * nalgebra::DVector::from_column_slice(z);
        (0..self.levels.len()).map(|c| g.as_slice()[self.offsets[c]..self.offsets[c + 1]].to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPowerSpectrum {
    pub t: Vec<f64>,
    /// Simulated ratio to the uncorrelated baseline.
    pub ratio: Vec<f64>,
    /// Closed-form `1 + exp(-G t)`.
    pub envelope: Vec<f64>,
    pub max_rel_deviation: f64,
    pub realizations: usize,
}

/// Monte Carlo time power spectrum for one class with same-class Lorentzian
/// numerator correlations of width `G`, as a ratio to the same spectrum with
/// independent numerators. Compared with `1 + exp(-G t)` for `0 < t <= t_max`.
///
/// Each realization evaluates the pole sum on a grid padded by `10 gamma_up`,
/// and the power is the squared modulus of its zero-padded FFT, i.e. the
/// transform of the energy autocorrelation.
pub fn simulate_time_power_spectrum(
    params: &ModelParams,
    levels: &LevelSequence,
    realizations: usize,
    t_max: f64,
    seed: u64,
) -> Result<SimulatedPowerSpectrum> {
    params.validate()?;
    if params.g_width.is_none() {
        return Err(Error::Config("g_width is required for the power-spectrum simulation".into()));
    }
    let numer = CorrelatedNumerators::new(std::slice::from_ref(levels), params)?;
    let margin = 10.0 * params.gamma_up;
    let span = levels.energies[levels.len() - 1] - levels.energies[0] + 2.0 * margin;
    let points = ((span / (params.gamma_up / 5.0)).ceil() as usize + 1).max(DEFAULT_GRID_POINTS).next_power_of_two();
    let grid = EnergyGrid::padded(levels, margin, points)?;
    let pad = 4 * points;
    // poles evaluated once; each realization is a linear combination
    let basis: Vec<Vec<Complex64>> =
        (0..levels.len()).map(|m| pole_sum(&levels.energies[m..m + 1], &[1.0], params.gamma_up, &grid)).collect();
    let dtau = 2.0 * std::f64::consts::PI / (pad as f64 * grid.step);
    let kmax = (t_max / dtau).floor() as usize;
    if kmax < 4 {
        return Err(Error::Resolution("time window holds fewer than four FFT bins".into()));
    }
    let power = |g: &[f64], planner: &mut FftPlanner<f64>| -> Vec<f64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); pad];
        for (m, &gm) in g.iter().enumerate() {
            for (p, h) in basis[m].iter().enumerate() {
                buf[p] += h * gm;
            }
        }
        planner.plan_fft_forward(pad).process(&mut buf);
        buf[1..=kmax].iter().map(|z| z.norm_sqr()).collect()
    };
    let sums: Vec<(Vec<f64>, Vec<f64>)> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let mut planner = FftPlanner::new();
            let z = numer.draw_white(seed, r);
            let g = numer.transform(&z).remove(0);
            (power(&g, &mut planner), power(&z, &mut planner))
        })
        .collect();
    let mut pc = vec![0.0; kmax];
    let mut p0 = vec![0.0; kmax];
    for (a, b) in &sums {
        for k in 0..kmax {
            pc[k] += a[k];
            p0[k] += b[k];
        }
    }
    let g = params.g();
    let t: Vec<f64> = (1..=kmax).map(|k| k as f64 * dtau).collect();
    let envelope: Vec<f64> = t.iter().map(|&x| 1.0 + (-g * x).exp()).collect();
    let ratio: Vec<f64> = pc.iter().zip(&p0).map(|(a, b)| a / b).collect();
    let max_rel_deviation = ratio.iter().zip(&envelope).map(|(r, e)| (r / e - 1.0).abs()).fold(0.0, f64::max);
    Ok(SimulatedPowerSpectrum { t, ratio, envelope, max_rel_deviation, realizations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::{generate_levels, LevelModel, SpinClass};
    use crate::stats::{autocorrelation_complex, lorentzian_fit, Estimate};

    fn params(gamma_up: f64, beta: f64) -> ModelParams {
        ModelParams { gamma_up, beta, ..ModelParams::default() }
    }

    fn single_level(e0: f64) -> LevelSequence {
        LevelSequence { class: SpinClass::new(0, 1, 2, 1.0), energies: vec![e0, e0 + 1e6] }
    }

    #[test]
    fn single_pole_peak_and_width() {
        let lv = single_level(0.0);
        let p = params(0.5, 0.0);
        let grid = EnergyGrid::spanning(-5.0, 5.0, 10_001).unwrap();
        let t = pole_sum(&lv.energies[..1], &[1.0], p.gamma_up, &grid);
        let mid = 5000;
        assert!((t[mid].norm() - 2.0 / p.gamma_up).abs() < 1e-12);
        // full width at half maximum of |t|^2
        let peak = t[mid].norm_sqr();
        let above: Vec<f64> = (0..grid.len).filter(|&i| t[i].norm_sqr() >= peak / 2.0).map(|i| grid.energy(i)).collect();
        let fwhm = above.last().unwrap() - above.first().unwrap();
        assert!((fwhm - p.gamma_up).abs() < 2.0 * grid.step, "{fwhm}");
    }

    #[test]
    fn evaluate_t_checks_inputs() {
        let lv = generate_levels(SpinClass::new(0, 1, 8, 1.0), LevelModel::Picket, 0).unwrap();
        let g = DMatrix::from_element(8, 2, 1.0);
        let ch = vec!["a".to_string(), "b".to_string()];
        let coarse = EnergyGrid::spanning(0.0, 8.0, 10).unwrap();
        let r = evaluate_t(&lv, &g, &ch, &ChannelPair::new("a", "b"), &params(1.0, 0.0), &coarse, Numerator::Product);
        assert!(matches!(r, Err(Error::Config(_))));
        let fine = EnergyGrid::spanning(0.0, 8.0, 200).unwrap();
        let r = evaluate_t(&lv, &g, &ch, &ChannelPair::new("a", "b"), &params(1.0, 0.0), &fine, Numerator::ElasticDeviation);
        assert!(r.is_err());
        let t = evaluate_t(&lv, &g, &ch, &ChannelPair::new("a", "a"), &params(1.0, 0.0), &fine, Numerator::ElasticDeviation).unwrap();
        assert!(t.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn pole_sum_autocorrelation_width_is_gamma() {
        // oracle: Lorentzian fit of |<t(E) t*(E+eps)>|^2, HWHM = gamma_up
        let gam = 10.0;
        let lv = generate_levels(SpinClass::new(0, 1, 64, 1.0), LevelModel::Picket, 0).unwrap();
        let grid = EnergyGrid::padded(&lv, 10.0 * gam, 2048).unwrap();
        let lags = 400;
        let n = grid.len as f64;
        let mut acc = vec![Complex64::new(0.0, 0.0); lags];
        for r in 0..400u64 {
            let mut rg = rng::stream(4, 0, r);
            let g = rng::normals(&mut rg, 64);
            let t = pole_sum(&lv.energies, &g, gam, &grid);
            let c = autocorrelation_complex(&t, lags);
            // the signal is localized, so undo the 1/(n - k) normalization
            for k in 0..lags {
                acc[k] += c[k] * ((n - k as f64) / n);
            }
        }
        let x: Vec<f64> = (0..lags).map(|k| k as f64 * grid.step).collect();
        let y: Vec<f64> = acc.iter().map(|c| c.norm_sqr()).collect();
        let fit = lorentzian_fit(&x, &y).unwrap();
        assert!((fit.width / gam - 1.0).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn energy_average_of_self_is_mean_square() {
        let grid = EnergyGrid::spanning(0.0, 10.0, 101).unwrap();
        let values: Vec<Complex64> = (0..101).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let t = TMatrixSeries { j: 0, pair: ChannelPair::new("a", "b"), grid, values };
        let avg = energy_average_pair(&t, &t, 4.0).unwrap();
        assert!(avg.cross.im.abs() < 1e-12 && avg.cross.re > 0.0);
        assert!(matches!(energy_average_pair(&t, &t, 20.0), Err(Error::Range(_))));
        assert!(matches!(energy_average_pair(&t, &t, 1.0), Err(Error::Range(_))));
    }

    #[test]
    fn off_diagonal_t_averages_to_zero() {
        use crate::microensemble::{build_k_correlation, EnsembleBasis, EnsembleConfig, Realize};
        use std::sync::Arc;
        let cfg = EnsembleConfig::uniform(2, 64, 1.0);
        let k = build_k_correlation(&cfg).unwrap();
        let basis = Arc::new(EnsembleBasis::new(cfg.clone(), k, cfg.generate_levels().unwrap()).unwrap());
        let p = ModelParams { gamma_up: 5.0, spacing: 1.0, ..ModelParams::default() };
        let lv = &basis.levels[0];
        let grid = EnergyGrid::centered_on(lv, 512).unwrap();
        let pair = ChannelPair::new("a", "b");
        let mut re = Vec::new();
        let mut im = Vec::new();
        let mut cross = Vec::new();
        let mut shuffled = Vec::new();
        let mut prev: Option<TMatrixSeries> = None;
        for r in 0..300 {
            let e = basis.realize(r);
            let t0 = evaluate_t(lv, &e.gammas[0], &cfg.channels, &pair, &p, &grid, Numerator::Product).unwrap();
            let t1 = evaluate_t(&basis.levels[1], &e.gammas[1], &cfg.channels, &pair, &p, &grid, Numerator::Product).unwrap();
            let avg = energy_average_pair(&t0, &t1, 20.0).unwrap();
            re.push(avg.mean_a.re);
            im.push(avg.mean_a.im);
            cross.push(avg.cross.re);
            if let Some(p1) = &prev {
                // null distribution: pair with the previous realization
                shuffled.push(energy_average_pair(&t0, p1, 20.0).unwrap().cross.re);
            }
            prev = Some(t1);
        }
        let (er, ei) = (Estimate::from_samples(&re), Estimate::from_samples(&im));
        assert!(er.agrees_with(0.0, 3.0) && ei.agrees_with(0.0, 3.0), "{er:?} {ei:?}");
        let c = Estimate::from_samples(&cross);
        let null = Estimate::from_samples(&shuffled);
        assert!(c.agrees_with(0.0, 3.0), "{c:?}");
        assert!((c.stderr / null.stderr - 1.0).abs() < 0.5);
    }

    #[test]
    fn closed_form_laws() {
        let p = params(1.0, 0.0);
        assert_eq!(cross_spin_correlation(&p, 0, 1), 1.0);
        assert_eq!(cross_spin_correlation(&params(1.0, 1.0), 2, 3), 0.5);
        let kev = params(2.0, 0.01);
        assert!((cross_spin_correlation(&kev, 0, 1) - 2.0 / 2.01).abs() < 1e-15);
        assert!((cross_spin_correlation(&kev, 0, 1) - 0.995).abs() < 1e-4);
        assert_eq!(cross_spin_time_correlation(&params(1.0, 0.3), 0, 2, 0.0), 1.0);
        let mut q = params(1.0, 0.0);
        assert_eq!(spin_diag_enhancement(&q), 1.0);
        q.g_width = Some(0.0);
        assert_eq!(spin_diag_enhancement(&q), 2.0);
        q.g_width = Some(1.0);
        assert_eq!(spin_diag_enhancement(&q), 1.5);
    }

    #[test]
    fn power_spectrum_closed_form() {
        let p = ModelParams { gamma_up: 1.0, g_width: Some(4.0), ..ModelParams::default() };
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let s = time_power_spectrum(&p, &t).unwrap();
        for (i, &x) in t.iter().enumerate() {
            assert!((s.envelope[i] - (1.0 + (-4.0 * x).exp())).abs() < 1e-15);
            let base = s.power[i] / s.envelope[i] / (-x).exp();
            assert!((base - s.power[0] / 2.0).abs() < 1e-12);
        }
        assert!(time_power_spectrum(&p, &[-1.0]).is_err());
        // large G, t << 1/G: twice the baseline
        let big = ModelParams { gamma_up: 1.0, g_width: Some(1e6), ..ModelParams::default() };
        assert!((time_power_spectrum(&big, &[1e-9]).unwrap().envelope[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn power_spectrum_integral_matches_enhancement() {
        // the unnormalized shape integrates to (1/gamma) times the enhancement factor
        for g in [0.0, 0.5, 1.0, 3.0] {
            let p = ModelParams { gamma_up: 1.0, g_width: Some(g), ..ModelParams::default() };
            let h = 1e-3;
            let t: Vec<f64> = (0..40_000).map(|i| i as f64 * h).collect();
            let s = time_power_spectrum(&p, &t).unwrap();
            let shape: f64 = s.envelope.iter().zip(&t).map(|(e, x)| e * (-x).exp()).sum::<f64>() * h
                - 0.5 * h * s.envelope[0];
            assert!((shape - spin_diag_enhancement(&p)).abs() < 1e-6, "{g}: {shape}");
            let total: f64 = s.power.iter().sum::<f64>() * h - 0.5 * h * s.power[0];
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotating_limits() {
        let p = ModelParams { gamma_up: 1.0, beta: 0.5, hbar_omega: 0.0, ..ModelParams::default() };
        let r = rotating_correlation(&p, 1, 2, 0.3);
        assert!((r.coefficient.re - cross_spin_correlation(&p, 1, 2)).abs() < 1e-15 && r.coefficient.im == 0.0);
        let q = ModelParams { gamma_up: 1.0, beta: 0.0, hbar_omega: 10.0, ..ModelParams::default() };
        for t in [0.0, 0.7, 3.1] {
            assert!((rotating_correlation(&q, 0, 1, t).time_correlation.norm() - 1.0).abs() < 1e-15);
        }
        assert!((rotating_correlation(&q, 0, 1, 0.0).coefficient.norm() - 1.0 / 101f64.sqrt()).abs() < 1e-15);
    }

    fn process_correlation(p: &ModelParams, realizations: usize) -> Complex64 {
        super::process_correlation(p, 0, 1, realizations, 11).unwrap().estimate
    }

    #[test]
    fn process_cross_correlation_follows_closed_form() {
        let p = params(1.0, 0.5);
        let c = process_correlation(&p, 10_000);
        assert!((c.re - 2.0 / 3.0).abs() < 0.02 && c.im.abs() < 0.02, "{c}");
        let d = process_correlation(&params(1.0, 100.0), 10_000);
        assert!(d.norm() < 0.02 + 3.0 / 100.0, "{d}");
        assert!(d.re.abs() < 0.02, "{d}");
    }

    #[test]
    fn rotating_process_matches_complex_coefficient() {
        let p = ModelParams { gamma_up: 1.0, beta: 0.2, hbar_omega: 0.8, ..ModelParams::default() };
        let c = process_correlation(&p, 10_000);
        let target = rotating_correlation(&p, 0, 1, 0.0).coefficient;
        assert!((c - target).norm() < 0.03, "{c} vs {target}");
    }

    #[test]
    fn process_autocorrelation_width() {
        let p = params(1.0, 0.5);
        let grid = EnergyGrid::new(0.0, 0.2, 2048).unwrap();
        let proc = CorrelatedProcess::new(&p, &[0], &ChannelPair::new("a", "b"), &grid).unwrap();
        let lags = 100;
        let mut acc = vec![Complex64::new(0.0, 0.0); lags];
        let mut ms = 0.0;
        for r in 0..200 {
            let s = &proc.sample(2, r)[0];
            ms += s.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / s.values.len() as f64;
            for (k, c) in autocorrelation_complex(&s.values, lags).into_iter().enumerate() {
                acc[k] += c;
            }
        }
        assert!((ms / 200.0 - 1.0).abs() < 0.05, "{}", ms / 200.0);
        let x: Vec<f64> = (0..lags).map(|k| k as f64 * 0.2).collect();
        let y: Vec<f64> = acc.iter().map(|c| c.norm_sqr()).collect();
        let fit = lorentzian_fit(&x, &y).unwrap();
        assert!((fit.width - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn sum_rule_kernel_rows_and_norm() {
        let lv = generate_levels(SpinClass::new(0, 1, 40, 1.0), LevelModel::Poisson, 3).unwrap();
        let k = sum_rule_kernel(&lv.energies, &lv.energies, 3.0, 1.0, true).unwrap();
        let norm = SymmetricEigen::new(k.clone()).eigenvalues.amax();
        assert!(norm <= 1.0 + 1e-12, "{norm}");
        for i in 0..40 {
            assert_eq!(k[(i, i)], 0.0);
        }
    }

    #[test]
    fn micro_route_agrees_with_process_route() {
        // numerators with Lorentzian cross-class correlations of width beta
        let gam = 4.0;
        let beta = 2.0;
        let p = ModelParams { gamma_up: gam, beta, g_width: None, spacing: 1.0, ..ModelParams::default() };
        let lv0 = generate_levels(SpinClass::new(0, 1, 160, 1.0), LevelModel::Picket, 0).unwrap();
        let lv1 = generate_levels(SpinClass::new(1, 1, 160, 1.0), LevelModel::Picket, 0).unwrap().shifted(0.5);
        let numer = CorrelatedNumerators::new(&[lv0.clone(), lv1.clone()], &p).unwrap();
        let center = 80.0;
        let grid = EnergyGrid::new(center - 2.0, 0.5, 9).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in 0..4000 {
            let g = numer.sample(5, r);
            a.push(pole_sum(&lv0.energies, &g[0], gam, &grid)[4]);
            b.push(pole_sum(&lv1.energies, &g[1], gam, &grid)[4]);
        }
        let micro = sample_correlation(&a, &b).re;
        let pheno = process_correlation(&p, 4000).re;
        let target = cross_spin_correlation(&p, 0, 1);
        // each estimate has error about (1 - rho^2)/sqrt(n)
        let err = (1.0 - target * target) / 4000f64.sqrt();
        let joint = err * std::f64::consts::SQRT_2;
        assert!((micro - pheno).abs() < 3.0 * joint + 0.02, "micro {micro} pheno {pheno} target {target}");
        assert!((micro - target).abs() < 3.0 * err + 0.02, "micro {micro} target {target}");
    }

    #[test]
    fn simulated_power_spectrum_tracks_envelope() {
        let p = ModelParams { gamma_up: 10.0, g_width: Some(10.0), spacing: 1.0, ..ModelParams::default() };
        let lv = generate_levels(SpinClass::new(0, 1, 256, 1.0), LevelModel::Picket, 0).unwrap();
        let s = simulate_time_power_spectrum(&p, &lv, 200, 3.0 / p.gamma_up, 7).unwrap();
        assert!(s.max_rel_deviation < 0.1, "{}", s.max_rel_deviation);
    }
}
