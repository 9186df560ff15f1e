//! Discretized wavefunctions on a 1-D grid of equal-measure cells: effective
//! volumes, intensity correlators, overlap identities and density-fluctuation
//! correlators of compound wave packets.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microensemble::barred_wavefunction;
use crate::rng;
use crate::stats::{jarque_bera, normal_quantile, Estimate};

pub const MIN_GRID_POINTS: usize = 64;

/// Standard deviation of `L` for independent Gaussian fields is `L_NULL_SCALE / sqrt(points)`.
pub const L_NULL_SCALE: f64 = 2.309_401_076_758_503; // sqrt(16/3)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub points: usize,
    /// Total integration measure.
    pub volume: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { points: 4096, volume: 1.0 }
    }
}

impl GridConfig {
    pub fn new(points: usize, volume: f64) -> Result<GridConfig> {
        let g = GridConfig { points, volume };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < MIN_GRID_POINTS {
            return Err(Error::Config(format!("grid needs at least {MIN_GRID_POINTS} points, got {}", self.points)));
        }
        if !(self.volume > 0.0) || !self.volume.is_finite() {
            return Err(Error::Config(format!("grid volume must be positive, got {}", self.volume)));
        }
        Ok(())
    }

    pub fn cell(&self) -> f64 {
        self.volume / self.points as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWavefunction {
    pub values: Vec<f64>,
    pub cell: f64,
    pub j: u32,
    pub mu: usize,
    pub parity: Option<i8>,
}

impl GridWavefunction {
    /// Scales `values` to unit norm `sum v^2 cell = 1`.
    pub fn normalized(values: Vec<f64>, grid: &GridConfig) -> Result<GridWavefunction> {
        grid.validate()?;
        if values.len() != grid.points {
            return Err(Error::Config(format!("{} values for a grid of {}", values.len(), grid.points)));
        }
        let norm = (values.iter().map(|v| v * v).sum::<f64>() * grid.cell()).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain("wavefunction vanishes identically".into()));
        }
        Ok(GridWavefunction { values: values.iter().map(|v| v / norm).collect(), cell: grid.cell(), j: 0, mu: 0, parity: None })
    }

    pub fn labeled(mut self, j: u32, mu: usize, parity: Option<i8>) -> GridWavefunction {
        self.j = j;
        self.mu = mu;
        self.parity = parity;
        self
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.cell
    }

    pub fn volume(&self) -> f64 {
        self.cell * self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,phi\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", (i as f64 + 0.5) * self.cell));
        }
        s
    }
}

/// Independent Gaussian values with uniform variance, normalized.
pub fn gaussian_field(grid: &GridConfig, seed: u64, index: u64) -> Result<GridWavefunction> {
    let mut r = rng::stream(seed, rng::purpose::FIELDS, index);
    GridWavefunction::normalized(rng::normals(&mut r, grid.points), grid)
}

/// `3 / int phi^4`.
pub fn effective_volume(phi: &GridWavefunction) -> Result<f64> {
    let m4 = phi.values.iter().map(|v| v.powi(4)).sum::<f64>() * phi.cell;
    if !(m4 > 0.0) {
        return Err(Error::Domain("effective volume of a vanishing function".into()));
    }
    Ok(3.0 / m4)
}

fn check_pair(a: &GridWavefunction, b: &GridWavefunction) -> Result<()> {
    if a.values.len() != b.values.len() || (a.cell - b.cell).abs() > 1e-12 * a.cell {
        return Err(Error::Config("wavefunctions live on different grids".into()));
    }
    Ok(())
}

/// Intensity correlator with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// `L = V mean_r[(phi_a^2)(phi_b^2)] - 1` with `V` the geometric mean of the two
/// effective volumes; the volume mean is `(1/V) int dr`.
///
/// In cell moments this is `3 <x^2 y^2> / sqrt(<x^4><y^4>) - 1`, so `L(phi, phi) = 2`
/// identically.
pub fn intensity_correlator_l(a: &GridWavefunction, b: &GridWavefunction) -> Result<LEstimate> {
    check_pair(a, b)?;
    let n = a.values.len() as f64;
    let va = effective_volume(a)?;
    let vb = effective_volume(b)?;
    let mean = |f: &dyn Fn(f64, f64) -> f64| a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).sum::<f64>() / n;
    let mxy = mean(&|x, y| x * x * y * y);
    let m4x = mean(&|x, _| x.powi(4));
    let m4y = mean(&|_, y| y.powi(4));
    let value = (va * vb).sqrt() * mxy * a.cell * n - 1.0;
    let s = (m4x * m4y).sqrt();
    // influence of each cell on 3 mxy / s
    let z: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            3.0 / s * ((x * x * y * y - mxy) - 0.5 * mxy * ((x.powi(4) - m4x) / m4x + (y.powi(4) - m4y) / m4y))
        })
        .collect();
    Ok(LEstimate { value, stderr: Estimate::from_samples(&z).stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedFields {
    pub a: GridWavefunction,
    pub b: GridWavefunction,
    pub target: f64,
    /// Mixing strength of the variance modulation.
    pub c: f64,
    /// `3 L_NULL_SCALE / sqrt(points)`.
    pub null_threshold: f64,
    /// Whether `target` exceeds the null threshold.
    pub detectable: bool,
}

pub const MAX_FIELD_CORRELATION: f64 = 0.2;
const STRATA_BLOCK: usize = 16;

/// Variance-modulation strength giving intensity correlation `q`.
///
/// With `y = z2 sqrt(1 + c (z1^2 - 1))` the Gaussian moments give
/// `L = (1 + 2c) / sqrt(1 + 2 c^2) - 1`.
pub fn modulation_for(q: f64) -> Result<f64> {
    if !(0.0..=MAX_FIELD_CORRELATION).contains(&q) {
        return Err(Error::Model(format!("intensity correlation {q} outside the supported range [0, {MAX_FIELD_CORRELATION}]")));
    }
    let s = (1.0 + q).powi(2);
    let (qa, qb, qc) = (4.0 - 2.0 * s, 4.0, 1.0 - s);
    if q == 0.0 {
        return Ok(0.0);
    }
    let c = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    Ok(c)
}

fn normal_scores(n: usize) -> Vec<f64> {
    (0..n).map(|i| normal_quantile((i as f64 + 0.5) / n as f64)).collect()
}

/// Two normalized fields whose intensity correlator is `q`.
///
/// `z1` takes the normal scores in random cell order. The `z2` scores are split
/// into strata and dealt so that every block of cells with neighbouring `z1`
/// receives one score from each stratum; this keeps the joint sample close to a
/// product of normals and suppresses the sampling noise of `L`.
pub fn synth_correlated_fields(grid: &GridConfig, q: f64, seed: u64) -> Result<CorrelatedFields> {
    grid.validate()?;
    let c = modulation_for(q)?;
    let n = grid.points;
    if !n.is_multiple_of(STRATA_BLOCK) {
        return Err(Error::Config(format!("grid points must be a multiple of {STRATA_BLOCK}")));
    }
    let mut r = rng::stream(seed, rng::purpose::FIELDS, u64::MAX);
    let scores = normal_scores(n);
    let mut z1 = scores.clone();
    z1.shuffle(&mut r);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| z1[i].total_cmp(&z1[j]));
    let blocks = n / STRATA_BLOCK;
    // stratum t holds scores[t*blocks .. (t+1)*blocks]; block k gets entry perm_t[k]
    let perms: Vec<Vec<usize>> = (0..STRATA_BLOCK)
        .map(|_| {
            let mut p: Vec<usize> = (0..blocks).collect();
            p.shuffle(&mut r);
            p
        })
        .collect();
    let mut z2 = vec![0.0; n];
    for k in 0..blocks {
        let mut dealt: Vec<f64> = (0..STRATA_BLOCK).map(|t| scores[t * blocks + perms[t][k]]).collect();
        dealt.shuffle(&mut r);
        for (slot, v) in order[k * STRATA_BLOCK..(k + 1) * STRATA_BLOCK].iter().zip(dealt) {
            z2[*slot] = v;
        }
    }
    let y: Vec<f64> = z1.iter().zip(&z2).map(|(&x, &w)| w * (1.0 + c * (x * x - 1.0)).sqrt()).collect();
    let a = GridWavefunction::normalized(z1, grid)?.labeled(0, 0, None);
    let b = GridWavefunction::normalized(y, grid)?.labeled(1, 0, None);
    let null_threshold = 3.0 * L_NULL_SCALE / (n as f64).sqrt();
    Ok(CorrelatedFields { a, b, target: q, c, null_threshold, detectable: q > null_threshold })
}

/// Jarque-Bera p-value of a field's cell values.
pub fn normality_p_value(phi: &GridWavefunction) -> f64 {
    jarque_bera(&phi.values).1
}

/// Both sides of the squared k-sum identity for overlaps of barred wavefunctions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapIdentity {
    /// Mean over `k` of `q(k)^2`.
    pub k_mean_sq: f64,
    /// `(1/N) sum_{k != k'} q(k) q(k')`.
    pub cross_k: f64,
    /// `N <phi_mu|phi_nu>^2`.
    pub rhs: f64,
    pub residual: f64,
}

/// `q(k) = <phi-bar_mu^k | phi-bar_nu^k>` from coefficient rows `c_mu`, `c_nu`
/// and the orthogonal `U`, with the cross-k double sum evaluated explicitly.
pub fn scaled_overlap_identity(c_mu: &[f64], c_nu: &[f64], u: &DMatrix<f64>) -> Result<OverlapIdentity> {
    let n = c_mu.len();
    if c_nu.len() != n || u.nrows() != n || u.ncols() != n || n == 0 {
        return Err(Error::Config(format!(
            "dimension mismatch: rows of {} and {}, U {}x{}",
            c_mu.len(),
            c_nu.len(),
            u.nrows(),
            u.ncols()
        )));
    }
    let q: Vec<f64> = (0..n).map(|k| barred_wavefunction(c_mu, u, k).dot(&barred_wavefunction(c_nu, u, k))).collect();
    let nf = n as f64;
    let k_mean_sq = q.iter().map(|v| v * v).sum::<f64>() / nf;
    let mut cross = 0.0;
    for k in 0..n {
        for kp in 0..n {
            if k != kp {
                cross += q[k] * q[kp];
            }
        }
    }
    let cross_k = cross / nf;
    let overlap: f64 = c_mu.iter().zip(c_nu).map(|(a, b)| a * b).sum();
    let rhs = nf * overlap * overlap;
    Ok(OverlapIdentity { k_mean_sq, cross_k, rhs, residual: (k_mean_sq + cross_k - rhs).abs() })
}

/// One resonance of a compound wave packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketComponent {
    pub j: u32,
    pub mu: usize,
    pub energy: f64,
    pub gamma: f64,
    pub parity: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundWavePacket {
    pub components: Vec<PacketComponent>,
    /// Normalization `1 / sqrt(sum gamma^2)`, unit norm at `t = 0` for orthonormal states.
    pub c: f64,
}

impl CompoundWavePacket {
    pub fn new(components: Vec<PacketComponent>) -> Result<CompoundWavePacket> {
        if components.len() < 2 {
            return Err(Error::Config("a wave packet needs at least two components".into()));
        }
        if components.iter().any(|c| c.parity != 1 && c.parity != -1) {
            return Err(Error::Config("component parity must be +1 or -1".into()));
        }
        let s: f64 = components.iter().map(|c| c.gamma * c.gamma).sum();
        if !(s > 0.0) {
            return Err(Error::Domain("all packet weights vanish".into()));
        }
        Ok(CompoundWavePacket { components, c: 1.0 / s.sqrt() })
    }

    /// `sum |c gamma|^2`.
    pub fn norm_at_zero(&self) -> f64 {
        self.components.iter().map(|p| (self.c * p.gamma).powi(2)).sum()
    }
}

/// Pair correlations `L` between packet components.
#[derive(Debug, Clone, PartialEq)]
pub enum LModel {
    /// Explicit values keyed by component index pairs; symmetric lookup.
    Table(HashMap<(usize, usize), f64>),
    /// Lorentzian in the energy difference with width `g_width` inside a
    /// spin class and `beta |J - J'|` across classes; `L = 2` for a component
    /// with itself.
    Lorentzian { g_width: f64, beta: f64, spacing: f64 },
}

impl LModel {
    fn value(&self, p: &CompoundWavePacket, a: usize, b: usize) -> Result<f64> {
        match self {
            LModel::Table(t) => t
                .get(&(a, b))
                .or_else(|| t.get(&(b, a)))
                .copied()
                .ok_or_else(|| Error::Model(format!("no L entry for components ({a}, {b})"))),
            LModel::Lorentzian { g_width, beta, spacing } => {
                if a == b {
                    return Ok(2.0);
                }
                let (x, y) = (p.components[a], p.components[b]);
                let w = if x.j == y.j { *g_width } else { beta * (x.j as f64 - y.j as f64).abs() };
                if !(w > 0.0) {
                    return Err(Error::Model(format!("Lorentzian width for components ({a}, {b}) is not positive")));
                }
                let r = x.energy - y.energy;
                Ok(spacing / std::f64::consts::PI * w / (r * r + w * w))
            }
        }
    }
}

/// Quadruple sum over packet components of the pairing substitution
/// `L12 L34 + L13 L24 + L14 L23`, weighted by
/// `exp(i (E2 - E1) t1) exp(i (E4 - E3) t2)` and `c^2`; quadruples with odd total
/// parity contribute zero.
pub fn density_fluctuation_correlator(packet: &CompoundWavePacket, t1: f64, t2: f64, model: &LModel) -> Result<Complex64> {
    let n = packet.components.len();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            l[(a, b)] = model.value(packet, a, b)?;
        }
    }
    let e: Vec<f64> = packet.components.iter().map(|c| c.energy).collect();
    let par: Vec<i8> = packet.components.iter().map(|c| c.parity).collect();
    let mut sum = Complex64::new(0.0, 0.0);
    for i1 in 0..n {
        for i2 in 0..n {
            let ph1 = Complex64::from_polar(1.0, (e[i2] - e[i1]) * t1);
            for i3 in 0..n {
                for i4 in 0..n {
                    if par[i1] * par[i2] * par[i3] * par[i4] != 1 {
                        continue;
                    }
                    let pairing = l[(i1, i2)] * l[(i3, i4)] + l[(i1, i3)] * l[(i2, i4)] + l[(i1, i4)] * l[(i2, i3)];
                    sum += ph1 * Complex64::from_polar(1.0, (e[i4] - e[i3]) * t2) * pairing;
                }
            }
        }
    }
    Ok(sum * packet.c * packet.c)
}

/// Contribution of one ordered quadruple `(i1, i2, i3, i4)` to
/// [`density_fluctuation_correlator`], zero when the combined parity is odd.
pub fn quadruple_contribution(packet: &CompoundWavePacket, idx: [usize; 4], t1: f64, t2: f64, model: &LModel) -> Result<Complex64> {
    let n = packet.components.len();
    if idx.iter().any(|&i| i >= n) {
        return Err(Error::Config(format!("quadruple {idx:?} indexes a packet of {n} components")));
    }
    let [i1, i2, i3, i4] = idx;
    let c = &packet.components;
    if c[i1].parity * c[i2].parity * c[i3].parity * c[i4].parity != 1 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let l = |a: usize, b: usize| model.value(packet, a, b);
    let pairing = l(i1, i2)? * l(i3, i4)? + l(i1, i3)? * l(i2, i4)? + l(i1, i4)? * l(i2, i3)?;
    let phase = (c[i2].energy - c[i1].energy) * t1 + (c[i4].energy - c[i3].energy) * t2;
    Ok(Complex64::from_polar(pairing * packet.c * packet.c, phase))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleRow {
    /// Probe volume.
    pub delta_v: f64,
    pub cells: usize,
    /// Mean over probe positions of `(V_a phibar_a^2)(V_b phibar_b^2)`.
    pub value: f64,
    pub stderr: f64,
    /// `N (dV/V)^2`, pinned to one.
    pub scale_factor: f64,
}

/// Probe averages over shrinking volumes `delta_v`; `phibar^2` is the mean of
/// `phi^2` over the probe (periodic sliding window).
pub fn needle_probe(a: &GridWavefunction, b: &GridWavefunction, delta_v: &[f64]) -> Result<Vec<NeedleRow>> {
    check_pair(a, b)?;
    let n = a.values.len();
    let (va, vb) = (effective_volume(a)?, effective_volume(b)?);
    let sq_a: Vec<f64> = a.values.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.values.iter().map(|v| v * v).collect();
    let window = |sq: &[f64], w: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut s: f64 = sq[..w].iter().sum();
        for i in 0..n {
            out.push(s / w as f64);
            s += sq[(i + w) % n] - sq[i];
        }
        out
    };
    let mut rows = Vec::with_capacity(delta_v.len());
    for &dv in delta_v {
        let cells_f = dv / a.cell;
        if cells_f < 1.0 - 1e-9 {
            return Err(Error::Resolution(format!("probe volume {dv} is below the cell size {}", a.cell)));
        }
        let w = (cells_f.round() as usize).clamp(1, n);
        let (pa, pb) = (window(&sq_a, w), window(&sq_b, w));
        let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| va * x * vb * y).collect();
        let e = Estimate::from_samples(&prod);
        // neighbouring windows overlap; w positions share each cell
        rows.push(NeedleRow { delta_v: dv, cells: w, value: e.mean, stderr: e.stderr * (w as f64).sqrt(), scale_factor: 1.0 });
    }
    Ok(rows)
}
