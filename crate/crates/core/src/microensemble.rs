//! Finite-dimensional construction of correlated partial-width amplitudes.
//!
//! States of every spin class are expanded in a common basis of dimension
//! `N = sum of class sizes`. Cross-class correlations enter through a symmetric
//! matrix `K` whose eigenvectors `T` rotate independent Gaussian variables
//! `eta` into the class variables `xi = T eta`. A Haar block `B^J` per class
//! then gives amplitudes `gamma^J = B^J xi^J = C^J eta` with `C^J = B^J T_J`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::{generate_levels, pair_bins, LevelModel, LevelSequence, SpinClass};
use crate::linalg;
use crate::rng;
use crate::stats::{linear_fit, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub spins: Vec<SpinClass>,
    pub channels: Vec<String>,
    pub kappa: f64,
    pub seed: u64,
    pub lambda_count: usize,
    pub level_model: LevelModel,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig::uniform(5, 64, 1.0)
    }
}

impl EnsembleConfig {
    /// `classes` spin classes `J = 0..classes`, each with `count` levels.
    pub fn uniform(classes: u32, count: usize, spacing: f64) -> EnsembleConfig {
        EnsembleConfig {
            spins: (0..classes).map(|j| SpinClass::new(j, 1, count, spacing)).collect(),
            channels: vec!["a".into(), "b".into()],
            kappa: 0.0,
            seed: 1,
            lambda_count: 200,
            level_model: LevelModel::Picket,
        }
    }

    pub fn dimension(&self) -> usize {
        self.spins.iter().map(|s| s.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.spins.is_empty() {
            return Err(Error::Config("spins: at least one spin class is required".into()));
        }
        for s in &self.spins {
            s.validate()?;
        }
        for (i, a) in self.spins.iter().enumerate() {
            if self.spins[..i].iter().any(|b| b.j == a.j && b.parity == a.parity) {
                return Err(Error::Config(format!("spins: duplicate class J={} parity={}", a.j, a.parity)));
            }
        }
        if self.channels.is_empty() {
            return Err(Error::Config("channels: at least one channel is required".into()));
        }
        if self.lambda_count == 0 {
            return Err(Error::Config("lambda_count must be at least 1".into()));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        Ok(())
    }

    /// Ratio `N / class size` of the first class.
    pub fn j_max(&self) -> f64 {
        self.dimension() as f64 / self.spins[0].count as f64
    }

    pub fn generate_levels(&self) -> Result<Vec<LevelSequence>> {
        self.spins.iter().map(|&s| generate_levels(s, self.level_model, self.seed)).collect()
    }

    pub fn channel_index(&self, label: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Config(format!("unknown channel '{label}'")))
    }
}

/// Haar-random orthogonal matrix.
pub fn sample_orthogonal(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Config("sample_orthogonal: dimension must be positive".into()));
    }
    Ok(linalg::sample_orthogonal(n, seed))
}

#[derive(Debug, Clone)]
pub struct KCorrelation {
    pub matrix: DMatrix<f64>,
    /// Eigenvalues `r_i`.
    pub eigenvalues: DVector<f64>,
    /// Columns are the eigenvectors, `K = T diag(r) T^T`.
    pub eigenvectors: DMatrix<f64>,
}

impl KCorrelation {
    pub fn mean_r(&self) -> f64 {
        self.eigenvalues.mean()
    }

    pub fn mean_r2(&self) -> f64 {
        self.eigenvalues.iter().map(|r| r * r).sum::<f64>() / self.eigenvalues.len() as f64
    }

    pub fn max_abs_r(&self) -> f64 {
        self.eigenvalues.amax()
    }
}

fn class_of_index(config: &EnsembleConfig) -> Vec<usize> {
    config.spins.iter().enumerate().flat_map(|(c, s)| std::iter::repeat_n(c, s.count)).collect()
}

/// Builds `K` with entries `+-1/sqrt(N_J)` between different classes and zero
/// inside each class block.
pub fn build_k_correlation(config: &EnsembleConfig) -> Result<KCorrelation> {
    config.validate()?;
    let n = config.dimension();
    let class = class_of_index(config);
    let mut rng = rng::stream(config.seed, rng::purpose::K_SIGNS, 0);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if class[i] == class[j] {
                continue;
            }
            let scale = ((config.spins[class[i]].count * config.spins[class[j]].count) as f64).powf(-0.25);
            let v = if rng.random::<bool>() { scale } else { -scale };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(k.clone());
    Ok(KCorrelation { matrix: k, eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors })
}

/// Fixed part of the construction: levels, `K`, Haar blocks and the
/// coefficient matrices `C^J`. Shared by all realizations.
#[derive(Debug)]
pub struct EnsembleBasis {
    pub config: EnsembleConfig,
    pub levels: Vec<LevelSequence>,
    pub k: KCorrelation,
    /// Haar blocks `B^J`.
    pub blocks: Vec<DMatrix<f64>>,
    /// `C^J`, rows orthonormal, shape `N_J x N`.
    pub coeffs: Vec<DMatrix<f64>>,
    /// Per mode `i`, `eta_i = (I + alpha_i 11^T) z_i` has channel covariance `I + kappa r_i 11^T`.
    mode_alpha: Vec<f64>,
    offsets: Vec<usize>,
}

/// One realization of the amplitudes on a shared basis.
#[derive(Debug, Clone)]
pub struct AmplitudeEnsemble {
    pub basis: Arc<EnsembleBasis>,
    pub realization: u64,
    /// `eta_i^a`, shape `N x channels`.
    pub eta: DMatrix<f64>,
    /// Normalized `gamma_mu^{Ja}` per class, shape `N_J x channels`.
    pub gammas: Vec<DMatrix<f64>>,
}

/// Builds the basis and returns realization 0.
pub fn build_gamma(config: &EnsembleConfig, k: &KCorrelation, levels: &[LevelSequence]) -> Result<AmplitudeEnsemble> {
    let basis = EnsembleBasis::new(config.clone(), k.clone(), levels.to_vec())?;
    Ok(Arc::new(basis).realize(0))
}

impl EnsembleBasis {
    pub fn new(config: EnsembleConfig, k: KCorrelation, levels: Vec<LevelSequence>) -> Result<EnsembleBasis> {
        config.validate()?;
        let n = config.dimension();
        if k.matrix.nrows() != n {
            return Err(Error::Config(format!("K has dimension {} but the classes sum to {n}", k.matrix.nrows())));
        }
        if levels.len() != config.spins.len() || levels.iter().zip(&config.spins).any(|(l, s)| l.len() != s.count) {
            return Err(Error::Config("level sequences do not match the spin classes".into()));
        }
        let c = config.channels.len() as f64;
        let max_r = k.max_abs_r();
        if config.kappa != 0.0 {
            if config.kappa.abs() * max_r >= 1.0 {
                return Err(Error::Model(format!(
                    "|kappa| * max|r_i| = {:.4} >= 1: requested covariance is not positive definite",
                    config.kappa.abs() * max_r
                )));
            }
            if let Some(r) = k.eigenvalues.iter().find(|&&r| 1.0 + c * config.kappa * r <= 0.0) {
                return Err(Error::Model(format!(
                    "channel covariance of mode with r = {r:.4} is not positive definite for kappa = {}",
                    config.kappa
                )));
            }
        }
        let mode_alpha = k.eigenvalues.iter().map(|&r| ((1.0 + c * config.kappa * r).sqrt() - 1.0) / c).collect();
        let mut offsets = Vec::with_capacity(config.spins.len());
        let mut off = 0;
        for s in &config.spins {
            offsets.push(off);
            off += s.count;
        }
        let mut blocks = Vec::new();
        let mut coeffs = Vec::new();
        for (ci, s) in config.spins.iter().enumerate() {
            let b = linalg::haar_orthogonal(s.count, &mut rng::stream(config.seed, rng::purpose::HAAR_BLOCK, ci as u64));
            let t_rows = k.eigenvectors.rows(offsets[ci], s.count).into_owned();
            coeffs.push(&b * t_rows);
            blocks.push(b);
        }
        Ok(EnsembleBasis { config, levels, k, blocks, coeffs, mode_alpha, offsets })
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension()
    }

    pub fn class_count(&self) -> usize {
        self.config.spins.len()
    }

    /// Draws `eta` for a realization index.
    pub fn draw_eta(&self, realization: u64) -> DMatrix<f64> {
        let n = self.dimension();
        let c = self.config.channels.len();
        let mut r = rng::stream(self.config.seed, rng::purpose::ETA, realization);
        let mut eta = DMatrix::zeros(n, c);
        for i in 0..n {
            let z: Vec<f64> = rng::normals(&mut r, c);
            let s: f64 = z.iter().sum();
            for (a, zv) in z.iter().enumerate() {
                eta[(i, a)] = zv + self.mode_alpha[i] * s;
            }
        }
        eta
    }

    /// Amplitudes `C^J eta` before the unit-mean-square rescaling.
    pub fn raw_gamma(&self, class: usize, eta: &DMatrix<f64>) -> DMatrix<f64> {
        &self.coeffs[class] * eta
    }

    /// Class variables `xi = T eta` restricted to one class.
    pub fn xi(&self, class: usize, eta: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = self.k.eigenvectors.rows(self.offsets[class], self.config.spins[class].count);
        rows * eta
    }
}

fn normalize_columns(g: &mut DMatrix<f64>) {
    let n = g.nrows() as f64;
    for mut col in g.column_iter_mut() {
        let ms = col.norm_squared() / n;
        if ms > 0.0 {
            col /= ms.sqrt();
        }
    }
}

pub trait Realize {
    fn realize(&self, realization: u64) -> AmplitudeEnsemble;
}

impl Realize for Arc<EnsembleBasis> {
    fn realize(&self, realization: u64) -> AmplitudeEnsemble {
        let eta = self.draw_eta(realization);
        let gammas = (0..self.class_count())
            .map(|c| {
                let mut g = self.raw_gamma(c, &eta);
                normalize_columns(&mut g);
                g
            })
            .collect();
        AmplitudeEnsemble { basis: Arc::clone(self), realization, eta, gammas }
    }
}

impl AmplitudeEnsemble {
    pub fn realization_of(&self, realization: u64) -> AmplitudeEnsemble {
        self.basis.realize(realization)
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.basis.config
    }

    pub fn levels(&self) -> &[LevelSequence] {
        &self.basis.levels
    }

    pub fn coeffs(&self, class: usize) -> &DMatrix<f64> {
        &self.basis.coeffs[class]
    }
}

/// Selects amplitudes `gamma_mu^{Ja} gamma_mu^{Jb}` by class and channel pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub class: usize,
    pub a: usize,
    pub b: usize,
}

fn check_slot(ens: &AmplitudeEnsemble, s: Slot) -> Result<()> {
    let c = ens.config().channels.len();
    if s.class >= ens.basis.class_count() || s.a >= c || s.b >= c {
        return Err(Error::Config(format!("class/channel selection {s:?} is out of range")));
    }
    Ok(())
}

/// Estimate of `M_{mu nu}^{JJ'}` averaged over the given pairs and realizations.
pub fn quadruple_correlator_pairs(
    ens: &AmplitudeEnsemble,
    realizations: usize,
    first: Slot,
    second: Slot,
    pairs: &[(usize, usize)],
) -> Result<Estimate> {
    check_slot(ens, first)?;
    check_slot(ens, second)?;
    if pairs.is_empty() {
        return Err(Error::EmptyBin("no level pairs in the requested bin".into()));
    }
    let means: Vec<f64> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let e = ens.realization_of(r);
            let g1 = &e.gammas[first.class];
            let g2 = &e.gammas[second.class];
            pairs
                .iter()
                .map(|&(mu, nu)| g1[(mu, first.a)] * g1[(mu, first.b)] * g2[(nu, second.a)] * g2[(nu, second.b)])
                .sum::<f64>()
                / pairs.len() as f64
        })
        .collect();
    Ok(Estimate::from_samples(&means))
}

/// Estimate of `M^{JJ'}(r)` over level pairs with `E_mu - E_nu = r +- window`.
pub fn quadruple_correlator(
    ens: &AmplitudeEnsemble,
    realizations: usize,
    first: Slot,
    second: Slot,
    r: f64,
    window: f64,
) -> Result<Estimate> {
    check_slot(ens, first)?;
    check_slot(ens, second)?;
    let levels = ens.levels();
    let pairs = pair_bins(&levels[first.class], &levels[second.class], r, window);
    if pairs.is_empty() {
        return Err(Error::EmptyBin(format!("no level pairs with E_mu - E_nu = {r} +- {window}")));
    }
    quadruple_correlator_pairs(ens, realizations, first, second, &pairs)
}

/// Per-realization sum over `nu` (excluding `nu = mu` within one class) of the
/// quadruple product for fixed `mu`.
pub fn summed_quadruple(ens: &AmplitudeEnsemble, realizations: usize, first: Slot, second: Slot, mu: usize) -> Result<Estimate> {
    check_slot(ens, first)?;
    check_slot(ens, second)?;
    let n2 = ens.config().spins[second.class].count;
    let pairs: Vec<(usize, usize)> =
        (0..n2).filter(|&nu| !(first.class == second.class && nu == mu)).map(|nu| (mu, nu)).collect();
    let e = quadruple_correlator_pairs(ens, realizations, first, second, &pairs)?;
    let k = pairs.len() as f64;
    Ok(Estimate { mean: e.mean * k, stderr: e.stderr * k, count: e.count })
}

/// Independent realizations of the Gaussian masking matrices `w^lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaEnsemble {
    pub count: usize,
    pub seed: u64,
}

impl LambdaEnsemble {
    pub fn new(count: usize, seed: u64) -> Result<LambdaEnsemble> {
        if count == 0 {
            return Err(Error::Config("lambda_count must be at least 1".into()));
        }
        Ok(LambdaEnsemble { count, seed })
    }

    /// Real symmetric Gaussian matrix with `E[w_ij w_i'j'] = d_ii' d_jj' + d_ij' d_ji'`.
    pub fn w_matrix(&self, lambda: usize, n: usize) -> DMatrix<f64> {
        let mut r = rng::stream(self.seed, rng::purpose::LAMBDA, lambda as u64);
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            w[(i, i)] = std::f64::consts::SQRT_2 * rng::normal(&mut r);
            for j in i + 1..n {
                let v = rng::normal(&mut r);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        w
    }

    /// `A^lambda = A o [(1 - delta) w + delta w / sqrt 2]`.
    pub fn masked(&self, lambda: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut m = self.w_matrix(lambda, n);
        for i in 0..n {
            m[(i, i)] /= std::f64::consts::SQRT_2;
        }
        m.component_mul_assign(a);
        m
    }
}

/// `A_ij = (eta_i^a eta_j^b + eta_j^a eta_i^b) / 2`.
pub fn a_matrix(eta: &DMatrix<f64>, a: usize, b: usize) -> Result<DMatrix<f64>> {
    let ea = eta.column(a);
    let eb = eta.column(b);
    if ea.iter().all(|&v| v == 0.0) || eb.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("eta draw is identically zero; A is singular".into()));
    }
    let m = ea * eb.transpose();
    Ok((&m + m.transpose()) * 0.5)
}

/// `phi-bar_mu^{J,k}` in the basis of the `Y_i`: components `sqrt(N) C_mu i U_ik`.
pub fn barred_wavefunction(c_row: &[f64], u: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let n = c_row.len() as f64;
    DVector::from_iterator(c_row.len(), c_row.iter().enumerate().map(|(i, c)| n.sqrt() * c * u[(i, k)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    /// k-average then lambda-average of squared overlaps `q_{mu nu}(k)^2`.
    pub k_route: Estimate,
    /// lambda-average of `2 sum_ij C C C C (A^lambda_ij)^2`.
    pub lambda_route: Estimate,
    /// `2 sum_ij C_mu i C_mu j C_nu i C_nu j A_ij^2`.
    pub direct: f64,
}

/// `sum_ij (cm_i cn_i)(cm_j cn_j) M_ij^2`.
fn quartic_form(cm: &[f64], cn: &[f64], m: &DMatrix<f64>) -> f64 {
    let n = cm.len();
    let v: Vec<f64> = (0..n).map(|i| cm[i] * cn[i]).collect();
    let mut s = 0.0;
    for j in 0..n {
        let col = m.column(j);
        let mut t = 0.0;
        for i in 0..n {
            t += v[i] * col[i] * col[i];
        }
        s += t * v[j];
    }
    s
}

/// Overlap statistic `Q_{mu nu}^{JJ'}` from one amplitude realization.
///
/// Channels 0 and 1 of `eta` build `A`; every lambda masks `A`, its eigenvectors
/// `U` define the k-basis, and `q_{mu nu}(k) = N sum_i C_mu i C_nu i U_ik^2`.
pub fn lambda_q_estimator(
    ens: &AmplitudeEnsemble,
    lambdas: &LambdaEnsemble,
    first: (usize, usize),
    second: (usize, usize),
) -> Result<QEstimate> {
    let cfg = ens.config();
    if cfg.channels.len() < 2 {
        return Err(Error::Config("Q estimation needs at least two channels".into()));
    }
    let get_row = |(class, mu): (usize, usize)| -> Result<Vec<f64>> {
        let c = ens.basis.coeffs.get(class).ok_or_else(|| Error::Config(format!("class {class} out of range")))?;
        if mu >= c.nrows() {
            return Err(Error::Config(format!("level {mu} out of range for class {class}")));
        }
        Ok(c.row(mu).iter().copied().collect())
    };
    let cm = get_row(first)?;
    let cn = get_row(second)?;
    let a = a_matrix(&ens.eta, 0, 1)?;
    let n = a.nrows();
    let direct = 2.0 * quartic_form(&cm, &cn, &a);
    let v: Vec<f64> = (0..n).map(|i| cm[i] * cn[i]).collect();
    let per_lambda: Vec<(f64, f64)> = (0..lambdas.count)
        .into_par_iter()
        .map(|l| {
            let al = lambdas.masked(l, &a);
            let lam = 2.0 * quartic_form(&cm, &cn, &al);
            let eig = SymmetricEigen::new(al);
            let u = eig.eigenvectors;
            let mut qsum = 0.0;
            for k in 0..n {
                let col = u.column(k);
                let q: f64 = n as f64 * (0..n).map(|i| v[i] * col[i] * col[i]).sum::<f64>();
                qsum += q * q;
            }
            (qsum / n as f64, lam)
        })
        .collect();
    let k_route = Estimate::from_samples(&per_lambda.iter().map(|p| p.0).collect::<Vec<_>>());
    let lambda_route = Estimate::from_samples(&per_lambda.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(QEstimate { k_route, lambda_route, direct })
}

/// Normalization sums over one class pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumRules {
    /// Mean over `mu` of `Q_{mu mu}^{JJ}`.
    pub diagonal: Estimate,
    /// `sum_{nu != mu} Q_{mu nu}^{JJ}`.
    pub same_class: Estimate,
    /// `sum_nu Q_{mu nu}^{JJ'}`.
    pub cross_class: Estimate,
    /// The same three sums from the lambda-averaged closed form.
    pub lambda_diagonal: Estimate,
    pub lambda_same_class: Estimate,
    pub lambda_cross_class: Estimate,
    /// Number of `(draw, mu)` samples entering each sum.
    pub samples: usize,
}

/// Sum rules for class `j` against itself and against class `jp`.
///
/// Each draw takes a fresh `eta` (realization index = draw) and one masking
/// matrix, so lambda and eta averaging proceed together. All levels `mu` of
/// class `j` contribute; the standard errors come from the per-draw means.
pub fn sum_rules(basis: &Arc<EnsembleBasis>, lambdas: &LambdaEnsemble, j: usize, jp: usize, draws: usize) -> Result<SumRules> {
    if j == jp || j >= basis.class_count() || jp >= basis.class_count() {
        return Err(Error::Config("sum rules need two distinct, existing classes".into()));
    }
    if basis.config.channels.len() < 2 {
        return Err(Error::Config("sum rules need at least two channels".into()));
    }
    let n = basis.dimension();
    let cj = &basis.coeffs[j];
    let cjp = &basis.coeffs[jp];
    let pj = cj.transpose() * cj;
    let pjp = cjp.transpose() * cjp;
    let rows: Vec<DVector<f64>> = (0..cj.nrows()).map(|mu| cj.row(mu).transpose()).collect();
    let per_draw: Vec<[f64; 6]> = (0..draws)
        .into_par_iter()
        .map(|d| -> Result<[f64; 6]> {
            let eta = basis.draw_eta(d as u64);
            let a = a_matrix(&eta, 0, 1)?;
            let al = lambdas.masked(d, &a);
            let al2 = al.component_mul(&al);
            let u = SymmetricEigen::new(al).eigenvectors;
            let w = u.component_mul(&u);
            let s = &w * w.transpose();
            let ms = pj.component_mul(&s);
            let msp = pjp.component_mul(&s);
            let ml = pj.component_mul(&al2);
            let mlp = pjp.component_mul(&al2);
            let nf = n as f64;
            let mut acc = [0.0; 6];
            for c in &rows {
                let c2 = c.component_mul(c);
                let diag_k = nf * (w.transpose() * &c2).norm_squared();
                let total_k = nf * c.dot(&(&ms * c));
                let cross_k = nf * c.dot(&(&msp * c));
                let diag_l = 2.0 * c2.dot(&(&al2 * &c2));
                let total_l = 2.0 * c.dot(&(&ml * c));
                let cross_l = 2.0 * c.dot(&(&mlp * c));
                acc[0] += diag_k;
                acc[1] += total_k - diag_k;
                acc[2] += cross_k;
                acc[3] += diag_l;
                acc[4] += total_l - diag_l;
                acc[5] += cross_l;
            }
            let m = rows.len() as f64;
            Ok(acc.map(|v| v / m))
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |i: usize| Estimate::from_samples(&per_draw.iter().map(|r| r[i]).collect::<Vec<_>>());
    Ok(SumRules {
        diagonal: col(0),
        same_class: col(1),
        cross_class: col(2),
        lambda_diagonal: col(3),
        lambda_same_class: col(4),
        lambda_cross_class: col(5),
        samples: draws * rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub n: usize,
    pub class_size: usize,
    /// Mean of `<phi_mu^J|phi_nu^J'>^2` over cross-class pairs.
    pub mean_sq_overlap: f64,
    pub stderr: f64,
    /// `N` times the mean squared overlap, `1 + Q`.
    pub scaled: f64,
    /// Mean over `mu` of `sum_nu <phi_mu^J|phi_nu^J'>^2` over one other class.
    pub class_sum: f64,
    /// `(N_J + 1) / N`.
    pub class_sum_target: f64,
    /// Mean over pairs and `k != k'` of `q(k) q(k')`.
    pub cross_k_mean: f64,
    pub cross_k_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapScaling {
    pub rows: Vec<OverlapRow>,
    /// Least-squares slope of `ln(mean_sq_overlap)` against `ln N`.
    pub slope: f64,
    pub slope_stderr: f64,
}

const CLASSES_IN_SCALING: usize = 4;
const CROSS_K_PAIRS: usize = 16;

/// Overlaps between states of different classes built from independent Haar
/// blocks embedded in dimension `N`, with four classes of size `N/4`.
pub fn overlap_scaling_check(n_values: &[usize], trials: usize, seed: u64) -> Result<OverlapScaling> {
    if n_values.len() < 2 || trials == 0 {
        return Err(Error::Config("overlap scaling needs at least two dimensions and one trial".into()));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        if n < 32 || n % CLASSES_IN_SCALING != 0 {
            return Err(Error::Config(format!("dimension {n} must be >= 32 and divisible by {CLASSES_IN_SCALING}")));
        }
        let size = n / CLASSES_IN_SCALING;
        let mut sq = Vec::new();
        let mut sums = Vec::new();
        let mut cross = Vec::new();
        for t in 0..trials {
            let mut r = rng::stream(seed, rng::purpose::OVERLAP, ((n as u64) << 20) | t as u64);
            let frames: Vec<DMatrix<f64>> =
                (0..CLASSES_IN_SCALING).map(|_| linalg::haar_frame(n, size, &mut r)).collect();
            for a in 0..CLASSES_IN_SCALING {
                for b in a + 1..CLASSES_IN_SCALING {
                    let g = frames[a].transpose() * &frames[b];
                    sq.extend(g.iter().map(|v| v * v));
                }
            }
            let g01 = frames[0].transpose() * &frames[1];
            for mu in 0..size {
                sums.push(g01.row(mu).norm_squared());
            }
            // cross-k products in a random k-basis
            let u = linalg::haar_orthogonal(n, &mut r);
            let w = u.component_mul(&u);
            for p in 0..CROSS_K_PAIRS.min(size) {
                let v = frames[0].column(p).component_mul(&frames[1].column(p));
                let q = (w.transpose() * v) * n as f64;
                let s: f64 = q.sum();
                let s2 = q.norm_squared();
                let nf = n as f64;
                cross.push((s * s - s2) / (nf * (nf - 1.0)));
            }
        }
        let e = Estimate::from_samples(&sq);
        let c = Estimate::from_samples(&cross);
        rows.push(OverlapRow {
            n,
            class_size: size,
            mean_sq_overlap: e.mean,
            stderr: e.stderr,
            scaled: e.mean * n as f64,
            class_sum: sums.iter().sum::<f64>() / sums.len() as f64,
            class_sum_target: (size as f64 + 1.0) / n as f64,
            cross_k_mean: c.mean,
            cross_k_stderr: c.stderr,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_sq_overlap.ln()).collect();
    let fit = linear_fit(&x, &y).ok_or_else(|| Error::Degenerate("slope fit failed".into()))?;
    let dof = (rows.len() as f64 - 2.0).max(1.0);
    let slope_stderr = (fit.var_slope * fit.chi2 / dof).sqrt();
    Ok(OverlapScaling { rows, slope: fit.slope, slope_stderr })
}
