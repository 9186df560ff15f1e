//! Resonance spectra per spin class and level-pair binning.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinClass {
    pub j: u32,
    pub parity: i8,
    /// Number of levels in the class.
    pub count: usize,
    /// Mean level spacing.
    pub spacing: f64,
}

impl SpinClass {
    pub fn new(j: u32, parity: i8, count: usize, spacing: f64) -> SpinClass {
        SpinClass { j, parity, count, spacing }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Config(format!("spin class J={} needs at least 2 levels, got {}", self.j, self.count)));
        }
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err(Error::Config(format!("spin class J={} spacing must be positive, got {}", self.j, self.spacing)));
        }
        if self.parity != 1 && self.parity != -1 {
            return Err(Error::Config(format!("spin class J={} parity must be +1 or -1", self.j)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LevelModel {
    #[default]
    Picket,
    Poisson,
    Wigner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSequence {
    pub class: SpinClass,
    pub energies: Vec<f64>,
}

impl LevelSequence {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn mean_spacing(&self) -> f64 {
        let n = self.energies.len();
        (self.energies[n - 1] - self.energies[0]) / (n - 1) as f64
    }

    /// Copy with every energy moved by `shift`.
    pub fn shifted(&self, shift: f64) -> LevelSequence {
        LevelSequence { class: self.class, energies: self.energies.iter().map(|e| e + shift).collect() }
    }
}

/// Wigner surmise spacing by inversion of its CDF `1 - exp(-pi s^2 / 4)`.
fn wigner_spacing<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    (-4.0 * (1.0 - u).ln() / std::f64::consts::PI).sqrt()
}

/// Spectrum of `class.count` levels starting at zero.
pub fn generate_levels(class: SpinClass, model: LevelModel, seed: u64) -> Result<LevelSequence> {
    class.validate()?;
    let d = class.spacing;
    let mut rng = rng::stream(seed, rng::purpose::LEVELS, class.j as u64);
    let mut energies = Vec::with_capacity(class.count);
    let mut e = 0.0;
    energies.push(e);
    match model {
        LevelModel::Picket => {
            for mu in 1..class.count {
                energies.push(mu as f64 * d);
            }
        }
        LevelModel::Poisson => {
            let exp = Exp::new(1.0 / d).expect("positive rate");
            while energies.len() < class.count {
                let s: f64 = exp.sample(&mut rng);
                if s > 0.0 {
                    e += s;
                    energies.push(e);
                }
            }
        }
        LevelModel::Wigner => {
            while energies.len() < class.count {
                let s = d * wigner_spacing(&mut rng);
                if s > 0.0 {
                    e += s;
                    energies.push(e);
                }
            }
        }
    }
    Ok(LevelSequence { class, energies })
}

/// Index pairs `(mu, nu)` with `|E_mu(a) - E_nu(b) - r| <= window`.
pub fn pair_bins(a: &LevelSequence, b: &LevelSequence, r: f64, window: f64) -> Vec<(usize, usize)> {
    let eb = &b.energies;
    let mut out = Vec::new();
    for (mu, &ea) in a.energies.iter().enumerate() {
        // candidates have E_nu close to ea - r; widen the search so the exact
        // filter below is the only decision
        let target = ea - r;
        let slack = window + 1e-9 * (window.abs() + target.abs() + 1.0);
        let lo = eb.partition_point(|&x| x < target - slack);
        let hi = eb.partition_point(|&x| x <= target + slack);
        for (nu, &e) in eb.iter().enumerate().take(hi).skip(lo) {
            if (ea - e - r).abs() <= window {
                out.push((mu, nu));
            }
        }
    }
    out
}

pub fn default_window(spacing: f64) -> f64 {
    2.5 * spacing
}
