//! Double-differential spectrum files and the angular and energy diagnostics
//! applied to them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::{legendre, ratio_with_error, FbRatio};
use crate::stats::weighted_linear_fit;

pub const HEADER: [&str; 5] = ["E_out_MeV", "theta_deg", "frame", "ddx_mb_sr_MeV", "err_mb_sr_MeV"];
pub const DEFAULT_FRAME_FACTOR: f64 = 1.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Lab,
    Cm,
}

impl Frame {
    fn label(self) -> &'static str {
        match self {
            Frame::Lab => "lab",
            Frame::Cm => "cm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdxRow {
    pub e_out: f64,
    pub theta: f64,
    pub frame: Frame,
    /// mb/(sr MeV).
    pub value: f64,
    pub err: f64,
    /// Source line, 1-based; 0 for rows built in memory.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdxDataset {
    /// Beam energy in MeV.
    pub e_in: f64,
    pub rows: Vec<DdxRow>,
    /// Text of the `# provenance:` comments, in file order.
    pub provenance: Vec<String>,
}

fn parse_number(field: &str, line: usize, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line, msg: format!("column '{column}': '{field}' is not a number") })
}

/// Rows at `e_out` within `1e-9` MeV.
fn same_energy(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

pub fn parse_ddx_str(text: &str) -> Result<DdxDataset> {
    let mut e_in = None;
    let mut header = false;
    let mut rows: Vec<DdxRow> = Vec::new();
    let mut provenance = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() {
            continue;
        }
        if let Some(c) = l.trim_start().strip_prefix('#') {
            if let Some(p) = c.trim_start().strip_prefix("provenance:") {
                provenance.push(p.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if e_in.is_none() {
            if fields.len() != 2 || fields[0] != "E_in_MeV" {
                return Err(Error::Parse { line, msg: "first line must be 'E_in_MeV,<value>'".into() });
            }
            e_in = Some(parse_number(fields[1], line, "E_in_MeV")?);
            continue;
        }
        if !header {
            for (k, want) in HEADER.iter().enumerate() {
                match fields.get(k) {
                    Some(got) if got == want => {}
                    Some(got) => {
                        return Err(Error::Parse { line, msg: format!("header column {}: expected '{want}', found '{got}'", k + 1) })
                    }
                    None => return Err(Error::Parse { line, msg: format!("header is missing column '{want}'") }),
                }
            }
            if fields.len() > HEADER.len() {
                return Err(Error::Parse { line, msg: format!("unexpected header column '{}'", fields[HEADER.len()]) });
            }
            header = true;
            continue;
        }
        if fields.len() != HEADER.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", HEADER.len(), fields.len()) });
        }
        let e_out = parse_number(fields[0], line, HEADER[0])?;
        let theta = parse_number(fields[1], line, HEADER[1])?;
        let frame = match fields[2].trim() {
            "lab" => Frame::Lab,
            "cm" => Frame::Cm,
            other => return Err(Error::Parse { line, msg: format!("column 'frame': '{other}' is neither 'lab' nor 'cm'") }),
        };
        let value = parse_number(fields[3], line, HEADER[3])?;
        let err = parse_number(fields[4], line, HEADER[4])?;
        if value < 0.0 || err < 0.0 {
            return Err(Error::Validation(format!("line {line}: negative cross section or error")));
        }
        if !(0.0..=180.0).contains(&theta) {
            return Err(Error::Validation(format!("line {line}: angle {theta} outside [0, 180]")));
        }
        if let Some(first) = seen.insert((e_out.to_bits(), theta.to_bits()), line) {
            return Err(Error::Validation(format!(
                "duplicate row (E_out {e_out}, theta {theta}) at lines {first} and {line}"
            )));
        }
        rows.push(DdxRow { e_out, theta, frame, value, err, line });
    }
    let e_in = e_in.ok_or_else(|| Error::Parse { line: 1, msg: "missing 'E_in_MeV,<value>' line".into() })?;
    if !header {
        return Err(Error::Parse { line: text.lines().count().max(1), msg: "missing column header".into() });
    }
    Ok(DdxDataset { e_in, rows, provenance })
}

pub fn parse_ddx(path: impl AsRef<Path>) -> Result<DdxDataset> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_ddx_str(&text)
}

impl DdxDataset {
    pub fn to_csv(&self) -> String {
        let mut s = format!("E_in_MeV,{}\n{}\n", self.e_in, HEADER.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.e_out, r.theta, r.frame.label(), r.value, r.err);
        }
        s
    }

    /// Rows at one outgoing energy, sorted by angle.
    pub fn at_energy(&self, e_out: f64) -> Vec<DdxRow> {
        let mut v: Vec<DdxRow> = self.rows.iter().copied().filter(|r| same_energy(r.e_out, e_out)).collect();
        v.sort_by(|a, b| a.theta.total_cmp(&b.theta));
        v
    }

    /// Distinct outgoing energies in ascending order.
    pub fn energies(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.rows.iter().map(|r| r.e_out).collect();
        e.sort_by(|a, b| a.total_cmp(b));
        e.dedup_by(|a, b| same_energy(*a, *b));
        e
    }

    fn require(&self, e_out: f64) -> Result<Vec<DdxRow>> {
        let rows = self.at_energy(e_out);
        if rows.is_empty() {
            return Err(Error::Coverage(format!("no data at E_out = {e_out} MeV")));
        }
        Ok(rows)
    }
}

/// Weights `1/err^2`, or unit weights when any error is zero.
fn weights(rows: &[DdxRow]) -> Vec<f64> {
    if rows.iter().all(|r| r.err > 0.0) {
        rows.iter().map(|r| 1.0 / (r.err * r.err)).collect()
    } else {
        vec![1.0; rows.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreFit {
    pub e_out: f64,
    /// `a_0 .. a_order`.
    pub coeffs: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
}

impl LegendreFit {
    pub fn eval(&self, theta: f64) -> f64 {
        let x = theta.to_radians().cos();
        self.coeffs.iter().enumerate().map(|(k, a)| a * legendre(k as u32, x)).sum()
    }

    pub fn stderr(&self, k: usize) -> f64 {
        self.covariance[(k, k)].sqrt()
    }
}

/// Weighted least squares of `sum_k a_k P_k(cos theta)` for the given rows.
fn fit_rows(rows: &[DdxRow], orders: &[u32], e_out: f64) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let mut angles: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    angles.dedup();
    if angles.len() < orders.len() {
        return Err(Error::Rank(format!(
            "{} distinct angles at E_out = {e_out} MeV cannot fix {} coefficients",
            angles.len(),
            orders.len()
        )));
    }
    let w = weights(rows);
    let n = rows.len();
    let m = orders.len();
    let a = DMatrix::from_fn(n, m, |i, k| w[i].sqrt() * legendre(orders[k], rows[i].theta.to_radians().cos()));
    let b = DVector::from_fn(n, |i, _| w[i].sqrt() * rows[i].value);
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(Error::Rank(format!("design matrix is rank deficient at E_out = {e_out} MeV")));
    }
    let qtb = qr.q().transpose() * &b;
    let coeffs = r.solve_upper_triangular(&qtb).ok_or_else(|| Error::Rank("singular triangular factor".into()))?;
    let rinv = r.solve_upper_triangular(&DMatrix::identity(m, m)).ok_or_else(|| Error::Rank("singular triangular factor".into()))?;
    let covariance = &rinv * rinv.transpose();
    let chi2 = (&a * &coeffs - &b).norm_squared();
    Ok((coeffs.iter().copied().collect(), covariance, chi2))
}

pub fn legendre_fit(ds: &DdxDataset, e_out: f64, order: u32) -> Result<LegendreFit> {
    let rows = ds.require(e_out)?;
    let orders: Vec<u32> = (0..=order).collect();
    let (coeffs, covariance, chi2) = fit_rows(&rows, &orders, e_out)?;
    Ok(LegendreFit { e_out, coeffs, covariance, chi2 })
}

/// `E_out_MeV,a0,a1,...,chi2` table; all fits must share one order.
pub fn legendre_csv(fits: &[LegendreFit]) -> String {
    let order = fits.first().map_or(0, |f| f.coeffs.len());
    let mut s = String::from("E_out_MeV");
    for k in 0..order {
        let _ = write!(s, ",a{k}");
    }
    s.push_str(",chi2\n");
    for f in fits {
        let _ = write!(s, "{}", f.e_out);
        for a in &f.coeffs {
            let _ = write!(s, ",{a}");
        }
        let _ = writeln!(s, ",{}", f.chi2);
    }
    s
}

/// Value and error at `theta`, linear in `cos theta` between measured angles.
pub fn value_at(rows: &[DdxRow], theta: f64) -> Result<(f64, f64)> {
    if let Some(r) = rows.iter().find(|r| (r.theta - theta).abs() < 1e-9) {
        return Ok((r.value, r.err));
    }
    let lo = rows.iter().filter(|r| r.theta < theta).max_by(|a, b| a.theta.total_cmp(&b.theta));
    let hi = rows.iter().filter(|r| r.theta > theta).min_by(|a, b| a.theta.total_cmp(&b.theta));
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::Coverage(format!("angle {theta} is outside the measured range")));
    };
    let (x, x0, x1) = (theta.to_radians().cos(), lo.theta.to_radians().cos(), hi.theta.to_radians().cos());
    let w = (x - x0) / (x1 - x0);
    Ok(((1.0 - w) * lo.value + w * hi.value, (1.0 - w) * lo.err + w * hi.err))
}

pub fn fb_ratio(ds: &DdxDataset, e_out: f64, theta_f: f64, theta_b: f64) -> Result<FbRatio> {
    let rows = ds.require(e_out)?;
    Ok(ratio_with_error(value_at(&rows, theta_f)?, value_at(&rows, theta_b)?))
}

/// Angle integral `2 pi int I dcos(theta)` by the trapezoid rule in `cos theta`,
/// holding the end values constant out to 0 and 180 degrees.
pub fn angle_integrated(rows: &[DdxRow]) -> f64 {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.theta.to_radians().cos(), r.value)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.is_empty() {
        return 0.0;
    }
    let mut s = (pts[0].0 + 1.0) * pts[0].1 + (1.0 - pts[pts.len() - 1].0) * pts[pts.len() - 1].1;
    for w in pts.windows(2) {
        s += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    2.0 * std::f64::consts::PI * s
}

/// Upper bounds on a component symmetric about 90 degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricBound {
    /// Minimum of value + error over the backward hemisphere.
    pub constant: f64,
    /// `a0 + a2 P2` fitted to the backward hemisphere and lowered until it
    /// stays at or below value + error there.
    pub a0: f64,
    pub a2: f64,
    /// Angle-integrated data, mb/MeV.
    pub total: f64,
    /// Angle-integrated constant bound over `total`.
    pub constant_share: f64,
    /// Angle-integrated Legendre bound over `total`.
    pub legendre_share: f64,
}

impl SymmetricBound {
    pub fn legendre_curve(&self, theta: f64) -> f64 {
        self.a0 + self.a2 * legendre(2, theta.to_radians().cos())
    }

    /// The larger of the two shares.
    pub fn share(&self) -> f64 {
        self.constant_share.max(self.legendre_share)
    }
}

pub fn symmetric_bound(ds: &DdxDataset, e_out: f64) -> Result<SymmetricBound> {
    let rows = ds.require(e_out)?;
    let back: Vec<DdxRow> = rows.iter().copied().filter(|r| r.theta > 90.0).collect();
    if back.is_empty() {
        return Err(Error::Coverage(format!("no backward-hemisphere data at E_out = {e_out} MeV")));
    }
    let constant = back.iter().map(|r| r.value + r.err).fold(f64::INFINITY, f64::min);
    let (mut a0, a2) = match fit_rows(&back, &[0, 2], e_out) {
        Ok((c, _, _)) => (c[0], c[1]),
        Err(Error::Rank(_)) => (constant, 0.0),
        Err(e) => return Err(e),
    };
    let excess = back
        .iter()
        .map(|r| a0 + a2 * legendre(2, r.theta.to_radians().cos()) - (r.value + r.err))
        .fold(f64::NEG_INFINITY, f64::max);
    if excess > 0.0 {
        a0 -= excess;
    }
    let total = angle_integrated(&rows);
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("zero angle-integrated cross section at E_out = {e_out} MeV")));
    }
    let four_pi = 4.0 * std::f64::consts::PI;
    Ok(SymmetricBound {
        constant,
        a0,
        a2,
        total,
        constant_share: four_pi * constant / total,
        // P2 integrates to zero over the sphere
        legendre_share: four_pi * a0.max(0.0) / total,
    })
}

/// Residual-nucleus and barrier parameters for spectrum scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingParams {
    pub z: u32,
    pub a: u32,
    /// Charge of the emitted particle.
    pub z_emitted: u32,
    /// Barrier height in MeV; the radius-based estimate when absent.
    pub barrier: Option<f64>,
    /// Barrier curvature `hbar omega_B` in MeV.
    pub curvature: f64,
    /// Exciton number of the residual nucleus.
    pub n_res: f64,
    pub frame_factor: f64,
}

impl Default for ScalingParams {
    fn default() -> Self {
        ScalingParams { z: 83, a: 208, z_emitted: 1, barrier: None, curvature: 4.0, n_res: 3.0, frame_factor: DEFAULT_FRAME_FACTOR }
    }
}

impl ScalingParams {
    pub fn validate(&self) -> Result<()> {
        if self.z < 1 || self.a < self.z {
            return Err(Error::Config(format!("need Z >= 1 and A >= Z, got Z = {}, A = {}", self.z, self.a)));
        }
        if !(self.curvature > 0.0) {
            return Err(Error::Config(format!("curvature must be positive, got {}", self.curvature)));
        }
        if !(self.barrier_height() > 0.0) {
            return Err(Error::Config(format!("barrier height must be positive, got {}", self.barrier_height())));
        }
        if !(self.n_res > 0.0) || !(self.frame_factor > 0.0) {
            return Err(Error::Config("n_res and frame_factor must be positive".into()));
        }
        Ok(())
    }

    /// `1.44 z Z / (1.2 A^(1/3) + 2)` MeV unless set explicitly.
    pub fn barrier_height(&self) -> f64 {
        self.barrier.unwrap_or_else(|| {
            1.44 * self.z_emitted as f64 * self.z as f64 / (1.2 * (self.a as f64).cbrt() + 2.0)
        })
    }
}

/// Inverted-parabola transmission `1 / (1 + exp(2 pi (V_C - eps) / hbar omega_B))`.
pub fn coulomb_penetration(eps: f64, params: &ScalingParams) -> Result<f64> {
    params.validate()?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("emission energy must be positive, got {eps}")));
    }
    let x = 2.0 * std::f64::consts::PI * (params.barrier_height() - eps) / params.curvature;
    Ok(1.0 / (1.0 + x.exp()))
}

/// `E_res / n_res`.
pub fn msd_temperature(e_res: f64, n_res: f64) -> f64 {
    e_res / n_res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    /// MeV; infinite when the scaled spectrum does not fall.
    pub t: f64,
    pub err: f64,
    pub infinite: bool,
    pub points: usize,
}

/// Fits `ln(S / (eps P(eps))) = c - eps / T` over the given spectrum.
///
/// `errors`, when given, weight the points by `(S / err)^2`.
pub fn fit_temperature(eps: &[f64], spectrum: &[f64], errors: Option<&[f64]>, params: &ScalingParams) -> Result<Temperature> {
    if eps.len() != spectrum.len() || errors.is_some_and(|e| e.len() != eps.len()) {
        return Err(Error::Config("spectrum arrays differ in length".into()));
    }
    if eps.len() < 4 {
        return Err(Error::Range(format!("temperature fit needs 4 energies, got {}", eps.len())));
    }
    let mut y = Vec::with_capacity(eps.len());
    for (&e, &s) in eps.iter().zip(spectrum) {
        let scaled = s / (e * coulomb_penetration(e, params)?);
        if !(scaled > 0.0) || !scaled.is_finite() {
            return Err(Error::Domain(format!("scaled spectrum at {e} MeV is not positive")));
        }
        y.push(scaled.ln());
    }
    let w: Vec<f64> = match errors {
        Some(err) if err.iter().all(|&e| e > 0.0) => spectrum.iter().zip(err).map(|(s, e)| (s / e).powi(2)).collect(),
        _ => vec![1.0; eps.len()],
    };
    let fit = weighted_linear_fit(eps, &y, &w).ok_or_else(|| Error::Degenerate("energies do not span a range".into()))?;
    let spread = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if fit.slope >= -1e-12 * spread {
        return Ok(Temperature { t: f64::INFINITY, err: f64::INFINITY, infinite: true, points: eps.len() });
    }
    // without errors, scale the slope variance by the residual variance
    let var = if errors.is_some() { fit.var_slope } else { fit.var_slope * fit.chi2 / (eps.len() - 2) as f64 };
    let t = -1.0 / fit.slope;
    Ok(Temperature { t, err: var.sqrt() / (fit.slope * fit.slope), infinite: false, points: eps.len() })
}

/// Temperature from the angle-integrated spectrum `4 pi a0` at every outgoing
/// energy within `range` (MeV).
pub fn scale_spectrum_fit_t(ds: &DdxDataset, params: &ScalingParams, range: (f64, f64)) -> Result<Temperature> {
    let mut eps = Vec::new();
    let mut s = Vec::new();
    let mut err = Vec::new();
    for e in ds.energies().into_iter().filter(|&e| e >= range.0 && e <= range.1) {
        let rows = ds.at_energy(e);
        let mut distinct: Vec<f64> = rows.iter().map(|r| r.theta).collect();
        distinct.dedup();
        let order = (distinct.len() as u32).saturating_sub(1).min(2);
        let fit = legendre_fit(ds, e, order)?;
        let four_pi = 4.0 * std::f64::consts::PI;
        eps.push(e);
        s.push(four_pi * fit.coeffs[0]);
        err.push(four_pi * fit.stderr(0));
    }
    let errors = if err.iter().all(|e| e.is_finite() && *e > 0.0) && ds.rows.iter().all(|r| r.err > 0.0) { Some(err.as_slice()) } else { None };
    fit_temperature(&eps, &s, errors, params)
}

fn scale_forward(ds: &DdxDataset, factor: f64, frame: Frame) -> DdxDataset {
    let rows = ds
        .rows
        .iter()
        .map(|r| {
            let f = if r.theta < 90.0 { factor } else { 1.0 };
            DdxRow { value: r.value * f, err: r.err * f, frame, ..*r }
        })
        .collect();
    DdxDataset { e_in: ds.e_in, rows, provenance: ds.provenance.clone() }
}

/// Approximate frame change: forward-hemisphere intensities times `f_cm`.
///
/// Returns warnings instead of failing when rows are already in the target frame;
/// such rows are left untouched.
pub fn lab_to_cm(ds: &DdxDataset, f_cm: f64) -> (DdxDataset, Vec<String>) {
    convert(ds, f_cm, Frame::Lab, Frame::Cm)
}

/// Inverse of [`lab_to_cm`].
pub fn cm_to_lab(ds: &DdxDataset, f_cm: f64) -> (DdxDataset, Vec<String>) {
    convert(ds, 1.0 / f_cm, Frame::Cm, Frame::Lab)
}

fn convert(ds: &DdxDataset, factor: f64, from: Frame, to: Frame) -> (DdxDataset, Vec<String>) {
    let mut warnings = Vec::new();
    let already = ds.rows.iter().filter(|r| r.frame == to).count();
    if already > 0 {
        warnings.push(format!("{already} rows are already in the {} frame and were left unchanged", to.label()));
    }
    let converted = scale_forward(ds, factor, to);
    let rows = ds
        .rows
        .iter()
        .zip(converted.rows)
        .map(|(orig, conv)| if orig.frame == from { conv } else { *orig })
        .collect();
    (DdxDataset { e_in: ds.e_in, rows, provenance: ds.provenance.clone() }, warnings)
}
