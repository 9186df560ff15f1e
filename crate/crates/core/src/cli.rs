//! Command-line driver. Every command reads an optional JSON config, applies
//! flag overrides, writes CSV tables into the output directory and finishes
//! with a `<command>.manifest.json` holding the resolved config, the seed, the
//! output digests and a summary table.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::SymmetricEigen;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddxkit::{self, ScalingParams};
use crate::density::{self, GridConfig};
use crate::error::{Error, Result};
use crate::microensemble::{a_matrix, build_k_correlation, overlap_scaling_check, sum_rules, EnsembleBasis, EnsembleConfig, LambdaEnsemble};
use crate::observables::{self, analytic_angular_distribution, angular_distribution, asymmetry, ChannelGenerator};
use crate::smatrix::{self, ChannelPair, CorrelatedProcess, EnergyGrid, ModelParams};

pub const SEED_ENV: &str = "PHASEMEM_SEED";
pub const DEFAULT_SEED: u64 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "phasemem", version, about = "Spin-coherent compound-nucleus simulations and DDX analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; unknown fields are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; falls back to PHASEMEM_SEED, then to the config, then to 1.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "phasemem-out")]
    pub out: PathBuf,
    /// Worker threads for ensemble loops; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    /// CSV plus a quick-look SVG per table.
    Svg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Amplitude ensemble: levels, sum rules, overlap scaling and the overlap identity.
    Simulate,
    /// Monte Carlo cross-spin correlation against the closed form.
    Correlate(CorrelateArgs),
    /// Angular distribution, excitation function and rotation period.
    Observe(ObserveArgs),
    /// Forward/backward ratio, Legendre fits and temperature of a DDX file.
    Analyze(AnalyzeArgs),
    /// Intensity correlators, needle probe and overlap identity on grid fields.
    Density(DensityArgs),
    /// Summarize the manifests in a results directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub gamma_up: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub j: Option<u32>,
    #[arg(long)]
    pub dj: Option<u32>,
    #[arg(long)]
    pub realizations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ObserveArgs {
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub realizations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    pub file: PathBuf,
    /// Forward and backward angles in degrees.
    #[arg(long, value_delimiter = ',')]
    pub fb: Option<Vec<f64>>,
    /// Emission energy in MeV; defaults to the first one in the file.
    #[arg(long)]
    pub eout: Option<f64>,
    #[arg(long)]
    pub order: Option<u32>,
    /// Emission-energy range `lo,hi` for the temperature fit.
    #[arg(long, value_delimiter = ',')]
    pub trange: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub seed: Option<u64>,
    pub ensemble: EnsembleConfig,
    pub sum_rule_draws: usize,
    /// Class indices for the same-class and cross-class sums.
    pub sum_rule_classes: [usize; 2],
    pub overlap_dimensions: Vec<usize>,
    pub overlap_trials: usize,
    pub identity_draws: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            seed: None,
            ensemble: EnsembleConfig::default(),
            sum_rule_draws: 157,
            sum_rule_classes: [0, 1],
            overlap_dimensions: vec![64, 128, 256, 512],
            overlap_trials: 8,
            identity_draws: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateConfig {
    pub seed: Option<u64>,
    pub params: ModelParams,
    pub j: u32,
    pub dj: u32,
    pub realizations: usize,
    pub tolerance: f64,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        CorrelateConfig { seed: None, params: ModelParams::default(), j: 0, dj: 1, realizations: 10_000, tolerance: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveConfig {
    pub seed: Option<u64>,
    pub params: ModelParams,
    pub spins: Vec<u32>,
    pub angles: Vec<f64>,
    /// Energy averaging window, in units of `gamma_up`.
    pub window_widths: f64,
    pub points: usize,
    pub realizations: usize,
    pub asymmetry_angle: f64,
    pub channels: Vec<String>,
    pub excitation_points: usize,
    pub period_realizations: usize,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        ObserveConfig {
            seed: None,
            params: ModelParams::default(),
            spins: vec![0, 1, 2, 3],
            angles: (0..=18).map(|k| 10.0 * k as f64).collect(),
            window_widths: 20.0,
            points: 512,
            realizations: 2000,
            asymmetry_angle: 30.0,
            channels: vec!["p0".into(), "p1".into(), "p2".into(), "p3".into()],
            excitation_points: 1024,
            period_realizations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub seed: Option<u64>,
    pub fb: [f64; 2],
    pub e_out: Option<f64>,
    pub legendre_order: u32,
    pub temperature_range: Option<[f64; 2]>,
    pub scaling: ScalingParams,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { seed: None, fb: [15.0, 135.0], e_out: None, legendre_order: 4, temperature_range: None, scaling: ScalingParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub seed: Option<u64>,
    pub grid: GridConfig,
    pub q: f64,
    pub correlated_points: usize,
    pub q_tolerance: f64,
    /// Needle probe sizes in grid cells.
    pub needle_cells: Vec<usize>,
    pub identity_dimension: usize,
    pub identity_draws: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            seed: None,
            grid: GridConfig::default(),
            q: 0.1,
            correlated_points: 16384,
            q_tolerance: 0.02,
            needle_cells: vec![256, 64, 16, 4, 1],
            identity_dimension: 64,
            identity_draws: 100,
        }
    }
}

/// One summary line of a manifest; `target`, `tolerance` and `pass` are absent
/// for reported quantities without a reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub target: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

impl SummaryRow {
    fn info(quantity: &str, estimate: f64, stderr: Option<f64>) -> SummaryRow {
        SummaryRow { quantity: quantity.into(), estimate, stderr, target: None, tolerance: None, pass: None }
    }

    fn check(quantity: &str, estimate: f64, stderr: Option<f64>, target: f64, tolerance: f64) -> SummaryRow {
        let pass = (estimate - target).abs() <= tolerance;
        SummaryRow { quantity: quantity.into(), estimate, stderr, target: Some(target), tolerance: Some(tolerance), pass: Some(pass) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub format: Format,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: Vec<SummaryRow>,
}

/// Collects output files for one run.
struct Outputs {
    dir: PathBuf,
    format: Format,
    files: Vec<FileDigest>,
}

fn digest(path: &str, bytes: &[u8]) -> FileDigest {
    let hash = Sha256::digest(bytes);
    FileDigest { path: path.into(), sha256: hash.iter().map(|b| format!("{b:02x}")).collect(), bytes: bytes.len() }
}

impl Outputs {
    fn new(dir: &Path, format: Format) -> Result<Outputs> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), format, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(digest(name, contents.as_bytes()));
        Ok(())
    }

    fn table(&mut self, name: &str, csv: &str) -> Result<()> {
        self.write(name, csv)?;
        if self.format == Format::Svg {
            if let Some(svg) = plot_svg(csv) {
                self.write(&name.replace(".csv", ".svg"), &svg)?;
            }
        }
        Ok(())
    }

    fn finish(mut self, command: &str, seed: u64, config: &impl Serialize, inputs: Vec<FileDigest>, summary: Vec<SummaryRow>) -> Result<()> {
        let mut rows = String::from("quantity,estimate,stderr,target,tolerance,pass\n");
        for r in &summary {
            rows.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.quantity,
                r.estimate,
                opt(r.stderr),
                opt(r.target),
                opt(r.tolerance),
                r.pass.map(|p| p.to_string()).unwrap_or_default()
            ));
        }
        self.write(&format!("{command}_summary.csv"), &rows)?;
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            format: self.format,
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            inputs,
            outputs: self.files,
            summary,
        };
        let path = self.dir.join(format!("{command}{MANIFEST_SUFFIX}"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Line plot of the second column against the first; `None` when either is not numeric.
pub fn plot_svg(csv: &str) -> Option<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    if header.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = lines
        .map(|l| {
            let mut f = l.split(',');
            Some((f.next()?.parse::<f64>().ok()?, f.next()?.parse::<f64>().ok()?))
        })
        .collect::<Option<Vec<_>>>()?;
    let finite: Vec<(f64, f64)> = pts.into_iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let path: Vec<String> = finite
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", m + (x - x0) / (x1 - x0) * (w - 2.0 * m), h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m)))
        .collect();
    Some(format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" points=\"{path}\"/>\n",
            "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\">{xl} [{x0:.4}, {x1:.4}]</text>\n",
            "<text x=\"10\" y=\"20\">{yl} [{y0:.4}, {y1:.4}]</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        pw = w - 2.0 * m,
        ph = h - 2.0 * m,
        path = path.join(" "),
        cx = w / 2.0,
        by = h - 15.0,
        xl = header[0],
        yl = header[1],
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
    ))
}

/// Exit status for an error: 2 for bad configuration or input format, 3 for
/// missing files, 4 for model and numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Validation(_) => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })
}

fn resolve_seed(flag: Option<u64>, config: &mut Option<u64>) -> u64 {
    let seed = flag.or(*config).unwrap_or(DEFAULT_SEED);
    *config = Some(seed);
    seed
}

/// Parses `args` (program name first) and runs the command; returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let threads = cli.common.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: thread pool: {e}");
            return 4;
        }
    };
    // printed lines are buffered so the pool closure stays Send
    let mut printed: Vec<u8> = Vec::new();
    let result = pool.install(|| dispatch(&cli, &mut printed));
    let _ = stdout.write_all(&printed);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Simulate => simulate(c, stdout),
        Command::Correlate(a) => correlate(c, a, stdout),
        Command::Observe(a) => observe(c, a, stdout),
        Command::Analyze(a) => analyze(c, a, stdout),
        Command::Density(a) => density_cmd(c, a, stdout),
        Command::Report(a) => report(&a.dir, stdout),
    }
}

fn say(stdout: &mut dyn Write, line: String) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn simulate(c: &Common, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg: SimulateConfig = load_config(c.config.as_deref())?;
    let seed = resolve_seed(c.seed, &mut cfg.seed);
    cfg.ensemble.seed = seed;
    cfg.ensemble.validate()?;
    let [j, jp] = cfg.sum_rule_classes;
    if cfg.sum_rule_draws < 2 || cfg.identity_draws == 0 {
        return Err(Error::Config("sum_rule_draws must be at least 2 and identity_draws positive".into()));
    }
    let levels = cfg.ensemble.generate_levels()?;
    let k = build_k_correlation(&cfg.ensemble)?;
    let basis = Arc::new(EnsembleBasis::new(cfg.ensemble.clone(), k, levels.clone())?);
    let lambdas = LambdaEnsemble::new(cfg.ensemble.lambda_count, seed)?;
    let sums = sum_rules(&basis, &lambdas, j, jp, cfg.sum_rule_draws)?;
    let scaling = overlap_scaling_check(&cfg.overlap_dimensions, cfg.overlap_trials, seed)?;

    let mut out = Outputs::new(&c.out, c.format)?;
    let mut csv = String::from("j,parity,index,energy\n");
    for l in &levels {
        for (i, e) in l.energies.iter().enumerate() {
            csv.push_str(&format!("{},{},{i},{e}\n", l.class.j, l.class.parity));
        }
    }
    out.table("levels.csv", &csv)?;
    let mut csv = String::from("sum,k_route,k_stderr,lambda_route,lambda_stderr\n");
    for (name, a, b) in [
        ("diagonal", sums.diagonal, sums.lambda_diagonal),
        ("same_class", sums.same_class, sums.lambda_same_class),
        ("cross_class", sums.cross_class, sums.lambda_cross_class),
    ] {
        csv.push_str(&format!("{name},{},{},{},{}\n", a.mean, a.stderr, b.mean, b.stderr));
    }
    out.write("sum_rules.csv", &csv)?;
    let mut csv = String::from("n,mean_sq_overlap,stderr,scaled,class_sum,class_sum_target,cross_k_mean,cross_k_stderr\n");
    for r in &scaling.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n, r.mean_sq_overlap, r.stderr, r.scaled, r.class_sum, r.class_sum_target, r.cross_k_mean, r.cross_k_stderr
        ));
    }
    out.table("overlap_scaling.csv", &csv)?;

    // overlap identity on the ensemble's own amplitudes and k-bases
    let cj = &basis.coeffs[j];
    let cjp = &basis.coeffs[jp];
    let mut csv = String::from("draw,mu,k_mean_sq,cross_k,rhs,residual\n");
    let mut worst: f64 = 0.0;
    for d in 0..cfg.identity_draws {
        let eta = basis.draw_eta(d as u64);
        let u = SymmetricEigen::new(lambdas.masked(d, &a_matrix(&eta, 0, 1)?)).eigenvectors;
        let mu = d % cj.nrows().min(cjp.nrows());
        let row = |m: &nalgebra::DMatrix<f64>| -> Vec<f64> { m.row(mu).iter().copied().collect() };
        let id = density::scaled_overlap_identity(&row(cj), &row(cjp), &u)?;
        worst = worst.max(id.residual);
        csv.push_str(&format!("{d},{mu},{},{},{},{}\n", id.k_mean_sq, id.cross_k, id.rhs, id.residual));
    }
    out.write("overlap_identity.csv", &csv)?;

    let class_size = cj.nrows() as f64;
    let tol = 3.0 / class_size.sqrt();
    let last = scaling.rows.last().expect("at least two dimensions");
    let summary = vec![
        SummaryRow::check("sum_rule_diagonal", sums.diagonal.mean, Some(sums.diagonal.stderr), 1.0, tol),
        SummaryRow::check("sum_rule_same_class", sums.same_class.mean, Some(sums.same_class.stderr), 1.0, tol),
        SummaryRow::check("sum_rule_cross_class", sums.cross_class.mean, Some(sums.cross_class.stderr), 1.0, tol),
        SummaryRow::check("overlap_slope", scaling.slope, Some(scaling.slope_stderr), -1.0, 0.1),
        SummaryRow::check("overlap_class_sum", last.class_sum, None, last.class_sum_target, 0.1 * last.class_sum_target),
        SummaryRow::check("overlap_identity_max_residual", worst, None, 0.0, 1e-10),
    ];
    for r in &summary {
        say(stdout, format!("{}: {:.6}", r.quantity, r.estimate))?;
    }
    out.finish("simulate", seed, &cfg, Vec::new(), summary)
}

fn correlate(c: &Common, a: &CorrelateArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg: CorrelateConfig = load_config(c.config.as_deref())?;
    let seed = resolve_seed(c.seed, &mut cfg.seed);
    if let Some(v) = a.gamma_up {
        cfg.params.gamma_up = v;
    }
    if let Some(v) = a.beta {
        cfg.params.beta = v;
    }
    if let Some(v) = a.omega {
        cfg.params.hbar_omega = v;
    }
    if let Some(v) = a.j {
        cfg.j = v;
    }
    if let Some(v) = a.dj {
        cfg.dj = v;
    }
    if let Some(v) = a.realizations {
        cfg.realizations = v;
    }
    cfg.params.validate()?;
    if cfg.dj == 0 {
        return Err(Error::Config("dj must be at least 1".into()));
    }
    let est = smatrix::process_correlation(&cfg.params, cfg.j, cfg.j + cfg.dj, cfg.realizations, seed)?;
    let mut out = Outputs::new(&c.out, c.format)?;
    out.write(
        "correlation.csv",
        &format!(
            "j,jp,realizations,re,im,stderr,closed_re,closed_im\n{},{},{},{},{},{},{},{}\n",
            cfg.j,
            cfg.j + cfg.dj,
            cfg.realizations,
            est.estimate.re,
            est.estimate.im,
            est.stderr,
            est.closed_form.re,
            est.closed_form.im
        ),
    )?;
    let t: Vec<f64> = (0..=60).map(|k| k as f64 * 0.05 / cfg.params.gamma_up).collect();
    let mut csv = String::from("t,correlation\n");
    for &x in &t {
        csv.push_str(&format!("{x},{}\n", smatrix::cross_spin_time_correlation(&cfg.params, cfg.j, cfg.j + cfg.dj, x)));
    }
    out.table("time_correlation.csv", &csv)?;
    say(stdout, format!("sample correlation: {:.4} ± {:.4} (imaginary part {:.4})", est.estimate.re, est.stderr, est.estimate.im))?;
    say(stdout, format!("closed form: {:.4}", est.closed_form.re))?;
    let summary = vec![SummaryRow::check("correlation", est.estimate.re, Some(est.stderr), est.closed_form.re, cfg.tolerance)];
    out.finish("correlate", seed, &cfg, Vec::new(), summary)
}

fn observe(c: &Common, a: &ObserveArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg: ObserveConfig = load_config(c.config.as_deref())?;
    let seed = resolve_seed(c.seed, &mut cfg.seed);
    if let Some(v) = a.beta {
        cfg.params.beta = v;
    }
    if let Some(v) = a.omega {
        cfg.params.hbar_omega = v;
    }
    if let Some(v) = a.realizations {
        cfg.realizations = v;
    }
    cfg.params.validate()?;
    let gam = cfg.params.gamma_up;
    let grid = EnergyGrid::new(0.0, gam / 5.0, cfg.points)?;
    let process = CorrelatedProcess::new(&cfg.params, &cfg.spins, &ChannelPair::new("in", "out"), &grid)?;
    let ad = angular_distribution(&process, &cfg.angles, cfg.window_widths * gam, cfg.realizations, seed)?;
    let exact = analytic_angular_distribution(&cfg.params, &cfg.spins, &cfg.angles)?;
    let (asym, asym_err) = asymmetry(&ad, cfg.asymmetry_angle)?;
    let (asym_exact, _) = asymmetry(&exact, cfg.asymmetry_angle)?;

    let ex_grid = EnergyGrid::new(0.0, gam / 5.0, cfg.excitation_points)?;
    let generator = ChannelGenerator::new(&cfg.params, &cfg.channels, &ex_grid)?;
    let ex = observables::excitation_function(&generator.sample(seed, seed ^ 0x5eed, 0), &cfg.channels)?;
    let stats = observables::fluctuation_analysis(&ex)?;
    let rho = generator.rho;
    let m = cfg.channels.len() as f64;

    let mut out = Outputs::new(&c.out, c.format)?;
    out.table("angular.csv", &ad.to_csv())?;
    out.table("angular_analytic.csv", &exact.to_csv())?;
    out.table("excitation.csv", &ex.to_csv())?;
    let mut summary = vec![
        SummaryRow::check("asymmetry", asym, Some(asym_err), asym_exact, 3.0 * asym_err),
        SummaryRow::info("normalized_variance", stats.c, None),
        SummaryRow::info("normalized_variance_expected", 1.0 / m + (1.0 - 1.0 / m) * rho * rho, None),
    ];
    if let Some(w) = stats.width {
        summary.push(SummaryRow::info("autocorrelation_width", w, None));
    }
    if cfg.params.hbar_omega != 0.0 && cfg.spins.len() >= 2 {
        let p = observables::oscillation_period(&cfg.params, cfg.spins[0], cfg.spins[1], cfg.period_realizations, seed)?;
        summary.push(SummaryRow::check("rotation_period", p.period, Some(p.stderr), p.target, 0.05 * p.target));
    }
    for r in &summary {
        say(stdout, format!("{}: {:.6}", r.quantity, r.estimate))?;
    }
    out.finish("observe", seed, &cfg, Vec::new(), summary)
}

fn analyze(c: &Common, a: &AnalyzeArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg: AnalyzeConfig = load_config(c.config.as_deref())?;
    let seed = resolve_seed(c.seed, &mut cfg.seed);
    if let Some(fb) = &a.fb {
        if fb.len() != 2 {
            return Err(Error::Config(format!("--fb takes two angles, got {}", fb.len())));
        }
        cfg.fb = [fb[0], fb[1]];
    }
    if let Some(e) = a.eout {
        cfg.e_out = Some(e);
    }
    if let Some(o) = a.order {
        cfg.legendre_order = o;
    }
    if let Some(r) = &a.trange {
        if r.len() != 2 {
            return Err(Error::Config(format!("--trange takes two energies, got {}", r.len())));
        }
        cfg.temperature_range = Some([r[0], r[1]]);
    }
    cfg.scaling.validate()?;
    let bytes = fs::read(&a.file).map_err(|e| Error::io(&a.file, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Parse { line: 0, msg: "file is not UTF-8".into() })?;
    let ds = ddxkit::parse_ddx_str(&text)?;
    let energies = ds.energies();
    let e_out = match cfg.e_out {
        Some(e) => e,
        None => *energies.first().ok_or_else(|| Error::Validation("dataset has no rows".into()))?,
    };
    cfg.e_out = Some(e_out);
    let ratio = ddxkit::fb_ratio(&ds, e_out, cfg.fb[0], cfg.fb[1])?;
    let bound = ddxkit::symmetric_bound(&ds, e_out)?;
    let mut fits = Vec::new();
    for &e in &energies {
        let n = ds.at_energy(e).len() as u32;
        if n >= 2 {
            fits.push(ddxkit::legendre_fit(&ds, e, cfg.legendre_order.min(n - 1))?);
        }
    }

    let mut out = Outputs::new(&c.out, c.format)?;
    out.write("ddx.csv", &ds.to_csv())?;
    out.write("legendre.csv", &ddxkit::legendre_csv(&fits))?;
    let infinite = if ratio.infinite { " (backward value is zero)" } else { "" };
    say(
        stdout,
        format!("fb ratio at {e_out} MeV, {}/{} deg: {:.2} ± {:.2}{infinite}", cfg.fb[0], cfg.fb[1], ratio.ratio, ratio.err),
    )?;
    say(stdout, format!("symmetric share: {:.3}", bound.share()))?;
    let mut summary = vec![
        SummaryRow::info("fb_ratio", ratio.ratio, Some(ratio.err)),
        SummaryRow::info("symmetric_share", bound.share(), None),
        SummaryRow::info("angle_integrated", bound.total, None),
    ];
    if let Some([lo, hi]) = cfg.temperature_range {
        let t = ddxkit::scale_spectrum_fit_t(&ds, &cfg.scaling, (lo, hi))?;
        say(stdout, format!("temperature: {:.3} ± {:.3} MeV", t.t, t.err))?;
        summary.push(SummaryRow::info("temperature", t.t, Some(t.err)));
    }
    let input = digest(&a.file.display().to_string(), text.as_bytes());
    out.finish("analyze", seed, &cfg, vec![input], summary)
}

fn density_cmd(c: &Common, a: &DensityArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg: DensityConfig = load_config(c.config.as_deref())?;
    let seed = resolve_seed(c.seed, &mut cfg.seed);
    if let Some(p) = a.points {
        cfg.grid.points = p;
    }
    if let Some(q) = a.q {
        cfg.q = q;
    }
    cfg.grid.validate()?;
    let g = cfg.grid;
    let fa = density::gaussian_field(&g, seed, 0)?;
    let fb = density::gaussian_field(&g, seed, 1)?;
    let l_ind = density::intensity_correlator_l(&fa, &fb)?;
    let l_self = density::intensity_correlator_l(&fa, &fa)?;
    let v_eff = density::effective_volume(&fa)?;
    let big = GridConfig { points: cfg.correlated_points, ..g };
    let pair = density::synth_correlated_fields(&big, cfg.q, seed)?;
    let l_q = density::intensity_correlator_l(&pair.a, &pair.b)?;
    let dv: Vec<f64> = cfg.needle_cells.iter().map(|&n| n as f64 * g.cell()).collect();
    let needle = density::needle_probe(&fa, &fb, &dv)?;

    let n = cfg.identity_dimension;
    let mut worst: f64 = 0.0;
    let mut csv = String::from("draw,k_mean_sq,cross_k,rhs,residual\n");
    for d in 0..cfg.identity_draws {
        let cm = crate::microensemble::sample_orthogonal(n, seed.wrapping_add(2 * d as u64))?;
        let u = crate::microensemble::sample_orthogonal(n, seed.wrapping_add(2 * d as u64 + 1))?;
        let row = |r: usize| -> Vec<f64> { cm.row(r).iter().copied().collect() };
        let id = density::scaled_overlap_identity(&row(0), &row(1), &u)?;
        worst = worst.max(id.residual);
        csv.push_str(&format!("{d},{},{},{},{}\n", id.k_mean_sq, id.cross_k, id.rhs, id.residual));
    }

    let mut out = Outputs::new(&c.out, c.format)?;
    let mut fields = String::from("x,phi_a,phi_b\n");
    for (i, (x, y)) in fa.values.iter().zip(&fb.values).enumerate() {
        fields.push_str(&format!("{},{x},{y}\n", (i as f64 + 0.5) * g.cell()));
    }
    out.table("fields.csv", &fields)?;
    let mut table = String::from("delta_v,cells,value,stderr,scale_factor\n");
    for r in &needle {
        table.push_str(&format!("{},{},{},{},{}\n", r.delta_v, r.cells, r.value, r.stderr, r.scale_factor));
    }
    out.table("needle.csv", &table)?;
    out.write("overlap_identity.csv", &csv)?;
    let summary = vec![
        SummaryRow::check("l_independent", l_ind.value, Some(l_ind.stderr), 0.0, 3.0 * l_ind.stderr),
        SummaryRow::check("l_self", l_self.value, None, 2.0, 1e-10),
        SummaryRow::check("l_constructed", l_q.value, Some(l_q.stderr), cfg.q, cfg.q_tolerance),
        SummaryRow::check("effective_volume_ratio", v_eff / g.volume, None, 1.0, 0.1),
        SummaryRow::check("overlap_identity_max_residual", worst, None, 0.0, 1e-10),
    ];
    for r in &summary {
        say(stdout, format!("{}: {:.6}", r.quantity, r.estimate))?;
    }
    if !pair.detectable {
        say(stdout, format!("q = {} is below the detection threshold {:.4}", cfg.q, pair.null_threshold))?;
    }
    out.finish("density", seed, &cfg, Vec::new(), summary)
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub manifest: String,
    pub command: String,
    pub seed: Option<u64>,
    pub row: Option<SummaryRow>,
    pub status: String,
}

fn find_manifests(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() && depth > 0 {
            find_manifests(&p, depth - 1, found)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MANIFEST_SUFFIX)) {
            found.push(p);
        }
    }
    Ok(())
}

/// Reads every manifest under `dir` (one directory level deep), oldest first
/// by modification time. Unreadable manifests give a single `invalid` row.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut found = Vec::new();
    find_manifests(dir, 1, &mut found)?;
    if found.is_empty() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no manifests found")));
    }
    let mut stamped: Vec<(std::time::SystemTime, PathBuf)> =
        found.into_iter().map(|p| (fs::metadata(&p).and_then(|m| m.modified()).unwrap_or(std::time::UNIX_EPOCH), p)).collect();
    stamped.sort();
    let mut rows = Vec::new();
    for (_, p) in stamped {
        let name = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
        let parsed = fs::read_to_string(&p).ok().and_then(|t| serde_json::from_str::<Manifest>(&t).ok());
        match parsed {
            None => rows.push(ReportRow { manifest: name, command: String::new(), seed: None, row: None, status: "invalid".into() }),
            Some(m) if m.summary.is_empty() => {
                rows.push(ReportRow { manifest: name, command: m.command, seed: Some(m.seed), row: None, status: "empty".into() })
            }
            Some(m) => {
                for r in m.summary {
                    let status = match r.pass {
                        Some(true) => "pass",
                        Some(false) => "fail",
                        None => "info",
                    };
                    rows.push(ReportRow { manifest: name.clone(), command: m.command.clone(), seed: Some(m.seed), row: Some(r), status: status.into() });
                }
            }
        }
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("manifest,command,seed,quantity,estimate,stderr,target,tolerance,status\n");
    for r in rows {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        match &r.row {
            Some(x) => s.push_str(&format!(
                "{},{},{seed},{},{},{},{},{},{}\n",
                r.manifest,
                r.command,
                x.quantity,
                x.estimate,
                opt(x.stderr),
                opt(x.target),
                opt(x.tolerance),
                r.status
            )),
            None => s.push_str(&format!("{},{},{seed},,,,,,{}\n", r.manifest, r.command, r.status)),
        }
    }
    s
}

fn report(dir: &Path, stdout: &mut dyn Write) -> Result<()> {
    let rows = collect_report(dir)?;
    let csv = report_csv(&rows);
    let path = dir.join(REPORT_FILE);
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    write!(stdout, "{csv}").map_err(|e| Error::io("<stdout>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("phasemem").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse { line: 3, msg: "x".into() }), 2);
        assert_eq!(exit_code(&Error::io("f", std::io::Error::from(std::io::ErrorKind::NotFound))), 3);
        assert_eq!(exit_code(&Error::Model("x".into())), 4);
        assert_eq!(exit_code(&Error::Domain("x".into())), 4);
    }

    #[test]
    fn unknown_config_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"params": {"gamma_up": 1.0, "betta": 0.5}}"#).unwrap();
        let (code, _, err) =
            run_capture(&["correlate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--realizations", "10"]);
        assert_eq!(code, 2);
        assert!(err.contains("betta"), "{err}");
        fs::write(&cfg, r#"{"params": {"gamma_up": "one"}}"#).unwrap();
        let (code, _, err) = run_capture(&["correlate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.contains("params.gamma_up"), "{err}");
    }

    #[test]
    fn seed_precedence() {
        let mut from_config = Some(9);
        assert_eq!(resolve_seed(None, &mut from_config), 9);
        let mut none = None;
        assert_eq!(resolve_seed(None, &mut none), DEFAULT_SEED);
        assert_eq!(none, Some(DEFAULT_SEED));
        let mut overridden = Some(9);
        assert_eq!(resolve_seed(Some(4), &mut overridden), 4);
        assert_eq!(overridden, Some(4));
    }

    #[test]
    fn svg_needs_numeric_columns() {
        assert!(plot_svg("a,b\n1,2\n2,3\n").unwrap().starts_with("<svg"));
        assert!(plot_svg("a,b\nx,2\n2,3\n").is_none());
        assert!(plot_svg("a\n1\n2\n").is_none());
    }

    #[test]
    fn correlate_writes_manifest_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, stdout, _) = run_capture(&["correlate", "--realizations", "200", "--seed", "3", "--out", out]);
        assert_eq!(code, 0);
        assert!(stdout.contains("closed form: 0.6667"), "{stdout}");
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("correlate.manifest.json")).unwrap()).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.config["seed"], 3);
        assert_eq!(m.config["realizations"], 200);
        for f in &m.outputs {
            let bytes = fs::read(dir.path().join(&f.path)).unwrap();
            assert_eq!(digest(&f.path, &bytes), *f);
        }
        assert_eq!(m.summary.len(), 1);
        assert_eq!(m.summary[0].quantity, "correlation");
    }
}
