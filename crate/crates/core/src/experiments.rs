//! Named experiments with flat `key=value` configuration, CSV / JSON-lines
//! outputs and a PASS/FAIL summary.
//!
//! Summary metrics follow one convention: `expected = null` is
//! informational; a name ending in `(max)` passes when
//! `value ≤ expected + tolerance`, one ending in `(min)` when
//! `value ≥ expected − tolerance`, anything else when
//! `|value − expected| ≤ tolerance`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::d2::{
    d2_estimate, empirical_cf, flatten, paired_d2_grouped, symmetry_copies, CfInput, CharFunGrid, D2Estimate,
};
use crate::inequality::{
    check_claim_hr, check_dn_le_d1, check_prop5, check_prop5new, check_stimal, gradient_family, library,
    sqrt_n_growth, DnOptions, Envelope, EnvelopeKind, VerificationReport,
};
use crate::jump::{
    run_coupled_systems, run_ensemble, write_snapshot_csv, Block, EnsembleRequest, GeneratorSpec, Observable,
    ProductMaxwellian, SystemSampler, Topology, TwoPointProduct, TwoTemperatureMixture,
};
use crate::kinetics::{sample_maxwellian, sample_unit_sphere, RandomSource, Temperature, Vec3};
use crate::moments::{
    build_matrix, e4_from_fourth_moments, energy_basis, fourth_moment_closure, gaussian_moment, moment_trajectory,
    newton_cooling, rational_from_f64, GeneratorMatrix, Polynomial, Slot, VarBlock,
};
use crate::stats::{ks_two_sample, linear_fit};
use crate::steady::{diff_t_check, verify_rota_bound};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),
    #[error("unknown parameter '{key}' for experiment '{experiment}'")]
    UnknownKey { experiment: String, key: String },
    #[error("parameter '{key}': {message}")]
    BadValue { key: String, message: String },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("output: {0}")]
    Output(String),
    #[error("computation failed: {0}")]
    Computation(String),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn compute<E: std::fmt::Display>(e: E) -> ExperimentError {
    ExperimentError::Computation(e.to_string())
}

pub const EXPERIMENTS: [&str; 9] = [
    "newton-cooling",
    "thermostat-relaxation",
    "equilibrium-invariance",
    "reservoir-vs-thermostat-scaling",
    "d2-gaussian-oracle",
    "diffT-check",
    "inequality-verify",
    "rotational-average",
    "moment-closure",
];

const COMMON: [(&str, &str); 2] = [("seed", "1"), ("workers", "0")];

fn defaults(name: &str) -> Option<Vec<(&'static str, &'static str)>> {
    let generator = [
        ("m", "4"),
        ("n", "32"),
        ("k", "10000"),
        ("mu", "1"),
        ("lambda_r", "1"),
        ("t_plus", "2"),
        ("t_minus", "1"),
    ];
    let mut v: Vec<(&str, &str)> = match name {
        "newton-cooling" => {
            let mut v = generator.to_vec();
            v.extend([("topology", "two_reservoirs"), ("times", "0,0.5,1,2,5"), ("f0", "maxwellian:3")]);
            v
        }
        "thermostat-relaxation" => {
            let mut v = generator.to_vec();
            v.extend([
                ("topology", "two_thermostats"),
                ("times", "0,0.25,0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5,2.75,3"),
                ("f0", "maxwellian:3"),
                ("rate_tolerance", "0.1"),
            ]);
            v
        }
        "equilibrium-invariance" => vec![
            ("m", "4"),
            ("n", "32"),
            ("k", "10000"),
            ("mu", "1"),
            ("lambda_r", "1"),
            ("temperature", "1.5"),
            ("topology", "two_reservoirs"),
            ("times", "0,1,2,5"),
            ("sigmas", "3"),
            ("ks_alpha", "0.01"),
        ],
        "reservoir-vs-thermostat-scaling" => vec![
            ("m", "2"),
            ("ns", "8,32,128"),
            ("k", "100000"),
            ("mu", "1"),
            ("lambda_r", "1"),
            ("temperature", "1"),
            ("topology", "two_reservoirs"),
            ("t", "1"),
            ("f0", "maxwellian:2"),
            ("symmetry_copies", "4"),
            ("min_decrease", "1.5"),
        ],
        "d2-gaussian-oracle" => vec![("samples", "100000"), ("t1", "1"), ("t2", "2"), ("tolerance", "0.05")],
        "diffT-check" => vec![
            ("m", "2"),
            ("k", "100000"),
            ("mu", "1"),
            ("lambda_r", "1"),
            ("t_plus", "2"),
            ("t_minus", "1"),
            ("t", "20"),
            ("f0", "maxwellian:1"),
        ],
        "inequality-verify" => vec![
            ("xis", "0.1,1,10"),
            ("ns", "2,3,4"),
            ("sqrt_n_ns", "2,3,4,5,6"),
            ("small_xi_xis", "0,0.1,0.5,1,2,5,10"),
            ("gradient_xis", "0.1,0.3,1,3,10"),
            ("growth_xi", "0.1"),
            ("growth_tolerance", "0.15"),
            ("restarts", "256"),
            ("envelope", "rational"),
            ("envelope_t", "1"),
        ],
        "rotational-average" => vec![
            ("samples", "100000"),
            ("temperature", "1"),
            ("f0", "maxwellian:2"),
            ("cases", "1:4,2:4"),
            ("one_reservoir_m", "2"),
            ("one_reservoir_n", "6"),
        ],
        "moment-closure" => vec![
            ("m", "4"),
            ("n", "32"),
            ("mu", "1"),
            ("lambda_r", "1"),
            ("t_plus", "2"),
            ("t_minus", "1"),
            ("closure_m", "2"),
            ("closure_topology", "two_thermostats"),
            ("f0", "two_point:2"),
            ("horizon", "50"),
            ("steps", "200"),
            ("e4_factor", "10"),
        ],
        _ => return None,
    };
    v.extend(COMMON);
    Some(v)
}

/// Effective configuration of one experiment: every key has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: String,
    entries: Vec<(String, String)>,
}

impl Config {
    pub fn new(experiment: &str) -> Result<Self> {
        let d = defaults(experiment).ok_or_else(|| ExperimentError::UnknownExperiment(experiment.into()))?;
        Ok(Self { experiment: experiment.into(), entries: d.into_iter().map(|(k, v)| (k.into(), v.into())).collect() })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => {
                e.1 = value.trim().to_string();
                Ok(())
            }
            None => Err(ExperimentError::UnknownKey { experiment: self.experiment.clone(), key: key.into() }),
        }
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::BadValue {
                key: format!("line {}", i + 1),
                message: "expected key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).expect("key has a default")
    }

    fn bad(key: &str, message: impl Into<String>) -> ExperimentError {
        ExperimentError::BadValue { key: key.into(), message: message.into() }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key).parse().map_err(|_| Self::bad(key, "expected a number"))?;
        if !v.is_finite() {
            return Err(Self::bad(key, "must be finite"));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key).parse().map_err(|_| Self::bad(key, "expected a non-negative integer"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key).parse().map_err(|_| Self::bad(key, "expected a non-negative integer"))
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Self::bad(key, "expected a comma-separated list of numbers"))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse::<usize>().ok())
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Self::bad(key, "expected a comma-separated list of integers"))
    }

    pub fn topology(&self, key: &str) -> Result<Topology> {
        Topology::parse(self.get(key)).ok_or_else(|| Self::bad(key, "unknown topology"))
    }

    pub fn law(&self, key: &str) -> Result<InitialLaw> {
        InitialLaw::parse(self.get(key)).map_err(|m| Self::bad(key, m))
    }

    /// The effective configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut s = format!("# experiment={}\n", self.experiment);
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Initial system law given as `maxwellian:T`, `mixture:cold:hot:p` or
/// `two_point:a`; all are products of identical coordinate laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw {
    Maxwellian(Temperature),
    Mixture(TwoTemperatureMixture),
    TwoPoint(TwoPointProduct),
}

impl InitialLaw {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |x: &str| x.parse::<f64>().map_err(|_| format!("bad number '{x}'"));
        let temp = |x: &str| Temperature::new(num(x)?).map_err(|e| e.to_string());
        match parts.as_slice() {
            ["maxwellian", t] => Ok(Self::Maxwellian(temp(t)?)),
            ["mixture", c, h, p] => {
                let p = num(p)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err("mixture weight must lie in [0, 1]".into());
                }
                Ok(Self::Mixture(TwoTemperatureMixture { cold: temp(c)?, hot: temp(h)?, hot_fraction: p }))
            }
            ["two_point", a] => Ok(Self::TwoPoint(TwoPointProduct { amplitude: num(a)? })),
            _ => Err(format!("unknown initial law '{s}'")),
        }
    }

    fn coordinate_law(&self, t: Option<Temperature>, e: u32) -> BigRational {
        match (self, t) {
            (Self::TwoPoint(tp), _) => {
                if e % 2 == 1 {
                    BigRational::zero()
                } else {
                    rational_from_f64(tp.amplitude).pow(e as i32)
                }
            }
            (_, Some(t)) => gaussian_moment(e, &rational_from_f64(t.value())),
            (Self::Maxwellian(t), None) => gaussian_moment(e, &rational_from_f64(t.value())),
            (Self::Mixture(_), None) => unreachable!("mixture moments are taken per component"),
        }
    }

    /// Exact expectation of a polynomial in system variables when every
    /// system particle is drawn from this law.
    pub fn expectation(&self, p: &Polynomial) -> Result<BigRational> {
        let mut total = BigRational::zero();
        for (m, c) in p.terms() {
            let mut per_slot: BTreeMap<Slot, [u32; 3]> = BTreeMap::new();
            for &(v, e) in m.factors() {
                if v.block != VarBlock::System {
                    return Err(ExperimentError::Invalid(format!("variable {v} is not a system coordinate")));
                }
                per_slot.entry(v.slot()).or_default()[v.coord as usize] += e;
            }
            let mut x = c.clone();
            for exps in per_slot.values() {
                let at = |t: Option<Temperature>| {
                    exps.iter().fold(BigRational::one(), |acc, &e| acc * self.coordinate_law(t, e))
                };
                x *= match self {
                    Self::Mixture(mx) => {
                        let w = rational_from_f64(mx.hot_fraction);
                        w.clone() * at(Some(mx.hot)) + (BigRational::one() - w) * at(Some(mx.cold))
                    }
                    _ => at(None),
                };
            }
            total += x;
        }
        Ok(total)
    }

    /// Mean energy per degree of freedom.
    pub fn temperature(&self) -> f64 {
        match self {
            Self::Mixture(mx) => mx.hot_fraction * mx.hot.value() + (1.0 - mx.hot_fraction) * mx.cold.value(),
            _ => self.coordinate_law(None, 2).to_f64().unwrap_or(f64::NAN),
        }
    }
}

impl SystemSampler for InitialLaw {
    fn sample(&self, m: usize, rng: &mut RandomSource) -> Vec<Vec3> {
        match self {
            Self::Maxwellian(t) => ProductMaxwellian(*t).sample(m, rng),
            Self::Mixture(x) => x.sample(m, rng),
            Self::TwoPoint(x) => x.sample(m, rng),
        }
    }

    fn describe(&self) -> String {
        match self {
            Self::Maxwellian(t) => ProductMaxwellian(*t).describe(),
            Self::Mixture(x) => x.describe(),
            Self::TwoPoint(x) => x.describe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub expected: Option<f64>,
    pub tolerance: Option<f64>,
}

impl Metric {
    pub fn check(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, expected: Some(expected), tolerance: Some(tolerance) }
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, expected: None, tolerance: None }
    }

    pub fn passes(&self) -> bool {
        let Some(e) = self.expected else { return true };
        let tol = self.tolerance.unwrap_or(0.0);
        if self.name.ends_with("(max)") {
            self.value <= e + tol
        } else if self.name.ends_with("(min)") {
            self.value >= e - tol
        } else {
            (self.value - e).abs() <= tol
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub pass: bool,
    pub metrics: Vec<Metric>,
}

impl Summary {
    fn new(name: &str, metrics: Vec<Metric>) -> Self {
        let pass = metrics.iter().all(Metric::passes);
        Self { name: name.into(), pass, metrics }
    }

    fn with_extra_gate(mut self, ok: bool) -> Self {
        self.pass &= ok;
        self
    }
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let err = |e: csv::Error| ExperimentError::Output(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| ExperimentError::Output(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ExperimentError::Output(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(compute)?);
        s.push('\n');
    }
    write_text(path, &s)
}

fn generator(cfg: &Config, topology: Topology, m: usize, n: usize, t_plus: f64, t_minus: f64) -> Result<GeneratorSpec> {
    GeneratorSpec::new(m, topology, n, cfg.f64("lambda_r")?, cfg.f64("mu")?, t_plus, t_minus)
        .map_err(|e| ExperimentError::Invalid(e.to_string()))
}

/// Run an experiment and write its outputs (including `config.txt` and
/// `summary.json`) into `out`.
pub fn run(cfg: &Config, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out).map_err(|e| ExperimentError::Output(format!("{}: {e}", out.display())))?;
    write_text(&out.join("config.txt"), &cfg.echo())?;
    let workers = cfg.usize("workers")?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    let pool = builder.build().map_err(compute)?;
    let summary = pool.install(|| match cfg.experiment.as_str() {
        "newton-cooling" => newton_cooling_exp(cfg, out),
        "thermostat-relaxation" => thermostat_relaxation(cfg, out),
        "equilibrium-invariance" => equilibrium_invariance(cfg, out),
        "reservoir-vs-thermostat-scaling" => reservoir_scaling(cfg, out),
        "d2-gaussian-oracle" => d2_gaussian_oracle(cfg, out),
        "diffT-check" => diff_t(cfg, out),
        "inequality-verify" => inequality_verify(cfg, out),
        "rotational-average" => rotational_average(cfg, out),
        "moment-closure" => moment_closure(cfg, out),
        other => Err(ExperimentError::UnknownExperiment(other.into())),
    })?;
    let json = serde_json::to_string_pretty(&summary).map_err(compute)?;
    write_text(&out.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

fn energy_channels(topology: Topology) -> Vec<Observable> {
    let mut v = Vec::new();
    if topology.reservoirs() >= 2 {
        v.push(Observable::EnergyMinus);
    }
    v.push(Observable::EnergySystem);
    if topology.reservoirs() >= 1 {
        v.push(Observable::EnergyPlus);
    }
    v
}

fn newton_cooling_exp(cfg: &Config, out: &Path) -> Result<Summary> {
    let topology = cfg.topology("topology")?;
    if topology.reservoirs() == 0 {
        return Err(ExperimentError::Invalid("newton-cooling needs a reservoir topology".into()));
    }
    let spec = generator(cfg, topology, cfg.usize("m")?, cfg.usize("n")?, cfg.f64("t_plus")?, cfg.f64("t_minus")?)?;
    let f0 = cfg.law("f0")?;
    let times = cfg.f64_list("times")?;
    let channels = energy_channels(topology);
    let req = EnsembleRequest::new(cfg.usize("k")?, times.clone(), channels.clone(), cfg.u64("seed")?);
    let run = run_ensemble(&spec, &f0, &req).map_err(compute)?;

    // oracle: exact generator matrix on the block energies
    let matrix = build_matrix(&spec, &energy_basis(&spec)).map_err(compute)?;
    let initial: Vec<f64> = matrix
        .names
        .iter()
        .map(|n| match n.as_str() {
            "e_minus" => spec.t_minus.value(),
            "e_plus" => spec.t_plus.value(),
            _ => f0.temperature(),
        })
        .collect();
    let oracle = moment_trajectory(&matrix, &initial, &times).map_err(compute)?;

    let names: Vec<&str> = channels.iter().map(|c| c.name()).collect();
    let mut header = vec!["t"];
    header.extend(&names);
    let se_names: Vec<String> = names.iter().map(|n| format!("stderr_{n}")).collect();
    header.extend(se_names.iter().map(String::as_str));
    let mut rows = Vec::new();
    let mut oracle_rows = Vec::new();
    let mut metrics = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        let mut row = vec![num(t)];
        let mut orow = vec![num(t)];
        for (ci, name) in names.iter().enumerate() {
            let mean = run.record.mean[ci][ti];
            let se = run.record.stderr[ci][ti].unwrap_or(f64::NAN);
            let oi = matrix.names.iter().position(|n| n == name).expect("same channels");
            row.push(num(mean));
            orow.push(num(oracle[ti][oi]));
            if t > 0.0 {
                metrics.push(Metric::check(format!("{name}(t={t})"), mean, oracle[ti][oi], 3.0 * se));
            }
        }
        for ci in 0..names.len() {
            row.push(num(run.record.stderr[ci][ti].unwrap_or(f64::NAN)));
        }
        rows.push(row);
        oracle_rows.push(orow);
    }
    if topology == Topology::TwoReservoirs {
        // closed form against the matrix exponential
        let mut worst: f64 = 0.0;
        for (ti, &t) in times.iter().enumerate() {
            let (a, b, c) = newton_cooling(
                spec.t_minus.value(),
                f0.temperature(),
                spec.t_plus.value(),
                spec.mu,
                spec.m,
                spec.n,
                t,
            );
            for (x, y) in [a, b, c].iter().zip(&oracle[ti]) {
                worst = worst.max((x - y).abs());
            }
        }
        metrics.push(Metric::check("closed_form_vs_matrix(max)", worst, 0.0, 1e-10));
    }
    let mut oheader = vec!["t"];
    oheader.extend(&names);
    write_csv(&out.join("energies.csv"), &header, &rows)?;
    write_csv(&out.join("oracle.csv"), &oheader, &oracle_rows)?;
    Ok(Summary::new("newton-cooling", metrics))
}

fn thermostat_relaxation(cfg: &Config, out: &Path) -> Result<Summary> {
    let topology = cfg.topology("topology")?;
    let count = topology.thermostats();
    if count == 0 {
        return Err(ExperimentError::Invalid("thermostat-relaxation needs a thermostat topology".into()));
    }
    let spec = generator(cfg, topology, cfg.usize("m")?, 0, cfg.f64("t_plus")?, cfg.f64("t_minus")?)?;
    let f0 = cfg.law("f0")?;
    let times = cfg.f64_list("times")?;
    let req = EnsembleRequest::new(cfg.usize("k")?, times.clone(), vec![Observable::EnergySystem], cfg.u64("seed")?);
    let run = run_ensemble(&spec, &f0, &req).map_err(compute)?;
    let target = if count == 2 { (spec.t_plus.value() + spec.t_minus.value()) / 2.0 } else { spec.t_plus.value() };
    let rate = count as f64 * spec.mu / 3.0;
    let e0 = f0.temperature();
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (ti, &t) in times.iter().enumerate() {
        let mean = run.record.mean[0][ti];
        let se = run.record.stderr[0][ti].unwrap_or(f64::NAN);
        let gap = mean - target;
        let exact = target + (e0 - target) * (-rate * t).exp();
        rows.push(vec![num(t), num(mean), num(se), num(exact)]);
        if gap * (e0 - target) > 0.0 {
            xs.push(t);
            ys.push((gap / (e0 - target)).ln());
        }
    }
    write_csv(&out.join("energies.csv"), &["t", "e_S", "stderr_e_S", "exact_e_S"], &rows)?;
    if xs.len() < 3 {
        return Err(ExperimentError::Computation("fewer than three usable points for the fit".into()));
    }
    let fit = linear_fit(&xs, &ys);
    let tol = cfg.f64("rate_tolerance")?;
    Ok(Summary::new(
        "thermostat-relaxation",
        vec![
            Metric::check("fitted_slope", fit.slope, -rate, tol * rate),
            Metric::info("slope_stderr", fit.slope_stderr),
            Metric::info("fit_points", xs.len() as f64),
        ],
    ))
}

fn equilibrium_invariance(cfg: &Config, out: &Path) -> Result<Summary> {
    let topology = cfg.topology("topology")?;
    let temp = cfg.f64("temperature")?;
    let n = if topology.reservoirs() > 0 { cfg.usize("n")? } else { 0 };
    let spec = generator(cfg, topology, cfg.usize("m")?, n, temp, temp)?;
    let t = Temperature::new(temp).map_err(compute)?;
    let times = cfg.f64_list("times")?;
    let last = *times.last().expect("non-empty list");
    let channels = energy_channels(topology);
    let seed = cfg.u64("seed")?;
    let req = EnsembleRequest::new(cfg.usize("k")?, times.clone(), channels.clone(), seed)
        .with_snapshots(vec![last], vec![Block::System]);
    let run = run_ensemble(&spec, &ProductMaxwellian(t), &req).map_err(compute)?;
    let sig = cfg.f64("sigmas")?;
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    for (ti, &time) in times.iter().enumerate() {
        let mut row = vec![num(time)];
        for (ci, c) in channels.iter().enumerate() {
            let mean = run.record.mean[ci][ti];
            let se = run.record.stderr[ci][ti].unwrap_or(f64::NAN);
            row.push(num(mean));
            row.push(num(se));
            if time > 0.0 {
                metrics.push(Metric::check(format!("{}(t={time})", c.name()), mean, temp, sig * se));
            }
        }
        rows.push(row);
    }
    let mut header = vec!["t".to_string()];
    for c in &channels {
        header.push(c.name().into());
        header.push(format!("stderr_{}", c.name()));
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("energies.csv"), &h, &rows)?;
    let snap = &run.snapshots[0].replicas;
    write_snapshot_csv(&out.join("system_snapshot.csv"), snap).map_err(compute)?;
    let observed: Vec<f64> = snap.iter().map(|s| s[0].x).collect();
    let mut rng = RandomSource::new(seed ^ 0xfeed, u64::MAX);
    let reference: Vec<f64> = (0..observed.len()).map(|_| sample_maxwellian(t, &mut rng).x).collect();
    let ks = ks_two_sample(&observed, &reference);
    metrics.push(Metric::check("ks_p_value(min)", ks.p_value, cfg.f64("ks_alpha")?, 0.0));
    Ok(Summary::new("equilibrium-invariance", metrics))
}

#[derive(Debug, Clone, Serialize)]
struct ScalingRow {
    n: usize,
    estimate: D2Estimate,
    decoupled_fraction: f64,
}

fn reservoir_scaling(cfg: &Config, out: &Path) -> Result<Summary> {
    let topology = cfg.topology("topology")?;
    if topology.reservoirs() == 0 {
        return Err(ExperimentError::Invalid("scaling needs a reservoir topology".into()));
    }
    let temp = cfg.f64("temperature")?;
    let m = cfg.usize("m")?;
    let ns = cfg.usize_list("ns")?;
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::Invalid("ns must be strictly increasing".into()));
    }
    let f0 = cfg.law("f0")?;
    let copies = cfg.usize("symmetry_copies")?.max(1);
    let seed = cfg.u64("seed")?;
    let grid = CharFunGrid::structured(3 * m).map_err(compute)?;
    let mut results = Vec::new();
    for &n in &ns {
        let spec = generator(cfg, topology, m, n, temp, temp)?;
        let c = run_coupled_systems(&spec, &f0, cfg.usize("k")?, cfg.f64("t")?, seed).map_err(compute)?;
        let (a, b) = symmetry_copies(&c.reservoir, &c.thermostat, copies, seed ^ n as u64);
        let est = paired_d2_grouped(&flatten(&a), &flatten(&b), copies, &grid, true).map_err(compute)?;
        results.push(ScalingRow { n, estimate: est, decoupled_fraction: c.decoupled_fraction });
    }
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let e = &r.estimate;
            vec![
                r.n.to_string(),
                num(e.value),
                num(e.stderr),
                e.trusted.to_string(),
                num(e.upper_bound),
                num(e.surrogate.unwrap_or(f64::NAN)),
                num(e.noise_floor_radius),
                num(r.decoupled_fraction),
            ]
        })
        .collect();
    write_csv(
        &out.join("scaling.csv"),
        &["n", "d2", "stderr", "trusted", "upper_bound", "surrogate", "noise_floor_radius", "decoupled_fraction"],
        &rows,
    )?;
    write_jsonl(&out.join("d2.jsonl"), &results)?;
    let (metrics, ok) = scaling_metrics(&results.iter().map(|r| (r.n, r.estimate.clone())).collect::<Vec<_>>(), cfg.f64("min_decrease")?);
    Ok(Summary::new("reservoir-vs-thermostat-scaling", metrics).with_extra_gate(ok))
}

/// Monotonicity and decrease checks on a sequence of `d₂` estimates.
///
/// An unresolved estimate at a larger `N` is replaced by its upper bound,
/// which can only make the checks harder to pass; the first estimate must
/// be resolved.
pub fn scaling_metrics(results: &[(usize, D2Estimate)], min_decrease: f64) -> (Vec<Metric>, bool) {
    let eff = |e: &D2Estimate| if e.trusted { e.value } else { e.upper_bound };
    let mut metrics = Vec::new();
    for (n, e) in results {
        metrics.push(Metric::info(format!("d2(N={n})"), e.value));
        metrics.push(Metric::info(format!("stderr(N={n})"), e.stderr));
        metrics.push(Metric::info(format!("trusted(N={n})"), f64::from(u8::from(e.trusted))));
        metrics.push(Metric::info(format!("upper_bound(N={n})"), e.upper_bound));
    }
    for w in results.windows(2) {
        let (n0, a) = &w[0];
        let (n1, b) = &w[1];
        let base = if a.trusted { a.value } else { a.upper_bound };
        let tol = 3.0 * (a.stderr.powi(2) + if b.trusted { b.stderr.powi(2) } else { 0.0 }).sqrt();
        metrics.push(Metric::check(format!("increase_N{n0}_to_N{n1}(max)"), eff(b) - base, 0.0, tol));
    }
    let first = &results[0].1;
    let last = &results[results.len() - 1].1;
    let factor = if eff(last) > 0.0 { first.value / eff(last) } else { f64::INFINITY };
    metrics.push(Metric::check("decrease_factor(min)", factor, min_decrease, 0.0));
    (metrics, first.trusted)
}

fn d2_gaussian_oracle(cfg: &Config, out: &Path) -> Result<Summary> {
    let n = cfg.usize("samples")?;
    let (t1, t2) = (cfg.f64("t1")?, cfg.f64("t2")?);
    let (g1, g2) = (Temperature::new(t1).map_err(compute)?, Temperature::new(t2).map_err(compute)?);
    let seed = cfg.u64("seed")?;
    let draw = |t: Temperature, stream: u64| -> Vec<Vec<Vec3>> {
        let mut rng = RandomSource::new(seed, stream);
        (0..n).map(|_| vec![sample_maxwellian(t, &mut rng)]).collect()
    };
    let (s1, s2) = (draw(g1, 0), draw(g2, 1));
    let grid = CharFunGrid::structured(3).map_err(compute)?;
    let c1 = empirical_cf(&flatten(&s1), &grid, true).map_err(compute)?;
    let c2 = empirical_cf(&flatten(&s2), &grid, true).map_err(compute)?;
    let sampled = d2_estimate(CfInput::Empirical(&c1), CfInput::Empirical(&c2), &grid).map_err(compute)?;
    let half = d2_estimate(CfInput::Empirical(&c1), CfInput::Gaussian(g2), &grid).map_err(compute)?;
    let exact = d2_estimate(CfInput::Gaussian(g1), CfInput::Gaussian(g2), &grid).map_err(compute)?;
    write_jsonl(&out.join("d2.jsonl"), &[&sampled, &half, &exact])?;
    let want = (t1 - t2).abs() / 2.0;
    let tol = cfg.f64("tolerance")?;
    Ok(Summary::new(
        "d2-gaussian-oracle",
        vec![
            Metric::check("d2_sampled_vs_sampled", sampled.value, want, tol),
            Metric::check("d2_sampled_vs_exact", half.value, want, tol),
            Metric::check("d2_exact_vs_exact", exact.value, want, 1e-3 * want.max(1e-12)),
            Metric::info("stderr_sampled", sampled.stderr),
        ],
    ))
}

fn diff_t(cfg: &Config, out: &Path) -> Result<Summary> {
    let spec = generator(cfg, Topology::TwoThermostats, cfg.usize("m")?, 0, cfg.f64("t_plus")?, cfg.f64("t_minus")?)?;
    let rep = diff_t_check(&spec, &cfg.law("f0")?, cfg.usize("k")?, cfg.f64("t")?, cfg.u64("seed")?).map_err(compute)?;
    write_jsonl(&out.join("d2.jsonl"), &[&rep])?;
    Ok(Summary::new(
        "diffT-check",
        vec![
            Metric::check("d2_to_plus(max)", rep.to_plus.value, rep.bound, 3.0 * rep.to_plus.stderr),
            Metric::check("d2_to_minus(max)", rep.to_minus.value, rep.bound, 3.0 * rep.to_minus.stderr),
        ],
    ))
}

fn inequality_verify(cfg: &Config, out: &Path) -> Result<Summary> {
    let xis = cfg.f64_list("xis")?;
    let ns = cfg.usize_list("ns")?;
    let sqrt_ns = cfg.usize_list("sqrt_n_ns")?;
    if ns.iter().chain(&sqrt_ns).any(|&n| !(1..=6).contains(&n)) {
        return Err(ExperimentError::Invalid("interlaced sums are evaluated for 1 <= N <= 6".into()));
    }
    let kind = match cfg.get("envelope") {
        "rational" => EnvelopeKind::Rational,
        "gaussian" => EnvelopeKind::Gaussian,
        other => return Err(Config::bad("envelope", format!("unknown envelope '{other}'"))),
    };
    let env = Envelope { kind, t: cfg.f64("envelope_t")? };
    if !env.validate() {
        return Err(Config::bad("envelope_t", "envelope exceeds 1/(1+T|eta|^2)"));
    }
    let opts = DnOptions { restarts: cfg.usize("restarts")?, seed: cfg.u64("seed")?, ..DnOptions::default() };
    let mut reports: Vec<VerificationReport> = Vec::new();
    let mut metrics = Vec::new();
    for h in library() {
        let a = check_dn_le_d1(&h, &xis, &ns, &env, &opts);
        let b = check_claim_hr(&h, &cfg.f64_list("small_xi_xis")?);
        let c = check_prop5(&h, &xis, &ns, &env, &opts);
        let e = check_stimal(&h, &cfg.f64_list("gradient_xis")?);
        let l3 = check_prop5new(&h, &xis, &sqrt_ns, &env, &opts);
        let flag = |r: &VerificationReport| f64::from(u8::from(r.pass));
        metrics.push(Metric::check(format!("{}:dN_le_d1_zero", h.name), flag(&a), 1.0, 0.0));
        metrics.push(Metric::check(format!("{}:small_xi_constant", h.name), flag(&b), 1.0, 0.0));
        metrics.push(Metric::check(format!("{}:cube_root_constant_stable", h.name), flag(&c), 1.0, 0.0));
        if c.applicable {
            metrics.push(Metric::info(format!("{}:cube_root_constant", h.name), c.empirical_constant.unwrap_or(f64::NAN)));
        }
        metrics.push(Metric::check(format!("{}:gradient_ratio", h.name), flag(&e), 1.0, 0.0));
        metrics.push(Metric::check(format!("{}:sqrt_n_constant_finite", h.name), flag(&l3.upper), 1.0, 0.0));
        let holding = l3.lower.sweep.iter().filter(|p| p.holds).count();
        metrics.push(Metric::info(format!("{}:sqrt_n_lower_points_holding", h.name), holding as f64));
        metrics.push(Metric::info(format!("{}:sqrt_n_lower_points", h.name), l3.lower.sweep.len() as f64));
        reports.extend([a, b, c, e, l3.upper, l3.lower]);
    }
    let fam = gradient_family();
    let (ratio, r2, r4) = sqrt_n_growth(&fam, cfg.f64("growth_xi")?, &env, &opts);
    let tol = cfg.f64("growth_tolerance")?;
    metrics.push(Metric::check("gradient_family:growth_N4_over_N2(min)", ratio, 2f64.sqrt() * (1.0 - tol), 0.0));
    metrics.push(Metric::info("gradient_family:dN(N=2)", r2.value));
    metrics.push(Metric::info("gradient_family:dN(N=4)", r4.value));
    write_jsonl(&out.join("reports.jsonl"), &reports)?;
    Ok(Summary::new("inequality-verify", metrics))
}

fn rotational_average(cfg: &Config, out: &Path) -> Result<Summary> {
    let samples = cfg.usize("samples")?;
    let t = Temperature::new(cfg.f64("temperature")?).map_err(compute)?;
    let f0 = cfg.law("f0")?;
    let seed = cfg.u64("seed")?;
    let mut cases = Vec::new();
    for c in cfg.get("cases").split(',') {
        let (k, n) = c
            .split_once(':')
            .and_then(|(k, n)| Some((k.trim().parse::<usize>().ok()?, n.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| Config::bad("cases", "expected k:N pairs"))?;
        cases.push((k, n, format!("k={k},N={n}")));
    }
    let (m, n) = (cfg.usize("one_reservoir_m")?, cfg.usize("one_reservoir_n")?);
    if m > 0 {
        cases.push((m, n + m, format!("one_reservoir(M={m},N={n},P={})", n + m)));
    }
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    for (i, (k, n, label)) in cases.iter().enumerate() {
        let rep = verify_rota_bound(&f0, *k, *n, t, samples, seed.wrapping_add(i as u64)).map_err(compute)?;
        match (rep.ratio, rep.ratio_stderr) {
            (Some(r), Some(se)) => metrics.push(Metric::check(format!("ratio[{label}](max)"), r, rep.bound, 3.0 * se)),
            _ => metrics.push(Metric::info(format!("vacuous[{label}]"), 1.0)),
        }
        reports.push(rep);
    }
    write_jsonl(&out.join("reports.jsonl"), &reports)?;
    Ok(Summary::new("rotational-average", metrics))
}

fn moment_closure(cfg: &Config, out: &Path) -> Result<Summary> {
    let mut metrics = Vec::new();
    // degree two: the block energies under two reservoirs
    let spec = generator(cfg, Topology::TwoReservoirs, cfg.usize("m")?, cfg.usize("n")?, cfg.f64("t_plus")?, cfg.f64("t_minus")?)?;
    let newton = build_matrix(&spec, &energy_basis(&spec)).map_err(compute)?;
    write_text(&out.join("newton_matrix.csv"), &newton.to_csv())?;
    let mismatches = newton_mismatches(&newton, &spec);
    metrics.push(Metric::check("newton_coefficient_mismatches", mismatches as f64, 0.0, 0.0));

    // degree four under thermostats
    let topology = cfg.topology("closure_topology")?;
    if topology.reservoirs() > 0 {
        return Err(ExperimentError::Invalid("the fourth-moment closure runs under thermostats or alone".into()));
    }
    let cspec = generator(cfg, topology, cfg.usize("closure_m")?, 0, cfg.f64("t_plus")?, cfg.f64("t_minus")?)?;
    let closure = fourth_moment_closure(&cspec).map_err(compute)?;
    write_text(&out.join("closure_matrix.csv"), &closure.to_csv())?;
    let f0 = cfg.law("f0")?;
    let m0: Vec<f64> = closure
        .basis
        .iter()
        .map(|p| f0.expectation(p).map(|x| x.to_f64().unwrap_or(f64::NAN)))
        .collect::<Result<_>>()?;
    let steps = cfg.usize("steps")?.max(1);
    let horizon = cfg.f64("horizon")?;
    let times: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
    let traj = moment_trajectory(&closure, &m0, &times).map_err(compute)?;
    let channel: Vec<usize> = ["sum_vx^4", "sum_vy^4", "sum_vz^4"]
        .iter()
        .map(|n| closure.names.iter().position(|x| x == n).expect("seed channels are kept"))
        .collect();
    let mc = cspec.m as f64;
    let e4_at = |m: &[f64]| e4_from_fourth_moments(&channel.iter().map(|&i| m[i] / mc).collect::<Vec<_>>());
    let e4_0 = e4_at(&m0);
    let mut rows = Vec::new();
    let mut sup: f64 = 0.0;
    for (t, m) in times.iter().zip(&traj) {
        let e4 = e4_at(m);
        sup = sup.max(e4);
        rows.push(vec![num(*t), num(e4), num(m[channel[0]] / mc), num(m[channel[1]] / mc), num(m[channel[2]] / mc)]);
    }
    write_csv(&out.join("e4.csv"), &["t", "e4", "m4_x", "m4_y", "m4_z"], &rows)?;
    metrics.push(Metric::info("closure_dimension", closure.dim() as f64));
    metrics.push(Metric::info("e4_initial", e4_0));
    metrics.push(Metric::check("e4_sup_over_initial(max)", sup / e4_0, cfg.f64("e4_factor")?, 0.0));
    Ok(Summary::new("moment-closure", metrics))
}

/// Count entries of the energy generator matrix that differ from the exact
/// Newton coefficients `a = μM/(3N)`, `b = μ/3`.
fn newton_mismatches(g: &GeneratorMatrix, spec: &GeneratorSpec) -> usize {
    let mu = rational_from_f64(spec.mu);
    let a = mu.clone() * BigRational::from_integer(spec.m.into()) / BigRational::from_integer((3 * spec.n).into());
    let b = mu / BigRational::from_integer(3.into());
    let z = BigRational::zero();
    let two = BigRational::from_integer(2.into());
    // column k holds the coordinates of L(b_k) in the basis (e₋, e_S, e₊)
    let want = [
        [-a.clone(), b.clone(), z.clone()],
        [a.clone(), -(b.clone() * two), a.clone()],
        [z, b, -a],
    ];
    let mut bad = 0;
    for (r, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            if g.entry(r, c) != w {
                bad += 1;
            }
        }
    }
    bad + usize::from(g.names != ["e_minus", "e_S", "e_plus"])
}

/// Monte Carlo `E[(σ·ω)²]` for a fixed unit `σ` and uniform `ω ∈ S²`.
pub fn sphere_second_moment(draws: usize, seed: u64) -> (f64, f64) {
    let chunks = 64usize;
    let per = draws.div_ceil(chunks);
    let sigma = Vec3::new(1.0, 2.0, -2.0) * (1.0 / 3.0);
    use rayon::prelude::*;
    let parts: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RandomSource::new(seed, c as u64);
            let count = per.min(draws.saturating_sub(c * per));
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x = sigma.dot(sample_unit_sphere(&mut rng)).powi(2);
                s += x;
                s2 += x * x;
            }
            (s, s2, count)
        })
        .collect();
    let (s, s2, n) = parts.iter().fold((0.0, 0.0, 0usize), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean) * nf / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

/// Default output directory for an experiment.
pub fn default_out_dir(experiment: &str) -> PathBuf {
    PathBuf::from("results").join(experiment)
}
